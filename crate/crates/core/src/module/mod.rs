//! Module trees: atoms, bonds, composition, concatenation and the arithmetic
//! built on top of them.
//!
//! A [`Module`] is an immutable, cheaply clonable handle to a tree node. Every
//! node carries its mass, sensitivity and shape metadata, computed once at
//! construction. Weights live outside the tree in a [`WeightVector`] with one
//! leaf per atom in depth-first order; a subtree reused in several places
//! (as in [`power`]) gets independent weights at each occurrence.

mod eval;
mod exact;
mod kinds;
mod value;

pub use eval::{backward, forward, forward_traced, initialize, vjp, Trace};
pub use exact::ExactReal;
pub use kinds::{AtomKind, BondKind, Mask, NormKind, MASK_NEG};
pub use value::{Space, Value, WeightVector};

use crate::error::{invalid, Error, Result};
use crate::norm::LeafScale;
use std::fmt;
use std::sync::{Arc, OnceLock};

/// Node variants. Compound children are ordered input side first.
#[derive(Debug)]
pub enum NodeKind {
    Atom(AtomKind),
    Bond(BondKind),
    /// `second ∘ first`.
    Compose {
        first: Module,
        second: Module,
    },
    /// `(left, right)`, output flattened into one tuple.
    Concat {
        left: Module,
        right: Module,
    },
    /// The `h`-times broadcast of `inner` over a leading axis.
    Broadcast {
        inner: Module,
        h: usize,
    },
}

#[derive(Debug)]
struct Node {
    kind: NodeKind,
    mass: f64,
    sensitivity: f64,
    exact: Option<ExactReal>,
    atoms: usize,
    input: Space,
    output: Space,
    preserves_shape: bool,
    scale_cache: OnceLock<Result<Vec<LeafScale>>>,
}

#[derive(Debug, Clone)]
pub struct Module(Arc<Node>);

/// The compound combinator of a node, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combinator {
    Compose,
    Concat,
}

impl Module {
    pub(crate) fn scale_cache(&self) -> &OnceLock<Result<Vec<LeafScale>>> {
        &self.0.scale_cache
    }

    fn from_node(node: Node) -> Module {
        Module(Arc::new(node))
    }

    /// An atom with unit mass and unit sensitivity.
    pub fn atom(kind: AtomKind) -> Result<Module> {
        kind.validate()?;
        let input = kind.declared_input();
        let output = kind.transfer(&input)?;
        Ok(Module::from_node(Node {
            scale_cache: OnceLock::new(),
            kind: NodeKind::Atom(kind),
            mass: 1.0,
            sensitivity: 1.0,
            exact: Some(ExactReal::one()),
            atoms: 1,
            input,
            output,
            preserves_shape: false,
        }))
    }

    pub fn linear(d_out: usize, d_in: usize) -> Result<Module> {
        Module::atom(AtomKind::Linear { d_out, d_in })
    }

    pub fn embed(n: usize, d: usize) -> Result<Module> {
        Module::atom(AtomKind::Embed {
            n,
            d,
            positional: false,
        })
    }

    /// Embedding of sequence positions `0..n`; see [`AtomKind::Embed`].
    pub fn positional_embed(n: usize, d: usize) -> Result<Module> {
        Module::atom(AtomKind::Embed {
            n,
            d,
            positional: true,
        })
    }

    pub fn conv2d(d_out: usize, d_in: usize, k: usize) -> Result<Module> {
        Module::atom(AtomKind::Conv2d { d_out, d_in, k })
    }

    /// A massless, weightless bond.
    pub fn bond(kind: BondKind) -> Result<Module> {
        kind.validate()?;
        let exact = kind.exact_sensitivity();
        Module::bond_with(kind, exact)
    }

    fn bond_with(kind: BondKind, exact: Option<ExactReal>) -> Result<Module> {
        let input = kind.declared_input();
        let output = kind.transfer(&input)?;
        Ok(Module::from_node(Node {
            scale_cache: OnceLock::new(),
            sensitivity: kind.sensitivity(),
            preserves_shape: kind.preserves_shape(),
            kind: NodeKind::Bond(kind),
            mass: 0.0,
            exact,
            atoms: 0,
            input,
            output,
        }))
    }

    pub fn identity() -> Module {
        Module::bond(BondKind::Identity).expect("valid bond")
    }

    pub fn mul(a: f64) -> Result<Module> {
        Module::bond(BondKind::Mul { a })
    }

    /// Scalar multiplication by an exactly known constant.
    pub fn mul_exact(a: &ExactReal) -> Module {
        Module::bond_with(BondKind::Mul { a: a.to_f64() }, Some(a.abs())).expect("valid bond")
    }

    pub fn add() -> Module {
        Module::bond(BondKind::Add).expect("valid bond")
    }

    pub fn abs() -> Module {
        Module::bond(BondKind::Abs).expect("valid bond")
    }

    pub fn relu() -> Module {
        Module::bond(BondKind::Relu).expect("valid bond")
    }

    pub fn scaled_relu() -> Module {
        Module::bond(BondKind::ScaledRelu).expect("valid bond")
    }

    pub fn gelu() -> Module {
        Module::bond(BondKind::Gelu).expect("valid bond")
    }

    pub fn scaled_gelu() -> Module {
        Module::bond(BondKind::ScaledGelu).expect("valid bond")
    }

    pub fn mean_subtract() -> Module {
        Module::bond(BondKind::MeanSubtract { axes: 1 }).expect("valid bond")
    }

    pub fn rms_divide() -> Module {
        Module::bond(BondKind::RmsDivide { axes: 1 }).expect("valid bond")
    }

    pub fn layer_norm() -> Module {
        Module::bond(BondKind::LayerNorm { axes: 1 }).expect("valid bond")
    }

    pub fn func_attention(ell: usize, d_q: usize, d_v: usize, mask: Mask) -> Result<Module> {
        Module::bond(BondKind::FuncAttention {
            ell,
            d_q,
            d_v,
            mask,
        })
    }

    pub fn avg_pool() -> Module {
        Module::bond(BondKind::AvgPool).expect("valid bond")
    }

    pub fn flatten(axes: usize) -> Result<Module> {
        Module::bond(BondKind::Flatten { axes })
    }

    pub fn add_heads(h: usize) -> Result<Module> {
        Module::bond(BondKind::AddHeads { h })
    }

    pub fn remove_heads(h: usize) -> Result<Module> {
        Module::bond(BondKind::RemoveHeads { h })
    }

    /// Returns this atom with a different mass. Zero mass freezes it.
    pub fn with_mass(&self, mass: f64) -> Result<Module> {
        if !(mass >= 0.0 && mass.is_finite()) {
            return Err(invalid(format!(
                "mass must be finite and nonnegative, got {mass}"
            )));
        }
        match &self.0.kind {
            NodeKind::Atom(kind) => {
                let mut m = Module::atom(kind.clone())?;
                Arc::get_mut(&mut m.0).expect("fresh node").mass = mass;
                Ok(m)
            }
            _ => Err(invalid(
                "with_mass applies to atoms; use tare for compounds",
            )),
        }
    }

    pub fn kind(&self) -> &NodeKind {
        &self.0.kind
    }

    pub fn mass(&self) -> f64 {
        self.0.mass
    }

    pub fn sensitivity(&self) -> f64 {
        self.0.sensitivity
    }

    /// The sensitivity as an exact algebraic number, when every constituent
    /// sensitivity is exactly known.
    pub fn exact_sensitivity(&self) -> Option<&ExactReal> {
        self.0.exact.as_ref()
    }

    /// Number of atoms, i.e. of weight-vector leaves.
    pub fn atom_count(&self) -> usize {
        self.0.atoms
    }

    pub fn input_space(&self) -> &Space {
        &self.0.input
    }

    pub fn output_space(&self) -> &Space {
        &self.0.output
    }

    pub fn is_atom(&self) -> bool {
        matches!(self.0.kind, NodeKind::Atom(_))
    }

    pub fn is_bond(&self) -> bool {
        matches!(self.0.kind, NodeKind::Bond(_))
    }

    pub fn combinator(&self) -> Option<Combinator> {
        match self.0.kind {
            NodeKind::Compose { .. } => Some(Combinator::Compose),
            NodeKind::Concat { .. } => Some(Combinator::Concat),
            _ => None,
        }
    }

    pub fn children(&self) -> Vec<&Module> {
        match &self.0.kind {
            NodeKind::Compose { first, second } => vec![first, second],
            NodeKind::Concat { left, right } => vec![left, right],
            NodeKind::Broadcast { inner, .. } => vec![inner],
            _ => vec![],
        }
    }

    pub fn broadcast_factor(&self) -> usize {
        match self.0.kind {
            NodeKind::Broadcast { h, .. } => h,
            _ => 1,
        }
    }

    /// Atoms and their masses in weight-vector order.
    pub fn atoms(&self) -> Vec<(AtomKind, f64)> {
        let mut out = Vec::with_capacity(self.atom_count());
        self.collect_atoms(&mut out);
        out
    }

    fn collect_atoms(&self, out: &mut Vec<(AtomKind, f64)>) {
        match &self.0.kind {
            NodeKind::Atom(k) => out.push((k.clone(), self.0.mass)),
            NodeKind::Bond(_) => {}
            _ => self
                .children()
                .into_iter()
                .for_each(|c| c.collect_atoms(out)),
        }
    }

    /// Output space produced from the given input space.
    pub fn transfer(&self, input: &Space) -> Result<Space> {
        match &self.0.kind {
            NodeKind::Atom(k) => k.transfer(input),
            NodeKind::Bond(k) => k.transfer(input),
            NodeKind::Compose { first, second } => second.transfer(&first.transfer(input)?),
            NodeKind::Concat { left, right } => {
                Ok(Space::pair(&left.transfer(input)?, &right.transfer(input)?))
            }
            NodeKind::Broadcast { inner, .. } => inner.transfer(input),
        }
    }

    /// True when both handles point at the same node.
    pub fn ptr_eq(&self, other: &Module) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Rebuilds the tree with every mass multiplied by `factor`.
    fn rescaled(&self, factor: f64) -> Module {
        match &self.0.kind {
            NodeKind::Atom(_) => self.with_mass(self.0.mass * factor).expect("valid mass"),
            NodeKind::Bond(_) => self.clone(),
            NodeKind::Compose { first, second } => {
                build_compose(second.rescaled(factor), first.rescaled(factor))
                    .expect("shapes already checked")
            }
            NodeKind::Concat { left, right } => {
                build_concat(left.rescaled(factor), right.rescaled(factor))
                    .expect("shapes already checked")
            }
            NodeKind::Broadcast { inner, h } => {
                broadcast(&inner.rescaled(factor), *h).expect("valid factor")
            }
        }
    }
}

fn product(a: &Option<ExactReal>, b: &Option<ExactReal>) -> Option<ExactReal> {
    Some(a.as_ref()?.mul(b.as_ref()?))
}

fn sum(a: &Option<ExactReal>, b: &Option<ExactReal>) -> Option<ExactReal> {
    Some(a.as_ref()?.add(b.as_ref()?))
}

fn build_compose(second: Module, first: Module) -> Result<Module> {
    let output = second.transfer(first.output_space()).map_err(|e| match e {
        Error::Structure(msg) => {
            Error::Structure(format!("cannot compose {second} after {first}: {msg}"))
        }
        other => other,
    })?;
    let input = if first.0.preserves_shape {
        first.input_space().unify(second.input_space())?
    } else {
        first.input_space().clone()
    };
    Ok(Module::from_node(Node {
        scale_cache: OnceLock::new(),
        mass: first.mass() + second.mass(),
        sensitivity: first.sensitivity() * second.sensitivity(),
        exact: product(&first.0.exact, &second.0.exact),
        atoms: first.atom_count() + second.atom_count(),
        preserves_shape: first.0.preserves_shape && second.0.preserves_shape,
        input,
        output,
        kind: NodeKind::Compose { first, second },
    }))
}

fn build_concat(left: Module, right: Module) -> Result<Module> {
    let input = left.input_space().unify(right.input_space()).map_err(|_| {
        Error::Structure(format!(
            "cannot concatenate {left} and {right}: inputs {} and {} differ",
            left.input_space(),
            right.input_space()
        ))
    })?;
    let output = Space::pair(&left.transfer(&input)?, &right.transfer(&input)?);
    Ok(Module::from_node(Node {
        scale_cache: OnceLock::new(),
        mass: left.mass() + right.mass(),
        sensitivity: left.sensitivity() + right.sensitivity(),
        exact: sum(&left.0.exact, &right.0.exact),
        atoms: left.atom_count() + right.atom_count(),
        preserves_shape: false,
        input,
        output,
        kind: NodeKind::Concat { left, right },
    }))
}

/// `m2 ∘ m1`: apply `m1`, then `m2`.
pub fn compose(m2: &Module, m1: &Module) -> Result<Module> {
    build_compose(m2.clone(), m1.clone())
}

/// `(m1, m2)`: both applied to the same input; outputs form a tuple.
pub fn concat(m1: &Module, m2: &Module) -> Result<Module> {
    build_concat(m1.clone(), m2.clone())
}

/// `m1 + m2 = Add ∘ (m1, m2)`.
pub fn add(m1: &Module, m2: &Module) -> Result<Module> {
    compose(&Module::add(), &concat(m1, m2)?)
}

/// `a * m = Mul_a ∘ m`.
pub fn scalar_mul(a: f64, m: &Module) -> Result<Module> {
    compose(&Module::mul(a)?, m)
}

/// `a * m` with an exactly known scalar.
pub fn scalar_mul_exact(a: &ExactReal, m: &Module) -> Result<Module> {
    compose(&Module::mul_exact(a), m)
}

/// `m^L = m ∘ m^(L-1)` with `m^0 = Identity`.
pub fn power(m: &Module, l: usize) -> Result<Module> {
    let mut out = Module::identity();
    for i in 0..l {
        out = if i == 0 { m.clone() } else { compose(m, &out)? };
    }
    Ok(out)
}

/// The residual block `((L-1)/L) * Identity + (1/L) * m`.
pub fn residual_block(m: &Module, l: usize) -> Result<Module> {
    if l == 0 {
        return Err(invalid("residual depth must be at least 1"));
    }
    let l = l as i64;
    add(
        &scalar_mul_exact(&ExactReal::rational(l - 1, l), &Module::identity())?,
        &scalar_mul_exact(&ExactReal::rational(1, l), m)?,
    )
}

/// `Res_L(m) = residual_block(m, L)^L`.
pub fn residual(m: &Module, l: usize) -> Result<Module> {
    power(&residual_block(m, l)?, l)
}

/// Resets the mass of `m` to `mass`, rescaling every descendant so that
/// internal proportions are preserved.
pub fn tare(m: &Module, mass: f64) -> Result<Module> {
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(invalid(format!("tare mass must be positive, got {mass}")));
    }
    if m.mass() == 0.0 {
        return Err(invalid("cannot tare a module of zero mass"));
    }
    Ok(m.rescaled(mass / m.mass()))
}

/// The `h`-times broadcast of `m` over a leading axis.
pub fn broadcast(m: &Module, h: usize) -> Result<Module> {
    if h == 0 {
        return Err(invalid("broadcast factor must be at least 1"));
    }
    Ok(Module::from_node(Node {
        scale_cache: OnceLock::new(),
        kind: NodeKind::Broadcast {
            inner: m.clone(),
            h,
        },
        mass: m.mass(),
        sensitivity: m.sensitivity(),
        exact: m.0.exact.clone(),
        atoms: m.atom_count(),
        input: m.input_space().clone(),
        output: m.output_space().clone(),
        preserves_shape: m.0.preserves_shape,
    }))
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0.kind {
            NodeKind::Atom(k) => write!(f, "{k}"),
            NodeKind::Bond(k) => write!(f, "{k}"),
            NodeKind::Compose { first, second } => write!(f, "{second} ∘ {first}"),
            NodeKind::Concat { left, right } => write!(f, "({left}, {right})"),
            NodeKind::Broadcast { inner, h } => {
                if inner.combinator().is_some() {
                    write!(f, "[{inner}]^({h})")
                } else {
                    write!(f, "{inner}^({h})")
                }
            }
        }
    }
}

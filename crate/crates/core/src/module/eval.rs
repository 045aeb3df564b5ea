//! Forward evaluation and reverse-mode differentiation over module trees.

use super::kinds::AtomKind;
use super::{Module, NodeKind, Value, WeightVector};
use crate::error::{Error, Result};
use crate::tensor::{
    orthogonal_conv_init, orthogonal_init, seeded_rng, unit_ball_gaussian_init, Tensor,
};
use rand::RngCore;

/// Intermediate values recorded by [`forward_traced`] for [`backward`].
#[derive(Debug, Clone)]
pub struct Trace(Node);

#[derive(Debug, Clone)]
enum Node {
    Leaf(Value),
    Compose(Box<Node>, Box<Node>),
    Concat {
        left: Box<Node>,
        right: Box<Node>,
        left_arity: usize,
        left_tuple: bool,
        right_tuple: bool,
    },
    Broadcast(Box<Node>),
}

fn check_count(m: &Module, w: &WeightVector) -> Result<()> {
    if w.len() != m.atom_count() {
        return Err(Error::Structure(format!(
            "module has {} atoms but weight vector has {} leaves",
            m.atom_count(),
            w.len()
        )));
    }
    Ok(())
}

pub fn forward(m: &Module, w: &WeightVector, x: &Value) -> Result<Value> {
    check_count(m, w)?;
    fwd(m, w.leaves(), x)
}

fn fwd(m: &Module, leaves: &[Tensor], x: &Value) -> Result<Value> {
    match m.kind() {
        NodeKind::Atom(k) => k.forward(&leaves[0], x),
        NodeKind::Bond(k) => k.forward(x),
        NodeKind::Compose { first, second } => {
            let (l1, l2) = leaves.split_at(first.atom_count());
            fwd(second, l2, &fwd(first, l1, x)?)
        }
        NodeKind::Concat { left, right } => {
            let (l1, l2) = leaves.split_at(left.atom_count());
            let mut parts = fwd(left, l1, x)?.into_components();
            parts.extend(fwd(right, l2, x)?.into_components());
            Ok(Value::Tuple(parts))
        }
        NodeKind::Broadcast { inner, .. } => fwd(inner, leaves, x),
    }
}

/// Forward pass that also records what [`backward`] needs.
pub fn forward_traced(m: &Module, w: &WeightVector, x: &Value) -> Result<(Value, Trace)> {
    check_count(m, w)?;
    let (y, t) = fwd_traced(m, w.leaves(), x)?;
    Ok((y, Trace(t)))
}

fn fwd_traced(m: &Module, leaves: &[Tensor], x: &Value) -> Result<(Value, Node)> {
    match m.kind() {
        NodeKind::Atom(k) => Ok((k.forward(&leaves[0], x)?, Node::Leaf(x.clone()))),
        NodeKind::Bond(k) => Ok((k.forward(x)?, Node::Leaf(x.clone()))),
        NodeKind::Compose { first, second } => {
            let (l1, l2) = leaves.split_at(first.atom_count());
            let (mid, t1) = fwd_traced(first, l1, x)?;
            let (y, t2) = fwd_traced(second, l2, &mid)?;
            Ok((y, Node::Compose(Box::new(t1), Box::new(t2))))
        }
        NodeKind::Concat { left, right } => {
            let (l1, l2) = leaves.split_at(left.atom_count());
            let (a, t1) = fwd_traced(left, l1, x)?;
            let (b, t2) = fwd_traced(right, l2, x)?;
            let node = Node::Concat {
                left: Box::new(t1),
                right: Box::new(t2),
                left_arity: a.arity(),
                left_tuple: matches!(a, Value::Tuple(_)),
                right_tuple: matches!(b, Value::Tuple(_)),
            };
            let mut parts = a.into_components();
            parts.extend(b.into_components());
            Ok((Value::Tuple(parts), node))
        }
        NodeKind::Broadcast { inner, .. } => {
            let (y, t) = fwd_traced(inner, leaves, x)?;
            Ok((y, Node::Broadcast(Box::new(t))))
        }
    }
}

/// Pulls the output cotangent `g` back through a traced forward pass,
/// returning `(gᵀ∇_w M, gᵀ∇_x M)`.
pub fn backward(
    m: &Module,
    w: &WeightVector,
    trace: &Trace,
    g: &Value,
) -> Result<(WeightVector, Value)> {
    check_count(m, w)?;
    let mut grads: Vec<Tensor> = vec![Tensor::zeros(&[0]); w.len()];
    let gx = back(m, w.leaves(), &trace.0, g, &mut grads)?;
    Ok((WeightVector::new(grads), gx))
}

fn mismatch() -> Error {
    Error::Structure("trace does not match module".into())
}

fn back(m: &Module, leaves: &[Tensor], t: &Node, g: &Value, out: &mut [Tensor]) -> Result<Value> {
    match (m.kind(), t) {
        (NodeKind::Atom(k), Node::Leaf(x)) => {
            let (gw, gx) = k.vjp(&leaves[0], x, g)?;
            out[0] = gw;
            Ok(gx)
        }
        (NodeKind::Bond(k), Node::Leaf(x)) => k.vjp(x, g),
        (NodeKind::Compose { first, second }, Node::Compose(t1, t2)) => {
            let n1 = first.atom_count();
            let (l1, l2) = leaves.split_at(n1);
            let (o1, o2) = out.split_at_mut(n1);
            let gmid = back(second, l2, t2, g, o2)?;
            back(first, l1, t1, &gmid, o1)
        }
        (
            NodeKind::Concat { left, right },
            Node::Concat {
                left: t1,
                right: t2,
                left_arity,
                left_tuple,
                right_tuple,
            },
        ) => {
            let parts = g.components();
            if parts.len() < *left_arity {
                return Err(mismatch());
            }
            let wrap = |p: &[Tensor], tuple: bool| {
                if tuple {
                    Value::Tuple(p.to_vec())
                } else {
                    Value::Tensor(p[0].clone())
                }
            };
            let ga = wrap(&parts[..*left_arity], *left_tuple);
            let gb = wrap(&parts[*left_arity..], *right_tuple);
            let n1 = left.atom_count();
            let (l1, l2) = leaves.split_at(n1);
            let (o1, o2) = out.split_at_mut(n1);
            let gx1 = back(left, l1, t1, &ga, o1)?;
            let gx2 = back(right, l2, t2, &gb, o2)?;
            gx1.add(&gx2)
        }
        (NodeKind::Broadcast { inner, .. }, Node::Broadcast(t)) => back(inner, leaves, t, g, out),
        _ => Err(mismatch()),
    }
}

/// Vector-Jacobian product `(gᵀ∇_w M, gᵀ∇_x M)` at `(w, x)`.
pub fn vjp(m: &Module, w: &WeightVector, x: &Value, g: &Value) -> Result<(WeightVector, Value)> {
    let (_, trace) = forward_traced(m, w, x)?;
    backward(m, w, &trace, g)
}

/// Orthogonal weights for linear and convolutional atoms, unit-norm
/// Gaussian columns for embeddings; each leaf draws its own sub-seed.
pub fn initialize(m: &Module, seed: u64) -> WeightVector {
    let mut rng = seeded_rng(seed);
    WeightVector::new(
        m.atoms()
            .into_iter()
            .map(|(kind, _)| {
                let sub = rng.next_u64();
                match kind {
                    AtomKind::Linear { d_out, d_in } => orthogonal_init(d_out, d_in, sub),
                    AtomKind::Embed { n, d, .. } => unit_ball_gaussian_init(n, d, sub),
                    AtomKind::Conv2d { d_out, d_in, k } => {
                        orthogonal_conv_init(d_out, d_in, k, sub)
                    }
                }
            })
            .collect(),
    )
}

impl Module {
    pub fn forward(&self, w: &WeightVector, x: &Value) -> Result<Value> {
        forward(self, w, x)
    }

    pub fn initialize(&self, seed: u64) -> WeightVector {
        initialize(self, seed)
    }
}

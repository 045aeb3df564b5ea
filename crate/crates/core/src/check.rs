//! Random instances and derivative probes shared by the test suites and the
//! verification harness.

use crate::error::{invalid, Result};
use crate::module::{
    add, backward, compose, forward, forward_traced, residual, scalar_mul, tare, BondKind, Mask,
    Module, Value, WeightVector,
};
use crate::tensor::{finite_diff_jvp5, Tensor};
use rand::Rng;

/// Every atom and bond kind, by the name used in sharpness tables, plus the
/// positional embedding variant.
pub const KINDS: &[&str] = &[
    "linear",
    "embed",
    "positional_embed",
    "conv2d",
    "identity",
    "mul",
    "add",
    "abs",
    "relu",
    "scaled_relu",
    "gelu",
    "scaled_gelu",
    "mean_subtract",
    "rms_divide",
    "layer_norm",
    "func_attention",
    "avg_pool",
    "flatten",
    "add_heads",
    "remove_heads",
];

/// A module with weights and an input to evaluate it at.
#[derive(Debug, Clone)]
pub struct Instance {
    pub module: Module,
    pub weights: WeightVector,
    pub input: Value,
}

pub fn randn_like(v: &Value, rng: &mut impl Rng) -> Value {
    let parts: Vec<Tensor> = v
        .components()
        .iter()
        .map(|t| Tensor::randn(t.shape(), rng))
        .collect();
    match v {
        Value::Tensor(_) => Value::from_components(parts),
        Value::Tuple(_) => Value::Tuple(parts),
    }
}

pub fn randn_weights_like(w: &WeightVector, rng: &mut impl Rng) -> WeightVector {
    WeightVector::new(
        w.leaves()
            .iter()
            .map(|t| Tensor::randn(t.shape(), rng))
            .collect(),
    )
}

/// Gaussian tensor with entries pushed at least `gap` away from zero, so
/// that small probes do not straddle the kink of `abs` or `relu`.
fn randn_off_kink(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, rng).map(|v| {
        if v.abs() < gap {
            v.signum() * gap + v
        } else {
            v
        }
    })
}

/// A random instance of the named kind with small random dimensions and
/// Gaussian weights and inputs.
pub fn random_instance(kind: &str, rng: &mut impl Rng) -> Result<Instance> {
    let b = rng.random_range(1..=3);
    let d = rng.random_range(1..=6);
    let mut dim = || rng.random_range(1..=5usize);
    let (a1, a2, a3, a4) = (dim(), dim(), dim(), dim());
    let single = |m: Module, x: Tensor| (m, Value::Tensor(x));
    let (module, input) = match kind {
        "linear" => single(Module::linear(a1, a2)?, Tensor::randn(&[b, a2], rng)),
        "embed" => single(Module::embed(a1, a2)?, Tensor::randn(&[b, a1], rng)),
        "positional_embed" => single(
            Module::positional_embed(a1, a2)?,
            Tensor::randn(&[b, a1, a3], rng),
        ),
        "conv2d" => {
            let k = rng.random_range(1..=3);
            single(
                Module::conv2d(a1, a2, k)?,
                Tensor::randn(&[b, a2, a3 + 1, a4 + 1], rng),
            )
        }
        "identity" => single(Module::identity(), Tensor::randn(&[b, d], rng)),
        "mul" => {
            let a = rng.random_range(-3.0..3.0);
            single(Module::mul(a)?, Tensor::randn(&[b, d], rng))
        }
        "add" => (
            Module::add(),
            Value::Tuple(vec![
                Tensor::randn(&[b, d], rng),
                Tensor::randn(&[b, d], rng),
            ]),
        ),
        "abs" => single(Module::abs(), randn_off_kink(&[b, d], 1e-2, rng)),
        "relu" => single(Module::relu(), randn_off_kink(&[b, d], 1e-2, rng)),
        "scaled_relu" => single(Module::scaled_relu(), randn_off_kink(&[b, d], 1e-2, rng)),
        "gelu" => single(Module::gelu(), Tensor::randn(&[b, d], rng).scale(2.0)),
        "scaled_gelu" => single(
            Module::scaled_gelu(),
            Tensor::randn(&[b, d], rng).scale(2.0),
        ),
        "mean_subtract" | "rms_divide" | "layer_norm" => {
            // Groups of two are constant up to sign under layer_norm, so use three or more.
            let axes = rng.random_range(1..=2);
            let kind = match kind {
                "mean_subtract" => BondKind::MeanSubtract { axes },
                "rms_divide" => BondKind::RmsDivide { axes },
                _ => BondKind::LayerNorm { axes },
            };
            single(Module::bond(kind)?, Tensor::randn(&[b, a1, a2 + 2], rng))
        }
        "func_attention" => {
            let mask = if rng.random_bool(0.5) {
                Mask::Causal
            } else {
                Mask::Zero
            };
            let (ell, dq, dv) = (a1, a2, a3);
            (
                Module::func_attention(ell, dq, dv, mask)?,
                Value::Tuple(vec![
                    Tensor::randn(&[b, ell, dq], rng),
                    Tensor::randn(&[b, ell, dq], rng),
                    Tensor::randn(&[b, ell, dv], rng),
                ]),
            )
        }
        "avg_pool" => single(Module::avg_pool(), Tensor::randn(&[b, a1, a2, a3], rng)),
        "flatten" => single(Module::flatten(3)?, Tensor::randn(&[b, a1, a2, a3], rng)),
        "add_heads" => {
            let h = rng.random_range(1..=3);
            single(Module::add_heads(h)?, Tensor::randn(&[b, a1, h * a2], rng))
        }
        "remove_heads" => {
            let h = rng.random_range(1..=3);
            single(
                Module::remove_heads(h)?,
                Tensor::randn(&[b, h, a1, a2], rng),
            )
        }
        other => return Err(invalid(format!("unknown kind `{other}`"))),
    };
    let weights = crate::check::randn_weights_like(&module.initialize(rng.random()), rng);
    Ok(Instance {
        module,
        weights,
        input,
    })
}

/// Both sides of the duality `⟨g, ∇M ⋄ (dw, dx)⟩ = ⟨vjp(g), (dw, dx)⟩`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `⟨gᵀ∇_w M, dw⟩ + ⟨gᵀ∇_x M, dx⟩` from the hand-written backward pass.
    pub analytic: f64,
    /// `⟨g, JVP⟩` with the JVP from five-point central differences.
    pub numeric: f64,
    /// `‖g‖₂ · ‖JVP‖₂`, the natural scale of either side.
    pub scale: f64,
}

impl GradCheck {
    pub fn rel_err(&self) -> f64 {
        let diff = (self.analytic - self.numeric).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.scale.max(f64::MIN_POSITIVE)
        }
    }
}

/// Probe step for [`gradient_check`], small enough to stay clear of the
/// kinks that random instances avoid.
pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Compares the backward pass against central differences along `(dw, dx)`.
pub fn gradient_check(
    inst: &Instance,
    g: &Value,
    dw: &WeightVector,
    dx: &Value,
    eps: f64,
) -> Result<GradCheck> {
    let (m, w, x) = (&inst.module, &inst.weights, &inst.input);
    let (_, trace) = forward_traced(m, w, x)?;
    let (gw, gx) = backward(m, w, &trace, g)?;
    let analytic = gw.dot(dw)? + gx.dot(dx)?;
    let jvp = finite_diff_jvp5(
        |p: &(WeightVector, Value)| forward(m, &p.0, &p.1),
        &(w.clone(), x.clone()),
        &(dw.clone(), dx.clone()),
        eps,
    )?;
    let numeric = g.dot(&jvp)?;
    let norm = |v: &Value| {
        v.components()
            .iter()
            .map(|t| t.norm_l2().powi(2))
            .sum::<f64>()
            .sqrt()
    };
    Ok(GradCheck {
        analytic,
        numeric,
        scale: norm(g) * norm(&jvp),
    })
}

/// Runs [`gradient_check`] with random cotangent and directions.
pub fn random_gradient_check(inst: &Instance, eps: f64, rng: &mut impl Rng) -> Result<GradCheck> {
    let y = forward(&inst.module, &inst.weights, &inst.input)?;
    let g = randn_like(&y, rng);
    let dw = randn_weights_like(&inst.weights, rng);
    let dx = randn_like(&inst.input, rng);
    gradient_check(inst, &g, &dw, &dx, eps)
}

/// The atoms a random tree draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeFamily {
    /// Linear and embedding atoms on width-`d` vectors.
    Vector,
    /// Convolution atoms on `d`-channel images.
    Image,
}

fn random_atom(d: usize, family: TreeFamily, rng: &mut impl Rng) -> Result<Module> {
    let atom = match family {
        TreeFamily::Vector if rng.random_bool(0.25) => Module::embed(d, d)?,
        TreeFamily::Vector if rng.random_bool(0.2) => {
            let e = rng.random_range(1..=2 * d);
            compose(&Module::linear(d, e)?, &Module::linear(e, d)?)?
        }
        TreeFamily::Vector => Module::linear(d, d)?,
        TreeFamily::Image => Module::conv2d(d, d, [1, 3][rng.random_range(0..2)])?,
    };
    if !atom.is_atom() {
        return Ok(atom);
    }
    let mass = [0.0, 0.5, 1.0, 1.0, 2.0][rng.random_range(0..5)];
    atom.with_mass(mass)
}

fn random_bond(rng: &mut impl Rng) -> Module {
    match rng.random_range(0..5) {
        0 => Module::relu(),
        1 => Module::gelu(),
        2 => Module::abs(),
        3 => Module::rms_divide(),
        _ => Module::mean_subtract(),
    }
}

fn random_subtree(
    depth: usize,
    d: usize,
    family: TreeFamily,
    rng: &mut impl Rng,
) -> Result<Module> {
    if depth == 0 || rng.random_bool(0.2) {
        return random_atom(d, family, rng);
    }
    let sub = |rng: &mut _| random_subtree(depth - 1, d, family, rng);
    match rng.random_range(0..6) {
        0 => compose(&sub(rng)?, &sub(rng)?),
        1 => add(&sub(rng)?, &sub(rng)?),
        2 => scalar_mul(rng.random_range(0.25..2.0), &sub(rng)?),
        3 => compose(&random_bond(rng), &sub(rng)?),
        4 => residual(&sub(rng)?, rng.random_range(1..=3)),
        _ => {
            let t = sub(rng)?;
            if t.mass() > 0.0 {
                tare(&t, rng.random_range(0.5..3.0))
            } else {
                Ok(t)
            }
        }
    }
}

/// A random tree of compose, add, scalar multiple, bond, residual and tare
/// nodes of depth at most `depth`, mapping the width-`d` space to itself and
/// with positive total mass. Some atoms get zero mass.
pub fn random_tree(
    depth: usize,
    d: usize,
    family: TreeFamily,
    rng: &mut impl Rng,
) -> Result<Module> {
    if d == 0 {
        return Err(invalid("tree width must be at least 1"));
    }
    loop {
        let t = random_subtree(depth, d, family, rng)?;
        if t.mass() > 0.0 {
            return Ok(t);
        }
    }
}

/// A Gaussian input for a tree from [`random_tree`]: `[batch, d]` for
/// vector trees and `[batch, d, 4, 4]` for image trees.
pub fn random_tree_input(d: usize, batch: usize, family: TreeFamily, rng: &mut impl Rng) -> Value {
    let shape = match family {
        TreeFamily::Vector => vec![batch, d],
        TreeFamily::Image => vec![batch, d, 4, 4],
    };
    Value::Tensor(Tensor::randn(&shape, rng))
}

/// Gaussian weights shaped for every atom of `m`.
pub fn randn_weights(m: &Module, rng: &mut impl Rng) -> WeightVector {
    WeightVector::new(
        m.atoms()
            .iter()
            .map(|(k, _)| Tensor::randn(&k.weight_shape(), rng))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn random_trees_evaluate() {
        let mut rng = seeded_rng(5);
        for family in [TreeFamily::Vector, TreeFamily::Image] {
            for _ in 0..30 {
                let d = rng.random_range(2..6);
                let m = random_tree(4, d, family, &mut rng).unwrap();
                assert!(m.mass() > 0.0);
                let w = randn_weights(&m, &mut rng);
                let x = random_tree_input(d, 2, family, &mut rng);
                let y = forward(&m, &w, &x).unwrap();
                assert_eq!(y.components()[0].shape(), x.components()[0].shape());
            }
        }
    }

    #[test]
    fn every_kind_has_an_instance() {
        let mut rng = seeded_rng(0);
        for kind in KINDS {
            let inst = random_instance(kind, &mut rng).unwrap();
            forward(&inst.module, &inst.weights, &inst.input).unwrap();
        }
        assert!(random_instance("nope", &mut rng).is_err());
    }

    #[test]
    fn backward_matches_central_differences_for_every_kind() {
        let mut rng = seeded_rng(1);
        for kind in KINDS {
            let mut worst = 0.0f64;
            for _ in 0..100 {
                let inst = random_instance(kind, &mut rng).unwrap();
                let c = random_gradient_check(&inst, GRAD_CHECK_STEP, &mut rng).unwrap();
                worst = worst.max(c.rel_err());
            }
            assert!(worst <= 1e-5, "{kind}: worst relative error {worst:e}");
        }
    }

    #[test]
    fn sign_error_is_detected() {
        let mut rng = seeded_rng(2);
        let inst = random_instance("linear", &mut rng).unwrap();
        let y = forward(&inst.module, &inst.weights, &inst.input).unwrap();
        let g = randn_like(&y, &mut rng);
        let dw = randn_weights_like(&inst.weights, &mut rng);
        let dx = randn_like(&inst.input, &mut rng);
        let ok = gradient_check(&inst, &g, &dw, &dx, GRAD_CHECK_STEP).unwrap();
        let flipped = GradCheck {
            analytic: -ok.analytic,
            ..ok
        };
        assert!(ok.rel_err() < 1e-8 && flipped.rel_err() > 1e-3);
    }
}

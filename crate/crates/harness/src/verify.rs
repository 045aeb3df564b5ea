//! The property-verification suite.
//!
//! Each check draws its own random instances from a fixed seed and reports
//! the worst measured violation against a pinned tolerance.

use crate::data::synthetic_task;
use modnorm::arch::{chain, loss_and_grad, loss_eval, multi_head_attention, ArchSpec, LossKind};
use modnorm::check::{
    randn_like, randn_weights, random_gradient_check, random_instance, random_tree,
    random_tree_input, TreeFamily, GRAD_CHECK_STEP, KINDS,
};
use modnorm::module::{
    backward, compose, concat, forward, forward_traced, initialize, residual, Mask,
};
use modnorm::norm::{
    atom_norm, modular_norm, normalize, spectral_norm, svd_spectral_norm, value_norm,
    PowerIterState, PowerIteration, NORMALIZE_EPS,
};
use modnorm::optim::{Hyperparams, OptimizerState};
use modnorm::sharpness::{
    compose_sharpness, concat_sharpness, loss_smoothness, residual_sharpness, tree_sharpness,
    BroadcastMode, ComposeRule, CrossEntropyTau, ResidualMode, SharpnessTable, SharpnessTriple,
};
use modnorm::tensor::{finite_diff_bilinear, finite_diff_jvp, seeded_rng};
use modnorm::{Module, Tensor, Value, WeightVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Outcome of one named invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub measured: f64,
    /// Largest value of `measured` that passes.
    pub tolerance: f64,
    pub samples: usize,
    pub seconds: f64,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: measured {:.3e} (tolerance {:.1e}, {} samples, {:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.samples,
            self.seconds
        )?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

type Outcome = modnorm::Result<(f64, usize, String)>;

fn finish(name: &str, tolerance: f64, start: Instant, outcome: Outcome) -> CheckResult {
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok((measured, samples, detail)) => CheckResult {
            name: name.into(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            samples,
            seconds,
            detail,
        },
        Err(e) => CheckResult {
            name: name.into(),
            passed: false,
            measured: f64::INFINITY,
            tolerance,
            samples: 0,
            seconds,
            detail: format!("error: {e}"),
        },
    }
}

fn rel(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs()).max(1.0)
    }
}

fn random_family(rng: &mut ChaCha8Rng) -> TreeFamily {
    if rng.random_bool(0.25) {
        TreeFamily::Image
    } else {
        TreeFamily::Vector
    }
}

/// Normalized random updates of random trees have unit modular norm.
pub fn unit_norm(trees: usize, seed: u64) -> CheckResult {
    let start = Instant::now();
    let run = || -> Outcome {
        let mut rng = seeded_rng(seed);
        let mut worst = 0.0f64;
        let mut state = PowerIterState::converged(seed);
        for _ in 0..trees {
            let d = rng.random_range(2..8);
            let m = random_tree(4, d, random_family(&mut rng), &mut rng)?;
            let frozen: Vec<bool> = m.scales()?.iter().map(|s| s.scale.is_none()).collect();
            let mut dw = randn_weights(&m, &mut rng);
            let keep = rng.random_range(0..dw.len());
            for (i, leaf) in dw.leaves_mut().iter_mut().enumerate() {
                if i != keep && rng.random_bool(0.2) {
                    *leaf = Tensor::zeros(leaf.shape());
                }
            }
            if frozen
                .iter()
                .zip(dw.leaves())
                .all(|(f, l)| *f || l.max_abs() == 0.0)
            {
                let i = frozen
                    .iter()
                    .position(|f| !f)
                    .expect("positive mass has an unfrozen atom");
                let shape = dw.leaves()[i].shape().to_vec();
                dw.leaves_mut()[i] = Tensor::randn(&shape, &mut rng);
            }
            let u = normalize(&m, &dw, &mut state, NORMALIZE_EPS)?;
            worst = worst.max((modular_norm(&m, &u)? - 1.0).abs());
        }
        Ok((worst, trees, String::new()))
    };
    finish("unit_norm", 1e-4, start, run())
}

/// Converged power iteration against a full SVD.
pub fn power_iteration_oracle(matrices: usize, max_dim: usize, seed: u64) -> CheckResult {
    let start = Instant::now();
    let run = || -> Outcome {
        let mut rng = seeded_rng(seed);
        let mode = PowerIteration::Converged {
            min_steps: 200,
            max_steps: 50_000,
            tol: 1e-14,
        };
        let mut worst = 0.0f64;
        for i in 0..matrices {
            let (r, c) = if i == 0 {
                (max_dim, max_dim)
            } else {
                (rng.random_range(1..=max_dim), rng.random_range(1..=max_dim))
            };
            let w = Tensor::randn(&[r, c], &mut rng);
            let (est, _) = spectral_norm(&w, mode, None, &mut rng)?;
            let exact = svd_spectral_norm(&w)?;
            worst = worst.max((est - exact).abs() / exact);
        }
        Ok((worst, matrices, String::new()))
    };
    finish("power_iteration_oracle", 1e-6, start, run())
}

/// Two warm-started power-iteration steps per update track the spectral
/// norm of momentum buffers along a real training trajectory.
pub fn warm_start_tracking(burn_in: usize, steps: usize, seed: u64) -> CheckResult {
    let start = Instant::now();
    let run = || -> Outcome {
        let spec = ArchSpec::res_mlp(48, 2, 32, 10);
        let m = spec.build()?;
        let data = synthetic_task(10, 32, 512, 1, seed)
            .map_err(|e| modnorm::Error::InvalidArgument(e.to_string()))?;
        let mut w = initialize(&m, seed);
        let mut state =
            OptimizerState::new(&m, Hyperparams::default(), PowerIterState::training(seed))?;
        let mut power = PowerIterState::training(seed ^ 1);
        let scales = m.scales()?.to_vec();
        let mut rng = seeded_rng(seed);
        let mut errors = Vec::new();
        for step in 0..burn_in + steps {
            let idx: Vec<usize> = (0..64)
                .map(|_| rng.random_range(0..data.train.len()))
                .collect();
            let (x, t) = data
                .train
                .batch(&idx)
                .map_err(|e| modnorm::Error::InvalidArgument(e.to_string()))?;
            let (y, trace) = forward_traced(&m, &w, &Value::Tensor(x))?;
            let (_, g) = loss_and_grad(LossKind::CrossEntropy, y.as_tensor()?, &t)?;
            let (grad, _) = backward(&m, &w, &trace, &Value::Tensor(g))?;
            let d = state.sgd_momentum_step(&grad)?;
            let mut update = Vec::with_capacity(d.len());
            for (ls, leaf) in scales.iter().zip(d.leaves()) {
                let est = power.atom_norm(ls.leaf_index, &ls.atom, leaf)?;
                if step >= burn_in {
                    let exact = atom_norm(&ls.atom, leaf)?;
                    errors.push((est - exact).abs() / exact);
                }
                let s = ls.scale.expect("no frozen atoms");
                update.push(leaf.scale(0.05 / (s * (est + NORMALIZE_EPS))));
            }
            w = w.sub(&WeightVector::new(update))?;
        }
        let worst = errors.iter().copied().fold(0.0, f64::max);
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let over = errors.iter().filter(|e| **e > 0.01).count();
        Ok((
            worst,
            errors.len(),
            format!("[mean {mean:.2e}, {over} estimates above 1%]"),
        ))
    };
    finish("warm_start_tracking", 1e-2, start, run())
}

fn tree_triple(
    rng: &mut ChaCha8Rng,
) -> modnorm::Result<(Module, Module, Module, usize, TreeFamily)> {
    let d = rng.random_range(2..6);
    let f = random_family(rng);
    Ok((
        random_tree(2, d, f, rng)?,
        random_tree(2, d, f, rng)?,
        random_tree(2, d, f, rng)?,
        d,
        f,
    ))
}

/// Compose and concat are associative in attributes, outputs and norms.
pub fn algebra_associativity(triples: usize, weight_vectors: usize, seed: u64) -> CheckResult {
    let start = Instant::now();
    let run = || -> Outcome {
        let mut rng = seeded_rng(seed);
        let mut worst = 0.0f64;
        let mut samples = 0;
        for _ in 0..triples {
            let (a, b, c, d, f) = tree_triple(&mut rng)?;
            let mut pairs = vec![(
                compose(&compose(&c, &b)?, &a)?,
                compose(&c, &compose(&b, &a)?)?,
            )];
            if f == TreeFamily::Vector {
                pairs.push((concat(&concat(&a, &b)?, &c)?, concat(&a, &concat(&b, &c)?)?));
            }
            for (l, r) in pairs {
                worst = worst
                    .max(rel(l.mass(), r.mass()))
                    .max(rel(l.sensitivity(), r.sensitivity()));
                if l.atom_count() != r.atom_count()
                    || l.input_space() != r.input_space()
                    || l.output_space() != r.output_space()
                {
                    worst = f64::INFINITY;
                }
                for _ in 0..weight_vectors {
                    let w = randn_weights(&l, &mut rng);
                    let x = random_tree_input(d, 2, f, &mut rng);
                    let (yl, yr) = (forward(&l, &w, &x)?, forward(&r, &w, &x)?);
                    for (p, q) in yl.components().iter().zip(yr.components()) {
                        worst = worst.max(p.sub(q)?.max_abs());
                    }
                    worst = worst.max(rel(modular_norm(&l, &w)?, modular_norm(&r, &w)?));
                    worst = worst.max(rel(l.norm(&w)?, r.norm(&w)?));
                    samples += 1;
                }
            }
        }
        Ok((worst, samples, String::new()))
    };
    finish("algebra_associativity", 1e-12, start, run())
}

fn random_triple(rng: &mut ChaCha8Rng) -> modnorm::Result<SharpnessTriple> {
    SharpnessTriple::new(
        rng.random_range(0.0..2.0),
        rng.random_range(0.0..2.0),
        rng.random_range(0.0..2.0),
        rng.random_range(0.1..3.0),
        rng.random_range(0.1..3.0),
    )
}

fn triple_diff(a: &SharpnessTriple, b: &SharpnessTriple) -> f64 {
    a.components()
        .iter()
        .zip(b.components())
        .map(|(x, y)| rel(*x, y))
        .fold(0.0, f64::max)
}

/// The sharpness compose and concat rules are associative. `rule` replaces
/// the compose rule, so that a broken rule can be shown to fail.
pub fn sharpness_associativity(draws: usize, rule: ComposeRule, seed: u64) -> CheckResult {
    let start = Instant::now();
    let run = || -> Outcome {
        let mut rng = seeded_rng(seed);
        let mut worst = 0.0f64;
        for _ in 0..draws {
            let (t1, t2, t3) = (
                random_triple(&mut rng)?,
                random_triple(&mut rng)?,
                random_triple(&mut rng)?,
            );
            let l = rule(&rule(&t1, &t2)?, &t3)?;
            let r = rule(&t1, &rule(&t2, &t3)?)?;
            worst = worst.max(triple_diff(&l, &r));
            let l = concat_sharpness(&concat_sharpness(&t1, &t2)?, &t3)?;
            let r = concat_sharpness(&t1, &concat_sharpness(&t2, &t3)?)?;
            worst = worst.max(triple_diff(&l, &r));
        }
        Ok((worst, draws, String::new()))
    };
    finish("sharpness_associativity", 1e-12, start, run())
}

/// The default compose rule, for [`sharpness_associativity`].
pub const COMPOSE_RULE: ComposeRule = compose_sharpness;

fn jvp_w(m: &Module, w: &WeightVector, x: &Value, dw: &WeightVector) -> modnorm::Result<Value> {
    finite_diff_jvp(|p: &WeightVector| forward(m, p, x), w, dw, 1e-6)
}

fn unit_rows(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let t = Tensor::randn(shape, rng);
    let d = *shape.last().expect("non-empty shape");
    let mut data = t.into_data();
    for row in data.chunks_mut(d) {
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / d as f64).sqrt();
        row.iter_mut().for_each(|v| *v /= rms);
    }
    Tensor::new(shape.to_vec(), data).expect("same size")
}

/// Weight and input Jacobians of initialized networks respect the norm and
/// sensitivity, and each atom's share of the output change respects its
/// share of the mass.
pub fn well_normed(directions: usize, seed: u64) -> CheckResult {
    let start = Instant::now();
    let run = || -> Outcome {
        let mut rng = seeded_rng(seed);
        let models = [
            (ArchSpec::res_mlp(16, 2, 16, 8).build()?, vec![4, 16]),
            (
                multi_head_attention(8, 2, 4, 4, 4, Mask::Causal)?,
                vec![2, 4, 8],
            ),
        ];
        let names = ["resmlp", "attention"];
        let mut worst = f64::NEG_INFINITY;
        let mut samples = 0;
        let mut detail = String::new();
        for (k, (m, in_shape)) in models.iter().enumerate() {
            let w = initialize(m, seed + k as u64);
            let masses: Vec<f64> = m.atoms().iter().map(|(_, mass)| *mass).collect();
            let per_model = directions.div_ceil(models.len());
            let mut slack = [f64::NEG_INFINITY; 3];
            for _ in 0..per_model {
                let x =
                    Value::Tensor(unit_rows(in_shape, &mut rng).scale(rng.random_range(0.5..1.0)));
                let dw = randn_weights(m, &mut rng);
                let dx = Value::Tensor(Tensor::randn(in_shape, &mut rng));
                let norm_dw = modular_norm(m, &dw)?;
                let mut record =
                    |i: usize, lhs: f64, rhs: f64| slack[i] = slack[i].max((lhs - rhs) / rhs);
                record(0, value_norm(&jvp_w(m, &w, &x, &dw)?, 1)?, norm_dw);
                let jx = finite_diff_jvp(|p: &Value| forward(m, &w, p), &x, &dx, 1e-6)?;
                record(
                    1,
                    value_norm(&jx, 1)?,
                    m.sensitivity() * value_norm(&dx, 1)?,
                );
                for (i, mass) in masses.iter().enumerate() {
                    let mut only = dw.zeros_like();
                    only.leaves_mut()[i] = dw.leaves()[i].clone();
                    record(
                        2,
                        value_norm(&jvp_w(m, &w, &x, &only)?, 1)?,
                        mass / m.mass() * norm_dw,
                    );
                }
                samples += 1;
            }
            detail.push_str(&format!(
                "[{}: weight {:.2e}, input {:.2e}, mass {:.2e}]",
                names[k], slack[0], slack[1], slack[2]
            ));
            let model_worst = slack.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            worst = worst.max(model_worst);
        }
        Ok((worst.max(0.0), samples, detail))
    };
    finish("well_normed", 1e-5, start, run())
}

/// The residual sharpness recurrence matches its closed form, which stays
/// below the depth-independent bound.
pub fn residual_sharpness_check(max_depth: usize, draws: usize, seed: u64) -> CheckResult {
    let start = Instant::now();
    let run = || -> Outcome {
        let mut rng = seeded_rng(seed);
        let mut worst = 0.0f64;
        let ones = SharpnessTriple::new(1.0, 1.0, 1.0, 1.0, 1.0)?;
        let l2 = residual_sharpness(&ones, 2, ResidualMode::ClosedForm)?;
        worst = worst.max(triple_diff(
            &l2,
            &SharpnessTriple::new(1.625, 1.25, 1.0, 1.0, 2.0)?,
        ));
        let mut samples = 0;
        for i in 0..draws {
            let t = if i == 0 {
                ones
            } else {
                SharpnessTriple::new(
                    rng.random_range(0.0..2.0),
                    rng.random_range(0.0..2.0),
                    rng.random_range(0.0..2.0),
                    1.0,
                    rng.random_range(0.1..3.0),
                )?
            };
            let bound = residual_sharpness(&t, 1, ResidualMode::Bound)?;
            for l in 1..=max_depth {
                let c = residual_sharpness(&t, l, ResidualMode::ClosedForm)?;
                let r = residual_sharpness(&t, l, ResidualMode::Recurrence)?;
                worst = worst.max(triple_diff(&c, &r));
                for (x, y) in c.components().iter().zip(bound.components()) {
                    if *x > y {
                        worst = worst.max(x - y);
                    }
                }
                samples += 1;
            }
        }
        Ok((worst, samples, String::new()))
    };
    finish("residual_sharpness", 1e-10, start, run())
}

/// Functional attention has unit sensitivity and sharpness 3 on inputs of
/// unit infinity-RMS norm.
pub fn attention_bounds(pairs: usize, seed: u64) -> CheckResult {
    let start = Instant::now();
    let run = || -> Outcome {
        let mut rng = seeded_rng(seed);
        let mut worst = f64::NEG_INFINITY;
        let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for _ in 0..pairs {
            let ell = rng.random_range(1..=8);
            let d = rng.random_range(1..=16);
            let mask = if rng.random_bool(0.5) {
                Mask::Causal
            } else {
                Mask::Zero
            };
            let m = Module::func_attention(ell, d, d, mask)?;
            let input = |rng: &mut ChaCha8Rng| -> Tensor {
                let t = unit_rows(&[ell, d], rng);
                let s: Vec<f64> = (0..ell).map(|_| rng.random_range(0.0..=1.0)).collect();
                let data = t
                    .data()
                    .chunks(d)
                    .zip(&s)
                    .flat_map(|(r, s)| r.iter().map(move |v| v * s))
                    .collect();
                Tensor::new(vec![ell, d], data).expect("same size")
            };
            let x = Value::Tuple(vec![input(&mut rng), input(&mut rng), input(&mut rng)]);
            let dir = |rng: &mut ChaCha8Rng| {
                Value::Tuple(
                    (0..3)
                        .map(|_| Tensor::randn(&[ell, d], rng).scale(rng.random_range(0.0..=1.0)))
                        .collect(),
                )
            };
            let (d1, d2) = (dir(&mut rng), dir(&mut rng));
            let f = |p: &Value| forward(&m, &WeightVector::new(vec![]), p);
            let (n1, n2) = (value_norm(&d1, 1)?, value_norm(&d2, 1)?);
            let j = value_norm(&finite_diff_jvp(f, &x, &d1, 1e-6)?, 1)?;
            first = first.max(j - n1);
            let h = value_norm(&finite_diff_bilinear(f, &x, &d1, &d2, 1e-4)?, 1)?;
            second = second.max(h - 3.0 * n1 * n2);
            worst = worst.max(first).max(second);
        }
        Ok((
            worst.max(0.0),
            pairs,
            format!("[first-order excess {first:.2e}, second-order excess {second:.2e}]"),
        ))
    };
    finish("attention_bounds", 1e-3, start, run())
}

fn zeros_like(v: &Value) -> Value {
    let parts: Vec<Tensor> = v
        .components()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    match v {
        Value::Tensor(_) => Value::from_components(parts),
        Value::Tuple(_) => Value::Tuple(parts),
    }
}

/// Second-derivative probes of small well-normed compounds, with weights in
/// their unit balls and inputs of row RMS at most one, stay below the
/// propagated sharpness triple.
pub fn sharpness_probes(directions: usize, seed: u64) -> CheckResult {
    let start = Instant::now();
    let run = || -> Outcome {
        let mut rng = seeded_rng(seed);
        let table = SharpnessTable::default();
        let mlp = chain(&[Module::linear(8, 6)?, Module::gelu(), Module::linear(5, 8)?])?;
        let block = chain(&[
            Module::linear(6, 6)?,
            Module::scaled_gelu(),
            Module::linear(6, 6)?,
        ])?;
        let models = [
            (mlp, vec![3, 6]),
            (residual(&block, 3)?, vec![3, 6]),
            (
                multi_head_attention(8, 2, 4, 4, 4, Mask::Causal)?,
                vec![2, 4, 8],
            ),
        ];
        let mut excess = [f64::NEG_INFINITY; 3];
        let mut samples = 0;
        for (m, in_shape) in &models {
            let t = tree_sharpness(m, &table, BroadcastMode::Linf)?;
            let mut w = initialize(m, rng.random());
            for ((kind, _), leaf) in m.atoms().iter().zip(w.leaves_mut()) {
                let n = atom_norm(kind, leaf)?;
                *leaf = leaf.scale(rng.random_range(0.5..=1.0) / n);
            }
            for _ in 0..directions.div_ceil(models.len()) {
                let x =
                    Value::Tensor(unit_rows(in_shape, &mut rng).scale(rng.random_range(0.5..=1.0)));
                let (dw1, dw2) = (randn_weights(m, &mut rng), randn_weights(m, &mut rng));
                let (dx1, dx2) = (randn_like(&x, &mut rng), randn_like(&x, &mut rng));
                let (nw1, nw2) = (modular_norm(m, &dw1)?, modular_norm(m, &dw2)?);
                let (nx1, nx2) = (value_norm(&dx1, 1)?, value_norm(&dx2, 1)?);
                let f = |p: &(WeightVector, Value)| forward(m, &p.0, &p.1);
                let at = (w.clone(), x.clone());
                let (zw, zx) = (dw1.zeros_like(), zeros_like(&x));
                let ww = finite_diff_bilinear(
                    f,
                    &at,
                    &(dw1.clone(), zx.clone()),
                    &(dw2, zx.clone()),
                    1e-4,
                )?;
                let wx = finite_diff_bilinear(
                    f,
                    &at,
                    &(dw1, zx.clone()),
                    &(zw.clone(), dx1.clone()),
                    1e-4,
                )?;
                let xx = finite_diff_bilinear(f, &at, &(zw.clone(), dx1), &(zw, dx2), 1e-4)?;
                excess[0] = excess[0].max(value_norm(&ww, 1)? - t.alpha * nw1 * nw2);
                excess[1] = excess[1].max(value_norm(&wx, 1)? - t.beta * nw1 * nx1);
                excess[2] = excess[2].max(value_norm(&xx, 1)? - t.gamma * nx1 * nx2);
                samples += 1;
            }
        }
        let worst = excess.iter().copied().fold(0.0, f64::max);
        Ok((
            worst,
            samples,
            format!(
                "[excess ww {:.2e}, wx {:.2e}, xx {:.2e}]",
                excess[0], excess[1], excess[2]
            ),
        ))
    };
    finish("sharpness_probes", 1e-3, start, run())
}

/// Loss smoothness in the modular norm on small residual networks whose
/// weights lie in their unit balls.
pub fn loss_smoothness_check(directions: usize, seed: u64) -> CheckResult {
    let start = Instant::now();
    let run = || -> Outcome {
        let mut rng = seeded_rng(seed);
        let table = SharpnessTable::default();
        let data = synthetic_task(8, 12, 64, 1, seed)
            .map_err(|e| modnorm::Error::InvalidArgument(e.to_string()))?;
        let (x, t) = data
            .train
            .batch(&(0..16).collect::<Vec<_>>())
            .map_err(|e| modnorm::Error::InvalidArgument(e.to_string()))?;
        let x = Value::Tensor(x);
        let mut worst = 0.0f64;
        let mut samples = 0;
        let nets = [(16, 2), (8, 4), (32, 1)];
        for (k, (width, depth)) in nets.iter().enumerate() {
            let m = ArchSpec::res_mlp(*width, *depth, 12, 8).build()?;
            let alpha = tree_sharpness(&m, &table, BroadcastMode::Linf)?;
            let mut w = randn_weights(&m, &mut rng);
            for ((kind, _), leaf) in m.atoms().iter().zip(w.leaves_mut()) {
                let n = atom_norm(kind, leaf)?;
                *leaf = leaf.scale(rng.random_range(0.5..=1.0) / n);
            }
            for kind in [LossKind::Square, LossKind::CrossEntropy] {
                let loss_at = |p: &WeightVector| -> modnorm::Result<f64> {
                    loss_eval(kind, forward(&m, p, &x)?.as_tensor()?, &t)
                };
                let (y, trace) = forward_traced(&m, &w, &x)?;
                let (l0, g) = loss_and_grad(kind, y.as_tensor()?, &t)?;
                let (grad, _) = backward(&m, &w, &trace, &Value::Tensor(g))?;
                let est = loss_smoothness(&alpha, kind, l0, 8, CrossEntropyTau::default())?;
                for _ in 0..directions.div_ceil(2 * nets.len()) {
                    let dir = randn_weights(&m, &mut rng);
                    let r = 0.1 * rng.random_range(0.0..=1.0f64).max(1e-3);
                    let dw = dir.scale(r / modular_norm(&m, &dir)?);
                    let lhs = (loss_at(&w.add(&dw)?)? - l0 - grad.dot(&dw)?).abs();
                    let rhs = 0.5 * est.lipschitz * r * r;
                    worst = worst.max(lhs / rhs);
                    samples += 1;
                }
            }
            let _ = k;
        }
        Ok((worst, samples, "[worst ratio to the bound]".into()))
    };
    finish("loss_smoothness", 1.0, start, run())
}

/// Hand-written backward passes agree with central differences for every
/// atom and bond kind.
pub fn gradients(instances: usize, seed: u64) -> CheckResult {
    let start = Instant::now();
    let run = || -> Outcome {
        let mut rng = seeded_rng(seed);
        let mut worst = 0.0f64;
        let mut worst_kind = "";
        for kind in KINDS {
            for _ in 0..instances {
                let inst = random_instance(kind, &mut rng)?;
                let e = random_gradient_check(&inst, GRAD_CHECK_STEP, &mut rng)?.rel_err();
                if e > worst {
                    worst = e;
                    worst_kind = kind;
                }
            }
        }
        Ok((
            worst,
            instances * KINDS.len(),
            format!("[worst kind {worst_kind}]"),
        ))
    };
    finish("gradients", 1e-5, start, run())
}

/// How thoroughly to run the suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

/// Runs every check at the given level.
pub fn run_suite(level: Level, seed: u64) -> Vec<CheckResult> {
    let full = level == Level::Full;
    let n = |fast: usize, full_n: usize| if full { full_n } else { fast };
    vec![
        unit_norm(n(20, 100), seed),
        power_iteration_oracle(n(10, 50), n(32, 64), seed),
        warm_start_tracking(10, n(20, 50), seed),
        algebra_associativity(n(5, 20), n(5, 20), seed),
        sharpness_associativity(n(200, 1000), COMPOSE_RULE, seed),
        well_normed(n(200, 1000), seed),
        residual_sharpness_check(64, n(5, 20), seed),
        attention_bounds(n(500, 5000), seed),
        sharpness_probes(n(60, 300), seed),
        loss_smoothness_check(n(200, 1000), seed),
        gradients(n(20, 100), seed),
    ]
}

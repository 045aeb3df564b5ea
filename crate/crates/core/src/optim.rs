//! Base optimizers, the normed-update wrapper and the learning-rate schedule.

use crate::error::{invalid, Result};
use crate::module::{Module, WeightVector};
use crate::norm::{normalize, PowerIterState, NORMALIZE_EPS};
use crate::tensor::Tensor;

/// The optimizer whose update direction gets normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseOptimizer {
    Sgd,
    Adam,
}

impl BaseOptimizer {
    pub fn name(self) -> &'static str {
        match self {
            BaseOptimizer::Sgd => "sgd",
            BaseOptimizer::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(BaseOptimizer::Sgd),
            "adam" => Ok(BaseOptimizer::Adam),
            other => Err(invalid(format!(
                "unknown optimizer {other:?}, expected sgd or adam"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    /// SGD momentum.
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub eps_norm: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            beta: 0.9,
            beta1: 0.9,
            beta2: 0.99,
            eps_adam: 1e-8,
            eps_norm: NORMALIZE_EPS,
        }
    }
}

/// Per-run optimizer state: moment buffers, step count and power-iteration
/// warm starts.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    step: u64,
    momentum: WeightVector,
    first: WeightVector,
    second: WeightVector,
    frozen: Vec<bool>,
    pub power_iter: PowerIterState,
    pub hyper: Hyperparams,
}

impl OptimizerState {
    pub fn new(m: &Module, hyper: Hyperparams, power_iter: PowerIterState) -> Result<Self> {
        let zeros = WeightVector::new(
            m.atoms()
                .iter()
                .map(|(k, _)| Tensor::zeros(&k.weight_shape()))
                .collect(),
        );
        let frozen = m.scales()?.iter().map(|s| s.scale.is_none()).collect();
        Ok(OptimizerState {
            step: 0,
            momentum: zeros.clone(),
            first: zeros.clone(),
            second: zeros,
            frozen,
            power_iter,
            hyper,
        })
    }

    /// Number of base steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Heavy-ball momentum: `b ← βb + g`, returning `b`.
    pub fn sgd_momentum_step(&mut self, grad: &WeightVector) -> Result<WeightVector> {
        self.momentum.check_same_structure(grad)?;
        self.momentum = self.momentum.axpby(self.hyper.beta, grad, 1.0)?;
        self.step += 1;
        Ok(self.momentum.clone())
    }

    /// Bias-corrected Adam direction `m̂ / (√v̂ + eps)`.
    pub fn adam_step(&mut self, grad: &WeightVector) -> Result<WeightVector> {
        self.first.check_same_structure(grad)?;
        let Hyperparams {
            beta1,
            beta2,
            eps_adam,
            ..
        } = self.hyper;
        self.first = self.first.axpby(beta1, grad, 1.0 - beta1)?;
        self.second = self.second.axpby(beta2, &grad.mul(grad)?, 1.0 - beta2)?;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let leaves = self
            .first
            .leaves()
            .iter()
            .zip(self.second.leaves())
            .map(|(m, v)| {
                let data = m
                    .data()
                    .iter()
                    .zip(v.data())
                    .map(|(m, v)| (m / c1) / ((v / c2).sqrt() + eps_adam));
                Tensor::new(m.shape().to_vec(), data.collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WeightVector::new(leaves))
    }

    pub fn base_step(&mut self, base: BaseOptimizer, grad: &WeightVector) -> Result<WeightVector> {
        let mut d = match base {
            BaseOptimizer::Sgd => self.sgd_momentum_step(grad)?,
            BaseOptimizer::Adam => self.adam_step(grad)?,
        };
        for (leaf, frozen) in d.leaves_mut().iter_mut().zip(&self.frozen) {
            if *frozen {
                *leaf = Tensor::zeros(leaf.shape());
            }
        }
        Ok(d)
    }

    /// `lr · normalize(base_step(grad))`. The caller applies `w ← w − update`.
    pub fn normed_update(
        &mut self,
        m: &Module,
        grad: &WeightVector,
        base: BaseOptimizer,
        lr: f64,
    ) -> Result<WeightVector> {
        self.update(m, grad, base, lr, true)
    }

    /// `lr · base_step(grad)` without normalization.
    pub fn unnormed_update(
        &mut self,
        m: &Module,
        grad: &WeightVector,
        base: BaseOptimizer,
        lr: f64,
    ) -> Result<WeightVector> {
        self.update(m, grad, base, lr, false)
    }

    pub fn update(
        &mut self,
        m: &Module,
        grad: &WeightVector,
        base: BaseOptimizer,
        lr: f64,
        normed: bool,
    ) -> Result<WeightVector> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(invalid(format!(
                "learning rate must be finite and non-negative, got {lr}"
            )));
        }
        let d = self.base_step(base, grad)?;
        let d = if normed {
            normalize(m, &d, &mut self.power_iter, self.hyper.eps_norm)?
        } else {
            d
        };
        Ok(d.scale(lr))
    }
}

/// `lr0 · (1 − step / total_steps)`.
pub fn lr_linear_decay(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(invalid(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    Ok(lr0 * (1.0 - step as f64 / total_steps as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::module::{compose, initialize};
    use crate::norm::modular_norm;
    use crate::tensor::seeded_rng;

    fn model() -> Module {
        compose(
            &Module::linear(3, 4).unwrap(),
            &compose(&Module::relu(), &Module::linear(4, 5).unwrap()).unwrap(),
        )
        .unwrap()
    }

    fn grad(m: &Module, seed: u64) -> WeightVector {
        let mut rng = seeded_rng(seed);
        WeightVector::new(
            m.atoms()
                .iter()
                .map(|(k, _)| Tensor::randn(&k.weight_shape(), &mut rng))
                .collect(),
        )
    }

    fn state(m: &Module) -> OptimizerState {
        OptimizerState::new(m, Hyperparams::default(), PowerIterState::training(0)).unwrap()
    }

    #[test]
    fn momentum_examples() {
        let m = model();
        let g = grad(&m, 1);
        let mut s = state(&m);
        assert_eq!(s.sgd_momentum_step(&g).unwrap(), g);
        let u = s.sgd_momentum_step(&g).unwrap();
        let expect = g.scale(1.9);
        for (a, b) in u.leaves().iter().zip(expect.leaves()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-14);
            }
        }
        let zero = g.zeros_like();
        let mut last = u.clone();
        for _ in 0..5 {
            let next = s.sgd_momentum_step(&zero).unwrap();
            assert_eq!(next, last.scale(0.9));
            last = next;
        }
        assert_eq!(s.step(), 7);
    }

    #[test]
    fn adam_examples() {
        let m = model();
        let g = grad(&m, 2);
        let mut s = state(&m);
        let u = s.adam_step(&g).unwrap();
        for (a, b) in u.leaves().iter().zip(g.leaves()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y / (y.abs() + 1e-8)).abs() < 1e-12);
            }
        }
        let mut fresh = state(&m);
        let z = fresh.adam_step(&g.zeros_like()).unwrap();
        assert!(z
            .leaves()
            .iter()
            .all(|t| t.data().iter().all(|x| *x == 0.0)));
        for _ in 0..500 {
            s.adam_step(&g).unwrap();
        }
        let u = s.adam_step(&g).unwrap();
        for (a, b) in u.leaves().iter().zip(g.leaves()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y.signum()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn structure_mismatch_is_an_error() {
        let m = model();
        let mut s = state(&m);
        let bad = WeightVector::new(vec![Tensor::zeros(&[1, 1])]);
        assert!(s.sgd_momentum_step(&bad).is_err());
        assert!(s.adam_step(&bad).is_err());
    }

    #[test]
    fn normed_update_has_norm_lr() {
        let m = model();
        let mut w = initialize(&m, 3);
        let mut s = state(&m);
        assert!(s
            .normed_update(&m, &grad(&m, 4), BaseOptimizer::Adam, 0.0)
            .unwrap()
            .leaves()
            .iter()
            .all(|t| t.max_abs() == 0.0));
        let g0 = grad(&m, 6);
        for i in 0..20 {
            let lr = 0.05;
            let g = g0.axpby(1.0, &grad(&m, 10 + i), 0.1).unwrap();
            let u = s.normed_update(&m, &g, BaseOptimizer::Sgd, lr).unwrap();
            let r = modular_norm(&m, &u).unwrap() / lr;
            if i > 2 {
                assert!((r - 1.0).abs() < 1e-2, "step {i}: {r}");
            }
            w = w.sub(&u).unwrap();
        }
        assert!(w.is_finite());
        assert!(s
            .normed_update(&m, &grad(&m, 5), BaseOptimizer::Sgd, -1.0)
            .is_err());
    }

    #[test]
    fn frozen_leaves_never_move() {
        let frozen = Module::linear(4, 5).unwrap().with_mass(0.0).unwrap();
        let m = compose(&Module::linear(3, 4).unwrap(), &frozen).unwrap();
        let mut s = state(&m);
        for (i, normed) in [(0, true), (1, false), (2, true)] {
            let u = s
                .update(&m, &grad(&m, i), BaseOptimizer::Adam, 0.1, normed)
                .unwrap();
            assert_eq!(u.leaves()[0].max_abs(), 0.0);
            assert!(u.leaves()[1].max_abs() > 0.0);
        }
    }

    #[test]
    fn linear_decay() {
        assert_eq!(lr_linear_decay(0, 100, 1.0).unwrap(), 1.0);
        assert_eq!(lr_linear_decay(50, 100, 1.0).unwrap(), 0.5);
        assert_eq!(lr_linear_decay(100, 100, 1.0).unwrap(), 0.0);
        assert!(lr_linear_decay(101, 100, 1.0).is_err());
        assert!(lr_linear_decay(0, 0, 1.0).is_err());
    }

    #[test]
    fn parse_names() {
        assert_eq!(BaseOptimizer::parse("adam").unwrap(), BaseOptimizer::Adam);
        assert!(BaseOptimizer::parse("lion").is_err());
    }
}

//! The training loop.

use crate::config::RunConfig;
use crate::data::{DataSplit, Dataset};
use crate::error::{HarnessError, Result};
use crate::records::RunRecord;
use modnorm::arch::{loss_and_grad, ArchSpec, Family, LossKind};
use modnorm::module::{backward, forward, forward_traced, initialize};
use modnorm::norm::PowerIterState;
use modnorm::optim::{lr_linear_decay, OptimizerState};
use modnorm::tensor::seeded_rng;
use modnorm::{Module, Value, WeightVector};
use rand::Rng;
use std::time::Instant;

/// Losses above this count as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Steps between logged records.
pub fn log_interval(total_steps: u64) -> u64 {
    (total_steps / 100).max(1)
}

/// The architecture a config describes, sized for the given data.
pub fn arch_for(config: &RunConfig, data: &DataSplit) -> Result<ArchSpec> {
    let shape = data.train.example_shape();
    let d_in = match config.family()? {
        Family::Gpt => config.vocab,
        _ => shape[0],
    };
    if config.family()? == Family::ResMlp && shape.len() != 1 {
        return Err(HarnessError::Config(format!(
            "resmlp needs flat examples, got shape {shape:?}"
        )));
    }
    config.arch_spec(d_in, data.train.n_classes())
}

/// Mean loss over every target in `data`, evaluated in chunks.
pub fn evaluate(model: &Module, w: &WeightVector, data: &Dataset, loss: LossKind) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, t) = data.batch(chunk)?;
        let y = forward(model, w, &Value::Tensor(x))?.into_tensor()?;
        total += modnorm::arch::loss_eval(loss, &y, &t)? * t.len() as f64;
        count += t.len();
    }
    Ok(total / count as f64)
}

fn diverged(loss: f64) -> bool {
    !loss.is_finite() || loss > DIVERGENCE_THRESHOLD
}

/// Trains one model and returns its records: one per log interval, with the
/// test loss on the last. Each record's train loss averages the minibatch
/// losses since the previous record. A run whose loss diverges stops with a
/// record whose train loss is infinite.
pub fn train_run(config: &RunConfig, data: &DataSplit) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let start = Instant::now();
    let spec = arch_for(config, data)?;
    let model = spec
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let loss_kind = config.loss_kind()?;
    let base = config.base_optimizer()?;
    let mut w = initialize(&model, config.seed);
    let power = PowerIterState::new(
        config.power_iteration(),
        config.seed ^ 0x9e37_79b9_7f4a_7c15,
    );
    let mut state = OptimizerState::new(&model, config.hyperparams(), power)?;
    let mut rng = seeded_rng(config.seed.wrapping_add(1));
    let interval = log_interval(config.steps);
    let record = |step: u64, train_loss: f64, test_loss: Option<f64>| RunRecord {
        run_id: config.run_id.clone(),
        width: spec.width,
        depth: spec.depth,
        mass: spec.block_mass,
        lr: config.lr,
        step,
        train_loss,
        test_loss,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let mut records = Vec::new();
    let (mut window, mut window_n) = (0.0, 0u64);
    for s in 0..config.steps {
        let lr = lr_linear_decay(s, config.steps, config.lr)?;
        let idx: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..data.train.len()))
            .collect();
        let (x, t) = data.train.batch(&idx)?;
        let (y, trace) = forward_traced(&model, &w, &Value::Tensor(x))?;
        let (loss, g) = loss_and_grad(loss_kind, y.as_tensor()?, &t)?;
        if diverged(loss) {
            records.push(record(s, f64::INFINITY, None));
            return Ok(records);
        }
        let (grad, _) = backward(&model, &w, &trace, &Value::Tensor(g))?;
        let update = state.update(&model, &grad, base, lr, config.normed)?;
        w = w.sub(&update)?;
        window += loss;
        window_n += 1;
        let done = s + 1;
        if !w.is_finite() {
            records.push(record(done, f64::INFINITY, None));
            return Ok(records);
        }
        if done % interval == 0 || done == config.steps {
            let test = if done == config.steps {
                let l = evaluate(&model, &w, &data.test, loss_kind)?;
                if diverged(l) {
                    records.push(record(done, f64::INFINITY, None));
                    return Ok(records);
                }
                Some(l)
            } else {
                None
            };
            records.push(record(done, window / window_n as f64, test));
            window = 0.0;
            window_n = 0;
        }
    }
    Ok(records)
}

/// The final train loss of a run, infinite when it diverged.
pub fn final_loss(records: &[RunRecord]) -> f64 {
    records.last().map_or(f64::INFINITY, |r| r.train_loss)
}

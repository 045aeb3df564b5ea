//! Grids of training runs.

use crate::config::RunConfig;
use crate::data::DataSplit;
use crate::error::{HarnessError, Result};
use crate::records::RunRecord;
use crate::train::{final_loss, train_run};
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Axes of a sweep. Empty axes take the base config's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grid {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    /// Block masses.
    pub masses: Vec<f64>,
    pub lrs: Vec<f64>,
}

impl Grid {
    /// One config per grid cell in width, depth, mass, lr order, with
    /// `run_id` set to the cell index.
    pub fn cells(&self, base: &RunConfig) -> Result<Vec<RunConfig>> {
        if self.lrs.is_empty()
            && self.widths.is_empty()
            && self.depths.is_empty()
            && self.masses.is_empty()
        {
            return Err(HarnessError::Config("sweep grid is empty".into()));
        }
        let or = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
        let masses: Vec<Option<f64>> = if self.masses.is_empty() {
            vec![base.block_mass]
        } else {
            self.masses.iter().map(|m| Some(*m)).collect()
        };
        let lrs = if self.lrs.is_empty() {
            vec![base.lr]
        } else {
            self.lrs.clone()
        };
        let mut out = Vec::new();
        for w in or(&self.widths, base.width) {
            for d in or(&self.depths, base.depth) {
                for m in &masses {
                    for lr in &lrs {
                        let cfg = RunConfig {
                            run_id: format!("{}-{}", base.run_id, out.len()),
                            width: w,
                            depth: d,
                            block_mass: *m,
                            lr: *lr,
                            ..base.clone()
                        };
                        cfg.validate()?;
                        out.push(cfg);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Thread count from `MODNORM_THREADS`, or the rayon default.
pub fn thread_limit() -> Result<Option<usize>> {
    match std::env::var("MODNORM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(HarnessError::Config(format!(
                "MODNORM_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs every cell of the grid and concatenates the records in grid order.
pub fn sweep(
    grid: &Grid,
    base: &RunConfig,
    data: &DataSplit,
    threads: Option<usize>,
) -> Result<Vec<RunRecord>> {
    let cells = grid.cells(base)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let runs: Vec<Result<Vec<RunRecord>>> =
        pool.install(|| cells.par_iter().map(|c| train_run(c, data)).collect());
    let mut out = Vec::new();
    for r in runs {
        out.extend(r?);
    }
    Ok(out)
}

/// Key identifying a model scale: width, depth and mass bits.
pub type ScaleKey = (usize, usize, u64);

/// For each `(width, depth, mass)`, the learning rate with the lowest final
/// train loss. Diverged runs never win; scales where every run diverged are
/// omitted.
pub fn best_lrs(records: &[RunRecord]) -> BTreeMap<ScaleKey, f64> {
    let mut runs: BTreeMap<&str, Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        runs.entry(r.run_id.as_str()).or_default().push(r.clone());
    }
    let mut best: BTreeMap<ScaleKey, (f64, f64)> = BTreeMap::new();
    for recs in runs.values() {
        let last = recs.last().expect("non-empty run");
        let loss = final_loss(recs);
        if !loss.is_finite() {
            continue;
        }
        let key = (last.width, last.depth, last.mass.to_bits());
        let entry = best.entry(key).or_insert((f64::INFINITY, last.lr));
        if loss < entry.0 {
            *entry = (loss, last.lr);
        }
    }
    best.into_iter().map(|(k, (_, lr))| (k, lr)).collect()
}

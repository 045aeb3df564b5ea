//! Run configuration: a flat TOML table whose keys may be overridden from
//! the command line.

use crate::data::{load_cifar10, markov_tokens, synthetic_task, DataSplit};
use crate::error::{HarnessError, Result};
use modnorm::arch::{ArchSpec, Family, LossKind};
use modnorm::norm::{PowerIteration, NORMALIZE_EPS};
use modnorm::optim::{BaseOptimizer, Hyperparams};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub arch: String,
    pub width: usize,
    pub depth: usize,
    pub block_depth: usize,
    pub kernel: usize,
    pub heads: usize,
    pub context: usize,
    pub vocab: usize,
    /// Total mass of the residual blocks; the family default when absent.
    pub block_mass: Option<f64>,
    pub optimizer: String,
    pub normed: bool,
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: String,
    pub data_path: Option<PathBuf>,
    pub loss: String,
    pub n_classes: usize,
    pub d_in: usize,
    pub image_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub power_steps: usize,
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub eps_norm: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let h = Hyperparams::default();
        RunConfig {
            run_id: "run".into(),
            arch: "resmlp".into(),
            width: 32,
            depth: 4,
            block_depth: 2,
            kernel: 3,
            heads: 2,
            context: 16,
            vocab: 32,
            block_mass: None,
            optimizer: "adam".into(),
            normed: true,
            lr: 0.1,
            steps: 500,
            batch_size: 64,
            seed: 0,
            dataset: "synthetic".into(),
            data_path: None,
            loss: "cross_entropy".into(),
            n_classes: 10,
            d_in: 32,
            image_size: 8,
            n_train: 4096,
            n_test: 1024,
            power_steps: 2,
            beta: h.beta,
            beta1: h.beta1,
            beta2: h.beta2,
            eps_adam: h.eps_adam,
            eps_norm: NORMALIZE_EPS,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(e.to_string())
}

/// Parses a command-line value as a TOML literal, falling back to a bare
/// string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `key = value` overrides in order and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            let mut value = parse_value(v);
            if matches!(
                k.as_str(),
                "run_id" | "arch" | "optimizer" | "dataset" | "loss" | "data_path"
            ) {
                value = toml::Value::String(v.clone());
            }
            if matches!(
                k.as_str(),
                "lr" | "block_mass" | "beta" | "beta1" | "beta2" | "eps_adam" | "eps_norm"
            ) {
                if let toml::Value::Integer(i) = value {
                    value = toml::Value::Float(i as f64);
                }
            }
            table.insert(k.replace('-', "_"), value);
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config_err("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.power_steps == 0 {
            return Err(config_err("power_steps must be at least 1"));
        }
        self.family()?;
        self.base_optimizer()?;
        self.loss_kind()?;
        match self.dataset.as_str() {
            "synthetic" => {}
            "cifar10" if self.data_path.is_none() => {
                return Err(config_err("dataset cifar10 needs data_path"))
            }
            "cifar10" if self.family()? == Family::Gpt => {
                return Err(config_err("gpt cannot train on cifar10"))
            }
            "cifar10" => {}
            other => {
                return Err(config_err(format!(
                    "unknown dataset {other:?}, expected synthetic or cifar10"
                )))
            }
        }
        self.arch_spec(self.d_in_for_family(), self.d_out())?
            .validate()
            .map_err(config_err)
    }

    pub fn family(&self) -> Result<Family> {
        Family::parse(&self.arch).map_err(config_err)
    }

    pub fn base_optimizer(&self) -> Result<BaseOptimizer> {
        BaseOptimizer::parse(&self.optimizer).map_err(config_err)
    }

    pub fn loss_kind(&self) -> Result<LossKind> {
        LossKind::parse(&self.loss).map_err(config_err)
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            beta: self.beta,
            beta1: self.beta1,
            beta2: self.beta2,
            eps_adam: self.eps_adam,
            eps_norm: self.eps_norm,
        }
    }

    pub fn power_iteration(&self) -> PowerIteration {
        PowerIteration::Steps(self.power_steps)
    }

    fn d_in_for_family(&self) -> usize {
        match (self.family(), self.dataset.as_str()) {
            (Ok(Family::ResNet), _) => 3,
            (_, "cifar10") => 3072,
            _ => self.d_in,
        }
    }

    fn d_out(&self) -> usize {
        match (self.family(), self.dataset.as_str()) {
            (Ok(Family::Gpt), _) => self.vocab,
            (_, "cifar10") => 10,
            _ => self.n_classes,
        }
    }

    /// The architecture for inputs with `d_in` features (or channels) and
    /// `d_out` classes.
    pub fn arch_spec(&self, d_in: usize, d_out: usize) -> Result<ArchSpec> {
        let family = self.family()?;
        let base = match family {
            Family::ResMlp => ArchSpec::res_mlp(self.width, self.depth, d_in, d_out),
            Family::ResNet => ArchSpec::res_net(self.width, self.depth, d_in, d_out),
            Family::Gpt => {
                ArchSpec::gpt(self.width, self.depth, self.heads, self.context, self.vocab)
            }
        };
        Ok(ArchSpec {
            block_depth: self.block_depth,
            kernel: self.kernel,
            block_mass: self.block_mass.unwrap_or(base.block_mass),
            ..base
        })
    }

    /// The architecture for the configured dataset's input and output sizes.
    pub fn model_spec(&self) -> Result<ArchSpec> {
        self.arch_spec(self.d_in_for_family(), self.d_out())
    }

    /// Loads or generates the dataset described by this config, shaped for
    /// its architecture.
    pub fn load_data(&self) -> Result<DataSplit> {
        let family = self.family()?;
        match (self.dataset.as_str(), family) {
            ("synthetic", Family::Gpt) => markov_tokens(
                self.vocab,
                self.context,
                self.n_train,
                self.n_test,
                self.seed,
            ),
            ("synthetic", Family::ResNet) => {
                let s = self.image_size;
                let split = synthetic_task(
                    self.n_classes,
                    3 * s * s,
                    self.n_train,
                    self.n_test,
                    self.seed,
                )?;
                Ok(DataSplit {
                    train: split.train.reshaped(vec![3, s, s])?,
                    test: split.test.reshaped(vec![3, s, s])?,
                })
            }
            ("synthetic", Family::ResMlp) => synthetic_task(
                self.n_classes,
                self.d_in,
                self.n_train,
                self.n_test,
                self.seed,
            ),
            (_, Family::ResMlp) => {
                let split = load_cifar10(
                    self.data_path
                        .as_deref()
                        .ok_or_else(|| config_err("missing data_path"))?,
                )?;
                Ok(DataSplit {
                    train: split.train.reshaped(vec![3072])?,
                    test: split.test.reshaped(vec![3072])?,
                })
            }
            _ => load_cifar10(
                self.data_path
                    .as_deref()
                    .ok_or_else(|| config_err("missing data_path"))?,
            ),
        }
    }

    /// Every resolved setting as `(key, value)` pairs, sorted by key,
    /// including defaults and fixed choices that the config does not expose.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = match toml::Value::try_from(self) {
            Ok(toml::Value::Table(t)) => t.into_iter().map(|(k, v)| (k, v.to_string())).collect(),
            _ => Vec::new(),
        };
        let mass = self
            .arch_spec(self.d_in_for_family(), self.d_out())
            .map(|s| s.block_mass.to_string())
            .unwrap_or_default();
        out.retain(|(k, _)| k != "block_mass");
        out.push(("block_mass".into(), mass));
        out.push(("adam_bias_correction".into(), "true".into()));
        out.push(("lr_schedule".into(), "linear_decay".into()));
        out.push(("weight_decay".into(), "0".into()));
        out.push(("input_normalization".into(), "per_example_rms".into()));
        out.push(("augmentation".into(), "none".into()));
        out.sort();
        out
    }
}

//! Datasets: Gaussian-cluster classification, Markov-chain token sequences
//! and CIFAR-10 binary batches.

use crate::error::{HarnessError, Result};
use modnorm::tensor::{gaussian, seeded_rng};
use modnorm::Tensor;
use rand::Rng;
use std::path::Path;

#[derive(Debug, Clone)]
enum Features {
    Dense(Vec<f64>),
    /// Raw bytes with a per-example multiplier.
    Bytes {
        bytes: Vec<u8>,
        scale: Vec<f64>,
    },
}

/// Examples with a fixed number of features and integer targets.
///
/// Each example has `targets_per_example` targets; token datasets predict
/// one target per position.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Features,
    example_shape: Vec<usize>,
    targets: Vec<usize>,
    targets_per_example: usize,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        example_shape: Vec<usize>,
        targets: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let width: usize = example_shape.iter().product();
        if width == 0 || !features.len().is_multiple_of(width) {
            return Err(HarnessError::Data(format!(
                "{} feature values do not divide into examples of shape {example_shape:?}",
                features.len()
            )));
        }
        let n = features.len() / width;
        if n == 0 || !targets.len().is_multiple_of(n) {
            return Err(HarnessError::Data(format!(
                "{} targets for {n} examples",
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|t| **t >= n_classes) {
            return Err(HarnessError::Data(format!(
                "target {t} out of range for {n_classes} classes"
            )));
        }
        Ok(Dataset {
            targets_per_example: targets.len() / n,
            features: Features::Dense(features),
            example_shape,
            targets,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len() / self.targets_per_example
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.example_shape
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    fn width(&self) -> usize {
        self.example_shape.iter().product()
    }

    /// Features of example `i`.
    pub fn example(&self, i: usize) -> Vec<f64> {
        let w = self.width();
        match &self.features {
            Features::Dense(v) => v[i * w..(i + 1) * w].to_vec(),
            Features::Bytes { bytes, scale } => bytes[i * w..(i + 1) * w]
                .iter()
                .map(|b| *b as f64 * scale[i])
                .collect(),
        }
    }

    /// Stacks the given examples into a `[batch, ..example_shape]` tensor
    /// and concatenates their targets.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.width());
        let mut targets = Vec::with_capacity(indices.len() * self.targets_per_example);
        for &i in indices {
            if i >= self.len() {
                return Err(HarnessError::Data(format!(
                    "example {i} out of range for {} examples",
                    self.len()
                )));
            }
            data.extend(self.example(i));
            let k = self.targets_per_example;
            targets.extend_from_slice(&self.targets[i * k..(i + 1) * k]);
        }
        let shape = [&[indices.len()], self.example_shape.as_slice()].concat();
        Ok((Tensor::new(shape, data)?, targets))
    }

    /// The same examples viewed with another shape of equal size.
    pub fn reshaped(mut self, example_shape: Vec<usize>) -> Result<Self> {
        if example_shape.iter().product::<usize>() != self.width() {
            return Err(HarnessError::Data(format!(
                "cannot view examples of shape {:?} as {example_shape:?}",
                self.example_shape
            )));
        }
        self.example_shape = example_shape;
        Ok(self)
    }
}

#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

fn unit_rms(v: &mut [f64]) {
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
}

/// Standard deviation of the per-example noise relative to the class
/// centers, chosen so that classes overlap.
pub const SYNTHETIC_NOISE: f64 = 3.0;

/// Gaussian-cluster classification: each class has a random center, each
/// example is its class center plus [`SYNTHETIC_NOISE`]-scaled noise,
/// rescaled to unit RMS. Train and test examples come from the same distribution.
pub fn synthetic_task(
    n_classes: usize,
    d_in: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<DataSplit> {
    if n_classes == 0 || d_in == 0 || n_train == 0 || n_test == 0 {
        return Err(HarnessError::Data(
            "synthetic task sizes must be at least 1".into(),
        ));
    }
    let mut rng = seeded_rng(seed);
    let centers: Vec<Vec<f64>> = (0..n_classes).map(|_| gaussian(&mut rng, d_in)).collect();
    let mut draw = |n: usize| -> Result<Dataset> {
        let mut features = Vec::with_capacity(n * d_in);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.random_range(0..n_classes);
            let mut x: Vec<f64> = centers[c]
                .iter()
                .zip(gaussian(&mut rng, d_in))
                .map(|(m, e)| m + SYNTHETIC_NOISE * e)
                .collect();
            unit_rms(&mut x);
            features.extend(x);
            targets.push(c);
        }
        Dataset::new(features, vec![d_in], targets, n_classes)
    };
    Ok(DataSplit {
        train: draw(n_train)?,
        test: draw(n_test)?,
    })
}

/// Next-token prediction on sequences from a random sparse Markov chain.
/// Inputs are one-hot `[context, vocab]`; the target at each position is
/// the following token.
pub fn markov_tokens(
    vocab: usize,
    context: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<DataSplit> {
    if vocab < 2 || context == 0 || n_train == 0 || n_test == 0 {
        return Err(HarnessError::Data(
            "token task needs vocab ≥ 2 and nonzero sizes".into(),
        ));
    }
    let mut rng = seeded_rng(seed);
    let successors: Vec<[usize; 3]> = (0..vocab)
        .map(|_| {
            [
                rng.random_range(0..vocab),
                rng.random_range(0..vocab),
                rng.random_range(0..vocab),
            ]
        })
        .collect();
    let mut draw = |n: usize| -> Result<Dataset> {
        let mut features = vec![0.0; n * context * vocab];
        let mut targets = Vec::with_capacity(n * context);
        for e in 0..n {
            let mut tok = rng.random_range(0..vocab);
            for p in 0..context {
                features[(e * context + p) * vocab + tok] = 1.0;
                tok = if rng.random_bool(0.9) {
                    successors[tok][rng.random_range(0..3)]
                } else {
                    rng.random_range(0..vocab)
                };
                targets.push(tok);
            }
        }
        Dataset::new(features, vec![context, vocab], targets, vocab)
    };
    Ok(DataSplit {
        train: draw(n_train)?,
        test: draw(n_test)?,
    })
}

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
const CIFAR_PIXELS: usize = 3072;

/// Parses one CIFAR-10 binary batch: 10000 records of a label byte followed
/// by 3×32×32 channel-major pixels. Pixels are scaled to `[0, 1]` and then
/// each image is rescaled to unit RMS.
pub fn parse_cifar_batch(path: &Path) -> Result<(Vec<u8>, Vec<f64>, Vec<usize>)> {
    let raw = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let expected = CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE;
    if raw.len() != expected {
        return Err(HarnessError::Format {
            path: path.into(),
            message: format!("expected {expected} bytes, found {}", raw.len()),
        });
    }
    let mut pixels = Vec::with_capacity(CIFAR_RECORDS_PER_FILE * CIFAR_PIXELS);
    let mut scale = Vec::with_capacity(CIFAR_RECORDS_PER_FILE);
    let mut labels = Vec::with_capacity(CIFAR_RECORDS_PER_FILE);
    for (i, rec) in raw.chunks(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] >= 10 {
            return Err(HarnessError::Format {
                path: path.into(),
                message: format!("record {i} has label {}, expected 0..=9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        let img = &rec[1..];
        let sq: f64 = img.iter().map(|b| (*b as f64 / 255.0).powi(2)).sum();
        let rms = (sq / CIFAR_PIXELS as f64).sqrt();
        scale.push(if rms > 0.0 { 1.0 / (255.0 * rms) } else { 0.0 });
        pixels.extend_from_slice(img);
    }
    Ok((pixels, scale, labels))
}

fn cifar_files(dir: &Path, names: &[String]) -> Result<Dataset> {
    let (mut bytes, mut scale, mut targets) = (Vec::new(), Vec::new(), Vec::new());
    for name in names {
        let (b, s, t) = parse_cifar_batch(&dir.join(name))?;
        bytes.extend(b);
        scale.extend(s);
        targets.extend(t);
    }
    Ok(Dataset {
        features: Features::Bytes { bytes, scale },
        example_shape: vec![3, 32, 32],
        targets,
        targets_per_example: 1,
        n_classes: 10,
    })
}

/// Loads `data_batch_1.bin` to `data_batch_5.bin` as the training split and
/// `test_batch.bin` as the test split. Examples have shape `[3, 32, 32]`.
pub fn load_cifar10(dir: &Path) -> Result<DataSplit> {
    let train: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    Ok(DataSplit {
        train: cifar_files(dir, &train)?,
        test: cifar_files(dir, &["test_batch.bin".to_string()])?,
    })
}

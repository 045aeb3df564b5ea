//! Reference architectures assembled from module combinators, and the two
//! error measures used to train them.

use crate::error::{invalid, Error, Result};
use crate::module::{
    add, broadcast, compose, concat, power, residual, scalar_mul_exact, tare, BondKind, ExactReal,
    Mask, Module,
};
use crate::tensor::Tensor;

/// Which reference network to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    ResMlp,
    ResNet,
    Gpt,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::ResMlp => "resmlp",
            Family::ResNet => "resnet",
            Family::Gpt => "gpt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "resmlp" => Ok(Family::ResMlp),
            "resnet" => Ok(Family::ResNet),
            "gpt" => Ok(Family::Gpt),
            other => Err(invalid(format!(
                "unknown architecture {other:?}, expected resmlp, resnet or gpt"
            ))),
        }
    }
}

/// Dimensions of a reference network. Fields a family does not use are
/// ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub family: Family,
    /// Hidden width `d`.
    pub width: usize,
    /// Residual depth `L`.
    pub depth: usize,
    /// Copies of the residue per residual block.
    pub block_depth: usize,
    pub kernel: usize,
    pub heads: usize,
    /// Context length.
    pub context: usize,
    /// Vocabulary size.
    pub vocab: usize,
    /// Total mass of the residual blocks after taring.
    pub block_mass: f64,
    /// Input features, or input channels for images.
    pub d_in: usize,
    pub d_out: usize,
}

impl ArchSpec {
    pub fn res_mlp(width: usize, depth: usize, d_in: usize, d_out: usize) -> Self {
        ArchSpec {
            family: Family::ResMlp,
            width,
            depth,
            block_depth: 2,
            kernel: 3,
            heads: 1,
            context: 1,
            vocab: 1,
            block_mass: 1.0,
            d_in,
            d_out,
        }
    }

    pub fn res_net(width: usize, depth: usize, c_in: usize, d_out: usize) -> Self {
        ArchSpec {
            family: Family::ResNet,
            block_mass: 20.0,
            ..ArchSpec::res_mlp(width, depth, c_in, d_out)
        }
    }

    pub fn gpt(width: usize, depth: usize, heads: usize, context: usize, vocab: usize) -> Self {
        ArchSpec {
            family: Family::Gpt,
            heads,
            context,
            vocab,
            block_mass: 5.0,
            d_in: vocab,
            d_out: vocab,
            ..ArchSpec::res_mlp(width, depth, vocab, vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("width", self.width),
            ("depth", self.depth),
            ("block_depth", self.block_depth),
            ("d_in", self.d_in),
            ("d_out", self.d_out),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        if !(self.block_mass > 0.0 && self.block_mass.is_finite()) {
            return Err(invalid(format!(
                "block_mass must be positive, got {}",
                self.block_mass
            )));
        }
        match self.family {
            Family::ResMlp => Ok(()),
            Family::ResNet if self.kernel == 0 => Err(invalid("kernel must be at least 1")),
            Family::ResNet => Ok(()),
            Family::Gpt => {
                if self.heads == 0 || self.context == 0 || self.vocab == 0 {
                    return Err(invalid("heads, context and vocab must be at least 1"));
                }
                if !self.width.is_multiple_of(self.heads) {
                    return Err(invalid(format!(
                        "width {} not divisible by {} heads",
                        self.width, self.heads
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn build(&self) -> Result<Module> {
        match self.family {
            Family::ResMlp => res_mlp(self),
            Family::ResNet => res_net(self),
            Family::Gpt => gpt(self),
        }
    }
}

fn bond(kind: BondKind) -> Result<Module> {
    Module::bond(kind)
}

/// Composes `modules` in application order: the first is applied first.
pub fn chain(modules: &[Module]) -> Result<Module> {
    let (first, rest) = modules
        .split_first()
        .ok_or_else(|| invalid("empty chain"))?;
    rest.iter()
        .try_fold(first.clone(), |acc, m| compose(m, &acc))
}

/// `MeanSubtract ∘ Abs ∘ Linear(d, d) ∘ RMSDivide` over vectors.
pub fn res_mlp_residue(d: usize) -> Result<Module> {
    chain(&[
        bond(BondKind::RmsDivide { axes: 1 })?,
        Module::linear(d, d)?,
        Module::abs(),
        bond(BondKind::MeanSubtract { axes: 1 })?,
    ])
}

/// `MeanSubtract ∘ Abs ∘ Conv2D(d, d, K) ∘ RMSDivide`, normalizing over
/// the whole `d × H × W` feature map.
pub fn res_net_residue(d: usize, k: usize) -> Result<Module> {
    chain(&[
        bond(BondKind::RmsDivide { axes: 3 })?,
        Module::conv2d(d, d, k)?,
        Module::abs(),
        bond(BondKind::MeanSubtract { axes: 3 })?,
    ])
}

/// `Linear(d_out, d) ∘ tare(Res_L(M(d)^B), m) ∘ Linear(d, d_in)`.
pub fn res_mlp(spec: &ArchSpec) -> Result<Module> {
    spec.validate()?;
    let body = residual(
        &power(&res_mlp_residue(spec.width)?, spec.block_depth)?,
        spec.depth,
    )?;
    chain(&[
        Module::linear(spec.width, spec.d_in)?,
        tare(&body, spec.block_mass)?,
        Module::linear(spec.d_out, spec.width)?,
    ])
}

/// `Linear(d_out, d) ∘ Flatten ∘ AvgPool ∘ tare(Res_L(M(d, K)^B), m) ∘ Conv2D(d, c_in, K)`
/// on inputs of shape `[batch, c_in, H, W]`.
pub fn res_net(spec: &ArchSpec) -> Result<Module> {
    spec.validate()?;
    let body = residual(
        &power(&res_net_residue(spec.width, spec.kernel)?, spec.block_depth)?,
        spec.depth,
    )?;
    chain(&[
        Module::conv2d(spec.width, spec.d_in, spec.kernel)?,
        tare(&body, spec.block_mass)?,
        Module::avg_pool(),
        Module::flatten(3)?,
        Module::linear(spec.d_out, spec.width)?,
    ])
}

/// `Exit ∘ (1/3) * FuncAttention^(h) ∘ (Query, Key, Value)` on inputs of
/// shape `[.., ℓ, d]`. Heads become a leading axis between the query, key
/// and value projections and the exit projection.
pub fn multi_head_attention(
    d: usize,
    heads: usize,
    d_q: usize,
    d_v: usize,
    ell: usize,
    mask: Mask,
) -> Result<Module> {
    if heads == 0 || d_q == 0 || d_v == 0 {
        return Err(invalid("heads and head dimensions must be at least 1"));
    }
    let qkv = concat(
        &concat(
            &Module::linear(heads * d_q, d)?,
            &Module::linear(heads * d_q, d)?,
        )?,
        &Module::linear(heads * d_v, d)?,
    )?;
    let func = broadcast(&Module::func_attention(ell, d_q, d_v, mask)?, heads)?;
    chain(&[
        qkv,
        Module::add_heads(heads)?,
        func,
        Module::remove_heads(heads)?,
        Module::mul_exact(&ExactReal::rational(1, 3)),
        Module::linear(d, heads * d_v)?,
    ])
}

fn gpt_block(inner: &Module, l: usize) -> Result<Module> {
    let two_l = 2 * l as i64;
    add(
        &scalar_mul_exact(&ExactReal::rational(two_l - 1, two_l), &Module::identity())?,
        &scalar_mul_exact(
            &ExactReal::rational(1, two_l),
            &compose(inner, &Module::layer_norm())?,
        )?,
    )
}

/// The transformer MLP: expand to `4d`, scaled GELU, contract back to `d`.
pub fn transformer_mlp(d: usize) -> Result<Module> {
    chain(&[
        Module::linear(4 * d, d)?,
        Module::scaled_gelu(),
        Module::linear(d, 4 * d)?,
    ])
}

/// A causal transformer on one-hot token inputs of shape `[.., ℓ, N]`,
/// producing logits of shape `[.., ℓ, N]`.
pub fn gpt(spec: &ArchSpec) -> Result<Module> {
    spec.validate()?;
    let (d, h, ell, n, l) = (spec.width, spec.heads, spec.context, spec.vocab, spec.depth);
    let half = ExactReal::rational(1, 2);
    let input = tare(
        &add(
            &scalar_mul_exact(&half, &Module::embed(n, d)?)?,
            &scalar_mul_exact(&half, &Module::positional_embed(ell, d)?)?,
        )?,
        1.0,
    )?;
    let attn = gpt_block(
        &multi_head_attention(d, h, d / h, d / h, ell, Mask::Causal)?,
        l,
    )?;
    let mlp = gpt_block(&transformer_mlp(d)?, l)?;
    let body = power(&compose(&mlp, &attn)?, l)?;
    let output = compose(&Module::linear(n, d)?, &Module::layer_norm())?;
    chain(&[input, tare(&body, spec.block_mass)?, output])
}

/// Error measure applied to network outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `(1/2d) Σ_i (y_i − √d·[i = t])²`.
    Square,
    /// `−log softmax(y)_t`.
    CrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Square => "square",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "square" | "mse" => Ok(LossKind::Square),
            "cross_entropy" | "xent" => Ok(LossKind::CrossEntropy),
            other => Err(invalid(format!(
                "unknown loss {other:?}, expected square or cross_entropy"
            ))),
        }
    }
}

/// Batch mean of the per-example error over the trailing axis of `logits`.
pub fn loss_eval(kind: LossKind, logits: &Tensor, targets: &[usize]) -> Result<f64> {
    Ok(loss_and_grad(kind, logits, targets)?.0)
}

/// The mean loss and its gradient with respect to `logits`.
pub fn loss_and_grad(kind: LossKind, logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let d = *logits
        .shape()
        .last()
        .ok_or_else(|| invalid("logits must have at least one axis"))?;
    let rows = logits.len().checked_div(d).unwrap_or(0);
    if rows != targets.len() || rows == 0 {
        return Err(Error::ShapeMismatch {
            op: "loss",
            left: logits.shape().to_vec(),
            right: vec![targets.len(), d],
        });
    }
    if let Some(t) = targets.iter().find(|t| **t >= d) {
        return Err(invalid(format!("target {t} out of range for {d} classes")));
    }
    let inv_n = 1.0 / rows as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for ((y, g), &t) in logits.data().chunks(d).zip(grad.chunks_mut(d)).zip(targets) {
        match kind {
            LossKind::Square => {
                let sd = (d as f64).sqrt();
                for (i, (yi, gi)) in y.iter().zip(g.iter_mut()).enumerate() {
                    let r = yi - if i == t { sd } else { 0.0 };
                    total += r * r / (2.0 * d as f64);
                    *gi = r / d as f64 * inv_n;
                }
            }
            LossKind::CrossEntropy => {
                let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = y.iter().map(|v| (v - max).exp()).sum();
                total += z.ln() + max - y[t];
                for (i, (yi, gi)) in y.iter().zip(g.iter_mut()).enumerate() {
                    let p = (yi - max).exp() / z;
                    *gi = (p - if i == t { 1.0 } else { 0.0 }) * inv_n;
                }
            }
        }
    }
    Ok((total * inv_n, Tensor::new(logits.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests;

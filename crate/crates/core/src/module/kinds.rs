//! Atom and bond catalogue: forward maps, hand-written vector-Jacobian
//! products and shape transfer rules.

use super::exact::ExactReal;
use super::value::{Space, Value};
use crate::error::{invalid, Error, Result};
use crate::tensor::{conv2d, conv2d_grad_input, conv2d_grad_weight, Padding, Tensor};
use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};
use std::fmt;

/// The norm carried by an atom's weight space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Largest singular value of the matrix.
    Spectral,
    /// Largest Euclidean column norm.
    MaxColumnL2,
    /// Largest spectral norm over the spatial slices of a kernel.
    MaxKernelSpectral,
}

impl NormKind {
    pub fn name(&self) -> &'static str {
        match self {
            NormKind::Spectral => "spectral",
            NormKind::MaxColumnL2 => "max_column_l2",
            NormKind::MaxKernelSpectral => "max_kernel_spectral",
        }
    }
}

/// Weighted leaf modules.
#[derive(Debug, Clone, PartialEq)]
pub enum AtomKind {
    /// `x ↦ √(d_out/d_in)·Wx` with `W: [d_out, d_in]`.
    Linear { d_out: usize, d_in: usize },
    /// `x ↦ √d·Ex` with `E: [d, n]`. The positional variant ignores the
    /// input's content and emits column `i` at sequence position `i`.
    Embed {
        n: usize,
        d: usize,
        positional: bool,
    },
    /// `x ↦ (1/K²)·√(d_out/d_in)·(C ⊛ x)` with `C: [d_out, d_in, K, K]` and
    /// same padding at stride 1.
    Conv2d { d_out: usize, d_in: usize, k: usize },
}

/// Additive mask for attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    /// Position `i` attends to positions `j ≤ i`.
    Causal,
    Zero,
}

/// Large negative stand-in for `-∞` in attention masks.
pub const MASK_NEG: f64 = -1e30;

/// Weightless leaf modules.
#[derive(Debug, Clone, PartialEq)]
pub enum BondKind {
    Identity,
    Mul {
        a: f64,
    },
    Add,
    Abs,
    Relu,
    ScaledRelu,
    Gelu,
    ScaledGelu,
    /// Centering over the trailing `axes` axes.
    MeanSubtract {
        axes: usize,
    },
    /// Division by the RMS over the trailing `axes` axes.
    RmsDivide {
        axes: usize,
    },
    LayerNorm {
        axes: usize,
    },
    FuncAttention {
        ell: usize,
        d_q: usize,
        d_v: usize,
        mask: Mask,
    },
    /// Mean over the two trailing spatial axes, keeping them as size 1.
    AvgPool,
    /// Merges the trailing `axes` axes into one.
    Flatten {
        axes: usize,
    },
    /// `[.., ℓ, h·d] → [.., h, ℓ, d]`.
    AddHeads {
        h: usize,
    },
    /// `[.., h, ℓ, d] → [.., ℓ, h·d]`.
    RemoveHeads {
        h: usize,
    },
}

fn replace_last(dims: &[usize], n_old: usize, new: &[usize]) -> Vec<usize> {
    let mut v = dims[..dims.len() - n_old].to_vec();
    v.extend_from_slice(new);
    v
}

fn last_dim_transfer(input: &Space, d_in: usize, d_out: usize) -> Result<Space> {
    match input {
        Space::Any => Ok(Space::Tensor(vec![d_out])),
        Space::Tensor(d) if d.is_empty() => Ok(Space::Tensor(vec![d_out])),
        Space::Tensor(d) if d[d.len() - 1] == d_in => {
            Ok(Space::Tensor(replace_last(d, 1, &[d_out])))
        }
        other => Err(other.mismatch(&Space::Tensor(vec![d_in]))),
    }
}

impl AtomKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            AtomKind::Linear { d_out, d_in } => d_out > 0 && d_in > 0,
            AtomKind::Embed { n, d, .. } => n > 0 && d > 0,
            AtomKind::Conv2d { d_out, d_in, k } => d_out > 0 && d_in > 0 && k > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("atom dimensions must be positive: {self}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AtomKind::Linear { .. } => "linear",
            AtomKind::Embed { .. } => "embed",
            AtomKind::Conv2d { .. } => "conv2d",
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            AtomKind::Linear { d_out, d_in } => vec![d_out, d_in],
            AtomKind::Embed { n, d, .. } => vec![d, n],
            AtomKind::Conv2d { d_out, d_in, k } => vec![d_out, d_in, k, k],
        }
    }

    pub fn norm_kind(&self) -> NormKind {
        match self {
            AtomKind::Linear { .. } => NormKind::Spectral,
            AtomKind::Embed { .. } => NormKind::MaxColumnL2,
            AtomKind::Conv2d { .. } => NormKind::MaxKernelSpectral,
        }
    }

    pub(crate) fn declared_input(&self) -> Space {
        match *self {
            AtomKind::Linear { d_in, .. } => Space::Tensor(vec![d_in]),
            AtomKind::Embed {
                n,
                positional: false,
                ..
            } => Space::Tensor(vec![n]),
            AtomKind::Embed {
                positional: true, ..
            }
            | AtomKind::Conv2d { .. } => Space::Any,
        }
    }

    pub(crate) fn transfer(&self, input: &Space) -> Result<Space> {
        match *self {
            AtomKind::Linear { d_out, d_in } => last_dim_transfer(input, d_in, d_out),
            AtomKind::Embed {
                n,
                d,
                positional: false,
            } => last_dim_transfer(input, n, d),
            AtomKind::Embed {
                n,
                d,
                positional: true,
            } => match input {
                Space::Any => Ok(Space::Tensor(vec![n, d])),
                Space::Tensor(dims) if dims.len() < 2 => Ok(Space::Tensor(vec![n, d])),
                Space::Tensor(dims) if dims[dims.len() - 2] == n => {
                    Ok(Space::Tensor(replace_last(dims, 1, &[d])))
                }
                other => Err(other.mismatch(&Space::Tensor(vec![n, 0]))),
            },
            AtomKind::Conv2d { d_out, d_in, .. } => match input {
                Space::Any => Ok(Space::Any),
                Space::Tensor(dims) if dims.len() < 3 => Ok(input.clone()),
                Space::Tensor(dims) if dims[dims.len() - 3] == d_in => {
                    let mut v = dims.clone();
                    let at = v.len() - 3;
                    v[at] = d_out;
                    Ok(Space::Tensor(v))
                }
                other => Err(other.mismatch(&Space::Tensor(vec![d_in, 0, 0]))),
            },
        }
    }

    fn check_weight(&self, w: &Tensor) -> Result<()> {
        if w.shape() != self.weight_shape() {
            return Err(Error::ShapeMismatch {
                op: self.name(),
                left: w.shape().to_vec(),
                right: self.weight_shape(),
            });
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        match *self {
            AtomKind::Linear { d_out, d_in } => (d_out as f64 / d_in as f64).sqrt(),
            AtomKind::Embed { d, .. } => (d as f64).sqrt(),
            AtomKind::Conv2d { d_out, d_in, k } => {
                (d_out as f64 / d_in as f64).sqrt() / (k * k) as f64
            }
        }
    }

    pub fn forward(&self, w: &Tensor, x: &Value) -> Result<Value> {
        self.check_weight(w)?;
        let x = x.as_tensor()?;
        let s = self.scale();
        let y = match *self {
            AtomKind::Linear { .. }
            | AtomKind::Embed {
                positional: false, ..
            } => {
                let (rows, cols) = (w.shape()[0], w.shape()[1]);
                check_last(x, cols, self.name())?;
                let n = x.len() / cols;
                let y = x.reshape(&[n, cols])?.matmul_nt(w)?.scale(s);
                y.into_shape(&replace_last(x.shape(), 1, &[rows]))?
            }
            AtomKind::Embed {
                n,
                d,
                positional: true,
            } => {
                let lead = positional_lead(x, n)?;
                let mut out = Vec::with_capacity(lead * n * d);
                for _ in 0..lead {
                    for i in 0..n {
                        out.extend((0..d).map(|r| s * w.data()[r * n + i]));
                    }
                }
                Tensor::new(replace_last(x.shape(), 1, &[d]), out)?
            }
            AtomKind::Conv2d { d_out, d_in, k } => {
                let (x4, lead) = as_images(x, d_in)?;
                let y = conv2d(&x4, w, Padding::same(k), 1)?.scale(s);
                let hw = &y.shape()[2..].to_vec();
                y.into_shape(&[lead.as_slice(), &[d_out], hw].concat())?
            }
        };
        Ok(Value::Tensor(y))
    }

    /// Returns `(gᵀ∇_w f, gᵀ∇_x f)`.
    pub fn vjp(&self, w: &Tensor, x: &Value, g: &Value) -> Result<(Tensor, Value)> {
        self.check_weight(w)?;
        let x = x.as_tensor()?;
        let g = g.as_tensor()?;
        let s = self.scale();
        match *self {
            AtomKind::Linear { .. }
            | AtomKind::Embed {
                positional: false, ..
            } => {
                let (rows, cols) = (w.shape()[0], w.shape()[1]);
                check_last(x, cols, self.name())?;
                let n = x.len() / cols;
                let gm = g.reshape(&[n, rows])?;
                let gw = gm.matmul_tn(&x.reshape(&[n, cols])?)?.scale(s);
                let gx = gm.matmul(w)?.scale(s).into_shape(x.shape())?;
                Ok((gw, Value::Tensor(gx)))
            }
            AtomKind::Embed {
                n,
                d,
                positional: true,
            } => {
                let lead = positional_lead(x, n)?;
                let mut gw = vec![0.0; d * n];
                for b in 0..lead {
                    for i in 0..n {
                        for r in 0..d {
                            gw[r * n + i] += s * g.data()[(b * n + i) * d + r];
                        }
                    }
                }
                Ok((
                    Tensor::new(vec![d, n], gw)?,
                    Value::Tensor(Tensor::zeros(x.shape())),
                ))
            }
            AtomKind::Conv2d { d_out, d_in, k } => {
                let (x4, _) = as_images(x, d_in)?;
                let y_shape = [x4.shape()[0], d_out, x4.shape()[2], x4.shape()[3]];
                let g4 = g.reshape(&y_shape)?;
                let pad = Padding::same(k);
                let gw = conv2d_grad_weight(&g4, &x4, w.shape(), pad, 1)?.scale(s);
                let gx = conv2d_grad_input(&g4, w, x4.shape(), pad, 1)?
                    .scale(s)
                    .into_shape(x.shape())?;
                Ok((gw, Value::Tensor(gx)))
            }
        }
    }
}

fn check_last(x: &Tensor, d: usize, op: &'static str) -> Result<()> {
    if x.rank() == 0 || x.shape()[x.rank() - 1] != d {
        return Err(Error::ShapeMismatch {
            op,
            left: x.shape().to_vec(),
            right: vec![d],
        });
    }
    Ok(())
}

fn positional_lead(x: &Tensor, n: usize) -> Result<usize> {
    let r = x.rank();
    if r < 2 || x.shape()[r - 2] != n {
        return Err(Error::ShapeMismatch {
            op: "embed",
            left: x.shape().to_vec(),
            right: vec![n, 0],
        });
    }
    Ok(x.shape()[..r - 2].iter().product())
}

fn as_images(x: &Tensor, c: usize) -> Result<(Tensor, Vec<usize>)> {
    let r = x.rank();
    if r < 3 || x.shape()[r - 3] != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x.shape().to_vec(),
            right: vec![c, 0, 0],
        });
    }
    let lead = x.shape()[..r - 3].to_vec();
    let n: usize = lead.iter().product();
    let x4 = x.reshape(&[n, c, x.shape()[r - 2], x.shape()[r - 1]])?;
    Ok((x4, lead))
}

fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn big_phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

fn groups(x: &Tensor, axes: usize) -> Result<(usize, usize)> {
    let (n, m) = x.split_trailing(axes)?;
    if m == 0 {
        return Err(invalid("normalization over an empty group"));
    }
    Ok((n, m))
}

fn mean_subtract(x: &Tensor, axes: usize) -> Result<Tensor> {
    let (n, m) = groups(x, axes)?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(m).take(n) {
        let mean = row.iter().sum::<f64>() / m as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    Ok(out)
}

fn rms_divide(x: &Tensor, axes: usize) -> Result<Tensor> {
    let (_, m) = groups(x, axes)?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(m) {
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / m as f64).sqrt();
        if rms > 0.0 {
            row.iter_mut().for_each(|v| *v /= rms);
        }
    }
    Ok(out)
}

fn rms_divide_vjp(x: &Tensor, g: &Tensor, axes: usize) -> Result<Tensor> {
    let (_, m) = groups(x, axes)?;
    let mut out = g.clone();
    for (row, xr) in out.data_mut().chunks_mut(m).zip(x.data().chunks(m)) {
        let ss = xr.iter().map(|v| v * v).sum::<f64>();
        if ss == 0.0 {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let rms = (ss / m as f64).sqrt();
        let xg: f64 = xr.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
        let c = xg / (m as f64 * rms * rms * rms);
        for (o, xv) in row.iter_mut().zip(xr) {
            *o = *o / rms - c * xv;
        }
    }
    Ok(out)
}

fn split_heads(x: &Tensor, h: usize) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 || !x.shape()[r - 1].is_multiple_of(h) {
        return Err(invalid(format!(
            "cannot split shape {:?} into {h} heads",
            x.shape()
        )));
    }
    let (ell, hd) = (x.shape()[r - 2], x.shape()[r - 1]);
    let lead = &x.shape()[..r - 2];
    let n: usize = lead.iter().product();
    let y = x.reshape(&[n, ell, h, hd / h])?.permute(&[0, 2, 1, 3])?;
    y.into_shape(&[lead, &[h, ell, hd / h]].concat())
}

fn merge_heads(x: &Tensor, h: usize) -> Result<Tensor> {
    let r = x.rank();
    if r < 3 || x.shape()[r - 3] != h {
        return Err(invalid(format!(
            "cannot merge {h} heads of shape {:?}",
            x.shape()
        )));
    }
    let (ell, d) = (x.shape()[r - 2], x.shape()[r - 1]);
    let lead = &x.shape()[..r - 3];
    let n: usize = lead.iter().product();
    let y = x.reshape(&[n, h, ell, d])?.permute(&[0, 2, 1, 3])?;
    y.into_shape(&[lead, &[ell, h * d]].concat())
}

fn avg_pool(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(invalid(format!(
            "avg_pool needs spatial axes, got {:?}",
            x.shape()
        )));
    }
    let (n, m) = x.split_trailing(2)?;
    let data = x
        .data()
        .chunks(m)
        .take(n)
        .map(|c| c.iter().sum::<f64>() / m as f64)
        .collect();
    Tensor::new(replace_last(x.shape(), 2, &[1, 1]), data)
}

impl BondKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            BondKind::Mul { a } => a.is_finite(),
            BondKind::MeanSubtract { axes }
            | BondKind::RmsDivide { axes }
            | BondKind::LayerNorm { axes } => axes > 0,
            BondKind::Flatten { axes } => axes > 0,
            BondKind::FuncAttention { ell, d_q, d_v, .. } => ell > 0 && d_q > 0 && d_v > 0,
            BondKind::AddHeads { h } | BondKind::RemoveHeads { h } => h > 0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid bond parameters: {self}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BondKind::Identity => "identity",
            BondKind::Mul { .. } => "mul",
            BondKind::Add => "add",
            BondKind::Abs => "abs",
            BondKind::Relu => "relu",
            BondKind::ScaledRelu => "scaled_relu",
            BondKind::Gelu => "gelu",
            BondKind::ScaledGelu => "scaled_gelu",
            BondKind::MeanSubtract { .. } => "mean_subtract",
            BondKind::RmsDivide { .. } => "rms_divide",
            BondKind::LayerNorm { .. } => "layer_norm",
            BondKind::FuncAttention { .. } => "func_attention",
            BondKind::AvgPool => "avg_pool",
            BondKind::Flatten { .. } => "flatten",
            BondKind::AddHeads { .. } => "add_heads",
            BondKind::RemoveHeads { .. } => "remove_heads",
        }
    }

    pub fn sensitivity(&self) -> f64 {
        match *self {
            BondKind::Mul { a } => a.abs(),
            BondKind::Relu | BondKind::Gelu => FRAC_1_SQRT_2,
            _ => 1.0,
        }
    }

    /// Exact sensitivity where it is known in closed form. `Mul` with an
    /// arbitrary float has none; use [`super::Module::mul_exact`] instead.
    pub(crate) fn exact_sensitivity(&self) -> Option<ExactReal> {
        match *self {
            BondKind::Mul { .. } => None,
            BondKind::Relu | BondKind::Gelu => {
                Some(ExactReal::rational(1, 2).mul(&ExactReal::sqrt(2)))
            }
            _ => Some(ExactReal::one()),
        }
    }

    /// Bonds whose output space equals their input space.
    pub(crate) fn preserves_shape(&self) -> bool {
        matches!(
            self,
            BondKind::Identity
                | BondKind::Mul { .. }
                | BondKind::Abs
                | BondKind::Relu
                | BondKind::ScaledRelu
                | BondKind::Gelu
                | BondKind::ScaledGelu
                | BondKind::MeanSubtract { .. }
                | BondKind::RmsDivide { .. }
                | BondKind::LayerNorm { .. }
        )
    }

    pub(crate) fn declared_input(&self) -> Space {
        match *self {
            BondKind::Add => Space::Tuple(vec![Space::Any, Space::Any]),
            BondKind::FuncAttention { ell, d_q, d_v, .. } => Space::Tuple(vec![
                Space::Tensor(vec![ell, d_q]),
                Space::Tensor(vec![ell, d_q]),
                Space::Tensor(vec![ell, d_v]),
            ]),
            _ => Space::Any,
        }
    }

    pub(crate) fn transfer(&self, input: &Space) -> Result<Space> {
        if self.preserves_shape() {
            return Ok(input.clone());
        }
        let map_tuple = |f: &dyn Fn(&Space) -> Result<Space>| -> Result<Space> {
            match input {
                Space::Tuple(parts) => {
                    Ok(Space::Tuple(parts.iter().map(f).collect::<Result<_>>()?))
                }
                other => f(other),
            }
        };
        match *self {
            BondKind::Add => match input {
                Space::Any => Ok(Space::Any),
                Space::Tuple(p) if p.len() == 2 => p[0].unify(&p[1]),
                other => Err(other.mismatch(&self.declared_input())),
            },
            BondKind::FuncAttention { ell, d_v, .. } => {
                let decl = self.declared_input();
                match input.unify(&decl)? {
                    Space::Tuple(p) => match &p[0] {
                        Space::Tensor(q) => Ok(Space::Tensor(replace_last(q, 1, &[d_v]))),
                        _ => Ok(Space::Tensor(vec![ell, d_v])),
                    },
                    _ => unreachable!("unify with a tuple yields a tuple"),
                }
            }
            BondKind::AvgPool => map_tuple(&|s| match s {
                Space::Tensor(d) if d.len() >= 2 => Ok(Space::Tensor(replace_last(d, 2, &[1, 1]))),
                Space::Tensor(d) => Ok(Space::Tensor(vec![1; d.len()])),
                other => Ok(other.clone()),
            }),
            BondKind::Flatten { axes } => map_tuple(&|s| match s {
                Space::Tensor(d) if d.len() >= axes => {
                    let merged: usize = d[d.len() - axes..].iter().product();
                    Ok(Space::Tensor(replace_last(d, axes, &[merged])))
                }
                _ => Ok(Space::Any),
            }),
            BondKind::AddHeads { h } => map_tuple(&|s| match s {
                Space::Tensor(d) if d.len() >= 2 => {
                    let hd = d[d.len() - 1];
                    if hd % h != 0 {
                        return Err(invalid(format!("width {hd} not divisible by {h} heads")));
                    }
                    Ok(Space::Tensor(replace_last(
                        d,
                        2,
                        &[h, d[d.len() - 2], hd / h],
                    )))
                }
                _ => Ok(Space::Any),
            }),
            BondKind::RemoveHeads { h } => map_tuple(&|s| match s {
                Space::Tensor(d) if d.len() >= 3 => {
                    if d[d.len() - 3] != h {
                        return Err(s.mismatch(&Space::Tensor(vec![h, 0, 0])));
                    }
                    Ok(Space::Tensor(replace_last(
                        d,
                        3,
                        &[d[d.len() - 2], h * d[d.len() - 1]],
                    )))
                }
                Space::Tensor(d) if d.len() == 2 => Ok(Space::Tensor(vec![d[0], h * d[1]])),
                _ => Ok(Space::Any),
            }),
            _ => unreachable!("shape-preserving bonds handled above"),
        }
    }

    pub fn forward(&self, x: &Value) -> Result<Value> {
        match *self {
            BondKind::Identity => Ok(x.clone()),
            BondKind::Mul { a } => Ok(x.scale(a)),
            BondKind::Add => match x.components() {
                [a, b] => Ok(Value::Tensor(a.add(b)?)),
                parts => Err(Error::Structure(format!(
                    "add expects 2 inputs, got {}",
                    parts.len()
                ))),
            },
            BondKind::Abs => x.map(|t| Ok(t.map(f64::abs))),
            BondKind::Relu => x.map(|t| Ok(t.map(|v| v.max(0.0)))),
            BondKind::ScaledRelu => x.map(|t| Ok(t.map(|v| SQRT_2 * v.max(0.0)))),
            BondKind::Gelu => x.map(|t| Ok(t.map(|v| v * big_phi(v)))),
            BondKind::ScaledGelu => x.map(|t| Ok(t.map(|v| SQRT_2 * v * big_phi(v)))),
            BondKind::MeanSubtract { axes } => x.map(|t| mean_subtract(t, axes)),
            BondKind::RmsDivide { axes } => x.map(|t| rms_divide(t, axes)),
            BondKind::LayerNorm { axes } => x.map(|t| rms_divide(&mean_subtract(t, axes)?, axes)),
            BondKind::FuncAttention {
                ell,
                d_q,
                d_v,
                mask,
            } => {
                let att = Attention::new(x, ell, d_q, d_v, mask)?;
                Ok(Value::Tensor(att.forward()?))
            }
            BondKind::AvgPool => x.map(avg_pool),
            BondKind::Flatten { axes } => x.map(|t| {
                let (_, m) = t.split_trailing(axes)?;
                t.reshape(&replace_last(t.shape(), axes, &[m]))
            }),
            BondKind::AddHeads { h } => x.map(|t| split_heads(t, h)),
            BondKind::RemoveHeads { h } => x.map(|t| merge_heads(t, h)),
        }
    }

    /// Returns `gᵀ∇_x f`.
    pub fn vjp(&self, x: &Value, g: &Value) -> Result<Value> {
        let elementwise = |d: fn(f64) -> f64| x.zip(g, |xt, gt| xt.map(d).mul(gt));
        match *self {
            BondKind::Identity => Ok(g.clone()),
            BondKind::Mul { a } => Ok(g.scale(a)),
            BondKind::Add => {
                let gt = g.as_tensor()?;
                Ok(Value::Tuple(vec![gt.clone(), gt.clone()]))
            }
            BondKind::Abs => elementwise(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            BondKind::Relu => elementwise(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            BondKind::ScaledRelu => elementwise(|v| if v > 0.0 { SQRT_2 } else { 0.0 }),
            BondKind::Gelu => elementwise(|v| big_phi(v) + v * phi(v)),
            BondKind::ScaledGelu => elementwise(|v| SQRT_2 * (big_phi(v) + v * phi(v))),
            BondKind::MeanSubtract { axes } => g.map(|t| mean_subtract(t, axes)),
            BondKind::RmsDivide { axes } => x.zip(g, |xt, gt| rms_divide_vjp(xt, gt, axes)),
            BondKind::LayerNorm { axes } => x.zip(g, |xt, gt| {
                let centered = mean_subtract(xt, axes)?;
                mean_subtract(&rms_divide_vjp(&centered, gt, axes)?, axes)
            }),
            BondKind::FuncAttention {
                ell,
                d_q,
                d_v,
                mask,
            } => {
                let att = Attention::new(x, ell, d_q, d_v, mask)?;
                Ok(Value::Tuple(att.vjp(g.as_tensor()?)?))
            }
            BondKind::AvgPool => x.zip(g, |xt, gt| {
                let (_, m) = xt.split_trailing(2)?;
                let mut out = Vec::with_capacity(xt.len());
                for v in gt.data() {
                    out.extend(std::iter::repeat_n(v / m as f64, m));
                }
                Tensor::new(xt.shape().to_vec(), out)
            }),
            BondKind::Flatten { .. } => x.zip(g, |xt, gt| gt.reshape(xt.shape())),
            BondKind::AddHeads { h } => g.map(|t| merge_heads(t, h)),
            BondKind::RemoveHeads { h } => g.map(|t| split_heads(t, h)),
        }
    }
}

/// Batched single-head attention `softmax(q kᵀ / d_q + mask) · v` over the
/// trailing `[ℓ, d]` axes.
struct Attention<'a> {
    q: &'a Tensor,
    k: &'a Tensor,
    v: &'a Tensor,
    ell: usize,
    d_q: usize,
    d_v: usize,
    batch: usize,
    mask: Mask,
}

impl<'a> Attention<'a> {
    fn new(x: &'a Value, ell: usize, d_q: usize, d_v: usize, mask: Mask) -> Result<Self> {
        let [q, k, v] = x.components() else {
            return Err(Error::Structure(format!(
                "attention expects (q, k, v), got arity {}",
                x.arity()
            )));
        };
        let check = |t: &Tensor, d: usize| -> Result<usize> {
            let r = t.rank();
            if r < 2 || t.shape()[r - 2] != ell || t.shape()[r - 1] != d {
                return Err(Error::ShapeMismatch {
                    op: "func_attention",
                    left: t.shape().to_vec(),
                    right: vec![ell, d],
                });
            }
            Ok(t.len() / (ell * d))
        };
        let batch = check(q, d_q)?;
        if check(k, d_q)? != batch
            || check(v, d_v)? != batch
            || q.shape()[..q.rank() - 2] != v.shape()[..v.rank() - 2]
        {
            return Err(Error::ShapeMismatch {
                op: "func_attention",
                left: q.shape().to_vec(),
                right: v.shape().to_vec(),
            });
        }
        Ok(Attention {
            q,
            k,
            v,
            ell,
            d_q,
            d_v,
            batch,
            mask,
        })
    }

    /// Row-stochastic attention matrix for batch entry `b`.
    fn probs(&self, b: usize) -> Vec<f64> {
        let (ell, dq) = (self.ell, self.d_q);
        let q = &self.q.data()[b * ell * dq..(b + 1) * ell * dq];
        let k = &self.k.data()[b * ell * dq..(b + 1) * ell * dq];
        let mut a = vec![0.0; ell * ell];
        for i in 0..ell {
            let row = &mut a[i * ell..(i + 1) * ell];
            for (j, r) in row.iter_mut().enumerate() {
                let dot: f64 = q[i * dq..(i + 1) * dq]
                    .iter()
                    .zip(&k[j * dq..(j + 1) * dq])
                    .map(|(x, y)| x * y)
                    .sum();
                let m = if self.mask == Mask::Causal && j > i {
                    MASK_NEG
                } else {
                    0.0
                };
                *r = dot / dq as f64 + m;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                total += *r;
            }
            row.iter_mut().for_each(|r| *r /= total);
        }
        a
    }

    fn forward(&self) -> Result<Tensor> {
        let (ell, dv) = (self.ell, self.d_v);
        let mut out = vec![0.0; self.batch * ell * dv];
        for b in 0..self.batch {
            let a = self.probs(b);
            let v = &self.v.data()[b * ell * dv..(b + 1) * ell * dv];
            let o = &mut out[b * ell * dv..(b + 1) * ell * dv];
            for i in 0..ell {
                for j in 0..ell {
                    let p = a[i * ell + j];
                    for c in 0..dv {
                        o[i * dv + c] += p * v[j * dv + c];
                    }
                }
            }
        }
        Tensor::new(self.v.shape().to_vec(), out)
    }

    fn vjp(&self, g: &Tensor) -> Result<Vec<Tensor>> {
        if g.shape() != self.v.shape() {
            return Err(Error::ShapeMismatch {
                op: "func_attention",
                left: g.shape().to_vec(),
                right: self.v.shape().to_vec(),
            });
        }
        let (ell, dq, dv) = (self.ell, self.d_q, self.d_v);
        let mut gq = vec![0.0; self.q.len()];
        let mut gk = vec![0.0; self.k.len()];
        let mut gv = vec![0.0; self.v.len()];
        for b in 0..self.batch {
            let a = self.probs(b);
            let (qo, vo) = (b * ell * dq, b * ell * dv);
            let q = &self.q.data()[qo..qo + ell * dq];
            let k = &self.k.data()[qo..qo + ell * dq];
            let v = &self.v.data()[vo..vo + ell * dv];
            let gb = &g.data()[vo..vo + ell * dv];
            for i in 0..ell {
                let ga: Vec<f64> = (0..ell)
                    .map(|j| (0..dv).map(|c| gb[i * dv + c] * v[j * dv + c]).sum())
                    .collect();
                let inner: f64 = (0..ell).map(|j| a[i * ell + j] * ga[j]).sum();
                for j in 0..ell {
                    let p = a[i * ell + j];
                    for c in 0..dv {
                        gv[vo + j * dv + c] += p * gb[i * dv + c];
                    }
                    let gs = p * (ga[j] - inner) / dq as f64;
                    if gs == 0.0 {
                        continue;
                    }
                    for c in 0..dq {
                        gq[qo + i * dq + c] += gs * k[j * dq + c];
                        gk[qo + j * dq + c] += gs * q[i * dq + c];
                    }
                }
            }
        }
        Ok(vec![
            Tensor::new(self.q.shape().to_vec(), gq)?,
            Tensor::new(self.k.shape().to_vec(), gk)?,
            Tensor::new(self.v.shape().to_vec(), gv)?,
        ])
    }
}

impl fmt::Display for AtomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            AtomKind::Linear { d_out, d_in } => write!(f, "Linear({d_out}, {d_in})"),
            AtomKind::Embed {
                n,
                d,
                positional: false,
            } => write!(f, "Embed({n}, {d})"),
            AtomKind::Embed {
                n,
                d,
                positional: true,
            } => write!(f, "PositionalEmbed({n}, {d})"),
            AtomKind::Conv2d { d_out, d_in, k } => write!(f, "Conv2D({d_out}, {d_in}, {k})"),
        }
    }
}

impl fmt::Display for BondKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            BondKind::Identity => write!(f, "Identity"),
            BondKind::Mul { a } => write!(f, "Mul({a})"),
            BondKind::Add => write!(f, "Add"),
            BondKind::Abs => write!(f, "Abs"),
            BondKind::Relu => write!(f, "ReLU"),
            BondKind::ScaledRelu => write!(f, "ScaledReLU"),
            BondKind::Gelu => write!(f, "GELU"),
            BondKind::ScaledGelu => write!(f, "ScaledGELU"),
            BondKind::MeanSubtract { .. } => write!(f, "MeanSubtract"),
            BondKind::RmsDivide { .. } => write!(f, "RMSDivide"),
            BondKind::LayerNorm { .. } => write!(f, "LayerNorm"),
            BondKind::FuncAttention {
                ell,
                d_q,
                d_v,
                mask,
            } => {
                write!(f, "FuncAttention({ell}, {d_q}, {d_v}, {mask:?})")
            }
            BondKind::AvgPool => write!(f, "AvgPool"),
            BondKind::Flatten { .. } => write!(f, "Flatten"),
            BondKind::AddHeads { h } => write!(f, "AddHeads({h})"),
            BondKind::RemoveHeads { h } => write!(f, "RemoveHeads({h})"),
        }
    }
}

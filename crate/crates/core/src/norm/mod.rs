//! Vector and operator norms, power iteration, the flattened modular norm
//! and its dual, and update normalization.
//!
//! The modular norm of a tree is `max_k s_k · ‖w_k‖_k` over its atoms, where
//! the leaf scales `s_k` come from unrolling the compose and concat norm
//! rules. [`compute_scales`] performs that unrolling once per tree;
//! [`Module::norm`] evaluates the rules recursively and serves as an
//! independent cross-check.

use crate::error::{invalid, Error, Result};
use crate::module::{AtomKind, Module, NodeKind, NormKind, Value, WeightVector};
use crate::tensor::{gaussian, seeded_rng, Tensor};
use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Norms on activation vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorNorm {
    /// `sqrt(mean(x²))` over all entries.
    Rms,
    L1,
    /// Largest row RMS of a matrix of row vectors.
    InfRms,
}

pub fn vector_norm(kind: VectorNorm, x: &Tensor) -> Result<f64> {
    if x.is_empty() {
        return Err(invalid("norm of an empty tensor"));
    }
    match kind {
        VectorNorm::Rms => {
            Ok((x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt())
        }
        VectorNorm::L1 => Ok(x.data().iter().map(|v| v.abs()).sum()),
        VectorNorm::InfRms => {
            if x.rank() != 2 {
                return Err(invalid(format!(
                    "inf_rms needs a 2-D tensor, got shape {:?}",
                    x.shape()
                )));
            }
            Ok(row_rms_max(x.data(), x.shape()[1]))
        }
    }
}

fn row_rms_max(data: &[f64], width: usize) -> f64 {
    data.chunks(width)
        .map(|r| (r.iter().map(|v| v * v).sum::<f64>() / width as f64).sqrt())
        .fold(0.0, f64::max)
}

/// Norm of a module input or output: the largest RMS over the trailing
/// `feature_axes` axes across all leading positions, summed over tuple
/// components.
pub fn value_norm(v: &Value, feature_axes: usize) -> Result<f64> {
    v.components()
        .iter()
        .map(|t| {
            let (_, m) = t.split_trailing(feature_axes)?;
            Ok(if m == 0 {
                0.0
            } else {
                row_rms_max(t.data(), m)
            })
        })
        .sum()
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

/// Largest singular value from a full SVD.
pub fn svd_spectral_norm(m: &Tensor) -> Result<f64> {
    check_matrix(m)?;
    Ok(to_dmatrix(m).singular_values().max())
}

/// Sum of singular values, the dual of the spectral norm.
pub fn nuclear_norm(m: &Tensor) -> Result<f64> {
    check_matrix(m)?;
    Ok(to_dmatrix(m).singular_values().sum())
}

fn check_matrix(m: &Tensor) -> Result<()> {
    if m.rank() != 2 {
        return Err(invalid(format!(
            "expected a matrix, got shape {:?}",
            m.shape()
        )));
    }
    Ok(())
}

fn unit(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn fresh_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let mut v = gaussian(rng, n);
        if unit(&mut v) > 0.0 {
            return v;
        }
    }
}

/// `(‖Wv‖, Wᵀ W v)` for a row-major `rows × cols` matrix.
fn gram_apply(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> (f64, Vec<f64>) {
    let mut out = vec![0.0; cols];
    let mut sq = 0.0;
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let u: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
        sq += u * u;
        for (o, a) in out.iter_mut().zip(row) {
            *o += u * a;
        }
    }
    (sq.sqrt(), out)
}

/// How many power-iteration steps to run per estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PowerIteration {
    /// A fixed number of warm-started steps.
    Steps(usize),
    /// Iterate until the estimate's relative change is at most `tol`, running
    /// between `min_steps` and `max_steps` steps.
    Converged {
        min_steps: usize,
        max_steps: usize,
        tol: f64,
    },
}

impl PowerIteration {
    /// Two warm-started steps per update.
    pub const TRAINING: PowerIteration = PowerIteration::Steps(2);
    /// Tight convergence for verification.
    pub const VERIFY: PowerIteration = PowerIteration::Converged {
        min_steps: 100,
        max_steps: 20_000,
        tol: 1e-10,
    };
}

fn power_iterate(
    m: &[f64],
    rows: usize,
    cols: usize,
    mode: PowerIteration,
    warm: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> (f64, Vec<f64>) {
    if m.iter().all(|x| *x == 0.0) {
        return (0.0, fresh_unit(rng, cols));
    }
    let mut v = match warm {
        Some(w) if w.len() == cols && w.iter().all(|x| x.is_finite()) => {
            let mut v = w.to_vec();
            if unit(&mut v) > 0.0 {
                v
            } else {
                fresh_unit(rng, cols)
            }
        }
        _ => fresh_unit(rng, cols),
    };
    let (min_steps, max_steps, tol) = match mode {
        PowerIteration::Steps(n) => (n, n, f64::INFINITY),
        PowerIteration::Converged {
            min_steps,
            max_steps,
            tol,
        } => (min_steps, max_steps, tol),
    };
    let mut sigma = 0.0;
    let mut step = 0;
    while step < max_steps.max(1) {
        let (_, mut next) = gram_apply(m, rows, cols, &v);
        if unit(&mut next) == 0.0 {
            next = fresh_unit(rng, cols);
        }
        v = next;
        let (est, _) = gram_apply(m, rows, cols, &v);
        step += 1;
        let settled = (est - sigma).abs() <= tol * est;
        sigma = est;
        if step >= min_steps && settled {
            break;
        }
    }
    (sigma, v)
}

/// Power-iteration estimate of the largest singular value of a matrix.
///
/// Returns the estimate `‖Wv‖` and the right singular vector estimate `v`
/// for warm-starting the next call. The estimate never exceeds the true
/// value and does not decrease from step to step.
pub fn spectral_norm(
    m: &Tensor,
    mode: PowerIteration,
    warm: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<f64>)> {
    check_matrix(m)?;
    if let PowerIteration::Steps(0) = mode {
        return Err(invalid("power iteration needs at least one step"));
    }
    Ok(power_iterate(
        m.data(),
        m.shape()[0],
        m.shape()[1],
        mode,
        warm,
        rng,
    ))
}

/// The spatial slices `C[:, :, i, j]` of a kernel, row-major over `(i, j)`.
pub fn kernel_slices(c: &Tensor) -> Result<Vec<Tensor>> {
    let [o, ci, k, k2] = c.shape() else {
        return Err(invalid(format!(
            "expected a 4-D kernel, got shape {:?}",
            c.shape()
        )));
    };
    let (o, ci, k, k2) = (*o, *ci, *k, *k2);
    let mut out = Vec::with_capacity(k * k2);
    for i in 0..k {
        for j in 0..k2 {
            let mut s = Vec::with_capacity(o * ci);
            for a in 0..o {
                for b in 0..ci {
                    s.push(c.data()[((a * ci + b) * k + i) * k2 + j]);
                }
            }
            out.push(Tensor::new(vec![o, ci], s)?);
        }
    }
    Ok(out)
}

fn max_column_norm(e: &Tensor) -> f64 {
    let (rows, cols) = (e.shape()[0], e.shape()[1]);
    (0..cols)
        .map(|c| {
            (0..rows)
                .map(|r| e.data()[r * cols + c].powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

fn check_leaf(kind: &AtomKind, w: &Tensor) -> Result<()> {
    if w.shape() != kind.weight_shape() {
        return Err(Error::ShapeMismatch {
            op: "atom_norm",
            left: w.shape().to_vec(),
            right: kind.weight_shape(),
        });
    }
    Ok(())
}

/// The exact norm of an atom's weight: spectral for linear, largest column
/// norm for embeddings, largest slice spectral norm for convolutions.
pub fn atom_norm(kind: &AtomKind, w: &Tensor) -> Result<f64> {
    check_leaf(kind, w)?;
    match kind.norm_kind() {
        NormKind::Spectral => svd_spectral_norm(w),
        NormKind::MaxColumnL2 => Ok(max_column_norm(w)),
        NormKind::MaxKernelSpectral => kernel_slices(w)?
            .iter()
            .try_fold(0.0, |m, s| Ok(f64::max(m, svd_spectral_norm(s)?))),
    }
}

/// The dual of [`atom_norm`]: nuclear norm, sum of column norms, or sum of
/// slice nuclear norms.
pub fn dual_atom_norm(kind: &AtomKind, g: &Tensor) -> Result<f64> {
    check_leaf(kind, g)?;
    match kind.norm_kind() {
        NormKind::Spectral => nuclear_norm(g),
        NormKind::MaxColumnL2 => {
            let (rows, cols) = (g.shape()[0], g.shape()[1]);
            Ok((0..cols)
                .map(|c| {
                    (0..rows)
                        .map(|r| g.data()[r * cols + c].powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum())
        }
        NormKind::MaxKernelSpectral => kernel_slices(g)?.iter().map(nuclear_norm).sum(),
    }
}

/// The coefficient of one atom's norm inside the modular norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafScale {
    /// Position in the weight vector.
    pub leaf_index: usize,
    pub atom: AtomKind,
    /// `None` for frozen atoms, which do not enter the norm.
    pub scale: Option<f64>,
    pub norm_kind: NormKind,
}

/// Unrolls the compose and concat norm rules into one scale per atom.
pub fn compute_scales(m: &Module) -> Result<Vec<LeafScale>> {
    if m.mass() <= 0.0 {
        return Err(invalid("modular norm needs a module of positive mass"));
    }
    let mut out = Vec::with_capacity(m.atom_count());
    push_scales(m, Some(1.0), &mut out);
    Ok(out)
}

fn push_scales(m: &Module, factor: Option<f64>, out: &mut Vec<LeafScale>) {
    let child = |c: &Module, coef: f64| -> Option<f64> {
        let f = factor? * coef * m.mass() / c.mass();
        (c.mass() > 0.0 && f > 0.0 && f.is_finite()).then_some(f)
    };
    match m.kind() {
        NodeKind::Atom(kind) => out.push(LeafScale {
            leaf_index: out.len(),
            atom: kind.clone(),
            scale: factor.filter(|_| m.mass() > 0.0),
            norm_kind: kind.norm_kind(),
        }),
        NodeKind::Bond(_) => {}
        NodeKind::Compose { first, second } => {
            push_scales(first, child(first, second.sensitivity()), out);
            push_scales(second, child(second, 1.0), out);
        }
        NodeKind::Concat { left, right } => {
            push_scales(left, child(left, 1.0), out);
            push_scales(right, child(right, 1.0), out);
        }
        NodeKind::Broadcast { inner, .. } => push_scales(inner, factor, out),
    }
}

fn check_leaves(m: &Module, w: &WeightVector) -> Result<()> {
    if w.len() != m.atom_count() {
        return Err(Error::Structure(format!(
            "module has {} atoms but weight vector has {} leaves",
            m.atom_count(),
            w.len()
        )));
    }
    Ok(())
}

/// `max_k s_k · atom_norm(w_k)` over unfrozen atoms, with exact atom norms.
pub fn modular_norm(m: &Module, w: &WeightVector) -> Result<f64> {
    check_leaves(m, w)?;
    let mut best = 0.0f64;
    for (ls, leaf) in m.scales()?.iter().zip(w.leaves()) {
        let n = atom_norm(&ls.atom, leaf)?;
        if let Some(s) = ls.scale {
            best = best.max(s * n);
        }
    }
    Ok(best)
}

/// `Σ_k dual_atom_norm(g_k) / s_k` over unfrozen atoms.
pub fn dual_modular_norm(m: &Module, g: &WeightVector) -> Result<f64> {
    check_leaves(m, g)?;
    let mut total = 0.0;
    for (ls, leaf) in m.scales()?.iter().zip(g.leaves()) {
        let n = dual_atom_norm(&ls.atom, leaf)?;
        if let Some(s) = ls.scale {
            total += n / s;
        }
    }
    Ok(total)
}

/// Warm-start vectors for power iteration, one per matrix slice of every
/// leaf, plus the generator for fresh starts.
#[derive(Debug, Clone)]
pub struct PowerIterState {
    vectors: HashMap<(usize, usize), Vec<f64>>,
    rng: ChaCha8Rng,
    pub mode: PowerIteration,
}

impl PowerIterState {
    pub fn new(mode: PowerIteration, seed: u64) -> Self {
        PowerIterState {
            vectors: HashMap::new(),
            rng: seeded_rng(seed),
            mode,
        }
    }

    pub fn training(seed: u64) -> Self {
        PowerIterState::new(PowerIteration::TRAINING, seed)
    }

    pub fn converged(seed: u64) -> Self {
        PowerIterState::new(PowerIteration::VERIFY, seed)
    }

    /// Stored singular-vector estimate for a leaf slice.
    pub fn vector(&self, leaf: usize, slice: usize) -> Option<&[f64]> {
        self.vectors.get(&(leaf, slice)).map(Vec::as_slice)
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.values().map(Vec::as_slice)
    }

    fn estimate(&mut self, leaf: usize, slice: usize, m: &Tensor) -> Result<f64> {
        let warm = self.vectors.remove(&(leaf, slice));
        let (sigma, v) = spectral_norm(m, self.mode, warm.as_deref(), &mut self.rng)?;
        self.vectors.insert((leaf, slice), v);
        Ok(sigma)
    }

    /// Norm estimate of one leaf: power iteration for spectral norms, exact
    /// for column norms.
    pub fn atom_norm(&mut self, leaf: usize, kind: &AtomKind, w: &Tensor) -> Result<f64> {
        check_leaf(kind, w)?;
        match kind.norm_kind() {
            NormKind::Spectral => self.estimate(leaf, 0, w),
            NormKind::MaxColumnL2 => Ok(max_column_norm(w)),
            NormKind::MaxKernelSpectral => {
                let mut best = 0.0f64;
                for (i, s) in kernel_slices(w)?.iter().enumerate() {
                    best = best.max(self.estimate(leaf, i, s)?);
                }
                Ok(best)
            }
        }
    }
}

/// Default guard added to per-leaf norms in [`normalize`].
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Rescales every unfrozen leaf to `Δw_k / (s_k · (‖Δw_k‖ + eps))`, giving an
/// update of unit modular norm. Frozen leaves are zeroed.
pub fn normalize(
    m: &Module,
    dw: &WeightVector,
    state: &mut PowerIterState,
    eps: f64,
) -> Result<WeightVector> {
    check_leaves(m, dw)?;
    if eps.is_nan() || eps <= 0.0 {
        return Err(invalid(format!(
            "normalize eps must be positive, got {eps}"
        )));
    }
    let scales = m.scales()?;
    let mut out = Vec::with_capacity(dw.len());
    for (ls, leaf) in scales.iter().zip(dw.leaves()) {
        match ls.scale {
            None => out.push(Tensor::zeros(leaf.shape())),
            Some(s) => {
                let n = state.atom_norm(ls.leaf_index, &ls.atom, leaf)?;
                out.push(leaf.scale(1.0 / (s * (n + eps))));
            }
        }
    }
    Ok(WeightVector::new(out))
}

impl Module {
    /// The leaf scales of this tree, computed once and cached.
    pub fn scales(&self) -> Result<&[LeafScale]> {
        match self.scale_cache().get_or_init(|| compute_scales(self)) {
            Ok(v) => Ok(v),
            Err(e) => Err(e.clone()),
        }
    }

    /// The norm attribute, evaluated by applying the compose and concat
    /// rules recursively. Zero-mass children contribute nothing.
    pub fn norm(&self, w: &WeightVector) -> Result<f64> {
        check_leaves(self, w)?;
        recursive_norm(self, w.leaves())
    }
}

fn recursive_norm(m: &Module, leaves: &[Tensor]) -> Result<f64> {
    let term = |c: &Module, coef: f64, l: &[Tensor]| -> Result<f64> {
        if c.mass() > 0.0 {
            Ok(coef * m.mass() / c.mass() * recursive_norm(c, l)?)
        } else {
            Ok(0.0)
        }
    };
    match m.kind() {
        NodeKind::Atom(k) => atom_norm(k, &leaves[0]),
        NodeKind::Bond(_) => Ok(0.0),
        NodeKind::Compose { first, second } => {
            let (l1, l2) = leaves.split_at(first.atom_count());
            Ok(term(first, second.sensitivity(), l1)?.max(term(second, 1.0, l2)?))
        }
        NodeKind::Concat { left, right } => {
            let (l1, l2) = leaves.split_at(left.atom_count());
            Ok(term(left, 1.0, l1)?.max(term(right, 1.0, l2)?))
        }
        NodeKind::Broadcast { inner, .. } => recursive_norm(inner, leaves),
    }
}

#[cfg(test)]
mod tests;

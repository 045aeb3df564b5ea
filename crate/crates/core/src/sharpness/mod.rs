//! Second-order smoothness constants `(α, β, γ)` and their propagation
//! through module trees.
//!
//! A module is `(α, β, γ)`-sharp when its second derivatives with respect to
//! weights, weights and inputs, and inputs are bounded by `α`, `β` and `γ`
//! in the modular norm and the input norm. Atoms and bonds carry fixed
//! triples; compose and concat combine them by closed-form rules.

use crate::arch::LossKind;
use crate::error::{invalid, Error, Result};
use crate::module::{Module, NodeKind};
use std::collections::BTreeMap;
use std::f64::consts::{FRAC_2_SQRT_PI, SQRT_2};

/// Sharpness constants together with the sensitivity and mass they were
/// derived under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpnessTriple {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sensitivity: f64,
    pub mass: f64,
}

impl SharpnessTriple {
    pub fn new(alpha: f64, beta: f64, gamma: f64, sensitivity: f64, mass: f64) -> Result<Self> {
        let t = SharpnessTriple {
            alpha,
            beta,
            gamma,
            sensitivity,
            mass,
        };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<()> {
        let all = [
            self.alpha,
            self.beta,
            self.gamma,
            self.sensitivity,
            self.mass,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sharpness triple"));
        }
        if all.iter().any(|v| *v < 0.0) {
            return Err(invalid(format!(
                "sharpness components must be non-negative, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn components(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }
}

fn proportions(t1: &SharpnessTriple, t2: &SharpnessTriple) -> (f64, f64) {
    let total = t1.mass + t2.mass;
    if total > 0.0 {
        (t1.mass / total, t2.mass / total)
    } else {
        (0.0, 0.0)
    }
}

/// Sharpness of `M2 ∘ M1` from `t1` (of `M1`) and `t2` (of `M2`).
pub fn compose_sharpness(t1: &SharpnessTriple, t2: &SharpnessTriple) -> Result<SharpnessTriple> {
    if t1.mass + t2.mass <= 0.0 {
        return Err(invalid("compose_sharpness needs positive total mass"));
    }
    compose_limit(t1, t2)
}

/// [`compose_sharpness`] extended to zero masses by the limit `p_k → 0`.
fn compose_limit(t1: &SharpnessTriple, t2: &SharpnessTriple) -> Result<SharpnessTriple> {
    t1.check()?;
    t2.check()?;
    let (p1, p2) = proportions(t1, t2);
    let (mu1, mu2) = (t1.sensitivity, t2.sensitivity);
    if p1 > 0.0 && mu2 == 0.0 {
        return Err(invalid(
            "composition after a zero-sensitivity module has unbounded weight sharpness",
        ));
    }
    let over = |x: f64| if p1 == 0.0 { 0.0 } else { x / mu2 };
    let alpha = over(p1 * p1 * t1.alpha)
        + p2 * p2 * t2.alpha
        + over(2.0 * p1 * p2 * t2.beta)
        + over(over(p1 * p1 * t2.gamma));
    let beta = p1 * t1.beta + mu1 * p2 * t2.beta + over(mu1 * p1 * t2.gamma);
    let gamma = mu2 * t1.gamma + mu1 * mu1 * t2.gamma;
    SharpnessTriple::new(alpha, beta, gamma, mu1 * mu2, t1.mass + t2.mass)
}

/// Sharpness of the tuple module `(M1, M2)`.
pub fn concat_sharpness(t1: &SharpnessTriple, t2: &SharpnessTriple) -> Result<SharpnessTriple> {
    if t1.mass + t2.mass <= 0.0 {
        return Err(invalid("concat_sharpness needs positive total mass"));
    }
    concat_limit(t1, t2)
}

fn concat_limit(t1: &SharpnessTriple, t2: &SharpnessTriple) -> Result<SharpnessTriple> {
    t1.check()?;
    t2.check()?;
    let (p1, p2) = proportions(t1, t2);
    SharpnessTriple::new(
        p1 * p1 * t1.alpha + p2 * p2 * t2.alpha,
        p1 * t1.beta + p2 * t2.beta,
        t1.gamma + t2.gamma,
        t1.sensitivity + t2.sensitivity,
        t1.mass + t2.mass,
    )
}

/// How [`residual_sharpness`] evaluates the `L`-block residual network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMode {
    /// Fold [`compose_sharpness`] over the block construction.
    Recurrence,
    ClosedForm,
    /// The depth-independent limit `(α + β + γ/3, β + γ/2, γ)`.
    Bound,
}

fn bond_triple(gamma: f64, sensitivity: f64) -> SharpnessTriple {
    SharpnessTriple {
        alpha: 0.0,
        beta: 0.0,
        gamma,
        sensitivity,
        mass: 0.0,
    }
}

/// Sharpness of `Res_L(M) = ((L−1)/L · Identity + 1/L · M)^L` for a module
/// `M` of unit sensitivity.
pub fn residual_sharpness(
    t: &SharpnessTriple,
    l: usize,
    mode: ResidualMode,
) -> Result<SharpnessTriple> {
    if l == 0 {
        return Err(invalid("residual depth must be at least 1"));
    }
    if (t.sensitivity - 1.0).abs() > 1e-12 {
        return Err(invalid(format!(
            "residual sharpness needs unit sensitivity, got {}",
            t.sensitivity
        )));
    }
    t.check()?;
    let lf = l as f64;
    let (alpha, beta, gamma) = (t.alpha, t.beta, t.gamma);
    match mode {
        ResidualMode::ClosedForm => SharpnessTriple::new(
            alpha
                + (lf - 1.0) / lf * beta
                + lf * (lf - 1.0) * (2.0 * lf - 1.0) / (6.0 * lf.powi(3)) * gamma,
            beta + (lf - 1.0) / (2.0 * lf) * gamma,
            gamma,
            1.0,
            lf * t.mass,
        ),
        ResidualMode::Bound => SharpnessTriple::new(
            alpha + beta + gamma / 3.0,
            beta + gamma / 2.0,
            gamma,
            1.0,
            lf * t.mass,
        ),
        ResidualMode::Recurrence => {
            let identity = bond_triple(0.0, 1.0);
            let skip = compose_limit(&identity, &bond_triple(0.0, (lf - 1.0) / lf))?;
            let branch = compose_limit(t, &bond_triple(0.0, 1.0 / lf))?;
            let block = compose_limit(&concat_limit(&skip, &branch)?, &bond_triple(0.0, 1.0))?;
            let mut acc = block;
            for _ in 1..l {
                acc = compose_limit(&acc, &block)?;
            }
            Ok(acc)
        }
    }
}

/// Which norm a broadcast module carries on its stacked inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BroadcastMode {
    /// Max over copies: the triple is unchanged.
    Linf,
    /// `ℓp` sum over copies: the triple is unchanged.
    LpStandard,
    /// RMS over copies, worst case: `γ` grows by `√h`.
    RmsPessimistic,
    /// RMS over copies, typical case: `γ` grows by `√3`.
    RmsSqrt3,
}

impl BroadcastMode {
    pub fn name(self) -> &'static str {
        match self {
            BroadcastMode::Linf => "linf",
            BroadcastMode::LpStandard => "lp_standard",
            BroadcastMode::RmsPessimistic => "rms_pessimistic",
            BroadcastMode::RmsSqrt3 => "rms_sqrt3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linf" => Ok(BroadcastMode::Linf),
            "lp_standard" => Ok(BroadcastMode::LpStandard),
            "rms_pessimistic" => Ok(BroadcastMode::RmsPessimistic),
            "rms_sqrt3" => Ok(BroadcastMode::RmsSqrt3),
            other => Err(invalid(format!("unknown broadcast mode {other:?}"))),
        }
    }
}

pub fn broadcast_sharpness(
    t: &SharpnessTriple,
    h: usize,
    mode: BroadcastMode,
) -> Result<SharpnessTriple> {
    if h == 0 {
        return Err(invalid("broadcast factor must be at least 1"));
    }
    let factor = match mode {
        BroadcastMode::Linf | BroadcastMode::LpStandard => 1.0,
        BroadcastMode::RmsPessimistic => (h as f64).sqrt(),
        BroadcastMode::RmsSqrt3 => 3f64.sqrt(),
    };
    SharpnessTriple::new(t.alpha, t.beta, factor * t.gamma, t.sensitivity, t.mass)
}

/// `(α, β, γ)` for each atom and bond kind, keyed by kind name.
#[derive(Debug, Clone, PartialEq)]
pub struct SharpnessTable(BTreeMap<String, [f64; 3]>);

impl SharpnessTable {
    pub fn empty() -> Self {
        SharpnessTable(BTreeMap::new())
    }

    pub fn insert(&mut self, kind: &str, triple: [f64; 3]) {
        self.0.insert(kind.to_string(), triple);
    }

    pub fn remove(&mut self, kind: &str) {
        self.0.remove(kind);
    }

    pub fn get(&self, kind: &str) -> Result<[f64; 3]> {
        self.0
            .get(kind)
            .copied()
            .ok_or_else(|| Error::MissingKind(kind.to_string()))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[f64; 3])> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }
}

impl Default for SharpnessTable {
    fn default() -> Self {
        let gelu = FRAC_2_SQRT_PI / SQRT_2;
        let mut t = SharpnessTable::empty();
        for atom in ["linear", "embed", "conv2d"] {
            t.insert(atom, [0.0, 1.0, 0.0]);
        }
        let linear_bonds = [
            "identity",
            "mul",
            "add",
            "abs",
            "relu",
            "scaled_relu",
            "mean_subtract",
            "avg_pool",
            "flatten",
            "add_heads",
            "remove_heads",
        ];
        for bond in linear_bonds {
            t.insert(bond, [0.0; 3]);
        }
        t.insert("gelu", [0.0, 0.0, gelu]);
        t.insert("scaled_gelu", [0.0, 0.0, SQRT_2 * gelu]);
        t.insert("rms_divide", [0.0, 0.0, 1.0]);
        t.insert("layer_norm", [0.0, 0.0, 1.0]);
        t.insert("func_attention", [0.0, 0.0, 3.0]);
        t
    }
}

/// Compose rule used when folding a tree; replaceable for testing the
/// verification suite against deliberately broken rules.
pub type ComposeRule = fn(&SharpnessTriple, &SharpnessTriple) -> Result<SharpnessTriple>;

/// Folds the compose, concat and broadcast rules over a module tree.
pub fn tree_sharpness(
    m: &Module,
    table: &SharpnessTable,
    mode: BroadcastMode,
) -> Result<SharpnessTriple> {
    tree_sharpness_with(m, table, mode, compose_limit)
}

pub fn tree_sharpness_with(
    m: &Module,
    table: &SharpnessTable,
    mode: BroadcastMode,
    rule: ComposeRule,
) -> Result<SharpnessTriple> {
    let leaf = |name: &str| -> Result<SharpnessTriple> {
        let [a, b, g] = table.get(name)?;
        SharpnessTriple::new(a, b, g, m.sensitivity(), m.mass())
    };
    match m.kind() {
        NodeKind::Atom(k) => leaf(k.name()),
        NodeKind::Bond(k) => leaf(k.name()),
        NodeKind::Compose { first, second } => rule(
            &tree_sharpness_with(first, table, mode, rule)?,
            &tree_sharpness_with(second, table, mode, rule)?,
        ),
        NodeKind::Concat { left, right } => concat_limit(
            &tree_sharpness_with(left, table, mode, rule)?,
            &tree_sharpness_with(right, table, mode, rule)?,
        ),
        NodeKind::Broadcast { inner, h } => {
            broadcast_sharpness(&tree_sharpness_with(inner, table, mode, rule)?, *h, mode)
        }
    }
}

/// Which cross-entropy curvature constant to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossEntropyTau {
    /// `τ = √d`, assuming roughly Gaussian logits.
    #[default]
    Conservative,
    /// `τ = 1`, assuming generic alignment of updates with the output.
    Aligned,
}

/// Constants in the loss smoothness bound
/// `|L(w + Δw) − L(w) − ∇L ⋄ Δw| ≤ ½ (σα + τ) ‖Δw‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessEstimate {
    pub sigma: f64,
    pub tau: f64,
    pub lipschitz: f64,
}

impl SmoothnessEstimate {
    pub fn new(sigma: f64, tau: f64, alpha: f64) -> Self {
        SmoothnessEstimate {
            sigma,
            tau,
            lipschitz: sigma * alpha + tau,
        }
    }
}

/// Smoothness constants for a network of sharpness `t` trained with
/// `error` over `d` outputs at observed loss `loss`.
pub fn loss_smoothness(
    t: &SharpnessTriple,
    error: LossKind,
    loss: f64,
    d: usize,
    ce_tau: CrossEntropyTau,
) -> Result<SmoothnessEstimate> {
    if !loss.is_finite() || loss < 0.0 {
        return Err(invalid(format!(
            "observed loss must be finite and non-negative, got {loss}"
        )));
    }
    if d == 0 {
        return Err(invalid("output dimension must be at least 1"));
    }
    let sd = (d as f64).sqrt();
    let (sigma, tau) = match error {
        LossKind::Square => (loss.sqrt(), 1.0),
        LossKind::CrossEntropy => (
            sd * loss.sqrt(),
            match ce_tau {
                CrossEntropyTau::Conservative => sd,
                CrossEntropyTau::Aligned => 1.0,
            },
        ),
    };
    Ok(SmoothnessEstimate::new(sigma, tau, t.alpha))
}

#[cfg(test)]
mod tests;

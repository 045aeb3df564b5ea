//! Central-difference probes used as independent oracles for hand-written
//! derivatives.

use super::Tensor;
use crate::error::{invalid, Error, Result};

/// The minimal vector-space surface the probes need.
pub trait VectorSpace: Clone {
    /// Returns `a * self + b * other`.
    fn axpby(&self, a: f64, other: &Self, b: f64) -> Result<Self>;
    fn all_finite(&self) -> bool;
}

impl VectorSpace for f64 {
    fn axpby(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        Ok(a * self + b * other)
    }

    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl VectorSpace for Tensor {
    fn axpby(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        Tensor::axpby(self, a, other, b)
    }

    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl<A: VectorSpace, B: VectorSpace> VectorSpace for (A, B) {
    fn axpby(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        Ok((self.0.axpby(a, &other.0, b)?, self.1.axpby(a, &other.1, b)?))
    }

    fn all_finite(&self) -> bool {
        self.0.all_finite() && self.1.all_finite()
    }
}

fn eval<X, Y: VectorSpace>(f: &impl Fn(&X) -> Result<Y>, x: &X) -> Result<Y> {
    let y = f(x)?;
    if !y.all_finite() {
        return Err(Error::NonFinite("finite-difference probe"));
    }
    Ok(y)
}

/// Central-difference estimate of the directional derivative `∇f(x) ⋄ dx`.
pub fn finite_diff_jvp<X, Y>(f: impl Fn(&X) -> Result<Y>, x: &X, dx: &X, eps: f64) -> Result<Y>
where
    X: VectorSpace,
    Y: VectorSpace,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(invalid(format!("probe step must be positive, got {eps}")));
    }
    let plus = eval(&f, &x.axpby(1.0, dx, eps)?)?;
    let minus = eval(&f, &x.axpby(1.0, dx, -eps)?)?;
    plus.axpby(0.5 / eps, &minus, -0.5 / eps)
}

/// Five-point central-difference estimate of `∇f(x) ⋄ dx`, accurate to
/// fourth order in `eps`.
pub fn finite_diff_jvp5<X, Y>(f: impl Fn(&X) -> Result<Y>, x: &X, dx: &X, eps: f64) -> Result<Y>
where
    X: VectorSpace,
    Y: VectorSpace,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(invalid(format!("probe step must be positive, got {eps}")));
    }
    let at = |s: f64| eval(&f, &x.axpby(1.0, dx, s * eps)?);
    let near = at(1.0)?.axpby(1.0, &at(-1.0)?, -1.0)?;
    let far = at(2.0)?.axpby(1.0, &at(-2.0)?, -1.0)?;
    near.axpby(8.0 / (12.0 * eps), &far, -1.0 / (12.0 * eps))
}

/// Four-point estimate of the bilinear form `dx1 ⋄ ∇²f(x) ⋄ dx2`.
pub fn finite_diff_bilinear<X, Y>(
    f: impl Fn(&X) -> Result<Y>,
    x: &X,
    dx1: &X,
    dx2: &X,
    eps: f64,
) -> Result<Y>
where
    X: VectorSpace,
    Y: VectorSpace,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(invalid(format!("probe step must be positive, got {eps}")));
    }
    let at = |s1: f64, s2: f64| -> Result<Y> {
        let p = x.axpby(1.0, dx1, s1 * eps)?.axpby(1.0, dx2, s2 * eps)?;
        eval(&f, &p)
    };
    let c = 0.25 / (eps * eps);
    let pp = at(1.0, 1.0)?;
    let pm = at(1.0, -1.0)?;
    let mp = at(-1.0, 1.0)?;
    let mm = at(-1.0, -1.0)?;
    pp.axpby(c, &pm, -c)?
        .axpby(1.0, &mp.axpby(-c, &mm, c)?, 1.0)
}

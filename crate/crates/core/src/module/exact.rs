//! Exact arithmetic on numbers of the form `Σ q_s·√s` with rational `q_s` and
//! squarefree `s`, enough to track module sensitivities symbolically.

use num_rational::Ratio;
use std::collections::BTreeMap;
use std::fmt;

type Q = Ratio<i128>;

/// An element of the field extension of ℚ by square roots of integers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactReal {
    terms: BTreeMap<u64, Q>,
}

fn squarefree_split(mut n: u64) -> (u64, u64) {
    let mut outside = 1;
    let mut inside = 1;
    let mut p = 2;
    while p * p <= n {
        let mut count = 0;
        while n.is_multiple_of(p) {
            n /= p;
            count += 1;
        }
        outside *= p.pow(count / 2);
        if count % 2 == 1 {
            inside *= p;
        }
        p += 1;
    }
    (outside, inside * n)
}

impl ExactReal {
    pub fn zero() -> Self {
        ExactReal {
            terms: BTreeMap::new(),
        }
    }

    pub fn one() -> Self {
        Self::rational(1, 1)
    }

    pub fn integer(n: i64) -> Self {
        Self::rational(n, 1)
    }

    /// `num / den`. Panics if `den == 0`.
    pub fn rational(num: i64, den: i64) -> Self {
        Self::from_terms([(1, Q::new(num as i128, den as i128))])
    }

    /// `√n`.
    pub fn sqrt(n: u64) -> Self {
        if n == 0 {
            return Self::zero();
        }
        let (a, s) = squarefree_split(n);
        Self::from_terms([(s, Q::from_integer(a as i128))])
    }

    fn from_terms(it: impl IntoIterator<Item = (u64, Q)>) -> Self {
        let mut terms = BTreeMap::new();
        for (s, q) in it {
            let e = terms.entry(s).or_insert_with(|| Q::from_integer(0));
            *e += q;
        }
        terms.retain(|_, q| *q != Q::from_integer(0));
        ExactReal { terms }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::from_terms(self.terms.iter().chain(&other.terms).map(|(s, q)| (*s, *q)))
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Vec::new();
        for (s1, q1) in &self.terms {
            for (s2, q2) in &other.terms {
                let (a, s) = squarefree_split(s1 * s2);
                out.push((s, q1 * q2 * Q::from_integer(a as i128)));
            }
        }
        Self::from_terms(out)
    }

    pub fn neg(&self) -> Self {
        Self::from_terms(self.terms.iter().map(|(s, q)| (*s, -q)))
    }

    /// Absolute value, with the sign decided by the floating-point value.
    pub fn abs(&self) -> Self {
        if self.to_f64() < 0.0 {
            self.neg()
        } else {
            self.clone()
        }
    }

    pub fn to_f64(&self) -> f64 {
        self.terms
            .iter()
            .map(|(s, q)| (*q.numer() as f64 / *q.denom() as f64) * (*s as f64).sqrt())
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }
}

impl fmt::Display for ExactReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, (s, q)) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            match (*s, q.is_integer() && *q.numer() == 1) {
                (1, _) => write!(f, "{q}")?,
                (_, true) => write!(f, "√{s}")?,
                _ => write!(f, "{q}·√{s}")?,
            }
        }
        Ok(())
    }
}

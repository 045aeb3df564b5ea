use crate::error::{Error, Result};
use crate::tensor::{Tensor, VectorSpace};

/// A module input or output: one tensor or a flat tuple of tensors.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Tensor(Tensor),
    Tuple(Vec<Tensor>),
}

impl From<Tensor> for Value {
    fn from(t: Tensor) -> Self {
        Value::Tensor(t)
    }
}

impl Value {
    /// Builds a value from components; a single component becomes a tensor.
    pub fn from_components(mut parts: Vec<Tensor>) -> Value {
        if parts.len() == 1 {
            Value::Tensor(parts.pop().expect("one part"))
        } else {
            Value::Tuple(parts)
        }
    }

    pub fn components(&self) -> &[Tensor] {
        match self {
            Value::Tensor(t) => std::slice::from_ref(t),
            Value::Tuple(ts) => ts,
        }
    }

    pub fn into_components(self) -> Vec<Tensor> {
        match self {
            Value::Tensor(t) => vec![t],
            Value::Tuple(ts) => ts,
        }
    }

    pub fn arity(&self) -> usize {
        self.components().len()
    }

    pub fn as_tensor(&self) -> Result<&Tensor> {
        match self {
            Value::Tensor(t) => Ok(t),
            Value::Tuple(ts) => Err(Error::Structure(format!(
                "expected a tensor, found a tuple of {}",
                ts.len()
            ))),
        }
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        match self {
            Value::Tensor(t) => Ok(t),
            Value::Tuple(ts) => Err(Error::Structure(format!(
                "expected a tensor, found a tuple of {}",
                ts.len()
            ))),
        }
    }

    /// Applies `f` to every component, keeping the tensor/tuple form.
    pub fn map(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Value> {
        Ok(match self {
            Value::Tensor(t) => Value::Tensor(f(t)?),
            Value::Tuple(ts) => Value::Tuple(ts.iter().map(f).collect::<Result<_>>()?),
        })
    }

    /// Componentwise combination of two values of the same form.
    pub fn zip(
        &self,
        other: &Value,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Value> {
        match (self, other) {
            (Value::Tensor(a), Value::Tensor(b)) => Ok(Value::Tensor(f(a, b)?)),
            (Value::Tuple(a), Value::Tuple(b)) if a.len() == b.len() => Ok(Value::Tuple(
                a.iter()
                    .zip(b)
                    .map(|(x, y)| f(x, y))
                    .collect::<Result<_>>()?,
            )),
            _ => Err(Error::Structure(format!(
                "value forms differ: arity {} vs {}",
                self.arity(),
                other.arity()
            ))),
        }
    }

    pub fn add(&self, other: &Value) -> Result<Value> {
        self.zip(other, |a, b| a.add(b))
    }

    pub fn scale(&self, a: f64) -> Value {
        self.map(|t| Ok(t.scale(a))).expect("scale is infallible")
    }

    pub fn zeros_like(&self) -> Value {
        self.map(|t| Ok(Tensor::zeros(t.shape())))
            .expect("infallible")
    }

    pub fn dot(&self, other: &Value) -> Result<f64> {
        if self.arity() != other.arity() {
            return Err(Error::Structure(
                "dot of values with different arity".into(),
            ));
        }
        self.components()
            .iter()
            .zip(other.components())
            .map(|(a, b)| a.dot(b))
            .sum()
    }
}

impl VectorSpace for Value {
    fn axpby(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.zip(other, |x, y| x.axpby(a, y, b))
    }

    fn all_finite(&self) -> bool {
        self.components().iter().all(Tensor::is_finite)
    }
}

/// One tensor per atom, in depth-first tree order (input side first).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    leaves: Vec<Tensor>,
}

impl WeightVector {
    pub fn new(leaves: Vec<Tensor>) -> Self {
        WeightVector { leaves }
    }

    pub fn leaves(&self) -> &[Tensor] {
        &self.leaves
    }

    pub fn leaves_mut(&mut self) -> &mut [Tensor] {
        &mut self.leaves
    }

    pub fn into_leaves(self) -> Vec<Tensor> {
        self.leaves
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        WeightVector {
            leaves: self
                .leaves
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn check_same_structure(&self, other: &WeightVector) -> Result<()> {
        if self.leaves.len() != other.leaves.len() {
            return Err(Error::Structure(format!(
                "weight vectors have {} and {} leaves",
                self.leaves.len(),
                other.leaves.len()
            )));
        }
        for (i, (a, b)) in self.leaves.iter().zip(&other.leaves).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Structure(format!(
                    "leaf {i} has shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    fn zip(
        &self,
        other: &WeightVector,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Self> {
        self.check_same_structure(other)?;
        Ok(WeightVector {
            leaves: self
                .leaves
                .iter()
                .zip(&other.leaves)
                .map(|(a, b)| f(a, b))
                .collect::<Result<_>>()?,
        })
    }

    pub fn add(&self, other: &WeightVector) -> Result<Self> {
        self.zip(other, |a, b| a.add(b))
    }

    pub fn sub(&self, other: &WeightVector) -> Result<Self> {
        self.zip(other, |a, b| a.sub(b))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &WeightVector) -> Result<Self> {
        self.zip(other, |a, b| a.mul(b))
    }

    pub fn axpby(&self, a: f64, other: &WeightVector, b: f64) -> Result<Self> {
        self.zip(other, |x, y| x.axpby(a, y, b))
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|t| t.scale(a))
    }

    pub fn map(&self, f: impl Fn(&Tensor) -> Tensor) -> Self {
        WeightVector {
            leaves: self.leaves.iter().map(f).collect(),
        }
    }

    /// In-place `self += a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &WeightVector) -> Result<()> {
        self.check_same_structure(other)?;
        for (x, y) in self.leaves.iter_mut().zip(&other.leaves) {
            x.add_scaled(a, y)?;
        }
        Ok(())
    }

    pub fn dot(&self, other: &WeightVector) -> Result<f64> {
        self.check_same_structure(other)?;
        self.leaves
            .iter()
            .zip(&other.leaves)
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.leaves.iter().all(Tensor::is_finite)
    }
}

impl VectorSpace for WeightVector {
    fn axpby(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        WeightVector::axpby(self, a, other, b)
    }

    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

/// Shape metadata attached to module inputs and outputs.
///
/// `Tensor(dims)` constrains only the trailing axes; any leading axes are
/// batch or broadcast axes. `Any` is unconstrained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Space {
    Any,
    Tensor(Vec<usize>),
    Tuple(Vec<Space>),
}

impl Space {
    /// The most specific space compatible with both, or an error.
    pub fn unify(&self, other: &Space) -> Result<Space> {
        match (self, other) {
            (Space::Any, s) | (s, Space::Any) => Ok(s.clone()),
            (Space::Tensor(a), Space::Tensor(b)) => {
                let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
                if long.ends_with(short) {
                    Ok(Space::Tensor(long.clone()))
                } else {
                    Err(self.mismatch(other))
                }
            }
            (Space::Tuple(a), Space::Tuple(b)) if a.len() == b.len() => Ok(Space::Tuple(
                a.iter()
                    .zip(b)
                    .map(|(x, y)| x.unify(y))
                    .collect::<Result<_>>()?,
            )),
            _ => Err(self.mismatch(other)),
        }
    }

    pub(crate) fn mismatch(&self, other: &Space) -> Error {
        Error::Structure(format!("incompatible spaces {self} and {other}"))
    }

    /// Concatenates two spaces into a flat tuple.
    pub fn pair(a: &Space, b: &Space) -> Space {
        let mut parts = Vec::new();
        for s in [a, b] {
            match s {
                Space::Tuple(inner) => parts.extend(inner.iter().cloned()),
                other => parts.push(other.clone()),
            }
        }
        Space::Tuple(parts)
    }
}

impl std::fmt::Display for Space {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Space::Any => write!(f, "*"),
            Space::Tensor(d) => write!(
                f,
                "[..{}]",
                d.iter().map(|x| format!(", {x}")).collect::<String>()
            ),
            Space::Tuple(parts) => {
                write!(f, "(")?;
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{p}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unify_suffixes() {
        let a = Space::Tensor(vec![4]);
        let b = Space::Tensor(vec![3, 4]);
        assert_eq!(a.unify(&b).unwrap(), b);
        assert!(a.unify(&Space::Tensor(vec![5])).is_err());
        assert_eq!(Space::Any.unify(&a).unwrap(), a);
        assert!(a.unify(&Space::Tuple(vec![a.clone()])).is_err());
    }

    #[test]
    fn pair_flattens() {
        let t = Space::Tensor(vec![2]);
        let p = Space::pair(&Space::pair(&t, &t), &t);
        assert_eq!(p, Space::Tuple(vec![t.clone(), t.clone(), t]));
    }

    #[test]
    fn weight_vector_arithmetic() {
        let a = WeightVector::new(vec![
            Tensor::vector(vec![1.0, 2.0]),
            Tensor::vector(vec![3.0]),
        ]);
        let b = a.scale(2.0);
        assert_eq!(a.add(&b).unwrap(), a.scale(3.0));
        assert_eq!(a.dot(&b).unwrap(), 28.0);
        let short = WeightVector::new(vec![Tensor::vector(vec![1.0, 2.0])]);
        assert!(a.add(&short).is_err());
        let reshaped = WeightVector::new(vec![
            Tensor::vector(vec![1.0, 2.0]),
            Tensor::vector(vec![3.0, 4.0]),
        ]);
        assert!(a.add(&reshaped).is_err());
    }

    #[test]
    fn value_forms() {
        let t = Tensor::vector(vec![1.0]);
        assert_eq!(
            Value::from_components(vec![t.clone()]),
            Value::Tensor(t.clone())
        );
        let tup = Value::from_components(vec![t.clone(), t.clone()]);
        assert_eq!(tup.arity(), 2);
        assert!(tup.as_tensor().is_err());
        assert!(tup.add(&Value::Tensor(t)).is_err());
    }
}

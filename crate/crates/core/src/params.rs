//! Flat parameter vectors for model points and tangents.
//!
//! Every reduction sums sequentially in index order, so results are bitwise
//! reproducible across runs and platforms with the same float semantics.

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point or tangent in Euclidean model space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Builds a vector, rejecting empty input and non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("parameter vector must be non-empty".into()));
        }
        let v = ParamVector(values);
        v.ensure_finite("parameter vector")?;
        Ok(v)
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    fn check_dim(&self, other: &ParamVector) -> Result<()> {
        if self.dim() == other.dim() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { left: self.dim(), right: other.dim() })
        }
    }

    /// Euclidean inner product.
    pub fn inner(&self, other: &ParamVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Euclidean distance `‖self − other‖`.
    pub fn distance(&self, other: &ParamVector) -> Result<f64> {
        self.check_dim(other)?;
        let mut acc = 0.0;
        for (a, b) in self.0.iter().zip(&other.0) {
            let d = a - b;
            acc += d * d;
        }
        Ok(acc.sqrt())
    }

    /// Cosine similarity clamped to `[-1, 1]`. A zero-norm argument yields 0,
    /// meaning "no conflict".
    pub fn cosine(&self, other: &ParamVector) -> Result<f64> {
        let ip = self.inner(other)?;
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            return Ok(0.0);
        }
        Ok((ip / denom).clamp(-1.0, 1.0))
    }

    /// Projection of `self` onto the line spanned by `direction`.
    pub fn project_onto(&self, direction: &ParamVector) -> Result<ParamVector> {
        let ab = self.inner(direction)?;
        let bb = direction.norm_sq();
        if bb == 0.0 {
            return Err(Error::DegenerateDirection);
        }
        Ok(direction.scaled(ab / bb))
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|x| x * factor).collect())
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &ParamVector) {
        assert_same_dim(self, other);
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
    }

    /// `(1 − s)·self + s·other`, exact at `s = 0` and `s = 1`.
    pub fn lerp(&self, other: &ParamVector, s: f64) -> ParamVector {
        assert_same_dim(self, other);
        if s == 0.0 {
            return self.clone();
        }
        if s == 1.0 {
            return other.clone();
        }
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| (1.0 - s) * a + s * b).collect())
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &ParamVector) -> ParamVector {
        assert_same_dim(self, other);
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a * b).collect())
    }

    pub fn mean_value(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.dim() as f64
    }

    /// Concatenates blocks of equal dimension.
    pub fn concat(blocks: &[&ParamVector]) -> ParamVector {
        let mut out = Vec::with_capacity(blocks.iter().map(|b| b.dim()).sum());
        for b in blocks {
            out.extend_from_slice(&b.0);
        }
        ParamVector(out)
    }

    /// Splits into `n` equal blocks.
    pub fn split(&self, n: usize) -> Result<Vec<ParamVector>> {
        if n == 0 || !self.dim().is_multiple_of(n) {
            return Err(Error::InvalidArgument(format!("cannot split dimension {} into {n} equal blocks", self.dim())));
        }
        Ok(self.0.chunks(self.dim() / n).map(|c| ParamVector(c.to_vec())).collect())
    }

    /// Arithmetic mean of equally sized vectors.
    pub fn mean(vectors: &[&ParamVector]) -> Result<ParamVector> {
        let first = vectors.first().ok_or_else(|| Error::InvalidArgument("mean of zero vectors".into()))?;
        let mut acc = ParamVector::zeros(first.dim());
        for v in vectors {
            acc.check_dim(v)?;
            acc += *v;
        }
        Ok(acc.scaled(1.0 / vectors.len() as f64))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn assert_same_dim(a: &ParamVector, b: &ParamVector) {
    assert_eq!(a.dim(), b.dim(), "parameter dimension mismatch");
}

impl From<Vec<f64>> for ParamVector {
    /// Unchecked conversion; callers are responsible for finiteness.
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl Add for &ParamVector {
    type Output = ParamVector;

    fn add(self, rhs: &ParamVector) -> ParamVector {
        assert_same_dim(self, rhs);
        ParamVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &ParamVector {
    type Output = ParamVector;

    fn sub(self, rhs: &ParamVector) -> ParamVector {
        assert_same_dim(self, rhs);
        ParamVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

impl AddAssign<&ParamVector> for ParamVector {
    fn add_assign(&mut self, rhs: &ParamVector) {
        assert_same_dim(self, rhs);
        for (a, b) in self.0.iter_mut().zip(&rhs.0) {
            *a += b;
        }
    }
}

impl SubAssign<&ParamVector> for ParamVector {
    fn sub_assign(&mut self, rhs: &ParamVector) {
        assert_same_dim(self, rhs);
        for (a, b) in self.0.iter_mut().zip(&rhs.0) {
            *a -= b;
        }
    }
}

impl Mul<f64> for &ParamVector {
    type Output = ParamVector;

    fn mul(self, rhs: f64) -> ParamVector {
        self.scaled(rhs)
    }
}

impl Neg for &ParamVector {
    type Output = ParamVector;

    fn neg(self) -> ParamVector {
        ParamVector(self.0.iter().map(|x| -x).collect())
    }
}

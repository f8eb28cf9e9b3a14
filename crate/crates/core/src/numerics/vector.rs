use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Dense real vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    /// Checked constructor: every entry must be finite.
    pub fn new(data: Vec<f64>) -> Result<Self, NumericsError> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(pos));
        }
        Ok(Self { data })
    }

    pub fn zeros(n: usize) -> Self {
        Self { data: vec![0.0; n] }
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize) -> f64) -> Self {
        Self {
            data: (0..n).map(f).collect(),
        }
    }

    /// Wraps a buffer produced by arithmetic on finite data.
    pub(crate) fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm2(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.data, other)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &[f64]) {
        debug_assert_eq!(self.len(), x.len());
        self.data
            .iter_mut()
            .zip(x)
            .for_each(|(s, xi)| *s += alpha * xi);
    }

    pub fn sub(&self, other: &[f64]) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector::from_vec(self.data.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &[f64]) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector::from_vec(self.data.iter().zip(other).map(|(a, b)| a + b).collect())
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &[f64]) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Concatenate blocks in order.
    pub fn concat<'a>(blocks: impl IntoIterator<Item = &'a Vector>) -> Vector {
        let mut data = Vec::new();
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Vector::from_vec(data)
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = NumericsError;

    fn try_from(data: Vec<f64>) -> Result<Self, Self::Error> {
        Vector::new(data)
    }
}

/// Euclidean norm.
pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

//! Bernoulli coordinate sparsifier with `1/p` amplification.
//!
//! Each coordinate is kept independently with probability `p` and scaled by
//! `1/p`, so the output is an unbiased estimate of the input with per-coordinate
//! variance `x_i^2 (1/p - 1)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::StreamKey;

#[derive(Debug, Error, PartialEq)]
pub enum SparsifierError {
    #[error("transmit probability must lie in (0, 1], got {0}")]
    InvalidProbability(f64),
    #[error("sparse vector invariant violated: {0}")]
    Malformed(String),
}

/// Keep-probability `p` of the sparsifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct TransmitProb(f64);

impl TransmitProb {
    pub fn new(p: f64) -> Result<Self, SparsifierError> {
        if p > 0.0 && p <= 1.0 {
            Ok(Self(p))
        } else {
            Err(SparsifierError::InvalidProbability(p))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for TransmitProb {
    type Error = SparsifierError;
    fn try_from(p: f64) -> Result<Self, Self::Error> {
        Self::new(p)
    }
}

impl From<TransmitProb> for f64 {
    fn from(p: TransmitProb) -> f64 {
        p.0
    }
}

/// Index/value representation. Indices are the active set; everything else is
/// an implicit zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseVector {
    pub fn new(dim: usize, indices: Vec<usize>, values: Vec<f64>) -> Result<Self, SparsifierError> {
        if indices.len() != values.len() {
            return Err(SparsifierError::Malformed(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SparsifierError::Malformed("indices not strictly increasing".into()));
        }
        if indices.last().is_some_and(|&i| i >= dim) {
            return Err(SparsifierError::Malformed(format!("index out of range for dimension {dim}")));
        }
        Ok(Self { dim, indices, values })
    }

    /// Every coordinate active.
    pub fn from_dense(x: &[f64]) -> Self {
        Self {
            dim: x.len(),
            indices: (0..x.len()).collect(),
            values: x.to_vec(),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn active_indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Size of the active set.
    pub fn active_count(&self) -> usize {
        self.indices.len()
    }

    /// Number of transmitted non-zero entries.
    pub fn nnz(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.add_to(&mut out);
        out
    }

    /// `target += self`, touching only active coordinates.
    pub fn add_to(&self, target: &mut [f64]) {
        debug_assert_eq!(target.len(), self.dim);
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            target[i] += v;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsifierConfig {
    pub transmit_prob: TransmitProb,
}

impl SparsifierConfig {
    pub fn new(p: f64) -> Result<Self, SparsifierError> {
        Ok(Self {
            transmit_prob: TransmitProb::new(p)?,
        })
    }
}

/// Draws the active set and returns `x_i / p` on it.
pub fn sparsify(x: &[f64], cfg: SparsifierConfig, key: StreamKey) -> SparseVector {
    let p = cfg.transmit_prob.get();
    if p == 1.0 {
        return SparseVector::from_dense(x);
    }
    let mut rng = key.rng();
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for (i, &xi) in x.iter().enumerate() {
        if rng.random::<f64>() < p {
            indices.push(i);
            values.push(xi / p);
        }
    }
    SparseVector {
        dim: x.len(),
        indices,
        values,
    }
}

/// Analytic mean of `S(x)`: the input itself.
pub fn sparsifier_mean(x: &[f64]) -> Vec<f64> {
    x.to_vec()
}

/// Analytic `E||S(x) - x||^2 = (1/p - 1) ||x||_2^2`.
pub fn sparsifier_total_variance(x: &[f64], p: f64) -> Result<f64, SparsifierError> {
    let p = TransmitProb::new(p)?.get();
    let norm_sq: f64 = x.iter().map(|v| v * v).sum();
    Ok((1.0 / p - 1.0) * norm_sq)
}

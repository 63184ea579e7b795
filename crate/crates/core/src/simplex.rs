//! Aitchison geometry on the simplex.
//!
//! A [`Composition`] is a strictly positive vector closed to a constant
//! `kappa`. Perturbation and powering give the simplex its vector-space
//! structure; the inner product, norm and distance are computed through the
//! centred log-ratio (clr) representation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ilr::IlrBasis;

/// Relative tolerance on the closure constraint `sum(parts) == kappa`.
pub const CLOSURE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimplexError {
    #[error("part {index} is not strictly positive ({value})")]
    NonPositivePart { index: usize, value: f64 },
    #[error("composition needs at least 2 parts, got {0}")]
    DimensionTooSmall(usize),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("closure constant mismatch: {0} vs {1}")]
    KappaMismatch(f64, f64),
    #[error("closure constant must be positive and finite, got {0}")]
    InvalidKappa(f64),
    #[error("parts sum to {sum}, expected {kappa}")]
    NotClosed { sum: f64, kappa: f64 },
    #[error("sample is empty")]
    EmptySample,
    #[error("need at least {needed} rows, got {found}")]
    InsufficientSample { needed: usize, found: usize },
}

/// A strictly positive `D`-part vector whose parts sum to `kappa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    parts: Vec<f64>,
    kappa: f64,
}

fn check_kappa(kappa: f64) -> Result<(), SimplexError> {
    if kappa > 0.0 && kappa.is_finite() {
        Ok(())
    } else {
        Err(SimplexError::InvalidKappa(kappa))
    }
}

fn check_positive(raw: &[f64]) -> Result<(), SimplexError> {
    if raw.len() < 2 {
        return Err(SimplexError::DimensionTooSmall(raw.len()));
    }
    for (index, &value) in raw.iter().enumerate() {
        // `!(v > 0)` also rejects NaN
        if !(value > 0.0) || !value.is_finite() {
            return Err(SimplexError::NonPositivePart { index, value });
        }
    }
    Ok(())
}

/// Rescale a positive vector so its parts sum to `kappa`.
pub fn closure(raw: &[f64], kappa: f64) -> Result<Composition, SimplexError> {
    check_kappa(kappa)?;
    check_positive(raw)?;
    let total: f64 = raw.iter().sum();
    let parts = raw.iter().map(|v| kappa * v / total).collect();
    Ok(Composition { parts, kappa })
}

impl Composition {
    /// Wrap already-closed parts, validating positivity and the closure sum.
    pub fn new(parts: Vec<f64>, kappa: f64) -> Result<Self, SimplexError> {
        check_kappa(kappa)?;
        check_positive(&parts)?;
        let sum: f64 = parts.iter().sum();
        if ((sum - kappa) / kappa).abs() > CLOSURE_TOLERANCE {
            return Err(SimplexError::NotClosed { sum, kappa });
        }
        Ok(Self { parts, kappa })
    }

    /// The neutral element: all parts equal.
    pub fn uniform(dim: usize, kappa: f64) -> Result<Self, SimplexError> {
        closure(&vec![1.0; dim], kappa)
    }

    /// Closure of `exp(log_parts)`; shifts by the maximum to avoid overflow.
    pub fn from_logs(log_parts: &[f64], kappa: f64) -> Result<Self, SimplexError> {
        let max = log_parts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = log_parts.iter().map(|l| (l - max).exp()).collect();
        closure(&raw, kappa)
    }

    pub fn parts(&self) -> &[f64] {
        &self.parts
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.parts.len()
    }

    /// Same composition closed to a different constant.
    pub fn rescaled(&self, kappa: f64) -> Result<Self, SimplexError> {
        closure(&self.parts, kappa)
    }

    /// Centred log-ratio coefficients: `log(x_i) - mean(log(x))`.
    pub fn clr(&self) -> Vec<f64> {
        let logs: Vec<f64> = self.parts.iter().map(|p| p.ln()).collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        logs.into_iter().map(|l| l - mean).collect()
    }

    fn check_compatible(&self, other: &Composition) -> Result<(), SimplexError> {
        if self.dim() != other.dim() {
            return Err(SimplexError::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        if ((self.kappa - other.kappa) / self.kappa).abs() > CLOSURE_TOLERANCE {
            return Err(SimplexError::KappaMismatch(self.kappa, other.kappa));
        }
        Ok(())
    }

    pub fn perturb(&self, other: &Composition) -> Result<Composition, SimplexError> {
        perturb(self, other)
    }

    pub fn power(&self, alpha: f64) -> Composition {
        power(alpha, self)
    }

    /// Group inverse under perturbation, `(-1) ⊙ self`.
    pub fn inverse(&self) -> Composition {
        power(-1.0, self)
    }
}

/// Perturbation `z ⊕ y = C(z_1 y_1, ..., z_D y_D)`.
pub fn perturb(z: &Composition, y: &Composition) -> Result<Composition, SimplexError> {
    z.check_compatible(y)?;
    // work in logs so long chains neither underflow nor overflow
    let logs: Vec<f64> = z
        .parts
        .iter()
        .zip(&y.parts)
        .map(|(a, b)| a.ln() + b.ln())
        .collect();
    Composition::from_logs(&logs, z.kappa)
}

/// Powering `alpha ⊙ y = C(y_1^alpha, ..., y_D^alpha)`.
pub fn power(alpha: f64, y: &Composition) -> Composition {
    let logs: Vec<f64> = y.parts.iter().map(|p| alpha * p.ln()).collect();
    Composition::from_logs(&logs, y.kappa).expect("powering a valid composition stays valid")
}

/// Aitchison inner product through clr coefficients.
pub fn aitchison_inner(z: &Composition, y: &Composition) -> Result<f64, SimplexError> {
    if z.dim() != y.dim() {
        return Err(SimplexError::DimensionMismatch {
            expected: z.dim(),
            found: y.dim(),
        });
    }
    Ok(z.clr().iter().zip(y.clr()).map(|(a, b)| a * b).sum())
}

pub fn aitchison_norm(y: &Composition) -> f64 {
    y.clr().iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// `d_a(z, y) = ||z ⊖ y||_a`, evaluated as the Euclidean distance of clr vectors.
pub fn aitchison_dist(z: &Composition, y: &Composition) -> Result<f64, SimplexError> {
    if z.dim() != y.dim() {
        return Err(SimplexError::DimensionMismatch {
            expected: z.dim(),
            found: y.dim(),
        });
    }
    Ok(z.clr()
        .iter()
        .zip(y.clr())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// `N` compositions sharing dimension and closure constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionSample {
    rows: Vec<Composition>,
}

impl CompositionSample {
    pub fn new(rows: Vec<Composition>) -> Result<Self, SimplexError> {
        let first = rows.first().ok_or(SimplexError::EmptySample)?;
        for row in &rows[1..] {
            first.check_compatible(row)?;
        }
        Ok(Self { rows })
    }

    /// Close every raw row to `kappa`.
    pub fn from_raw_rows(rows: &[Vec<f64>], kappa: f64) -> Result<Self, SimplexError> {
        let rows = rows
            .iter()
            .map(|r| closure(r, kappa))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(rows)
    }

    pub fn rows(&self) -> &[Composition] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].dim()
    }

    pub fn kappa(&self) -> f64 {
        self.rows[0].kappa()
    }
}

/// Centre `C(exp(E[log y]))`, the ilr-inverse of the mean ilr coordinates.
pub fn center(sample: &CompositionSample) -> Result<Composition, SimplexError> {
    if sample.is_empty() {
        return Err(SimplexError::EmptySample);
    }
    let dim = sample.dim();
    let n = sample.len() as f64;
    let mut mean_logs = vec![0.0; dim];
    for row in sample.rows() {
        for (m, p) in mean_logs.iter_mut().zip(row.parts()) {
            *m += p.ln() / n;
        }
    }
    Composition::from_logs(&mean_logs, sample.kappa())
}

/// Total variance as the sum of ilr-coordinate sample variances (divisor `N-1`).
pub fn total_variance(sample: &CompositionSample) -> Result<f64, SimplexError> {
    if sample.len() < 2 {
        return Err(SimplexError::InsufficientSample {
            needed: 2,
            found: sample.len(),
        });
    }
    let basis = IlrBasis::new(sample.dim())?;
    let coords: Vec<Vec<f64>> = sample
        .rows()
        .iter()
        .map(|row| basis.ilr(row).map(|c| c.into_vec()))
        .collect::<Result<_, _>>()?;
    let n = coords.len();
    let total = (0..sample.dim() - 1)
        .map(|d| crate::stats::sample_variance(coords.iter().map(|c| c[d]), n))
        .sum();
    Ok(total)
}

/// Total variance as the mean squared Aitchison distance to the centre, with
/// the same `N-1` divisor as [`total_variance`].
pub fn total_variance_by_distance(sample: &CompositionSample) -> Result<f64, SimplexError> {
    if sample.len() < 2 {
        return Err(SimplexError::InsufficientSample {
            needed: 2,
            found: sample.len(),
        });
    }
    let cen = center(sample)?;
    let mut acc = 0.0;
    for row in sample.rows() {
        let d = aitchison_dist(row, &cen)?;
        acc += d * d;
    }
    Ok(acc / (sample.len() as f64 - 1.0))
}

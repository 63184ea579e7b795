//! P-spline bases: B-spline design matrices on equally spaced knots,
//! difference penalties, row-wise tensor products, and the mixed-model
//! reparameterization that splits a penalized smooth into unpenalized
//! (fixed) columns and iid-prior (random) columns.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative margin added on both sides of the observed covariate range.
pub const DOMAIN_MARGIN: f64 = 1e-6;
/// Eigenvalues below this fraction of the largest count as null space.
pub const NULL_SPACE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmoothError {
    #[error("invalid smooth specification: {0}")]
    InvalidSpec(String),
    #[error("value {value} outside smooth domain [{lower}, {upper}]")]
    OutOfDomain { value: f64, lower: f64, upper: f64 },
    #[error("row count mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("penalty null space has dimension {found}, expected {expected}")]
    RankError { expected: usize, found: usize },
}

/// Declarative smooth term: one covariate (univariate) or two (tensor).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothSpec {
    pub covariates: Vec<String>,
    pub k: usize,
    pub degree: usize,
    pub penalty_order: usize,
    /// Per-covariate `[lower, upper]` used for knot placement.
    pub domain: Vec<(f64, f64)>,
}

impl SmoothSpec {
    pub fn validate(&self) -> Result<(), SmoothError> {
        if self.covariates.is_empty() || self.covariates.len() > 2 {
            return Err(SmoothError::InvalidSpec(format!(
                "expected 1 or 2 covariates, got {}",
                self.covariates.len()
            )));
        }
        if self.k < 4 {
            return Err(SmoothError::InvalidSpec(format!("k = {} < 4", self.k)));
        }
        if self.k < self.degree + 1 {
            return Err(SmoothError::InvalidSpec(format!(
                "k = {} < degree + 1 = {}",
                self.k,
                self.degree + 1
            )));
        }
        if self.penalty_order == 0 || self.penalty_order >= self.k {
            return Err(SmoothError::InvalidSpec(format!(
                "penalty order {} must be in 1..k",
                self.penalty_order
            )));
        }
        if self.domain.len() != self.covariates.len() {
            return Err(SmoothError::InvalidSpec("one domain per covariate".into()));
        }
        for &(lo, hi) in &self.domain {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(SmoothError::InvalidSpec(format!("empty domain [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn margin(&self, index: usize) -> Margin {
        let (lower, upper) = self.domain[index];
        Margin {
            lower,
            upper,
            k: self.k,
            degree: self.degree,
        }
    }
}

/// Observed range of `x` widened by [`DOMAIN_MARGIN`] on each side.
pub fn domain_from_data(x: &[f64]) -> Result<(f64, f64), SmoothError> {
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(SmoothError::InvalidSpec(
            "covariate needs at least two distinct finite values".into(),
        ));
    }
    let pad = DOMAIN_MARGIN * (hi - lo);
    Ok((lo - pad, hi + pad))
}

/// One marginal B-spline basis: `k` functions of `degree` on `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    pub lower: f64,
    pub upper: f64,
    pub k: usize,
    pub degree: usize,
}

impl Margin {
    fn spacing(&self) -> f64 {
        (self.upper - self.lower) / (self.k - self.degree) as f64
    }

    /// `k + degree + 1` equally spaced knots, extended uniformly past the domain.
    pub fn knots(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.k + self.degree + 1)
            .map(|i| self.lower + (i as f64 - self.degree as f64) * h)
            .collect()
    }

    fn span(&self, x: f64) -> usize {
        let raw = ((x - self.lower) / self.spacing()).floor();
        let interval = if raw < 0.0 { 0 } else { raw as usize };
        (self.degree + interval).min(self.k - 1)
    }

    /// All `k` basis values at `x` together with the degree-`p-1` values used
    /// by the derivative.
    fn evaluate(&self, x: f64, knots: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = knots.len();
        let mut b = vec![0.0; m - 1];
        b[self.span(x)] = 1.0;
        let mut lower_degree = b.clone();
        for q in 1..=self.degree {
            if q == self.degree {
                lower_degree = b.clone();
            }
            for j in 0..m - 1 - q {
                let mut v = 0.0;
                let d1 = knots[j + q] - knots[j];
                if d1 > 0.0 {
                    v += (x - knots[j]) / d1 * b[j];
                }
                let d2 = knots[j + q + 1] - knots[j + 1];
                if d2 > 0.0 {
                    v += (knots[j + q + 1] - x) / d2 * b[j + 1];
                }
                b[j] = v;
            }
        }
        b.truncate(self.k);
        (b, lower_degree)
    }

    fn derivative(&self, lower_degree: &[f64], knots: &[f64]) -> Vec<f64> {
        let p = self.degree as f64;
        (0..self.k)
            .map(|j| {
                let mut v = 0.0;
                let d1 = knots[j + self.degree] - knots[j];
                if d1 > 0.0 {
                    v += p / d1 * lower_degree[j];
                }
                let d2 = knots[j + self.degree + 1] - knots[j + 1];
                if d2 > 0.0 {
                    v -= p / d2 * lower_degree[j + 1];
                }
                v
            })
            .collect()
    }

    pub fn row(&self, x: f64) -> Result<Vec<f64>, SmoothError> {
        if !(x >= self.lower && x <= self.upper) {
            return Err(SmoothError::OutOfDomain {
                value: x,
                lower: self.lower,
                upper: self.upper,
            });
        }
        Ok(self.evaluate(x, &self.knots()).0)
    }

    /// Basis row at `x`; outside the domain the basis is continued linearly
    /// from the nearest boundary. The flag reports extrapolation.
    pub fn row_extrapolating(&self, x: f64) -> (Vec<f64>, bool) {
        let knots = self.knots();
        let edge = if x < self.lower {
            self.lower
        } else if x > self.upper {
            self.upper
        } else {
            return (self.evaluate(x, &knots).0, false);
        };
        let (b, lower_degree) = self.evaluate(edge, &knots);
        let slope = self.derivative(&lower_degree, &knots);
        let row = b
            .iter()
            .zip(&slope)
            .map(|(v, s)| v + (x - edge) * s)
            .collect();
        (row, true)
    }

    pub fn design(&self, x: &[f64]) -> Result<DMatrix<f64>, SmoothError> {
        let mut out = DMatrix::zeros(x.len(), self.k);
        for (n, &xv) in x.iter().enumerate() {
            for (j, v) in self.row(xv)?.into_iter().enumerate() {
                out[(n, j)] = v;
            }
        }
        Ok(out)
    }

    pub fn design_extrapolating(&self, x: &[f64]) -> (DMatrix<f64>, Vec<bool>) {
        let mut out = DMatrix::zeros(x.len(), self.k);
        let mut flags = Vec::with_capacity(x.len());
        for (n, &xv) in x.iter().enumerate() {
            let (row, flag) = self.row_extrapolating(xv);
            for (j, v) in row.into_iter().enumerate() {
                out[(n, j)] = v;
            }
            flags.push(flag);
        }
        (out, flags)
    }
}

/// `N x k` B-spline design for the first covariate of `spec`.
pub fn bspline_design(x: &[f64], spec: &SmoothSpec) -> Result<DMatrix<f64>, SmoothError> {
    spec.validate()?;
    spec.margin(0).design(x)
}

/// `(k - order) x k` finite-difference matrix.
pub fn difference_matrix(k: usize, order: usize) -> Result<DMatrix<f64>, SmoothError> {
    if order == 0 || order >= k {
        return Err(SmoothError::InvalidSpec(format!(
            "difference order {order} must be in 1..{k}"
        )));
    }
    let mut d = DMatrix::<f64>::identity(k, k);
    for _ in 0..order {
        let rows = d.nrows() - 1;
        let mut next = DMatrix::zeros(rows, k);
        for r in 0..rows {
            for c in 0..k {
                next[(r, c)] = d[(r + 1, c)] - d[(r, c)];
            }
        }
        d = next;
    }
    Ok(d)
}

/// `K = DᵀD` for the `order`-th difference matrix.
pub fn difference_penalty(k: usize, order: usize) -> Result<DMatrix<f64>, SmoothError> {
    let d = difference_matrix(k, order)?;
    Ok(d.transpose() * d)
}

/// Row-wise Kronecker product: row `n` is `kron(b1[n, :], b2[n, :])`.
pub fn tensor_design(b1: &DMatrix<f64>, b2: &DMatrix<f64>) -> Result<DMatrix<f64>, SmoothError> {
    if b1.nrows() != b2.nrows() {
        return Err(SmoothError::DimensionMismatch(b1.nrows(), b2.nrows()));
    }
    let (k1, k2) = (b1.ncols(), b2.ncols());
    let mut out = DMatrix::zeros(b1.nrows(), k1 * k2);
    for n in 0..b1.nrows() {
        for a in 0..k1 {
            let left = b1[(n, a)];
            if left == 0.0 {
                continue;
            }
            for b in 0..k2 {
                out[(n, a * k2 + b)] = left * b2[(n, b)];
            }
        }
    }
    Ok(out)
}

/// How the prior precision of the penalized columns is formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RandomPenalty {
    /// Columns are pre-scaled so coefficients are iid `N(0, tau^2)`.
    Iid,
    /// Column `j` has precision `first[j]/tau1^2 + second[j]/tau2^2`.
    Tensor { first: Vec<f64>, second: Vec<f64> },
}

/// A centred, reparameterized smooth ready for the linear predictor.
///
/// `design = (B - 1 · col_meansᵀ) · transform`, fixed columns first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothBlock {
    pub design: DMatrix<f64>,
    pub fixed_columns: usize,
    pub random_columns: usize,
    pub penalty: RandomPenalty,
    pub margins: Vec<Margin>,
    pub col_means: Vec<f64>,
    pub transform: DMatrix<f64>,
    pub label: String,
}

impl SmoothBlock {
    pub fn fixed_design(&self) -> DMatrix<f64> {
        self.design.columns(0, self.fixed_columns).into_owned()
    }

    pub fn random_design(&self) -> DMatrix<f64> {
        self.design
            .columns(self.fixed_columns, self.random_columns)
            .into_owned()
    }

    /// Raw basis for new covariate values (one slice per margin), with
    /// linear extension outside the training domain.
    pub fn raw_basis(&self, covariates: &[&[f64]]) -> Result<(DMatrix<f64>, Vec<bool>), SmoothError> {
        if covariates.len() != self.margins.len() {
            return Err(SmoothError::InvalidSpec(format!(
                "expected {} covariates, got {}",
                self.margins.len(),
                covariates.len()
            )));
        }
        let (mut basis, mut flags) = self.margins[0].design_extrapolating(covariates[0]);
        if self.margins.len() == 2 {
            if covariates[1].len() != covariates[0].len() {
                return Err(SmoothError::DimensionMismatch(
                    covariates[0].len(),
                    covariates[1].len(),
                ));
            }
            let (second, flags2) = self.margins[1].design_extrapolating(covariates[1]);
            basis = tensor_design(&basis, &second)?;
            for (f, g) in flags.iter_mut().zip(flags2) {
                *f |= g;
            }
        }
        Ok((basis, flags))
    }

    /// Constrained design rows for new covariate values.
    pub fn design_for(&self, covariates: &[&[f64]]) -> Result<(DMatrix<f64>, Vec<bool>), SmoothError> {
        let (mut basis, flags) = self.raw_basis(covariates)?;
        for (j, m) in self.col_means.iter().enumerate() {
            basis.column_mut(j).add_scalar_mut(-m);
        }
        Ok((basis * &self.transform, flags))
    }
}

/// Orthonormal basis of polynomial sequences of degree `< order` over
/// `0..k`, constant first.
fn polynomial_null_basis(k: usize, order: usize) -> DMatrix<f64> {
    let mut basis = DMatrix::zeros(k, order);
    let centre = (k as f64 - 1.0) / 2.0;
    for p in 0..order {
        let mut v: Vec<f64> = (0..k).map(|j| (j as f64 - centre).powi(p as i32)).collect();
        for q in 0..p {
            let dot: f64 = (0..k).map(|j| v[j] * basis[(j, q)]).sum();
            for j in 0..k {
                v[j] -= dot * basis[(j, q)];
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..k {
            basis[(j, p)] = v[j] / norm;
        }
    }
    basis
}

/// Penalty eigen-structure: null-space basis (constant first) and the
/// penalized eigenvectors with their eigenvalues in ascending order.
#[derive(Debug, Clone)]
pub struct PenaltyEigen {
    pub null_basis: DMatrix<f64>,
    pub range_basis: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

pub fn penalty_eigen(penalty: &DMatrix<f64>, order: usize) -> Result<PenaltyEigen, SmoothError> {
    let k = penalty.nrows();
    if penalty.ncols() != k {
        return Err(SmoothError::InvalidSpec("penalty must be square".into()));
    }
    let eig = SymmetricEigen::new(penalty.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let threshold = NULL_SPACE_TOLERANCE * max;
    let mut positive: Vec<(f64, usize)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(i, &v)| (v, i))
        .collect();
    let null_dim = k - positive.len();
    if null_dim != order {
        return Err(SmoothError::RankError {
            expected: order,
            found: null_dim,
        });
    }
    positive.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut range_basis = DMatrix::zeros(k, positive.len());
    for (c, &(_, i)) in positive.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        // sign convention: largest-magnitude entry positive
        let pivot = v.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.neg_mut();
        }
        range_basis.set_column(c, &v);
    }
    Ok(PenaltyEigen {
        null_basis: polynomial_null_basis(k, order),
        range_basis,
        eigenvalues: positive.into_iter().map(|(v, _)| v).collect(),
    })
}

fn centre_columns(design: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = design.nrows() as f64;
    let means: Vec<f64> = (0..design.ncols()).map(|j| design.column(j).sum() / n).collect();
    let mut centred = design.clone();
    for (j, m) in means.iter().enumerate() {
        centred.column_mut(j).add_scalar_mut(-m);
    }
    (centred, means)
}

/// Mixed-model form of a univariate penalized smooth.
///
/// With `K = U Λ Uᵀ`, penalized columns are `B_c U₊ Λ₊^{-1/2}` (iid
/// `N(0, tau^2)` coefficients) and the non-constant null-space directions
/// `B_c U₀` become fixed columns. `B_c` is the column-centred design, which
/// annihilates the constant direction.
pub fn reparameterize(
    design: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
    order: usize,
) -> Result<SmoothBlock, SmoothError> {
    let k = design.ncols();
    if penalty.nrows() != k {
        return Err(SmoothError::DimensionMismatch(penalty.nrows(), k));
    }
    let eig = penalty_eigen(penalty, order)?;
    let fixed = order - 1;
    let random = eig.eigenvalues.len();
    let mut transform = DMatrix::zeros(k, fixed + random);
    for c in 0..fixed {
        transform.set_column(c, &eig.null_basis.column(c + 1));
    }
    for (c, lambda) in eig.eigenvalues.iter().enumerate() {
        let scaled = eig.range_basis.column(c) / lambda.sqrt();
        transform.set_column(fixed + c, &scaled);
    }
    let (centred, col_means) = centre_columns(design);
    Ok(SmoothBlock {
        design: &centred * &transform,
        fixed_columns: fixed,
        random_columns: random,
        penalty: RandomPenalty::Iid,
        margins: Vec::new(),
        col_means,
        transform,
        label: String::new(),
    })
}

/// Mixed-model form of a tensor smooth with anisotropic penalty
/// `K₁/τ₁² ⊗ I + I ⊗ K₂/τ₂²`.
///
/// Both penalty components are diagonal in the basis `U₁ ⊗ U₂`; columns with
/// zero eigenvalue in both margins form the joint null space (fixed, constant
/// dropped), every other column keeps its eigenvalue pair.
pub fn reparameterize_tensor(
    design: &DMatrix<f64>,
    penalty1: &DMatrix<f64>,
    penalty2: &DMatrix<f64>,
    order: usize,
) -> Result<SmoothBlock, SmoothError> {
    let (k1, k2) = (penalty1.nrows(), penalty2.nrows());
    if design.ncols() != k1 * k2 {
        return Err(SmoothError::DimensionMismatch(design.ncols(), k1 * k2));
    }
    let e1 = penalty_eigen(penalty1, order)?;
    let e2 = penalty_eigen(penalty2, order)?;
    let full = |e: &PenaltyEigen| {
        let k = e.null_basis.nrows();
        let mut u = DMatrix::zeros(k, k);
        let mut lambda = vec![0.0; k];
        for c in 0..order {
            u.set_column(c, &e.null_basis.column(c));
        }
        for (c, l) in e.eigenvalues.iter().enumerate() {
            u.set_column(order + c, &e.range_basis.column(c));
            lambda[order + c] = *l;
        }
        (u, lambda)
    };
    let (u1, l1) = full(&e1);
    let (u2, l2) = full(&e2);

    let mut fixed_pairs = Vec::new();
    let mut random_pairs = Vec::new();
    for a in 0..k1 {
        for b in 0..k2 {
            if a == 0 && b == 0 {
                continue;
            }
            if a < order && b < order {
                fixed_pairs.push((a, b));
            } else {
                random_pairs.push((a, b));
            }
        }
    }
    let cols = fixed_pairs.len() + random_pairs.len();
    let mut transform = DMatrix::zeros(k1 * k2, cols);
    for (c, &(a, b)) in fixed_pairs.iter().chain(random_pairs.iter()).enumerate() {
        for i in 0..k1 {
            for j in 0..k2 {
                transform[(i * k2 + j, c)] = u1[(i, a)] * u2[(j, b)];
            }
        }
    }
    let first = random_pairs.iter().map(|&(a, _)| l1[a]).collect();
    let second = random_pairs.iter().map(|&(_, b)| l2[b]).collect();
    let (centred, col_means) = centre_columns(design);
    Ok(SmoothBlock {
        design: &centred * &transform,
        fixed_columns: fixed_pairs.len(),
        random_columns: random_pairs.len(),
        penalty: RandomPenalty::Tensor { first, second },
        margins: Vec::new(),
        col_means,
        transform,
        label: String::new(),
    })
}

/// Build a complete smooth block from covariate data.
pub fn build_smooth(spec: &SmoothSpec, covariates: &[&[f64]]) -> Result<SmoothBlock, SmoothError> {
    spec.validate()?;
    if covariates.len() != spec.covariates.len() {
        return Err(SmoothError::InvalidSpec("covariate count mismatch".into()));
    }
    let margins: Vec<Margin> = (0..covariates.len()).map(|i| spec.margin(i)).collect();
    let penalty = difference_penalty(spec.k, spec.penalty_order)?;
    let mut block = if margins.len() == 1 {
        let basis = margins[0].design(covariates[0])?;
        reparameterize(&basis, &penalty, spec.penalty_order)?
    } else {
        if covariates[0].len() != covariates[1].len() {
            return Err(SmoothError::DimensionMismatch(
                covariates[0].len(),
                covariates[1].len(),
            ));
        }
        let b1 = margins[0].design(covariates[0])?;
        let b2 = margins[1].design(covariates[1])?;
        let basis = tensor_design(&b1, &b2)?;
        reparameterize_tensor(&basis, &penalty, &penalty, spec.penalty_order)?
    };
    block.margins = margins;
    block.label = if spec.covariates.len() == 1 {
        format!("s_{}", spec.covariates[0])
    } else {
        format!("te_{}_{}", spec.covariates[0], spec.covariates[1])
    };
    Ok(block)
}

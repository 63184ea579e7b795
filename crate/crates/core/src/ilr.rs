//! Isometric log-ratio coordinates for the Gram-Schmidt sequential binary
//! partition basis.
//!
//! Row `d` (1-based) of the contrast matrix holds `d` entries equal to
//! `sqrt(1/(d(d+1)))`, then `-sqrt(d/(d+1))`, then zeros. Coordinate `d` is the
//! balance of the first `d` parts against part `d+1`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::simplex::{Composition, CompositionSample, SimplexError};

#[derive(Debug, Clone, PartialEq)]
pub struct IlrBasis {
    dim: usize,
    contrast: DMatrix<f64>,
}

/// Coordinates of a composition in the ilr basis (length `D-1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlrCoordinates {
    coords: Vec<f64>,
    basis_dimension: usize,
}

impl IlrCoordinates {
    pub fn new(coords: Vec<f64>, basis_dimension: usize) -> Result<Self, SimplexError> {
        if basis_dimension < 2 {
            return Err(SimplexError::DimensionTooSmall(basis_dimension));
        }
        if coords.len() != basis_dimension - 1 {
            return Err(SimplexError::DimensionMismatch {
                expected: basis_dimension - 1,
                found: coords.len(),
            });
        }
        Ok(Self {
            coords,
            basis_dimension,
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coords
    }

    pub fn basis_dimension(&self) -> usize {
        self.basis_dimension
    }
}

/// Scale factor `sqrt(d/(d+1))` of balance `d` (1-based).
pub fn balance_scale(d: usize) -> f64 {
    (d as f64 / (d as f64 + 1.0)).sqrt()
}

impl IlrBasis {
    pub fn new(dim: usize) -> Result<Self, SimplexError> {
        if dim < 2 {
            return Err(SimplexError::DimensionTooSmall(dim));
        }
        let mut contrast = DMatrix::zeros(dim - 1, dim);
        for row in 0..dim - 1 {
            let d = (row + 1) as f64;
            let lead = (1.0 / (d * (d + 1.0))).sqrt();
            for col in 0..=row {
                contrast[(row, col)] = lead;
            }
            contrast[(row, row + 1)] = -(d / (d + 1.0)).sqrt();
        }
        Ok(Self { dim, contrast })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(D-1) x D` matrix whose rows are the clr vectors of the basis elements.
    pub fn contrast_matrix(&self) -> &DMatrix<f64> {
        &self.contrast
    }

    fn check_dim(&self, found: usize) -> Result<(), SimplexError> {
        if found != self.dim {
            return Err(SimplexError::DimensionMismatch {
                expected: self.dim,
                found,
            });
        }
        Ok(())
    }

    /// Balance form: `sqrt(d/(d+1)) * ln(gm(y_1..y_d) / y_{d+1})`.
    pub fn ilr(&self, y: &Composition) -> Result<IlrCoordinates, SimplexError> {
        self.check_dim(y.dim())?;
        let logs: Vec<f64> = y.parts().iter().map(|p| p.ln()).collect();
        Ok(IlrCoordinates {
            coords: ilr_from_logs(&logs),
            basis_dimension: self.dim,
        })
    }

    /// Same coordinates through the contrast matrix, `V · ln(y)`.
    pub fn ilr_by_contrast(&self, y: &Composition) -> Result<IlrCoordinates, SimplexError> {
        self.check_dim(y.dim())?;
        let logs: Vec<f64> = y.parts().iter().map(|p| p.ln()).collect();
        let coords = (0..self.dim - 1)
            .map(|r| (0..self.dim).map(|c| self.contrast[(r, c)] * logs[c]).sum())
            .collect();
        Ok(IlrCoordinates {
            coords,
            basis_dimension: self.dim,
        })
    }

    /// `C(exp(Vᵀ v))`, closed to `kappa`.
    pub fn ilr_inverse_with_kappa(
        &self,
        v: &[f64],
        kappa: f64,
    ) -> Result<Composition, SimplexError> {
        if v.len() + 1 != self.dim {
            return Err(SimplexError::DimensionMismatch {
                expected: self.dim - 1,
                found: v.len(),
            });
        }
        let logs: Vec<f64> = (0..self.dim)
            .map(|c| (0..self.dim - 1).map(|r| self.contrast[(r, c)] * v[r]).sum())
            .collect();
        Composition::from_logs(&logs, kappa)
    }

    pub fn ilr_inverse(&self, v: &IlrCoordinates) -> Result<Composition, SimplexError> {
        self.check_dim(v.basis_dimension)?;
        self.ilr_inverse_with_kappa(&v.coords, 1.0)
    }

    /// Row-wise ilr of a sample, `N x (D-1)`.
    pub fn ilr_sample(&self, sample: &CompositionSample) -> Result<DMatrix<f64>, SimplexError> {
        self.check_dim(sample.dim())?;
        let mut out = DMatrix::zeros(sample.len(), self.dim - 1);
        for (n, row) in sample.rows().iter().enumerate() {
            let c = self.ilr(row)?;
            for (d, v) in c.coords.iter().enumerate() {
                out[(n, d)] = *v;
            }
        }
        Ok(out)
    }

    pub fn ilr_inverse_sample(
        &self,
        coords: &DMatrix<f64>,
        kappa: f64,
    ) -> Result<CompositionSample, SimplexError> {
        if coords.ncols() + 1 != self.dim {
            return Err(SimplexError::DimensionMismatch {
                expected: self.dim - 1,
                found: coords.ncols(),
            });
        }
        let rows = (0..coords.nrows())
            .map(|n| {
                let v: Vec<f64> = coords.row(n).iter().cloned().collect();
                self.ilr_inverse_with_kappa(&v, kappa)
            })
            .collect::<Result<Vec<_>, _>>()?;
        CompositionSample::new(rows)
    }
}

/// Balance coordinates from log-parts, without validation.
pub(crate) fn ilr_from_logs(logs: &[f64]) -> Vec<f64> {
    let mut coords = Vec::with_capacity(logs.len() - 1);
    let mut cumulative = 0.0;
    for d in 1..logs.len() {
        cumulative += logs[d - 1];
        let log_gm = cumulative / d as f64;
        coords.push(balance_scale(d) * (log_gm - logs[d]));
    }
    coords
}

/// Convenience wrapper building the basis for `y`'s dimension.
pub fn ilr(y: &Composition) -> Result<IlrCoordinates, SimplexError> {
    IlrBasis::new(y.dim())?.ilr(y)
}

pub fn ilr_inverse(v: &IlrCoordinates) -> Result<Composition, SimplexError> {
    IlrBasis::new(v.basis_dimension)?.ilr_inverse(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::closure;

    #[test]
    fn basis_examples() {
        let b2 = IlrBasis::new(2).unwrap();
        let h = 0.5f64.sqrt();
        assert!((b2.contrast_matrix()[(0, 0)] - h).abs() < 1e-15);
        assert!((b2.contrast_matrix()[(0, 1)] + h).abs() < 1e-15);

        let b3 = IlrBasis::new(3).unwrap();
        let v = b3.contrast_matrix();
        let expected = [
            [h, -h, 0.0],
            [(1.0f64 / 6.0).sqrt(), (1.0f64 / 6.0).sqrt(), -(2.0f64 / 3.0).sqrt()],
        ];
        for r in 0..2 {
            for c in 0..3 {
                assert!((v[(r, c)] - expected[r][c]).abs() < 1e-15);
            }
        }
        assert_eq!(IlrBasis::new(1), Err(SimplexError::DimensionTooSmall(1)));
    }

    #[test]
    fn basis_is_orthonormal_with_zero_row_sums() {
        for dim in 2..=12 {
            let b = IlrBasis::new(dim).unwrap();
            let v = b.contrast_matrix();
            let gram = v * v.transpose();
            for r in 0..dim - 1 {
                assert!(v.row(r).sum().abs() < 1e-12);
                for c in 0..dim - 1 {
                    let target = if r == c { 1.0 } else { 0.0 };
                    assert!((gram[(r, c)] - target).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn ilr_examples() {
        let u = closure(&[1.0; 5], 1.0).unwrap();
        assert!(ilr(&u).unwrap().as_slice().iter().all(|c| c.abs() < 1e-15));

        let y = closure(&[0.8, 0.2], 1.0).unwrap();
        let c = ilr(&y).unwrap();
        assert!((c.as_slice()[0] - 0.5f64.sqrt() * 4f64.ln()).abs() < 1e-15);
        assert!((c.as_slice()[0] - 0.980258).abs() < 1e-6);

        // sand/silt/clay balances
        let soil = closure(&[40.0, 35.0, 25.0], 100.0).unwrap();
        let c = ilr(&soil).unwrap();
        let s = soil.parts();
        assert!((c.as_slice()[0] - 0.5f64.sqrt() * (s[0] / s[1]).ln()).abs() < 1e-14);
        let bal = (2.0f64 / 3.0).sqrt() * ((s[0] * s[1]).sqrt() / s[2]).ln();
        assert!((c.as_slice()[1] - bal).abs() < 1e-14);
    }

    #[test]
    fn inverse_examples() {
        let b = IlrBasis::new(4).unwrap();
        let zero = IlrCoordinates::new(vec![0.0; 3], 4).unwrap();
        for p in b.ilr_inverse(&zero).unwrap().parts() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let v = IlrCoordinates::new(vec![0.980258], 2).unwrap();
        let y = ilr_inverse(&v).unwrap();
        assert!((y.parts()[0] - 0.8).abs() < 1e-6);
        let exact = IlrCoordinates::new(vec![0.5f64.sqrt() * 4f64.ln()], 2).unwrap();
        assert!((ilr_inverse(&exact).unwrap().parts()[0] - 0.8).abs() < 1e-15);
        assert!(IlrCoordinates::new(vec![0.0; 2], 4).is_err());
        assert!(b.ilr_inverse_with_kappa(&[0.0; 2], 1.0).is_err());
    }

    #[test]
    fn sample_with_single_row_matches_scalar() {
        let b = IlrBasis::new(3).unwrap();
        let y = closure(&[0.2, 0.5, 0.3], 1.0).unwrap();
        let s = CompositionSample::new(vec![y.clone()]).unwrap();
        let m = b.ilr_sample(&s).unwrap();
        let c = b.ilr(&y).unwrap();
        assert_eq!(m.nrows(), 1);
        assert_eq!(m.row(0).iter().cloned().collect::<Vec<_>>(), c.as_slice());
        let back = b.ilr_inverse_sample(&m, 1.0).unwrap();
        for (a, e) in back.rows()[0].parts().iter().zip(y.parts()) {
            assert!((a - e).abs() < 1e-15);
        }
    }
}

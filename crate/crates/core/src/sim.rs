//! Seeded generators for the linear and additive simulation designs and a
//! synthetic soil-texture dataset.
//!
//! Every generator draws covariates from ChaCha8 stream 0 and noise from
//! stream 1 of the same seed, so changing `n` or the noise settings never
//! changes how covariates are drawn, and vice versa.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ilr::IlrBasis;
use crate::model::{Column, Dataset, ModelError, Table};
use crate::simplex::{CompositionSample, SimplexError};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("argument {0} is outside [0, 1]")]
    OutOfDomain(f64),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(String),
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn check_unit(x: f64) -> Result<(), SimError> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(SimError::OutOfDomain(x))
    }
}

/// One component of the four-term additive benchmark.
pub fn gu_wahba(x: f64) -> Result<f64, SimError> {
    check_unit(x)?;
    Ok(0.2 * x.powi(11) * (10.0 * (1.0 - x)).powi(6)
        + 10.0 * (10.0 * x).powi(3) * (1.0 - x).powi(10))
}

pub fn sine_f(x: f64) -> Result<f64, SimError> {
    check_unit(x)?;
    Ok((2.0 * PI * x).sin())
}

fn bump(x2: f64, x3: f64, c2: f64, c3: f64) -> f64 {
    (-(x2 - c2).powi(2) / 0.09 - (x3 - c3).powi(2) / 0.16).exp()
}

fn bivariate_prefactor() -> f64 {
    PI.powf(0.3) * 0.4
}

/// Two-bump surface with maxima near (0.2, 0.3) and (0.7, 0.8).
pub fn bivariate_f1(x2: f64, x3: f64) -> Result<f64, SimError> {
    check_unit(x2)?;
    check_unit(x3)?;
    Ok(bivariate_prefactor() * (1.2 * bump(x2, x3, 0.2, 0.3) + 0.8 * bump(x2, x3, 0.7, 0.8)))
}

/// Single bump centred at (0.5, 0.5).
pub fn bivariate_f2(x2: f64, x3: f64) -> Result<f64, SimError> {
    check_unit(x2)?;
    check_unit(x3)?;
    Ok(bivariate_prefactor() * 1.2 * bump(x2, x3, 0.5, 0.5))
}

/// Lower Cholesky factor of `diag(sigma) R diag(sigma)` where `R` has the
/// given upper-triangle correlations (row-major order: 12, 13, ..., 23, ...).
/// Zero sds are allowed and give a degenerate (noise-free) coordinate.
pub fn noise_cholesky(sigma: &[f64], rho: &[f64]) -> Result<DMatrix<f64>, SimError> {
    let q = sigma.len();
    if rho.len() != q * (q - 1) / 2 {
        return Err(SimError::InvalidCovariance(format!(
            "expected {} correlations, got {}",
            q * (q - 1) / 2,
            rho.len()
        )));
    }
    if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(SimError::InvalidCovariance(format!("invalid sd {s}")));
    }
    if let Some(r) = rho.iter().find(|r| !(r.abs() < 1.0)) {
        return Err(SimError::InvalidCovariance(format!("invalid correlation {r}")));
    }
    let mut r = DMatrix::identity(q, q);
    let mut k = 0;
    for i in 0..q {
        for j in i + 1..q {
            r[(i, j)] = rho[k];
            r[(j, i)] = rho[k];
            k += 1;
        }
    }
    let l = r
        .cholesky()
        .ok_or_else(|| SimError::InvalidCovariance("correlation matrix is not positive definite".into()))?
        .l();
    Ok(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(sigma)) * l)
}

/// `n x q` matrix of correlated Gaussian noise.
fn draw_noise(rng: &mut ChaCha8Rng, n: usize, chol: &DMatrix<f64>) -> DMatrix<f64> {
    let q = chol.nrows();
    let z = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    z * chol.transpose()
}

fn numeric_table(columns: Vec<(String, Vec<f64>)>) -> Result<Table, SimError> {
    let mut t = Table::new();
    for (name, values) in columns {
        t.push(name, Column::Numeric(values))?;
    }
    Ok(t)
}

fn to_dataset(
    part_names: Vec<String>,
    ilr: &DMatrix<f64>,
    kappa: f64,
    covariates: Table,
) -> Result<Dataset, SimError> {
    let basis = IlrBasis::new(part_names.len())?;
    let sample: CompositionSample = basis.ilr_inverse_sample(ilr, kappa)?;
    Ok(Dataset::new(part_names, sample, covariates)?)
}

fn centered(values: Vec<f64>) -> Vec<f64> {
    let m = stats::mean(&values);
    values.into_iter().map(|v| v - m).collect()
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

/// True parameters and noiseless predictor values of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub design: String,
    pub seed: u64,
    pub n: usize,
    pub sigma: Vec<f64>,
    /// Upper-triangle correlations, row-major.
    pub rho: Vec<f64>,
    /// Named coefficients per ilr coordinate (may be empty).
    pub coefficients: Vec<Vec<(String, f64)>>,
    /// Named per-row component values per ilr coordinate, e.g. centred smooths.
    pub components: Vec<Vec<(String, Vec<f64>)>>,
    /// Noiseless ilr mean, one row per observation.
    pub mean: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn component(&self, coord: usize, name: &str) -> Option<&[f64]> {
        self.components
            .get(coord)?
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn write_json(&self, path: &Path) -> Result<(), SimError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| SimError::Io(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearSimConfig {
    pub n: usize,
    /// `beta0[d]` per ilr coordinate.
    pub intercepts: Vec<f64>,
    /// `slopes[d][k]` for covariate `x{k+1}`.
    pub slopes: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub rho: Vec<f64>,
    pub seed: u64,
}

impl Default for LinearSimConfig {
    fn default() -> Self {
        Self {
            n: 100,
            intercepts: vec![1.0, -0.5, -2.0],
            slopes: vec![
                vec![-0.5, 1.0, -0.5],
                vec![1.0, -1.0, 0.0],
                vec![1.0, -0.5, -0.5],
            ],
            sigma: vec![0.10, 0.05, 0.08],
            rho: vec![0.5, 0.2, 0.8],
            seed: 1,
        }
    }
}

impl LinearSimConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

/// Linear design: `x1..xK ~ U(0,1)` enter the predictor, and one extra
/// `U(0,1)` covariate `x{K+1}` is generated but has no effect.
pub fn simulate_linear(config: &LinearSimConfig) -> Result<(Dataset, GroundTruth), SimError> {
    let q = config.intercepts.len();
    if q == 0 || config.slopes.len() != q || config.sigma.len() != q {
        return Err(SimError::InvalidConfig(
            "intercepts, slopes and sigma need one entry per ilr coordinate".into(),
        ));
    }
    let k = config.slopes[0].len();
    if config.slopes.iter().any(|s| s.len() != k) {
        return Err(SimError::InvalidConfig("ragged slope matrix".into()));
    }
    if config.n < 2 {
        return Err(SimError::InvalidConfig("need at least two rows".into()));
    }
    let chol = noise_cholesky(&config.sigma, &config.rho)?;
    let n = config.n;
    let mut cov_rng = rng(config.seed, 0);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..=k).map(|_| cov_rng.random::<f64>()).collect())
        .collect();
    let mean = DMatrix::from_fn(n, q, |i, d| {
        config.intercepts[d]
            + (0..k).map(|j| config.slopes[d][j] * x[i][j]).sum::<f64>()
    });
    let ilr = &mean + draw_noise(&mut rng(config.seed, 1), n, &chol);
    let covariates = numeric_table(
        (0..=k)
            .map(|j| (format!("x{}", j + 1), x.iter().map(|r| r[j]).collect()))
            .collect(),
    )?;
    let parts = (1..=q + 1).map(|i| format!("y{i}")).collect();
    let data = to_dataset(parts, &ilr, 1.0, covariates)?;
    let coefficients = (0..q)
        .map(|d| {
            std::iter::once(("Intercept".to_string(), config.intercepts[d]))
                .chain((0..k).map(|j| (format!("x{}", j + 1), config.slopes[d][j])))
                .collect()
        })
        .collect();
    let truth = GroundTruth {
        design: "linear".into(),
        seed: config.seed,
        n,
        sigma: config.sigma.clone(),
        rho: config.rho.clone(),
        coefficients,
        components: vec![Vec::new(); q],
        mean: matrix_rows(&mean),
    };
    Ok((data, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GamSimConfig {
    pub n: usize,
    pub sigma: [f64; 2],
    pub rho: f64,
    pub seed: u64,
}

impl Default for GamSimConfig {
    fn default() -> Self {
        Self {
            n: 100,
            sigma: [0.05, 0.03],
            rho: 0.5,
            seed: 1,
        }
    }
}

impl GamSimConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

/// Additive design in `S^3`: coordinate 1 is `gu_wahba(xs1) + f1(xs2, xs3)`,
/// coordinate 2 is `sin(2π xs1) + f2(xs2, xs3)`, each function centred at
/// its mean over the realised design points. Components are recorded as
/// `s1`, `te` (coordinate-specific) in the ground truth.
pub fn simulate_gam(config: &GamSimConfig) -> Result<(Dataset, GroundTruth), SimError> {
    if config.n < 2 {
        return Err(SimError::InvalidConfig("need at least two rows".into()));
    }
    let chol = noise_cholesky(&config.sigma, &[config.rho])?;
    let n = config.n;
    let mut cov_rng = rng(config.seed, 0);
    let xs: Vec<[f64; 3]> = (0..n)
        .map(|_| [cov_rng.random(), cov_rng.random(), cov_rng.random()])
        .collect();
    let eval = |f: &dyn Fn(&[f64; 3]) -> Result<f64, SimError>| -> Result<Vec<f64>, SimError> {
        Ok(centered(xs.iter().map(f).collect::<Result<Vec<_>, _>>()?))
    };
    let s1 = eval(&|x| gu_wahba(x[0]))?;
    let te1 = eval(&|x| bivariate_f1(x[1], x[2]))?;
    let s2 = eval(&|x| sine_f(x[0]))?;
    let te2 = eval(&|x| bivariate_f2(x[1], x[2]))?;
    let mean = DMatrix::from_fn(n, 2, |i, d| {
        if d == 0 {
            s1[i] + te1[i]
        } else {
            s2[i] + te2[i]
        }
    });
    let ilr = &mean + draw_noise(&mut rng(config.seed, 1), n, &chol);
    let covariates = numeric_table(
        (0..3)
            .map(|j| (format!("xs{}", j + 1), xs.iter().map(|r| r[j]).collect()))
            .collect(),
    )?;
    let parts = (1..=3).map(|i| format!("y{i}")).collect();
    let data = to_dataset(parts, &ilr, 1.0, covariates)?;
    let truth = GroundTruth {
        design: "gam".into(),
        seed: config.seed,
        n,
        sigma: config.sigma.to_vec(),
        rho: vec![config.rho],
        coefficients: vec![Vec::new(); 2],
        components: vec![
            vec![("s1".into(), s1), ("te".into(), te1)],
            vec![("s1".into(), s2), ("te".into(), te2)],
        ],
        mean: matrix_rows(&mean),
    };
    Ok((data, truth))
}

/// Coordinate ranges of the synthetic soil survey.
pub const SOIL_LON: (f64, f64) = (-3.4, -1.8);
pub const SOIL_LAT: (f64, f64) = (42.5, 43.4);
const SOIL_SIGMA: [f64; 2] = [0.15, 0.12];
const SOIL_RHO: f64 = 0.3;
const SOIL_INTERCEPT: [f64; 2] = [0.1, 0.35];
const SOIL_YEARS: [f64; 5] = [2006.0, 2008.0, 2010.0, 2012.0, 2014.0];
const SOIL_YEAR_EFFECT: [[f64; 2]; 5] = [
    [-0.08, 0.05],
    [0.03, -0.04],
    [0.10, 0.02],
    [-0.05, -0.06],
    [0.00, 0.03],
];

/// Lithology effect of level `l` (1..=13); level 1 is the reference.
pub fn soil_lithology_effect(level: usize) -> [f64; 2] {
    if level <= 1 {
        return [0.0, 0.0];
    }
    let l = level as f64;
    [0.35 * (1.7 * l).sin(), 0.25 * (0.9 * l + 0.5).cos()]
}

/// Uncentred spatial field at a location, per ilr coordinate.
pub fn soil_spatial_field(lon: f64, lat: f64) -> [f64; 2] {
    let u = (lon - SOIL_LON.0) / (SOIL_LON.1 - SOIL_LON.0);
    let v = (lat - SOIL_LAT.0) / (SOIL_LAT.1 - SOIL_LAT.0);
    let g = |cu: f64, cv: f64, w: f64| (-((u - cu).powi(2) + (v - cv).powi(2)) / w).exp();
    [
        0.6 * g(0.3, 0.65, 0.12) - 0.5 * g(0.75, 0.3, 0.1),
        0.45 * (PI * u).sin() * (1.2 * PI * v).cos() + 0.3 * g(0.6, 0.7, 0.08),
    ]
}

fn soil_elev_effect(elev: f64) -> [f64; 2] {
    let e = elev / 1000.0;
    [0.4 * (e - 0.6).powi(2), -0.25 * (2.0 * e).sin()]
}

fn soil_slope_effect(slope: f64) -> [f64; 2] {
    let s = slope / 40.0;
    [-0.3 * s, 0.2 * (s - 0.5).powi(2)]
}

/// Synthetic sand/silt/clay survey in percent with a 13-level lithology
/// factor `Lit`, sampling year `Year`, `Elev`, `Slope` and `Lon`/`Lat`.
/// The ground truth records centred components `Elev`, `Slope`, `spatial`
/// and the lithology/year effects.
pub fn simulate_soil_like(n: usize, seed: u64) -> Result<(Dataset, GroundTruth), SimError> {
    if n < 50 {
        return Err(SimError::InvalidConfig(format!("need n >= 50, got {n}")));
    }
    let chol = noise_cholesky(&SOIL_SIGMA, &[SOIL_RHO])?;
    let mut cov_rng = rng(seed, 0);
    let mut lit = Vec::with_capacity(n);
    let mut year = Vec::with_capacity(n);
    let mut elev = Vec::with_capacity(n);
    let mut slope = Vec::with_capacity(n);
    let mut lon = Vec::with_capacity(n);
    let mut lat = Vec::with_capacity(n);
    for i in 0..n {
        // every level appears at least once
        lit.push(if i < 13 {
            i + 1
        } else {
            cov_rng.random_range(1..=13)
        });
        year.push(SOIL_YEARS[cov_rng.random_range(0..SOIL_YEARS.len())]);
        elev.push(1200.0 * cov_rng.random::<f64>());
        slope.push(40.0 * cov_rng.random::<f64>());
        lon.push(SOIL_LON.0 + (SOIL_LON.1 - SOIL_LON.0) * cov_rng.random::<f64>());
        lat.push(SOIL_LAT.0 + (SOIL_LAT.1 - SOIL_LAT.0) * cov_rng.random::<f64>());
    }
    let component = |f: &dyn Fn(usize) -> [f64; 2], d: usize| -> Vec<f64> {
        centered((0..n).map(|i| f(i)[d]).collect())
    };
    let year_index = |y: f64| SOIL_YEARS.iter().position(|v| *v == y).unwrap();
    let mut components = Vec::new();
    for d in 0..2 {
        components.push(vec![
            ("Elev".to_string(), component(&|i| soil_elev_effect(elev[i]), d)),
            ("Slope".to_string(), component(&|i| soil_slope_effect(slope[i]), d)),
            (
                "spatial".to_string(),
                component(&|i| soil_spatial_field(lon[i], lat[i]), d),
            ),
        ]);
    }
    let mean = DMatrix::from_fn(n, 2, |i, d| {
        SOIL_INTERCEPT[d]
            + soil_lithology_effect(lit[i])[d]
            + SOIL_YEAR_EFFECT[year_index(year[i])][d]
            + components[d].iter().map(|(_, v)| v[i]).sum::<f64>()
    });
    let ilr = &mean + draw_noise(&mut rng(seed, 1), n, &chol);
    let covariates = numeric_table(vec![
        ("Lit".into(), lit.iter().map(|l| *l as f64).collect()),
        ("Year".into(), year),
        ("Elev".into(), elev),
        ("Slope".into(), slope),
        ("Lon".into(), lon),
        ("Lat".into(), lat),
    ])?;
    let parts = vec!["sand".to_string(), "silt".to_string(), "clay".to_string()];
    let data = to_dataset(parts, &ilr, 100.0, covariates)?;
    let coefficients = (0..2)
        .map(|d| {
            let mut c = vec![("Intercept".to_string(), SOIL_INTERCEPT[d])];
            c.extend((2..=13).map(|l| (format!("Lit{l}"), soil_lithology_effect(l)[d])));
            c.extend(
                SOIL_YEARS
                    .iter()
                    .zip(&SOIL_YEAR_EFFECT)
                    .map(|(y, e)| (format!("Year{y}"), e[d])),
            );
            c
        })
        .collect();
    let truth = GroundTruth {
        design: "soil".into(),
        seed,
        n,
        sigma: SOIL_SIGMA.to_vec(),
        rho: vec![SOIL_RHO],
        coefficients,
        components,
        mean: matrix_rows(&mean),
    };
    Ok((data, truth))
}

/// Write a simulated dataset (parts, then covariates) and its ground truth.
pub fn write_simulation(
    data: &Dataset,
    truth: &GroundTruth,
    csv_path: &Path,
    truth_path: &Path,
) -> Result<(), SimError> {
    data.to_table().write_csv_path(csv_path)?;
    truth.write_json(truth_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gu_wahba_values() {
        assert_eq!(gu_wahba(0.0).unwrap(), 0.0);
        assert_eq!(gu_wahba(1.0).unwrap(), 0.0);
        // 0.2 * 5^6 / 2^11 + 10 * 5^3 / 2^10
        let exact = 0.2 * 15625.0 / 2048.0 + 1250.0 / 1024.0;
        assert!((gu_wahba(0.5).unwrap() - exact).abs() < 1e-13);
        assert!((gu_wahba(0.5).unwrap() - 2.746582).abs() < 1e-6);
        assert!(matches!(gu_wahba(1.5), Err(SimError::OutOfDomain(_))));
    }

    #[test]
    fn sine_quarter_period() {
        assert!((sine_f(0.25).unwrap() - 1.0).abs() < 1e-15);
        assert!(sine_f(-0.1).is_err());
    }

    #[test]
    fn bivariate_centre_value() {
        let expected = PI.powf(0.3) * 0.4 * 1.2;
        assert!((bivariate_f2(0.5, 0.5).unwrap() - expected).abs() < 1e-15);
        assert!((bivariate_f2(0.5, 0.5).unwrap() - 0.6766845).abs() < 1e-7);
    }

    #[test]
    fn bivariate_f1_has_two_local_maxima() {
        let m = 200;
        let h = 1.0 / (m - 1) as f64;
        let f = |i: usize, j: usize| bivariate_f1(i as f64 * h, j as f64 * h).unwrap();
        let mut maxima = Vec::new();
        for i in 1..m - 1 {
            for j in 1..m - 1 {
                let v = f(i, j);
                let is_max = (0..3).all(|a| {
                    (0..3).all(|b| (a == 1 && b == 1) || v > f(i + a - 1, j + b - 1))
                });
                if is_max {
                    maxima.push((i as f64 * h, j as f64 * h));
                }
            }
        }
        assert_eq!(maxima.len(), 2, "{maxima:?}");
        assert!((maxima[0].0 - 0.2).abs() < 0.03 && (maxima[0].1 - 0.3).abs() < 0.03);
        assert!((maxima[1].0 - 0.7).abs() < 0.03 && (maxima[1].1 - 0.8).abs() < 0.03);
    }

    #[test]
    fn bivariate_functions_are_positive() {
        for i in 0..=50 {
            for j in 0..=50 {
                let (a, b) = (i as f64 / 50.0, j as f64 / 50.0);
                assert!(bivariate_f1(a, b).unwrap() > 0.0);
                assert!(bivariate_f2(a, b).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn default_linear_truth() {
        let (data, truth) = simulate_linear(&LinearSimConfig::default()).unwrap();
        assert_eq!(data.nrows(), 100);
        assert_eq!(data.dim(), 4);
        assert_eq!(data.covariates.names(), &["x1", "x2", "x3", "x4"]);
        assert_eq!(truth.coefficients[0][1], ("x1".to_string(), -0.5));
        assert_eq!(truth.coefficients[2][0], ("Intercept".to_string(), -2.0));
        assert_eq!(truth.sigma, vec![0.10, 0.05, 0.08]);
        assert_eq!(truth.rho, vec![0.5, 0.2, 0.8]);
    }

    #[test]
    fn noiseless_linear_matches_predictor() {
        let config = LinearSimConfig {
            sigma: vec![0.0; 3],
            ..LinearSimConfig::default()
        };
        let (data, truth) = simulate_linear(&config).unwrap();
        let basis = IlrBasis::new(4).unwrap();
        for (row, mean) in data.composition.rows().iter().zip(&truth.mean) {
            let expected = basis.ilr_inverse_with_kappa(mean, 1.0).unwrap();
            assert_eq!(row, &expected);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = simulate_linear(&LinearSimConfig::with_seed(9)).unwrap();
        let b = simulate_linear(&LinearSimConfig::with_seed(9)).unwrap();
        assert_eq!(a, b);
        let c = simulate_linear(&LinearSimConfig::with_seed(10)).unwrap();
        assert_ne!(a.0, c.0);
        assert_eq!(simulate_gam(&GamSimConfig::default()).unwrap(), simulate_gam(&GamSimConfig::default()).unwrap());
        assert_eq!(simulate_soil_like(60, 2).unwrap(), simulate_soil_like(60, 2).unwrap());
    }

    #[test]
    fn noise_covariance_converges() {
        let config = LinearSimConfig {
            n: 100_000,
            seed: 3,
            ..LinearSimConfig::default()
        };
        let (data, truth) = simulate_linear(&config).unwrap();
        let ilr = IlrBasis::new(4).unwrap().ilr_sample(&data.composition).unwrap();
        let n = config.n as f64;
        let resid: Vec<Vec<f64>> = (0..3)
            .map(|d| (0..config.n).map(|i| ilr[(i, d)] - truth.mean[i][d]).collect())
            .collect();
        let rho = |i: usize, j: usize| match (i, j) {
            (0, 1) => 0.5,
            (0, 2) => 0.2,
            (1, 2) => 0.8,
            _ => 1.0,
        };
        for i in 0..3 {
            for j in i..3 {
                let target = rho(i, j) * config.sigma[i] * config.sigma[j];
                let prods: Vec<f64> = resid[i].iter().zip(&resid[j]).map(|(a, b)| a * b).collect();
                let est = stats::mean(&prods);
                let se = stats::sd(&prods) / n.sqrt();
                assert!((est - target).abs() < 3.0 * se, "({i},{j}) {est} vs {target}");
            }
        }
    }

    #[test]
    fn invalid_covariance_is_rejected() {
        let bad = LinearSimConfig {
            rho: vec![0.99, -0.99, 0.99],
            ..LinearSimConfig::default()
        };
        assert!(matches!(simulate_linear(&bad), Err(SimError::InvalidCovariance(_))));
        let bad = GamSimConfig {
            rho: 1.0,
            ..GamSimConfig::default()
        };
        assert!(matches!(simulate_gam(&bad), Err(SimError::InvalidCovariance(_))));
    }

    #[test]
    fn gam_components_are_centred() {
        let (data, truth) = simulate_gam(&GamSimConfig::default()).unwrap();
        assert_eq!(data.covariates.names(), &["xs1", "xs2", "xs3"]);
        assert_eq!(data.dim(), 3);
        for d in 0..2 {
            for name in ["s1", "te"] {
                assert!(stats::mean(truth.component(d, name).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_gam_reproduces_surfaces() {
        let config = GamSimConfig {
            sigma: [0.0, 0.0],
            ..GamSimConfig::default()
        };
        let (data, truth) = simulate_gam(&config).unwrap();
        let ilr = IlrBasis::new(3).unwrap().ilr_sample(&data.composition).unwrap();
        for i in 0..config.n {
            for d in 0..2 {
                let surface = truth.component(d, "s1").unwrap()[i] + truth.component(d, "te").unwrap()[i];
                assert!((ilr[(i, d)] - surface).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gam_signal_adds_variance() {
        for seed in 1..=10 {
            let (data, _) = simulate_gam(&GamSimConfig::with_seed(seed)).unwrap();
            let tv = crate::simplex::total_variance(&data.composition).unwrap();
            assert!(tv > 0.05f64.powi(2) + 0.03f64.powi(2));
        }
    }

    #[test]
    fn soil_dataset_shape() {
        let (data, truth) = simulate_soil_like(120, 4).unwrap();
        assert_eq!(data.part_names, vec!["sand", "silt", "clay"]);
        assert_eq!(data.composition.kappa(), 100.0);
        let lit = data.covariates.labels("Lit").unwrap();
        let mut levels = lit.clone();
        levels.sort();
        levels.dedup();
        assert_eq!(levels.len(), 13);
        assert!(truth.component(0, "spatial").is_some());
        assert!(simulate_soil_like(10, 1).is_err());
    }
}

//! WAIC, Bayesian R² for compositions and the probabilistic R² comparison.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("need at least {needed} draws, found {found}")]
    InsufficientDraws { needed: usize, found: usize },
    #[error("log-likelihood is not finite at draw {draw}, observation {obs}")]
    NonFiniteLogLik { draw: usize, obs: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("variance draw {draw} of coordinate {coord} is not positive")]
    NonPositiveVariance { draw: usize, coord: usize },
    #[error("cannot compare {0:?} with {1:?} R² draws")]
    KindMismatch(R2Kind, R2Kind),
    #[error("no R² draws to compare")]
    EmptyDraws,
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        EvalError::Io(e.to_string())
    }
}

/// Per-draw, per-observation log densities (`S x N`).
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseLogLik(DMatrix<f64>);

impl PointwiseLogLik {
    pub fn new(ll: DMatrix<f64>) -> Result<Self, EvalError> {
        if ll.nrows() < 2 {
            return Err(EvalError::InsufficientDraws {
                needed: 2,
                found: ll.nrows(),
            });
        }
        for obs in 0..ll.ncols() {
            for draw in 0..ll.nrows() {
                if !ll[(draw, obs)].is_finite() {
                    return Err(EvalError::NonFiniteLogLik { draw, obs });
                }
            }
        }
        Ok(Self(ll))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, EvalError> {
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(EvalError::ShapeMismatch("ragged log-likelihood rows".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), n, |s, i| rows[s][i]))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n_draws(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_obs(&self) -> usize {
        self.0.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waic {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
}

pub fn waic(ll: &PointwiseLogLik) -> Waic {
    let m = ll.matrix();
    let s = m.nrows() as f64;
    let mut lpd = Vec::with_capacity(m.ncols());
    let mut pen = Vec::with_capacity(m.ncols());
    for col in m.column_iter() {
        let values: Vec<f64> = col.iter().cloned().collect();
        lpd.push(stats::log_sum_exp(&values) - s.ln());
        pen.push(stats::variance(&values));
    }
    let lppd = stats::pairwise_sum(&lpd);
    let p_waic = stats::pairwise_sum(&pen);
    Waic {
        waic: -2.0 * lppd + 2.0 * p_waic,
        lppd,
        p_waic,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R2Kind {
    Residual,
    Model,
}

impl R2Kind {
    pub fn as_str(&self) -> &'static str {
        match self {
            R2Kind::Residual => "BR-CoDa-R2",
            R2Kind::Model => "BM-CoDa-R2",
        }
    }
}

/// Posterior draws of an R² measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Draws {
    pub kind: R2Kind,
    pub label: String,
    pub values: Vec<f64>,
    /// Draws where both variance components were zero (reported as 0).
    pub degenerate: Vec<usize>,
}

impl R2Draws {
    pub fn summary(&self) -> Summary {
        Summary::of(&self.values)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub q2_5: f64,
    pub q50: f64,
    pub q97_5: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        Summary {
            mean: stats::mean(values),
            sd: stats::sd(values),
            q2_5: stats::quantile_sorted(&sorted, 0.025),
            q50: stats::quantile_sorted(&sorted, 0.5),
            q97_5: stats::quantile_sorted(&sorted, 0.975),
        }
    }
}

fn check_pred(pred: &[DMatrix<f64>]) -> Result<(usize, usize), EvalError> {
    let first = pred.first().ok_or(EvalError::InsufficientDraws {
        needed: 1,
        found: 0,
    })?;
    let shape = first.shape();
    if pred.iter().any(|p| p.shape() != shape) {
        return Err(EvalError::ShapeMismatch("prediction draws differ in shape".into()));
    }
    if shape.0 < 2 {
        return Err(EvalError::ShapeMismatch(format!(
            "need at least two observations, found {}",
            shape.0
        )));
    }
    Ok(shape)
}

fn column_variance_sum(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| stats::variance(c.as_slice()))
        .sum()
}

fn ratio(fit: f64, res: f64, draw: usize, degenerate: &mut Vec<usize>) -> f64 {
    if fit + res == 0.0 {
        degenerate.push(draw);
        0.0
    } else {
        fit / (fit + res)
    }
}

/// Residual-based R²: per draw, summed fitted variance over summed fitted
/// plus summed residual variance.
pub fn br_coda_r2(pred: &[DMatrix<f64>], observed: &DMatrix<f64>) -> Result<R2Draws, EvalError> {
    let shape = check_pred(pred)?;
    if observed.shape() != shape {
        return Err(EvalError::ShapeMismatch(format!(
            "predictions are {}x{}, observations {}x{}",
            shape.0,
            shape.1,
            observed.nrows(),
            observed.ncols()
        )));
    }
    let mut degenerate = Vec::new();
    let values = pred
        .iter()
        .enumerate()
        .map(|(s, p)| {
            let fit = column_variance_sum(p);
            let res = column_variance_sum(&(observed - p));
            ratio(fit, res, s, &mut degenerate)
        })
        .collect();
    Ok(R2Draws {
        kind: R2Kind::Residual,
        label: String::new(),
        values,
        degenerate,
    })
}

/// Model-based R²: the residual part is the summed coordinate variances of
/// each draw (`variances` is `S x (D-1)`).
pub fn bm_coda_r2(pred: &[DMatrix<f64>], variances: &[Vec<f64>]) -> Result<R2Draws, EvalError> {
    let (_, q) = check_pred(pred)?;
    if variances.len() != pred.len() || variances.iter().any(|v| v.len() != q) {
        return Err(EvalError::ShapeMismatch(format!(
            "expected {} variance draws of length {q}",
            pred.len()
        )));
    }
    let mut degenerate = Vec::new();
    let mut values = Vec::with_capacity(pred.len());
    for (s, (p, var)) in pred.iter().zip(variances).enumerate() {
        if let Some(coord) = var.iter().position(|v| !(*v > 0.0)) {
            return Err(EvalError::NonPositiveVariance { draw: s, coord });
        }
        let fit = column_variance_sum(p);
        values.push(ratio(fit, var.iter().sum(), s, &mut degenerate));
    }
    Ok(R2Draws {
        kind: R2Kind::Model,
        label: String::new(),
        values,
        degenerate,
    })
}

/// Where the residual variance of the univariate R² comes from.
#[derive(Debug, Clone, Copy)]
pub enum ResidualSource<'a> {
    /// Residuals are `observed - prediction` for each draw.
    Observed(&'a [f64]),
    /// One residual variance per draw.
    Variance(&'a [f64]),
}

/// Bayesian R² of a single response; the `D = 2` case of the CoDa measures.
pub fn univariate_bayes_r2(
    pred: &[Vec<f64>],
    source: ResidualSource<'_>,
) -> Result<R2Draws, EvalError> {
    let as_matrix: Vec<DMatrix<f64>> = pred
        .iter()
        .map(|p| DMatrix::from_column_slice(p.len(), 1, p))
        .collect();
    match source {
        ResidualSource::Observed(y) => {
            br_coda_r2(&as_matrix, &DMatrix::from_column_slice(y.len(), 1, y))
        }
        ResidualSource::Variance(v) => {
            let v: Vec<Vec<f64>> = v.iter().map(|x| vec![*x]).collect();
            bm_coda_r2(&as_matrix, &v)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ASubstantiallyBetter,
    BSubstantiallyBetter,
    Similar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Draw `s` of one model against draw `s` of the other.
    Paired,
    /// Every draw of one model against every draw of the other.
    Cross,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub label_a: String,
    pub label_b: String,
    pub kind: R2Kind,
    /// Fraction of draw pairs with `a >= b`.
    pub probability: f64,
    pub alpha: f64,
    pub verdict: Verdict,
    pub pairing: Pairing,
    pub n_pairs: usize,
}

impl ComparisonResult {
    /// Probability as a finite-sample statement: `>= 1 - 1/pairs` when every
    /// pair favours A, `<= 1/pairs` when none does.
    pub fn probability_text(&self) -> String {
        let step = 1.0 / self.n_pairs as f64;
        if self.probability == 1.0 {
            format!(">= {:.4}", 1.0 - step)
        } else if self.probability == 0.0 {
            format!("<= {:.4}", step)
        } else {
            format!("{:.4}", self.probability)
        }
    }
}

/// `P(R²_A >= R²_B)` over draw pairs and the verdict at credible level `alpha`.
pub fn compare_r2(a: &R2Draws, b: &R2Draws, alpha: f64) -> Result<ComparisonResult, EvalError> {
    if a.kind != b.kind {
        return Err(EvalError::KindMismatch(a.kind, b.kind));
    }
    if a.values.is_empty() || b.values.is_empty() {
        return Err(EvalError::EmptyDraws);
    }
    let (hits, n_pairs, pairing) = if a.values.len() == b.values.len() {
        let hits = a.values.iter().zip(&b.values).filter(|(x, y)| x >= y).count();
        (hits, a.values.len(), Pairing::Paired)
    } else {
        let mut sorted = b.values.clone();
        sorted.sort_by(|x, y| x.total_cmp(y));
        // for each a, the number of b values <= a
        let hits = a
            .values
            .iter()
            .map(|x| sorted.partition_point(|y| y <= x))
            .sum();
        (hits, a.values.len() * b.values.len(), Pairing::Cross)
    };
    let probability = hits as f64 / n_pairs as f64;
    let verdict = if probability >= 1.0 - alpha {
        Verdict::ASubstantiallyBetter
    } else if probability <= alpha {
        Verdict::BSubstantiallyBetter
    } else {
        Verdict::Similar
    };
    Ok(ComparisonResult {
        label_a: a.label.clone(),
        label_b: b.label.clone(),
        kind: a.kind,
        probability,
        alpha,
        verdict,
        pairing,
        n_pairs,
    })
}

/// One summary row per R² measure: `model,measure,mean,sd,q2.5,q50,q97.5`.
pub fn write_r2_summary_csv<W: Write>(mut out: W, draws: &[R2Draws]) -> Result<(), EvalError> {
    writeln!(out, "model,measure,mean,sd,q2.5,q50,q97.5")?;
    for d in draws {
        let s = d.summary();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            d.label,
            d.kind.as_str(),
            s.mean,
            s.sd,
            s.q2_5,
            s.q50,
            s.q97_5
        )?;
    }
    Ok(())
}

/// Draw-level R² values, one column per measure.
pub fn write_r2_draws_csv(path: &Path, draws: &[R2Draws]) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = draws
        .iter()
        .map(|d| match d.label.as_str() {
            "" => d.kind.as_str().to_string(),
            l => format!("{l}:{}", d.kind.as_str()),
        })
        .collect();
    writeln!(out, "{}", header.join(","))?;
    let n = draws.iter().map(|d| d.values.len()).max().unwrap_or(0);
    for s in 0..n {
        let row: Vec<String> = draws
            .iter()
            .map(|d| d.values.get(s).map_or(String::new(), |v| v.to_string()))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn draws(kind: R2Kind, values: &[f64]) -> R2Draws {
        R2Draws {
            kind,
            label: String::new(),
            values: values.to_vec(),
            degenerate: Vec::new(),
        }
    }

    #[test]
    fn waic_of_identical_draws_has_no_penalty() {
        let row = vec![-1.2, -0.3, -2.5];
        let ll = PointwiseLogLik::from_rows(&[row.clone(), row.clone()]).unwrap();
        let w = waic(&ll);
        assert_eq!(w.p_waic, 0.0);
        assert!((w.waic + 2.0 * row.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn waic_single_observation_by_hand() {
        let (a, b) = (0.5f64.ln(), 0.25f64.ln());
        let ll = PointwiseLogLik::from_rows(&[vec![a], vec![b]]).unwrap();
        let w = waic(&ll);
        assert!((w.lppd - 0.375f64.ln()).abs() < 1e-12);
        let var = (a - b).powi(2) / 2.0;
        assert!((w.p_waic - var).abs() < 1e-12);
        assert!((w.p_waic - 0.240227).abs() < 1e-6);
        assert!((w.waic - (-2.0 * 0.375f64.ln() + 2.0 * var)).abs() < 1e-12);
        assert!((w.waic - 2.442112).abs() < 1e-6);
    }

    #[test]
    fn waic_rejects_bad_input() {
        assert!(matches!(
            PointwiseLogLik::from_rows(&[vec![0.0]]),
            Err(EvalError::InsufficientDraws { .. })
        ));
        assert!(matches!(
            PointwiseLogLik::from_rows(&[vec![0.0], vec![f64::NEG_INFINITY]]),
            Err(EvalError::NonFiniteLogLik { draw: 1, obs: 0 })
        ));
    }

    #[test]
    fn lppd_matches_naive_sum() {
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|s| (0..5).map(|n| -0.5 - 0.1 * (s * n) as f64).collect())
            .collect();
        let w = waic(&PointwiseLogLik::from_rows(&rows).unwrap());
        let naive: f64 = (0..5)
            .map(|n| (rows.iter().map(|r| r[n].exp()).sum::<f64>() / 7.0).ln())
            .sum();
        assert!((w.lppd - naive).abs() < 1e-12);
    }

    #[test]
    fn br_extremes() {
        let obs = DMatrix::from_row_slice(3, 2, &[0.1, 0.5, -0.4, 0.2, 0.9, -1.0]);
        let perfect = br_coda_r2(&[obs.clone(), obs.clone()], &obs).unwrap();
        assert_eq!(perfect.values, vec![1.0, 1.0]);
        let flat = DMatrix::from_element(3, 2, 0.3);
        let r = br_coda_r2(&[flat], &obs).unwrap();
        assert_eq!(r.values, vec![0.0]);
        let r = br_coda_r2(&[obs.clone()], &DMatrix::zeros(2, 2));
        assert!(matches!(r, Err(EvalError::ShapeMismatch(_))));
    }

    #[test]
    fn br_degenerate_draw_is_flagged() {
        let c = DMatrix::from_element(3, 2, 1.0);
        let r = br_coda_r2(&[c.clone()], &c).unwrap();
        assert_eq!(r.values, vec![0.0]);
        assert_eq!(r.degenerate, vec![0]);
    }

    #[test]
    fn br_small_instance_by_direct_summation() {
        let obs = [[0.2, -0.1], [0.7, 0.4], [-0.3, 0.9]];
        let pred = [
            [[0.1, 0.0], [0.5, 0.3], [-0.2, 0.6]],
            [[0.3, -0.2], [0.6, 0.5], [0.0, 0.7]],
        ];
        let var3 = |x: [f64; 3]| {
            let m = (x[0] + x[1] + x[2]) / 3.0;
            ((x[0] - m).powi(2) + (x[1] - m).powi(2) + (x[2] - m).powi(2)) / 2.0
        };
        let mut expected = Vec::new();
        for p in &pred {
            let mut fit = 0.0;
            let mut res = 0.0;
            for d in 0..2 {
                fit += var3([p[0][d], p[1][d], p[2][d]]);
                res += var3([obs[0][d] - p[0][d], obs[1][d] - p[1][d], obs[2][d] - p[2][d]]);
            }
            expected.push(fit / (fit + res));
        }
        let to_m = |rows: &[[f64; 2]; 3]| DMatrix::from_fn(3, 2, |i, j| rows[i][j]);
        let r = br_coda_r2(&[to_m(&pred[0]), to_m(&pred[1])], &to_m(&obs)).unwrap();
        for (a, b) in r.values.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bm_limits() {
        let p = DMatrix::from_row_slice(3, 2, &[0.1, 0.5, -0.4, 0.2, 0.9, -1.0]);
        let r = bm_coda_r2(&[p.clone()], &[vec![1e-300, 1e-300]]).unwrap();
        assert!((r.values[0] - 1.0).abs() < 1e-12);
        let flat = DMatrix::from_element(3, 2, 0.3);
        assert_eq!(bm_coda_r2(&[flat], &[vec![0.2, 0.1]]).unwrap().values, vec![0.0]);
        assert!(matches!(
            bm_coda_r2(&[p.clone()], &[vec![0.2, 0.0]]),
            Err(EvalError::NonPositiveVariance { draw: 0, coord: 1 })
        ));
        assert!(matches!(
            bm_coda_r2(&[p], &[vec![0.2]]),
            Err(EvalError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn univariate_reduction_is_exact() {
        let pred = vec![vec![0.1, 0.4, 0.3, 0.9], vec![0.2, 0.3, 0.5, 0.7]];
        let y = [0.0, 0.5, 0.2, 1.1];
        let uni = univariate_bayes_r2(&pred, ResidualSource::Observed(&y)).unwrap();
        let as_m: Vec<DMatrix<f64>> = pred
            .iter()
            .map(|p| DMatrix::from_column_slice(4, 1, p))
            .collect();
        let coda = br_coda_r2(&as_m, &DMatrix::from_column_slice(4, 1, &y)).unwrap();
        assert_eq!(uni.values, coda.values);
        let perfect = univariate_bayes_r2(&[y.to_vec()], ResidualSource::Observed(&y)).unwrap();
        assert_eq!(perfect.values, vec![1.0]);
    }

    #[test]
    fn univariate_hand_case() {
        // S = 1, N = 3: fit var of (1,2,3) = 1, residuals (0.5,-1,0.5) var = 0.75
        let pred = vec![vec![1.0, 2.0, 3.0]];
        let y = [1.5, 1.0, 3.5];
        let r = univariate_bayes_r2(&pred, ResidualSource::Observed(&y)).unwrap();
        assert!((r.values[0] - 1.0 / 1.75).abs() < 1e-15);
        let m = univariate_bayes_r2(&pred, ResidualSource::Variance(&[0.25])).unwrap();
        assert!((m.values[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn compare_ties_and_shifts() {
        let a = draws(R2Kind::Residual, &[0.3, 0.5, 0.7]);
        let same = compare_r2(&a, &a, 0.1).unwrap();
        assert_eq!(same.probability, 1.0);
        assert_eq!(same.verdict, Verdict::ASubstantiallyBetter);
        assert_eq!(same.probability_text(), ">= 0.6667");
        let shifted = draws(R2Kind::Residual, &[0.4, 0.6, 0.8]);
        assert_eq!(compare_r2(&shifted, &a, 0.1).unwrap().probability, 1.0);
        let low = compare_r2(&a, &shifted, 0.1).unwrap();
        assert_eq!(low.probability, 0.0);
        assert_eq!(low.verdict, Verdict::BSubstantiallyBetter);
        let mixed = draws(R2Kind::Residual, &[0.2, 0.6, 0.6]);
        let r = compare_r2(&a, &mixed, 0.1).unwrap();
        assert!((r.probability - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.verdict, Verdict::Similar);
        let other = draws(R2Kind::Model, &[0.5]);
        assert!(matches!(
            compare_r2(&a, &other, 0.1),
            Err(EvalError::KindMismatch(..))
        ));
        assert!(matches!(
            compare_r2(&a, &draws(R2Kind::Residual, &[]), 0.1),
            Err(EvalError::EmptyDraws)
        ));
    }

    #[test]
    fn compare_cross_pairs_when_lengths_differ() {
        let a = draws(R2Kind::Model, &[0.3, 0.5]);
        let b = draws(R2Kind::Model, &[0.2, 0.3, 0.6]);
        let r = compare_r2(&a, &b, 0.1).unwrap();
        assert_eq!(r.pairing, Pairing::Cross);
        assert_eq!(r.n_pairs, 6);
        // 0.3 >= {0.2, 0.3}, 0.5 >= {0.2, 0.3}
        assert!((r.probability - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn summary_csv() {
        let d = draws(R2Kind::Residual, &[0.1, 0.2, 0.3]).with_label("M1");
        let mut out = Vec::new();
        write_r2_summary_csv(&mut out, &[d]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("model,measure,mean,sd"));
        assert!(text.contains("M1,BR-CoDa-R2,0.2"));
    }

    proptest! {
        #[test]
        fn r2_lies_in_unit_interval(
            vals in prop::collection::vec(-5.0f64..5.0, 24),
            var in prop::collection::vec(1e-6f64..3.0, 4),
        ) {
            let pred = vec![
                DMatrix::from_column_slice(6, 2, &vals[..12]),
                DMatrix::from_column_slice(6, 2, &vals[12..]),
            ];
            let obs = DMatrix::from_fn(6, 2, |i, j| vals[(i * 5 + j * 7) % 24]);
            for v in br_coda_r2(&pred, &obs).unwrap().values {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let variances = vec![var[..2].to_vec(), var[2..].to_vec()];
            for v in bm_coda_r2(&pred, &variances).unwrap().values {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn waic_is_permutation_invariant(
            vals in prop::collection::vec(-8.0f64..0.0, 20),
            shift in 1usize..5,
        ) {
            let rows: Vec<Vec<f64>> = vals.chunks(5).map(|c| c.to_vec()).collect();
            let mut draws_permuted = rows.clone();
            draws_permuted.rotate_left(shift % 4);
            let obs_permuted: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| { let mut r = r.clone(); r.rotate_left(shift); r })
                .collect();
            let w = waic(&PointwiseLogLik::from_rows(&rows).unwrap());
            for other in [draws_permuted, obs_permuted] {
                let v = waic(&PointwiseLogLik::from_rows(&other).unwrap());
                prop_assert!((w.waic - v.waic).abs() < 1e-10);
                prop_assert!((w.p_waic - v.p_waic).abs() < 1e-10);
            }
        }
    }
}

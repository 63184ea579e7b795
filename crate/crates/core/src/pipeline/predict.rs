use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Fit, PipelineError};
use crate::ilr::IlrBasis;
use crate::model::{format_number, Table};
use crate::usda;

/// Posterior predictive summary of one grid row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Predictive mean of each part on the closure scale of the training data.
    pub part_mean: Vec<f64>,
    pub part_sd: Vec<f64>,
    pub ilr_mean: Vec<f64>,
    pub ilr_sd: Vec<f64>,
    /// USDA class of the mean composition (three-part models only).
    pub usda_class: Option<String>,
    pub extrapolated: bool,
}

struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / self.n;
            *s += delta * (v - *m);
        }
    }

    fn sd(&self) -> Vec<f64> {
        self.m2
            .iter()
            .map(|s| if self.n > 1.0 { (s / (self.n - 1.0)).sqrt() } else { 0.0 })
            .collect()
    }
}

/// Posterior predictive summaries for every row of `grid`, in grid order.
/// Each draw's linear predictor is perturbed by residual noise from that
/// draw's covariance, mapped to the simplex, and summarised.
pub fn predict(fit: &Fit, grid: &Table, seed: u64) -> Result<Vec<PredictionRecord>, PipelineError> {
    let bundle = &fit.bundle;
    let nd = bundle.new_design(grid)?;
    let basis = IlrBasis::new(bundle.dim).map_err(|e| PipelineError::Config(e.to_string()))?;
    let n = grid.nrows();
    let q = bundle.q;
    let mut ilr_mom: Vec<Moments> = (0..n).map(|_| Moments::new(q)).collect();
    let mut part_mom: Vec<Moments> = (0..n).map(|_| Moments::new(bundle.dim)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in 0..fit.n_draws() {
        let u = fit.unpacked(s)?;
        let eta = bundle.linear_predictor(&u, &nd);
        let chol = u.chol_cov();
        for i in 0..n {
            let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
            let noise = &chol * z;
            let y: Vec<f64> = (0..q).map(|d| eta[(i, d)] + noise[d]).collect();
            let comp = basis
                .ilr_inverse_with_kappa(&y, bundle.kappa)
                .map_err(|e| PipelineError::Numerical(e.to_string()))?;
            ilr_mom[i].add(&y);
            part_mom[i].add(comp.parts());
        }
    }
    Ok((0..n)
        .map(|i| {
            let mean = &part_mom[i].mean;
            let usda_class = (bundle.dim == 3)
                .then(|| usda::classify_parts(mean).ok().map(|c| c.name().to_string()))
                .flatten();
            PredictionRecord {
                part_mean: mean.clone(),
                part_sd: part_mom[i].sd(),
                ilr_mean: ilr_mom[i].mean.clone(),
                ilr_sd: ilr_mom[i].sd(),
                usda_class,
                extrapolated: nd.extrapolated[i],
            }
        })
        .collect())
}

/// Grid columns followed by `{part}_mean`, `{part}_sd`, `ilr{d}_mean`,
/// `ilr{d}_sd`, `usda_class` and `extrapolated`.
pub fn write_predictions(
    path: &Path,
    grid: &Table,
    part_names: &[String],
    records: &[PredictionRecord],
) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    let q = part_names.len() - 1;
    let mut header: Vec<String> = grid.names().to_vec();
    for p in part_names {
        header.push(format!("{p}_mean"));
        header.push(format!("{p}_sd"));
    }
    for d in 1..=q {
        header.push(format!("ilr{d}_mean"));
        header.push(format!("ilr{d}_sd"));
    }
    header.push("usda_class".into());
    header.push("extrapolated".into());
    let io = |e: csv::Error| PipelineError::Io(e.to_string());
    w.write_record(&header).map_err(io)?;
    let columns: Vec<Vec<String>> = grid
        .names()
        .iter()
        .map(|c| grid.column(c).map(|col| col.labels()))
        .collect::<Result<_, _>>()?;
    for (i, r) in records.iter().enumerate() {
        let mut row: Vec<String> = columns.iter().map(|c| c[i].clone()).collect();
        for (m, s) in r.part_mean.iter().zip(&r.part_sd) {
            row.push(format_number(*m));
            row.push(format_number(*s));
        }
        for (m, s) in r.ilr_mean.iter().zip(&r.ilr_sd) {
            row.push(format_number(*m));
            row.push(format_number(*s));
        }
        row.push(r.usda_class.clone().unwrap_or_default());
        row.push(r.extrapolated.to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

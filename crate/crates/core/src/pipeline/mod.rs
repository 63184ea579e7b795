//! End-to-end workflow: fit a model, derive WAIC / R² / summaries from its
//! draws, predict on new covariates and compare fitted models.

mod artifacts;
mod config;
mod predict;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, EvalError, PointwiseLogLik, R2Draws, Summary, Waic};
use crate::hmc::{self, Diagnostic, HmcError, PosteriorDraws, SamplerConfig};
use crate::ilr::balance_scale;
use crate::model::{build_design, Dataset, DesignBundle, ModelError, ModelSpec, NewDesign, Unpacked};
use crate::sim::SimError;
use crate::usda::UsdaError;

pub use artifacts::{
    compare_fits, read_fit, write_fit, ComparisonReport, FitManifest, ARTIFACT_FILES,
};
pub use config::{DataSection, ModelSection, OutputSection, RunConfig};
pub use predict::{predict, write_predictions, PredictionRecord};

/// Rhat above this triggers a warning.
pub const RHAT_WARNING: f64 = 1.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl PipelineError {
    /// Process exit code: 2 user/config error, 3 I/O, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Io(_) => 3,
            PipelineError::Numerical(_) => 4,
        }
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => PipelineError::Io(e.to_string()),
            ModelError::NonFiniteParameter(_) => PipelineError::Numerical(e.to_string()),
            _ => PipelineError::Config(e.to_string()),
        }
    }
}

impl From<HmcError> for PipelineError {
    fn from(e: HmcError) -> Self {
        match e {
            HmcError::InvalidConfig(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) => PipelineError::Io(e.to_string()),
            EvalError::KindMismatch(..) | EvalError::ShapeMismatch(_) => {
                PipelineError::Config(e.to_string())
            }
            _ => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<SimError> for PipelineError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Io(_) => PipelineError::Io(e.to_string()),
            SimError::Model(m) => m.into(),
            _ => PipelineError::Config(e.to_string()),
        }
    }
}

impl From<UsdaError> for PipelineError {
    fn from(e: UsdaError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

/// Posterior summary of one named parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q2_5: f64,
    pub q50: f64,
    pub q97_5: f64,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

/// Fixed-effect interpretation on the composition scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub name: String,
    /// 1-based ilr coordinate.
    pub coordinate: usize,
    pub mean: f64,
    pub q2_5: f64,
    pub q97_5: f64,
    /// `exp(mean)`: multiplicative change of the raw balance.
    pub exp_beta: f64,
    /// `exp(mean / scale)` with the coordinate's balance scale
    /// `sqrt(d/(d+1))`: multiplicative change of the geometric-mean ratio.
    pub exp_beta_rescaled: f64,
}

/// A fitted model: its design and constrained posterior draws.
#[derive(Debug, Clone)]
pub struct Fit {
    pub bundle: DesignBundle,
    /// Draws on the reported scale (sds, correlations `rho_i_j`).
    pub draws: PosteriorDraws,
    pub warnings: Vec<String>,
}

impl Fit {
    /// Build the design, run the sampler and collect warnings.
    pub fn sample(data: &Dataset, spec: &ModelSpec, config: &SamplerConfig) -> Result<Fit, PipelineError> {
        let bundle = build_design(data, spec)?;
        let raw = hmc::sample(&bundle, config)?;
        let names = bundle.layout.names();
        let draws = raw.map(names, |x| bundle.constrain(x));
        let mut fit = Fit {
            bundle,
            draws,
            warnings: Vec::new(),
        };
        fit.warnings = fit.convergence_warnings();
        Ok(fit)
    }

    /// Reassemble a fit from a design and constrained draws.
    pub fn from_draws(bundle: DesignBundle, draws: PosteriorDraws) -> Result<Fit, PipelineError> {
        let names = bundle.layout.names();
        if draws.names != names {
            return Err(PipelineError::Config(
                "draw columns do not match the model's parameter layout".into(),
            ));
        }
        if draws.is_empty() {
            return Err(PipelineError::Numerical("no posterior draws".into()));
        }
        Ok(Fit {
            bundle,
            draws,
            warnings: Vec::new(),
        })
    }

    fn convergence_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let div = self.draws.divergences();
        if div > 0 {
            out.push(format!("{div} divergent transitions after warmup"));
        }
        if let Ok(diag) = self.diagnostics() {
            let bad: Vec<String> = diag
                .iter()
                .filter(|d| d.rhat.is_some_and(|r| r > RHAT_WARNING))
                .map(|d| d.name.clone())
                .collect();
            if !bad.is_empty() {
                out.push(format!(
                    "Rhat > {RHAT_WARNING} for {} parameter(s): {}",
                    bad.len(),
                    bad.iter().take(10).cloned().collect::<Vec<_>>().join(", ")
                ));
            }
        }
        out
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn unpacked(&self, s: usize) -> Result<Unpacked, PipelineError> {
        Ok(self.bundle.unpack_constrained(&self.draws.draws[s])?)
    }

    pub fn diagnostics(&self) -> Result<Vec<Diagnostic>, PipelineError> {
        Ok(hmc::diagnostics(&self.draws)?)
    }

    pub fn summary(&self) -> Vec<ParamSummary> {
        let diag = self.diagnostics().ok();
        (0..self.draws.n_params())
            .map(|j| {
                let s = Summary::of(&self.draws.column(j));
                let d = diag.as_ref().map(|d| &d[j]);
                ParamSummary {
                    name: self.draws.names[j].clone(),
                    mean: s.mean,
                    sd: s.sd,
                    q2_5: s.q2_5,
                    q50: s.q50,
                    q97_5: s.q97_5,
                    rhat: d.and_then(|d| d.rhat),
                    ess: d.and_then(|d| d.ess),
                }
            })
            .collect()
    }

    pub fn posterior_mean(&self, name: &str) -> Option<f64> {
        self.draws
            .column_by_name(name)
            .map(|c| crate::stats::mean(&c))
    }

    /// Per-draw linear predictors (`N x (D-1)` each) for a design.
    pub fn predictor_draws(&self, nd: &NewDesign) -> Result<Vec<DMatrix<f64>>, PipelineError> {
        (0..self.n_draws())
            .map(|s| Ok(self.bundle.linear_predictor(&self.unpacked(s)?, nd)))
            .collect()
    }

    /// `S x N` pointwise log-likelihood of the training data.
    pub fn log_lik(&self) -> Result<PointwiseLogLik, PipelineError> {
        let nd = self.bundle.training_design();
        let mut m = DMatrix::zeros(self.n_draws(), self.bundle.n);
        for s in 0..self.n_draws() {
            let u = self.unpacked(s)?;
            let eta = self.bundle.linear_predictor(&u, &nd);
            for (i, v) in self
                .bundle
                .pointwise_log_lik(&u, &eta, &self.bundle.ilr)
                .into_iter()
                .enumerate()
            {
                m[(s, i)] = v;
            }
        }
        Ok(PointwiseLogLik::new(m)?)
    }

    pub fn waic(&self) -> Result<Waic, PipelineError> {
        Ok(eval::waic(&self.log_lik()?))
    }

    /// Residual- and model-based R² draws on the training data.
    pub fn r2(&self) -> Result<(R2Draws, R2Draws), PipelineError> {
        let pred = self.predictor_draws(&self.bundle.training_design())?;
        let br = eval::br_coda_r2(&pred, &self.bundle.ilr)?;
        let variances: Vec<Vec<f64>> = (0..self.n_draws())
            .map(|s| {
                let row = &self.draws.draws[s];
                (0..self.bundle.q)
                    .map(|d| row[self.bundle.layout.sigma + d].powi(2))
                    .collect()
            })
            .collect();
        let bm = eval::bm_coda_r2(&pred, &variances)?;
        Ok((br, bm))
    }

    /// Posterior mean of a smooth term's contribution (`N x (D-1)`).
    pub fn term_contribution(&self, label: &str, nd: &NewDesign) -> Result<DMatrix<f64>, PipelineError> {
        let cols = self
            .bundle
            .term_columns(label)
            .ok_or_else(|| PipelineError::Config(format!("no smooth term {label}")))?;
        let n = nd.design.nrows();
        let mut out = DMatrix::zeros(n, self.bundle.q);
        for s in 0..self.n_draws() {
            let u = self.unpacked(s)?;
            for d in 0..self.bundle.q {
                for i in 0..n {
                    out[(i, d)] += cols
                        .iter()
                        .map(|&j| nd.design[(i, j)] * u.coef[(j, d)])
                        .sum::<f64>();
                }
            }
        }
        Ok(out / self.n_draws() as f64)
    }

    /// Fixed-effect rows with both exponentiated readings.
    pub fn effects(&self) -> Vec<EffectRow> {
        let lay = &self.bundle.layout;
        let mut out = Vec::new();
        for d in 0..self.bundle.q {
            let scale = balance_scale(d + 1);
            for (j, name) in self.bundle.fixed_names.iter().enumerate() {
                let col = self.draws.column(lay.fixed[d] + j);
                let s = Summary::of(&col);
                out.push(EffectRow {
                    name: name.clone(),
                    coordinate: d + 1,
                    mean: s.mean,
                    q2_5: s.q2_5,
                    q97_5: s.q97_5,
                    exp_beta: s.mean.exp(),
                    exp_beta_rescaled: (s.mean / scale).exp(),
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PriorSpec;
    use crate::sim::{simulate_linear, LinearSimConfig};

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Config(String::new()).exit_code(), 2);
        assert_eq!(PipelineError::Io(String::new()).exit_code(), 3);
        assert_eq!(PipelineError::Numerical(String::new()).exit_code(), 4);
        let e: PipelineError = ModelError::UnknownColumn("x".into()).into();
        assert_eq!(e.exit_code(), 2);
        let e: PipelineError = HmcError::AllDivergent { chain: 0 }.into();
        assert_eq!(e.exit_code(), 4);
    }

    #[test]
    fn small_fit_products_are_consistent() {
        let (data, _) = simulate_linear(&LinearSimConfig {
            n: 40,
            ..LinearSimConfig::default()
        })
        .unwrap();
        let spec = ModelSpec::parse(4, "x1 + x2 + x3", PriorSpec::default()).unwrap();
        let config = SamplerConfig {
            chains: 2,
            warmup_iterations: 200,
            sampling_iterations: 100,
            seed: 3,
            ..SamplerConfig::default()
        };
        let fit = Fit::sample(&data, &spec, &config).unwrap();
        assert_eq!(fit.n_draws(), 200);
        let ll = fit.log_lik().unwrap();
        assert_eq!((ll.n_draws(), ll.n_obs()), (200, 40));
        let (br, bm) = fit.r2().unwrap();
        assert!(br.values.iter().chain(&bm.values).all(|v| (0.0..=1.0).contains(v)));
        let sigma = fit.posterior_mean("sigma1").unwrap();
        assert!(sigma > 0.0 && sigma < 1.0);
        let effects = fit.effects();
        assert_eq!(effects.len(), 12);
        let scale = balance_scale(2);
        let e = &effects[4];
        assert_eq!(e.coordinate, 2);
        assert!((e.exp_beta_rescaled - (e.mean / scale).exp()).abs() < 1e-12);
        let again = Fit::sample(&data, &spec, &config).unwrap();
        assert_eq!(again.draws, fit.draws);
    }
}

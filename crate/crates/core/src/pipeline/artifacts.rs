//! Fit output directory: writing, reloading and comparing.
//!
//! | file              | contents                                                  |
//! |-------------------|-----------------------------------------------------------|
//! | `fit.json`        | manifest: data path, parts, formula, priors, sampler      |
//! | `draws.csv`       | constrained draws with sampler columns                    |
//! | `summary.csv`     | mean, sd, quantiles, Rhat, ESS per parameter              |
//! | `diagnostics.csv` | Rhat and ESS per parameter                                |
//! | `sampler.csv`     | per-chain step size, acceptance, divergences, depth hits  |
//! | `loglik.csv`      | pointwise log-likelihood, one row per draw                |
//! | `waic.json`       | WAIC, lppd, p_waic                                        |
//! | `r2_draws.csv`    | BR- and BM-CoDa-R² draws                                  |
//! | `r2_summary.csv`  | their summaries                                           |
//! | `effects.csv`     | fixed effects with `exp(β)` and `exp(β/scale)`            |

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Fit, PipelineError};
use crate::eval::{self, ComparisonResult, PointwiseLogLik, R2Draws, R2Kind, Waic};
use crate::hmc::{PosteriorDraws, SamplerConfig};
use crate::model::{build_design, format_number, Dataset, ModelSpec, PriorSpec};

pub const ARTIFACT_FILES: [&str; 10] = [
    "fit.json",
    "draws.csv",
    "summary.csv",
    "diagnostics.csv",
    "sampler.csv",
    "loglik.csv",
    "waic.json",
    "r2_draws.csv",
    "r2_summary.csv",
    "effects.csv",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitManifest {
    pub data_path: PathBuf,
    pub parts: Vec<String>,
    pub formula: String,
    pub priors: PriorSpec,
    pub sampler: SamplerConfig,
    pub n: usize,
    pub kappa: f64,
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

fn opt(v: Option<f64>) -> String {
    v.map(format_number).unwrap_or_default()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| PipelineError::Numerical(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

/// Write every artifact of a fit into `dir` (created if needed).
pub fn write_fit(fit: &Fit, manifest: &FitManifest, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", dir.display())))?;
    write_json(&dir.join("fit.json"), manifest)?;
    fit.draws.write_csv(create(&dir.join("draws.csv"))?)?;

    let summary = fit.summary();
    let mut w = create(&dir.join("summary.csv"))?;
    writeln!(w, "parameter,mean,sd,q2.5,q50,q97.5,rhat,ess")?;
    for s in &summary {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            s.name,
            s.mean,
            s.sd,
            s.q2_5,
            s.q50,
            s.q97_5,
            opt(s.rhat),
            opt(s.ess)
        )?;
    }
    w.flush()?;

    let mut w = create(&dir.join("diagnostics.csv"))?;
    writeln!(w, "parameter,rhat,ess")?;
    for s in &summary {
        writeln!(w, "{},{},{}", s.name, opt(s.rhat), opt(s.ess))?;
    }
    w.flush()?;

    let mut w = create(&dir.join("sampler.csv"))?;
    writeln!(w, "chain,step_size,mean_accept_stat,divergences,max_treedepth_hits")?;
    for c in 0..fit.draws.n_chains() {
        let rows: Vec<usize> = (0..fit.n_draws()).filter(|&i| fit.draws.chain[i] == c).collect();
        let accept: Vec<f64> = rows.iter().map(|&i| fit.draws.accept_stat[i]).collect();
        let div = rows.iter().filter(|&&i| fit.draws.divergent[i]).count();
        let hits = rows
            .iter()
            .filter(|&&i| fit.draws.tree_depth[i] >= manifest.sampler.max_tree_depth)
            .count();
        writeln!(
            w,
            "{},{},{},{div},{hits}",
            c + 1,
            fit.draws.step_size[c],
            crate::stats::mean(&accept)
        )?;
    }
    w.flush()?;

    let ll = fit.log_lik()?;
    let mut w = create(&dir.join("loglik.csv"))?;
    let header: Vec<String> = (1..=ll.n_obs()).map(|i| format!("obs{i}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in ll.matrix().row_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    write_json(&dir.join("waic.json"), &eval::waic(&ll))?;

    let (br, bm) = fit.r2()?;
    let r2 = [br, bm];
    eval::write_r2_draws_csv(&dir.join("r2_draws.csv"), &r2)?;
    eval::write_r2_summary_csv(create(&dir.join("r2_summary.csv"))?, &r2)?;

    let mut w = create(&dir.join("effects.csv"))?;
    writeln!(w, "parameter,coordinate,mean,q2.5,q97.5,exp_beta,exp_beta_rescaled")?;
    for e in fit.effects() {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            e.name, e.coordinate, e.mean, e.q2_5, e.q97_5, e.exp_beta, e.exp_beta_rescaled
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reload a fit: the design is rebuilt from the training data named in the
/// manifest, and the draws are read back from `draws.csv`.
pub fn read_fit(dir: &Path) -> Result<(FitManifest, Dataset, Fit), PipelineError> {
    let manifest: FitManifest = read_json(&dir.join("fit.json"))?;
    let data = Dataset::from_csv_path(&manifest.data_path, &manifest.parts)?;
    let spec = ModelSpec::parse(manifest.parts.len(), &manifest.formula, manifest.priors.clone())?;
    let bundle = build_design(&data, &spec)?;
    let path = dir.join("draws.csv");
    let file = File::open(&path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    let draws = PosteriorDraws::read_csv(file)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    let fit = Fit::from_draws(bundle, draws)?;
    Ok((manifest, data, fit))
}

fn read_loglik(path: &Path) -> Result<PointwiseLogLik, PipelineError> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| PipelineError::Config(e.to_string()))?;
        rows.push(
            rec.iter()
                .map(|v| v.parse::<f64>().map_err(|e| PipelineError::Config(e.to_string())))
                .collect::<Result<_, _>>()?,
        );
    }
    let n = rows.first().map_or(0, |r| r.len());
    Ok(PointwiseLogLik::new(DMatrix::from_fn(rows.len(), n, |s, i| rows[s][i]))?)
}

fn read_r2(path: &Path, label: &str) -> Result<(R2Draws, R2Draws), PipelineError> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(|e| PipelineError::Config(e.to_string()))?.clone();
    let col = |kind: R2Kind| {
        header
            .iter()
            .position(|h| h == kind.as_str() || h.ends_with(&format!(":{}", kind.as_str())))
            .ok_or_else(|| PipelineError::Config(format!("{}: no {} column", path.display(), kind.as_str())))
    };
    let (ib, im) = (col(R2Kind::Residual)?, col(R2Kind::Model)?);
    let mut br = Vec::new();
    let mut bm = Vec::new();
    let parse = |s: &str| s.parse::<f64>().map_err(|e| PipelineError::Config(e.to_string()));
    for rec in r.records() {
        let rec = rec.map_err(|e| PipelineError::Config(e.to_string()))?;
        br.push(parse(&rec[ib])?);
        bm.push(parse(&rec[im])?);
    }
    let make = |kind, values| R2Draws {
        kind,
        label: label.to_string(),
        values,
        degenerate: Vec::new(),
    };
    Ok((make(R2Kind::Residual, br), make(R2Kind::Model, bm)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub label_a: String,
    pub label_b: String,
    pub waic_a: Waic,
    pub waic_b: Waic,
    /// `waic_a - waic_b`; negative favours A.
    pub waic_difference: f64,
    pub br: ComparisonResult,
    pub bm: ComparisonResult,
}

impl ComparisonReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<24}{:>14}{:>14}{:>12}\n", "model", "WAIC", "lppd", "p_waic"));
        for (l, w) in [(&self.label_a, &self.waic_a), (&self.label_b, &self.waic_b)] {
            s.push_str(&format!("{:<24}{:>14.3}{:>14.3}{:>12.3}\n", l, w.waic, w.lppd, w.p_waic));
        }
        s.push_str(&format!("WAIC difference (A - B): {:.3}\n", self.waic_difference));
        for c in [&self.br, &self.bm] {
            s.push_str(&format!(
                "P({} A >= B) {}  verdict: {:?}\n",
                c.kind.as_str(),
                c.probability_text(),
                c.verdict
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| PipelineError::Io(format!("{}: {e}", dir.display())))?;
        write_json(&dir.join("comparison.json"), self)?;
        let mut w = create(&dir.join("comparison.csv"))?;
        writeln!(w, "measure,model_a,model_b,probability,alpha,verdict,pairing,n_pairs")?;
        for c in [&self.br, &self.bm] {
            writeln!(
                w,
                "{},{},{},{},{},{:?},{:?},{}",
                c.kind.as_str(),
                c.label_a,
                c.label_b,
                c.probability,
                c.alpha,
                c.verdict,
                c.pairing,
                c.n_pairs
            )?;
        }
        writeln!(w, "WAIC,{},{},{},,,,", self.label_a, self.label_b, self.waic_difference)?;
        w.flush()?;
        Ok(())
    }
}

fn label_of(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Compare two fit directories by WAIC and by both R² measures.
pub fn compare_fits(a: &Path, b: &Path, alpha: f64) -> Result<ComparisonReport, PipelineError> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(PipelineError::Config(format!("alpha must be in (0, 0.5), got {alpha}")));
    }
    let (la, lb) = (label_of(a), label_of(b));
    let waic_a = eval::waic(&read_loglik(&a.join("loglik.csv"))?);
    let waic_b = eval::waic(&read_loglik(&b.join("loglik.csv"))?);
    let (br_a, bm_a) = read_r2(&a.join("r2_draws.csv"), &la)?;
    let (br_b, bm_b) = read_r2(&b.join("r2_draws.csv"), &lb)?;
    Ok(ComparisonReport {
        waic_difference: waic_a.waic - waic_b.waic,
        br: eval::compare_r2(&br_a, &br_b, alpha)?,
        bm: eval::compare_r2(&bm_a, &bm_b, alpha)?,
        label_a: la,
        label_b: lb,
        waic_a,
        waic_b,
    })
}

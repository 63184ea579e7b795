//! `coda`: simulate, fit, predict, compare and classify compositional data.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
//! 4 numerical or sampling failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use coda_gam::model::Table;
use coda_gam::pipeline::{
    compare_fits, predict, read_fit, write_fit, write_predictions, Fit, FitManifest,
    PipelineError, RunConfig,
};
use coda_gam::sim::{
    simulate_gam, simulate_linear, simulate_soil_like, write_simulation, GamSimConfig,
    LinearSimConfig,
};
use coda_gam::usda;

#[derive(Parser)]
#[command(name = "coda", version, about = "Bayesian additive models for compositional data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Design {
    Linear,
    Gam,
    Soil,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Simulate {
        #[arg(long, value_enum)]
        design: Design,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Dataset CSV path.
        #[arg(long, default_value = "sim.csv")]
        out: PathBuf,
        /// Ground-truth JSON path (defaults to the dataset path with `.truth.json`).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fit a model described by a TOML configuration file.
    Fit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Posterior predictive summaries on a grid of covariate values.
    Predict {
        /// Output directory of a previous `fit`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "predictions.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Compare two fits by WAIC and CoDa-R².
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Directory for comparison.json and comparison.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// USDA texture class of a sand/silt/clay composition in percent.
    Classify { sand: f64, silt: f64, clay: f64 },
}

fn simulate(
    design: Design,
    seed: u64,
    n: usize,
    out: &Path,
    truth: Option<PathBuf>,
) -> Result<(), PipelineError> {
    let (data, gt) = match design {
        Design::Linear => simulate_linear(&LinearSimConfig {
            n,
            ..LinearSimConfig::with_seed(seed)
        })?,
        Design::Gam => simulate_gam(&GamSimConfig {
            n,
            ..GamSimConfig::with_seed(seed)
        })?,
        Design::Soil => simulate_soil_like(n, seed)?,
    };
    let truth = truth.unwrap_or_else(|| out.with_extension("truth.json"));
    write_simulation(&data, &gt, out, &truth)?;
    eprintln!("wrote {} rows to {} and {}", data.nrows(), out.display(), truth.display());
    Ok(())
}

fn fit(config_path: &Path) -> Result<(), PipelineError> {
    let config = RunConfig::from_path(config_path)?;
    let spec = config.spec()?;
    let data = coda_gam::model::Dataset::from_csv_path(&config.data.path, &config.data.parts)?;
    let data_path = std::fs::canonicalize(&config.data.path)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", config.data.path.display())))?;
    let fit = Fit::sample(&data, &spec, &config.sampler)?;
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    let manifest = FitManifest {
        data_path,
        parts: config.data.parts.clone(),
        formula: config.model.formula.clone(),
        priors: config.priors.clone(),
        sampler: config.sampler.clone(),
        n: data.nrows(),
        kappa: fit.bundle.kappa,
    };
    write_fit(&fit, &manifest, &config.output.dir)?;
    let waic = fit.waic()?;
    let (br, bm) = fit.r2()?;
    println!("draws:       {}", fit.n_draws());
    println!("WAIC:        {:.3} (p_waic {:.2})", waic.waic, waic.p_waic);
    for r in [&br, &bm] {
        let s = r.summary();
        println!(
            "{}:  {:.4} [{:.4}, {:.4}]",
            r.kind.as_str(),
            s.mean,
            s.q2_5,
            s.q97_5
        );
    }
    println!("output:      {}", config.output.dir.display());
    Ok(())
}

fn run_predict(fit_dir: &Path, grid_path: &Path, out: &Path, seed: u64) -> Result<(), PipelineError> {
    let (manifest, _, fit) = read_fit(fit_dir)?;
    let grid = Table::from_csv_path(grid_path)?;
    let records = predict(&fit, &grid, seed)?;
    write_predictions(out, &grid, &manifest.parts, &records)?;
    let flagged = records.iter().filter(|r| r.extrapolated).count();
    if flagged > 0 {
        eprintln!("warning: {flagged} grid row(s) outside the training covariate range");
    }
    eprintln!("wrote {} predictions to {}", records.len(), out.display());
    Ok(())
}

fn compare(a: &Path, b: &Path, alpha: f64, out: Option<PathBuf>) -> Result<(), PipelineError> {
    let report = compare_fits(a, b, alpha)?;
    print!("{}", report.render());
    if let Some(dir) = out {
        report.write(&dir)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Simulate {
            design,
            seed,
            n,
            out,
            truth,
        } => simulate(design, seed, n, &out, truth),
        Command::Fit { config } => fit(&config),
        Command::Predict {
            fit,
            grid,
            out,
            seed,
        } => run_predict(&fit, &grid, &out, seed),
        Command::Compare { a, b, alpha, out } => compare(&a, &b, alpha, out),
        Command::Classify { sand, silt, clay } => {
            let class = usda::classify(sand, silt, clay)?;
            println!("{class}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! No-U-turn Hamiltonian Monte Carlo with multinomial trajectory sampling,
//! dual-averaging step size and windowed diagonal metric adaptation.

mod adapt;
mod diagnostics;
mod nuts;

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adapt::{DualAveraging, WindowSchedule};
pub use diagnostics::{diagnostics, effective_sample_size, split_rhat, Diagnostic};
pub use nuts::{leapfrog, Nuts, PhasePoint, Transition};

/// A differentiable log density on `R^dim`.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    /// Log density at `x`; writes the gradient into `grad`. Returns
    /// `-inf` (or NaN) outside the support.
    fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HmcError {
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("chain {chain}: no finite log density in {attempts} initialisation attempts")]
    InitializationFailure { chain: usize, attempts: usize },
    #[error("chain {chain}: every post-warmup transition diverged")]
    AllDivergent { chain: usize },
    #[error("step size search failed in chain {chain}")]
    StepSize { chain: usize },
    #[error("diagnostics need at least {needed} chains and 100 draws per chain")]
    InsufficientDraws { needed: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup_iterations: usize,
    pub sampling_iterations: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
    /// Disable to sample with a fixed unit metric and `initial_step_size`.
    pub adapt: bool,
    pub initial_step_size: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup_iterations: 1000,
            sampling_iterations: 1000,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 1,
            adapt: true,
            initial_step_size: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), HmcError> {
        let bad = |m: String| Err(HmcError::InvalidConfig(m));
        if self.chains == 0 {
            return bad("chains must be >= 1".into());
        }
        if self.sampling_iterations == 0 {
            return bad("sampling_iterations must be >= 1".into());
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad(format!("target_accept {} not in (0, 1)", self.target_accept));
        }
        if self.max_tree_depth == 0 {
            return bad("max_tree_depth must be >= 1".into());
        }
        if self.adapt && self.warmup_iterations < 100 {
            return bad(format!(
                "warmup_iterations {} < 100 with adaptation enabled",
                self.warmup_iterations
            ));
        }
        if !(self.initial_step_size > 0.0) {
            return bad("initial_step_size must be positive".into());
        }
        Ok(())
    }
}

/// Posterior draws, one row per retained iteration, chains stacked in order.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub draws: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub divergent: Vec<bool>,
    pub accept_stat: Vec<f64>,
    pub tree_depth: Vec<usize>,
    pub chain: Vec<usize>,
    /// Adapted step size per chain.
    pub step_size: Vec<f64>,
    /// Adapted inverse metric per chain.
    pub inv_metric: Vec<Vec<f64>>,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn n_chains(&self) -> usize {
        self.step_size.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|r| r[j]).collect()
    }

    pub fn column_by_name(&self, name: &str) -> Option<Vec<f64>> {
        self.names.iter().position(|n| n == name).map(|j| self.column(j))
    }

    /// Draws of parameter `j` split by chain.
    pub fn chains_of(&self, j: usize) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.n_chains()];
        for (row, &c) in self.draws.iter().zip(&self.chain) {
            out[c].push(row[j]);
        }
        out
    }

    pub fn divergences(&self) -> usize {
        self.divergent.iter().filter(|d| **d).count()
    }

    /// Replace every draw by `f(draw)` and rename the columns.
    pub fn map(self, names: Vec<String>, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let draws = self.draws.iter().map(|r| f(r)).collect();
        Self {
            names,
            draws,
            ..self
        }
    }

    /// CSV with `chain`, `iteration`, `lp__`, `accept_stat__`, `treedepth__`,
    /// `divergent__` and one column per parameter.
    pub fn write_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = CSV_META.iter().map(|s| s.to_string()).collect();
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        let mut iteration = vec![0usize; self.n_chains()];
        for (i, row) in self.draws.iter().enumerate() {
            let c = self.chain[i];
            iteration[c] += 1;
            let mut rec = vec![
                (c + 1).to_string(),
                iteration[c].to_string(),
                format!("{}", self.log_density[i]),
                format!("{}", self.accept_stat[i]),
                self.tree_depth[i].to_string(),
                (self.divergent[i] as u8).to_string(),
            ];
            rec.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush()
    }

    /// Read draws written by [`PosteriorDraws::write_csv`]. Step sizes and
    /// metrics are not stored and come back as `NaN` / empty.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, String> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(|e| e.to_string())?.clone();
        let meta: Vec<&str> = header.iter().take(CSV_META.len()).collect();
        if meta != CSV_META {
            return Err(format!("unexpected draws header {meta:?}"));
        }
        let names: Vec<String> = header.iter().skip(CSV_META.len()).map(String::from).collect();
        let mut out = PosteriorDraws {
            names,
            draws: Vec::new(),
            log_density: Vec::new(),
            divergent: Vec::new(),
            accept_stat: Vec::new(),
            tree_depth: Vec::new(),
            chain: Vec::new(),
            step_size: Vec::new(),
            inv_metric: Vec::new(),
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
        for rec in r.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            let chain = rec[0].parse::<usize>().map_err(|e| e.to_string())?;
            if chain == 0 {
                return Err("chain numbers start at 1".into());
            }
            out.chain.push(chain - 1);
            out.log_density.push(num(&rec[2])?);
            out.accept_stat.push(num(&rec[3])?);
            out.tree_depth.push(rec[4].parse::<usize>().map_err(|e| e.to_string())?);
            out.divergent.push(&rec[5] == "1");
            out.draws.push(
                rec.iter()
                    .skip(CSV_META.len())
                    .map(num)
                    .collect::<Result<_, _>>()?,
            );
        }
        let chains = out.chain.iter().max().map_or(0, |c| c + 1);
        out.step_size = vec![f64::NAN; chains];
        out.inv_metric = vec![Vec::new(); chains];
        Ok(out)
    }
}

const CSV_META: [&str; 6] = [
    "chain",
    "iteration",
    "lp__",
    "accept_stat__",
    "treedepth__",
    "divergent__",
];

/// Output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    pub draws: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub divergent: Vec<bool>,
    pub accept_stat: Vec<f64>,
    pub tree_depth: Vec<usize>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
}

/// Independent RNG stream for a chain.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Run `config.chains` chains, in parallel threads, and stack their draws.
pub fn sample<T: Target>(target: &T, config: &SamplerConfig) -> Result<PosteriorDraws, HmcError> {
    config.validate()?;
    let results: Vec<Result<ChainResult, HmcError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.chains)
            .map(|c| scope.spawn(move || run_chain(target, config, c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampler thread panicked"))
            .collect()
    });
    let names = (1..=target.dim()).map(|i| format!("x{i}")).collect();
    let mut out = PosteriorDraws {
        names,
        draws: Vec::new(),
        log_density: Vec::new(),
        divergent: Vec::new(),
        accept_stat: Vec::new(),
        tree_depth: Vec::new(),
        chain: Vec::new(),
        step_size: Vec::new(),
        inv_metric: Vec::new(),
    };
    for (c, r) in results.into_iter().enumerate() {
        let r = r?;
        out.chain.extend(std::iter::repeat(c).take(r.draws.len()));
        out.draws.extend(r.draws);
        out.log_density.extend(r.log_density);
        out.divergent.extend(r.divergent);
        out.accept_stat.extend(r.accept_stat);
        out.tree_depth.extend(r.tree_depth);
        out.step_size.push(r.step_size);
        out.inv_metric.push(r.inv_metric);
    }
    Ok(out)
}

/// One chain: initialise, warm up, sample.
pub fn run_chain<T: Target>(
    target: &T,
    config: &SamplerConfig,
    chain: usize,
) -> Result<ChainResult, HmcError> {
    let mut rng = chain_rng(config.seed, chain);
    let mut nuts = Nuts::new(target, config.max_tree_depth);
    let mut z = nuts
        .initialise(&mut rng, 100)
        .ok_or(HmcError::InitializationFailure {
            chain,
            attempts: 100,
        })?;
    nuts.step_size = config.initial_step_size;

    if config.adapt && config.warmup_iterations > 0 {
        nuts.init_step_size(&z, &mut rng)
            .map_err(|_| HmcError::StepSize { chain })?;
        let mut da = DualAveraging::new(config.target_accept, nuts.step_size);
        let mut schedule = WindowSchedule::new(config.warmup_iterations);
        let mut welford = adapt::Welford::new(target.dim());
        for _ in 0..config.warmup_iterations {
            let t = nuts.transition(&z, &mut rng);
            z = t.point;
            nuts.step_size = da.update(t.accept_stat);
            if schedule.in_slow_window() {
                welford.add(&z.q);
            }
            if schedule.end_of_window() {
                nuts.inv_metric = welford.regularized_variance();
                welford = adapt::Welford::new(target.dim());
                nuts.init_step_size(&z, &mut rng)
                    .map_err(|_| HmcError::StepSize { chain })?;
                da = DualAveraging::new(config.target_accept, nuts.step_size);
            }
            schedule.advance();
        }
        nuts.step_size = da.final_step_size();
    } else {
        for _ in 0..config.warmup_iterations {
            z = nuts.transition(&z, &mut rng).point;
        }
    }

    let s = config.sampling_iterations;
    let mut res = ChainResult {
        draws: Vec::with_capacity(s),
        log_density: Vec::with_capacity(s),
        divergent: Vec::with_capacity(s),
        accept_stat: Vec::with_capacity(s),
        tree_depth: Vec::with_capacity(s),
        step_size: nuts.step_size,
        inv_metric: nuts.inv_metric.clone(),
    };
    for _ in 0..s {
        let t = nuts.transition(&z, &mut rng);
        z = t.point;
        res.draws.push(z.q.clone());
        res.log_density.push(z.log_density);
        res.divergent.push(t.divergent);
        res.accept_stat.push(t.accept_stat);
        res.tree_depth.push(t.depth);
    }
    if res.divergent.iter().all(|d| *d) {
        return Err(HmcError::AllDivergent { chain });
    }
    Ok(res)
}

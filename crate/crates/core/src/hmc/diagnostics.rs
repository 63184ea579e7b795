use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{HmcError, PosteriorDraws};
use crate::stats;

/// Convergence summary of one parameter. `None` marks an undefined value
/// (e.g. a constant column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub name: String,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains[0][0];
    chains.iter().flatten().all(|v| *v == first)
}

/// Rank-normalise pooled draws: `Φ⁻¹((r - 3/8) / (S + 1/4))` with average
/// ranks for ties.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let flat: Vec<(f64, usize)> = chains
        .iter()
        .flatten()
        .cloned()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    let s = flat.len();
    let mut order = flat.clone();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && order[j + 1].0 == order[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for item in &order[i..=j] {
            ranks[item.1] = avg;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let mut out = Vec::with_capacity(chains.len());
    let mut k = 0;
    for c in chains {
        let mut z = Vec::with_capacity(c.len());
        for _ in c {
            z.push(normal.inverse_cdf((ranks[k] - 0.375) / (s as f64 + 0.25)));
            k += 1;
        }
        out.push(z);
    }
    out
}

fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

fn basic_rhat(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| stats::mean(c)).collect();
    let vars: Vec<f64> = chains.iter().map(|c| stats::variance(c)).collect();
    let b = n * stats::variance(&means);
    let w = vars.iter().sum::<f64>() / m;
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Rank-normalised split-Rhat: the larger of the bulk and folded versions.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.is_empty() || chains.iter().any(|c| c.len() < 4) || is_constant(chains) {
        return None;
    }
    let bulk = basic_rhat(&rank_normalize(&split(chains)));
    let pooled: Vec<f64> = chains.iter().flatten().cloned().collect();
    let med = stats::quantile(&pooled, 0.5);
    let folded: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| c.iter().map(|v| (v - med).abs()).collect())
        .collect();
    let tail = if is_constant(&folded) {
        bulk
    } else {
        basic_rhat(&rank_normalize(&split(&folded)))
    };
    Some(bulk.max(tail))
}

fn autocovariance(c: &[f64], mean: f64, lag: usize) -> f64 {
    let n = c.len();
    let mut s = 0.0;
    for t in 0..n - lag {
        s += (c[t] - mean) * (c[t + lag] - mean);
    }
    s / n as f64
}

/// Multi-chain effective sample size with Geyer's initial positive
/// sequence and monotone adjustment. Chains are truncated to equal length.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.is_empty() || is_constant(chains) {
        return None;
    }
    let n = chains.iter().map(|c| c.len()).min()?;
    if n < 4 {
        return None;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let m = chains.len();
    let means: Vec<f64> = chains.iter().map(|c| stats::mean(c)).collect();
    let acov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| autocovariance(c, *mu, lag))
            .sum::<f64>()
            / m as f64
    };
    let nf = n as f64;
    let mean_var = acov(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += stats::variance(&means);
    }
    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = 1.0 - (mean_var - acov(1)) / var_plus;
    rho[1] = odd;
    let mut t = 1;
    while t + 4 < n && even + odd > 0.0 {
        even = 1.0 - (mean_var - acov(t + 1)) / var_plus;
        odd = 1.0 - (mean_var - acov(t + 2)) / var_plus;
        if even + odd >= 0.0 {
            rho[t + 1] = even;
            rho[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 && max_t + 1 < n {
        rho[max_t + 1] = even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0;
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tail = if max_t + 1 < n { rho[max_t + 1] } else { 0.0 };
    let tau = (-1.0 + 2.0 * rho[..=max_t.min(n - 1)].iter().sum::<f64>() + tail)
        .max(1.0 / total.log10());
    Some(total / tau)
}

/// Rhat and ESS for every column. Needs at least two chains with at least
/// 100 draws each.
pub fn diagnostics(draws: &PosteriorDraws) -> Result<Vec<Diagnostic>, HmcError> {
    let k = draws.n_chains();
    if k < 2 {
        return Err(HmcError::InsufficientDraws { needed: 2 });
    }
    let per_chain = draws.len() / k;
    if per_chain < 100 {
        return Err(HmcError::InsufficientDraws { needed: 2 });
    }
    Ok((0..draws.n_params())
        .map(|j| {
            let chains = draws.chains_of(j);
            Diagnostic {
                name: draws.names[j].clone(),
                rhat: split_rhat(&chains),
                ess: effective_sample_size(&chains),
            }
        })
        .collect())
}

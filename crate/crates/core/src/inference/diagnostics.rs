//! Rank-normalized split-R̂ and bulk effective sample size.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf_inv;

use super::{InferenceError, PosteriorDraws};
use crate::stats::{mean, quantile, variance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostics {
    pub name: String,
    /// `None` when the draws are degenerate.
    pub rhat: Option<f64>,
    pub ess_bulk: Option<f64>,
    /// All draws identical or some draw non-finite.
    pub degenerate: bool,
}

pub fn diagnose(draws: &PosteriorDraws) -> Result<Vec<ParamDiagnostics>, InferenceError> {
    if draws.n_chains() < 2 || draws.n_draws() < 4 {
        return Err(InferenceError::TooFewDraws);
    }
    Ok((0..draws.n_params())
        .map(|i| {
            let chains: Vec<Vec<f64>> = (0..draws.n_chains()).map(|c| draws.column(c, i)).collect();
            let degenerate = is_degenerate(&chains);
            ParamDiagnostics {
                name: draws.names[i].clone(),
                rhat: (!degenerate).then(|| rhat(&chains)),
                ess_bulk: (!degenerate).then(|| ess_bulk(&chains)),
                degenerate,
            }
        })
        .collect())
}

fn is_degenerate(chains: &[Vec<f64>]) -> bool {
    let mut all = chains.iter().flatten();
    let Some(&first) = all.next() else {
        return true;
    };
    !first.is_finite() || all.clone().any(|v| !v.is_finite()) || all.all(|&v| v == first)
}

/// Halves every chain, dropping the middle draw of odd-length chains.
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    chains
        .iter()
        .flat_map(|c| {
            let half = c.len() / 2;
            [c[..half].to_vec(), c[c.len() - half..].to_vec()]
        })
        .collect()
}

/// Normal scores of the pooled ranks (average ranks for ties), reshaped like
/// the input.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = pooled.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let mut it = ranks
        .into_iter()
        .map(|r| std::f64::consts::SQRT_2 * erf_inv(2.0 * (r - 0.375) / (s as f64 + 0.25) - 1.0));
    chains
        .iter()
        .map(|c| it.by_ref().take(c.len()).collect())
        .collect()
}

fn basic_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let within = mean(&chains.iter().map(|c| variance(c)).collect::<Vec<_>>());
    let between = n * variance(&means);
    let var_plus = (n - 1.0) / n * within + between / n;
    (var_plus / within).sqrt()
}

/// Classic split-R̂ on the raw values.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    basic_rhat(&split_chains(chains))
}

/// Maximum of the bulk and folded rank-normalized split-R̂.
pub fn rhat(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    let bulk = basic_rhat(&rank_normalize(&split));
    let pooled: Vec<f64> = split.iter().flatten().copied().collect();
    let med = quantile(&pooled, 0.5);
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|v| (v - med).abs()).collect())
        .collect();
    let tail = basic_rhat(&rank_normalize(&folded));
    bulk.max(tail)
}

/// Bulk effective sample size of the rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> f64 {
    ess(&rank_normalize(&split_chains(chains)))
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len();
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    // biased autocovariance of every chain at one lag, averaged over chains
    let mean_acov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| (0..n - lag).map(|i| (c[i] - mu) * (c[i + lag] - mu)).sum::<f64>() / nf)
            .sum::<f64>()
            / m
    };
    let mean_var = mean_acov(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if chains.len() > 1 {
        var_plus += variance(&means);
    }

    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = 1.0 - (mean_var - mean_acov(1)) / var_plus;
    rho[1] = rho_odd;
    let mut t = 0;
    while t + 5 < n && !(rho_even + rho_odd).is_nan() && rho_even + rho_odd > 0.0 {
        t += 2;
        rho_even = 1.0 - (mean_var - mean_acov(t)) / var_plus;
        rho_odd = 1.0 - (mean_var - mean_acov(t + 1)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[t] = rho_even;
            rho[t + 1] = rho_odd;
        }
    }
    let max_t = t;
    if rho_even > 0.0 {
        rho[max_t] = rho_even;
    }

    let mut t = 0;
    while t + 4 <= max_t {
        t += 2;
        if rho[t] + rho[t + 1] > rho[t - 2] + rho[t - 1] {
            rho[t] = (rho[t - 2] + rho[t - 1]) / 2.0;
            rho[t + 1] = rho[t];
        }
    }
    let total = m * nf;
    let tau = -1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t];
    total / tau.max(1.0 / total.log10())
}

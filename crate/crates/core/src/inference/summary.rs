//! Posterior summary tables.

use serde::{Deserialize, Serialize};

use super::posterior::eta_name;
use super::PosteriorDraws;
use crate::domain::{inv_logit, GridShape};
use crate::stats::{mean, quantile_sorted};

pub const DEFAULT_PROBS: [f64; 5] = [0.025, 0.05, 0.5, 0.95, 0.975];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub median: f64,
    /// `(probability, quantile)` pairs in the requested order.
    pub quantiles: Vec<(f64, f64)>,
}

/// Median and central 90% interval of `φ = inv_logit(η)` for one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiSummary {
    pub population: String,
    pub year: i32,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

fn sorted(mut values: Vec<f64>) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    values
}

pub fn summarize(draws: &PosteriorDraws, probs: &[f64]) -> Vec<ParamSummary> {
    draws
        .names
        .iter()
        .map(|name| {
            let values = sorted(draws.pooled(name).expect("name comes from the draws"));
            ParamSummary {
                name: name.clone(),
                mean: mean(&values),
                median: quantile_sorted(&values, 0.5),
                quantiles: probs.iter().map(|&p| (p, quantile_sorted(&values, p))).collect(),
            }
        })
        .collect()
}

/// Summaries of `φ`, computed on transformed draws. Cells whose `eta` column
/// is missing are skipped.
pub fn summarize_phi(draws: &PosteriorDraws, shape: &GridShape) -> Vec<PhiSummary> {
    let mut out = Vec::with_capacity(shape.len());
    for population in &shape.populations {
        for year in shape.years() {
            let Some(eta) = draws.pooled(&eta_name(population, year)) else {
                continue;
            };
            let phi = sorted(eta.into_iter().map(inv_logit).collect());
            out.push(PhiSummary {
                population: population.clone(),
                year,
                median: quantile_sorted(&phi, 0.5),
                lower: quantile_sorted(&phi, 0.05),
                upper: quantile_sorted(&phi, 0.95),
            });
        }
    }
    out
}

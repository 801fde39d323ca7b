//! Classification of observations into "possibly outlying" or not.
//!
//! Per population, three steps run in order:
//!
//! 1. flag observations with documented quality concerns (input flags plus
//!    configurable rules, by default DHS rounds before 1990);
//! 2. pick a reference source among the unflagged observations (DHS when
//!    present, otherwise National or Other by post-1990 count); everything
//!    outside the reference category is possibly outlying;
//! 3. fit a smooth long-term trend through the reference category and flag
//!    the reference observations with the largest absolute residuals.
//!
//! User overrides that force an observation to "not possibly outlying" are
//! applied last and take precedence over all three steps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{transform_observation, DomainError, Observation, SourceType};
use crate::stats::quantile;

/// A step-1 rule: observations from `source` collected before `before_year`
/// are flagged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcernRule {
    pub source: SourceType,
    pub before_year: i32,
}

impl ConcernRule {
    pub fn applies(&self, obs: &Observation) -> bool {
        obs.source_type == self.source && obs.year < self.before_year
    }
}

pub fn default_concern_rules() -> Vec<ConcernRule> {
    vec![ConcernRule {
        source: SourceType::Dhs,
        before_year: 1990,
    }]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub top_fraction: f64,
    /// Kernel bandwidth of the long-term trend, in years.
    pub bandwidth: f64,
    pub concern_rules: Vec<ConcernRule>,
    /// Observation ids forced to "not possibly outlying".
    pub overrides: BTreeSet<u64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            top_fraction: 0.10,
            bandwidth: 5.0,
            concern_rules: default_concern_rules(),
            overrides: BTreeSet::new(),
        }
    }
}

/// Why an observation ended up possibly outlying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlagReason {
    /// Documented concern or a step-1 rule.
    Step1,
    /// Outside the population's reference category.
    Step2,
    /// Large residual against the long-term trend.
    Step3,
}

impl FlagReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FlagReason::Step1 => "step1",
            FlagReason::Step2 => "step2",
            FlagReason::Step3 => "step3",
        }
    }
}

impl fmt::Display for FlagReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub id: u64,
    pub population: String,
    pub possibly_outlying: bool,
    /// First step that flagged the observation, kept even when overridden.
    pub reason: Option<FlagReason>,
    pub overridden: bool,
}

/// Per-observation verdicts (in input order) plus the reference source chosen
/// for each population.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutlierClassification {
    pub verdicts: Vec<Verdict>,
    pub reference_source: BTreeMap<String, Option<SourceType>>,
}

impl OutlierClassification {
    pub fn is_possibly_outlying(&self, id: u64) -> Option<bool> {
        self.verdicts
            .iter()
            .find(|v| v.id == id)
            .map(|v| v.possibly_outlying)
    }

    pub fn outlying_ids(&self) -> BTreeSet<u64> {
        self.verdicts
            .iter()
            .filter(|v| v.possibly_outlying)
            .map(|v| v.id)
            .collect()
    }

    pub fn reference_for(&self, population: &str) -> Option<SourceType> {
        self.reference_source.get(population).copied().flatten()
    }
}

/// Step 1: documented concerns plus rule-based flags.
pub fn flag_documented_concerns(observations: &[Observation], rules: &[ConcernRule]) -> Vec<bool> {
    observations
        .iter()
        .map(|obs| obs.documented_concern || rules.iter().any(|r| r.applies(obs)))
        .collect()
}

/// Step 2: reference source for one population's observations.
pub fn select_reference_source(observations: &[&Observation], step1: &[bool]) -> Option<SourceType> {
    let eligible = || {
        observations
            .iter()
            .zip(step1)
            .filter(|(_, &flagged)| !flagged)
            .map(|(obs, _)| *obs)
    };
    if eligible().any(|o| o.source_type == SourceType::Dhs) {
        return Some(SourceType::Dhs);
    }
    let recent = |src: SourceType| {
        eligible()
            .filter(|o| o.source_type == src && o.year >= 1990)
            .count()
    };
    let national = recent(SourceType::National);
    let other = recent(SourceType::Other);
    match (national, other) {
        (0, 0) => None,
        // ties go to National
        (n, o) if n >= o => Some(SourceType::National),
        _ => Some(SourceType::Other),
    }
}

/// One logit-scale point used by the trend fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendPoint {
    pub year: f64,
    pub z: f64,
    pub logit_variance: f64,
}

/// Gaussian-kernel local linear regression through a population's reference
/// observations, weighted by `1 / (logit variance + 0.01)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendEstimate {
    points: Vec<TrendPoint>,
    bandwidth: f64,
}

impl TrendEstimate {
    pub fn evaluate(&self, year: f64) -> f64 {
        let pts = &self.points;
        if pts.len() == 1 {
            return pts[0].z;
        }
        let exponents: Vec<f64> = pts
            .iter()
            .map(|p| {
                let u = (p.year - year) / self.bandwidth;
                -0.5 * u * u
            })
            .collect();
        let max_exp = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = pts
            .iter()
            .zip(&exponents)
            .map(|(p, e)| (e - max_exp).exp() / (p.logit_variance + 0.01))
            .collect();

        let sw: f64 = weights.iter().sum();
        let mx = pts.iter().zip(&weights).map(|(p, w)| w * p.year).sum::<f64>() / sw;
        let mz = pts.iter().zip(&weights).map(|(p, w)| w * p.z).sum::<f64>() / sw;
        let (mut sxx, mut sxz) = (0.0, 0.0);
        for (p, w) in pts.iter().zip(&weights) {
            let dx = p.year - mx;
            sxx += w * dx * dx;
            sxz += w * dx * (p.z - mz);
        }
        // all effective weight on one year: fall back to the weighted mean
        if sxx <= 1e-12 * sw {
            return mz;
        }
        mz + (sxz / sxx) * (year - mx)
    }
}

/// Fits the long-term trend. `points` must be nonempty.
pub fn fit_longterm_trend(points: &[TrendPoint], bandwidth: f64) -> TrendEstimate {
    assert!(!points.is_empty(), "trend needs at least one reference observation");
    assert!(bandwidth > 0.0, "trend bandwidth must be positive");
    TrendEstimate {
        points: points.to_vec(),
        bandwidth,
    }
}

/// Flags residuals strictly above the empirical `1 - top_fraction` quantile.
pub fn flag_top_residuals(abs_residuals: &[f64], top_fraction: f64) -> Vec<bool> {
    if abs_residuals.is_empty() {
        return Vec::new();
    }
    let threshold = quantile(abs_residuals, 1.0 - top_fraction);
    abs_residuals.iter().map(|&r| r > threshold).collect()
}

/// Step 3: flags the points with the largest absolute residuals against `trend`.
pub fn flag_trend_outliers(points: &[TrendPoint], trend: &TrendEstimate, top_fraction: f64) -> Vec<bool> {
    let residuals: Vec<f64> = points
        .iter()
        .map(|p| (p.z - trend.evaluate(p.year)).abs())
        .collect();
    flag_top_residuals(&residuals, top_fraction)
}

/// Runs the three steps for every population, then applies overrides.
pub fn classify_possible_outliers(
    observations: &[Observation],
    config: &PreprocessConfig,
) -> Result<OutlierClassification, DomainError> {
    let step1 = flag_documented_concerns(observations, &config.concern_rules);
    let mut reasons: Vec<Option<FlagReason>> = step1
        .iter()
        .map(|&f| f.then_some(FlagReason::Step1))
        .collect();

    let mut by_population: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, obs) in observations.iter().enumerate() {
        by_population.entry(obs.population.as_str()).or_default().push(i);
    }

    let mut reference_source = BTreeMap::new();
    for (population, members) in &by_population {
        let obs: Vec<&Observation> = members.iter().map(|&i| &observations[i]).collect();
        let flags: Vec<bool> = members.iter().map(|&i| step1[i]).collect();
        let reference = select_reference_source(&obs, &flags);
        reference_source.insert(population.to_string(), reference);

        let mut pool = Vec::new();
        for &i in members {
            if reasons[i].is_some() {
                continue;
            }
            if Some(observations[i].source_type) == reference {
                pool.push(i);
            } else {
                reasons[i] = Some(FlagReason::Step2);
            }
        }
        if pool.is_empty() {
            continue;
        }

        let points = pool
            .iter()
            .map(|&i| {
                let t = transform_observation(&observations[i])?;
                Ok(TrendPoint {
                    year: f64::from(observations[i].year),
                    z: t.z,
                    logit_variance: t.logit_sampling_variance,
                })
            })
            .collect::<Result<Vec<_>, DomainError>>()?;
        let trend = fit_longterm_trend(&points, config.bandwidth);
        let flagged = flag_trend_outliers(&points, &trend, config.top_fraction);
        for (&i, flag) in pool.iter().zip(flagged) {
            if flag {
                reasons[i] = Some(FlagReason::Step3);
            }
        }
    }

    let verdicts = observations
        .iter()
        .zip(reasons)
        .map(|(obs, reason)| {
            let overridden = config.overrides.contains(&obs.id);
            Verdict {
                id: obs.id,
                population: obs.population.clone(),
                possibly_outlying: reason.is_some() && !overridden,
                reason,
                overridden,
            }
        })
        .collect();

    Ok(OutlierClassification {
        verdicts,
        reference_source,
    })
}

//! Observation records, scale transforms and sampling-variance derivation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("proportion {0} is outside the open interval (0, 1)")]
    ProportionOutOfRange(f64),
    #[error("variance {0} must be finite and non-negative")]
    InvalidVariance(f64),
    #[error("effective sample size {0} must be finite and positive")]
    InvalidSampleSize(f64),
    #[error("category proportions {y1} and {y2} must satisfy y2 < 1 - y1")]
    CategoriesExceedOne { y1: f64, y2: f64 },
    #[error("observation {0} has neither a sampling variance nor an effective sample size")]
    MissingSamplingInfo(u64),
    #[error("observation {id}: {reason}")]
    InvalidObservation { id: u64, reason: String },
    #[error("unknown {kind} '{value}'")]
    UnknownLabel { kind: &'static str, value: String },
}

/// Survey program that produced an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceType {
    #[serde(rename = "DHS")]
    Dhs,
    #[serde(rename = "MICS")]
    Mics,
    #[serde(rename = "PMA")]
    Pma,
    National,
    Other,
}

impl SourceType {
    pub const ALL: [SourceType; 5] = [
        SourceType::Dhs,
        SourceType::Mics,
        SourceType::Pma,
        SourceType::National,
        SourceType::Other,
    ];

    /// Source types that carry a repeated (source-specific) error term, in
    /// parameter order. DHS is the reference program and has none.
    pub const REPEATED: [SourceType; 4] = [
        SourceType::Mics,
        SourceType::Pma,
        SourceType::National,
        SourceType::Other,
    ];

    /// Position in [`SourceType::REPEATED`], or `None` for DHS.
    pub fn repeated_index(self) -> Option<usize> {
        match self {
            SourceType::Dhs => None,
            SourceType::Mics => Some(0),
            SourceType::Pma => Some(1),
            SourceType::National => Some(2),
            SourceType::Other => Some(3),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SourceType::Dhs => "DHS",
            SourceType::Mics => "MICS",
            SourceType::Pma => "PMA",
            SourceType::National => "National",
            SourceType::Other => "Other",
        }
    }
}

impl fmt::Display for SourceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceType {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SourceType::ALL
            .into_iter()
            .find(|src| src.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| DomainError::UnknownLabel {
                kind: "source type",
                value: s.to_string(),
            })
    }
}

/// Which indicator an observation measures. Each indicator is fitted with
/// its own, independent model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    PrimaryProportion,
    UnmetRatio,
}

impl Indicator {
    pub fn as_str(self) -> &'static str {
        match self {
            Indicator::PrimaryProportion => "primary_proportion",
            Indicator::UnmetRatio => "unmet_ratio",
        }
    }
}

impl fmt::Display for Indicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Indicator {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "primary_proportion" => Ok(Indicator::PrimaryProportion),
            "unmet_ratio" => Ok(Indicator::UnmetRatio),
            other => Err(DomainError::UnknownLabel {
                kind: "indicator",
                value: other.to_string(),
            }),
        }
    }
}

/// One survey measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub id: u64,
    pub population: String,
    pub year: i32,
    pub indicator: Indicator,
    /// Observed proportion, strictly inside (0, 1).
    pub value: f64,
    /// Sampling variance on the proportion scale.
    pub sampling_variance: Option<f64>,
    pub effective_sample_size: Option<f64>,
    pub source_type: SourceType,
    /// Sampled population differs from the target population.
    pub char_mismatch: bool,
    pub documented_concern: bool,
    /// Groups PMA panel rounds within a population.
    pub pma_series_id: Option<String>,
}

impl Observation {
    /// Checks the record-level invariants.
    pub fn validate(&self) -> Result<(), DomainError> {
        let invalid = |reason: String| DomainError::InvalidObservation { id: self.id, reason };
        if !(self.value > 0.0 && self.value < 1.0) {
            return Err(invalid(format!(
                "value {} is outside the open interval (0, 1)",
                self.value
            )));
        }
        if self.sampling_variance.is_none() && self.effective_sample_size.is_none() {
            return Err(DomainError::MissingSamplingInfo(self.id));
        }
        if let Some(v) = self.sampling_variance {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("sampling variance {v} is invalid")));
            }
        }
        if let Some(n) = self.effective_sample_size {
            if !(n.is_finite() && n > 0.0) {
                return Err(invalid(format!("effective sample size {n} is invalid")));
            }
        }
        match (self.source_type, &self.pma_series_id) {
            (SourceType::Pma, None) => Err(invalid("PMA observation without pma_series_id".into())),
            (SourceType::Pma, Some(_)) => Ok(()),
            (_, Some(_)) => Err(invalid("pma_series_id given for a non-PMA observation".into())),
            (_, None) => Ok(()),
        }
    }
}

/// Maps a possibly fractional survey time to its annual grid year (nearest year,
/// halves rounded away from zero).
pub fn nearest_year(time: f64) -> i32 {
    time.round() as i32
}

/// Annual population × year index space shared by the latent grid and the
/// error structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub populations: Vec<String>,
    pub first_year: i32,
    pub n_years: usize,
}

impl GridShape {
    pub fn new(populations: Vec<String>, first_year: i32, n_years: usize) -> Self {
        Self {
            populations,
            first_year,
            n_years,
        }
    }

    /// Sorted distinct populations and the year span of `observations`.
    /// Returns `None` for an empty slice.
    pub fn covering(observations: &[Observation]) -> Option<Self> {
        let first = observations.iter().map(|o| o.year).min()?;
        let last = observations.iter().map(|o| o.year).max()?;
        let mut populations: Vec<String> =
            observations.iter().map(|o| o.population.clone()).collect();
        populations.sort();
        populations.dedup();
        Some(Self::new(populations, first, (last - first + 1) as usize))
    }

    pub fn n_populations(&self) -> usize {
        self.populations.len()
    }

    pub fn len(&self) -> usize {
        self.populations.len() * self.n_years
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn years(&self) -> impl Iterator<Item = i32> + '_ {
        (0..self.n_years).map(move |t| self.first_year + t as i32)
    }

    pub fn population_index(&self, population: &str) -> Option<usize> {
        self.populations.iter().position(|p| p == population)
    }

    pub fn year_index(&self, year: i32) -> Option<usize> {
        let t = year.checked_sub(self.first_year)?;
        (t >= 0 && (t as usize) < self.n_years).then_some(t as usize)
    }

    pub fn cell(&self, population: usize, year: usize) -> usize {
        population * self.n_years + year
    }
}

/// Latent logit-scale indicator values on a population × year grid, stored
/// row-major by population.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    shape: GridShape,
    eta: Vec<f64>,
}

impl LatentGrid {
    pub fn new(shape: GridShape, eta: Vec<f64>) -> Self {
        assert_eq!(
            eta.len(),
            shape.len(),
            "latent grid values do not match populations x years"
        );
        Self { shape, eta }
    }

    pub fn filled(shape: GridShape, value: f64) -> Self {
        let n = shape.len();
        Self::new(shape, vec![value; n])
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn get(&self, population: usize, year: usize) -> f64 {
        self.eta[self.shape.cell(population, year)]
    }

    pub fn set(&mut self, population: usize, year: usize, value: f64) {
        let cell = self.shape.cell(population, year);
        self.eta[cell] = value;
    }

    pub fn row(&self, population: usize) -> &[f64] {
        let n = self.shape.n_years;
        &self.eta[population * n..(population + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.eta
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.eta
    }

    pub fn into_values(self) -> Vec<f64> {
        self.eta
    }

    pub fn is_finite(&self) -> bool {
        self.eta.iter().all(|v| v.is_finite())
    }
}

/// An observation moved to the logit scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformedObservation {
    pub z: f64,
    pub logit_sampling_variance: f64,
}

fn check_proportion(p: f64) -> Result<(), DomainError> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(DomainError::ProportionOutOfRange(p))
    }
}

pub fn logit(p: f64) -> Result<f64, DomainError> {
    check_proportion(p)?;
    Ok((p / (1.0 - p)).ln())
}

pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Delta-method variance of `logit(p̂)` given the proportion-scale variance.
pub fn delta_logit_variance(p: f64, var_p: f64) -> Result<f64, DomainError> {
    check_proportion(p)?;
    if !(var_p.is_finite() && var_p >= 0.0) {
        return Err(DomainError::InvalidVariance(var_p));
    }
    let slope = p * (1.0 - p);
    Ok(var_p / (slope * slope))
}

/// Binomial sampling variance `p(1-p)/n_eff` on the proportion scale.
pub fn impute_sampling_variance(p: f64, n_eff: f64) -> Result<f64, DomainError> {
    check_proportion(p)?;
    if !(n_eff.is_finite() && n_eff > 0.0) {
        return Err(DomainError::InvalidSampleSize(n_eff));
    }
    Ok(p * (1.0 - p) / n_eff)
}

/// Share of the second category among those not in the first: `y2 / (1 - y1)`.
pub fn unmet_ratio(y1: f64, y2: f64) -> Result<f64, DomainError> {
    check_proportion(y1)?;
    check_proportion(y2)?;
    if y2 >= 1.0 - y1 {
        return Err(DomainError::CategoriesExceedOne { y1, y2 });
    }
    Ok(y2 / (1.0 - y1))
}

/// Logit value and logit-scale sampling variance. A stored variance takes
/// precedence over imputation from the effective sample size.
pub fn transform_observation(obs: &Observation) -> Result<TransformedObservation, DomainError> {
    let z = logit(obs.value)?;
    let var_p = match (obs.sampling_variance, obs.effective_sample_size) {
        (Some(v), _) => v,
        (None, Some(n)) => impute_sampling_variance(obs.value, n)?,
        (None, None) => return Err(DomainError::MissingSamplingInfo(obs.id)),
    };
    Ok(TransformedObservation {
        z,
        logit_sampling_variance: delta_logit_variance(obs.value, var_p)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn obs(value: f64, var: Option<f64>, n_eff: Option<f64>) -> Observation {
        Observation {
            id: 1,
            population: "A".into(),
            year: 2000,
            indicator: Indicator::PrimaryProportion,
            value,
            sampling_variance: var,
            effective_sample_size: n_eff,
            source_type: SourceType::Dhs,
            char_mismatch: false,
            documented_concern: false,
            pma_series_id: None,
        }
    }

    #[test]
    fn logit_values() {
        assert_eq!(logit(0.5).unwrap(), 0.0);
        assert_abs_diff_eq!(logit(0.41).unwrap(), -0.36397, epsilon = 5e-6);
        assert_abs_diff_eq!(logit(0.2).unwrap(), -1.38629, epsilon = 5e-6);
        assert_abs_diff_eq!(logit(0.8).unwrap(), 1.38629, epsilon = 5e-6);
        assert_abs_diff_eq!(logit(0.2).unwrap(), -logit(0.8).unwrap(), epsilon = 1e-15);
        assert!(logit(0.0).is_err());
        assert!(logit(1.0).is_err());
        assert!(logit(f64::NAN).is_err());
    }

    #[test]
    fn inv_logit_values() {
        assert_eq!(inv_logit(0.0), 0.5);
        assert_abs_diff_eq!(inv_logit(logit(0.35).unwrap()), 0.35, epsilon = 1e-15);
        let big = inv_logit(40.0);
        assert!(big < 1.0 || big == 1.0);
        assert!(big > 1.0 - 1e-15);
        let small = inv_logit(-800.0);
        assert!(small >= 0.0 && small.is_finite());
    }

    #[test]
    fn delta_method_values() {
        assert_abs_diff_eq!(delta_logit_variance(0.5, 0.0025).unwrap(), 0.04, epsilon = 1e-15);
        let a = delta_logit_variance(0.3, 0.001).unwrap();
        let b = delta_logit_variance(0.7, 0.001).unwrap();
        assert_abs_diff_eq!(a, 0.022676, epsilon = 5e-7);
        assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        assert_eq!(delta_logit_variance(0.5, 0.0).unwrap(), 0.0);
        assert!(delta_logit_variance(1.0, 0.1).is_err());
        assert!(delta_logit_variance(0.5, -0.1).is_err());
    }

    #[test]
    fn imputed_variance() {
        assert_abs_diff_eq!(impute_sampling_variance(0.5, 100.0).unwrap(), 0.0025, epsilon = 1e-15);
        assert!(impute_sampling_variance(0.5, 1e12).unwrap() <= 2.5e-13);
        assert_abs_diff_eq!(impute_sampling_variance(0.2, 400.0).unwrap(), 0.0004, epsilon = 1e-15);
        assert!(impute_sampling_variance(0.2, 0.0).is_err());
        assert!(impute_sampling_variance(0.0, 10.0).is_err());
    }

    #[test]
    fn ratio_transform() {
        assert_abs_diff_eq!(unmet_ratio(0.5, 0.25).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(unmet_ratio(1e-12, 0.3).unwrap(), 0.3, epsilon = 1e-11);
        assert_abs_diff_eq!(unmet_ratio(0.41, 0.2).unwrap(), 0.33898, epsilon = 5e-6);
        assert!(unmet_ratio(0.6, 0.4).is_err());
        assert!(unmet_ratio(0.6, 0.5).is_err());
    }

    #[test]
    fn transform_uses_stored_or_imputed_variance() {
        let t = transform_observation(&obs(0.5, Some(0.0025), None)).unwrap();
        assert_eq!(t.z, 0.0);
        assert_abs_diff_eq!(t.logit_sampling_variance, 0.04, epsilon = 1e-15);

        let t = transform_observation(&obs(0.5, None, Some(100.0))).unwrap();
        assert_abs_diff_eq!(t.logit_sampling_variance, 0.04, epsilon = 1e-15);

        let t = transform_observation(&obs(0.5, Some(0.0), None)).unwrap();
        assert_eq!(t.logit_sampling_variance, 0.0);

        // stored variance wins over n_eff
        let t = transform_observation(&obs(0.5, Some(0.0025), Some(1.0))).unwrap();
        assert_abs_diff_eq!(t.logit_sampling_variance, 0.04, epsilon = 1e-15);

        assert!(matches!(
            transform_observation(&obs(0.5, None, None)),
            Err(DomainError::MissingSamplingInfo(1))
        ));
    }

    #[test]
    fn observation_validation() {
        assert!(obs(0.3, Some(0.01), None).validate().is_ok());
        assert!(obs(1.0, Some(0.01), None).validate().is_err());
        assert!(obs(0.0, Some(0.01), None).validate().is_err());
        assert!(obs(0.3, None, None).validate().is_err());
        let mut pma = obs(0.3, Some(0.01), None);
        pma.source_type = SourceType::Pma;
        assert!(pma.validate().is_err());
        pma.pma_series_id = Some("s1".into());
        assert!(pma.validate().is_ok());
        let mut dhs = obs(0.3, Some(0.01), None);
        dhs.pma_series_id = Some("s1".into());
        assert!(dhs.validate().is_err());
    }

    #[test]
    fn labels_round_trip() {
        for src in SourceType::ALL {
            assert_eq!(src.as_str().parse::<SourceType>().unwrap(), src);
        }
        assert!("Census".parse::<SourceType>().is_err());
        assert_eq!("unmet_ratio".parse::<Indicator>().unwrap(), Indicator::UnmetRatio);
        assert_eq!(nearest_year(2003.4), 2003);
        assert_eq!(nearest_year(2003.5), 2004);
    }

    #[test]
    fn grid_indexing() {
        let shape = GridShape::new(vec!["A".into(), "B".into()], 1990, 3);
        let mut g = LatentGrid::filled(shape.clone(), 0.0);
        g.set(1, 2, 4.0);
        assert_eq!(g.get(1, 2), 4.0);
        assert_eq!(g.row(1), &[0.0, 0.0, 4.0]);
        assert_eq!(shape.year_index(1992), Some(2));
        assert_eq!(shape.year_index(1993), None);
        assert_eq!(shape.year_index(1989), None);
        assert_eq!(shape.population_index("B"), Some(1));
        assert_eq!(shape.years().collect::<Vec<_>>(), vec![1990, 1991, 1992]);
    }

    #[test]
    fn shape_covers_observations() {
        let mut a = obs(0.3, Some(0.01), None);
        a.population = "Z".into();
        a.year = 2004;
        let mut b = obs(0.3, Some(0.01), None);
        b.year = 1999;
        let shape = GridShape::covering(&[a, b]).unwrap();
        assert_eq!(shape.populations, vec!["A".to_string(), "Z".to_string()]);
        assert_eq!(shape.first_year, 1999);
        assert_eq!(shape.n_years, 6);
        assert!(GridShape::covering(&[]).is_none());
    }

    #[test]
    fn delta_method_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &p in &[0.2, 0.4, 0.5] {
            let sd = 0.02;
            let normal = Normal::new(p, sd).unwrap();
            let n = 1_000_000;
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..n {
                let draw: f64 = normal.sample(&mut rng);
                let x = (draw / (1.0 - draw)).ln();
                sum += x;
                sum_sq += x * x;
            }
            let mean = sum / n as f64;
            let empirical = sum_sq / n as f64 - mean * mean;
            let analytic = delta_logit_variance(p, sd * sd).unwrap();
            assert!(
                ((empirical - analytic) / analytic).abs() < 0.05,
                "p = {p}: empirical {empirical}, delta {analytic}"
            );
        }
    }

    proptest! {
        #[test]
        fn logit_round_trip(p in 1e-6f64..(1.0 - 1e-6)) {
            let back = inv_logit(logit(p).unwrap());
            prop_assert!((back - p).abs() <= 1e-12);
        }

        #[test]
        fn delta_symmetric_and_homogeneous(p in 0.01f64..0.99, v in 0.0f64..0.1, k in 0.0f64..10.0) {
            let a = delta_logit_variance(p, v).unwrap();
            let b = delta_logit_variance(1.0 - p, v).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            let scaled = delta_logit_variance(p, k * v).unwrap();
            prop_assert!((scaled - k * a).abs() <= 1e-12 * scaled.max(1.0));
        }
    }
}

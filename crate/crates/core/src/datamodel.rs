//! Normal-with-optional-shrinkage error model.
//!
//! Every transformed observation `z_i = logit(y_i)` is the latent value plus a
//! sum of independent zero-mean normal errors:
//!
//! * sampling error with known variance `s_i²`;
//! * a source-type error with shared scale `σ̃_d` (every program except DHS);
//! * a population-characteristic error with scale `σ_char` (mismatch set);
//! * an outlier error whose scale follows a regularized horseshoe
//!   `τ ϑ γ_i / sqrt(ϑ² + τ² γ_i²)` (possibly-outlying set).
//!
//! Observations from one PMA panel series in one population are jointly
//! normal with `Σ_jl = σ_j σ_l ρ^|t_j - t_l|`; all others are independent.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{transform_observation, DomainError, GridShape, Observation, SourceType};
use crate::inference::PosteriorDraws;
use crate::linalg;
use crate::stats::{half_cauchy_logpdf, half_normal_logpdf, LN_SQRT_2PI};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataModelError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("observation {id} ({population}, {year}) lies outside the latent grid")]
    OutsideGrid {
        id: u64,
        population: String,
        year: i32,
    },
    #[error("duplicate PMA round for population {population}, series {series}, year {year}")]
    DuplicatePmaRound {
        population: String,
        series: String,
        year: i32,
    },
    #[error("covariance of PMA block ({population}, series {series}) is not positive definite")]
    NotPositiveDefinite { population: String, series: String },
    #[error("observation {0} has zero total error variance")]
    DegenerateVariance(u64),
    #[error("expected {expected} local scales, got {got}")]
    LocalScaleCount { expected: usize, got: usize },
    #[error("latent values have length {got}, grid needs {expected}")]
    GridSize { expected: usize, got: usize },
    #[error("unknown error type '{0}'")]
    UnknownErrorType(String),
    #[error("posterior draws lack parameter '{0}'")]
    MissingParameter(String),
}

/// Data-model parameters on their natural (constrained) scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataModelParams {
    /// Source-type scales in [`SourceType::REPEATED`] order.
    pub source_scale: [f64; 4],
    pub char_scale: f64,
    pub tau: f64,
    pub slab: f64,
    /// Local scales aligned with [`ErrorStructure::outlier_ids`].
    pub local_scale: Vec<f64>,
    pub rho_pma: f64,
}

impl DataModelParams {
    pub fn source(&self, source: SourceType) -> Option<f64> {
        source.repeated_index().map(|k| self.source_scale[k])
    }

    pub fn local_scale_map(&self, structure: &ErrorStructure) -> BTreeMap<u64, f64> {
        structure
            .outlier_ids()
            .iter()
            .copied()
            .zip(self.local_scale.iter().copied())
            .collect()
    }
}

/// Prior scales of the data-model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub source_sd: f64,
    pub char_sd: f64,
    pub tau_scale: f64,
    pub slab_sd: f64,
    pub local_scale: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            source_sd: 0.5,
            char_sd: 0.5,
            tau_scale: 0.04,
            slab_sd: 1.0,
            local_scale: 1.0,
        }
    }
}

/// The error terms that apply to one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTerms {
    pub id: u64,
    /// Flat latent-grid cell `population * n_years + year`.
    pub cell: usize,
    pub year: i32,
    pub z: f64,
    pub sampling_variance: f64,
    /// Index into the source scales; `None` for DHS.
    pub source: Option<usize>,
    pub char_mismatch: bool,
    /// Index into the local scales when the observation is possibly outlying.
    pub outlier: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmaBlock {
    pub population: String,
    pub series: String,
    /// Observation indices sorted by year.
    pub members: Vec<usize>,
}

/// Which error types apply to each observation and how observations group
/// into correlated PMA blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStructure {
    shape: GridShape,
    terms: Vec<ObservationTerms>,
    blocks: Vec<PmaBlock>,
    independent: Vec<usize>,
    outlier_ids: Vec<u64>,
}

impl ErrorStructure {
    /// `outlying` is the possibly-outlying set; pass an empty set to switch
    /// the outlier term off.
    pub fn build(
        observations: &[Observation],
        shape: &GridShape,
        outlying: &BTreeSet<u64>,
    ) -> Result<Self, DataModelError> {
        let mut terms = Vec::with_capacity(observations.len());
        let mut outlier_ids = Vec::new();
        let mut series: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
        let mut independent = Vec::new();

        for (i, obs) in observations.iter().enumerate() {
            obs.validate()?;
            let outside = || DataModelError::OutsideGrid {
                id: obs.id,
                population: obs.population.clone(),
                year: obs.year,
            };
            let p = shape.population_index(&obs.population).ok_or_else(outside)?;
            let t = shape.year_index(obs.year).ok_or_else(outside)?;
            let transformed = transform_observation(obs)?;
            let outlier = outlying.contains(&obs.id).then(|| {
                outlier_ids.push(obs.id);
                outlier_ids.len() - 1
            });
            terms.push(ObservationTerms {
                id: obs.id,
                cell: shape.cell(p, t),
                year: obs.year,
                z: transformed.z,
                sampling_variance: transformed.logit_sampling_variance,
                source: obs.source_type.repeated_index(),
                char_mismatch: obs.char_mismatch,
                outlier,
            });
            match (&obs.source_type, &obs.pma_series_id) {
                (SourceType::Pma, Some(s)) => series
                    .entry((obs.population.clone(), s.clone()))
                    .or_default()
                    .push(i),
                _ => independent.push(i),
            }
        }

        let mut blocks = Vec::with_capacity(series.len());
        for ((population, series), mut members) in series {
            members.sort_by_key(|&i| terms[i].year);
            if let Some(w) = members.windows(2).find(|w| terms[w[0]].year == terms[w[1]].year) {
                return Err(DataModelError::DuplicatePmaRound {
                    population,
                    series,
                    year: terms[w[0]].year,
                });
            }
            blocks.push(PmaBlock {
                population,
                series,
                members,
            });
        }

        Ok(Self {
            shape: shape.clone(),
            terms,
            blocks,
            independent,
            outlier_ids,
        })
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn terms(&self) -> &[ObservationTerms] {
        &self.terms
    }

    pub fn blocks(&self) -> &[PmaBlock] {
        &self.blocks
    }

    pub fn independent(&self) -> &[usize] {
        &self.independent
    }

    pub fn outlier_ids(&self) -> &[u64] {
        &self.outlier_ids
    }

    pub fn n_outliers(&self) -> usize {
        self.outlier_ids.len()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    fn check_params(&self, params: &DataModelParams) -> Result<(), DataModelError> {
        if params.local_scale.len() != self.outlier_ids.len() {
            return Err(DataModelError::LocalScaleCount {
                expected: self.outlier_ids.len(),
                got: params.local_scale.len(),
            });
        }
        Ok(())
    }

    fn check_grid(&self, eta: &[f64]) -> Result<(), DataModelError> {
        if eta.len() != self.shape.len() {
            return Err(DataModelError::GridSize {
                expected: self.shape.len(),
                got: eta.len(),
            });
        }
        Ok(())
    }
}

/// Regularized horseshoe scale `τ ϑ γ / sqrt(ϑ² + τ² γ²)`.
pub fn horseshoe_scale(tau: f64, slab: f64, gamma: f64) -> f64 {
    let a = tau * gamma;
    if a == 0.0 {
        return 0.0;
    }
    if a.is_infinite() {
        return slab;
    }
    slab * (a / slab.hypot(a))
}

/// Derivatives of the squared horseshoe scale with respect to `(τ, ϑ, γ)`.
fn horseshoe_variance_grad(tau: f64, slab: f64, gamma: f64) -> (f64, f64, f64) {
    let a = tau * gamma;
    let b = slab * slab;
    let denom = b + a * a;
    let d_a = 2.0 * a * b * b / (denom * denom);
    let a2 = a * a;
    let d_slab = 2.0 * slab * a2 * a2 / (denom * denom);
    (d_a * gamma, d_slab, d_a * tau)
}

/// Sum of the active component variances of one observation.
pub fn total_error_variance(terms: &ObservationTerms, params: &DataModelParams) -> f64 {
    let mut v = terms.sampling_variance;
    if let Some(k) = terms.source {
        v += params.source_scale[k] * params.source_scale[k];
    }
    if terms.char_mismatch {
        v += params.char_scale * params.char_scale;
    }
    if let Some(k) = terms.outlier {
        let h = horseshoe_scale(params.tau, params.slab, params.local_scale[k]);
        v += h * h;
    }
    v
}

pub fn total_error_sd(terms: &ObservationTerms, params: &DataModelParams) -> f64 {
    total_error_variance(terms, params).sqrt()
}

/// Row-major `n × n` covariance of a PMA block.
pub fn build_covariance(block: &PmaBlock, structure: &ErrorStructure, params: &DataModelParams) -> Vec<f64> {
    let sds: Vec<f64> = block
        .members
        .iter()
        .map(|&i| total_error_sd(&structure.terms[i], params))
        .collect();
    let years: Vec<i32> = block.members.iter().map(|&i| structure.terms[i].year).collect();
    covariance_from_sds(&sds, &years, params.rho_pma)
}

fn covariance_from_sds(sds: &[f64], years: &[i32], rho: f64) -> Vec<f64> {
    let n = sds.len();
    let mut cov = vec![0.0; n * n];
    for j in 0..n {
        cov[j * n + j] = sds[j] * sds[j];
        for l in 0..j {
            let lag = (years[j] - years[l]).unsigned_abs() as i32;
            let c = sds[j] * sds[l] * rho.powi(lag);
            cov[j * n + l] = c;
            cov[l * n + j] = c;
        }
    }
    cov
}

/// Gradient of the data log density with respect to the latent grid and the
/// constrained data-model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DataGradient {
    pub eta: Vec<f64>,
    pub source_scale: [f64; 4],
    pub char_scale: f64,
    pub tau: f64,
    pub slab: f64,
    pub local_scale: Vec<f64>,
    pub rho_pma: f64,
}

impl DataGradient {
    pub fn zeros(structure: &ErrorStructure) -> Self {
        Self {
            eta: vec![0.0; structure.shape.len()],
            source_scale: [0.0; 4],
            char_scale: 0.0,
            tau: 0.0,
            slab: 0.0,
            local_scale: vec![0.0; structure.n_outliers()],
            rho_pma: 0.0,
        }
    }
}

/// Log density of all transformed observations given the latent grid.
pub fn data_log_density(
    structure: &ErrorStructure,
    eta: &[f64],
    params: &DataModelParams,
) -> Result<f64, DataModelError> {
    evaluate(structure, eta, params, None)
}

/// [`data_log_density`] plus its gradient, which is accumulated into `grad`.
pub fn data_log_density_grad(
    structure: &ErrorStructure,
    eta: &[f64],
    params: &DataModelParams,
    grad: &mut DataGradient,
) -> Result<f64, DataModelError> {
    evaluate(structure, eta, params, Some(grad))
}

fn evaluate(
    structure: &ErrorStructure,
    eta: &[f64],
    params: &DataModelParams,
    mut grad: Option<&mut DataGradient>,
) -> Result<f64, DataModelError> {
    structure.check_grid(eta)?;
    structure.check_params(params)?;
    let terms = &structure.terms;
    let mut logp = 0.0;

    for &i in &structure.independent {
        let t = &terms[i];
        let var = total_error_variance(t, params);
        if !(var > 0.0) {
            return Err(DataModelError::DegenerateVariance(t.id));
        }
        let r = t.z - eta[t.cell];
        logp += -LN_SQRT_2PI - 0.5 * var.ln() - 0.5 * r * r / var;
        if let Some(g) = grad.as_deref_mut() {
            g.eta[t.cell] += r / var;
            let d_var = 0.5 * (r * r / var - 1.0) / var;
            push_variance_grad(t, params, d_var, g);
        }
    }

    for block in &structure.blocks {
        logp += block_log_density(block, structure, eta, params, grad.as_deref_mut())?;
    }
    Ok(logp)
}

fn block_log_density(
    block: &PmaBlock,
    structure: &ErrorStructure,
    eta: &[f64],
    params: &DataModelParams,
    grad: Option<&mut DataGradient>,
) -> Result<f64, DataModelError> {
    let terms = &structure.terms;
    let n = block.members.len();
    let vars: Vec<f64> = block
        .members
        .iter()
        .map(|&i| total_error_variance(&terms[i], params))
        .collect();
    if let Some(pos) = vars.iter().position(|v| !(*v > 0.0)) {
        return Err(DataModelError::DegenerateVariance(terms[block.members[pos]].id));
    }
    let sds: Vec<f64> = vars.iter().map(|v| v.sqrt()).collect();
    let years: Vec<i32> = block.members.iter().map(|&i| terms[i].year).collect();
    let cov = covariance_from_sds(&sds, &years, params.rho_pma);

    let mut chol = cov;
    linalg::cholesky_in_place(&mut chol, n).map_err(|_| DataModelError::NotPositiveDefinite {
        population: block.population.clone(),
        series: block.series.clone(),
    })?;
    let resid: Vec<f64> = block
        .members
        .iter()
        .map(|&i| terms[i].z - eta[terms[i].cell])
        .collect();
    let mut white = resid.clone();
    linalg::forward_substitute(&chol, n, &mut white);
    let quad: f64 = white.iter().map(|w| w * w).sum();
    let log_det: f64 = (0..n).map(|j| chol[j * n + j].ln()).sum::<f64>() * 2.0;
    let logp = -(n as f64) * LN_SQRT_2PI - 0.5 * log_det - 0.5 * quad;

    let Some(g) = grad else {
        return Ok(logp);
    };

    // α = Σ⁻¹ r
    let mut alpha = white;
    linalg::backward_substitute_transpose(&chol, n, &mut alpha);
    let inv = linalg::inverse_from_cholesky(&chol, n);
    // ∂logp/∂Σ_ab = ½(α_a α_b − Σ⁻¹_ab)
    let dcov = |a: usize, b: usize| 0.5 * (alpha[a] * alpha[b] - inv[a * n + b]);
    let rho = params.rho_pma;

    for (j, &i) in block.members.iter().enumerate() {
        g.eta[terms[i].cell] += alpha[j];
        let mut d_sd = 0.0;
        for l in 0..n {
            let lag = (years[j] - years[l]).unsigned_abs() as i32;
            d_sd += 2.0 * dcov(j, l) * sds[l] * rho.powi(lag);
        }
        push_variance_grad(&terms[i], params, d_sd / (2.0 * sds[j]), g);
    }
    for j in 0..n {
        for l in 0..n {
            if j == l {
                continue;
            }
            let lag = (years[j] - years[l]).unsigned_abs() as i32;
            g.rho_pma += dcov(j, l) * sds[j] * sds[l] * f64::from(lag) * rho.powi(lag - 1);
        }
    }
    Ok(logp)
}

/// Chain rule from `∂logp/∂σ_i²` to the parameters behind that variance.
fn push_variance_grad(t: &ObservationTerms, params: &DataModelParams, d_var: f64, g: &mut DataGradient) {
    if let Some(k) = t.source {
        g.source_scale[k] += d_var * 2.0 * params.source_scale[k];
    }
    if t.char_mismatch {
        g.char_scale += d_var * 2.0 * params.char_scale;
    }
    if let Some(k) = t.outlier {
        let (d_tau, d_slab, d_gamma) = horseshoe_variance_grad(params.tau, params.slab, params.local_scale[k]);
        g.tau += d_var * d_tau;
        g.slab += d_var * d_slab;
        g.local_scale[k] += d_var * d_gamma;
    }
}

/// Log prior of the data-model parameters: half-normal source and
/// characteristic scales, half-Cauchy `τ` and local scales, half-normal slab
/// and a uniform PMA correlation.
pub fn datamodel_log_prior(params: &DataModelParams, priors: &PriorConfig) -> f64 {
    datamodel_log_prior_grad(params, priors, None)
}

/// Log prior with its gradient accumulated into `grad` when given.
pub fn datamodel_log_prior_grad(
    params: &DataModelParams,
    priors: &PriorConfig,
    mut grad: Option<&mut DataGradient>,
) -> f64 {
    if !(params.rho_pma > 0.0 && params.rho_pma < 1.0) {
        return f64::NEG_INFINITY;
    }
    let mut lp = 0.0;
    for (k, &s) in params.source_scale.iter().enumerate() {
        lp += half_normal_logpdf(s, priors.source_sd);
        if let Some(g) = grad.as_deref_mut() {
            g.source_scale[k] -= s / (priors.source_sd * priors.source_sd);
        }
    }
    lp += half_normal_logpdf(params.char_scale, priors.char_sd);
    lp += half_cauchy_logpdf(params.tau, priors.tau_scale);
    lp += half_normal_logpdf(params.slab, priors.slab_sd);
    for &gamma in &params.local_scale {
        lp += half_cauchy_logpdf(gamma, priors.local_scale);
    }
    if let Some(g) = grad {
        g.char_scale -= params.char_scale / (priors.char_sd * priors.char_sd);
        g.tau -= 2.0 * params.tau / (priors.tau_scale * priors.tau_scale + params.tau * params.tau);
        g.slab -= params.slab / (priors.slab_sd * priors.slab_sd);
        let s2 = priors.local_scale * priors.local_scale;
        for (gl, &gamma) in g.local_scale.iter_mut().zip(&params.local_scale) {
            *gl -= 2.0 * gamma / (s2 + gamma * gamma);
        }
    }
    lp
}

/// Error family for posterior predictive error draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorType {
    Source(SourceType),
    Outlier,
}

impl std::str::FromStr for ErrorType {
    type Err = DataModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("outlier") {
            return Ok(ErrorType::Outlier);
        }
        match s.parse::<SourceType>() {
            Ok(SourceType::Dhs) | Err(_) => Err(DataModelError::UnknownErrorType(s.to_string())),
            Ok(src) => Ok(ErrorType::Source(src)),
        }
    }
}

/// Draws errors from the posterior predictive of one error family. For a
/// source type the error is `N(0, σ̃_d²)`; for outliers a fresh local scale
/// `γ ~ C⁺(0, 1)` is drawn before `N(0, horseshoe(τ, ϑ, γ)²)`.
pub fn predictive_error_samples(
    draws: &PosteriorDraws,
    error_type: ErrorType,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>, DataModelError> {
    let column = |name: String| {
        draws
            .pooled(&name)
            .ok_or(DataModelError::MissingParameter(name))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cauchy = Cauchy::new(0.0, 1.0).expect("unit Cauchy");
    match error_type {
        ErrorType::Source(SourceType::Dhs) => Err(DataModelError::UnknownErrorType("DHS".into())),
        ErrorType::Source(src) => {
            let scale = column(format!("source_scale[{src}]"))?;
            if scale.is_empty() {
                return Err(DataModelError::MissingParameter(format!("source_scale[{src}]")));
            }
            Ok((0..n)
                .map(|_| {
                    let s = scale[rng.random_range(0..scale.len())];
                    normal_draw(&mut rng, s)
                })
                .collect())
        }
        ErrorType::Outlier => {
            let tau = column("tau".into())?;
            let slab = column("slab".into())?;
            if tau.is_empty() {
                return Err(DataModelError::MissingParameter("tau".into()));
            }
            Ok((0..n)
                .map(|_| {
                    let k = rng.random_range(0..tau.len());
                    let gamma: f64 = cauchy.sample(&mut rng);
                    normal_draw(&mut rng, horseshoe_scale(tau[k], slab[k], gamma.abs()))
                })
                .collect())
        }
    }
}

fn normal_draw(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    let z: f64 = Normal::new(0.0, 1.0).expect("standard normal").sample(rng);
    sd * z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Indicator;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn params() -> DataModelParams {
        DataModelParams {
            source_scale: [0.19, 0.1, 0.015, 0.2],
            char_scale: 0.1,
            tau: 0.04,
            slab: 0.5,
            local_scale: vec![],
            rho_pma: 0.8,
        }
    }

    fn terms(sampling_variance: f64, source: Option<usize>) -> ObservationTerms {
        ObservationTerms {
            id: 1,
            cell: 0,
            year: 2000,
            z: 0.0,
            sampling_variance,
            source,
            char_mismatch: false,
            outlier: None,
        }
    }

    fn observation(id: u64, year: i32, source: SourceType, series: Option<&str>) -> Observation {
        Observation {
            id,
            population: "A".into(),
            year,
            indicator: Indicator::PrimaryProportion,
            value: 0.3,
            sampling_variance: Some(4e-4),
            effective_sample_size: None,
            source_type: source,
            char_mismatch: false,
            documented_concern: false,
            pma_series_id: series.map(str::to_string),
        }
    }

    #[test]
    fn horseshoe_limits() {
        assert_eq!(horseshoe_scale(0.04, 1.0, 0.0), 0.0);
        assert_abs_diff_eq!(horseshoe_scale(0.04, 1.0, 1e9), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(horseshoe_scale(0.1, 0.5, 5.0), 0.125f64.sqrt(), epsilon = 1e-12);
        assert_eq!(horseshoe_scale(0.1, 0.5, f64::INFINITY), 0.5);
        assert_eq!(horseshoe_scale(0.0, 0.5, 3.0), 0.0);
        // τγ = ϑ
        assert_abs_diff_eq!(horseshoe_scale(0.2, 0.6, 3.0), 0.6 / 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn total_sd_examples() {
        let p = params();
        assert_abs_diff_eq!(total_error_sd(&terms(0.01, None), &p), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(total_error_sd(&terms(0.01, Some(0)), &p), 0.0461f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(total_error_sd(&terms(0.01, Some(0)), &p), 0.21471, epsilon = 5e-6);

        let mut with_zero_gamma = p.clone();
        with_zero_gamma.local_scale = vec![0.0];
        let mut flagged = terms(0.01, Some(2));
        let plain = total_error_sd(&flagged, &with_zero_gamma);
        flagged.outlier = Some(0);
        assert_eq!(total_error_sd(&flagged, &with_zero_gamma), plain);
    }

    #[test]
    fn covariance_examples() {
        let data = vec![
            observation(1, 2010, SourceType::Pma, Some("s")),
            observation(2, 2012, SourceType::Pma, Some("s")),
        ];
        let shape = GridShape::new(vec!["A".into()], 2010, 3);
        let s = ErrorStructure::build(&data, &shape, &BTreeSet::new()).unwrap();
        assert_eq!(s.blocks().len(), 1);
        assert!(s.independent().is_empty());

        // tune the PMA scale so each total sd is exactly 0.1
        let sampling = s.terms()[0].sampling_variance;
        let mut p = params();
        p.source_scale[1] = (0.01 - sampling).sqrt();
        let cov = build_covariance(&s.blocks()[0], &s, &p);
        assert_abs_diff_eq!(cov[0], 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(cov[1], 0.0064, epsilon = 1e-15);
        assert_eq!(cov[1], cov[2]);

        let single = ErrorStructure::build(&data[..1], &shape, &BTreeSet::new()).unwrap();
        let cov = build_covariance(&single.blocks()[0], &single, &p);
        assert_eq!(cov.len(), 1);
        assert_abs_diff_eq!(cov[0], 0.01, epsilon = 1e-15);

        let three = vec![
            observation(1, 2010, SourceType::Pma, Some("s")),
            observation(2, 2011, SourceType::Pma, Some("s")),
            observation(3, 2012, SourceType::Pma, Some("s")),
        ];
        let s3 = ErrorStructure::build(&three, &shape, &BTreeSet::new()).unwrap();
        p.rho_pma = 1e-12;
        let cov = build_covariance(&s3.blocks()[0], &s3, &p);
        for j in 0..3 {
            for l in 0..3 {
                if j != l {
                    assert!(cov[j * 3 + l].abs() <= 1e-11 * cov[0]);
                }
            }
        }
    }

    #[test]
    fn structure_partitions_observations() {
        let data = vec![
            observation(1, 2010, SourceType::Pma, Some("s")),
            observation(2, 2011, SourceType::Dhs, None),
            observation(3, 2009, SourceType::Pma, Some("s")),
            observation(4, 2011, SourceType::Pma, Some("t")),
        ];
        let shape = GridShape::new(vec!["A".into()], 2009, 3);
        let out: BTreeSet<u64> = [4, 2].into_iter().collect();
        let s = ErrorStructure::build(&data, &shape, &out).unwrap();
        assert_eq!(s.independent(), &[1]);
        assert_eq!(s.blocks().len(), 2);
        assert_eq!(s.blocks()[0].members, vec![2, 0]);
        assert_eq!(s.blocks()[1].members, vec![3]);
        assert_eq!(s.outlier_ids(), &[2, 4]);
        let mut seen: Vec<usize> = s.independent().to_vec();
        seen.extend(s.blocks().iter().flat_map(|b| b.members.iter().copied()));
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn structure_rejects_bad_input() {
        let shape = GridShape::new(vec!["A".into()], 2009, 3);
        let dup = vec![
            observation(1, 2010, SourceType::Pma, Some("s")),
            observation(2, 2010, SourceType::Pma, Some("s")),
        ];
        assert!(matches!(
            ErrorStructure::build(&dup, &shape, &BTreeSet::new()),
            Err(DataModelError::DuplicatePmaRound { year: 2010, .. })
        ));
        let outside = vec![observation(1, 2020, SourceType::Dhs, None)];
        assert!(matches!(
            ErrorStructure::build(&outside, &shape, &BTreeSet::new()),
            Err(DataModelError::OutsideGrid { id: 1, .. })
        ));
    }

    fn single_structure(z: f64, sampling_variance: f64) -> ErrorStructure {
        ErrorStructure {
            shape: GridShape::new(vec!["A".into()], 2000, 1),
            terms: vec![ObservationTerms {
                z,
                ..terms(sampling_variance, None)
            }],
            blocks: vec![],
            independent: vec![0],
            outlier_ids: vec![],
        }
    }

    #[test]
    fn density_of_unit_residual_free_observation() {
        let s = single_structure(0.3, 1.0);
        let lp = data_log_density(&s, &[0.3], &params()).unwrap();
        assert_abs_diff_eq!(lp, -0.5 * (2.0 * PI).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(lp, -0.918939, epsilon = 5e-7);
    }

    #[test]
    fn doubling_sds_costs_n_ln2() {
        let data = vec![
            observation(1, 2010, SourceType::Pma, Some("s")),
            observation(2, 2011, SourceType::Pma, Some("s")),
            observation(3, 2011, SourceType::Dhs, None),
            observation(4, 2009, SourceType::Mics, None),
        ];
        let shape = GridShape::new(vec!["A".into()], 2009, 3);
        let mut s = ErrorStructure::build(&data, &shape, &BTreeSet::new()).unwrap();
        let mut eta = vec![0.0; 3];
        for t in &s.terms {
            eta[t.cell] = t.z;
        }
        let mut p = params();
        let base = data_log_density(&s, &eta, &p).unwrap();
        for t in &mut s.terms {
            t.sampling_variance *= 4.0;
        }
        p.source_scale.iter_mut().for_each(|v| *v *= 2.0);
        let doubled = data_log_density(&s, &eta, &p).unwrap();
        assert_abs_diff_eq!(base - doubled, 4.0 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn zero_variance_is_reported() {
        let s = single_structure(0.0, 0.0);
        assert_eq!(
            data_log_density(&s, &[0.0], &params()),
            Err(DataModelError::DegenerateVariance(1))
        );
    }

    #[test]
    fn prior_at_mode() {
        let p = DataModelParams {
            source_scale: [0.0; 4],
            char_scale: 0.0,
            tau: 0.0,
            slab: 0.0,
            local_scale: vec![],
            rho_pma: 0.5,
        };
        let priors = PriorConfig::default();
        let hn = |sd: f64| (2.0 / (sd * (2.0 * PI).sqrt())).ln();
        let expected = 5.0 * hn(0.5) + (2.0 / (PI * 0.04)).ln() + hn(1.0);
        assert_abs_diff_eq!(datamodel_log_prior(&p, &priors), expected, epsilon = 1e-12);

        let mut outside = p.clone();
        outside.rho_pma = 1.5;
        assert_eq!(datamodel_log_prior(&outside, &priors), f64::NEG_INFINITY);

        let mut with_gamma = p.clone();
        with_gamma.local_scale.push(1.0);
        let delta = datamodel_log_prior(&with_gamma, &priors) - datamodel_log_prior(&p, &priors);
        assert_abs_diff_eq!(delta, (1.0 / PI).ln(), epsilon = 1e-14);

        let mut negative = p.clone();
        negative.char_scale = -0.1;
        assert_eq!(datamodel_log_prior(&negative, &priors), f64::NEG_INFINITY);
    }

    #[test]
    fn prior_gradient_matches_differences() {
        let priors = PriorConfig::default();
        let p = DataModelParams {
            local_scale: vec![0.7, 2.5],
            ..params()
        };
        let shape = GridShape::new(vec!["A".into()], 2000, 1);
        let structure = ErrorStructure {
            shape,
            terms: vec![],
            blocks: vec![],
            independent: vec![],
            outlier_ids: vec![1, 2],
        };
        let mut g = DataGradient::zeros(&structure);
        datamodel_log_prior_grad(&p, &priors, Some(&mut g));
        let h = 1e-6;
        let fd = |bump: &dyn Fn(&mut DataModelParams, f64)| {
            let mut up = p.clone();
            bump(&mut up, h);
            let mut down = p.clone();
            bump(&mut down, -h);
            (datamodel_log_prior(&up, &priors) - datamodel_log_prior(&down, &priors)) / (2.0 * h)
        };
        assert_abs_diff_eq!(g.tau, fd(&|q, d| q.tau += d), epsilon = 1e-5);
        assert_abs_diff_eq!(g.slab, fd(&|q, d| q.slab += d), epsilon = 1e-6);
        assert_abs_diff_eq!(g.char_scale, fd(&|q, d| q.char_scale += d), epsilon = 1e-6);
        assert_abs_diff_eq!(g.source_scale[0], fd(&|q, d| q.source_scale[0] += d), epsilon = 1e-6);
        assert_abs_diff_eq!(g.local_scale[1], fd(&|q, d| q.local_scale[1] += d), epsilon = 1e-6);
    }

    #[test]
    fn parses_error_types() {
        assert_eq!("outlier".parse::<ErrorType>().unwrap(), ErrorType::Outlier);
        assert_eq!(
            "National".parse::<ErrorType>().unwrap(),
            ErrorType::Source(SourceType::National)
        );
        assert!("DHS".parse::<ErrorType>().is_err());
        assert!("bias".parse::<ErrorType>().is_err());
    }

    proptest! {
        #[test]
        fn horseshoe_monotone_and_bounded(
            tau in 1e-3f64..2.0,
            slab in 1e-2f64..3.0,
            g1 in 1e-4f64..1e4,
            bump in 1e-3f64..10.0,
        ) {
            let a = horseshoe_scale(tau, slab, g1);
            let b = horseshoe_scale(tau, slab, g1 * (1.0 + bump));
            prop_assert!(b > a);
            prop_assert!(b < slab);
        }

        #[test]
        fn variance_is_additive(
            samp in 0.0f64..0.1,
            src in 0.0f64..0.5,
            chr in 0.0f64..0.5,
            gamma in 0.0f64..50.0,
        ) {
            let mut p = params();
            p.source_scale[2] = src;
            p.char_scale = chr;
            p.local_scale = vec![gamma];
            let all = ObservationTerms {
                char_mismatch: true,
                outlier: Some(0),
                ..terms(samp, Some(2))
            };
            let h = horseshoe_scale(p.tau, p.slab, gamma);
            let expected = samp + src * src + chr * chr + h * h;
            prop_assert!((total_error_variance(&all, &p) - expected).abs() <= 1e-15 * expected.max(1.0));
            let bare = terms(samp, None);
            prop_assert_eq!(total_error_sd(&bare, &p), samp.sqrt());
        }
    }
}

//! Synthetic datasets from the generative model, and brute-force oracles
//! for the likelihood and gradients.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::DataModelParams;
use crate::domain::{inv_logit, transform_observation, GridShape, Indicator, LatentGrid, Observation, SourceType};
use crate::stats::LN_SQRT_2PI;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid design: {0}")]
    Design(String),
    #[error("no {source_type} observation in population {population}, year {year} to inject into")]
    NoInjectionTarget {
        population: usize,
        year: i32,
        source_type: SourceType,
    },
    #[error("matrix is not positive definite (pivot {0})")]
    NotPositiveDefinite(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("generated value for observation {0} left (0, 1) numerically")]
    Saturated(u64),
}

/// Observations per population for each source type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceCounts {
    pub dhs: usize,
    pub mics: usize,
    pub national: usize,
    pub other: usize,
    /// Consecutive annual rounds of one PMA series.
    pub pma: usize,
}

impl Default for SourceCounts {
    fn default() -> Self {
        Self {
            dhs: 3,
            mics: 2,
            national: 3,
            other: 0,
            pma: 5,
        }
    }
}

/// Second-order random walk truth: start level, initial slope and
/// second-difference sd, all on the logit scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrueProcess {
    pub level_mean: f64,
    pub level_sd: f64,
    pub slope_mean: f64,
    pub slope_sd: f64,
    pub smoothing_sd: f64,
}

impl Default for TrueProcess {
    fn default() -> Self {
        Self {
            level_mean: -1.0,
            level_sd: 0.5,
            slope_mean: 0.08,
            slope_sd: 0.04,
            smoothing_sd: 0.02,
        }
    }
}

/// True data-model scales. Outlier errors use `tau` and `slab` with fresh
/// `γ ~ C⁺(0, 1)` per observation from `outlier_sources`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrueDataParams {
    pub mics: f64,
    pub pma: f64,
    pub national: f64,
    pub other: f64,
    pub char_scale: f64,
    pub tau: f64,
    pub slab: f64,
    pub rho_pma: f64,
}

impl Default for TrueDataParams {
    fn default() -> Self {
        Self {
            mics: 0.19,
            pma: 0.10,
            national: 0.015,
            other: 0.2,
            char_scale: 0.1,
            tau: 0.04,
            slab: 0.5,
            rho_pma: 0.8,
        }
    }
}

impl TrueDataParams {
    pub fn source_scale(&self) -> [f64; 4] {
        [self.mics, self.pma, self.national, self.other]
    }
}

/// A logit-scale shift added to one observation after its errors are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    /// Zero-based population index.
    pub population: usize,
    pub year: i32,
    pub source: SourceType,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimDesign {
    pub populations: usize,
    pub first_year: i32,
    pub years: usize,
    pub counts: SourceCounts,
    /// Logit-scale sampling sd attached to every observation.
    pub sampling_sd: f64,
    /// Probability that a non-DHS observation carries the characteristic error.
    pub char_mismatch_rate: f64,
    pub data: TrueDataParams,
    pub process: TrueProcess,
    /// Explicit true curves, one row per population; overrides `process`.
    pub eta_curves: Option<Vec<Vec<f64>>>,
    pub outlier_sources: Vec<SourceType>,
    pub injections: Vec<Injection>,
    pub seed: u64,
}

impl Default for SimDesign {
    fn default() -> Self {
        Self {
            populations: 3,
            first_year: 2000,
            years: 15,
            counts: SourceCounts::default(),
            sampling_sd: 0.1,
            char_mismatch_rate: 0.0,
            data: TrueDataParams::default(),
            process: TrueProcess::default(),
            eta_curves: None,
            outlier_sources: Vec::new(),
            injections: Vec::new(),
            seed: 1,
        }
    }
}

impl SimDesign {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: String| Err(SimError::Design(m));
        if self.populations == 0 || self.years == 0 {
            return fail("populations and years must be positive".into());
        }
        let c = &self.counts;
        for (name, n) in [("dhs", c.dhs), ("mics", c.mics), ("national", c.national), ("other", c.other), ("pma", c.pma)] {
            if n > self.years {
                return fail(format!("{name} count {n} exceeds the {} grid years", self.years));
            }
        }
        if c.dhs + c.mics + c.national + c.other + c.pma == 0 {
            return fail("design has no observations".into());
        }
        let d = &self.data;
        let scales = [
            ("sampling_sd", self.sampling_sd),
            ("mics", d.mics),
            ("pma", d.pma),
            ("national", d.national),
            ("other", d.other),
            ("char_scale", d.char_scale),
            ("tau", d.tau),
            ("slab", d.slab),
            ("level_sd", self.process.level_sd),
            ("slope_sd", self.process.slope_sd),
            ("smoothing_sd", self.process.smoothing_sd),
        ];
        for (name, v) in scales {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&d.rho_pma) {
            return fail(format!("rho_pma must lie in [0, 1), got {}", d.rho_pma));
        }
        if !(0.0..=1.0).contains(&self.char_mismatch_rate) {
            return fail("char_mismatch_rate must lie in [0, 1]".into());
        }
        if !(self.process.level_mean.is_finite() && self.process.slope_mean.is_finite()) {
            return fail("process means must be finite".into());
        }
        if let Some(curves) = &self.eta_curves {
            if curves.len() != self.populations || curves.iter().any(|c| c.len() != self.years) {
                return fail("eta_curves must have one row of `years` values per population".into());
            }
            if curves.iter().flatten().any(|v| !v.is_finite()) {
                return fail("eta_curves must be finite".into());
            }
        }
        if self.outlier_sources.contains(&SourceType::Dhs) {
            return fail("DHS cannot carry outlier errors".into());
        }
        for inj in &self.injections {
            if !inj.shift.is_finite() {
                return fail("injection shifts must be finite".into());
            }
            if inj.population >= self.populations {
                return fail(format!("injection population {} out of range", inj.population));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> GridShape {
        GridShape::new(population_names(self.populations), self.first_year, self.years)
    }
}

/// Zero-padded population labels `P01`, `P02`, ...
pub fn population_names(n: usize) -> Vec<String> {
    let width = n.to_string().len().max(2);
    (1..=n).map(|i| format!("P{i:0width$}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub observations: Vec<Observation>,
    pub truth: LatentGrid,
    /// Total logit-scale error of each observation, including any injection.
    pub errors: Vec<f64>,
    /// True local scales of observations that drew an outlier error.
    pub local_scales: BTreeMap<u64, f64>,
}

impl SimDataset {
    pub fn true_params(design: &SimDesign) -> DataModelParams {
        DataModelParams {
            source_scale: design.data.source_scale(),
            char_scale: design.data.char_scale,
            tau: design.data.tau,
            slab: design.data.slab,
            local_scale: Vec::new(),
            rho_pma: design.data.rho_pma,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn true_curves(design: &SimDesign, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if let Some(curves) = &design.eta_curves {
        return curves.concat();
    }
    let p = &design.process;
    let mut eta = Vec::with_capacity(design.populations * design.years);
    for _ in 0..design.populations {
        let mut level = p.level_mean + p.level_sd * normal(rng);
        let mut slope = p.slope_mean + p.slope_sd * normal(rng);
        for _ in 0..design.years {
            eta.push(level);
            level += slope;
            slope += p.smoothing_sd * normal(rng);
        }
    }
    eta
}

struct Draft {
    population: usize,
    year_index: usize,
    source: SourceType,
    char_mismatch: bool,
}

/// Draws one dataset. Everything is a pure function of the design.
pub fn simulate_dataset(design: &SimDesign) -> Result<SimDataset, SimError> {
    design.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    let shape = design.shape();
    let eta = true_curves(design, &mut rng);

    let mut drafts = Vec::new();
    for c in 0..design.populations {
        let counts = design.counts;
        for (source, n) in [
            (SourceType::Dhs, counts.dhs),
            (SourceType::Mics, counts.mics),
            (SourceType::National, counts.national),
            (SourceType::Other, counts.other),
        ] {
            let mut years = sample_indices(&mut rng, design.years, n).into_vec();
            years.sort_unstable();
            for t in years {
                let char_mismatch = source != SourceType::Dhs && rng.random::<f64>() < design.char_mismatch_rate;
                drafts.push(Draft {
                    population: c,
                    year_index: t,
                    source,
                    char_mismatch,
                });
            }
        }
        if counts.pma > 0 {
            let start = rng.random_range(0..=design.years - counts.pma);
            for t in start..start + counts.pma {
                let char_mismatch = rng.random::<f64>() < design.char_mismatch_rate;
                drafts.push(Draft {
                    population: c,
                    year_index: t,
                    source: SourceType::Pma,
                    char_mismatch,
                });
            }
        }
    }

    let cauchy = Cauchy::new(0.0, 1.0).expect("unit Cauchy");
    let source_scale = design.data.source_scale();
    let mut local_scales = BTreeMap::new();
    let mut sds = Vec::with_capacity(drafts.len());
    for (i, d) in drafts.iter().enumerate() {
        let mut var = design.sampling_sd * design.sampling_sd;
        if let Some(k) = d.source.repeated_index() {
            var += source_scale[k] * source_scale[k];
        }
        if d.char_mismatch {
            var += design.data.char_scale * design.data.char_scale;
        }
        if design.outlier_sources.contains(&d.source) {
            let gamma = f64::abs(cauchy.sample(&mut rng));
            local_scales.insert(i as u64 + 1, gamma);
            let h = crate::datamodel::horseshoe_scale(design.data.tau, design.data.slab, gamma);
            var += h * h;
        }
        sds.push(var.sqrt());
    }

    let mut errors = vec![0.0; drafts.len()];
    let pma_groups: Vec<Vec<usize>> = (0..design.populations)
        .map(|c| {
            (0..drafts.len())
                .filter(|&i| drafts[i].population == c && drafts[i].source == SourceType::Pma)
                .collect()
        })
        .collect();
    for (i, d) in drafts.iter().enumerate() {
        if d.source != SourceType::Pma {
            errors[i] = sds[i] * normal(&mut rng);
        }
    }
    for members in pma_groups.iter().filter(|m| !m.is_empty()) {
        let n = members.len();
        let mut chol = vec![0.0; n * n];
        for (a, &i) in members.iter().enumerate() {
            for (b, &j) in members.iter().enumerate() {
                let lag = drafts[i].year_index.abs_diff(drafts[j].year_index) as i32;
                chol[a * n + b] = sds[i] * sds[j] * design.data.rho_pma.powi(lag);
            }
        }
        let white: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let correlated = if crate::linalg::cholesky_in_place(&mut chol, n).is_ok() {
            (0..n)
                .map(|a| (0..=a).map(|b| chol[a * n + b] * white[b]).sum())
                .collect()
        } else {
            // zero variances: every error is exactly zero
            vec![0.0; n]
        };
        for (&i, e) in members.iter().zip(correlated) {
            errors[i] = e;
        }
    }

    for inj in &design.injections {
        let target = drafts.iter().position(|d| {
            d.population == inj.population
                && shape.first_year + d.year_index as i32 == inj.year
                && d.source == inj.source
        });
        let Some(i) = target else {
            return Err(SimError::NoInjectionTarget {
                population: inj.population,
                year: inj.year,
                source_type: inj.source,
            });
        };
        errors[i] += inj.shift;
    }

    let mut observations = Vec::with_capacity(drafts.len());
    for (i, d) in drafts.iter().enumerate() {
        let id = i as u64 + 1;
        let value = inv_logit(eta[shape.cell(d.population, d.year_index)] + errors[i]);
        if !(value > 0.0 && value < 1.0) {
            return Err(SimError::Saturated(id));
        }
        let se = design.sampling_sd * value * (1.0 - value);
        observations.push(Observation {
            id,
            population: shape.populations[d.population].clone(),
            year: shape.first_year + d.year_index as i32,
            indicator: Indicator::PrimaryProportion,
            value,
            sampling_variance: Some(se * se),
            effective_sample_size: None,
            source_type: d.source,
            char_mismatch: d.char_mismatch,
            documented_concern: false,
            pma_series_id: (d.source == SourceType::Pma).then(|| "1".to_string()),
        });
    }

    Ok(SimDataset {
        observations,
        truth: LatentGrid::new(shape, eta),
        errors,
        local_scales,
    })
}

/// Textbook multivariate normal log density using Gaussian elimination for
/// the determinant and the solve. Positive definiteness is checked through
/// the elimination pivots.
pub fn dense_normal_logpdf(z: &[f64], mean: &[f64], cov: &[f64]) -> Result<f64, SimError> {
    let n = z.len();
    if mean.len() != n || cov.len() != n * n {
        return Err(SimError::Dimension(format!(
            "z has {n} entries, mean {}, cov {}",
            mean.len(),
            cov.len()
        )));
    }
    let mut a = cov.to_vec();
    let mut r: Vec<f64> = z.iter().zip(mean).map(|(z, m)| z - m).collect();
    let resid = r.clone();
    let mut log_det = 0.0;
    for k in 0..n {
        let pivot = a[k * n + k];
        if !(pivot > 0.0) {
            return Err(SimError::NotPositiveDefinite(k));
        }
        log_det += pivot.ln();
        for i in k + 1..n {
            let f = a[i * n + k] / pivot;
            for j in k..n {
                a[i * n + j] -= f * a[k * n + j];
            }
            r[i] -= f * r[k];
        }
    }
    // back substitution gives x = Σ⁻¹ (z − μ)
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i * n + j] * x[j]).sum();
        x[i] = (r[i] - s) / a[i * n + i];
    }
    let quad: f64 = resid.iter().zip(&x).map(|(r, x)| r * x).sum();
    Ok(-(n as f64) * LN_SQRT_2PI - 0.5 * log_det - 0.5 * quad)
}

/// Central differences of `f` at `v`, one coordinate at a time.
pub fn finite_difference_gradient<F: Fn(&[f64]) -> f64>(f: F, v: &[f64], step: f64) -> Vec<f64> {
    let mut x = v.to_vec();
    (0..v.len())
        .map(|i| {
            x[i] = v[i] + step;
            let up = f(&x);
            x[i] = v[i] - step;
            let down = f(&x);
            x[i] = v[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Data log density from one dense covariance over all observations, built
/// directly from the observation records.
pub fn dense_data_log_density(
    observations: &[Observation],
    shape: &GridShape,
    outlying: &BTreeSet<u64>,
    eta: &[f64],
    params: &DataModelParams,
) -> Result<f64, SimError> {
    let n = observations.len();
    let mut z = Vec::with_capacity(n);
    let mut mean = Vec::with_capacity(n);
    let mut sd = Vec::with_capacity(n);
    let mut local = params.local_scale.iter();
    for obs in observations {
        let t = transform_observation(obs).map_err(|e| SimError::Design(e.to_string()))?;
        let p = shape
            .population_index(&obs.population)
            .ok_or_else(|| SimError::Design(format!("population {} not in grid", obs.population)))?;
        let y = shape
            .year_index(obs.year)
            .ok_or_else(|| SimError::Design(format!("year {} not in grid", obs.year)))?;
        z.push(t.z);
        mean.push(eta[shape.cell(p, y)]);
        let mut var = t.logit_sampling_variance;
        var += match obs.source_type {
            SourceType::Dhs => 0.0,
            SourceType::Mics => params.source_scale[0].powi(2),
            SourceType::Pma => params.source_scale[1].powi(2),
            SourceType::National => params.source_scale[2].powi(2),
            SourceType::Other => params.source_scale[3].powi(2),
        };
        if obs.char_mismatch {
            var += params.char_scale.powi(2);
        }
        if outlying.contains(&obs.id) {
            let gamma = *local
                .next()
                .ok_or_else(|| SimError::Dimension("too few local scales".into()))?;
            let (tau, slab) = (params.tau, params.slab);
            var += (tau * tau * gamma * gamma * slab * slab) / (slab * slab + tau * tau * gamma * gamma);
        }
        sd.push(var.sqrt());
    }
    let mut cov = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (&observations[i], &observations[j]);
            if i == j {
                cov[i * n + j] = sd[i] * sd[i];
            } else if a.source_type == SourceType::Pma
                && b.source_type == SourceType::Pma
                && a.population == b.population
                && a.pma_series_id == b.pma_series_id
            {
                let lag = (a.year - b.year).abs();
                cov[i * n + j] = sd[i] * sd[j] * params.rho_pma.powi(lag);
            }
        }
    }
    dense_normal_logpdf(&z, &mean, &cov)
}

/// A random likelihood test case with at most `max_obs` observations mixing
/// independent sources and PMA series, its outlying set, grid and parameters.
#[derive(Debug, Clone)]
pub struct LikelihoodInstance {
    pub observations: Vec<Observation>,
    pub shape: GridShape,
    pub outlying: BTreeSet<u64>,
    pub eta: Vec<f64>,
    pub params: DataModelParams,
}

pub fn random_likelihood_instance(seed: u64, max_obs: usize) -> LikelihoodInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pop = rng.random_range(1..=3);
    let n_years = rng.random_range(3..=8);
    let shape = GridShape::new(population_names(n_pop), 2000, n_years);
    let eta: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(-2.5..1.5)).collect();
    let n_obs = rng.random_range(1..=max_obs.max(1));

    let mut observations = Vec::with_capacity(n_obs);
    let mut used_pma: BTreeSet<(usize, usize, i32)> = BTreeSet::new();
    let mut outlying = BTreeSet::new();
    while observations.len() < n_obs {
        let id = observations.len() as u64 + 1;
        let p = rng.random_range(0..n_pop);
        let source = SourceType::ALL[rng.random_range(0..SourceType::ALL.len())];
        let year = 2000 + rng.random_range(0..n_years) as i32;
        let series = if source == SourceType::Pma {
            let s = rng.random_range(0..2);
            if !used_pma.insert((p, s, year)) {
                continue;
            }
            Some(format!("s{s}"))
        } else {
            None
        };
        let value = rng.random_range(0.03..0.9);
        let (sampling_variance, effective_sample_size) = if rng.random::<f64>() < 0.7 {
            (Some(rng.random_range(1e-5..4e-4)), None)
        } else {
            (None, Some(rng.random_range(200.0..5000.0)))
        };
        if source != SourceType::Dhs && rng.random::<f64>() < 0.5 {
            outlying.insert(id);
        }
        observations.push(Observation {
            id,
            population: shape.populations[p].clone(),
            year,
            indicator: Indicator::PrimaryProportion,
            value,
            sampling_variance,
            effective_sample_size,
            source_type: source,
            char_mismatch: rng.random::<f64>() < 0.3,
            documented_concern: false,
            pma_series_id: series,
        });
    }
    let params = DataModelParams {
        source_scale: [0.0; 4].map(|_: f64| rng.random_range(0.005..0.5)),
        char_scale: rng.random_range(0.005..0.4),
        tau: rng.random_range(0.005..0.3),
        slab: rng.random_range(0.1..1.5),
        local_scale: (0..outlying.len()).map(|_| rng.random_range(0.01f64..50.0)).collect(),
        rho_pma: rng.random_range(0.01..0.98),
    };
    LikelihoodInstance {
        observations,
        shape,
        outlying,
        eta,
        params,
    }
}

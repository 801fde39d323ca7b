//! The joint posterior over the latent grid, the process parameters and the
//! data-model parameters, on unconstrained coordinates.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layout::{BlockSpec, ParamLayout, Transform, UnconstrainedVector};
use super::{InferenceError, LogDensity, PosteriorDraws};
use crate::datamodel::{
    data_log_density_grad, datamodel_log_prior_grad, total_error_sd, DataGradient, DataModelParams,
    ErrorStructure, PriorConfig,
};
use crate::domain::{GridShape, Observation, SourceType};
use crate::preprocess::{fit_longterm_trend, TrendPoint};
use crate::process::{process_model, ProcessModel};
use crate::stats::quantile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    pub priors: PriorConfig,
    pub process_model: String,
    /// When false the outlier term is dropped for every observation.
    pub outlier_term: bool,
    pub parameterization: Parameterization,
}

/// How the sampler sees the latent grid. Both describe the same posterior;
/// the non-centered form samples the process model's standardized
/// innovations, which avoids the funnel between small smoothing scales and
/// the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Centered,
    #[default]
    NonCentered,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            priors: PriorConfig::default(),
            process_model: "rw2".into(),
            outlier_term: true,
            parameterization: Parameterization::default(),
        }
    }
}

/// Column name of a latent grid cell.
pub fn eta_name(population: &str, year: i32) -> String {
    format!("eta[{population}:{year}]")
}

/// All model quantities on their natural scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedParams {
    pub eta: Vec<f64>,
    /// Flat process parameters in the process model's block order.
    pub process: Vec<f64>,
    pub data: DataModelParams,
}

/// The additive pieces of the log posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPosteriorTerms {
    pub data: f64,
    pub datamodel_prior: f64,
    pub process_prior: f64,
    pub log_jacobian: f64,
}

impl LogPosteriorTerms {
    pub fn total(&self) -> f64 {
        self.data + self.datamodel_prior + self.process_prior + self.log_jacobian
    }
}

#[derive(Debug)]
pub struct NosModel {
    structure: ErrorStructure,
    process: Box<dyn ProcessModel>,
    priors: PriorConfig,
    layout: ParamLayout,
    transforms: Vec<Transform>,
    eta: Range<usize>,
    process_range: Range<usize>,
    source: Range<usize>,
    char_scale: usize,
    tau: usize,
    slab: usize,
    local: Range<usize>,
    rho: usize,
    noncentered: bool,
    init_eta: Vec<f64>,
}

impl NosModel {
    /// `outlying` is the possibly-outlying set from preprocessing; it is
    /// ignored when the options switch the outlier term off.
    pub fn new(
        observations: &[Observation],
        shape: GridShape,
        outlying: &BTreeSet<u64>,
        options: &ModelOptions,
    ) -> Result<Self, InferenceError> {
        let empty = BTreeSet::new();
        let outlying = if options.outlier_term { outlying } else { &empty };
        let structure = ErrorStructure::build(observations, &shape, outlying)?;
        let process = process_model(&options.process_model)?;

        let cell_labels = shape
            .populations
            .iter()
            .flat_map(|p| shape.years().map(move |y| format!("{p}:{y}")))
            .collect();
        let mut specs = vec![BlockSpec::vector("eta", cell_labels, Transform::Identity)];
        let process_blocks = process.blocks(&shape);
        let process_names: Vec<String> = process_blocks.iter().map(|b| b.name.clone()).collect();
        specs.extend(process_blocks);
        let source_labels = SourceType::REPEATED.iter().map(|s| s.to_string()).collect();
        specs.push(BlockSpec::vector("source_scale", source_labels, Transform::Log));
        specs.push(BlockSpec::scalar("char_scale", Transform::Log));
        specs.push(BlockSpec::scalar("tau", Transform::Log));
        specs.push(BlockSpec::scalar("slab", Transform::Log));
        let local_labels = structure.outlier_ids().iter().map(u64::to_string).collect();
        specs.push(BlockSpec::vector("local_scale", local_labels, Transform::Log));
        specs.push(BlockSpec::scalar("rho_pma", Transform::Logit));
        let layout = ParamLayout::new(specs);

        let process_range = match (process_names.first(), process_names.last()) {
            (Some(first), Some(last)) => layout.range(first).start..layout.range(last).end,
            _ => {
                let at = layout.range("eta").end;
                at..at
            }
        };
        let init_eta = trend_start(&structure);
        Ok(Self {
            transforms: layout.transforms(),
            eta: layout.range("eta"),
            process_range,
            source: layout.range("source_scale"),
            char_scale: layout.range("char_scale").start,
            tau: layout.range("tau").start,
            slab: layout.range("slab").start,
            local: layout.range("local_scale"),
            rho: layout.range("rho_pma").start,
            noncentered: options.parameterization == Parameterization::NonCentered,
            layout,
            structure,
            process,
            priors: options.priors.clone(),
            init_eta,
        })
    }

    /// Model on the smallest grid covering the observations.
    pub fn from_observations(
        observations: &[Observation],
        outlying: &BTreeSet<u64>,
        options: &ModelOptions,
    ) -> Result<Self, InferenceError> {
        let shape = GridShape::covering(observations)
            .ok_or_else(|| InferenceError::Config("no observations to fit".into()))?;
        Self::new(observations, shape, outlying, options)
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn structure(&self) -> &ErrorStructure {
        &self.structure
    }

    pub fn shape(&self) -> &GridShape {
        self.structure.shape()
    }

    pub fn process(&self) -> &dyn ProcessModel {
        self.process.as_ref()
    }

    /// Splits a flat constrained vector into its named parts.
    pub fn params_from_flat(&self, x: &[f64]) -> ConstrainedParams {
        let mut source_scale = [0.0; 4];
        source_scale.copy_from_slice(&x[self.source.clone()]);
        ConstrainedParams {
            eta: x[self.eta.clone()].to_vec(),
            process: x[self.process_range.clone()].to_vec(),
            data: DataModelParams {
                source_scale,
                char_scale: x[self.char_scale],
                tau: x[self.tau],
                slab: x[self.slab],
                local_scale: x[self.local.clone()].to_vec(),
                rho_pma: x[self.rho],
            },
        }
    }

    pub fn flatten(&self, params: &ConstrainedParams) -> Vec<f64> {
        let mut x = vec![0.0; self.layout.dim()];
        x[self.eta.clone()].copy_from_slice(&params.eta);
        x[self.process_range.clone()].copy_from_slice(&params.process);
        x[self.source.clone()].copy_from_slice(&params.data.source_scale);
        x[self.char_scale] = params.data.char_scale;
        x[self.tau] = params.data.tau;
        x[self.slab] = params.data.slab;
        x[self.local.clone()].copy_from_slice(&params.data.local_scale);
        x[self.rho] = params.data.rho_pma;
        x
    }

    /// Replaces raw grid coordinates in a constrained flat vector by `η`,
    /// returning the log-Jacobian of that step.
    fn raw_to_latent(&self, x: &mut [f64]) -> f64 {
        if !self.noncentered {
            return 0.0;
        }
        let process = x[self.process_range.clone()].to_vec();
        self.process
            .raw_to_latent(self.structure.shape(), &process, &mut x[self.eta.clone()])
    }

    pub fn constrain(&self, u: &[f64]) -> (ConstrainedParams, f64) {
        let (mut x, log_jac) = self.layout.constrain(u);
        let reparam = self.raw_to_latent(&mut x);
        (self.params_from_flat(&x), log_jac + reparam)
    }

    pub fn unconstrain(&self, params: &ConstrainedParams) -> (UnconstrainedVector<'_>, f64) {
        let mut x = self.flatten(params);
        let mut reparam = 0.0;
        if self.noncentered {
            let shape = self.structure.shape();
            let raw = &mut x[self.eta.clone()];
            self.process.latent_to_raw(shape, &params.process, raw);
            reparam = self.process.raw_to_latent(shape, &params.process, &mut raw.to_vec());
        }
        let (values, log_jac) = self.layout.unconstrain(&x);
        (
            UnconstrainedVector {
                layout: &self.layout,
                values,
            },
            log_jac + reparam,
        )
    }

    fn check_input(&self, u: &[f64]) -> Result<(), InferenceError> {
        if u.len() != self.layout.dim() {
            return Err(InferenceError::Dimension {
                expected: self.layout.dim(),
                got: u.len(),
            });
        }
        if let Some(index) = u.iter().position(|v| !v.is_finite()) {
            return Err(InferenceError::NonFiniteInput {
                index,
                name: self.layout.names()[index].clone(),
            });
        }
        Ok(())
    }

    pub fn log_posterior_terms(&self, u: &[f64]) -> Result<LogPosteriorTerms, InferenceError> {
        self.evaluate(u, None)
    }

    pub fn log_posterior(&self, u: &[f64]) -> Result<f64, InferenceError> {
        Ok(self.log_posterior_terms(u)?.total())
    }

    /// Log posterior and its gradient with respect to `u`.
    pub fn gradient(&self, u: &[f64]) -> Result<(f64, Vec<f64>), InferenceError> {
        let mut grad = vec![0.0; self.layout.dim()];
        let lp = self.evaluate(u, Some(&mut grad))?.total();
        if lp.is_finite() {
            if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
                return Err(InferenceError::NonFiniteGradient {
                    index,
                    name: self.layout.names()[index].clone(),
                });
            }
        }
        Ok((lp, grad))
    }

    fn evaluate(&self, u: &[f64], grad: Option<&mut [f64]>) -> Result<LogPosteriorTerms, InferenceError> {
        self.check_input(u)?;
        let mut x = Vec::with_capacity(u.len());
        let mut log_jacobian = 0.0;
        for (&ui, t) in u.iter().zip(&self.transforms) {
            x.push(t.constrain(ui));
            log_jacobian += t.log_jacobian(ui);
        }
        let raw = self.noncentered.then(|| x[self.eta.clone()].to_vec());
        log_jacobian += self.raw_to_latent(&mut x);
        let params = self.params_from_flat(&x);
        let eta = &x[self.eta.clone()];
        let shape = self.structure.shape();

        let Some(grad) = grad else {
            let data = crate::datamodel::data_log_density(&self.structure, eta, &params.data)?;
            let datamodel_prior = datamodel_log_prior_grad(&params.data, &self.priors, None);
            let process_prior = self.process.log_prior(shape, eta, &params.process, None);
            return Ok(LogPosteriorTerms {
                data,
                datamodel_prior,
                process_prior,
                log_jacobian,
            });
        };

        let mut dg = DataGradient::zeros(&self.structure);
        let data = data_log_density_grad(&self.structure, eta, &params.data, &mut dg)?;
        let datamodel_prior = datamodel_log_prior_grad(&params.data, &self.priors, Some(&mut dg));
        let mut gp = vec![0.0; params.process.len()];
        let process_prior = self
            .process
            .log_prior(shape, eta, &params.process, Some((&mut dg.eta, &mut gp)));
        if let Some(raw) = &raw {
            self.process.pull_back(shape, &params.process, raw, &mut dg.eta, &mut gp);
        }

        grad[self.eta.clone()].copy_from_slice(&dg.eta);
        grad[self.process_range.clone()].copy_from_slice(&gp);
        grad[self.source.clone()].copy_from_slice(&dg.source_scale);
        grad[self.char_scale] = dg.char_scale;
        grad[self.tau] = dg.tau;
        grad[self.slab] = dg.slab;
        grad[self.local.clone()].copy_from_slice(&dg.local_scale);
        grad[self.rho] = dg.rho_pma;
        for ((g, t), &xi) in grad.iter_mut().zip(&self.transforms).zip(&x) {
            let (dx, dlj) = t.derivatives(xi);
            *g = *g * dx + dlj;
        }
        Ok(LogPosteriorTerms {
            data,
            datamodel_prior,
            process_prior,
            log_jacobian,
        })
    }

    /// Jittered start: trend-smoothed grid, small error scales.
    pub fn initial_params(&self, rng: &mut ChaCha8Rng) -> ConstrainedParams {
        let mut jitter = |scale: f64| scale * rng.random_range(-1.0f64..1.0);
        let eta: Vec<f64> = self.init_eta.iter().map(|e| e + jitter(0.1)).collect();
        let source_scale = [0.0; 4].map(|_: f64| 0.1 * jitter(0.5).exp());
        let data = DataModelParams {
            source_scale,
            char_scale: 0.1 * jitter(0.5).exp(),
            tau: 0.04 * jitter(0.5).exp(),
            slab: 0.5 * jitter(0.5).exp(),
            local_scale: (0..self.structure.n_outliers()).map(|_| jitter(1.0).exp()).collect(),
            rho_pma: 0.5 + jitter(0.2),
        };
        let process = self.process.initial_params(self.structure.shape(), &eta, rng);
        ConstrainedParams { eta, process, data }
    }

    /// Posterior median of each observation's total error sd, in input order.
    pub fn median_total_error_sd(&self, draws: &PosteriorDraws) -> Vec<(u64, f64)> {
        let mut per_obs: Vec<Vec<f64>> = vec![Vec::with_capacity(draws.total_draws()); self.structure.len()];
        let n = draws.n_params();
        for chain in &draws.chains {
            for row in chain.values.chunks_exact(n) {
                let params = self.params_from_flat(row);
                for (sds, terms) in per_obs.iter_mut().zip(self.structure.terms()) {
                    sds.push(total_error_sd(terms, &params.data));
                }
            }
        }
        self.structure
            .terms()
            .iter()
            .zip(per_obs)
            .map(|(t, sds)| (t.id, quantile(&sds, 0.5)))
            .collect()
    }
}

/// Per-population smoothed trend of the transformed observations.
fn trend_start(structure: &ErrorStructure) -> Vec<f64> {
    let shape = structure.shape();
    let mut points: Vec<Vec<TrendPoint>> = vec![Vec::new(); shape.n_populations()];
    for t in structure.terms() {
        points[t.cell / shape.n_years].push(TrendPoint {
            year: f64::from(t.year),
            z: t.z,
            logit_variance: t.sampling_variance,
        });
    }
    let mut eta = Vec::with_capacity(shape.len());
    for pts in &points {
        if pts.is_empty() {
            eta.extend(std::iter::repeat_n(0.0, shape.n_years));
            continue;
        }
        let trend = fit_longterm_trend(pts, 5.0);
        eta.extend(shape.years().map(|y| trend.evaluate(f64::from(y)).clamp(-6.0, 6.0)));
    }
    eta
}

impl LogDensity for NosModel {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> Result<f64, InferenceError> {
        let (lp, g) = self.gradient(u)?;
        grad.copy_from_slice(&g);
        Ok(lp)
    }

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let params = self.initial_params(rng);
        self.unconstrain(&params).0.values
    }

    fn param_names(&self) -> Vec<String> {
        self.layout.names()
    }

    fn to_output(&self, u: &[f64]) -> Vec<f64> {
        let mut x = self.layout.constrain(u).0;
        self.raw_to_latent(&mut x);
        x
    }

    fn grid(&self) -> Option<GridShape> {
        Some(self.shape().clone())
    }
}

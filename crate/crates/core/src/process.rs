//! Latent process models for the logit-scale indicator grid.
//!
//! The default model, `rw2`, is a second-order random walk per population:
//! a diffuse start `η_1 ~ N(level_c, 10²)`, a diffuse first difference
//! `η_2 - η_1 ~ N(0, 10²)` and second differences `N(0, λ_c²)` with
//! `λ_c ~ N⁺(0, s²)`, `s ~ N⁺(0, 1)`. Further models plug in through
//! [`ProcessModel`] and are looked up by name with [`process_model`].

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::domain::{GridShape, LatentGrid};
use crate::inference::layout::{BlockSpec, Transform};
use crate::stats::{half_normal_logpdf, normal_logpdf};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProcessError {
    #[error("unknown process model '{0}' (available: rw2)")]
    Unknown(String),
}

/// A prior over the latent grid with its own parameter blocks.
///
/// Parameters are passed as one flat, constrained vector laid out in the
/// order of [`ProcessModel::blocks`].
pub trait ProcessModel: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn blocks(&self, shape: &GridShape) -> Vec<BlockSpec>;

    /// Log prior density. When `grad` is given, derivatives with respect to the
    /// grid and the parameters are added into the two slices.
    fn log_prior(
        &self,
        shape: &GridShape,
        eta: &[f64],
        params: &[f64],
        grad: Option<(&mut [f64], &mut [f64])>,
    ) -> f64;

    /// A plausible constrained starting point given a starting grid.
    fn initial_params(&self, shape: &GridShape, eta: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64>;

    /// Maps sampler coordinates of the grid to `η` in place and returns
    /// `ln |∂η/∂raw|`. Models without a non-centered form keep the identity.
    fn raw_to_latent(&self, _shape: &GridShape, _params: &[f64], _values: &mut [f64]) -> f64 {
        0.0
    }

    /// Inverse of [`ProcessModel::raw_to_latent`].
    fn latent_to_raw(&self, _shape: &GridShape, _params: &[f64], _values: &mut [f64]) {}

    /// Turns `∂L/∂η` in `grad` into `∂L/∂raw` at `raw`, adding the parameter
    /// part, log-Jacobian included, into `grad_params`.
    fn pull_back(
        &self,
        _shape: &GridShape,
        _params: &[f64],
        _raw: &[f64],
        _grad: &mut [f64],
        _grad_params: &mut [f64],
    ) {
    }
}

pub fn process_model(name: &str) -> Result<Box<dyn ProcessModel>, ProcessError> {
    match name {
        "rw2" => Ok(Box::new(Rw2Process)),
        other => Err(ProcessError::Unknown(other.to_string())),
    }
}

const DIFFUSE_SD: f64 = 10.0;

/// Parameters of the second-order random walk.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessParams {
    pub level: Vec<f64>,
    pub smoothing_sd: Vec<f64>,
    pub smoothing_sd_scale: f64,
}

impl ProcessParams {
    pub fn from_flat(flat: &[f64], n_populations: usize) -> Self {
        assert_eq!(flat.len(), 2 * n_populations + 1, "rw2 parameter length");
        Self {
            level: flat[..n_populations].to_vec(),
            smoothing_sd: flat[n_populations..2 * n_populations].to_vec(),
            smoothing_sd_scale: flat[2 * n_populations],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = self.level.clone();
        flat.extend_from_slice(&self.smoothing_sd);
        flat.push(self.smoothing_sd_scale);
        flat
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Rw2Process;

impl ProcessModel for Rw2Process {
    fn name(&self) -> &'static str {
        "rw2"
    }

    fn blocks(&self, shape: &GridShape) -> Vec<BlockSpec> {
        let per_population =
            |name: &str, transform| BlockSpec::vector(name, shape.populations.clone(), transform);
        vec![
            per_population("level", Transform::Identity),
            per_population("smoothing_sd", Transform::Log),
            BlockSpec::scalar("smoothing_sd_scale", Transform::Log),
        ]
    }

    fn log_prior(
        &self,
        shape: &GridShape,
        eta: &[f64],
        params: &[f64],
        mut grad: Option<(&mut [f64], &mut [f64])>,
    ) -> f64 {
        let n_pop = shape.n_populations();
        let n_years = shape.n_years;
        let scale = params[2 * n_pop];
        let mut lp = half_normal_logpdf(scale, 1.0);
        if let Some((_, gp)) = grad.as_mut() {
            gp[2 * n_pop] -= scale;
        }

        for c in 0..n_pop {
            let row = &eta[c * n_years..(c + 1) * n_years];
            let level = params[c];
            let lambda = params[n_pop + c];
            lp += half_normal_logpdf(lambda, scale);
            let mut d_lambda = -lambda / (scale * scale);
            let d_scale = -1.0 / scale + lambda * lambda / (scale * scale * scale);

            let mut d_row = vec![0.0; n_years];
            let mut d_level = 0.0;
            if n_years >= 1 {
                lp += normal_logpdf(row[0], level, DIFFUSE_SD);
                let u = (row[0] - level) / (DIFFUSE_SD * DIFFUSE_SD);
                d_row[0] -= u;
                d_level += u;
            }
            if n_years >= 2 {
                let d = row[1] - row[0];
                lp += normal_logpdf(d, 0.0, DIFFUSE_SD);
                let u = d / (DIFFUSE_SD * DIFFUSE_SD);
                d_row[1] -= u;
                d_row[0] += u;
            }
            for t in 2..n_years {
                let d2 = row[t] - 2.0 * row[t - 1] + row[t - 2];
                lp += normal_logpdf(d2, 0.0, lambda);
                let u = d2 / (lambda * lambda);
                d_row[t] -= u;
                d_row[t - 1] += 2.0 * u;
                d_row[t - 2] -= u;
                d_lambda += -1.0 / lambda + d2 * d2 / (lambda * lambda * lambda);
            }

            if let Some((ge, gp)) = grad.as_mut() {
                for (g, d) in ge[c * n_years..(c + 1) * n_years].iter_mut().zip(&d_row) {
                    *g += d;
                }
                gp[c] += d_level;
                gp[n_pop + c] += d_lambda;
                gp[2 * n_pop] += d_scale;
            }
        }
        lp
    }

    fn initial_params(&self, shape: &GridShape, eta: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n_pop = shape.n_populations();
        let mut flat = Vec::with_capacity(2 * n_pop + 1);
        for c in 0..n_pop {
            let first = eta.get(c * shape.n_years).copied().unwrap_or(0.0);
            flat.push(first + rng.random_range(-0.5..0.5));
        }
        for _ in 0..n_pop {
            flat.push(0.1 * rng.random_range(-0.5f64..0.5).exp());
        }
        flat.push(0.2 * rng.random_range(-0.5f64..0.5).exp());
        flat
    }

    // Non-centered form. Per population the raw coordinates are an
    // intercept `a`, a slope `b` and standardized second differences `ε`:
    // `η_t = a + b (t − t̄) + λ_c w̃_t`, where `w` integrates `ε` twice from
    // zero and `w̃` is `w` with its least-squares line removed. Second
    // differences of `η` are `λ_c ε`, and the map has Jacobian `λ_c^(T−2)`.
    // Keeping the line out of `w̃` leaves the data's level and slope
    // information on `(a, b)` alone.
    fn raw_to_latent(&self, shape: &GridShape, params: &[f64], values: &mut [f64]) -> f64 {
        let n_pop = shape.n_populations();
        let n_years = shape.n_years;
        let basis = LineBasis::new(n_years);
        let mut w = vec![0.0; n_years];
        let mut log_jac = 0.0;
        for (c, row) in values.chunks_exact_mut(n_years.max(1)).take(n_pop).enumerate() {
            let lambda = params[n_pop + c];
            basis.curvature(row, &mut w);
            let (a, b) = (row[0], row.get(1).copied().unwrap_or(0.0));
            for (t, eta) in row.iter_mut().enumerate() {
                *eta = a + b * basis.centered(t) + lambda * w[t];
            }
            log_jac += n_years.saturating_sub(2) as f64 * lambda.ln();
        }
        log_jac
    }

    fn latent_to_raw(&self, shape: &GridShape, params: &[f64], values: &mut [f64]) {
        let n_pop = shape.n_populations();
        let n_years = shape.n_years;
        let basis = LineBasis::new(n_years);
        for (c, row) in values.chunks_exact_mut(n_years.max(1)).take(n_pop).enumerate() {
            let lambda = params[n_pop + c];
            let (a, b) = basis.fit(row);
            for t in (2..n_years).rev() {
                row[t] = (row[t] - 2.0 * row[t - 1] + row[t - 2]) / lambda;
            }
            row[0] = a;
            if n_years >= 2 {
                row[1] = b;
            }
        }
    }

    fn pull_back(&self, shape: &GridShape, params: &[f64], raw: &[f64], grad: &mut [f64], grad_params: &mut [f64]) {
        let n_pop = shape.n_populations();
        let n_years = shape.n_years;
        let basis = LineBasis::new(n_years);
        let mut w = vec![0.0; n_years];
        let mut adj = vec![0.0; n_years];
        for c in 0..n_pop {
            let lambda = params[n_pop + c];
            let cells = c * n_years..(c + 1) * n_years;
            basis.curvature(&raw[cells.clone()], &mut w);
            let g = &mut grad[cells];

            let mut d_lambda = n_years.saturating_sub(2) as f64 / lambda;
            let (mut d_a, mut d_b) = (0.0, 0.0);
            for t in 0..n_years {
                d_a += g[t];
                d_b += g[t] * basis.centered(t);
                d_lambda += g[t] * w[t];
                adj[t] = lambda * g[t];
            }
            // the line projection is symmetric, so its adjoint is itself
            basis.remove_line(&mut adj);
            for t in (2..n_years).rev() {
                let at = adj[t];
                adj[t - 1] += 2.0 * at;
                adj[t - 2] -= at;
                g[t] = at;
            }
            g[0] = d_a;
            if n_years >= 2 {
                g[1] = d_b;
            }
            grad_params[n_pop + c] += d_lambda;
        }
    }
}

/// Centered time index and least-squares line removal on `0..n`.
struct LineBasis {
    mid: f64,
    sum_sq: f64,
}

impl LineBasis {
    fn new(n: usize) -> Self {
        let mid = n.saturating_sub(1) as f64 / 2.0;
        let sum_sq = (0..n).map(|t| (t as f64 - mid).powi(2)).sum();
        Self { mid, sum_sq }
    }

    fn centered(&self, t: usize) -> f64 {
        t as f64 - self.mid
    }

    /// Intercept at the midpoint and slope of the least-squares line.
    fn fit(&self, y: &[f64]) -> (f64, f64) {
        if y.is_empty() {
            return (0.0, 0.0);
        }
        let a = y.iter().sum::<f64>() / y.len() as f64;
        let b = if self.sum_sq > 0.0 {
            y.iter().enumerate().map(|(t, v)| self.centered(t) * v).sum::<f64>() / self.sum_sq
        } else {
            0.0
        };
        (a, b)
    }

    fn remove_line(&self, y: &mut [f64]) {
        let (a, b) = self.fit(y);
        for (t, v) in y.iter_mut().enumerate() {
            *v -= a + b * self.centered(t);
        }
    }

    /// Twice-integrated innovations `raw[2..]` with the line removed.
    fn curvature(&self, raw: &[f64], w: &mut [f64]) {
        let n = raw.len();
        for t in 0..n {
            w[t] = if t < 2 { 0.0 } else { 2.0 * w[t - 1] - w[t - 2] + raw[t] };
        }
        self.remove_line(&mut w[..n]);
    }
}

/// Log prior of the second-order random walk for a latent grid.
pub fn process_log_prior(eta: &LatentGrid, params: &ProcessParams) -> f64 {
    Rw2Process.log_prior(eta.shape(), eta.values(), &params.to_flat(), None)
}

//! Posterior assembly, the NUTS sampler, convergence diagnostics and
//! posterior summaries.

pub mod diagnostics;
mod draws;
pub mod layout;
pub mod nuts;
pub mod posterior;
pub mod summary;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datamodel::DataModelError;
use crate::domain::GridShape;
use crate::process::ProcessError;

pub use diagnostics::{diagnose, ParamDiagnostics};
pub use draws::{ChainDraws, PosteriorDraws};
pub use layout::{BlockSpec, ParamLayout, Transform, UnconstrainedVector};
pub use nuts::{sample, SamplerConfig};
pub use posterior::{eta_name, ConstrainedParams, LogPosteriorTerms, ModelOptions, NosModel, Parameterization};
pub use summary::{summarize, summarize_phi, ParamSummary, PhiSummary, DEFAULT_PROBS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error(transparent)]
    DataModel(#[from] DataModelError),
    #[error(transparent)]
    Process(#[from] ProcessError),
    #[error("non-finite input at coordinate {index} ({name})")]
    NonFiniteInput { index: usize, name: String },
    #[error("non-finite gradient at coordinate {index} ({name})")]
    NonFiniteGradient { index: usize, name: String },
    #[error("vector has length {got}, layout needs {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("chain {chain}: no finite starting point after {attempts} attempts")]
    Initialization { chain: usize, attempts: usize },
    #[error("chain {chain}: step size search failed ({reason})")]
    StepSize { chain: usize, reason: String },
    #[error("diagnostics need at least 2 chains with 4 draws each")]
    TooFewDraws,
    #[error("divergence rate {rate:.3} exceeds {limit}")]
    TooManyDivergences { rate: f64, limit: f64 },
}

/// A differentiable log density on unconstrained coordinates.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Log density at `u`; the gradient is written into `grad`.
    fn log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> Result<f64, InferenceError>;

    /// A starting point in unconstrained space.
    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;

    /// Names of the stored output columns.
    fn param_names(&self) -> Vec<String>;

    /// Output values stored for the draw at `u`, aligned with `param_names`.
    fn to_output(&self, u: &[f64]) -> Vec<f64>;

    /// Grid behind any `eta[...]` outputs.
    fn grid(&self) -> Option<GridShape> {
        None
    }
}

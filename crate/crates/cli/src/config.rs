//! Run configuration, read from TOML. Every section and key is optional;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use nos_core::datamodel::PriorConfig;
use nos_core::domain::Indicator;
use nos_core::inference::{ModelOptions, Parameterization, SamplerConfig};
use nos_core::preprocess::PreprocessConfig;
use nos_core::process::process_model;
use nos_core::sim::SimDesign;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Observation CSV.
    pub data: PathBuf,
    pub output: PathBuf,
    /// Existing classification CSV; computed inline by `fit` when absent.
    pub classification: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: PathBuf::from("observations.csv"),
            output: PathBuf::from("output"),
            classification: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub indicator: Indicator,
    pub process_model: String,
    pub outlier_term: bool,
    pub parameterization: Parameterization,
    pub priors: PriorConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        let options = ModelOptions::default();
        Self {
            indicator: Indicator::PrimaryProportion,
            process_model: options.process_model,
            outlier_term: options.outlier_term,
            parameterization: options.parameterization,
            priors: options.priors,
        }
    }
}

impl ModelSection {
    pub fn options(&self) -> ModelOptions {
        ModelOptions {
            priors: self.priors.clone(),
            process_model: self.process_model.clone(),
            outlier_term: self.outlier_term,
            parameterization: self.parameterization,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelSection,
    pub preprocess: PreprocessConfig,
    pub sampler: SamplerConfig,
}

impl RunConfig {
    /// Parses and validates; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.paths.data = base.join(&config.paths.data);
        config.paths.output = base.join(&config.paths.output);
        if let Some(c) = &config.paths.classification {
            config.paths.classification = Some(base.join(c));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        process_model(&self.model.process_model).map_err(|e| CliError::Config(e.to_string()))?;
        let p = &self.model.priors;
        for (name, v) in [
            ("source_sd", p.source_sd),
            ("char_sd", p.char_sd),
            ("tau_scale", p.tau_scale),
            ("slab_sd", p.slab_sd),
            ("local_scale", p.local_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("model.priors.{name} must be positive, got {v}"));
            }
        }
        let pre = &self.preprocess;
        if !(pre.top_fraction >= 0.0 && pre.top_fraction < 1.0) {
            return bad(format!("preprocess.top_fraction must lie in [0, 1), got {}", pre.top_fraction));
        }
        if !(pre.bandwidth.is_finite() && pre.bandwidth > 0.0) {
            return bad(format!("preprocess.bandwidth must be positive, got {}", pre.bandwidth));
        }
        self.sampler.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.sampler.chains < 2 {
            return bad("sampler.chains must be at least 2 for convergence diagnostics".into());
        }
        Ok(())
    }
}

/// Simulation design plus the number of replicate datasets. Replicate `k`
/// (from 1) uses seed `seed + k - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub replicates: usize,
    pub design: SimDesign,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            replicates: 1,
            design: SimDesign::default(),
        }
    }
}

impl SimulateConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: SimulateConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if config.replicates == 0 {
            return Err(CliError::Config("replicates must be at least 1".into()));
        }
        config.design.validate()?;
        Ok(config)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c = RunConfig::from_toml("", Path::new("/base")).unwrap();
        assert_eq!(c.paths.data, PathBuf::from("/base/observations.csv"));
        assert_eq!(c.sampler, SamplerConfig::default());
        assert_eq!(c.preprocess, PreprocessConfig::default());
        assert_eq!(c.model.priors.tau_scale, 0.04);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[sampler]\nthreads = 2", "[model.priors]\ntau = 1.0", "[extra]\n"] {
            let err = RunConfig::from_toml(text, Path::new(".")).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn single_chain_is_refused() {
        let err = RunConfig::from_toml("[sampler]\nchains = 1", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("at least 2"));
    }

    #[test]
    fn parses_full_config() {
        let text = r#"
[paths]
data = "obs.csv"
output = "out"
classification = "cls.csv"

[model]
indicator = "unmet_ratio"
outlier_term = false

[model.priors]
tau_scale = 0.0016

[preprocess]
top_fraction = 0.2
overrides = [4, 9]

[sampler]
chains = 3
warmup = 200
draws = 100
seed = 11
target_accept = 0.95
"#;
        let c = RunConfig::from_toml(text, Path::new("/r")).unwrap();
        assert_eq!(c.model.indicator, Indicator::UnmetRatio);
        assert!(!c.model.outlier_term);
        assert_eq!(c.model.priors.tau_scale, 0.0016);
        assert_eq!(c.preprocess.overrides.len(), 2);
        assert_eq!(c.sampler.chains, 3);
        assert_eq!(c.paths.classification, Some(PathBuf::from("/r/cls.csv")));
    }

    #[test]
    fn unknown_process_model_is_refused() {
        assert!(RunConfig::from_toml("[model]\nprocess_model = \"logistic\"", Path::new(".")).is_err());
    }
}

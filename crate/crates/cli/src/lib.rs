//! Batch commands behind the `nos` binary: preprocess, fit, simulate,
//! summarize and check.
//!
//! Every output file starts with a header naming the artifact version and the
//! SHA-256 of the configuration that produced it. Outputs depend only on the
//! input files, the configuration and its seed.

pub mod check;
pub mod config;

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nos_core::domain::Observation;
use nos_core::inference::{
    diagnose, sample, summarize, summarize_phi, InferenceError, NosModel, ParamDiagnostics, PosteriorDraws,
    DEFAULT_PROBS,
};
use nos_core::io::{self, IoError};
use nos_core::preprocess::{classify_possible_outliers, FlagReason, OutlierClassification};
use nos_core::sim::{simulate_dataset, SimError};
use serde::Serialize;
use thiserror::Error;

pub use config::{RunConfig, SimulateConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Fits fail when any R̂ exceeds this.
pub const MAX_RHAT: f64 = 1.05;
/// Fits fail when the share of divergent transitions exceeds this.
pub const MAX_DIVERGENCE_RATE: f64 = 0.10;

pub const CLASSIFICATION_FILE: &str = "classification.csv";
pub const REFERENCE_LOG_FILE: &str = "reference_sources.log";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PHI_FILE: &str = "phi_summary.csv";
pub const OBSERVATION_SD_FILE: &str = "observation_error_sd.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Data {
        path: PathBuf,
        #[source]
        source: IoError,
    },
    #[error("{path}: no {indicator} observations")]
    NoObservations { path: PathBuf, indicator: String },
    #[error(transparent)]
    Domain(#[from] nos_core::domain::DomainError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("no draws_chain_*.csv files in {0}")]
    NoDraws(PathBuf),
}

fn file_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn data_error(path: &Path) -> impl FnOnce(IoError) -> CliError + '_ {
    move |source| CliError::Data {
        path: path.to_path_buf(),
        source,
    }
}

/// Header lines written at the top of every output file.
pub fn header_lines(config_sha256: &str) -> Vec<String> {
    vec![format!("nos {VERSION}"), format!("config_sha256: {config_sha256}")]
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(file_error(path))
}

fn write_csv<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), IoError>,
{
    let mut out = create(path)?;
    f(&mut out).map_err(data_error(path))?;
    out.flush().map_err(file_error(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(file_error(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn make_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(file_error(dir))
}

#[derive(Debug, Serialize)]
struct Metadata<'a> {
    nos_version: &'a str,
    command: &'a str,
    config_sha256: &'a str,
    files: Vec<String>,
}

fn write_metadata(dir: &Path, command: &str, config_sha256: &str, files: &[String]) -> Result<(), CliError> {
    write_json(
        &dir.join(METADATA_FILE),
        &Metadata {
            nos_version: VERSION,
            command,
            config_sha256,
            files: files.to_vec(),
        },
    )
}

/// Reads the observation CSV and keeps the configured indicator.
pub fn load_observations(config: &RunConfig) -> Result<Vec<Observation>, CliError> {
    let path = &config.paths.data;
    let file = File::open(path).map_err(file_error(path))?;
    let all = io::read_observations(std::io::BufReader::new(file)).map_err(data_error(path))?;
    let selected: Vec<Observation> = all
        .into_iter()
        .filter(|o| o.indicator == config.model.indicator)
        .collect();
    if selected.is_empty() {
        return Err(CliError::NoObservations {
            path: path.clone(),
            indicator: config.model.indicator.to_string(),
        });
    }
    Ok(selected)
}

/// One line per population describing its reference source and flag counts.
pub fn reference_log(classification: &OutlierClassification, header: &[String]) -> String {
    let mut text: String = header.iter().map(|h| format!("# {h}\n")).collect();
    for (population, reference) in &classification.reference_source {
        let verdicts: Vec<_> = classification
            .verdicts
            .iter()
            .filter(|v| &v.population == population)
            .collect();
        let count = |r: FlagReason| verdicts.iter().filter(|v| v.reason == Some(r) && !v.overridden).count();
        let flagged = verdicts.iter().filter(|v| v.possibly_outlying).count();
        let overridden = verdicts.iter().filter(|v| v.overridden).count();
        let reference = match reference {
            Some(s) => format!("reference {s}"),
            None => "no reference source, all observations possibly outlying".to_string(),
        };
        text.push_str(&format!(
            "{population}: {reference}; {} observations, {flagged} possibly outlying \
             (step1 {}, step2 {}, step3 {}), {overridden} overridden\n",
            verdicts.len(),
            count(FlagReason::Step1),
            count(FlagReason::Step2),
            count(FlagReason::Step3),
        ));
    }
    text
}

/// Classifies the observations and writes the classification table and the
/// reference-source log. Nothing is written when the input is unusable.
pub fn cmd_preprocess(config: &RunConfig, config_sha256: &str) -> Result<OutlierClassification, CliError> {
    let observations = load_observations(config)?;
    let classification = classify_possible_outliers(&observations, &config.preprocess)?;
    let dir = &config.paths.output;
    make_dir(dir)?;
    let header = header_lines(config_sha256);
    write_csv(&dir.join(CLASSIFICATION_FILE), |w| {
        io::write_classification(w, &header, &classification)
    })?;
    write_text(&dir.join(REFERENCE_LOG_FILE), &reference_log(&classification, &header))?;
    write_metadata(
        dir,
        "preprocess",
        config_sha256,
        &[CLASSIFICATION_FILE.into(), REFERENCE_LOG_FILE.into()],
    )?;
    Ok(classification)
}

fn chain_file(chain: usize) -> String {
    format!("draws_chain_{chain}.csv")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub nos_version: String,
    pub config_sha256: String,
    pub chains: usize,
    pub draws_per_chain: usize,
    pub divergent: usize,
    pub divergence_rate: f64,
    pub max_rhat: Option<f64>,
    pub max_rhat_parameter: Option<String>,
    pub min_ess_bulk: Option<f64>,
    pub min_ess_bulk_parameter: Option<String>,
    pub step_sizes: Vec<f64>,
    pub mean_tree_depth: Vec<f64>,
    /// Reasons the fit is not trusted; empty when it passed.
    pub failures: Vec<String>,
    pub parameters: Vec<ParamDiagnostics>,
}

impl DiagnosticsReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn diagnostics_report(draws: &PosteriorDraws, config_sha256: &str) -> Result<DiagnosticsReport, CliError> {
    let parameters = diagnose(draws)?;
    let worst_rhat = parameters
        .iter()
        .filter_map(|d| d.rhat.map(|r| (r, &d.name)))
        .max_by(|a, b| a.0.total_cmp(&b.0));
    let worst_ess = parameters
        .iter()
        .filter_map(|d| d.ess_bulk.map(|e| (e, &d.name)))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    let divergent = draws.chains.iter().flat_map(|c| &c.divergent).filter(|&&d| d).count();
    let divergence_rate = draws.divergence_rate();

    let mut failures = Vec::new();
    if let Some((r, name)) = worst_rhat {
        if !(r <= MAX_RHAT) {
            failures.push(format!("R-hat {r:.4} for {name} exceeds {MAX_RHAT}"));
        }
    }
    if divergence_rate > MAX_DIVERGENCE_RATE {
        failures.push(format!(
            "divergence rate {divergence_rate:.4} exceeds {MAX_DIVERGENCE_RATE}"
        ));
    }
    Ok(DiagnosticsReport {
        nos_version: VERSION.to_string(),
        config_sha256: config_sha256.to_string(),
        chains: draws.n_chains(),
        draws_per_chain: draws.n_draws(),
        divergent,
        divergence_rate,
        max_rhat: worst_rhat.map(|w| w.0),
        max_rhat_parameter: worst_rhat.map(|w| w.1.clone()),
        min_ess_bulk: worst_ess.map(|w| w.0),
        min_ess_bulk_parameter: worst_ess.map(|w| w.1.clone()),
        step_sizes: draws.chains.iter().map(|c| c.step_size).collect(),
        mean_tree_depth: draws
            .chains
            .iter()
            .map(|c| c.tree_depth.iter().map(|&d| f64::from(d)).sum::<f64>() / c.len().max(1) as f64)
            .collect(),
        failures,
        parameters,
    })
}

/// Writes the parameter summary, the φ table, the per-observation error sd
/// and the diagnostics report.
pub fn write_summaries(
    model: &NosModel,
    draws: &PosteriorDraws,
    dir: &Path,
    config_sha256: &str,
) -> Result<DiagnosticsReport, CliError> {
    let header = header_lines(config_sha256);
    let report = diagnostics_report(draws, config_sha256)?;

    let mut text: String = header.iter().map(|h| format!("# {h}\n")).collect();
    text.push_str("parameter,mean");
    for p in DEFAULT_PROBS {
        text.push_str(&format!(",q{}", p * 100.0));
    }
    text.push_str(",rhat,ess_bulk\n");
    for (s, d) in summarize(draws, &DEFAULT_PROBS).iter().zip(&report.parameters) {
        text.push_str(&format!("{},{}", s.name, s.mean));
        for (_, q) in &s.quantiles {
            text.push_str(&format!(",{q}"));
        }
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        text.push_str(&format!(",{},{}\n", opt(d.rhat), opt(d.ess_bulk)));
    }
    write_text(&dir.join(SUMMARY_FILE), &text)?;

    let mut text: String = header.iter().map(|h| format!("# {h}\n")).collect();
    text.push_str("population,year,phi_median,phi_q5,phi_q95\n");
    for row in summarize_phi(draws, model.shape()) {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.population, row.year, row.median, row.lower, row.upper
        ));
    }
    write_text(&dir.join(PHI_FILE), &text)?;

    let mut text: String = header.iter().map(|h| format!("# {h}\n")).collect();
    text.push_str("observation_id,total_error_sd_median\n");
    for (id, sd) in model.median_total_error_sd(draws) {
        text.push_str(&format!("{id},{sd}\n"));
    }
    write_text(&dir.join(OBSERVATION_SD_FILE), &text)?;

    write_json(&dir.join(DIAGNOSTICS_FILE), &report)?;
    Ok(report)
}

fn outlying_set(config: &RunConfig, observations: &[Observation]) -> Result<(BTreeSet<u64>, Option<OutlierClassification>), CliError> {
    match &config.paths.classification {
        Some(path) => {
            let file = File::open(path).map_err(file_error(path))?;
            let ids = io::read_outlying_ids(std::io::BufReader::new(file)).map_err(data_error(path))?;
            Ok((ids, None))
        }
        None => {
            let classification = classify_possible_outliers(observations, &config.preprocess)?;
            Ok((classification.outlying_ids(), Some(classification)))
        }
    }
}

fn build_model(config: &RunConfig) -> Result<(NosModel, Option<OutlierClassification>), CliError> {
    let observations = load_observations(config)?;
    let (outlying, classification) = outlying_set(config, &observations)?;
    let model = NosModel::from_observations(&observations, &outlying, &config.model.options())?;
    Ok((model, classification))
}

/// Samples the posterior and writes draws, summaries and diagnostics. The
/// returned report says whether the fit met the convergence thresholds.
pub fn cmd_fit(config: &RunConfig, config_sha256: &str) -> Result<DiagnosticsReport, CliError> {
    let (model, classification) = build_model(config)?;
    let draws = sample(&model, &config.sampler)?;

    let dir = &config.paths.output;
    make_dir(dir)?;
    let header = header_lines(config_sha256);
    let mut files = Vec::new();
    if let Some(c) = &classification {
        write_csv(&dir.join(CLASSIFICATION_FILE), |w| io::write_classification(w, &header, c))?;
        files.push(CLASSIFICATION_FILE.to_string());
    }
    for (k, chain) in draws.chains.iter().enumerate() {
        let name = chain_file(k + 1);
        write_csv(&dir.join(&name), |w| io::write_chain(w, &header, &draws.names, chain))?;
        files.push(name);
    }
    let report = write_summaries(&model, &draws, dir, config_sha256)?;
    files.extend([SUMMARY_FILE, PHI_FILE, OBSERVATION_SD_FILE, DIAGNOSTICS_FILE].map(String::from));
    write_metadata(dir, "fit", config_sha256, &files)?;
    Ok(report)
}

/// Reads the per-chain draws of an earlier fit, in chain order.
pub fn read_draws(dir: &Path) -> Result<PosteriorDraws, CliError> {
    let mut chains = Vec::new();
    for k in 1.. {
        let path = dir.join(chain_file(k));
        if !path.exists() {
            break;
        }
        let file = File::open(&path).map_err(file_error(&path))?;
        chains.push(io::read_chain(std::io::BufReader::new(file)).map_err(data_error(&path))?);
    }
    if chains.is_empty() {
        return Err(CliError::NoDraws(dir.to_path_buf()));
    }
    io::merge_chains(chains).map_err(data_error(dir))
}

/// Recomputes the summaries from the draws on disk. When no classification
/// path is configured, the one written by `fit` is used.
pub fn cmd_summarize(config: &RunConfig, config_sha256: &str) -> Result<DiagnosticsReport, CliError> {
    let dir = &config.paths.output;
    let mut config = config.clone();
    if config.paths.classification.is_none() {
        let written = dir.join(CLASSIFICATION_FILE);
        if written.exists() {
            config.paths.classification = Some(written);
        }
    }
    let (model, _) = build_model(&config)?;
    let mut draws = read_draws(dir)?;
    if draws.names != model.layout().names() {
        return Err(CliError::Config(format!(
            "draws in {} do not match the model built from the configuration",
            dir.display()
        )));
    }
    draws.grid = Some(model.shape().clone());
    write_summaries(&model, &draws, dir, config_sha256)
}

/// Zero-padded replicate file name, e.g. `dataset_007.csv`.
pub fn replicate_file(stem: &str, k: usize, replicates: usize) -> String {
    let width = replicates.to_string().len().max(3);
    format!("{stem}_{k:0width$}.csv")
}

/// Writes one observation file and one truth file per replicate.
pub fn cmd_simulate(config: &SimulateConfig, out: &Path, config_sha256: &str) -> Result<Vec<PathBuf>, CliError> {
    let header = header_lines(config_sha256);
    let mut datasets = Vec::with_capacity(config.replicates);
    for k in 1..=config.replicates {
        let mut design = config.design.clone();
        design.seed = design.seed.wrapping_add(k as u64 - 1);
        datasets.push(simulate_dataset(&design)?);
    }
    make_dir(out)?;
    let mut files = Vec::new();
    let mut dataset_paths = Vec::new();
    for (k, ds) in datasets.iter().enumerate() {
        let data = replicate_file("dataset", k + 1, config.replicates);
        let truth = replicate_file("truth", k + 1, config.replicates);
        write_csv(&out.join(&data), |w| io::write_observations(w, &header, &ds.observations))?;
        write_csv(&out.join(&truth), |w| io::write_truth(w, &header, &ds.truth))?;
        dataset_paths.push(out.join(&data));
        files.extend([data, truth]);
    }
    write_metadata(out, "simulate", config_sha256, &files)?;
    Ok(dataset_paths)
}

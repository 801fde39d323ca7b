//! CSV formats: observations, classifications, per-chain draws and the true
//! latent grid written by simulations.
//!
//! Every writer takes a list of header lines that are emitted as `# ` comment
//! lines before the column row; every reader skips such lines.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use thiserror::Error;

use crate::domain::{nearest_year, inv_logit, Indicator, LatentGrid, Observation, SourceType};
use crate::inference::{ChainDraws, PosteriorDraws};
use crate::preprocess::OutlierClassification;

/// One rejected input row. `line` counts physical lines from 1, comments
/// included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("{} invalid row(s):\n{}", .0.len(), format_rows(.0))]
    Rows(Vec<RowError>),
    #[error("no data rows")]
    Empty,
}

fn format_rows(rows: &[RowError]) -> String {
    rows.iter()
        .map(|r| format!("  line {}: {}", r.line, r.reason))
        .collect::<Vec<_>>()
        .join("\n")
}

pub const OBSERVATION_COLUMNS: [&str; 11] = [
    "id",
    "population",
    "year",
    "indicator",
    "value",
    "se_proportion",
    "n_eff",
    "source_type",
    "char_mismatch",
    "documented_concern",
    "pma_series_id",
];

pub const CLASSIFICATION_COLUMNS: [&str; 4] = ["observation_id", "possibly_outlying", "reference_source", "flag_step"];

const SAMPLER_COLUMNS: [&str; 6] = ["lp__", "accept_stat__", "stepsize__", "treedepth__", "n_leapfrog__", "divergent__"];

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn write_header<W: Write>(out: &mut W, header: &[String]) -> std::io::Result<()> {
    for line in header {
        writeln!(out, "# {line}")?;
    }
    Ok(())
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize, IoError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| IoError::MissingColumn(name.to_string()))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" | "" => Ok(false),
        other => Err(format!("'{other}' is not a boolean")),
    }
}

fn parse_optional_f64(s: &str, what: &str) -> Result<Option<f64>, String> {
    if s.is_empty() || s.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| format!("{what} '{s}' is not a number"))
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

/// Reads observations, reporting every offending row at once.
pub fn read_observations<R: Read>(input: R) -> Result<Vec<Observation>, IoError> {
    let mut rdr = reader(input);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 11];
    for (slot, name) in idx.iter_mut().zip(OBSERVATION_COLUMNS) {
        *slot = match column_index(&headers, name) {
            Ok(i) => i,
            // optional columns may be absent altogether
            Err(_) if matches!(name, "se_proportion" | "n_eff" | "pma_series_id" | "char_mismatch" | "documented_concern") => usize::MAX,
            Err(e) => return Err(e),
        };
    }
    let field = |rec: &csv::StringRecord, k: usize| -> String {
        if idx[k] == usize::MAX {
            String::new()
        } else {
            rec.get(idx[k]).unwrap_or("").to_string()
        }
    };

    let mut observations = Vec::new();
    let mut errors = Vec::new();
    let mut seen = BTreeSet::new();
    for record in rdr.records() {
        let rec = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                errors.push(RowError {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = line_of(&rec);
        let parsed = (|| -> Result<Observation, String> {
            let id: u64 = field(&rec, 0)
                .parse()
                .map_err(|_| format!("id '{}' is not a non-negative integer", field(&rec, 0)))?;
            let population = field(&rec, 1);
            if population.is_empty() {
                return Err("population is empty".into());
            }
            let time: f64 = field(&rec, 2)
                .parse()
                .map_err(|_| format!("year '{}' is not a number", field(&rec, 2)))?;
            if !time.is_finite() {
                return Err("year is not finite".into());
            }
            let indicator: Indicator = field(&rec, 3).parse().map_err(|e: crate::domain::DomainError| e.to_string())?;
            let value: f64 = field(&rec, 4)
                .parse()
                .map_err(|_| format!("value '{}' is not a number", field(&rec, 4)))?;
            let se = parse_optional_f64(&field(&rec, 5), "se_proportion")?;
            let n_eff = parse_optional_f64(&field(&rec, 6), "n_eff")?;
            let source_type: SourceType = field(&rec, 7).parse().map_err(|e: crate::domain::DomainError| e.to_string())?;
            let char_mismatch = parse_bool(&field(&rec, 8))?;
            let documented_concern = parse_bool(&field(&rec, 9))?;
            let series = field(&rec, 10);
            if let Some(s) = se {
                if !(s.is_finite() && s >= 0.0) {
                    return Err(format!("se_proportion {s} must be finite and non-negative"));
                }
            }
            let obs = Observation {
                id,
                population,
                year: nearest_year(time),
                indicator,
                value,
                sampling_variance: se.map(|s| s * s),
                effective_sample_size: n_eff,
                source_type,
                char_mismatch,
                documented_concern,
                pma_series_id: (!series.is_empty()).then_some(series),
            };
            obs.validate().map_err(|e| e.to_string())?;
            Ok(obs)
        })();
        match parsed {
            Ok(obs) if !seen.insert(obs.id) => errors.push(RowError {
                line,
                reason: format!("duplicate id {}", obs.id),
            }),
            Ok(obs) => observations.push(obs),
            Err(reason) => errors.push(RowError { line, reason }),
        }
    }
    if !errors.is_empty() {
        return Err(IoError::Rows(errors));
    }
    if observations.is_empty() {
        return Err(IoError::Empty);
    }
    Ok(observations)
}

fn opt_to_string(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_observations<W: Write>(mut out: W, header: &[String], observations: &[Observation]) -> Result<(), IoError> {
    write_header(&mut out, header)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(OBSERVATION_COLUMNS)?;
    for o in observations {
        w.write_record([
            o.id.to_string(),
            o.population.clone(),
            o.year.to_string(),
            o.indicator.to_string(),
            o.value.to_string(),
            opt_to_string(o.sampling_variance.map(f64::sqrt)),
            opt_to_string(o.effective_sample_size),
            o.source_type.to_string(),
            o.char_mismatch.to_string(),
            o.documented_concern.to_string(),
            o.pma_series_id.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `flag_step` is the step that flagged the observation, `override` when a
/// manual override cleared it, and empty otherwise.
pub fn write_classification<W: Write>(
    mut out: W,
    header: &[String],
    classification: &OutlierClassification,
) -> Result<(), IoError> {
    write_header(&mut out, header)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CLASSIFICATION_COLUMNS)?;
    for v in &classification.verdicts {
        let reference = classification
            .reference_for(&v.population)
            .map(|s| s.to_string())
            .unwrap_or_default();
        let step = if v.overridden {
            "override".to_string()
        } else {
            v.reason.map(|r| r.to_string()).unwrap_or_default()
        };
        w.write_record([v.id.to_string(), v.possibly_outlying.to_string(), reference, step])?;
    }
    w.flush()?;
    Ok(())
}

/// Ids marked possibly outlying in a classification file.
pub fn read_outlying_ids<R: Read>(input: R) -> Result<BTreeSet<u64>, IoError> {
    let mut rdr = reader(input);
    let headers = rdr.headers()?.clone();
    let id_col = column_index(&headers, "observation_id")?;
    let flag_col = column_index(&headers, "possibly_outlying")?;
    let mut ids = BTreeSet::new();
    let mut errors = Vec::new();
    for record in rdr.records() {
        let rec = record?;
        let line = line_of(&rec);
        let id = rec.get(id_col).unwrap_or("").parse::<u64>();
        let flag = parse_bool(rec.get(flag_col).unwrap_or(""));
        match (id, flag) {
            (Ok(id), Ok(true)) => {
                ids.insert(id);
            }
            (Ok(_), Ok(false)) => {}
            (Err(_), _) => errors.push(RowError {
                line,
                reason: "observation_id is not an integer".into(),
            }),
            (_, Err(reason)) => errors.push(RowError { line, reason }),
        }
    }
    if errors.is_empty() {
        Ok(ids)
    } else {
        Err(IoError::Rows(errors))
    }
}

/// Writes one chain: sampler statistics first, then the parameters.
pub fn write_chain<W: Write>(mut out: W, header: &[String], names: &[String], chain: &ChainDraws) -> Result<(), IoError> {
    write_header(&mut out, header)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SAMPLER_COLUMNS.iter().map(|s| s.to_string()).chain(names.iter().cloned()))?;
    let n = names.len();
    for (i, row) in chain.values.chunks_exact(n.max(1)).take(chain.len()).enumerate() {
        let mut rec = vec![
            chain.lp[i].to_string(),
            chain.accept_stat[i].to_string(),
            chain.step_size.to_string(),
            chain.tree_depth[i].to_string(),
            chain.n_leapfrog[i].to_string(),
            u8::from(chain.divergent[i]).to_string(),
        ];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a chain written by [`write_chain`]; returns the parameter names too.
pub fn read_chain<R: Read>(input: R) -> Result<(Vec<String>, ChainDraws), IoError> {
    let mut rdr = reader(input);
    let headers = rdr.headers()?.clone();
    for (i, name) in SAMPLER_COLUMNS.iter().enumerate() {
        if headers.get(i) != Some(name) {
            return Err(IoError::MissingColumn(name.to_string()));
        }
    }
    let names: Vec<String> = headers.iter().skip(SAMPLER_COLUMNS.len()).map(str::to_string).collect();
    let mut chain = ChainDraws {
        values: Vec::new(),
        lp: Vec::new(),
        accept_stat: Vec::new(),
        step_size: f64::NAN,
        tree_depth: Vec::new(),
        n_leapfrog: Vec::new(),
        divergent: Vec::new(),
    };
    let mut errors = Vec::new();
    for record in rdr.records() {
        let rec = record?;
        let line = line_of(&rec);
        let nums: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match nums {
            Ok(v) if v.len() == headers.len() => {
                chain.lp.push(v[0]);
                chain.accept_stat.push(v[1]);
                chain.step_size = v[2];
                chain.tree_depth.push(v[3] as u32);
                chain.n_leapfrog.push(v[4] as u32);
                chain.divergent.push(v[5] != 0.0);
                chain.values.extend_from_slice(&v[SAMPLER_COLUMNS.len()..]);
            }
            Ok(v) => errors.push(RowError {
                line,
                reason: format!("expected {} fields, found {}", headers.len(), v.len()),
            }),
            Err(e) => errors.push(RowError {
                line,
                reason: e.to_string(),
            }),
        }
    }
    if !errors.is_empty() {
        return Err(IoError::Rows(errors));
    }
    Ok((names, chain))
}

/// Columns: population, year, eta, phi.
pub fn write_truth<W: Write>(mut out: W, header: &[String], truth: &LatentGrid) -> Result<(), IoError> {
    write_header(&mut out, header)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["population", "year", "eta", "phi"])?;
    let shape = truth.shape();
    for (p, population) in shape.populations.iter().enumerate() {
        for (t, year) in shape.years().enumerate() {
            let eta = truth.get(p, t);
            w.write_record([population.clone(), year.to_string(), eta.to_string(), inv_logit(eta).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reassembles draws from per-chain files that share one set of columns.
pub fn merge_chains(chains: Vec<(Vec<String>, ChainDraws)>) -> Result<PosteriorDraws, IoError> {
    let mut names: Option<Vec<String>> = None;
    let mut out = Vec::with_capacity(chains.len());
    for (i, (n, c)) in chains.into_iter().enumerate() {
        match &names {
            None => names = Some(n),
            Some(first) if *first != n => {
                return Err(IoError::Rows(vec![RowError {
                    line: 1,
                    reason: format!("chain {} has different columns", i + 1),
                }]))
            }
            Some(_) => {}
        }
        out.push(c);
    }
    Ok(PosteriorDraws::new(names.unwrap_or_default(), out, None))
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nos_cli::check::{run_checks, CheckHooks};
use nos_cli::config::sha256_hex;
use nos_cli::{cmd_fit, cmd_preprocess, cmd_simulate, cmd_summarize, CliError, RunConfig, SimulateConfig};

/// Multi-source survey indicator model with outlier shrinkage.
#[derive(Debug, Parser)]
#[command(name = "nos", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Classify observations as possibly outlying.
    Preprocess {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Sample the posterior and write draws, summaries and diagnostics.
    Fit {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Write simulated observation and truth files.
    Simulate {
        /// TOML with `replicates` and a `[design]` table.
        #[arg(short, long)]
        design: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Recompute summaries from the draws of an earlier fit.
    Summarize {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Run the oracle self-checks.
    Check {
        /// Add DELTA to gradient coordinate INDEX before comparing.
        #[arg(long, num_args = 2, value_names = ["INDEX", "DELTA"], hide = true)]
        perturb_gradient: Option<Vec<String>>,
    },
}

/// Exit status when a fit completes but misses the convergence thresholds.
const EXIT_NOT_CONVERGED: u8 = 2;

fn read(path: &Path) -> Result<(String, String), CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })?;
    let hash = sha256_hex(text.as_bytes());
    Ok((text, hash))
}

fn load_run_config(path: &Path) -> Result<(RunConfig, String), CliError> {
    let (text, hash) = read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok((RunConfig::from_toml(&text, base)?, hash))
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Preprocess { config } => {
            let (config, hash) = load_run_config(&config)?;
            let classification = cmd_preprocess(&config, &hash)?;
            let flagged = classification.verdicts.iter().filter(|v| v.possibly_outlying).count();
            println!(
                "{} observations, {flagged} possibly outlying; wrote {}",
                classification.verdicts.len(),
                config.paths.output.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Fit { config } => {
            let (config, hash) = load_run_config(&config)?;
            let report = cmd_fit(&config, &hash)?;
            Ok(report_status(&report))
        }
        Command::Summarize { config } => {
            let (config, hash) = load_run_config(&config)?;
            let report = cmd_summarize(&config, &hash)?;
            Ok(report_status(&report))
        }
        Command::Simulate { design, out } => {
            let (text, hash) = read(&design)?;
            let config = SimulateConfig::from_toml(&text)?;
            let files = cmd_simulate(&config, &out, &hash)?;
            println!("wrote {} dataset(s) to {}", files.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { perturb_gradient } => {
            let mut hooks = CheckHooks::default();
            if let Some(args) = perturb_gradient {
                let index = args[0]
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad coordinate '{}'", args[0])))?;
                let delta = args[1]
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad perturbation '{}'", args[1])))?;
                hooks.perturb_gradient = Some((index, delta));
            }
            let report = run_checks(hooks);
            for r in &report.results {
                println!("{r}");
            }
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn report_status(report: &nos_cli::DiagnosticsReport) -> ExitCode {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "max R-hat {}, min bulk ESS {}, divergence rate {:.4}",
        fmt(report.max_rhat),
        fmt(report.min_ess_bulk),
        report.divergence_rate
    );
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        for f in &report.failures {
            eprintln!("not converged: {f}");
        }
        ExitCode::from(EXIT_NOT_CONVERGED)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

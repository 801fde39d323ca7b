//! Acceptance suite. Runs every criterion in order, prints one line per
//! criterion and exits non-zero if any fails. Tolerances are fixed here.
//!
//! Criterion numbers given as arguments restrict the run, e.g.
//! `cargo test --test acceptance -- 1 7 8`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nos_cli::check::{gradient_max_error, horseshoe_limit_errors, likelihood_max_rel_error, toy_model, CheckHooks};
use nos_cli::config::sha256_hex;
use nos_cli::{cmd_fit, cmd_preprocess, cmd_simulate, RunConfig, SimulateConfig, PHI_FILE, SUMMARY_FILE};
use nos_core::datamodel::{predictive_error_samples, ErrorType};
use nos_core::domain::{delta_logit_variance, logit, SourceType};
use nos_core::inference::{diagnose, eta_name, sample, summarize, ModelOptions, NosModel, PosteriorDraws, SamplerConfig};
use nos_core::io::{read_observations, write_classification};
use nos_core::preprocess::{classify_possible_outliers, flag_top_residuals, FlagReason, PreprocessConfig};
use nos_core::sim::{simulate_dataset, Injection, SimDesign};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const C1_TOL: f64 = 1e-10;
const C1_LIMIT: Duration = Duration::from_secs(5);
const C2_TOL: f64 = 1e-5;
const C2_POINTS: u64 = 20;
const C2_LIMIT: Duration = Duration::from_secs(30);
const C3_SLAB_TOL: f64 = 1e-6;
const C3_MID_TOL: f64 = 1e-12;
const C4_REPLICATES: u64 = 20;
const C4_POPULATIONS: usize = 40;
const C4_MIN_COVERED: usize = 17;
const C4_MAX_RHAT: f64 = 1.05;
const C4_MIN_ESS: f64 = 100.0;
const C4_FIT_LIMIT: Duration = Duration::from_secs(600);
const C4_TRUE_MICS: f64 = 0.19;
const C4_TRUE_RHO: f64 = 0.8;
const C5_SHIFT: f64 = 1.0;
const C5_MAX_MOVE: f64 = 0.35;
const C6_SAMPLES: usize = 100_000;
const C6_THRESHOLD: f64 = 0.5;
const C8_DRAWS: usize = 1_000_000;
const C8_SD: f64 = 0.02;
const C8_REL_TOL: f64 = 0.05;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn fit_sampler(seed: u64) -> SamplerConfig {
    SamplerConfig {
        chains: 4,
        warmup: 500,
        draws: 500,
        seed,
        ..SamplerConfig::default()
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    match likelihood_max_rel_error(200) {
        Ok(err) => {
            let t = start.elapsed();
            outcome(
                err <= C1_TOL && t < C1_LIMIT,
                format!("max relative error {err:.2e} (tol {C1_TOL:.0e}), {:.2} s (limit {:?})", t.as_secs_f64(), C1_LIMIT),
            )
        }
        Err(e) => outcome(false, e),
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    match gradient_max_error(&toy_model(), C2_POINTS, CheckHooks::default()) {
        Ok((err, location)) => {
            let t = start.elapsed();
            outcome(
                err <= C2_TOL && t < C2_LIMIT,
                format!(
                    "max normalized error {err:.2e} at {location} (tol {C2_TOL:.0e}), {:.2} s (limit {:?})",
                    t.as_secs_f64(),
                    C2_LIMIT
                ),
            )
        }
        Err(e) => outcome(false, e),
    }
}

fn criterion_3() -> Outcome {
    let [zero, slab, mid] = horseshoe_limit_errors();
    outcome(
        zero == 0.0 && slab <= C3_SLAB_TOL && mid <= C3_MID_TOL,
        format!(
            "zero {zero:.1e} (tol 0), slab limit {slab:.2e} (tol {C3_SLAB_TOL:.0e}), midpoint {mid:.2e} (tol {C3_MID_TOL:.0e})"
        ),
    )
}

struct Interval {
    lower: f64,
    upper: f64,
    rhat: f64,
    ess: f64,
}

fn interval(draws: &PosteriorDraws, name: &str) -> Interval {
    let summary = summarize(draws, &[0.025, 0.975]);
    let s = summary.iter().find(|s| s.name == name).expect("parameter summarized");
    let diag = diagnose(draws).expect("diagnostics");
    let d = diag.iter().find(|d| d.name == name).expect("parameter diagnosed");
    Interval {
        lower: s.quantiles[0].1,
        upper: s.quantiles[1].1,
        rhat: d.rhat.unwrap_or(f64::NAN),
        ess: d.ess_bulk.unwrap_or(f64::NAN),
    }
}

fn criterion_4() -> (Outcome, Option<PosteriorDraws>) {
    let mics = format!("source_scale[{}]", SourceType::Mics);
    let mut mics_covered = 0;
    let mut rho_covered = 0;
    let mut converged = 0;
    let mut slowest = Duration::ZERO;
    let mut first = None;
    for seed in 1..=C4_REPLICATES {
        let design = SimDesign {
            populations: C4_POPULATIONS,
            seed,
            ..SimDesign::default()
        };
        let ds = simulate_dataset(&design).expect("design simulates");
        let outlying = classify_possible_outliers(&ds.observations, &PreprocessConfig::default())
            .expect("classification")
            .outlying_ids();
        let model = NosModel::new(&ds.observations, design.shape(), &outlying, &ModelOptions::default())
            .expect("model builds");
        let start = Instant::now();
        let draws = sample(&model, &fit_sampler(seed)).expect("sampler runs");
        let t = start.elapsed();
        slowest = slowest.max(t);
        let m = interval(&draws, &mics);
        let r = interval(&draws, "rho_pma");
        let m_ok = m.lower <= C4_TRUE_MICS && C4_TRUE_MICS <= m.upper;
        let r_ok = r.lower <= C4_TRUE_RHO && C4_TRUE_RHO <= r.upper;
        let conv = [&m, &r].iter().all(|i| i.rhat <= C4_MAX_RHAT && i.ess >= C4_MIN_ESS);
        mics_covered += m_ok as usize;
        rho_covered += r_ok as usize;
        converged += conv as usize;
        println!(
            "  replicate {seed:2}: MICS [{:.3}, {:.3}]{} rhat {:.3} ess {:.0}; rho [{:.3}, {:.3}]{} rhat {:.3} ess {:.0}; {:.1} s",
            m.lower,
            m.upper,
            if m_ok { "" } else { " MISS" },
            m.rhat,
            m.ess,
            r.lower,
            r.upper,
            if r_ok { "" } else { " MISS" },
            r.rhat,
            r.ess,
            t.as_secs_f64()
        );
        if first.is_none() {
            first = Some(draws);
        }
    }
    let n = C4_REPLICATES as usize;
    let passed = mics_covered >= C4_MIN_COVERED
        && rho_covered >= C4_MIN_COVERED
        && converged == n
        && slowest <= C4_FIT_LIMIT;
    (
        outcome(
            passed,
            format!(
                "MICS covered {mics_covered}/{n}, rho covered {rho_covered}/{n} (need {C4_MIN_COVERED}); \
                 converged {converged}/{n} (rhat <= {C4_MAX_RHAT}, ess >= {C4_MIN_ESS}); slowest fit {:.1} s (limit {:?})",
                slowest.as_secs_f64(),
                C4_FIT_LIMIT
            ),
        ),
        first,
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_5() -> Outcome {
    let clean = SimDesign {
        seed: 5,
        ..SimDesign::default()
    };
    let base = simulate_dataset(&clean).expect("clean design simulates");
    let shape = clean.shape();
    let population = shape.populations[0].clone();
    let Some(target) = base
        .observations
        .iter()
        .find(|o| o.population == population && o.source_type == SourceType::National)
    else {
        return outcome(false, "no National observation in the first population".into());
    };
    let (target_id, year) = (target.id, target.year);
    let injected_design = SimDesign {
        injections: vec![Injection {
            population: 0,
            year,
            source: SourceType::National,
            shift: C5_SHIFT,
        }],
        ..clean.clone()
    };
    let injected = simulate_dataset(&injected_design).expect("injected design simulates");

    let mut outlying: BTreeSet<u64> = classify_possible_outliers(&injected.observations, &PreprocessConfig::default())
        .expect("classification")
        .outlying_ids();
    outlying.insert(target_id);

    let cell = eta_name(&population, year);
    let sampler = SamplerConfig {
        chains: 4,
        warmup: 1000,
        draws: 1000,
        seed: 5,
        ..SamplerConfig::default()
    };
    let fit = |obs, outlier_term| {
        let options = ModelOptions {
            outlier_term,
            ..ModelOptions::default()
        };
        let model = NosModel::new(obs, shape.clone(), &outlying, &options).expect("model builds");
        sample(&model, &sampler).expect("sampler runs")
    };
    let reference = fit(&base.observations, true);
    let shrunk = fit(&injected.observations, true);
    let plain = fit(&injected.observations, false);
    let eta = |d: &PosteriorDraws| median(d.pooled(&cell).expect("cell drawn"));
    let move_hs = (eta(&shrunk) - eta(&reference)).abs();
    let move_plain = (eta(&plain) - eta(&reference)).abs();

    let local = format!("local_scale[{target_id}]");
    let target_gamma = median(shrunk.pooled(&local).expect("local scale drawn"));
    let others: Vec<f64> = shrunk
        .names
        .iter()
        .filter(|n| n.starts_with("local_scale[") && **n != local)
        .map(|n| median(shrunk.pooled(n).expect("drawn")))
        .collect();
    let mut sorted = others.clone();
    sorted.sort_by(f64::total_cmp);
    let p90 = if sorted.is_empty() {
        f64::NEG_INFINITY
    } else {
        sorted[((0.9 * (sorted.len() - 1) as f64).ceil()) as usize]
    };

    let a = move_hs < C5_MAX_MOVE * C5_SHIFT;
    let b = move_plain > move_hs;
    let c = target_gamma > p90;
    outcome(
        a && b && c,
        format!(
            "(a) move with shrinkage {move_hs:.3} (limit {:.2}) {}; (b) move without {move_plain:.3} {}; \
             (c) injected local scale median {target_gamma:.3} vs 90th percentile of {} others {p90:.3} {}",
            C5_MAX_MOVE * C5_SHIFT,
            ok(a),
            ok(b),
            others.len(),
            ok(c)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

fn criterion_6(draws: Option<&PosteriorDraws>) -> Outcome {
    let Some(draws) = draws else {
        return outcome(false, "no fit available from criterion 4".into());
    };
    let tail = |t| -> Result<f64, String> {
        let e = predictive_error_samples(draws, t, C6_SAMPLES, 6).map_err(|e| e.to_string())?;
        Ok(e.iter().filter(|x| x.abs() > C6_THRESHOLD).count() as f64 / e.len() as f64)
    };
    match (tail(ErrorType::Outlier), tail(ErrorType::Source(SourceType::National))) {
        (Ok(outlier), Ok(national)) => outcome(
            outlier > national,
            format!("P(|e| > {C6_THRESHOLD}) outlier {outlier:.4} vs National {national:.4}"),
        ),
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

const C7_FIXTURE: &str = "\
id,population,year,indicator,value,se_proportion,n_eff,source_type,char_mismatch,documented_concern,pma_series_id
1,A,1995,primary_proportion,0.20,0.01,,DHS,false,false,
2,A,2000,primary_proportion,0.24,0.01,,DHS,false,false,
3,A,1996,primary_proportion,0.21,0.01,,National,false,false,
4,A,1998,primary_proportion,0.23,0.01,,National,false,false,
5,A,2001,primary_proportion,0.26,0.01,,National,false,false,
6,A,1997,primary_proportion,0.30,0.02,,MICS,false,false,
7,B,1995,primary_proportion,0.30,0.01,,National,false,false,
8,B,2005,primary_proportion,0.35,0.01,,National,false,false,
9,B,1980,primary_proportion,0.20,0.01,,Other,false,false,
10,B,1985,primary_proportion,0.22,0.01,,Other,false,false,
11,B,1988,primary_proportion,0.24,0.01,,Other,false,false,
12,B,1999,primary_proportion,0.31,0.01,,Other,false,false,
13,C,2000,primary_proportion,0.10,0.01,,MICS,false,false,
14,C,2001,primary_proportion,0.12,0.01,,PMA,false,false,1
15,D,1985,primary_proportion,0.40,0.01,,DHS,false,false,
16,D,1995,primary_proportion,0.45,0.01,,DHS,false,false,
17,D,2000,primary_proportion,0.47,0.01,,DHS,false,false,
";

fn criterion_7() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |cond: bool, what: &str| {
        if !cond {
            failures.push(what.to_string());
        }
    };
    let obs = match read_observations(C7_FIXTURE.as_bytes()) {
        Ok(o) => o,
        Err(e) => return outcome(false, e.to_string()),
    };
    let config = PreprocessConfig {
        overrides: [6].into_iter().collect(),
        ..PreprocessConfig::default()
    };
    let run = || classify_possible_outliers(&obs, &config).expect("classification");
    let cls = run();
    let verdict = |id: u64| cls.verdicts.iter().find(|v| v.id == id).expect("verdict");

    check(cls.reference_for("A") == Some(SourceType::Dhs), "DHS preferred as reference");
    check(
        cls.reference_for("B") == Some(SourceType::National),
        "post-1990 majority picks National over a larger older Other series",
    );
    check(cls.reference_for("C").is_none(), "no reference without DHS, National or Other");
    check(
        [13, 14].iter().all(|&id| verdict(id).possibly_outlying),
        "every observation flagged when the reference is absent",
    );
    check(
        verdict(15).possibly_outlying && verdict(15).reason == Some(FlagReason::Step1),
        "pre-1990 DHS flagged by the concern rule",
    );
    check(cls.reference_for("D") == Some(SourceType::Dhs), "remaining DHS still the reference");
    check(
        !verdict(6).possibly_outlying && verdict(6).overridden,
        "override clears the flag and is recorded",
    );

    let residuals: Vec<f64> = (1..=20).map(|i| i as f64 / 100.0).collect();
    let flags = flag_top_residuals(&residuals, 0.10);
    let flagged: Vec<usize> = flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect();
    check(flagged == vec![18, 19], "exactly the two largest of 20 residuals flagged at 10%");

    let render = || {
        let mut buf = Vec::new();
        write_classification(&mut buf, &["# fixture".to_string()], &run()).expect("write");
        buf
    };
    let (first, second) = (render(), render());
    check(first == second, "two runs produce byte-identical tables");

    let n = failures.len();
    outcome(
        n == 0,
        if n == 0 {
            "9 fixture checks passed, output byte-identical across runs".into()
        } else {
            format!("failed: {}", failures.join("; "))
        },
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for p in [0.2, 0.4, 0.5] {
        let normal = Normal::new(p, C8_SD).expect("valid normal");
        let z: Vec<f64> = (0..C8_DRAWS)
            .map(|_| logit(normal.sample(&mut rng)).expect("draw inside (0, 1)"))
            .collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let mc = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (z.len() - 1) as f64;
        let delta = delta_logit_variance(p, C8_SD * C8_SD).expect("valid proportion");
        let rel = (delta - mc).abs() / mc;
        worst = worst.max(rel);
        parts.push(format!("p={p}: delta {delta:.5} mc {mc:.5} rel {rel:.4}"));
    }
    outcome(
        worst <= C8_REL_TOL,
        format!("{} (tol {C8_REL_TOL})", parts.join(", ")),
    )
}

fn pipeline(root: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let design_text = "replicates = 1\n\n[design]\npopulations = 3\nyears = 10\nseed = 9\n";
    let sim = SimulateConfig::from_toml(design_text).map_err(|e| e.to_string())?;
    cmd_simulate(&sim, &root.join("data"), &sha256_hex(design_text.as_bytes())).map_err(|e| e.to_string())?;

    let pre_text = "[paths]\ndata = \"data/dataset_001.csv\"\noutput = \"pre\"\n";
    let pre = RunConfig::from_toml(pre_text, root).map_err(|e| e.to_string())?;
    cmd_preprocess(&pre, &sha256_hex(pre_text.as_bytes())).map_err(|e| e.to_string())?;

    let fit_text = "[paths]\ndata = \"data/dataset_001.csv\"\noutput = \"fit\"\n\
                    classification = \"pre/classification.csv\"\n\n\
                    [sampler]\nchains = 2\nwarmup = 200\ndraws = 200\nseed = 9\n";
    let fit = RunConfig::from_toml(fit_text, root).map_err(|e| e.to_string())?;
    cmd_fit(&fit, &sha256_hex(fit_text.as_bytes())).map_err(|e| e.to_string())?;
    let read = |f: &str| fs::read(root.join("fit").join(f)).map_err(|e| e.to_string());
    Ok((read(SUMMARY_FILE)?, read(PHI_FILE)?))
}

fn criterion_9() -> Outcome {
    let (a, b) = match (tempfile::tempdir(), tempfile::tempdir()) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return outcome(false, "could not create temporary directories".into()),
    };
    match (pipeline(a.path()), pipeline(b.path())) {
        (Ok(x), Ok(y)) => outcome(
            x == y,
            format!(
                "summary ({} bytes) and phi summary ({} bytes) {}",
                x.0.len(),
                x.1.len(),
                if x == y { "identical across runs" } else { "differ between runs" }
            ),
        ),
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn report(n: u32, name: &str, start: Instant, o: &Outcome) {
    println!(
        "criterion {n} {name}: {} {} [{:.1} s]",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    );
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut results = Vec::new();
    let mut run = |n: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !selected.is_empty() && !selected.contains(&n) {
            return;
        }
        let start = Instant::now();
        let o = f();
        report(n, name, start, &o);
        results.push(o.passed);
    };
    run(1, "dense likelihood", &mut criterion_1);
    run(2, "gradient", &mut criterion_2);
    run(3, "horseshoe limits", &mut criterion_3);
    let mut kept = None;
    run(4, "simulation recovery", &mut || {
        let (o, draws) = criterion_4();
        kept = draws;
        o
    });
    run(5, "injected outlier", &mut criterion_5);
    run(6, "predictive tails", &mut || criterion_6(kept.as_ref()));
    run(7, "preprocessing", &mut criterion_7);
    run(8, "delta method", &mut criterion_8);
    run(9, "reproducibility", &mut criterion_9);

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

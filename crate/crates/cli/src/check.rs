//! Self-check: oracle comparisons that a build must pass before its fits are
//! trusted.

use std::collections::BTreeSet;
use std::fmt;

use nos_core::datamodel::{data_log_density, horseshoe_scale, ErrorStructure};
use nos_core::domain::{GridShape, Observation, SourceType};
use nos_core::inference::{LogDensity, ModelOptions, NosModel};
use nos_core::sim::{
    dense_data_log_density, finite_difference_gradient, random_likelihood_instance, simulate_dataset, SimDesign,
    SourceCounts,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LIKELIHOOD_INSTANCES: u64 = 200;
pub const LIKELIHOOD_TOL: f64 = 1e-10;
pub const GRADIENT_POINTS: u64 = 20;
pub const GRADIENT_STEP: f64 = 1e-5;
pub const GRADIENT_REL_TOL: f64 = 1e-5;
/// Gradient magnitudes below this are compared absolutely, which puts the
/// absolute floor at `GRADIENT_REL_TOL * GRADIENT_SCALE_FLOOR = 1e-7`.
pub const GRADIENT_SCALE_FLOOR: f64 = 1e-2;
pub const ROUND_TRIP_TOL: f64 = 1e-12;

/// Fault injection for the gradient check.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CheckHooks {
    /// Adds `amount` to one coordinate of the analytic gradient.
    pub perturb_gradient: Option<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Largest error measured, in the check's own relative or absolute unit.
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: Option<String>,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<24} max_error {:.3e}  tolerance {:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance
        )?;
        if let Some(d) = &self.detail {
            write!(f, "  ({d})")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

fn result(name: &'static str, max_error: f64, tolerance: f64, detail: Option<String>) -> CheckResult {
    CheckResult {
        name,
        passed: max_error <= tolerance,
        max_error,
        tolerance,
        detail,
    }
}

pub fn run_checks(hooks: CheckHooks) -> CheckReport {
    let mut results = vec![likelihood_check(), gradient_check(hooks)];
    results.extend(horseshoe_checks());
    results.push(round_trip_check());
    CheckReport { results }
}

/// Three populations by six years with every source type, characteristic
/// mismatches and an outlying set covering half of the non-DHS records.
pub fn toy_dataset() -> (Vec<Observation>, GridShape, BTreeSet<u64>) {
    let design = SimDesign {
        populations: 3,
        years: 6,
        counts: SourceCounts {
            dhs: 2,
            mics: 1,
            national: 2,
            other: 1,
            pma: 3,
        },
        char_mismatch_rate: 0.3,
        seed: 3,
        ..SimDesign::default()
    };
    let ds = simulate_dataset(&design).expect("toy design is valid");
    let outlying = ds
        .observations
        .iter()
        .filter(|o| o.source_type != SourceType::Dhs && o.id % 2 == 0)
        .map(|o| o.id)
        .collect();
    (ds.observations, design.shape(), outlying)
}

pub fn toy_model() -> NosModel {
    let (obs, shape, outlying) = toy_dataset();
    NosModel::new(&obs, shape, &outlying, &ModelOptions::default()).expect("toy model builds")
}

/// A point near the model's initial values, jittered in every coordinate.
pub fn random_point(model: &NosModel, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = model.initial_point(&mut rng);
    for v in &mut u {
        *v += rng.random_range(-0.5..0.5);
    }
    u
}

/// Largest relative gap between the block evaluation and the dense oracle.
pub fn likelihood_max_rel_error(instances: u64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let inst = random_likelihood_instance(seed, 30);
        let structure = ErrorStructure::build(&inst.observations, &inst.shape, &inst.outlying)
            .map_err(|e| format!("instance {seed}: {e}"))?;
        let blocked =
            data_log_density(&structure, &inst.eta, &inst.params).map_err(|e| format!("instance {seed}: {e}"))?;
        let dense = dense_data_log_density(&inst.observations, &inst.shape, &inst.outlying, &inst.eta, &inst.params)
            .map_err(|e| format!("instance {seed}: {e}"))?;
        worst = worst.max((blocked - dense).abs() / dense.abs().max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

fn likelihood_check() -> CheckResult {
    match likelihood_max_rel_error(LIKELIHOOD_INSTANCES) {
        Ok(e) => result("dense_likelihood", e, LIKELIHOOD_TOL, None),
        Err(msg) => result("dense_likelihood", f64::INFINITY, LIKELIHOOD_TOL, Some(msg)),
    }
}

/// Worst normalized gap `|g - f| / max(|g|, |f|, floor)` over all points and
/// coordinates, with a description of where it occurred.
pub fn gradient_max_error(model: &NosModel, points: u64, hooks: CheckHooks) -> Result<(f64, String), String> {
    let names = model.param_names();
    let mut worst = (0.0, String::new());
    for seed in 0..points {
        let u = random_point(model, seed);
        let (_, mut grad) = model.gradient(&u).map_err(|e| e.to_string())?;
        if let Some((i, amount)) = hooks.perturb_gradient {
            if let Some(g) = grad.get_mut(i) {
                *g += amount;
            }
        }
        let fd = finite_difference_gradient(|v| model.log_posterior(v).unwrap_or(f64::NAN), &u, GRADIENT_STEP);
        for (i, (g, f)) in grad.iter().zip(&fd).enumerate() {
            let err = (g - f).abs() / g.abs().max(f.abs()).max(GRADIENT_SCALE_FLOOR);
            if err > worst.0 || err.is_nan() {
                worst = (
                    err,
                    format!("point {seed}, coordinate {i} ({}): analytic {g:.9e}, finite difference {f:.9e}", names[i]),
                );
            }
        }
    }
    Ok(worst)
}

fn gradient_check(hooks: CheckHooks) -> CheckResult {
    match gradient_max_error(&toy_model(), GRADIENT_POINTS, hooks) {
        Ok((e, location)) => {
            let detail = (!(e <= GRADIENT_REL_TOL)).then_some(location);
            result("gradient", e, GRADIENT_REL_TOL, detail)
        }
        Err(msg) => result("gradient", f64::INFINITY, GRADIENT_REL_TOL, Some(msg)),
    }
}

/// Errors of the three limit laws: zero at γ = 0, the slab as τγ/ϑ grows,
/// and ϑ/√2 at τγ = ϑ.
pub fn horseshoe_limit_errors() -> [f64; 3] {
    let mut zero: f64 = 0.0;
    let mut slab_limit: f64 = 0.0;
    let mut midpoint: f64 = 0.0;
    for &tau in &[1e-3, 0.04, 0.3, 2.0] {
        for &slab in &[0.05, 0.5, 1.0, 3.0] {
            zero = zero.max(horseshoe_scale(tau, slab, 0.0).abs());
            for &ratio in &[1e6, 1e8, 1e12] {
                let gamma = ratio * slab / tau;
                slab_limit = slab_limit.max((horseshoe_scale(tau, slab, gamma) - slab).abs() / slab);
            }
            let half = slab / 2f64.sqrt();
            midpoint = midpoint.max((horseshoe_scale(tau, slab, slab / tau) - half).abs() / half);
        }
    }
    [zero, slab_limit, midpoint]
}

fn horseshoe_checks() -> Vec<CheckResult> {
    let [zero, slab, mid] = horseshoe_limit_errors();
    vec![
        result("horseshoe_zero", zero, 0.0, None),
        result("horseshoe_slab_limit", slab, 1e-6, None),
        result("horseshoe_midpoint", mid, 1e-12, None),
    ]
}

fn round_trip_check() -> CheckResult {
    let model = toy_model();
    let mut worst: f64 = 0.0;
    for seed in 0..GRADIENT_POINTS {
        let u = random_point(&model, 1000 + seed);
        let (params, lj) = model.constrain(&u);
        let (back, lj2) = model.unconstrain(&params);
        for (a, b) in u.iter().zip(&back.values) {
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
        worst = worst.max((lj - lj2).abs() / lj.abs().max(1.0));
    }
    result("transform_round_trip", worst, ROUND_TRIP_TOL, None)
}

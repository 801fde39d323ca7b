//! Small numeric helpers shared across modules.

use std::f64::consts::PI;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Empirical quantile with linear interpolation between order statistics
/// (`h = (n - 1) p`). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let p = p.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, p)
}

/// Mean accumulated around the first value, so constant input is reproduced
/// exactly.
pub fn mean(values: &[f64]) -> f64 {
    let Some(&first) = values.first() else {
        return f64::NAN;
    };
    first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64
}

pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let u = (x - mean) / sd;
    -LN_SQRT_2PI - sd.ln() - 0.5 * u * u
}

/// Log density of the half-normal with scale `sd`; `-inf` for negative `x`.
pub fn half_normal_logpdf(x: f64, sd: f64) -> f64 {
    if x < 0.0 || x.is_nan() {
        return f64::NEG_INFINITY;
    }
    let u = x / sd;
    std::f64::consts::LN_2 - LN_SQRT_2PI - sd.ln() - 0.5 * u * u
}

/// Log density of the half-Cauchy with scale `scale`; `-inf` for negative `x`.
pub fn half_cauchy_logpdf(x: f64, scale: f64) -> f64 {
    if x < 0.0 || x.is_nan() {
        return f64::NEG_INFINITY;
    }
    let u = x / scale;
    (2.0 / PI).ln() - scale.ln() - ln_1p_square(u)
}

/// `ln(1 + u^2)` without overflow for huge `u`.
fn ln_1p_square(u: f64) -> f64 {
    if u.abs() > 1e150 {
        2.0 * u.abs().ln()
    } else {
        (u * u).ln_1p()
    }
}

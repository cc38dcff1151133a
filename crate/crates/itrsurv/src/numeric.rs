//! Scalar numeric helpers shared across the crate.

use std::f64::consts::SQRT_2;

/// Log-odds of a probability in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Inverse of [`logit`]; maps any real to (0, 1).
///
/// Evaluated in the branch that avoids overflow of `exp` for large |x|.
pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal cumulative distribution function.
///
/// Computed as `erfc(-x / sqrt(2)) / 2`, accurate to well below 1e-12 in
/// absolute terms over the whole real line.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Arithmetic mean. Empty input yields NaN.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator). Fewer than two values
/// yield NaN.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let ss = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Quantile of a sorted slice by linear interpolation between order
/// statistics (the same convention R's `quantile` uses by default).
///
/// `sorted` must be non-empty and ascending; `p` must lie in [0, 1].
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&p), "quantile level outside [0, 1]");
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

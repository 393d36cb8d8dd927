//! Special functions not covered by `statrs`.

pub use statrs::function::gamma::{digamma, ln_gamma};

/// Trigamma function ψ'(x) for x > 0: upward recurrence to x ≥ 12, then the
/// asymptotic series.
pub fn trigamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/(2x²) + 1/(6x³) − 1/(30x⁵) + 1/(42x⁷) − 1/(30x⁹) + 5/(66x¹¹)
    let series = inv
        + 0.5 * inv2
        + inv * inv2
            * (1.0 / 6.0
                + inv2 * (-1.0 / 30.0 + inv2 * (1.0 / 42.0 + inv2 * (-1.0 / 30.0 + inv2 * 5.0 / 66.0))));
    acc + series
}

/// `ln Γ(y + a) − ln Γ(a)` for integer-valued `y ≥ 0`, summed exactly for
/// small `y` to avoid cancellation when `a` is large.
pub fn ln_rising(a: f64, y: f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    if y <= 64.0 && y.fract() == 0.0 {
        (0..y as u64).map(|j| (a + j as f64).ln()).sum()
    } else {
        ln_gamma(y + a) - ln_gamma(a)
    }
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile, clamped to finite values at the extremes.
pub fn norm_quantile(p: f64) -> f64 {
    let p = p.clamp(1e-300, 1.0 - 1e-16);
    -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trigamma_matches_digamma_difference() {
        for &x in &[0.05_f64, 0.7, 1.0, 3.3, 10.0, 250.0] {
            let h = 1e-5 * x.max(1.0);
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((trigamma(x) - fd).abs() < 1e-6 * fd.abs().max(1.0), "x={x}");
        }
        // ψ'(1) = π²/6
        assert!((trigamma(1.0) - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-13);
    }

    #[test]
    fn rising_factorial_agrees_with_gamma() {
        for &(a, y) in &[(0.5, 3.0), (2.0, 10.0), (7.3, 80.0)] {
            let direct = ln_gamma(y + a) - ln_gamma(a);
            assert!((ln_rising(a, y) - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn normal_quantile_inverts_cdf() {
        for &p in &[1e-8, 0.025, 0.5, 0.9, 0.999] {
            assert!((norm_cdf(norm_quantile(p)) - p).abs() < 1e-12 * p.max(1e-3) / 1e-3);
        }
        assert!((norm_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
    }
}

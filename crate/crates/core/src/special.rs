//! Normal and logistic distribution helpers with tail-stable ratios.

use libm::erfc;
use statrs::function::erf::erfc_inv;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal quantile function.
pub fn norm_quantile(p: f64) -> f64 {
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    if !x.is_finite() {
        return x;
    }
    // one Halley step against the more accurate erfc
    let e = norm_cdf(x) - p;
    let u = e / norm_pdf(x);
    x - u / (1.0 + 0.5 * x * u)
}

/// Mills ratio `(1 - Phi(t)) / phi(t)` for `t >= 5` by continued fraction.
fn mills_tail(t: f64) -> f64 {
    let mut acc = t;
    for k in (1..=60).rev() {
        acc = t + k as f64 / acc;
    }
    1.0 / acc
}

/// `ln Phi(x)`, accurate far into both tails.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x < -5.0 {
        -0.5 * x * x - LN_SQRT_2PI + mills_tail(-x).ln()
    } else if x > 5.0 {
        (-0.5 * erfc(x / SQRT_2)).ln_1p()
    } else {
        norm_cdf(x).ln()
    }
}

/// `phi(x) / Phi(x)`.
pub fn inv_mills_lower(x: f64) -> f64 {
    if x < -5.0 {
        1.0 / mills_tail(-x)
    } else {
        norm_pdf(x) / norm_cdf(x)
    }
}

/// `phi(x) / (1 - Phi(x))`.
pub fn inv_mills_upper(x: f64) -> f64 {
    inv_mills_lower(-x)
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_and_quantile_invert() {
        for &p in &[1e-6, 0.025, 0.25, 0.5, 0.75, 0.975, 1.0 - 1e-6] {
            let x = norm_quantile(p);
            assert!((norm_cdf(x) - p).abs() < 1e-12 * p.max(1e-3), "{p}");
        }
        assert!((norm_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
    }

    #[test]
    fn tail_ratios_are_continuous_at_switch() {
        let a = inv_mills_lower(-5.0 - 1e-9);
        let b = norm_pdf(-5.0 + 1e-9) / norm_cdf(-5.0 + 1e-9);
        assert!((a - b).abs() / b < 1e-8);
        let la = log_norm_cdf(-5.0 - 1e-12);
        let lb = norm_cdf(-5.0 - 1e-12).ln();
        assert!((la - lb).abs() < 1e-10);
        // deep tail: phi/Phi ~ -x
        assert!((inv_mills_lower(-40.0) / 40.0 - 1.0).abs() < 1e-3);
        assert!(log_norm_cdf(-40.0).is_finite());
    }

    #[test]
    fn logistic_is_stable() {
        assert_eq!(logistic(-800.0), 0.0);
        assert_eq!(logistic(800.0), 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((logit(logistic(0.3)) - 0.3).abs() < 1e-14);
    }
}

//! Standard-normal CDF/quantile helpers and robust truncated-normal sampling.
//!
//! All probit link evaluations in the model go through [`phi`] / [`phi_inv`].
//! Probabilities that enter likelihood ratios are clamped away from 0 and 1
//! with [`phi_clamped`] so that Bernoulli ratios never degenerate to 0/0.

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Clamp bound for probabilities used inside likelihood ratios.
pub const PROB_FLOOR: f64 = 1e-12;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).unwrap()
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Standard normal CDF clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub fn phi_clamped(x: f64) -> f64 {
    phi(x).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Standard normal quantile function.
pub fn phi_inv(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Draw from a standard normal truncated to `[a, inf)`.
///
/// Inverse-CDF sampling is accurate for moderate `a`; for `a > 5` the upper
/// tail is sampled with the exponential-rejection scheme of Robert (1995),
/// which terminates quickly no matter how extreme the truncation point is.
fn sample_std_lower_truncated<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    if a <= 5.0 {
        // P(X <= x | X >= a) inverted through the upper tail: with
        // t = Phi(-a) the conditional upper-tail mass at x is t * (1 - u).
        let tail = phi(-a).max(f64::MIN_POSITIVE);
        loop {
            let u: f64 = rng.gen();
            let x = -phi_inv((tail * (1.0 - u)).max(f64::MIN_POSITIVE));
            if x.is_finite() && x >= a {
                return x;
            }
        }
    } else {
        let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
        loop {
            let u: f64 = rng.gen();
            let z = a - u.ln() / lambda;
            let rho = (-0.5 * (z - lambda) * (z - lambda)).exp();
            if rng.gen::<f64>() <= rho {
                return z;
            }
        }
    }
}

/// Draw from `Normal(mean, 1)` truncated to `[0, inf)`.
pub fn truncnorm_positive<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    mean + sample_std_lower_truncated(-mean, rng)
}

/// Draw from `Normal(mean, 1)` truncated to `(-inf, 0)`.
pub fn truncnorm_negative<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    -(-mean + sample_std_lower_truncated(mean, rng))
}

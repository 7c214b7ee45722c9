//! Hyperparameter defaults, the Dirichlet sparsity prior on splitting
//! probabilities, and the prior-implied bound on the conditional LATE.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::{n_treated, observed_rates, DataError, Dataset};
use crate::probit::phi_inv;
use crate::rng::CrateRng;

/// Which function an ensemble approximates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnsembleLabel {
    /// Baseline outcome probit score.
    Mu,
    /// Complier shift.
    MuC,
    /// Treatment effect on the probit scale.
    Tau,
    /// Compliance probit score.
    Eta,
}

/// Fixed constants of one ensemble's prior: `M` trees, jump-sum center
/// `beta0` and jump-sum scale `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleHyper {
    pub label: EnsembleLabel,
    pub m: usize,
    pub beta0: f64,
    pub sigma: f64,
}

/// The four ensembles' hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper4 {
    pub mu: EnsembleHyper,
    pub mu_c: EnsembleHyper,
    pub tau: EnsembleHyper,
    pub eta: EnsembleHyper,
}

pub const DEFAULT_TREES: usize = 50;

/// Recommended defaults: 50 trees each,
/// `(beta0, sigma) = (Phi^-1(y_bar), 1.5)` for mu,
/// `(Phi^-1(c_bar), 1.5)` for eta, `(0, 0.5)` for mu_c and tau.
/// Boundary rates are clamped away from 0 and 1 before probit inversion.
pub fn default_hyper(ds: &Dataset) -> Result<Hyper4, DataError> {
    let (y_bar, c_bar) = observed_rates(ds)?;
    let n_t = n_treated(ds);
    let eps = 1.0 / (n_t as f64 + 2.0);
    let c_bar = c_bar.clamp(eps, 1.0 - eps);
    let n_y = (0..ds.n_subjects()).filter(|&i| ds.outcome(i).is_some()).count();
    let eps_y = 1.0 / (n_y as f64 + 2.0);
    let y_bar = y_bar.clamp(eps_y, 1.0 - eps_y);
    Ok(Hyper4 {
        mu: EnsembleHyper {
            label: EnsembleLabel::Mu,
            m: DEFAULT_TREES,
            beta0: phi_inv(y_bar),
            sigma: 1.5,
        },
        mu_c: EnsembleHyper {
            label: EnsembleLabel::MuC,
            m: DEFAULT_TREES,
            beta0: 0.0,
            sigma: 0.5,
        },
        tau: EnsembleHyper {
            label: EnsembleLabel::Tau,
            m: DEFAULT_TREES,
            beta0: 0.0,
            sigma: 0.5,
        },
        eta: EnsembleHyper {
            label: EnsembleLabel::Eta,
            m: DEFAULT_TREES,
            beta0: phi_inv(c_bar),
            sigma: 1.5,
        },
    })
}

/// Optional overrides layered on top of [`default_hyper`]; unset fields
/// keep the data-derived defaults.
#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct HyperTweak {
    /// Trees per ensemble (applied to all four).
    pub trees: Option<usize>,
    pub mu_sigma: Option<f64>,
    pub mu_c_sigma: Option<f64>,
    pub tau_sigma: Option<f64>,
    pub eta_sigma: Option<f64>,
    pub mu_beta0: Option<f64>,
    pub mu_c_beta0: Option<f64>,
    pub tau_beta0: Option<f64>,
    pub eta_beta0: Option<f64>,
}

impl HyperTweak {
    pub fn apply(&self, h: &mut Hyper4) {
        if let Some(m) = self.trees {
            h.mu.m = m;
            h.mu_c.m = m;
            h.tau.m = m;
            h.eta.m = m;
        }
        for (v, slot) in [
            (self.mu_sigma, &mut h.mu.sigma),
            (self.mu_c_sigma, &mut h.mu_c.sigma),
            (self.tau_sigma, &mut h.tau.sigma),
            (self.eta_sigma, &mut h.eta.sigma),
            (self.mu_beta0, &mut h.mu.beta0),
            (self.mu_c_beta0, &mut h.mu_c.beta0),
            (self.tau_beta0, &mut h.tau.beta0),
            (self.eta_beta0, &mut h.eta.beta0),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
    }

    pub fn is_noop(&self) -> bool {
        *self == HyperTweak::default()
    }
}

/// First-order bound on the conditional LATE implied by the probit link:
/// `|LATE(x)| <= phi(0) * |tau(x)| = (2*pi)^{-1/2} |tau(x)|`.
pub fn late_prior_bound(tau_abs: f64) -> f64 {
    tau_abs / (2.0 * std::f64::consts::PI).sqrt()
}

/// Draw from the `Beta(0.5, 1)` prior on `xi/(xi+p)` via the inverse CDF
/// (`F(x) = sqrt(x)`, so `x = u^2`).
pub fn sample_beta_half_one<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    u * u
}

/// Draw `xi` from its prior given dimension `p`.
pub fn sample_xi_prior(p: usize, rng: &mut CrateRng) -> f64 {
    let b = sample_beta_half_one(rng).clamp(1e-12, 1.0 - 1e-12);
    p as f64 * b / (1.0 - b)
}

/// Gamma(shape, 1) draw via Marsaglia-Tsang squeeze, with the standard
/// `U^{1/shape}` boost for shape < 1.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    assert!(shape > 0.0);
    if shape < 1.0 {
        let u: f64 = rng.sample(rand::distributions::Open01);
        return sample_gamma(shape + 1.0, rng) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let z: f64 = {
            let u: f64 = rng.sample(rand::distributions::Open01);
            crate::probit::phi_inv(u)
        };
        let v = 1.0 + c * z;
        if v <= 0.0 {
            continue;
        }
        let v3 = v * v * v;
        let u: f64 = rng.sample(rand::distributions::Open01);
        if u.ln() < 0.5 * z * z + d - d * v3 + d * v3.ln() {
            return d * v3;
        }
    }
}

/// Sample `Dirichlet(alpha_1, ..., alpha_p)` via normalized gammas.
pub fn sample_dirichlet(alphas: &[f64], rng: &mut CrateRng) -> Vec<f64> {
    let mut draws: Vec<f64> = alphas
        .iter()
        // Guard against exact-zero gamma draws at very small shapes.
        .map(|&a| sample_gamma(a, rng).max(1e-300))
        .collect();
    let sum: f64 = draws.iter().sum();
    for d in draws.iter_mut() {
        *d /= sum;
    }
    draws
}

/// Log density of a symmetric `Dirichlet(a, ..., a)` at `theta`.
pub fn symmetric_dirichlet_log_density(theta: &[f64], a: f64) -> f64 {
    let p = theta.len() as f64;
    let log_norm = ln_gamma(a * p) - p * ln_gamma(a);
    log_norm + (a - 1.0) * theta.iter().map(|t| t.max(1e-300).ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ColumnSpec, CovariateKind, Dataset};
    use crate::probit::phi;
    use crate::rng::stream_rng;

    fn toy_dataset(y: &[Option<u8>], a: &[u8], r: &[u8]) -> Dataset {
        let n = a.len();
        Dataset::assemble(
            vec![ColumnSpec {
                name: "x1".into(),
                kind: CovariateKind::Continuous,
            }],
            vec![(0..n).map(|i| i as f64).collect()],
            a.to_vec(),
            r.to_vec(),
            y.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn defaults_at_balanced_rates() {
        let ds = toy_dataset(
            &[Some(1), Some(0), Some(1), Some(0)],
            &[1, 1, 0, 0],
            &[1, 0, 0, 0],
        );
        let h = default_hyper(&ds).unwrap();
        assert!(h.mu.beta0.abs() < 1e-9);
        assert!(h.eta.beta0.abs() < 1e-9);
        assert_eq!((h.mu.sigma, h.eta.sigma), (1.5, 1.5));
        assert_eq!((h.mu_c.beta0, h.mu_c.sigma), (0.0, 0.5));
        assert_eq!((h.tau.beta0, h.tau.sigma), (0.0, 0.5));
        assert_eq!(h.mu.m, 50);
    }

    #[test]
    fn probit_centers_match_rates() {
        // y_bar = 0.73 -> beta0_mu = Phi^-1(0.73) ~ 0.6128
        let y: Vec<Option<u8>> = (0..100).map(|i| Some((i < 73) as u8)).collect();
        let a: Vec<u8> = (0..100).map(|i| (i < 50) as u8).collect();
        // 28 of 50 treated comply: c_bar = 0.56
        let r: Vec<u8> = (0..100).map(|i| (i < 28) as u8).collect();
        let ds = toy_dataset(&y, &a, &r);
        let h = default_hyper(&ds).unwrap();
        assert!((h.mu.beta0 - 0.6128).abs() < 1e-3, "got {}", h.mu.beta0);
        assert!((h.eta.beta0 - 0.151).abs() < 1e-3, "got {}", h.eta.beta0);
    }

    #[test]
    fn full_compliance_clamped() {
        let ds = toy_dataset(&[Some(1), Some(0)], &[1, 1], &[1, 1]);
        let h = default_hyper(&ds).unwrap();
        assert!(h.eta.beta0.is_finite());
        // clamp at 1 - 1/(n_treated + 2) = 3/4
        assert!((phi(h.eta.beta0) - 0.75).abs() < 1e-9);
    }

    #[test]
    fn late_bound_values() {
        assert!((late_prior_bound(0.5) - 0.19947).abs() < 1e-4);
        assert_eq!(late_prior_bound(0.0), 0.0);
    }

    #[test]
    fn probit_difference_obeys_bound() {
        let mut rng = stream_rng(11, 0);
        use rand::Rng;
        for _ in 0..10_000 {
            let mu: f64 = rng.gen_range(-4.0..4.0);
            let mu_c: f64 = rng.gen_range(-4.0..4.0);
            let tau: f64 = rng.gen_range(-4.0..4.0);
            let c: f64 = rng.gen_range(0.0f64..1.0).round();
            let base = mu + c * mu_c;
            let diff = (phi(base + tau) - phi(base)).abs();
            assert!(diff <= late_prior_bound(tau.abs()) + 1e-12);
        }
    }

    #[test]
    fn dirichlet_prior_mean_uniform() {
        let mut rng = stream_rng(11, 1);
        let p = 5;
        let mut mean = vec![0.0; p];
        let n = 4000;
        for _ in 0..n {
            let xi = sample_xi_prior(p, &mut rng);
            let theta = sample_dirichlet(&vec![xi / p as f64; p], &mut rng);
            for (m, t) in mean.iter_mut().zip(&theta) {
                *m += t;
            }
        }
        for m in &mean {
            let avg = m / n as f64;
            // Binomial-ish MC error; components are heavy-tailed under
            // small xi so allow 3 generous standard errors.
            assert!((avg - 1.0 / p as f64).abs() < 0.02, "avg {avg}");
        }
    }
}

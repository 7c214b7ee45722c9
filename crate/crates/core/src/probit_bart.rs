//! Single-ensemble probit BART: a binary regression y ~ Bernoulli(Phi(g))
//! with g a sum of trees, fit by Albert-Chib augmentation and the same
//! backfitting update as the joint model. Used by the Wald-style ratio
//! baseline.

use crate::priors::{EnsembleHyper, EnsembleLabel};
use crate::probit::{phi_inv, truncnorm_negative, truncnorm_positive};
use crate::rng::{stream_rng, CrateRng};
use crate::sampler::{update_sparsity, update_tree, ChainConfig, EnsembleState, Rows};
use crate::trees::{CovKind, TreeEnsemble};

/// Kept draws of the latent score g at the evaluation points,
/// chain-major then iteration then point, as in `PosteriorDraws`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbitBartDraws {
    pub n_chains: usize,
    pub kept_per_chain: usize,
    pub n_points: usize,
    pub g: Vec<f32>,
}

impl ProbitBartDraws {
    pub fn n_draws(&self) -> usize {
        self.n_chains * self.kept_per_chain
    }

    pub fn value(&self, draw: usize, point: usize) -> f64 {
        self.g[draw * self.n_points + point] as f64
    }
}

/// Default hyperparameters for a standalone probit fit: 50 trees,
/// centered at the observed rate on the probit scale, scale 1.5.
pub fn probit_hyper(y: &[u8], m: usize) -> EnsembleHyper {
    let n = y.len();
    let eps = 1.0 / (n as f64 + 2.0);
    let rate = (y.iter().map(|&v| v as f64).sum::<f64>() / n.max(1) as f64)
        .clamp(eps, 1.0 - eps);
    EnsembleHyper {
        label: EnsembleLabel::Mu,
        m,
        beta0: phi_inv(rate),
        sigma: 1.5,
    }
}

/// Fit probit BART on already-scaled covariate rows and record the
/// latent score at `eval` (row-major, same scale). `stream_offset`
/// separates this fit's RNG streams from other fits sharing the seed.
pub fn fit_probit_bart(
    rows: &Rows,
    kinds: &[CovKind],
    y: &[u8],
    hyper: EnsembleHyper,
    cfg: &ChainConfig,
    eval: &Rows,
    stream_offset: u64,
) -> ProbitBartDraws {
    cfg.validate().expect("invalid chain config");
    assert_eq!(y.len(), rows.n);
    let mut out = ProbitBartDraws {
        n_chains: cfg.n_chains,
        kept_per_chain: cfg.kept_per_chain(),
        n_points: eval.n,
        g: Vec::with_capacity(cfg.n_chains * cfg.kept_per_chain() * eval.n),
    };
    for chain in 0..cfg.n_chains {
        let mut rng = stream_rng(cfg.seed, stream_offset + chain as u64);
        run_probit_chain(rows, kinds, y, hyper, cfg, eval, &mut rng, &mut out);
    }
    out
}

fn run_probit_chain(
    rows: &Rows,
    kinds: &[CovKind],
    y: &[u8],
    hyper: EnsembleHyper,
    cfg: &ChainConfig,
    eval: &Rows,
    rng: &mut CrateRng,
    out: &mut ProbitBartDraws,
) {
    let n = rows.n;
    let mut es = EnsembleState::from_ensemble(TreeEnsemble::new_root_only(hyper, rows.p), n);
    let w = vec![1.0f64; n];
    let mut z = vec![0.0f64; n];
    for t in 0..cfg.n_iter {
        for i in 0..n {
            z[i] = if y[i] == 1 {
                truncnorm_positive(es.fit[i], rng)
            } else {
                truncnorm_negative(es.fit[i], rng)
            };
        }
        let mut resid: Vec<f64> = (0..n).map(|i| z[i] - es.fit[i]).collect();
        for m in 0..es.ens.trees.len() {
            update_tree(&mut es, m, rows, kinds, &w, &mut resid, rng);
        }
        update_sparsity(&mut es, rows.p, rng);
        if t >= cfg.n_burn && (t - cfg.n_burn) % cfg.thin == 0 {
            for j in 0..eval.n {
                out.g.push(es.ens.evaluate(eval.row(j)) as f32);
            }
        }
    }
}

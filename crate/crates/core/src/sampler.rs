//! Metropolis-within-Gibbs sampler for the joint compliance/outcome
//! forest model. One iteration:
//!
//!   1. impute latent compliance for controls,
//!   2. draw probit latent utilities (truncated normals),
//!   3. weighted-backfitting sweep over every tree of all four ensembles,
//!   4. Dirichlet sparsity update per ensemble.
//!
//! Notation per subject i with imputed compliance c_i and assignment a_i:
//!
//!   outcome utility mean  f_i = mu(x_i) + c_i*mu_c(x_i) + c_i*a_i*tau(x_i)
//!   compliance utility mean    eta(x_i)
//!
//! Each ensemble's trees enter f linearly with subject weight w_i (mu: 1,
//! mu_c: c_i, tau: c_i*a_i, eta: 1), so a tree update is a weighted
//! normal-means problem with the leaf jumps integrated out analytically.

use rand::Rng;

use crate::data::Dataset;
use crate::draws::PosteriorDraws;
use crate::priors::{
    sample_dirichlet, sample_xi_prior, symmetric_dirichlet_log_density, Hyper4,
};
use crate::probit::{phi_clamped, phi_inv, truncnorm_negative, truncnorm_positive};
use crate::rng::{stream_rng, CrateRng};
use crate::trees::{propose_structure, CovKind, MoveKind, TreeEnsemble};

/// Per-chain iteration schedule. Defaults follow the four-chains /
/// 5000-total-iterations recipe with the first half of each chain
/// discarded.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChainConfig {
    pub n_chains: usize,
    /// Iterations per chain, burn-in included.
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub seed: u64,
    /// Worker-thread bound for running chains; the output is identical
    /// for any value.
    pub threads: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_chains: 4,
            n_iter: 1250,
            n_burn: 625,
            thin: 1,
            seed: 0,
            threads: 1,
        }
    }
}

impl ChainConfig {
    pub fn kept_per_chain(&self) -> usize {
        (self.n_iter - self.n_burn).div_ceil(self.thin)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_chains == 0 {
            return Err("n_chains must be at least 1".into());
        }
        if self.n_burn >= self.n_iter {
            return Err(format!(
                "burn-in {} must be below total iterations {}",
                self.n_burn, self.n_iter
            ));
        }
        if self.thin == 0 {
            return Err("thin must be at least 1".into());
        }
        Ok(())
    }
}

/// Borrowed row-major covariate matrix: the part of a dataset the tree
/// updates actually touch. Lets the probit-BART baseline reuse the same
/// update on subject subsets.
#[derive(Debug, Clone, Copy)]
pub struct Rows<'a> {
    pub x: &'a [f64],
    pub n: usize,
    pub p: usize,
}

impl<'a> Rows<'a> {
    pub fn from_dataset(ds: &'a Dataset) -> Rows<'a> {
        Rows {
            x: ds.matrix(),
            n: ds.n_subjects(),
            p: ds.n_covariates(),
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }
}

/// One tree ensemble plus the caches that make per-tree updates O(n):
/// the leaf index of every subject in every tree, and the per-subject
/// ensemble fit (sum of tree contributions).
#[derive(Debug, Clone)]
pub struct EnsembleState {
    pub ens: TreeEnsemble,
    /// `leaf_of[m][i]`: arena index of subject i's leaf in tree m. Arena
    /// indices are stable across grow/prune, so only subjects in the
    /// affected leaf are reassigned on an accepted move.
    leaf_of: Vec<Vec<u32>>,
    /// Per-subject ensemble evaluation (unweighted sum over trees).
    pub fit: Vec<f64>,
    pub n_moves: u64,
    pub n_accepted: u64,
}

impl EnsembleState {
    /// Fresh state for an ensemble whose trees are all root-only, with
    /// every subject assigned to the root.
    pub fn from_ensemble(ens: TreeEnsemble, n: usize) -> EnsembleState {
        Self::new(ens, n)
    }

    fn new(ens: TreeEnsemble, n: usize) -> EnsembleState {
        let m = ens.trees.len();
        let fit = vec![ens.hyper.beta0; n];
        EnsembleState {
            ens,
            leaf_of: vec![vec![0u32; n]; m],
            fit,
            n_moves: 0,
            n_accepted: 0,
        }
    }
}

/// Full sampler state for one chain.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub mu: EnsembleState,
    pub mu_c: EnsembleState,
    pub tau: EnsembleState,
    pub eta: EnsembleState,
    /// Current compliance per subject: observed receipt for the treated,
    /// imputed for controls.
    pub c: Vec<u8>,
    /// Outcome latent utility; NaN for subjects with missing outcome.
    pub y_tilde: Vec<f64>,
    /// Compliance latent utility (all subjects).
    pub c_tilde: Vec<f64>,
    kinds: Vec<CovKind>,
}

impl ModelState {
    /// Neutral start: root-only trees at `beta0/M`, compliance for
    /// controls drawn Bernoulli(observed compliance rate), utilities
    /// drawn once from the initial fits.
    pub fn init(ds: &Dataset, hyper: &Hyper4, rng: &mut CrateRng) -> ModelState {
        let n = ds.n_subjects();
        let p = ds.n_covariates();
        let kinds = ds.tree_kinds();
        let mut state = ModelState {
            mu: EnsembleState::new(TreeEnsemble::new_root_only(hyper.mu, p), n),
            mu_c: EnsembleState::new(TreeEnsemble::new_root_only(hyper.mu_c, p), n),
            tau: EnsembleState::new(TreeEnsemble::new_root_only(hyper.tau, p), n),
            eta: EnsembleState::new(TreeEnsemble::new_root_only(hyper.eta, p), n),
            c: vec![0u8; n],
            y_tilde: vec![f64::NAN; n],
            c_tilde: vec![0.0; n],
            kinds,
        };
        let n_treated = (0..n).filter(|&i| ds.assignment(i) == 1).count();
        let c_bar = if n_treated > 0 {
            (0..n).filter(|&i| ds.assignment(i) == 1 && ds.receipt(i) == 1).count() as f64
                / n_treated as f64
        } else {
            0.5
        };
        for i in 0..n {
            state.c[i] = match ds.c_obs(i) {
                Some(c) => c,
                None => (rng.gen::<f64>() < c_bar) as u8,
            };
        }
        draw_latent_utilities(&mut state, ds, rng);
        state
    }

    /// Outcome-scale linear predictor at subject i under current fits
    /// and compliance.
    pub fn outcome_mean(&self, ds: &Dataset, i: usize) -> f64 {
        let c = self.c[i] as f64;
        let a = ds.assignment(i) as f64;
        self.mu.fit[i] + c * self.mu_c.fit[i] + c * a * self.tau.fit[i]
    }

    /// Largest discrepancy between a cached fit and a fresh ensemble
    /// evaluation, across all four ensembles and all subjects.
    pub fn audit_caches(&self, ds: &Dataset) -> f64 {
        let mut worst = 0.0f64;
        for es in [&self.mu, &self.mu_c, &self.tau, &self.eta] {
            for i in 0..ds.n_subjects() {
                let direct = es.ens.evaluate(ds.row(i));
                worst = worst.max((direct - es.fit[i]).abs());
                for (m, tree) in es.ens.trees.iter().enumerate() {
                    let leaf = tree.leaf_index(ds.row(i));
                    if leaf != es.leaf_of[m][i] as usize {
                        return f64::INFINITY;
                    }
                }
            }
        }
        worst
    }
}

/// Draw latent compliance for every control subject from its exact
/// conditional: prior odds Phi(eta) against 1-Phi(eta), reweighted by the
/// outcome likelihood under the complier/never-taker arms when the
/// outcome is observed.
pub fn impute_compliance(state: &mut ModelState, ds: &Dataset, rng: &mut CrateRng) {
    for i in 0..ds.n_subjects() {
        if ds.assignment(i) == 1 {
            continue;
        }
        let p_c = phi_clamped(state.eta.fit[i]);
        let q = match ds.outcome(i) {
            None => p_c,
            Some(y) => {
                let p1_c = phi_clamped(state.mu.fit[i] + state.mu_c.fit[i]);
                let p1_n = phi_clamped(state.mu.fit[i]);
                let (ly_c, ly_n) = if y == 1 {
                    (p1_c, p1_n)
                } else {
                    (1.0 - p1_c, 1.0 - p1_n)
                };
                p_c * ly_c / (p_c * ly_c + (1.0 - p_c) * ly_n)
            }
        };
        state.c[i] = (rng.gen::<f64>() < q) as u8;
    }
}

/// Albert-Chib step: truncated-normal utilities consistent with the
/// observed outcome and current compliance.
pub fn draw_latent_utilities(state: &mut ModelState, ds: &Dataset, rng: &mut CrateRng) {
    for i in 0..ds.n_subjects() {
        match ds.outcome(i) {
            Some(y) => {
                let f = state.outcome_mean(ds, i);
                state.y_tilde[i] = if y == 1 {
                    truncnorm_positive(f, rng)
                } else {
                    truncnorm_negative(f, rng)
                };
            }
            None => state.y_tilde[i] = f64::NAN,
        }
        let e = state.eta.fit[i];
        state.c_tilde[i] = if state.c[i] == 1 {
            truncnorm_positive(e, rng)
        } else {
            truncnorm_negative(e, rng)
        };
    }
}

/// Log of the leaf-marginal likelihood contribution, up to the additive
/// sum-of-squares term that cancels in every ratio the sampler forms.
/// Leaf prior Normal(m0, s2); sw2 = sum of squared weights, swr = sum of
/// weighted partial residuals over subjects in the leaf.
#[inline]
pub fn leaf_log_ml(sw2: f64, swr: f64, m0: f64, s2: f64) -> f64 {
    let prec = 1.0 / s2 + sw2;
    let mhat = (m0 / s2 + swr) / prec;
    0.5 * (1.0 / (s2 * prec)).ln() + 0.5 * (mhat * mhat * prec - m0 * m0 / s2)
}

/// One backfitting update of tree `m`: propose grow or prune against the
/// jump-marginalized likelihood, then redraw every leaf jump from its
/// conjugate posterior and refresh the fit and residual caches.
///
/// `w` is the subject weight (zero excludes a subject from the
/// likelihood); `resid` holds the full residual z_i - f_i for the
/// ensemble's latent target and is updated in place.
///
/// Returns whether a structure move was accepted.
pub fn update_tree(
    es: &mut EnsembleState,
    m: usize,
    rows: &Rows,
    kinds: &[CovKind],
    w: &[f64],
    resid: &mut [f64],
    rng: &mut CrateRng,
) -> bool {
    let n = rows.n;
    let m0 = es.ens.leaf_prior_mean();
    let s2 = es.ens.leaf_prior_var();

    // Per-leaf sufficient statistics (sum w^2, sum w*r) under the current
    // structure, plus each subject's current tree contribution.
    let mut g_old = vec![0.0f64; n];
    let mut stats = vec![(0.0f64, 0.0f64); es.ens.trees[m].arena_len()];
    for i in 0..n {
        let leaf = es.leaf_of[m][i] as usize;
        let g = es.ens.trees[m].jump_at(leaf);
        g_old[i] = g;
        let wi = w[i];
        if wi != 0.0 {
            let r = resid[i] + wi * g;
            stats[leaf].0 += wi * wi;
            stats[leaf].1 += wi * r;
        }
    }

    es.n_moves += 1;
    let mut accepted = false;
    if let Some(prop) = propose_structure(&es.ens.trees[m], kinds, &es.ens.theta, rng) {
        match prop.kind {
            MoveKind::Grow => {
                // Split the chosen leaf's statistics by the proposed rule.
                let mut sl = (0.0f64, 0.0f64);
                let mut sr = (0.0f64, 0.0f64);
                for i in 0..n {
                    if es.leaf_of[m][i] as usize != prop.node || w[i] == 0.0 {
                        continue;
                    }
                    let r = resid[i] + w[i] * g_old[i];
                    let s = if prop.rule.goes_left(rows.row(i)) {
                        &mut sl
                    } else {
                        &mut sr
                    };
                    s.0 += w[i] * w[i];
                    s.1 += w[i] * r;
                }
                let (osw2, oswr) = stats[prop.node];
                let delta_ml = leaf_log_ml(sl.0, sl.1, m0, s2)
                    + leaf_log_ml(sr.0, sr.1, m0, s2)
                    - leaf_log_ml(osw2, oswr, m0, s2);
                if rng.gen::<f64>().ln() < prop.log_ratio + delta_ml {
                    accepted = true;
                    if stats.len() < prop.tree.arena_len() {
                        stats.resize(prop.tree.arena_len(), (0.0, 0.0));
                    }
                    stats[prop.left] = sl;
                    stats[prop.right] = sr;
                    for i in 0..n {
                        if es.leaf_of[m][i] as usize == prop.node {
                            es.leaf_of[m][i] = if prop.rule.goes_left(rows.row(i)) {
                                prop.left as u32
                            } else {
                                prop.right as u32
                            };
                        }
                    }
                    es.ens.trees[m] = prop.tree;
                }
            }
            MoveKind::Prune => {
                let merged = (
                    stats[prop.left].0 + stats[prop.right].0,
                    stats[prop.left].1 + stats[prop.right].1,
                );
                let delta_ml = leaf_log_ml(merged.0, merged.1, m0, s2)
                    - leaf_log_ml(stats[prop.left].0, stats[prop.left].1, m0, s2)
                    - leaf_log_ml(stats[prop.right].0, stats[prop.right].1, m0, s2);
                if rng.gen::<f64>().ln() < prop.log_ratio + delta_ml {
                    accepted = true;
                    stats[prop.node] = merged;
                    for i in 0..n {
                        let l = es.leaf_of[m][i] as usize;
                        if l == prop.left || l == prop.right {
                            es.leaf_of[m][i] = prop.node as u32;
                        }
                    }
                    es.ens.trees[m] = prop.tree;
                }
            }
        }
    }
    if accepted {
        es.n_accepted += 1;
    }

    // Redraw every leaf jump from Normal(mhat, 1/prec), then propagate
    // the change through the fit and residual caches.
    let tree = &mut es.ens.trees[m];
    for leaf in tree.leaves() {
        let (sw2, swr) = stats[leaf];
        let prec = 1.0 / s2 + sw2;
        let mhat = (m0 / s2 + swr) / prec;
        let z: f64 = rng.sample(rand::distributions::Open01);
        tree.set_jump(leaf, mhat + phi_inv(z) / prec.sqrt());
    }
    for i in 0..n {
        let g_new = tree.jump_at(es.leaf_of[m][i] as usize);
        let d = g_new - g_old[i];
        if d != 0.0 {
            es.fit[i] += d;
            resid[i] -= w[i] * d;
        }
    }
    accepted
}

/// Dirichlet-multinomial update of the splitting probabilities, then an
/// independence-Metropolis refresh of the concentration scalar from its
/// Beta(0.5, 1)-on-xi/(xi+p) prior.
pub fn update_sparsity(es: &mut EnsembleState, p: usize, rng: &mut CrateRng) {
    if p == 0 {
        return;
    }
    let counts = es.ens.split_counts(p);
    let alphas: Vec<f64> = counts
        .iter()
        .map(|&c| es.ens.xi / p as f64 + c as f64)
        .collect();
    es.ens.theta = sample_dirichlet(&alphas, rng);
    let xi_prop = sample_xi_prior(p, rng);
    // Prior proposal: the acceptance ratio reduces to the symmetric
    // Dirichlet density ratio at the current theta.
    let log_acc = symmetric_dirichlet_log_density(&es.ens.theta, xi_prop / p as f64)
        - symmetric_dirichlet_log_density(&es.ens.theta, es.ens.xi / p as f64);
    if rng.gen::<f64>().ln() < log_acc {
        es.ens.xi = xi_prop;
    }
}

/// One full Gibbs iteration in the fixed order: compliance, utilities,
/// backfitting sweep (mu, mu_c, tau, eta), sparsity.
pub fn gibbs_iteration(state: &mut ModelState, ds: &Dataset, rng: &mut CrateRng) {
    let n = ds.n_subjects();
    let p = ds.n_covariates();
    impute_compliance(state, ds, rng);
    draw_latent_utilities(state, ds, rng);

    // Weights double as each ensemble's coefficient inside the outcome
    // utility mean, which keeps the shared residual consistent across
    // the three outcome sweeps.
    let mut w_mu = vec![0.0f64; n];
    let mut w_mu_c = vec![0.0f64; n];
    let mut w_tau = vec![0.0f64; n];
    let w_eta = vec![1.0f64; n];
    let mut resid_y = vec![0.0f64; n];
    let mut resid_c = vec![0.0f64; n];
    for i in 0..n {
        if !ds.outcome_missing(i) {
            let c = state.c[i] as f64;
            w_mu[i] = 1.0;
            w_mu_c[i] = c;
            w_tau[i] = c * ds.assignment(i) as f64;
            resid_y[i] = state.y_tilde[i] - state.outcome_mean(ds, i);
        }
        resid_c[i] = state.c_tilde[i] - state.eta.fit[i];
    }

    let kinds = state.kinds.clone();
    let rows = Rows::from_dataset(ds);
    for m in 0..state.mu.ens.trees.len() {
        update_tree(&mut state.mu, m, &rows, &kinds, &w_mu, &mut resid_y, rng);
    }
    for m in 0..state.mu_c.ens.trees.len() {
        update_tree(&mut state.mu_c, m, &rows, &kinds, &w_mu_c, &mut resid_y, rng);
    }
    for m in 0..state.tau.ens.trees.len() {
        update_tree(&mut state.tau, m, &rows, &kinds, &w_tau, &mut resid_y, rng);
    }
    for m in 0..state.eta.ens.trees.len() {
        update_tree(&mut state.eta, m, &rows, &kinds, &w_eta, &mut resid_c, rng);
    }

    update_sparsity(&mut state.mu, p, rng);
    update_sparsity(&mut state.mu_c, p, rng);
    update_sparsity(&mut state.tau, p, rng);
    update_sparsity(&mut state.eta, p, rng);
}

/// Where to record the four ensemble fits at each kept iteration.
#[derive(Debug, Clone)]
pub enum EvalPoints {
    /// Every training subject; reads the fit caches directly.
    TrainingSubjects,
    /// Explicit row-major points on the model's covariate scale.
    Matrix { x: Vec<f64>, n_points: usize },
}

impl EvalPoints {
    pub fn count(&self, ds: &Dataset) -> usize {
        match self {
            EvalPoints::TrainingSubjects => ds.n_subjects(),
            EvalPoints::Matrix { n_points, .. } => *n_points,
        }
    }
}

fn record_draw(state: &ModelState, ds: &Dataset, eval: &EvalPoints, out: &mut PosteriorDraws) {
    match eval {
        EvalPoints::TrainingSubjects => {
            out.push_draw(&state.mu.fit, &state.mu_c.fit, &state.tau.fit, &state.eta.fit);
        }
        EvalPoints::Matrix { x, n_points } => {
            let p = ds.n_covariates();
            let mut mu = Vec::with_capacity(*n_points);
            let mut mu_c = Vec::with_capacity(*n_points);
            let mut tau = Vec::with_capacity(*n_points);
            let mut eta = Vec::with_capacity(*n_points);
            for j in 0..*n_points {
                let row = &x[j * p..(j + 1) * p];
                mu.push(state.mu.ens.evaluate(row));
                mu_c.push(state.mu_c.ens.evaluate(row));
                tau.push(state.tau.ens.evaluate(row));
                eta.push(state.eta.ens.evaluate(row));
            }
            out.push_draw(&mu, &mu_c, &tau, &eta);
        }
    }
}

fn run_one_chain(
    ds: &Dataset,
    hyper: &Hyper4,
    cfg: &ChainConfig,
    eval: &EvalPoints,
    chain: usize,
) -> PosteriorDraws {
    let mut rng = stream_rng(cfg.seed, chain as u64);
    let mut state = ModelState::init(ds, hyper, &mut rng);
    let mut out = PosteriorDraws::with_capacity(1, cfg.kept_per_chain(), eval.count(ds));
    for t in 0..cfg.n_iter {
        gibbs_iteration(&mut state, ds, &mut rng);
        if t >= cfg.n_burn && (t - cfg.n_burn) % cfg.thin == 0 {
            record_draw(&state, ds, eval, &mut out);
        }
    }
    out
}

/// Run `cfg.n_chains` independent chains (each on its own RNG stream
/// derived from the seed) and merge the kept draws in chain order. The
/// result is identical for any `threads` value.
pub fn run_chains(
    ds: &Dataset,
    hyper: &Hyper4,
    cfg: &ChainConfig,
    eval: &EvalPoints,
) -> PosteriorDraws {
    cfg.validate().expect("invalid chain config");
    let mut per_chain: Vec<Option<PosteriorDraws>> = (0..cfg.n_chains).map(|_| None).collect();
    if cfg.threads <= 1 || cfg.n_chains == 1 {
        for (chain, slot) in per_chain.iter_mut().enumerate() {
            *slot = Some(run_one_chain(ds, hyper, cfg, eval, chain));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results = std::sync::Mutex::new(&mut per_chain);
        std::thread::scope(|scope| {
            for _ in 0..cfg.threads.min(cfg.n_chains) {
                scope.spawn(|| loop {
                    let chain = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if chain >= cfg.n_chains {
                        break;
                    }
                    let draws = run_one_chain(ds, hyper, cfg, eval, chain);
                    results.lock().unwrap()[chain] = Some(draws);
                });
            }
        });
    }
    let mut merged =
        PosteriorDraws::with_capacity(cfg.n_chains, cfg.kept_per_chain(), eval.count(ds));
    for chain in per_chain {
        merged.append_chain(&chain.expect("chain did not run"));
    }
    merged
}

//! Causal estimands: the model-based conditional LATE posterior, the
//! covariate-free Wald ratio estimator, and a BART-based Wald ratio
//! baseline (T-learner numerator, probit BART denominator).

use crate::data::Dataset;
use crate::draws::{DrawField, PosteriorDraws};
use crate::probit::phi;
use crate::probit_bart::{fit_probit_bart, probit_hyper};
use crate::sampler::{ChainConfig, Rows};

#[derive(Debug, thiserror::Error)]
pub enum EstimandError {
    #[error("an assignment arm is empty")]
    EmptyArm,
    #[error("no treated subject received treatment: Wald ratio undefined")]
    WeakInstrument,
    #[error("no posterior draws")]
    NoDraws,
}

/// Equal-tailed posterior interval endpoints.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// Posterior summary of LATE(x) at one evaluation point.
#[derive(Debug, Clone)]
pub struct LatePosterior {
    pub mean: f64,
    pub ci50: Interval,
    pub ci80: Interval,
    pub ci90: Interval,
    pub ci95: Interval,
}

/// Linear-interpolated sample quantile of a sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0);
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn equal_tailed(sorted: &[f64], level: f64) -> Interval {
    let a = (1.0 - level) / 2.0;
    Interval {
        lo: quantile_sorted(sorted, a),
        hi: quantile_sorted(sorted, 1.0 - a),
    }
}

/// Summarize the LATE draws at one evaluation point.
pub fn late_from_draws(
    draws: &PosteriorDraws,
    point: usize,
) -> Result<LatePosterior, EstimandError> {
    if draws.n_draws() == 0 {
        return Err(EstimandError::NoDraws);
    }
    let mut col = draws.column(DrawField::Late, point);
    let mean = col.iter().sum::<f64>() / col.len() as f64;
    col.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(LatePosterior {
        mean,
        ci50: equal_tailed(&col, 0.50),
        ci80: equal_tailed(&col, 0.80),
        ci90: equal_tailed(&col, 0.90),
        ci95: equal_tailed(&col, 0.95),
    })
}

/// The covariate-free Wald / IV ratio with a delta-method standard
/// error.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct WaldEstimate {
    /// Difference of outcome means between assignment arms.
    pub itt_y: f64,
    /// Receipt rate among the assigned (one-sided compliance makes the
    /// control-arm receipt rate identically zero).
    pub itt_r: f64,
    pub late: f64,
    pub se: f64,
}

/// Constant Wald estimator over subjects with observed outcomes.
pub fn wald_constant(ds: &Dataset) -> Result<WaldEstimate, EstimandError> {
    let mut y1 = Vec::new();
    let mut y0 = Vec::new();
    let mut r1 = Vec::new();
    // Receipt among treated subjects with observed outcomes, paired with
    // y for the delta-method covariance.
    let mut y1r1 = Vec::new();
    for i in 0..ds.n_subjects() {
        let Some(y) = ds.outcome(i) else { continue };
        if ds.assignment(i) == 1 {
            y1.push(y as f64);
            r1.push(ds.receipt(i) as f64);
            y1r1.push((y as f64, ds.receipt(i) as f64));
        } else {
            y0.push(y as f64);
        }
    }
    if y1.is_empty() || y0.is_empty() {
        return Err(EstimandError::EmptyArm);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64], m: f64| {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0).max(1.0)
    };
    let my1 = mean(&y1);
    let my0 = mean(&y0);
    let mr1 = mean(&r1);
    let itt_y = my1 - my0;
    let itt_r = mr1;
    if itt_r <= 0.0 {
        return Err(EstimandError::WeakInstrument);
    }
    let late = itt_y / itt_r;
    let n1 = y1.len() as f64;
    let n0 = y0.len() as f64;
    let v_itt_y = var(&y1, my1) / n1 + var(&y0, my0) / n0;
    let v_itt_r = var(&r1, mr1) / n1;
    let cov_yr = y1r1
        .iter()
        .map(|&(y, r)| (y - my1) * (r - mr1))
        .sum::<f64>()
        / (n1 - 1.0).max(1.0)
        / n1;
    // First-order variance of the ratio itt_y / itt_r.
    let se = (v_itt_y / (itt_r * itt_r) + itt_y * itt_y * v_itt_r / itt_r.powi(4)
        - 2.0 * itt_y * cov_yr / itt_r.powi(3))
    .max(0.0)
    .sqrt();
    Ok(WaldEstimate { itt_y, itt_r, late, se })
}

/// Per-point output of the BART-based Wald ratio.
#[derive(Debug, Clone)]
pub struct WaldBartPoint {
    pub mean: f64,
    pub ci95: Interval,
    /// The denominator fell below the clamp for some draws: the local
    /// instrument is weak and the ratio untrustworthy.
    pub weak_flag: bool,
}

pub const WALD_BART_DENOM_CLAMP: f64 = 1e-3;

/// Combine paired numerator and denominator probability draws into
/// ratio summaries, clamping near-zero denominators.
pub fn combine_wald_ratio(
    num: &[f64],
    den: &[f64],
) -> WaldBartPoint {
    assert_eq!(num.len(), den.len());
    let mut flagged = false;
    let mut ratios: Vec<f64> = num
        .iter()
        .zip(den)
        .map(|(&n, &d)| {
            let d = if d < WALD_BART_DENOM_CLAMP {
                flagged = true;
                WALD_BART_DENOM_CLAMP
            } else {
                d
            };
            n / d
        })
        .collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    WaldBartPoint {
        mean,
        ci95: equal_tailed(&ratios, 0.95),
        weak_flag: flagged,
    }
}

/// Wald-BART baseline: probit-BART fits of Y per assignment arm
/// (T-learner) for the numerator and of R among the assigned for the
/// denominator, combined draw-by-draw into a ratio at each evaluation
/// point. Evaluation points are the training subjects.
pub fn wald_bart(ds: &Dataset, cfg: &ChainConfig) -> Result<Vec<WaldBartPoint>, EstimandError> {
    let p = ds.n_covariates();
    let kinds = ds.tree_kinds();
    let mut x1 = Vec::new();
    let mut y1 = Vec::new();
    let mut x0 = Vec::new();
    let mut y0 = Vec::new();
    let mut xr = Vec::new();
    let mut r1 = Vec::new();
    for i in 0..ds.n_subjects() {
        if ds.assignment(i) == 1 {
            xr.extend_from_slice(ds.row(i));
            r1.push(ds.receipt(i));
            if let Some(y) = ds.outcome(i) {
                x1.extend_from_slice(ds.row(i));
                y1.push(y);
            }
        } else if let Some(y) = ds.outcome(i) {
            x0.extend_from_slice(ds.row(i));
            y0.push(y);
        }
    }
    if y1.is_empty() || y0.is_empty() || r1.is_empty() {
        return Err(EstimandError::EmptyArm);
    }
    let eval = Rows::from_dataset(ds);
    let m = 50;
    let fits = [
        (Rows { x: &x1, n: y1.len(), p }, &y1, 0u64),
        (Rows { x: &x0, n: y0.len(), p }, &y0, 1000u64),
        (Rows { x: &xr, n: r1.len(), p }, &r1, 2000u64),
    ]
    .map(|(rows, y, offset)| {
        fit_probit_bart(&rows, &kinds, y, probit_hyper(y, m), cfg, &eval, offset)
    });
    let [f1, f0, fr] = fits;
    let n_draws = f1.n_draws();
    let mut out = Vec::with_capacity(ds.n_subjects());
    for j in 0..ds.n_subjects() {
        let num: Vec<f64> = (0..n_draws)
            .map(|t| phi(f1.value(t, j)) - phi(f0.value(t, j)))
            .collect();
        let den: Vec<f64> = (0..n_draws).map(|t| phi(fr.value(t, j))).collect();
        out.push(combine_wald_ratio(&num, &den));
    }
    Ok(out)
}

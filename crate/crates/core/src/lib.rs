//! Joint Bayesian causal forest for binary outcomes under one-sided
//! noncompliance, with Wald-style baselines, synthetic benchmarks and
//! summary-tree postprocessing of conditional local average treatment
//! effects.

pub mod data;
pub mod draws;
pub mod estimands;
pub mod priors;
pub mod probit;
pub mod probit_bart;
pub mod rng;
pub mod sampler;
pub mod simbench;
pub mod summarize;
pub mod trees;

pub use data::{load_csv, observed_rates, scale_covariate, Dataset, SchemaSpec};
pub use draws::{DrawField, PosteriorDraws};
pub use priors::{default_hyper, late_prior_bound, EnsembleHyper, EnsembleLabel, Hyper4};
pub use sampler::{run_chains, ChainConfig, EvalPoints, ModelState};
pub use summarize::{fit_the_fit, subgroup_posterior, SubgroupPosterior, SummaryNode, SummaryTree};
pub use trees::{DecisionTree, TreeEnsemble};

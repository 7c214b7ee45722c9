//! Flat INI-style configuration: `[section]` headers with `key = value`
//! lines, `#` or `;` comments. Unknown sections or keys are rejected so
//! typos fail loudly. Command-line flags override file values.

use std::collections::BTreeMap;
use std::path::Path;

use bcf_late_core::data::{ColumnSpec, CovariateKind, SchemaSpec};
use bcf_late_core::priors::HyperTweak;
use bcf_late_core::sampler::ChainConfig;

use crate::AppError;

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    /// section -> key -> value, in file order within each section.
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

const KNOWN: &[(&str, &[&str])] = &[
    ("chain", &["chains", "iters", "burn", "thin", "seed", "threads"]),
    (
        "hyper",
        &[
            "trees",
            "mu_sigma",
            "mu_c_sigma",
            "tau_sigma",
            "eta_sigma",
            "mu_beta0",
            "mu_c_beta0",
            "tau_beta0",
            "eta_beta0",
        ],
    ),
    ("data", &["assignment", "receipt", "outcome", "covariates"]),
    ("simulate", &["study", "n", "p", "reps", "methods"]),
    ("summarize", &["max_depth", "min_leaf_frac"]),
];

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ConfigFile, AppError> {
        let mut cfg = ConfigFile::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                if !KNOWN.iter().any(|(s, _)| *s == section) {
                    return Err(AppError::Usage(format!(
                        "config line {}: unknown section [{section}]; known sections: {}",
                        lineno + 1,
                        KNOWN.iter().map(|(s, _)| *s).collect::<Vec<_>>().join(", ")
                    )));
                }
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(AppError::Usage(format!(
                    "config line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let key = k.trim().to_string();
            if section.is_empty() {
                return Err(AppError::Usage(format!(
                    "config line {}: key `{key}` appears before any [section]",
                    lineno + 1
                )));
            }
            let keys = KNOWN.iter().find(|(s, _)| *s == section).unwrap().1;
            if !keys.contains(&key.as_str()) {
                return Err(AppError::Usage(format!(
                    "config line {}: unknown key `{key}` in [{section}]; valid keys: {}",
                    lineno + 1,
                    keys.join(", ")
                )));
            }
            cfg.sections
                .entry(section.clone())
                .or_default()
                .insert(key, v.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    fn get_parsed<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
    ) -> Result<Option<T>, AppError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                AppError::Usage(format!("config [{section}] {key} = `{v}`: cannot parse"))
            }),
        }
    }

    /// Chain settings: file values over built-in defaults, then
    /// command-line flags over both.
    pub fn chain_config(&self, flags: &ChainFlags) -> Result<ChainConfig, AppError> {
        let mut c = ChainConfig::default();
        if let Some(v) = self.get_parsed("chain", "chains")? {
            c.n_chains = v;
        }
        if let Some(v) = self.get_parsed("chain", "iters")? {
            c.n_iter = v;
        }
        let file_burn: Option<usize> = self.get_parsed("chain", "burn")?;
        if let Some(v) = file_burn {
            c.n_burn = v;
        }
        if let Some(v) = self.get_parsed("chain", "thin")? {
            c.thin = v;
        }
        if let Some(v) = self.get_parsed("chain", "seed")? {
            c.seed = v;
        }
        if let Some(v) = self.get_parsed("chain", "threads")? {
            c.threads = v;
        }
        if let Some(v) = flags.chains {
            c.n_chains = v;
        }
        if let Some(v) = flags.iters {
            c.n_iter = v;
        }
        if let Some(v) = flags.burn {
            c.n_burn = v;
        } else if file_burn.is_none() && c.n_iter != ChainConfig::default().n_iter {
            // Burn-in was never set explicitly: keep it at half of the
            // requested iterations.
            c.n_burn = c.n_iter / 2;
        }
        if let Some(v) = flags.thin {
            c.thin = v;
        }
        if let Some(v) = flags.seed {
            c.seed = v;
        }
        if let Some(v) = flags.threads {
            c.threads = v;
        }
        if c.n_chains == 0 {
            return Err(AppError::Usage("chains must be >= 1".into()));
        }
        if c.n_burn >= c.n_iter {
            return Err(AppError::Usage(format!(
                "burn ({}) must be smaller than iters ({})",
                c.n_burn, c.n_iter
            )));
        }
        if c.thin == 0 {
            return Err(AppError::Usage("thin must be >= 1".into()));
        }
        Ok(c)
    }

    /// Collect [hyper] overrides; they are applied on top of the
    /// data-derived defaults.
    pub fn hyper_tweak(&self) -> Result<HyperTweak, AppError> {
        let mut t = HyperTweak::default();
        t.trees = self.get_parsed::<usize>("hyper", "trees")?;
        if t.trees == Some(0) {
            return Err(AppError::Usage("hyper trees must be >= 1".into()));
        }
        for (key, slot) in [
            ("mu_sigma", &mut t.mu_sigma),
            ("mu_c_sigma", &mut t.mu_c_sigma),
            ("tau_sigma", &mut t.tau_sigma),
            ("eta_sigma", &mut t.eta_sigma),
        ] {
            *slot = self.get_parsed::<f64>("hyper", key)?;
            if let Some(v) = *slot {
                if !(v > 0.0) {
                    return Err(AppError::Usage(format!("hyper {key} must be > 0")));
                }
            }
        }
        for (key, slot) in [
            ("mu_beta0", &mut t.mu_beta0),
            ("mu_c_beta0", &mut t.mu_c_beta0),
            ("tau_beta0", &mut t.tau_beta0),
            ("eta_beta0", &mut t.eta_beta0),
        ] {
            *slot = self.get_parsed::<f64>("hyper", key)?;
            if let Some(v) = *slot {
                if !v.is_finite() {
                    return Err(AppError::Usage(format!("hyper {key} must be finite")));
                }
            }
        }
        Ok(t)
    }
}

/// Chain-related command-line flags shared by several subcommands.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct ChainFlags {
    /// Number of independent MCMC chains.
    #[arg(long)]
    pub chains: Option<usize>,
    /// Total iterations per chain (including burn-in).
    #[arg(long)]
    pub iters: Option<usize>,
    /// Burn-in iterations per chain (default: half of iters).
    #[arg(long)]
    pub burn: Option<usize>,
    /// Keep every thin-th post-burn-in draw.
    #[arg(long)]
    pub thin: Option<usize>,
    /// Master random seed; all streams derive from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 and 8 give identical output.
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Parse a covariate list: comma-separated entries, each `name`
/// (continuous), `name:ordered:K` (ordered with K levels), or
/// `name:cat:a|b|c` (unordered with named levels).
pub fn parse_covariates(spec: &str) -> Result<Vec<ColumnSpec>, AppError> {
    let mut out = Vec::new();
    for entry in spec.split(',') {
        let entry = entry.trim();
        if entry.is_empty() {
            continue;
        }
        let mut parts = entry.splitn(3, ':');
        let name = parts.next().unwrap().to_string();
        let kind = match (parts.next(), parts.next()) {
            (None, _) => CovariateKind::Continuous,
            (Some("ordered"), Some(k)) => {
                let n_levels: usize = k.parse().map_err(|_| {
                    AppError::Usage(format!("covariate `{entry}`: bad level count `{k}`"))
                })?;
                CovariateKind::Ordered { n_levels }
            }
            (Some("cat"), Some(levels)) => CovariateKind::Categorical {
                levels: levels.split('|').map(str::to_string).collect(),
            },
            _ => {
                return Err(AppError::Usage(format!(
                    "covariate `{entry}`: expected `name`, `name:ordered:K`, or `name:cat:a|b`"
                )))
            }
        };
        out.push(ColumnSpec { name, kind });
    }
    if out.is_empty() {
        return Err(AppError::Usage("covariate list is empty".into()));
    }
    Ok(out)
}

/// Schema-related flags; values fall back to the [data] config section.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct SchemaFlags {
    /// Assignment (instrument) column name.
    #[arg(long)]
    pub assignment: Option<String>,
    /// Treatment-receipt column name.
    #[arg(long)]
    pub receipt: Option<String>,
    /// Binary outcome column name (empty cells = missing).
    #[arg(long)]
    pub outcome: Option<String>,
    /// Covariates: `name`, `name:ordered:K`, or `name:cat:a|b`, comma-separated.
    #[arg(long)]
    pub covariates: Option<String>,
}

pub fn resolve_schema(cfg: &ConfigFile, flags: &SchemaFlags) -> Result<SchemaSpec, AppError> {
    let pick = |flag: &Option<String>, key: &str| -> Result<String, AppError> {
        flag.clone()
            .or_else(|| cfg.get("data", key).map(str::to_string))
            .ok_or_else(|| {
                AppError::Usage(format!(
                    "missing `{key}`: pass --{key} or set it in the [data] config section"
                ))
            })
    };
    let covariates = parse_covariates(&pick(&flags.covariates, "covariates")?)?;
    Ok(SchemaSpec {
        covariates,
        assignment: pick(&flags.assignment, "assignment")?,
        receipt: pick(&flags.receipt, "receipt")?,
        outcome: pick(&flags.outcome, "outcome")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let cfg = ConfigFile::parse("[chain]\nchains = 2\niters = 100\n# comment\n").unwrap();
        let c = cfg.chain_config(&ChainFlags::default()).unwrap();
        assert_eq!(c.n_chains, 2);
        assert_eq!(c.n_iter, 100);
        assert!(ConfigFile::parse("[chain]\nchain = 2\n").is_err());
        assert!(ConfigFile::parse("[nonsense]\n").is_err());
        assert!(ConfigFile::parse("orphan = 1\n").is_err());
    }

    #[test]
    fn flags_override_file() {
        let cfg = ConfigFile::parse("[chain]\nchains = 2\nseed = 5\n").unwrap();
        let flags = ChainFlags { chains: Some(3), ..Default::default() };
        let c = cfg.chain_config(&flags).unwrap();
        assert_eq!(c.n_chains, 3);
        assert_eq!(c.seed, 5);
    }

    #[test]
    fn burn_follows_iters_flag() {
        let cfg = ConfigFile::default();
        let flags = ChainFlags { iters: Some(10), ..Default::default() };
        let c = cfg.chain_config(&flags).unwrap();
        assert_eq!(c.n_burn, 5);
        let bad = ChainFlags { iters: Some(10), burn: Some(10), ..Default::default() };
        assert!(cfg.chain_config(&bad).is_err());
    }

    #[test]
    fn covariate_syntax() {
        let cols = parse_covariates("age, sex:cat:m|f, grade:ordered:5").unwrap();
        assert_eq!(cols.len(), 3);
        assert_eq!(cols[0].name, "age");
        assert!(matches!(cols[1].kind, CovariateKind::Categorical { .. }));
        assert!(matches!(cols[2].kind, CovariateKind::Ordered { n_levels: 5 }));
        assert!(parse_covariates("x:weird:1").is_err());
        assert!(parse_covariates("").is_err());
    }
}

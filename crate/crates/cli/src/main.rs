//! `bcf-late`: fit a joint Bayesian causal forest for binary outcomes
//! under one-sided noncompliance, run synthetic benchmark studies, and
//! summarize posterior effect heterogeneity.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bcf_late_core::data::load_csv;
use bcf_late_core::draws::{fmt_sig, DrawField, PosteriorDraws};
use bcf_late_core::estimands::late_from_draws;
use bcf_late_core::priors::default_hyper;
use bcf_late_core::sampler::{run_chains, EvalPoints};
use bcf_late_core::simbench::{
    replication_estimates, run_replications, DgpName, DgpSpec, Method, MetricsReport,
};
use bcf_late_core::summarize::{fit_the_fit, subgroup_posterior};

use config::{resolve_schema, ChainFlags, ConfigFile, SchemaFlags};

#[derive(Debug)]
pub enum AppError {
    /// Bad flags, config, or input schema: exit code 2.
    Usage(String),
    /// Failure while doing the work: exit code 3.
    Runtime(String),
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Usage(m) | AppError::Runtime(m) => f.write_str(m),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> AppError {
    AppError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "bcf-late",
    about = "Bayesian causal forest for conditional LATEs with binary outcomes \
             under one-sided noncompliance",
    version
)]
struct Cli {
    /// INI-style config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if absent).
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a synthetic benchmark study and score the methods against the
    /// known effect surface.
    Simulate {
        /// Study name: study1_constant, study1_weak, study2_simple, study3_complex.
        #[arg(long)]
        study: Option<String>,
        /// Sample size per replication.
        #[arg(long)]
        n: Option<usize>,
        /// Number of covariates (noise dimensions beyond the study minimum).
        #[arg(long)]
        p: Option<usize>,
        /// Number of independent replications.
        #[arg(long)]
        reps: Option<usize>,
        /// Comma-separated methods: bcf_late, wald_constant, wald_bart, oracle.
        #[arg(long)]
        methods: Option<String>,
        #[command(flatten)]
        chain: ChainFlags,
    },
    /// Fit the model to a CSV dataset and persist posterior draws.
    Fit {
        /// CSV file with a header row; empty outcome cells mean missing.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        schema: SchemaFlags,
        #[command(flatten)]
        chain: ChainFlags,
    },
    /// Build a summary tree over posterior-mean effects from a draws file.
    Summarize {
        /// Draws file produced by `fit`.
        #[arg(long)]
        draws: PathBuf,
        /// The CSV the draws were fit to (defines the covariates).
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        schema: SchemaFlags,
        /// Maximum tree depth.
        #[arg(long)]
        max_depth: Option<usize>,
        /// Minimum leaf size as a fraction of the sample.
        #[arg(long)]
        min_leaf_frac: Option<f64>,
    },
    /// Combine one or more benchmark metrics files into a single table.
    Report {
        /// metrics.json files written by `simulate`.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| AppError::Usage(format!("cannot create {}: {e}", cli.out.display())))?;
    match cli.command {
        Command::Simulate { study, n, p, reps, methods, chain } => {
            cmd_simulate(&cfg, &cli.out, study, n, p, reps, methods, &chain)
        }
        Command::Fit { data, schema, chain } => cmd_fit(&cfg, &cli.out, &data, &schema, &chain),
        Command::Summarize { draws, data, schema, max_depth, min_leaf_frac } => {
            cmd_summarize(&cfg, &cli.out, &draws, &data, &schema, max_depth, min_leaf_frac)
        }
        Command::Report { metrics } => cmd_report(&cli.out, &metrics),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), AppError> {
    std::fs::write(path, text)
        .map_err(|e| AppError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn parse_methods(spec: &str) -> Result<Vec<Method>, AppError> {
    let mut out = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m = match name {
            "bcf_late" => Method::BcfLate,
            "wald_constant" => Method::WaldConstant,
            "wald_bart" => Method::WaldBart,
            "oracle" => Method::Oracle,
            _ => {
                return Err(AppError::Usage(format!(
                    "unknown method `{name}`; valid: bcf_late, wald_constant, wald_bart, oracle"
                )))
            }
        };
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(AppError::Usage("method list is empty".into()));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    cfg: &ConfigFile,
    out: &Path,
    study: Option<String>,
    n: Option<usize>,
    p: Option<usize>,
    reps: Option<usize>,
    methods: Option<String>,
    chain: &ChainFlags,
) -> Result<(), AppError> {
    let study_name = study
        .or_else(|| cfg.get("simulate", "study").map(str::to_string))
        .ok_or_else(|| AppError::Usage("missing --study".into()))?;
    let name = DgpName::parse(&study_name).ok_or_else(|| {
        AppError::Usage(format!(
            "unknown study `{study_name}`; valid names: {}",
            DgpName::ALL_NAMES.join(", ")
        ))
    })?;
    let parse_cfg = |key: &str| -> Result<Option<usize>, AppError> {
        match cfg.get("simulate", key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                AppError::Usage(format!("config [simulate] {key} = `{v}`: cannot parse"))
            }),
        }
    };
    let n = n.or(parse_cfg("n")?).unwrap_or(2000);
    let p = p.or(parse_cfg("p")?).unwrap_or_else(|| name.min_p());
    let reps = reps.or(parse_cfg("reps")?).unwrap_or(20);
    if reps == 0 {
        return Err(AppError::Usage("reps must be >= 1".into()));
    }
    let methods_spec = methods
        .or_else(|| cfg.get("simulate", "methods").map(str::to_string))
        .unwrap_or_else(|| "bcf_late,wald_constant,wald_bart".to_string());
    let methods = parse_methods(&methods_spec)?;
    let chain_cfg = cfg.chain_config(chain)?;
    let spec = DgpSpec { name, n, p, seed: chain_cfg.seed };
    spec.validate().map_err(AppError::Usage)?;

    let tweak = cfg.hyper_tweak()?;
    let report = run_replications(&spec, &methods, reps, &chain_cfg, &tweak);
    let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
    write_text(&out.join("metrics.json"), &json)?;
    write_text(&out.join("per_rep.csv"), &per_rep_csv(&report))?;

    // Plot-ready per-subject estimates from the first replication.
    let (truth, ests) = replication_estimates(&spec, &methods, 0, &chain_cfg, &tweak);
    let mut pts = String::from("subject,truth,method,mean,lo95,hi95\n");
    for (mi, est) in ests.iter().enumerate() {
        let Ok(est) = est else { continue };
        for i in 0..truth.late.len() {
            let _ = writeln!(
                pts,
                "{i},{},{},{},{},{}",
                fmt_sig(truth.late[i]),
                methods[mi].label(),
                fmt_sig(est.mean[i]),
                fmt_sig(est.lo[i]),
                fmt_sig(est.hi[i])
            );
        }
    }
    write_text(&out.join("points.csv"), &pts)?;

    for f in &report.failures {
        eprintln!("warning: {f}");
    }
    print_report_table(std::slice::from_ref(&report));
    Ok(())
}

fn per_rep_csv(report: &MetricsReport) -> String {
    let mut csv =
        String::from("method,rep,rmse,coverage95,mean_width,interval_score,interval_score_scaled\n");
    for (mi, method) in report.methods.iter().enumerate() {
        for (rep, scores) in report.per_rep[mi].iter().enumerate() {
            let Some(s) = scores else { continue };
            let _ = writeln!(
                csv,
                "{method},{rep},{},{},{},{},{}",
                fmt_sig(s.rmse),
                fmt_sig(s.coverage95),
                fmt_sig(s.mean_width),
                fmt_sig(s.interval_score),
                fmt_sig(s.interval_score_scaled)
            );
        }
    }
    csv
}

fn print_report_table(reports: &[MetricsReport]) {
    println!(
        "{:<16} {:>6} {:>4} {:<14} {:>9} {:>9} {:>9} {:>9}",
        "study", "n", "p", "method", "rmse", "cover95", "width", "int.score"
    );
    for r in reports {
        for (mi, method) in r.methods.iter().enumerate() {
            match &r.aggregate[mi] {
                Some(s) => println!(
                    "{:<16} {:>6} {:>4} {:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                    r.spec.name.label(),
                    r.spec.n,
                    r.spec.p,
                    method,
                    s.rmse,
                    s.coverage95,
                    s.mean_width,
                    s.interval_score_scaled
                ),
                None => println!(
                    "{:<16} {:>6} {:>4} {:<14} (all replications failed)",
                    r.spec.name.label(),
                    r.spec.n,
                    r.spec.p,
                    method
                ),
            }
        }
    }
}

fn cmd_fit(
    cfg: &ConfigFile,
    out: &Path,
    data: &Path,
    schema: &SchemaFlags,
    chain: &ChainFlags,
) -> Result<(), AppError> {
    let schema = resolve_schema(cfg, schema)?;
    let ds = load_csv(data, &schema).map_err(|e| AppError::Usage(e.to_string()))?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    let mut hyper = default_hyper(&ds).map_err(|e| AppError::Usage(e.to_string()))?;
    cfg.hyper_tweak()?.apply(&mut hyper);
    let chain_cfg = cfg.chain_config(chain)?;

    let draws = run_chains(&ds, &hyper, &chain_cfg, &EvalPoints::TrainingSubjects);
    draws.write_bcfl1(&out.join("draws.bcfl1")).map_err(runtime)?;

    // Sidecar: the min-max parameters needed to score new covariate rows
    // on the model's internal scale.
    let sidecar = serde_json::json!({
        "schema": schema,
        "scale_params": ds.scale_params,
    });
    write_text(
        &out.join("scale_params.json"),
        &serde_json::to_string_pretty(&sidecar).map_err(runtime)?,
    )?;

    let mut csv = String::from(
        "subject,late_mean,lo50,hi50,lo80,hi80,lo90,hi90,lo95,hi95,split_rhat\n",
    );
    for i in 0..ds.n_subjects() {
        let lp = late_from_draws(&draws, i).map_err(runtime)?;
        let rhat = draws.split_rhat(DrawField::Late, i);
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{},{},{},{},{},{}",
            fmt_sig(lp.mean),
            fmt_sig(lp.ci50.lo),
            fmt_sig(lp.ci50.hi),
            fmt_sig(lp.ci80.lo),
            fmt_sig(lp.ci80.hi),
            fmt_sig(lp.ci90.lo),
            fmt_sig(lp.ci90.hi),
            fmt_sig(lp.ci95.lo),
            fmt_sig(lp.ci95.hi),
            fmt_sig(rhat)
        );
    }
    write_text(&out.join("late_summary.csv"), &csv)?;
    println!(
        "fit: {} subjects, {} draws ({} chains x {} kept); wrote draws.bcfl1, \
         late_summary.csv, scale_params.json",
        ds.n_subjects(),
        draws.n_draws(),
        chain_cfg.n_chains,
        chain_cfg.kept_per_chain()
    );
    Ok(())
}

fn cmd_summarize(
    cfg: &ConfigFile,
    out: &Path,
    draws_path: &Path,
    data: &Path,
    schema: &SchemaFlags,
    max_depth: Option<usize>,
    min_leaf_frac: Option<f64>,
) -> Result<(), AppError> {
    let schema = resolve_schema(cfg, schema)?;
    let ds = load_csv(data, &schema).map_err(|e| AppError::Usage(e.to_string()))?;
    let draws = PosteriorDraws::read_bcfl1(draws_path)
        .map_err(|e| AppError::Usage(format!("{}: {e}", draws_path.display())))?;
    if draws.n_points != ds.n_subjects() {
        return Err(AppError::Usage(format!(
            "draws cover {} points but the dataset has {} subjects",
            draws.n_points,
            ds.n_subjects()
        )));
    }
    let parse_cfg_f64 = |key: &str| -> Result<Option<f64>, AppError> {
        match cfg.get("summarize", key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                AppError::Usage(format!("config [summarize] {key} = `{v}`: cannot parse"))
            }),
        }
    };
    let max_depth = match max_depth {
        Some(d) => d,
        None => parse_cfg_f64("max_depth")?.map_or(
            bcf_late_core::summarize::DEFAULT_MAX_DEPTH,
            |v| v as usize,
        ),
    };
    let min_leaf_frac = min_leaf_frac
        .or(parse_cfg_f64("min_leaf_frac")?)
        .unwrap_or(bcf_late_core::summarize::DEFAULT_MIN_LEAF_FRAC);
    if !(0.0..=0.5).contains(&min_leaf_frac) {
        return Err(AppError::Usage("min_leaf_frac must be in [0, 0.5]".into()));
    }

    let n = ds.n_subjects();
    let mean_late: Vec<f64> = (0..n)
        .map(|i| {
            let col = draws.column(DrawField::Late, i);
            col.iter().sum::<f64>() / col.len() as f64
        })
        .collect();
    let tree = fit_the_fit(&mean_late, &ds, max_depth, min_leaf_frac);
    write_text(
        &out.join("summary_tree.json"),
        &serde_json::to_string_pretty(&tree).map_err(runtime)?,
    )?;
    write_text(&out.join("summary_tree.dot"), &tree.to_graphviz())?;

    let sp = subgroup_posterior(&tree, &draws);
    let k = sp.mean.len();
    let mut csv = String::from("leaf,fraction,late_mean,lo90,hi90");
    for j in 0..k {
        let _ = write!(csv, ",p_gt_leaf{j}");
    }
    csv.push('\n');
    for j in 0..k {
        let _ = write!(
            csv,
            "{j},{},{},{},{}",
            fmt_sig(sp.fraction[j]),
            fmt_sig(sp.mean[j]),
            fmt_sig(sp.ci90[j].lo),
            fmt_sig(sp.ci90[j].hi)
        );
        for l in 0..k {
            let _ = write!(csv, ",{}", fmt_sig(sp.exceedance[j][l]));
        }
        csv.push('\n');
    }
    write_text(&out.join("subgroups.csv"), &csv)?;
    println!(
        "summarize: {} leaves at depth <= {max_depth}; wrote summary_tree.json, \
         summary_tree.dot, subgroups.csv",
        tree.n_leaves()
    );
    Ok(())
}

fn cmd_report(out: &Path, metrics: &[PathBuf]) -> Result<(), AppError> {
    let mut reports = Vec::new();
    for path in metrics {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let r: MetricsReport = serde_json::from_str(&text)
            .map_err(|e| AppError::Usage(format!("{}: not a metrics file: {e}", path.display())))?;
        reports.push(r);
    }
    let mut csv = String::from(
        "study,n,p,method,reps_ok,rmse,coverage95,mean_width,interval_score,interval_score_scaled\n",
    );
    for r in &reports {
        for (mi, method) in r.methods.iter().enumerate() {
            let ok = r.per_rep[mi].iter().flatten().count();
            let Some(s) = &r.aggregate[mi] else { continue };
            let _ = writeln!(
                csv,
                "{},{},{},{method},{ok},{},{},{},{},{}",
                r.spec.name.label(),
                r.spec.n,
                r.spec.p,
                fmt_sig(s.rmse),
                fmt_sig(s.coverage95),
                fmt_sig(s.mean_width),
                fmt_sig(s.interval_score),
                fmt_sig(s.interval_score_scaled)
            );
        }
    }
    write_text(&out.join("report.csv"), &csv)?;
    print_report_table(&reports);
    Ok(())
}

//! Subcommand implementations. Every command validates its whole
//! configuration before the first `g` evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use nofis_core::flow::{checkpoint_load, checkpoint_save};
use nofis_core::harness::{
    heatmap_flow, heatmap_optimal, run_trials, run_trials_with_models, AggregateReport, GoldenCache, HeatmapGrid,
};
use nofis_core::problems::{make_problem, Golden, Problem};
use serde::Serialize;

use crate::config::{MethodName, Overrides, RunConfig};
use crate::CliError;

#[derive(Debug, Serialize)]
struct RunReport<'a> {
    config: &'a RunConfig,
    golden: Golden,
    aggregate: &'a AggregateReport,
    checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CompareReport<'a> {
    config: &'a RunConfig,
    golden: Golden,
    reports: &'a [AggregateReport],
    failed_methods: &'a [MethodFailure],
}

#[derive(Debug, Serialize)]
struct MethodFailure {
    method: MethodName,
    error: String,
}

/// Outcome of a command that ran to completion; `clean` is false when any
/// trial or method failed.
pub struct Outcome {
    pub clean: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.into()))?;
    fs::write(path, text).map_err(io_err(path))
}

fn resolve_golden(cfg: &RunConfig, problem: &Problem, out_dir: &Path) -> Result<Golden, CliError> {
    match cfg.oracle_mode() {
        None => problem
            .golden()
            .ok_or_else(|| CliError::Config(format!("problem '{}' has no catalog golden value", cfg.problem))),
        Some(mode) => {
            let mut cache = GoldenCache::open(&out_dir.join("golden_cache.json"))?;
            Ok(cache.golden(problem, mode)?)
        }
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(overrides)?;
    Ok(cfg)
}

pub fn run(config: &Path, overrides: &Overrides) -> Result<Outcome, CliError> {
    let cfg = load_config(config, overrides)?;
    let method = cfg.run_method()?;
    let problem = cfg.validate(&[method])?;
    let out_dir = cfg.resolved_out_dir();
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;

    let golden = resolve_golden(&cfg, &problem, &out_dir)?;
    let spec = cfg.method_spec(method, &problem)?;
    let mut checkpoints = Vec::new();
    let aggregate = if cfg.checkpoint && method == MethodName::Nofis {
        let (agg, models) = run_trials_with_models(&spec, &problem, cfg.repeats, cfg.seed, golden)?;
        for (seed, model) in models {
            let path = out_dir.join(format!("model-seed{seed}.nofis"));
            checkpoint_save(&model, &path)?;
            checkpoints.push(path);
        }
        agg
    } else {
        run_trials(&spec, &problem, cfg.repeats, cfg.seed, golden)?
    };
    let report_path = out_dir.join("report.json");
    write_json(
        &report_path,
        &RunReport {
            config: &cfg,
            golden,
            aggregate: &aggregate,
            checkpoints,
        },
    )?;
    println!(
        "{} on {}: mean log10 error {:.3} (median {:.3}) over {} trials, mean calls {:.0}, golden {:.4e} [{}]",
        aggregate.method,
        aggregate.problem,
        aggregate.mean_log_error,
        aggregate.median_log_error,
        aggregate.count,
        aggregate.mean_calls,
        golden.value,
        golden.provenance
    );
    for f in &aggregate.failures {
        eprintln!("trial with seed {} failed: {}", f.seed, f.error);
    }
    println!("report written to {}", report_path.display());
    Ok(Outcome {
        clean: aggregate.failures.is_empty(),
    })
}

pub fn compare(config: &Path, overrides: &Overrides) -> Result<Outcome, CliError> {
    let cfg = load_config(config, overrides)?;
    let methods = cfg.compare_methods()?;
    let problem = cfg.validate(&methods)?;
    let out_dir = cfg.resolved_out_dir();
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let golden = resolve_golden(&cfg, &problem, &out_dir)?;

    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for m in methods {
        let outcome = cfg
            .method_spec(m, &problem)
            .and_then(|spec| Ok(run_trials(&spec, &problem, cfg.repeats, cfg.seed, golden)?));
        match outcome {
            Ok(r) => reports.push(r),
            Err(e) => failed.push(MethodFailure {
                method: m,
                error: e.to_string(),
            }),
        }
    }
    reports.sort_by(|a, b| a.method.cmp(&b.method));

    let mut table = String::from("method,trials,failures,mean_calls,mean_log_error,median_log_error,std_log_error\n");
    for r in &reports {
        table.push_str(&format!(
            "{},{},{},{:.1},{:.6},{:.6},{:.6}\n",
            r.method,
            r.count,
            r.failures.len(),
            r.mean_calls,
            r.mean_log_error,
            r.median_log_error,
            r.std_log_error
        ));
    }
    let csv_path = out_dir.join("compare.csv");
    fs::write(&csv_path, &table).map_err(io_err(&csv_path))?;
    write_json(
        &out_dir.join("compare.json"),
        &CompareReport {
            config: &cfg,
            golden,
            reports: &reports,
            failed_methods: &failed,
        },
    )?;
    print!("{table}");
    for f in &failed {
        eprintln!("method {:?} failed: {}", f.method, f.error);
    }
    let clean = failed.is_empty() && reports.iter().all(|r| r.failures.is_empty());
    Ok(Outcome { clean })
}

pub struct VisualizeArgs {
    pub checkpoint: Option<PathBuf>,
    pub optimal: Option<String>,
    pub grid: HeatmapGrid,
    pub out: PathBuf,
}

pub fn visualize(args: &VisualizeArgs) -> Result<Outcome, CliError> {
    let table = match (&args.checkpoint, &args.optimal) {
        (Some(path), None) => {
            let model = checkpoint_load(path)?;
            heatmap_flow(&model, &args.grid)?
        }
        (None, Some(name)) => {
            let problem = make_problem(name).map_err(|e| CliError::Config(e.to_string()))?;
            let golden = problem
                .golden()
                .ok_or_else(|| CliError::Config(format!("problem '{name}' has no catalog golden value")))?;
            heatmap_optimal(&problem, golden.value, &args.grid)?
        }
        _ => return Err(CliError::Config("give exactly one of --checkpoint or --optimal".into())),
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    table.write_csv(&args.out)?;
    println!(
        "{} cells written to {} (grid mass {:.4})",
        table.density.len(),
        args.out.display(),
        table.total_mass()
    );
    Ok(Outcome { clean: true })
}

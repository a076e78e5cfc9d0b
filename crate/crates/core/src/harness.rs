//! Experiment orchestration: reference probabilities, the logarithmic error
//! metric, multi-seed trial aggregation and density grids for plotting.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{adaptive_is_estimate, mc_estimate, sss_estimate, sus_estimate, AisConfig, SssConfig, SusConfig};
use crate::error::{Error, Result};
use crate::flow::{flow_logdensity, FlowModel};
use crate::nofis::{run_nofis, EstimateReport, TrainConfig};
use crate::problems::{normal_cdf, std_normal_logpdf, Golden, Problem, Provenance, ThresholdSchedule};

/// Smallest estimate the error metric distinguishes from zero.
pub const LOG_ERROR_FLOOR: f64 = 1e-20;

/// Half-width of the square integrated by the 2-D quadrature oracle.
pub const QUADRATURE_HALF_WIDTH: f64 = 8.0;

/// Midpoint-rule cells per axis for the 2-D quadrature oracle.
pub const QUADRATURE_STEPS: usize = 4000;

/// Seed of the Monte Carlo oracle stream; chunk `i` uses stream `i`.
pub const ORACLE_SEED: u64 = 0x5eed_0dd5;

const ORACLE_CHUNK: usize = 1 << 18;

/// `|log10 max(p_est, 1e-20) - log10 p_golden|`.
pub fn log_error(p_est: f64, p_golden: f64) -> Result<f64> {
    if !(p_golden > 0.0 && p_golden.is_finite()) {
        return Err(Error::invalid(format!("golden probability must be positive, got {p_golden}")));
    }
    if !(p_est >= 0.0 && p_est.is_finite()) {
        return Err(Error::invalid(format!("estimate must be a finite non-negative number, got {p_est}")));
    }
    Ok((p_est.max(LOG_ERROR_FLOOR).log10() - p_golden.log10()).abs())
}

/// How a reference probability is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum OracleMode {
    Analytic,
    Quadrature2d,
    Mc { samples: u64 },
}

impl fmt::Display for OracleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleMode::Analytic => write!(f, "analytic"),
            OracleMode::Quadrature2d => write!(f, "quadrature2d"),
            OracleMode::Mc { samples } => write!(f, "mc({samples})"),
        }
    }
}

/// Reference probability of `problem` by the requested mode. Never touches
/// the problem's call counter.
pub fn golden_oracle(problem: &Problem, mode: OracleMode) -> Result<Golden> {
    match mode {
        OracleMode::Analytic => analytic_golden(problem),
        OracleMode::Quadrature2d => quadrature_golden(problem),
        OracleMode::Mc { samples } => mc_golden(problem, samples),
    }
}

fn analytic_golden(problem: &Problem) -> Result<Golden> {
    if problem.name() == "cube" {
        return Ok(Golden {
            value: normal_cdf(-1.8).powi(problem.dim() as i32),
            provenance: Provenance::Analytic,
        });
    }
    match problem.golden() {
        Some(g) if g.provenance == Provenance::Analytic => Ok(g),
        _ => Err(Error::Unsupported(format!(
            "no closed form is known for problem '{}'",
            problem.name()
        ))),
    }
}

fn quadrature_golden(problem: &Problem) -> Result<Golden> {
    if problem.dim() != 2 {
        return Err(Error::Unsupported(format!(
            "tensor-grid quadrature needs a 2-D problem, '{}' has D = {}",
            problem.name(),
            problem.dim()
        )));
    }
    let h = 2.0 * QUADRATURE_HALF_WIDTH / QUADRATURE_STEPS as f64;
    let centre = |i: usize| -QUADRATURE_HALF_WIDTH + (i as f64 + 0.5) * h;
    let bound = problem.bound();
    let value: f64 = (0..QUADRATURE_STEPS)
        .into_par_iter()
        .map(|i| {
            let x = centre(i);
            let mut row = 0.0;
            for j in 0..QUADRATURE_STEPS {
                let p = [x, centre(j)];
                if bound.contains(problem.oracle_value(&p)) {
                    row += std_normal_logpdf(&p).exp();
                }
            }
            row
        })
        .sum::<f64>()
        * h
        * h;
    Ok(Golden {
        value,
        provenance: Provenance::Quadrature,
    })
}

fn mc_golden(problem: &Problem, samples: u64) -> Result<Golden> {
    if samples == 0 {
        return Err(Error::invalid("MC oracle needs at least one sample"));
    }
    let chunks = samples.div_ceil(ORACLE_CHUNK as u64);
    let dim = problem.dim();
    let bound = problem.bound();
    let hits: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(ORACLE_SEED);
            rng.set_stream(c);
            let len = (samples - c * ORACLE_CHUNK as u64).min(ORACLE_CHUNK as u64);
            let mut x = vec![0.0; dim];
            let mut hits = 0u64;
            for _ in 0..len {
                x.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                if bound.contains(problem.oracle_value(&x)) {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    Ok(Golden {
        value: hits as f64 / samples as f64,
        provenance: Provenance::MonteCarlo { samples },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub problem: String,
    pub mode: OracleMode,
    pub golden: Golden,
}

/// Reference probabilities on disk, keyed by problem, mode and sample count.
#[derive(Debug, Clone, Default)]
pub struct GoldenCache {
    path: Option<PathBuf>,
    entries: BTreeMap<String, CacheEntry>,
}

impl GoldenCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens the cache at `path`; a missing file is an empty cache.
    pub fn open(path: &Path) -> Result<Self> {
        let entries = if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries,
        })
    }

    fn key(problem: &str, mode: OracleMode) -> String {
        format!("{problem}|{mode}")
    }

    pub fn get(&self, problem: &str, mode: OracleMode) -> Option<Golden> {
        self.entries.get(&Self::key(problem, mode)).map(|e| e.golden)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Cached value if present, otherwise computes it and persists the cache.
    pub fn golden(&mut self, problem: &Problem, mode: OracleMode) -> Result<Golden> {
        if let Some(g) = self.get(problem.name(), mode) {
            return Ok(g);
        }
        let golden = golden_oracle(problem, mode)?;
        self.entries.insert(
            Self::key(problem.name(), mode),
            CacheEntry {
                problem: problem.name().to_string(),
                mode,
                golden,
            },
        );
        self.save()?;
        Ok(golden)
    }

    pub fn save(&self) -> Result<()> {
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let text = serde_json::to_string_pretty(&self.entries)?;
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// An estimator together with its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodSpec {
    Nofis {
        config: TrainConfig,
        schedule: ThresholdSchedule,
    },
    Mc {
        samples: usize,
    },
    Sus(SusConfig),
    Sss(SssConfig),
    Ais(AisConfig),
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::Nofis { .. } => "nofis",
            MethodSpec::Mc { .. } => "mc",
            MethodSpec::Sus(_) => "sus",
            MethodSpec::Sss(_) => "sss",
            MethodSpec::Ais(_) => "ais",
        }
    }

    /// Declared upper bound on counted calls for one trial.
    pub fn call_budget(&self, problem: &Problem) -> u64 {
        match self {
            MethodSpec::Nofis { config, .. } => {
                let per_sample = match problem.grad_mode() {
                    crate::problems::GradMode::Analytic => 1,
                    crate::problems::GradMode::FiniteDifference => 2 * problem.dim() as u64 + 1,
                };
                let train = config.call_budget() - config.n_is as u64;
                train * per_sample + config.n_is as u64
            }
            MethodSpec::Mc { samples } => *samples as u64,
            MethodSpec::Sus(c) => c.call_budget(),
            MethodSpec::Sss(c) => c.call_budget(),
            MethodSpec::Ais(c) => c.call_budget(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MethodSpec::Nofis { config, schedule } => {
                config.validate()?;
                if schedule.len() != config.steps {
                    return Err(Error::Schedule(format!(
                        "schedule has {} levels but training uses {} steps",
                        schedule.len(),
                        config.steps
                    )));
                }
                Ok(())
            }
            MethodSpec::Mc { samples } if *samples == 0 => Err(Error::invalid("MC sample count must be positive")),
            MethodSpec::Mc { .. } => Ok(()),
            MethodSpec::Sus(c) => c.validate(),
            MethodSpec::Sss(c) => c.validate(),
            MethodSpec::Ais(c) => c.validate(),
        }
    }

    /// One trial on `problem` with `seed`. The trained flow is returned for
    /// NOFIS.
    pub fn run(&self, problem: &Problem, seed: u64) -> Result<(EstimateReport, Option<FlowModel>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            MethodSpec::Nofis { config, schedule } => {
                let config = TrainConfig { seed, ..config.clone() };
                let (model, report) = run_nofis(problem, schedule, &config)?;
                Ok((report, Some(model)))
            }
            MethodSpec::Mc { samples } => Ok((mc_estimate(problem, *samples, &mut rng)?, None)),
            MethodSpec::Sus(c) => Ok((sus_estimate(problem, c, &mut rng)?.report, None)),
            MethodSpec::Sss(c) => Ok((sss_estimate(problem, c, &mut rng)?.report, None)),
            MethodSpec::Ais(c) => Ok((adaptive_is_estimate(problem, c, &mut rng)?.report, None)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub method: String,
    pub problem: String,
    pub seed: u64,
    pub p_est: f64,
    pub calls: u64,
    pub log_error: f64,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub method: String,
    pub problem: String,
    pub golden: Golden,
    pub count: usize,
    pub mean_log_error: f64,
    pub median_log_error: f64,
    pub std_log_error: f64,
    pub mean_calls: f64,
    pub trials: Vec<TrialResult>,
    pub failures: Vec<TrialFailure>,
}

impl AggregateReport {
    /// Statistics over the successful trials; fails when there are none.
    pub fn from_trials(
        method: &str,
        problem: &str,
        golden: Golden,
        trials: Vec<TrialResult>,
        failures: Vec<TrialFailure>,
    ) -> Result<Self> {
        if trials.is_empty() {
            let first = failures.first().map(|f| f.error.as_str()).unwrap_or("no trials were run");
            return Err(Error::InvalidState(format!(
                "no successful {method} trial on {problem}: {first}"
            )));
        }
        let n = trials.len() as f64;
        let errs: Vec<f64> = trials.iter().map(|t| t.log_error).collect();
        let mean = errs.iter().sum::<f64>() / n;
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            method: method.to_string(),
            problem: problem.to_string(),
            golden,
            count: trials.len(),
            mean_log_error: mean,
            median_log_error: median(&errs),
            std_log_error: var.sqrt(),
            mean_calls: trials.iter().map(|t| t.calls as f64).sum::<f64>() / n,
            trials,
            failures,
        })
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Fails with the overage when `used` exceeds `declared`.
pub fn check_budget(declared: u64, used: u64) -> Result<()> {
    if used > declared {
        return Err(Error::BudgetExceeded { declared, used });
    }
    Ok(())
}

/// One trial with budget enforcement against a fresh call counter.
pub fn run_trial(method: &MethodSpec, problem: &Problem, seed: u64, golden: Golden) -> Result<TrialResult> {
    run_trial_with_model(method, problem, seed, golden).map(|(t, _)| t)
}

/// As [`run_trial`], also returning the trained flow for NOFIS.
pub fn run_trial_with_model(
    method: &MethodSpec,
    problem: &Problem,
    seed: u64,
    golden: Golden,
) -> Result<(TrialResult, Option<FlowModel>)> {
    let problem = problem.fresh();
    let start = Instant::now();
    let (report, model) = method.run(&problem, seed)?;
    let wall_time_s = start.elapsed().as_secs_f64();
    let used = problem.calls();
    check_budget(method.call_budget(&problem), used)?;
    if used == 0 {
        return Err(Error::InvalidState("trial made no counted calls".into()));
    }
    let trial = TrialResult {
        method: method.name().to_string(),
        problem: problem.name().to_string(),
        seed,
        p_est: report.p_est,
        calls: used,
        log_error: log_error(report.p_est, golden.value)?,
        wall_time_s,
        warnings: report.warnings,
    };
    Ok((trial, model))
}

/// `repeats` independent trials with seeds `base_seed + i`, run in parallel.
/// Failed trials are recorded and do not abort the batch.
pub fn run_trials(
    method: &MethodSpec,
    problem: &Problem,
    repeats: usize,
    base_seed: u64,
    golden: Golden,
) -> Result<AggregateReport> {
    run_batch(method, problem, repeats, base_seed, golden, false).map(|(agg, _)| agg)
}

/// As [`run_trials`], also returning each successful trial's flow by seed.
pub fn run_trials_with_models(
    method: &MethodSpec,
    problem: &Problem,
    repeats: usize,
    base_seed: u64,
    golden: Golden,
) -> Result<(AggregateReport, Vec<(u64, FlowModel)>)> {
    run_batch(method, problem, repeats, base_seed, golden, true)
}

fn run_batch(
    method: &MethodSpec,
    problem: &Problem,
    repeats: usize,
    base_seed: u64,
    golden: Golden,
    keep_models: bool,
) -> Result<(AggregateReport, Vec<(u64, FlowModel)>)> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    method.validate()?;
    log_error(golden.value, golden.value)?;
    let outcomes: Vec<(u64, Result<(TrialResult, Option<FlowModel>)>)> = (0..repeats as u64)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed + i;
            (seed, run_trial_with_model(method, problem, seed, golden))
        })
        .collect();
    let mut trials = Vec::new();
    let mut failures = Vec::new();
    let mut models = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok((t, model)) => {
                trials.push(t);
                if let (true, Some(m)) = (keep_models, model) {
                    models.push((seed, m));
                }
            }
            Err(e) => failures.push(TrialFailure {
                seed,
                error: e.to_string(),
            }),
        }
    }
    let agg = AggregateReport::from_trials(method.name(), problem.name(), golden, trials, failures)?;
    Ok((agg, models))
}

/// Axis-aligned plotting grid with `steps` cell centres per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub steps: usize,
}

impl HeatmapGrid {
    pub fn square(half_width: f64, steps: usize) -> Self {
        Self {
            xmin: -half_width,
            xmax: half_width,
            ymin: -half_width,
            ymax: half_width,
            steps,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps < 50 {
            return Err(Error::invalid(format!("heatmap needs at least 50 steps per axis, got {}", self.steps)));
        }
        if !(self.xmax > self.xmin && self.ymax > self.ymin) || ![self.xmin, self.xmax, self.ymin, self.ymax].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("heatmap extents must be finite with max > min"));
        }
        Ok(())
    }

    fn dx(&self) -> f64 {
        (self.xmax - self.xmin) / self.steps as f64
    }

    fn dy(&self) -> f64 {
        (self.ymax - self.ymin) / self.steps as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    /// Cell centres in row-major order (x outer, y inner).
    fn points(&self) -> Array2<f64> {
        let n = self.steps;
        let (dx, dy) = (self.dx(), self.dy());
        Array2::from_shape_fn((n * n, 2), |(k, c)| {
            if c == 0 {
                self.xmin + ((k / n) as f64 + 0.5) * dx
            } else {
                self.ymin + ((k % n) as f64 + 0.5) * dy
            }
        })
    }
}

/// Density evaluated at the cell centres of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    pub grid: HeatmapGrid,
    pub points: Array2<f64>,
    pub density: Vec<f64>,
}

impl DensityTable {
    /// Riemann sum of the density over the grid.
    pub fn total_mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.grid.cell_area()
    }

    /// Riemann sum over the cells whose centre satisfies `inside`.
    pub fn mass_where<F: Fn(&[f64]) -> bool>(&self, inside: F) -> f64 {
        self.points
            .outer_iter()
            .zip(&self.density)
            .filter(|(p, _)| inside(p.as_slice().expect("rows of a standard-layout array are contiguous")))
            .map(|(_, d)| d)
            .sum::<f64>()
            * self.grid.cell_area()
    }

    /// Cell centre with the highest density.
    pub fn argmax(&self) -> [f64; 2] {
        let k = (0..self.density.len())
            .max_by(|&a, &b| self.density[a].total_cmp(&self.density[b]))
            .unwrap_or(0);
        [self.points[[k, 0]], self.points[[k, 1]]]
    }

    /// `x,y,density` rows under a one-line header.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.density.len() * 32);
        out.push_str("x,y,density\n");
        for (p, d) in self.points.outer_iter().zip(&self.density) {
            out.push_str(&format!("{},{},{}\n", p[0], p[1], d));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Density of the full flow on the grid. Makes no `g` calls.
pub fn heatmap_flow(model: &FlowModel, grid: &HeatmapGrid) -> Result<DensityTable> {
    if model.dim() != 2 {
        return Err(Error::Unsupported(format!("heatmaps need a 2-D model, got D = {}", model.dim())));
    }
    grid.validate()?;
    let points = grid.points();
    let logq = flow_logdensity(model, points.view(), model.num_layers())?;
    Ok(DensityTable {
        grid: *grid,
        density: logq.iter().map(|l| l.exp()).collect(),
        points,
    })
}

/// The zero-variance proposal `p(x) 1[x in region] / P` on the grid. Uses
/// the uncounted oracle evaluation.
pub fn heatmap_optimal(problem: &Problem, golden: f64, grid: &HeatmapGrid) -> Result<DensityTable> {
    if problem.dim() != 2 {
        return Err(Error::Unsupported(format!("heatmaps need a 2-D problem, got D = {}", problem.dim())));
    }
    grid.validate()?;
    log_error(golden, golden)?;
    let points = grid.points();
    let bound = problem.bound();
    let density = points
        .outer_iter()
        .map(|p| {
            let x = [p[0], p[1]];
            if bound.contains(problem.oracle_value(&x)) {
                std_normal_logpdf(&x).exp() / golden
            } else {
                0.0
            }
        })
        .collect();
    Ok(DensityTable {
        grid: *grid,
        points,
        density,
    })
}

//! Benchmark rare-event problems under a standard-normal input distribution.
//!
//! A problem is a characteristic function `g` plus a [`Level`] describing the
//! event region (`g <= u`, `g >= l`, or `l <= g <= u`). Every evaluation of `g`
//! made through [`Problem::eval_g`] and friends is counted; the counter is what
//! call budgets are checked against.

use std::f64::consts::PI;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step used by finite-difference gradients.
pub const FD_STEP: f64 = 1e-5;

pub const CATALOG: [&str; 7] = ["leaf", "cube", "rosen", "levy", "powell", "ring", "halfspace1d"];

/// An event region expressed through the value of `g`. Bounds are closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    /// `g <= u`
    Upper(f64),
    /// `g >= l`
    Lower(f64),
    /// `l <= g <= u`
    Band { lower: f64, upper: f64 },
}

impl Level {
    pub fn contains(&self, g: f64) -> bool {
        match *self {
            Level::Upper(u) => g <= u,
            Level::Lower(l) => g >= l,
            Level::Band { lower, upper } => lower <= g && g <= upper,
        }
    }

    /// Distance in `g` units to the region; zero inside.
    pub fn violation(&self, g: f64) -> f64 {
        match *self {
            Level::Upper(u) => (g - u).max(0.0),
            Level::Lower(l) => (l - g).max(0.0),
            Level::Band { lower, upper } => (g - upper).max(lower - g).max(0.0),
        }
    }

    /// Derivative of [`Level::violation`] with respect to `g`; the inactive
    /// branch (zero) is taken on the boundary.
    pub fn violation_slope(&self, g: f64) -> f64 {
        match *self {
            Level::Upper(u) if g > u => 1.0,
            Level::Lower(l) if g < l => -1.0,
            Level::Band { upper, .. } if g > upper => 1.0,
            Level::Band { lower, .. } if g < lower => -1.0,
            _ => 0.0,
        }
    }

    /// Signed score whose sub-zero set is the region: `g - u`, `l - g`, or
    /// `max(g - u, l - g)`.
    pub fn score(&self, g: f64) -> f64 {
        match *self {
            Level::Upper(u) => g - u,
            Level::Lower(l) => l - g,
            Level::Band { lower, upper } => (g - upper).max(lower - g),
        }
    }

    /// The region widened by `delta` g-units on every constrained side.
    pub fn relaxed(&self, delta: f64) -> Level {
        match *self {
            Level::Upper(u) => Level::Upper(u + delta),
            Level::Lower(l) => Level::Lower(l - delta),
            Level::Band { lower, upper } => Level::Band {
                lower: lower - delta,
                upper: upper + delta,
            },
        }
    }

    fn same_kind(&self, other: &Level) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }

    /// True when `self` is a strict subset of `outer`.
    pub fn strictly_inside(&self, outer: &Level) -> bool {
        match (*self, *outer) {
            (Level::Upper(a), Level::Upper(b)) => a < b,
            (Level::Lower(a), Level::Lower(b)) => a > b,
            (
                Level::Band { lower: l1, upper: u1 },
                Level::Band { lower: l0, upper: u0 },
            ) => l1 >= l0 && u1 <= u0 && (l1 > l0 || u1 < u0),
            _ => false,
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            Level::Upper(v) | Level::Lower(v) => v.is_finite(),
            Level::Band { lower, upper } => lower.is_finite() && upper.is_finite() && lower <= upper,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Upper(u) => write!(f, "g <= {u}"),
            Level::Lower(l) => write!(f, "g >= {l}"),
            Level::Band { lower, upper } => write!(f, "{lower} <= g <= {upper}"),
        }
    }
}

/// Strictly tightening event levels; the last level is the problem's bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    levels: Vec<Level>,
}

impl ThresholdSchedule {
    pub fn new(levels: Vec<Level>, bound: &Level) -> Result<Self> {
        let Some(last) = levels.last() else {
            return Err(Error::Schedule("schedule must contain at least one level".into()));
        };
        if let Some(bad) = levels.iter().find(|l| !l.is_valid() || !l.same_kind(bound)) {
            return Err(Error::Schedule(format!(
                "level {bad} is not a finite level of the same kind as the bound {bound}"
            )));
        }
        if last != bound {
            return Err(Error::Schedule(format!(
                "final level {last} must equal the problem bound {bound}"
            )));
        }
        for (m, pair) in levels.windows(2).enumerate() {
            if !pair[1].strictly_inside(&pair[0]) {
                return Err(Error::Schedule(format!(
                    "level {} ({}) does not strictly tighten level {} ({})",
                    m + 2,
                    pair[1],
                    m + 1,
                    pair[0]
                )));
            }
        }
        Ok(Self { levels })
    }

    /// Upper-bound schedule from plain thresholds `a_1 > ... > a_M`.
    pub fn from_thresholds(thresholds: &[f64], bound: &Level) -> Result<Self> {
        let levels = thresholds
            .iter()
            .map(|&a| match bound {
                Level::Upper(_) => Ok(Level::Upper(a)),
                Level::Lower(_) => Ok(Level::Lower(a)),
                Level::Band { .. } => Err(Error::Schedule(
                    "band problems need (lower, upper) pairs".into(),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels, bound)
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Level for 1-based step `m`.
    pub fn level(&self, m: usize) -> Level {
        self.levels[m - 1]
    }
}

type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

#[derive(Clone)]
enum TestFunction {
    Leaf,
    Cube,
    Rosenbrock,
    Levy,
    Powell,
    Ring,
    Halfspace { offset: f64 },
    Custom {
        value: Arc<ScalarFn>,
        grad: Option<Arc<GradFn>>,
    },
}

impl TestFunction {
    fn value(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Leaf => leaf(x),
            TestFunction::Cube => x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(1.8 - v)),
            TestFunction::Rosenbrock => rosenbrock(x) / CATALOG_SCALE,
            TestFunction::Levy => levy(x),
            TestFunction::Powell => powell(x) / CATALOG_SCALE,
            TestFunction::Ring => x.iter().map(|v| v * v).sum(),
            TestFunction::Halfspace { offset } => offset - x[0],
            TestFunction::Custom { value, .. } => value(x),
        }
    }

    fn analytic_grad(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some(match self {
            TestFunction::Leaf => leaf_grad(x),
            TestFunction::Cube => {
                let mut best = 0;
                for i in 1..x.len() {
                    if 1.8 - x[i] > 1.8 - x[best] {
                        best = i;
                    }
                }
                let mut g = vec![0.0; x.len()];
                g[best] = -1.0;
                g
            }
            TestFunction::Rosenbrock => scaled(rosenbrock_grad(x)),
            TestFunction::Levy => levy_grad(x),
            TestFunction::Powell => scaled(powell_grad(x)),
            TestFunction::Ring => x.iter().map(|v| 2.0 * v).collect(),
            TestFunction::Halfspace { .. } => {
                let mut g = vec![0.0; x.len()];
                g[0] = -1.0;
                g
            }
            TestFunction::Custom { grad, .. } => return grad.as_ref().map(|f| f(x)),
        })
    }
}

fn leaf(x: &[f64]) -> f64 {
    let a = (x[0] + 3.8).powi(2) + (x[1] + 3.8).powi(2);
    let b = (x[0] - 3.8).powi(2) + (x[1] - 3.8).powi(2);
    a.min(b) - 1.0
}

fn leaf_grad(x: &[f64]) -> Vec<f64> {
    let a = (x[0] + 3.8).powi(2) + (x[1] + 3.8).powi(2);
    let b = (x[0] - 3.8).powi(2) + (x[1] - 3.8).powi(2);
    let c = if a <= b { -3.8 } else { 3.8 };
    vec![2.0 * (x[0] - c), 2.0 * (x[1] - c)]
}

/// The catalog's Rosenbrock and Powell are the textbook functions divided by
/// this factor; their bands are stated on that scale.
pub const CATALOG_SCALE: f64 = 100.0;

fn scaled(mut g: Vec<f64>) -> Vec<f64> {
    g.iter_mut().for_each(|v| *v /= CATALOG_SCALE);
    g
}

fn rosenbrock(x: &[f64]) -> f64 {
    x.windows(2)
        .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (w[0] - 1.0).powi(2))
        .sum()
}

fn rosenbrock_grad(x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len().saturating_sub(1) {
        let r = x[i + 1] - x[i] * x[i];
        g[i] += -400.0 * x[i] * r + 2.0 * (x[i] - 1.0);
        g[i + 1] += 200.0 * r;
    }
    g
}

fn levy(x: &[f64]) -> f64 {
    let d = x.len();
    let w = |v: f64| 1.0 + (v - 1.0) / 4.0;
    let w1 = w(x[0]);
    let wd = w(x[d - 1]);
    let mut sum = (PI * w1).sin().powi(2);
    for &xi in &x[..d - 1] {
        let wi = w(xi);
        sum += (wi - 1.0).powi(2) * (1.0 + 10.0 * (PI * wi + 1.0).sin().powi(2));
    }
    sum + (wd - 1.0).powi(2) * (1.0 + (2.0 * PI * wd).sin().powi(2))
}

fn levy_grad(x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let w: Vec<f64> = x.iter().map(|v| 1.0 + (v - 1.0) / 4.0).collect();
    let mut g = vec![0.0; d];
    g[0] += PI * (2.0 * PI * w[0]).sin();
    for i in 0..d - 1 {
        let s = PI * w[i] + 1.0;
        g[i] += 2.0 * (w[i] - 1.0) * (1.0 + 10.0 * s.sin().powi(2))
            + (w[i] - 1.0).powi(2) * 10.0 * PI * (2.0 * s).sin();
    }
    let wd = w[d - 1];
    g[d - 1] += 2.0 * (wd - 1.0) * (1.0 + (2.0 * PI * wd).sin().powi(2))
        + (wd - 1.0).powi(2) * 2.0 * PI * (4.0 * PI * wd).sin();
    g.iter_mut().for_each(|v| *v *= 0.25);
    g
}

fn powell(x: &[f64]) -> f64 {
    x.chunks_exact(4)
        .map(|c| {
            (c[0] + 10.0 * c[1]).powi(2)
                + 5.0 * (c[2] - c[3]).powi(2)
                + (c[1] - 2.0 * c[2]).powi(4)
                + 10.0 * (c[0] - c[3]).powi(4)
        })
        .sum()
}

fn powell_grad(x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for (c, o) in x.chunks_exact(4).zip(g.chunks_exact_mut(4)) {
        let p = c[0] + 10.0 * c[1];
        let q = c[2] - c[3];
        let r = c[1] - 2.0 * c[2];
        let s = c[0] - c[3];
        o[0] = 2.0 * p + 40.0 * s.powi(3);
        o[1] = 20.0 * p + 4.0 * r.powi(3);
        o[2] = 10.0 * q - 8.0 * r.powi(3);
        o[3] = -10.0 * q - 40.0 * s.powi(3);
    }
    g
}

/// Where a reference probability came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Analytic,
    Quadrature,
    MonteCarlo { samples: u64 },
    /// Published benchmark value
    Published,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Analytic => write!(f, "analytic"),
            Provenance::Quadrature => write!(f, "quadrature"),
            Provenance::MonteCarlo { samples } => write!(f, "mc({samples})"),
            Provenance::Published => write!(f, "published"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Golden {
    pub value: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    Analytic,
    FiniteDifference,
}

/// A rare-event problem `P[x in region]` with `x ~ N(0, I_D)`.
pub struct Problem {
    name: String,
    dim: usize,
    func: TestFunction,
    bound: Level,
    grad_mode: GradMode,
    golden: Option<Golden>,
    calls: AtomicU64,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("bound", &self.bound)
            .field("grad_mode", &self.grad_mode)
            .field("golden", &self.golden)
            .field("calls", &self.calls())
            .finish()
    }
}

/// `Phi(x)` for the standard normal.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard-normal log-density of a `D`-vector.
pub fn std_normal_logpdf(x: &[f64]) -> f64 {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    -0.5 * sq - 0.5 * x.len() as f64 * (2.0 * PI).ln()
}

pub fn make_problem(name: &str) -> Result<Problem> {
    let table = |value| {
        Some(Golden {
            value,
            provenance: Provenance::Published,
        })
    };
    let (dim, func, bound, golden) = match name {
        "leaf" => (2, TestFunction::Leaf, Level::Upper(0.0), table(4.74e-6)),
        "cube" => (6, TestFunction::Cube, Level::Upper(0.0), table(2.15e-9)),
        "rosen" => (
            10,
            TestFunction::Rosenbrock,
            Level::Band {
                lower: 3.48,
                upper: 3.52,
            },
            table(4.69e-4),
        ),
        "levy" => (
            20,
            TestFunction::Levy,
            Level::Band {
                lower: 0.0,
                upper: 6.0,
            },
            table(3.70e-6),
        ),
        "powell" => (40, TestFunction::Powell, Level::Upper(4.0), table(3.15e-5)),
        "ring" => (
            2,
            TestFunction::Ring,
            Level::Band {
                lower: 16.0,
                upper: 20.25,
            },
            Some(Golden {
                // P[chi2_2 in [16, 20.25]] = exp(-8) - exp(-10.125)
                value: (-8.0_f64).exp() - (-10.125_f64).exp(),
                provenance: Provenance::Analytic,
            }),
        ),
        "halfspace1d" => (
            1,
            TestFunction::Halfspace { offset: 1.8 },
            Level::Upper(0.0),
            Some(Golden {
                value: normal_cdf(-1.8),
                provenance: Provenance::Analytic,
            }),
        ),
        other => return Err(Error::UnknownProblem(other.to_string())),
    };
    Ok(Problem {
        name: name.to_string(),
        dim,
        func,
        bound,
        grad_mode: GradMode::Analytic,
        golden,
        calls: AtomicU64::new(0),
    })
}

impl Problem {
    /// A user-supplied problem. Without a gradient, finite differences are used.
    pub fn custom<F>(name: &str, dim: usize, bound: Level, value: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.to_string(),
            dim,
            func: TestFunction::Custom {
                value: Arc::new(value),
                grad: None,
            },
            bound,
            grad_mode: GradMode::FiniteDifference,
            golden: None,
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_gradient<G>(mut self, grad: G) -> Self
    where
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        if let TestFunction::Custom { grad: slot, .. } = &mut self.func {
            *slot = Some(Arc::new(grad));
            self.grad_mode = GradMode::Analytic;
        }
        self
    }

    /// Half-space `offset - x_1 <= 0` in `dim` dimensions, `P = Phi(-offset)`.
    pub fn halfspace(dim: usize, offset: f64) -> Self {
        Self {
            name: format!("halfspace{dim}d"),
            dim,
            func: TestFunction::Halfspace { offset },
            bound: Level::Upper(0.0),
            grad_mode: GradMode::Analytic,
            golden: Some(Golden {
                value: normal_cdf(-offset),
                provenance: Provenance::Analytic,
            }),
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_bound(mut self, bound: Level) -> Self {
        self.bound = bound;
        self
    }

    pub fn with_golden(mut self, golden: Option<Golden>) -> Self {
        self.golden = golden;
        self
    }

    /// Force finite-difference gradients (each costs `2D` counted calls).
    pub fn with_grad_mode(mut self, mode: GradMode) -> Self {
        if mode == GradMode::Analytic && self.func.analytic_grad(&vec![0.0; self.dim]).is_none() {
            return self;
        }
        self.grad_mode = mode;
        self
    }

    /// Same definition, zeroed call counter.
    pub fn fresh(&self) -> Self {
        Self {
            name: self.name.clone(),
            dim: self.dim,
            func: self.func.clone(),
            bound: self.bound,
            grad_mode: self.grad_mode,
            golden: self.golden,
            calls: AtomicU64::new(0),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bound(&self) -> Level {
        self.bound
    }

    pub fn golden(&self) -> Option<Golden> {
        self.golden
    }

    pub fn grad_mode(&self) -> GradMode {
        self.grad_mode
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite input to g"));
        }
        Ok(())
    }

    /// One counted evaluation of `g`.
    pub fn eval_g(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(self.func.value(x))
    }

    /// Counted evaluation of every row.
    pub fn eval_batch(&self, xs: ArrayView2<f64>) -> Result<Vec<f64>> {
        xs.rows()
            .into_iter()
            .map(|row| match row.as_slice() {
                Some(s) => self.eval_g(s),
                None => self.eval_g(&row.to_vec()),
            })
            .collect()
    }

    /// `grad g`. Analytic gradients are free; finite differences cost `2D`
    /// counted calls.
    pub fn eval_grad_g(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        match self.grad_mode {
            GradMode::Analytic => Ok(self
                .func
                .analytic_grad(x)
                .expect("analytic mode implies a gradient")),
            GradMode::FiniteDifference => {
                let mut p = x.to_vec();
                let mut grad = Vec::with_capacity(self.dim);
                for i in 0..self.dim {
                    let orig = p[i];
                    p[i] = orig + FD_STEP;
                    let up = self.eval_g(&p)?;
                    p[i] = orig - FD_STEP;
                    let down = self.eval_g(&p)?;
                    p[i] = orig;
                    grad.push((up - down) / (2.0 * FD_STEP));
                }
                Ok(grad)
            }
        }
    }

    /// Evaluation of `g` that bypasses the call counter. Reserved for
    /// reference oracles; estimators must use the counted entry points.
    pub fn oracle_value(&self, x: &[f64]) -> f64 {
        self.func.value(x)
    }

    pub fn membership(&self, gval: f64) -> bool {
        self.bound.contains(gval)
    }
}

/// Schedule from a pilot run: level `m` relaxes the bound to the empirical
/// `10^-m` quantile of the pilot's distance-to-region; levels the pilot
/// cannot resolve continue the last shrink ratio geometrically; the final
/// level is the bound itself.
pub fn suggest_schedule<R: Rng + ?Sized>(
    problem: &Problem,
    steps: usize,
    pilot_n: usize,
    rng: &mut R,
) -> Result<ThresholdSchedule> {
    const MIN_TAIL_SAMPLES: f64 = 10.0;
    let bound = problem.bound();
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if pilot_n < 1000 {
        return Err(Error::invalid("pilot size must be at least 1000"));
    }
    if steps == 1 {
        return ThresholdSchedule::new(vec![bound], &bound);
    }
    let pilot = Array2::from_shape_simple_fn((pilot_n, problem.dim()), || {
        rng.sample::<f64, _>(StandardNormal)
    });
    let gvals = problem.eval_batch(pilot.view())?;
    let (lo, hi) = gvals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo == hi {
        return Err(Error::Schedule("degenerate pilot: every g value is identical".into()));
    }
    let mut dist: Vec<f64> = gvals.iter().map(|&g| bound.violation(g)).collect();
    dist.sort_by(f64::total_cmp);

    let mut deltas: Vec<f64> = Vec::with_capacity(steps - 1);
    for m in 1..steps {
        let mass = 10f64.powi(-(m as i32));
        let resolved = mass * pilot_n as f64 >= MIN_TAIL_SAMPLES;
        let candidate = if resolved {
            let k = ((mass * pilot_n as f64).ceil() as usize).clamp(1, pilot_n) - 1;
            dist[k]
        } else {
            let prev = *deltas.last().unwrap_or(&dist[pilot_n - 1]);
            let ratio = match deltas.len() {
                n if n >= 2 => deltas[n - 1] / deltas[n - 2],
                _ => 0.5,
            };
            prev * if ratio > 0.0 && ratio < 1.0 { ratio } else { 0.5 }
        };
        let prev = deltas.last().copied().unwrap_or(f64::INFINITY);
        if candidate > 0.0 && candidate < prev {
            deltas.push(candidate);
        } else {
            // Region already reached at this mass (or no progress): spread the
            // remaining levels linearly down to the bound.
            let start = if prev.is_finite() { prev } else { dist[pilot_n - 1].max(1e-9) };
            let remaining = steps - m;
            for j in 0..remaining {
                deltas.push(start * (remaining - j) as f64 / (remaining + 1) as f64);
            }
            break;
        }
    }
    deltas.truncate(steps - 1);
    let mut levels: Vec<Level> = deltas.into_iter().map(|d| bound.relaxed(d)).collect();
    levels.push(bound);
    ThresholdSchedule::new(levels, &bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_grad(p: &Problem, x: &[f64], h: f64) -> Vec<f64> {
        let mut y = x.to_vec();
        (0..x.len())
            .map(|i| {
                let o = y[i];
                y[i] = o + h;
                let up = p.oracle_value(&y);
                y[i] = o - h;
                let down = p.oracle_value(&y);
                y[i] = o;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn catalog_reference_points() {
        let leaf = make_problem("leaf").unwrap();
        assert_eq!(leaf.eval_g(&[3.8, 3.8]).unwrap(), -1.0);
        assert_eq!(leaf.eval_g(&[-3.8, -3.8]).unwrap(), -1.0);

        let cube = make_problem("cube").unwrap();
        assert_eq!(cube.eval_g(&[1.8; 6]).unwrap(), 0.0);
        assert!(cube.membership(0.0));

        let rosen = make_problem("rosen").unwrap();
        let g = rosen.eval_g(&[1.0; 10]).unwrap();
        assert_eq!(g, 0.0);
        assert!(!rosen.membership(g));

        let levy = make_problem("levy").unwrap();
        assert!(levy.eval_g(&[1.0; 20]).unwrap().abs() < 1e-28);
        let powell = make_problem("powell").unwrap();
        assert_eq!(powell.eval_g(&[0.0; 40]).unwrap(), 0.0);
        assert_eq!(powell.dim(), 40);
        // textbook values 9 and 1220, divided by the catalog scale
        assert!((rosen.eval_g(&[0.0; 10]).unwrap() - 0.09).abs() < 1e-15);
        assert!((powell.eval_g(&[1.0; 40]).unwrap() - 12.2).abs() < 1e-12);
    }

    #[test]
    fn unknown_name_is_a_catalog_error() {
        assert!(matches!(make_problem("banana"), Err(Error::UnknownProblem(_))));
    }

    #[test]
    fn counter_tracks_evaluations() {
        let p = make_problem("ring").unwrap();
        assert_eq!(p.calls(), 0);
        p.eval_g(&[1.0, 2.0]).unwrap();
        assert_eq!(p.calls(), 1);
        assert!(p.eval_g(&[f64::NAN, 0.0]).is_err());
        assert!(p.eval_g(&[1.0]).is_err());
        assert_eq!(p.calls(), 1, "rejected inputs are not counted");
        p.eval_grad_g(&[1.0, 2.0]).unwrap();
        assert_eq!(p.calls(), 1, "analytic gradients are free");
        assert_eq!(p.fresh().calls(), 0);
    }

    #[test]
    fn finite_difference_mode_charges_two_d_calls() {
        let p = make_problem("rosen").unwrap().with_grad_mode(GradMode::FiniteDifference);
        let x = vec![0.3; 10];
        let g = p.eval_grad_g(&x).unwrap();
        assert_eq!(p.calls(), 20);
        let exact = make_problem("rosen").unwrap().eval_grad_g(&x).unwrap();
        for (a, b) in g.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn cube_gradient_picks_argmax() {
        let p = make_problem("cube").unwrap();
        let x = [2.0, 0.5, 1.0, 3.0, 0.9, 2.2];
        assert_eq!(p.eval_grad_g(&x).unwrap(), vec![0.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        // ties resolve to the lowest index
        let x = [0.5, 0.5, 1.0, 3.0, 0.9, 2.2];
        assert_eq!(p.eval_grad_g(&x).unwrap()[0], -1.0);
    }

    #[test]
    fn ring_gradient_is_two_x() {
        let p = make_problem("ring").unwrap();
        assert_eq!(p.eval_grad_g(&[1.5, -2.0]).unwrap(), vec![3.0, -4.0]);
    }

    #[test]
    fn catalog_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for name in ["leaf", "rosen", "levy", "powell", "ring", "halfspace1d", "cube"] {
            let p = make_problem(name).unwrap();
            let mut checked = 0;
            while checked < 100 {
                let x: Vec<f64> = (0..p.dim()).map(|_| rng.sample(StandardNormal)).collect();
                if name == "leaf" {
                    // skip the two-circle tie set
                    let a = (x[0] + 3.8).powi(2) + (x[1] + 3.8).powi(2);
                    let b = (x[0] - 3.8).powi(2) + (x[1] - 3.8).powi(2);
                    if (a - b).abs() < 1e-3 {
                        continue;
                    }
                }
                if name == "cube" {
                    let mut v: Vec<f64> = x.iter().map(|x| 1.8 - x).collect();
                    v.sort_by(|a, b| b.total_cmp(a));
                    if v[0] - v[1] < 1e-3 {
                        continue;
                    }
                }
                let exact = p.eval_grad_g(&x).unwrap();
                let numeric = fd_grad(&p, &x, 1e-5);
                for (a, b) in exact.iter().zip(&numeric) {
                    let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
                    assert!(rel <= 1e-5, "{name}: {a} vs {b}");
                }
                checked += 1;
            }
        }
    }

    #[test]
    fn band_membership_is_closed() {
        let band = Level::Band {
            lower: 16.0,
            upper: 20.25,
        };
        assert!(band.contains(18.0));
        assert!(band.contains(16.0));
        assert!(band.contains(20.25));
        assert!(!band.contains(25.0));
        assert!(!band.contains(15.9));
        assert_eq!(band.violation(25.0), 4.75);
        assert_eq!(band.violation(15.0), 1.0);
        assert_eq!(band.violation_slope(25.0), 1.0);
        assert_eq!(band.violation_slope(15.0), -1.0);
        assert_eq!(band.violation_slope(16.0), 0.0);
    }

    #[test]
    fn schedule_validation() {
        let bound = Level::Upper(0.0);
        assert!(ThresholdSchedule::from_thresholds(&[26.0, 15.0, 8.0, 3.0, 0.0], &bound).is_ok());
        assert!(ThresholdSchedule::from_thresholds(&[3.0, 8.0, 0.0], &bound).is_err());
        assert!(ThresholdSchedule::from_thresholds(&[3.0, 3.0, 0.0], &bound).is_err());
        assert!(ThresholdSchedule::from_thresholds(&[3.0, 1.0], &bound).is_err());
        assert!(ThresholdSchedule::from_thresholds(&[], &bound).is_err());

        let band = Level::Band {
            lower: 16.0,
            upper: 20.25,
        };
        let ok = ThresholdSchedule::new(
            vec![
                Level::Band {
                    lower: 4.0,
                    upper: 60.0,
                },
                Level::Band {
                    lower: 16.0,
                    upper: 30.0,
                },
                band,
            ],
            &band,
        );
        assert!(ok.is_ok());
        let not_nested = ThresholdSchedule::new(
            vec![
                Level::Band {
                    lower: 17.0,
                    upper: 60.0,
                },
                band,
            ],
            &band,
        );
        assert!(not_nested.is_err());
    }

    #[test]
    fn suggest_single_step_is_the_bound() {
        let p = make_problem("leaf").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = suggest_schedule(&p, 1, 1000, &mut rng).unwrap();
        assert_eq!(s.levels(), &[Level::Upper(0.0)]);
    }

    #[test]
    fn suggest_leaf_follows_decade_quantiles() {
        // Frozen from 1e7-sample quantiles of the leaf g under N(0, I):
        // 10^-1 -> 13.75, 10^-2 -> 7.55, 10^-3 -> 3.94, 10^-4 -> 1.68.
        let p = make_problem("leaf").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = suggest_schedule(&p, 5, 200_000, &mut rng).unwrap();
        assert_eq!(p.calls(), 200_000);
        let expected = [13.75, 7.55, 3.94, 1.68, 0.0];
        for (lvl, want) in s.levels().iter().zip(expected) {
            let Level::Upper(a) = *lvl else { panic!() };
            assert!((a - want).abs() <= 0.15 * want.max(0.1), "{a} vs {want}");
        }
    }

    #[test]
    fn suggest_extrapolates_beyond_pilot_resolution() {
        let p = make_problem("leaf").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = suggest_schedule(&p, 6, 1000, &mut rng).unwrap();
        let a: Vec<f64> = s
            .levels()
            .iter()
            .map(|l| match l {
                Level::Upper(v) => *v,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(a.len(), 6);
        assert!(a.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(a[5], 0.0);
    }

    #[test]
    fn suggest_rejects_degenerate_pilot() {
        let p = Problem::custom("flat", 2, Level::Upper(0.0), |_| 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(
            suggest_schedule(&p, 3, 1000, &mut rng),
            Err(Error::Schedule(_))
        ));
        assert!(suggest_schedule(&p, 3, 999, &mut rng).is_err());
    }

    #[test]
    fn suggest_band_schedule_is_nested() {
        let p = make_problem("ring").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = suggest_schedule(&p, 4, 20_000, &mut rng).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.level(4), p.bound());
    }

    proptest! {
        #[test]
        fn nested_levels_imply_outer_membership(
            deltas in proptest::collection::vec(0.01f64..10.0, 1..6),
            g in -30.0f64..60.0,
            band in any::<bool>(),
        ) {
            let bound = if band {
                Level::Band { lower: 16.0, upper: 20.25 }
            } else {
                Level::Upper(0.0)
            };
            // cumulative sums give strictly decreasing relaxations
            let mut acc: Vec<f64> = deltas.iter().rev().scan(0.0, |s, d| { *s += d; Some(*s) }).collect();
            acc.reverse();
            let mut levels: Vec<Level> = acc.iter().map(|&d| bound.relaxed(d)).collect();
            levels.push(bound);
            let sched = ThresholdSchedule::new(levels, &bound).unwrap();
            for w in sched.levels().windows(2) {
                if w[1].contains(g) {
                    prop_assert!(w[0].contains(g));
                }
            }
        }
    }
}

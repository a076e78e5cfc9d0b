//! Staged flow training over nested events and the final importance-sampling
//! estimate.
//!
//! Step `m` fits the flow truncated at `m*K` layers to the tempered target
//! `log p_m(x) = -tau * dist(g(x), level_m) + log p(x)`, where `dist` is the
//! g-distance to the level's region. With freezing on, only the `K` layers
//! that step `m` appends are trained.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{optimizer_step, AdamConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::flow::{base_logpdf, standard_normal_batch, FlowModel, LayerCache, LayerGrads, DEFAULT_CLAMP};
use crate::problems::{std_normal_logpdf, Level, Problem, ThresholdSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    ReverseKl,
    /// Self-normalized reweighted forward KL; ablation only.
    ForwardKl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One step per level, each appending `K` layers.
    #[default]
    Staged,
    /// All layers trained directly against the final level for `M*E` epochs.
    TerminalOnly,
    /// All layers trained for `E` epochs on the average of the `M` per-anchor
    /// KLs; each sample costs `M` calls.
    MeanOfKl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub layers_per_step: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub n_is: usize,
    pub freeze: bool,
    pub learning_rate: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub scale_clamp: f64,
    pub loss: LossKind,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            layers_per_step: 8,
            epochs: 20,
            batch_size: 400,
            temperature: 10.0,
            n_is: 50,
            freeze: true,
            learning_rate: 1e-3,
            seed: 0,
            hidden: vec![128, 128, 128],
            scale_clamp: DEFAULT_CLAMP,
            loss: LossKind::ReverseKl,
            variant: Variant::Staged,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("steps", self.steps),
            ("layers_per_step", self.layers_per_step),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("n_is", self.n_is),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.scale_clamp.is_finite() && self.scale_clamp > 0.0) {
            return Err(Error::invalid("scale_clamp must be positive"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if self.loss == LossKind::ForwardKl && self.variant == Variant::MeanOfKl {
            return Err(Error::Unsupported(
                "forward KL is only available for single-anchor variants".into(),
            ));
        }
        Ok(())
    }

    /// Counted g-calls of a full run with analytic gradients.
    pub fn call_budget(&self) -> u64 {
        (self.steps * self.epochs * self.batch_size + self.n_is) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub level: Level,
    pub losses: Vec<f64>,
    /// Fraction of the epoch's batch inside `level`.
    pub hit_fractions: Vec<f64>,
    pub mean_g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub p_est: f64,
    /// `None` when no sample hit the region.
    pub log10_p: Option<f64>,
    pub total_calls: u64,
    pub steps: Vec<StepDiagnostics>,
    /// Largest single contribution to the estimate's sum.
    pub max_weight_share: f64,
    /// Effective sample size of the weights on hits.
    pub ess: f64,
    pub hits: usize,
    /// Samples in the final estimator.
    pub n_final: usize,
    pub warnings: Vec<String>,
}

/// `-tau * dist(gval, level) + log p(x)`, unnormalized.
pub fn tempered_logdensity(level: &Level, tau: f64, x: &[f64], gval: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    Ok(-tau * level.violation(gval) + std_normal_logpdf(x))
}

/// Output of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradients for layers `trainable_from..` in order; earlier layers get none.
    pub grads: Vec<LayerGrads>,
    pub trainable_from: usize,
    /// g at the last anchor, one per sample.
    pub gvals: Vec<f64>,
}

impl LossOutput {
    pub fn layer_grads(&self, layer: usize) -> Option<&LayerGrads> {
        layer
            .checked_sub(self.trainable_from)
            .and_then(|k| self.grads.get(k))
    }
}

struct Anchor {
    upto: usize,
    level: Level,
    weight: f64,
}

/// Shared forward/backward over one or more anchor points of the flow.
fn anchored_loss(
    model: &FlowModel,
    problem: &Problem,
    anchors: &[Anchor],
    tau: f64,
    z0: ArrayView2<f64>,
    trainable_from: usize,
    kind: LossKind,
) -> Result<LossOutput> {
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let n = z0.nrows();
    let dim = model.dim();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if z0.ncols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: z0.ncols(),
        });
    }
    let top = anchors.iter().map(|a| a.upto).max().unwrap_or(0);
    if top > model.num_layers() {
        return Err(Error::invalid(format!(
            "loss needs {top} layers but the model has {}",
            model.num_layers()
        )));
    }
    let logp0 = base_logpdf(z0);

    let mut z = z0.to_owned();
    let mut cum = Array1::<f64>::zeros(n);
    let mut caches: Vec<LayerCache> = Vec::with_capacity(top.saturating_sub(trainable_from));
    let mut gvals = Vec::new();
    let mut sorted: Vec<usize> = (0..anchors.len()).collect();
    sorted.sort_by_key(|&i| anchors[i].upto);
    let mut next = 0;
    // per anchor: (grad of T wrt z at the anchor, log-ratio per sample)
    let mut terms: Vec<Option<(Array2<f64>, Array1<f64>)>> = vec![None; anchors.len()];
    for idx in 0..=top {
        while next < sorted.len() && anchors[sorted[next]].upto == idx {
            let a = &anchors[sorted[next]];
            let mut dt = Array2::<f64>::zeros((n, dim));
            let mut logr = Array1::<f64>::zeros(n);
            gvals.clear();
            for (r, row) in z.rows().into_iter().enumerate() {
                let x = row.to_vec();
                let g = problem.eval_g(&x)?;
                let grad = problem.eval_grad_g(&x)?;
                let slope = a.level.violation_slope(g);
                let t = -tau * a.level.violation(g) + std_normal_logpdf(&x);
                logr[r] = t + cum[r] - logp0[r];
                for c in 0..dim {
                    dt[[r, c]] = -tau * slope * grad[c] - x[c];
                }
                gvals.push(g);
            }
            terms[sorted[next]] = Some((dt, logr));
            next += 1;
        }
        if idx == top {
            break;
        }
        let layer = &model.layers()[idx];
        let (y, ld) = if idx >= trainable_from {
            let (y, ld, c) = layer.forward_cached(z.view())?;
            caches.push(c);
            (y, ld)
        } else {
            layer.forward(z.view())?
        };
        z = y;
        cum += &ld;
    }
    let anchor_terms: Vec<(Array2<f64>, Array1<f64>)> =
        terms.into_iter().map(|t| t.expect("every anchor visited")).collect();

    // coefficient of each log-ratio in the loss
    let mut loss = 0.0;
    let mut coefs: Vec<Array1<f64>> = Vec::with_capacity(anchors.len());
    for (a, (_, logr)) in anchors.iter().zip(&anchor_terms) {
        match kind {
            LossKind::ReverseKl => {
                loss -= a.weight * logr.mean().expect("non-empty");
                coefs.push(Array1::from_elem(n, -a.weight / n as f64));
            }
            LossKind::ForwardKl => {
                let mx = logr.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let w = logr.mapv(|v| (v - mx).exp());
                let w = &w / w.sum();
                let l = (&w * logr).sum();
                loss += a.weight * l;
                coefs.push(a.weight * &w * &logr.mapv(|v| 1.0 + v - l));
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            epoch: 0,
            reason: format!("non-finite loss {loss}"),
        });
    }

    let mut d = Array2::<f64>::zeros((n, dim));
    let mut dlogdet = Array1::<f64>::zeros(n);
    let mut grads = Vec::with_capacity(caches.len());
    for idx in (trainable_from..top).rev() {
        for (k, a) in anchors.iter().enumerate() {
            if a.upto == idx + 1 {
                let c = &coefs[k];
                d += &(&anchor_terms[k].0 * &c.view().insert_axis(Axis(1)));
                dlogdet += c;
            }
        }
        let (dx, g) = model.layers()[idx].backward(&caches[idx - trainable_from], d.view(), &dlogdet)?;
        d = dx;
        grads.push(g);
    }
    grads.reverse();
    Ok(LossOutput {
        loss,
        grads,
        trainable_from: trainable_from.min(top),
        gvals,
    })
}

fn stage_bounds(model: &FlowModel, m: usize, freeze: bool) -> Result<(usize, usize)> {
    let k = model.layers_per_step();
    if m == 0 || m > model.steps() {
        return Err(Error::invalid(format!(
            "step {m} is outside 1..={}",
            model.steps()
        )));
    }
    Ok((if freeze { (m - 1) * k } else { 0 }, m * k))
}

/// Reverse KL between the flow truncated at step `m` and the tempered target
/// of level `m`, estimated on `z0` (`N` counted calls).
pub fn reverse_kl_loss(
    model: &FlowModel,
    m: usize,
    problem: &Problem,
    schedule: &ThresholdSchedule,
    tau: f64,
    z0: ArrayView2<f64>,
    freeze: bool,
) -> Result<LossOutput> {
    step_loss(model, m, problem, schedule, tau, z0, freeze, LossKind::ReverseKl)
}

/// Self-normalized reweighted forward KL for step `m`.
pub fn forward_kl_loss(
    model: &FlowModel,
    m: usize,
    problem: &Problem,
    schedule: &ThresholdSchedule,
    tau: f64,
    z0: ArrayView2<f64>,
    freeze: bool,
) -> Result<LossOutput> {
    step_loss(model, m, problem, schedule, tau, z0, freeze, LossKind::ForwardKl)
}

#[allow(clippy::too_many_arguments)]
fn step_loss(
    model: &FlowModel,
    m: usize,
    problem: &Problem,
    schedule: &ThresholdSchedule,
    tau: f64,
    z0: ArrayView2<f64>,
    freeze: bool,
    kind: LossKind,
) -> Result<LossOutput> {
    let (from, upto) = stage_bounds(model, m, freeze)?;
    if m > schedule.len() {
        return Err(Error::invalid("schedule is shorter than the requested step"));
    }
    let anchors = [Anchor {
        upto,
        level: schedule.level(m),
        weight: 1.0,
    }];
    anchored_loss(model, problem, &anchors, tau, z0, from, kind)
}

struct Trainer {
    states: Vec<[OptimizerState; 2]>,
}

impl Trainer {
    fn new(model: &FlowModel, lr: f64) -> Self {
        let cfg = AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        };
        let states = model
            .layers()
            .iter()
            .map(|l| {
                [
                    OptimizerState::new(l.scale_net(), cfg),
                    OptimizerState::new(l.translate_net(), cfg),
                ]
            })
            .collect();
        Self { states }
    }

    fn apply(&mut self, model: &mut FlowModel, out: &LossOutput, step: usize, epoch: usize) -> Result<()> {
        if out.grads.iter().any(|g| !g.scale.is_finite() || !g.translate.is_finite()) {
            return Err(Error::Divergence {
                step,
                epoch,
                reason: "non-finite gradient".into(),
            });
        }
        for (k, g) in out.grads.iter().enumerate() {
            let li = out.trainable_from + k;
            let [ss, ts] = &mut self.states[li];
            let layer = model.layer_mut(li);
            optimizer_step(layer.scale_net_mut(), &g.scale, ss)?;
            optimizer_step(layer.translate_net_mut(), &g.translate, ts)?;
        }
        Ok(())
    }
}

fn with_context(e: Error, step: usize, epoch: usize) -> Error {
    match e {
        Error::Divergence { reason, .. } => Error::Divergence { step, epoch, reason },
        Error::NumericalOverflow { layer } => Error::Divergence {
            step,
            epoch,
            reason: format!("numerical overflow in coupling layer {layer}"),
        },
        other => other,
    }
}

/// Trains `model` in place. Diagnostics for completed epochs are pushed to
/// `diagnostics` even when training aborts.
pub fn train_into<R: Rng + ?Sized>(
    model: &mut FlowModel,
    problem: &Problem,
    schedule: &ThresholdSchedule,
    config: &TrainConfig,
    rng: &mut R,
    diagnostics: &mut Vec<StepDiagnostics>,
) -> Result<()> {
    config.validate()?;
    if schedule.len() != config.steps {
        return Err(Error::invalid(format!(
            "schedule has {} levels but the config asks for {} steps",
            schedule.len(),
            config.steps
        )));
    }
    if model.steps() != config.steps
        || model.layers_per_step() != config.layers_per_step
        || model.dim() != problem.dim()
    {
        return Err(Error::invalid(
            "model shape does not match the problem dimension and step configuration",
        ));
    }
    let mut trainer = Trainer::new(model, config.learning_rate);
    let (m_total, k) = (config.steps, config.layers_per_step);
    let n = config.batch_size;
    let tau = config.temperature;

    let mut run_epochs = |diag: &mut StepDiagnostics,
                          model: &mut FlowModel,
                          anchors: &[Anchor],
                          from: usize,
                          epochs: usize|
     -> Result<()> {
        let last_level = anchors.last().expect("one anchor").level;
        for e in 1..=epochs {
            let z0 = standard_normal_batch(n, model.dim(), rng);
            let out = anchored_loss(model, problem, anchors, tau, z0.view(), from, config.loss)
                .map_err(|err| with_context(err, diag.step, e))?;
            let hits = out.gvals.iter().filter(|&&g| last_level.contains(g)).count();
            diag.losses.push(out.loss);
            diag.hit_fractions.push(hits as f64 / n as f64);
            diag.mean_g.push(out.gvals.iter().sum::<f64>() / n as f64);
            trainer
                .apply(model, &out, diag.step, e)
                .map_err(|err| with_context(err, diag.step, e))?;
        }
        Ok(())
    };

    let new_diag = |step: usize, level: Level| StepDiagnostics {
        step,
        level,
        losses: Vec::new(),
        hit_fractions: Vec::new(),
        mean_g: Vec::new(),
    };

    match config.variant {
        Variant::Staged => {
            for m in 1..=m_total {
                let (from, upto) = stage_bounds(model, m, config.freeze)?;
                let anchors = [Anchor {
                    upto,
                    level: schedule.level(m),
                    weight: 1.0,
                }];
                diagnostics.push(new_diag(m, schedule.level(m)));
                let diag = diagnostics.last_mut().expect("just pushed");
                run_epochs(diag, model, &anchors, from, config.epochs)?;
            }
        }
        Variant::TerminalOnly => {
            let anchors = [Anchor {
                upto: m_total * k,
                level: schedule.level(m_total),
                weight: 1.0,
            }];
            diagnostics.push(new_diag(m_total, schedule.level(m_total)));
            let diag = diagnostics.last_mut().expect("just pushed");
            run_epochs(diag, model, &anchors, 0, m_total * config.epochs)?;
        }
        Variant::MeanOfKl => {
            let anchors: Vec<Anchor> = (1..=m_total)
                .map(|m| Anchor {
                    upto: m * k,
                    level: schedule.level(m),
                    weight: 1.0 / m_total as f64,
                })
                .collect();
            diagnostics.push(new_diag(m_total, schedule.level(m_total)));
            let diag = diagnostics.last_mut().expect("just pushed");
            run_epochs(diag, model, &anchors, 0, config.epochs)?;
        }
    }
    Ok(())
}

pub fn train<R: Rng + ?Sized>(
    model: &mut FlowModel,
    problem: &Problem,
    schedule: &ThresholdSchedule,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<StepDiagnostics>> {
    let mut diagnostics = Vec::new();
    train_into(model, problem, schedule, config, rng, &mut diagnostics)?;
    Ok(diagnostics)
}

/// Importance-sampling estimate with the full flow as proposal; `n_is`
/// counted calls.
pub fn importance_estimate<R: Rng + ?Sized>(
    model: &FlowModel,
    problem: &Problem,
    n_is: usize,
    rng: &mut R,
) -> Result<EstimateReport> {
    if n_is == 0 {
        return Err(Error::invalid("n_is must be at least 1"));
    }
    let start = problem.calls();
    let z0 = standard_normal_batch(n_is, model.dim(), rng);
    let trace = model.forward_trace(z0.view(), model.num_layers(), model.num_layers())?;
    // log p(x) - log q(x) with log q(x) = log p(z0) - cum_logdet
    let logw = base_logpdf(trace.z.view()) - base_logpdf(z0.view()) + &trace.cum_logdet;
    // exp underflow to zero is a valid weight far in the tails of p
    let w = logw.mapv(f64::exp);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidState(
            "importance weights must be finite".into(),
        ));
    }
    let gvals = problem.eval_batch(trace.z.view())?;
    let hit_w: Vec<f64> = gvals
        .iter()
        .zip(w.iter())
        .filter(|(g, _)| problem.membership(**g))
        .map(|(_, &w)| w)
        .collect();
    Ok(summarize_weights(&hit_w, n_is, problem.calls() - start))
}

/// Report for an estimator `sum(hit_weights) / n`.
pub(crate) fn summarize_weights(hit_weights: &[f64], n: usize, calls: u64) -> EstimateReport {
    let sum: f64 = hit_weights.iter().sum();
    let sum_sq: f64 = hit_weights.iter().map(|v| v * v).sum();
    let max = hit_weights.iter().copied().fold(0.0, f64::max);
    let p_est = sum / n as f64;
    let mut warnings = Vec::new();
    if hit_weights.is_empty() {
        warnings.push(format!("no sample hit the region among {n}"));
    }
    EstimateReport {
        p_est,
        log10_p: (p_est > 0.0).then(|| p_est.log10()),
        total_calls: calls,
        steps: Vec::new(),
        max_weight_share: if sum > 0.0 { max / sum } else { 0.0 },
        ess: if sum_sq > 0.0 { sum * sum / sum_sq } else { 0.0 },
        hits: hit_weights.len(),
        n_final: n,
        warnings,
    }
}

/// Full pipeline: identity-initialized flow, staged training, final estimate.
/// `total_calls` covers training and the estimate.
pub fn run_nofis(
    problem: &Problem,
    schedule: &ThresholdSchedule,
    config: &TrainConfig,
) -> Result<(FlowModel, EstimateReport)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = problem.calls();
    let mut model = FlowModel::new(
        problem.dim(),
        config.steps,
        config.layers_per_step,
        &config.hidden,
        config.scale_clamp,
        &mut rng,
    )?;
    let steps = train(&mut model, problem, schedule, config, &mut rng)?;
    let mut report = importance_estimate(&model, problem, config.n_is, &mut rng)?;
    report.steps = steps;
    report.total_calls = problem.calls() - start;
    Ok((model, report))
}

/// Smallest temperature for which the tempered target puts more density on
/// `x_in` than on `x_out`; zero when any temperature does. Costs two calls.
pub fn temperature_lower_bound(problem: &Problem, level: &Level, x_in: &[f64], x_out: &[f64]) -> Result<f64> {
    let g_in = problem.eval_g(x_in)?;
    let g_out = problem.eval_g(x_out)?;
    temperature_lower_bound_from_values(level, x_in, g_in, x_out, g_out)
}

pub fn temperature_lower_bound_from_values(
    level: &Level,
    x_in: &[f64],
    g_in: f64,
    x_out: &[f64],
    g_out: f64,
) -> Result<f64> {
    if !level.contains(g_in) {
        return Err(Error::invalid("x_in is not inside the level"));
    }
    if level.contains(g_out) {
        return Err(Error::invalid("x_out is not outside the level"));
    }
    let bound = (std_normal_logpdf(x_out) - std_normal_logpdf(x_in)) / level.violation(g_out);
    Ok(bound.max(0.0))
}

/// Fraction of the rows of `x` inside `level`; one counted call per row.
pub fn hit_fraction(problem: &Problem, level: &Level, x: ArrayView2<f64>) -> Result<f64> {
    let g = problem.eval_batch(x)?;
    Ok(g.iter().filter(|&&v| level.contains(v)).count() as f64 / x.nrows().max(1) as f64)
}

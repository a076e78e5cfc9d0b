//! Classical rare-event estimators: plain Monte Carlo, subset simulation,
//! scaled-sigma sampling and cross-entropy adaptive importance sampling with
//! a Gaussian mixture.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nofis::{summarize_weights, EstimateReport};
use crate::problems::{std_normal_logpdf, Problem};

fn normal_vec<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Fraction of `n` standard-normal samples inside the region.
pub fn mc_estimate<R: Rng + ?Sized>(problem: &Problem, n: usize, rng: &mut R) -> Result<EstimateReport> {
    if n == 0 {
        return Err(Error::invalid("MC sample count must be positive"));
    }
    let start = problem.calls();
    let mut hits = 0usize;
    for _ in 0..n {
        let x = normal_vec(problem.dim(), rng);
        if problem.membership(problem.eval_g(&x)?) {
            hits += 1;
        }
    }
    Ok(summarize_weights(&vec![1.0; hits], n, problem.calls() - start))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SusConfig {
    pub level_probability: f64,
    pub samples_per_level: usize,
    pub proposal_std: f64,
    pub max_levels: usize,
}

impl Default for SusConfig {
    fn default() -> Self {
        Self {
            level_probability: 0.1,
            samples_per_level: 1000,
            proposal_std: 1.0,
            max_levels: 20,
        }
    }
}

impl SusConfig {
    fn seeds(&self) -> usize {
        (self.level_probability * self.samples_per_level as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let p0 = self.level_probability;
        if !(p0 > 0.0 && p0 < 1.0) {
            return Err(Error::invalid("level_probability must lie in (0, 1)"));
        }
        let seeds = p0 * self.samples_per_level as f64;
        let chain = 1.0 / p0;
        if (seeds - seeds.round()).abs() > 1e-9 || seeds.round() < 2.0 {
            return Err(Error::invalid(
                "level_probability * samples_per_level must be an integer of at least 2",
            ));
        }
        if (chain - chain.round()).abs() > 1e-9 {
            return Err(Error::invalid("1 / level_probability must be an integer chain length"));
        }
        if !(self.proposal_std.is_finite() && self.proposal_std > 0.0) {
            return Err(Error::invalid("proposal_std must be positive"));
        }
        if self.max_levels == 0 {
            return Err(Error::invalid("max_levels must be at least 1"));
        }
        Ok(())
    }

    /// Upper bound on counted calls.
    pub fn call_budget(&self) -> u64 {
        (self.max_levels * self.samples_per_level) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusReport {
    pub report: EstimateReport,
    /// Adaptive score thresholds of the intermediate levels, strictly decreasing.
    pub thresholds: Vec<f64>,
    pub levels: usize,
    /// Mean per-component acceptance rate of the chains, one per conditional level.
    pub acceptance: Vec<f64>,
}

/// Subset simulation on the signed score of the problem bound (`<= 0` inside).
/// Each level draws exactly `samples_per_level` new counted samples.
pub fn sus_estimate<R: Rng + ?Sized>(problem: &Problem, config: &SusConfig, rng: &mut R) -> Result<SusReport> {
    config.validate()?;
    let start = problem.calls();
    let n = config.samples_per_level;
    let n_seeds = config.seeds();
    let chain_len = n / n_seeds;
    let bound = problem.bound();
    let dim = problem.dim();

    let mut pop: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n);
    for _ in 0..n {
        let x = normal_vec(dim, rng);
        let s = bound.score(problem.eval_g(&x)?);
        pop.push((x, s));
    }
    let mut thresholds: Vec<f64> = Vec::new();
    let mut acceptance = Vec::new();
    let mut levels = 1;
    loop {
        pop.sort_by(|a, b| a.1.total_cmp(&b.1));
        let inside = pop.iter().filter(|(_, s)| *s <= 0.0).count();
        if inside >= n_seeds {
            let p_est = config.level_probability.powi(levels as i32 - 1) * inside as f64 / n as f64;
            let mut report = summarize_weights(&[], n, problem.calls() - start);
            report.p_est = p_est;
            report.log10_p = Some(p_est.log10());
            report.hits = inside;
            report.warnings.clear();
            report.ess = inside as f64;
            report.max_weight_share = 1.0 / inside as f64;
            return Ok(SusReport {
                report,
                thresholds,
                levels,
                acceptance,
            });
        }
        if levels == config.max_levels {
            return Err(Error::Convergence(format!(
                "subset simulation reached {levels} levels without entering the region (last threshold {:?})",
                thresholds.last()
            )));
        }
        let b = 0.5 * (pop[n_seeds - 1].1 + pop[n_seeds].1);
        if let Some(&prev) = thresholds.last() {
            if b >= prev {
                return Err(Error::Convergence(format!(
                    "subset simulation stagnated at level {levels}: threshold {b} does not improve on {prev}"
                )));
            }
        }
        thresholds.push(b);
        let seeds: Vec<(Vec<f64>, f64)> = pop.drain(..n_seeds).collect();
        pop.clear();
        let mut accepted = 0usize;
        for (seed_x, seed_s) in seeds {
            let (mut x, mut s) = (seed_x, seed_s);
            for _ in 0..chain_len {
                let mut cand = x.clone();
                for (c, &cur) in cand.iter_mut().zip(&x) {
                    let prop = cur + config.proposal_std * rng.sample::<f64, _>(StandardNormal);
                    let log_ratio = -0.5 * (prop * prop - cur * cur);
                    if log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp() {
                        *c = prop;
                        accepted += 1;
                    }
                }
                let cs = bound.score(problem.eval_g(&cand)?);
                if cs <= b {
                    x = cand;
                    s = cs;
                }
                pop.push((x.clone(), s));
            }
        }
        acceptance.push(accepted as f64 / (n * dim) as f64);
        levels += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SssConfig {
    pub scales: Vec<f64>,
    pub samples_per_scale: usize,
}

impl Default for SssConfig {
    fn default() -> Self {
        Self {
            scales: vec![1.5, 2.0, 2.5, 3.0],
            samples_per_scale: 10_000,
        }
    }
}

impl SssConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.len() < 3 {
            return Err(Error::invalid("scaled-sigma sampling needs at least 3 scales"));
        }
        if self.scales.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::invalid("scales must be positive"));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("scales must be strictly increasing"));
        }
        if self.samples_per_scale == 0 {
            return Err(Error::invalid("samples_per_scale must be positive"));
        }
        Ok(())
    }

    pub fn call_budget(&self) -> u64 {
        (self.scales.len() * self.samples_per_scale) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SssReport {
    pub report: EstimateReport,
    /// MC probability at each scale.
    pub scale_probabilities: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// `log P_hat(s) - model(s)` for the scales used in the fit.
    pub residuals: Vec<f64>,
}

/// Weighted least-squares fit of `log P(s) = alpha + beta ln s - gamma / s^2`
/// with weights equal to hit counts. Returns `(alpha, beta, gamma, residuals)`.
pub fn fit_sigma_model(scales: &[f64], probs: &[f64], weights: &[f64]) -> Result<(f64, f64, f64, Vec<f64>)> {
    let used: Vec<usize> = (0..scales.len()).filter(|&i| probs[i] > 0.0 && weights[i] > 0.0).collect();
    if used.len() < 3 {
        return Err(Error::Extrapolation(format!(
            "only {} scales produced hits; the three-parameter model needs 3",
            used.len()
        )));
    }
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for &i in &used {
        let s = scales[i];
        let row = Vector3::new(1.0, s.ln(), -1.0 / (s * s));
        ata += weights[i] * row * row.transpose();
        atb += weights[i] * probs[i].ln() * row;
    }
    let sol = ata
        .lu()
        .solve(&atb)
        .filter(|v| v.iter().all(|c| c.is_finite()))
        .ok_or_else(|| Error::Extrapolation("singular scale design".into()))?;
    let residuals = used
        .iter()
        .map(|&i| {
            let s = scales[i];
            probs[i].ln() - (sol[0] + sol[1] * s.ln() - sol[2] / (s * s))
        })
        .collect();
    Ok((sol[0], sol[1], sol[2], residuals))
}

/// Scaled-sigma sampling: MC under `N(0, s^2 I)` per scale, extrapolated to
/// `s = 1`.
pub fn sss_estimate<R: Rng + ?Sized>(problem: &Problem, config: &SssConfig, rng: &mut R) -> Result<SssReport> {
    config.validate()?;
    let start = problem.calls();
    let n = config.samples_per_scale;
    let mut probs = Vec::with_capacity(config.scales.len());
    let mut counts = Vec::with_capacity(config.scales.len());
    for &s in &config.scales {
        let mut hits = 0usize;
        for _ in 0..n {
            let x: Vec<f64> = normal_vec(problem.dim(), rng).into_iter().map(|v| v * s).collect();
            if problem.membership(problem.eval_g(&x)?) {
                hits += 1;
            }
        }
        probs.push(hits as f64 / n as f64);
        counts.push(hits as f64);
    }
    let (alpha, beta, gamma, residuals) = fit_sigma_model(&config.scales, &probs, &counts)?;
    let p_est = (alpha - gamma).exp();
    let mut report = summarize_weights(&[], n * config.scales.len(), problem.calls() - start);
    report.warnings.clear();
    report.p_est = p_est;
    report.log10_p = (p_est > 0.0).then(|| p_est.log10());
    report.hits = counts.iter().sum::<f64>() as usize;
    Ok(SssReport {
        report,
        scale_probabilities: probs,
        alpha,
        beta,
        gamma,
        residuals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AisConfig {
    pub components: usize,
    pub elite_fraction: f64,
    pub iterations: usize,
    pub samples_per_iteration: usize,
    pub final_samples: usize,
    /// Added to every covariance diagonal after a refit.
    pub covariance_floor: f64,
}

impl Default for AisConfig {
    fn default() -> Self {
        Self {
            components: 2,
            elite_fraction: 0.1,
            iterations: 6,
            samples_per_iteration: 5000,
            final_samples: 5000,
            covariance_floor: 1e-6,
        }
    }
}

impl AisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 0.5) {
            return Err(Error::invalid("elite_fraction must lie in (0, 0.5]"));
        }
        if self.iterations == 0 || self.samples_per_iteration == 0 || self.final_samples == 0 {
            return Err(Error::invalid("iterations and sample counts must be positive"));
        }
        if (self.elite_fraction * self.samples_per_iteration as f64) < 1.0 {
            return Err(Error::invalid("elite set would be empty"));
        }
        if !(self.covariance_floor.is_finite() && self.covariance_floor > 0.0) {
            return Err(Error::invalid("covariance_floor must be positive"));
        }
        Ok(())
    }

    pub fn call_budget(&self) -> u64 {
        (self.iterations * self.samples_per_iteration + self.final_samples) as u64
    }
}

/// Gaussian mixture with Cholesky-factored covariances.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    chols: Vec<Cholesky<f64, Dyn>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || means.len() != covs.len() {
            return Err(Error::invalid("mixture parts have inconsistent lengths"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::invalid("mixture weights must be non-negative with positive sum"));
        }
        let chols = covs
            .into_iter()
            .map(|c| Cholesky::new(c).ok_or_else(|| Error::Convergence("covariance is not positive definite".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights: weights.iter().map(|w| w / total).collect(),
            means,
            chols,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    fn component_logpdf(&self, k: usize, x: &DVector<f64>) -> f64 {
        let l = self.chols[k].l_dirty();
        let diff = x - &self.means[k];
        let y = l
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        let logdet: f64 = (0..self.dim()).map(|i| l[(i, i)].ln()).sum();
        -0.5 * y.norm_squared() - logdet - 0.5 * self.dim() as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    /// Per-component `log(w_k) + log N_k(x)`.
    fn joint_logs(&self, x: &DVector<f64>) -> Vec<f64> {
        (0..self.weights.len())
            .map(|k| self.weights[k].ln() + self.component_logpdf(k, x))
            .collect()
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.joint_logs(&DVector::from_column_slice(x)))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z = DVector::from_vec(normal_vec(self.dim(), rng));
        let x = &self.means[k] + self.chols[k].l_dirty().lower_triangle() * z;
        x.as_slice().to_vec()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AisReport {
    pub report: EstimateReport,
    /// Elite score threshold per iteration; reaches 0 once the region is hit.
    pub thresholds: Vec<f64>,
}

/// Cross-entropy adaptive importance sampling with a Gaussian mixture.
pub fn adaptive_is_estimate<R: Rng + ?Sized>(problem: &Problem, config: &AisConfig, rng: &mut R) -> Result<AisReport> {
    config.validate()?;
    let start = problem.calls();
    let dim = problem.dim();
    let bound = problem.bound();
    let kc = config.components;
    let eye = DMatrix::<f64>::identity(dim, dim);
    let mut mix = GaussianMixture::new(
        vec![1.0; kc],
        (0..kc).map(|_| DVector::from_vec(normal_vec(dim, rng))).collect(),
        vec![eye.clone(); kc],
    )?;
    let mut thresholds = Vec::with_capacity(config.iterations);
    let n = config.samples_per_iteration;
    let n_elite = ((config.elite_fraction * n as f64).ceil() as usize).max(1);
    for _ in 0..config.iterations {
        let mut xs = Vec::with_capacity(n);
        let mut scores = Vec::with_capacity(n);
        for _ in 0..n {
            let x = mix.sample(rng);
            scores.push(bound.score(problem.eval_g(&x)?));
            xs.push(x);
        }
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let b = sorted[n_elite - 1].max(0.0);
        thresholds.push(b);

        // elites with self-normalized likelihood ratios p / q and responsibilities
        let mut elite = Vec::new();
        let mut logw = Vec::new();
        let mut resp = Vec::new();
        for (x, &s) in xs.iter().zip(&scores) {
            if s <= b {
                let xv = DVector::from_column_slice(x);
                let joint = mix.joint_logs(&xv);
                let lq = log_sum_exp(&joint);
                logw.push(std_normal_logpdf(x) - lq);
                resp.push(joint.iter().map(|j| (j - lq).exp()).collect::<Vec<_>>());
                elite.push(xv);
            }
        }
        let mx = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - mx).exp()).collect();

        let mut weights = Vec::with_capacity(kc);
        let mut means = Vec::with_capacity(kc);
        let mut covs = Vec::with_capacity(kc);
        for k in 0..kc {
            let wk: Vec<f64> = w.iter().zip(&resp).map(|(wi, r)| wi * r[k]).collect();
            let total: f64 = wk.iter().sum();
            if !(total > 1e-300) {
                // component lost all elites: keep it with a negligible weight
                weights.push(1e-12);
                means.push(mix.means[k].clone());
                covs.push(eye.clone());
                continue;
            }
            let mean = elite.iter().zip(&wk).fold(DVector::zeros(dim), |acc, (x, wi)| acc + x * *wi) / total;
            let mut cov = elite.iter().zip(&wk).fold(DMatrix::zeros(dim, dim), |acc, (x, wi)| {
                let d = x - &mean;
                acc + (&d * d.transpose()) * *wi
            }) / total;
            for i in 0..dim {
                cov[(i, i)] += config.covariance_floor;
            }
            weights.push(total);
            means.push(mean);
            covs.push(cov);
        }
        mix = match GaussianMixture::new(weights.clone(), means.clone(), covs.clone()) {
            Ok(m) => m,
            Err(_) => {
                // second chance with a much larger floor before giving up
                let bumped = covs
                    .into_iter()
                    .map(|mut c| {
                        for i in 0..dim {
                            c[(i, i)] += 1e3 * config.covariance_floor + 1e-6;
                        }
                        c
                    })
                    .collect();
                GaussianMixture::new(weights, means, bumped)?
            }
        };
    }

    let mut hit_w = Vec::new();
    for _ in 0..config.final_samples {
        let x = mix.sample(rng);
        if problem.membership(problem.eval_g(&x)?) {
            hit_w.push((std_normal_logpdf(&x) - mix.logpdf(&x)).exp());
        }
    }
    Ok(AisReport {
        report: summarize_weights(&hit_w, config.final_samples, problem.calls() - start),
        thresholds,
    })
}

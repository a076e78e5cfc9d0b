//! Reverse-mode differentiation for small dense tanh networks, plus Adam.
//!
//! Only the fixed topology used by the coupling-layer conditioners is
//! supported: affine layers with `tanh` between them and an identity output.
//! Batches are row-major `(batch, features)` matrices.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Feed-forward network `sizes[0] -> ... -> sizes[last]` with `tanh` hidden
/// activations and an identity output layer.
#[derive(Debug)]
pub struct DenseNet {
    sizes: Vec<usize>,
    /// `weights[i]` has shape `(sizes[i + 1], sizes[i])`.
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    /// Changes on every parameter mutation so stale caches can be detected.
    stamp: u64,
}

impl Clone for DenseNet {
    fn clone(&self) -> Self {
        Self {
            sizes: self.sizes.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            stamp: fresh_stamp(),
        }
    }
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.sizes == other.sizes && self.weights == other.weights && self.biases == other.biases
    }
}

/// Activations saved by [`DenseNet::forward`]; consumed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each affine layer (the raw input first, then tanh outputs).
    inputs: Vec<Array2<f64>>,
    stamp: u64,
}

/// Parameter gradients with the same shapes as the owning network.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl GradientBundle {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Flat view of parameter `idx` using the same ordering as [`DenseNet::param`].
    pub fn get(&self, idx: usize) -> f64 {
        let mut idx = idx;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if idx < w.len() {
                return w[[idx / w.ncols(), idx % w.ncols()]];
            }
            idx -= w.len();
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("gradient index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl DenseNet {
    /// All parameters drawn uniformly in `±1/sqrt(fan_in)`.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        Self::build(sizes, rng, false)
    }

    /// Like [`DenseNet::random`] but with a zero output layer, so the network
    /// computes the zero function until trained.
    pub fn zero_output<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        Self::build(sizes, rng, true)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        validate_sizes(sizes)?;
        let weights = sizes
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            stamp: fresh_stamp(),
        })
    }

    fn build<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R, zero_last: bool) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let n_layers = net.weights.len();
        for (i, (w, b)) in net.weights.iter_mut().zip(net.biases.iter_mut()).enumerate() {
            if zero_last && i + 1 == n_layers {
                continue;
            }
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-bound..bound));
            b.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(net)
    }

    /// Assemble a network from explicit parameters (checkpoint loading).
    pub fn from_parts(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::invalid("weights and biases must be non-empty and paired"));
        }
        let mut sizes = vec![weights[0].ncols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.ncols() != *sizes.last().unwrap() || w.nrows() != b.len() {
                return Err(Error::invalid("layer shapes do not chain"));
            }
            sizes.push(w.nrows());
        }
        validate_sizes(&sizes)?;
        if weights.iter().any(|w| w.iter().any(|v| !v.is_finite()))
            || biases.iter().any(|b| b.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(Self {
            sizes,
            weights,
            biases,
            stamp: fresh_stamp(),
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    /// Mutable access to layer `i`'s weight and bias; invalidates caches.
    pub fn layer_mut(&mut self, i: usize) -> (&mut Array2<f64>, &mut Array1<f64>) {
        self.stamp = fresh_stamp();
        (&mut self.weights[i], &mut self.biases[i])
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameter `idx` in flat order: layer 0 weights (row-major), layer 0
    /// bias, layer 1 weights, ...
    pub fn param(&self, idx: usize) -> f64 {
        let mut idx = idx;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if idx < w.len() {
                return w[[idx / w.ncols(), idx % w.ncols()]];
            }
            idx -= w.len();
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        self.stamp = fresh_stamp();
        let mut idx = idx;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            if idx < w.len() {
                let cols = w.ncols();
                w[[idx / cols, idx % cols]] = value;
                return;
            }
            idx -= w.len();
            if idx < b.len() {
                b[idx] = value;
                return;
            }
            idx -= b.len();
        }
        panic!("parameter index out of range");
    }

    fn check_input(&self, input: &ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.sizes[0] {
            return Err(Error::DimensionMismatch {
                expected: self.sizes[0],
                got: input.ncols(),
            });
        }
        Ok(())
    }

    /// Forward pass without keeping activations.
    pub fn apply(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        let last = self.weights.len() - 1;
        let mut a = affine(input, &self.weights[0], &self.biases[0]);
        for i in 1..=last {
            a.mapv_inplace(f64::tanh);
            a = affine(a.view(), &self.weights[i], &self.biases[i]);
        }
        Ok(a)
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&input)?;
        let n_layers = self.weights.len();
        let mut inputs = Vec::with_capacity(n_layers);
        inputs.push(input.to_owned());
        let mut out = affine(input, &self.weights[0], &self.biases[0]);
        for i in 1..n_layers {
            out.mapv_inplace(f64::tanh);
            let next = affine(out.view(), &self.weights[i], &self.biases[i]);
            inputs.push(out);
            out = next;
        }
        Ok((
            out,
            ForwardCache {
                inputs,
                stamp: self.stamp,
            },
        ))
    }

    /// Gradients of the scalar `sum(upstream * output)` with respect to the
    /// input batch and to every parameter.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, GradientBundle)> {
        if cache.stamp != self.stamp || cache.inputs.len() != self.weights.len() {
            return Err(Error::InvalidState(
                "forward cache does not belong to this network's current parameters".into(),
            ));
        }
        let batch = cache.inputs[0].nrows();
        if upstream.nrows() != batch || upstream.ncols() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: upstream.ncols(),
            });
        }
        let n_layers = self.weights.len();
        let mut gw = Vec::with_capacity(n_layers);
        let mut gb = Vec::with_capacity(n_layers);
        let mut delta = upstream.to_owned();
        for l in (0..n_layers).rev() {
            let a = &cache.inputs[l];
            gw.push(delta.t().dot(a));
            gb.push(delta.sum_axis(Axis(0)));
            let mut prev = delta.dot(&self.weights[l]);
            if l > 0 {
                ndarray::Zip::from(&mut prev)
                    .and(a)
                    .for_each(|d, &act| *d *= 1.0 - act * act);
            }
            delta = prev;
        }
        gw.reverse();
        gb.reverse();
        Ok((
            delta,
            GradientBundle {
                weights: gw,
                biases: gb,
            },
        ))
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
        return Err(Error::invalid(format!(
            "layer sizes must list at least two positive widths, got {sizes:?}"
        )));
    }
    Ok(())
}

fn affine(a: ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut z = a.dot(&w.t());
    z += b;
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators for one network.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    first: GradientBundle,
    second: GradientBundle,
    step: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(net: &DenseNet, config: AdamConfig) -> Self {
        Self {
            first: GradientBundle::zeros_like(net),
            second: GradientBundle::zeros_like(net),
            step: 0,
            config,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. The network is left untouched when the
/// gradient contains a non-finite value.
pub fn optimizer_step(
    net: &mut DenseNet,
    grads: &GradientBundle,
    state: &mut OptimizerState,
) -> Result<()> {
    if grads.weights.len() != net.weights.len()
        || grads
            .weights
            .iter()
            .zip(&net.weights)
            .any(|(g, w)| g.raw_dim() != w.raw_dim())
        || grads
            .biases
            .iter()
            .zip(&net.biases)
            .any(|(g, b)| g.raw_dim() != b.raw_dim())
    {
        return Err(Error::invalid("gradient shapes do not match the network"));
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient {
            update: state.step + 1,
        });
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    };
    net.stamp = fresh_stamp();
    for l in 0..net.weights.len() {
        ndarray::Zip::from(&mut net.weights[l])
            .and(&grads.weights[l])
            .and(&mut state.first.weights[l])
            .and(&mut state.second.weights[l])
            .for_each(|p, &g, m, v| update(p, g, m, v));
        ndarray::Zip::from(&mut net.biases[l])
            .and(&grads.biases[l])
            .and(&mut state.first.biases[l])
            .and(&mut state.second.biases[l])
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}

/// Upstream weights used by [`grad_check`]: a fixed, non-constant pattern so
/// that no output coordinate is ignored.
fn probe_weights(rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(r, c)| 1.0 + 0.37 * ((r * cols + c) % 7) as f64)
}

/// Worst relative discrepancy between `backward` and central differences of
/// the probe loss `sum(probe * net(input))`, taken over every parameter and
/// every input coordinate.
pub fn grad_check(net: &DenseNet, input: ArrayView2<f64>, epsilon: f64) -> Result<f64> {
    grad_check_with(net, input, epsilon, |n, cache, up| n.backward(cache, up))
}

/// [`grad_check`] against an arbitrary backward implementation.
pub fn grad_check_with<F>(
    net: &DenseNet,
    input: ArrayView2<f64>,
    epsilon: f64,
    backward: F,
) -> Result<f64>
where
    F: Fn(&DenseNet, &ForwardCache, ArrayView2<f64>) -> Result<(Array2<f64>, GradientBundle)>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid("grad_check epsilon must lie in (0, 1e-2]"));
    }
    let probe = probe_weights(input.nrows(), net.output_dim());
    let loss = |n: &DenseNet, x: ArrayView2<f64>| -> Result<f64> {
        Ok((&n.apply(x)? * &probe).sum())
    };
    let (_, cache) = net.forward(input)?;
    let (input_grad, grads) = backward(net, &cache, probe.view())?;

    let mut worst = 0.0_f64;
    let mut work = net.clone();
    for idx in 0..net.num_params() {
        let orig = work.param(idx);
        work.set_param(idx, orig + epsilon);
        let up = loss(&work, input)?;
        work.set_param(idx, orig - epsilon);
        let down = loss(&work, input)?;
        work.set_param(idx, orig);
        worst = worst.max(relative_error(grads.get(idx), (up - down) / (2.0 * epsilon)));
    }
    let mut x = input.to_owned();
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            let orig = x[[r, c]];
            x[[r, c]] = orig + epsilon;
            let up = loss(net, x.view())?;
            x[[r, c]] = orig - epsilon;
            let down = loss(net, x.view())?;
            x[[r, c]] = orig;
            worst = worst.max(relative_error(input_grad[[r, c]], (up - down) / (2.0 * epsilon)));
        }
    }
    Ok(worst)
}

/// `|a - b| / max(|a|, |b|, 1e-6)`; the floor keeps exact zeros from
/// amplifying round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

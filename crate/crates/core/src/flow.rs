//! Affine-coupling normalizing flow with exact log-determinants.
//!
//! With `h = ceil(D/2)`, even-indexed layers keep `x[..h]` and transform
//! `x[h..]`; odd-indexed layers keep `x[h..]` and transform `x[..h]`. A changed
//! coordinate maps as `y = x * exp(s) + t` where `s = clamp * tanh(raw / clamp)`
//! and `(raw, t)` come from two dense nets fed the kept half. For `D = 1` there
//! is no kept half; the nets see a constant zero column so each layer is a
//! learned scalar affine map.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{DenseNet, ForwardCache, GradientBundle};
use crate::error::{Error, Result};
use crate::problems::std_normal_logpdf;

pub const DEFAULT_CLAMP: f64 = 5.0;
const MAGIC: &[u8; 5] = b"NOFIS";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    index: usize,
    dim: usize,
    scale_net: DenseNet,
    translate_net: DenseNet,
    clamp: f64,
}

/// Activations a layer keeps for backpropagation.
#[derive(Debug, Clone)]
pub struct LayerCache {
    scale: ForwardCache,
    translate: ForwardCache,
    x_change: Array2<f64>,
    exp_s: Array2<f64>,
    tanh: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub scale: GradientBundle,
    pub translate: GradientBundle,
}

fn half(dim: usize) -> usize {
    dim.div_ceil(2)
}

fn net_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

impl CouplingLayer {
    fn ranges(dim: usize, index: usize) -> (Range<usize>, Range<usize>) {
        let h = half(dim);
        if dim == 1 {
            (0..0, 0..1)
        } else if index % 2 == 0 {
            (0..h, h..dim)
        } else {
            (h..dim, 0..h)
        }
    }

    fn io_widths(dim: usize, index: usize) -> (usize, usize) {
        let (pass, change) = Self::ranges(dim, index);
        (pass.len().max(1), change.len())
    }

    /// Layer with zero-output subnetworks, i.e. the identity map.
    pub fn identity<R: Rng + ?Sized>(
        dim: usize,
        index: usize,
        hidden: &[usize],
        clamp: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (i, o) = Self::io_widths(dim, index);
        let sizes = net_sizes(i, hidden, o);
        Self::from_nets(
            dim,
            index,
            DenseNet::zero_output(&sizes, rng)?,
            DenseNet::zero_output(&sizes, rng)?,
            clamp,
        )
    }

    /// Layer with every parameter drawn at random.
    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        index: usize,
        hidden: &[usize],
        clamp: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (i, o) = Self::io_widths(dim, index);
        let sizes = net_sizes(i, hidden, o);
        Self::from_nets(
            dim,
            index,
            DenseNet::random(&sizes, rng)?,
            DenseNet::random(&sizes, rng)?,
            clamp,
        )
    }

    pub fn from_nets(
        dim: usize,
        index: usize,
        scale_net: DenseNet,
        translate_net: DenseNet,
        clamp: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("flow dimension must be positive"));
        }
        if !(clamp.is_finite() && clamp > 0.0) {
            return Err(Error::invalid("scale clamp must be positive and finite"));
        }
        let (i, o) = Self::io_widths(dim, index);
        for net in [&scale_net, &translate_net] {
            if net.input_dim() != i || net.output_dim() != o {
                return Err(Error::Format(format!(
                    "layer {index}: subnetwork maps {}->{}, expected {i}->{o}",
                    net.input_dim(),
                    net.output_dim()
                )));
            }
        }
        Ok(Self {
            index,
            dim,
            scale_net,
            translate_net,
            clamp,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    /// 0 when the leading half passes through, 1 when the trailing half does.
    pub fn parity(&self) -> u8 {
        (self.index % 2) as u8
    }

    pub fn pass_range(&self) -> Range<usize> {
        Self::ranges(self.dim, self.index).0
    }

    pub fn change_range(&self) -> Range<usize> {
        Self::ranges(self.dim, self.index).1
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    pub fn scale_net(&self) -> &DenseNet {
        &self.scale_net
    }

    pub fn translate_net(&self) -> &DenseNet {
        &self.translate_net
    }

    pub fn scale_net_mut(&mut self) -> &mut DenseNet {
        &mut self.scale_net
    }

    pub fn translate_net_mut(&mut self) -> &mut DenseNet {
        &mut self.translate_net
    }

    /// `[scale, translate]`.
    pub fn nets_mut(&mut self) -> [&mut DenseNet; 2] {
        [&mut self.scale_net, &mut self.translate_net]
    }

    fn check(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    fn conditioner(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let pass = self.pass_range();
        if pass.is_empty() {
            Array2::zeros((x.nrows(), 1))
        } else {
            x.slice(s![.., pass]).to_owned()
        }
    }

    fn squash(&self, raw: &mut Array2<f64>) -> Array2<f64> {
        let c = self.clamp;
        let th = raw.mapv(|r| (r / c).tanh());
        Zip::from(raw).and(&th).for_each(|r, &t| *r = c * t);
        th
    }

    fn overflow_check(&self, y: &Array2<f64>, logdet: &Array1<f64>) -> Result<()> {
        if y.iter().chain(logdet.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow { layer: self.index });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check(&x)?;
        let cond = self.conditioner(&x);
        let mut s = self.scale_net.apply(cond.view())?;
        self.squash(&mut s);
        let t = self.translate_net.apply(cond.view())?;
        let mut y = x.to_owned();
        let change = self.change_range();
        Zip::from(y.slice_mut(s![.., change]))
            .and(&s)
            .and(&t)
            .for_each(|v, &si, &ti| *v = *v * si.exp() + ti);
        let logdet = s.sum_axis(Axis(1));
        self.overflow_check(&y, &logdet)?;
        Ok((y, logdet))
    }

    pub fn forward_cached(
        &self,
        x: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array1<f64>, LayerCache)> {
        self.check(&x)?;
        let cond = self.conditioner(&x);
        let (mut s, scale) = self.scale_net.forward(cond.view())?;
        let tanh = self.squash(&mut s);
        let (t, translate) = self.translate_net.forward(cond.view())?;
        let change = self.change_range();
        let x_change = x.slice(s![.., change.clone()]).to_owned();
        let exp_s = s.mapv(f64::exp);
        let mut y = x.to_owned();
        Zip::from(y.slice_mut(s![.., change]))
            .and(&exp_s)
            .and(&t)
            .for_each(|v, &e, &ti| *v = *v * e + ti);
        let logdet = s.sum_axis(Axis(1));
        self.overflow_check(&y, &logdet)?;
        Ok((
            y,
            logdet,
            LayerCache {
                scale,
                translate,
                x_change,
                exp_s,
                tanh,
            },
        ))
    }

    /// Analytic inverse; the returned logdet is that of the inverse map.
    pub fn inverse(&self, y: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check(&y)?;
        let cond = self.conditioner(&y);
        let mut s = self.scale_net.apply(cond.view())?;
        self.squash(&mut s);
        let t = self.translate_net.apply(cond.view())?;
        let mut x = y.to_owned();
        let change = self.change_range();
        Zip::from(x.slice_mut(s![.., change]))
            .and(&s)
            .and(&t)
            .for_each(|v, &si, &ti| *v = (*v - ti) * (-si).exp());
        let logdet = -s.sum_axis(Axis(1));
        self.overflow_check(&x, &logdet)?;
        Ok((x, logdet))
    }

    /// Backpropagates `dy` (gradient w.r.t. the output batch) and `dlogdet`
    /// (gradient w.r.t. each sample's logdet). Returns the input gradient and
    /// parameter gradients.
    pub fn backward(
        &self,
        cache: &LayerCache,
        dy: ArrayView2<f64>,
        dlogdet: &Array1<f64>,
    ) -> Result<(Array2<f64>, LayerGrads)> {
        let change = self.change_range();
        let dy_c = dy.slice(s![.., change.clone()]);
        let mut dx = dy.to_owned();
        let mut draw = Array2::<f64>::zeros(cache.exp_s.raw_dim());
        Zip::from(dx.slice_mut(s![.., change]))
            .and(&mut draw)
            .and(&dy_c)
            .and(&cache.exp_s)
            .and(&cache.x_change)
            .and(&cache.tanh)
            .for_each(|dxc, dr, &g, &e, &xc, &th| {
                *dxc = g * e;
                *dr = g * xc * e * (1.0 - th * th);
            });
        Zip::from(draw.rows_mut())
            .and(dlogdet)
            .and(cache.tanh.rows())
            .for_each(|mut row, &dl, th| {
                Zip::from(&mut row).and(&th).for_each(|d, &t| *d += dl * (1.0 - t * t));
            });
        let (dcond_s, scale) = self.scale_net.backward(&cache.scale, draw.view())?;
        let (dcond_t, translate) = self.translate_net.backward(&cache.translate, dy_c)?;
        let pass = self.pass_range();
        if !pass.is_empty() {
            let mut dp = dx.slice_mut(s![.., pass]);
            dp += &dcond_s;
            dp += &dcond_t;
        }
        Ok((dx, LayerGrads { scale, translate }))
    }
}

pub fn layer_forward(layer: &CouplingLayer, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    layer.forward(x)
}

pub fn layer_inverse(layer: &CouplingLayer, y: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    layer.inverse(y)
}

/// Stack of `steps * layers_per_step` coupling layers over a standard-normal
/// base. Layers `(m-1)*K .. m*K` are the block that step `m` adds.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    dim: usize,
    layers_per_step: usize,
    layers: Vec<CouplingLayer>,
}

/// Result of pushing a batch through the first `upto` layers.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub z0: Array2<f64>,
    pub z: Array2<f64>,
    pub cum_logdet: Array1<f64>,
    /// Caches for layers `cache_from .. upto`.
    pub caches: Vec<LayerCache>,
    pub cache_from: usize,
}

impl FlowModel {
    /// Identity-initialized model.
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        steps: usize,
        layers_per_step: usize,
        hidden: &[usize],
        clamp: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(dim, steps, layers_per_step, |i, r| {
            CouplingLayer::identity(dim, i, hidden, clamp, r)
        }, rng)
    }

    /// Model with random parameters everywhere (not the identity).
    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        steps: usize,
        layers_per_step: usize,
        hidden: &[usize],
        clamp: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(dim, steps, layers_per_step, |i, r| {
            CouplingLayer::random(dim, i, hidden, clamp, r)
        }, rng)
    }

    fn build<R: Rng + ?Sized, F>(
        dim: usize,
        steps: usize,
        layers_per_step: usize,
        mut make: F,
        rng: &mut R,
    ) -> Result<Self>
    where
        F: FnMut(usize, &mut R) -> Result<CouplingLayer>,
    {
        if steps == 0 || layers_per_step == 0 {
            return Err(Error::invalid("flow needs at least one step and one layer per step"));
        }
        let layers = (0..steps * layers_per_step)
            .map(|i| make(i, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(dim, layers_per_step, layers)
    }

    pub fn from_layers(dim: usize, layers_per_step: usize, layers: Vec<CouplingLayer>) -> Result<Self> {
        if layers_per_step == 0 || layers.is_empty() || layers.len() % layers_per_step != 0 {
            return Err(Error::invalid(format!(
                "{} layers cannot be split into blocks of {layers_per_step}",
                layers.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.index != i || l.dim != dim {
                return Err(Error::invalid(format!("layer {i} is out of place or has the wrong dimension")));
            }
        }
        Ok(Self {
            dim,
            layers_per_step,
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers_per_step(&self) -> usize {
        self.layers_per_step
    }

    pub fn steps(&self) -> usize {
        self.layers.len() / self.layers_per_step
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut CouplingLayer {
        &mut self.layers[i]
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.scale_net.num_params() + l.translate_net.num_params())
            .sum()
    }

    fn check_upto(&self, upto: usize) -> Result<()> {
        if upto > self.layers.len() {
            return Err(Error::invalid(format!(
                "requested {upto} layers but the model has {}",
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// Pushes `z0` through layers `0..upto`, caching activations for layers
    /// `cache_from..upto` only.
    pub fn forward_trace(&self, z0: ArrayView2<f64>, upto: usize, cache_from: usize) -> Result<FlowTrace> {
        self.check_upto(upto)?;
        if z0.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z0.ncols(),
            });
        }
        let cache_from = cache_from.min(upto);
        let mut z = z0.to_owned();
        let mut cum = Array1::zeros(z0.nrows());
        let mut caches = Vec::with_capacity(upto - cache_from);
        for layer in &self.layers[..upto] {
            let (y, ld) = if layer.index >= cache_from {
                let (y, ld, c) = layer.forward_cached(z.view())?;
                caches.push(c);
                (y, ld)
            } else {
                layer.forward(z.view())?
            };
            z = y;
            cum += &ld;
        }
        Ok(FlowTrace {
            z0: z0.to_owned(),
            z,
            cum_logdet: cum,
            caches,
            cache_from,
        })
    }

    /// Backpropagates through the cached layers of `trace`. `dz` is the
    /// gradient w.r.t. the final batch, `dlogdet` w.r.t. each sample's
    /// cumulative logdet. Returns gradients for layers `cache_from..upto` in
    /// order.
    pub fn backward(
        &self,
        trace: &FlowTrace,
        dz: ArrayView2<f64>,
        dlogdet: &Array1<f64>,
    ) -> Result<Vec<LayerGrads>> {
        let mut grads = Vec::with_capacity(trace.caches.len());
        let mut d = dz.to_owned();
        for (k, cache) in trace.caches.iter().enumerate().rev() {
            let layer = &self.layers[trace.cache_from + k];
            let (dx, g) = layer.backward(cache, d.view(), dlogdet)?;
            d = dx;
            grads.push(g);
        }
        grads.reverse();
        Ok(grads)
    }

    /// Log-density of the model truncated to `upto` layers, via the inverse.
    pub fn log_density(&self, x: ArrayView2<f64>, upto: usize) -> Result<Array1<f64>> {
        self.check_upto(upto)?;
        if x.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.ncols(),
            });
        }
        let mut z = x.to_owned();
        let mut cum = Array1::<f64>::zeros(x.nrows());
        for layer in self.layers[..upto].iter().rev() {
            let (prev, ld) = layer.inverse(z.view())?;
            z = prev;
            cum += &ld;
        }
        Ok(Zip::from(z.rows())
            .and(&cum)
            .map_collect(|row, &c| std_normal_logpdf(row.as_slice().unwrap_or(&row.to_vec())) + c))
    }
}

pub fn flow_forward(
    model: &FlowModel,
    z0: ArrayView2<f64>,
    upto: usize,
) -> Result<FlowTrace> {
    model.forward_trace(z0, upto, 0)
}

pub fn standard_normal_batch<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, dim), || rng.sample::<f64, _>(StandardNormal))
}

/// Per-row standard-normal log-density.
pub fn base_logpdf(z: ArrayView2<f64>) -> Array1<f64> {
    let c = -0.5 * z.ncols() as f64 * (2.0 * std::f64::consts::PI).ln();
    z.rows().into_iter().map(|r| c - 0.5 * r.dot(&r)).collect()
}

/// `n` samples of the truncated model with their log-densities.
pub fn flow_sample<R: Rng + ?Sized>(
    model: &FlowModel,
    n: usize,
    upto: usize,
    rng: &mut R,
) -> Result<(Array2<f64>, Array1<f64>)> {
    if n == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let z0 = standard_normal_batch(n, model.dim(), rng);
    let trace = model.forward_trace(z0.view(), upto, upto)?;
    let logq = base_logpdf(z0.view()) - &trace.cum_logdet;
    Ok((trace.z, logq))
}

pub fn flow_logdensity(model: &FlowModel, x: ArrayView2<f64>, upto: usize) -> Result<Array1<f64>> {
    model.log_density(x, upto)
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn encode_net(buf: &mut Vec<u8>, net: &DenseNet) {
    put_u64(buf, net.sizes().len() as u64);
    for &s in net.sizes() {
        put_u64(buf, s as u64);
    }
    for (w, b) in net.weights().iter().zip(net.biases()) {
        for v in w.iter() {
            put_f64(buf, *v);
        }
        for v in b.iter() {
            put_f64(buf, *v);
        }
    }
}

/// Serializes the model into the versioned little-endian checkpoint layout.
pub fn checkpoint_bytes(model: &FlowModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(b'0' + VERSION);
    put_u64(&mut buf, model.dim as u64);
    put_u64(&mut buf, model.layers.len() as u64);
    put_u64(&mut buf, model.layers_per_step as u64);
    put_f64(&mut buf, model.layers.first().map_or(DEFAULT_CLAMP, |l| l.clamp));
    for layer in &model.layers {
        buf.push(layer.parity());
        encode_net(&mut buf, &layer.scale_net);
        encode_net(&mut buf, &layer.translate_net);
    }
    buf
}

pub fn checkpoint_save(model: &FlowModel, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&checkpoint_bytes(model))
        .and_then(|_| file.sync_all())
        .map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load(path: &Path) -> Result<FlowModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str, max: u64) -> Result<usize> {
        let v = self.u64()?;
        if v > max {
            return Err(Error::Format(format!("implausible {what}: {v}")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn net(&mut self) -> Result<DenseNet> {
        let n_sizes = self.usize("layer-size count", 64)?;
        let sizes = (0..n_sizes)
            .map(|_| self.usize("layer width", 1 << 16))
            .collect::<Result<Vec<_>>>()?;
        if sizes.len() < 2 {
            return Err(Error::Format("subnetwork needs at least two widths".into()));
        }
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = (0..fan_in * fan_out).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            let b = (0..fan_out).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            weights.push(Array2::from_shape_vec((fan_out, fan_in), w).expect("shape matches length"));
            biases.push(Array1::from(b));
        }
        DenseNet::from_parts(weights, biases).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<FlowModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("missing checkpoint magic".into()));
    }
    let tag = r.u8()?;
    if !tag.is_ascii_digit() {
        return Err(Error::Format(format!("bad version tag byte {tag:#04x}")));
    }
    let version = tag - b'0';
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let dim = r.usize("dimension", 1 << 20)?;
    let n_layers = r.usize("layer count", 1 << 16)?;
    let per_step = r.usize("layers per step", 1 << 16)?;
    let clamp = r.f64()?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let parity = r.u8()?;
        if parity as usize != i % 2 {
            return Err(Error::Format(format!("layer {i} has parity {parity}, expected {}", i % 2)));
        }
        let scale = r.net()?;
        let translate = r.net()?;
        layers.push(
            CouplingLayer::from_nets(dim, i, scale, translate, clamp)
                .map_err(|e| Error::Format(e.to_string()))?,
        );
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last layer",
            bytes.len() - r.pos
        )));
    }
    FlowModel::from_layers(dim, per_step, layers).map_err(|e| Error::Format(e.to_string()))
}

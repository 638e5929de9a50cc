//! Minimal differentiable-network substrate.
//!
//! A closed set of layers (dense, 3x3/1x1 same-padding conv, relu, sigmoid,
//! flatten, 2x2 max-pool, nearest-neighbour upsample, and a stack-based skip
//! connection) with hand-derived reverse-mode gradients. Networks are
//! immutable during forward/gradient evaluation and may be shared read-only
//! across threads; all parameter updates happen through a single writer.

mod checkpoint;
mod gradcheck;
mod loss;
mod optim;

pub use checkpoint::{load_network, save_network, CheckpointMeta};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use loss::{loss_and_grad, loss_only, BatchLoss, LossSpec};
pub use optim::{OptimizerKind, OptimizerState};

use crate::error::{Error, Result};
use crate::rng::RunRng;
use crate::scalar::Real;
use crate::tensor::Tensor;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Fixed chunk size for parallel gradient accumulation. Chunks are summed in
/// index order so results do not depend on thread scheduling or core count.
const ACC_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize },
    Relu,
    Sigmoid,
    Flatten,
    MaxPool2,
    Upsample2,
    SkipSave,
    SkipConcat,
}

/// Feed-forward network over a fixed per-sample input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<F: Real = f64> {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Vec<Tensor<F>>>,
    output_shape: Vec<usize>,
}

/// Per-layer gradient buffers mirroring [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F: Real = f64> {
    pub layers: Vec<Vec<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros_like(net: &Network<F>) -> Self {
        Gradients {
            layers: net
                .params
                .iter()
                .map(|ts| ts.iter().map(|t| Tensor::zeros(t.shape())).collect())
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (ta, tb) in a.iter_mut().zip(b) {
                for (va, &vb) in ta.data_mut().iter_mut().zip(tb.data()) {
                    *va += vb;
                }
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for ts in &mut self.layers {
            for t in ts {
                for v in t.data_mut() {
                    *v *= s;
                }
            }
        }
    }

    pub fn max_abs(&self) -> F {
        let mut m = F::zero();
        for ts in &self.layers {
            for t in ts {
                for &v in t.data() {
                    m = m.max(v.abs());
                }
            }
        }
        m
    }
}

enum LayerCache<F: Real> {
    None,
    Input(Tensor<F>),
    Output(Tensor<F>),
    Shape(Vec<usize>),
    Pool { in_shape: Vec<usize>, argmax: Vec<u32> },
    Concat { channels_current: usize, channels_saved: usize, height: usize, width: usize },
}

pub struct ForwardCache<F: Real> {
    layers: Vec<LayerCache<F>>,
    output: Tensor<F>,
}

impl<F: Real> ForwardCache<F> {
    pub fn output(&self) -> &Tensor<F> {
        &self.output
    }
}

/// Builds a network while validating that consecutive layer shapes are
/// compatible; parameters are initialized at `build` time from the given rng.
pub struct NetworkBuilder {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

impl NetworkBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        NetworkBuilder {
            input_shape: input_shape.to_vec(),
            layers: Vec::new(),
        }
    }

    pub fn layer(mut self, spec: LayerSpec) -> Self {
        self.layers.push(spec);
        self
    }

    pub fn dense(mut self, output: usize) -> Self {
        // input dim filled in during shape validation
        self.layers.push(LayerSpec::Dense { input: 0, output });
        self
    }

    pub fn conv2d(mut self, out_channels: usize, kernel: usize) -> Self {
        self.layers.push(LayerSpec::Conv2d {
            in_channels: 0,
            out_channels,
            kernel,
        });
        self
    }

    pub fn relu(self) -> Self {
        self.layer(LayerSpec::Relu)
    }

    pub fn sigmoid(self) -> Self {
        self.layer(LayerSpec::Sigmoid)
    }

    pub fn flatten(self) -> Self {
        self.layer(LayerSpec::Flatten)
    }

    pub fn max_pool2(self) -> Self {
        self.layer(LayerSpec::MaxPool2)
    }

    pub fn upsample2(self) -> Self {
        self.layer(LayerSpec::Upsample2)
    }

    pub fn skip_save(self) -> Self {
        self.layer(LayerSpec::SkipSave)
    }

    pub fn skip_concat(self) -> Self {
        self.layer(LayerSpec::SkipConcat)
    }

    pub fn build<F: Real>(mut self, rng: &mut RunRng) -> Result<Network<F>> {
        let mut shape = self.input_shape.clone();
        let mut skip_stack: Vec<Vec<usize>> = Vec::new();
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            shape = infer_shape(idx, layer, &shape, &mut skip_stack)?;
        }
        if !skip_stack.is_empty() {
            return Err(Error::Shape(format!(
                "{} unmatched skip_save layer(s)",
                skip_stack.len()
            )));
        }
        let params = self
            .layers
            .iter()
            .map(|l| init_params(l, rng))
            .collect::<Vec<_>>();
        Ok(Network {
            input_shape: self.input_shape,
            layers: self.layers,
            params,
            output_shape: shape,
        })
    }
}

fn infer_shape(
    idx: usize,
    layer: &mut LayerSpec,
    shape: &[usize],
    skip_stack: &mut Vec<Vec<usize>>,
) -> Result<Vec<usize>> {
    let layer_desc = format!("{layer:?}");
    let bad = move |expected: &str| {
        Err(Error::Shape(format!(
            "layer {idx} ({layer_desc}): expected {expected}, got shape {shape:?}"
        )))
    };
    match layer {
        LayerSpec::Dense { input, output } => {
            if shape.len() != 1 {
                return bad("1-d input (flatten first)");
            }
            *input = shape[0];
            Ok(vec![*output])
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => {
            if shape.len() != 3 {
                return bad("[channels, height, width] input");
            }
            if *kernel % 2 == 0 {
                return Err(Error::Shape(format!(
                    "layer {idx}: even kernel {kernel} not supported (same padding)"
                )));
            }
            *in_channels = shape[0];
            Ok(vec![*out_channels, shape[1], shape[2]])
        }
        LayerSpec::Relu | LayerSpec::Sigmoid => Ok(shape.to_vec()),
        LayerSpec::Flatten => Ok(vec![shape.iter().product()]),
        LayerSpec::MaxPool2 => {
            if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                return bad("[c, even h, even w] input");
            }
            Ok(vec![shape[0], shape[1] / 2, shape[2] / 2])
        }
        LayerSpec::Upsample2 => {
            if shape.len() != 3 {
                return bad("[c, h, w] input");
            }
            Ok(vec![shape[0], shape[1] * 2, shape[2] * 2])
        }
        LayerSpec::SkipSave => {
            skip_stack.push(shape.to_vec());
            Ok(shape.to_vec())
        }
        LayerSpec::SkipConcat => {
            let saved = skip_stack
                .pop()
                .ok_or_else(|| Error::Shape(format!("layer {idx}: skip_concat without skip_save")))?;
            if shape.len() != 3 || saved.len() != 3 || shape[1..] != saved[1..] {
                return Err(Error::Shape(format!(
                    "layer {idx}: skip_concat spatial mismatch {shape:?} vs {saved:?}"
                )));
            }
            Ok(vec![shape[0] + saved[0], shape[1], shape[2]])
        }
    }
}

fn glorot<F: Real>(rng: &mut RunRng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::real((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product consistent")
}

fn param_shapes(layer: &LayerSpec) -> Vec<Vec<usize>> {
    match layer {
        LayerSpec::Dense { input, output } => vec![vec![*output, *input], vec![*output]],
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => vec![
            vec![*out_channels, *in_channels, *kernel, *kernel],
            vec![*out_channels],
        ],
        _ => Vec::new(),
    }
}

fn init_params<F: Real>(layer: &LayerSpec, rng: &mut RunRng) -> Vec<Tensor<F>> {
    match layer {
        LayerSpec::Dense { input, output } => vec![
            glorot(rng, &[*output, *input], *input, *output),
            Tensor::zeros(&[*output]),
        ],
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => {
            let k2 = kernel * kernel;
            vec![
                glorot(
                    rng,
                    &[*out_channels, *in_channels, *kernel, *kernel],
                    in_channels * k2,
                    out_channels * k2,
                ),
                Tensor::zeros(&[*out_channels]),
            ]
        }
        _ => Vec::new(),
    }
}

impl<F: Real> Network<F> {
    /// A network with no layers; forward is the identity.
    pub fn identity(input_shape: &[usize]) -> Self {
        Network {
            input_shape: input_shape.to_vec(),
            layers: Vec::new(),
            params: Vec::new(),
            output_shape: input_shape.to_vec(),
        }
    }

    pub(crate) fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: Vec<Vec<Tensor<F>>>,
        output_shape: Vec<usize>,
    ) -> Self {
        Network {
            input_shape,
            layers,
            params,
            output_shape,
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Vec<Tensor<F>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Tensor<F>>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .map(|ts| ts.iter().map(Tensor::len).sum::<usize>())
            .sum()
    }

    /// Stable parameter names for checkpoints: `layer{i}.weight` / `layer{i}.bias`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, ts) in self.params.iter().enumerate() {
            for (j, t) in ts.iter().enumerate() {
                let suffix = if j == 0 { "weight" } else { "bias" };
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::LayerShape {
                layer: 0,
                expected: self.input_shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass on one sample. Pure: identical inputs and parameters give
    /// bitwise-identical outputs.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut skips: Vec<Tensor<F>> = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = forward_layer(idx, layer, &self.params[idx], cur, &mut skips, None)?;
        }
        Ok(cur)
    }

    /// Forward pass over many samples, parallel and order-preserving.
    pub fn forward_batch<I: Sync + AsRef<Tensor<F>>>(&self, xs: &[I]) -> Result<Vec<Tensor<F>>> {
        xs.par_iter()
            .map(|x| self.forward(x.as_ref()))
            .collect::<Result<Vec<_>>>()
    }

    pub fn forward_cached(&self, x: &Tensor<F>) -> Result<ForwardCache<F>> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        let mut skips: Vec<Tensor<F>> = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = forward_layer(idx, layer, &self.params[idx], cur, &mut skips, Some(&mut caches))?;
        }
        Ok(ForwardCache {
            layers: caches,
            output: cur,
        })
    }

    /// Reverse pass from a gradient w.r.t. the network output. Accumulates
    /// parameter gradients into `grads` and returns the input gradient.
    pub fn backward_into(
        &self,
        cache: &ForwardCache<F>,
        dout: &Tensor<F>,
        grads: &mut Gradients<F>,
    ) -> Result<Tensor<F>> {
        let mut d = dout.clone();
        let mut skip_grads: Vec<Tensor<F>> = Vec::new();
        for idx in (0..self.layers.len()).rev() {
            d = backward_layer(
                &self.layers[idx],
                &self.params[idx],
                &cache.layers[idx],
                d,
                &mut grads.layers[idx],
                &mut skip_grads,
            )?;
        }
        Ok(d)
    }

    pub fn backward(&self, cache: &ForwardCache<F>, dout: &Tensor<F>) -> Result<(Gradients<F>, Tensor<F>)> {
        let mut grads = Gradients::zeros_like(self);
        let dx = self.backward_into(cache, dout, &mut grads)?;
        Ok((grads, dx))
    }

    /// Per-sample backward over a batch with deterministic accumulation:
    /// fixed-size chunks evaluated in parallel, partial sums merged in index
    /// order. `mk` maps (sample index, forward output) to a per-sample stat
    /// and the gradient of the objective w.r.t. that sample's output.
    pub fn batch_backward<S, I, M>(&self, xs: &[I], mk: M) -> Result<(Vec<S>, Gradients<F>)>
    where
        S: Send,
        I: Sync + AsRef<Tensor<F>>,
        M: Fn(usize, &Tensor<F>) -> (S, Tensor<F>) + Sync,
    {
        let n = xs.len();
        let n_chunks = n.div_ceil(ACC_CHUNK);
        let parts: Vec<(Vec<S>, Gradients<F>)> = (0..n_chunks)
            .into_par_iter()
            .map(|ci| {
                let lo = ci * ACC_CHUNK;
                let hi = (lo + ACC_CHUNK).min(n);
                let mut grads = Gradients::zeros_like(self);
                let mut stats = Vec::with_capacity(hi - lo);
                for i in lo..hi {
                    let cache = self.forward_cached(xs[i].as_ref())?;
                    let (stat, dout) = mk(i, cache.output());
                    self.backward_into(&cache, &dout, &mut grads)?;
                    stats.push(stat);
                }
                Ok((stats, grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut all_stats = Vec::with_capacity(n);
        let mut total = Gradients::zeros_like(self);
        for (stats, grads) in parts {
            all_stats.extend(stats);
            total.add_assign(&grads);
        }
        Ok((all_stats, total))
    }
}

fn forward_layer<F: Real>(
    idx: usize,
    layer: &LayerSpec,
    params: &[Tensor<F>],
    x: Tensor<F>,
    skips: &mut Vec<Tensor<F>>,
    mut caches: Option<&mut Vec<LayerCache<F>>>,
) -> Result<Tensor<F>> {
    let shape_err = |expected: Vec<usize>, got: &[usize]| Error::LayerShape {
        layer: idx,
        expected,
        got: got.to_vec(),
    };
    let out = match layer {
        LayerSpec::Dense { input, output } => {
            if x.shape() != [*input] {
                return Err(shape_err(vec![*input], x.shape()));
            }
            let w = &params[0];
            let b = &params[1];
            let mut y = vec![F::zero(); *output];
            let xd = x.data();
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w.data()[o * input..(o + 1) * input];
                let mut acc = b.data()[o];
                for (wv, xv) in row.iter().zip(xd) {
                    acc += *wv * *xv;
                }
                *yo = acc;
            }
            if let Some(c) = caches.as_deref_mut() {
                c.push(LayerCache::Input(x));
            }
            Tensor::from_vec(&[*output], y)?
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => {
            if x.rank() != 3 || x.shape()[0] != *in_channels {
                return Err(shape_err(vec![*in_channels, 0, 0], x.shape()));
            }
            let (h, w) = (x.shape()[1], x.shape()[2]);
            let y = conv2d_forward(&x, &params[0], &params[1], *in_channels, *out_channels, *kernel, h, w);
            if let Some(c) = caches.as_deref_mut() {
                c.push(LayerCache::Input(x));
            }
            y
        }
        LayerSpec::Relu => {
            let y = x.map(|v| v.max(F::zero()));
            if let Some(c) = caches.as_deref_mut() {
                c.push(LayerCache::Input(x));
            }
            y
        }
        LayerSpec::Sigmoid => {
            let y = x.map(sigmoid);
            if let Some(c) = caches.as_deref_mut() {
                c.push(LayerCache::Output(y.clone()));
            }
            y
        }
        LayerSpec::Flatten => {
            let shape = x.shape().to_vec();
            let n = x.len();
            let y = x.reshaped(&[n])?;
            if let Some(c) = caches.as_deref_mut() {
                c.push(LayerCache::Shape(shape));
            }
            y
        }
        LayerSpec::MaxPool2 => {
            let in_shape = x.shape().to_vec();
            if in_shape.len() != 3 {
                return Err(shape_err(vec![0, 0, 0], &in_shape));
            }
            let (y, argmax) = maxpool2_forward(&x);
            if let Some(c) = caches.as_deref_mut() {
                c.push(LayerCache::Pool { in_shape, argmax });
            }
            y
        }
        LayerSpec::Upsample2 => {
            let shape = x.shape().to_vec();
            let y = upsample2_forward(&x);
            if let Some(c) = caches.as_deref_mut() {
                c.push(LayerCache::Shape(shape));
            }
            y
        }
        LayerSpec::SkipSave => {
            skips.push(x.clone());
            if let Some(c) = caches.as_deref_mut() {
                c.push(LayerCache::None);
            }
            x
        }
        LayerSpec::SkipConcat => {
            let saved = skips
                .pop()
                .ok_or_else(|| Error::Shape(format!("layer {idx}: skip stack empty")))?;
            let (cc, hh, ww) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let cs = saved.shape()[0];
            let mut data = Vec::with_capacity((cc + cs) * hh * ww);
            data.extend_from_slice(x.data());
            data.extend_from_slice(saved.data());
            if let Some(c) = caches.as_deref_mut() {
                c.push(LayerCache::Concat {
                    channels_current: cc,
                    channels_saved: cs,
                    height: hh,
                    width: ww,
                });
            }
            Tensor::from_vec(&[cc + cs, hh, ww], data)?
        }
    };
    Ok(out)
}

fn backward_layer<F: Real>(
    layer: &LayerSpec,
    params: &[Tensor<F>],
    cache: &LayerCache<F>,
    dout: Tensor<F>,
    grads: &mut [Tensor<F>],
    skip_grads: &mut Vec<Tensor<F>>,
) -> Result<Tensor<F>> {
    let dx = match (layer, cache) {
        (LayerSpec::Dense { input, output }, LayerCache::Input(x)) => {
            let w = &params[0];
            let dy = dout.data();
            let xd = x.data();
            // dW[o,i] += dy[o] x[i]; db[o] += dy[o]; dx = W^T dy
            let (dw, db) = grads.split_at_mut(1);
            let dwd = dw[0].data_mut();
            let dbd = db[0].data_mut();
            let mut dx = vec![F::zero(); *input];
            for o in 0..*output {
                let g = dy[o];
                dbd[o] += g;
                let dw_row = &mut dwd[o * input..(o + 1) * input];
                let w_row = &w.data()[o * input..(o + 1) * input];
                for ((dwv, xv), (dxv, wv)) in dw_row
                    .iter_mut()
                    .zip(xd)
                    .zip(dx.iter_mut().zip(w_row))
                {
                    *dwv += g * *xv;
                    *dxv += g * *wv;
                }
            }
            Tensor::from_vec(&[*input], dx)?
        }
        (
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            },
            LayerCache::Input(x),
        ) => conv2d_backward(
            x,
            &params[0],
            &dout,
            grads,
            *in_channels,
            *out_channels,
            *kernel,
        ),
        (LayerSpec::Relu, LayerCache::Input(x)) => {
            let mut d = dout;
            for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                if xv <= F::zero() {
                    *dv = F::zero();
                }
            }
            d
        }
        (LayerSpec::Sigmoid, LayerCache::Output(y)) => {
            let mut d = dout;
            for (dv, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                *dv *= yv * (F::one() - yv);
            }
            d
        }
        (LayerSpec::Flatten, LayerCache::Shape(shape)) => dout.reshaped(shape)?,
        (LayerSpec::MaxPool2, LayerCache::Pool { in_shape, argmax }) => {
            let mut dx = Tensor::zeros(in_shape);
            let dxd = dx.data_mut();
            for (&src, &g) in argmax.iter().zip(dout.data()) {
                dxd[src as usize] += g;
            }
            dx
        }
        (LayerSpec::Upsample2, LayerCache::Shape(shape)) => {
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let mut dx = Tensor::zeros(shape);
            let dd = dout.data();
            let dxd = dx.data_mut();
            let w2 = w * 2;
            for ci in 0..c {
                for y in 0..h {
                    for xcol in 0..w {
                        let base = ci * h * 4 * w + 2 * y * w2 + 2 * xcol;
                        let s = dd[base] + dd[base + 1] + dd[base + w2] + dd[base + w2 + 1];
                        dxd[ci * h * w + y * w + xcol] += s;
                    }
                }
            }
            dx
        }
        (LayerSpec::SkipSave, LayerCache::None) => {
            let saved = skip_grads
                .pop()
                .expect("skip gradient stack underflow (unbalanced skip layers)");
            let mut d = dout;
            for (dv, &sv) in d.data_mut().iter_mut().zip(saved.data()) {
                *dv += sv;
            }
            d
        }
        (
            LayerSpec::SkipConcat,
            LayerCache::Concat {
                channels_current,
                channels_saved,
                height,
                width,
            },
        ) => {
            let hw = height * width;
            let split = channels_current * hw;
            let dd = dout.data();
            let d_cur = Tensor::from_vec(&[*channels_current, *height, *width], dd[..split].to_vec())?;
            let d_saved =
                Tensor::from_vec(&[*channels_saved, *height, *width], dd[split..].to_vec())?;
            skip_grads.push(d_saved);
            d_cur
        }
        _ => unreachable!("cache kind always matches layer kind"),
    };
    Ok(dx)
}

pub(crate) fn sigmoid<F: Real>(v: F) -> F {
    // evaluate the stable branch to avoid overflow in exp
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// im2col for stride-1 same-padding convolution: rows are (c, ki, kj)
/// combinations, columns are output pixels.
fn im2col<F: Real>(x: &[F], c_in: usize, k: usize, h: usize, w: usize, cols: &mut [F]) {
    let p = k / 2;
    let hw = h * w;
    for v in cols.iter_mut() {
        *v = F::zero();
    }
    for c in 0..c_in {
        let xc = &x[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k * k + ki * k + kj) * hw;
                // source x-range valid when 0 <= xcol + kj - p < w
                let x_lo = p.saturating_sub(kj);
                let x_hi = (w + p).saturating_sub(kj).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let iy = y + ki;
                    if iy < p || iy - p >= h {
                        continue;
                    }
                    let src_row = (iy - p) * w;
                    let dst = row + y * w;
                    let shift = kj as isize - p as isize;
                    let src_lo = (x_lo as isize + shift) as usize;
                    let len = x_hi - x_lo;
                    cols[dst + x_lo..dst + x_lo + len]
                        .copy_from_slice(&xc[src_row + src_lo..src_row + src_lo + len]);
                }
            }
        }
    }
}

fn col2im<F: Real>(cols: &[F], c_in: usize, k: usize, h: usize, w: usize, dx: &mut [F]) {
    let p = k / 2;
    let hw = h * w;
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k * k + ki * k + kj) * hw;
                let x_lo = p.saturating_sub(kj);
                let x_hi = (w + p).saturating_sub(kj).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let iy = y + ki;
                    if iy < p || iy - p >= h {
                        continue;
                    }
                    let src = row + y * w;
                    let shift = kj as isize - p as isize;
                    let dst_base = c * hw + (iy - p) * w;
                    for xcol in x_lo..x_hi {
                        let dst = (dst_base as isize + xcol as isize + shift) as usize;
                        dx[dst] += cols[src + xcol];
                    }
                }
            }
        }
    }
}

fn conv2d_forward<F: Real>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    c_in: usize,
    c_out: usize,
    k: usize,
    h: usize,
    w: usize,
) -> Tensor<F> {
    let hw = h * w;
    let kdim = c_in * k * k;
    let mut cols = vec![F::zero(); kdim * hw];
    im2col(x.data(), c_in, k, h, w, &mut cols);
    let mut y = vec![F::zero(); c_out * hw];
    let wd = weight.data();
    for o in 0..c_out {
        let yrow = &mut y[o * hw..(o + 1) * hw];
        let b = bias.data()[o];
        for v in yrow.iter_mut() {
            *v = b;
        }
        let wrow = &wd[o * kdim..(o + 1) * kdim];
        for (kk, &wv) in wrow.iter().enumerate() {
            let crow = &cols[kk * hw..(kk + 1) * hw];
            for (yv, &cv) in yrow.iter_mut().zip(crow) {
                *yv += wv * cv;
            }
        }
    }
    Tensor::from_vec(&[c_out, h, w], y).expect("conv output shape consistent")
}

fn conv2d_backward<F: Real>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    dout: &Tensor<F>,
    grads: &mut [Tensor<F>],
    c_in: usize,
    c_out: usize,
    k: usize,
) -> Tensor<F> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let kdim = c_in * k * k;
    let mut cols = vec![F::zero(); kdim * hw];
    im2col(x.data(), c_in, k, h, w, &mut cols);
    let dy = dout.data();
    let (dw_t, db_t) = grads.split_at_mut(1);
    let dw = dw_t[0].data_mut();
    let db = db_t[0].data_mut();
    // dW[o][kk] += dot(dy_o, cols_kk); db[o] += sum(dy_o)
    for o in 0..c_out {
        let dyo = &dy[o * hw..(o + 1) * hw];
        let mut s = F::zero();
        for &v in dyo {
            s += v;
        }
        db[o] += s;
        let dwrow = &mut dw[o * kdim..(o + 1) * kdim];
        for (kk, dwv) in dwrow.iter_mut().enumerate() {
            let crow = &cols[kk * hw..(kk + 1) * hw];
            let mut acc = F::zero();
            for (&a, &b) in dyo.iter().zip(crow) {
                acc += a * b;
            }
            *dwv += acc;
        }
    }
    // dcols = W^T dy, reusing the cols buffer
    let wd = weight.data();
    let mut dcols = cols;
    for v in dcols.iter_mut() {
        *v = F::zero();
    }
    for o in 0..c_out {
        let dyo = &dy[o * hw..(o + 1) * hw];
        let wrow = &wd[o * kdim..(o + 1) * kdim];
        for (kk, &wv) in wrow.iter().enumerate() {
            let drow = &mut dcols[kk * hw..(kk + 1) * hw];
            for (dv, &gv) in drow.iter_mut().zip(dyo) {
                *dv += wv * gv;
            }
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    col2im(&dcols, c_in, k, h, w, dx.data_mut());
    dx
}

fn maxpool2_forward<F: Real>(x: &Tensor<F>) -> (Tensor<F>, Vec<u32>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut y = vec![F::zero(); c * oh * ow];
    let mut argmax = vec![0u32; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ci * h * w + 2 * oy * w + 2 * ox;
                let cands = [base, base + 1, base + w, base + w + 1];
                let mut best = cands[0];
                let mut bv = xd[best];
                for &i in &cands[1..] {
                    if xd[i] > bv {
                        bv = xd[i];
                        best = i;
                    }
                }
                let oi = ci * oh * ow + oy * ow + ox;
                y[oi] = bv;
                argmax[oi] = best as u32;
            }
        }
    }
    (
        Tensor::from_vec(&[c, oh, ow], y).expect("pool output shape consistent"),
        argmax,
    )
}

fn upsample2_forward<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let (oh, ow) = (h * 2, w * 2);
    let mut y = vec![F::zero(); c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            let src_row = ci * h * w + (oy / 2) * w;
            let dst_row = ci * oh * ow + oy * ow;
            for ox in 0..ow {
                y[dst_row + ox] = xd[src_row + ox / 2];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], y).expect("upsample output shape consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn identity_network_returns_batch_unchanged() {
        let net: Network = Network::identity(&[2, 4, 4]);
        let x = Tensor::from_vec(&[2, 4, 4], (0..32).map(|i| i as f64 * 0.1).collect()).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_dense_maps_to_zero() {
        let mut rng = rng_for(0, "t");
        let mut net: Network = NetworkBuilder::new(&[3]).dense(2).build(&mut rng).unwrap();
        for t in &mut net.params_mut()[0] {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let y = net.forward(&Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn one_by_one_dense_direct_substitution() {
        let mut rng = rng_for(0, "t");
        let mut net: Network = NetworkBuilder::new(&[1]).dense(1).build(&mut rng).unwrap();
        net.params_mut()[0][0].data_mut()[0] = 2.0;
        net.params_mut()[0][1].data_mut()[0] = 1.0;
        let y = net.forward(&Tensor::scalar(3.0)).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = rng_for(3, "t");
        let net: Network = NetworkBuilder::new(&[1, 8, 8])
            .conv2d(4, 3)
            .relu()
            .max_pool2()
            .flatten()
            .dense(3)
            .build(&mut rng)
            .unwrap();
        let x = Tensor::from_vec(&[1, 8, 8], (0..64).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut rng = rng_for(0, "t");
        let net: Network = NetworkBuilder::new(&[4]).dense(2).build(&mut rng).unwrap();
        let err = net.forward(&Tensor::zeros(&[5])).unwrap_err();
        match err {
            Error::LayerShape { layer, .. } => assert_eq!(layer, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn skip_concat_requires_matching_save() {
        let mut rng = rng_for(0, "t");
        let r: Result<Network> = NetworkBuilder::new(&[1, 4, 4]).skip_concat().build(&mut rng);
        assert!(r.is_err());
        let r: Result<Network> = NetworkBuilder::new(&[1, 4, 4]).skip_save().build(&mut rng);
        assert!(r.is_err());
    }

    #[test]
    fn unet_like_shapes_flow() {
        let mut rng = rng_for(1, "t");
        let net: Network = NetworkBuilder::new(&[1, 8, 8])
            .conv2d(3, 3)
            .relu()
            .skip_save()
            .max_pool2()
            .conv2d(6, 3)
            .relu()
            .conv2d(3, 3)
            .relu()
            .upsample2()
            .skip_concat()
            .conv2d(1, 1)
            .sigmoid()
            .build(&mut rng)
            .unwrap();
        assert_eq!(net.output_shape(), &[1, 8, 8]);
        let x = Tensor::from_vec(&[1, 8, 8], (0..64).map(|i| (i % 7) as f64 / 7.0).collect())
            .unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 8, 8]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn generic_over_f32() {
        let mut rng = rng_for(2, "t");
        let net: Network<f32> = NetworkBuilder::new(&[2, 4, 4])
            .conv2d(3, 3)
            .relu()
            .flatten()
            .dense(2)
            .build(&mut rng)
            .unwrap();
        let x = Tensor::<f32>::filled(&[2, 4, 4], 0.5);
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2]);
    }
}

//! Dense tensors, the layer primitives the transcription networks are built
//! from, and their forward/backward rules.
//!
//! Activations always carry a leading batch dimension. Convolution-style
//! activations are `[batch, regions, freq, channels]`; dense activations are
//! `[batch, features]` and any trailing dimensions are flattened on input.

use std::sync::Arc;

use rand::Rng;

use crate::audio::FrameGeometry;
use crate::filterbank::{self, Filterbank};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::{Error, Result};

/// Row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                name: "tensor data".into(),
                expected: shape.to_vec(),
                found: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn batch(&self) -> usize {
        self.shape[0]
    }
}

/// A named model parameter with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Parameter {
            name: name.into(),
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform on `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`, with
    /// `fan_out = shape[0]` and `fan_in` the product of the remaining
    /// dimensions. One-dimensional tensors (biases) are zeroed.
    ScaledUniform,
}

pub fn init<R: Rng + ?Sized>(param: &mut Parameter, rng: &mut R, scheme: InitScheme) {
    match scheme {
        InitScheme::ScaledUniform => {
            let shape = param.value.shape().to_vec();
            if shape.len() < 2 {
                param.value.fill(0.0);
                return;
            }
            let fan_out = shape[0] as f64;
            let fan_in = shape[1..].iter().product::<usize>() as f64;
            let a = (6.0 / (fan_in + fan_out)).sqrt();
            for v in param.value.data_mut() {
                *v = rng.random_range(-a..=a);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Mean,
    None,
}

impl Pool {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pool::Mean => "mean",
            Pool::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pool::Mean),
            "none" => Ok(Pool::None),
            other => Err(Error::Config(format!("unknown pool {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum FrontendWeights {
    Frozen(Arc<Filterbank>),
    /// Index of a `[2K, receptive_field]` parameter.
    Trainable { param: usize },
}

/// Layer one: frames `[B, frame_len]` to `[B, regions, K, 1]`.
#[derive(Debug, Clone)]
pub struct FilterbankLayer {
    pub weights: FrontendWeights,
    pub n_pairs: usize,
    pub geom: FrameGeometry,
    pub compress: bool,
    pub eps: f64,
}

/// `y = W x + b`, `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: usize,
    pub bias: usize,
}

/// Valid convolution along the frequency axis at each region, filters
/// `[n_filters, height, in_channels]`.
#[derive(Debug, Clone)]
pub struct FreqConv {
    pub height: usize,
    pub n_filters: usize,
    pub in_channels: usize,
    pub stride: usize,
    pub filters: usize,
}

/// Height-one frequency convolution fully connected over regions and
/// channels, filters `[n_filters, regions, in_channels]`, then pooled.
#[derive(Debug, Clone)]
pub struct TimeChannelConv {
    pub n_filters: usize,
    pub regions: usize,
    pub in_channels: usize,
    pub stride: usize,
    pub pool: Pool,
    pub filters: usize,
}

#[derive(Debug, Clone)]
pub enum LayerPrimitive {
    Filterbank(FilterbankLayer),
    Dense(Dense),
    FreqConv(FreqConv),
    TimeChannelConv(TimeChannelConv),
    Relu,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub op: LayerPrimitive,
}

impl Layer {
    pub fn new(name: impl Into<String>, op: LayerPrimitive) -> Self {
        Layer {
            name: name.into(),
            op,
        }
    }

    /// Parameter indices this layer reads.
    pub fn param_indices(&self) -> Vec<usize> {
        match &self.op {
            LayerPrimitive::Filterbank(l) => match l.weights {
                FrontendWeights::Trainable { param } => vec![param],
                FrontendWeights::Frozen(_) => vec![],
            },
            LayerPrimitive::Dense(d) => vec![d.weight, d.bias],
            LayerPrimitive::FreqConv(c) => vec![c.filters],
            LayerPrimitive::TimeChannelConv(c) => vec![c.filters],
            LayerPrimitive::Relu => vec![],
        }
    }

    /// Per-item output shape for a per-item input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::Shape {
            name: format!("{} input", self.name),
            expected,
            found: input.to_vec(),
        };
        match &self.op {
            LayerPrimitive::Filterbank(l) => {
                if input != [l.geom.frame_len] {
                    return Err(mismatch(vec![l.geom.frame_len]));
                }
                Ok(vec![l.geom.regions(), l.n_pairs, 1])
            }
            LayerPrimitive::Dense(d) => {
                if input.iter().product::<usize>() != d.inputs {
                    return Err(mismatch(vec![d.inputs]));
                }
                Ok(vec![d.outputs])
            }
            LayerPrimitive::FreqConv(c) => {
                if input.len() != 3 || input[2] != c.in_channels || input[1] < c.height {
                    return Err(mismatch(vec![0, c.height, c.in_channels]));
                }
                Ok(vec![input[0], (input[1] - c.height) / c.stride + 1, c.n_filters])
            }
            LayerPrimitive::TimeChannelConv(c) => {
                if input.len() != 3 || input[0] != c.regions || input[2] != c.in_channels {
                    return Err(mismatch(vec![c.regions, 0, c.in_channels]));
                }
                let positions = (input[1] - 1) / c.stride + 1;
                Ok(match c.pool {
                    Pool::Mean => vec![c.n_filters],
                    Pool::None => vec![positions * c.n_filters],
                })
            }
            LayerPrimitive::Relu => Ok(input.to_vec()),
        }
    }
}

/// Intermediates kept by the forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `activations[i]` is the input of layer `i`; the last entry is the output.
    pub activations: Vec<Tensor>,
    aux: Vec<Option<FrontendAux>>,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("tape holds the input at least")
    }
}

#[derive(Debug, Clone)]
struct FrontendAux {
    regions: Vec<f64>,
    proj: Vec<f64>,
    energy: Vec<f64>,
}

/// Run every layer on `input` (`[B, ...]`), recording a tape.
pub fn forward(layers: &[Layer], params: &[Parameter], input: Tensor) -> Result<Tape> {
    let mut activations = Vec::with_capacity(layers.len() + 1);
    let mut aux = Vec::with_capacity(layers.len());
    activations.push(input);
    for layer in layers {
        let x = activations.last().expect("non-empty");
        let (y, a) = layer_forward(layer, params, x)?;
        if !y.all_finite() {
            return Err(Error::NonFinite {
                layer: layer.name.clone(),
            });
        }
        activations.push(y);
        aux.push(a);
    }
    Ok(Tape { activations, aux })
}

/// Accumulate (`+=`) parameter gradients for `loss_grad = dL/d(output)`.
/// Returns the gradient with respect to the network input when
/// `want_input_grad` is set.
pub fn backward(
    layers: &[Layer],
    params: &mut [Parameter],
    tape: &Tape,
    loss_grad: &Tensor,
    want_input_grad: bool,
) -> Result<Option<Tensor>> {
    if loss_grad.shape() != tape.output().shape() {
        return Err(Error::Shape {
            name: "loss gradient".into(),
            expected: tape.output().shape().to_vec(),
            found: loss_grad.shape().to_vec(),
        });
    }
    // Gradients are needed down to the first layer holding a trainable parameter.
    let first_needed = if want_input_grad {
        0
    } else {
        layers
            .iter()
            .position(|l| l.param_indices().iter().any(|&p| params[p].trainable))
            .unwrap_or(layers.len())
    };
    let mut grad = loss_grad.clone();
    for i in (first_needed..layers.len()).rev() {
        let need_input = want_input_grad || i > first_needed;
        let next = layer_backward(
            &layers[i],
            params,
            &tape.activations[i],
            &tape.activations[i + 1],
            tape.aux[i].as_ref(),
            &grad,
            need_input,
        )?;
        match next {
            Some(g) => grad = g,
            None => return Ok(None),
        }
    }
    Ok(want_input_grad.then_some(grad))
}

fn layer_forward(layer: &Layer, params: &[Parameter], x: &Tensor) -> Result<(Tensor, Option<FrontendAux>)> {
    let batch = x.batch();
    let mut out_shape = vec![batch];
    out_shape.extend(layer.output_shape(&x.shape()[1..])?);
    match &layer.op {
        LayerPrimitive::Filterbank(l) => {
            let weights = frontend_weights(l, params);
            let regions = filterbank::region_matrix(x.data(), &l.geom);
            let proj = filterbank::project(weights, &regions, l.geom.receptive_field);
            let energy = filterbank::energies(&proj);
            let values = filterbank::compress_values(&energy, l.compress, l.eps);
            let aux = match l.weights {
                FrontendWeights::Trainable { .. } => Some(FrontendAux {
                    regions,
                    proj,
                    energy,
                }),
                // Kept only for input gradients, which need projections and energy.
                FrontendWeights::Frozen(_) => Some(FrontendAux {
                    regions: Vec::new(),
                    proj,
                    energy,
                }),
            };
            Ok((Tensor::from_vec(&out_shape, values)?, aux))
        }
        LayerPrimitive::Dense(d) => {
            let w = params[d.weight].value.data();
            let b = params[d.bias].value.data();
            let mut y = vec![0.0; batch * d.outputs];
            for row in y.chunks_exact_mut(d.outputs) {
                row.copy_from_slice(b);
            }
            gemm(
                1.0,
                MatRef::row_major(x.data(), batch, d.inputs),
                MatRef::row_major(w, d.outputs, d.inputs).t(),
                1.0,
                MatMut::row_major(&mut y, batch, d.outputs),
            );
            Ok((Tensor::from_vec(&out_shape, y)?, None))
        }
        LayerPrimitive::FreqConv(c) => {
            let (regions, freq) = (x.shape()[1], x.shape()[2]);
            let y = freq_conv_batch(x.data(), batch, regions, freq, c, params[c.filters].value.data());
            Ok((Tensor::from_vec(&out_shape, y)?, None))
        }
        LayerPrimitive::TimeChannelConv(c) => {
            let freq = x.shape()[2];
            let y = time_channel_batch(x.data(), batch, freq, c, params[c.filters].value.data());
            Ok((Tensor::from_vec(&out_shape, y)?, None))
        }
        LayerPrimitive::Relu => {
            let y = x.data().iter().map(|&v| v.max(0.0)).collect();
            Ok((Tensor::from_vec(&out_shape, y)?, None))
        }
    }
}

fn frontend_weights<'a>(l: &'a FilterbankLayer, params: &'a [Parameter]) -> &'a [f64] {
    match &l.weights {
        FrontendWeights::Frozen(bank) => &bank.weights,
        FrontendWeights::Trainable { param } => params[*param].value.data(),
    }
}

fn layer_backward(
    layer: &Layer,
    params: &mut [Parameter],
    x: &Tensor,
    y: &Tensor,
    aux: Option<&FrontendAux>,
    dy: &Tensor,
    need_input: bool,
) -> Result<Option<Tensor>> {
    let batch = x.batch();
    match &layer.op {
        LayerPrimitive::Filterbank(l) => {
            let aux = aux.expect("frontend aux recorded");
            let dproj = filterbank::projection_grad(dy.data(), &aux.energy, &aux.proj, l.compress, l.eps);
            if let FrontendWeights::Trainable { param } = l.weights {
                if params[param].trainable {
                    let rf = l.geom.receptive_field;
                    filterbank::accumulate_weight_grad(&dproj, &aux.regions, rf, params[param].grad.data_mut());
                }
            }
            if !need_input {
                return Ok(None);
            }
            let dx = filterbank::frame_grad(&dproj, frontend_weights(l, params), &l.geom, batch);
            Ok(Some(Tensor::from_vec(x.shape(), dx)?))
        }
        LayerPrimitive::Dense(d) => {
            if params[d.weight].trainable {
                gemm(
                    1.0,
                    MatRef::row_major(dy.data(), batch, d.outputs).t(),
                    MatRef::row_major(x.data(), batch, d.inputs),
                    1.0,
                    MatMut::row_major(params[d.weight].grad.data_mut(), d.outputs, d.inputs),
                );
            }
            if params[d.bias].trainable {
                let db = params[d.bias].grad.data_mut();
                for row in dy.data().chunks_exact(d.outputs) {
                    for (g, v) in db.iter_mut().zip(row) {
                        *g += v;
                    }
                }
            }
            if !need_input {
                return Ok(None);
            }
            let mut dx = vec![0.0; batch * d.inputs];
            gemm(
                1.0,
                MatRef::row_major(dy.data(), batch, d.outputs),
                MatRef::row_major(params[d.weight].value.data(), d.outputs, d.inputs),
                0.0,
                MatMut::row_major(&mut dx, batch, d.inputs),
            );
            Ok(Some(Tensor::from_vec(x.shape(), dx)?))
        }
        LayerPrimitive::FreqConv(c) => {
            let (regions, freq) = (x.shape()[1], x.shape()[2]);
            let positions = y.shape()[2];
            if params[c.filters].trainable {
                let mut dfilt = std::mem::take(&mut params[c.filters].grad.data);
                freq_conv_filter_grad(x.data(), dy.data(), batch, regions, freq, positions, c, &mut dfilt);
                params[c.filters].grad.data = dfilt;
            }
            if !need_input {
                return Ok(None);
            }
            let dx = freq_conv_input_grad(
                dy.data(),
                params[c.filters].value.data(),
                batch,
                regions,
                freq,
                positions,
                c,
            );
            Ok(Some(Tensor::from_vec(x.shape(), dx)?))
        }
        LayerPrimitive::TimeChannelConv(c) => {
            let freq = x.shape()[2];
            let positions = (freq - 1) / c.stride + 1;
            let dmap = time_channel_unpool(dy.data(), batch, positions, c);
            let trainable = params[c.filters].trainable;
            let mut dfilt = std::mem::take(&mut params[c.filters].grad.data);
            let dx = time_channel_backward(
                x.data(),
                &dmap,
                params[c.filters].value.data(),
                batch,
                freq,
                c,
                trainable.then_some(&mut dfilt[..]),
                need_input,
            );
            params[c.filters].grad.data = dfilt;
            match dx {
                Some(dx) => Ok(Some(Tensor::from_vec(x.shape(), dx)?)),
                None => Ok(None),
            }
        }
        LayerPrimitive::Relu => {
            if !need_input {
                return Ok(None);
            }
            let dx = x
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect();
            Ok(Some(Tensor::from_vec(x.shape(), dx)?))
        }
    }
}

fn freq_conv_batch(
    x: &[f64],
    batch: usize,
    regions: usize,
    freq: usize,
    c: &FreqConv,
    filt: &[f64],
) -> Vec<f64> {
    let ch = c.in_channels;
    let hc = c.height * ch;
    let positions = (freq - c.height) / c.stride + 1;
    let mut out = vec![0.0; batch * regions * positions * c.n_filters];
    let in_block = freq * ch;
    let out_block = positions * c.n_filters;
    for br in 0..batch * regions {
        // Patch p starts at frequency p * stride; its (h, c) entries are contiguous.
        let patches = MatRef::strided(x, br * in_block, positions, hc, c.stride * ch, 1);
        gemm(
            1.0,
            patches,
            MatRef::row_major(filt, c.n_filters, hc).t(),
            0.0,
            MatMut::strided(&mut out, br * out_block, positions, c.n_filters, c.n_filters, 1),
        );
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn freq_conv_filter_grad(
    x: &[f64],
    dy: &[f64],
    batch: usize,
    regions: usize,
    freq: usize,
    positions: usize,
    c: &FreqConv,
    dfilt: &mut [f64],
) {
    let ch = c.in_channels;
    let hc = c.height * ch;
    for br in 0..batch * regions {
        let patches = MatRef::strided(x, br * freq * ch, positions, hc, c.stride * ch, 1);
        let dout = MatRef::strided(dy, br * positions * c.n_filters, positions, c.n_filters, c.n_filters, 1);
        gemm(1.0, dout.t(), patches, 1.0, MatMut::row_major(dfilt, c.n_filters, hc));
    }
}

fn freq_conv_input_grad(
    dy: &[f64],
    filt: &[f64],
    batch: usize,
    regions: usize,
    freq: usize,
    positions: usize,
    c: &FreqConv,
) -> Vec<f64> {
    let ch = c.in_channels;
    let hc = c.height * ch;
    let mut dx = vec![0.0; batch * regions * freq * ch];
    let mut dpatch = vec![0.0; positions * hc];
    for br in 0..batch * regions {
        let dout = MatRef::strided(dy, br * positions * c.n_filters, positions, c.n_filters, c.n_filters, 1);
        gemm(
            1.0,
            dout,
            MatRef::row_major(filt, c.n_filters, hc),
            0.0,
            MatMut::row_major(&mut dpatch, positions, hc),
        );
        let base = br * freq * ch;
        for (p, row) in dpatch.chunks_exact(hc).enumerate() {
            let start = base + p * c.stride * ch;
            for (d, g) in dx[start..start + hc].iter_mut().zip(row) {
                *d += g;
            }
        }
    }
    dx
}

/// `[regions, freq, ch]` to `[freq, regions, ch]` for one batch item.
fn to_freq_major(x: &[f64], regions: usize, freq: usize, ch: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..regions {
        for f in 0..freq {
            let src = (r * freq + f) * ch;
            let dst = (f * regions + r) * ch;
            out[dst..dst + ch].copy_from_slice(&x[src..src + ch]);
        }
    }
    out
}

fn from_freq_major(x: &[f64], regions: usize, freq: usize, ch: usize, out: &mut [f64]) {
    for r in 0..regions {
        for f in 0..freq {
            let dst = (r * freq + f) * ch;
            let src = (f * regions + r) * ch;
            out[dst..dst + ch].copy_from_slice(&x[src..src + ch]);
        }
    }
}

fn time_channel_batch(x: &[f64], batch: usize, freq: usize, c: &TimeChannelConv, filt: &[f64]) -> Vec<f64> {
    let rc = c.regions * c.in_channels;
    let positions = (freq - 1) / c.stride + 1;
    let item = c.regions * freq * c.in_channels;
    let hidden = match c.pool {
        Pool::Mean => c.n_filters,
        Pool::None => positions * c.n_filters,
    };
    let mut out = vec![0.0; batch * hidden];
    let mut map = vec![0.0; positions * c.n_filters];
    for b in 0..batch {
        let xt = to_freq_major(&x[b * item..(b + 1) * item], c.regions, freq, c.in_channels);
        gemm(
            1.0,
            MatRef::strided(&xt, 0, positions, rc, c.stride * rc, 1),
            MatRef::row_major(filt, c.n_filters, rc).t(),
            0.0,
            MatMut::row_major(&mut map, positions, c.n_filters),
        );
        let dst = &mut out[b * hidden..(b + 1) * hidden];
        match c.pool {
            Pool::Mean => {
                for row in map.chunks_exact(c.n_filters) {
                    for (d, v) in dst.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                dst.iter_mut().for_each(|v| *v /= positions as f64);
            }
            Pool::None => dst.copy_from_slice(&map),
        }
    }
    out
}

/// Gradient on the pre-pool map `[B, positions, n_filters]`.
fn time_channel_unpool(dy: &[f64], batch: usize, positions: usize, c: &TimeChannelConv) -> Vec<f64> {
    match c.pool {
        Pool::None => dy.to_vec(),
        Pool::Mean => {
            let mut dmap = Vec::with_capacity(batch * positions * c.n_filters);
            for b in 0..batch {
                let row = &dy[b * c.n_filters..(b + 1) * c.n_filters];
                for _ in 0..positions {
                    dmap.extend(row.iter().map(|g| g / positions as f64));
                }
            }
            dmap
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn time_channel_backward(
    x: &[f64],
    dmap: &[f64],
    filt: &[f64],
    batch: usize,
    freq: usize,
    c: &TimeChannelConv,
    mut dfilt: Option<&mut [f64]>,
    need_input: bool,
) -> Option<Vec<f64>> {
    let rc = c.regions * c.in_channels;
    let positions = (freq - 1) / c.stride + 1;
    let item = c.regions * freq * c.in_channels;
    let mut dx = need_input.then(|| vec![0.0; batch * item]);
    let mut dxt = vec![0.0; item];
    for b in 0..batch {
        let dm = MatRef::row_major(&dmap[b * positions * c.n_filters..], positions, c.n_filters);
        if let Some(dfilt) = dfilt.as_deref_mut() {
            let xt = to_freq_major(&x[b * item..(b + 1) * item], c.regions, freq, c.in_channels);
            gemm(
                1.0,
                dm.t(),
                MatRef::strided(&xt, 0, positions, rc, c.stride * rc, 1),
                1.0,
                MatMut::row_major(dfilt, c.n_filters, rc),
            );
        }
        if let Some(dx) = dx.as_mut() {
            dxt.iter_mut().for_each(|v| *v = 0.0);
            gemm(
                1.0,
                dm,
                MatRef::row_major(filt, c.n_filters, rc),
                0.0,
                MatMut::strided(&mut dxt, 0, positions, rc, c.stride * rc, 1),
            );
            from_freq_major(&dxt, c.regions, freq, c.in_channels, &mut dx[b * item..(b + 1) * item]);
        }
    }
    dx
}

/// Frequency-axis convolution of a single `[regions, freq, channels]` input
/// with `[n_filters, height, channels]` filters; output
/// `[regions, (freq - height) / stride + 1, n_filters]`.
pub fn freq_conv_forward(input: &Tensor, filters: &Tensor, stride: usize) -> Result<Tensor> {
    let (is, fs) = (input.shape(), filters.shape());
    if is.len() != 3 || fs.len() != 3 || fs[2] != is[2] || fs[1] > is[1] || stride == 0 {
        return Err(Error::Shape {
            name: "freq_conv".into(),
            expected: vec![is.first().copied().unwrap_or(0), fs.get(1).copied().unwrap_or(0), is.get(2).copied().unwrap_or(0)],
            found: is.to_vec(),
        });
    }
    let conv = FreqConv {
        height: fs[1],
        n_filters: fs[0],
        in_channels: fs[2],
        stride,
        filters: 0,
    };
    let positions = (is[1] - fs[1]) / stride + 1;
    let y = freq_conv_batch(input.data(), 1, is[0], is[1], &conv, filters.data());
    Tensor::from_vec(&[is[0], positions, fs[0]], y)
}

/// Height-one convolution of a single `[regions, freq, channels]` input with
/// `[n_filters, regions, channels]` filters, pooled over frequency positions.
pub fn time_channel_conv_forward(input: &Tensor, filters: &Tensor, stride: usize, pool: Pool) -> Result<Tensor> {
    let (is, fs) = (input.shape(), filters.shape());
    if is.len() != 3 || fs.len() != 3 || fs[1] != is[0] || fs[2] != is[2] || stride == 0 {
        return Err(Error::Shape {
            name: "time_channel_conv".into(),
            expected: vec![fs.get(1).copied().unwrap_or(0), 0, fs.get(2).copied().unwrap_or(0)],
            found: is.to_vec(),
        });
    }
    let conv = TimeChannelConv {
        n_filters: fs[0],
        regions: fs[1],
        in_channels: fs[2],
        stride,
        pool,
        filters: 0,
    };
    let y = time_channel_batch(input.data(), 1, is[1], &conv, filters.data());
    let len = y.len();
    Tensor::from_vec(&[len], y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_freq_conv(x: &Tensor, f: &Tensor, stride: usize) -> Vec<f64> {
        let (r, fr, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (nf, h) = (f.shape()[0], f.shape()[1]);
        let p = (fr - h) / stride + 1;
        let mut out = vec![0.0; r * p * nf];
        for ri in 0..r {
            for pi in 0..p {
                for fi in 0..nf {
                    let mut s = 0.0;
                    for hi in 0..h {
                        for ci in 0..ch {
                            s += f.data()[(fi * h + hi) * ch + ci] * x.data()[(ri * fr + pi * stride + hi) * ch + ci];
                        }
                    }
                    out[(ri * p + pi) * nf + fi] = s;
                }
            }
        }
        out
    }

    #[test]
    fn freq_conv_default_shape() {
        let x = Tensor::zeros(&[25, 512, 1]);
        let f = Tensor::zeros(&[128, 128, 1]);
        assert_eq!(freq_conv_forward(&x, &f, 1).unwrap().shape(), &[25, 385, 128]);
    }

    #[test]
    fn freq_conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for stride in [1, 2, 3] {
            let x = random_tensor(&[3, 20, 2], &mut rng);
            let f = random_tensor(&[4, 5, 2], &mut rng);
            let y = freq_conv_forward(&x, &f, stride).unwrap();
            for (a, b) in y.data().iter().zip(naive_freq_conv(&x, &f, stride)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn delta_filter_subsamples_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&[2, 12, 1], &mut rng);
        let mut f = Tensor::zeros(&[1, 3, 1]);
        f.data_mut()[0] = 1.0;
        let y = freq_conv_forward(&x, &f, 2).unwrap();
        assert_eq!(y.shape(), &[2, 5, 1]);
        for r in 0..2 {
            for p in 0..5 {
                assert_eq!(y.data()[r * 5 + p], x.data()[r * 12 + 2 * p]);
            }
        }
    }

    #[test]
    fn freq_conv_shift_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random_tensor(&[4, 60, 2], &mut rng);
        let f = random_tensor(&[3, 9, 2], &mut rng);
        let y = freq_conv_forward(&base, &f, 1).unwrap();
        for s in [1usize, 7, 12] {
            let mut shifted = Tensor::zeros(base.shape());
            for r in 0..4 {
                for q in s..60 {
                    for c in 0..2 {
                        shifted.data_mut()[(r * 60 + q) * 2 + c] = base.data()[(r * 60 + q - s) * 2 + c];
                    }
                }
            }
            let ys = freq_conv_forward(&shifted, &f, 1).unwrap();
            let p = y.shape()[1];
            for r in 0..4 {
                for pi in 0..p - s {
                    for fi in 0..3 {
                        let a = y.data()[(r * p + pi) * 3 + fi];
                        let b = ys.data()[(r * p + pi + s) * 3 + fi];
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn time_channel_mean_pool_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_tensor(&[6, 3, 2], &mut rng);
        let small = Tensor::from_vec(&[3, 5, 2], vec![0.7; 30]).unwrap();
        let large = Tensor::from_vec(&[3, 40, 2], vec![0.7; 240]).unwrap();
        let a = time_channel_conv_forward(&small, &f, 1, Pool::Mean).unwrap();
        let b = time_channel_conv_forward(&large, &f, 1, Pool::Mean).unwrap();
        assert_eq!(a.shape(), &[6]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn time_channel_hidden_widths() {
        for nf in [256usize, 4096] {
            let x = Tensor::zeros(&[25, 7, 2]);
            let f = Tensor::zeros(&[nf, 25, 2]);
            assert_eq!(time_channel_conv_forward(&x, &f, 1, Pool::Mean).unwrap().len(), nf);
        }
        let x = Tensor::zeros(&[25, 7, 2]);
        let f = Tensor::zeros(&[3, 25, 2]);
        assert_eq!(time_channel_conv_forward(&x, &f, 2, Pool::None).unwrap().len(), 4 * 3);
    }

    #[test]
    fn time_channel_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&[3, 9, 2], &mut rng);
        let f = random_tensor(&[4, 3, 2], &mut rng);
        for stride in [1usize, 2] {
            let y = time_channel_conv_forward(&x, &f, stride, Pool::None).unwrap();
            let p = (9 - 1) / stride + 1;
            for pi in 0..p {
                for fi in 0..4 {
                    let mut s = 0.0;
                    for r in 0..3 {
                        for c in 0..2 {
                            s += f.data()[(fi * 3 + r) * 2 + c] * x.data()[(r * 9 + pi * stride) * 2 + c];
                        }
                    }
                    assert!((y.data()[pi * 4 + fi] - s).abs() < 1e-12);
                }
            }
        }
    }

    fn dense_layers(inp: usize, out: usize) -> (Vec<Layer>, Vec<Parameter>) {
        let layers = vec![Layer::new(
            "dense",
            LayerPrimitive::Dense(Dense {
                inputs: inp,
                outputs: out,
                weight: 0,
                bias: 1,
            }),
        )];
        let params = vec![Parameter::new("w", &[out, inp]), Parameter::new("b", &[out])];
        (layers, params)
    }

    #[test]
    fn zero_weights_output_bias() {
        let (layers, mut params) = dense_layers(4, 3);
        params[1].value = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let tape = forward(&layers, &params, x).unwrap();
        assert_eq!(tape.output().data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn identity_dense_passes_input() {
        let (layers, mut params) = dense_layers(3, 3);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        params[0].value = Tensor::from_vec(&[3, 3], eye).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -7.0]).unwrap();
        let tape = forward(&layers, &params, x.clone()).unwrap();
        assert_eq!(tape.output().data(), x.data());
    }

    #[test]
    fn relu_blocks_negative_gradient() {
        let layers = vec![Layer::new("relu", LayerPrimitive::Relu)];
        let mut params: Vec<Parameter> = vec![];
        let x = Tensor::from_vec(&[1, 3], vec![-1.0, 2.0, 0.5]).unwrap();
        let tape = forward(&layers, &params, x).unwrap();
        let g = Tensor::from_vec(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let dx = backward(&layers, &mut params, &tape, &g, true).unwrap().unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn gradients_accumulate_and_scale_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (layers, mut params) = dense_layers(5, 2);
        init(&mut params[0], &mut rng, InitScheme::ScaledUniform);
        let x = random_tensor(&[3, 5], &mut rng);
        let tape = forward(&layers, &params, x).unwrap();
        let g = random_tensor(&[3, 2], &mut rng);
        backward(&layers, &mut params, &tape, &g, false).unwrap();
        let once = params[0].grad.clone();
        let mut g2 = g.clone();
        g2.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        params[0].zero_grad();
        backward(&layers, &mut params, &tape, &g2, false).unwrap();
        for (a, b) in once.data().iter().zip(params[0].grad.data()) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
        backward(&layers, &mut params, &tape, &g, false).unwrap();
        for (a, b) in once.data().iter().zip(params[0].grad.data()) {
            assert!((3.0 * a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn loss_grad_shape_checked() {
        let (layers, mut params) = dense_layers(2, 2);
        let tape = forward(&layers, &params, Tensor::zeros(&[1, 2])).unwrap();
        assert!(matches!(
            backward(&layers, &mut params, &tape, &Tensor::zeros(&[1, 3]), false),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn non_finite_names_layer() {
        let (layers, mut params) = dense_layers(2, 1);
        params[1].value.data_mut()[0] = f64::INFINITY;
        match forward(&layers, &params, Tensor::zeros(&[1, 2])) {
            Err(Error::NonFinite { layer }) => assert_eq!(layer, "dense"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn init_statistics_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut w = Parameter::new("w", &[100, 1000]);
        init(&mut w, &mut rng, InitScheme::ScaledUniform);
        let a = (6.0f64 / 1100.0).sqrt();
        let n = w.value.len() as f64;
        let mean = w.value.data().iter().sum::<f64>() / n;
        // Uniform[-a, a] has variance a^2 / 3.
        let sigma = (a * a / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}");
        assert!(w.value.data().iter().all(|v| v.abs() <= a));
        let mut b = Parameter::new("b", &[100]);
        b.value.fill(3.0);
        init(&mut b, &mut rng, InitScheme::ScaledUniform);
        assert!(b.value.data().iter().all(|&v| v == 0.0));

        let mut w2 = Parameter::new("w", &[100, 1000]);
        init(&mut w2, &mut ChaCha8Rng::seed_from_u64(7), InitScheme::ScaledUniform);
        let mut w3 = Parameter::new("w", &[100, 1000]);
        init(&mut w3, &mut ChaCha8Rng::seed_from_u64(7), InitScheme::ScaledUniform);
        assert_eq!(w2, w3);
    }
}

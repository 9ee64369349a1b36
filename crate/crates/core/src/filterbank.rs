//! Layer-one front-ends: sine/cosine filter pairs at STFT or log-spaced
//! frequencies, optionally windowed, with log compression.
//!
//! For a region `x_t` the response of pair `k` is
//! `(w_sin_k . x_t)^2 + (w_cos_k . x_t)^2`. Weights are stored as one
//! `2K x receptive_field` matrix with rows interleaved `sin_0, cos_0, sin_1, ...`
//! so a whole batch of regions is projected with a single GEMM; learned
//! front-ends use the same kernels with a trainable weight matrix.

use std::f64::consts::TAU;

use crate::audio::{AudioFrame, FrameGeometry};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::{Error, Result, SAMPLE_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterbankKind {
    Stft,
    LogSpaced,
}

impl FilterbankKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FilterbankKind::Stft => "stft",
            FilterbankKind::LogSpaced => "log_spaced",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stft" => Ok(FilterbankKind::Stft),
            "log_spaced" => Ok(FilterbankKind::LogSpaced),
            other => Err(Error::Config(format!("unknown filterbank kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterbankSpec {
    pub kind: FilterbankKind,
    pub windowed: bool,
    /// Filter pairs for `log_spaced`; ignored by `stft`, whose count follows
    /// from `f_max` and the receptive field.
    pub n_filters: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub receptive_field: usize,
    pub compress: bool,
    /// Floor inside the logarithm.
    pub eps: f64,
}

impl Default for FilterbankSpec {
    fn default() -> Self {
        FilterbankSpec {
            kind: FilterbankKind::LogSpaced,
            windowed: true,
            n_filters: 512,
            f_min: 50.0,
            f_max: 6000.0,
            receptive_field: 4096,
            compress: true,
            eps: 1e-11,
        }
    }
}

impl FilterbankSpec {
    pub fn stft() -> Self {
        FilterbankSpec {
            kind: FilterbankKind::Stft,
            windowed: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if !(self.f_min > 0.0 && self.f_min < self.f_max && self.f_max < nyquist) {
            return Err(Error::Config(format!(
                "filterbank needs 0 < f_min < f_max < {nyquist}, got {} / {}",
                self.f_min, self.f_max
            )));
        }
        if self.n_filters == 0 || self.receptive_field == 0 {
            return Err(Error::Config(
                "filterbank needs n_filters >= 1 and receptive_field >= 1".into(),
            ));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("filterbank eps must be positive".into()));
        }
        if self.kind == FilterbankKind::Stft && stft_channel_count(self) == 0 {
            return Err(Error::Config("stft filterbank has no bins below f_max".into()));
        }
        Ok(())
    }

    /// Number of channels `apply` produces.
    pub fn channels(&self) -> usize {
        match self.kind {
            FilterbankKind::LogSpaced => self.n_filters,
            FilterbankKind::Stft => stft_channel_count(self),
        }
    }
}

fn stft_channel_count(spec: &FilterbankSpec) -> usize {
    (spec.f_max * spec.receptive_field as f64 / SAMPLE_RATE as f64).floor() as usize
}

/// Taper `1 - cos(2 pi t / N)`, one period over the receptive field.
pub fn cosine_window(t: usize, receptive_field: usize) -> f64 {
    1.0 - (TAU * t as f64 / receptive_field as f64).cos()
}

/// One analysis channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPair {
    pub w_sin: Vec<f64>,
    pub w_cos: Vec<f64>,
    pub center_freq: f64,
}

fn sinusoid_pair(freq: f64, spec: &FilterbankSpec) -> FilterPair {
    let n = spec.receptive_field;
    let w = TAU * freq / SAMPLE_RATE as f64;
    let (mut w_sin, mut w_cos) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for t in 0..n {
        let win = if spec.windowed { cosine_window(t, n) } else { 1.0 };
        let phase = w * t as f64;
        w_sin.push(phase.sin() * win);
        w_cos.push(phase.cos() * win);
    }
    FilterPair {
        w_sin,
        w_cos,
        center_freq: freq,
    }
}

/// Geometrically spaced pairs, endpoints inclusive:
/// `f_k = f_min * (f_max / f_min)^(k / (n - 1))`.
pub fn build_log_spaced(spec: &FilterbankSpec) -> Vec<FilterPair> {
    let n = spec.n_filters;
    let ratio = spec.f_max / spec.f_min;
    (0..n)
        .map(|k| {
            let f = if n == 1 {
                spec.f_min
            } else if k == n - 1 {
                spec.f_max
            } else {
                spec.f_min * ratio.powf(k as f64 / (n - 1) as f64)
            };
            sinusoid_pair(f, spec)
        })
        .collect()
}

/// Fourier bins `j * fs / N` for `j = 1..` while `f_j <= f_max` (DC excluded).
pub fn build_stft(spec: &FilterbankSpec) -> Vec<FilterPair> {
    let bin = SAMPLE_RATE as f64 / spec.receptive_field as f64;
    (1..=stft_channel_count(spec))
        .map(|j| sinusoid_pair(j as f64 * bin, spec))
        .collect()
}

/// A fixed filterbank in GEMM layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Filterbank {
    /// `2K x receptive_field`, rows interleaved sin/cos.
    pub weights: Vec<f64>,
    pub center_freqs: Vec<f64>,
    pub receptive_field: usize,
    pub compress: bool,
    pub eps: f64,
}

impl Filterbank {
    pub fn from_spec(spec: &FilterbankSpec) -> Result<Self> {
        spec.validate()?;
        let pairs = match spec.kind {
            FilterbankKind::LogSpaced => build_log_spaced(spec),
            FilterbankKind::Stft => build_stft(spec),
        };
        Ok(Self::from_pairs(&pairs, spec.compress, spec.eps))
    }

    pub fn from_pairs(pairs: &[FilterPair], compress: bool, eps: f64) -> Self {
        let rf = pairs.first().map_or(0, |p| p.w_sin.len());
        let mut weights = Vec::with_capacity(2 * pairs.len() * rf);
        for p in pairs {
            assert_eq!(p.w_sin.len(), rf);
            assert_eq!(p.w_cos.len(), rf);
            weights.extend_from_slice(&p.w_sin);
            weights.extend_from_slice(&p.w_cos);
        }
        Filterbank {
            weights,
            center_freqs: pairs.iter().map(|p| p.center_freq).collect(),
            receptive_field: rf,
            compress,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.center_freqs.len()
    }

    pub fn pair(&self, k: usize) -> FilterPair {
        let rf = self.receptive_field;
        FilterPair {
            w_sin: self.weights[2 * k * rf..(2 * k + 1) * rf].to_vec(),
            w_cos: self.weights[(2 * k + 1) * rf..(2 * k + 2) * rf].to_vec(),
            center_freq: self.center_freqs[k],
        }
    }

    /// Index of the channel whose center frequency is closest to `freq`.
    pub fn nearest_channel(&self, freq: f64) -> usize {
        nearest_index(&self.center_freqs, freq)
    }
}

pub(crate) fn nearest_index(freqs: &[f64], freq: f64) -> usize {
    freqs
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - freq).abs().total_cmp(&(b.1 - freq).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Layer-one representation: `regions x channels` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<f64>,
    pub regions: usize,
    pub channels: usize,
    pub channel_freqs: Vec<f64>,
    pub compressed: bool,
}

impl Spectrogram {
    pub fn at(&self, region: usize, channel: usize) -> f64 {
        self.values[region * self.channels + channel]
    }

    /// Mean over regions per channel.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        for r in 0..self.regions {
            for (k, o) in out.iter_mut().enumerate() {
                *o += self.at(r, k);
            }
        }
        out.iter_mut().for_each(|v| *v /= self.regions as f64);
        out
    }

    /// Channel with the largest region-averaged value.
    pub fn argmax_channel(&self) -> usize {
        self.channel_means()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Copy each frame's regions into a contiguous `(B * R) x receptive_field` matrix.
pub fn region_matrix(frames: &[f64], geom: &FrameGeometry) -> Vec<f64> {
    let (len, rf) = (geom.frame_len, geom.receptive_field);
    assert_eq!(frames.len() % len, 0, "frame batch length");
    let mut out = Vec::with_capacity(frames.len() / len * geom.regions() * rf);
    for frame in frames.chunks_exact(len) {
        for r in 0..geom.regions() {
            let start = r * geom.stride;
            out.extend_from_slice(&frame[start..start + rf]);
        }
    }
    out
}

/// `proj[i][j] = weights[j] . regions[i]`, shape `rows x 2K`.
pub fn project(weights: &[f64], regions: &[f64], rf: usize) -> Vec<f64> {
    let two_k = weights.len() / rf;
    let rows = regions.len() / rf;
    let mut proj = vec![0.0; rows * two_k];
    gemm(
        1.0,
        MatRef::row_major(regions, rows, rf),
        MatRef::row_major(weights, two_k, rf).t(),
        0.0,
        MatMut::row_major(&mut proj, rows, two_k),
    );
    proj
}

/// Pair energies `sin^2 + cos^2` from interleaved projections.
pub fn energies(proj: &[f64]) -> Vec<f64> {
    proj.chunks_exact(2).map(|p| p[0] * p[0] + p[1] * p[1]).collect()
}

/// `log(eps + E)` when compressing, `E` otherwise.
pub fn compress_values(energy: &[f64], compress: bool, eps: f64) -> Vec<f64> {
    if compress {
        energy.iter().map(|e| (eps + e).ln()).collect()
    } else {
        energy.to_vec()
    }
}

/// Chain an upstream gradient on output values back to the projections.
pub fn projection_grad(upstream: &[f64], energy: &[f64], proj: &[f64], compress: bool, eps: f64) -> Vec<f64> {
    let mut dproj = vec![0.0; proj.len()];
    for (i, (&g, &e)) in upstream.iter().zip(energy).enumerate() {
        let de = if compress { g / (eps + e) } else { g };
        dproj[2 * i] = 2.0 * proj[2 * i] * de;
        dproj[2 * i + 1] = 2.0 * proj[2 * i + 1] * de;
    }
    dproj
}

/// `dW += dprojᵀ · regions`.
pub fn accumulate_weight_grad(dproj: &[f64], regions: &[f64], rf: usize, dweights: &mut [f64]) {
    let rows = regions.len() / rf;
    let two_k = dproj.len() / rows;
    gemm(
        1.0,
        MatRef::row_major(dproj, rows, two_k).t(),
        MatRef::row_major(regions, rows, rf),
        1.0,
        MatMut::row_major(dweights, two_k, rf),
    );
}

/// Gradient w.r.t. the frames, summing overlapping region contributions.
pub fn frame_grad(dproj: &[f64], weights: &[f64], geom: &FrameGeometry, batch: usize) -> Vec<f64> {
    let rf = geom.receptive_field;
    let rows = batch * geom.regions();
    let two_k = weights.len() / rf;
    let mut dregions = vec![0.0; rows * rf];
    gemm(
        1.0,
        MatRef::row_major(dproj, rows, two_k),
        MatRef::row_major(weights, two_k, rf),
        0.0,
        MatMut::row_major(&mut dregions, rows, rf),
    );
    let mut dframes = vec![0.0; batch * geom.frame_len];
    for (i, block) in dregions.chunks_exact(rf).enumerate() {
        let (b, r) = (i / geom.regions(), i % geom.regions());
        let start = b * geom.frame_len + r * geom.stride;
        for (d, g) in dframes[start..start + rf].iter_mut().zip(block) {
            *d += g;
        }
    }
    dframes
}

/// Apply a fixed bank to one frame.
pub fn apply(filters: &Filterbank, frame: &AudioFrame, geom: &FrameGeometry) -> Result<Spectrogram> {
    if filters.receptive_field != geom.receptive_field {
        return Err(Error::Shape {
            name: "filterbank.receptive_field".into(),
            expected: vec![geom.receptive_field],
            found: vec![filters.receptive_field],
        });
    }
    if frame.samples.len() != geom.frame_len {
        return Err(Error::Shape {
            name: "frame".into(),
            expected: vec![geom.frame_len],
            found: vec![frame.samples.len()],
        });
    }
    let regions = region_matrix(&frame.samples, geom);
    let energy = energies(&project(&filters.weights, &regions, geom.receptive_field));
    Ok(Spectrogram {
        values: compress_values(&energy, filters.compress, filters.eps),
        regions: geom.regions(),
        channels: filters.channels(),
        channel_freqs: filters.center_freqs.clone(),
        compressed: filters.compress,
    })
}

/// Derivatives of one frame's layer-one output with respect to the filter
/// weights and the input samples.
#[derive(Debug, Clone)]
pub struct FilterJacobian {
    regions: Vec<f64>,
    proj: Vec<f64>,
    energy: Vec<f64>,
    weights: Vec<f64>,
    compress: bool,
    eps: f64,
    geom: FrameGeometry,
}

pub fn jacobian(filters: &Filterbank, frame: &AudioFrame, geom: &FrameGeometry) -> FilterJacobian {
    let regions = region_matrix(&frame.samples, geom);
    let proj = project(&filters.weights, &regions, geom.receptive_field);
    let energy = energies(&proj);
    FilterJacobian {
        regions,
        proj,
        energy,
        weights: filters.weights.clone(),
        compress: filters.compress,
        eps: filters.eps,
        geom: *geom,
    }
}

impl FilterJacobian {
    /// Layer-one output values (`regions x channels`).
    pub fn values(&self) -> Vec<f64> {
        compress_values(&self.energy, self.compress, self.eps)
    }

    /// Pull back `upstream` (one entry per region and channel) to the
    /// weights, in the `2K x receptive_field` layout:
    /// `d/dw_sin = 2 (w_sin . x_t) x_t` per region, likewise for cos.
    pub fn weight_grad(&self, upstream: &[f64]) -> Vec<f64> {
        let dproj = projection_grad(upstream, &self.energy, &self.proj, self.compress, self.eps);
        let mut dw = vec![0.0; self.weights.len()];
        accumulate_weight_grad(&dproj, &self.regions, self.geom.receptive_field, &mut dw);
        dw
    }

    /// Pull back `upstream` to the frame samples.
    pub fn input_grad(&self, upstream: &[f64]) -> Vec<f64> {
        let dproj = projection_grad(upstream, &self.energy, &self.proj, self.compress, self.eps);
        frame_grad(&dproj, &self.weights, &self.geom, 1)
    }
}

//! Network families assembled from the autodiff primitives.

use std::sync::Arc;

use rand::Rng;

use crate::audio::{AudioFrame, FrameGeometry};
use crate::autodiff::{
    self, Dense, FilterbankLayer, FreqConv, FrontendWeights, InitScheme, Layer, LayerPrimitive, Parameter, Pool,
    Tape, Tensor, TimeChannelConv,
};
use crate::filterbank::{Filterbank, FilterbankSpec};
use crate::{Error, Result, N_NOTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    TwoLayer,
    ThreeLayer,
    TranslationInvariant,
    ChannelConv,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::TwoLayer => "two_layer",
            Family::ThreeLayer => "three_layer",
            Family::TranslationInvariant => "translation_invariant",
            Family::ChannelConv => "channel_conv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "two_layer" => Ok(Family::TwoLayer),
            "three_layer" => Ok(Family::ThreeLayer),
            "translation_invariant" => Ok(Family::TranslationInvariant),
            "channel_conv" => Ok(Family::ChannelConv),
            other => Err(Error::Config(format!("unknown model family {other:?}"))),
        }
    }
}

/// Layer one is either a fixed bank or learned from random initialization.
/// A learned front-end uses the bank's `n_filters`, `compress` and `eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Frontend {
    Fixed(FilterbankSpec),
    Learned(FilterbankSpec),
}

impl Frontend {
    pub fn bank(&self) -> &FilterbankSpec {
        match self {
            Frontend::Fixed(s) | Frontend::Learned(s) => s,
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, Frontend::Learned(_))
    }

    pub fn channels(&self) -> usize {
        match self {
            Frontend::Fixed(s) => s.channels(),
            Frontend::Learned(s) => s.n_filters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub frontend: Frontend,
    pub geometry: FrameGeometry,
    /// Hidden width of layer three (256, or 4096 for the wide variant).
    pub hidden3: usize,
    pub l2_filters: usize,
    pub l2_height: usize,
    pub l2_stride: usize,
    pub l3_stride: usize,
    pub l3_pool: Pool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            family: Family::TranslationInvariant,
            frontend: Frontend::Fixed(FilterbankSpec::default()),
            geometry: FrameGeometry::default(),
            hidden3: 256,
            l2_filters: 128,
            l2_height: 128,
            l2_stride: 1,
            l3_stride: 8,
            l3_pool: Pool::None,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let bank = self.frontend.bank();
        bank.validate()?;
        if bank.receptive_field != self.geometry.receptive_field {
            return Err(Error::Build(format!(
                "filterbank receptive field {} differs from frame geometry {}",
                bank.receptive_field, self.geometry.receptive_field
            )));
        }
        match (self.family, self.frontend.is_learned()) {
            (Family::TranslationInvariant, true) => {
                return Err(Error::Build(
                    "translation_invariant requires a fixed, frequency-ordered front-end".into(),
                ))
            }
            (Family::ChannelConv, false) => {
                return Err(Error::Build("channel_conv requires a learned front-end".into()))
            }
            _ => {}
        }
        let positive = [
            ("hidden3", self.hidden3),
            ("l2_filters", self.l2_filters),
            ("l2_height", self.l2_height),
            ("l2_stride", self.l2_stride),
            ("l3_stride", self.l3_stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Build(format!("{name} must be positive")));
        }
        if self.is_convolutional() && self.l2_height > self.frontend.channels() {
            return Err(Error::Build(format!(
                "l2_height {} exceeds {} front-end channels",
                self.l2_height,
                self.frontend.channels()
            )));
        }
        Ok(())
    }

    /// A miniature configuration (512-sample frames, 24 channels) for tests
    /// and quick experiments.
    pub fn reduced(family: Family) -> Self {
        let bank = FilterbankSpec {
            kind: crate::filterbank::FilterbankKind::LogSpaced,
            n_filters: 24,
            f_min: 200.0,
            f_max: 8000.0,
            receptive_field: 128,
            ..FilterbankSpec::default()
        };
        ModelSpec {
            family,
            frontend: if family == Family::ChannelConv {
                Frontend::Learned(bank)
            } else {
                Frontend::Fixed(bank)
            },
            geometry: FrameGeometry {
                frame_len: 512,
                receptive_field: 128,
                stride: 64,
            },
            hidden3: 6,
            l2_filters: 3,
            l2_height: 8,
            l3_stride: 4,
            ..ModelSpec::default()
        }
    }

    pub fn is_convolutional(&self) -> bool {
        matches!(self.family, Family::TranslationInvariant | Family::ChannelConv)
    }
}

/// A built network: layers, parameters and the spec they came from.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
    pub params: Vec<Parameter>,
    /// Squash scores through a sigmoid in `predict` (for cross-entropy models).
    pub output_sigmoid: bool,
}

fn add_param<R: Rng + ?Sized>(params: &mut Vec<Parameter>, name: &str, shape: &[usize], rng: &mut R) -> usize {
    let mut p = Parameter::new(name, shape);
    autodiff::init(&mut p, rng, InitScheme::ScaledUniform);
    params.push(p);
    params.len() - 1
}

/// Assemble the network for `spec`, initializing parameters from `rng`.
pub fn build<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<ModelGraph> {
    spec.validate()?;
    let geom = spec.geometry;
    let bank = spec.frontend.bank();
    let channels = spec.frontend.channels();
    let regions = geom.regions();
    let mut params = Vec::new();
    let mut layers = Vec::new();

    let weights = match spec.frontend {
        Frontend::Fixed(s) => FrontendWeights::Frozen(Arc::new(Filterbank::from_spec(&s)?)),
        Frontend::Learned(_) => FrontendWeights::Trainable {
            param: add_param(&mut params, "frontend.weights", &[2 * channels, geom.receptive_field], rng),
        },
    };
    layers.push(Layer::new(
        "frontend",
        LayerPrimitive::Filterbank(FilterbankLayer {
            weights,
            n_pairs: channels,
            geom,
            compress: bank.compress,
            eps: bank.eps,
        }),
    ));

    let head_inputs = match spec.family {
        Family::TwoLayer => regions * channels,
        Family::ThreeLayer => {
            let w = add_param(&mut params, "hidden.weight", &[spec.hidden3, regions * channels], rng);
            let b = add_param(&mut params, "hidden.bias", &[spec.hidden3], rng);
            layers.push(Layer::new(
                "hidden",
                LayerPrimitive::Dense(Dense {
                    inputs: regions * channels,
                    outputs: spec.hidden3,
                    weight: w,
                    bias: b,
                }),
            ));
            layers.push(Layer::new("hidden.relu", LayerPrimitive::Relu));
            spec.hidden3
        }
        Family::TranslationInvariant | Family::ChannelConv => {
            let l2 = add_param(&mut params, "l2.filters", &[spec.l2_filters, spec.l2_height, 1], rng);
            layers.push(Layer::new(
                "l2",
                LayerPrimitive::FreqConv(FreqConv {
                    height: spec.l2_height,
                    n_filters: spec.l2_filters,
                    in_channels: 1,
                    stride: spec.l2_stride,
                    filters: l2,
                }),
            ));
            layers.push(Layer::new("l2.relu", LayerPrimitive::Relu));
            let l3 = add_param(&mut params, "l3.filters", &[spec.hidden3, regions, spec.l2_filters], rng);
            layers.push(Layer::new(
                "l3",
                LayerPrimitive::TimeChannelConv(TimeChannelConv {
                    n_filters: spec.hidden3,
                    regions,
                    in_channels: spec.l2_filters,
                    stride: spec.l3_stride,
                    pool: spec.l3_pool,
                    filters: l3,
                }),
            ));
            layers.push(Layer::new("l3.relu", LayerPrimitive::Relu));
            let l2_positions = (channels - spec.l2_height) / spec.l2_stride + 1;
            match spec.l3_pool {
                Pool::Mean => spec.hidden3,
                Pool::None => ((l2_positions - 1) / spec.l3_stride + 1) * spec.hidden3,
            }
        }
    };
    // The linear readout starts at zero: a random readout over unnormalized
    // log-energies yields scores of magnitude ~10 that swamp early training.
    let w = add_param(&mut params, "output.weight", &[N_NOTES, head_inputs], rng);
    params[w].value.fill(0.0);
    let b = add_param(&mut params, "output.bias", &[N_NOTES], rng);
    layers.push(Layer::new(
        "output",
        LayerPrimitive::Dense(Dense {
            inputs: head_inputs,
            outputs: N_NOTES,
            weight: w,
            bias: b,
        }),
    ));

    let mut shape = vec![geom.frame_len];
    for layer in &layers {
        shape = layer.output_shape(&shape)?;
    }
    if shape != [N_NOTES] {
        return Err(Error::Build(format!("network output shape {shape:?}, expected [128]")));
    }
    Ok(ModelGraph {
        spec: *spec,
        layers,
        params,
        output_sigmoid: false,
    })
}

/// Layer-two comparison between a spectrogram and its frequency-shifted copy.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftProbeReport {
    pub shift: i64,
    /// Frequency positions compared.
    pub overlap_positions: usize,
    pub max_deviation: f64,
}

impl ModelGraph {
    pub fn trainable_param_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn frames_tensor(&self, frames: &[&AudioFrame]) -> Result<Tensor> {
        let len = self.spec.geometry.frame_len;
        let mut data = Vec::with_capacity(frames.len() * len);
        for f in frames {
            if f.samples.len() != len {
                return Err(Error::Shape {
                    name: "frame".into(),
                    expected: vec![len],
                    found: vec![f.samples.len()],
                });
            }
            data.extend_from_slice(&f.samples);
        }
        Tensor::from_vec(&[frames.len(), len], data)
    }

    /// Forward a batch; the tape output is `[B, 128]` raw scores.
    pub fn forward(&self, frames: &[&AudioFrame]) -> Result<Tape> {
        autodiff::forward(&self.layers, &self.params, self.frames_tensor(frames)?)
    }

    /// Accumulate gradients for `dL/dscores` (`[B, 128]`).
    pub fn backward(&mut self, tape: &Tape, loss_grad: &Tensor) -> Result<()> {
        autodiff::backward(&self.layers, &mut self.params, tape, loss_grad, false).map(|_| ())
    }

    /// Note scores for one frame; thresholding is left to the caller.
    pub fn predict(&self, frame: &AudioFrame) -> Result<Vec<f64>> {
        Ok(self.predict_many(&[frame], 1)?.remove(0))
    }

    /// Scores for many frames, `chunk` frames per forward pass.
    pub fn predict_many(&self, frames: &[&AudioFrame], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(frames.len());
        for part in frames.chunks(chunk.max(1)) {
            let tape = self.forward(part)?;
            for row in tape.output().data().chunks_exact(N_NOTES) {
                let mut scores = row.to_vec();
                if self.output_sigmoid {
                    scores.iter_mut().for_each(|s| *s = 1.0 / (1.0 + (-*s).exp()));
                }
                out.push(scores);
            }
        }
        Ok(out)
    }

    /// Layer-one spectrogram for one frame as `[1, regions, K, 1]`.
    pub fn layer_one(&self, frame: &AudioFrame) -> Result<Tensor> {
        let tape = autodiff::forward(&self.layers[..1], &self.params, self.frames_tensor(&[frame])?)?;
        Ok(tape.output().clone())
    }

    /// Layer-two activations (after the ReLU) for a layer-one tensor.
    pub fn layer_two_from(&self, layer_one: Tensor) -> Result<Tensor> {
        if !self.spec.is_convolutional() {
            return Err(Error::InvalidArgument(
                "layer-two activations exist only for convolutional families".into(),
            ));
        }
        let tape = autodiff::forward(&self.layers[1..3], &self.params, layer_one)?;
        Ok(tape.output().clone())
    }

    /// Compare layer two on the spectrogram of `frame` and on that
    /// spectrogram shifted up by `shift` frequency bins.
    pub fn shift_equivariance_probe(&self, frame: &AudioFrame, shift: i64) -> Result<ShiftProbeReport> {
        if self.spec.family != Family::TranslationInvariant || self.spec.l2_stride != 1 {
            return Err(Error::InvalidArgument(
                "shift probe needs a translation_invariant graph with l2_stride = 1".into(),
            ));
        }
        let h1 = self.layer_one(frame)?;
        let (regions, freq) = (h1.shape()[1], h1.shape()[2]);
        if shift.unsigned_abs() as usize >= freq {
            return Err(Error::InvalidArgument(format!(
                "shift {shift} not smaller than {freq} frequency bins"
            )));
        }
        let mut shifted = Tensor::zeros(h1.shape());
        for r in 0..regions {
            for q in 0..freq as i64 {
                let src = q - shift;
                if (0..freq as i64).contains(&src) {
                    shifted.data_mut()[r * freq + q as usize] = h1.data()[r * freq + src as usize];
                }
            }
        }
        let base = self.layer_two_from(h1)?;
        let moved = self.layer_two_from(shifted)?;
        let (positions, nf) = (base.shape()[2], base.shape()[3]);
        let s = shift.unsigned_abs() as usize;
        let overlap = positions.saturating_sub(s);
        let mut max_dev = 0.0f64;
        for r in 0..regions {
            for i in 0..overlap {
                // Base position p lines up with shifted position p + shift.
                let (p, q) = if shift >= 0 { (i, i + s) } else { (i + s, i) };
                for f in 0..nf {
                    let a = base.data()[(r * positions + p) * nf + f];
                    let b = moved.data()[(r * positions + q) * nf + f];
                    max_dev = max_dev.max((a - b).abs());
                }
            }
        }
        Ok(ShiftProbeReport {
            shift,
            overlap_positions: overlap,
            max_deviation: max_dev,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    /// Parameter-free copy of the graph shapes for counting.
    fn count(spec: &ModelSpec) -> usize {
        build(spec, &mut rng()).unwrap().trainable_param_count()
    }

    fn enumerated(spec: &ModelSpec) -> usize {
        let g = build(spec, &mut rng()).unwrap();
        g.params.iter().filter(|p| p.trainable).map(|p| p.value.shape().iter().product::<usize>()).sum()
    }

    #[test]
    fn translation_invariant_mean_pool_count() {
        let spec = ModelSpec {
            l3_pool: Pool::Mean,
            l3_stride: 1,
            ..ModelSpec::default()
        };
        // 128 filters of 128 frequency bins over one input channel.
        let expect = 128 * 128 + 256 * 25 * 128 + 256 * 128 + 128;
        assert_eq!(count(&spec), expect);
        assert_eq!(enumerated(&spec), expect);
    }

    #[test]
    fn translation_invariant_default_count() {
        let spec = ModelSpec::default();
        // 512 - 128 + 1 = 385 layer-two positions, every 8th kept: 49.
        let expect = 128 * 128 + 256 * 25 * 128 + 49 * 256 * 128 + 128;
        assert_eq!(count(&spec), expect);
        assert_eq!(enumerated(&spec), expect);
    }

    #[test]
    fn two_layer_stft_count() {
        let spec = ModelSpec {
            family: Family::TwoLayer,
            frontend: Frontend::Fixed(FilterbankSpec::stft()),
            ..ModelSpec::default()
        };
        assert_eq!(count(&spec), 25 * 557 * 128 + 128);
    }

    #[test]
    fn channel_conv_adds_frontend_weights() {
        let ti = ModelSpec {
            hidden3: 8,
            l2_filters: 4,
            ..ModelSpec::default()
        };
        let cc = ModelSpec {
            family: Family::ChannelConv,
            frontend: Frontend::Learned(FilterbankSpec::default()),
            ..ti
        };
        assert_eq!(count(&cc) - count(&ti), 512 * 2 * 4096);
    }

    #[test]
    fn translation_invariant_smaller_than_three_layer() {
        let ti = ModelSpec::default();
        let three = ModelSpec {
            family: Family::ThreeLayer,
            ..ti
        };
        assert!(count(&ti) < count(&three));
    }

    #[test]
    fn inconsistent_specs_rejected() {
        let bad = ModelSpec {
            frontend: Frontend::Learned(FilterbankSpec::default()),
            ..ModelSpec::default()
        };
        assert!(matches!(build(&bad, &mut rng()), Err(Error::Build(_))));
        let bad = ModelSpec {
            family: Family::ChannelConv,
            ..ModelSpec::default()
        };
        assert!(matches!(build(&bad, &mut rng()), Err(Error::Build(_))));
    }

    fn small_spec(family: Family) -> ModelSpec {
        ModelSpec::reduced(family)
    }

    fn noise_frame(seed: u64, len: usize) -> AudioFrame {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        AudioFrame::normalize((0..len).map(|_| r.random_range(-1.0..1.0)).collect(), "n", 0)
    }

    #[test]
    fn predictions_deterministic_and_finite() {
        for family in [Family::TwoLayer, Family::ThreeLayer, Family::TranslationInvariant, Family::ChannelConv] {
            let spec = small_spec(family);
            let a = build(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let b = build(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let frame = noise_frame(1, 512);
            let pa = a.predict(&frame).unwrap();
            assert_eq!(pa.len(), 128);
            assert!(pa.iter().all(|v| v.is_finite()));
            assert_eq!(pa, b.predict(&frame).unwrap());
        }
    }

    #[test]
    fn zero_output_layer_predicts_bias() {
        let mut g = build(&small_spec(Family::TranslationInvariant), &mut rng()).unwrap();
        let w = g.params.iter().position(|p| p.name == "output.weight").unwrap();
        g.params[w].value.fill(0.0);
        let b = g.params.iter().position(|p| p.name == "output.bias").unwrap();
        for (i, v) in g.params[b].value.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.01;
        }
        let scores = g.predict(&noise_frame(2, 512)).unwrap();
        for (i, s) in scores.iter().enumerate() {
            assert_eq!(*s, i as f64 * 0.01);
        }
    }

    #[test]
    fn probe_zero_shift_and_bounds() {
        let g = build(&small_spec(Family::TranslationInvariant), &mut rng()).unwrap();
        let frame = noise_frame(3, 512);
        let r = g.shift_equivariance_probe(&frame, 0).unwrap();
        assert_eq!(r.max_deviation, 0.0);
        for s in [7i64, -5] {
            assert!(g.shift_equivariance_probe(&frame, s).unwrap().max_deviation < 1e-12);
        }
        assert!(g.shift_equivariance_probe(&frame, 24).is_err());
        let two = build(&small_spec(Family::TwoLayer), &mut rng()).unwrap();
        assert!(two.shift_equivariance_probe(&frame, 1).is_err());
    }

    #[test]
    fn pool_none_widens_head() {
        let spec = ModelSpec {
            l3_pool: Pool::None,
            l3_stride: 4,
            ..small_spec(Family::TranslationInvariant)
        };
        let g = build(&spec, &mut rng()).unwrap();
        // 24 - 8 + 1 = 17 l2 positions, stride 4 -> 5 l3 positions.
        assert_eq!(g.param("output.weight").unwrap().value.shape(), &[128, 5 * 6]);
        assert_eq!(g.predict(&noise_frame(4, 512)).unwrap().len(), 128);
    }
}

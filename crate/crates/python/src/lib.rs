//! Python bindings: models, checkpoints, filterbanks, augmentation and metrics.

use frametrans_core::audio::{self, AudioFrame, Recording};
use frametrans_core::augment::{self, ShiftSpec};
use frametrans_core::checkpoint::Checkpoint;
use frametrans_core::config::RunConfig;
use frametrans_core::dataset::LabelVector;
use frametrans_core::filterbank::{self, Filterbank};
use frametrans_core::metrics::{self, ScoredFrame};
use frametrans_core::models::{self, ModelGraph};
use frametrans_core::{cli, Error};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn config_from(text: Option<&str>, overrides: Vec<String>) -> PyResult<RunConfig> {
    let mut cfg = match text {
        Some(t) => RunConfig::parse(t).map_err(py_err)?,
        None => RunConfig::default(),
    };
    for o in &overrides {
        cfg.set_override(o).map_err(py_err)?;
    }
    Ok(cfg)
}

fn recording(samples: Vec<f64>) -> PyResult<Recording> {
    Recording::new("python", samples).map_err(py_err)
}

/// A network built from a run config, or restored from a checkpoint.
#[pyclass(module = "frametrans")]
struct Model {
    graph: ModelGraph,
    config: RunConfig,
}

#[pymethods]
impl Model {
    /// Build a freshly initialized model. `config` is TOML text; each
    /// override is a `section.key=value` string.
    #[new]
    #[pyo3(signature = (config=None, overrides=Vec::new(), seed=0))]
    fn new(config: Option<&str>, overrides: Vec<String>, seed: u64) -> PyResult<Self> {
        let cfg = config_from(config, overrides)?;
        let spec = cfg.model_spec().map_err(py_err)?;
        let graph = models::build(&spec, &mut frametrans_core::train::init_rng(seed)).map_err(py_err)?;
        Ok(Model { graph, config: cfg })
    }

    /// Restore a model from a checkpoint file, using the averaged weights
    /// unless `averaged` is false.
    #[staticmethod]
    #[pyo3(signature = (path, averaged=true))]
    fn load(path: &str, averaged: bool) -> PyResult<Self> {
        let ckpt = Checkpoint::load(path).map_err(py_err)?;
        let cfg = RunConfig::parse(&ckpt.config).map_err(py_err)?;
        let graph = cli::graph_from_checkpoint(&cfg, &ckpt, averaged).map_err(py_err)?;
        Ok(Model { graph, config: cfg })
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.graph.spec.family.as_str()
    }

    #[getter]
    fn frame_len(&self) -> usize {
        self.graph.spec.geometry.frame_len
    }

    #[getter]
    fn trainable_parameters(&self) -> usize {
        self.graph.trainable_param_count()
    }

    /// Names and shapes of all parameters.
    fn parameters(&self) -> Vec<(String, Vec<usize>)> {
        self.graph
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }

    /// The effective run config as TOML.
    fn config(&self) -> String {
        self.config.to_text()
    }

    /// Scores for one frame of `frame_len` raw samples (normalized here).
    fn predict(&self, samples: Vec<f64>) -> PyResult<Vec<f64>> {
        if samples.len() != self.frame_len() {
            return Err(PyValueError::new_err(format!(
                "expected {} samples, got {}",
                self.frame_len(),
                samples.len()
            )));
        }
        let frame = AudioFrame::normalize(samples, "python", 0);
        self.graph.predict(&frame).map_err(py_err)
    }

    /// Scores for frames centered every `stride` samples of a recording.
    #[pyo3(signature = (samples, stride=512))]
    fn transcribe(&self, samples: Vec<f64>, stride: usize) -> PyResult<Vec<(usize, Vec<f64>)>> {
        if stride == 0 {
            return Err(PyValueError::new_err("stride must be positive"));
        }
        let rec = recording(samples)?;
        let geom = self.graph.spec.geometry;
        let frames = (1..=rec.len() / stride)
            .map(|k| audio::extract_frame(&rec, k * stride, &geom))
            .collect::<Result<Vec<_>, _>>()
            .map_err(py_err)?;
        let refs: Vec<&AudioFrame> = frames.iter().collect();
        let scores = self.graph.predict_many(&refs, self.config.eval.batch).map_err(py_err)?;
        Ok(frames.iter().map(|f| f.center_sample).zip(scores).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(family={:?}, trainable_parameters={})",
            self.family(),
            self.trainable_parameters()
        )
    }
}

/// Read a mono 16-bit PCM WAV file as samples in [-1, 1].
#[pyfunction]
fn load_wav(path: &str) -> PyResult<Vec<f64>> {
    Ok(audio::load_wav(path).map_err(py_err)?.samples)
}

/// Filterbank outputs (regions x channels) for the frame of a recording
/// centered at `center`, using the `[geometry]` and `[filterbank]` sections
/// of `config`.
#[pyfunction]
#[pyo3(signature = (samples, center, config=None, overrides=Vec::new()))]
fn spectrogram(samples: Vec<f64>, center: usize, config: Option<&str>, overrides: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
    let cfg = config_from(config, overrides)?;
    let geom = cfg.geometry();
    let bank = Filterbank::from_spec(&cfg.filterbank_spec().map_err(py_err)?).map_err(py_err)?;
    let frame = audio::extract_frame(&recording(samples)?, center, &geom).map_err(py_err)?;
    let spec = filterbank::apply(&bank, &frame, &geom).map_err(py_err)?;
    Ok(spec.values.chunks(bank.channels()).map(<[f64]>::to_vec).collect())
}

/// Pitch-shift the frame centered at `center` by `integral + continuous`
/// semitones; returns the normalized frame.
#[pyfunction]
#[pyo3(signature = (samples, center, integral, continuous=0.0, frame_len=16384))]
fn pitch_shift(samples: Vec<f64>, center: usize, integral: i32, continuous: f64, frame_len: usize) -> PyResult<Vec<f64>> {
    let shift = ShiftSpec::new(integral, continuous).map_err(py_err)?;
    let geom = audio::FrameGeometry {
        frame_len,
        ..audio::FrameGeometry::default()
    };
    Ok(augment::pitch_shift(&recording(samples)?, center, &geom, shift).samples)
}

/// Average precision over pooled `(score, truth)` pairs.
#[pyfunction]
fn average_precision(scores: Vec<f64>, truths: Vec<bool>) -> PyResult<f64> {
    if scores.len() != truths.len() {
        return Err(PyValueError::new_err("scores and truths differ in length"));
    }
    let mut pairs: Vec<(f64, bool)> = scores.into_iter().zip(truths).collect();
    metrics::average_precision_pairs(&mut pairs).map_err(py_err)
}

/// Frame-level `(accuracy, error)` from per-frame reference and predicted
/// MIDI note lists.
#[pyfunction]
fn accuracy_error(truth: Vec<Vec<u8>>, predicted: Vec<Vec<u8>>) -> PyResult<(f64, f64)> {
    if truth.len() != predicted.len() {
        return Err(PyValueError::new_err("truth and predicted differ in length"));
    }
    let frames: Vec<ScoredFrame> = truth
        .into_iter()
        .zip(predicted)
        .map(|(t, p)| {
            let mut scores = vec![0.0; frametrans_core::N_NOTES];
            for n in p {
                if let Some(s) = scores.get_mut(n as usize) {
                    *s = 1.0;
                }
            }
            ScoredFrame {
                scores,
                truth: LabelVector::from_notes(t),
                recording: String::new(),
                center: 0,
            }
        })
        .collect();
    let s = metrics::accuracy_error(&frames, 0.5).map_err(py_err)?;
    Ok((s.accuracy, s.error))
}

/// Run the command-line interface with `args` (without the program name)
/// and return its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    cli::main_with_args(std::iter::once("frametrans".to_string()).chain(args))
}

/// Random pitch shift `(integral, continuous)` drawn as during training.
#[pyfunction]
fn random_shift(seed: u64) -> (i32, f64) {
    let s = augment::random_shift(&mut ChaCha8Rng::seed_from_u64(seed));
    (s.integral(), s.continuous())
}

#[pymodule]
fn frametrans(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(load_wav, m)?)?;
    m.add_function(wrap_pyfunction!(spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(pitch_shift, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy_error, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(random_shift, m)?)?;
    m.add("SAMPLE_RATE", frametrans_core::SAMPLE_RATE)?;
    Ok(())
}

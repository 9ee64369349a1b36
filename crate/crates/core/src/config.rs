//! Run configuration: one TOML section per module, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::FrameGeometry;
use crate::autodiff::Pool;
use crate::dataset::SynthSpec;
use crate::filterbank::{FilterbankKind, FilterbankSpec};
use crate::metrics::DEFAULT_THRESHOLD;
use crate::models::{Family, Frontend, ModelSpec};
use crate::train::{default_learning_rate, LossKind, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySection {
    pub frame_len: usize,
    pub receptive_field: usize,
    pub stride: usize,
}

impl Default for GeometrySection {
    fn default() -> Self {
        let g = FrameGeometry::default();
        GeometrySection {
            frame_len: g.frame_len,
            receptive_field: g.receptive_field,
            stride: g.stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterbankSection {
    pub kind: String,
    pub windowed: bool,
    pub n_filters: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub compress: bool,
    pub eps: f64,
}

impl Default for FilterbankSection {
    fn default() -> Self {
        let f = FilterbankSpec::default();
        FilterbankSection {
            kind: f.kind.as_str().into(),
            windowed: f.windowed,
            n_filters: f.n_filters,
            f_min: f.f_min,
            f_max: f.f_max,
            compress: f.compress,
            eps: f.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub family: String,
    /// `fixed` uses the `[filterbank]` bank; `learned` trains it from random init.
    pub frontend: String,
    pub hidden3: usize,
    pub l2_filters: usize,
    pub l2_height: usize,
    pub l2_stride: usize,
    pub l3_stride: usize,
    pub l3_pool: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelSpec::default();
        ModelSection {
            family: m.family.as_str().into(),
            frontend: "fixed".into(),
            hidden3: m.hidden3,
            l2_filters: m.l2_filters,
            l2_height: m.l2_height,
            l2_stride: m.l2_stride,
            l3_stride: m.l3_stride,
            l3_pool: m.l3_pool.as_str().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub momentum: f64,
    /// Defaults per model family when absent.
    pub learning_rate: Option<f64>,
    pub lr_decay: f64,
    pub epoch_steps: u64,
    pub avg_decay: f64,
    pub steps: u64,
    pub seed: u64,
    pub loss: String,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub workers: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            momentum: t.momentum,
            learning_rate: None,
            lr_decay: t.lr_decay,
            epoch_steps: t.epoch_steps,
            avg_decay: t.avg_decay,
            steps: t.steps,
            seed: t.seed,
            loss: t.loss.as_str().into(),
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
            workers: t.workers,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub pitch_shift: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub threshold: f64,
    /// Frames per forward pass during evaluation and prediction.
    pub batch: usize,
    /// Evaluate the averaged iterates rather than the live weights.
    pub averaged: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            threshold: DEFAULT_THRESHOLD,
            batch: 32,
            averaged: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Directory of `<id>.wav` recordings.
    pub data_dir: String,
    /// Directory of `<id>.csv` labels; empty means `data_dir`.
    pub labels_dir: String,
    pub split: String,
    pub checkpoint_dir: String,
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub seed: u64,
    /// Recordings held out as the test split.
    pub n_test: usize,
    /// Evaluation-grid stride written into the split file.
    pub sampling_stride: usize,
    pub n_recordings: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub min_chord_notes: usize,
    pub max_chord_notes: usize,
    pub midi_lo: u8,
    pub midi_hi: u8,
    pub min_chord_s: f64,
    pub max_chord_s: f64,
    pub n_partials: usize,
    pub partial_decay: f64,
    pub amp_jitter: f64,
    pub rest_prob: f64,
    pub gain: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthSpec::default();
        SynthSection {
            seed: 0,
            n_test: 6,
            sampling_stride: 512,
            n_recordings: s.n_recordings,
            min_duration_s: s.min_duration_s,
            max_duration_s: s.max_duration_s,
            min_chord_notes: s.min_chord_notes,
            max_chord_notes: s.max_chord_notes,
            midi_lo: s.midi_lo,
            midi_hi: s.midi_hi,
            min_chord_s: s.min_chord_s,
            max_chord_s: s.max_chord_s,
            n_partials: s.n_partials,
            partial_decay: s.partial_decay,
            amp_jitter: s.amp_jitter,
            rest_prob: s.rest_prob,
            gain: s.gain,
        }
    }
}

/// Every setting of a run. Absent keys take defaults; unknown keys fail.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub geometry: GeometrySection,
    pub filterbank: FilterbankSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub augment: AugmentSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
    pub synth: SynthSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical text with every key, learning rate made explicit.
    pub fn to_text(&self) -> String {
        let mut cfg = self.clone();
        cfg.train.learning_rate = Some(self.learning_rate());
        toml::to_string(&cfg).expect("config serializes")
    }

    /// Apply a `section.key=value` override. Values are TOML literals;
    /// bare words are taken as strings.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key {path:?} is not section.key")))?;
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        let sec = table
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| Error::Config(format!("unknown section [{section}]")))?;
        sec.insert(key.to_string(), value);
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec()?.validate()?;
        self.train_config()?.validate()?;
        self.synth_spec().validate()?;
        if !self.eval.threshold.is_finite() {
            return Err(Error::Config("eval.threshold must be finite".into()));
        }
        if self.eval.batch == 0 {
            return Err(Error::Config("eval.batch must be positive".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> FrameGeometry {
        FrameGeometry {
            frame_len: self.geometry.frame_len,
            receptive_field: self.geometry.receptive_field,
            stride: self.geometry.stride,
        }
    }

    pub fn filterbank_spec(&self) -> Result<FilterbankSpec> {
        let f = &self.filterbank;
        Ok(FilterbankSpec {
            kind: FilterbankKind::parse(&f.kind).map_err(as_config)?,
            windowed: f.windowed,
            n_filters: f.n_filters,
            f_min: f.f_min,
            f_max: f.f_max,
            receptive_field: self.geometry.receptive_field,
            compress: f.compress,
            eps: f.eps,
        })
    }

    pub fn family(&self) -> Result<Family> {
        Family::parse(&self.model.family)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let bank = self.filterbank_spec()?;
        let frontend = match m.frontend.as_str() {
            "fixed" => Frontend::Fixed(bank),
            "learned" => Frontend::Learned(bank),
            other => return Err(Error::Config(format!("model.frontend must be fixed or learned, not {other:?}"))),
        };
        let spec = ModelSpec {
            family: self.family()?,
            frontend,
            geometry: self.geometry(),
            hidden3: m.hidden3,
            l2_filters: m.l2_filters,
            l2_height: m.l2_height,
            l2_stride: m.l2_stride,
            l3_stride: m.l3_stride,
            l3_pool: Pool::parse(&m.l3_pool).map_err(as_config)?,
        };
        spec.validate().map_err(as_config)?;
        Ok(spec)
    }

    pub fn learning_rate(&self) -> f64 {
        self.train
            .learning_rate
            .unwrap_or_else(|| default_learning_rate(self.family().unwrap_or(Family::TranslationInvariant)))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            batch_size: t.batch_size,
            momentum: t.momentum,
            learning_rate: self.learning_rate(),
            lr_decay: t.lr_decay,
            epoch_steps: t.epoch_steps,
            avg_decay: t.avg_decay,
            steps: t.steps,
            seed: t.seed,
            loss: LossKind::parse(&t.loss)?,
            pitch_shift: self.augment.pitch_shift,
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
            workers: t.workers,
        })
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let s = &self.synth;
        SynthSpec {
            n_recordings: s.n_recordings,
            min_duration_s: s.min_duration_s,
            max_duration_s: s.max_duration_s,
            min_chord_notes: s.min_chord_notes,
            max_chord_notes: s.max_chord_notes,
            midi_lo: s.midi_lo,
            midi_hi: s.midi_hi,
            min_chord_s: s.min_chord_s,
            max_chord_s: s.max_chord_s,
            n_partials: s.n_partials,
            partial_decay: s.partial_decay,
            amp_jitter: s.amp_jitter,
            rest_prob: s.rest_prob,
            gain: s.gain,
        }
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.model_spec().unwrap(), ModelSpec::default());
        assert!(text.contains("[train]"));
        assert!(text.contains("learning_rate"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::parse("[train]\nstepz = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[bogus]\nx = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        cfg.set_override("train.steps=25").unwrap();
        cfg.set_override("model.family = two_layer").unwrap();
        cfg.set_override("filterbank.kind=stft").unwrap();
        cfg.set_override("augment.pitch_shift=true").unwrap();
        assert_eq!(cfg.train.steps, 25);
        let spec = cfg.model_spec().unwrap();
        assert_eq!(spec.family, Family::TwoLayer);
        assert_eq!(spec.frontend.bank().kind, FilterbankKind::Stft);
        assert!(cfg.train_config().unwrap().pitch_shift);
        assert!(cfg.set_override("train.nope=1").is_err());
        assert!(cfg.set_override("noequals").is_err());
        assert!(cfg.set_override("train.momentum=1.5").is_err());
    }

    #[test]
    fn inconsistent_model_rejected() {
        let err = RunConfig::parse("[model]\nfamily = \"translation_invariant\"\nfrontend = \"learned\"\n");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn learning_rate_follows_family() {
        let cfg = RunConfig::parse("[model]\nfamily = \"two_layer\"\n").unwrap();
        assert_eq!(cfg.learning_rate(), default_learning_rate(Family::TwoLayer));
        let cfg = RunConfig::parse("[train]\nlearning_rate = 0.5\n").unwrap();
        assert_eq!(cfg.train_config().unwrap().learning_rate, 0.5);
    }
}

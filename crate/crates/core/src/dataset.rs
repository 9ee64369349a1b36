//! Note labels, train/test splits, frame sampling and the synthetic corpus.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::audio::{extract_frame, load_wav, AudioFrame, FrameGeometry, Recording};
use crate::{Error, Result, N_NOTES, SAMPLE_RATE};

/// One labelled note: active on the half-open sample interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoteEvent {
    pub start_sample: usize,
    pub end_sample: usize,
    pub note: u8,
    pub instrument: u32,
}

impl NoteEvent {
    pub fn new(start_sample: usize, end_sample: usize, note: u8, instrument: u32) -> Result<Self> {
        if start_sample >= end_sample {
            return Err(Error::InvalidArgument(format!(
                "note event start {start_sample} not before end {end_sample}"
            )));
        }
        if note as usize >= N_NOTES {
            return Err(Error::InvalidArgument(format!("note {note} outside 0..=127")));
        }
        Ok(NoteEvent {
            start_sample,
            end_sample,
            note,
            instrument,
        })
    }

    #[inline]
    pub fn active_at(&self, t: usize) -> bool {
        self.start_sample <= t && t < self.end_sample
    }
}

/// 128 binary note indicators; bit `n` is MIDI note `n`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LabelVector {
    bits: u128,
}

impl LabelVector {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_notes(notes: impl IntoIterator<Item = u8>) -> Self {
        let mut y = Self::empty();
        for n in notes {
            y.set(n, true);
        }
        y
    }

    pub fn from_bits(bits: u128) -> Self {
        LabelVector { bits }
    }

    pub fn bits(&self) -> u128 {
        self.bits
    }

    #[inline]
    pub fn get(&self, note: usize) -> bool {
        note < N_NOTES && (self.bits >> note) & 1 == 1
    }

    pub fn set(&mut self, note: u8, on: bool) {
        assert!((note as usize) < N_NOTES);
        if on {
            self.bits |= 1u128 << note;
        } else {
            self.bits &= !(1u128 << note);
        }
    }

    pub fn count(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn notes(&self) -> impl Iterator<Item = u8> + '_ {
        (0..N_NOTES as u8).filter(move |&n| self.get(n as usize))
    }

    /// Targets as reals in {0, 1}.
    pub fn to_targets(&self) -> [f64; N_NOTES] {
        let mut t = [0.0; N_NOTES];
        for (n, v) in t.iter_mut().enumerate() {
            if self.get(n) {
                *v = 1.0;
            }
        }
        t
    }
}

impl fmt::Debug for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.notes()).finish()
    }
}

/// Active notes at sample `t`.
pub fn labels_at(events: &[NoteEvent], t: usize) -> LabelVector {
    let mut y = LabelVector::empty();
    for e in events.iter().filter(|e| e.active_at(t)) {
        y.set(e.note, true);
    }
    y
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRowError {
    pub line: u64,
    pub message: String,
}

/// Result of reading a label CSV: accepted events plus rejected rows.
#[derive(Debug, Clone, Default)]
pub struct LabelFile {
    pub events: Vec<NoteEvent>,
    pub row_errors: Vec<LabelRowError>,
}

/// Read a MusicNet-style label CSV (`start_time,end_time,instrument,note,...`,
/// sample-denominated). Malformed rows are collected, not fatal; a missing
/// required column is.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

pub fn parse_labels(text: &str) -> Result<LabelFile> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::LabelSchema(format!("unreadable header: {e}")))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::LabelSchema(format!("missing column {name}")))
    };
    let start_col = column("start_time")?;
    let end_col = column("end_time")?;
    let note_col = column("note")?;
    let instrument_col = headers.iter().position(|h| h == "instrument");

    let mut out = LabelFile::default();
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                out.row_errors.push(LabelRowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        match parse_row(&record, start_col, end_col, note_col, instrument_col) {
            Ok(ev) => out.events.push(ev),
            Err(message) => out.row_errors.push(LabelRowError { line, message }),
        }
    }
    Ok(out)
}

fn parse_row(
    record: &csv::StringRecord,
    start_col: usize,
    end_col: usize,
    note_col: usize,
    instrument_col: Option<usize>,
) -> std::result::Result<NoteEvent, String> {
    let field = |i: usize, name: &str| -> std::result::Result<i64, String> {
        let raw = record.get(i).ok_or_else(|| format!("missing {name}"))?;
        raw.parse::<i64>()
            .map_err(|_| format!("{name} is not an integer: {raw:?}"))
    };
    let start = field(start_col, "start_time")?;
    let end = field(end_col, "end_time")?;
    let note = field(note_col, "note")?;
    let instrument = match instrument_col {
        Some(i) => field(i, "instrument")?,
        None => 0,
    };
    if !(0..N_NOTES as i64).contains(&note) {
        return Err(format!("note {note} outside [0, 127]"));
    }
    if start < 0 || end <= start {
        return Err(format!("invalid interval [{start}, {end})"));
    }
    if instrument < 0 || instrument > u32::MAX as i64 {
        return Err(format!("invalid instrument {instrument}"));
    }
    Ok(NoteEvent {
        start_sample: start as usize,
        end_sample: end as usize,
        note: note as u8,
        instrument: instrument as u32,
    })
}

/// Serialize events in the same CSV layout `load_labels` reads.
pub fn labels_to_csv(events: &[NoteEvent]) -> String {
    let mut out = String::from("start_time,end_time,instrument,note\n");
    for e in events {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.start_sample, e.end_sample, e.instrument, e.note
        ));
    }
    out
}

/// Which recordings train and which are held out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// Samples between consecutive evaluation frame centers.
    pub sampling_stride: usize,
}

impl DatasetSplit {
    pub fn new(train_ids: Vec<String>, test_ids: Vec<String>, sampling_stride: usize) -> Result<Self> {
        let split = DatasetSplit {
            train_ids,
            test_ids,
            sampling_stride,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sampling_stride == 0 {
            return Err(Error::Config("sampling_stride must be positive".into()));
        }
        let train: HashSet<&str> = self.train_ids.iter().map(String::as_str).collect();
        if let Some(id) = self.test_ids.iter().find(|id| train.contains(id.as_str())) {
            return Err(Error::Config(format!(
                "recording {id} is in both train and test sets"
            )));
        }
        Ok(())
    }

    /// Parse the split file format:
    ///
    /// ```text
    /// # comment
    /// sampling_stride = 512
    /// [train]
    /// 1727
    /// [test]
    /// 2303
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut stride = 512usize;
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut section: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                match name.trim() {
                    "train" => section = Some("train"),
                    "test" => section = Some("test"),
                    other => {
                        return Err(Error::Config(format!(
                            "split line {}: unknown section [{other}]",
                            i + 1
                        )))
                    }
                }
                continue;
            }
            if let Some((key, value)) = line.split_once('=') {
                if key.trim() != "sampling_stride" || section.is_some() {
                    return Err(Error::Config(format!(
                        "split line {}: unexpected key {:?}",
                        i + 1,
                        key.trim()
                    )));
                }
                stride = value.trim().parse().map_err(|_| {
                    Error::Config(format!("split line {}: bad sampling_stride", i + 1))
                })?;
                continue;
            }
            match section {
                Some("train") => train.push(line.to_string()),
                Some("test") => test.push(line.to_string()),
                _ => {
                    return Err(Error::Config(format!(
                        "split line {}: recording id outside a section",
                        i + 1
                    )))
                }
            }
        }
        DatasetSplit::new(train, test, stride)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("sampling_stride = {}\n[train]\n", self.sampling_stride);
        for id in &self.train_ids {
            out.push_str(id);
            out.push('\n');
        }
        out.push_str("[test]\n");
        for id in &self.test_ids {
            out.push_str(id);
            out.push('\n');
        }
        out
    }

    /// An empty `[train]` section means every corpus recording not held out.
    pub fn resolve(mut self, corpus: &Corpus) -> Self {
        if self.train_ids.is_empty() {
            let test: HashSet<&str> = self.test_ids.iter().map(String::as_str).collect();
            self.train_ids = corpus
                .items
                .iter()
                .map(|r| r.recording.id.clone())
                .filter(|id| !test.contains(id.as_str()))
                .collect();
        }
        self
    }
}

/// A recording with its note events.
#[derive(Debug, Clone)]
pub struct LabeledRecording {
    pub recording: Recording,
    pub events: Vec<NoteEvent>,
}

/// A set of labelled recordings keyed by id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub items: Vec<LabeledRecording>,
}

impl Corpus {
    pub fn get(&self, id: &str) -> Option<&LabeledRecording> {
        self.items.iter().find(|r| r.recording.id == id)
    }

    /// Labelled recording for an id, erroring if absent.
    pub fn item(&self, id: &str) -> Result<&LabeledRecording> {
        self.get(id)
            .ok_or_else(|| Error::Dataset(format!("recording {id} not in corpus")))
    }

    /// Load every `<id>.wav` in `dir` with its `<id>.csv` labels.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut wavs: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .collect();
        wavs.sort();
        let mut items = Vec::with_capacity(wavs.len());
        for wav in wavs {
            let recording = load_wav(&wav)?;
            let labels = load_labels(wav.with_extension("csv"))?;
            if let Some(err) = labels.row_errors.first() {
                return Err(Error::Dataset(format!(
                    "{}: label row error at line {}: {}",
                    recording.id, err.line, err.message
                )));
            }
            items.push(LabeledRecording {
                recording,
                events: labels.events,
            });
        }
        Ok(Corpus { items })
    }
}

/// Evaluation frames for one held-out recording: centers at
/// `stride, 2*stride, ..., floor(len/stride)*stride`, each paired with the
/// labels active at its center. Silent frames are yielded with `silent` set.
pub fn sample_eval_frames<'a>(
    rec: &'a Recording,
    events: &'a [NoteEvent],
    split: &DatasetSplit,
    geom: &'a FrameGeometry,
) -> Result<impl Iterator<Item = (AudioFrame, LabelVector)> + 'a> {
    if !split.test_ids.iter().any(|id| *id == rec.id) {
        return Err(Error::Dataset(format!(
            "recording {} is not in the test split",
            rec.id
        )));
    }
    let stride = split.sampling_stride;
    let count = rec.len() / stride;
    Ok((1..=count).map(move |k| {
        let center = k * stride;
        let frame = extract_frame(rec, center, geom).expect("grid center within recording");
        (frame, labels_at(events, center))
    }))
}

/// Uniform sampler over every sample position of the training recordings.
#[derive(Debug, Clone)]
pub struct TrainSampler {
    indices: Vec<usize>,
    cumulative: Vec<u64>,
    total: u64,
}

/// Upper bound on redraws when a drawn frame is silent.
const MAX_REDRAWS: usize = 10_000;

impl TrainSampler {
    pub fn new(corpus: &Corpus, split: &DatasetSplit) -> Result<Self> {
        let mut indices = Vec::new();
        let mut cumulative = Vec::new();
        let mut total = 0u64;
        for id in &split.train_ids {
            let idx = corpus
                .items
                .iter()
                .position(|r| r.recording.id == *id)
                .ok_or_else(|| Error::Dataset(format!("train recording {id} not in corpus")))?;
            let len = corpus.items[idx].recording.len() as u64;
            if len == 0 {
                continue;
            }
            total += len;
            indices.push(idx);
            cumulative.push(total);
        }
        if total == 0 {
            return Err(Error::Dataset("training set is empty".into()));
        }
        Ok(TrainSampler {
            indices,
            cumulative,
            total,
        })
    }

    /// Corpus index and center of a uniformly drawn sample position.
    pub fn draw_position<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let u = rng.random_range(0..self.total);
        let slot = self.cumulative.partition_point(|&c| c <= u);
        let base = if slot == 0 { 0 } else { self.cumulative[slot - 1] };
        (self.indices[slot], (u - base) as usize)
    }

    /// Draw positions until `make` produces a non-silent frame.
    pub fn draw_with<R, F>(&self, rng: &mut R, mut make: F) -> Result<(AudioFrame, LabelVector)>
    where
        R: Rng + ?Sized,
        F: FnMut(usize, usize, &mut R) -> (AudioFrame, LabelVector),
    {
        for _ in 0..MAX_REDRAWS {
            let (idx, center) = self.draw_position(rng);
            let (frame, labels) = make(idx, center, rng);
            if !frame.silent {
                return Ok((frame, labels));
            }
        }
        Err(Error::Dataset(format!(
            "no non-silent training frame after {MAX_REDRAWS} draws"
        )))
    }
}

/// One uniformly random, non-silent training frame with its labels.
pub fn sample_train_frame<R: Rng + ?Sized>(
    corpus: &Corpus,
    sampler: &TrainSampler,
    geom: &FrameGeometry,
    rng: &mut R,
) -> Result<(AudioFrame, LabelVector)> {
    sampler.draw_with(rng, |idx, center, _| {
        let item = &corpus.items[idx];
        let frame = extract_frame(&item.recording, center, geom).expect("center in range");
        (frame, labels_at(&item.events, center))
    })
}

/// Parameters of the synthetic harmonic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
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
    /// Amplitude ratio between consecutive partials.
    pub partial_decay: f64,
    /// Per-note amplitude drawn from `1 +- amp_jitter`.
    pub amp_jitter: f64,
    /// Probability that a segment is a rest instead of a chord.
    pub rest_prob: f64,
    /// Peak amplitude of each rendered recording.
    pub gain: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_recordings: 36,
            min_duration_s: 3.0,
            max_duration_s: 5.0,
            min_chord_notes: 1,
            max_chord_notes: 3,
            midi_lo: 40,
            midi_hi: 90,
            min_chord_s: 0.2,
            max_chord_s: 0.6,
            n_partials: 6,
            partial_decay: 0.6,
            amp_jitter: 0.3,
            rest_prob: 0.1,
            gain: 0.8,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.n_recordings == 0 {
            return bad("n_recordings must be positive");
        }
        if !(self.min_duration_s > 0.0 && self.min_duration_s <= self.max_duration_s) {
            return bad("duration range");
        }
        if !(1 <= self.min_chord_notes && self.min_chord_notes <= self.max_chord_notes) {
            return bad("chord size range");
        }
        if self.midi_lo > self.midi_hi || self.midi_hi as usize >= N_NOTES {
            return bad("midi range");
        }
        if ((self.midi_hi - self.midi_lo + 1) as usize) < self.max_chord_notes {
            return bad("midi range smaller than chord size");
        }
        if !(self.min_chord_s > 0.0 && self.min_chord_s <= self.max_chord_s) {
            return bad("chord duration range");
        }
        if self.n_partials == 0 || !(0.0..=1.0).contains(&self.amp_jitter) {
            return bad("partials / jitter");
        }
        if !(0.0..1.0).contains(&self.rest_prob) || !(self.gain > 0.0 && self.gain <= 1.0) {
            return bad("rest_prob / gain");
        }
        Ok(())
    }
}

/// Frequency in Hz of MIDI note `n` (A4 = 69 = 440 Hz).
pub fn midi_to_hz(note: f64) -> f64 {
    440.0 * 2f64.powf((note - 69.0) / 12.0)
}

/// Ground-truth bookkeeping for one synthesized recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSegment {
    pub start_sample: usize,
    pub end_sample: usize,
    pub notes: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct SynthLog {
    /// Per recording id, its chord/rest segments in order.
    pub segments: BTreeMap<String, Vec<SynthSegment>>,
}

impl SynthLog {
    pub fn total_events(&self) -> usize {
        self.segments
            .values()
            .flat_map(|segs| segs.iter().map(|s| s.notes.len()))
            .sum()
    }

    /// Whether any note sounds at sample `t` of recording `id`.
    pub fn active_at(&self, id: &str, t: usize) -> bool {
        self.segments.get(id).is_some_and(|segs| {
            segs.iter()
                .any(|s| s.start_sample <= t && t < s.end_sample && !s.notes.is_empty())
        })
    }
}

/// Render a single steady note (all partials) of `len` samples.
pub fn render_note(note: u8, len: usize, spec: &SynthSpec, amplitude: f64, phase: f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    add_note(&mut out, 0, len, note, spec, amplitude, &vec![phase; spec.n_partials]);
    out
}

fn add_note(
    out: &mut [f64],
    start: usize,
    end: usize,
    note: u8,
    spec: &SynthSpec,
    amplitude: f64,
    phases: &[f64],
) {
    let f0 = midi_to_hz(note as f64);
    let sr = SAMPLE_RATE as f64;
    // 5 ms linear attack and release.
    let ramp = ((0.005 * sr) as usize).min((end - start) / 2).max(1);
    let mut partial_amp = amplitude;
    for (k, &phase) in phases.iter().enumerate().take(spec.n_partials) {
        let f = f0 * (k + 1) as f64;
        if f >= 0.45 * sr {
            break;
        }
        let w = std::f64::consts::TAU * f / sr;
        for (i, slot) in out[start..end].iter_mut().enumerate() {
            let env = if end - start <= 2 * ramp {
                1.0
            } else if i < ramp {
                i as f64 / ramp as f64
            } else if i >= end - start - ramp {
                (end - start - 1 - i) as f64 / ramp as f64
            } else {
                1.0
            };
            *slot += partial_amp * env * (w * (start + i) as f64 + phase).sin();
        }
        partial_amp *= spec.partial_decay;
    }
}

/// Generate recordings of random chord sequences built from harmonic tones,
/// with exact note labels and segment bookkeeping.
pub fn synth_corpus<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<(Corpus, SynthLog)> {
    spec.validate()?;
    let sr = SAMPLE_RATE as f64;
    let mut corpus = Corpus::default();
    let mut log = SynthLog::default();
    for r in 0..spec.n_recordings {
        let id = format!("synth{r:03}");
        let duration = rng.random_range(spec.min_duration_s..=spec.max_duration_s);
        let len = (duration * sr).round() as usize;
        let mut samples = vec![0.0; len];
        let mut events = Vec::new();
        let mut segments = Vec::new();
        let mut pos = 0usize;
        while pos < len {
            let seg_len = (rng.random_range(spec.min_chord_s..=spec.max_chord_s) * sr).round() as usize;
            let end = (pos + seg_len.max(1)).min(len);
            let mut notes = Vec::new();
            if !rng.random_bool(spec.rest_prob) {
                let size = rng.random_range(spec.min_chord_notes..=spec.max_chord_notes);
                while notes.len() < size {
                    let n = rng.random_range(spec.midi_lo..=spec.midi_hi);
                    if !notes.contains(&n) {
                        notes.push(n);
                    }
                }
                notes.sort_unstable();
                for &n in &notes {
                    let amp = 1.0 + rng.random_range(-spec.amp_jitter..=spec.amp_jitter);
                    let phases: Vec<f64> = (0..spec.n_partials)
                        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                        .collect();
                    add_note(&mut samples, pos, end, n, spec, amp, &phases);
                    events.push(NoteEvent {
                        start_sample: pos,
                        end_sample: end,
                        note: n,
                        instrument: 1,
                    });
                }
            }
            segments.push(SynthSegment {
                start_sample: pos,
                end_sample: end,
                notes,
            });
            pos = end;
        }
        let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            let scale = spec.gain / peak;
            samples.iter_mut().for_each(|v| *v *= scale);
        }
        corpus.items.push(LabeledRecording {
            recording: Recording::new(id.clone(), samples)?,
            events,
        });
        log.segments.insert(id, segments);
    }
    Ok((corpus, log))
}

/// Split the first `n_test` recordings off as the held-out set.
pub fn holdout_split(corpus: &Corpus, n_test: usize, sampling_stride: usize) -> Result<DatasetSplit> {
    let ids: Vec<String> = corpus.items.iter().map(|r| r.recording.id.clone()).collect();
    if n_test >= ids.len() {
        return Err(Error::Dataset(format!(
            "cannot hold out {n_test} of {} recordings",
            ids.len()
        )));
    }
    DatasetSplit::new(ids[n_test..].to_vec(), ids[..n_test].to_vec(), sampling_stride)
}

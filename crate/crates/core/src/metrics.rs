//! Pooled average precision and frame-level multi-F0 accuracy and error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{sample_eval_frames, Corpus, DatasetSplit, LabelVector};
use crate::models::ModelGraph;
use crate::{Error, Result, N_NOTES};

pub const DEFAULT_THRESHOLD: f64 = 0.4;

/// Network scores for one evaluation frame with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredFrame {
    pub scores: Vec<f64>,
    pub truth: LabelVector,
    pub recording: String,
    pub center: usize,
}

/// Step-wise average precision over `(score, truth)` pairs. Equal scores
/// form one threshold group, so the result does not depend on input order.
pub fn average_precision_pairs(pairs: &mut [(f64, bool)]) -> Result<f64> {
    let positives = pairs.iter().filter(|p| p.1).count();
    if positives == 0 {
        return Err(Error::Metric("average precision undefined without positive labels".into()));
    }
    if let Some(bad) = pairs.iter().find(|p| !p.0.is_finite()) {
        return Err(Error::Metric(format!("non-finite score {}", bad.0)));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            tp += pairs[i].1 as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

/// Average precision pooled over every (frame, note) pair.
pub fn average_precision(frames: &[ScoredFrame]) -> Result<f64> {
    let mut pairs = Vec::with_capacity(frames.len() * N_NOTES);
    for f in frames {
        check_scores(f)?;
        pairs.extend(f.scores.iter().enumerate().map(|(n, &s)| (s, f.truth.get(n))));
    }
    average_precision_pairs(&mut pairs)
}

fn check_scores(f: &ScoredFrame) -> Result<()> {
    if f.scores.len() != N_NOTES {
        return Err(Error::Shape {
            name: format!("scores of {}@{}", f.recording, f.center),
            expected: vec![N_NOTES],
            found: vec![f.scores.len()],
        });
    }
    Ok(())
}

/// Reference, system and correct note counts of a single frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameCounts {
    pub n_ref: usize,
    pub n_sys: usize,
    pub n_corr: usize,
}

impl std::ops::AddAssign for FrameCounts {
    fn add_assign(&mut self, o: Self) {
        self.n_ref += o.n_ref;
        self.n_sys += o.n_sys;
        self.n_corr += o.n_corr;
    }
}

/// Notes whose score reaches `threshold`.
pub fn predicted_notes(scores: &[f64], threshold: f64) -> LabelVector {
    let mut y = LabelVector::empty();
    for (n, &s) in scores.iter().enumerate().take(N_NOTES) {
        if s >= threshold {
            y.set(n as u8, true);
        }
    }
    y
}

pub fn frame_counts(frame: &ScoredFrame, threshold: f64) -> FrameCounts {
    let sys = predicted_notes(&frame.scores, threshold);
    FrameCounts {
        n_ref: frame.truth.count(),
        n_sys: sys.count(),
        n_corr: (sys.bits() & frame.truth.bits()).count_ones() as usize,
    }
}

/// Frame-level accuracy, error decomposition, precision and recall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScores {
    pub accuracy: f64,
    pub error: f64,
    pub substitution: f64,
    pub miss: f64,
    pub false_alarm: f64,
    pub precision: f64,
    pub recall: f64,
    /// Set when nothing was predicted and precision is reported as zero.
    pub precision_undefined: bool,
    pub totals: FrameCounts,
}

/// Error components accumulated frame by frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct ErrorSums {
    totals: FrameCounts,
    sub: usize,
    miss: usize,
    fa: usize,
}

impl ErrorSums {
    fn add(&mut self, c: FrameCounts) {
        self.totals += c;
        self.sub += c.n_ref.min(c.n_sys) - c.n_corr;
        self.miss += c.n_ref.saturating_sub(c.n_sys);
        self.fa += c.n_sys.saturating_sub(c.n_ref);
    }

    fn scores(&self) -> Result<FrameScores> {
        let t = self.totals;
        if t.n_ref == 0 {
            return Err(Error::Metric("no reference notes in the evaluated frames".into()));
        }
        let r = t.n_ref as f64;
        let union = t.n_ref + t.n_sys - t.n_corr;
        let (sub, miss, fa) = (self.sub as f64 / r, self.miss as f64 / r, self.fa as f64 / r);
        Ok(FrameScores {
            accuracy: t.n_corr as f64 / union as f64,
            error: (self.sub + self.miss + self.fa) as f64 / r,
            substitution: sub,
            miss,
            false_alarm: fa,
            precision: if t.n_sys == 0 { 0.0 } else { t.n_corr as f64 / t.n_sys as f64 },
            recall: t.n_corr as f64 / r,
            precision_undefined: t.n_sys == 0,
            totals: t,
        })
    }
}

pub fn accuracy_error(frames: &[ScoredFrame], threshold: f64) -> Result<FrameScores> {
    let mut sums = ErrorSums::default();
    for f in frames {
        check_scores(f)?;
        sums.add(frame_counts(f, threshold));
    }
    sums.scores()
}

/// Pooled evaluation results.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub average_precision: f64,
    pub accuracy: f64,
    pub error: f64,
    pub substitution: f64,
    pub miss: f64,
    pub false_alarm: f64,
    pub precision: f64,
    pub recall: f64,
    pub precision_undefined: bool,
    pub threshold: f64,
    pub frames: usize,
    pub totals: FrameCounts,
}

const REPORT_KEYS: [&str; 17] = [
    "average_precision",
    "accuracy",
    "error",
    "substitution",
    "miss",
    "false_alarm",
    "precision",
    "recall",
    "precision_defined",
    "threshold",
    "frames",
    "true_positives",
    "false_positives",
    "false_negatives",
    "n_ref",
    "n_sys",
    "n_corr",
];

impl EvalReport {
    pub fn from_frames(frames: &[ScoredFrame], threshold: f64) -> Result<Self> {
        let ap = average_precision(frames)?;
        let s = accuracy_error(frames, threshold)?;
        Ok(EvalReport {
            average_precision: ap,
            accuracy: s.accuracy,
            error: s.error,
            substitution: s.substitution,
            miss: s.miss,
            false_alarm: s.false_alarm,
            precision: s.precision,
            recall: s.recall,
            precision_undefined: s.precision_undefined,
            threshold,
            frames: frames.len(),
            totals: s.totals,
        })
    }

    pub fn true_positives(&self) -> usize {
        self.totals.n_corr
    }

    pub fn false_positives(&self) -> usize {
        self.totals.n_sys - self.totals.n_corr
    }

    pub fn false_negatives(&self) -> usize {
        self.totals.n_ref - self.totals.n_corr
    }

    /// Canonical `key = value` lines in fixed order; reals have 6 decimals.
    pub fn to_text(&self) -> String {
        let t = self.totals;
        let reals = [
            self.average_precision,
            self.accuracy,
            self.error,
            self.substitution,
            self.miss,
            self.false_alarm,
            self.precision,
            self.recall,
        ];
        let mut out = String::new();
        for (k, v) in REPORT_KEYS.iter().zip(reals) {
            writeln!(out, "{k} = {v:.6}").unwrap();
        }
        writeln!(out, "precision_defined = {}", !self.precision_undefined).unwrap();
        writeln!(out, "threshold = {:.6}", self.threshold).unwrap();
        let ints = [
            self.frames,
            self.true_positives(),
            self.false_positives(),
            self.false_negatives(),
            t.n_ref,
            t.n_sys,
            t.n_corr,
        ];
        for (k, v) in REPORT_KEYS[10..].iter().zip(ints) {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// Read the leading report block of `text`, stopping at the first
    /// `[section]` header.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Metric(format!("report line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if !REPORT_KEYS.contains(&k) {
                return Err(Error::Metric(format!("report line {}: unknown key {k:?}", i + 1)));
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&str> {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Metric(format!("report is missing {k}")))
        };
        let real = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Metric(format!("report value for {k} is not a number")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Metric(format!("report value for {k} is not a count")))
        };
        let defined: bool = get("precision_defined")?
            .parse()
            .map_err(|_| Error::Metric("precision_defined must be true or false".into()))?;
        let totals = FrameCounts {
            n_ref: int("n_ref")?,
            n_sys: int("n_sys")?,
            n_corr: int("n_corr")?,
        };
        if totals.n_corr > totals.n_ref.min(totals.n_sys)
            || int("true_positives")? != totals.n_corr
            || int("false_positives")? != totals.n_sys - totals.n_corr
            || int("false_negatives")? != totals.n_ref - totals.n_corr
        {
            return Err(Error::Metric("report counts are inconsistent".into()));
        }
        Ok(EvalReport {
            average_precision: real("average_precision")?,
            accuracy: real("accuracy")?,
            error: real("error")?,
            substitution: real("substitution")?,
            miss: real("miss")?,
            false_alarm: real("false_alarm")?,
            precision: real("precision")?,
            recall: real("recall")?,
            precision_undefined: !defined,
            threshold: real("threshold")?,
            frames: int("frames")?,
            totals,
        })
    }
}

/// Metrics restricted to one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingBreakdown {
    pub recording: String,
    pub frames: usize,
    /// `None` when the recording has no positive labels.
    pub average_precision: Option<f64>,
    /// `None` when the recording has no reference notes.
    pub scores: Option<FrameScores>,
    pub totals: FrameCounts,
}

/// A pooled report with its per-recording breakdown and scored frames.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub recordings: Vec<RecordingBreakdown>,
    pub frames: Vec<ScoredFrame>,
}

impl Evaluation {
    pub fn from_frames(frames: Vec<ScoredFrame>, threshold: f64) -> Result<Self> {
        let report = EvalReport::from_frames(&frames, threshold)?;
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<ScoredFrame>> = BTreeMap::new();
        for f in &frames {
            if !groups.contains_key(f.recording.as_str()) {
                order.push(f.recording.clone());
            }
            groups.entry(f.recording.as_str()).or_default().push(f.clone());
        }
        let recordings = order
            .iter()
            .map(|id| {
                let fs = &groups[id.as_str()];
                let mut totals = FrameCounts::default();
                fs.iter().for_each(|f| totals += frame_counts(f, threshold));
                RecordingBreakdown {
                    recording: id.clone(),
                    frames: fs.len(),
                    average_precision: average_precision(fs).ok(),
                    scores: accuracy_error(fs, threshold).ok(),
                    totals,
                }
            })
            .collect();
        Ok(Evaluation {
            report,
            recordings,
            frames,
        })
    }

    /// Mean of per-recording accuracy and error over recordings with notes.
    pub fn recording_means(&self) -> Option<(f64, f64)> {
        let scored: Vec<&FrameScores> = self.recordings.iter().filter_map(|r| r.scores.as_ref()).collect();
        if scored.is_empty() {
            return None;
        }
        let n = scored.len() as f64;
        Some((
            scored.iter().map(|s| s.accuracy).sum::<f64>() / n,
            scored.iter().map(|s| s.error).sum::<f64>() / n,
        ))
    }

    /// The pooled report followed by the recording-averaged figures and one
    /// section per recording.
    pub fn to_text(&self) -> String {
        let mut out = self.report.to_text();
        if let Some((acc, err)) = self.recording_means() {
            writeln!(out, "\n[recording_mean]\naccuracy = {acc:.6}\nerror = {err:.6}").unwrap();
        }
        for r in &self.recordings {
            writeln!(out, "\n[recording {}]", r.recording).unwrap();
            writeln!(out, "frames = {}", r.frames).unwrap();
            match r.average_precision {
                Some(ap) => writeln!(out, "average_precision = {ap:.6}").unwrap(),
                None => writeln!(out, "average_precision = undefined").unwrap(),
            }
            if let Some(s) = &r.scores {
                writeln!(out, "accuracy = {:.6}\nerror = {:.6}", s.accuracy, s.error).unwrap();
            }
            writeln!(
                out,
                "n_ref = {}\nn_sys = {}\nn_corr = {}",
                r.totals.n_ref, r.totals.n_sys, r.totals.n_corr
            )
            .unwrap();
        }
        out
    }

    /// One CSV row per frame: recording, center, truth notes, predicted
    /// notes at the report threshold, then the 128 raw scores.
    pub fn write_frame_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e: csv::Error| Error::Metric(format!("writing {}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        let mut header = vec!["recording".to_string(), "center".into(), "truth".into(), "predicted".into()];
        header.extend((0..N_NOTES).map(|n| format!("score_{n}")));
        w.write_record(&header).map_err(io)?;
        let join = |y: LabelVector| y.notes().map(|n| n.to_string()).collect::<Vec<_>>().join(" ");
        for f in &self.frames {
            let mut row = vec![
                f.recording.clone(),
                f.center.to_string(),
                join(f.truth),
                join(predicted_notes(&f.scores, self.report.threshold)),
            ];
            row.extend(f.scores.iter().map(|s| format!("{s:.9e}")));
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Score the evaluation grid of every test recording with `graph`.
pub fn score_test_set(graph: &ModelGraph, corpus: &Corpus, split: &DatasetSplit, chunk: usize) -> Result<Vec<ScoredFrame>> {
    if split.test_ids.is_empty() {
        return Err(Error::Dataset("test split is empty".into()));
    }
    let geom = graph.spec.geometry;
    let mut scored = Vec::new();
    for id in &split.test_ids {
        let item = corpus.item(id)?;
        let grid: Vec<_> = sample_eval_frames(&item.recording, &item.events, split, &geom)?.collect();
        let refs: Vec<_> = grid.iter().map(|(f, _)| f).collect();
        let scores = graph.predict_many(&refs, chunk)?;
        for ((frame, truth), s) in grid.iter().zip(scores) {
            scored.push(ScoredFrame {
                scores: s,
                truth: *truth,
                recording: id.clone(),
                center: frame.center_sample,
            });
        }
    }
    Ok(scored)
}

/// Evaluate `graph` (which should hold the averaged weights) on the test split.
pub fn evaluate(graph: &ModelGraph, corpus: &Corpus, split: &DatasetSplit, threshold: f64) -> Result<Evaluation> {
    Evaluation::from_frames(score_test_set(graph, corpus, split, 32)?, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(scores: Vec<f64>, truth: &[u8]) -> ScoredFrame {
        ScoredFrame {
            scores,
            truth: LabelVector::from_notes(truth.iter().copied()),
            recording: "r".into(),
            center: 0,
        }
    }

    fn notes_frame(truth: &[u8], pred: &[u8]) -> ScoredFrame {
        let mut s = vec![0.0; 128];
        pred.iter().for_each(|&n| s[n as usize] = 1.0);
        frame(s, truth)
    }

    #[test]
    fn hand_example() {
        let mut pairs = vec![(0.9, true), (0.8, false), (0.7, true)];
        let ap = average_precision_pairs(&mut pairs).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_ranking_and_no_positives() {
        let mut pairs = vec![(0.1, false), (0.9, true), (0.8, true), (0.2, false)];
        assert_eq!(average_precision_pairs(&mut pairs).unwrap(), 1.0);
        let mut none = vec![(0.1, false)];
        assert!(matches!(average_precision_pairs(&mut none), Err(Error::Metric(_))));
    }

    #[test]
    fn ties_form_one_step() {
        let mut a = vec![(0.5, true), (0.5, false)];
        let mut b = vec![(0.5, false), (0.5, true)];
        assert_eq!(average_precision_pairs(&mut a).unwrap(), 0.5);
        assert_eq!(average_precision_pairs(&mut b).unwrap(), 0.5);
    }

    #[test]
    fn counts_examples() {
        let f = notes_frame(&[60, 64], &[60, 67]);
        assert_eq!(
            frame_counts(&f, 0.4),
            FrameCounts {
                n_ref: 2,
                n_sys: 2,
                n_corr: 1
            }
        );
        assert_eq!(frame_counts(&notes_frame(&[], &[]), 0.4), FrameCounts::default());
        let s = accuracy_error(&[f], 0.4).unwrap();
        assert!((s.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((s.substitution, s.miss, s.false_alarm, s.error), (0.5, 0.0, 0.0, 0.5));
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let s = accuracy_error(&[notes_frame(&[1, 2], &[1, 2])], 0.4).unwrap();
        assert_eq!((s.accuracy, s.error), (1.0, 0.0));
        let s = accuracy_error(&[notes_frame(&[1, 2], &[])], 0.4).unwrap();
        assert_eq!((s.accuracy, s.error, s.miss), (0.0, 1.0, 1.0));
        assert!(s.precision_undefined);
        assert_eq!(s.precision, 0.0);
        assert!(accuracy_error(&[notes_frame(&[], &[3])], 0.4).is_err());
    }

    #[test]
    fn threshold_is_inclusive() {
        let mut s = vec![0.0; 128];
        s[10] = 0.4;
        assert_eq!(frame_counts(&frame(s, &[10]), 0.4).n_corr, 1);
    }

    #[test]
    fn report_round_trip() {
        let frames = vec![notes_frame(&[60, 64], &[60, 67]), notes_frame(&[50], &[])];
        let ev = Evaluation::from_frames(frames, DEFAULT_THRESHOLD).unwrap();
        let text = ev.to_text();
        let parsed = EvalReport::parse(&text).unwrap();
        assert_eq!(parsed.to_text(), ev.report.to_text());
        assert_eq!(parsed.totals, ev.report.totals);
        assert!(text.contains("[recording r]"));
        assert!(EvalReport::parse("bogus = 1\n").is_err());
    }

    #[test]
    fn breakdown_sums_to_pool() {
        let mut frames = vec![notes_frame(&[60, 64], &[60, 67]), notes_frame(&[50], &[50, 51])];
        frames[1].recording = "q".into();
        frames.push(notes_frame(&[], &[9]));
        let ev = Evaluation::from_frames(frames, 0.4).unwrap();
        let mut sum = FrameCounts::default();
        ev.recordings.iter().for_each(|r| sum += r.totals);
        assert_eq!(sum, ev.report.totals);
        assert_eq!(ev.recordings.iter().map(|r| r.frames).sum::<usize>(), 3);
    }
}

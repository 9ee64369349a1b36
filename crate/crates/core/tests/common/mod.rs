//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

use std::f64::consts::TAU;

use frametrans_core::audio::{AudioFrame, FrameGeometry, Recording};
use frametrans_core::augment::{pitch_shift, ShiftSpec};
use frametrans_core::autodiff::Tensor;
use frametrans_core::dataset::{midi_to_hz, render_note, LabelVector, SynthSpec};
use frametrans_core::filterbank::{apply, Filterbank, FilterbankSpec};
use frametrans_core::metrics::ScoredFrame;
use frametrans_core::models::{build, Family, ModelGraph, ModelSpec};
use frametrans_core::train::{loss, LossKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Average precision by brute force: for every distinct score `t`, the
/// precision and recall of predicting `score >= t`, summed step-wise in
/// descending threshold order.
pub fn brute_force_ap(pairs: &[(f64, bool)]) -> f64 {
    let mut thresholds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let positives = pairs.iter().filter(|p| p.1).count() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let selected: Vec<_> = pairs.iter().filter(|p| p.0 >= t).collect();
        let tp = selected.iter().filter(|p| p.1).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / selected.len() as f64;
        prev_recall = recall;
    }
    ap
}

/// Accuracy and total error computed from explicit note sets.
pub fn set_based_acc_etot(frames: &[(Vec<u8>, Vec<u8>)]) -> (f64, f64) {
    use std::collections::BTreeSet;
    let (mut corr, mut union, mut nref) = (0usize, 0usize, 0usize);
    let (mut sub, mut miss, mut fa) = (0usize, 0usize, 0usize);
    for (truth, pred) in frames {
        let t: BTreeSet<u8> = truth.iter().copied().collect();
        let p: BTreeSet<u8> = pred.iter().copied().collect();
        let c = t.intersection(&p).count();
        corr += c;
        union += t.union(&p).count();
        nref += t.len();
        sub += t.len().min(p.len()) - c;
        miss += t.len().saturating_sub(p.len());
        fa += p.len().saturating_sub(t.len());
    }
    let r = nref as f64;
    (corr as f64 / union as f64, (sub + miss + fa) as f64 / r)
}

pub fn random_note_set<R: Rng>(rng: &mut R, max: usize) -> Vec<u8> {
    let n = rng.random_range(0..=max);
    let mut v: Vec<u8> = (0..n).map(|_| rng.random_range(0..128u8)).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// A scored frame whose scores are 1 on `pred` and 0 elsewhere.
pub fn binary_frame(truth: &[u8], pred: &[u8]) -> ScoredFrame {
    let mut scores = vec![0.0; 128];
    pred.iter().for_each(|&n| scores[n as usize] = 1.0);
    ScoredFrame {
        scores,
        truth: LabelVector::from_notes(truth.iter().copied()),
        recording: "oracle".into(),
        center: 0,
    }
}

pub fn sine_recording(freq: f64, len: usize, amp: f64) -> Recording {
    let samples = (0..len)
        .map(|i| amp * (TAU * freq * i as f64 / 44_100.0).sin())
        .collect();
    Recording::new(format!("sine{freq}"), samples).unwrap()
}

/// Argmax channel of `bank` for the frame centered in `rec`.
pub fn argmax_of(bank: &Filterbank, rec: &Recording, geom: &FrameGeometry, shift: ShiftSpec) -> usize {
    let frame = pitch_shift(rec, rec.len() / 2, geom, shift);
    apply(bank, &frame, geom).unwrap().argmax_channel()
}

/// A single steady synthetic note with the corpus' harmonic recipe.
pub fn note_recording(note: u8, len: usize) -> Recording {
    Recording::new(format!("note{note}"), render_note(note, len, &SynthSpec::default(), 0.5, 0.0)).unwrap()
}

/// Fraction of total (uncompressed) energy that lands three or more
/// channels from the peak, averaged over regions.
pub fn off_peak_leakage(windowed: bool) -> f64 {
    let geom = FrameGeometry::default();
    let spec = FilterbankSpec {
        windowed,
        compress: false,
        ..FilterbankSpec::stft()
    };
    let bank = Filterbank::from_spec(&spec).unwrap();
    // Halfway between bins 100 and 101.
    let freq = 100.5 * 44_100.0 / 4096.0;
    let rec = sine_recording(freq, 40_000, 0.5);
    let spec = apply(&bank, &frametrans_core::audio::extract_frame(&rec, 20_000, &geom).unwrap(), &geom).unwrap();
    let means = spec.channel_means();
    let peak = spec.argmax_channel();
    let total: f64 = means.iter().sum();
    let off: f64 = means
        .iter()
        .enumerate()
        .filter(|(k, _)| k.abs_diff(peak) >= 3)
        .map(|(_, v)| v)
        .sum();
    off / total
}

pub fn noise_frames<R: Rng>(rng: &mut R, n: usize, len: usize) -> Vec<AudioFrame> {
    (0..n)
        .map(|i| AudioFrame::normalize((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), format!("noise{i}"), 0))
        .collect()
}

fn outputs(graph: &ModelGraph, frames: &[&AudioFrame]) -> Vec<f64> {
    graph.forward(frames).unwrap().output().data().to_vec()
}

/// `L(up) - L(down)` for the summed per-example MSE loss, evaluated as
/// `sum (up - down) (up + down - 2t) / n`. The identity is exact; this form
/// avoids cancelling two nearly equal loss values.
fn mse_difference(up: &[f64], down: &[f64], labels: &[LabelVector]) -> f64 {
    up.chunks_exact(128)
        .zip(down.chunks_exact(128))
        .zip(labels)
        .map(|((u, d), y)| {
            let t = y.to_targets();
            (0..128).map(|k| (u[k] - d[k]) * (u[k] + d[k] - 2.0 * t[k])).sum::<f64>() / 128.0
        })
        .sum()
}

/// Worst relative error between analytic and central-difference gradients
/// over every entry of every trainable parameter.
pub struct GradCheck {
    pub family: Family,
    pub seed: u64,
    pub entries: usize,
    pub worst: f64,
    pub worst_param: String,
}

pub fn gradient_check(family: Family, seed: u64) -> GradCheck {
    gradient_check_spec(&ModelSpec::reduced(family), seed)
}

pub fn gradient_check_spec(spec: &ModelSpec, seed: u64) -> GradCheck {
    const H: f64 = 1e-6;
    let mut r = rng(seed);
    let family = spec.family;
    let mut graph = build(spec, &mut r).unwrap();
    // Random readout so every layer receives a non-zero gradient, scaled so
    // that scores (and hence the loss) stay O(1): the central difference's
    // rounding error grows with the loss magnitude.
    for p in &mut graph.params {
        if p.name == "output.weight" || p.name.ends_with("bias") {
            let scale = 0.05 / (*p.value.shape().last().unwrap() as f64).sqrt();
            p.value.data_mut().iter_mut().for_each(|v| *v = r.random_range(-scale..scale));
        }
    }
    let frames = noise_frames(&mut r, 2, spec.geometry.frame_len);
    let refs: Vec<&AudioFrame> = frames.iter().collect();
    let labels: Vec<LabelVector> = (0..2).map(|_| LabelVector::from_bits(r.random::<u128>() & r.random::<u128>())).collect();

    graph.zero_grads();
    let tape = graph.forward(&refs).unwrap();
    let grad: Vec<f64> = tape
        .output()
        .data()
        .chunks_exact(128)
        .zip(&labels)
        .flat_map(|(p, y)| loss(LossKind::Mse, p, y).1)
        .collect();
    graph.backward(&tape, &Tensor::from_vec(&[2, 128], grad).unwrap()).unwrap();

    let mut out = GradCheck {
        family,
        seed,
        entries: 0,
        worst: 0.0,
        worst_param: String::new(),
    };
    let mut probe = graph.clone();
    for pi in 0..graph.params.len() {
        if !graph.params[pi].trainable {
            continue;
        }
        for i in 0..graph.params[pi].value.len() {
            let orig = graph.params[pi].value.data()[i];
            probe.params[pi].value.data_mut()[i] = orig + H;
            let up = outputs(&probe, &refs);
            probe.params[pi].value.data_mut()[i] = orig - H;
            let down = outputs(&probe, &refs);
            probe.params[pi].value.data_mut()[i] = orig;
            let numeric = mse_difference(&up, &down, &labels) / (2.0 * H);
            let analytic = graph.params[pi].grad.data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            out.entries += 1;
            if rel > out.worst {
                out.worst = rel;
                out.worst_param = format!("{}[{i}]", graph.params[pi].name);
            }
        }
    }
    out
}

/// Max deviation of stride-1 frequency-conv equivariance on random tensors.
pub fn freq_conv_equivariance(seed: u64, shift: usize) -> f64 {
    use frametrans_core::autodiff::freq_conv_forward;
    let mut r = rng(seed);
    let (regions, freq, ch, nf, height) = (5, 96, 2, 4, 16);
    let x: Vec<f64> = (0..regions * freq * ch).map(|_| r.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..nf * height * ch).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut shifted = vec![0.0; x.len()];
    for t in 0..regions {
        for q in shift..freq {
            for c in 0..ch {
                shifted[(t * freq + q) * ch + c] = x[(t * freq + q - shift) * ch + c];
            }
        }
    }
    let input = Tensor::from_vec(&[regions, freq, ch], x).unwrap();
    let moved = Tensor::from_vec(&[regions, freq, ch], shifted).unwrap();
    let filters = Tensor::from_vec(&[nf, height, ch], w).unwrap();
    let a = freq_conv_forward(&input, &filters, 1).unwrap();
    let b = freq_conv_forward(&moved, &filters, 1).unwrap();
    let positions = freq - height + 1;
    let mut dev = 0.0f64;
    for t in 0..regions {
        // Base positions whose shifted partner reads no zero padding.
        for p in 0..positions - shift {
            for f in 0..nf {
                let base = a.data()[(t * positions + p) * nf + f];
                let other = b.data()[(t * positions + p + shift) * nf + f];
                dev = dev.max((base - other).abs());
            }
        }
    }
    dev
}

/// Frequency in Hz of a MIDI note.
pub fn hz(note: u8) -> f64 {
    midi_to_hz(note as f64)
}

/// A small synthetic corpus and a split holding out two recordings.
pub fn small_corpus(seed: u64) -> (frametrans_core::dataset::Corpus, frametrans_core::dataset::DatasetSplit) {
    use frametrans_core::dataset::{holdout_split, synth_corpus};
    let spec = SynthSpec {
        n_recordings: 8,
        min_duration_s: 1.0,
        max_duration_s: 1.5,
        ..SynthSpec::default()
    };
    let (corpus, _) = synth_corpus(&spec, &mut rng(seed)).unwrap();
    let split = holdout_split(&corpus, 2, 2048).unwrap();
    (corpus, split)
}

/// Train `spec` for `cfg.steps` steps and return the final trainer state.
pub fn train_quietly(
    spec: &ModelSpec,
    cfg: frametrans_core::train::TrainConfig,
    corpus: &frametrans_core::dataset::Corpus,
    split: &frametrans_core::dataset::DatasetSplit,
) -> frametrans_core::train::TrainerState {
    use frametrans_core::train::{init_rng, train, TrainerState};
    let graph = build(spec, &mut init_rng(cfg.seed)).unwrap();
    let mut state = TrainerState::new(graph, cfg).unwrap();
    train(&mut state, corpus, split, |_, _| Ok(())).unwrap();
    state
}

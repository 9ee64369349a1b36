//! Minibatch SGD with momentum and exponential iterate averaging.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{extract_frame, AudioFrame, FrameGeometry};
use crate::augment::{pitch_shift, random_shift, shift_labels, ShiftSpec};
use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::dataset::{labels_at, Corpus, DatasetSplit, LabelVector, TrainSampler};
use crate::models::{Family, ModelGraph};
use crate::{Error, Result, N_NOTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Squared error against 0/1 targets, averaged over the 128 notes.
    Mse,
    /// Binary cross-entropy on sigmoid outputs, averaged over the 128 notes.
    SigmoidXent,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::SigmoidXent => "sigmoid_xent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "sigmoid_xent" => Ok(LossKind::SigmoidXent),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

/// Per-note loss value and gradient with respect to the raw scores.
pub fn loss(kind: LossKind, pred: &[f64], y: &LabelVector) -> (f64, Vec<f64>) {
    let n = N_NOTES as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let t = y.get(i) as u8 as f64;
            match kind {
                LossKind::Mse => {
                    value += (p - t) * (p - t);
                    2.0 * (p - t) / n
                }
                LossKind::SigmoidXent => {
                    // log(1 + e^p) - t p, evaluated stably.
                    value += p.max(0.0) + (-p.abs()).exp().ln_1p() - t * p;
                    (sigmoid(p) - t) / n
                }
            }
        })
        .collect();
    (value / n, grad)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A reasonable starting learning rate for each family under MSE loss.
pub fn default_learning_rate(family: Family) -> f64 {
    match family {
        Family::TwoLayer => 5e-6,
        Family::ThreeLayer => 1e-4,
        Family::TranslationInvariant => 1e-4,
        Family::ChannelConv => 1e-4,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied once per epoch.
    pub lr_decay: f64,
    pub epoch_steps: u64,
    pub avg_decay: f64,
    pub steps: u64,
    pub seed: u64,
    pub loss: LossKind,
    pub pitch_shift: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Threads assembling each batch; results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 150,
            momentum: 0.95,
            learning_rate: default_learning_rate(Family::TranslationInvariant),
            lr_decay: 1.0,
            epoch_steps: 1000,
            avg_decay: 2e-4,
            steps: 10_000,
            seed: 0,
            loss: LossKind::Mse,
            pitch_shift: false,
            checkpoint_every: 1000,
            log_every: 100,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.avg_decay > 0.0 && self.avg_decay <= 1.0) {
            return bad("avg_decay must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.epoch_steps == 0 || self.log_every == 0 || self.workers == 0 {
            return bad("epoch_steps, log_every and workers must be positive");
        }
        if self.batch_size > 1 << 16 {
            return bad("batch_size above 65536");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: u64) -> f64 {
        self.learning_rate * self.lr_decay.powi((step / self.epoch_steps) as i32)
    }
}

/// How training examples are pitch-shifted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shifter {
    None,
    Random,
    Fixed(ShiftSpec),
}

/// One assembled training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub frame: AudioFrame,
    pub labels: LabelVector,
    pub shift: ShiftSpec,
}

/// Random stream for example `index` of batch `step`. Positions and shifts
/// come from separate streams so toggling augmentation leaves the drawn
/// positions unchanged.
fn example_rng(seed: u64, step: u64, index: usize, shift: bool) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 17) | ((index as u64) << 1) | shift as u64);
    rng
}

/// Generator for parameter initialization, separate from every example stream.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Draw example `index` of batch `step`, redrawing silent frames.
pub fn draw_example(
    corpus: &Corpus,
    sampler: &TrainSampler,
    geom: &FrameGeometry,
    seed: u64,
    step: u64,
    index: usize,
    shifter: Shifter,
) -> Result<Example> {
    let mut pos_rng = example_rng(seed, step, index, false);
    let mut shift_rng = example_rng(seed, step, index, true);
    let mut shift = ShiftSpec::none();
    let (frame, labels) = sampler.draw_with(&mut pos_rng, |idx, center, _| {
        let item = &corpus.items[idx];
        shift = match shifter {
            Shifter::None => ShiftSpec::none(),
            Shifter::Random => random_shift(&mut shift_rng),
            Shifter::Fixed(s) => s,
        };
        let labels = labels_at(&item.events, center);
        if shifter == Shifter::None {
            let frame = extract_frame(&item.recording, center, geom).expect("sampled center in range");
            (frame, labels)
        } else {
            (
                pitch_shift(&item.recording, center, geom, shift),
                shift_labels(labels, shift.integral()),
            )
        }
    })?;
    Ok(Example { frame, labels, shift })
}

/// All examples of batch `step`, assembled by `workers` threads.
pub fn draw_batch(
    corpus: &Corpus,
    sampler: &TrainSampler,
    geom: &FrameGeometry,
    cfg: &TrainConfig,
    step: u64,
    shifter: Shifter,
) -> Result<Vec<Example>> {
    let draw = |i| draw_example(corpus, sampler, geom, cfg.seed, step, i, shifter);
    let workers = cfg.workers.min(cfg.batch_size);
    if workers <= 1 {
        return (0..cfg.batch_size).map(draw).collect();
    }
    let per = cfg.batch_size.div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let range = (w * per)..((w + 1) * per).min(cfg.batch_size);
                s.spawn(move || range.map(draw).collect::<Result<Vec<_>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(cfg.batch_size);
        for h in handles {
            out.extend(h.join().expect("batch worker panicked")?);
        }
        Ok(out)
    })
}

/// Live parameters, optimizer buffers and the step counter.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub graph: ModelGraph,
    pub velocity: Vec<Tensor>,
    /// Exponential moving average of the iterates; used for evaluation.
    pub averaged: Vec<Tensor>,
    pub step: u64,
    pub config: TrainConfig,
}

impl TrainerState {
    pub fn new(graph: ModelGraph, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let velocity = graph.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let averaged = graph.params.iter().map(|p| p.value.clone()).collect();
        Ok(TrainerState {
            graph,
            velocity,
            averaged,
            step: 0,
            config,
        })
    }

    /// One optimizer step on `batch`; returns the mean loss.
    pub fn step(&mut self, batch: &[Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let step = self.step;
        let ids = || {
            batch
                .iter()
                .map(|e| format!("{}@{}", e.frame.source_id, e.frame.center_sample))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let numeric = |message: String| Error::Numeric { step, message };
        self.graph.zero_grads();
        let frames: Vec<&AudioFrame> = batch.iter().map(|e| &e.frame).collect();
        let tape = self.graph.forward(&frames).map_err(|e| match e {
            Error::NonFinite { layer } => numeric(format!("non-finite output of layer {layer}; batch {}", ids())),
            other => other,
        })?;
        let b = batch.len() as f64;
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(batch.len() * N_NOTES);
        for (e, pred) in batch.iter().zip(tape.output().data().chunks_exact(N_NOTES)) {
            let (v, g) = loss(self.config.loss, pred, &e.labels);
            total += v;
            grad.extend(g.into_iter().map(|x| x / b));
        }
        let mean_loss = total / b;
        if !mean_loss.is_finite() {
            return Err(numeric(format!("non-finite loss {mean_loss}; batch {}", ids())));
        }
        let grad = Tensor::from_vec(&[batch.len(), N_NOTES], grad)?;
        self.graph.backward(&tape, &grad)?;
        for p in &self.graph.params {
            if !p.grad.all_finite() {
                return Err(numeric(format!("non-finite gradient for {}; batch {}", p.name, ids())));
            }
        }
        self.apply_gradients();
        Ok(mean_loss)
    }

    /// Momentum update and averaging from the accumulated gradients.
    pub fn apply_gradients(&mut self) {
        let lr = self.config.learning_rate_at(self.step);
        let (rho, gamma) = (self.config.momentum, self.config.avg_decay);
        for ((p, v), a) in self.graph.params.iter_mut().zip(&mut self.velocity).zip(&mut self.averaged) {
            if !p.trainable {
                continue;
            }
            let g = p.grad.data();
            let vs = v.data_mut();
            let theta = p.value.data_mut();
            let avg = a.data_mut();
            for i in 0..g.len() {
                vs[i] = rho * vs[i] + g[i];
                theta[i] -= lr * vs[i];
                avg[i] = (1.0 - gamma) * avg[i] + gamma * theta[i];
            }
        }
        self.step += 1;
    }

    /// A copy of the graph carrying the averaged weights.
    pub fn averaged_graph(&self) -> ModelGraph {
        let mut g = self.graph.clone();
        for (p, a) in g.params.iter_mut().zip(&self.averaged) {
            p.value = a.clone();
        }
        g
    }

    pub fn to_checkpoint(&self, config_text: &str) -> Checkpoint {
        let mut tensors = Vec::with_capacity(3 * self.graph.params.len());
        for ((p, v), a) in self.graph.params.iter().zip(&self.velocity).zip(&self.averaged) {
            tensors.push((p.name.clone(), p.value.clone()));
            tensors.push((format!("{}@velocity", p.name), v.clone()));
            tensors.push((format!("{}@averaged", p.name), a.clone()));
        }
        Checkpoint {
            tensors,
            config: config_text.to_string(),
            step: self.step,
        }
    }

    /// Resume from `ckpt` onto a freshly built `graph` of the same spec.
    pub fn from_checkpoint(mut graph: ModelGraph, config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let fetch = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = ckpt
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Shape {
                    name,
                    expected: shape.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            Ok(t.clone())
        };
        let mut velocity = Vec::new();
        let mut averaged = Vec::new();
        for p in &mut graph.params {
            let shape = p.value.shape().to_vec();
            p.value = fetch(p.name.clone(), &shape)?;
            velocity.push(fetch(format!("{}@velocity", p.name), &shape)?);
            averaged.push(fetch(format!("{}@averaged", p.name), &shape)?);
        }
        Ok(TrainerState {
            graph,
            velocity,
            averaged,
            step: ckpt.step,
            config,
        })
    }
}

/// Copy checkpointed weights into `graph`: the averaged iterates when
/// `averaged` is set, otherwise the live ones.
pub fn load_params(graph: &mut ModelGraph, ckpt: &Checkpoint, averaged: bool) -> Result<()> {
    for p in &mut graph.params {
        let name = if averaged {
            format!("{}@averaged", p.name)
        } else {
            p.name.clone()
        };
        let t = ckpt
            .tensor(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Shape {
                name,
                expected: p.value.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        p.value = t.clone();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    /// Mean loss over the steps since the previous log event.
    Log {
        step: u64,
        loss: f64,
        learning_rate: f64,
        elapsed_s: f64,
    },
    /// A checkpoint should be written for the current state.
    Checkpoint { step: u64 },
}

impl TrainEvent {
    /// The training-log line for a `Log` event.
    pub fn log_line(&self) -> Option<String> {
        match self {
            TrainEvent::Log {
                step,
                loss,
                learning_rate,
                elapsed_s,
            } => Some(format!("step={step} loss={loss:.6e} lr={learning_rate:e} elapsed_s={elapsed_s:.2}")),
            TrainEvent::Checkpoint { .. } => None,
        }
    }
}

/// Train from `state.step` up to `state.config.steps`, reporting progress
/// through `on_event`. The final step always emits a checkpoint event.
pub fn train<F>(state: &mut TrainerState, corpus: &Corpus, split: &DatasetSplit, mut on_event: F) -> Result<()>
where
    F: FnMut(&TrainerState, &TrainEvent) -> Result<()>,
{
    let cfg = state.config;
    let sampler = TrainSampler::new(corpus, split)?;
    let geom = state.graph.spec.geometry;
    let shifter = if cfg.pitch_shift { Shifter::Random } else { Shifter::None };
    let started = Instant::now();
    let (mut window_loss, mut window_steps) = (0.0, 0u64);
    while state.step < cfg.steps {
        let batch = draw_batch(corpus, &sampler, &geom, &cfg, state.step, shifter)?;
        let lr = cfg.learning_rate_at(state.step);
        window_loss += state.step(&batch)?;
        window_steps += 1;
        let step = state.step;
        if step % cfg.log_every == 0 || step == cfg.steps {
            let event = TrainEvent::Log {
                step,
                loss: window_loss / window_steps as f64,
                learning_rate: lr,
                elapsed_s: started.elapsed().as_secs_f64(),
            };
            on_event(state, &event)?;
            (window_loss, window_steps) = (0.0, 0);
        }
        if step == cfg.steps || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            on_event(state, &TrainEvent::Checkpoint { step })?;
        }
    }
    Ok(())
}

/// Parse a training-log line back into `(step, loss)`.
pub fn parse_log_line(line: &str) -> Option<(u64, f64)> {
    let mut step = None;
    let mut loss = None;
    for field in line.split_whitespace() {
        match field.split_once('=') {
            Some(("step", v)) => step = v.parse().ok(),
            Some(("loss", v)) => loss = v.parse().ok(),
            _ => {}
        }
    }
    Some((step?, loss?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Parameter;
    use crate::models::{build, ModelSpec};

    fn scalar_state(rho: f64, lr: f64, theta: f64) -> TrainerState {
        let mut graph = build(&ModelSpec::reduced(Family::TwoLayer), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut p = Parameter::new("theta", &[1]);
        p.value.data_mut()[0] = theta;
        graph.params = vec![p];
        let cfg = TrainConfig {
            momentum: rho,
            learning_rate: lr,
            ..TrainConfig::default()
        };
        TrainerState::new(graph, cfg).unwrap()
    }

    fn set_grad(s: &mut TrainerState, g: f64) {
        s.graph.params[0].grad.data_mut()[0] = g;
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = scalar_state(0.0, 0.1, 1.0);
        set_grad(&mut s, 2.0);
        s.apply_gradients();
        assert!((s.graph.params[0].value.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn momentum_geometric_series() {
        let mut s = scalar_state(0.95, 1.0, 0.0);
        for k in 1..=50 {
            set_grad(&mut s, 1.0);
            s.apply_gradients();
            let want = (1.0 - 0.95f64.powi(k)) / 0.05;
            assert!((s.velocity[0].data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn averaging_definition_and_contraction() {
        let mut s = scalar_state(0.0, 0.5, 3.0);
        set_grad(&mut s, 1.0);
        s.apply_gradients();
        let theta1 = s.graph.params[0].value.data()[0];
        assert_eq!(theta1, 2.5);
        assert!((s.averaged[0].data()[0] - ((1.0 - 2e-4) * 3.0 + 2e-4 * theta1)).abs() < 1e-15);
        let gap0 = s.averaged[0].data()[0] - theta1;
        for _ in 0..100 {
            set_grad(&mut s, 0.0);
            s.apply_gradients();
        }
        let gap = s.averaged[0].data()[0] - theta1;
        assert!((gap - gap0 * (1.0 - 2e-4f64).powi(100)).abs() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let y = LabelVector::from_notes([5]);
        let t = y.to_targets();
        let (v, g) = loss(LossKind::Mse, &t, &y);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let (v, _) = loss(LossKind::Mse, &[0.0; 128], &y);
        assert_eq!(v, 1.0 / 128.0);
    }

    #[test]
    fn loss_gradients_match_differences() {
        let y = LabelVector::from_notes([3, 70, 127]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred: Vec<f64> = (0..128).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
        for kind in [LossKind::Mse, LossKind::SigmoidXent] {
            let (_, g) = loss(kind, &pred, &y);
            for i in [0, 3, 64, 127] {
                let h = 1e-6;
                let mut up = pred.clone();
                up[i] += h;
                let mut dn = pred.clone();
                dn[i] -= h;
                let num = (loss(kind, &up, &y).0 - loss(kind, &dn, &y).0) / (2.0 * h);
                assert!((num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-8) < 1e-6);
            }
        }
    }

    #[test]
    fn lr_decays_per_epoch() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            lr_decay: 0.5,
            epoch_steps: 10,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(9), 1.0);
        assert_eq!(cfg.learning_rate_at(10), 0.5);
        assert_eq!(cfg.learning_rate_at(25), 0.25);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { avg_decay: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn log_line_round_trip() {
        let e = TrainEvent::Log {
            step: 100,
            loss: 0.0123,
            learning_rate: 1e-3,
            elapsed_s: 1.5,
        };
        assert_eq!(parse_log_line(&e.log_line().unwrap()), Some((100, 0.0123)));
    }
}

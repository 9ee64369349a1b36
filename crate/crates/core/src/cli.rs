//! The `frametrans` command line: synth, train, eval and predict.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{extract_frame, load_wav, write_wav};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{holdout_split, labels_to_csv, load_labels, synth_corpus, Corpus, DatasetSplit, LabeledRecording};
use crate::metrics::{predicted_notes, score_test_set, Evaluation};
use crate::models::{build, ModelGraph};
use crate::train::{self, LossKind, TrainEvent, TrainerState};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "frametrans", version, about = "Frame-level polyphonic music transcription")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus (WAV + label CSV pairs) and its split file.
    Synth(SynthArgs),
    /// Train a model, writing checkpoints and a training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Score the evaluation grid of one WAV file.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run config (TOML). Defaults apply to absent keys.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory (overrides `paths.data_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Checkpoint directory (overrides `paths.checkpoint_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Enable pitch-shift augmentation.
    #[arg(long, conflicts_with = "no_augment")]
    pub augment: bool,
    /// Disable pitch-shift augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Threads assembling each batch.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Config overrides applied on top of the checkpoint's own config.
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split file, e.g. configs/splits/musicnet_extended.txt.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Report file (overrides `paths.report`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also dump every scored frame to this CSV.
    #[arg(long)]
    pub frames_csv: Option<PathBuf>,
    /// Evaluate the live weights instead of the averaged iterates.
    #[arg(long)]
    pub live: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub wav: PathBuf,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Grid stride in samples.
    #[arg(long, default_value_t = 512)]
    pub stride: usize,
    /// Append the notes whose score reaches this threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub live: bool,
}

fn load_config(args: &ConfigArgs, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&args.config, base) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(b)) => b,
        (None, None) => RunConfig::default(),
    };
    for o in &args.overrides {
        cfg.set_override(o)?;
    }
    Ok(cfg)
}

fn set(cfg: &mut RunConfig, key: &str, value: impl std::fmt::Display) -> Result<()> {
    cfg.set_override(&format!("{key}={value}"))
}

fn set_path(cfg: &mut RunConfig, key: &str, value: &Option<PathBuf>) -> Result<()> {
    match value {
        Some(p) => set(cfg, key, format!("{:?}", p.display().to_string())),
        None => Ok(()),
    }
}

fn require<'a>(value: &'a str, what: &str) -> Result<&'a Path> {
    if value.is_empty() {
        return Err(Error::Config(format!("{what} is not set")));
    }
    Ok(Path::new(value))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let data = require(&cfg.paths.data_dir, "paths.data_dir")?;
    if cfg.paths.labels_dir.is_empty() {
        return Corpus::load_dir(data);
    }
    let mut corpus = Corpus::default();
    let labels = Path::new(&cfg.paths.labels_dir);
    let mut wavs: Vec<_> = fs::read_dir(data)
        .map_err(|e| Error::io(data, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    wavs.sort();
    for wav in wavs {
        let recording = load_wav(&wav)?;
        let file = load_labels(labels.join(format!("{}.csv", recording.id)))?;
        if let Some(e) = file.row_errors.first() {
            return Err(Error::Dataset(format!("{}: label line {}: {}", recording.id, e.line, e.message)));
        }
        corpus.items.push(LabeledRecording {
            recording,
            events: file.events,
        });
    }
    Ok(corpus)
}

fn load_split(cfg: &RunConfig, corpus: &Corpus) -> Result<DatasetSplit> {
    let split = if cfg.paths.split.is_empty() {
        let data = require(&cfg.paths.data_dir, "paths.data_dir")?;
        DatasetSplit::load(data.join("split.txt"))?
    } else {
        DatasetSplit::load(&cfg.paths.split)?
    };
    Ok(split.resolve(corpus))
}

/// Build the graph described by `cfg` and load checkpoint weights into it.
pub fn graph_from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint, averaged: bool) -> Result<ModelGraph> {
    let mut graph = build(&cfg.model_spec()?, &mut ChaCha8Rng::seed_from_u64(0))?;
    graph.output_sigmoid = cfg.train_config()?.loss == LossKind::SigmoidXent;
    train::load_params(&mut graph, ckpt, averaged)?;
    Ok(graph)
}

fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    RunConfig::parse(&ckpt.config).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&args.cfg, None)?;
    set_path(&mut cfg, "paths.data_dir", &args.out)?;
    if let Some(s) = args.seed {
        set(&mut cfg, "synth.seed", s)?;
    }
    let dir = require(&cfg.paths.data_dir, "paths.data_dir")?.to_path_buf();
    ensure_dir(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.synth.seed);
    let (corpus, log) = synth_corpus(&cfg.synth_spec(), &mut rng)?;
    for item in &corpus.items {
        let id = &item.recording.id;
        write_wav(dir.join(format!("{id}.wav")), &item.recording)?;
        let csv = dir.join(format!("{id}.csv"));
        fs::write(&csv, labels_to_csv(&item.events)).map_err(|e| Error::io(&csv, e))?;
    }
    let split = holdout_split(&corpus, cfg.synth.n_test, cfg.synth.sampling_stride)?;
    let split_path = dir.join("split.txt");
    fs::write(&split_path, split.to_text()).map_err(|e| Error::io(&split_path, e))?;
    let events: usize = corpus.items.iter().map(|i| i.events.len()).sum();
    writeln!(
        out,
        "recordings={} events={} logged_events={} test={} dir={}",
        corpus.items.len(),
        events,
        log.total_events(),
        split.test_ids.len(),
        dir.display()
    )
    .map_err(|e| Error::io("stdout", e))
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&args.cfg, None)?;
    set_path(&mut cfg, "paths.data_dir", &args.data)?;
    set_path(&mut cfg, "paths.split", &args.split)?;
    set_path(&mut cfg, "paths.checkpoint_dir", &args.out)?;
    if let Some(s) = args.steps {
        set(&mut cfg, "train.steps", s)?;
    }
    if let Some(s) = args.seed {
        set(&mut cfg, "train.seed", s)?;
    }
    if let Some(w) = args.workers {
        set(&mut cfg, "train.workers", w)?;
    }
    if args.augment || args.no_augment {
        set(&mut cfg, "augment.pitch_shift", args.augment)?;
    }
    let ckpt_dir = require(&cfg.paths.checkpoint_dir, "paths.checkpoint_dir")?.to_path_buf();
    let corpus = load_corpus(&cfg)?;
    let split = load_split(&cfg, &corpus)?;
    ensure_dir(&ckpt_dir)?;

    let spec = cfg.model_spec()?;
    let tcfg = cfg.train_config()?;
    let mut graph = build(&spec, &mut train::init_rng(tcfg.seed))?;
    graph.output_sigmoid = tcfg.loss == LossKind::SigmoidXent;
    let mut state = match &args.resume {
        Some(path) => TrainerState::from_checkpoint(graph, tcfg, &Checkpoint::load(path)?)?,
        None => TrainerState::new(graph, tcfg)?,
    };
    let config_text = cfg.to_text();
    let log_path = ckpt_dir.join("train.log");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    writeln!(
        out,
        "training {} ({} trainable parameters) for {} steps",
        spec.family.as_str(),
        state.graph.trainable_param_count(),
        tcfg.steps
    )
    .map_err(|e| Error::io("stdout", e))?;
    train::train(&mut state, &corpus, &split, |s, event| {
        match event {
            TrainEvent::Log { .. } => {
                let line = event.log_line().expect("log event");
                writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
                writeln!(out, "{line}").map_err(|e| Error::io("stdout", e))?;
            }
            TrainEvent::Checkpoint { step } => {
                let ck = s.to_checkpoint(&config_text);
                ck.save(ckpt_dir.join(format!("step_{step:07}.ftck")))?;
                if *step == s.config.steps {
                    ck.save(ckpt_dir.join("final.ftck"))?;
                }
            }
        }
        Ok(())
    })?;
    writeln!(out, "final checkpoint {}", ckpt_dir.join("final.ftck").display()).map_err(|e| Error::io("stdout", e))
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = load_config(&args.cfg, Some(checkpoint_config(&ckpt)?))?;
    set_path(&mut cfg, "paths.data_dir", &args.data)?;
    set_path(&mut cfg, "paths.split", &args.split)?;
    set_path(&mut cfg, "paths.report", &args.report)?;
    if let Some(t) = args.threshold {
        set(&mut cfg, "eval.threshold", t)?;
    }
    if args.live {
        set(&mut cfg, "eval.averaged", false)?;
    }
    let graph = graph_from_checkpoint(&cfg, &ckpt, cfg.eval.averaged)?;
    let corpus = load_corpus(&cfg)?;
    let split = load_split(&cfg, &corpus)?;
    let frames = score_test_set(&graph, &corpus, &split, cfg.eval.batch)?;
    let eval = Evaluation::from_frames(frames, cfg.eval.threshold)?;
    let mut text = eval.to_text();
    text.push_str("\n# effective config\n");
    for line in cfg.to_text().lines() {
        text.push_str(&format!("# {line}\n"));
    }
    out.write_all(eval.report.to_text().as_bytes()).map_err(|e| Error::io("stdout", e))?;
    if !cfg.paths.report.is_empty() {
        let path = PathBuf::from(&cfg.paths.report);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    if let Some(path) = &args.frames_csv {
        eval.write_frame_csv(path)?;
    }
    Ok(())
}

pub fn cmd_predict(args: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    if args.stride == 0 {
        return Err(Error::InvalidArgument("--stride must be positive".into()));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let cfg = load_config(&args.cfg, Some(checkpoint_config(&ckpt)?))?;
    let graph = graph_from_checkpoint(&cfg, &ckpt, !args.live && cfg.eval.averaged)?;
    let rec = load_wav(&args.wav)?;
    let geom = graph.spec.geometry;
    let frames = (1..=rec.len() / args.stride)
        .map(|k| extract_frame(&rec, k * args.stride, &geom))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = frames.iter().collect();
    let scores = graph.predict_many(&refs, cfg.eval.batch)?;

    let mut text = String::from("center_sample");
    for n in 0..crate::N_NOTES {
        text.push_str(&format!(",score_{n}"));
    }
    if args.threshold.is_some() {
        text.push_str(",notes");
    }
    text.push('\n');
    for (f, s) in frames.iter().zip(&scores) {
        text.push_str(&f.center_sample.to_string());
        for v in s {
            text.push_str(&format!(",{v:.9e}"));
        }
        if let Some(t) = args.threshold {
            let notes: Vec<String> = predicted_notes(s, t).notes().map(|n| n.to_string()).collect();
            text.push(',');
            text.push_str(&notes.join(" "));
        }
        text.push('\n');
    }
    match &args.out {
        Some(path) => fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => out.write_all(text.as_bytes()).map_err(|e| Error::io("stdout", e)),
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Predict(a) => cmd_predict(a, out),
    }
}

/// Parse `args`, run the command and return the process exit code:
/// 0 success, 1 usage, 2 data, 3 numeric failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    match run(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

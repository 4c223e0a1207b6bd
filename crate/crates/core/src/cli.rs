//! Command-line front end. Every command writes one JSON document (or, for
//! `bench`, one JSON object per line) to stdout unless `--out` is given.
//! Execution is always sequential, so results never depend on scheduling.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{generate_synthetic, load_split, save_split, Clip, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::Subset;
use crate::model::{
    bench_lite, evaluate_clips, evaluate_predictions, predict_clips, Model, PredictionFile,
};
use crate::numerics::ParamStore;
use crate::schedule::PlanMode;
use crate::suite::{run_grad_suite, run_oracles};
use crate::temporal::Variant;
use crate::train::{params_hash, train_two_stage};

/// Weights file inside a checkpoint directory.
pub const MODEL_FILE: &str = "model.tvod";
/// Resolved configuration inside a checkpoint directory.
pub const CONFIG_FILE: &str = "config.cfg";

#[derive(Debug, Parser)]
#[command(
    name = "stvod",
    version,
    about = "Spatial-temporal transformer video object detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into OUT/train and OUT/test.
    Synth(SynthArgs),
    /// Train both stages and write a checkpoint directory.
    Train(TrainArgs),
    /// Score a checkpoint or a predictions file.
    Eval(EvalArgs),
    /// Per-frame detections of a checkpoint.
    Infer(InferArgs),
    /// Lite throughput per window size.
    Bench(BenchArgs),
    /// Analytic vs numeric gradients of every differentiable op.
    Gradcheck(OutArgs),
    /// Hungarian, mAP, attention and scheduler oracles.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train_clips: Option<usize>,
    #[arg(long)]
    test_clips: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    occluder_prob: Option<f64>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from this variant's defaults (ignored with --config).
    #[arg(long)]
    variant: Option<Variant>,
    /// Override one key; applied after the file and STVOD_SEED.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dataset root holding train/ and test/.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint directory to create.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress per-step progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct InferenceArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split under the dataset root.
    #[arg(long, default_value = "test")]
    split: String,
    /// Bypass the temporal stack.
    #[arg(long)]
    single_frame: bool,
    /// Lite plan mode: sequential or shuffled.
    #[arg(long)]
    mode: Option<PlanMode>,
    /// Lite sampling interval I_w.
    #[arg(long)]
    iw: Option<usize>,
    /// Lite window size T_w.
    #[arg(long)]
    tw: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    inference: InferenceArgs,
    /// Score this predictions file instead of running a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    subset: Subset,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    inference: InferenceArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Lite checkpoint; freshly initialized weights when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset root; a synthetic clip is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Window sizes to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    tw: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => {
            let report = run_grad_suite()?;
            emit(&report, a.out.as_deref())?;
            Ok(if report.pass { 0 } else { 1 })
        }
        Command::Oracle(a) => {
            let report = run_oracles(a.seed)?;
            emit(&report, a.out.as_deref())?;
            Ok(if report.pass { 0 } else { 1 })
        }
    }
}

fn emit<V: Serialize>(value: &V, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

#[derive(Serialize)]
struct SynthSummary {
    seed: u64,
    train_clips: usize,
    test_clips: usize,
    frames: usize,
    occluded_boxes: usize,
    out: String,
}

fn synth(a: SynthArgs) -> Result<i32> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        seed: a.seed,
        train_clips: a.train_clips.unwrap_or(d.train_clips),
        test_clips: a.test_clips.unwrap_or(d.test_clips),
        frames: a.frames.unwrap_or(d.frames),
        occluder_prob: a.occluder_prob.unwrap_or(d.occluder_prob),
        ..d
    };
    let (train, test) = generate_synthetic(&cfg)?;
    save_split(&train, &a.out.join("train"))?;
    save_split(&test, &a.out.join("test"))?;
    let occluded = train
        .iter()
        .chain(&test)
        .flat_map(|c| &c.frames)
        .flat_map(|f| &f.objects)
        .filter(|o| o.occluded)
        .count();
    emit(
        &SynthSummary {
            seed: a.seed,
            train_clips: train.len(),
            test_clips: test.len(),
            frames: cfg.frames,
            occluded_boxes: occluded,
            out: a.out.display().to_string(),
        },
        None,
    )?;
    Ok(0)
}

/// File, then `STVOD_SEED`, then `--set`, then `--data`.
fn resolve_config(a: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::for_variant(a.variant.unwrap_or(Variant::TransVod)),
    };
    cfg.apply_env()?;
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|m| Error::Config(format!("{}: {m}", k.trim())))?;
    }
    if let Some(d) = &a.data {
        cfg.data = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainSummary {
    variant: Variant,
    seed: u64,
    checkpoint: String,
    spatial_steps: usize,
    temporal_steps: usize,
    spatial_final_loss: Option<f64>,
    temporal_final_loss: Option<f64>,
    spatial_frozen: bool,
    params_hash: String,
}

fn train(a: TrainArgs) -> Result<i32> {
    let cfg = resolve_config(&a.config)?;
    let clips = load_split(&cfg.data.join("train"))?;
    let quiet = a.quiet;
    let (_, store, report) = train_two_stage(&cfg.model, &cfg.train, &clips, |s| {
        if !quiet && (s.step % 100 == 0 || s.step == s.total_steps) {
            eprintln!(
                "stage {} step {}/{} loss {:.4}",
                s.stage, s.step, s.total_steps, s.loss
            );
        }
    })?;
    std::fs::create_dir_all(&a.checkpoint)?;
    checkpoint::save(&store, &a.checkpoint.join(MODEL_FILE))?;
    std::fs::write(a.checkpoint.join(CONFIG_FILE), cfg.to_text())?;
    emit(
        &TrainSummary {
            variant: cfg.variant(),
            seed: cfg.seed(),
            checkpoint: a.checkpoint.display().to_string(),
            spatial_steps: report.spatial_losses.len(),
            temporal_steps: report.temporal_losses.len(),
            spatial_final_loss: report.spatial_losses.last().copied(),
            temporal_final_loss: report.temporal_losses.last().copied(),
            spatial_frozen: report.spatial_hash_start == report.spatial_hash_end,
            params_hash: params_hash(&store, ""),
        },
        a.out.as_deref(),
    )?;
    Ok(0)
}

/// Loads a checkpoint directory written by `train`.
pub fn load_checkpoint(dir: &Path) -> Result<(RunConfig, Model, ParamStore<f32>)> {
    let mut cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    cfg.apply_env()?;
    cfg.validate()?;
    let (model, mut store) = Model::new::<f32>(&cfg.model, cfg.seed())?;
    checkpoint::load_into(&mut store, &dir.join(MODEL_FILE))?;
    Ok((cfg, model, store))
}

struct Loaded {
    cfg: RunConfig,
    model: Model,
    store: ParamStore<f32>,
    clips: Vec<Clip>,
}

fn load_for_inference(a: &InferenceArgs) -> Result<Loaded> {
    let dir = a
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let (mut cfg, mut model, store) = load_checkpoint(dir)?;
    if let Some(d) = &a.data {
        cfg.data = d.clone();
    }
    if let Some(m) = a.mode {
        cfg.infer.mode = m;
    }
    if let Some(i) = a.iw {
        cfg.infer.i_w = i;
    }
    if let Some(t) = a.tw {
        if cfg.variant() != Variant::Lite {
            return Err(Error::Config(
                "--tw applies to the lite variant only".into(),
            ));
        }
        cfg.model.temporal.window = t;
        model.cfg.temporal.window = t;
        model.temporal.cfg.window = t;
    }
    cfg.validate()?;
    let clips = load_split(&cfg.data.join(&a.split))?;
    Ok(Loaded {
        cfg,
        model,
        store,
        clips,
    })
}

fn eval(a: EvalArgs) -> Result<i32> {
    let report = match &a.predictions {
        Some(p) => {
            let data = a
                .inference
                .data
                .clone()
                .ok_or_else(|| Error::Config("--predictions needs --data".into()))?;
            let clips = load_split(&data.join(&a.inference.split))?;
            let text = std::fs::read_to_string(p)?;
            let pred: PredictionFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.clone(),
                offset: byte_offset(&text, e.line(), e.column()),
                msg: e.to_string(),
            })?;
            evaluate_predictions(&pred, &clips, a.subset)?
        }
        None => {
            let l = load_for_inference(&a.inference)?;
            evaluate_clips(
                &l.model,
                &l.store,
                &l.clips,
                !a.inference.single_frame,
                a.subset,
                &l.cfg.infer,
            )?
        }
    };
    emit(&report, a.out.as_deref())?;
    Ok(0)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let before: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    before + column.saturating_sub(1)
}

fn infer(a: InferArgs) -> Result<i32> {
    let l = load_for_inference(&a.inference)?;
    let pred = predict_clips(
        &l.model,
        &l.store,
        &l.clips,
        !a.inference.single_frame,
        &l.cfg.infer,
    )?;
    emit(&pred, a.out.as_deref())?;
    Ok(0)
}

fn bench(a: BenchArgs) -> Result<i32> {
    if a.tw.is_empty() || a.tw.contains(&0) || a.repeats == 0 {
        return Err(Error::Config(
            "--tw needs positive sizes and --repeats at least 1".into(),
        ));
    }
    let (cfg, model, store) = match &a.checkpoint {
        Some(dir) => load_checkpoint(dir)?,
        None => {
            let mut cfg = RunConfig::for_variant(Variant::Lite);
            cfg.set_seed(a.seed);
            cfg.apply_env()?;
            let (model, store) = Model::new::<f32>(&cfg.model, cfg.seed())?;
            (cfg, model, store)
        }
    };
    if cfg.variant() != Variant::Lite {
        return Err(Error::Config(format!(
            "bench needs a lite checkpoint, got {}",
            cfg.variant()
        )));
    }
    let clip = match &a.data {
        Some(d) => load_split(&d.join("test"))?.into_iter().next(),
        None => {
            let synth = SynthConfig {
                seed: cfg.seed(),
                train_clips: 0,
                test_clips: 1,
                ..SynthConfig::default()
            };
            generate_synthetic(&synth)?.1.into_iter().next()
        }
    }
    .ok_or_else(|| Error::contract("no clip to benchmark"))?;
    let rows = bench_lite(
        &model, &store, &clip, &a.tw, &cfg.infer, a.warmup, a.repeats,
    )?;
    let mut text = String::new();
    for r in &rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    match &a.out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(0)
}

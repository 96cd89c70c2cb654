//! `dsc`: tag clips, evaluate manifests, profile models and train the toy
//! ConvNeXt.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O, divergence), 2 bad
//! arguments or inputs, 3 checkpoint mismatch or corruption, 4 audio decode
//! failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dsc_core::eval::{self, ClassMap, Manifest};
use dsc_core::frontend::TARGET_FRAMES;
use dsc_core::model::AUDIOSET_CLASSES;
use dsc_core::profiler::{self, BenchConfig, ProfileReport};
use dsc_core::trainer::{self, TrainConfig};
use dsc_core::{Checkpoint, Error, Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "dsc", version, about = "Depthwise-separable audio tagging on the CPU")]
struct Cli {
    /// Worker threads for kernels (default: all cores).
    #[arg(long, global = true, env = "DSC_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the top-k classes for one clip.
    Tag {
        #[arg(long)]
        model: String,
        /// `.acnx` weights; without it the model is randomly initialized.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        /// CSV `index,name`; its length sets the class count.
        #[arg(long)]
        class_map: Option<PathBuf>,
        /// Input length in frames.
        #[arg(long, default_value_t = TARGET_FRAMES)]
        frames: usize,
    },
    /// Score a labeled manifest and write per-class metrics.
    Eval {
        #[arg(long)]
        model: String,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// CSV `clip_id,path,labels` with `;`-separated class indices.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        class_map: Option<PathBuf>,
        /// Directory receiving `per_class.csv` and `summary.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = TARGET_FRAMES)]
        frames: usize,
    },
    /// Parameter and MAC counts, optionally with measured throughput.
    Profile {
        #[arg(long)]
        model: String,
        /// Checks the weights load; counts do not depend on them.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long)]
        bench: bool,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Include log-mel extraction in the timed region.
        #[arg(long)]
        frontend: bool,
        /// Print `key=value` lines instead of the table.
        #[arg(long)]
        kv: bool,
    },
    /// Train the reduced ConvNeXt on synthetic tones.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        /// History CSV path; printed to stdout when absent.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
}

/// Command failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) | Error::Shape(_) | Error::Parse { .. } => 2,
            Error::Checkpoint(_) => 3,
            Error::Audio { .. } => 4,
            Error::Diverged { .. } | Error::Io(_) => 1,
        };
        Self::new(code, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(1, format!("{}: {e}", path.display()))
}

fn build_model(name: &str, classes: usize) -> Result<Model, Failure> {
    let mut cfg = ModelConfig::by_name(name)?;
    cfg.num_classes = classes;
    Ok(Model::build(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?)
}

fn load_weights(model: &mut Model, ckpt: Option<&Path>) -> CmdResult {
    let Some(path) = ckpt else {
        eprintln!("warning: no --ckpt given, using random weights");
        return Ok(());
    };
    let ck = Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Failure::new(3, format!("cannot read checkpoint {}: {io}", path.display())),
        other => Failure::new(3, format!("{}: {other}", path.display())),
    })?;
    ck.apply(&mut model.params, true)
        .map_err(|e| Failure::new(3, format!("{}: {e}", path.display())))?;
    Ok(())
}

fn class_map(path: Option<&Path>) -> Result<Option<ClassMap>, Failure> {
    path.map(|p| {
        ClassMap::load(p).map_err(|e| match e {
            Error::Io(io) => Failure::new(2, format!("cannot read class map {}: {io}", p.display())),
            other => other.into(),
        })
    })
    .transpose()
}

fn check_frames(frames: usize) -> CmdResult {
    if frames == 0 {
        return Err(Failure::new(2, "--frames must be >= 1"));
    }
    Ok(())
}

fn tag(
    model: &str,
    ckpt: Option<&Path>,
    audio: &Path,
    topk: usize,
    map: Option<&Path>,
    frames: usize,
) -> CmdResult {
    check_frames(frames)?;
    if topk == 0 {
        return Err(Failure::new(2, "--topk must be >= 1"));
    }
    let names = class_map(map)?;
    let classes = names.as_ref().map_or(AUDIOSET_CLASSES, ClassMap::len);
    let mut m = build_model(model, classes)?;
    load_weights(&mut m, ckpt)?;
    let x = eval::clip_input(&m, audio, &eval::mel_config_for(&m), frames).map_err(|e| match e {
        Error::Io(io) => Failure::new(4, format!("cannot read {}: {io}", audio.display())),
        other => other.into(),
    })?;
    let probs = m.forward(&x)?.probabilities;
    let mut ranked: Vec<(usize, f32)> = probs.data().iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (k, p) in ranked.into_iter().take(topk) {
        let name = names.as_ref().map_or_else(|| k.to_string(), |n| n.names[k].clone());
        println!("{name}\t{p:.3}");
    }
    Ok(())
}

fn run_eval(
    model: &str,
    ckpt: Option<&Path>,
    manifest: &Path,
    map: Option<&Path>,
    out: Option<&Path>,
    frames: usize,
) -> CmdResult {
    check_frames(frames)?;
    let names = class_map(map)?;
    let classes = names.as_ref().map_or(AUDIOSET_CLASSES, ClassMap::len);
    let mut m = build_model(model, classes)?;
    load_weights(&mut m, ckpt)?;
    let rows = Manifest::load(manifest, classes).map_err(|e| match e {
        Error::Io(io) => Failure::new(2, format!("cannot read manifest {}: {io}", manifest.display())),
        other => other.into(),
    })?;
    if rows.is_empty() {
        return Err(Failure::new(2, format!("manifest {} has no clips", manifest.display())));
    }
    let report = eval::evaluate(&m, &rows, names.as_ref(), &eval::mel_config_for(&m), frames)?;
    for (clip, why) in &report.failed_clips {
        eprintln!("warning: skipped {clip}: {why}");
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        let csv = dir.join("per_class.csv");
        fs::write(&csv, report.to_csv()).map_err(|e| io_failure(&csv, e))?;
        let kv = dir.join("summary.txt");
        fs::write(&kv, report.to_key_values()).map_err(|e| io_failure(&kv, e))?;
    }
    println!("{}", report.summary());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn profile(
    model: &str,
    ckpt: Option<&Path>,
    seconds: f64,
    batch: usize,
    bench: bool,
    repeats: usize,
    frontend: bool,
    kv: bool,
) -> CmdResult {
    if !(seconds > 0.0) || batch == 0 || repeats == 0 {
        return Err(Failure::new(2, "--seconds, --batch and --repeats must be positive"));
    }
    let mut m = build_model(model, AUDIOSET_CLASSES)?;
    if ckpt.is_some() {
        load_weights(&mut m, ckpt)?;
    }
    let shape = profiler::input_shape_for(&m, batch, seconds)?;
    let mut report = ProfileReport::new(&m, shape)?;
    if bench {
        let cfg = BenchConfig {
            batch,
            seconds,
            repeats,
            include_frontend: frontend,
            ..BenchConfig::default()
        };
        report.throughput = Some(profiler::bench_throughput(&m, &cfg)?);
    }
    if kv {
        print!("{}", report.to_key_values());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn train_toy(config: Option<&Path>, history: Option<PathBuf>, checkpoint_dir: Option<PathBuf>) -> CmdResult {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Failure::new(2, format!("cannot read config {}: {io}", p.display())),
            other => other.into(),
        })?,
        None => TrainConfig::default(),
    };
    if history.is_some() {
        cfg.history = history;
    }
    if checkpoint_dir.is_some() {
        cfg.checkpoint_dir = checkpoint_dir;
    }
    let (_, h) = trainer::train_toy(&cfg)?;
    match &cfg.history {
        Some(p) => fs::write(p, h.to_csv()).map_err(|e| io_failure(p, e))?,
        None => print!("{}", h.to_csv()),
    }
    for (step, map) in &h.evals {
        eprintln!("step {step}: train mAP {map:.4}");
    }
    eprintln!("final train mAP {:.4}", h.final_map);
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::new(2, "--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::new(1, e.to_string()))?;
    }
    match cli.command {
        Command::Tag {
            model,
            ckpt,
            audio,
            topk,
            class_map,
            frames,
        } => tag(&model, ckpt.as_deref(), &audio, topk, class_map.as_deref(), frames),
        Command::Eval {
            model,
            ckpt,
            manifest,
            class_map,
            out,
            frames,
        } => run_eval(&model, ckpt.as_deref(), &manifest, class_map.as_deref(), out.as_deref(), frames),
        Command::Profile {
            model,
            ckpt,
            seconds,
            batch,
            bench,
            repeats,
            frontend,
            kv,
        } => profile(&model, ckpt.as_deref(), seconds, batch, bench, repeats, frontend, kv),
        Command::TrainToy {
            config,
            history,
            checkpoint_dir,
        } => train_toy(config.as_deref(), history, checkpoint_dir),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("dsc: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

//! `hieragg`: pooling, training, evaluation, fusion and reporting.

mod data;
mod error;
mod eval;
mod out;
mod report;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hieragg::dataio::{Split, Stream, VideoRecord};
use hieragg::hierarchy::{Hierarchy, PoolOptions};
use hieragg::synth::{gen_dataset, Placement, SynthSpec};

use crate::error::{exit_code, CliError};
use crate::out::OutDir;

/// Environment variable holding the worker-thread count.
const WORKERS_ENV: &str = "HIERAGG_WORKERS";

#[derive(Parser, Debug)]
#[command(
    name = "hieragg",
    version,
    about = "Hierarchical temporal aggregation with learned node weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pool feature sequences into per-node vectors (GPT1 files).
    Pool(PoolArgs),
    /// Generate a synthetic dataset with a known discriminative level.
    GenSynth(SynthArgs),
    /// Learn node weights by alternating SVM and weight steps.
    TrainEm(train::EmArgs),
    /// Learn node weights with the contrastive pair loss, then fit the SVMs.
    TrainDmkl(train::DmklArgs),
    /// Score the test split with a trained model.
    Eval(eval::EvalArgs),
    /// Combine two single-stream models.
    FuseEval(eval::FuseArgs),
    /// Summarise evaluation runs.
    Report(report::ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StreamArg {
    Appearance,
    Motion,
    All,
}

#[derive(Args, Debug)]
struct PoolArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, value_enum, default_value_t = StreamArg::All)]
    stream: StreamArg,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    split: SplitArg,
    #[arg(long)]
    frame_l2: bool,
    #[arg(long)]
    node_l2: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Level whose nodes carry the class signal.
    #[arg(long, default_value_t = 2)]
    level: usize,
    #[arg(long, default_value_t = 2.0)]
    amplitude: f64,
    /// Frame noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Nuisance amplitude that hides the class below the signal level.
    #[arg(long, default_value_t = 1.0)]
    detail: f64,
    /// Do not mirror the signal in the sibling interval.
    #[arg(long)]
    unbalanced: bool,
    #[arg(long, default_value = "every")]
    placement: Placement,
    /// 1 (appearance) or 2 (appearance and motion).
    #[arg(long, default_value_t = 1)]
    streams: usize,
    /// Signal level of the motion stream (default: one finer).
    #[arg(long)]
    motion_level: Option<usize>,
    /// Amplitude multiplier of the weaker stream per class.
    #[arg(long, default_value_t = 0.35)]
    complement: f64,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn gen_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        num_classes: a.classes,
        per_class: a.per_class,
        frames: a.frames,
        dim: a.dim,
        level: a.level,
        amplitude: a.amplitude,
        sigma: a.sigma,
        detail: a.detail,
        balanced: !a.unbalanced,
        placement: a.placement,
        streams: a.streams,
        motion_level: a.motion_level,
        complement: a.complement,
        train_fraction: a.train_fraction,
        seed: a.seed,
    };
    spec.validate()?;
    let ds = gen_dataset(&spec)?;
    let mut out = OutDir::create(&a.out)?;
    for path in ds.write(out.root())? {
        let rel = path
            .strip_prefix(out.root())
            .unwrap_or(&path)
            .to_string_lossy()
            .into_owned();
        out.record(&rel)?;
    }
    out.write_json("spec.json", &spec)?;
    out.finish()?;
    eprintln!("gen-synth: {} videos, wrote {}", ds.videos.len(), a.out.display());
    Ok(())
}

fn pool(a: &PoolArgs) -> Result<()> {
    let h = Hierarchy::new(a.depth)?;
    let m = data::manifest(&a.manifest)?;
    let opts = PoolOptions {
        frame_l2: a.frame_l2,
        node_l2: a.node_l2,
    };
    let records: Vec<&VideoRecord> = m
        .records
        .iter()
        .filter(|r| match a.split {
            SplitArg::Train => r.split == Split::Train,
            SplitArg::Test => r.split == Split::Test,
            SplitArg::All => true,
        })
        .collect();
    if records.is_empty() {
        return Err(CliError::Invalid("no videos match the requested split".into()).into());
    }
    let streams: Vec<Stream> = match a.stream {
        StreamArg::Appearance => vec![Stream::Appearance],
        StreamArg::Motion => vec![Stream::Motion],
        StreamArg::All => Stream::ALL
            .into_iter()
            .filter(|&s| records.iter().any(|r| r.stream_path(s).is_some()))
            .collect(),
    };
    let mut out = OutDir::create(&a.out)?;
    for stream in streams {
        let pooled = data::pool_records(&m, &records, stream, &h, opts)?;
        for tree in &pooled.trees {
            out.write(&format!("{stream}/{}.gpt", tree.video_id()), tree.to_bytes())?;
        }
    }
    out.finish()?;
    eprintln!("pool: {} videos, wrote {}", records.len(), a.out.display());
    Ok(())
}

fn init_workers() -> Result<()> {
    let Ok(value) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Invalid(format!("{WORKERS_ENV} must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    init_workers()?;
    match &cli.command {
        Command::Pool(a) => pool(a),
        Command::GenSynth(a) => gen_synth(a),
        Command::TrainEm(a) => train::train_em(a),
        Command::TrainDmkl(a) => train::train_dmkl(a),
        Command::Eval(a) => eval::eval(a),
        Command::FuseEval(a) => eval::fuse_eval(a),
        Command::Report(a) => report::report(a),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error::describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

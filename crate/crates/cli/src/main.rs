//! `intrinsic`: refinement, training, decomposition and evaluation from the command line.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, missing input paths), 2 data or
//! contract error (unreadable files, size mismatches, failed gradient checks).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "intrinsic", version, about = "Intrinsic image decomposition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Make Sintel-layout triplets satisfy I = A x S exactly
    Refine(RefineArgs),
    /// Train the two-stream model (dense, sparse or video mode)
    Train(TrainArgs),
    /// Run a checkpoint on an image or a directory of images
    Decompose(DecomposeArgs),
    /// Dense metrics (MSE, LMSE, DSSIM) of predicted albedo/shading against ground truth
    Eval(EvalArgs),
    /// WHDR of predicted albedo against judgement files
    EvalWhdr(WhdrArgs),
    /// Per-frame temporal consistency of an output sequence
    Tcm(TcmArgs),
    /// Write synthetic datasets
    Synth(SynthArgs),
    /// Per-level encoder tap statistics of one image
    DumpFeatures(FeatureArgs),
    /// Finite-difference check of every training objective
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct RefineArgs {
    /// Sintel-layout root with clean/, albedo/, shading/ (and optionally flow/, occlusions/)
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Pool statistics and propagate repairs along optical flow
    #[arg(long)]
    temporal: bool,
    /// LLE neighbourhood size
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// LLE ridge weight, relative to the Gram trace
    #[arg(long, default_value_t = 1e-3)]
    reg: f64,
    #[arg(long, default_value_t = 2)]
    refinements: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// TrainConfig JSON
    #[arg(long)]
    config: PathBuf,
    /// Sintel-layout root (dense, video) or a directory of <id>.png + <id>.json (sparse)
    #[arg(long)]
    dataset: PathBuf,
    /// Receives model.ckpt, train_log.csv and config.json
    #[arg(long, default_value = "train_out")]
    out: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config epoch count
    #[arg(long)]
    epochs: Option<usize>,
    /// Start from this checkpoint instead of a fresh initialization
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory of PNGs
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory with albedo/ and shading/ predictions
    #[arg(long)]
    pred: PathBuf,
    /// Directory with albedo/ and shading/ ground truth, same relative paths
    #[arg(long)]
    gt: PathBuf,
    /// Comma-separated: mse, mse-plain, lmse, dssim, dssim-unhalved
    #[arg(long, default_value = "mse,lmse,dssim", value_delimiter = ',')]
    metrics: Vec<Metric>,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Mse,
    MsePlain,
    Lmse,
    Dssim,
    DssimUnhalved,
}

#[derive(Args)]
struct WhdrArgs {
    /// Directory of <id>.png albedo predictions
    #[arg(long)]
    albedo: PathBuf,
    /// Directory of <id>.json judgement files
    #[arg(long)]
    judgements: PathBuf,
    #[arg(long, default_value_t = intrinsic_core::metrics::WHDR_DELTA)]
    delta: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TcmArgs {
    /// Output frames (e.g. predicted shading), PNG, sorted by name
    #[arg(long)]
    pred: PathBuf,
    /// Input video frames, same count and order
    #[arg(long)]
    video: PathBuf,
    /// Flow files; the k-th maps frame k onto frame k+1
    #[arg(long)]
    flow: PathBuf,
    /// Occlusion PNGs matching the flow files
    #[arg(long)]
    occlusions: Option<PathBuf>,
    #[arg(long, default_value = "tcm.csv")]
    out: PathBuf,
    /// Also render per-frame inverted-jet consistency maps into this directory
    #[arg(long)]
    maps: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    /// Independent albedo x shading samples (one scene)
    Dense,
    /// Panning sequences with exact flow
    Video,
    /// Contaminated sequences with specular highlights and an occluder, for refinement
    Sintel,
    /// Images with pairwise reflectance judgements
    Sparse,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long)]
    out: PathBuf,
    /// Samples (dense, sparse) or sequences (video, sintel)
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Judgements per image (sparse)
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct FeatureArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = "features.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

pub enum CliError {
    Usage(String),
    Data(intrinsic_core::Error),
}

impl From<intrinsic_core::Error> for CliError {
    fn from(e: intrinsic_core::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<intrinsic_core::imageio::ImageError> for CliError {
    fn from(e: intrinsic_core::imageio::ImageError) -> Self {
        CliError::Data(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Refine(a) => commands::refine(a),
        Command::Train(a) => commands::train(a),
        Command::Decompose(a) => commands::decompose(a),
        Command::Eval(a) => commands::eval(a),
        Command::EvalWhdr(a) => commands::eval_whdr(a),
        Command::Tcm(a) => commands::tcm(a),
        Command::Synth(a) => commands::synth(a),
        Command::DumpFeatures(a) => commands::dump_features(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `intrinsic --help` for usage.");
            ExitCode::from(1)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

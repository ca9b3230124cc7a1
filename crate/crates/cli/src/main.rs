//! `maskface`: dataset preparation, training, generation, editing,
//! evaluation, toy data and the inference server.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "maskface", version, about = "Face generation and editing driven by label masks")]
struct Cli {
    /// Seed for every random choice; overrides the seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Align raw images and masks to the canonical landmarks.
    Prep(PrepArgs),
    /// Train the face parser by per-pixel cross entropy.
    PretrainParser(PretrainArgs),
    /// Adversarial training of generator and discriminators.
    Train(TrainArgs),
    /// Generate one image from a source face and a target face.
    Generate(GenerateArgs),
    /// Apply an edit request against a dataset.
    Edit(EditArgs),
    /// Move every component of one dataset face onto another's mask.
    Swap(SwapArgs),
    /// Frechet distance between two image sets.
    EvalFid(EvalFidArgs),
    /// Parser agreement between generated images and their target masks.
    EvalMaskAcc(EvalMaskAccArgs),
    /// Parser accuracy with real, augmented and synthetic training data.
    EvalAugment(EvalAugmentArgs),
    /// Write a procedural corpus of cartoon faces with exact masks.
    MakeToyData(MakeToyDataArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Standard,
}

/// Where training settings come from.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// Training configuration file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Built-in configuration when no file is given.
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
}

#[derive(Debug, Args)]
struct PrepArgs {
    /// Raw manifest: `id image mask x1 y1 ... x5 y5 [group]` per line.
    #[arg(long)]
    raw: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `toy`, `helen`, or a schema file.
    #[arg(long, default_value = "helen")]
    schema: String,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Prepared training manifest; overrides the config.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Prepared validation manifest; overrides the config.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Number of optimization steps; overrides the config.
    #[arg(long)]
    steps: Option<u64>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    train: Option<PathBuf>,
    /// Frozen parser checkpoint for the parsing loss; overrides the config.
    #[arg(long)]
    parser: Option<PathBuf>,
    /// Total GAN steps; overrides the config.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from a GAN checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Directory for checkpoints and `metrics.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source_image: PathBuf,
    #[arg(long)]
    source_mask: PathBuf,
    #[arg(long)]
    target_image: PathBuf,
    #[arg(long)]
    target_mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Edit request file (TOML).
    #[arg(long)]
    request: PathBuf,
    /// Prepared dataset manifest the request ids refer to.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SwapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Sample supplying every component.
    #[arg(long)]
    source: String,
    /// Sample supplying mask and background.
    #[arg(long)]
    target: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalFidArgs {
    /// Manifest or directory of PNG images.
    #[arg(long)]
    real: PathBuf,
    /// Manifest or directory of PNG images.
    #[arg(long)]
    generated: PathBuf,
    /// Use this parser's bottleneck as the feature network instead of a
    /// seeded random projection.
    #[arg(long)]
    parser: Option<PathBuf>,
    /// Random projection output size.
    #[arg(long, default_value_t = 64)]
    projection_dim: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PairMode {
    /// Sample i takes the mask and background of sample i+1.
    Swap,
    /// Every sample is reconstructed onto its own mask.
    Identity,
}

#[derive(Debug, Args)]
struct EvalMaskAccArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Independent parser used as the judge.
    #[arg(long)]
    parser: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "swap")]
    pairs: PairMode,
}

#[derive(Debug, Args)]
struct EvalAugmentArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Real training manifest.
    #[arg(long)]
    real: PathBuf,
    /// Test manifest.
    #[arg(long)]
    test: PathBuf,
    /// Synthetic training manifest.
    #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
    synth: Option<PathBuf>,
    /// Synthesize one swap per real sample with this GAN checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Parser steps per row; overrides the config.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Debug, Args)]
struct MakeToyDataArgs {
    /// Number of faces.
    #[arg(long, short = 'n')]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Directory of the content-addressed asset store.
    #[arg(long, default_value = "assets")]
    assets: PathBuf,
    /// Prepared dataset whose ids become valid references.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// GAN checkpoint to serve.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Parser checkpoint for `/v1/parse`.
    #[arg(long)]
    parser: Option<PathBuf>,
    /// Schema when no checkpoint is given.
    #[arg(long, default_value = "toy")]
    schema: String,
    /// Working resolution when no checkpoint is given.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = maskface_service::DEFAULT_MAX_UPLOAD)]
    max_upload_bytes: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.verbose {
        tracing_subscriber::fmt()
            .with_writer(std::io::stderr)
            .with_max_level(tracing_subscriber::filter::LevelFilter::INFO)
            .init();
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

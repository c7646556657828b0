mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit status 1 for runtime failures, 2 for usage and config errors.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] ampzoo::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Failed(format!("I/O error on {}: {e}", path.display()))
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) | CliError::Failed(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "ampzoo", version, about = "Capture rendering, synthetic data, and effect-model training")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Overrides shared by config-driven commands.
#[derive(clap::Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Write outputs here instead of the configured out_dir.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// List the synthetic devices a capture directory expands into.
    List {
        #[arg(long)]
        models_dir: PathBuf,
        #[arg(long, default_value_t = ampzoo::model_zoo::DEFAULT_COND_POINTS)]
        cond_points: usize,
    },
    /// Render a WAV file through a capture.
    Render {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cond: Option<f32>,
        #[arg(long, default_value_t = 4096)]
        block: usize,
        /// Output encoding: float32, pcm16 or pcm24.
        #[arg(long, default_value = "float32")]
        encoding: String,
    },
    /// Render a supervised dataset with a manifest, or replay one clip of it.
    Augment {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        workers: Option<usize>,
        /// Re-render the named manifest clip instead of building the dataset.
        #[arg(long, requires = "replay_out")]
        replay: Option<String>,
        #[arg(long)]
        replay_out: Option<PathBuf>,
    },
    /// Train the one-to-many TCN on every registry device.
    TrainFoundation {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train the effects encoder contrastively.
    TrainEncoder {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Learn an embedding for a new device with the foundation weights frozen.
    Enroll {
        #[command(flatten)]
        run: RunArgs,
        /// Fraction of the training pairs to use.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Evaluate a foundation checkpoint on freshly rendered pairs.
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Export encoder embeddings for every WAV in a directory.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// One of tcn, encoder, mlp, esr, mrsl, nt_xent, or all.
        #[arg(long, default_value = "all")]
        kind: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = ampzoo::gradcheck::DEFAULT_EPS)]
        eps: f64,
    },
    /// Write toy captures and a synthetic clean corpus.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        devices: usize,
        #[arg(long, default_value_t = 60.0)]
        seconds: f64,
        #[arg(long, default_value_t = 4)]
        files: usize,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::List { models_dir, cond_points } => commands::list(&models_dir, cond_points),
        Command::Render { model, input, out, cond, block, encoding } => {
            commands::render(&model, &input, &out, cond, block, &encoding)
        }
        Command::Augment { run, workers, replay, replay_out } => match (replay, replay_out) {
            (Some(name), Some(out)) => commands::augment_replay(&run, &name, &out),
            _ => commands::augment(&run, workers),
        },
        Command::TrainFoundation { run, workers } => commands::train_foundation(&run, workers),
        Command::TrainEncoder { run, workers } => commands::train_encoder(&run, workers),
        Command::Enroll { run, fraction } => commands::enroll(&run, fraction),
        Command::Eval { run } => commands::eval(&run),
        Command::Embed { checkpoint, input, out } => commands::embed(&checkpoint, &input, &out),
        Command::Gradcheck { kind, seeds, eps } => commands::gradcheck(&kind, seeds, eps),
        Command::MakeToy { out, devices, seconds, files, sample_rate, seed } => {
            commands::make_toy(&out, devices, seconds, files, sample_rate, seed)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

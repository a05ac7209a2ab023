mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use bipose_core::error::Error;
use clap::{Parser, Subcommand};

/// Binarized multi-branch pose estimation: train, distill, evaluate, benchmark.
#[derive(Parser, Debug)]
#[command(name = "bipose", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print a run configuration preset as TOML.
    Config {
        /// desk or full
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Train the real-valued teacher on the synthetic task.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "teacher.bihr")]
        out: PathBuf,
        /// Progress log; defaults to OUT with a .log.jsonl suffix.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train a binary student against a frozen teacher.
    Distill {
        /// Teacher checkpoint; optional when --alpha-mix is 1.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        alpha_mix: Option<f64>,
        /// awing or mse
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "student.bihr")]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Report PCKh, OKS-AP and cost figures for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run configuration whose [data] section describes the dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of validation samples; defaults to the configured size.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the bit-packed convolution against the float reference.
    Bench {
        /// c_in x c_out x k x out_h x out_w, repeatable.
        #[arg(long = "shape")]
        shapes: Vec<String>,
        #[arg(long, default_value_t = 200)]
        min_time_ms: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write decoded joint predictions for validation samples as JSON lines.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classes mapped onto process exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(Error::Config(_)) => 2,
            Failure::Core(Error::Format(_) | Error::Corruption(_)) => 4,
            Failure::Core(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("BIPOSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("BIPOSE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::Config { preset } => commands::config(&preset),
        Command::TrainTeacher { config, seed, out, log } => commands::train_teacher(&config, seed, &out, log),
        Command::Distill {
            teacher,
            config,
            alpha_mix,
            loss,
            seed,
            out,
            log,
        } => commands::distill(commands::DistillArgs {
            teacher,
            config,
            alpha_mix,
            loss,
            seed,
            out,
            log,
        }),
        Command::Eval {
            checkpoint,
            config,
            samples,
            out,
        } => commands::eval(&checkpoint, config.as_deref(), samples, out.as_deref()),
        Command::Bench {
            shapes,
            min_time_ms,
            seed,
            out,
        } => commands::bench(&shapes, min_time_ms, seed, out.as_deref()),
        Command::Predict {
            checkpoint,
            config,
            count,
            out,
        } => commands::predict(&checkpoint, config.as_deref(), count, out.as_deref()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("bipose: {f}");
            ExitCode::from(f.code())
        }
    }
}

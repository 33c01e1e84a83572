//! `depthcomp`: dataset generation, training, evaluation, completion,
//! gradient audits and ablations from the command line.
//!
//! Exit codes: 0 success, 1 validation or contract failure, 2 I/O or file
//! format failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<depthcomp::Error> for CliError {
    fn from(e: depthcomp::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

/// Set to anything but `0` to force single-threaded execution everywhere.
pub const DETERMINISTIC_ENV: &str = "DEPTHCOMP_DETERMINISTIC";

pub fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v != "0")
}

#[derive(Parser, Debug)]
#[command(name = "depthcomp", version, about = "RGB-D depth completion with gated convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: PNG triplets plus a manifest.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Run configuration; only its `[scene]` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the pipeline and write a checkpoint, log and resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training manifest; overrides `data.train_manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long, required_unless_present = "passthrough")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score the ground truth against itself instead of running a model.
        #[arg(long)]
        passthrough: bool,
    },
    /// Complete one raw depth image.
    Complete {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        raw: PathBuf,
        /// Output 16-bit depth PNG.
        #[arg(long)]
        out: PathBuf,
        /// Directory receiving one grayscale gating map per gated block.
        #[arg(long)]
        dump_attention: Option<PathBuf>,
        /// Path receiving the Sobel boundary image of the completed depth.
        #[arg(long)]
        dump_sobel: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Test hook: perturb the analytic gradient of this parameter.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Train and evaluate the four ablation variants.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            seed,
            count,
            size,
            out,
            force,
            config,
        } => commands::gen_data(seed, count, size, &out, force, config.as_deref()),
        Command::Train {
            config,
            out,
            manifest,
            steps,
            seed,
            batch_size,
            learning_rate,
            resume,
        } => {
            let mut c = config::RunConfig::load(config.as_deref())?;
            if manifest.is_some() {
                c.data.train_manifest = manifest;
            }
            c.train.steps = steps.unwrap_or(c.train.steps);
            c.train.seed = seed.unwrap_or(c.train.seed);
            c.train.batch_size = batch_size.unwrap_or(c.train.batch_size);
            c.train.learning_rate = learning_rate.unwrap_or(c.train.learning_rate);
            commands::train(&c, &out, resume.as_deref())
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            passthrough,
        } => commands::eval(checkpoint.as_deref(), &manifest, &out, passthrough),
        Command::Complete {
            checkpoint,
            rgb,
            raw,
            out,
            dump_attention,
            dump_sobel,
        } => commands::complete(&checkpoint, &rgb, &raw, &out, dump_attention.as_deref(), dump_sobel.as_deref()),
        Command::Gradcheck {
            config,
            precision,
            out,
            corrupt,
        } => {
            let c = config::RunConfig::load(config.as_deref())?;
            commands::gradcheck(&c, precision, out.as_deref(), corrupt.as_deref())
        }
        Command::Ablate { config, out, seed, steps } => {
            let mut c = config::RunConfig::load(config.as_deref())?;
            c.train.seed = seed.unwrap_or(c.train.seed);
            c.train.steps = steps.unwrap_or(c.train.steps);
            commands::ablate(&c, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

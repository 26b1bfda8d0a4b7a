//! The `ovhar` command line: table building, synthesis, training,
//! evaluation, inference and gradient checking driven by one JSON config.
//!
//! Exit codes: 0 success, 1 failed check or runtime failure, 2 usage or
//! configuration error.

use std::ffi::OsString;
use std::fmt::Display;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use ovhar_core::eval::CandidateMode;
use thiserror::Error;

pub mod commands;
pub mod config;

use commands::{FaultArg, GradCheckArgs, InferInput};
use config::{EmbedderChoice, Overrides, RunConfig, RUN_DIR_ENV};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn usage(self, context: &str) -> Result<T, CliError>;
    fn failed(self, context: &str) -> Result<T, CliError>;
}

impl<T, E: Display> ResultExt<T> for Result<T, E> {
    fn usage(self, context: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Usage(format!("{context}: {e}")))
    }

    fn failed(self, context: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Failed(format!("{context}: {e}")))
    }
}

#[derive(Debug, Parser)]
#[command(name = "ovhar", version, about = "Open-vocabulary activity recognition from sensor windows")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub max_epochs: Option<usize>,
    /// Candidate classes at evaluation: every split class or only the
    /// held-out ones.
    #[arg(long, global = true, value_parser = parse_candidates)]
    pub candidates: Option<CandidateMode>,
    #[arg(long, global = true)]
    pub stride_seconds: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub embedder: Option<EmbedderChoice>,
    /// Output directory; beats OVHAR_RUN_DIR and the config file.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_candidates(s: &str) -> Result<CandidateMode, String> {
    s.parse()
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the OVHT target table for every lexicon class.
    EmbedTable,
    /// Generate a synthetic dataset, its lexicon and an open-vocabulary split.
    Synth {
        /// Output directory (default: <run_dir>/data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the split's training classes; writes the checkpoint and epoch log.
    Train,
    /// Score the held-out classes; the last stdout line is `macro_f1=<value>`.
    Eval,
    /// Decode one recording and print the ranked classes.
    Infer {
        #[arg(long, conflicts_with = "file", required_unless_present = "file")]
        record: Option<String>,
        /// Raw little-endian f32 file with the model's channel count.
        #[arg(long)]
        file: Option<PathBuf>,
        /// Sampling rate of --file (default: the manifest's rate).
        #[arg(long, requires = "file")]
        rate_hz: Option<f64>,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Compare analytic and finite-difference gradients of the regressor.
    Gradcheck {
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 6)]
        channels: usize,
        #[arg(long, default_value_t = 40)]
        rows: usize,
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            max_epochs: self.max_epochs,
            candidates: self.candidates,
            stride_seconds: self.stride_seconds,
            embedder: self.embedder,
            run_dir: self.run_dir.clone(),
        }
    }
}

/// Runs a parsed command. `Ok(false)` means a check failed.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<bool, CliError> {
    let env_run_dir = std::env::var_os(RUN_DIR_ENV).map(PathBuf::from);
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides(), env_run_dir)?;
    match &cli.command {
        Command::EmbedTable => commands::embed_table(&cfg, out),
        Command::Synth { out: dir } => commands::synth(&cfg, dir.as_deref(), out),
        Command::Train => commands::train_cmd(&cfg, out),
        Command::Eval => commands::eval_cmd(&cfg, out),
        Command::Infer {
            record,
            file,
            rate_hz,
            top,
        } => {
            let input = match (record, file) {
                (Some(id), _) => InferInput::Record(id.clone()),
                (None, Some(path)) => InferInput::File {
                    path: path.clone(),
                    rate_hz: *rate_hz,
                },
                (None, None) => return Err(CliError::Usage("infer needs --record or --file".into())),
            };
            commands::infer(&cfg, &input, *top, out)
        }
        Command::Gradcheck {
            seeds,
            channels,
            rows,
            inject_fault,
        } => {
            let args = GradCheckArgs {
                seeds: *seeds,
                channels: *channels,
                rows: *rows,
                fault: *inject_fault,
            };
            commands::gradcheck(&cfg, &args, out)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli, out) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

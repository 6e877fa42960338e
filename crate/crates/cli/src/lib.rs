//! Operator surface for the tokenizer and generator: dataset generation,
//! training, tokenization, sampling, reconstruction and evaluation.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rdpm::Error;
use serde_json::json;

use crate::commands::Context;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "rdpm", version, about = "Recurrent diffusion tokenizer and generator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Suppress progress lines on stdout.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    MakeData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the tokenizer, checkpointing after every epoch.
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `make-data`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Tokenize a dataset into a record file.
    Tokenize {
        #[command(flatten)]
        common: Common,
        /// Tokenizer checkpoint.
        #[arg(long)]
        tokenizer: PathBuf,
        /// Dataset directory written by `make-data`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the generator on tokenizer records.
    TrainGenerator {
        #[command(flatten)]
        common: Common,
        /// Tokenizer checkpoint.
        #[arg(long)]
        tokenizer: PathBuf,
        /// Record file written by `tokenize`.
        #[arg(long)]
        records: PathBuf,
    },
    /// Draw class-conditional samples and a contact sheet.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Generator checkpoint.
        #[arg(long)]
        generator: PathBuf,
        /// Tokenizer checkpoint.
        #[arg(long)]
        tokenizer: PathBuf,
        /// Comma-separated class labels, cycled to fill `--n`.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<usize>>,
        /// Number of images; defaults to `samples_per_class` per class.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Reconstruct dataset images through the tokenizer.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Tokenizer checkpoint.
        #[arg(long)]
        tokenizer: PathBuf,
        /// Dataset directory written by `make-data`.
        #[arg(long)]
        data: PathBuf,
        /// Number of images; defaults to 16.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Reconstruction, codebook, step-accuracy and class-consistency metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Tokenizer checkpoint.
        #[arg(long)]
        tokenizer: PathBuf,
        /// Generator checkpoint; sampling metrics are skipped without it.
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Dataset directory written by `make-data`.
        #[arg(long)]
        data: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::MakeData { common }
            | Command::TrainTokenizer { common, .. }
            | Command::Tokenize { common, .. }
            | Command::TrainGenerator { common, .. }
            | Command::Sample { common, .. }
            | Command::Reconstruct { common, .. }
            | Command::Eval { common, .. } => common,
        }
    }
}

pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const MISSING_FILE: i32 = 4;
    pub const GEOMETRY: i32 = 5;
    pub const FORMAT: i32 = 6;
    pub const DIVERGENCE: i32 = 7;
    pub const IO: i32 = 8;
}

/// Exit code and short category name for an error.
pub fn classify(err: &Error) -> (i32, &'static str) {
    match err {
        Error::Config(_) => (exit::CONFIG, "config"),
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            (exit::MISSING_FILE, "missing_file")
        }
        Error::Io { .. } => (exit::IO, "io"),
        Error::Geometry(_) => (exit::GEOMETRY, "geometry"),
        Error::Format { .. } | Error::Record { .. } => (exit::FORMAT, "format"),
        Error::Divergence { .. } => (exit::DIVERGENCE, "divergence"),
        _ => (exit::OTHER, "internal"),
    }
}

/// One-line JSON error description.
pub fn error_line(err: &Error) -> String {
    let (code, kind) = classify(err);
    json!({ "error": kind, "exit_code": code, "message": err.to_string() }).to_string()
}

fn configure_threads() -> rdpm::Result<()> {
    let Ok(raw) = std::env::var("RDPM_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("RDPM_THREADS must be a positive integer, got {raw:?}")))?;
    // A pool already built by an earlier in-process run is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

pub fn load_config(common: &Common) -> rdpm::Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

pub fn execute(command: &Command) -> rdpm::Result<()> {
    configure_threads()?;
    let common = command.common();
    let ctx = Context::new(load_config(common)?, common.out.clone(), common.quiet)?;
    match command {
        Command::MakeData { .. } => commands::make_data(&ctx),
        Command::TrainTokenizer { data, .. } => commands::train_tokenizer_cmd(&ctx, data),
        Command::Tokenize { tokenizer, data, .. } => commands::tokenize_cmd(&ctx, tokenizer, data),
        Command::TrainGenerator { tokenizer, records, .. } => commands::train_generator_cmd(&ctx, tokenizer, records),
        Command::Sample {
            generator,
            tokenizer,
            labels,
            n,
            ..
        } => commands::sample_cmd(&ctx, generator, tokenizer, labels.as_deref(), *n),
        Command::Reconstruct { tokenizer, data, n, .. } => commands::reconstruct_cmd(&ctx, tokenizer, data, *n),
        Command::Eval {
            tokenizer,
            generator,
            data,
            ..
        } => commands::eval_cmd(&ctx, tokenizer, generator.as_deref(), data).map(|_| ()),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Failures print a single JSON line on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return exit::OK;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!(
                "{}",
                json!({ "error": "usage", "exit_code": exit::USAGE, "message": first })
            );
            return exit::USAGE;
        }
    };
    match execute(&cli.command) {
        Ok(()) => exit::OK,
        Err(err) => {
            eprintln!("{}", error_line(&err));
            classify(&err).0
        }
    }
}

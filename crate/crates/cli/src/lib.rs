//! Command-line driver: vocabulary building, training, evaluation, tagging,
//! scoring, KB ablation, synthetic data and gradient checks.

pub mod checkpoint;
mod commands;
pub mod experiment;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use experiment::{Mode, Profile, Switch};

/// Exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERIC: i32 = 3;
}

#[derive(Parser, Debug)]
#[command(name = "kalm", version, about = "Knowledge-augmented language model")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand. Command-line values override the
/// configuration file.
#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// Experiment configuration file (key = value lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, global = true, value_enum)]
    pub feedback: Option<Switch>,
    /// Weight of the KL type-prior term; a positive value enables it.
    #[arg(long = "kl-lambda", global = true)]
    pub kl_lambda: Option<f64>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Worker threads for evaluation and gradient computation (0 = all).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the general and per-type vocabularies.
    BuildVocab {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Checkpoint to write (defaults to `output` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Perplexity of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Defaults to the `.vocab` file next to the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Tag sentences with entity types, CoNLL style on standard output.
    Tag {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One sentence per line, or a CoNLL file (`.conll`).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Type prior TSV; defaults to the `.prior.tsv` next to the checkpoint.
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Decode from the posterior alone.
        #[arg(long)]
        no_prior: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entity-level F1 of predicted tags against gold tags.
    Score {
        /// Two-column `token tag` file.
        #[arg(long)]
        pred: PathBuf,
        /// Gold CoNLL file.
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        type_map: Option<PathBuf>,
        /// Also write the report as TSV.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Retrain with increasingly corrupted knowledge bases.
    AblateKb {
        /// Comma-separated fractions in [0, 1].
        #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
        fractions: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write the planted-entity corpus and a matching experiment config.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        valid: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
    },
    /// Finite-difference check of the training objective on a toy model.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

pub fn exit_code(err: &kalm::Error) -> i32 {
    match err {
        kalm::Error::Config(_) => exit::USAGE,
        kalm::Error::NonFinite(_) => exit::NUMERIC,
        kalm::Error::Dimension { .. } | kalm::Error::Parse { .. } | kalm::Error::Data(_) | kalm::Error::Io { .. } => {
            exit::DATA
        }
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.global.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .try_init();
    match commands::dispatch(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

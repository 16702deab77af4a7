mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

/// How a command failed: bad input (exit 2) or a failure while running
/// (exit 1).
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<dialcrit::Error> for Failure {
    fn from(e: dialcrit::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

#[derive(Parser)]
#[command(name = "dialcrit", version, about = "Offline-RL critics for dialogue policy evaluation and optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/valid/test corpora from a mix of behavior policies.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        /// Ontology TOML; the bundled one when omitted.
        #[arg(long)]
        ontology: Option<PathBuf>,
        /// Comma-separated policy=weight pairs, e.g. eps-0.1=0.5,eps-0.6=0.5.
        #[arg(long)]
        policy_mix: Option<String>,
        /// Training episodes.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the latent-action model on a corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a latent policy with the offline actor-critic.
    TrainPlas {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory of `pretrain`.
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the pretrained policy with REINFORCE on pseudo-dialogue reward.
    TrainReinforce {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one policy.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        corpus: PathBuf,
        /// oracle, random, eager, eps-<e>, sl:<dir>, plas:<dir> or reinforce:<dir>.
        #[arg(long)]
        policy: String,
        #[arg(long, value_enum, default_value_t = Mode::All)]
        mode: Mode,
        /// Report file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate at least three policies and correlate each metric with the
    /// simulated success.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated policy specs.
        #[arg(long, value_delimiter = ',', required = true)]
        policies: Vec<String>,
        /// Output directory for the comparison and its CSV table.
        #[arg(long)]
        report: PathBuf,
    },
    /// Print the summary table of a comparison.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Args, Clone)]
struct EvalFlags {
    /// Critic seeds, comma-separated (at least three).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Simulated dialogues per policy.
    #[arg(long)]
    rollouts: Option<usize>,
    /// Threads for simulated rollouts.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Fqe,
    Pseudo,
    Oracle,
    All,
}

impl Mode {
    fn modes(self) -> dialcrit::evaluator::Modes {
        use dialcrit::evaluator::Modes;
        match self {
            Mode::Fqe => Modes { fqe: true, pseudo: false, oracle: false },
            Mode::Pseudo => Modes { fqe: false, pseudo: true, oracle: false },
            Mode::Oracle => Modes { fqe: false, pseudo: false, oracle: true },
            Mode::All => Modes::ALL,
        }
    }
}

fn main() -> ExitCode {
    let defaults = format!(
        "Defaults of every configuration key (override with --config):\n\n{}",
        config::RunConfig::default().to_toml()
    );
    let matches = Cli::command().after_long_help(defaults).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

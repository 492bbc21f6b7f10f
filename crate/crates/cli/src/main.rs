//! Command-line front end for the offline RL pipeline.
//!
//! Every subcommand reads an optional TOML run configuration (`--config`)
//! and applies command-line flags on top of it, so precedence is flags >
//! file > built-in defaults. The effective configuration is echoed into the
//! output directory; re-running from that echo reproduces the run byte for
//! byte.
//!
//! Exit codes: 0 on success, 2 for configuration/usage errors (including
//! those found inside a config file), 1 for runtime failures. No
//! environment variable changes behavior; only terminal color detection
//! reads the environment.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use daqn_core::commands::{self, CommandOutput, RunConfig};
use daqn_core::Error;

#[derive(Parser)]
#[command(
    name = "daqn",
    version,
    about = "Offline RL on clinical episode logs: synthetic cohorts, \
             attention Q-networks, off-policy evaluation, and attention \
             interpretation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic partially observable cohort plus ground truth.
    Generate(GenerateArgs),
    /// Train one Q-network architecture on a cohort.
    Train(TrainArgs),
    /// Off-policy evaluation of learned policies against baselines.
    Evaluate(EvaluateArgs),
    /// Attention-marker correlations and attention trace figures.
    Interpret(InterpretArgs),
    /// Finite-difference audit of every gradient in the code base.
    Gradcheck(GradcheckArgs),
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration; flags given here override file values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Top-level seed; every random stream in the run derives from it.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections (0 keeps the default).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

impl CommonArgs {
    fn base(&self, command: &str) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_toml_path(path)?,
            None => RunConfig::default(),
        };
        cfg.command = command.into();
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.to_string_lossy().into_owned();
        }
        if let Some(threads) = self.threads {
            cfg.threads = threads;
        }
        Ok(cfg)
    }
}

/// Flags naming the input cohort, shared by train/evaluate/interpret.
#[derive(Args)]
struct CohortArgs {
    /// Input cohort file (overrides `cohort.path`).
    #[arg(long, value_name = "PATH")]
    cohort: Option<PathBuf>,
    /// Cohort schema file (overrides `cohort.schema`).
    #[arg(long, value_name = "PATH")]
    schema: Option<PathBuf>,
}

impl CohortArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.cohort {
            cfg.cohort.path = p.to_string_lossy().into_owned();
        }
        if let Some(p) = &self.schema {
            cfg.cohort.schema = p.to_string_lossy().into_owned();
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of episodes to sample (overrides `synthetic.n_episodes`).
    #[arg(long, value_name = "N")]
    episodes: Option<usize>,
}

impl GenerateArgs {
    fn into_config(self) -> Result<RunConfig, Error> {
        let mut cfg = self.common.base("generate")?;
        if let Some(n) = self.episodes {
            cfg.synthetic.n_episodes = n;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    inputs: CohortArgs,
    /// Architecture to train: daqn, dqn-mlp, or drqn-lstm.
    #[arg(long, value_name = "TAG")]
    arch: Option<String>,
    /// Optimizer batches (overrides `train.batches`).
    #[arg(long, value_name = "N")]
    batches: Option<usize>,
}

impl TrainArgs {
    fn into_config(self) -> Result<RunConfig, Error> {
        let mut cfg = self.common.base("train")?;
        self.inputs.apply(&mut cfg);
        if let Some(arch) = self.arch {
            cfg.net.arch = arch;
        }
        if let Some(batches) = self.batches {
            cfg.train.batches = batches;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    inputs: CohortArgs,
    /// Evaluation splits (overrides `ope.n_splits`).
    #[arg(long, value_name = "N")]
    splits: Option<usize>,
    /// Comma-separated architecture tags to evaluate.
    #[arg(long, value_delimiter = ',', value_name = "TAGS")]
    archs: Option<Vec<String>>,
    /// Retrain per split (true) or load fixed checkpoints (false).
    #[arg(long, value_name = "BOOL")]
    retrain: Option<bool>,
    /// Fixed checkpoint as ARCH=PATH; repeat per architecture. Used when
    /// retraining is disabled.
    #[arg(long = "checkpoint", value_name = "ARCH=PATH")]
    checkpoints: Vec<String>,
}

impl EvaluateArgs {
    fn into_config(self) -> Result<RunConfig, Error> {
        let mut cfg = self.common.base("evaluate")?;
        self.inputs.apply(&mut cfg);
        if let Some(splits) = self.splits {
            cfg.ope.n_splits = splits;
        }
        if let Some(archs) = self.archs {
            cfg.evaluate.archs = archs;
        }
        if let Some(retrain) = self.retrain {
            cfg.ope.retrain = retrain;
        }
        for entry in &self.checkpoints {
            let (arch, path) = entry.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "--checkpoint expects ARCH=PATH, got {entry:?}"
                ))
            })?;
            cfg.evaluate
                .checkpoints
                .insert(arch.to_string(), path.to_string());
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct InterpretArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    inputs: CohortArgs,
    /// Trained attention-policy checkpoint to explain.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Episode id to draw trace figures for (default: first episode).
    #[arg(long, value_name = "ID")]
    episode: Option<String>,
    /// Episodes to include in the raw trace dump (0 skips it).
    #[arg(long, value_name = "N")]
    dump_episodes: Option<usize>,
}

impl InterpretArgs {
    fn into_config(self) -> Result<RunConfig, Error> {
        let mut cfg = self.common.base("interpret")?;
        self.inputs.apply(&mut cfg);
        if let Some(ckpt) = &self.checkpoint {
            cfg.interpret.checkpoint = ckpt.to_string_lossy().into_owned();
        }
        if let Some(episode) = self.episode {
            cfg.interpret.episode = episode;
        }
        if let Some(n) = self.dump_episodes {
            cfg.interpret.dump_episodes = n;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Also run the fault-injection self-test: a deliberately corrupted
    /// gradient must be reported and fail the command.
    #[arg(long)]
    inject_failure: bool,
}

impl GradcheckArgs {
    fn into_config(self) -> Result<RunConfig, Error> {
        let mut cfg = self.common.base("gradcheck")?;
        if self.inject_failure {
            cfg.gradcheck.inject_failure = true;
        }
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<CommandOutput, Error> {
    let cfg = match cli.command {
        Command::Generate(args) => args.into_config()?,
        Command::Train(args) => args.into_config()?,
        Command::Evaluate(args) => args.into_config()?,
        Command::Interpret(args) => args.into_config()?,
        Command::Gradcheck(args) => args.into_config()?,
    };
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot apply --threads: {e}")))?;
    }
    commands::run(&cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(output) => {
            println!("{}", output.summary);
            if !output.artifacts.is_empty() {
                println!("wrote:");
                for path in &output.artifacts {
                    println!("  {}", path.display());
                }
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

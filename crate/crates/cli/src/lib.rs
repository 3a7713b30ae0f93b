//! Command-line front end: configuration files, checkpoints and the
//! subcommands behind the `midus` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod costs;
pub mod error;
pub mod setup;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use midus::upscale::PlacementPolicy;
use midus::Precision;

pub use config::ExperimentConfig;
pub use error::CliError;

use commands::Output;

#[derive(Debug, Parser)]
#[command(name = "midus", version, about = "Train, benchmark and analyse memory-infused up-scaled models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory. Tables go to stdout when omitted (except `train`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub precision: Option<Precision>,
    /// Largest token count routed to the fused Top-k kernel.
    #[arg(long, global = true)]
    pub fused_threshold: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the configured model, train it and write artifacts to --out.
    Train,
    /// Mean masked loss of a checkpoint on fresh sequences.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequences: Option<usize>,
    },
    /// Two-stage vs fused product-key Top-k over a token-count sweep.
    BenchTopk {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,128,256")]
        tokens: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Prefill cost of a transformer block vs an HML block over prompt lengths.
    BenchPrefill {
        #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,256")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Trainable and total parameters per up-scaling method.
    Params,
    /// Insert positions of a placement policy.
    Policy {
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        inserts: usize,
        /// All policies when omitted.
        #[arg(long)]
        policy: Option<PlacementPolicy>,
    },
    /// Per-head importance scores and per-layer variance.
    HeadImportance {
        /// Untrained model from the config when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sequences: Option<usize>,
    },
    /// Finite-difference verification of every backward pass (64-bit).
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

impl GlobalArgs {
    /// Loads the config, applies flag overrides and validates the result.
    pub fn config(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        if let Some(t) = self.fused_threshold {
            cfg.fused_threshold = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let out = Output { dir: g.out.clone() };
    match cli.command {
        Command::Train => {
            let cfg = g.config()?;
            let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("run"));
            commands::train_cmd(&cfg, &dir)
        }
        Command::Eval { checkpoint, sequences } => commands::eval_cmd(&checkpoint, sequences, g.seed, &out),
        Command::BenchTopk { tokens, reps } => commands::bench_topk_cmd(&g.config()?, &tokens, reps, &out),
        Command::BenchPrefill { lengths, reps } => commands::bench_prefill_cmd(&g.config()?, &lengths, reps, &out),
        Command::Params => commands::params_cmd(&g.config()?, &out),
        Command::Policy {
            layers,
            inserts,
            policy,
        } => {
            Output { dir: None }.emit("policy.txt", &commands::policy_cmd(layers, inserts, policy)?)
        }
        Command::HeadImportance { checkpoint, sequences } => {
            let explicit = if g.config.is_some() || checkpoint.is_none() {
                Some(g.config()?)
            } else {
                None
            };
            commands::head_importance_cmd(explicit.as_ref(), checkpoint.as_deref(), sequences, g.seed, &out)
        }
        Command::Gradcheck { corrupt } => commands::gradcheck_cmd(g.seed.unwrap_or(0), corrupt, &out),
    }
}

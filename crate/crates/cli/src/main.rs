//! `modalign`: split, pre-train, align and evaluate from one config file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use modalign::synth::SynthConfig;
use modalign::Domain;

use crate::config::{apply_override, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "modalign",
    version,
    about = "Cross-domain recommendation experiments"
)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, short, global = true, default_value = "config.toml")]
    config: PathBuf,
    /// Override a config key, e.g. `--set adaptation.epochs=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Override the top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Split both domains into train/validation/test.
    Split,
    /// Build side features and pre-train one CF model per domain.
    Train,
    /// Align the pre-trained models adversarially and report target metrics.
    Adapt,
    /// Evaluate a checkpoint on its domain's test split.
    Eval {
        /// Defaults to the checkpoint written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "target")]
        domain: DomainArg,
    },
    /// Grid over CF learning rate and regularization on the target domain.
    Sweep,
    /// Write a synthetic source/target bundle with a ready-to-run config.
    /// `--set` keys refer to the generator here.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
    },
}

fn experiment(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    ExperimentConfig::load(&cli.config, &overrides)
}

fn synth_config(cli: &Cli) -> anyhow::Result<SynthConfig> {
    let mut table = toml::Table::new();
    for o in &cli.overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(seed) = cli.seed {
        table.insert(
            "seed".into(),
            toml::Value::Integer(seed.try_into().context("seed too large")?),
        );
    }
    toml::Value::Table(table)
        .try_into()
        .context("invalid generator settings")
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Split => commands::cmd_split(&experiment(cli)?),
        Command::Train => commands::cmd_train(&experiment(cli)?),
        Command::Adapt => commands::cmd_adapt(&experiment(cli)?),
        Command::Eval { checkpoint, domain } => {
            commands::cmd_eval(&experiment(cli)?, checkpoint.as_deref(), (*domain).into())
        }
        Command::Sweep => commands::cmd_sweep(&experiment(cli)?),
        Command::GenSynth { out } => commands::cmd_gen_synth(out, &synth_config(cli)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

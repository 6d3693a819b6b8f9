use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dxalign::pipeline::{self, ExperimentConfig, PipelineError};

#[derive(Parser)]
#[command(name = "dxalign", version, about = "Rule-aligned dialogue synthesis and preference alignment")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set sft.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Global seed; replaces the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert single-turn records into multi-turn dialogues.
    Gen,
    /// Rewrite converted dialogues to follow their diagnostic rules.
    Ruleify,
    /// Disease-stratified train/test split.
    Split,
    /// Build preference pairs from the supervised checkpoint.
    Forge,
    /// Supervised training on the train split.
    TrainSft,
    /// Preference training from the supervised checkpoint.
    TrainDpo,
    /// Single-round metrics and rule compliance on the test split.
    Eval {
        /// Checkpoint to evaluate; the preference checkpoint when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Simulated-patient battery.
    SpTest {
        /// Checkpoints to compare; the supervised and preference ones when omitted.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Every ablation arm over the configured seeds.
    Ablate,
    /// Print the resolved config.
    Config,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, PipelineError> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    match &cli.config {
        Some(p) => ExperimentConfig::load(p, &overrides),
        None => ExperimentConfig::from_toml("", &overrides, &std::env::current_dir().unwrap_or_default()),
    }
}

fn run(cli: &Cli) -> Result<String, PipelineError> {
    let cfg = load(cli)?;
    match &cli.command {
        Command::Gen => pipeline::cmd_gen(&cfg),
        Command::Ruleify => pipeline::cmd_ruleify(&cfg),
        Command::Split => pipeline::cmd_split(&cfg),
        Command::Forge => pipeline::cmd_forge(&cfg),
        Command::TrainSft => pipeline::cmd_train_sft(&cfg),
        Command::TrainDpo => pipeline::cmd_train_dpo(&cfg),
        Command::Eval { checkpoint } => {
            let ck = checkpoint.clone().unwrap_or_else(|| cfg.paths.dpo_checkpoint());
            pipeline::cmd_eval(&cfg, &ck)
        }
        Command::SpTest { checkpoints } => {
            let cks = if checkpoints.is_empty() {
                vec![cfg.paths.sft_checkpoint(), cfg.paths.dpo_checkpoint()]
            } else {
                checkpoints.clone()
            };
            pipeline::cmd_sp(&cfg, &cks)
        }
        Command::Ablate => pipeline::cmd_ablate(&cfg),
        Command::Config => Ok(cfg.to_toml()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

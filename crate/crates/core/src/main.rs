use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use starlab::harness::{self, Arm, Axis, ExperimentConfig, Outcome};
use starlab::Result;

/// Source-free self-training adaptation lab.
#[derive(Parser)]
#[command(name = "starlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write source and target corpora.
    GenCorpus,
    /// Train the source model.
    TrainSource,
    /// Adapt the source model to every target domain.
    Adapt {
        /// Single arm to run; all configured arms otherwise.
        #[arg(long)]
        arm: Option<String>,
    },
    /// Evaluate the frozen and adapted checkpoints.
    Evaluate,
    /// Rerun STAR across one axis.
    Sweep {
        /// One of train_size, threshold, rounds, alpha, lambda, tau.
        #[arg(long)]
        axis: String,
    },
    /// Aggregate evaluations across the configured seeds.
    Report,
    /// Print the effective configuration.
    ShowConfig,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn run(cli: &Cli, config: &ExperimentConfig) -> Result<Outcome> {
    let (out, force) = (cli.out.as_path(), cli.force);
    match &cli.command {
        Command::GenCorpus => harness::cmd_gen_corpus(config, out, force),
        Command::TrainSource => harness::cmd_train_source(config, out, force),
        Command::Adapt { arm } => {
            let arm = arm.as_deref().map(str::parse::<Arm>).transpose()?;
            harness::cmd_adapt(config, out, arm, force)
        }
        Command::Evaluate => harness::cmd_evaluate(config, out, force),
        Command::Sweep { axis } => harness::cmd_sweep(config, out, axis.parse::<Axis>()?, force),
        Command::Report => harness::cmd_report(config, out, force),
        Command::ShowConfig => {
            print!("{}", config.to_text());
            Ok(Outcome::default())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match load_config(cli.config.as_deref(), cli.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("starlab: {e}");
            return ExitCode::from(harness::EXIT_USAGE as u8);
        }
    };
    match run(&cli, &config) {
        Ok(outcome) => {
            for p in &outcome.written {
                println!("{}", p.display());
            }
            if let Some(w) = &outcome.warning {
                eprintln!("starlab: warning: {w}");
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("starlab: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}

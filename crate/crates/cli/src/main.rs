use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use flssm_core::experiment::output_root;
use flssm_core::{demo, run_experiment, Error, ExperimentConfig, SweepPreset};

#[derive(Parser)]
#[command(name = "flssm", version, about = "Federated-learning security testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its tables under $FLSSM_OUT (default ./out).
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// key=value, may be repeated; applied after the file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a named experiment matrix.
    Sweep {
        #[arg(long)]
        preset: Preset,
        /// Base config the preset varies.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print a scripted transcript of one mechanism.
    Demo { which: DemoKind },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Efficiency,
    Tracing,
    Incentive,
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoKind {
    Shamir,
    Tsa,
    Escrow,
}

fn load(config: Option<PathBuf>, seed: Option<u64>, mut overrides: Vec<String>) -> Result<ExperimentConfig, Error> {
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    ExperimentConfig::load(config.as_deref(), &overrides)
}

fn run_one(cfg: &ExperimentConfig) -> Result<(), Error> {
    let bundle = run_experiment(cfg, &output_root())?;
    println!(
        "{}: {} rounds, tables in {}",
        cfg.name,
        bundle.rounds_completed,
        bundle.run_dir.display()
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, seed, overrides } => run_one(&load(config, seed, overrides)?),
        Command::Sweep { preset, config, seed, overrides } => {
            let base = load(config, seed, overrides)?;
            let preset = match preset {
                Preset::Efficiency => SweepPreset::Efficiency,
                Preset::Tracing => SweepPreset::Tracing,
                Preset::Incentive => SweepPreset::Incentive,
            };
            for cfg in preset.configs(&base) {
                run_one(&cfg)?;
            }
            Ok(())
        }
        Command::Demo { which } => {
            let mut out = std::io::stdout().lock();
            let result = match which {
                DemoKind::Shamir => demo::shamir_demo(&mut out),
                DemoKind::Tsa => demo::tsa_demo(&mut out),
                DemoKind::Escrow => demo::escrow_demo(&mut out),
            };
            out.flush()?;
            result
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("flssm: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("flssm: {e}");
            ExitCode::from(3)
        }
    }
}

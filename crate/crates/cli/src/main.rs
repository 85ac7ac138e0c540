use std::path::PathBuf;
use std::process::ExitCode;

use cactusnet::data::SubsetCounts;
use cactusnet_cli::commands::{self, CmdError, SyntheticSetup};
use cactusnet_cli::{ExperimentConfig, Overrides};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cactusnet",
    version,
    about = "Layer applicability and CactusNet experiments"
)]
struct Cli {
    /// Experiment config (JSON). Fields can be overridden with CNL_<FIELD>.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base classifier on the known classes.
    TrainBase,
    /// Run the applicability sweep (resumable).
    Measure,
    /// Train one applicability predictor per tapped layer.
    TrainPredictors,
    /// Route an input stream through the CactusNet and grow branches.
    CactusRun {
        /// JSON-lines input stream.
        #[arg(long)]
        input: PathBuf,
        /// Score every node with each item's `mock_app` instead of trained predictors.
        #[arg(long)]
        mock_predictor: bool,
    },
    /// Collect plot-ready outputs into `<out>/report`.
    Report,
    /// Write a synthetic manifest, config and sample stream into `--out`.
    MakeSynthetic {
        #[arg(long, default_value_t = 5)]
        known: usize,
        #[arg(long, default_value_t = 6)]
        objective_unknown: usize,
        #[arg(long, default_value_t = 6)]
        nonobjective_unknown: usize,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long, default_value_t = 300)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        image_side: usize,
        #[arg(long, default_value_t = 4)]
        stream_per_class: usize,
    },
}

fn run(cli: Cli) -> Result<(), CmdError> {
    if let Command::MakeSynthetic {
        known,
        objective_unknown,
        nonobjective_unknown,
        k,
        per_class,
        image_side,
        stream_per_class,
    } = cli.command
    {
        let dir = cli.out.unwrap_or_else(|| PathBuf::from("."));
        let setup = SyntheticSetup {
            counts: SubsetCounts {
                known,
                objective_unknown,
                nonobjective_unknown,
            },
            k,
            per_class,
            image_side,
            train_fraction: 2.0 / 3.0,
            seed: cli.seed.unwrap_or(0),
            stream_per_class,
        };
        return commands::cmd_make_synthetic(&dir, &setup);
    }
    let path = cli
        .config
        .ok_or_else(|| CmdError::Config(anyhow::anyhow!("--config is required")))?;
    let overrides = Overrides {
        out: cli.out,
        seed: cli.seed,
        workers: cli.workers,
    };
    let cfg =
        ExperimentConfig::load(&path, std::env::vars(), &overrides).map_err(CmdError::Config)?;
    match cli.command {
        Command::TrainBase => {
            let s = commands::cmd_train_base(&cfg)?;
            println!("base test accuracy {:.4}", s.report.test_accuracy);
        }
        Command::Measure => {
            let s = commands::cmd_measure(&cfg)?;
            println!(
                "measured {} records ({} resumed), {} table entries",
                s.computed + s.resumed,
                s.resumed,
                s.table.len()
            );
        }
        Command::TrainPredictors => {
            let (s, _) = commands::cmd_train_predictors(&cfg)?;
            for l in &s.layers {
                println!(
                    "layer {}: train mse {:.5}, held-out mse {:.5}",
                    l.layer, l.train_mse, l.heldout_mse
                );
            }
        }
        Command::CactusRun {
            input,
            mock_predictor,
        } => {
            let (log, tree) = commands::cmd_cactus_run(&cfg, &input, mock_predictor)?;
            let s = log.stats;
            println!(
                "{} inputs: {} known, {} objective unknown, {} nonobjective unknown; {} branches",
                s.inputs,
                s.known,
                s.objective_unknown,
                s.nonobjective_unknown,
                tree.branch_count()
            );
        }
        Command::Report => {
            let dir = commands::cmd_report(&cfg)?;
            println!("report written to {}", dir.display());
        }
        Command::MakeSynthetic { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use e3bm::episode::Split;
use e3bm::trainer::RunConfig;
use e3bm_cli::{
    cmd_ablate, cmd_eval, cmd_trace, cmd_train, config_to_toml, format_accuracy, AblateOptions, CliError,
    TrainOptions,
};

#[derive(Parser)]
#[command(name = "e3bm", version, about = "Train and evaluate E3BM few-shot meta-learners")]
struct Cli {
    /// Print the default configuration as TOML and exit.
    #[arg(long)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct RunArgs {
    /// Worker threads for per-episode work; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Overrides the config seed and `E3BM_SEED`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train; writes state.json, history.csv and metrics.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Test episodes for the final evaluation.
        #[arg(long, default_value_t = 600)]
        episodes: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a snapshot.
    Eval {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 600)]
        episodes: usize,
        /// Result file; defaults to eval-<split>.json next to the snapshot.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run the ablation grid under shared seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 600)]
        episodes: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Emit alpha / v plot data from the history next to a snapshot.
    Trace {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.print_defaults {
        print!("{}", config_to_toml(&RunConfig::default()));
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Config("no subcommand given (see --help)".into()));
    };
    match command {
        Command::Train {
            config,
            out,
            episodes,
            run,
        } => {
            let m = cmd_train(&config, &out, run.seed, &TrainOptions {
                workers: run.workers,
                episodes,
            })?;
            log::info!(
                "{}: test {} at best iteration {}",
                m.run_id,
                format_accuracy(m.final_test.mean_acc, m.final_test.ci95),
                m.best_iteration
            );
        }
        Command::Eval {
            state,
            split,
            episodes,
            out,
            workers,
        } => {
            let acc = cmd_eval(&state, split, episodes, out.as_deref(), workers)?;
            println!("{}", format_accuracy(acc.mean_acc, acc.ci95));
        }
        Command::Ablate {
            config,
            out,
            split,
            episodes,
            run,
        } => {
            cmd_ablate(&config, &out, run.seed, &AblateOptions {
                split,
                episodes,
                workers: run.workers,
            })?;
            log::info!("ablation table written to {}", out.display());
        }
        Command::Trace { state, out } => {
            let n = cmd_trace(&state, &out)?;
            log::info!("{n} trace rows written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

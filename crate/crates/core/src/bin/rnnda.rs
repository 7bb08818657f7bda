use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rnnda::harness::commands::{self, CmdOutcome};
use rnnda::harness::config::load_config;

/// Twin experiments for network-surrogate data assimilation on a ring of
/// chaotic nodes: data generation, surrogate training, cycled estimation,
/// forecast evaluation, and parameter sweeps.
#[derive(Parser)]
#[command(name = "rnnda", version, about)]
struct Cli {
    /// Experiment configuration (TOML). Omitted fields take defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed, overriding the config file.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Output directory (also RNNDA_OUT), overriding the config file.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Config override as a dotted KEY=VALUE path; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads for sweeps.
    #[arg(long, global = true, value_name = "INT", default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the truth run and write train/test segments.
    Generate,
    /// Train the surrogate (optionally searching macro parameters first).
    Train,
    /// One cycled estimation experiment against the test run.
    Run,
    /// Closed-loop forecast skill, exponents, and ensemble statistics.
    Evaluate,
    /// Grid of cycled runs over the configured sweep axes.
    Sweep,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let out = cli.out.or_else(|| std::env::var_os("RNNDA_OUT").map(PathBuf::from));
    let result = load_config(cli.config.as_deref(), &cli.overrides, cli.seed, out).and_then(
        |cfg| match cli.command {
            Command::Generate => commands::cmd_generate(&cfg),
            Command::Train => commands::cmd_train(&cfg),
            Command::Run => commands::cmd_run(&cfg),
            Command::Evaluate => commands::cmd_evaluate(&cfg),
            Command::Sweep => commands::cmd_sweep(&cfg, cli.jobs),
        },
    );
    match result {
        Ok(CmdOutcome { diverged: false }) => ExitCode::SUCCESS,
        Ok(CmdOutcome { diverged: true }) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

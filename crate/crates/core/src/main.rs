//! `preflab` command-line entry point.
//!
//! Exit status: 0 when everything checked holds, 1 when a check or finding
//! fails or training diverges, 2 for usage errors and invalid inputs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "preflab", version, about = "Tabular preference-optimization laboratory")]
struct Cli {
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, env = "PREFLAB_OUT_DIR", default_value = "preflab-out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the numerical property checks.
    Verify(VerifyArgs),
    /// Train a policy from a TOML config.
    Train(ConfigArgs),
    /// Build a preference dataset from a TOML config.
    Datagen(ConfigArgs),
    /// Run a named suite or an experiment config.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("selection").required(true).args(["all", "check"])))]
pub struct VerifyArgs {
    /// Run every check.
    #[arg(long)]
    pub all: bool,
    /// Run one check (repeatable): coverage, sign_conditions, closed_form,
    /// loss_identity, online_reduction.
    #[arg(long, value_parser = commands::parse_check)]
    pub check: Vec<preflab::theory::Check>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub prompts: usize,
    #[arg(long, default_value_t = 8)]
    pub responses: usize,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    /// Responses left outside the pair distribution in the coverage check.
    #[arg(long, default_value_t = 2)]
    pub uncovered: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["suite", "config"])))]
pub struct ExperimentArgs {
    /// table1, table2, table3, table4 or khaki.
    #[arg(long)]
    pub suite: Option<preflab::harness::Suite>,
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// First replicate seed for suites; overrides the config's seeds otherwise.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();
    let result = match cli.command {
        Command::Verify(a) => commands::verify(&a),
        Command::Train(a) => commands::train(&a),
        Command::Datagen(a) => commands::datagen(&a),
        Command::Experiment(a) => commands::experiment(&a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

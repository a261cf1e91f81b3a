use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dwf_cli::commands::{
    cmd_init_stats, cmd_lasso_verify, cmd_prune, cmd_sweep, cmd_train, RunOptions, DATA_DIR_ENV,
};
use dwf_cli::config::{ExperimentConfig, Profile};
use dwf_cli::error::CliResult;

#[derive(Parser, Debug)]
#[command(version, about = "Sparse training by deep weight factorization")]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base directory for run outputs.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Epoch budget when the config does not set one.
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,

    /// Directory holding the IDX files.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train one factorized network.
    Train,
    /// Train over a grid of penalties and depths.
    Sweep,
    /// Run the pruning baselines.
    Prune,
    /// Compare the factorized lasso with coordinate descent.
    LassoVerify,
    /// Statistics of a factor initialization.
    InitStats,
}

fn run(args: &Args) -> CliResult<PathBuf> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(profile) = args.profile {
        cfg.profile = profile;
    }
    let opts = RunOptions {
        out: args.out.clone(),
        data_dir: args.data_dir.clone(),
    };
    Ok(match args.command {
        Command::Train => cmd_train(&cfg, &opts)?.0,
        Command::Sweep => cmd_sweep(&cfg, &opts)?.0,
        Command::Prune => cmd_prune(&cfg, &opts)?.0,
        Command::LassoVerify => cmd_lasso_verify(&cfg, &opts)?.0,
        Command::InitStats => cmd_init_stats(&cfg, &opts)?.0,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

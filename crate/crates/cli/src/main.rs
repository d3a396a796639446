use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swcrt_cli::{load_config, run, write_artifacts, CliError, Command, RunConfig};

#[derive(Parser)]
#[command(name = "swcrt", version, about = "Stepped-wedge trial weights, simulations and estimation")]
struct Cli {
    #[command(subcommand)]
    command: Sub,

    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for simulation.
    #[arg(long, global = true, env = "SWCRT_THREADS")]
    threads: Option<usize>,

    /// Base seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Sub {
    /// Estimand weight tables and curves.
    Weights,
    /// Monte Carlo study of one scenario.
    Simulate,
    /// Fit every requested model to a trial data file.
    Estimate {
        /// CSV with cluster, period, outcome (or mean and n) and sequence or treated.
        #[arg(long)]
        data: PathBuf,
    },
    /// Summarize the configured design.
    DesignInfo,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("cannot start {n} threads: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::defaults(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let explicit_out = cli.out.is_some();
    if let Some(dir) = cli.out {
        cfg = cfg.with_output_dir(dir);
    }
    let (command, data) = match cli.command {
        Sub::Weights => (Command::Weights, None),
        Sub::Simulate => (Command::Simulate, None),
        Sub::Estimate { data } => (Command::Estimate, Some(data)),
        Sub::DesignInfo => (Command::DesignInfo, None),
    };
    let outcome = run(command, &cfg, data.as_deref())?;
    print!("{}", outcome.summary);
    if command == Command::DesignInfo && !explicit_out {
        return Ok(());
    }
    for path in write_artifacts(&cfg.output.directory, &outcome.artifacts)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("swcrt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `mdsl`: partition data, run experiments, sweep heterogeneity and analyze
//! traces. Experiments are defined in JSON config files; flags only name
//! paths and a few overrides.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdsl_core::orchestrator::Algorithm;

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Exit 1: the inputs were readable but the computation rejected them.
    Domain(anyhow::Error),
    /// Exit 2: unreadable or invalid config, I/O, schema mismatch.
    Input(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Domain(_) => 1,
            Failure::Input(_) => 2,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Domain(e) | Failure::Input(e) => e,
        }
    }
}

#[derive(Parser)]
#[command(name = "mdsl", version, about = "Multi-worker selection distributed swarm learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct OutputArgs {
    /// Output directory. Defaults to <output root>/<config file stem>.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, env = "MDSL_OUTPUT_ROOT", default_value = "runs")]
    pub output_root: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the data and write shard manifests and the degree table.
    Partition {
        config: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Run one experiment and write its trace.
    Run {
        config: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
        #[arg(long, value_parser = parse_algorithm)]
        algorithm: Option<Algorithm>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Overrides every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Rerun the experiment over a list of concentrations and fit the
    /// degree coefficients on the results.
    Sweep {
        config: PathBuf,
        /// Comma-separated concentrations.
        #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.1,1,10,100,1000")]
        alphas: Vec<f64>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Convergence diagnostics for one or more trace JSON files.
    Analyze {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Directory for the diagnostics files; defaults to each trace's directory.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        probes: usize,
        #[arg(long, default_value_t = 0.5)]
        radius: f64,
        #[arg(long, default_value_t = 0)]
        probe_seed: u64,
    },
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown algorithm `{s}` (expected mdsl, multi_dsl, vanilla_dsl or fed_avg)"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Partition { config, output } => commands::partition(&config, &output),
        Command::Run {
            config,
            output,
            algorithm,
            rounds,
            seed,
            parallelism,
        } => commands::run(
            &config,
            &output,
            commands::Overrides {
                algorithm,
                rounds,
                seed,
                parallelism,
            },
        ),
        Command::Sweep { config, alphas, output } => commands::sweep(&config, &alphas, &output),
        Command::Analyze {
            traces,
            out,
            probes,
            radius,
            probe_seed,
        } => commands::analyze(&traces, out.as_deref(), probes, radius, probe_seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

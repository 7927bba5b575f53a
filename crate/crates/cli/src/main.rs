use std::io::{self, BufWriter};
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use quadcal_cli::config::{Experiment, RunConfig};
use quadcal_cli::experiments::{run_experiment, write_run};
use quadcal_cli::protocol::{serve, ServeKind};

#[derive(Parser)]
#[command(name = "quadcal", version, about = "Adaptive positive-weight quadrature for Bayesian prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration; fields not given keep the experiment defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Uniform prior with a Beta-kernel likelihood on [0, 1].
    #[command(name = "analytic_beta", alias = "analytic-beta")]
    AnalyticBeta(RunArgs),
    /// Two-dimensional Genz calibration problems.
    Genz2d(RunArgs),
    /// Five-dimensional Genz calibration problems.
    Genz5d(RunArgs),
    /// Genz error growth with dimension.
    #[command(name = "genz_dim", alias = "genz-dim")]
    GenzDim(RunArgs),
    /// Calibration of a vector-valued model with a GP discrepancy likelihood.
    Calibrate(RunArgs),
    /// Serve a builtin model over the subprocess protocol on stdin/stdout.
    #[command(name = "serve-model", hide = true)]
    ServeModel {
        #[arg(value_enum)]
        kind: ServeKind,
        /// Output locations of the toy model.
        #[arg(long, default_value_t = 20)]
        locations: usize,
    },
}

fn run(experiment: Experiment, args: RunArgs) -> Result<()> {
    let mut config = RunConfig::load(experiment, args.config.as_deref())?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(r) = args.repeats {
        config.repeats = r;
    }
    if let Some(o) = args.out {
        config.out = o;
    }
    if let Some(t) = args.threads {
        config.threads = Some(t);
    }
    config.validate()?;
    if args.print_config {
        println!("{}", config.to_json_pretty());
        return Ok(());
    }
    let output = run_experiment(&config)?;
    write_run(&config, &output, &config.out)?;
    eprintln!("wrote {}", config.out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::AnalyticBeta(a) => run(Experiment::AnalyticBeta, a),
        Command::Genz2d(a) => run(Experiment::Genz2d, a),
        Command::Genz5d(a) => run(Experiment::Genz5d, a),
        Command::GenzDim(a) => run(Experiment::GenzDim, a),
        Command::Calibrate(a) => run(Experiment::Calibrate, a),
        Command::ServeModel { kind, locations } => {
            let stdin = io::stdin().lock();
            let stdout = BufWriter::new(io::stdout().lock());
            serve(kind, locations, stdin, stdout)?;
            Ok(())
        }
    }
}

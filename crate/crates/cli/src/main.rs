//! Command-line front end for the outage-detection pipeline.
//!
//! Subcommands follow the workflow: `regions` builds and caches the critical
//! region atlases, `simulate` produces a market-data stream, `detect` runs
//! the CuSum identification over a stream, `calibrate` estimates ARL per
//! threshold, and `bench` reproduces the full performance table.

mod commands;
mod config;

use clap::{Parser, Subcommand};

use config::CommonArgs;

#[derive(Parser)]
#[command(
    name = "outagewatch",
    version,
    about = "Outage detection from market-clearing data streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build (or load from cache) the critical-region atlases for the nominal
    /// and every hypothesized post-outage market structure; export region
    /// counts and 2-D region polygons.
    Regions {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Simulate the scenario and write the stream CSV
    /// (schema: t, xi_1..xi_k, lmp_1..lmp_n, g_total).
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the CuSum detector over a stream CSV; writes the outcome summary
    /// and the per-step statistic trace.
    Detect {
        #[command(flatten)]
        common: CommonArgs,
        /// Stream CSV produced by `simulate` (or exported market data).
        #[arg(long)]
        stream: std::path::PathBuf,
        /// Detection threshold η.
        #[arg(long)]
        eta: Option<f64>,
        /// Pick η from a calibration report to meet this target ARL.
        #[arg(long)]
        target_arl: Option<f64>,
        /// Calibration CSV (required with --target-arl).
        #[arg(long)]
        calibration: Option<std::path::PathBuf>,
    },
    /// Estimate ARL-to-false-alarm per threshold over nominal trajectories.
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
        /// Thresholds to tabulate, e.g. 10,20,30,40,50,60.
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50,60")]
        etas: Vec<f64>,
        /// Trajectories per row.
        #[arg(long, default_value_t = 1000)]
        trajectories: usize,
        /// Nominal horizon per trajectory.
        #[arg(long, default_value_t = 5000)]
        t_max: usize,
        /// Reduce trajectories to 200 for quick runs.
        #[arg(long)]
        fast: bool,
        /// Also pick the smallest η whose ARL reaches this target.
        #[arg(long)]
        target_arl: Option<f64>,
    },
    /// Monte Carlo performance table: offline ARL columns plus detection
    /// delay, false/successful detection and identification probabilities.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50,60")]
        etas: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        trajectories: usize,
        /// Horizon for the offline ARL columns.
        #[arg(long, default_value_t = 5000)]
        t_max: usize,
        /// Reduce trajectories to 200 for quick runs.
        #[arg(long)]
        fast: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Regions { common } => commands::regions(&common),
        Command::Simulate { common } => commands::simulate(&common),
        Command::Detect {
            common,
            stream,
            eta,
            target_arl,
            calibration,
        } => commands::detect(&common, &stream, eta, target_arl, calibration.as_deref()),
        Command::Calibrate {
            common,
            etas,
            trajectories,
            t_max,
            fast,
            target_arl,
        } => {
            let n = if fast { 200 } else { trajectories };
            commands::calibrate(&common, &etas, n, t_max, target_arl)
        }
        Command::Bench {
            common,
            etas,
            trajectories,
            t_max,
            fast,
        } => {
            let n = if fast { 200 } else { trajectories };
            commands::bench(&common, &etas, n, t_max)
        }
    };
    if let Err(err) = result {
        log::error!("{err:#}");
        std::process::exit(config::exit_code(&err));
    }
}

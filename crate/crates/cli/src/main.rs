//! `netpart`: batch front end for the road-network partitioning pipeline.
//!
//! Each subcommand turns files into files under `--out`, so every stage can
//! be re-run and inspected on its own. All randomness flows through seed
//! flags: identical inputs and flags produce byte-identical outputs.

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod artifacts;
mod commands;

/// Failure classes, one exit code each so scripts can branch on what broke.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable, malformed, or inconsistent inputs — exit 2.
    Input(String),
    /// Training loss left the finite range — exit 3.
    Divergence(String),
    /// Requested cluster count outside what the graph supports — exit 4.
    InfeasibleK(String),
    /// Partition and evaluation inputs disagree — exit 5.
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::InfeasibleK(_) => 4,
            CliError::Mismatch(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m)
            | CliError::Divergence(m)
            | CliError::InfeasibleK(m)
            | CliError::Mismatch(m) => f.write_str(m),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "netpart",
    version,
    about = "Partition a road network from daily speed series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct InputArgs {
    /// Speed records CSV: date,period,road_id,speed,sample_vehicles.
    #[arg(long)]
    records: PathBuf,
    /// Edge list CSV: road_a,road_b per row, defining road adjacency.
    #[arg(long)]
    edges: PathBuf,
    /// Base of the period column in the records file (0 or 1).
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=1))]
    period_base: u8,
    /// Restrict to one day (YYYYMMDD) or keep every date ("all").
    #[arg(long, default_value = "all")]
    date: String,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory; created if absent. Filenames inside are fixed.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ThreadArgs {
    /// Cap on worker threads (default: all cores). Outputs never depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate records and edges, impute gaps, and dump the daily series.
    Ingest {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Encode each road-day series into a Gramian Angular Field matrix.
    Encode {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Mean-pool each series to this many slots before encoding.
        #[arg(long)]
        paa: Option<usize>,
    },
    /// Train the convolutional autoencoder on the encoded matrices.
    Train {
        #[command(flatten)]
        out: OutArgs,
        /// Training epochs.
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        /// Mini-batch size.
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Learning rate applied to the batch-mean per-pixel gradient.
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        /// Seed for weight init and shuffling.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        threads: ThreadArgs,
    },
    /// Run the trained encoder over the matrices and dump feature vectors.
    Features {
        #[command(flatten)]
        out: OutArgs,
        /// Restrict to one day (YYYYMMDD) or keep every date ("all").
        #[arg(long, default_value = "all")]
        date: String,
        #[command(flatten)]
        threads: ThreadArgs,
    },
    /// Cluster the road graph into k connected sub-networks.
    Partition {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        out: OutArgs,
        /// ae-hier (autoencoder features), spectral, or raw-hier (raw series).
        #[arg(long)]
        method: String,
        /// Single cluster count "K" or inclusive sweep "A..B".
        #[arg(long)]
        k: String,
        /// For raw-hier: mean-pool series to this many slots first.
        #[arg(long)]
        paa: Option<usize>,
        /// GeoJSON FeatureCollection with a road_id property per feature;
        /// a copy annotated with cluster indices is written per k.
        #[arg(long)]
        geometry: Option<PathBuf>,
        #[command(flatten)]
        threads: ThreadArgs,
    },
    /// Score partition files and tabulate method-vs-method improvements.
    Evaluate {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Only score partitions produced by this method.
        #[arg(long)]
        method: Option<String>,
        /// Only score partitions with this k or inside this "A..B" range.
        #[arg(long)]
        k: Option<String>,
        #[command(flatten)]
        threads: ThreadArgs,
    },
    /// Generate a synthetic grid scenario: records, edges, and ground truth.
    Synth {
        /// Scenario JSON file.
        scenario: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Rebuild the comparison table from report files already in --out.
    Compare {
        #[command(flatten)]
        out: OutArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

mod commands;
mod config;
mod error;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use haate_core::Estimator;

use commands::{AssignArgs, Mode, SimulateArgs};
use error::{CliError, CliResult};

/// Design and simulation tools for saturation-randomized cluster experiments.
#[derive(Parser)]
#[command(name = "haate", version, about)]
struct Cli {
    /// Worker threads for the simulation pool (default: all cores).
    #[arg(long, global = true, env = "HAATE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte Carlo sweep described by a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report the minimum-RMSE design for one (rho_u, c) stratum.
    SelectDesign {
        /// cells.csv or cells.json from a previous run.
        #[arg(long)]
        cells: PathBuf,
        #[arg(long)]
        rho_u: f64,
        #[arg(long)]
        c: f64,
        /// lm or dm.
        #[arg(long, default_value = "dm")]
        estimator: Estimator,
    },
    /// Randomize clusters and units to arms.
    #[command(group(ArgGroup::new("cluster_src").required(true).args(["clusters", "cluster_ids"])))]
    #[command(group(ArgGroup::new("size_src").required(true).args(["cluster_size", "sizes"])))]
    #[command(group(ArgGroup::new("intensity").required(true).args(["alpha", "target_icc"])))]
    Assign {
        /// Number of clusters, labelled 0..J-1.
        #[arg(long, visible_alias = "J")]
        clusters: Option<usize>,
        /// File with one cluster identifier per line.
        #[arg(long)]
        cluster_ids: Option<PathBuf>,
        #[arg(long, visible_alias = "n")]
        cluster_size: Option<usize>,
        /// Comma-separated size per cluster.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Number of non-control arms.
        #[arg(long, visible_alias = "M", default_value_t = 2)]
        treatments: usize,
        /// Symmetric Dirichlet concentration per arm.
        #[arg(long)]
        alpha: Option<f64>,
        /// Target treatment ICC; sets the concentration.
        #[arg(long)]
        target_icc: Option<f64>,
        #[arg(long, value_enum, default_value = "two-stage")]
        mode: Mode,
        /// Size of the quasi-random draw table (sobol mode).
        #[arg(long = "K", visible_alias = "k")]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "assignment.csv")]
        out: PathBuf,
    },
    /// Plot RMSE against the treatment ICC.
    Plot {
        #[arg(long)]
        cells: PathBuf,
        #[arg(long)]
        c: f64,
        /// Comma-separated rho_u values to include (default: all).
        #[arg(long, value_delimiter = ',')]
        rho_u: Option<Vec<f64>>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate {
            config,
            output_dir,
            iterations,
            seed,
        } => commands::simulate(SimulateArgs {
            config,
            output_dir,
            iterations,
            seed,
        }),
        Command::SelectDesign {
            cells,
            rho_u,
            c,
            estimator,
        } => commands::select_design(&cells, rho_u, c, estimator),
        Command::Assign {
            clusters,
            cluster_ids,
            cluster_size,
            sizes,
            treatments,
            alpha,
            target_icc,
            mode,
            k,
            seed,
            out,
        } => commands::assign(AssignArgs {
            clusters,
            cluster_ids,
            cluster_size,
            sizes,
            treatments,
            alpha,
            target_icc,
            mode,
            k,
            seed,
            out,
        }),
        Command::Plot {
            cells,
            c,
            rho_u,
            out_dir,
        } => commands::plot(&cells, c, rho_u, &out_dir),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

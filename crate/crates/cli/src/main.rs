use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Asymptotic system solver and finite-sample checks for ridge-regularized robust regression.
#[derive(Debug, Parser)]
#[command(name = "proxasym", version)]
struct Cli {
    /// TOML experiment config; supplies models, seeds, tolerances and settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed. Seed lists become `seed, seed + 1, ...`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Directory for CSV and JSON outputs.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct ModelArgs {
    /// Loss: a name (quadratic, smoothed_huber, smoothed_huber_ridge) or an inline TOML table.
    #[arg(long)]
    loss: Option<String>,
    /// Noise: a name (gaussian, laplace_smoothed) or an inline TOML table.
    #[arg(long)]
    noise: Option<String>,
    /// Design entries: gaussian, rademacher or uniform_scaled.
    #[arg(long)]
    entry_law: Option<String>,
}

#[derive(Debug, Clone, Args)]
struct CellArgs {
    #[arg(long)]
    n: Option<usize>,
    /// Number of predictors; defaults to round(kappa n).
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the asymptotic system for (r, c).
    Solve {
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[command(flatten)]
        model: ModelArgs,
        /// Also trace the solution along the configured tau grid and extrapolate to tau = 0.
        #[arg(long)]
        tau_limit: bool,
        /// Write the JSON record here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit one simulated data set.
    Fit {
        #[command(flatten)]
        cell: CellArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Include beta_hat and the residuals in the output.
        #[arg(long)]
        dump: bool,
    },
    /// Leave-one-observation-out refits against their rank-one approximation.
    Loo {
        #[command(flatten)]
        cell: CellArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Number of seeds.
        #[arg(long)]
        seeds: Option<usize>,
        /// Indices per seed.
        #[arg(long)]
        count: Option<usize>,
        /// Use every index.
        #[arg(long)]
        all: bool,
        /// Start each refit from zero instead of beta_hat.
        #[arg(long)]
        cold: bool,
    },
    /// Leave-the-last-predictor-out refit against its block approximation.
    Lop {
        #[command(flatten)]
        cell: CellArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Compare fits over several seeds with the asymptotic prediction.
    Verify {
        #[command(flatten)]
        cell: CellArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Variance of |beta_hat|^2 across sample sizes at fixed kappa.
    Sweep {
        /// Sample sizes, comma separated.
        #[arg(long = "n", value_delimiter = ',', num_args = 1..)]
        ns: Vec<usize>,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        seeds: Option<usize>,
        /// Fail unless var(smallest n) / var(n) reaches this for every larger n.
        #[arg(long)]
        min_ratio: Option<f64>,
    },
    /// Run every check of the config over its grid.
    Run,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("proxasym: tolerance check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("proxasym: error: {e:#}");
            ExitCode::from(2)
        }
    }
}

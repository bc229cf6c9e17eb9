//! `condquant` command-line interface.

mod commands;
mod config;
mod error;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use condquant::solver::SmoothingMode;

#[derive(Parser)]
#[command(
    name = "condquant",
    version,
    about = "Crossing-free quantile regression via conditional CDF estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a conditional CDF model and write the model, coefficients and fitted values.
    Fit(Overrides),
    /// Predict conditional CDFs and quantiles for new subjects from a saved model.
    Predict(Overrides),
    /// Generate one simulated train/test dataset.
    Simulate(Overrides),
    /// Run the Monte Carlo experiment and write its summary.
    Experiment(Overrides),
}

#[derive(Args, Debug, Clone)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated quantile levels.
    #[arg(long, value_delimiter = ',')]
    pub tau: Option<Vec<f64>>,
    #[arg(long)]
    pub grid_points: Option<usize>,
    /// Grid points dropped at each end before inversion.
    #[arg(long)]
    pub trim: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(SmoothingMode))]
    pub smoothing: Option<SmoothingMode>,
    /// Proportion of variance explained by the retained FPCA components.
    #[arg(long)]
    pub pve: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(o) => commands::fit(o),
        Command::Predict(o) => commands::predict(o),
        Command::Simulate(o) => commands::simulate(o),
        Command::Experiment(o) => commands::experiment(o),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! `ksd`: run seeded particle-flow experiments, generate synthetic
//! datasets, and self-check the numerics. Exit codes: 0 on success, 1 for
//! config problems, 2 for runtime failures such as a diverging flow.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array2;

use ksd::targets::data;
use ksd_cli::{check, experiments, CliError, CliResult};

#[derive(Parser)]
#[command(name = "ksd", version, about = "Kernel Stein discrepancy descent experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        /// Path to a flat `key = value` config file.
        config: PathBuf,
    },
    /// Write a synthetic dataset and its ground truth.
    Generate {
        #[command(subcommand)]
        what: GenerateCommand,
    },
    /// Run the numerical self-tests and print a pass/fail table.
    Check {
        /// Seed for the randomized checks.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum GenerateCommand {
    /// Independent component analysis observations plus the true unmixing
    /// matrix.
    Ica {
        #[arg(long, default_value_t = 2)]
        p: usize,
        #[arg(long, default_value_t = 1000)]
        q: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for `observations.csv` and `w_true.csv`.
        #[arg(long, default_value = "data/ica")]
        out: PathBuf,
    },
    /// Separable binary classification data plus the true weight vector.
    Logreg {
        #[arg(long, default_value_t = 5)]
        p: usize,
        #[arg(long, default_value_t = 600)]
        q: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Minimum decision margin enforced while sampling rows.
        #[arg(long, default_value_t = 0.1)]
        margin: f64,
        /// Output directory for `data.csv` and `w_true.csv`.
        #[arg(long, default_value = "data/logreg")]
        out: PathBuf,
    },
}

fn generate(what: GenerateCommand) -> CliResult<()> {
    match what {
        GenerateCommand::Ica { p, q, seed, out } => {
            std::fs::create_dir_all(&out)?;
            let (observations, w_true) = data::generate_ica(p, q, seed)?;
            data::write_matrix_csv(&out.join("observations.csv"), observations.view(), "x")?;
            data::write_matrix_csv(&out.join("w_true.csv"), w_true.view(), "w")?;
            println!(
                "wrote {} observations (p = {p}) and the true unmixing matrix to {}",
                q,
                out.display()
            );
            Ok(())
        }
        GenerateCommand::Logreg {
            p,
            q,
            seed,
            margin,
            out,
        } => {
            std::fs::create_dir_all(&out)?;
            let (dataset, w_true) = data::generate_logistic(p, q, seed, margin)?;
            data::write_labeled_csv(&out.join("data.csv"), &dataset)?;
            let row = Array2::from_shape_vec((1, p), w_true.to_vec())
                .map_err(|e| CliError::Runtime(format!("weight reshape: {e}")))?;
            data::write_matrix_csv(&out.join("w_true.csv"), row.view(), "w")?;
            println!(
                "wrote {} labeled rows (p = {p}) and the true weights to {}",
                q,
                out.display()
            );
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run { config } => {
            let doc = experiments::run_from_file(&config)?;
            println!(
                "experiment {} finished in {:.2}s; metrics in metrics.json",
                doc.experiment, doc.runtime_seconds
            );
            Ok(())
        }
        Command::Generate { what } => generate(what),
        Command::Check { seed } => check::run_check(seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("runtime error: {msg}");
            ExitCode::from(2)
        }
    }
}

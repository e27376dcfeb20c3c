//! `cge` — crossed grouped-effects regression from the command line.
//!
//! Subcommands: `fit` (CSV in, model JSON out), `smooth` (pseudo-posterior
//! smoothing of a fitted model), `predict` (mean-response predictions for
//! new rows), and `simulate` (replicated simulation studies with MSE and
//! coverage summaries).
//!
//! Exit codes: 0 on success (fit converged), 2 when a fit stopped at the
//! iteration cap, 1 on error. Errors also emit a single-line JSON record on
//! stderr: `{"error":"<kind>","message":"..."}`.

mod commands;
mod config;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cge", version, about = "Crossed grouped-effects (CGE) regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a CGE model to a CSV file and write the model JSON artifact.
    Fit(config::FitArgs),
    /// Compute pseudo-posterior probabilities and smoothed effects for a
    /// fitted model.
    Smooth(config::SmoothArgs),
    /// Predict mean responses (and ordered categories) for new rows.
    Predict(config::PredictArgs),
    /// Generate data, fit replications, and report MSE and coverage.
    Simulate(config::SimulateArgs),
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            let record = serde_json::json!({
                "error": err.kind(),
                "message": err.to_string(),
            });
            eprintln!("{record}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> cge_core::Result<i32> {
    match cli.command {
        Command::Fit(args) => commands::fit(args),
        Command::Smooth(args) => commands::smooth(args),
        Command::Predict(args) => commands::predict(args),
        Command::Simulate(args) => commands::simulate(args),
    }
}

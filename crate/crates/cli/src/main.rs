//! Command-line front end: builds node graphs from sonar images, generates
//! synthetic datasets, trains and evaluates the graph-attention classifier,
//! verifies gradients, and renders metric reports. Configuration comes from
//! flags and an optional key=value file; no environment variables.

mod commands;
mod conf;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "sigat",
    version,
    about = "Sonar image classification with sparse graph attention"
)]
struct Cli {
    /// Key=value config file supplying defaults for unset flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the sparsified node graph for one image and cache it.
    BuildGraph(commands::BuildGraphArgs),
    /// Generate a labeled synthetic sonar dataset with a manifest.
    Synth(commands::SynthArgs),
    /// Train a classifier from a dataset manifest.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(commands::EvalArgs),
    /// Verify model gradients against central finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Render a metrics CSV as an SVG chart.
    Report(commands::ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let conf = match cli.config.as_deref().map(conf::FileConfig::load).transpose() {
        Ok(c) => c.unwrap_or_else(conf::FileConfig::empty),
        Err(e) => return fail(&e),
    };
    let result = match cli.command {
        Command::BuildGraph(args) => commands::build_graph(args, &conf),
        Command::Synth(args) => commands::synth(args, &conf),
        Command::Train(args) => commands::train(args, &conf),
        Command::Eval(args) => commands::eval(args, &conf),
        Command::Gradcheck(args) => commands::gradcheck(args, &conf),
        Command::Report(args) => commands::report(args, &conf),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

/// One-line diagnostic with a machine-readable code, nonzero exit.
fn fail(e: &sigat::Error) -> ExitCode {
    eprintln!("error[{}]: {e}", e.code());
    ExitCode::FAILURE
}

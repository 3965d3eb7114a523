use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser)]
#[command(
    name = "xdcnn",
    version,
    about = "Cross-domain convolutional classification of hyperspectral images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic domains plus a ready-to-train config
    Synth(commands::SynthArgs),
    /// Train the cross-domain net, or one stream with --individual
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint; prints accuracy and writes JSON reports
    Eval(commands::EvalArgs),
    /// Check analytic gradients against central finite differences
    Gradcheck(commands::GradcheckArgs),
    /// Classify a whole image into a class map
    PredictMap(commands::PredictMapArgs),
}

/// Stable exit contract: 0 success, 2 usage or validation, 3 I/O,
/// 4 numerical failure, 5 verification failure.
fn exit_code(e: &xdcnn_core::Error) -> u8 {
    use xdcnn_core::Error;
    match e {
        Error::Io(_) | Error::Format(_) | Error::PayloadSize { .. } => 3,
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::StaleTape | Error::NonScalarRoot(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::PredictMap(a) => commands::predict_map(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `fan`: data generation, training, detection, evaluation and diagnostics.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "fan", version, about = "Anchor-level attention face detector")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Config file of `[section]` blocks with `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads, 0 = all cores. Output is bit-identical only at 1.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic face corpus.
    GenData(commands::GenDataArgs),
    /// Train a detector and write a checkpoint plus a loss log.
    Train(commands::TrainArgs),
    /// Detect faces in one image.
    Detect(commands::DetectArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval(commands::EvalArgs),
    /// Best-IoU anchor coverage over box sides.
    Coverage(commands::CoverageArgs),
    /// Finite-difference gradient suite.
    Gradcheck,
    /// Forward-pass latency per input size.
    Bench(commands::BenchArgs),
    /// Write the attention map of every pyramid level as PGM.
    ExportAttention(commands::ExportAttentionArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let g = &cli.global;
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(g, a),
        Command::Train(a) => commands::train(g, a),
        Command::Detect(a) => commands::detect(g, a),
        Command::Eval(a) => commands::eval(g, a),
        Command::Coverage(a) => commands::coverage(g, a),
        Command::Gradcheck => commands::gradcheck(g),
        Command::Bench(a) => commands::bench(g, a),
        Command::ExportAttention(a) => commands::export_attention(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl From<fan_core::FanError> for CliError {
    fn from(e: fan_core::FanError) -> Self {
        CliError::Core(e)
    }
}

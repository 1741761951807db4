use std::process::ExitCode;

use clap::{Parser, Subcommand};

use timestudy::commands::{self, EvalArgs, SegmentArgs, StatsArgs, SynthArgs, TrainArgs};
use timestudy::CliError;

#[derive(Parser, Debug)]
#[command(name = "timestudy", version, about = "Work-element recognition and time study for harvester video")]
struct Cli {
    /// Master seed for weights, sampling, and synthetic data.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a classifier and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Cut a long video into labeled work-element segments.
    Segment(SegmentArgs),
    /// Per-class clip counts and frame-count histograms.
    Stats(StatsArgs),
    /// Write synthetic clips and a manifest, or a scripted long video.
    Synthgen(SynthArgs),
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start {} threads: {e}", cli.threads)))?;
    }
    match &cli.command {
        Command::Train(a) => commands::train(a, cli.seed),
        Command::Eval(a) => commands::eval(a),
        Command::Segment(a) => commands::segment(a),
        Command::Stats(a) => commands::stats(a),
        Command::Synthgen(a) => commands::synthgen(a, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("timestudy: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

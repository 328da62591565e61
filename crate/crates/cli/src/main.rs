use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use macembed_cli::{run, CommandKind};

/// Metric-learning experiments: synthesize datasets, train embedding
/// models, evaluate retrieval, analyze distance distributions, and run the
/// labeler score pipeline. Each command reads one JSON config and writes
/// its outputs (plus a checksummed file manifest) into the run directory.
#[derive(Parser)]
#[command(name = "macembed", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with disjoint-class splits.
    Synth(CommonArgs),
    /// Train a model (single stage or classification + retrieval).
    Train(CommonArgs),
    /// Evaluate retrieval on a split, optionally across PCA dimensions.
    Eval(CommonArgs),
    /// Emit distance distributions and a margin suggestion.
    Analyze(CommonArgs),
    /// Aggregate labeler scores, filter items, rate labeler quality.
    Labels(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Path of the JSON config for this command.
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving all outputs.
    #[arg(long)]
    out_dir: PathBuf,
    /// Stream per-epoch training logs to stderr.
    #[arg(short, long)]
    verbose: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Synth(a) => (CommandKind::Synth, a),
        Command::Train(a) => (CommandKind::Train, a),
        Command::Eval(a) => (CommandKind::Eval, a),
        Command::Analyze(a) => (CommandKind::Analyze, a),
        Command::Labels(a) => (CommandKind::Labels, a),
    };
    match run(kind, &args.config, &args.out_dir, args.verbose) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

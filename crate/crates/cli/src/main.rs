//! `curare`: embedding search, curation loops, raster prep and tile downloads.

mod curate;
mod data;
mod gibs;
mod prep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "curare",
    version,
    about = "Curate image datasets in embedding space"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate an embedding file and its metadata sidecar.
    Ingest(DataArgs),
    /// Build and persist a vector index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Nearest neighbors of a stored item.
    Search(data::SearchArgs),
    /// Farthest point sampling.
    Coreset(data::CoresetArgs),
    /// Train a linear relevance head from a label file.
    Train(data::TrainArgs),
    /// Run the active labeling loop.
    Loop(curate::LoopArgs),
    /// Strategy benchmark with a simulated labeler.
    Bench(curate::BenchArgs),
    /// Serve the HTTP API and labeling UI.
    Serve(curate::ServeArgs),
    /// Raster preprocessing.
    #[command(subcommand)]
    Prep(prep::PrepCommand),
    /// Satellite tile catalog and downloads.
    #[command(subcommand)]
    Gibs(gibs::GibsCommand),
}

#[derive(Subcommand)]
enum IndexCommand {
    Build(data::IndexBuildArgs),
}

/// Location of an embedding set.
#[derive(Args, Clone)]
pub struct DataArgs {
    /// Vector file.
    #[arg(long)]
    pub vectors: PathBuf,
    /// Metadata sidecar; defaults to `<vectors>.meta.tsv`.
    #[arg(long)]
    pub meta: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => data::ingest(&a),
        Command::Index(IndexCommand::Build(a)) => data::index_build(&a),
        Command::Search(a) => data::search(&a),
        Command::Coreset(a) => data::coreset(&a),
        Command::Train(a) => data::train(&a),
        Command::Loop(a) => curate::run(&a),
        Command::Bench(a) => curate::bench(&a),
        Command::Serve(a) => curate::serve(&a),
        Command::Prep(c) => prep::run(c),
        Command::Gibs(c) => gibs::run(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

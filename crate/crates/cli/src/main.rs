//! `xmodal`: one binary whose subcommands cover data generation, alignment
//! training, indexing, retrieval, hot swaps and reader experiments.

mod commands;
mod config;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

use commands::{
    BenchIndexArgs, BuildIndexArgs, EvalReaderArgs, EvalRetrievalArgs, GenDataArgs, QueryArgs, SweepArgs,
    SwapIndexArgs, TrainAlignArgs, TrainReaderArgs,
};

#[derive(Parser, Debug)]
#[command(name = "xmodal", version, about = "Cross-modal dense retrieval toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML settings; a table named after the command is used when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus: image features, knowledge source, VQA items.
    GenData(GenDataArgs),
    /// Train the image/caption dual encoder.
    TrainAlign(TrainAlignArgs),
    /// Encode a knowledge source into a flat or HNSW index.
    BuildIndex(BuildIndexArgs),
    /// Retrieve the captions nearest to one image.
    Query(QueryArgs),
    /// Point a retriever config at a new knowledge source, index or model.
    SwapIndex(SwapIndexArgs),
    /// Bidirectional Recall@K of an alignment checkpoint.
    EvalRetrieval(EvalRetrievalArgs),
    /// Train the retrieval-augmented reader.
    TrainReader(TrainReaderArgs),
    /// Reader accuracy at one retrieval count.
    EvalReader(EvalReaderArgs),
    /// Reader accuracy across retrieval counts, written as CSV and SVG.
    Sweep(SweepArgs),
    /// Query latency of flat and HNSW search across index sizes.
    BenchIndex(BenchIndexArgs),
}

fn run(cli: Cli) -> Result<(), fail::CliError> {
    let g = &cli.global;
    match cli.command {
        Command::GenData(a) => commands::gen_data(g, a),
        Command::TrainAlign(a) => commands::train_align(g, a),
        Command::BuildIndex(a) => commands::build_index(g, a),
        Command::Query(a) => commands::query(g, a),
        Command::SwapIndex(a) => commands::swap_index(g, a),
        Command::EvalRetrieval(a) => commands::eval_retrieval(g, a),
        Command::TrainReader(a) => commands::train_reader(g, a),
        Command::EvalReader(a) => commands::eval_reader(g, a),
        Command::Sweep(a) => commands::sweep(g, a),
        Command::BenchIndex(a) => commands::bench_index(g, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if std::env::args_os().len() <= 1 {
        eprintln!("{}", Cli::command().render_help());
        return ExitCode::from(fail::USAGE as u8);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(fail::USAGE as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

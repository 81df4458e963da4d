use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asymrec_cli::{exit_code, run, RunConfig};

#[derive(Parser)]
#[command(name = "asymrec", version, about = "Semantic-code tokenizer and generative recommender")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered corpus.
    Synth(RunArgs),
    /// Train the projection and codebooks.
    TrainMhq(RunArgs),
    /// Assign semantic codes and report collisions.
    Assign(RunArgs),
    /// Train the recommender.
    TrainRec(RunArgs),
    /// Evaluate a checkpoint.
    Eval(RunArgs),
    /// Fuse two prediction files by reciprocal rank.
    Fuse(RunArgs),
    /// Export the hidden-state spectrum and effective rank.
    Spectrum(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    let (name, args) = match cli.command {
        Command::Synth(a) => ("synth", a),
        Command::TrainMhq(a) => ("train-mhq", a),
        Command::Assign(a) => ("assign", a),
        Command::TrainRec(a) => ("train-rec", a),
        Command::Eval(a) => ("eval", a),
        Command::Fuse(a) => ("fuse", a),
        Command::Spectrum(a) => ("spectrum", a),
    };
    let mut cfg = RunConfig::default();
    let result = args
        .config
        .as_deref()
        .map_or(Ok(()), |p| cfg.apply_file(p))
        .and_then(|()| cfg.apply_overrides(&args.overrides))
        .and_then(|()| run(name, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

//! Command-line pipeline: synthesize data, train the quantizer, assign codes,
//! train and evaluate the recommender, fuse rankings, export spectra.

pub mod commands;
pub mod config;
pub mod manifest;

use asymrec::Error;

pub use config::RunConfig;

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::Divergence { .. } => 4,
        Error::Format { .. }
        | Error::Ingest { .. }
        | Error::Io { .. }
        | Error::Dimension { .. }
        | Error::NonFinite { .. } => 3,
    }
}

pub const COMMANDS: &[&str] = &[
    "synth",
    "train-mhq",
    "assign",
    "train-rec",
    "eval",
    "fuse",
    "spectrum",
];

pub fn run(command: &str, cfg: &RunConfig) -> asymrec::Result<()> {
    match command {
        "synth" => commands::synth(cfg),
        "train-mhq" => commands::train_mhq(cfg),
        "assign" => commands::assign(cfg),
        "train-rec" => commands::train_rec(cfg),
        "eval" => commands::eval(cfg),
        "fuse" => commands::fuse(cfg),
        "spectrum" => commands::spectrum(cfg),
        other => Err(Error::Usage(format!("unknown command '{other}'"))),
    }
}

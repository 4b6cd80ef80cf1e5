use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Low-light enhancement: decomposition and refiner training, enhancement,
/// and the evaluation studies.
#[derive(Parser, Debug)]
#[command(name = "latrex", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file; the `profile` key selects the defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set seed=3`. Repeatable; wins over
    /// the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory. Defaults to `$LATREX_OUTPUT_ROOT/<command>`, or
    /// `runs/<command>` when the variable is unset.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct Data {
    /// Dataset root holding the low/high directories (sets `data_root`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use N generated toy pairs instead of a dataset directory.
    #[arg(long, value_name = "N", conflicts_with = "data")]
    synthetic: Option<usize>,
    /// Load at most N pairs (sets `max_pairs`).
    #[arg(long, value_name = "N")]
    max_pairs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the decomposer (stage 1) and write `decomposer.ckpt`.
    TrainDecomp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
    },
    /// Train the two refiner branches against a frozen decomposer.
    TrainEnhance {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Trained full-strategy decomposer checkpoint.
        #[arg(long)]
        decomposer: PathBuf,
    },
    /// Enhance every image of a directory (or a single image file).
    Enhance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        decomposer: PathBuf,
        /// Directory holding `refiner_r.ckpt` and `refiner_l.ckpt`.
        #[arg(long)]
        refiner: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Illumination-swap scores of a trained decomposer on every pair.
    Swap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        decomposer: PathBuf,
    },
    /// Train one decomposer per strategy and compare swap scores.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Comma-separated strategies (`full`, `v0`..`v3`).
        #[arg(long, value_delimiter = ',', default_value = "full,v0,v1,v2,v3")]
        strategies: Vec<String>,
    },
    /// Repeat decomposition training over seeds and aggregate loss curves.
    Stability {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, value_delimiter = ',', default_value = "full,v1")]
        strategies: Vec<String>,
    },
    /// Enhance the low images of a dataset and score them against the
    /// normal images.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        #[arg(long, required_unless_present = "identity")]
        decomposer: Option<PathBuf>,
        #[arg(long, required_unless_present = "identity")]
        refiner: Option<PathBuf>,
        /// Score the unprocessed low images instead of a trained model.
        #[arg(long)]
        identity: bool,
    },
}

/// Exit code and kind label for a failure.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    use latrex::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Config(_) | E::StrategyMismatch(_)) => (2, "config"),
        Some(E::Data(_) | E::InvalidInput(_) | E::ShapeMismatch { .. } | E::Image { .. }) => {
            (3, "data")
        }
        Some(E::NumericalAbort { .. } | E::NonFinite { .. }) => (4, "numerical"),
        Some(E::Io { .. } | E::Checkpoint(_)) => (5, "io"),
        None if err.downcast_ref::<std::io::Error>().is_some() => (5, "io"),
        None => (2, "usage"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            let msg = format!("{e:#}")
                .replace('\\', "\\\\")
                .replace('"', "\\\"")
                .replace('\n', " ");
            eprintln!("error kind={kind} code={code} msg=\"{msg}\"");
            ExitCode::from(code)
        }
    }
}

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

/// Dense object-placement prediction on synthetic scenes.
#[derive(Parser, Debug)]
#[command(name = "placer", version)]
pub struct Cli {
    /// Print machine-readable JSON to stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// Run configuration (JSON).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set model.d_t=64`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Train a model, writing a checkpoint directory.
    Train(Train),
    /// Evaluate a checkpoint on a dataset.
    Eval(Eval),
    /// Top-k placements, heatmap file and previews for one image pair.
    Predict(Predict),
    /// Query a heatmap with the location or the scale held fixed.
    Slice(Slice),
    /// Render a heatmap file as one graymap per scale.
    Render(Render),
    /// Object-token attention map of one layer and head.
    Attend(Attend),
}

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Output directory (defaults to `dataset` from the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Image side in pixels (defaults to the model input size).
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct Train {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from the checkpoint already in `--checkpoint`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub loss: Option<String>,
}

#[derive(Args, Debug)]
pub struct Eval {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use squared instead of absolute scale error.
    #[arg(long)]
    pub squared: bool,
}

#[derive(Args, Debug)]
pub struct Pair {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Background image (PPM).
    #[arg(long)]
    pub bg: PathBuf,
    /// Object image (PPM).
    #[arg(long)]
    pub obj: PathBuf,
}

#[derive(Args, Debug)]
pub struct Predict {
    #[command(flatten)]
    pub pair: Pair,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("fix").required(true).args(["fix_location", "fix_scale"])))]
#[command(group(ArgGroup::new("source").required(true).args(["heatmap", "checkpoint"])))]
pub struct Slice {
    /// Heatmap file written by `predict`.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    #[arg(long, requires_all = ["bg", "obj"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub bg: Option<PathBuf>,
    #[arg(long)]
    pub obj: Option<PathBuf>,
    /// `x,y`: report the scores over scales there.
    #[arg(long, value_name = "X,Y", value_parser = parse_xy)]
    pub fix_location: Option<(usize, usize)>,
    /// Channel index: report the best location at that scale.
    #[arg(long, value_name = "Z")]
    pub fix_scale: Option<usize>,
    /// Graymap of the fixed-scale slice.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Render {
    #[arg(long)]
    pub heatmap: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "heatmap")]
    pub stem: String,
}

#[derive(Args, Debug)]
pub struct Attend {
    #[command(flatten)]
    pub pair: Pair,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_xy(s: &str) -> Result<(usize, usize), String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected X,Y, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(x)?, p(y)?))
}

/// Errors the user can fix by changing the command line.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

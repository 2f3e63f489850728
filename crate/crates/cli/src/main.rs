//! `condiff`: train, synthesize, classify, explain and evaluate from one config.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use condiff::data::Label;

#[derive(Debug, Parser)]
#[command(name = "condiff", version, about = "Guided conditional diffusion classifier")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set synth.t0=0.7`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output root; falls back to the config, then CONDIFF_OUTPUT_DIR.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Denoiser checkpoint [default: <output>/diffusion.ckpt].
    #[arg(long, global = true)]
    diffusion: Option<PathBuf>,
    /// Embedding-network checkpoint [default: <output>/embedder.ckpt].
    #[arg(long, global = true)]
    embedder: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the procedural toy dataset as a manifest plus PNGs.
    GenerateToy,
    /// Assign records to train/validation/test by subject.
    Split,
    /// Train the conditional denoiser.
    TrainDiffusion,
    /// Synthesize both labels for every training and validation image.
    BuildSyntheticSet,
    /// Train the embedding network with the triplet loss.
    TrainEmbedder,
    /// Classify one image.
    Classify {
        #[arg(long)]
        image: PathBuf,
    },
    /// Evaluate on the test partition.
    Evaluate,
    /// Regenerate an image under one or both labels.
    Synthesize {
        #[arg(long)]
        image: PathBuf,
        /// `no_infection` or `infection`; both when omitted.
        #[arg(long)]
        label: Option<Label>,
    },
    /// Score-CAM heatmaps of each label's synthesis.
    Explain {
        #[arg(long)]
        image: PathBuf,
    },
    /// Sweep the noise strength t0.
    AblateT0 {
        /// Comma-separated strengths [default: eval.t0_list].
        #[arg(long, value_delimiter = ',')]
        t0: Option<Vec<f64>>,
    },
    /// Compare DDIM with CFG-DDIM synthesis.
    CompareSamplers,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let is_config = err.chain().any(|e| e.downcast_ref::<condiff::Error>().is_some_and(condiff::Error::is_config));
            ExitCode::from(if is_config { 2 } else { 3 })
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use srdl::config::RunConfig;
use srdl::harness::{self, EvalOptions, Split, TrainOptions};
use srdl::Error;

/// Multi-label image recognition with category-specific attention and
/// object erasing.
#[derive(Debug, Parser)]
#[command(name = "srdl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides every seed in the config and SRDL_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model, writing checkpoints and logs to --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a manifest and report metrics.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to score instead of the one in the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// all, train or validation.
        #[arg(long, default_value = "all")]
        split: String,
        /// File name of the prediction dump.
        #[arg(long, default_value = "predictions.tsv")]
        predictions: String,
    },
    /// Score individual images.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Write spatial attention overlays for the three most confident categories.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Generate a synthetic shapes dataset; --config is the dataset spec.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one short run per topK and alpha setting and write both curves.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

/// An unreadable config file is a configuration error, not a runtime one.
fn load(common: &Common) -> srdl::Result<RunConfig> {
    RunConfig::load(&common.config, common.seed).map_err(|e| match e {
        Error::Io { .. } => Error::Config(e.to_string()),
        other => other,
    })
}

fn run(cli: Cli) -> srdl::Result<()> {
    match cli.command {
        Command::Train { common, resume } => {
            let cfg = load(&common)?;
            let outcome = harness::train(
                &cfg,
                &TrainOptions {
                    out: common.out,
                    resume,
                },
            )?;
            info!("final train mAP {:.4}", outcome.train_map);
            if let Some(v) = outcome.val_map {
                info!("final validation mAP {v:.4}");
            }
            println!("{}", outcome.checkpoint.display());
        }
        Command::Evaluate {
            common,
            checkpoint,
            manifest,
            split,
            predictions,
        } => {
            let cfg = load(&common)?;
            let split: Split = split.parse()?;
            let eval = harness::evaluate(
                &cfg,
                &EvalOptions {
                    checkpoint,
                    manifest,
                    split,
                    out: common.out,
                    predictions,
                },
            )?;
            for w in &eval.report.warnings {
                warn!("{w}");
            }
            print!("{}", eval.report.to_key_values());
        }
        Command::Infer {
            common,
            checkpoint,
            images,
        } => {
            let cfg = load(&common)?;
            let scores = harness::infer(&cfg, &checkpoint, &images, &common.out)?;
            info!("scored {} of {} images", scores.len(), images.len());
        }
        Command::Visualize {
            common,
            checkpoint,
            images,
        } => {
            let cfg = load(&common)?;
            let vis = harness::visualize(&cfg, &checkpoint, &images, &common.out)?;
            for v in vis {
                for o in &v.overlays {
                    println!("{}\t{}\t{:.4}\t{}", v.image.display(), o.name, o.score, o.path.display());
                }
            }
        }
        Command::SynthData { common } => {
            let manifest = harness::synth_data(&common.config, &common.out, common.seed).map_err(|e| match e {
                Error::Io { ref path, .. } if *path == common.config => Error::Config(e.to_string()),
                other => other,
            })?;
            info!("wrote {} images to {}", manifest.len(), common.out.display());
        }
        Command::Sweep { common } => {
            let cfg = load(&common)?;
            std::fs::create_dir_all(&common.out).map_err(|e| Error::Config(format!("{}: {e}", common.out.display())))?;
            let result = harness::sweep(&cfg, &common.out)?;
            for (k, m) in result.topk {
                println!("topk\t{k}\t{m}");
            }
            for (a, m) in result.alpha {
                println!("alpha\t{a}\t{m}");
            }
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    if err.is_config_error() || matches!(err, Error::Parse { .. }) {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

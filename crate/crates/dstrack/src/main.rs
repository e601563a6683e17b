use clap::{Parser, Subcommand};
use dstrack::cli::{self, RunConfig, Split, TrackerSource};
use dstrack::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

/// Incremental word-by-word dialog state tracker for DSTC2.
#[derive(Parser)]
#[command(name = "dstrack", version, about)]
struct Cli {
    /// Run configuration file (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's output directory
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Override the config's training seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Component to operate on (e.g. goal.food), or "all"
    #[arg(long, global = true, default_value = "all")]
    component: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw DSTC2 and write deterministic preprocessed artifacts
    Prepare,
    /// Train one model per selected component
    Train,
    /// Train N models per component from distinct seeds
    Ensemble {
        /// Number of members (defaults to the config's ensemble_size)
        #[arg(long)]
        ensemble_size: Option<usize>,
    },
    /// Compute the DSTC2 featured metrics
    Eval {
        /// Split to score
        #[arg(long, default_value = "test")]
        split: String,
        /// Score an external tracker-output file (official JSON format)
        #[arg(long)]
        external: Option<PathBuf>,
        /// Score single-model checkpoints (optionally from a directory)
        #[arg(long, num_args = 0..=1, default_missing_value = "@default")]
        models: Option<PathBuf>,
        /// Score an ensemble (optionally from a directory)
        #[arg(long, num_args = 0..=1, default_missing_value = "@default")]
        ensemble: Option<PathBuf>,
    },
    /// Track a token stream from stdin, one JSON trace line per token
    Track {
        /// Use single-model checkpoints (optionally from a directory)
        #[arg(long, num_args = 0..=1, default_missing_value = "@default")]
        models: Option<PathBuf>,
        /// Use an ensemble (optionally from a directory)
        #[arg(long, num_args = 0..=1, default_missing_value = "@default")]
        ensemble: Option<PathBuf>,
        /// Values reported per component on every trace line
        #[arg(long, default_value_t = 3)]
        top_k: usize,
        /// Dialog id stamped on trace lines
        #[arg(long, default_value = "stdin")]
        dialog_id: String,
    },
}

fn tracker_source(
    config: &RunConfig,
    models: Option<PathBuf>,
    ensemble: Option<PathBuf>,
) -> Result<TrackerSource, Error> {
    match (models, ensemble) {
        (Some(dir), None) => Ok(TrackerSource::Models(if dir.as_os_str() == "@default" {
            config.models_dir()
        } else {
            dir
        })),
        (None, Some(dir)) => Ok(TrackerSource::Ensemble(if dir.as_os_str() == "@default" {
            config.ensemble_dir()
        } else {
            dir
        })),
        (None, None) => Err(Error::Argument(
            "pass one of --models or --ensemble".into(),
        )),
        (Some(_), Some(_)) => Err(Error::Argument(
            "--models and --ensemble are mutually exclusive".into(),
        )),
    }
}

fn run(args: Cli) -> Result<(), Error> {
    let config_path = args
        .config
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut config = RunConfig::load(&config_path)?;
    if let Some(out_dir) = args.out_dir {
        config.out_dir = out_dir;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }

    match args.command {
        Command::Prepare => {
            let manifest = cli::cmd_prepare(&config)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&manifest).expect("manifest serializes")
            );
            Ok(())
        }
        Command::Train => cli::cmd_train(&config, &args.component),
        Command::Ensemble { ensemble_size } => {
            if let Some(n) = ensemble_size {
                config.ensemble_size = n;
            }
            cli::cmd_ensemble(&config, &args.component)
        }
        Command::Eval {
            split,
            external,
            models,
            ensemble,
        } => {
            let split: Split = split.parse()?;
            match (&external, &models, &ensemble) {
                (Some(path), None, None) => {
                    cli::cmd_eval(&config, split, Some(path), None, &args.component)?;
                }
                (None, _, _) => {
                    let source = tracker_source(&config, models, ensemble)?;
                    cli::cmd_eval(&config, split, None, Some(&source), &args.component)?;
                }
                _ => {
                    return Err(Error::Argument(
                        "--external cannot be combined with --models/--ensemble".into(),
                    ))
                }
            }
            Ok(())
        }
        Command::Track {
            models,
            ensemble,
            top_k,
            dialog_id,
        } => {
            let source = tracker_source(&config, models, ensemble)?;
            cli::cmd_track(&config, &source, &args.component, &dialog_id, top_k)
        }
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

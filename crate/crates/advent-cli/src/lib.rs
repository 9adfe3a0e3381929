//! Command-line front end: generate / train / eval / ablate / plot.

pub mod ablate;
pub mod config;
pub mod plotting;
pub mod train;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::ablate::Suite;
use crate::config::RunConfig;

/// Errors split by exit code: usage/config problems exit 1, runtime
/// failures exit 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<advent_core::Error> for CliError {
    fn from(err: advent_core::Error) -> Self {
        CliError::Runtime(err.to_string())
    }
}

const CONFIG_KEYS_HELP: &str = "\
Config keys (defaults in parentheses):
  data_root (data)            dataset root directory
  train_manifest (data/manifest_train.txt)
  val_manifest (unset)        optional validation manifest
  classes (8)                 number of classes, 2..=23
  depth (2)                   temporal window depth d
  policy (fi)                 fusion policy: ce | fi
  gsm (on)                    global shuffle: on | off
  loss (urs)                  loss mode: ce | vrs | urs
  alpha (0.1) gamma (0.1)     fixed weights for the vrs loss
  unroll (5)                  unroll depth K for the urs loss
  alpha0 (0.1) gamma0 (0.1) eta0 (0.01)  urs coefficient initial values
  temperature (0.1)           contrastive temperature
  anchors (16) positives (32) negatives (32)
  learning_rate (0.0003) weight_decay (0.0001)
  epochs (200) batch_size (8) seed (0)
  width (16) stages (2)       backbone channel width / stage count
  out_dir (runs/default)      run directory";

#[derive(Parser)]
#[command(name = "advent", version, about = "Weather-independent segmentation training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic weather benchmark.
    Generate {
        /// Dataset root directory to create.
        #[arg(long)]
        root: PathBuf,
        /// Optional profile file (key = value lines: height, width,
        /// num_classes, n_objects, seq_length, seed).
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Train one model and write a self-describing run directory.
    #[command(after_help = CONFIG_KEYS_HELP)]
    Train {
        /// Config file with key = value lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, e.g. --set epochs=20 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Use 20 epochs instead of the configured count.
        #[arg(long)]
        fast: bool,
    },
    /// Evaluate a checkpoint on a manifest and print the four metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Temporal window depth used to build evaluation windows.
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Run one ablation suite over several seeds and emit table + plots.
    #[command(after_help = CONFIG_KEYS_HELP)]
    Ablate {
        /// Suite: depth | fusion | gsm | regularizer.
        #[arg(long)]
        suite: Suite,
        /// Base config file with key = value lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one base-config key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma-separated seed list.
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Use 20 epochs per arm instead of the configured count.
        #[arg(long)]
        fast: bool,
    },
    /// Plot one metric curve from a finished run directory.
    Plot {
        /// Run directory containing metrics.txt.
        #[arg(long)]
        run: PathBuf,
        /// Metric: miou | mpre | mrec | mf1 | loss.
        #[arg(long, default_value = "miou")]
        metric: String,
        /// Output SVG path; defaults to <run>/plot_<metric>.svg.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn build_config(
    file: Option<&PathBuf>,
    overrides: &[String],
    fast: bool,
) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::default();
    if let Some(path) = file {
        config.apply_file(path)?;
    }
    for item in overrides {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set expects KEY=VALUE, got `{item}`"))
        })?;
        config.set(key.trim(), value)?;
    }
    if fast {
        config.epochs = 20;
    }
    config.validate()?;
    Ok(config)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { root, profile } => {
            let profile = match profile {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| {
                        CliError::Usage(format!("cannot read profile {}: {e}", path.display()))
                    })?;
                    advent_core::synthetic::BenchmarkProfile::parse(&text)
                        .map_err(|e| CliError::Usage(e.to_string()))?
                }
                None => Default::default(),
            };
            let manifests = advent_core::synthetic::generate_benchmark(&root, &profile)?;
            println!("train_manifest={}", manifests.train.display());
            println!("val_manifest={}", manifests.val.display());
            Ok(())
        }
        Command::Train {
            config,
            overrides,
            fast,
        } => {
            let config = build_config(config.as_ref(), &overrides, fast)?;
            let summary = train::run_training(&config)?;
            if let Some(last) = summary.history.last() {
                let record = last.val.unwrap_or(last.train);
                println!("run_dir={} {record}", config.out_dir.display());
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data_root,
            manifest,
            depth,
            batch_size,
        } => {
            let record = train::run_eval(&checkpoint, &data_root, &manifest, depth, batch_size)?;
            println!("{record}");
            Ok(())
        }
        Command::Ablate {
            suite,
            config,
            overrides,
            seeds,
            fast,
        } => {
            if seeds.is_empty() {
                return Err(CliError::Usage("--seeds needs at least one seed".into()));
            }
            let config = build_config(config.as_ref(), &overrides, fast)?;
            let report = ablate::run_suite(suite, &config, &seeds)?;
            print!("{}", report.table);
            Ok(())
        }
        Command::Plot { run, metric, out } => {
            let out = out.unwrap_or_else(|| run.join(format!("plot_{metric}.svg")));
            plotting::plot_run(&run, &metric, &out)?;
            println!("{}", out.display());
            Ok(())
        }
    }
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            1
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            2
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xgan::cli;
use xgan::config::{extract_dotted_overrides, load_config, render_config, RunConfig};

#[derive(Parser)]
#[command(
    name = "xgan",
    about = "Dual adversarial autoencoder for unsupervised image-to-image translation, \
             with a procedural sprite dataset generator and a quantitative evaluation kit",
    after_help = "Any --<section>.<key> <value> pair overrides the corresponding config entry, \
                  e.g. --train.seed 7 or --model.embed_dim 128."
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two synthetic corpora with metadata and split manifests
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the frozen teacher embedding on labeled domain-1 renders
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train per-style probe classifiers for the evaluation kit
    TrainProbes {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_a: Option<PathBuf>,
        #[arg(long)]
        out_b: Option<PathBuf>,
    },
    /// Train the translation model
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a training-state checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Shorthand for --train.mode
        #[arg(long)]
        mode: Option<String>,
        /// Shorthand for --train.total_steps
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Translate a directory of images and write a row-wise sample grid
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input_dir: PathBuf,
        /// 1to2 or 2to1
        #[arg(long)]
        direction: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        pairs_per_row: usize,
    },
    /// Evaluate a checkpoint: preservation, confusion, consistency
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Style-B probe checkpoint for preservation scoring
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a set of ablation modes with shared seeds
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated mode names
        #[arg(long)]
        modes: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Print a default configuration to stdout
    DefaultConfig {
        /// Emit the desk-scale 32x32 benchmark preset instead
        #[arg(long)]
        benchmark: bool,
    },
}

fn run() -> xgan::Result<()> {
    let raw: Vec<String> = std::env::args().collect();
    let (rest, overrides) = extract_dotted_overrides(raw)?;
    let args = Args::parse_from(rest);

    let load = |path: &PathBuf| -> xgan::Result<RunConfig> { load_config(path, &overrides) };

    match args.command {
        Command::GenData { config } => cli::cmd_gen_data(&load(&config)?),
        Command::TrainTeacher { config, out } => cli::cmd_train_teacher(&load(&config)?, out),
        Command::TrainProbes { config, out_a, out_b } => cli::cmd_train_probes(&load(&config)?, out_a, out_b),
        Command::Train {
            config,
            resume,
            mode,
            steps,
        } => {
            let mut cfg = load(&config)?;
            if let Some(mode) = mode {
                cfg.train.mode = xgan::trainer::TrainMode::parse(&mode).ok_or_else(|| {
                    xgan::XganError::Config(format!(
                        "unknown mode '{mode}'; valid modes: {}",
                        xgan::trainer::TrainMode::ALL
                            .iter()
                            .map(|m| m.name())
                            .collect::<Vec<_>>()
                            .join(", ")
                    ))
                })?;
            }
            if let Some(steps) = steps {
                cfg.train.total_steps = steps;
            }
            cli::cmd_train(&cfg, resume)
        }
        Command::Translate {
            checkpoint,
            input_dir,
            direction,
            out,
            pairs_per_row,
        } => cli::cmd_translate(&checkpoint, &input_dir, &direction, &out, pairs_per_row),
        Command::Eval {
            config,
            checkpoint,
            probes,
            out,
        } => cli::cmd_eval(&load(&config)?, &checkpoint, &probes, out),
        Command::Ablate {
            config,
            modes,
            seeds,
        } => cli::cmd_ablate(&load(&config)?, &modes, seeds),
        Command::DefaultConfig { benchmark } => {
            let cfg = if benchmark {
                RunConfig::benchmark()
            } else {
                RunConfig::default()
            };
            print!("{}", render_config(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

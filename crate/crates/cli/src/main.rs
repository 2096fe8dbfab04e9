//! `flowlab` command line: corpus generation, pretraining, fine-tuning,
//! evaluation, ablations and plots.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "flowlab", version, about = "Flow-matching policies fine-tuned with PPO on procedural tabletop scenes")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Lab configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a QA-checked scene corpus.
    GenScenes {
        /// Number of scenes (default from config).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Build the pretraining corpus, record expert demos, and pretrain the imitation policy.
    Pretrain,
    /// Fine-tune a checkpoint with PPO on a scene set.
    Finetune {
        /// Initial checkpoint.
        #[arg(long)]
        init: PathBuf,
        /// Training scenes: CORPUS[#A..B | #I,J,...].
        #[arg(long)]
        scenes: String,
        /// Run seed, combined with the master seed.
        #[arg(long, default_value_t = 0)]
        run_seed: u64,
        /// PPO iterations (default from config).
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Evaluate a checkpoint with deterministic sampling.
    Eval {
        /// Policy checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scenes: CORPUS[#A..B | #I,J,...].
        #[arg(long)]
        scenes: String,
        /// Episodes per scene (default from config).
        #[arg(long)]
        episodes: Option<usize>,
        /// Integration steps; defaults to the checkpoint's own.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Training-set-size ablation over sampled subsets.
    AblateN {
        /// Scene corpus written by gen-scenes.
        #[arg(long)]
        corpus: PathBuf,
        /// Pretrained checkpoint every cell starts from.
        #[arg(long)]
        init: PathBuf,
    },
    /// Integration-step ablation with an inference latency benchmark.
    AblateK {
        /// Scene corpus written by gen-scenes.
        #[arg(long)]
        corpus: PathBuf,
        /// Pretrained checkpoint every cell starts from.
        #[arg(long)]
        init: PathBuf,
    },
    /// Render SVG charts from training curves and ablation summaries.
    Plot {
        /// Training curve CSV files.
        #[arg(long, num_args = 1..)]
        curves: Vec<PathBuf>,
        /// Summary CSV written by ablate-n.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{}", e.render());
                    ExitCode::from(1)
                }
            };
        }
    };
    // The recorded command should not depend on where the binary lives.
    let mut argv = argv;
    if let Some(a0) = argv.first_mut() {
        *a0 = "flowlab".into();
    }
    match commands::run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

//! `fend`: synthetic data, the offline-clustering + training pipeline, and
//! tail-bucket evaluation.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fend_core::kalman::{kalman_scores, scores_to_csv, KalmanConfig};
use fend_core::trajdata::{dataset_to_json, load_dataset, load_ethucy_text, synth_longtail, DatasetSplit, SynthConfig};

use config::{Ablation, RunConfig};
use pipeline::{write_new, Run};

/// Error that maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "fend", version, about = "Long-tail trajectory prediction pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic long-tail dataset
    Synth {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Tail fraction in (0, 1)
        #[arg(long, default_value_t = 0.1)]
        tail: f64,
        #[arg(long)]
        seed: u64,
        /// Gaussian position noise (m)
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 8)]
        t_obs: usize,
        #[arg(long, default_value_t = 12)]
        t_pred: usize,
        #[arg(long, default_value_t = 0.4)]
        dt: f64,
        #[arg(long, default_value = "dataset.json")]
        out: PathBuf,
        /// Overwrite an existing output file
        #[arg(long)]
        force: bool,
    },
    /// Convert an ETH-UCY style text file (frame agent x y) to a dataset
    Import {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        t_obs: usize,
        #[arg(long, default_value_t = 12)]
        t_pred: usize,
        #[arg(long, default_value_t = 0.4)]
        dt: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Per-sample Kalman FDE as CSV
    KalmanScores {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Extractor, clustering, baseline and FEND training, then evaluation
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Switch off parts of the method for the FEND model
        #[arg(long, value_enum, num_args = 1..)]
        ablate: Vec<Ablation>,
        /// Run once per seed, overriding the config seed
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Explicit run directory instead of one named by the config hash
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Recompute stale checkpoints
        #[arg(long)]
        force: bool,
    },
    /// Reports from existing baseline and FEND checkpoints
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, num_args = 1..)]
        ablate: Vec<Ablation>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth {
            n,
            tail,
            seed,
            noise,
            t_obs,
            t_pred,
            dt,
            out,
            force,
        } => {
            let cfg = SynthConfig {
                n,
                tail_fraction: tail,
                seed,
                t_obs,
                t_pred,
                dt,
                noise_sigma: noise,
            };
            let split: DatasetSplit<f64> = synth_longtail(&cfg)?;
            write_new(&out, &dataset_to_json(&split)?, force)?;
            eprintln!("wrote {} train / {} test samples to {}", split.train.len(), split.test.len(), out.display());
        }
        Cmd::Import {
            input,
            t_obs,
            t_pred,
            dt,
            out,
            force,
        } => {
            let split: DatasetSplit<f64> = load_ethucy_text(&input, t_obs, t_pred, dt)?;
            write_new(&out, &dataset_to_json(&split)?, force)?;
            eprintln!("wrote {} train / {} test samples to {}", split.train.len(), split.test.len(), out.display());
        }
        Cmd::KalmanScores { dataset, out, force } => {
            let split: DatasetSplit<f64> = load_dataset(&dataset)?;
            let scores = kalman_scores(&split, &KalmanConfig::default())?;
            write_new(&out, &scores_to_csv(&scores), force)?;
        }
        Cmd::Pipeline {
            config,
            ablate,
            seeds,
            run_dir,
            force,
        } => {
            let base = RunConfig::load(&config)?;
            let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds };
            for seed in seeds {
                let cfg = RunConfig { seed, ..base.clone() }.prepare(&ablate)?;
                let dir = run_dir.clone().map(|d| if base.seed == seed { d.clone() } else { d.join(format!("seed{seed}")) });
                let run = Run::new(cfg, dir, force)?;
                eprintln!("seed {seed}: run directory {}", run.dir.display());
                run.pipeline().with_context(|| format!("pipeline for seed {seed}"))?;
            }
        }
        Cmd::Eval {
            config,
            ablate,
            run_dir,
            force,
        } => {
            let cfg = RunConfig::load(&config)?.prepare(&ablate)?;
            Run::new(cfg, run_dir, force)?.eval_only()?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(fend_core::Error::Config { .. }) = cause.downcast_ref::<fend_core::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

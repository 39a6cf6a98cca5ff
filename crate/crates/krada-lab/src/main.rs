//! `krada` — generate the synthetic benchmark, train, evaluate, calibrate
//! the unknown-detection threshold, and run the ablation matrix.

use clap::{Parser, Subcommand};
use krada_lab::config::ExperimentConfig;
use krada_lab::metricsfmt::{print_eval, print_rows};
use krada_lab::run;
use krada_lab::{LabError, Result};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "krada", version, about = "Open-world segmentation lab")]
struct Cli {
    /// `key = value` config file; defaults apply for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Base directory prepended to relative dataset/run paths.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the two-domain dataset under `dataset_dir`.
    Gen,
    /// Train per the config; artifacts land in `run_dir`.
    Train {
        /// Continue from the checkpoints already in `run_dir`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a model checkpoint on the held-out target split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write per-image predictions and composites.
        #[arg(long)]
        dump_predictions: bool,
    },
    /// Sweep unknown-detection thresholds for a trained known-class head.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate the whole comparison matrix.
    Ablate,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("krada: {e}");
        std::process::exit(e.exit_code());
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        rebase(&mut cfg.dataset_dir, out);
        rebase(&mut cfg.run_dir, out);
    }
    cfg.validate()?;

    match cli.cmd {
        Cmd::Gen => {
            let manifest = run::cmd_gen(&cfg)?;
            println!(
                "wrote {} ({} source, {} target-train, {} target-test, {}x{}, K={})",
                cfg.dataset_dir.display(),
                manifest.count(krada_core::synth::Split::Source),
                manifest.count(krada_core::synth::Split::TargetTrain),
                manifest.count(krada_core::synth::Split::TargetTest),
                manifest.height,
                manifest.width,
                manifest.k,
            );
        }
        Cmd::Train { resume } => {
            let art = run::cmd_train(&cfg, resume)?;
            println!(
                "trained {} for {} iterations (mode {}, seed {})",
                cfg.run_dir.display(),
                cfg.iterations,
                cfg.mode.as_str(),
                cfg.seed
            );
            if let Some(last) = art.trace.last() {
                println!(
                    "final losses: seg {:.4}, known-head {:.4}, adversarial {:.4}",
                    last.seg, last.seg_known, last.adv
                );
            }
            print_eval(&art.pixel, &art.image);
        }
        Cmd::Eval {
            checkpoint,
            dump_predictions,
        } => {
            let outcome = run::cmd_eval(&cfg, &checkpoint, dump_predictions)?;
            print_eval(&outcome.pixel, &outcome.image);
        }
        Cmd::Calibrate { checkpoint } => {
            let outcome = run::cmd_calibrate(&cfg, &checkpoint)?;
            println!("delta      proxy mIoU");
            for (delta, miou) in &outcome.rows {
                let mark = if *delta == outcome.chosen { "  <- chosen" } else { "" };
                match miou {
                    Some(m) => println!("{delta:<10.4} {m:.4}{mark}"),
                    None => println!("{delta:<10.4} -"),
                }
            }
        }
        Cmd::Ablate => {
            let rows = run::cmd_ablate(&cfg)?;
            print_rows(&rows);
        }
    }
    Ok(())
}

fn rebase(path: &mut PathBuf, base: &Path) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

//! Command-line front end: dataset generation, training, evaluation, and
//! selection-mask export.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pim_core::config::RunConfig;
use pim_core::data::{synth_generate, SyntheticSpec};
use pim_core::eval::{evaluate_checkpoint, export_masks_checkpoint, EvalOptions};
use pim_core::train::run_train;

#[derive(Parser)]
#[command(
    name = "pim",
    version,
    about = "Fine-grained classifier with weakly supervised feature-point selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key=value config file.
    Train {
        /// Config file path.
        #[arg(long)]
        config: PathBuf,
        /// Extra config entries applied on top of the file (repeatable).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint against a class-per-folder dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (one folder per class).
        #[arg(long)]
        data: PathBuf,
        /// Number of strongest heads averaged for the reported prediction.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Keep only selected points above this confidence when scoring
        /// each block head (falls back to the plain head on empty filters).
        #[arg(long)]
        threshold: Option<f64>,
        /// Also report selected-only and dropped-only accuracy per block.
        #[arg(long)]
        per_region: bool,
        /// Rank ensemble heads by fixed head order instead of confidence.
        #[arg(long)]
        head_order: bool,
    },
    /// Generate the synthetic benchmark dataset.
    SynthData {
        /// key=value spec file (synth.* keys).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory; train/ and test/ are created inside.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export per-block selection masks as PGMs plus a localization report.
    ExportMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, overrides } => train(&config, &overrides),
        Command::Eval { checkpoint, data, k, threshold, per_region, head_order } => {
            eval(&checkpoint, &data, k, threshold, per_region, head_order)
        }
        Command::SynthData { spec, out, seed } => synth(&spec, &out, seed),
        Command::ExportMasks { checkpoint, data, out } => {
            let report = export_masks_checkpoint(&checkpoint, &data, &out)?;
            println!("masks written to {}", out.display());
            if let Some(r) = report {
                println!(
                    "localization: hit rate {:.4} vs chance {:.4} ({:.2}x) over {} images",
                    r.hit_rate, r.chance_rate, r.ratio, r.images
                );
            }
            Ok(())
        }
    }
}

fn train(config: &PathBuf, overrides: &[String]) -> Result<()> {
    let text = fs::read_to_string(config)
        .with_context(|| format!("cannot read config {}", config.display()))?;
    let mut cfg = RunConfig::parse_str(&text)?;
    cfg.apply_overrides(overrides)?;
    let result = run_train(&cfg)?;
    println!("trained {} epochs", result.epochs_run);
    println!("checkpoint: {}", result.checkpoint_path.display());
    println!("metrics: {}", result.metrics_path.display());
    print_accuracies(&result.final_eval);
    Ok(())
}

fn eval(
    checkpoint: &PathBuf,
    data: &PathBuf,
    k: usize,
    threshold: Option<f64>,
    per_region: bool,
    head_order: bool,
) -> Result<()> {
    let opts = EvalOptions {
        threshold,
        per_region,
        rank_by_head_order: head_order,
        ..EvalOptions::default()
    };
    let summary = evaluate_checkpoint(checkpoint, data, &opts)?;
    let heads = summary.head_accuracy.len();
    if k == 0 || k > heads {
        bail!("--k must be between 1 and the number of heads ({heads})");
    }
    print_accuracies(&summary);
    println!("reported (top-{k}): {:.4}", summary.ensemble_accuracy[k - 1]);
    if let Some(regions) = &summary.per_region {
        for r in regions {
            println!(
                "block {}: selected-only {:.4}, dropped-only {:.4}",
                r.block_index, r.selected, r.dropped
            );
        }
    }
    Ok(())
}

fn synth(spec_path: &PathBuf, out: &PathBuf, seed: u64) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("cannot read spec {}", spec_path.display()))?;
    let spec = SyntheticSpec::parse_str(&text)?;
    synth_generate(&spec, seed, out)?;
    println!(
        "wrote {} classes x ({} train + {} test) images to {}",
        spec.num_classes,
        spec.train_per_class,
        spec.test_per_class,
        out.display()
    );
    Ok(())
}

fn print_accuracies(summary: &pim_core::eval::EvalSummary) {
    println!("images: {}", summary.n);
    for (i, acc) in summary.head_accuracy.iter().enumerate() {
        let name = if summary.fusion_head && i + 1 == summary.head_accuracy.len() {
            "fusion head".to_string()
        } else {
            format!("block {} head", i + 1)
        };
        println!("{name} accuracy: {acc:.4}");
    }
    for (i, acc) in summary.ensemble_accuracy.iter().enumerate() {
        println!("top-{} ensemble accuracy: {acc:.4}", i + 1);
    }
}

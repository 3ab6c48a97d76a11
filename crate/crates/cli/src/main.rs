//! `midfuse` command line: dataset generation, training, checkpoint
//! evaluation, gradient verification, activation heat maps, and ablation
//! grids. Every command prints a single-line JSON summary on success.
//!
//! Exit codes: 2 for configuration problems (including usage errors),
//! 3 for IO or file-format failures, 4 for numerical failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use midfuse_core::error::Error;
use midfuse_core::eval::{activation_heatmap, write_pgm, RetrievalProtocol};
use midfuse_core::experiment::{
    load_config, load_model, parse_protocol, run_ablation, run_eval, run_training, AblationAxis,
};
use midfuse_core::synth::{
    default_train_instances, make_dataset, AlignMode, DatasetConfig, Split, MANIFEST_FILE,
};
use midfuse_core::tensor::read_tensor;
use midfuse_core::verify::run_full_verification;

#[derive(Parser)]
#[command(
    name = "midfuse",
    version,
    about = "Mid-layer feature fusion for cross-domain instance retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain dataset.
    GenData(GenDataArgs),
    /// Train a model from a JSON experiment config.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Verify every gradient against finite differences.
    GradCheck(GradCheckArgs),
    /// Export one tapped channel as a PGM heat map.
    Visualize(VisualizeArgs),
    /// Train and evaluate an ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Experiment config; its dataset section is rendered into
    /// `<output_dir>/data`.
    #[arg(
        long,
        conflicts_with_all = ["mode", "instances", "renders", "seed", "out", "train_instances"]
    )]
    config: Option<PathBuf>,
    /// aligned or perturbed.
    #[arg(long, required_unless_present = "config")]
    mode: Option<String>,
    /// Total instances (train plus test).
    #[arg(long, required_unless_present = "config")]
    instances: Option<usize>,
    /// Renders per domain per instance.
    #[arg(long, required_unless_present = "config")]
    renders: Option<usize>,
    #[arg(long, required_unless_present = "config")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
    /// Train-split size; default is two thirds of --instances.
    #[arg(long)]
    train_instances: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by train or ablate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// contour-to-filled or filled-to-contour, optionally with a :multi
    /// suffix, or a path to a protocol JSON file.
    #[arg(long, default_value = "contour-to-filled")]
    protocol: String,
    /// train or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Write the full per-query report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Random seeds per check.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A CDTF image file, e.g. one produced by gen-data.
    #[arg(long)]
    image: PathBuf,
    /// Tap layer name.
    #[arg(long)]
    tap: String,
    #[arg(long)]
    channel: usize,
    /// Output PGM path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// layers, pooling, or vanilla.
    #[arg(long)]
    axis: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Shape { .. } => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Numeric(_) => 4,
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::GradCheck(args) => grad_check(args),
        Command::Visualize(args) => visualize(args),
        Command::Ablate(args) => ablate(args),
    }
}

fn parse_mode(s: &str) -> Result<AlignMode, Error> {
    match s {
        "aligned" => Ok(AlignMode::Aligned),
        "perturbed" => Ok(AlignMode::Perturbed),
        other => Err(Error::config(format!(
            "unknown mode {other:?}: expected aligned or perturbed"
        ))),
    }
}

fn parse_split(s: &str) -> Result<Split, Error> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::config(format!(
            "unknown split {other:?}: expected train or test"
        ))),
    }
}

fn gen_data(args: GenDataArgs) -> Result<(), Error> {
    let (dataset, out_dir) = if let Some(path) = &args.config {
        let config = load_config(path)?;
        (config.dataset, config.output_dir.join("data"))
    } else {
        // clap guarantees these are present when --config is absent.
        let mode = parse_mode(args.mode.as_deref().unwrap())?;
        let instances = args.instances.unwrap();
        let renders = args.renders.unwrap();
        let seed = args.seed.unwrap();
        let train = args
            .train_instances
            .unwrap_or_else(|| default_train_instances(instances));
        let mut cfg = match mode {
            AlignMode::Aligned => DatasetConfig::aligned(instances, train, seed),
            AlignMode::Perturbed => DatasetConfig::perturbed(instances, train, renders, seed),
        };
        cfg.renders_per_domain = renders;
        (cfg, args.out.clone().unwrap())
    };
    let manifest = make_dataset(&dataset, &out_dir)?;
    let train_items = manifest
        .items
        .iter()
        .filter(|i| i.split == Split::Train)
        .count();
    println!(
        "{}",
        json!({
            "command": "gen-data",
            "manifest": out_dir.join(MANIFEST_FILE).display().to_string(),
            "images": manifest.items.len(),
            "train_items": train_items,
            "test_items": manifest.items.len() - train_items,
            "train_instances": manifest.instance_ids(Split::Train).len(),
            "test_instances": manifest.instance_ids(Split::Test).len(),
            "mode": dataset.mode,
            "seed": dataset.seed,
        })
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Error> {
    let config = load_config(&args.config)?;
    let artifacts = run_training(&config)?;
    println!(
        "{}",
        json!({
            "command": "train",
            "objective": config.objective,
            "checkpoint": artifacts.checkpoint_dir.display().to_string(),
            "log": artifacts.log_path.display().to_string(),
            "data": artifacts.data_dir.display().to_string(),
            "epochs": artifacts.outcome.epochs,
            "iterations": artifacts.outcome.iterations,
            "final_loss": artifacts.outcome.log.last().map(|r| r.loss),
            "best_val_acc1": artifacts.outcome.best_val_acc1,
            "train_accuracy": artifacts.outcome.train_accuracy,
        })
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Error> {
    let protocol: RetrievalProtocol = parse_protocol(&args.protocol)?;
    let split = parse_split(&args.split)?;
    let report = run_eval(&args.checkpoint, &args.data, split, &protocol)?;
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    println!(
        "{}",
        json!({
            "command": "eval",
            "split": args.split,
            "queries": report.queries,
            "gallery": report.gallery_size,
            "skipped_queries": report.skipped_queries,
            "acc": report.acc,
            "map": report.map,
        })
    );
    Ok(())
}

fn grad_check(args: GradCheckArgs) -> Result<(), Error> {
    let report = run_full_verification(args.seeds)?;
    println!(
        "{}",
        json!({
            "command": "grad-check",
            "seeds": report.seeds,
            "max_rel_error": report.max_rel_error,
            "primitives": report.primitives,
            "composites": report.composites,
            "preset_geometry": report.preset_geometry,
            "elapsed_seconds": report.elapsed_seconds,
        })
    );
    if report.max_rel_error >= 1e-3 {
        return Err(Error::numeric(format!(
            "gradient check failed: max relative error {:.3e} is not below 1e-3",
            report.max_rel_error
        )));
    }
    Ok(())
}

fn visualize(args: VisualizeArgs) -> Result<(), Error> {
    let (params, desc) = load_model(&args.checkpoint)?;
    let image = read_tensor(&args.image)?;
    let heat = activation_heatmap(&params, &desc.backbone, &image, &args.tap, args.channel)?;
    write_pgm(&args.out, &heat)?;
    println!(
        "{}",
        json!({
            "command": "visualize",
            "out": args.out.display().to_string(),
            "tap": args.tap,
            "channel": args.channel,
            "height": heat.shape()[0],
            "width": heat.shape()[1],
        })
    );
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<(), Error> {
    let config = load_config(&args.config)?;
    let axis = AblationAxis::parse(&args.axis)?;
    let outcome = run_ablation(&config, axis)?;
    println!(
        "{}",
        json!({
            "command": "ablate",
            "axis": axis.name(),
            "cells": outcome.report.cells.len(),
            "seeds": outcome.report.seeds,
            "csv": outcome.csv_path.display().to_string(),
            "json": outcome.json_path.display().to_string(),
        })
    );
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let json =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

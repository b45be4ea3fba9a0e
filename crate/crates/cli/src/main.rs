//! Experiment harness for the label-noise learning lab.
//!
//! Subcommands:
//! - `corrupt`    build a noisy dataset and write it with its transition
//! - `train`      run one training pipeline end to end
//! - `bias-sweep` train method pairs against increasingly biased matrices
//! - `diagnose`   re-emit the loss split of a checkpoint on a dataset

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{method_name, parse_method, resolve_experiment, FlatConfig};
use vrnl_core::trainer::{diagnostics_pass, prepare_data, run_pipeline, write_artifacts};
use vrnl_core::{LossHead, Mlp, NoisyDataset, TransitionMatrix};

#[derive(Parser)]
#[command(
    name = "vrnl",
    about = "Label-noise learning experiment runner",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable): --set method=forward-vrnl
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Top-level seed; expands into the named init/shuffle/corruption/
    /// perturbation streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Deterministic mode (execution is sequential and deterministic
    /// regardless; the flag is recorded in the summary).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset, corrupt its labels, and write dataset + matrix.
    Corrupt(CommonArgs),
    /// Run a full training pipeline.
    Train(CommonArgs),
    /// Sweep transition bias γ over method pairs.
    BiasSweep(CommonArgs),
    /// Recompute the loss split of a saved checkpoint on a dataset CSV.
    Diagnose(CommonArgs),
}

fn flat_config(args: &CommonArgs) -> Result<FlatConfig> {
    let mut cfg = FlatConfig::load(args.config.as_deref())?;
    cfg.apply_overrides(&args.sets)?;
    if let Some(seed) = args.seed {
        cfg.set("seed", seed.to_string());
    }
    if args.deterministic {
        cfg.set("deterministic", "true".to_string());
    }
    Ok(cfg)
}

fn cmd_corrupt(args: &CommonArgs) -> Result<()> {
    let flat = flat_config(args)?;
    let experiment = resolve_experiment(&flat)?;
    std::fs::create_dir_all(&args.out)?;

    let (bundle, true_t) = prepare_data(&experiment)?;
    bundle.train.save_csv(&args.out.join("train.csv"))?;
    bundle.val.save_csv(&args.out.join("val.csv"))?;
    true_t.save(&args.out.join("transition_true.txt"), Some("source: true"))?;

    #[derive(Serialize)]
    struct CorruptSummary {
        config: vrnl_core::ExperimentConfig,
        train_examples: usize,
        val_examples: usize,
        flipped_fraction: f64,
    }
    let flipped = bundle
        .train
        .noisy_labels
        .iter()
        .zip(&bundle.train.clean_labels)
        .filter(|(a, b)| a != b)
        .count() as f64
        / bundle.train.len() as f64;
    let summary = CorruptSummary {
        config: experiment,
        train_examples: bundle.train.len(),
        val_examples: bundle.val.len(),
        flipped_fraction: flipped,
    };
    std::fs::write(
        args.out.join("corrupt_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "corrupt: wrote {} train / {} val examples to {} (flipped {:.1}%)",
        bundle.train.len(),
        bundle.val.len(),
        args.out.display(),
        100.0 * flipped
    );
    Ok(())
}

fn cmd_train(args: &CommonArgs) -> Result<()> {
    let flat = flat_config(args)?;
    let experiment = resolve_experiment(&flat)?;
    let result = run_pipeline(&experiment)?;
    write_artifacts(&result, &args.out)?;
    println!(
        "train[{}]: best epoch {} val {:.4} test {:.4} (final test {:.4}), artifacts in {}",
        method_name(experiment.risk.method, experiment.risk.alpha > 0.0),
        result.summary.best_epoch,
        result.summary.best_val_acc,
        result.summary.best_test_acc,
        result.summary.final_test_acc,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepCell {
    method: String,
    gamma: f64,
    seed: u64,
    eps_t: f64,
    best_test_acc: f64,
}

fn cmd_bias_sweep(args: &CommonArgs) -> Result<()> {
    let flat = flat_config(args)?;
    let methods_raw = flat.str("sweep.methods", "reweight,reweight-vrnl");
    let methods: Vec<String> = methods_raw
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let has_pair = methods
        .iter()
        .any(|m| m.ends_with("-vrnl") && methods.iter().any(|o| o == m.trim_end_matches("-vrnl")));
    if !has_pair {
        bail!("sweep.methods must include at least one base/-vrnl pair, got '{methods_raw}'");
    }
    for m in &methods {
        parse_method(m)?;
    }
    let gammas = flat.list("sweep.gammas", &[0.01, 0.05, 0.10, 0.15])?;
    let n_seeds = flat.u64("sweep.seeds", 5)?;
    let base_seed = flat.u64("seed", 0)?;

    std::fs::create_dir_all(&args.out)?;
    let mut cells: Vec<SweepCell> = Vec::new();
    let mut echo_config = None;
    for method in &methods {
        for &gamma in &gammas {
            for s in 0..n_seeds {
                let mut run_flat = flat.clone();
                run_flat.set("method", method.clone());
                run_flat.set("gamma", format!("{gamma}"));
                run_flat.set("transition", "given".to_string());
                run_flat.set("seed", format!("{}", base_seed + s));
                let experiment = resolve_experiment(&run_flat)?;
                let result = run_pipeline(&experiment)?;
                println!(
                    "bias-sweep: {method} gamma={gamma} seed={} eps_T={:.4} best test {:.4}",
                    base_seed + s,
                    result.summary.eps_t,
                    result.summary.best_test_acc
                );
                cells.push(SweepCell {
                    method: method.clone(),
                    gamma,
                    seed: base_seed + s,
                    eps_t: result.summary.eps_t,
                    best_test_acc: result.summary.best_test_acc,
                });
                echo_config = Some(experiment);
            }
        }
    }
    cells.sort_by(|a, b| {
        (&a.method, a.gamma, a.seed)
            .partial_cmp(&(&b.method, b.gamma, b.seed))
            .expect("finite")
    });

    let mut csv = String::from("method,gamma,seed,eps_t,best_test_acc\n");
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            c.method, c.gamma, c.seed, c.eps_t, c.best_test_acc
        ));
    }
    std::fs::write(args.out.join("bias_sweep.csv"), csv)?;

    #[derive(Serialize)]
    struct SweepSummary {
        methods: Vec<String>,
        gammas: Vec<f64>,
        seeds: u64,
        base_seed: u64,
        last_run_config: Option<vrnl_core::ExperimentConfig>,
        cells: Vec<SweepCell>,
    }
    std::fs::write(
        args.out.join("bias_sweep_summary.json"),
        serde_json::to_string_pretty(&SweepSummary {
            methods,
            gammas,
            seeds: n_seeds,
            base_seed,
            last_run_config: echo_config,
            cells,
        })?,
    )?;
    println!(
        "bias-sweep: wrote {}",
        args.out.join("bias_sweep.csv").display()
    );
    Ok(())
}

fn cmd_diagnose(args: &CommonArgs) -> Result<()> {
    let flat = flat_config(args)?;
    let checkpoint = PathBuf::from(
        flat.opt_str("diagnose.checkpoint")
            .ok_or_else(|| anyhow!("diagnose.checkpoint must name a saved model"))?,
    );
    let dataset_path = PathBuf::from(
        flat.opt_str("diagnose.dataset")
            .ok_or_else(|| anyhow!("diagnose.dataset must name a dataset csv"))?,
    );
    let classes = flat.usize("data.classes", 3)?;
    let mlp = Mlp::load(&checkpoint)?;
    let data = NoisyDataset::load_csv(&dataset_path, classes)?;

    let head = match flat.opt_str("diagnose.transition") {
        Some(path) => LossHead::ForwardCe {
            transition: TransitionMatrix::load(Path::new(&path))?,
        },
        None => LossHead::PlainCe,
    };
    let split = diagnostics_pass(&mlp, &data, &head, None)?;

    std::fs::create_dir_all(&args.out)?;
    let mut csv = String::from("loss_correct,loss_incorrect,loss_var\n");
    csv.push_str(&format!(
        "{},{},{}\n",
        split
            .mean_correct
            .map(|v| v.to_string())
            .unwrap_or_default(),
        split
            .mean_incorrect
            .map(|v| v.to_string())
            .unwrap_or_default(),
        split.variance
    ));
    std::fs::write(args.out.join("diagnose.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Corrupt(args) => cmd_corrupt(args),
        Command::Train(args) => cmd_train(args),
        Command::BiasSweep(args) => cmd_bias_sweep(args),
        Command::Diagnose(args) => cmd_diagnose(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

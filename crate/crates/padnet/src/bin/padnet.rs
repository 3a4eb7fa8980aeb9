use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use padnet::analysis;
use padnet::config::{
    resolve_method, CompareConfig, DataSource, ExperimentConfig, Method, Overrides, SweepConfig,
};
use padnet::harness::{
    self, evaluate, load_datasets, GradProbe, Summary, CHECKPOINT_FILE, CONFIG_FILE, EVENTS_FILE, REPORT_FILE,
    SUMMARY_FILE,
};
use padnet::layers::TemperaturePlan;
use padnet::model::Model;
use padnet::partition::{run_schedule, PartitionPlan};
use padnet::tensor::Float;
use padnet::{PadError, Result};

#[derive(Parser)]
#[command(name = "padnet", version, about = "Partially dynamic networks: training, mode partition, and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment from a JSON config
    Train(TrainArgs),
    /// Apply one mode-partition step to a trained checkpoint
    Partition(PartitionArgs),
    /// Evaluate a checkpoint on its test set
    Evaluate(CheckpointArgs),
    /// Variance, ratio, and accounting reports for a checkpoint
    Analyze(CheckpointArgs),
    /// Train a grid of dynamic ratios × seeds and aggregate the results
    Sweep(GridArgs),
    /// Train the same setup under several partition methods and rank them
    Compare(GridArgs),
    /// Write partition masks as PGM images
    ExportMask(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's dynamic ratio
    #[arg(long)]
    kappa: Option<f64>,
    /// Override the config's partition method
    #[arg(long)]
    method: Option<Method>,
}

#[derive(Args)]
struct PartitionArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Override the checkpoint's dynamic ratio
    #[arg(long)]
    kappa: Option<f64>,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    /// Grid config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Export only this layer (default: every partitioned layer)
    #[arg(long)]
    layer: Option<String>,
    /// Image rows (with --cols; default: a layer-specific rectangle)
    #[arg(long, requires = "cols")]
    rows: Option<usize>,
    /// Image columns (with --rows)
    #[arg(long, requires = "rows")]
    cols: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Partition(args) => cmd_partition(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Compare(args) => cmd_compare(args),
        Command::ExportMask(args) => cmd_export_mask(args),
    }
}

/// Resolved config, crate version, and the complete list of files the run
/// will produce; written before any computation starts.
fn write_manifest(out: &Path, command: &str, seed: Option<u64>, config: serde_json::Value, artifacts: &[String]) -> Result<()> {
    fs::create_dir_all(out)?;
    let manifest = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
        "artifacts": artifacts,
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn dataset_artifacts(cfg: &ExperimentConfig) -> Vec<String> {
    match cfg.data.source {
        DataSource::Gratings { .. } => vec![
            "gratings/train-images.idx".into(),
            "gratings/train-labels.idx".into(),
            "gratings/test-images.idx".into(),
            "gratings/test-labels.idx".into(),
        ],
        _ => Vec::new(),
    }
}

fn train_artifacts(cfg: &ExperimentConfig) -> Vec<String> {
    let mut files = vec![
        "manifest.json".to_string(),
        CONFIG_FILE.to_string(),
        REPORT_FILE.to_string(),
        EVENTS_FILE.to_string(),
        SUMMARY_FILE.to_string(),
        CHECKPOINT_FILE.to_string(),
    ];
    files.extend(dataset_artifacts(cfg));
    files
}

fn final_tau(cfg: &ExperimentConfig) -> Result<Float> {
    let plan = TemperaturePlan::new(
        cfg.train.temperature.start as Float,
        cfg.train.temperature.end as Float,
        cfg.train.temperature.anneal_epochs,
    )?;
    Ok(plan.tau_at(cfg.train.epochs.saturating_sub(1)))
}

fn cmd_train(args: TrainArgs) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.apply(&Overrides { seed: args.seed, kappa: args.kappa, method: args.method });
    cfg.validate()?;
    write_manifest(&args.out, "train", Some(cfg.seed), serde_json::to_value(&cfg)?, &train_artifacts(&cfg))?;
    let summary = harness::train(&cfg, &args.out)?;
    println!(
        "{} kappa {} seed {}: final test accuracy {:.4}",
        summary.method, summary.kappa, summary.seed, summary.final_test_accuracy
    );
    if let Some(acc) = summary.compacted_test_accuracy {
        println!("compacted: {} -> {} scalars, test accuracy {:.4}", summary.scalar_count, summary.compacted_scalar_count.unwrap_or(0), acc);
    }
    Ok(true)
}

fn cmd_partition(args: PartitionArgs) -> Result<bool> {
    let (mut model, cfg, _) = Model::load(&args.checkpoint)?;
    if model.is_compacted() {
        return Err(PadError::InvalidArgument("checkpoint is already compacted; partition before compaction".into()));
    }
    let names = model.pad_layer_names();
    if names.is_empty() {
        return Err(PadError::InvalidArgument("checkpoint has no partition state (fully dynamic build)".into()));
    }
    let kappa = args.kappa.unwrap_or(cfg.pad.kappa);
    let artifacts: Vec<String> = ["manifest.json", CHECKPOINT_FILE, EVENTS_FILE, "partition.json"]
        .iter()
        .map(|s| s.to_string())
        .chain(dataset_artifacts(&cfg))
        .collect();
    write_manifest(&args.out, "partition", Some(cfg.seed), serde_json::to_value(&cfg)?, &artifacts)?;

    let (train_ds, _) = load_datasets(&cfg, &args.out)?;
    let tau = final_tau(&cfg)?;
    let plan = PartitionPlan::new(kappa, 1, cfg.pad.batches_per_step)?;
    let mut masks = model.masks();
    let mut events = Vec::new();
    {
        let mut probe = GradProbe::new(&model, &train_ds, cfg.train.batch_size, tau, cfg.seed);
        run_schedule(&mut probe, &mut masks, &names, &plan, cfg.pad.scope, |ev| events.push(ev))?;
    }
    model.apply_masks(&masks)?;

    let mut events_file = fs::File::create(args.out.join(EVENTS_FILE))?;
    for ev in &events {
        writeln!(events_file, "{}", serde_json::to_string(ev)?)?;
    }
    let dist = analysis::ratio_distribution(&model);
    fs::write(args.out.join("partition.json"), serde_json::to_string_pretty(&dist)? + "\n")?;
    model.save(&args.out.join(CHECKPOINT_FILE), &cfg, serde_json::json!({ "partitioned_at_kappa": kappa }))?;
    for row in &dist.layers {
        println!("{}: {}/{} dynamic ({:.3})", row.layer, row.dynamic_count, row.mask_len, row.ratio);
    }
    Ok(true)
}

fn cmd_evaluate(args: CheckpointArgs) -> Result<bool> {
    let (model, cfg, _) = Model::load(&args.checkpoint)?;
    let artifacts: Vec<String> =
        ["manifest.json", "eval.json"].iter().map(|s| s.to_string()).chain(dataset_artifacts(&cfg)).collect();
    write_manifest(&args.out, "evaluate", Some(cfg.seed), serde_json::to_value(&cfg)?, &artifacts)?;
    let (_, test) = load_datasets(&cfg, &args.out)?;
    let report = evaluate(&model, &test, final_tau(&cfg)?, cfg.train.batch_size)?;
    fs::write(args.out.join("eval.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("test accuracy {:.4}, mean loss {:.6}", report.accuracy, report.mean_loss);
    Ok(true)
}

fn cmd_analyze(args: CheckpointArgs) -> Result<bool> {
    let (model, cfg, _) = Model::load(&args.checkpoint)?;
    let artifacts: Vec<String> = [
        "manifest.json",
        "analysis.json",
        "variance_parameter.csv",
        "variance_output.csv",
        "ratios.csv",
        "accounting.csv",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain(dataset_artifacts(&cfg))
    .collect();
    write_manifest(&args.out, "analyze", Some(cfg.seed), serde_json::to_value(&cfg)?, &artifacts)?;

    let (_, test) = load_datasets(&cfg, &args.out)?;
    let variance = analysis::variance_report(&model, &test, final_tau(&cfg)?, cfg.train.batch_size)?;
    let ratios = analysis::ratio_distribution(&model);
    let accounting = analysis::account(&model)?;

    fs::write(args.out.join("variance_parameter.csv"), variance.parameter_csv())?;
    fs::write(args.out.join("variance_output.csv"), variance.output_csv())?;
    fs::write(args.out.join("ratios.csv"), ratios.to_csv())?;
    fs::write(args.out.join("accounting.csv"), accounting.to_csv())?;
    let combined = serde_json::json!({ "variance": variance, "ratios": ratios, "accounting": accounting });
    fs::write(args.out.join("analysis.json"), serde_json::to_string_pretty(&combined)? + "\n")?;

    println!("{} parameters, {} MACs per sample", accounting.total_params, accounting.total_macs);
    for row in &variance.parameter {
        println!("{}: parameter variance {:.3e}", row.layer, row.mean_variance);
    }
    Ok(true)
}

fn cmd_export_mask(args: ExportArgs) -> Result<bool> {
    let (model, cfg, _) = Model::load(&args.checkpoint)?;
    let names = model.pad_layer_names();
    if names.is_empty() {
        return Err(PadError::InvalidArgument("checkpoint has no partition masks".into()));
    }
    let selected: Vec<usize> = match &args.layer {
        None => (0..names.len()).collect(),
        Some(want) => match names.iter().position(|n| n == want) {
            Some(i) => vec![i],
            None => {
                return Err(PadError::InvalidArgument(format!(
                    "no partitioned layer named {want:?}; known layers: {}",
                    names.join(", ")
                )))
            }
        },
    };
    let files: Vec<String> = selected.iter().map(|&i| format!("{}.pgm", names[i])).collect();
    let artifacts: Vec<String> = std::iter::once("manifest.json".to_string()).chain(files.iter().cloned()).collect();
    write_manifest(&args.out, "export-mask", Some(cfg.seed), serde_json::to_value(&cfg)?, &artifacts)?;

    let masks = model.masks();
    let hints = mask_shape_hints(&model);
    for (&i, file) in selected.iter().zip(&files) {
        let (rows, cols) = match (args.rows, args.cols) {
            (Some(r), Some(c)) => (r, c),
            _ => hints[i],
        };
        analysis::write_mask_pgm(&masks[i], rows, cols, &args.out.join(file))?;
        println!("{} -> {file} ({rows}x{cols})", names[i]);
    }
    Ok(true)
}

/// Default image rectangles: kernel positions as output-channel rows, expert
/// positions as `2h` rows of width `d`.
fn mask_shape_hints(model: &Model) -> Vec<(usize, usize)> {
    use padnet::model::Block;
    model
        .blocks
        .iter()
        .filter_map(|b| match b {
            Block::DyConv { layer, pad: Some(_) } => Some((layer.out_ch, layer.in_ch * layer.kh * layer.kw)),
            Block::Moe { layer, pad: Some(_) } => Some((2 * layer.h, layer.d)),
            _ => None,
        })
        .collect()
}

struct Cell {
    label: String,
    dir: PathBuf,
    cfg: ExperimentConfig,
}

struct CellOutcome {
    label: String,
    dir: String,
    summary: Option<Summary>,
    error: Option<String>,
}

fn env_threads() -> usize {
    std::env::var("PADNET_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).unwrap_or(1).max(1)
}

/// Train every cell into its own subdirectory, at most `PADNET_THREADS` at a
/// time; results come back in cell order regardless of completion order.
fn run_cells(cells: Vec<Cell>) -> Result<Vec<CellOutcome>> {
    for cell in &cells {
        cell.cfg.validate().map_err(|e| PadError::InvalidArgument(format!("cell {}: {e}", cell.label)))?;
    }
    let threads = env_threads().min(cells.len().max(1));
    let results: Mutex<Vec<Option<CellOutcome>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let cells = &cells;
    let results_ref = &results;
    let next_ref = &next;
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(move || loop {
                let i = next_ref.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let cell = &cells[i];
                let outcome = match harness::train(&cell.cfg, &cell.dir) {
                    Ok(summary) => CellOutcome {
                        label: cell.label.clone(),
                        dir: cell.dir.display().to_string(),
                        summary: Some(summary),
                        error: None,
                    },
                    Err(e) => CellOutcome {
                        label: cell.label.clone(),
                        dir: cell.dir.display().to_string(),
                        summary: None,
                        error: Some(e.to_string()),
                    },
                };
                let mut guard = results_ref.lock().expect("no panics while holding the lock");
                guard[i] = Some(outcome);
            });
        }
    });
    Ok(results.into_inner().expect("worker threads finished").into_iter().map(|o| o.expect("every cell ran")).collect())
}

fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cmd_sweep(args: GridArgs) -> Result<bool> {
    let sweep = SweepConfig::load(&args.config)?;
    let mut cells = Vec::new();
    let mut artifacts = vec!["manifest.json".to_string(), "sweep.csv".to_string(), "sweep.json".to_string()];
    for &kappa in &sweep.kappas {
        for &seed in &sweep.seeds {
            let label = format!("kappa{kappa}-seed{seed}");
            let mut cfg = sweep.base.clone();
            cfg.pad.kappa = kappa;
            cfg.seed = seed;
            artifacts.push(format!("cells/{label}/"));
            let dir = args.out.join("cells").join(&label);
            cells.push(Cell { label, dir, cfg });
        }
    }
    write_manifest(&args.out, "sweep", None, serde_json::to_value(&sweep)?, &artifacts)?;

    let outcomes = run_cells(cells)?;
    for o in &outcomes {
        match (&o.summary, &o.error) {
            (Some(s), _) => println!("{}: accuracy {:.4}", o.label, s.final_test_accuracy),
            (_, Some(e)) => eprintln!("{}: FAILED: {e}", o.label),
            _ => unreachable!(),
        }
    }

    let mut rows = Vec::new();
    for (ki, &kappa) in sweep.kappas.iter().enumerate() {
        let per_seed: Vec<&CellOutcome> =
            outcomes[ki * sweep.seeds.len()..(ki + 1) * sweep.seeds.len()].iter().collect();
        let accs: Vec<f64> =
            per_seed.iter().filter_map(|o| o.summary.as_ref().map(|s| s.final_test_accuracy)).collect();
        let failures = per_seed.len() - accs.len();
        let (mean, std) = if accs.is_empty() { (None, None) } else {
            let (m, s) = mean_and_sample_std(&accs);
            (Some(m), Some(s))
        };
        rows.push((kappa, per_seed.len(), failures, mean, std));
    }
    let complete_means: Vec<f64> = rows.iter().filter_map(|r| r.3).collect();
    let grand = if complete_means.is_empty() { 0.0 } else { complete_means.iter().sum::<f64>() / complete_means.len() as f64 };

    let mut csv = String::from("kappa,seeds,failures,mean_accuracy,std_accuracy,normalized_performance\n");
    let mut json_rows = Vec::new();
    for &(kappa, seeds, failures, mean, std) in &rows {
        let normalized = mean.and_then(|m| if grand != 0.0 { Some((m - grand) / grand) } else { None });
        csv.push_str(&format!(
            "{kappa},{seeds},{failures},{},{},{}\n",
            opt(mean),
            opt(std),
            opt(normalized)
        ));
        json_rows.push(serde_json::json!({
            "kappa": kappa,
            "seeds": seeds,
            "failures": failures,
            "mean_accuracy": mean,
            "std_accuracy": std,
            "normalized_performance": normalized,
        }));
    }
    fs::write(args.out.join("sweep.csv"), &csv)?;
    let cells_json: Vec<serde_json::Value> = outcomes
        .iter()
        .map(|o| {
            serde_json::json!({
                "cell": o.label,
                "dir": o.dir,
                "accuracy": o.summary.as_ref().map(|s| s.final_test_accuracy),
                "error": o.error,
            })
        })
        .collect();
    fs::write(
        args.out.join("sweep.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "rows": json_rows, "cells": cells_json }))? + "\n",
    )?;
    print!("{csv}");
    Ok(outcomes.iter().all(|o| o.error.is_none()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_compare(args: GridArgs) -> Result<bool> {
    let compare = CompareConfig::load(&args.config)?;
    let mut cells = Vec::new();
    let mut artifacts = vec!["manifest.json".to_string(), "compare.csv".to_string(), "compare.json".to_string()];
    for name in &compare.methods {
        let (method, forced_kappa) = resolve_method(name)?;
        for &seed in &compare.seeds {
            let mut cfg = compare.base.clone();
            cfg.pad.method = method;
            if let Some(k) = forced_kappa {
                cfg.pad.kappa = k;
            }
            cfg.pad.partition_epochs = match method {
                Method::FullyDynamic => Vec::new(),
                Method::Imp => cfg.pad.partition_epochs.clone(),
                _ => match cfg.pad.partition_epochs.last() {
                    Some(&last) => vec![last],
                    None => {
                        return Err(PadError::Config {
                            field: "base.pad.partition_epochs".into(),
                            message: "method comparison needs at least one partition epoch".into(),
                        })
                    }
                },
            };
            cfg.seed = seed;
            let label = format!("{name}-seed{seed}");
            artifacts.push(format!("cells/{label}/"));
            let dir = args.out.join("cells").join(&label);
            cells.push(Cell { label, dir, cfg });
        }
    }
    write_manifest(&args.out, "compare", None, serde_json::to_value(&compare)?, &artifacts)?;

    let outcomes = run_cells(cells)?;
    let mut rows = Vec::new();
    for (mi, name) in compare.methods.iter().enumerate() {
        let per_seed = &outcomes[mi * compare.seeds.len()..(mi + 1) * compare.seeds.len()];
        let accs: Vec<f64> =
            per_seed.iter().filter_map(|o| o.summary.as_ref().map(|s| s.final_test_accuracy)).collect();
        let failures = per_seed.len() - accs.len();
        let (mean, std) = if accs.is_empty() { (None, None) } else {
            let (m, s) = mean_and_sample_std(&accs);
            (Some(m), Some(s))
        };
        rows.push((name.clone(), per_seed.len(), failures, mean, std));
    }
    let mut ranked: Vec<&(String, usize, usize, Option<f64>, Option<f64>)> = rows.iter().collect();
    ranked.sort_by(|a, b| b.3.partial_cmp(&a.3).expect("accuracies are finite"));

    let mut csv = String::from("method,seeds,failures,mean_accuracy,std_accuracy\n");
    for (name, seeds, failures, mean, std) in &rows {
        csv.push_str(&format!("{name},{seeds},{failures},{},{}\n", opt(*mean), opt(*std)));
    }
    fs::write(args.out.join("compare.csv"), &csv)?;
    let ranking: Vec<&str> = ranked.iter().map(|r| r.0.as_str()).collect();
    let cells_json: Vec<serde_json::Value> = outcomes
        .iter()
        .map(|o| {
            serde_json::json!({
                "cell": o.label,
                "dir": o.dir,
                "accuracy": o.summary.as_ref().map(|s| s.final_test_accuracy),
                "error": o.error,
            })
        })
        .collect();
    let json_rows: Vec<serde_json::Value> = rows
        .iter()
        .map(|(name, seeds, failures, mean, std)| {
            serde_json::json!({
                "method": name,
                "seeds": seeds,
                "failures": failures,
                "mean_accuracy": mean,
                "std_accuracy": std,
            })
        })
        .collect();
    fs::write(
        args.out.join("compare.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "rows": json_rows, "ranking": ranking, "cells": cells_json }))?
            + "\n",
    )?;
    print!("{csv}");
    println!("ranking: {}", ranking.join(" > "));
    for o in &outcomes {
        if let Some(e) = &o.error {
            eprintln!("{}: FAILED: {e}", o.label);
        }
    }
    Ok(outcomes.iter().all(|o| o.error.is_none()))
}

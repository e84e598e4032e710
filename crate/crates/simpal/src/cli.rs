//! Command-line entry points: data generation, training, evaluation,
//! feature export, and multi-seed report aggregation. Each seed runs
//! independently and writes seed-namespaced files, so identical
//! config/seed pairs reproduce byte-identical outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::{
    apply_category_shift, generate_domains, hide_labels, load_dataset, save_dataset, DataError,
    DomainDataset, EvalLabels,
};
use crate::eval::{evaluate, export_features, target_accuracy, EvalError};
use crate::model::{init_params, ModelParams};
use crate::trainer::{
    adapt, load_snapshot, metrics_csv, save_snapshot, train_domain_specific_baseline, warm_start, MetricRow, Phase,
    TrainError, TrainMode, TrainOptions, TrainingState,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{failed} of {total} seeds failed")]
    SeedsFailed { failed: usize, total: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Parser, Debug)]
#[command(name = "simpal", about = "Multi-source domain adaptation through classifier agreement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic per-domain dataset CSVs plus a manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
    },
    /// Warm-start and adapt per seed; writes metrics, snapshots, and a
    /// summary per seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
        #[arg(long)]
        mode: Option<TrainMode>,
        /// Warm-start snapshot to resume from (skips the warm-start phase).
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Evaluate a parameter snapshot into a JSON report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
    },
    /// Export pre-classifier features of every dataset under a snapshot.
    ExportFeatures {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
    },
    /// Aggregate per-seed summaries in a run directory into mean/stddev.
    Report {
        /// Run directory containing summary_seed*.json files.
        run_dir: PathBuf,
    },
}

/// Datasets resolved for one seed: labeled sources, the unlabeled
/// target, and the hidden evaluation channel when ground truth exists.
pub struct ResolvedData {
    pub sources: Vec<DomainDataset>,
    pub target: DomainDataset,
    pub eval_labels: Option<EvalLabels>,
    pub n_classes: usize,
}

pub fn resolve_data(config: &RunConfig, seed: u64) -> Result<ResolvedData, CliError> {
    if let Some(synth) = &config.data.synthetic {
        let mut domains = generate_domains(&synth.shift_config(seed))?;
        let target_full = domains.pop().expect("generator returns sources plus target");
        let (target, eval_labels) = hide_labels(target_full);
        let sources = apply_category_shift(domains, config.data.category_shift, config.data.overlap_count)?;
        Ok(ResolvedData {
            sources,
            target,
            eval_labels,
            n_classes: synth.n_classes,
        })
    } else {
        let files = config.data.files.as_ref().expect("validated: one data source present");
        let sources: Vec<DomainDataset> = files
            .sources
            .iter()
            .map(|p| load_dataset(p))
            .collect::<Result<_, _>>()?;
        let target_full = load_dataset(&files.target)?;
        let d_in = target_full.dim();
        if let Some(bad) = sources.iter().find(|s| s.dim() != d_in) {
            return Err(CliError::Invalid(format!(
                "source {} has dimension {}, target has {}",
                bad.domain_id,
                bad.dim(),
                d_in
            )));
        }
        let n_classes = sources
            .iter()
            .flat_map(|s| s.label_set.iter().copied())
            .max()
            .map(|m| m + 1)
            .ok_or_else(|| CliError::Invalid("sources carry no labels".into()))?;
        let (target, eval_labels) = hide_labels(target_full);
        Ok(ResolvedData {
            sources,
            target,
            eval_labels,
            n_classes,
        })
    }
}

fn build_params(config: &RunConfig, data: &ResolvedData, seed: u64) -> ModelParams {
    let n_heads = config.model.n_classifiers.unwrap_or(data.sources.len());
    init_params(
        data.target.dim(),
        &config.model.hidden_dims,
        config.model.latent_dim,
        n_heads,
        data.n_classes,
        seed,
    )
}

fn effective_config(
    path: &Path,
    seed_override: &Option<Vec<u64>>,
    mode_override: Option<TrainMode>,
) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::load(path)?;
    if let Some(seeds) = seed_override {
        if seeds.is_empty() {
            return Err(CliError::Invalid("empty --seed list".into()));
        }
        config.experiment.seeds = seeds.clone();
    }
    if let Some(mode) = mode_override {
        config.train.mode = mode;
    }
    Ok(config)
}

pub fn cmd_gen_data(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let synth = config
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| CliError::Invalid("gen-data requires a [data.synthetic] section".into()))?;
    // validate everything up front so no file is written on bad config
    for &seed in &config.experiment.seeds {
        synth.shift_config(seed).validate()?;
    }
    config.validate()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    for &seed in &config.experiment.seeds {
        let data = resolve_data(config, seed)?;
        let mut files = Vec::new();
        for src in &data.sources {
            let path = out.join(format!("{}_seed{}.csv", src.domain_id, seed));
            save_dataset(src, &path)?;
            files.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
        let target_path = out.join(format!("target_seed{seed}.csv"));
        save_dataset(&data.target, &target_path)?;
        files.push(target_path.file_name().unwrap().to_string_lossy().into_owned());
        // ground truth kept in a separate evaluation-only file
        if let Some(truth) = &data.eval_labels {
            let mut labeled = data.target.clone();
            labeled.labels = Some(truth.for_evaluation().to_vec());
            labeled.label_set = truth.for_evaluation().iter().copied().collect();
            let eval_path = out.join(format!("target_eval_seed{seed}.csv"));
            save_dataset(&labeled, &eval_path)?;
            files.push(eval_path.file_name().unwrap().to_string_lossy().into_owned());
        }
        let manifest = serde_json::json!({
            "experiment": config.experiment.name,
            "seed": seed,
            "d_in": data.target.dim(),
            "n_classes": data.n_classes,
            "category_shift": config.data.category_shift,
            "files": files,
            "source_label_sets": data.sources.iter().map(|s| s.label_set.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
        });
        let manifest_path = out.join(format!("manifest_seed{seed}.json"));
        std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap())
            .map_err(io_err(&manifest_path))?;
        println!("seed {seed}: wrote {} files to {}", files.len() + 1, out.display());
    }
    Ok(())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub mode: TrainMode,
    pub completed: bool,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_agreement_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warm_start_target_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_target_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dtprime_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn write_seed_outputs(
    out: &Path,
    seed: u64,
    metrics: &[MetricRow],
    summary: &SeedSummary,
) -> Result<(), CliError> {
    let metrics_path = out.join(format!("metrics_seed{seed}.csv"));
    std::fs::write(&metrics_path, metrics_csv(metrics)).map_err(io_err(&metrics_path))?;
    let summary_path = out.join(format!("summary_seed{seed}.json"));
    std::fs::write(&summary_path, serde_json::to_string_pretty(summary).unwrap()).map_err(io_err(&summary_path))?;
    Ok(())
}

fn last_warm_start_acc(metrics: &[MetricRow]) -> Option<f64> {
    metrics
        .iter()
        .rev()
        .find(|r| r.phase == Phase::WarmStart)
        .and_then(|r| r.target_acc)
}

fn run_one_seed(
    config: &RunConfig,
    seed: u64,
    out: &Path,
    resume: Option<&Path>,
) -> Result<SeedSummary, CliError> {
    let data = resolve_data(config, seed)?;
    let opts = TrainOptions {
        seed,
        ..config.train.clone()
    };
    let eval_labels = data.eval_labels.as_ref();

    let outcome: Result<TrainingState, TrainError> = match opts.mode {
        TrainMode::DomainSpecificBaseline => {
            let params = build_params(config, &data, seed);
            train_domain_specific_baseline(params, &data.sources, &data.target, eval_labels, &opts)
        }
        TrainMode::Simpal | TrainMode::Oracle => {
            let warm = match resume {
                Some(path) => Ok(TrainingState::resume(load_snapshot(path)?)),
                None => {
                    let params = build_params(config, &data, seed);
                    warm_start(params, &data.sources, &data.target, eval_labels, &opts)
                }
            };
            match warm {
                Ok(warm_state) => {
                    save_snapshot(&warm_state.params, &out.join(format!("warmstart_seed{seed}.snap")))?;
                    adapt(warm_state, &data.sources, &data.target, eval_labels, &opts)
                }
                Err(e) => Err(e),
            }
        }
    };

    match outcome {
        Ok(state) => {
            save_snapshot(&state.params, &out.join(format!("final_seed{seed}.snap")))?;
            let final_acc = match eval_labels {
                Some(truth) => Some(target_accuracy(&state.params, &data.target, truth)?),
                None => None,
            };
            let summary = SeedSummary {
                seed,
                mode: opts.mode,
                completed: true,
                iterations: state.iteration,
                converged: state.converged,
                final_agreement_rate: state.agreement_history.last().map(|&(_, a)| a),
                warm_start_target_acc: last_warm_start_acc(&state.metrics),
                final_target_acc: final_acc,
                dtprime_size: state.metrics.iter().rev().find_map(|r| r.dtprime_size),
                error: None,
            };
            write_seed_outputs(out, seed, &state.metrics, &summary)?;
            Ok(summary)
        }
        Err(TrainError::Aborted {
            iteration,
            reason,
            state,
        }) => {
            // preserve partial logs before surfacing the failure
            let summary = SeedSummary {
                seed,
                mode: opts.mode,
                completed: false,
                iterations: iteration,
                converged: false,
                final_agreement_rate: state.agreement_history.last().map(|&(_, a)| a),
                warm_start_target_acc: last_warm_start_acc(&state.metrics),
                final_target_acc: None,
                dtprime_size: None,
                error: Some(reason.clone()),
            };
            write_seed_outputs(out, seed, &state.metrics, &summary)?;
            Ok(summary)
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_train(config: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<Vec<SeedSummary>, CliError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut summaries = Vec::new();
    for &seed in &config.experiment.seeds {
        let summary = run_one_seed(config, seed, out, resume)?;
        let status = if summary.completed { "ok" } else { "FAILED" };
        println!(
            "seed {seed}: {status} iterations={} converged={} A={} target_acc={}",
            summary.iterations,
            summary.converged,
            summary
                .final_agreement_rate
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "-".into()),
            summary
                .final_target_acc
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "-".into()),
        );
        summaries.push(summary);
    }
    if config.experiment.seeds.len() > 1 {
        print_aggregate(&summaries);
    }
    let failed = summaries.iter().filter(|s| !s.completed).count();
    if failed > 0 {
        return Err(CliError::SeedsFailed {
            failed,
            total: summaries.len(),
        });
    }
    Ok(summaries)
}

pub fn cmd_eval(config: &RunConfig, snapshot: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let data = resolve_data(config, seed)?;
    let params = load_snapshot(snapshot)?;
    if params.d_in() != data.target.dim() {
        return Err(CliError::Invalid(format!(
            "snapshot expects input dimension {}, data has {}",
            params.d_in(),
            data.target.dim()
        )));
    }
    let report = evaluate(
        &params,
        &data.sources,
        &data.target,
        data.eval_labels.as_ref(),
        10,
        config.train.margin_mode,
        seed,
    )?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let stem = snapshot.file_stem().unwrap_or_default().to_string_lossy();
    let path = out.join(format!("eval_{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&report).unwrap()).map_err(io_err(&path))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_export_features(config: &RunConfig, snapshot: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let data = resolve_data(config, seed)?;
    let params = load_snapshot(snapshot)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut datasets: Vec<&DomainDataset> = data.sources.iter().collect();
    datasets.push(&data.target);
    let path = out.join(format!("features_seed{seed}.csv"));
    export_features(&params, &datasets, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

struct MetricStats {
    name: &'static str,
    mean: f64,
    stddev: f64,
    n: usize,
}

fn population_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn collect_stats(summaries: &[&SeedSummary]) -> Vec<MetricStats> {
    let fields: [(&'static str, fn(&SeedSummary) -> Option<f64>); 4] = [
        ("warm_start_target_acc", |s| s.warm_start_target_acc),
        ("final_target_acc", |s| s.final_target_acc),
        ("final_agreement_rate", |s| s.final_agreement_rate),
        ("iterations", |s| Some(s.iterations as f64)),
    ];
    fields
        .iter()
        .filter_map(|(name, get)| {
            let values: Vec<f64> = summaries.iter().filter_map(|s| get(s)).collect();
            if values.is_empty() {
                return None;
            }
            let (mean, stddev) = population_stats(&values);
            Some(MetricStats {
                name,
                mean,
                stddev,
                n: values.len(),
            })
        })
        .collect()
}

fn print_aggregate(summaries: &[SeedSummary]) {
    let complete: Vec<&SeedSummary> = summaries.iter().filter(|s| s.completed).collect();
    if complete.is_empty() {
        return;
    }
    println!("{}", aggregate_table(&collect_stats(&complete)));
}

fn aggregate_table(stats: &[MetricStats]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>12} {:>12} {:>6}", "metric", "mean", "stddev", "n");
    for s in stats {
        let _ = writeln!(out, "{:<24} {:>12.6} {:>12.6} {:>6}", s.name, s.mean, s.stddev, s.n);
    }
    out
}

fn aggregate_csv(stats: &[MetricStats]) -> String {
    let mut out = String::from("metric,mean,stddev,n\n");
    for s in stats {
        let _ = writeln!(out, "{},{},{},{}", s.name, s.mean, s.stddev, s.n);
    }
    out
}

pub fn cmd_report(run_dir: &Path) -> Result<(), CliError> {
    let entries = std::fs::read_dir(run_dir).map_err(io_err(run_dir))?;
    let mut summaries: Vec<SeedSummary> = Vec::new();
    let mut unreadable: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(io_err(run_dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !(name.starts_with("summary_seed") && name.ends_with(".json")) {
            continue;
        }
        let text = std::fs::read_to_string(entry.path()).map_err(io_err(&entry.path()))?;
        match serde_json::from_str::<SeedSummary>(&text) {
            Ok(s) => summaries.push(s),
            Err(_) => unreadable.push(name),
        }
    }
    if summaries.is_empty() && unreadable.is_empty() {
        return Err(CliError::Invalid(format!(
            "no summary_seed*.json files in {}",
            run_dir.display()
        )));
    }
    summaries.sort_by_key(|s| s.seed);
    let incomplete: Vec<u64> = summaries.iter().filter(|s| !s.completed).map(|s| s.seed).collect();
    let complete: Vec<&SeedSummary> = summaries.iter().filter(|s| s.completed).collect();
    if complete.is_empty() {
        return Err(CliError::Invalid("no completed seeds to aggregate".into()));
    }
    let stats = collect_stats(&complete);
    let csv_path = run_dir.join("report.csv");
    std::fs::write(&csv_path, aggregate_csv(&stats)).map_err(io_err(&csv_path))?;
    print!("{}", aggregate_table(&stats));
    if !incomplete.is_empty() {
        println!("incomplete seeds (excluded): {incomplete:?}");
    }
    if !unreadable.is_empty() {
        println!("unreadable summaries (excluded): {unreadable:?}");
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}

/// Dispatch a parsed command; returns Err on any failure, including
/// partially failed seed fan-outs.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let config = effective_config(&config, &seed, None)?;
            cmd_gen_data(&config, &out)
        }
        Command::Train {
            config,
            out,
            seed,
            mode,
            snapshot,
        } => {
            let config = effective_config(&config, &seed, mode)?;
            cmd_train(&config, &out, snapshot.as_deref()).map(|_| ())
        }
        Command::Eval {
            config,
            snapshot,
            out,
            seed,
        } => {
            let config = effective_config(&config, &seed, None)?;
            let seed = config.experiment.seeds[0];
            cmd_eval(&config, &snapshot, &out, seed)
        }
        Command::ExportFeatures {
            config,
            snapshot,
            out,
            seed,
        } => {
            let config = effective_config(&config, &seed, None)?;
            let seed = config.experiment.seeds[0];
            cmd_export_features(&config, &snapshot, &out, seed)
        }
        Command::Report { run_dir } => cmd_report(&run_dir),
    }
}

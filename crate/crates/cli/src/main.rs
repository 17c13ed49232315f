//! `hpnet`: dataset generation, pooling, training, evaluation and analysis.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hpnet::config::RunConfig;
use hpnet::data::{build_input, load_samples, reference_channels};
use hpnet::eval::{ensemble, metrics_of, read_scores, write_scores, Metrics};
use hpnet::fisher::fisher_score;
use hpnet::fsutil::{read_json, write_dir_atomically, write_file_atomically, write_json};
use hpnet::model::{InputKind, Sample};
use hpnet::numerics::hpt::{read_hpt, write_hpt};
use hpnet::pipeline::{build_model, evaluate, export_features, train_model};
use hpnet::synthgen::{generate_dataset, Manifest, Split, MANIFEST_FILE};
use hpnet::train::{TrainedModel, LOG_FILE};
use hpnet::verify::gradcheck_suite;
use hpnet::{Error as CoreError, ErrorKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "hpnet", version, about = "Heatmap-pooling skeleton action recognition toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode poses and pool heatmap features for every sample of a dataset.
    Pool {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pooling window side (odd).
        #[arg(long)]
        region: Option<usize>,
    },
    /// Train a model on the training split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Save the initialised model without training it.
        #[arg(long)]
        init_only: bool,
    },
    /// Score a split with a trained model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Score dump (JSON lines).
        #[arg(long)]
        scores: PathBuf,
        /// Metrics report; printed when omitted.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Late fusion of score dumps.
    Ensemble {
        #[arg(long = "scores", required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
        /// One weight per dump; all equal when omitted.
        #[arg(long, value_delimiter = ',')]
        weights: Vec<f64>,
        /// Fused score dump.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Per-dimension Fisher scores of an exported feature directory.
    Fisher {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every trainable component.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the concatenated stream features of every sample.
    ExportFeatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

/// A verification harness found a failure.
#[derive(Debug)]
struct CheckFailed(String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e.kind() {
                ErrorKind::Validation => 1,
                ErrorKind::Numerical => 2,
                ErrorKind::Io => 3,
            };
        }
        if cause.is::<CheckFailed>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CoreError::Config {
                field: "--threads".into(),
                reason: "must be at least 1".into(),
            }
            .into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let g = &cli.global;
    match cli.command {
        Command::Synth { ref out } => cmd_synth(g, out),
        Command::Pool {
            ref manifest,
            ref out,
            region,
        } => cmd_pool(g, manifest, out, region),
        Command::Train {
            ref manifest,
            ref out,
            init_only,
        } => cmd_train(g, manifest, out, init_only),
        Command::Eval {
            ref model,
            ref manifest,
            split,
            ref scores,
            ref metrics,
        } => cmd_eval(model, manifest, split, scores, metrics.as_deref()),
        Command::Ensemble {
            ref scores,
            ref weights,
            ref out,
            ref metrics,
        } => cmd_ensemble(scores, weights, out.as_deref(), metrics.as_deref()),
        Command::Fisher { ref input, ref out } => cmd_fisher(input, out.as_deref()),
        Command::Gradcheck {
            instances,
            tolerance,
            ref out,
        } => cmd_gradcheck(g, instances, tolerance, out.as_deref()),
        Command::ExportFeatures {
            ref model,
            ref manifest,
            split,
            ref out,
        } => cmd_export(model, manifest, split, out),
    }
}

/// Config file, then `--set` overrides, then `--seed`; validated before use.
fn run_config(g: &Global) -> Result<RunConfig> {
    let base = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&g.overrides)?.with_seed(g.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(g: &Global, out: &Path) -> Result<()> {
    let cfg = run_config(g)?;
    let manifest = generate_dataset(&cfg.synth, out)?;
    println!("{}", out.join(MANIFEST_FILE).display());
    eprintln!("{} samples", manifest.samples.len());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolIndex {
    pool: hpnet::fpm::PoolConfig,
    samples: Vec<PoolEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolEntry {
    id: String,
    label: usize,
    split: Split,
    pooled: String,
    poses: String,
}

fn cmd_pool(g: &Global, manifest_path: &Path, out: &Path, region: Option<usize>) -> Result<()> {
    let mut cfg = run_config(g)?;
    let (manifest, base) = Manifest::load(manifest_path)?;
    if let Some(r) = region {
        cfg.pool.region = r;
    }
    cfg.pool.validate(manifest.config.scales.len())?;
    let channels = reference_channels(&manifest.config, &cfg.pool)?;
    let index = write_dir_atomically(out, |dir| {
        let samples = manifest
            .samples
            .par_iter()
            .map(|e| {
                let (_, pooled) = build_input(&e.load_heatmaps(&base)?, &cfg.pool, &channels, InputKind::Pooled)?;
                let rel = format!("samples/{}", e.id);
                std::fs::create_dir_all(dir.join(&rel)).map_err(|err| CoreError::Io {
                    path: dir.join(&rel),
                    source: err,
                })?;
                let entry = PoolEntry {
                    id: e.id.clone(),
                    label: e.label,
                    split: e.split,
                    pooled: format!("{rel}/pooled.hpt"),
                    poses: format!("{rel}/poses.hpt"),
                };
                write_hpt(dir.join(&entry.pooled), &pooled.features)?;
                write_hpt(dir.join(&entry.poses), &pooled.poses)?;
                Ok(entry)
            })
            .collect::<hpnet::Result<Vec<_>>>()?;
        let index = PoolIndex {
            pool: cfg.pool.clone(),
            samples,
        };
        write_json(&dir.join("index.json"), &index)?;
        Ok(index)
    })?;
    println!("{}", out.join("index.json").display());
    eprintln!("{} samples pooled", index.samples.len());
    Ok(())
}

fn load_split(manifest_path: &Path, split: Option<Split>, pool: &hpnet::fpm::PoolConfig, input: InputKind) -> Result<(Manifest, Vec<Sample>)> {
    let (manifest, base) = Manifest::load(manifest_path)?;
    let samples = load_samples(&manifest, &base, split, pool, input)?;
    if samples.is_empty() {
        return Err(CoreError::Invalid(format!("no samples in the requested split of {}", manifest_path.display())).into());
    }
    Ok((manifest, samples))
}

fn cmd_train(g: &Global, manifest_path: &Path, out: &Path, init_only: bool) -> Result<()> {
    let mut cfg = run_config(g)?;
    let (manifest, _) = Manifest::load(manifest_path)?;
    // The dataset's own generator settings are authoritative from here on.
    cfg.synth = manifest.config.clone();
    cfg.validate()?;
    let (_, train_set) = load_split(manifest_path, Some(Split::Train), &cfg.pool, cfg.model.input)?;
    let classes = manifest.config.class_names();
    let (model, log) = if init_only {
        (build_model(&cfg, &classes, manifest.config.joints, &train_set)?, Vec::new())
    } else {
        train_model(&cfg, &classes, manifest.config.joints, &train_set)?
    };
    write_dir_atomically(out, |dir| {
        model.save(dir)?;
        write_json(&dir.join(LOG_FILE), &log)
    })?;
    if let Some(last) = log.last() {
        eprintln!(
            "epoch {}: loss {:.4}, train accuracy {:.3}",
            last.epoch + 1,
            last.loss,
            last.train_accuracy
        );
    }
    println!("{}", out.display());
    Ok(())
}

fn check_labels(model: &TrainedModel, manifest: &Manifest) -> Result<()> {
    if manifest.config.class_names() != model.meta.labels {
        bail!(CoreError::Invalid("the dataset's classes differ from the model's labels".into()));
    }
    Ok(())
}

fn emit_metrics(metrics: &Metrics, path: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(metrics)?;
    text.push('\n');
    match path {
        Some(p) => write_file_atomically(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_eval(model_dir: &Path, manifest_path: &Path, split: SplitArg, scores: &Path, metrics: Option<&Path>) -> Result<()> {
    let model = TrainedModel::load(model_dir).with_context(|| format!("loading model from {}", model_dir.display()))?;
    let (manifest, samples) = load_split(manifest_path, split.split(), &model.meta.pool, model.meta.model.input)?;
    check_labels(&model, &manifest)?;
    let (records, m) = evaluate(&model, &samples)?;
    write_scores(scores, &records)?;
    emit_metrics(&m, metrics)?;
    eprintln!("top-1 {:.4}, mean per class {:.4}", m.top1, m.mean_per_class);
    Ok(())
}

fn cmd_ensemble(paths: &[PathBuf], weights: &[f64], out: Option<&Path>, metrics: Option<&Path>) -> Result<()> {
    let dumps = paths.iter().map(|p| read_scores(p)).collect::<hpnet::Result<Vec<_>>>()?;
    let weights = if weights.is_empty() {
        vec![1.0; dumps.len()]
    } else {
        weights.to_vec()
    };
    let fused = ensemble(&dumps, &weights)?;
    let m = metrics_of(&fused)?;
    if let Some(p) = out {
        write_scores(p, &fused)?;
    }
    emit_metrics(&m, metrics)
}

const FEATURES_FILE: &str = "features.hpt";
const SAMPLES_FILE: &str = "samples.json";

#[derive(Debug, Serialize, Deserialize)]
struct FeatureRow {
    id: String,
    label: usize,
}

fn cmd_export(model_dir: &Path, manifest_path: &Path, split: SplitArg, out: &Path) -> Result<()> {
    let model = TrainedModel::load(model_dir).with_context(|| format!("loading model from {}", model_dir.display()))?;
    let (manifest, samples) = load_split(manifest_path, split.split(), &model.meta.pool, model.meta.model.input)?;
    check_labels(&model, &manifest)?;
    let features = export_features(&model, &samples)?;
    let rows: Vec<FeatureRow> = samples
        .iter()
        .map(|s| FeatureRow {
            id: s.id.clone(),
            label: s.label,
        })
        .collect();
    write_dir_atomically(out, |dir| {
        write_hpt(dir.join(FEATURES_FILE), &features)?;
        write_json(&dir.join(SAMPLES_FILE), &rows)
    })?;
    println!("{}", out.display());
    eprintln!("{} × {} features", features.shape()[0], features.shape()[1]);
    Ok(())
}

fn cmd_fisher(input: &Path, out: Option<&Path>) -> Result<()> {
    let features = read_hpt(input.join(FEATURES_FILE))?;
    let rows: Vec<FeatureRow> = read_json(&input.join(SAMPLES_FILE))?;
    let labels: Vec<usize> = rows.iter().map(|r| r.label).collect();
    let report = fisher_score(&features, &labels)?;
    let ranking = report.ranking();
    let summary = serde_json::json!({
        "mean": report.mean,
        "scores": report.scores.iter().map(|s| if s.is_finite() { serde_json::json!(s) } else { serde_json::json!("inf") }).collect::<Vec<_>>(),
        "degenerate": report.degenerate,
        "separating": report.separating,
        "ranking": ranking,
    });
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    match out {
        Some(p) => write_file_atomically(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    eprintln!("mean Fisher score {:.4} over {} dimensions", report.mean, report.scores.len());
    Ok(())
}

fn cmd_gradcheck(g: &Global, instances: usize, tolerance: f64, out: Option<&Path>) -> Result<()> {
    if instances == 0 {
        bail!(CoreError::Invalid("--instances must be positive".into()));
    }
    let report = gradcheck_suite(instances, g.seed.unwrap_or(0), tolerance)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    match out {
        Some(p) => write_file_atomically(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    for (name, c) in &report.components {
        eprintln!("{name:<14} max rel error {:.3e} over {} scalars", c.max_rel_error, c.checked);
    }
    if !report.passes() {
        return Err(CheckFailed(format!(
            "gradient check failed: max relative error {:.3e} exceeds {tolerance:e}",
            report.max_rel_error()
        ))
        .into());
    }
    Ok(())
}

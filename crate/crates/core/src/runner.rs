//! Run orchestration shared by the command line and the sweep harness:
//! full-precision training with an on-disk cache, single calibration runs
//! with their artifacts, sweeps, and the comparison table.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::info;
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{BitWidths, ConfigError, RunConfig};
use crate::data::{load_dataset, DataError, Dataset};
use crate::meta::MetaError;
use crate::metrics::{write_metrics, MetricsError, MetricsRecord, Phase};
use crate::nets::{build_tiny_model, train_fp_model, BlockModel, NetError};
use crate::pipeline::{evaluate, run_experiment, EvalReport, Experiment, PipelineError, Strategy};
use crate::quant::QuantError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, RunError>;

/// Coarse failure classes; the command line maps each to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Data,
    Numeric,
    Io,
    Internal,
}

fn tensor_kind(e: &TensorError) -> FailureKind {
    match e {
        TensorError::NonFinite(_) => FailureKind::Numeric,
        _ => FailureKind::Internal,
    }
}

fn quant_kind(e: &QuantError) -> FailureKind {
    match e {
        QuantError::NonPositiveScale(_) => FailureKind::Numeric,
        QuantError::Tensor(t) => tensor_kind(t),
        _ => FailureKind::Internal,
    }
}

fn net_kind(e: &NetError) -> FailureKind {
    match e {
        NetError::InvalidArch(_) => FailureKind::Config,
        NetError::Quant(q) => quant_kind(q),
        NetError::Tensor(t) => tensor_kind(t),
        _ => FailureKind::Internal,
    }
}

fn checkpoint_kind(e: &CheckpointError) -> FailureKind {
    match e {
        CheckpointError::Io { .. } => FailureKind::Io,
        _ => FailureKind::Data,
    }
}

impl RunError {
    pub fn kind(&self) -> FailureKind {
        match self {
            RunError::Config(ConfigError::Io { .. }) => FailureKind::Io,
            RunError::Config(_) | RunError::Usage(_) => FailureKind::Config,
            RunError::Numeric(_) => FailureKind::Numeric,
            RunError::Data(DataError::Container(c)) => checkpoint_kind(c),
            RunError::Data(_) => FailureKind::Data,
            RunError::Pipeline(p) => match p {
                PipelineError::UnknownStrategy(_) | PipelineError::NeedsTransform(_) | PipelineError::Config(_) => {
                    FailureKind::Config
                }
                PipelineError::Empty(_) => FailureKind::Data,
                PipelineError::Net(n) => net_kind(n),
                PipelineError::Tensor(t) => tensor_kind(t),
                PipelineError::Meta(m) => match m {
                    MetaError::Tensor(t) => tensor_kind(t),
                    MetaError::Net(n) => net_kind(n),
                    MetaError::Quant(q) => quant_kind(q),
                    _ => FailureKind::Internal,
                },
            },
            RunError::Net(n) => net_kind(n),
            RunError::Checkpoint(c) => checkpoint_kind(c),
            RunError::Metrics(MetricsError::Malformed(_)) => FailureKind::Data,
            RunError::Metrics(_) | RunError::Io { .. } => FailureKind::Io,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

/// A trained full-precision model with the data it was trained on.
#[derive(Debug, Clone)]
pub struct FpBundle {
    pub data: Dataset<f64>,
    pub model: BlockModel<f64>,
    /// Calibration-set versus test accuracy of the full-precision model.
    pub eval: EvalReport,
}

/// Trains the configured model on the configured data.
pub fn train_fp(cfg: &RunConfig) -> Result<FpBundle> {
    let data = load_dataset::<f64>(&cfg.data)?;
    let model = build_tiny_model::<f64>(&cfg.model)?;
    let start = Instant::now();
    let report = train_fp_model(model, &data.train, &cfg.train)?;
    info!(
        "full-precision model: {} epochs, train accuracy {:.4}, {:.1?}",
        report.epochs_run,
        report.train_accuracy,
        start.elapsed()
    );
    let eval = evaluate(&report.model, &data.calib.labeled(&data.train), &data.test)?;
    Ok(FpBundle {
        data,
        model: report.model,
        eval,
    })
}

/// The evaluation record written next to a full-precision checkpoint.
pub fn fp_record(run_id: &str, eval: &EvalReport) -> MetricsRecord {
    MetricsRecord::new(run_id, Phase::Eval, None, 0)
        .with("train_acc", eval.train_acc)
        .with("test_acc", eval.test_acc)
        .with("gap", eval.gap)
}

/// Full-precision models keyed by the configuration sections that determine
/// them, optionally persisted as `fp-<hash>.ckpt` under a directory.
#[derive(Debug, Default)]
pub struct FpCache {
    dir: Option<PathBuf>,
    models: HashMap<String, Arc<FpBundle>>,
}

impl FpCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            models: HashMap::new(),
        }
    }

    pub fn insert(&mut self, cfg: &RunConfig, bundle: Arc<FpBundle>) {
        self.models.insert(cfg.fp_hash(), bundle);
    }

    pub fn path_for(&self, cfg: &RunConfig) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("fp-{}.ckpt", cfg.fp_hash())))
    }

    pub fn get(&mut self, cfg: &RunConfig) -> Result<Arc<FpBundle>> {
        let key = cfg.fp_hash();
        if let Some(b) = self.models.get(&key) {
            return Ok(b.clone());
        }
        let bundle = match self.path_for(cfg) {
            Some(path) if path.exists() => {
                let data = load_dataset::<f64>(&cfg.data)?;
                let (model, _) = checkpoint::load_model::<f64>(&path, Some(&key))?;
                let eval = evaluate(&model, &data.calib.labeled(&data.train), &data.test)?;
                FpBundle { data, model, eval }
            }
            path => {
                let b = train_fp(cfg)?;
                if let Some(path) = path {
                    if let Some(dir) = path.parent() {
                        ensure_dir(dir)?;
                    }
                    checkpoint::save_model(&b.model, &cfg.model, Some(&key), &path)?;
                }
                b
            }
        };
        let bundle = Arc::new(bundle);
        self.models.insert(key, bundle.clone());
        Ok(bundle)
    }
}

/// Calibrates with the configured strategy and, given a directory, writes
/// `metrics.csv`, `quantized.ckpt` and, when one was learned,
/// `transform.ckpt` into it.
pub fn run_single(cfg: &RunConfig, fp: &FpBundle, run_id: &str, out: Option<&Path>) -> Result<Experiment> {
    let meta = cfg.meta_config();
    let start = Instant::now();
    let ex = run_experiment(&fp.model, &fp.data, &meta, cfg.run.strategy, run_id)?;
    info!(
        "{run_id}: train {:.4} test {:.4} gap {:.4} ({:.1?})",
        ex.eval.train_acc,
        ex.eval.test_acc,
        ex.eval.gap,
        start.elapsed()
    );
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_metrics(ex.records(), &dir.join("metrics.csv"))?;
        let hash = cfg.hash();
        checkpoint::save_quantized(&ex.outcome.model, &cfg.model, Some(&hash), &dir.join("quantized.ckpt"))?;
        if let Some(t) = &ex.outcome.transform {
            checkpoint::save_transform(t, &dir.join("transform.ckpt"))?;
        }
        let resolved = dir.join("config.toml");
        std::fs::write(&resolved, cfg.to_toml()).map_err(io_err(&resolved))?;
    }
    Ok(ex)
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub label: String,
    pub strategy: Strategy,
    pub bits: String,
    pub seed: u64,
    pub calib_size: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub gap: f64,
    pub seconds: f64,
}

/// Runs every configuration of the sweep in order. Each run writes its
/// artifacts under `out/<label>` when `out` is given.
pub fn run_sweep(base: &RunConfig, cache: &mut FpCache, out: Option<&Path>) -> Result<Vec<SweepRow>> {
    let runs = base.expand_sweep();
    let mut rows = Vec::with_capacity(runs.len());
    for (label, cfg) in runs {
        let fp = cache.get(&cfg)?;
        let start = Instant::now();
        let dir = out.map(|o| o.join(&label));
        let ex = run_single(&cfg, &fp, &label, dir.as_deref())?;
        rows.push(SweepRow {
            label,
            strategy: cfg.run.strategy,
            bits: bits_label(cfg.quantization.bits, cfg.quantization.star),
            seed: cfg.run.seed,
            calib_size: cfg.data.calib_size,
            train_acc: ex.eval.train_acc,
            test_acc: ex.eval.test_acc,
            gap: ex.eval.gap,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

fn bits_label(b: BitWidths, star: bool) -> String {
    format!("W{}A{}{}", b.w.get(), b.a.get(), if star { "*" } else { "" })
}

/// Writes one CSV row per run.
pub fn write_summary(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| RunError::Metrics(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| RunError::Metrics(e.into()))?;
    }
    w.flush().map_err(io_err(path))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Seed-averaged accuracies per (bits, calibration size, strategy), in the
/// order the groups first appear.
pub fn comparison_table(rows: &[SweepRow]) -> String {
    let mut order = Vec::new();
    let mut groups: BTreeMap<(String, usize, String), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.bits.clone(), r.calib_size, r.strategy.to_string());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:>6} {:<16} {:>5} {:>16} {:>16} {:>16}",
        "bits", "calib", "strategy", "seeds", "train acc %", "test acc %", "gap %"
    );
    for key in order {
        let g = &groups[&key];
        let col = |f: fn(&SweepRow) -> f64| {
            let (m, sd) = mean_std(&g.iter().map(|r| 100.0 * f(r)).collect::<Vec<_>>());
            format!("{m:>7.2} ± {sd:<6.2}")
        };
        let _ = writeln!(
            s,
            "{:<8} {:>6} {:<16} {:>5} {:>16} {:>16} {:>16}",
            key.0,
            key.1,
            key.2,
            g.len(),
            col(|r| r.train_acc),
            col(|r| r.test_acc),
            col(|r| r.gap)
        );
    }
    s
}

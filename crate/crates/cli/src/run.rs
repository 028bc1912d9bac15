//! Data loading, training and evaluation shared by the subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mlcnn_core::checkpoint::write_atomic;
use mlcnn_core::data::{self, Prepared, SeriesDataset, Windows};
use mlcnn_core::metrics::{self, MetricsReport};
use mlcnn_core::train::{self, EpochRecord, Evaluation, Loss, TrainReport};
use mlcnn_core::{Mlcnn, RunConfig};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.txt";
pub const MANIFEST: &str = "manifest.txt";
pub const TIMING: &str = "timing.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads the configured data file, checks its hash against the config when
/// one is recorded and fixes `n` from the data.
pub fn load_data(cfg: &mut RunConfig) -> CliResult<SeriesDataset> {
    let path = cfg
        .data
        .path
        .clone()
        .ok_or_else(|| CliError::usage("no data file: set `data` in the config or pass --data"))?;
    let bytes = std::fs::read(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let hash = sha256_hex(&bytes);
    if let Some(expected) = &cfg.data.sha256 {
        if *expected != hash {
            return Err(CliError::data(format!(
                "{} has sha256 {hash}, the config expects {expected}",
                path.display()
            )));
        }
    }
    cfg.data.sha256 = Some(hash);
    if let Ok(abs) = path.canonicalize() {
        cfg.data.path = Some(abs);
    }
    let ds = data::read_csv(&bytes[..], &cfg.data.csv)?;
    cfg.resolve_n(ds.variables())?;
    cfg.validate()?;
    Ok(ds)
}

pub fn prepare(cfg: &RunConfig, ds: &SeriesDataset) -> CliResult<Prepared> {
    Ok(data::prepare(ds, &cfg.data.split, &cfg.model)?)
}

/// Writes `text` atomically, creating parent directories.
pub fn write_file(path: &Path, text: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        }
    }
    Ok(write_atomic(path, text.as_ref())?)
}

pub fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Manifest text: the full config, which is itself a loadable config file,
/// preceded by the artifact list as comments.
pub fn manifest_text(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# mlcnn run manifest; load with --config to repeat the run");
    for (k, v) in [("checkpoint", CHECKPOINT), ("train_log", TRAIN_LOG), ("timing", TIMING)] {
        let _ = writeln!(s, "# {k}: {v}");
    }
    s.push_str(&cfg.to_text());
    s
}

pub struct Trained {
    pub model: Mlcnn,
    pub report: TrainReport,
    pub prepared: Prepared,
    pub train_seconds: f64,
}

/// Trains one model; prints per-epoch progress to stderr unless `quiet`.
pub fn train_model(cfg: &RunConfig, ds: &SeriesDataset, quiet: bool) -> CliResult<Trained> {
    let prepared = prepare(cfg, ds)?;
    let mut model = Mlcnn::new(cfg.model.clone())?;
    let label = cfg.model.variant;
    let mut progress = |loss: Loss, e: &EpochRecord| {
        if !quiet {
            eprintln!(
                "[{label} seed {}] loss={loss} epoch {} train_loss {:.6} valid_rmse {:.6} steps {}",
                cfg.train.seed, e.epoch, e.train_loss, e.valid_rmse, e.steps
            );
        }
    };
    let start = Instant::now();
    let report = train::fit_with_progress(&mut model, &prepared.train, &prepared.valid, &cfg.train, &mut progress)?;
    let train_seconds = start.elapsed().as_secs_f64();
    Ok(Trained {
        model,
        report,
        prepared,
        train_seconds,
    })
}

/// Writes checkpoint, training log, timing and manifest into `dir`.
pub fn save_run(dir: &Path, cfg: &RunConfig, t: &Trained) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    t.model.save(dir.join(CHECKPOINT))?;
    write_file(&dir.join(TRAIN_LOG), t.report.to_log())?;
    write_file(&dir.join(TIMING), format!("train_seconds: {}\n", t.train_seconds))?;
    write_file(&dir.join(MANIFEST), manifest_text(cfg))?;
    Ok(())
}

/// A trained run restored from its directory.
pub struct Restored {
    pub cfg: RunConfig,
    pub model: Mlcnn,
    pub dataset: SeriesDataset,
    pub prepared: Prepared,
}

pub fn restore(dir: &Path, data_override: Option<&Path>) -> CliResult<Restored> {
    let manifest = dir.join(MANIFEST);
    if !manifest.exists() {
        return Err(CliError::usage(format!(
            "{} not found; run `mlcnn train --out {}` first",
            manifest.display(),
            dir.display()
        )));
    }
    let mut cfg = RunConfig::load(&manifest)?;
    if let Some(p) = data_override {
        cfg.data.path = Some(p.to_path_buf());
        cfg.data.sha256 = None;
    }
    let dataset = load_data(&mut cfg)?;
    let prepared = prepare(&cfg, &dataset)?;
    let model = Mlcnn::load(cfg.model.clone(), dir.join(CHECKPOINT))?;
    Ok(Restored {
        cfg,
        model,
        dataset,
        prepared,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }

    pub fn windows(self, p: &Prepared) -> &Windows {
        match self {
            SplitName::Train => &p.train,
            SplitName::Valid => &p.valid,
            SplitName::Test => &p.test,
        }
    }

    /// `metrics.txt` for the test split, `metrics_valid.txt` otherwise.
    pub fn file(self, stem: &str, ext: &str) -> String {
        match self {
            SplitName::Test => format!("{stem}.{ext}"),
            other => format!("{stem}_{}.{ext}", other.as_str()),
        }
    }
}

/// Main-task evaluation with timing, as a metrics report.
pub fn evaluate_split(model: &Mlcnn, windows: &Windows, task: &str) -> CliResult<(Evaluation, MetricsReport)> {
    let start = Instant::now();
    let ev = train::evaluate(model, windows)?;
    let predict_seconds = start.elapsed().as_secs_f64();
    let mut report = MetricsReport::from_predictions(task, model.config().horizon, &ev.y_true, &ev.y_pred)?;
    report.predict_seconds = predict_seconds;
    Ok((ev, report))
}

pub fn predictions_csv(windows: &Windows, names: &[String], ev: &Evaluation) -> CliResult<Vec<u8>> {
    let anchors: Vec<usize> = (0..windows.len()).map(|i| windows.global_anchor(i)).collect();
    let mut buf = Vec::new();
    metrics::write_predictions(&mut buf, &anchors, names, &ev.y_true, &ev.y_pred)?;
    Ok(buf)
}

pub fn read_train_seconds(dir: &Path) -> f64 {
    std::fs::read_to_string(dir.join(TIMING))
        .ok()
        .and_then(|t| {
            t.lines()
                .find_map(|l| l.strip_prefix("train_seconds:"))
                .and_then(|v| v.trim().parse().ok())
        })
        .unwrap_or(0.0)
}

pub fn out_dir(out: Option<PathBuf>, default: &str) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from(default))
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

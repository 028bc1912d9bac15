//! Main-task error metrics and the line-oriented metrics report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::shape("metric", &[y.len()], &[y_hat.len()]));
    }
    if y.is_empty() {
        return Err(Error::Contract("metric over zero values".into()));
    }
    Ok(())
}

/// `√(Σ(y − ŷ)² / n)` over one time step's variables.
pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    let ss: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / y.len() as f64).sqrt())
}

/// `Σ|y − ŷ| / n` over one time step's variables.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    let s: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / y.len() as f64)
}

fn check_rows(y: &Tensor, y_hat: &Tensor) -> Result<(usize, usize)> {
    if y.ndim() != 2 || y.shape() != y_hat.shape() {
        return Err(Error::shape("metrics", y.shape(), y_hat.shape()));
    }
    Ok((y.shape()[0], y.shape()[1]))
}

/// Dataset-level `(rmse, mae)`: the per-time-step metric averaged over rows.
pub fn aggregate(y: &Tensor, y_hat: &Tensor) -> Result<(f64, f64)> {
    let (rows, _) = check_rows(y, y_hat)?;
    let (mut r, mut m) = (0.0, 0.0);
    for i in 0..rows {
        r += rmse(y.row(i), y_hat.row(i))?;
        m += mae(y.row(i), y_hat.row(i))?;
    }
    Ok((r / rows as f64, m / rows as f64))
}

/// Per-variable `(rmse, mae)` over all rows.
pub fn per_variable(y: &Tensor, y_hat: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (rows, n) = check_rows(y, y_hat)?;
    let mut ss = vec![0.0; n];
    let mut sa = vec![0.0; n];
    for i in 0..rows {
        for (j, (a, b)) in y.row(i).iter().zip(y_hat.row(i)).enumerate() {
            ss[j] += (a - b) * (a - b);
            sa[j] += (a - b).abs();
        }
    }
    let k = rows as f64;
    Ok((
        ss.into_iter().map(|s| (s / k).sqrt()).collect(),
        sa.into_iter().map(|s| s / k).collect(),
    ))
}

/// Evaluation summary for the main task.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub task: String,
    pub horizon: usize,
    pub samples: usize,
    pub rmse: f64,
    pub mae: f64,
    pub per_variable_rmse: Vec<f64>,
    pub per_variable_mae: Vec<f64>,
    pub train_seconds: f64,
    pub predict_seconds: f64,
}

impl MetricsReport {
    /// Metrics of `[N, n]` main-task predictions against targets.
    pub fn from_predictions(task: &str, horizon: usize, y: &Tensor, y_hat: &Tensor) -> Result<Self> {
        let (rmse, mae) = aggregate(y, y_hat)?;
        let (per_variable_rmse, per_variable_mae) = per_variable(y, y_hat)?;
        Ok(MetricsReport {
            task: task.to_string(),
            horizon,
            samples: y.shape()[0],
            rmse,
            mae,
            per_variable_rmse,
            per_variable_mae,
            train_seconds: 0.0,
            predict_seconds: 0.0,
        })
    }

    /// `key: value` lines; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "task: {}", self.task);
        let _ = writeln!(s, "horizon: {}", self.horizon);
        let _ = writeln!(s, "samples: {}", self.samples);
        let _ = writeln!(s, "rmse: {}", self.rmse);
        let _ = writeln!(s, "mae: {}", self.mae);
        let _ = writeln!(s, "per_variable_rmse: {}", join(&self.per_variable_rmse));
        let _ = writeln!(s, "per_variable_mae: {}", join(&self.per_variable_mae));
        let _ = writeln!(s, "train_seconds: {}", self.train_seconds);
        let _ = writeln!(s, "predict_seconds: {}", self.predict_seconds);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| Error::Data(format!("malformed metrics line `{line}`")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Data(format!("metrics report lacks `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Data(format!("metrics field `{k}` is not a number")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Data(format!("metrics field `{k}` is not an integer")))
        };
        let list = |k: &str| -> Result<Vec<f64>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| {
                    x.parse()
                        .map_err(|_| Error::Data(format!("metrics field `{k}` has a bad entry `{x}`")))
                })
                .collect()
        };
        Ok(MetricsReport {
            task: get("task")?.to_string(),
            horizon: int("horizon")?,
            samples: int("samples")?,
            rmse: num("rmse")?,
            mae: num("mae")?,
            per_variable_rmse: list("per_variable_rmse")?,
            per_variable_mae: list("per_variable_mae")?,
            train_seconds: num("train_seconds")?,
            predict_seconds: num("predict_seconds")?,
        })
    }
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub anchor_index: usize,
    pub variable: String,
    pub y_true: f64,
    pub y_pred: f64,
}

pub const PREDICTION_COLUMNS: [&str; 4] = ["anchor_index", "variable", "y_true", "y_pred"];

/// Writes `[N, n]` main-task predictions as long-format CSV, one row per
/// (anchor, variable).
pub fn write_predictions(
    writer: impl std::io::Write,
    anchors: &[usize],
    names: &[String],
    y_true: &Tensor,
    y_pred: &Tensor,
) -> Result<()> {
    let (rows, n) = check_rows(y_true, y_pred)?;
    if anchors.len() != rows || names.len() != n {
        return Err(Error::shape("predictions", &[anchors.len(), names.len()], &[rows, n]));
    }
    let csv_err = |e: csv::Error| Error::Data(format!("writing predictions: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PREDICTION_COLUMNS).map_err(csv_err)?;
    for (i, &a) in anchors.iter().enumerate() {
        for (j, name) in names.iter().enumerate() {
            w.write_record([
                a.to_string(),
                name.clone(),
                y_true.row(i)[j].to_string(),
                y_pred.row(i)[j].to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::Data(format!("writing predictions: {e}")))
}

pub fn read_predictions(reader: impl std::io::Read) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(|e| Error::Data(format!("predictions header: {e}")))?;
    if header.iter().ne(PREDICTION_COLUMNS) {
        return Err(Error::Data(format!("predictions header is {header:?}")));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("predictions line {}: {e}", i + 2)))?;
        let bad = || Error::Data(format!("predictions line {}: bad record", i + 2));
        out.push(PredictionRow {
            anchor_index: rec[0].parse().map_err(|_| bad())?,
            variable: rec[1].to_string(),
            y_true: rec[2].parse().map_err(|_| bad())?,
            y_pred: rec[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Dataset `(rmse, mae)` recomputed from predictions rows, grouping
/// consecutive rows with the same anchor into one time step.
pub fn aggregate_rows(rows: &[PredictionRow]) -> Result<(f64, f64)> {
    let mut groups: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut last = None;
    for row in rows {
        if last != Some(row.anchor_index) {
            groups.push((Vec::new(), Vec::new()));
            last = Some(row.anchor_index);
        }
        let g = groups.last_mut().expect("pushed above");
        g.0.push(row.y_true);
        g.1.push(row.y_pred);
    }
    if groups.is_empty() {
        return Err(Error::Contract("metric over zero values".into()));
    }
    let (mut r, mut m) = (0.0, 0.0);
    for (y, y_hat) in &groups {
        r += rmse(y, y_hat)?;
        m += mae(y, y_hat)?;
    }
    let k = groups.len() as f64;
    Ok((r / k, m / k))
}

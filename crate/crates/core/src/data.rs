//! CSV ingestion, chronological splits, max-abs scaling and windowing.

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

/// A multivariate series: `T` rows (time, ascending) by `n` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    pub values: Tensor,
    pub names: Vec<String>,
    /// Free-form label such as `10min`; metadata only.
    pub sample_rate: String,
}

impl SeriesDataset {
    pub fn new(values: Tensor, names: Vec<String>) -> Result<Self> {
        if values.ndim() != 2 || names.len() != values.shape()[1] {
            return Err(Error::Data(format!(
                "{} names for values of shape {:?}",
                names.len(),
                values.shape()
            )));
        }
        Ok(SeriesDataset {
            values,
            names,
            sample_rate: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn variables(&self) -> usize {
        self.values.shape()[1]
    }

    /// Rows `range` as a new `[len, n]` tensor.
    pub fn rows(&self, range: Range<usize>) -> Result<Tensor> {
        slice_rows(&self.values, range)
    }
}

pub(crate) fn slice_rows(values: &Tensor, range: Range<usize>) -> Result<Tensor> {
    let n = values.shape()[1];
    if range.start >= range.end || range.end > values.shape()[0] {
        return Err(Error::Data(format!(
            "row range {range:?} invalid for {} rows",
            values.shape()[0]
        )));
    }
    Tensor::new(
        [range.len(), n],
        values.data()[range.start * n..range.end * n].to_vec(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub header: bool,
    /// Columns removed before parsing, by header name (or `c{index}` without a header).
    pub drop_columns: Vec<String>,
    pub sample_rate: String,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            delimiter: b',',
            header: false,
            drop_columns: Vec::new(),
            sample_rate: String::new(),
        }
    }
}

const MISSING: [&str; 6] = ["", "na", "nan", "null", "?", "none"];

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    MISSING.iter().any(|m| c.eq_ignore_ascii_case(m))
}

pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, options).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses delimited text. Missing cells are forward-filled, then leading gaps
/// are back-filled; a column with no value at all is an error.
pub fn read_csv(reader: impl Read, options: &CsvOptions) -> Result<SeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();

    let first = match records.next() {
        Some(r) => r.map_err(|e| Error::Data(e.to_string()))?,
        None => return Err(Error::Data("empty file".into())),
    };
    let width = first.len();
    let (all_names, mut pending) = if options.header {
        (first.iter().map(str::to_string).collect::<Vec<_>>(), None)
    } else {
        ((0..width).map(|i| format!("c{i}")).collect(), Some(first))
    };
    for d in &options.drop_columns {
        if !all_names.contains(d) {
            return Err(Error::Data(format!("cannot drop unknown column `{d}`")));
        }
    }
    let keep: Vec<usize> = (0..width)
        .filter(|&i| !options.drop_columns.contains(&all_names[i]))
        .collect();
    if keep.is_empty() {
        return Err(Error::Data("no columns left after dropping".into()));
    }
    let n = keep.len();

    let mut cells: Vec<Option<f64>> = Vec::new();
    let mut line = if options.header { 1 } else { 0 };
    loop {
        let rec = match pending.take() {
            Some(r) => r,
            None => match records.next() {
                Some(r) => r.map_err(|e| Error::Data(e.to_string()))?,
                None => break,
            },
        };
        line += 1;
        if rec.len() == 1 && rec[0].is_empty() && width > 1 {
            continue;
        }
        if rec.len() != width {
            return Err(Error::Data(format!(
                "line {line}: expected {width} fields, found {}",
                rec.len()
            )));
        }
        for &i in &keep {
            let cell = &rec[i];
            if is_missing(cell) {
                cells.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Data(format!("line {line}, column `{}`: `{cell}` is not a number", all_names[i]))
                })?;
                if !v.is_finite() {
                    return Err(Error::Data(format!("line {line}: non-finite value `{cell}`")));
                }
                cells.push(Some(v));
            }
        }
    }
    let t = cells.len() / n;
    if t == 0 {
        return Err(Error::Data("no data rows".into()));
    }
    let names: Vec<String> = keep.iter().map(|&i| all_names[i].clone()).collect();
    let mut data = vec![0.0; t * n];
    for j in 0..n {
        let Some(first_seen) = (0..t).find_map(|r| cells[r * n + j]) else {
            return Err(Error::Data(format!("column `{}` is entirely missing", names[j])));
        };
        let mut last = first_seen;
        for r in 0..t {
            if let Some(v) = cells[r * n + j] {
                last = v;
            }
            data[r * n + j] = last;
        }
    }
    let mut ds = SeriesDataset::new(Tensor::new([t, n], data)?, names)?;
    ds.sample_rate = options.sample_rate.clone();
    Ok(ds)
}

/// Writes `ds` with a header row; values use shortest round-trip formatting.
pub fn write_csv(ds: &SeriesDataset, writer: impl std::io::Write, delimiter: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
    let err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(&ds.names).map_err(err)?;
    for r in 0..ds.len() {
        w.write_record(ds.values.row(r).iter().map(|v| v.to_string())).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))
}

/// Chronological split fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl SplitSpec {
    pub const TRAFFIC: SplitSpec = SplitSpec::new(0.6, 0.2, 0.2);
    pub const ENERGY: SplitSpec = SplitSpec::new(0.8, 0.1, 0.1);
    pub const NASDAQ: SplitSpec = SplitSpec::new(0.9, 0.05, 0.05);

    pub const fn new(train: f64, valid: f64, test: f64) -> Self {
        SplitSpec { train, valid, test }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must lie in [0, 1] and sum to 1, got {}/{}/{}",
                self.train, self.valid, self.test
            )));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::TRAFFIC
    }
}

/// Row ranges of the three splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn named(&self) -> [(&'static str, Range<usize>); 3] {
        [
            ("train", self.train.clone()),
            ("valid", self.valid.clone()),
            ("test", self.test.clone()),
        ]
    }
}

// Guards against products like 100·0.6 = 59.999…
const FLOOR_GUARD: f64 = 1e-9;

/// Splits `len` rows at `floor(T·train)` and `floor(T·(train + valid))`.
/// Every split must hold at least `min_len` rows.
pub fn split(len: usize, spec: &SplitSpec, min_len: usize) -> Result<Splits> {
    spec.validate()?;
    let t = len as f64;
    let a = ((t * spec.train + FLOOR_GUARD).floor() as usize).min(len);
    let b = ((t * (spec.train + spec.valid) + FLOOR_GUARD).floor() as usize).clamp(a, len);
    let s = Splits {
        train: 0..a,
        valid: a..b,
        test: b..len,
    };
    for (name, r) in s.named() {
        if r.len() < min_len.max(1) {
            return Err(Error::Data(format!(
                "{name} split has {} rows, needs at least {min_len}",
                r.len()
            )));
        }
    }
    Ok(s)
}

/// Rows one window plus its farthest target occupy: `p + h + fsp·fst`.
pub fn min_split_len(cfg: &ModelConfig) -> usize {
    cfg.p + cfg.lookahead()
}

/// Per-variable max-abs scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub scale: Vec<f64>,
}

pub const SCALE_FLOOR: f64 = 1e-8;

impl Scaler {
    /// `s_i = max(1e-8, max_t |x_ti|)` over `train` (`[T, n]`).
    pub fn fit(train: &Tensor) -> Result<Self> {
        if train.ndim() != 2 {
            return Err(Error::Data(format!("scaler expects [T, n], got {:?}", train.shape())));
        }
        let n = train.shape()[1];
        let mut scale = vec![SCALE_FLOOR; n];
        for r in train.data().chunks_exact(n) {
            for (s, v) in scale.iter_mut().zip(r) {
                *s = s.max(v.abs());
            }
        }
        Ok(Scaler { scale })
    }

    pub fn identity(n: usize) -> Self {
        Scaler { scale: vec![1.0; n] }
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let n = self.scale.len();
        if x.shape().last() != Some(&n) {
            return Err(Error::shape("scaler", x.shape(), &[n]));
        }
        let mut out = x.clone();
        for r in out.data_mut().chunks_exact_mut(n) {
            for (v, &s) in r.iter_mut().zip(&self.scale) {
                *v = f(*v, s);
            }
        }
        Ok(out)
    }

    /// Divides the last axis by the scale.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, s| v / s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, s| v * s)
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// Anchor row `t`, relative to the split.
    pub anchor: usize,
    /// Rows `[t − p + 1, t]`, raw scale.
    pub x: Tensor,
    pub x_norm: Tensor,
    /// `[l, n]` targets, nearest first; row `fsp` is the main task at `t + h`.
    pub targets: Tensor,
    pub targets_norm: Tensor,
}

/// Valid anchors of a split of `len` rows.
pub fn anchors(len: usize, cfg: &ModelConfig) -> Range<usize> {
    let first = cfg.p - 1;
    let end = len.saturating_sub(cfg.lookahead());
    first..end.max(first)
}

/// Every window of a split. Anchors whose farthest target would leave the
/// split are dropped.
pub fn make_windows(values: &Tensor, scaler: &Scaler, cfg: &ModelConfig) -> Result<Vec<WindowSample>> {
    let set = Windows::new(values, scaler, cfg, 0)?;
    (0..set.len()).map(|i| set.sample(i)).collect()
}

/// The windows of one split, materialised lazily per batch.
#[derive(Debug, Clone)]
pub struct Windows {
    raw: Tensor,
    norm: Tensor,
    scaler: Scaler,
    p: usize,
    offsets: Vec<usize>,
    main: usize,
    anchors: Vec<usize>,
    /// Index of the split's first row within the full dataset.
    pub origin: usize,
}

impl Windows {
    /// `values` are the raw rows of one split starting at dataset row `origin`.
    pub fn new(values: &Tensor, scaler: &Scaler, cfg: &ModelConfig, origin: usize) -> Result<Self> {
        if values.ndim() != 2 || values.shape()[1] != cfg.n {
            return Err(Error::shape("windows", values.shape(), &[0, cfg.n]));
        }
        if cfg.p == 0 || cfg.fst == 0 || cfg.fsp * cfg.fst >= cfg.horizon {
            return Err(Error::Config(format!(
                "need p ≥ 1 and 0 < fsp·fst < horizon, got p={} fsp={} fst={} horizon={}",
                cfg.p, cfg.fsp, cfg.fst, cfg.horizon
            )));
        }
        Ok(Windows {
            raw: values.clone(),
            norm: scaler.normalize(values)?,
            scaler: scaler.clone(),
            p: cfg.p,
            offsets: (0..cfg.tasks()).map(|k| cfg.target_offset(k)).collect(),
            main: cfg.main_index(),
            anchors: anchors(values.shape()[0], cfg).collect(),
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn n(&self) -> usize {
        self.raw.shape()[1]
    }

    pub fn tasks(&self) -> usize {
        self.offsets.len()
    }

    pub fn main_index(&self) -> usize {
        self.main
    }

    pub fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    /// Anchor of window `i`, relative to the split.
    pub fn anchor(&self, i: usize) -> usize {
        self.anchors[i]
    }

    /// Anchor of window `i` as a dataset row index.
    pub fn global_anchor(&self, i: usize) -> usize {
        self.origin + self.anchors[i]
    }

    fn gather_inputs(&self, src: &Tensor, idx: &[usize]) -> Tensor {
        let n = self.n();
        let mut out = Vec::with_capacity(idx.len() * self.p * n);
        for &i in idx {
            let t = self.anchors[i];
            out.extend_from_slice(&src.data()[(t + 1 - self.p) * n..(t + 1) * n]);
        }
        Tensor::new([idx.len(), self.p, n], out).expect("window shape")
    }

    fn gather_targets(&self, src: &Tensor, idx: &[usize]) -> Tensor {
        let n = self.n();
        let mut out = Vec::with_capacity(idx.len() * self.tasks() * n);
        for &i in idx {
            let t = self.anchors[i];
            for &o in &self.offsets {
                out.extend_from_slice(src.row(t + o));
            }
        }
        Tensor::new([idx.len(), self.tasks(), n], out).expect("target shape")
    }

    /// Normalised inputs `[B, p, n]`.
    pub fn inputs(&self, idx: &[usize]) -> Tensor {
        self.gather_inputs(&self.norm, idx)
    }

    pub fn inputs_raw(&self, idx: &[usize]) -> Tensor {
        self.gather_inputs(&self.raw, idx)
    }

    /// Normalised targets `[B, l, n]`.
    pub fn targets(&self, idx: &[usize]) -> Tensor {
        self.gather_targets(&self.norm, idx)
    }

    pub fn targets_raw(&self, idx: &[usize]) -> Tensor {
        self.gather_targets(&self.raw, idx)
    }

    pub fn sample(&self, i: usize) -> Result<WindowSample> {
        let (p, n, l) = (self.p, self.n(), self.tasks());
        Ok(WindowSample {
            anchor: self.anchors[i],
            x: self.inputs_raw(&[i]).reshape([p, n])?,
            x_norm: self.inputs(&[i]).reshape([p, n])?,
            targets: self.targets_raw(&[i]).reshape([l, n])?,
            targets_norm: self.targets(&[i]).reshape([l, n])?,
        })
    }
}

/// A loaded dataset cut into scaled, windowed splits.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub splits: Splits,
    pub scaler: Scaler,
    pub train: Windows,
    pub valid: Windows,
    pub test: Windows,
}

/// Splits `ds`, fits the scaler on the train rows only and windows each split.
pub fn prepare(ds: &SeriesDataset, spec: &SplitSpec, cfg: &ModelConfig) -> Result<Prepared> {
    if ds.variables() != cfg.n {
        return Err(Error::Data(format!(
            "dataset has {} variables, model expects {}",
            ds.variables(),
            cfg.n
        )));
    }
    let splits = split(ds.len(), spec, min_split_len(cfg))?;
    let scaler = Scaler::fit(&ds.rows(splits.train.clone())?)?;
    let win = |r: &Range<usize>| Windows::new(&ds.rows(r.clone())?, &scaler, cfg, r.start);
    Ok(Prepared {
        train: win(&splits.train)?,
        valid: win(&splits.valid)?,
        test: win(&splits.test)?,
        scaler,
        splits,
    })
}

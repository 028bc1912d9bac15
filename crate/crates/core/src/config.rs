//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment. Every [`ModelConfig`] and
//! [`TrainConfig`] field has a key, plus the data options. `n` may be left
//! out, in which case it is taken from the loaded data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{CsvOptions, SplitSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "data",
    "data_sha256",
    "delimiter",
    "header",
    "drop_columns",
    "sample_rate",
    "train_frac",
    "valid_frac",
    "test_frac",
    "n",
    "p",
    "horizon",
    "fsp",
    "fst",
    "filters",
    "kernel_width",
    "layers_per_stage",
    "hidden",
    "dropout",
    "ar_stride",
    "leak",
    "variant",
    "seed",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "max_epochs",
    "patience",
    "loss",
    "clip_norm",
    "probe_epochs",
    "max_steps",
];

/// Where the series comes from and how it is split.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    /// Expected SHA-256 of the data file, hex encoded.
    pub sha256: Option<String>,
    pub csv: CsvOptions,
    pub split: SplitSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            sha256: None,
            csv: CsvOptions::default(),
            split: SplitSpec::TRAFFIC,
        }
    }
}

/// Complete description of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub data: DataConfig,
    /// `None` until fixed by the config file or the data.
    pub n: Option<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.eq_ignore_ascii_case("none") || value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_delimiter(value: &str) -> Result<u8> {
    match value {
        "tab" | "\\t" => Ok(b'\t'),
        "space" => Ok(b' '),
        "comma" => Ok(b','),
        "semicolon" => Ok(b';'),
        v if v.len() == 1 && v != "#" => Ok(v.as_bytes()[0]),
        v => Err(Error::Config(format!(
            "`delimiter`: expected a single character, tab, space, comma or semicolon, got `{v}`"
        ))),
    }
}

fn delimiter_name(d: u8) -> String {
    match d {
        b'\t' => "tab".into(),
        b' ' => "space".into(),
        b',' => "comma".into(),
        b';' => "semicolon".into(),
        d => (d as char).to_string(),
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

impl RunConfig {
    /// Parses config text. Keys absent from the text keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{}`", lineno + 1, raw.trim()))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(&e))))?;
        }
        cfg.check_fractions()?;
        Ok(cfg)
    }

    /// Reads a config file. A relative `data` path is resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(data), Some(dir)) = (&cfg.data.path, path.parent()) {
            if data.is_relative() {
                cfg.data.path = Some(dir.join(data));
            }
        }
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "data" => d.path = optional::<String>(key, value)?.map(PathBuf::from),
            "data_sha256" => d.sha256 = optional::<String>(key, value)?.map(|s| s.to_ascii_lowercase()),
            "delimiter" => d.csv.delimiter = parse_delimiter(value)?,
            "header" => d.csv.header = parse_bool(key, value)?,
            "drop_columns" => {
                d.csv.drop_columns = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "sample_rate" => d.csv.sample_rate = value.to_string(),
            "train_frac" => d.split.train = parse(key, value)?,
            "valid_frac" => d.split.valid = parse(key, value)?,
            "test_frac" => d.split.test = parse(key, value)?,
            "n" => {
                self.n = optional(key, value)?;
                if let Some(n) = self.n {
                    m.n = n;
                }
            }
            "p" => m.p = parse(key, value)?,
            "horizon" => m.horizon = parse(key, value)?,
            "fsp" => m.fsp = parse(key, value)?,
            "fst" => m.fst = parse(key, value)?,
            "filters" => m.filters = parse(key, value)?,
            "kernel_width" => m.kernel_width = parse(key, value)?,
            "layers_per_stage" => m.layers_per_stage = parse(key, value)?,
            "hidden" => m.hidden = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "ar_stride" => m.ar_stride = parse(key, value)?,
            "leak" => m.leak = parse(key, value)?,
            "variant" => m.variant = value.parse()?,
            "seed" => {
                let s: u64 = parse(key, value)?;
                m.seed = s;
                t.seed = s;
            }
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "eps" => t.eps = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "loss" => t.loss = value.parse()?,
            "clip_norm" => t.clip_norm = optional(key, value)?,
            "probe_epochs" => t.probe_epochs = parse(key, value)?,
            "max_steps" => t.max_steps = optional(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}`; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    fn check_fractions(&self) -> Result<()> {
        self.data.split.validate()
    }

    /// Fixes `n` from the data, failing if the config stated a different one.
    pub fn resolve_n(&mut self, data_n: usize) -> Result<()> {
        match self.n {
            Some(n) if n != data_n => Err(Error::Config(format!(
                "config says n = {n} but the data has {data_n} variables"
            ))),
            _ => {
                self.n = Some(data_n);
                self.model.n = data_n;
                Ok(())
            }
        }
    }

    /// Checks every section.
    pub fn validate(&self) -> Result<()> {
        self.check_fractions()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Canonical text with every key; [`RunConfig::parse`] inverts it.
    pub fn to_text(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data", opt(d.path.as_ref().map(|p| p.display().to_string())));
        kv("data_sha256", opt(d.sha256.clone()));
        kv("delimiter", delimiter_name(d.csv.delimiter));
        kv("header", d.csv.header.to_string());
        kv("drop_columns", d.csv.drop_columns.join(","));
        kv("sample_rate", d.csv.sample_rate.clone());
        kv("train_frac", d.split.train.to_string());
        kv("valid_frac", d.split.valid.to_string());
        kv("test_frac", d.split.test.to_string());
        kv("n", opt(self.n.map(|n| n.to_string())));
        kv("p", m.p.to_string());
        kv("horizon", m.horizon.to_string());
        kv("fsp", m.fsp.to_string());
        kv("fst", m.fst.to_string());
        kv("filters", m.filters.to_string());
        kv("kernel_width", m.kernel_width.to_string());
        kv("layers_per_stage", m.layers_per_stage.to_string());
        kv("hidden", m.hidden.to_string());
        kv("dropout", m.dropout.to_string());
        kv("ar_stride", m.ar_stride.to_string());
        kv("leak", m.leak.to_string());
        kv("variant", m.variant.to_string());
        kv("seed", m.seed.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("eps", t.eps.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("patience", t.patience.to_string());
        kv("loss", t.loss.to_string());
        kv("clip_norm", opt(t.clip_norm.map(|c| c.to_string())));
        kv("probe_epochs", t.probe_epochs.to_string());
        kv("max_steps", opt(t.max_steps.map(|c| c.to_string())));
        s
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RunConfig::parse(s)
    }
}

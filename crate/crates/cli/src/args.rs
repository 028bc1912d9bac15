use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mlcnn_core::{RunConfig, Variant};

use crate::error::{CliError, CliResult};
use crate::run::SplitName;

#[derive(Debug, Parser)]
#[command(name = "mlcnn", version, about = "Multi-level construal forecasting: train, evaluate, ablate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write checkpoint, log and manifest to --out.
    Train(TrainArgs),
    /// Score a trained run on one split; writes metrics, predictions and baselines.
    Evaluate(EvaluateArgs),
    /// Predict every task from the final input window.
    Forecast(ForecastArgs),
    /// Train all five variants over several seeds and compare them.
    Ablate(AblateArgs),
    /// Time training and prediction on growing prefixes of the data.
    Bench(BenchArgs),
    /// Train every combination of the given config values.
    Sweep(SweepArgs),
    /// Write a synthetic dataset as CSV.
    Synth(SynthArgs),
}

/// Options that select and override the run configuration.
#[derive(Debug, Clone, Args, Default)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Data file; overrides `data` in the config.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Seeds initialisation, shuffling and dropout.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Main-task horizon.
    #[arg(long, value_name = "N")]
    pub horizon: Option<usize>,
    /// Any config key, e.g. `--set hidden=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: mlcnn_core::Error| e.to_string())
}

impl ConfigArgs {
    pub fn build(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                if !p.exists() {
                    return Err(CliError::usage(format!("config file {} not found", p.display())));
                }
                RunConfig::load(p)?
            }
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            cfg.data.path = Some(d.clone());
            cfg.data.sha256 = None;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(v) = self.variant {
            cfg.model.variant = v;
        }
        if let Some(h) = self.horizon {
            cfg.model.horizon = h;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory.
    #[arg(long, value_name = "DIR", default_value = "mlcnn-run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directory written by `train`.
    #[arg(long, value_name = "DIR", default_value = "mlcnn-run")]
    pub out: PathBuf,
    /// Data file to score instead of the one in the manifest.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Lag order of the ridge AR baseline (default: the window length).
    #[arg(long, value_name = "N")]
    pub ar_order: Option<usize>,
    /// Ridge penalty of the AR baseline, on the normalised scale.
    #[arg(long, value_name = "X", default_value_t = 1e-4)]
    pub ar_lambda: f64,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    /// Run directory written by `train`.
    #[arg(long, value_name = "DIR", default_value = "mlcnn-run")]
    pub out: PathBuf,
    /// Take the final window from this file instead of the training data.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "DIR", default_value = "mlcnn-ablation")]
    pub out: PathBuf,
    /// Seeds per variant, counting up from the configured seed.
    #[arg(long, value_name = "N", default_value_t = 3)]
    pub seeds: u64,
    /// Worker threads.
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "DIR", default_value = "mlcnn-bench")]
    pub out: PathBuf,
    /// Fractions of the series (leading rows) to time on.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1.0")]
    pub fractions: Vec<f64>,
    /// Worker threads.
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "DIR", default_value = "mlcnn-sweep")]
    pub out: PathBuf,
    /// `KEY=V1,V2,...`; every combination is trained. Repeatable.
    #[arg(long, value_name = "KEY=VALUES", required = true)]
    pub grid: Vec<String>,
    /// Worker threads.
    #[arg(long, value_name = "N", default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Two sinusoids per variable plus noise.
    Sinusoids,
    /// Positive sinusoids whose level is multiplied from `--shift-at` on.
    LevelShift,
    /// Independent AR(1) processes.
    Ar1,
    RandomWalk,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "sinusoids")]
    pub kind: SynthKind,
    /// Output CSV path.
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub len: usize,
    #[arg(long, default_value_t = 2)]
    pub vars: usize,
    /// Noise relative to the peak amplitude (sinusoid kinds).
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// First row of the shifted level (level-shift).
    #[arg(long, default_value_t = 1600)]
    pub shift_at: usize,
    #[arg(long, default_value_t = 10.0)]
    pub factor: f64,
    /// AR(1) coefficient.
    #[arg(long, default_value_t = 0.8)]
    pub phi: f64,
    /// Innovation standard deviation (ar1, random-walk).
    #[arg(long, default_value_t = 0.01)]
    pub sigma: f64,
    /// Write a header row of variable names.
    #[arg(long)]
    pub header: bool,
}

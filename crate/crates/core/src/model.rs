//! The MLCNN forecaster and its ablation variants.
//!
//! A forward pass runs five stages:
//!
//! 1. **Construals.** A chain of convolution stages turns the input window
//!    into `l = 2·fsp + 1` feature maps. Stage `k` consumes the output of stage
//!    `k − 1`, so each construal is strictly deeper than the previous one; the
//!    shallowest serves the nearest future target and the deepest the farthest.
//! 2. **Fusion encoder.** One LSTM, shared by every task, is unrolled over each
//!    construal from a zero state.
//! 3. **Main decoder.** A second LSTM is unrolled over the main task's
//!    construal, starting from the encoder's final state for that task.
//! 4. **Dense alignment.** A per-task dense layer maps hidden states to `n`
//!    outputs (`r_D`).
//! 5. **Autoregressive head.** Task `q` (1-based) forms a shared-weight linear
//!    combination of the `q·s_ar + 1` most recent input rows (`r_L`).
//!
//! The prediction is `ŷ = r_D + r_L`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{self, ConvParams, DenseParams, LstmParams, Mode};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Architecture ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    /// The complete model.
    #[default]
    Full,
    /// Independent convolution stacks per task instead of one shared chain.
    NoLevels,
    /// No fusion encoder; the decoder starts from a zero state.
    NoShared,
    /// No main decoder; the main task reads the fusion encoder directly.
    NoMain,
    /// No autoregressive head.
    NoAr,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoLevels,
        Variant::NoShared,
        Variant::NoMain,
        Variant::NoAr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLevels => "nL",
            Variant::NoShared => "nS",
            Variant::NoMain => "nM",
            Variant::NoAr => "nA",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected full, nL, nS, nM or nA)")))
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of variables.
    pub n: usize,
    /// Input window length.
    pub p: usize,
    /// Main-task horizon.
    pub horizon: usize,
    /// Future span: auxiliary tasks on each side of the main task.
    pub fsp: usize,
    /// Future stride: spacing between neighbouring tasks.
    pub fst: usize,
    /// Convolution filters per layer (`m`).
    pub filters: usize,
    /// Convolution kernel width (`w`).
    pub kernel_width: usize,
    pub layers_per_stage: usize,
    /// LSTM hidden size (`H`), shared by encoder and decoder.
    pub hidden: usize,
    pub dropout: f64,
    /// Autoregressive stride `s_ar`.
    pub ar_stride: usize,
    /// LeakyReLU leak rate.
    pub leak: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 1,
            p: 48,
            horizon: 3,
            fsp: 2,
            fst: 1,
            filters: 10,
            kernel_width: 6,
            layers_per_stage: 2,
            hidden: 25,
            dropout: 0.2,
            // widest stride the window allows: 5·9 + 1 = 46 ≤ 48
            ar_stride: 9,
            leak: 0.01,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_variables(n: usize) -> Self {
        ModelConfig {
            n,
            ..Self::default()
        }
    }

    /// Number of predictive tasks, `2·fsp + 1`.
    pub fn tasks(&self) -> usize {
        2 * self.fsp + 1
    }

    /// Row of the main task in every `[l, n]` output.
    pub fn main_index(&self) -> usize {
        self.fsp
    }

    /// Steps ahead of the anchor targeted by task `k` (0-based).
    pub fn target_offset(&self, k: usize) -> usize {
        self.horizon + k * self.fst - self.fsp * self.fst
    }

    /// Lags read by the autoregressive head of task `k` (0-based): `(k+1)·s_ar + 1`.
    pub fn ar_lags(&self, k: usize) -> usize {
        (k + 1) * self.ar_stride + 1
    }

    /// Rows after the anchor that must exist for the farthest target.
    pub fn lookahead(&self) -> usize {
        self.horizon + self.fsp * self.fst
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n", self.n),
            ("p", self.p),
            ("horizon", self.horizon),
            ("fsp", self.fsp),
            ("fst", self.fst),
            ("filters", self.filters),
            ("kernel_width", self.kernel_width),
            ("layers_per_stage", self.layers_per_stage),
            ("hidden", self.hidden),
            ("ar_stride", self.ar_stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.fsp * self.fst >= self.horizon {
            return Err(Error::Config(format!(
                "need 0 < fsp·fst < horizon, got fsp={} fst={} horizon={}",
                self.fsp, self.fst, self.horizon
            )));
        }
        let need = self.ar_lags(self.tasks() - 1);
        if self.p < need {
            return Err(Error::Config(format!(
                "window p={} too short for the autoregressive head: the farthest task reads {need} rows",
                self.p
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.leak.is_finite() {
            return Err(Error::Config("leak rate must be finite".into()));
        }
        Ok(())
    }

    /// Convolution layers applied to produce construal `k` (0-based).
    pub fn construal_depth(&self, k: usize) -> usize {
        (k + 1) * self.layers_per_stage
    }
}

/// Tensor-level forecast: rows are tasks ordered nearest to farthest.
///
/// Shapes are `[l, n]` for a single window and `[B, l, n]` for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastOutput {
    pub r_d: Tensor,
    pub r_l: Tensor,
    pub y_hat: Tensor,
    pub main_index: usize,
}

/// A forecast recorded on a tape.
#[derive(Debug, Clone)]
pub struct ForecastVars {
    /// `[B, l, n]` neural output.
    pub r_d: Var,
    /// `[B, l, n]` autoregressive output, absent for the `nA` variant.
    pub r_l: Option<Var>,
    /// `[B, l, n]` combined prediction.
    pub y_hat: Var,
    /// The construal fed to each task, `[B, p, m]`, before dropout.
    pub construals: Vec<Var>,
}

/// An MLCNN instance: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlcnn {
    config: ModelConfig,
    params: ParameterStore,
}

impl Mlcnn {
    /// Builds a model with parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let c = &config;
        let l = c.tasks();

        match c.variant {
            Variant::NoLevels => {
                for k in 0..l {
                    for j in 0..c.construal_depth(k) {
                        let d = if j == 0 { c.n } else { c.filters };
                        ConvParams::init(
                            &mut params,
                            &independent_conv(k, j),
                            d,
                            c.filters,
                            c.kernel_width,
                            c.leak,
                            rng,
                        )?;
                    }
                }
            }
            _ => {
                for k in 0..l {
                    for j in 0..c.layers_per_stage {
                        let d = if k == 0 && j == 0 { c.n } else { c.filters };
                        ConvParams::init(
                            &mut params,
                            &stage_conv(k, j),
                            d,
                            c.filters,
                            c.kernel_width,
                            c.leak,
                            rng,
                        )?;
                    }
                }
            }
        }
        if c.variant != Variant::NoShared {
            LstmParams::init(&mut params, SHARED_LSTM, c.filters, c.hidden, rng)?;
        }
        if c.variant != Variant::NoMain {
            LstmParams::init(&mut params, MAIN_LSTM, c.filters, c.hidden, rng)?;
        }
        for k in 0..l {
            let input = if c.variant == Variant::NoShared && k != c.main_index() {
                c.filters
            } else {
                c.hidden
            };
            DenseParams::init(&mut params, &dense_name(k), input, c.n, rng)?;
        }
        if c.variant != Variant::NoAr {
            for k in 0..l {
                let lags = c.ar_lags(k);
                // starts scale-neutral; a random lag sum would be a random gain
                params.insert(format!("{}.weight", ar_name(k)), Tensor::zeros([lags]))?;
                params.insert(format!("{}.bias", ar_name(k)), Tensor::zeros([1]))?;
            }
        }
        Ok(Mlcnn { config, params })
    }

    /// Restores a model for `config` from a checkpoint file.
    pub fn load(config: ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut model = Self::new(config)?;
        let stored = checkpoint::load_params(path)?;
        model.params.assign_from(&stored)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save_params(&self.params, path)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    /// Replaces every parameter; names and shapes must match.
    pub fn set_params(&mut self, params: &ParameterStore) -> Result<()> {
        self.params.assign_from(params)
    }

    // ------------------------------------------------------ components

    fn check_input(&self, g: &Graph, x: Var) -> Result<usize> {
        let s = g.shape(x);
        match *s {
            [b, p, n] if p == self.config.p && n == self.config.n => Ok(b),
            _ => Err(Error::shape(
                "model input",
                s,
                &[0, self.config.p, self.config.n],
            )),
        }
    }

    /// Construal for every task, `[B, p, m]` each, with dropout applied in
    /// train mode. Returns `(pre_dropout, post_dropout)`.
    pub fn build_construals<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        self.check_input(g, x)?;
        let c = &self.config;
        let l = c.tasks();
        let mut raw = Vec::with_capacity(l);
        match c.variant {
            Variant::NoLevels => {
                for k in 0..l {
                    let mut cur = x;
                    for j in 0..c.construal_depth(k) {
                        let p = ConvParams::bind(g, &self.params, &independent_conv(k, j), c.leak)?;
                        cur = nn::conv1d(g, cur, &p)?;
                    }
                    raw.push(cur);
                }
            }
            _ => {
                let mut cur = x;
                for k in 0..l {
                    for j in 0..c.layers_per_stage {
                        let p = ConvParams::bind(g, &self.params, &stage_conv(k, j), c.leak)?;
                        cur = nn::conv1d(g, cur, &p)?;
                    }
                    raw.push(cur);
                }
            }
        }
        let dropped = raw
            .iter()
            .map(|&v| nn::dropout(g, v, c.dropout, mode, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok((raw, dropped))
    }

    /// Runs the shared encoder over each construal from a zero state.
    pub fn encode_shared(&self, g: &mut Graph, construals: &[Var]) -> Result<Vec<(Var, Var)>> {
        if construals.len() != self.config.tasks() {
            return Err(Error::Contract(format!(
                "expected {} construals, got {}",
                self.config.tasks(),
                construals.len()
            )));
        }
        let shared = LstmParams::bind(g, &self.params, SHARED_LSTM)?;
        construals
            .iter()
            .map(|&ck| nn::lstm_unroll(g, ck, &shared, None).map(|r| (r.h, r.c)))
            .collect()
    }

    /// Main decoder over the main construal, seeded with `init` (zero when `None`).
    pub fn decode_main(&self, g: &mut Graph, main: Var, init: Option<(Var, Var)>) -> Result<Var> {
        if self.config.variant == Variant::NoMain {
            return Err(Error::Contract("variant nM has no main decoder".into()));
        }
        let p = LstmParams::bind(g, &self.params, MAIN_LSTM)?;
        Ok(nn::lstm_unroll(g, main, &p, init)?.h)
    }

    /// Dense alignment for task `k` (0-based).
    pub fn dense(&self, g: &mut Graph, h: Var, k: usize) -> Result<Var> {
        if k >= self.config.tasks() {
            return Err(Error::Contract(format!(
                "task index {k} out of range for {} tasks",
                self.config.tasks()
            )));
        }
        let p = DenseParams::bind(g, &self.params, &dense_name(k))?;
        nn::dense(g, h, &p)
    }

    /// Autoregressive output of task `k` (0-based) on the input window.
    pub fn ar_head(&self, g: &mut Graph, x: Var, k: usize) -> Result<Var> {
        if self.config.variant == Variant::NoAr {
            return Err(Error::Contract("variant nA has no autoregressive head".into()));
        }
        if k >= self.config.tasks() {
            return Err(Error::Contract(format!("task index {k} out of range")));
        }
        let steps = g.shape(x)[g.shape(x).len() - 2];
        let lags = self.config.ar_lags(k);
        if steps < lags {
            return Err(Error::Contract(format!(
                "window of {steps} rows too short for {lags} autoregressive lags"
            )));
        }
        let w = g.param(&self.params, &format!("{}.weight", ar_name(k)))?;
        let b = g.param(&self.params, &format!("{}.bias", ar_name(k)))?;
        g.lag_combine(x, w, b)
    }

    /// Full forward pass on `x: [B, p, n]`.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForecastVars> {
        let c = &self.config;
        let l = c.tasks();
        let main = c.main_index();
        let (construals, dropped) = self.build_construals(g, x, mode, rng)?;

        let mut hidden: Vec<Var> = Vec::with_capacity(l);
        match c.variant {
            Variant::NoShared => {
                let h_main = self.decode_main(g, dropped[main], None)?;
                for (k, &ck) in dropped.iter().enumerate() {
                    if k == main {
                        hidden.push(h_main);
                    } else {
                        hidden.push(g.time_step(ck, c.p - 1)?);
                    }
                }
            }
            Variant::NoMain => {
                hidden.extend(self.encode_shared(g, &dropped)?.into_iter().map(|(h, _)| h));
            }
            _ => {
                let enc = self.encode_shared(g, &dropped)?;
                let h_main = self.decode_main(g, dropped[main], Some(enc[main]))?;
                for (k, &(h, _)) in enc.iter().enumerate() {
                    hidden.push(if k == main { h_main } else { h });
                }
            }
        }

        let r_d_rows = hidden
            .iter()
            .enumerate()
            .map(|(k, &h)| self.dense(g, h, k))
            .collect::<Result<Vec<_>>>()?;
        let r_d = g.stack(&r_d_rows)?;

        let (r_l, y_hat) = if c.variant == Variant::NoAr {
            (None, r_d)
        } else {
            let rows = (0..l)
                .map(|k| self.ar_head(g, x, k))
                .collect::<Result<Vec<_>>>()?;
            let r_l = g.stack(&rows)?;
            (Some(r_l), g.add(r_d, r_l)?)
        };
        Ok(ForecastVars {
            r_d,
            r_l,
            y_hat,
            construals,
        })
    }

    /// Forward pass on a `[p, n]` window or a `[B, p, n]` batch, off the tape.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, mode: Mode, rng: &mut R) -> Result<ForecastOutput> {
        let single = x.ndim() == 2;
        let batch = if single {
            x.clone().reshape([1, x.shape()[0], x.shape()[1]])?
        } else {
            x.clone()
        };
        let mut g = Graph::inference();
        let xv = g.constant(batch)?;
        let out = self.forward_graph(&mut g, xv, mode, rng)?;
        let (l, n) = (self.config.tasks(), self.config.n);
        let fix = |t: Tensor| if single { t.reshape([l, n]) } else { Ok(t) };
        let r_d = g.value(out.r_d).clone();
        let r_l = match out.r_l {
            Some(v) => g.value(v).clone(),
            None => Tensor::zeros(r_d.shape()),
        };
        let y_hat = g.value(out.y_hat).clone();
        Ok(ForecastOutput {
            r_d: fix(r_d)?,
            r_l: fix(r_l)?,
            y_hat: fix(y_hat)?,
            main_index: self.config.main_index(),
        })
    }

    /// Eval-mode predictions `[B, l, n]` for a batch of windows.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        // eval mode never draws from the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(x, Mode::Eval, &mut rng)?.y_hat)
    }
}

const SHARED_LSTM: &str = "shared_lstm";
const MAIN_LSTM: &str = "main_lstm";

fn stage_conv(stage: usize, layer: usize) -> String {
    format!("conv.s{stage}.l{layer}")
}

fn independent_conv(task: usize, layer: usize) -> String {
    format!("conv.t{task}.l{layer}")
}

fn dense_name(task: usize) -> String {
    format!("dense.t{task}")
}

fn ar_name(task: usize) -> String {
    format!("ar.t{task}")
}

#[cfg(test)]
mod tests;

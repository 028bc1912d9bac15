//! Losses, Adam, and the early-stopping training loop.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::data::Windows;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::Mlcnn;
use crate::nn::Mode;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Loss {
    L1,
    L2,
}

impl Loss {
    pub fn as_str(self) -> &'static str {
        match self {
            Loss::L1 => "l1",
            Loss::L2 => "l2",
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Training loss, or `Auto` to pick one on the validation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LossChoice {
    L1,
    #[default]
    L2,
    Auto,
}

impl fmt::Display for LossChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossChoice::L1 => "l1",
            LossChoice::L2 => "l2",
            LossChoice::Auto => "auto",
        })
    }
}

impl FromStr for LossChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossChoice::L1),
            "l2" => Ok(LossChoice::L2),
            "auto" => Ok(LossChoice::Auto),
            _ => Err(Error::Config(format!("unknown loss `{s}` (expected l1, l2 or auto)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub loss: LossChoice,
    /// Global gradient-norm cap.
    pub clip_norm: Option<f64>,
    /// Epochs per candidate when `loss` is `Auto`.
    pub probe_epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Seeds shuffling and dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 200,
            patience: 15,
            loss: LossChoice::L2,
            clip_norm: None,
            probe_epochs: 5,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("Adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        if self.loss == LossChoice::Auto && self.probe_epochs == 0 {
            return bad("probe_epochs must be at least 1 with loss=auto".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be at least 1".into());
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ losses

fn check_same(y: &Tensor, y_hat: &Tensor) -> Result<()> {
    if y.shape() != y_hat.shape() {
        return Err(Error::shape("loss", y.shape(), y_hat.shape()));
    }
    Ok(())
}

/// `Σ (y − ŷ)²` over every entry.
pub fn l2_loss(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    check_same(y, y_hat)?;
    Ok(y.data().iter().zip(y_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `Σ |y − ŷ|` over every entry.
pub fn l1_loss(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    check_same(y, y_hat)?;
    Ok(y.data().iter().zip(y_hat.data()).map(|(a, b)| (a - b).abs()).sum())
}

pub fn loss_value(kind: Loss, y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    match kind {
        Loss::L1 => l1_loss(y, y_hat),
        Loss::L2 => l2_loss(y, y_hat),
    }
}

/// Records the summed loss on the tape; the result has shape `[1]`.
pub fn loss_graph(g: &mut Graph, kind: Loss, y: Var, y_hat: Var) -> Result<Var> {
    if g.shape(y) != g.shape(y_hat) {
        return Err(Error::shape("loss", g.shape(y), g.shape(y_hat)));
    }
    let d = g.sub(y, y_hat)?;
    let r = match kind {
        Loss::L1 => g.abs(d)?,
        Loss::L2 => g.square(d)?,
    };
    g.sum(r)
}

// -------------------------------------------------------------------- Adam

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` to global norm `max_norm` when it is exceeded. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// One bias-corrected Adam update. Parameters absent from `grads` receive a
/// zero gradient.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut clipped;
    let grads = match cfg.clip_norm {
        Some(c) => {
            clipped = grads.clone();
            clip_gradients(&mut clipped, c);
            &clipped
        }
        None => grads,
    };
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, theta) in params.iter_mut() {
        let g = grads.get(name);
        if let Some(g) = g {
            if g.shape() != theta.shape() {
                return Err(Error::shape("adam_step", g.shape(), theta.shape()));
            }
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(theta.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(theta.shape()));
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, th) in theta.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *th -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

// -------------------------------------------------------------- evaluation

const EVAL_BATCH: usize = 256;

/// Eval-mode predictions for every window, `[N, l, n]` on the normalised scale.
pub fn predict_normalized(model: &Mlcnn, windows: &Windows) -> Result<Tensor> {
    let (l, n) = (windows.tasks(), windows.n());
    let mut out = Vec::with_capacity(windows.len() * l * n);
    let idx: Vec<usize> = (0..windows.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        out.extend(model.predict(&windows.inputs(chunk))?.into_data());
    }
    if out.is_empty() {
        return Err(Error::Data("no windows to predict".into()));
    }
    Tensor::new([windows.len(), l, n], out)
}

/// Eval-mode predictions for every window, `[N, l, n]` on the raw scale.
pub fn predict_raw(model: &Mlcnn, windows: &Windows) -> Result<Tensor> {
    windows.scaler().denormalize(&predict_normalized(model, windows)?)
}

/// Rows `k` of a `[N, l, n]` tensor as `[N, n]`.
pub fn task_rows(t: &Tensor, k: usize) -> Result<Tensor> {
    let (nw, l, n) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if k >= l {
        return Err(Error::Contract(format!("task {k} out of range for {l} tasks")));
    }
    let mut out = Vec::with_capacity(nw * n);
    for i in 0..nw {
        out.extend_from_slice(&t.data()[(i * l + k) * n..(i * l + k + 1) * n]);
    }
    Tensor::new([nw, n], out)
}

/// Main-task targets and predictions on the raw scale, with their metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rmse: f64,
    pub mae: f64,
    /// `[N, n]`
    pub y_true: Tensor,
    pub y_pred: Tensor,
}

pub fn evaluate(model: &Mlcnn, windows: &Windows) -> Result<Evaluation> {
    let main = windows.main_index();
    let y_pred = task_rows(&predict_raw(model, windows)?, main)?;
    let idx: Vec<usize> = (0..windows.len()).collect();
    let y_true = task_rows(&windows.targets_raw(&idx), main)?;
    let (rmse, mae) = metrics::aggregate(&y_true, &y_pred)?;
    Ok(Evaluation {
        rmse,
        mae,
        y_true,
        y_pred,
    })
}

/// Mean per-window loss over all tasks on the normalised scale, eval mode.
pub fn mean_loss(model: &Mlcnn, windows: &Windows, kind: Loss) -> Result<f64> {
    let pred = predict_normalized(model, windows)?;
    let idx: Vec<usize> = (0..windows.len()).collect();
    Ok(loss_value(kind, &windows.targets(&idx), &pred)? / windows.len() as f64)
}

/// Main-task RMSE on the normalised scale, eval mode.
pub fn main_rmse_normalized(model: &Mlcnn, windows: &Windows) -> Result<f64> {
    let main = windows.main_index();
    let pred = task_rows(&predict_normalized(model, windows)?, main)?;
    let idx: Vec<usize> = (0..windows.len()).collect();
    let y = task_rows(&windows.targets(&idx), main)?;
    Ok(metrics::aggregate(&y, &pred)?.0)
}

/// Summed loss and parameter gradients of one batch.
pub fn batch_gradients(
    model: &Mlcnn,
    windows: &Windows,
    batch: &[usize],
    kind: Loss,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let x = g.constant(windows.inputs(batch))?;
    let y = g.constant(windows.targets(batch))?;
    let out = model.forward_graph(&mut g, x, mode, rng)?;
    let loss = loss_graph(&mut g, kind, y, out.y_hat)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    Ok((value, g.param_grads()))
}

// --------------------------------------------------------------- training

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-window training loss (normalised scale, train mode).
    pub train_loss: f64,
    /// Main-task validation metrics on the raw scale.
    pub valid_rmse: f64,
    pub valid_mae: f64,
    /// Optimizer steps completed so far.
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
    MaxSteps,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::MaxSteps => "max_steps",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss: Loss,
    /// Best validation RMSE reached by each candidate loss when probing.
    pub probes: Vec<(Loss, f64)>,
    /// Mean per-window loss before the first step (eval mode).
    pub initial_train_loss: f64,
    /// Mean per-window loss of the returned parameters (eval mode).
    pub final_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_rmse: f64,
    pub best_valid_mae: f64,
    pub steps: usize,
    pub stop: StopReason,
}

fn f(v: f64) -> String {
    v.to_string()
}

impl TrainReport {
    /// Line-delimited log. Contains no timings, so equal runs give equal bytes.
    pub fn to_log(&self) -> String {
        let mut s = String::new();
        for (loss, rmse) in &self.probes {
            let _ = writeln!(s, "probe loss={loss} valid_rmse={}", f(*rmse));
        }
        let _ = writeln!(s, "initial train_loss={}", f(self.initial_train_loss));
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "epoch={} train_loss={} valid_rmse={} valid_mae={} steps={}",
                e.epoch,
                f(e.train_loss),
                f(e.valid_rmse),
                f(e.valid_mae),
                e.steps
            );
        }
        let _ = writeln!(
            s,
            "summary loss={} best_epoch={} best_valid_rmse={} best_valid_mae={} epochs={} steps={} stop={} final_train_loss={}",
            self.loss,
            self.best_epoch,
            f(self.best_valid_rmse),
            f(self.best_valid_mae),
            self.epochs.len(),
            self.steps,
            self.stop.as_str(),
            f(self.final_train_loss)
        );
        s
    }
}

/// `key=value` fields of the `summary` line of a training log.
pub fn parse_summary(log: &str) -> Result<BTreeMap<String, String>> {
    let line = log
        .lines()
        .rev()
        .find(|l| l.starts_with("summary "))
        .ok_or_else(|| Error::Data("training log has no summary line".into()))?;
    Ok(line
        .split_whitespace()
        .skip(1)
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

/// Trains `model` in place and leaves it at the best-validation parameters.
///
/// With `LossChoice::Auto` each loss is first tried for `probe_epochs` on a
/// copy of the initial model; the one with the lower validation RMSE is then
/// used for the full run from the same initial parameters.
pub fn fit(model: &mut Mlcnn, train: &Windows, valid: &Windows, cfg: &TrainConfig) -> Result<TrainReport> {
    fit_with_progress(model, train, valid, cfg, &mut |_, _| {})
}

/// [`fit`] that reports every finished epoch, probes included, to `progress`.
pub fn fit_with_progress(
    model: &mut Mlcnn,
    train: &Windows,
    valid: &Windows,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(Loss, &EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data(format!(
            "need non-empty splits, got {} train and {} validation windows",
            train.len(),
            valid.len()
        )));
    }
    let (kind, probes) = match cfg.loss {
        LossChoice::L1 => (Loss::L1, Vec::new()),
        LossChoice::L2 => (Loss::L2, Vec::new()),
        LossChoice::Auto => {
            let probe_cfg = TrainConfig {
                max_epochs: cfg.probe_epochs,
                patience: cfg.probe_epochs,
                max_steps: None,
                ..cfg.clone()
            };
            let mut probes = Vec::new();
            for kind in [Loss::L2, Loss::L1] {
                let mut m = model.clone();
                let r = run(&mut m, train, valid, &probe_cfg, kind, progress)?;
                probes.push((kind, r.best_valid_rmse));
            }
            // ties keep the default L2
            let best = if probes[1].1 < probes[0].1 { Loss::L1 } else { Loss::L2 };
            (best, probes)
        }
    };
    let mut report = run(model, train, valid, cfg, kind, progress)?;
    report.probes = probes;
    Ok(report)
}

fn run(
    model: &mut Mlcnn,
    train: &Windows,
    valid: &Windows,
    cfg: &TrainConfig,
    kind: Loss,
    progress: &mut dyn FnMut(Loss, &EpochRecord),
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params());
    let initial_train_loss = mean_loss(model, train, kind)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, f64, ParameterStore)> = None;
    let mut since_best = 0;
    let mut steps = 0;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_gradients(model, train, batch, kind, Mode::Train, &mut rng)?;
            if !loss.is_finite() || !grads.values().all(Tensor::is_finite) {
                return Err(Error::Divergence { epoch, step: steps + 1, loss });
            }
            adam_step(model.params_mut(), &grads, &mut adam, cfg)?;
            total += loss;
            seen += batch.len();
            steps += 1;
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
        }
        let ev = evaluate(model, valid)?;
        if !ev.rmse.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: steps,
                loss: ev.rmse,
            });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / seen as f64,
            valid_rmse: ev.rmse,
            valid_mae: ev.mae,
            steps,
        });
        progress(kind, epochs.last().expect("just pushed"));
        if best.as_ref().is_none_or(|b| ev.rmse < b.1) {
            best = Some((epoch, ev.rmse, ev.mae, model.params().clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                stop = StopReason::Patience;
                break;
            }
        }
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            stop = StopReason::MaxSteps;
            break;
        }
    }
    let (best_epoch, best_valid_rmse, best_valid_mae, params) = best.expect("at least one epoch");
    model.set_params(&params)?;
    Ok(TrainReport {
        loss: kind,
        probes: Vec::new(),
        initial_train_loss,
        final_train_loss: mean_loss(model, train, kind)?,
        epochs,
        best_epoch,
        best_valid_rmse,
        best_valid_mae,
        steps,
        stop,
    })
}

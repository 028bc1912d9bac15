//! Neural building blocks: zero-padded 1-D convolution, LSTM, dense
//! alignment, inverted dropout and Glorot initialisation.
//!
//! Parameter tensors live in a [`ParameterStore`] under a name prefix; the
//! `*Params` types hold the handles of those tensors once bound to a tape.
//! All layer functions operate on a leading batch axis.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ------------------------------------------------------------------ init

/// Half-width of the Glorot-uniform interval, `√(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Samples a tensor from `U(−bound, bound)` with the Glorot bound.
pub fn glorot_uniform<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let bound = glorot_bound(fan_in, fan_out);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    t
}

/// Samples `U(−b, b)` with `b = √(6 / ((1 + α²)·fan_in))`, which keeps the
/// activation variance of a leaky-ReLU stack roughly constant with depth.
pub fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, leak: f64, rng: &mut R) -> Tensor {
    let bound = (6.0 / ((1.0 + leak * leak) * fan_in as f64)).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    t
}

// ------------------------------------------------------------------ conv

/// One convolution layer: `m` kernels of shape `w × d`, one bias per kernel.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    /// `[m, w, d]`
    pub weight: Var,
    /// `[m]`
    pub bias: Var,
    /// LeakyReLU leak rate.
    pub alpha: f64,
}

impl ConvParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        channels: usize,
        filters: usize,
        width: usize,
        leak: f64,
        rng: &mut R,
    ) -> Result<()> {
        if channels == 0 || filters == 0 || width == 0 {
            return Err(Error::Config(format!(
                "conv layer `{prefix}` needs positive channels/filters/width"
            )));
        }
        let w = he_uniform(&[filters, width, channels], width * channels, leak, rng);
        store.insert(format!("{prefix}.weight"), w)?;
        store.insert(format!("{prefix}.bias"), Tensor::zeros([filters]))?;
        Ok(())
    }

    pub fn bind(g: &mut Graph, store: &ParameterStore, prefix: &str, alpha: f64) -> Result<Self> {
        Ok(ConvParams {
            weight: g.param(store, &format!("{prefix}.weight"))?,
            bias: g.param(store, &format!("{prefix}.bias"))?,
            alpha,
        })
    }

    pub fn width(&self, g: &Graph) -> usize {
        g.shape(self.weight)[1]
    }
}

/// Left zero-padding for a kernel of width `w`; the remaining `w − 1 − pad`
/// rows are padded on the right, so the output keeps the input length.
pub fn conv_padding(width: usize) -> usize {
    (width - 1) / 2
}

/// `LeakyReLU(W ∗ x + b)` over `[B, p, d]` (or `[p, d]`), returning `[B, p, m]`.
pub fn conv1d(g: &mut Graph, x: Var, params: &ConvParams) -> Result<Var> {
    let pad = conv_padding(params.width(g));
    let pre = g.conv1d(x, params.weight, params.bias, pad)?;
    g.leaky_relu(pre, params.alpha)
}

// ------------------------------------------------------------------ lstm

const LSTM_WEIGHTS: [&str; 8] = [
    "w_ii", "w_if", "w_ig", "w_io", "w_hi", "w_hf", "w_hg", "w_ho",
];
const LSTM_BIASES: [&str; 8] = [
    "b_ii", "b_hi", "b_if", "b_hf", "b_ig", "b_hg", "b_io", "b_ho",
];

/// LSTM weights: input-to-gate `[H, m]`, hidden-to-gate `[H, H]`, and a pair
/// of `[H]` biases per gate.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_ii: Var,
    pub w_if: Var,
    pub w_ig: Var,
    pub w_io: Var,
    pub w_hi: Var,
    pub w_hf: Var,
    pub w_hg: Var,
    pub w_ho: Var,
    pub b_ii: Var,
    pub b_hi: Var,
    pub b_if: Var,
    pub b_hf: Var,
    pub b_ig: Var,
    pub b_hg: Var,
    pub b_io: Var,
    pub b_ho: Var,
}

impl LstmParams {
    /// Glorot weights; biases zero except `b_if = 1`, so the forget biases sum to one.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<()> {
        if input == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "lstm `{prefix}` needs positive input and hidden sizes"
            )));
        }
        for name in LSTM_WEIGHTS {
            let cols = if name.starts_with("w_i") { input } else { hidden };
            let w = glorot_uniform(&[hidden, cols], cols, hidden, rng);
            store.insert(format!("{prefix}.{name}"), w)?;
        }
        for name in LSTM_BIASES {
            let fill = if name == "b_if" { 1.0 } else { 0.0 };
            store.insert(format!("{prefix}.{name}"), Tensor::full([hidden], fill))?;
        }
        Ok(())
    }

    pub fn bind(g: &mut Graph, store: &ParameterStore, prefix: &str) -> Result<Self> {
        let mut p = |n: &str| g.param(store, &format!("{prefix}.{n}"));
        Ok(LstmParams {
            w_ii: p("w_ii")?,
            w_if: p("w_if")?,
            w_ig: p("w_ig")?,
            w_io: p("w_io")?,
            w_hi: p("w_hi")?,
            w_hf: p("w_hf")?,
            w_hg: p("w_hg")?,
            w_ho: p("w_ho")?,
            b_ii: p("b_ii")?,
            b_hi: p("b_hi")?,
            b_if: p("b_if")?,
            b_hf: p("b_hf")?,
            b_ig: p("b_ig")?,
            b_hg: p("b_hg")?,
            b_io: p("b_io")?,
            b_ho: p("b_ho")?,
        })
    }

    pub fn hidden(&self, g: &Graph) -> usize {
        g.shape(self.w_ii)[0]
    }

    pub fn input(&self, g: &Graph) -> usize {
        g.shape(self.w_ii)[1]
    }

    /// Stacks the four gates (order i, f, g, o) into single matrices so each
    /// step needs two products instead of eight.
    fn fuse(&self, g: &mut Graph) -> Result<FusedLstm> {
        let w_x = g.concat(&[self.w_ii, self.w_if, self.w_ig, self.w_io])?;
        let w_h = g.concat(&[self.w_hi, self.w_hf, self.w_hg, self.w_ho])?;
        let b_x = g.concat(&[self.b_ii, self.b_if, self.b_ig, self.b_io])?;
        let b_h = g.concat(&[self.b_hi, self.b_hf, self.b_hg, self.b_ho])?;
        let bias = g.add(b_x, b_h)?;
        Ok(FusedLstm {
            w_x,
            w_h,
            bias,
            hidden: self.hidden(g),
            input: self.input(g),
        })
    }
}

struct FusedLstm {
    w_x: Var,
    w_h: Var,
    bias: Var,
    hidden: usize,
    input: usize,
}

impl FusedLstm {
    /// One step given the already projected input `x·W_xᵀ + b` of shape `[B, 4H]`.
    fn step(&self, g: &mut Graph, x_proj: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let hh = self.hidden;
        let rec = g.matmul_nt(h_prev, self.w_h)?;
        let z = g.add(x_proj, rec)?;
        let zi = g.slice_last(z, 0, hh)?;
        let zf = g.slice_last(z, hh, hh)?;
        let zg = g.slice_last(z, 2 * hh, hh)?;
        let zo = g.slice_last(z, 3 * hh, hh)?;
        let i = g.sigmoid(zi)?;
        let f = g.sigmoid(zf)?;
        let gg = g.tanh(zg)?;
        let o = g.sigmoid(zo)?;
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, gg)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }

    fn check_state(&self, g: &Graph, h: Var, c: Var, batch: usize) -> Result<()> {
        for v in [h, c] {
            if g.shape(v) != [batch, self.hidden] {
                return Err(Error::shape("lstm state", g.shape(v), &[batch, self.hidden]));
            }
        }
        Ok(())
    }
}

/// One LSTM step on `x_row: [B, m]` with state `[B, H]`, returning `(h, c)`.
pub fn lstm_step(
    g: &mut Graph,
    x_row: Var,
    h_prev: Var,
    c_prev: Var,
    params: &LstmParams,
) -> Result<(Var, Var)> {
    let fused = params.fuse(g)?;
    let sx = g.shape(x_row);
    if sx.len() != 2 || sx[1] != fused.input {
        return Err(Error::shape("lstm_step", sx, &[fused.input]));
    }
    fused.check_state(g, h_prev, c_prev, sx[0])?;
    let xp = g.matmul_nt(x_row, fused.w_x)?;
    let xp = g.add_bias(xp, fused.bias)?;
    fused.step(g, xp, h_prev, c_prev)
}

/// Result of unrolling an LSTM over a sequence.
#[derive(Debug, Clone)]
pub struct LstmRun {
    pub h: Var,
    pub c: Var,
    /// Hidden state after every step, each `[B, H]`.
    pub all_h: Vec<Var>,
}

/// Folds [`lstm_step`] over the rows of `seq: [B, p, m]` in time order.
///
/// `init` overrides the zero initial `(h, c)` state.
pub fn lstm_unroll(
    g: &mut Graph,
    seq: Var,
    params: &LstmParams,
    init: Option<(Var, Var)>,
) -> Result<LstmRun> {
    let fused = params.fuse(g)?;
    let s = g.shape(seq).to_vec();
    if s.len() != 3 || s[2] != fused.input {
        return Err(Error::shape("lstm_unroll", &s, &[fused.input]));
    }
    let (batch, steps) = (s[0], s[1]);
    let (mut h, mut c) = match init {
        Some((h0, c0)) => {
            fused.check_state(g, h0, c0, batch)?;
            (h0, c0)
        }
        None => {
            let z = g.constant(Tensor::zeros([batch, fused.hidden]))?;
            (z, z)
        }
    };
    // Project every time step's input at once: [B·p, m] · [4H, m]ᵀ.
    let flat = g.reshape(seq, &[batch * steps, fused.input])?;
    let xp = g.matmul_nt(flat, fused.w_x)?;
    let xp = g.add_bias(xp, fused.bias)?;
    let xp = g.reshape(xp, &[batch, steps, 4 * fused.hidden])?;
    let mut all_h = Vec::with_capacity(steps);
    for t in 0..steps {
        let row = g.time_step(xp, t)?;
        (h, c) = fused.step(g, row, h, c)?;
        all_h.push(h);
    }
    Ok(LstmRun { h, c, all_h })
}

// ----------------------------------------------------------------- dense

/// Per-task alignment layer `r = W h + b`.
#[derive(Debug, Clone, Copy)]
pub struct DenseParams {
    /// `[n, H]`
    pub weight: Var,
    /// `[n]`
    pub bias: Var,
}

impl DenseParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<()> {
        let w = glorot_uniform(&[output, input], input, output, rng);
        store.insert(format!("{prefix}.weight"), w)?;
        store.insert(format!("{prefix}.bias"), Tensor::zeros([output]))?;
        Ok(())
    }

    pub fn bind(g: &mut Graph, store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(DenseParams {
            weight: g.param(store, &format!("{prefix}.weight"))?,
            bias: g.param(store, &format!("{prefix}.bias"))?,
        })
    }
}

/// `h: [B, H] -> [B, n]`.
pub fn dense(g: &mut Graph, h: Var, params: &DenseParams) -> Result<Var> {
    let y = g.matmul_nt(h, params.weight)?;
    g.add_bias(y, params.bias)
}

// --------------------------------------------------------------- dropout

/// Inverted-dropout mask: each entry is `1/(1−rate)` with probability `1−rate`, else 0.
pub fn dropout_mask<R: Rng + ?Sized>(shape: &[usize], rate: f64, rng: &mut R) -> Result<Tensor> {
    check_rate(rate)?;
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        if rng.random::<f64>() < keep {
            *v = scale;
        }
    }
    Ok(t)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout on the tape. In eval mode, or with `rate == 0`, returns `x` itself.
pub fn dropout<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(g.shape(x), rate, rng)?;
    let mask = g.constant(mask)?;
    g.mul(x, mask)
}

/// Tensor-level dropout, for use outside a tape.
pub fn dropout_tensor<R: Rng + ?Sized>(x: &Tensor, rate: f64, mode: Mode, rng: &mut R) -> Result<Tensor> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.shape(), rate, rng)?;
    x.zip_map(&mask, |a, b| a * b)
}

#[cfg(test)]
mod tests;

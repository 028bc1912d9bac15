use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::grad_check;
use crate::autodiff::sigmoid;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = r.random_range(-1.0..1.0);
    }
    t
}

fn conv_store(w: Tensor, b: Tensor) -> ParameterStore {
    let mut s = ParameterStore::new();
    s.insert("c.weight", w).unwrap();
    s.insert("c.bias", b).unwrap();
    s
}

fn run_conv(x: &Tensor, store: &ParameterStore, alpha: f64) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let p = ConvParams::bind(&mut g, store, "c", alpha).unwrap();
    let y = conv1d(&mut g, xv, &p).unwrap();
    g.value(y).clone()
}

/// Direct convolution with explicit zero padding, independent of im2col.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, alpha: f64) -> Tensor {
    let (p, d) = (x.shape()[0], x.shape()[1]);
    let (m, width) = (w.shape()[0], w.shape()[1]);
    let pad = (width - 1) / 2;
    let mut out = Tensor::zeros([p, m]);
    for t in 0..p {
        for k in 0..m {
            let mut acc = b.data()[k];
            for j in 0..width {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src >= p as isize {
                    continue;
                }
                for c in 0..d {
                    acc += w.at(&[k, j, c]) * x.at(&[src as usize, c]);
                }
            }
            out.set(&[t, k], if acc >= 0.0 { acc } else { alpha * acc });
        }
    }
    out
}

#[test]
fn conv_zero_input_leaves_activated_bias() {
    let mut r = rng(1);
    let w = random_tensor(&[3, 4, 2], &mut r);
    let b = Tensor::vector(vec![0.7, -2.0, 0.0]).unwrap();
    let y = run_conv(&Tensor::zeros([5, 2]), &conv_store(w, b), 0.01);
    for t in 0..5 {
        assert_eq!(y.row(t), &[0.7, -0.02, 0.0]);
    }
}

#[test]
fn conv_width_one_sums_channels() {
    let w = Tensor::new([1, 1, 2], vec![1.0, 1.0]).unwrap();
    let y = run_conv(
        &Tensor::new([1, 2], vec![2.0, 3.0]).unwrap(),
        &conv_store(w, Tensor::zeros([1])),
        0.01,
    );
    assert_eq!(y.data(), &[5.0]);
}

#[test]
fn conv_center_tap_is_identity() {
    let w = Tensor::new([1, 3, 1], vec![0.0, 1.0, 0.0]).unwrap();
    let x = Tensor::new([3, 1], vec![1.0, 0.0, 0.0]).unwrap();
    let y = run_conv(&x, &conv_store(w, Tensor::zeros([1])), 0.01);
    assert_eq!(y.data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn conv_channel_mismatch_is_an_error() {
    let store = conv_store(Tensor::zeros([2, 3, 4]), Tensor::zeros([2]));
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([5, 3])).unwrap();
    let p = ConvParams::bind(&mut g, &store, "c", 0.01).unwrap();
    assert!(matches!(conv1d(&mut g, x, &p), Err(Error::Shape { .. })));
}

#[test]
fn conv_matches_direct_oracle_for_odd_and_even_widths() {
    let mut r = rng(2);
    for width in 1..=7 {
        let x = random_tensor(&[9, 3], &mut r);
        let w = random_tensor(&[4, width, 3], &mut r);
        let b = random_tensor(&[4], &mut r);
        let got = run_conv(&x, &conv_store(w.clone(), b.clone()), 0.01);
        let want = conv_oracle(&x, &w, &b, 0.01);
        assert!(got.max_abs_diff(&want) < 1e-12, "width {width}");
    }
}

#[test]
fn batched_conv_equals_per_sample_conv() {
    let mut r = rng(3);
    let x = random_tensor(&[3, 6, 2], &mut r);
    let store = conv_store(random_tensor(&[4, 3, 2], &mut r), random_tensor(&[4], &mut r));
    let batched = run_conv(&x, &store, 0.01);
    for b in 0..3 {
        let single = run_conv(&x.index_first(b), &store, 0.01);
        assert_eq!(batched.index_first(b).data(), single.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_preserves_length(p in 1usize..12, width in 1usize..9, seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = random_tensor(&[p, 2], &mut r);
        let store = conv_store(random_tensor(&[3, width, 2], &mut r), Tensor::zeros([3]));
        let y = run_conv(&x, &store, 0.01);
        prop_assert_eq!(y.shape(), &[p, 3]);
    }

    #[test]
    fn conv_is_linear_when_leak_is_one(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = random_tensor(&[7, 2], &mut r);
        let y = random_tensor(&[7, 2], &mut r);
        let bias = random_tensor(&[3], &mut r);
        let store = conv_store(random_tensor(&[3, 4, 2], &mut r), bias.clone());
        let unbias = |t: Tensor| {
            let mut t = t;
            for row in t.data_mut().chunks_mut(3) {
                for (v, bi) in row.iter_mut().zip(bias.data()) {
                    *v -= bi;
                }
            }
            t
        };
        let combo = x.zip_map(&y, |u, v| a * u + b * v).unwrap();
        let lhs = unbias(run_conv(&combo, &store, 1.0));
        let cx = unbias(run_conv(&x, &store, 1.0));
        let cy = unbias(run_conv(&y, &store, 1.0));
        let rhs = cx.zip_map(&cy, |u, v| a * u + b * v).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }
}

// ------------------------------------------------------------------ lstm

fn lstm_store(input: usize, hidden: usize, seed: u64) -> ParameterStore {
    let mut s = ParameterStore::new();
    LstmParams::init(&mut s, "l", input, hidden, &mut rng(seed)).unwrap();
    s
}

fn zero_lstm_store(input: usize, hidden: usize) -> ParameterStore {
    let mut s = lstm_store(input, hidden, 0);
    for (_, t) in s.iter_mut() {
        t.data_mut().fill(0.0);
    }
    s
}

fn randomize(store: &mut ParameterStore, seed: u64) {
    let mut r = rng(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
    }
}

fn run_step(x: &Tensor, h: &Tensor, c: &Tensor, store: &ParameterStore) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let hv = g.constant(h.clone()).unwrap();
    let cv = g.constant(c.clone()).unwrap();
    let p = LstmParams::bind(&mut g, store, "l").unwrap();
    let (h, c) = lstm_step(&mut g, xv, hv, cv, &p).unwrap();
    (g.value(h).clone(), g.value(c).clone())
}

/// Scalar transcription of the six LSTM equations.
fn lstm_step_oracle(x: &[f64], h: &[f64], c: &[f64], s: &ParameterStore) -> (Vec<f64>, Vec<f64>) {
    let hidden = h.len();
    let gate = |wi: &str, wh: &str, bi: &str, bh: &str, j: usize| -> f64 {
        let wi = s.get(&format!("l.{wi}")).unwrap();
        let wh = s.get(&format!("l.{wh}")).unwrap();
        let mut acc = s.get(&format!("l.{bi}")).unwrap().data()[j] + s.get(&format!("l.{bh}")).unwrap().data()[j];
        for (k, xk) in x.iter().enumerate() {
            acc += wi.at(&[j, k]) * xk;
        }
        for (k, hk) in h.iter().enumerate() {
            acc += wh.at(&[j, k]) * hk;
        }
        acc
    };
    let mut h_new = vec![0.0; hidden];
    let mut c_new = vec![0.0; hidden];
    for j in 0..hidden {
        let i = sigmoid(gate("w_ii", "w_hi", "b_ii", "b_hi", j));
        let f = sigmoid(gate("w_if", "w_hf", "b_if", "b_hf", j));
        let gg = gate("w_ig", "w_hg", "b_ig", "b_hg", j).tanh();
        let o = sigmoid(gate("w_io", "w_ho", "b_io", "b_ho", j));
        c_new[j] = f * c[j] + i * gg;
        h_new[j] = o * c_new[j].tanh();
    }
    (h_new, c_new)
}

#[test]
fn lstm_zero_params_zero_state_stays_zero() {
    let store = zero_lstm_store(3, 4);
    let x = Tensor::new([1, 3], vec![0.4, -2.0, 7.0]).unwrap();
    let (h, c) = run_step(&x, &Tensor::zeros([1, 4]), &Tensor::zeros([1, 4]), &store);
    assert_eq!(h, Tensor::zeros([1, 4]));
    assert_eq!(c, Tensor::zeros([1, 4]));
}

#[test]
fn lstm_saturated_forget_gate_keeps_memory() {
    let mut store = lstm_store(2, 3, 5);
    store.get_mut("l.b_if").unwrap().data_mut().fill(1e3);
    let x = Tensor::new([1, 2], vec![0.3, -0.8]).unwrap();
    let h0 = Tensor::new([1, 3], vec![0.1, 0.2, -0.3]).unwrap();
    let c0 = Tensor::new([1, 3], vec![0.5, -1.5, 2.0]).unwrap();
    let (_, c) = run_step(&x, &h0, &c0, &store);
    let (_, c_oracle) = lstm_step_oracle(x.data(), h0.data(), c0.data(), &store);
    // with f = 1 the update is c_prev + i ⊙ g; the oracle's i ⊙ g is c − c_prev
    for j in 0..3 {
        let i_g = c_oracle[j] - c0.data()[j];
        assert!((c.data()[j] - (c0.data()[j] + i_g)).abs() < 1e-12);
    }
}

#[test]
fn lstm_step_matches_scalar_oracle() {
    for seed in 0..10 {
        let mut store = lstm_store(3, 5, seed);
        randomize(&mut store, seed + 100);
        let mut r = rng(seed + 200);
        let x = random_tensor(&[1, 3], &mut r);
        let h0 = random_tensor(&[1, 5], &mut r);
        let c0 = random_tensor(&[1, 5], &mut r);
        let (h, c) = run_step(&x, &h0, &c0, &store);
        let (ho, co) = lstm_step_oracle(x.data(), h0.data(), c0.data(), &store);
        for j in 0..5 {
            assert!((h.data()[j] - ho[j]).abs() < 1e-12);
            assert!((c.data()[j] - co[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn lstm_dimension_mismatch_is_an_error() {
    let store = lstm_store(3, 4, 0);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 2])).unwrap();
    let h = g.constant(Tensor::zeros([1, 4])).unwrap();
    let p = LstmParams::bind(&mut g, &store, "l").unwrap();
    assert!(lstm_step(&mut g, x, h, h, &p).is_err());
}

#[test]
fn lstm_init_forget_biases_sum_to_one() {
    let s = lstm_store(3, 4, 9);
    let sum: Vec<f64> = s
        .get("l.b_if")
        .unwrap()
        .data()
        .iter()
        .zip(s.get("l.b_hf").unwrap().data())
        .map(|(a, b)| a + b)
        .collect();
    assert_eq!(sum, vec![1.0; 4]);
    for name in ["b_ii", "b_hi", "b_ig", "b_hg", "b_io", "b_ho"] {
        assert!(s.get(&format!("l.{name}")).unwrap().data().iter().all(|&v| v == 0.0));
    }
}

fn run_unroll(seq: &Tensor, store: &ParameterStore) -> (Tensor, Tensor, usize) {
    let mut g = Graph::new();
    let s = g.constant(seq.clone()).unwrap();
    let p = LstmParams::bind(&mut g, store, "l").unwrap();
    let run = lstm_unroll(&mut g, s, &p, None).unwrap();
    (g.value(run.h).clone(), g.value(run.c).clone(), run.all_h.len())
}

#[test]
fn unroll_single_step_reduces_to_step() {
    let mut store = lstm_store(2, 3, 1);
    randomize(&mut store, 11);
    let x = Tensor::new([1, 1, 2], vec![0.7, -0.1]).unwrap();
    let (h, c, n) = run_unroll(&x, &store);
    let (hs, cs) = run_step(
        &x.clone().reshape([1, 2]).unwrap(),
        &Tensor::zeros([1, 3]),
        &Tensor::zeros([1, 3]),
        &store,
    );
    assert_eq!(n, 1);
    assert!(h.max_abs_diff(&hs) < 1e-15 && c.max_abs_diff(&cs) < 1e-15);
}

#[test]
fn unroll_zero_params_gives_zero_state() {
    let store = zero_lstm_store(2, 3);
    let seq = random_tensor(&[2, 6, 2], &mut rng(4));
    let (h, _, _) = run_unroll(&seq, &store);
    assert_eq!(h, Tensor::zeros([2, 3]));
}

#[test]
fn unroll_is_order_sensitive() {
    let mut store = lstm_store(2, 4, 2);
    randomize(&mut store, 12);
    let seq = random_tensor(&[1, 5, 2], &mut rng(5));
    let mut rev = seq.clone();
    for t in 0..5 {
        for c in 0..2 {
            rev.set(&[0, t, c], seq.at(&[0, 4 - t, c]));
        }
    }
    let (h1, _, _) = run_unroll(&seq, &store);
    let (h2, _, _) = run_unroll(&rev, &store);
    assert!(h1.max_abs_diff(&h2) > 1e-6);
}

#[test]
fn unroll_matches_repeated_oracle_steps() {
    let mut store = lstm_store(3, 4, 3);
    randomize(&mut store, 13);
    let seq = random_tensor(&[1, 6, 3], &mut rng(6));
    let (h, c, _) = run_unroll(&seq, &store);
    let (mut ho, mut co) = (vec![0.0; 4], vec![0.0; 4]);
    for t in 0..6 {
        let row: Vec<f64> = (0..3).map(|k| seq.at(&[0, t, k])).collect();
        (ho, co) = lstm_step_oracle(&row, &ho, &co, &store);
    }
    for j in 0..4 {
        assert!((h.data()[j] - ho[j]).abs() < 1e-12);
        assert!((c.data()[j] - co[j]).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lstm_hidden_state_is_bounded(seed in 0u64..10_000, scale in 0.1f64..3.0) {
        let mut store = lstm_store(2, 3, seed);
        randomize(&mut store, seed);
        let x = random_tensor(&[1, 2], &mut rng(seed + 1)).map(|v| v * scale);
        let h0 = random_tensor(&[1, 3], &mut rng(seed + 2));
        let c0 = random_tensor(&[1, 3], &mut rng(seed + 3)).map(|v| v * scale);
        let (h, _) = run_step(&x, &h0, &c0, &store);
        prop_assert!(h.data().iter().all(|v| v.abs() < 1.0));
        // far into saturation the float result may round to exactly ±1
        let (h, _) = run_step(&x.map(|v| v * 1e3), &h0, &c0.map(|v| v * 1e3), &store);
        prop_assert!(h.data().iter().all(|v| v.abs() <= 1.0));
    }
}

// ----------------------------------------------------------------- dense

fn run_dense(h: &Tensor, w: Tensor, b: Tensor) -> Tensor {
    let mut s = ParameterStore::new();
    s.insert("d.weight", w).unwrap();
    s.insert("d.bias", b).unwrap();
    let mut g = Graph::new();
    let hv = g.constant(h.clone()).unwrap();
    let p = DenseParams::bind(&mut g, &s, "d").unwrap();
    let y = dense(&mut g, hv, &p).unwrap();
    g.value(y).clone()
}

#[test]
fn dense_identity_zero_input_and_oracle() {
    let h = Tensor::new([1, 3], vec![0.2, -1.0, 4.0]).unwrap();
    assert_eq!(run_dense(&h, Tensor::eye(3), Tensor::zeros([3])).data(), h.data());

    let b = Tensor::vector(vec![1.0, -2.0]).unwrap();
    let y = run_dense(&Tensor::zeros([1, 3]), random_tensor(&[2, 3], &mut rng(1)), b.clone());
    assert_eq!(y.data(), b.data());

    let mut r = rng(7);
    let w = random_tensor(&[2, 3], &mut r);
    let b = random_tensor(&[2], &mut r);
    let y = run_dense(&h, w.clone(), b.clone());
    for i in 0..2 {
        let want: f64 = (0..3).map(|j| w.at(&[i, j]) * h.data()[j]).sum::<f64>() + b.data()[i];
        assert!((y.data()[i] - want).abs() < 1e-14);
    }
}

// --------------------------------------------------------------- dropout

#[test]
fn dropout_identities() {
    let x = random_tensor(&[4, 5], &mut rng(1));
    let mut r = rng(2);
    assert_eq!(dropout_tensor(&x, 0.0, Mode::Train, &mut r).unwrap(), x);
    assert_eq!(dropout_tensor(&x, 0.0, Mode::Eval, &mut r).unwrap(), x);
    assert_eq!(dropout_tensor(&x, 0.7, Mode::Eval, &mut r).unwrap(), x);

    let mut g = Graph::new();
    let v = g.constant(x.clone()).unwrap();
    assert_eq!(dropout(&mut g, v, 0.5, Mode::Eval, &mut r).unwrap(), v);
}

#[test]
fn dropout_rejects_bad_rates() {
    let x = Tensor::ones([3]);
    assert!(dropout_tensor(&x, 1.0, Mode::Train, &mut rng(0)).is_err());
    assert!(dropout_tensor(&x, -0.1, Mode::Eval, &mut rng(0)).is_err());
}

#[test]
fn dropout_preserves_mean_in_expectation() {
    let mut r = rng(3);
    let mut x = Tensor::zeros([100_000]);
    for v in x.data_mut() {
        *v = r.random_range(0.5..1.5);
    }
    let y = dropout_tensor(&x, 0.5, Mode::Train, &mut r).unwrap();
    let (mx, my) = (x.sum() / 1e5, y.sum() / 1e5);
    assert!(((my - mx) / mx).abs() < 0.02, "{mx} vs {my}");
    assert!(y.data().iter().zip(x.data()).all(|(a, b)| *a == 0.0 || *a == 2.0 * b));
}

#[test]
fn dropout_is_deterministic_for_a_seed() {
    let x = random_tensor(&[50], &mut rng(1));
    let a = dropout_tensor(&x, 0.3, Mode::Train, &mut rng(9)).unwrap();
    let b = dropout_tensor(&x, 0.3, Mode::Train, &mut rng(9)).unwrap();
    assert_eq!(a.data(), b.data());
}

// ------------------------------------------------------------------ init

#[test]
fn glorot_bound_and_range() {
    assert_eq!(glorot_bound(3, 3), 1.0);
    let t = glorot_uniform(&[1000], 3, 3, &mut rng(0));
    assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn glorot_is_deterministic_and_has_uniform_variance() {
    let a = glorot_uniform(&[100_000], 10, 20, &mut rng(42));
    let b = glorot_uniform(&[100_000], 10, 20, &mut rng(42));
    assert_eq!(a, b);
    let bound = glorot_bound(10, 20);
    let mean = a.sum() / 1e5;
    let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1e5;
    let want = bound * bound / 3.0;
    assert!(((var - want) / want).abs() < 0.05, "{var} vs {want}");
}

// ------------------------------------------------------- gradient checks

#[test]
fn layer_gradients_pass_finite_difference_check() {
    let mut store = ParameterStore::new();
    let mut r = rng(21);
    ConvParams::init(&mut store, "conv", 2, 3, 4, 0.01, &mut r).unwrap();
    LstmParams::init(&mut store, "lstm", 3, 4, &mut r).unwrap();
    DenseParams::init(&mut store, "dense", 4, 2, &mut r).unwrap();
    // non-zero biases so every bias path is exercised
    randomize(&mut store, 22);
    let x = random_tensor(&[2, 5, 2], &mut rng(23));
    let report = grad_check(&store, 1e-5, |g, s| {
        let xv = g.constant(x.clone())?;
        let conv = ConvParams::bind(g, s, "conv", 0.01)?;
        let lstm = LstmParams::bind(g, s, "lstm")?;
        let d = DenseParams::bind(g, s, "dense")?;
        let c = conv1d(g, xv, &conv)?;
        let run = lstm_unroll(g, c, &lstm, None)?;
        let y = dense(g, run.h, &d)?;
        let sq = g.square(y)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn he_uniform_variance_and_depth_stability() {
    let t = he_uniform(&[100_000], 24, 0.0, &mut rng(5));
    let var = t.data().iter().map(|v| v * v).sum::<f64>() / 1e5;
    assert!((var - 2.0 / 24.0).abs() / (2.0 / 24.0) < 0.05, "{var}");

    // ten stacked layers neither explode nor vanish the signal
    let mut store = ParameterStore::new();
    let mut r = rng(6);
    for j in 0..10 {
        let d = if j == 0 { 2 } else { 16 };
        ConvParams::init(&mut store, &format!("c{j}"), d, 16, 6, 0.01, &mut r).unwrap();
    }
    let x = random_tensor(&[32, 40, 2], &mut rng(7));
    let mut g = Graph::new();
    let mut h = g.constant(x.clone()).unwrap();
    for j in 0..10 {
        let p = ConvParams::bind(&mut g, &store, &format!("c{j}"), 0.01).unwrap();
        h = conv1d(&mut g, h, &p).unwrap();
    }
    let rms = |t: &Tensor| (t.data().iter().map(|v| v * v).sum::<f64>() / t.data().len() as f64).sqrt();
    let ratio = rms(g.value(h)) / rms(&x);
    assert!((0.1..10.0).contains(&ratio), "{ratio}");
}

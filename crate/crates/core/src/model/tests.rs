use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::grad_check;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        n: 2,
        p: 8,
        horizon: 4,
        fsp: 2,
        fst: 1,
        filters: 4,
        kernel_width: 3,
        layers_per_stage: 2,
        hidden: 6,
        dropout: 0.0,
        ar_stride: 1,
        leak: 0.01,
        variant,
        seed: 7,
    }
}

fn random_window(p: usize, n: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let mut t = Tensor::zeros([p, n]);
    for v in t.data_mut() {
        *v = r.random_range(-1.0..1.0);
    }
    t
}

fn zero_where(model: &mut Mlcnn, pred: impl Fn(&str) -> bool) {
    for (name, t) in model.params_mut().iter_mut() {
        if pred(name) {
            t.data_mut().fill(0.0);
        }
    }
}

fn eval(model: &Mlcnn, x: &Tensor) -> ForecastOutput {
    model.forward(x, Mode::Eval, &mut rng(0)).unwrap()
}

#[test]
fn config_constraints() {
    let mut c = ModelConfig::with_variables(3);
    c.validate().unwrap();
    assert_eq!(c.tasks(), 5);
    assert_eq!(c.main_index(), 2);
    assert_eq!(
        (0..5).map(|k| c.target_offset(k)).collect::<Vec<_>>(),
        [1, 2, 3, 4, 5]
    );
    c.fsp = 3;
    assert!(c.validate().is_err(), "fsp·fst = h must be rejected");
    c.fsp = 1;
    c.fst = 3;
    assert!(c.validate().is_err());
    let short = ModelConfig {
        p: 5,
        ar_stride: 1,
        ..ModelConfig::with_variables(1)
    };
    // the farthest of five tasks reads 5·1 + 1 rows
    assert!(short.validate().is_err());
    let ok = ModelConfig { p: 6, ..short };
    ok.validate().unwrap();
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
    }
    assert!("bogus".parse::<Variant>().is_err());
}

#[test]
fn default_chain_has_ten_conv_layers() {
    let model = Mlcnn::new(ModelConfig::with_variables(3)).unwrap();
    let convs = model
        .params()
        .names()
        .filter(|n| n.starts_with("conv.") && n.ends_with(".weight"))
        .count();
    assert_eq!(convs, 10);

    let mut g = Graph::inference();
    let x = g.constant(Tensor::zeros([1, 48, 3])).unwrap();
    model.forward_graph(&mut g, x, Mode::Eval, &mut rng(0)).unwrap();
    let conv_nodes = g.vars().filter(|&v| g.op_name(v) == "conv1d")
        .count();
    assert_eq!(conv_nodes, 10);
}

#[test]
fn zero_conv_weights_give_zero_construals() {
    let mut model = Mlcnn::new(toy_config(Variant::Full)).unwrap();
    zero_where(&mut model, |n| n.starts_with("conv."));
    let mut g = Graph::inference();
    let x = g.constant(random_window(8, 2, 1).reshape([1, 8, 2]).unwrap()).unwrap();
    let (raw, _) = model.build_construals(&mut g, x, Mode::Eval, &mut rng(0)).unwrap();
    assert_eq!(raw.len(), 5);
    for c in raw {
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }
}

/// Direct zero-padded convolution followed by LeakyReLU.
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
                if (0..p as isize).contains(&src) {
                    for c in 0..d {
                        acc += w.at(&[k, j, c]) * x.at(&[src as usize, c]);
                    }
                }
            }
            out.set(&[t, k], if acc >= 0.0 { acc } else { alpha * acc });
        }
    }
    out
}

#[test]
fn third_construal_composes_three_stages() {
    let cfg = toy_config(Variant::Full);
    let model = Mlcnn::new(cfg.clone()).unwrap();
    let x = random_window(8, 2, 3);
    let mut cur = x.clone();
    for stage in 0..3 {
        for layer in 0..cfg.layers_per_stage {
            let name = stage_conv(stage, layer);
            let w = model.params().get(&format!("{name}.weight")).unwrap();
            let b = model.params().get(&format!("{name}.bias")).unwrap();
            cur = conv_oracle(&cur, w, b, cfg.leak);
        }
    }
    let mut g = Graph::inference();
    let xv = g.constant(x.reshape([1, 8, 2]).unwrap()).unwrap();
    let (raw, _) = model.build_construals(&mut g, xv, Mode::Eval, &mut rng(0)).unwrap();
    assert!(g.value(raw[2]).clone().reshape([8, 4]).unwrap().max_abs_diff(&cur) < 1e-12);
}

/// Number of conv1d nodes among the ancestors of `v`.
fn conv_ancestors(g: &Graph, v: Var) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    let mut stack = vec![v];
    let mut count = 0;
    while let Some(u) = stack.pop() {
        if !seen.insert(u) {
            continue;
        }
        if g.op_name(u) == "conv1d" {
            count += 1;
        }
        stack.extend(g.inputs_of(u));
    }
    count
}

#[test]
fn farther_targets_use_deeper_construals() {
    for variant in [Variant::Full, Variant::NoLevels] {
        let cfg = toy_config(variant);
        let model = Mlcnn::new(cfg.clone()).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros([1, 8, 2])).unwrap();
        let out = model.forward_graph(&mut g, x, Mode::Eval, &mut rng(0)).unwrap();
        let depths: Vec<usize> = out.construals.iter().map(|&c| conv_ancestors(&g, c)).collect();
        let offsets: Vec<usize> = (0..cfg.tasks()).map(|k| cfg.target_offset(k)).collect();
        for k in 1..depths.len() {
            assert!(offsets[k - 1] < offsets[k]);
            assert!(depths[k - 1] < depths[k], "{variant}: {depths:?}");
        }
        assert_eq!(depths, [2, 4, 6, 8, 10]);
    }
}

fn unroll_values(model: &Mlcnn, g: &mut Graph, seq: Var) -> (Tensor, Tensor) {
    let p = LstmParams::bind(g, model.params(), SHARED_LSTM).unwrap();
    let run = nn::lstm_unroll(g, seq, &p, None).unwrap();
    (g.value(run.h).clone(), g.value(run.c).clone())
}

#[test]
fn shared_encoder_shares_weights_across_tasks() {
    let model = Mlcnn::new(toy_config(Variant::Full)).unwrap();
    let mut g = Graph::inference();
    let a = g.constant(random_window(8, 4, 1).reshape([1, 8, 4]).unwrap()).unwrap();
    let b = g.constant(random_window(8, 4, 2).reshape([1, 8, 4]).unwrap()).unwrap();
    let enc = model.encode_shared(&mut g, &[a, b, a, b, a]).unwrap();
    assert_eq!(g.value(enc[0].0), g.value(enc[2].0));
    assert_eq!(g.value(enc[0].1), g.value(enc[4].1));
    assert_ne!(g.value(enc[0].0), g.value(enc[1].0));
    // each task equals a plain unroll of the shared LSTM
    let (h, c) = unroll_values(&model, &mut g, b);
    assert_eq!(g.value(enc[3].0), &h);
    assert_eq!(g.value(enc[3].1), &c);
    assert!(model.encode_shared(&mut g, &[a, b]).is_err());
}

#[test]
fn zero_shared_params_zero_encoder_output() {
    let mut model = Mlcnn::new(toy_config(Variant::Full)).unwrap();
    zero_where(&mut model, |n| n.starts_with("shared_lstm."));
    let mut g = Graph::inference();
    let a = g.constant(random_window(8, 4, 1).reshape([1, 8, 4]).unwrap()).unwrap();
    for (h, _) in model.encode_shared(&mut g, &[a; 5]).unwrap() {
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn decoder_with_zero_params_halves_the_cell_each_step() {
    let cfg = toy_config(Variant::Full);
    let mut model = Mlcnn::new(cfg.clone()).unwrap();
    zero_where(&mut model, |n| n.starts_with("main_lstm."));
    let mut g = Graph::inference();
    let seq = g.constant(random_window(8, 4, 5).reshape([1, 8, 4]).unwrap()).unwrap();
    let c0: Vec<f64> = (0..6).map(|j| 50.0 * (j as f64 - 2.5)).collect();
    let h0 = g.constant(Tensor::new([1, 6], vec![0.3; 6]).unwrap()).unwrap();
    let c0v = g.constant(Tensor::new([1, 6], c0.clone()).unwrap()).unwrap();
    let h = model.decode_main(&mut g, seq, Some((h0, c0v))).unwrap();
    for (j, &got) in g.value(h).data().iter().enumerate() {
        // scalar recurrence c ← c/2 for p steps, then h = ½·tanh(c)
        let mut c = c0[j];
        for _ in 0..cfg.p {
            c *= 0.5;
        }
        assert!((got - 0.5 * c.tanh()).abs() < 1e-15);
    }
    let z = g.constant(Tensor::zeros([1, 6])).unwrap();
    let h = model.decode_main(&mut g, seq, Some((z, z))).unwrap();
    assert!(g.value(h).data().iter().all(|&v| v == 0.0));
}

#[test]
fn decoder_equals_unroll_with_overridden_state() {
    let model = Mlcnn::new(toy_config(Variant::Full)).unwrap();
    let mut g = Graph::inference();
    let seq = g.constant(random_window(8, 4, 6).reshape([1, 8, 4]).unwrap()).unwrap();
    let h0 = g.constant(random_window(1, 6, 7)).unwrap();
    let c0 = g.constant(random_window(1, 6, 8)).unwrap();
    let got = model.decode_main(&mut g, seq, Some((h0, c0))).unwrap();
    let p = LstmParams::bind(&mut g, model.params(), MAIN_LSTM).unwrap();
    let want = nn::lstm_unroll(&mut g, seq, &p, Some((h0, c0))).unwrap().h;
    assert_eq!(g.value(got), g.value(want));

    let nm = Mlcnn::new(toy_config(Variant::NoMain)).unwrap();
    assert!(nm.decode_main(&mut g, seq, None).is_err());
}

fn set_ar(model: &mut Mlcnn, k: usize, w: &[f64], b: f64) {
    model
        .params_mut()
        .get_mut(&format!("ar.t{k}.weight"))
        .unwrap()
        .data_mut()
        .copy_from_slice(w);
    model.params_mut().get_mut(&format!("ar.t{k}.bias")).unwrap().data_mut()[0] = b;
}

fn ar_value(model: &Mlcnn, x: &Tensor, k: usize) -> Tensor {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone()).unwrap();
    let y = model.ar_head(&mut g, xv, k).unwrap();
    g.value(y).clone()
}

#[test]
fn ar_head_examples() {
    let mut model = Mlcnn::new(toy_config(Variant::Full)).unwrap();
    let x = random_window(8, 2, 9);
    // q = 1: two lags
    set_ar(&mut model, 0, &[1.0, 0.0], 0.0);
    assert_eq!(ar_value(&model, &x, 0).data(), x.row(7));

    set_ar(&mut model, 4, &[0.0; 6], 3.5);
    assert_eq!(ar_value(&model, &x, 4).data(), &[3.5, 3.5]);

    // q = 2, s_ar = 1: three lags over the tail [..., 1, 2, 4]
    set_ar(&mut model, 1, &[0.5, 0.3, 0.2], 0.0);
    let mut tail = Tensor::zeros([8, 1]);
    tail.data_mut()[5..].copy_from_slice(&[1.0, 2.0, 4.0]);
    let mut narrow = toy_config(Variant::Full);
    narrow.n = 1;
    let mut m1 = Mlcnn::new(narrow).unwrap();
    set_ar(&mut m1, 1, &[0.5, 0.3, 0.2], 0.0);
    let v = ar_value(&m1, &tail, 1).item();
    assert!((v - 2.8).abs() < 1e-15, "{v}");

    let short = random_window(2, 2, 1);
    let mut g = Graph::inference();
    let xv = g.constant(short).unwrap();
    assert!(model.ar_head(&mut g, xv, 1).is_err());
}

#[test]
fn ar_head_is_scale_covariant_without_bias() {
    let model = Mlcnn::new(toy_config(Variant::Full)).unwrap();
    let x = random_window(8, 2, 10);
    for c in [-3.0, 0.1, 10.0, 1e4] {
        for k in 0..5 {
            let base = ar_value(&model, &x, k);
            let scaled = ar_value(&model, &x.map(|v| c * v), k);
            for (a, b) in base.data().iter().zip(scaled.data()) {
                assert!((c * a - b).abs() <= 1e-12 * (c * a).abs().max(1.0));
            }
        }
    }
}

#[test]
fn output_shape_and_additivity() {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::with_variables(3)
    };
    let model = Mlcnn::new(cfg).unwrap();
    let x = random_window(48, 3, 11);
    let out = eval(&model, &x);
    assert_eq!(out.y_hat.shape(), &[5, 3]);
    assert_eq!(out.main_index, 2);
    let sum = out.r_d.zip_map(&out.r_l, |a, b| a + b).unwrap();
    assert_eq!(sum, out.y_hat);
    let diff = out.y_hat.zip_map(&out.r_d, |a, b| a - b).unwrap();
    assert!(diff.max_abs_diff(&out.r_l) < 1e-15);
}

#[test]
fn no_ar_variant_output_is_neural_only() {
    let model = Mlcnn::new(toy_config(Variant::NoAr)).unwrap();
    assert!(!model.params().names().any(|n| n.starts_with("ar.")));
    let out = eval(&model, &random_window(8, 2, 12));
    assert_eq!(out.y_hat, out.r_d);
    assert!(out.r_l.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_network_with_passthrough_ar_repeats_last_value() {
    let mut model = Mlcnn::new(toy_config(Variant::Full)).unwrap();
    zero_where(&mut model, |n| !n.starts_with("ar."));
    for k in 0..5 {
        let mut w = vec![0.0; k + 2];
        w[0] = 1.0;
        set_ar(&mut model, k, &w, 0.0);
    }
    let x = random_window(8, 2, 13);
    let out = eval(&model, &x);
    for k in 0..5 {
        assert_eq!(out.y_hat.row(k), x.row(7));
    }
}

#[test]
fn weight_sharing_and_per_task_dense_isolation() {
    let model = Mlcnn::new(toy_config(Variant::Full)).unwrap();
    let x = random_window(8, 2, 14);
    let base = eval(&model, &x);

    let mut shared = model.clone();
    shared.params_mut().get_mut("shared_lstm.w_hi").unwrap().data_mut()[0] += 0.5;
    let out = eval(&shared, &x);
    for k in 0..5 {
        assert_ne!(out.r_d.row(k), base.r_d.row(k), "task {k} must see the shared change");
    }

    let mut dense = model.clone();
    dense.params_mut().get_mut("dense.t1.bias").unwrap().data_mut()[0] += 1.0;
    let out = eval(&dense, &x);
    for k in 0..5 {
        if k == 1 {
            assert_ne!(out.r_d.row(k), base.r_d.row(k));
        } else {
            assert_eq!(out.r_d.row(k), base.r_d.row(k));
        }
    }
}

#[test]
fn no_shared_variant_isolates_main_task() {
    let model = Mlcnn::new(toy_config(Variant::NoShared)).unwrap();
    assert!(!model.params().names().any(|n| n.starts_with("shared_lstm")));
    assert_eq!(model.params().get("dense.t0.weight").unwrap().shape(), &[2, 4]);
    let x = random_window(8, 2, 15);
    let base = eval(&model, &x);
    let mut other = model.clone();
    for (name, t) in other.params_mut().iter_mut() {
        // everything that only feeds auxiliary tasks
        if name.starts_with("conv.s3") || name.starts_with("conv.s4") || name.starts_with("dense.t0") {
            t.data_mut().iter_mut().for_each(|v| *v += 0.3);
        }
    }
    let out = eval(&other, &x);
    assert_eq!(out.r_d.row(2), base.r_d.row(2));
    assert_ne!(out.r_d.row(4), base.r_d.row(4));
}

#[test]
fn no_main_variant_reads_encoder_directly() {
    let model = Mlcnn::new(toy_config(Variant::NoMain)).unwrap();
    assert!(!model.params().names().any(|n| n.starts_with("main_lstm")));
    let x = random_window(8, 2, 16);
    let out = eval(&model, &x);
    let mut g = Graph::inference();
    let xv = g.constant(x.clone().reshape([1, 8, 2]).unwrap()).unwrap();
    let (_, dropped) = model.build_construals(&mut g, xv, Mode::Eval, &mut rng(0)).unwrap();
    let enc = model.encode_shared(&mut g, &dropped).unwrap();
    let r = model.dense(&mut g, enc[2].0, 2).unwrap();
    assert_eq!(g.value(r).data(), out.r_d.row(2));
    assert!(model.dense(&mut g, enc[2].0, 5).is_err());
}

#[test]
fn independent_stacks_have_cumulative_depths() {
    let model = Mlcnn::new(toy_config(Variant::NoLevels)).unwrap();
    for k in 0..5 {
        let layers = model
            .params()
            .names()
            .filter(|n| n.starts_with(&format!("conv.t{k}.")) && n.ends_with(".weight"))
            .count();
        assert_eq!(layers, 2 * (k + 1));
    }
}

#[test]
fn batched_forward_matches_single_windows() {
    let model = Mlcnn::new(toy_config(Variant::Full)).unwrap();
    let a = random_window(8, 2, 17);
    let b = random_window(8, 2, 18);
    let batch = Tensor::new([2, 8, 2], [a.data(), b.data()].concat()).unwrap();
    let out = eval(&model, &batch);
    assert_eq!(out.y_hat.shape(), &[2, 5, 2]);
    assert!(out.y_hat.index_first(0).max_abs_diff(&eval(&model, &a).y_hat) < 1e-13);
    assert!(out.y_hat.index_first(1).max_abs_diff(&eval(&model, &b).y_hat) < 1e-13);
}

#[test]
fn dropout_only_in_train_mode() {
    let cfg = ModelConfig {
        dropout: 0.5,
        ..toy_config(Variant::Full)
    };
    let model = Mlcnn::new(cfg).unwrap();
    let x = random_window(8, 2, 19);
    let e1 = model.forward(&x, Mode::Eval, &mut rng(1)).unwrap();
    let e2 = model.forward(&x, Mode::Eval, &mut rng(2)).unwrap();
    assert_eq!(e1, e2);
    let t1 = model.forward(&x, Mode::Train, &mut rng(1)).unwrap();
    let t1b = model.forward(&x, Mode::Train, &mut rng(1)).unwrap();
    let t2 = model.forward(&x, Mode::Train, &mut rng(2)).unwrap();
    assert_eq!(t1, t1b);
    assert_ne!(t1.r_d, t2.r_d);
}

#[test]
fn every_variant_passes_gradient_check() {
    for variant in Variant::ALL {
        let model = Mlcnn::new(toy_config(variant)).unwrap();
        let x = random_window(8, 2, 20).reshape([1, 8, 2]).unwrap();
        let y = random_window(5, 2, 21).reshape([1, 5, 2]).unwrap();
        let cfg = model.config().clone();
        let report = grad_check(model.params(), 1e-5, |g, store| {
            let m = Mlcnn {
                config: cfg.clone(),
                params: store.clone(),
            };
            let xv = g.constant(x.clone())?;
            let yv = g.constant(y.clone())?;
            let out = m.forward_graph(g, xv, Mode::Eval, &mut rng(0))?;
            let d = g.sub(out.y_hat, yv)?;
            let sq = g.square(d)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{variant}: {report:?}");
    }
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Mlcnn::new(toy_config(Variant::Full)).unwrap();
    model.save(&path).unwrap();
    let back = Mlcnn::load(toy_config(Variant::Full), &path).unwrap();
    let x = random_window(8, 2, 22);
    assert_eq!(eval(&model, &x), eval(&back, &x));
    for ((_, a), (_, b)) in model.params().iter().zip(back.params().iter()) {
        assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    let mut missing: ParameterStore = model
        .params()
        .iter()
        .filter(|(n, _)| n.as_str() != "dense.t3.bias")
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    checkpoint::save_params(&missing, &path).unwrap();
    let err = Mlcnn::load(toy_config(Variant::Full), &path).unwrap_err().to_string();
    assert!(err.contains("dense.t3.bias"), "{err}");

    missing.insert("dense.t3.bias", Tensor::zeros([7])).unwrap();
    checkpoint::save_params(&missing, &path).unwrap();
    let err = Mlcnn::load(toy_config(Variant::Full), &path).unwrap_err().to_string();
    assert!(err.contains("shape"), "{err}");
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;
use crate::datapipe::{assemble_datasets, bin_case, Dataset, PreparedCase, SplitManifest, Standardizer};
use crate::imbalance::{objective_on_graph, ObjectiveWeights};
use crate::pkpd::{pkpd_pseudo_bis, Patient, Sex};
use crate::synth::{generate_case, SynthConfig};

fn tiny(steps: usize) -> ModelConfig {
    ModelConfig {
        lstm_hidden: 4,
        grn_hidden: 4,
        num_heads: 2,
        bottleneck: [4, 4, 1],
        seq_len: steps,
        ..ModelConfig::default()
    }
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn random_batch(size: usize, steps: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>();
    Batch {
        size,
        steps,
        ppf: v(size * steps),
        rftn: v(size * steps),
        pseudo: v(size * steps),
        statics: v(size * STATIC_DIM),
        history: v(size * steps),
        target: v(size),
        weight: vec![1.0, 3.0, 0.5, 2.0][..size].to_vec(),
    }
}

fn forward_value(cfg: &ModelConfig, w: &ModelWeights, b: &Batch) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let p = Params::attach(&mut g, w, false);
    let inputs = b.attach_inputs(&mut g).unwrap();
    let out = model_forward(&mut g, &p, cfg, inputs).unwrap();
    (g.value(out.pred).data().to_vec(), g.value(out.corrected).data().to_vec())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.constant(Array::vector(vec![-1.0]).unwrap());
    let y = activation(&mut g, Activation::Elu, &[x]).unwrap();
    assert!((g.value(y).data()[0] - (-0.63212)).abs() < 1e-5);

    let a = g.constant(Array::vector(vec![2.0, -4.0]).unwrap());
    let z = g.constant(Array::vector(vec![0.0, 0.0]).unwrap());
    let y = activation(&mut g, Activation::Glu, &[a, z]).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -2.0]);

    let x = g.constant(Array::vector(vec![1.0, 3.0]).unwrap());
    let gamma = g.constant(Array::vector(vec![1.0, 1.0]).unwrap());
    let beta = g.constant(Array::vector(vec![0.0, 0.0]).unwrap());
    let y = activation(&mut g, Activation::LayerNorm, &[x, gamma, beta]).unwrap();
    let out = g.value(y).data();
    assert!((out[0] + 1.0).abs() < 1e-4 && (out[1] - 1.0).abs() < 1e-4);

    let short = g.constant(Array::vector(vec![1.0]).unwrap());
    assert!(matches!(
        activation(&mut g, Activation::Glu, &[a, short]),
        Err(Error::ShapeMismatch(_))
    ));
    assert!(activation(&mut g, Activation::Elu, &[a, z]).is_err());
}

/// Cell equations written out one scalar at a time.
fn scalar_cell(x: &[f64], h: &[f64], c: &[f64], w_ih: &[f64], w_hh: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let pre = |j: usize| {
        let mut z = b[j];
        for (i, xi) in x.iter().enumerate() {
            z += xi * w_ih[i * 4 * n + j];
        }
        for (k, hk) in h.iter().enumerate() {
            z += hk * w_hh[k * 4 * n + j];
        }
        z
    };
    let mut h2 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    for u in 0..n {
        let i = sigmoid(pre(u));
        let f = sigmoid(pre(n + u));
        let gg = pre(2 * n + u).tanh();
        let o = sigmoid(pre(3 * n + u));
        c2[u] = f * c[u] + i * gg;
        h2[u] = o * c2[u].tanh();
    }
    (h2, c2)
}

#[test]
fn lstm_step_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (inp, hid) = (3, 4);
    let x = random_array(&mut rng, &[1, inp], 1.0);
    let h = random_array(&mut rng, &[1, hid], 1.0);
    let c = random_array(&mut rng, &[1, hid], 1.0);
    let w_ih = random_array(&mut rng, &[inp, 4 * hid], 0.8);
    let w_hh = random_array(&mut rng, &[hid, 4 * hid], 0.8);
    let b = random_array(&mut rng, &[4 * hid], 0.5);
    let mut g = Graph::new();
    let vars: Vec<Var> = [&x, &h, &c, &w_ih, &w_hh, &b].iter().map(|a| g.constant((*a).clone())).collect();
    let (h2, c2) = lstm_step(&mut g, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5]).unwrap();
    let (eh, ec) = scalar_cell(x.data(), h.data(), c.data(), w_ih.data(), w_hh.data(), b.data());
    for u in 0..hid {
        assert!((g.value(h2).data()[u] - eh[u]).abs() < 1e-12);
        assert!((g.value(c2).data()[u] - ec[u]).abs() < 1e-12);
    }
}

#[test]
fn lstm_step_degenerate_cases() {
    let hid = 3;
    let mut g = Graph::new();
    let x = g.constant(Array::matrix(1, 1, vec![2.5]).unwrap());
    let h = g.constant(Array::matrix(1, hid, vec![0.3, -0.2, 0.9]).unwrap());
    let c = g.constant(Array::matrix(1, hid, vec![0.7, -1.1, 0.05]).unwrap());
    let w_ih = g.constant(Array::zeros(&[1, 4 * hid]));
    let w_hh = g.constant(Array::zeros(&[hid, 4 * hid]));
    let zero_b = g.constant(Array::zeros(&[4 * hid]));
    let zero_c = g.constant(Array::zeros(&[1, hid]));
    let (h2, c2) = lstm_step(&mut g, x, h, zero_c, w_ih, w_hh, zero_b).unwrap();
    assert!(g.value(h2).data().iter().chain(g.value(c2).data()).all(|&v| v == 0.0));

    let mut bias = vec![0.0; 4 * hid];
    bias[..hid].fill(-100.0);
    bias[hid..2 * hid].fill(100.0);
    let bias = g.constant(Array::vector(bias).unwrap());
    let (_, c2) = lstm_step(&mut g, x, h, c, w_ih, w_hh, bias).unwrap();
    for (a, b) in g.value(c2).data().iter().zip([0.7, -1.1, 0.05]) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn unrolled_cells_match_fused_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, t, hid) = (2, 6, 3);
    let x = random_array(&mut rng, &[b, t, 1], 1.0);
    let w_ih = random_array(&mut rng, &[1, 4 * hid], 0.9);
    let w_hh = random_array(&mut rng, &[hid, 4 * hid], 0.9);
    let bias = random_array(&mut rng, &[4 * hid], 0.4);
    let mut g = Graph::new();
    let (xv, wi, wh, bv) = (
        g.constant(x),
        g.constant(w_ih),
        g.constant(w_hh),
        g.constant(bias),
    );
    let fused = g.lstm(xv, wi, wh, bv).unwrap();
    let mut h = g.constant(Array::zeros(&[b, hid]));
    let mut c = g.constant(Array::zeros(&[b, hid]));
    for step in 0..t {
        let xs = g.slice(xv, 1, step, step + 1).unwrap();
        let xs = g.reshape(xs, &[b, 1]).unwrap();
        (h, c) = lstm_step(&mut g, xs, h, c, wi, wh, bv).unwrap();
        let f = g.slice(fused, 1, step, step + 1).unwrap();
        for (u, v) in g.value(f).data().iter().zip(g.value(h).data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_contract() {
    let cfg = tiny(8);
    let w = init_weights(&cfg, 1).unwrap();
    let b = random_batch(1, 8, 2);
    let run = |w: &ModelWeights, b: &Batch| {
        let mut g = Graph::new();
        let p = Params::attach(&mut g, w, false);
        let [ppf, rftn, pseudo, _] = b.attach_inputs(&mut g).unwrap();
        let e = encoder_forward(&mut g, &p, ppf, rftn, pseudo).unwrap();
        (
            g.value(e.states).clone(),
            g.value(e.corrected).clone(),
            g.value(e.last).clone(),
        )
    };
    let (z, y, last) = run(&w, &b);
    assert_eq!(z.shape(), &[1, 8, 12]);
    assert_eq!(y.shape(), &[1, 8]);
    assert_eq!(last.shape(), &[1, 12]);
    assert_eq!(last.data(), &z.data()[7 * 12..]);

    let mut b2 = b.clone();
    b2.rftn[3] += 0.5;
    let (z2, _, _) = run(&w, &b2);
    let (mut owned, mut other) = (0.0f64, 0.0f64);
    for step in 0..8 {
        for col in 0..12 {
            let d = (z.data()[step * 12 + col] - z2.data()[step * 12 + col]).abs();
            if (4..8).contains(&col) {
                owned = owned.max(d);
            } else {
                other = other.max(d);
            }
        }
    }
    assert!(owned > 0.0);
    assert_eq!(other, 0.0);

    let mut zero = w.clone();
    for t in zero.tensors.values_mut() {
        *t = Array::zeros(t.shape());
    }
    zero.tensors.insert("enc.fc3.b".into(), Array::vector(vec![0.7]).unwrap());
    let (_, y, _) = run(&zero, &b);
    assert!(y.data().iter().all(|&v| v == 0.7));
}

fn grn_value(w: &ModelWeights, a: &Array, c: &Array) -> Array {
    let mut g = Graph::new();
    let p = Params::attach(&mut g, w, false);
    let (av, cv) = (g.constant(a.clone()), g.constant(c.clone()));
    let out = grn_forward(&mut g, &p, av, cv).unwrap();
    g.value(out).clone()
}

#[test]
fn grn_contract() {
    let cfg = ModelConfig {
        lstm_hidden: 4,
        grn_hidden: 8,
        num_heads: 2,
        bottleneck: [4, 4, 1],
        ..ModelConfig::default()
    };
    let mut w = init_weights(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_array(&mut rng, &[1, 180, 8], 1.0);
    let c = Array::matrix(1, 4, vec![-0.5, 1.0, 0.2, 0.1]).unwrap();
    let out = grn_value(&w, &a, &c);
    assert_eq!(out.shape(), &[1, 180, 8]);

    let older = Array::matrix(1, 4, vec![1.5, 1.0, 0.2, 0.1]).unwrap();
    let diff = grn_value(&w, &a, &older)
        .data()
        .iter()
        .zip(out.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff > 0.0);

    w.tensors.insert("grn.gate.b".into(), Array::full(&[8], -100.0));
    let closed = grn_value(&w, &a, &c);
    for row in 0..180 {
        let r = &a.data()[row * 8..(row + 1) * 8];
        let mu = r.iter().sum::<f64>() / 8.0;
        let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 8.0;
        for j in 0..8 {
            let want = (r[j] - mu) / (var + LAYER_NORM_EPS).sqrt();
            assert!((closed.data()[row * 8 + j] - want).abs() < 1e-12);
        }
    }
}

fn attention_value(cfg: &ModelConfig, w: &ModelWeights, z: &Array) -> (Array, Array) {
    let mut g = Graph::new();
    let p = Params::attach(&mut g, w, false);
    let zv = g.constant(z.clone());
    let a = interpretable_attention(&mut g, &p, cfg, zv).unwrap();
    (g.value(a.output).clone(), g.value(a.weights).clone())
}

fn mat(a: &[f64], rows: usize, inner: usize, b: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for k in 0..inner {
            for j in 0..cols {
                out[i * cols + j] += a[i * inner + k] * b[k * cols + j];
            }
        }
    }
    out
}

#[test]
fn single_head_matches_textbook_attention() {
    let cfg = ModelConfig {
        grn_hidden: 4,
        num_heads: 1,
        ..tiny(5)
    };
    let w = init_weights(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (t, d) = (5, 4);
    let z = random_array(&mut rng, &[1, t, d], 1.0);
    let (out, _) = attention_value(&cfg, &w, &z);

    let get = |n: &str| w.get(n).unwrap().data().to_vec();
    let q = mat(z.data(), t, d, &get("attn.q0"), d);
    let k = mat(z.data(), t, d, &get("attn.k0"), d);
    let v = mat(z.data(), t, d, &get("attn.v"), d);
    let mut attn = vec![0.0; t * t];
    for i in 0..t {
        let scores: Vec<f64> = (0..=i)
            .map(|j| (0..d).map(|m| q[i * d + m] * k[j * d + m]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
        for (j, s) in scores.iter().enumerate() {
            attn[i * t + j] = (s - mx).exp() / z;
        }
    }
    let h = mat(&attn, t, t, &v, d);
    let want = mat(&h, t, d, &get("attn.out"), d);
    for (a, b) in out.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_is_causal_and_row_stochastic() {
    let cfg = ModelConfig {
        grn_hidden: 8,
        num_heads: 4,
        ..tiny(12)
    };
    let w = init_weights(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (t, d) = (12, 8);
    let z = random_array(&mut rng, &[2, t, d], 2.0);
    let (out, weights) = attention_value(&cfg, &w, &z);
    for b in 0..2 {
        for i in 0..t {
            let row = &weights.data()[(b * t + i) * t..(b * t + i + 1) * t];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row[i + 1..].iter().all(|&v| v == 0.0));
        }
    }

    let t0 = 6;
    let mut z2 = z.clone();
    for j in 0..d {
        z2.data_mut()[t0 * d + j] += 1.0;
    }
    let (out2, _) = attention_value(&cfg, &w, &z2);
    assert_eq!(&out.data()[..t0 * d], &out2.data()[..t0 * d]);
    assert_ne!(&out.data()[t0 * d..t * d], &out2.data()[t0 * d..t * d]);

    let mut g = Graph::new();
    let p = Params::attach(&mut g, &w, false);
    let zv = g.constant(z.clone());
    let last = attention_last(&mut g, &p, &cfg, zv).unwrap();
    let last = g.value(last).data();
    for b in 0..2 {
        let full = &out.data()[(b * t + t - 1) * d..(b * t + t) * d];
        for (x, y) in last[b * d..(b + 1) * d].iter().zip(full) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn one_step_attention_is_value_path() {
    let cfg = ModelConfig {
        grn_hidden: 6,
        num_heads: 3,
        ..tiny(1)
    };
    let w = init_weights(&cfg, 11).unwrap();
    let z = Array::new(vec![1, 1, 6], vec![0.3, -0.1, 0.8, 1.2, -0.7, 0.05]).unwrap();
    let (out, weights) = attention_value(&cfg, &w, &z);
    assert_eq!(weights.data(), &[1.0]);
    let v = mat(z.data(), 1, 6, w.get("attn.v").unwrap().data(), 2);
    let want = mat(&v, 1, 2, w.get("attn.out").unwrap().data(), 6);
    for (a, b) in out.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn init_is_seeded_and_bounded() {
    let cfg = tiny(8);
    let a = init_weights(&cfg, 17).unwrap();
    assert_eq!(a, init_weights(&cfg, 17).unwrap());
    assert_ne!(a, init_weights(&cfg, 18).unwrap());
    a.check(&cfg).unwrap();
    for (name, shape, init) in cfg.layout() {
        let t = a.get(&name).unwrap();
        assert_eq!(t.shape(), shape.as_slice());
        match init {
            Init::Uniform(fan_in) => {
                let lim = 1.0 / (fan_in as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= lim), "{name}");
            }
            Init::Zero => assert!(t.data().iter().all(|&v| v == 0.0)),
            Init::One => assert!(t.data().iter().all(|&v| v == 1.0)),
            Init::LstmBias(h) => {
                assert!(t.data()[h..2 * h].iter().all(|&v| v == 1.0));
                assert_eq!(t.data().iter().sum::<f64>(), h as f64);
            }
        }
    }
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = ModelConfig {
        grn_hidden: 10,
        num_heads: 4,
        ..ModelConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = ModelConfig {
        bottleneck: [8, 4, 2],
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = ModelConfig {
        dropout: 1.0,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn forward_is_finite_and_deterministic() {
    let cfg = tiny(8);
    let w = init_weights(&cfg, 21).unwrap();
    let mut b = random_batch(2, 8, 22);
    // Second sample copies the first.
    for v in [&mut b.ppf, &mut b.rftn, &mut b.pseudo] {
        let (x, y) = v.split_at_mut(8);
        y.copy_from_slice(x);
    }
    let (x, y) = b.statics.split_at_mut(4);
    y.copy_from_slice(x);
    let (pred, corrected) = forward_value(&cfg, &w, &b);
    assert_eq!(pred.len(), 2);
    assert_eq!(corrected.len(), 16);
    assert!(pred.iter().chain(&corrected).all(|v| v.is_finite()));
    assert_eq!(pred[0], pred[1]);
}

/// Loss of the full model as a function of every parameter tensor.
fn loss_from_params(g: &mut Graph, vars: &[Var], cfg: &ModelConfig, b: &Batch) -> Result<Var> {
    let names = cfg.layout().into_iter().map(|(n, _, _)| n);
    let p = Params::from_vars(names, vars);
    let inputs = b.attach_inputs(g)?;
    let out = model_forward(g, &p, cfg, inputs)?;
    let history = g.constant(Array::new(vec![b.size, b.steps], b.history.clone())?);
    let target = g.constant(Array::vector(b.target.clone())?);
    let weight = g.constant(Array::vector(b.weight.clone())?);
    objective_on_graph(g, out.corrected, history, out.pred, target, weight, b.size, ObjectiveWeights::default())
}

#[test]
fn full_model_gradient_check() {
    let cfg = tiny(8);
    let w = init_weights(&cfg, 31).unwrap();
    let b = random_batch(2, 8, 32);
    let inputs: Vec<Array> = cfg
        .layout()
        .iter()
        .map(|(n, _, _)| {
            // Nonzero biases so no path starts exactly at an ELU kink.
            let t = w.get(n).unwrap();
            if n.ends_with(".b") {
                Array::new(t.shape().to_vec(), t.data().iter().enumerate().map(|(i, _)| 0.05 * (i as f64 + 1.0)).collect()).unwrap()
            } else {
                t.clone()
            }
        })
        .collect();
    let worst = grad_check(|g, vars| loss_from_params(g, vars, &cfg, &b), &inputs, 1e-4).unwrap();
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn downstream_zeroing_isolates_second_encoder() {
    let cfg = tiny(8);
    let mut w = init_weights(&cfg, 41).unwrap();
    let (h, gh) = (cfg.lstm_hidden, cfg.grn_hidden);
    let mut zero_rows = |name: &str, rows: std::ops::Range<usize>| {
        let t = w.tensors.get_mut(name).unwrap();
        let cols = t.shape()[1];
        for r in rows {
            t.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
        }
    };
    zero_rows("enc.fc1.w", h..2 * h);
    zero_rows("proj.w", h..2 * h);
    zero_rows("dec.fc1.w", gh + h..gh + 2 * h);
    let b = random_batch(2, 8, 42);
    let mut g = Graph::new();
    let p = Params::attach(&mut g, &w, true);
    let names: Vec<String> = cfg.layout().into_iter().map(|(n, _, _)| n).collect();
    let vars: Vec<Var> = names.iter().map(|n| p.get(n).unwrap()).collect();
    let loss = loss_from_params(&mut g, &vars, &cfg, &b).unwrap();
    let grads = g.backward(loss).unwrap();
    let norm = |n: &str| {
        grads
            .get(p.get(n).unwrap())
            .unwrap()
            .data()
            .iter()
            .map(|v| v.abs())
            .sum::<f64>()
    };
    for suffix in ["w_ih", "w_hh", "bias"] {
        assert_eq!(norm(&format!("lstm_rftn.{suffix}")), 0.0);
        assert!(norm(&format!("lstm_ppf.{suffix}")) > 0.0);
        assert!(norm(&format!("lstm_pseudo.{suffix}")) > 0.0);
    }
}

#[test]
fn adam_first_step_moves_each_parameter_by_lr() {
    let mut w = ModelWeights {
        tensors: [("x".to_string(), Array::vector(vec![1.0, -2.0, 0.5]).unwrap())].into(),
    };
    let grads = [("x".to_string(), vec![0.5, -40.0, 3e3])].into();
    let lr = 0.03;
    Adam::default().step(&mut w, &grads, lr).unwrap();
    let moved: Vec<f64> = w.tensors["x"].data().iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| a - b).collect();
    for (m, sign) in moved.iter().zip([-1.0, 1.0, -1.0]) {
        assert!((m - sign * lr).abs() < 1e-7 * lr, "{m}");
    }
}

#[test]
fn lr_schedule_decays_every_ten_epochs() {
    let c = TrainConfig::default();
    assert_eq!(lr_for_epoch(&c, 0), 0.03);
    assert_eq!(lr_for_epoch(&c, 9), 0.03);
    assert!((lr_for_epoch(&c, 10) - 0.003).abs() < 1e-15);
    assert!((lr_for_epoch(&c, 20) - 0.0003).abs() < 1e-16);
}

fn small_dataset(stride: usize) -> (Dataset, Norms) {
    let cfg = SynthConfig {
        n_cases: 1,
        duration_s: (2400, 2400),
        ..SynthConfig::default()
    };
    let case = generate_case(&cfg, 0).unwrap();
    let series = bin_case(&case.raw).unwrap();
    let pseudo = pkpd_pseudo_bis(&series.patient, &series).unwrap();
    let manifest = SplitManifest {
        train: vec![series.case_id.clone()],
        val: vec![],
        test: vec![],
    };
    let a = assemble_datasets(&[(series, pseudo)], &manifest, 0.03, stride, None).unwrap();
    (a.train, a.norms)
}

#[test]
fn fit_is_seeded_and_reports_objectives() {
    let (data, norms) = small_dataset(200);
    let cfg = tiny(180);
    let train = TrainConfig {
        epochs: 3,
        batch_size: 4,
        micro_batch: 3,
        ..TrainConfig::default()
    };
    let a = fit(&data, &norms, &cfg, &train, None).unwrap();
    let b = fit(&data, &norms, &cfg, &train, None).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.log.len(), 3);
    assert_eq!(a.log[2].lr, 0.03);
    assert!(a.final_objective.is_finite() && a.initial_objective.is_finite());
    let direct = evaluate_objective(&data, &norms, &cfg, &train, &a.weights, a.table.as_ref()).unwrap();
    assert_eq!(direct, a.final_objective);

    let warm = fit(&data, &norms, &cfg, &TrainConfig { epochs: 1, ..train.clone() }, Some(a.weights.clone())).unwrap();
    assert_eq!(warm.initial_objective, a.final_objective);
    let wrong = ModelConfig { lstm_hidden: 5, ..tiny(180) };
    assert!(fit(&data, &norms, &cfg, &train, Some(init_weights(&wrong, 1).unwrap())).is_err());
}

#[test]
fn divergence_reports_epoch_and_batch() {
    let (data, norms) = small_dataset(200);
    let train = TrainConfig {
        epochs: 2,
        batch_size: 4,
        lr: 1e300,
        ..TrainConfig::default()
    };
    let err = fit(&data, &norms, &tiny(180), &train, None).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 1 }), "{err}");
}

/// A case whose inputs are constant, so the network can only learn one
/// output value; labels alternate between a common and a rare level.
fn two_cluster_case() -> PreparedCase {
    let t_end = 400;
    let bis: Vec<f64> = (0..=t_end).map(|s| if s % 10 == 3 { 75.0 } else { 40.0 }).collect();
    let bins = bis.len().div_ceil(10);
    PreparedCase {
        case_id: "two-cluster".into(),
        patient: Patient::new(50, Sex::Female, 60.0, 165.0).unwrap(),
        start_s: 0,
        statics: [0.0; 4],
        ppf_rate: vec![0.0; bins],
        rftn_rate: vec![0.0; bins],
        pseudo: vec![0.0; bins],
        pseudo_raw: vec![98.0; bins],
        bis,
        t_induction_start: 0,
        t_propofol_stop: t_end - 100,
        t_end,
        pad_ppf: 0.0,
        pad_rftn: 0.0,
        pad_pseudo: 0.0,
    }
}

#[test]
fn reweighting_lowers_rare_cluster_error() {
    let data = Dataset {
        cases: vec![two_cluster_case()],
        stride: 1,
    };
    let targets = data.targets();
    let unit = Standardizer { mean: 0.0, scale: 1.0 };
    let norms = Norms {
        ppf_rate: unit,
        rftn_rate: unit,
        bis: Standardizer::fit(data.cases[0].bis.iter().copied()),
        age: unit,
        sex: unit,
        weight: unit,
        height: unit,
    };
    let cfg = tiny(180);
    let rare_mae = |reweight: bool| {
        let train = TrainConfig {
            epochs: 12,
            batch_size: 50,
            micro_batch: 50,
            reweight,
            ..TrainConfig::default()
        };
        let rep = fit(&data, &norms, &cfg, &train, None).unwrap();
        let model = Model {
            config: cfg.clone(),
            norms,
            weights: rep.weights,
        };
        let samples: Vec<_> = data.index().iter().map(|&(c, t)| data.cases[c].sample(t, None).unwrap()).collect();
        let pred = predict_samples(&model, &samples, 64).unwrap();
        let rare: Vec<f64> = pred
            .iter()
            .zip(&targets)
            .filter(|(_, &y)| y == 75.0)
            .map(|(p, y)| (p - y).abs())
            .collect();
        rare.iter().sum::<f64>() / rare.len() as f64
    };
    let (with, without) = (rare_mae(true), rare_mae(false));
    assert!(with < without, "weighted {with} vs unweighted {without}");
}

#[test]
fn model_file_round_trip() {
    let (_, norms) = small_dataset(200);
    let cfg = tiny(180);
    let model = Model {
        config: cfg.clone(),
        norms,
        weights: init_weights(&cfg, 51).unwrap(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    save_model(&model, &path).unwrap();
    assert_eq!(load_model(&path).unwrap(), model);

    let bytes = model_to_bytes(&model).unwrap();
    let mut bumped = bytes.clone();
    bumped[8] = 9;
    assert!(matches!(model_from_bytes(&bumped), Err(Error::Format(_))));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(model_from_bytes(&trailing).is_err());
    assert!(model_from_bytes(&bytes[..bytes.len() - 5]).is_err());
    let mut missing = model.clone();
    missing.weights.tensors.remove("attn.v");
    assert!(model_from_bytes(&model_to_bytes(&missing).unwrap()).is_err());
}

//! Analog layers and whole trials checked against hand-computed references.

mod common;

use analog_nn::analog::{NormSpec, PrecisionSpec, RoundingMode, TransformChain};
use analog_nn::autodiff::Graph;
use analog_nn::data::{Dataset, SplitPlan};
use analog_nn::nn::{build_model, incoherent_split, Activation, AnalogLinear, LayerChains, ModelSpec};
use analog_nn::rng::RngStream;
use analog_nn::sweep::{run_sweep, run_trial, Bits, SweepOptions, TrialConfig, TrialData, TrialOptions, TrialResult};
use analog_nn::tensor::Tensor;
use common::{assert_close, naive_linear, random_tensor, rp_oracle, toy_images, write_toy_mnist};

fn toy_dataset(n: usize, seed: u64) -> Dataset {
    let (px, labels) = toy_images(n, seed);
    let img = Tensor::new(vec![n, 1, 28, 28], px.iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
    Dataset::from_tensor("toy", &img, labels).unwrap()
}

fn toy_data() -> TrialData {
    TrialData::new(&toy_dataset(400, 1), toy_dataset(100, 2), &SplitPlan::default()).unwrap()
}

fn quick(cfg: TrialConfig) -> TrialConfig {
    TrialConfig { epochs: 2, batch_size: 32, lr: 0.01, ..cfg }
}

fn same_outcome(a: &TrialResult, b: &TrialResult) {
    assert_eq!(a.config_hash, b.config_hash);
    assert_eq!(a.status, b.status);
    assert_eq!(a.history, b.history);
    assert_eq!(a.max_eval_acc.to_bits(), b.max_eval_acc.to_bits());
    assert_eq!(a.official_test_acc.to_bits(), b.official_test_acc.to_bits());
}

#[test]
fn straight_through_gradient_matches_quantized_reference() {
    let (n, k, m) = (4, 5, 3);
    let mut rng = RngStream::new(10, 0);
    let chains = LayerChains {
        weight: TransformChain::weight(
            NormSpec::clamp(),
            Some((PrecisionSpec::new(2).unwrap(), RoundingMode::Deterministic)),
        ),
        ..LayerChains::default()
    };
    let mut layer = AnalogLinear::new(k, m, &chains, &mut rng).unwrap();
    let mut raw_w = random_tensor(&[m, k], -0.95, 0.95, &mut rng).into_data();
    raw_w[4] = 1.3;
    raw_w[7] = -2.0;
    let raw_w = Tensor::new(vec![m, k], raw_w).unwrap();
    let raw_b = Tensor::vector(vec![0.2, -0.6, 0.45]).unwrap();
    layer.weight.set_raw(raw_w.clone()).unwrap();
    layer.bias.set_raw(raw_b.clone()).unwrap();
    let x = random_tensor(&[n, k], -1.0, 1.0, &mut rng);
    let labels = [0, 2, 1, 2];

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (logits, [wl, bl]) = layer.forward(&mut g, xv, &RngStream::new(0, 0)).unwrap();
    let loss = g.cross_entropy(logits, &labels).unwrap();
    let grads = g.backward(loss).unwrap();

    // Reference: quantize by exhaustive search, then the textbook softmax
    // cross-entropy gradient with respect to the quantized weights.
    let q = |v: f64| rp_oracle(v.clamp(-1.0, 1.0), 3);
    let wq: Vec<f64> = raw_w.data().iter().map(|&v| q(v)).collect();
    let bq: Vec<f64> = raw_b.data().iter().map(|&v| q(v)).collect();
    let z = naive_linear(x.data(), &wq, &bq, n, k, m);
    assert_close(g.value(logits).data(), &z, 1e-12, "logits");
    let mut dz = vec![0.0; n * m];
    for i in 0..n {
        let row = &z[i * m..(i + 1) * m];
        let s: f64 = row.iter().map(|v| v.exp()).sum();
        for o in 0..m {
            dz[i * m + o] = (row[o].exp() / s - if labels[i] == o { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    let mut dw = vec![0.0; m * k];
    for o in 0..m {
        for j in 0..k {
            // The clamp passes gradient only inside [-1, 1].
            let inside = raw_w.data()[o * k + j].abs() <= 1.0;
            dw[o * k + j] = if inside { (0..n).map(|i| dz[i * m + o] * x.data()[i * k + j]).sum() } else { 0.0 };
        }
    }
    let db: Vec<f64> = (0..m).map(|o| (0..n).map(|i| dz[i * m + o]).sum()).collect();
    assert_close(grads.get(wl).unwrap().data(), &dw, 1e-12, "dW");
    assert_close(grads.get(bl).unwrap().data(), &db, 1e-12, "db");
    assert_eq!(grads.get(wl).unwrap().data()[4], 0.0);
    assert_eq!(grads.get(wl).unwrap().data()[7], 0.0);
}

#[test]
fn digital_model_matches_plain_mlp() {
    let spec = ModelSpec::preset("3linear", [1, 28, 28], Activation::Relu).unwrap();
    let mut model = build_model(&spec, &LayerChains::default(), &RngStream::new(3, 0)).unwrap();
    let x = random_tensor(&[6, 1, 28, 28], 0.0, 1.0, &mut RngStream::new(4, 0));
    let logits = model.predict(&x, &RngStream::new(5, 0)).unwrap();

    let params = model.params();
    let mut h = x.data().to_vec();
    let mut width = 784;
    for (li, pair) in params.chunks(2).enumerate() {
        let (w, b) = (pair[0].raw(), pair[1].raw());
        let out = w.shape()[0];
        h = naive_linear(&h, w.data(), b.data(), 6, width, out);
        if li + 1 < params.len() / 2 {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        width = out;
    }
    assert_eq!(width, 10);
    assert_close(logits.data(), &h, 1e-12, "logits");
}

#[test]
fn zero_noise_full_precision_is_bit_identical_to_no_chains() {
    let data = toy_data();
    let plain = quick(TrialConfig::default());
    let inert = quick(TrialConfig { ep_y: 0.3, ep_w: 0.6, ..TrialConfig::default() });
    assert!(inert.layer_chains().unwrap().is_digital());
    let a = run_trial(&plain, &data, &TrialOptions::default()).unwrap();
    let b = run_trial(&inert, &data, &TrialOptions::default()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.official_test_acc.to_bits(), b.official_test_acc.to_bits());

    // Also with an explicit zero σ and the clipped rule, which has nothing to act on.
    let zero = quick(TrialConfig { sigma_y: Some(0.0), sigma_w: Some(0.0), straight_through: "clipped".into(), ..TrialConfig::default() });
    let c = run_trial(&zero, &data, &TrialOptions::default()).unwrap();
    assert_eq!(a.history, c.history);
}

#[test]
fn trials_are_deterministic() {
    let data = toy_data();
    let cfg = quick(TrialConfig {
        model: "2linear".into(),
        bits_w: Bits::N(3),
        bits_y: Bits::N(4),
        rp_mode: "srp".into(),
        norm_y: "clamp".into(),
        norm_w: "clamp".into(),
        ep_y: 0.25,
        ep_w: 0.1,
        ..TrialConfig::default()
    });
    let a = run_trial(&cfg, &data, &TrialOptions::default()).unwrap();
    let b = run_trial(&cfg, &data, &TrialOptions::default()).unwrap();
    same_outcome(&a, &b);
    let other = run_trial(&TrialConfig { seed: 1, ..cfg }, &data, &TrialOptions::default()).unwrap();
    assert_ne!(a.history, other.history);
}

#[test]
fn parallel_sweep_matches_serial() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_mnist(dir.path(), 300, 100);
    let base = quick(TrialConfig { epochs: 1, rp_mode: "srp".into(), ep_y: 0.2, norm_y: "clamp".into(), ..TrialConfig::default() });
    let trials: Vec<TrialConfig> = [(2, 2), (4, 2), (2, 4), (6, 6)]
        .into_iter()
        .map(|(w, y)| TrialConfig { bits_w: Bits::N(w), bits_y: Bits::N(y), ..base.clone() })
        .collect();
    let rows = |jobs: usize| {
        let out = dir.path().join(format!("jobs{jobs}.csv"));
        let opts = SweepOptions { jobs, data_dir: dir.path().to_path_buf(), out: out.clone(), log_dir: None };
        let s = run_sweep(&trials, &opts).unwrap();
        assert_eq!(s.ok, 4);
        let mut rows = analog_nn::sweep::results::read_rows(&out).unwrap();
        rows.sort_by(|a, b| a.config_hash.cmp(&b.config_hash));
        rows.into_iter().map(|r| (r.config_hash, r.history, r.max_eval_acc, r.official_test_acc)).collect::<Vec<_>>()
    };
    assert_eq!(rows(1), rows(4));
}

#[test]
fn incoherent_split_reconstructs_products() {
    let mut rng = RngStream::new(12, 0);
    for _ in 0..20 {
        let w = random_tensor(&[7, 9], -1.0, 1.0, &mut rng);
        let y = random_tensor(&[9, 5], -1.0, 1.0, &mut rng);
        let (plus, minus) = incoherent_split(&y).unwrap();
        assert!(plus.data().iter().chain(minus.data()).all(|&v| v >= 0.0));
        let direct = w.matmul(&y).unwrap();
        let split = w.matmul(&plus).unwrap().zip_map(&w.matmul(&minus).unwrap(), "sub", |a, b| a - b).unwrap();
        assert!(direct.max_abs_diff(&split).unwrap() <= 1e-12);
    }
}

#[test]
fn quantized_weights_live_on_the_grid() {
    let cfg = TrialConfig { bits_w: Bits::N(3), norm_w: "clamp".into(), ..TrialConfig::default() };
    let spec = cfg.model_spec().unwrap();
    let mut model = build_model(&spec, &cfg.layer_chains().unwrap(), &RngStream::new(0, 0)).unwrap();
    let x = random_tensor(&[2, 1, 28, 28], 0.0, 1.0, &mut RngStream::new(1, 0));
    model.predict(&x, &RngStream::new(2, 0)).unwrap();
    for p in model.params() {
        let t = p.cached_transformed().unwrap();
        assert!(t.data().iter().all(|&v| (v * 7.0 - (v * 7.0).round()).abs() < 1e-12 && v.abs() <= 1.0));
        assert_ne!(t, p.raw());
    }
}

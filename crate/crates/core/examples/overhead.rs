//! Wall-clock cost of the analog chains: one training step of a model with
//! and without them, on random data.
//!
//!     cargo run --release --example overhead -- [model] [steps]

use std::time::Instant;

use analog_nn::autodiff::Graph;
use analog_nn::nn::build_model;
use analog_nn::optim::{step_all, Adam};
use analog_nn::rng::RngStream;
use analog_nn::sweep::{Bits, TrialConfig};
use analog_nn::tensor::Tensor;

fn time_steps(cfg: &TrialConfig, steps: usize) -> f64 {
    let spec = cfg.model_spec().unwrap();
    let mut model = build_model(&spec, &cfg.layer_chains().unwrap(), &RngStream::new(0, 0)).unwrap();
    let mut adam = Adam::new(cfg.adam());
    let mut data_rng = RngStream::new(1, 0);
    let [c, h, w] = spec.input;
    let n = cfg.batch_size;
    let x = Tensor::new(vec![n, c, h, w], (0..n * c * h * w).map(|_| data_rng.uniform()).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let start = Instant::now();
    for s in 0..steps {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = model.forward(&mut g, xv, &RngStream::new(2, s as u64)).unwrap();
        let loss = g.cross_entropy(f.logits, &labels).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let gs: Vec<Tensor> = f.params.iter().map(|&p| grads.take(p).unwrap()).collect();
        step_all(&mut adam, model.params_mut(), &gs).unwrap();
    }
    start.elapsed().as_secs_f64() / steps as f64
}

fn main() {
    let mut args = std::env::args().skip(1);
    let model = args.next().unwrap_or_else(|| "3linear".into());
    let steps: usize = args.next().map_or(20, |s| s.parse().expect("steps"));
    let digital = TrialConfig { model, ..TrialConfig::default() };
    let analog = TrialConfig {
        norm_y: "clamp".into(),
        norm_w: "clamp".into(),
        bits_y: Bits::N(4),
        bits_w: Bits::N(4),
        rp_mode: "srp".into(),
        ep_y: 0.25,
        ep_w: 0.25,
        ..digital.clone()
    };
    let d = time_steps(&digital, steps);
    let a = time_steps(&analog, steps);
    println!("{}: digital {:.2} ms/step, analog {:.2} ms/step, ratio {:.2}", digital.model, d * 1e3, a * 1e3, a / d);
}

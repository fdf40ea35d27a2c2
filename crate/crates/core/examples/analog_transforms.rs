//! A signal pushed through the three analog stages one at a time and as a chain.
//!
//!     cargo run --example analog_transforms

use analog_nn::analog::{
    apply_chain, gaussian_noise, normalize, reduce_precision, representable_values, stochastic_reduce_precision, NoiseSpec,
    NormKind, NormSpec, PrecisionSpec, RoundingMode, TransformChain,
};
use analog_nn::rng::RngStream;
use analog_nn::tensor::Tensor;

fn show(label: &str, t: &Tensor) {
    let cells: Vec<String> = t.data().iter().map(|v| format!("{v:+.3}")).collect();
    println!("{label:<12} {}", cells.join(" "));
}

fn main() {
    let x = Tensor::vector(vec![-1.7, -0.62, -0.2, 0.05, 0.31, 0.5, 0.9, 2.4]).unwrap();
    let spec = PrecisionSpec::new(2).unwrap();
    let mut rng = RngStream::new(0, 0);
    println!("2-bit levels in [-1, 1]: {:?}", representable_values(&spec, -1.0, 1.0).unwrap());

    show("x", &x);
    show("clamp", &normalize(&x, &NormSpec::clamp()).unwrap());
    show("L2 norm", &normalize(&x, &NormSpec::lp(NormKind::LpNorm, 2).unwrap()).unwrap());
    show("L1 max", &normalize(&x, &NormSpec::lp(NormKind::LpNormM, 1).unwrap()).unwrap());
    show("RP", &reduce_precision(&x, &spec).unwrap());
    show("SRP", &stochastic_reduce_precision(&x, &spec, &mut rng).unwrap());
    let noise = NoiseSpec::from_ep(0.25, 2).unwrap();
    show("noise", &gaussian_noise(&x, &noise, &mut rng).unwrap());

    let chain = TransformChain::input(NormSpec::clamp(), Some((spec, RoundingMode::Stochastic)), Some(noise));
    show("input chain", &apply_chain(&x, &chain, &RngStream::new(1, 0)).unwrap());
    let chain = TransformChain::output(Some(noise), NormSpec::clamp(), Some((spec, RoundingMode::Deterministic)));
    show("output chain", &apply_chain(&x, &chain, &RngStream::new(1, 0)).unwrap());
}

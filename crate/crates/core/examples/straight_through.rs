//! Gradients through a quantizing chain: the identity rule passes everything,
//! the clipped rule stops gradient outside [-1, 1].
//!
//!     cargo run --example straight_through

use analog_nn::analog::{apply_chain_graph, NormSpec, PrecisionSpec, RoundingMode, StraightThrough, TransformChain};
use analog_nn::autodiff::Graph;
use analog_nn::rng::RngStream;
use analog_nn::tensor::Tensor;

fn main() {
    let x = Tensor::vector(vec![-1.5, -0.4, 0.1, 0.7, 1.2]).unwrap();
    let target = Tensor::vector(vec![0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    for rule in [StraightThrough::Identity, StraightThrough::Clipped] {
        let chain = TransformChain::input(NormSpec::none(), Some((PrecisionSpec::new(2).unwrap(), RoundingMode::Deterministic)), None)
            .with_straight_through(rule);
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = apply_chain_graph(&mut g, xv, &chain, &RngStream::new(0, 0)).unwrap();
        let t = g.constant(target.clone());
        let d = g.sub(y, t).unwrap();
        let sq = g.mul(d, d).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        println!("{rule:?}");
        println!("  forward  {:?}", g.value(y).data());
        println!("  gradient {:?}", grads.get(xv).unwrap().data());
    }
}

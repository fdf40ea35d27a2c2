//! Reverse-mode gradients against central differences and direct-loop
//! reference implementations.

mod common;

use analog_nn::analog::{apply_chain, apply_chain_graph, NoiseSpec, NormSpec, TransformChain};
use analog_nn::autodiff::{Graph, Var};
use analog_nn::rng::RngStream;
use analog_nn::tensor::Tensor;
use common::{assert_close, naive_conv, naive_cross_entropy, naive_linear, numeric_grad, random_tensor};
use proptest::prelude::*;

/// `Σ c ⊙ f(x)` for a fixed random weighting `c`, so every output element
/// contributes a distinct amount.
fn weighted_sum(g: &mut Graph, y: Var, c: &Tensor) -> Var {
    let cv = g.constant(c.clone());
    let p = g.mul(y, cv).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn linear_value_and_gradients() {
    let mut rng = RngStream::new(1, 0);
    let (n, k, m) = (3, 4, 5);
    let x = random_tensor(&[n, k], -1.0, 1.0, &mut rng);
    let w = random_tensor(&[m, k], -1.0, 1.0, &mut rng);
    let b = random_tensor(&[m], -1.0, 1.0, &mut rng);
    let c = random_tensor(&[n, m], -1.0, 1.0, &mut rng);

    let eval = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
        naive_linear(x.data(), w.data(), b.data(), n, k, m)
            .iter()
            .zip(c.data())
            .map(|(y, c)| y * c)
            .sum()
    };

    let mut g = Graph::new();
    let (xv, wv, bv) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
    let lin = g.linear(xv, wv).unwrap();
    let y = g.add_bias(lin, bv).unwrap();
    assert_close(g.value(y).data(), &naive_linear(x.data(), w.data(), b.data(), n, k, m), 1e-12, "linear value");
    let loss = weighted_sum(&mut g, y, &c);
    let grads = g.backward(loss).unwrap();

    let h = 1e-6;
    assert_close(grads.get(xv).unwrap().data(), &numeric_grad(&x, h, |t| eval(t, &w, &b)), 1e-7, "dx");
    assert_close(grads.get(wv).unwrap().data(), &numeric_grad(&w, h, |t| eval(&x, t, &b)), 1e-7, "dw");
    assert_close(grads.get(bv).unwrap().data(), &numeric_grad(&b, h, |t| eval(&x, &w, t)), 1e-7, "db");
}

#[test]
fn matmul_gradients() {
    let mut rng = RngStream::new(2, 0);
    let a = random_tensor(&[4, 3], -2.0, 2.0, &mut rng);
    let b = random_tensor(&[3, 6], -2.0, 2.0, &mut rng);
    let c = random_tensor(&[4, 6], -1.0, 1.0, &mut rng);
    let eval = |a: &Tensor, b: &Tensor| -> f64 {
        let mut s = 0.0;
        for i in 0..4 {
            for j in 0..6 {
                let v: f64 = (0..3).map(|k| a.data()[i * 3 + k] * b.data()[k * 6 + j]).sum();
                s += v * c.data()[i * 6 + j];
            }
        }
        s
    };
    let mut g = Graph::new();
    let (av, bv) = (g.param(a.clone()), g.param(b.clone()));
    let y = g.matmul(av, bv).unwrap();
    let loss = weighted_sum(&mut g, y, &c);
    assert!((g.value(loss).item().unwrap() - eval(&a, &b)).abs() < 1e-12);
    let grads = g.backward(loss).unwrap();
    assert_close(grads.get(av).unwrap().data(), &numeric_grad(&a, 1e-6, |t| eval(t, &b)), 1e-7, "da");
    assert_close(grads.get(bv).unwrap().data(), &numeric_grad(&b, 1e-6, |t| eval(&a, t)), 1e-7, "db");
}

#[test]
fn conv2d_value_and_gradients() {
    let mut rng = RngStream::new(3, 0);
    let x = random_tensor(&[2, 2, 5, 5], -1.0, 1.0, &mut rng);
    let k = random_tensor(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
    for (stride, pad) in [(1, 0), (1, 1), (2, 0), (2, 1)] {
        let reference = naive_conv(&x, &k, stride, pad);
        let c = random_tensor(reference.shape(), -1.0, 1.0, &mut rng);
        let eval = |x: &Tensor, k: &Tensor| -> f64 {
            naive_conv(x, k, stride, pad).data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new();
        let (xv, kv) = (g.param(x.clone()), g.param(k.clone()));
        let y = g.conv2d(xv, kv, stride, pad).unwrap();
        assert_eq!(g.value(y).shape(), reference.shape());
        assert_close(g.value(y).data(), reference.data(), 1e-12, "conv value");
        let loss = weighted_sum(&mut g, y, &c);
        let grads = g.backward(loss).unwrap();
        let what = format!("stride {stride} pad {pad}");
        assert_close(grads.get(xv).unwrap().data(), &numeric_grad(&x, 1e-6, |t| eval(t, &k)), 1e-7, &format!("dx {what}"));
        assert_close(grads.get(kv).unwrap().data(), &numeric_grad(&k, 1e-6, |t| eval(&x, t)), 1e-7, &format!("dk {what}"));
    }
}

#[test]
fn cross_entropy_value_and_gradient() {
    let mut rng = RngStream::new(4, 0);
    let logits = random_tensor(&[4, 10], -3.0, 3.0, &mut rng);
    let labels = [3, 0, 9, 3];
    let mut g = Graph::new();
    let lv = g.param(logits.clone());
    let loss = g.cross_entropy(lv, &labels).unwrap();
    let want = naive_cross_entropy(logits.data(), &labels, 10);
    assert!((g.value(loss).item().unwrap() - want).abs() < 1e-12);
    let grads = g.backward(loss).unwrap();
    let fd = numeric_grad(&logits, 1e-6, |t| naive_cross_entropy(t.data(), &labels, 10));
    assert_close(grads.get(lv).unwrap().data(), &fd, 1e-7, "dlogits");
}

#[test]
fn max_pool_gradient_away_from_ties() {
    let mut rng = RngStream::new(5, 0);
    let x = random_tensor(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    let c = random_tensor(&[2, 3, 2, 2], -1.0, 1.0, &mut rng);
    let eval = |x: &Tensor| -> f64 {
        let mut s = 0.0;
        for bc in 0..6 {
            for r in 0..2 {
                for q in 0..2 {
                    let m = (0..4)
                        .map(|i| x.data()[bc * 16 + (2 * r + i / 2) * 4 + 2 * q + i % 2])
                        .fold(f64::NEG_INFINITY, f64::max);
                    s += m * c.data()[bc * 4 + r * 2 + q];
                }
            }
        }
        s
    };
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = g.max_pool2d(xv, 2).unwrap();
    let loss = weighted_sum(&mut g, y, &c);
    assert!((g.value(loss).item().unwrap() - eval(&x)).abs() < 1e-12);
    let grads = g.backward(loss).unwrap();
    assert_close(grads.get(xv).unwrap().data(), &numeric_grad(&x, 1e-7, eval), 1e-6, "dpool");
}

#[test]
fn noise_then_clamp_with_frozen_stream() {
    // The same stream reproduces the same noise draw, so x ↦ Σ c·clamp(x + n)
    // is an ordinary function of x and can be differenced.
    let chain = TransformChain::output(Some(NoiseSpec::gaussian(0.3).unwrap()), NormSpec::clamp(), None);
    let rng = RngStream::new(6, 4);
    let mut init = RngStream::new(6, 5);
    let x = random_tensor(&[3, 7], -1.5, 1.5, &mut init);
    let c = random_tensor(&[3, 7], -1.0, 1.0, &mut init);
    let eval = |t: &Tensor| -> f64 {
        apply_chain(t, &chain, &rng).unwrap().data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
    };
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = apply_chain_graph(&mut g, xv, &chain, &rng).unwrap();
    let noisy = apply_chain(&x, &TransformChain::output(Some(NoiseSpec::gaussian(0.3).unwrap()), NormSpec::none(), None), &rng).unwrap();
    // Keep every element clear of the clamp corners.
    assert!(noisy.data().iter().all(|v| (v.abs() - 1.0).abs() > 1e-4));
    assert!(noisy.data().iter().any(|v| v.abs() > 1.0) && noisy.data().iter().any(|v| v.abs() < 1.0));
    let loss = weighted_sum(&mut g, y, &c);
    let grads = g.backward(loss).unwrap();
    assert_close(grads.get(xv).unwrap().data(), &numeric_grad(&x, 1e-6, eval), 1e-7, "composite");
}

/// Smooth unary and binary ops for the randomized suite.
#[derive(Clone, Copy, Debug)]
enum Op {
    Tanh,
    Sigmoid,
    Exp,
    Erf,
    Silu,
    Gelu,
    Elu,
    Scale,
    MulSelf,
    AddInput,
    MulInput,
    Linear,
}

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::Tanh),
        Just(Op::Sigmoid),
        Just(Op::Exp),
        Just(Op::Erf),
        Just(Op::Silu),
        Just(Op::Gelu),
        Just(Op::Elu),
        Just(Op::Scale),
        Just(Op::MulSelf),
        Just(Op::AddInput),
        Just(Op::MulInput),
        Just(Op::Linear),
    ]
}

/// Scalar reference for one op applied elementwise (or as a 3×3 linear map).
fn reference_step(op: Op, cur: &[f64], input: &[f64], w: &[f64]) -> Vec<f64> {
    let erf = |v: f64| analog_nn::special::erf(v);
    match op {
        Op::Linear => (0..cur.len())
            .map(|i| {
                let (r, col) = (i / 3, i % 3);
                (0..3).map(|j| cur[r * 3 + j] * w[col * 3 + j]).sum()
            })
            .collect(),
        _ => cur
            .iter()
            .zip(input)
            .map(|(&v, &x)| match op {
                Op::Tanh => v.tanh(),
                Op::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                Op::Exp => (0.5 * v).exp(),
                Op::Erf => erf(v),
                Op::Silu => v / (1.0 + (-v).exp()),
                Op::Gelu => 0.5 * v * (1.0 + erf(v / std::f64::consts::SQRT_2)),
                Op::Elu => {
                    if v > 0.0 {
                        v
                    } else {
                        v.exp() - 1.0
                    }
                }
                Op::Scale => -1.7 * v,
                Op::MulSelf => v * v,
                Op::AddInput => v + x,
                Op::MulInput => v * x,
                Op::Linear => unreachable!(),
            })
            .collect(),
    }
}

fn record_step(g: &mut Graph, op: Op, cur: Var, input: Var, w: Var) -> Var {
    match op {
        Op::Tanh => g.tanh(cur),
        Op::Sigmoid => g.sigmoid(cur),
        Op::Exp => {
            let h = g.scale(cur, 0.5).unwrap();
            g.exp(h)
        }
        Op::Erf => g.erf(cur),
        Op::Silu => g.silu(cur),
        Op::Gelu => g.gelu(cur),
        Op::Elu => g.elu(cur, 1.0),
        Op::Scale => g.scale(cur, -1.7),
        Op::MulSelf => g.mul(cur, cur),
        Op::AddInput => g.add(cur, input),
        Op::MulInput => g.mul(cur, input),
        Op::Linear => g.linear(cur, w),
    }
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn random_compositions_match_finite_differences(
        ops in prop::collection::vec(op_strategy(), 1..6),
        xs in prop::collection::vec(-1.5f64..1.5, 6),
        ws in prop::collection::vec(-1.0f64..1.0, 9),
        cs in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let x = Tensor::new(vec![2, 3], xs).unwrap();
        let w = Tensor::new(vec![3, 3], ws).unwrap();
        let forward = |x: &Tensor, w: &Tensor| -> f64 {
            let mut cur = x.data().to_vec();
            for &op in &ops {
                cur = reference_step(op, &cur, x.data(), w.data());
            }
            cur.iter().zip(&cs).map(|(a, b)| a * b).sum()
        };
        // Elu's kink at zero breaks differencing.
        let mut cur = x.data().to_vec();
        for &op in &ops {
            if matches!(op, Op::Elu) {
                prop_assume!(cur.iter().all(|v| v.abs() > 1e-4));
            }
            cur = reference_step(op, &cur, x.data(), w.data());
        }

        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.param(w.clone());
        let mut y = xv;
        for &op in &ops {
            y = record_step(&mut g, op, y, xv, wv);
        }
        let c = Tensor::new(vec![2, 3], cs.clone()).unwrap();
        let loss = weighted_sum(&mut g, y, &c);
        prop_assert!((g.value(loss).item().unwrap() - forward(&x, &w)).abs() < 1e-9 * (1.0 + forward(&x, &w).abs()));
        let grads = g.backward(loss).unwrap();
        let fd_x = numeric_grad(&x, 1e-6, |t| forward(t, &w));
        let fd_w = numeric_grad(&w, 1e-6, |t| forward(&x, t));
        let zero = [0.0; 9];
        let gw = grads.get(wv).map_or(&zero[..], |t| t.data());
        for (got, want) in grads.get(xv).unwrap().data().iter().zip(&fd_x).chain(gw.iter().zip(&fd_w)) {
            prop_assert!((got - want).abs() <= 1e-5 * (1.0 + want.abs()), "{ops:?}: {got} vs {want}");
        }
    }
}

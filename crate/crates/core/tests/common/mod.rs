//! Reference implementations and fixtures shared by the integration tests.
//! Everything here is written independently of the library code it checks.
#![allow(dead_code)]

use std::fs;
use std::path::Path;

use analog_nn::rng::RngStream;
use analog_nn::tensor::Tensor;

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.data().to_vec();
            let mut dn = x.data().to_vec();
            up[i] += h;
            dn[i] -= h;
            let fu = f(&Tensor::new(x.shape().to_vec(), up).unwrap());
            let fd = f(&Tensor::new(x.shape().to_vec(), dn).unwrap());
            (fu - fd) / (2.0 * h)
        })
        .collect()
}

pub fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        let scale = 1.0f64.max(w.abs());
        assert!((g - w).abs() <= tol * scale, "{what}[{i}]: got {g}, want {w}");
    }
}

/// `y[i][o] = Σ_k x[i][k] · w[o][k] + b[o]`.
pub fn naive_linear(x: &[f64], w: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * m];
    for i in 0..n {
        for o in 0..m {
            let mut s = b[o];
            for j in 0..k {
                s += x[i * k + j] * w[o * k + j];
            }
            y[i * m + o] = s;
        }
    }
    y
}

/// Direct-loop cross-correlation of `[N×C×H×W]` with `[O×C×K×K]`.
pub fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [o, c2, kh, kw] = <[usize; 4]>::try_from(k.shape()).unwrap();
    assert_eq!(c, c2);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for f in 0..o {
            for r in 0..oh {
                for q in 0..ow {
                    let mut s = 0.0;
                    for ch in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let (y, xx) = ((r * stride + i) as isize - pad as isize, (q * stride + j) as isize - pad as isize);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                s += xd[((b * c + ch) * h + y as usize) * w + xx as usize] * kd[((f * c + ch) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * o + f) * oh + r) * ow + q] = s;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// Mean softmax cross-entropy, computed in the direct (unshifted) form.
pub fn naive_cross_entropy(logits: &[f64], labels: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.chunks(k).zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total -= (row[t].exp() / z).ln();
    }
    total / labels.len() as f64
}

/// Nearest point of the grid `k/p`, ties toward zero, by exhaustive search.
pub fn rp_oracle(x: f64, p: u64) -> f64 {
    let pf = p as f64;
    let mut best = 0.0f64;
    let top = (x.abs() * pf).ceil() as i64 + 1;
    for k in -top..=top {
        let c = k as f64 / pf;
        let (dc, db) = ((c - x).abs(), (best - x).abs());
        if dc < db - 1e-12 || ((dc - db).abs() <= 1e-12 && c.abs() < best.abs()) {
            best = c;
        }
    }
    best
}

/// Monte-Carlo error probability: fraction of quantized values in `[-1, 1]`
/// that land on a different level after Gaussian noise and re-quantization.
pub fn mc_error_probability(sigma: f64, bits: u32, samples: usize, rng: &mut RngStream) -> f64 {
    let p = (1u64 << bits) - 1;
    let mut changed = 0usize;
    for _ in 0..samples {
        let x = 2.0 * rng.uniform() - 1.0;
        let q = rp_oracle(x, p);
        let noisy = q + sigma * rng.normal();
        if (rp_oracle(noisy, p) - q).abs() > 1e-9 {
            changed += 1;
        }
    }
    changed as f64 / samples as f64
}

/// 28×28 grayscale images, class `c` brightening row band `c`.
pub fn toy_images(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = RngStream::new(seed, 77);
    let mut px = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = (i * 7 + seed as usize) % 10;
        for r in 0..28 {
            for _ in 0..28 {
                let base = if r / 3 == c { 180.0 } else { 20.0 };
                px.push((base + 60.0 * rng.uniform()) as u8);
            }
        }
        labels.push(c as u8);
    }
    (px, labels)
}

fn write_idx_pair(images: &Path, labels: &Path, px: &[u8], lab: &[u8]) {
    let mut img = Vec::new();
    for v in [0x0803u32, lab.len() as u32, 28, 28] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(px);
    fs::write(images, img).unwrap();
    let mut l = Vec::new();
    for v in [0x0801u32, lab.len() as u32] {
        l.extend_from_slice(&v.to_be_bytes());
    }
    l.extend_from_slice(lab);
    fs::write(labels, l).unwrap();
}

/// Writes a small synthetic MNIST-layout dataset under `root/mnist`.
pub fn write_toy_mnist(root: &Path, train: usize, test: usize) {
    let dir = root.join("mnist");
    fs::create_dir_all(&dir).unwrap();
    let (px, lab) = toy_images(train, 1);
    write_idx_pair(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"), &px, &lab);
    let (px, lab) = toy_images(test, 2);
    write_idx_pair(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"), &px, &lab);
}

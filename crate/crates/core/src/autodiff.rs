//! Define-by-run reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node whose
//! parents were pushed earlier, so node order is already a topological order
//! and [`Graph::backward`] walks it in reverse, visiting each node once.
//!
//! Any single-parent node can carry a [`BackwardOverride`]. With
//! [`BackwardOverride::Identity`] the upstream gradient is handed to the
//! parent unchanged, which is how quantization and noise stages become
//! transparent to training.

use std::fmt;

use crate::error::{Error, Result};
use crate::special;
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient rule: `(upstream, parent values, node value) -> one gradient per parent`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Tensor>>>;

pub enum BackwardOverride {
    /// Straight-through: the parent receives the upstream gradient as is.
    Identity,
    /// Replacement rule with the same signature as a node's own rule.
    Rule(BackwardFn),
}

impl fmt::Debug for BackwardOverride {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackwardOverride::Identity => f.write_str("Identity"),
            BackwardOverride::Rule(_) => f.write_str("Rule(..)"),
        }
    }
}

enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Tanh,
    Erf,
    Scale(f64),
    MaxScalar(f64),
    MinScalar(f64),
    Sum,
    Mean,
    MatMul,
    Linear,
    AddBias,
    Reshape,
    Conv2d { stride: usize, padding: usize },
    MaxPool2d { argmax: Vec<usize> },
    Relu,
    LeakyRelu(f64),
    Elu(f64),
    Silu,
    Gelu,
    Sigmoid,
    CrossEntropy { probs: Vec<f64>, labels: Vec<usize> },
    Custom { name: &'static str, backward: BackwardFn },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Tanh => "tanh",
            Op::Erf => "erf",
            Op::Scale(_) => "scale",
            Op::MaxScalar(_) => "max_with_scalar",
            Op::MinScalar(_) => "min_with_scalar",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MatMul => "matmul",
            Op::Linear => "linear",
            Op::AddBias => "add_bias",
            Op::Reshape => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Elu(_) => "elu",
            Op::Silu => "silu",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    op: Op,
    backward_override: Option<BackwardOverride>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` lies on a path to the root
    /// and requires a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    x * special::normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    special::normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Sums `grad` down to a broadcast (rank-0) parent shape.
fn reduce_to(parent: &Tensor, grad: Tensor) -> Tensor {
    if parent.shape() == grad.shape() {
        grad
    } else {
        Tensor::from_parts(Vec::new(), vec![grad.sum()])
    }
}

/// Output spatial size of a convolution; errors when it is not integral.
fn conv_out(len: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = len + 2 * padding;
    if k > padded || stride == 0 {
        return Err(Error::dim(
            "conv2d",
            format!("kernel {k} does not fit padded extent {padded} (stride {stride})"),
        ));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(Error::dim(
            "conv2d",
            format!("({padded} - {k}) is not a multiple of stride {stride}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one `C×H×W` image into a `(C·kh·kw) × (oh·ow)` matrix.
    fn im2col(&self, img: &[f64], out: &mut [f64]) {
        let cols = self.cols();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + i) as isize - self.padding as isize;
                        for ox in 0..self.ow {
                            let x = (ox * self.stride + j) as isize - self.padding as isize;
                            dst[oy * self.ow + ox] = if y >= 0
                                && (y as usize) < self.h
                                && x >= 0
                                && (x as usize) < self.w
                            {
                                img[(c * self.h + y as usize) * self.w + x as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters-adds columns back into an image.
    fn col2im(&self, cols_buf: &[f64], img: &mut [f64]) {
        let cols = self.cols();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols_buf[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + i) as isize - self.padding as isize;
                        if y < 0 || y as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let x = (ox * self.stride + j) as isize - self.padding as isize;
                            if x >= 0 && (x as usize) < self.w {
                                img[(c * self.h + y as usize) * self.w + x as usize] +=
                                    src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: Op::Leaf,
            backward_override: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn parents(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].parents
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Structural(format!(
                "node {} does not belong to this graph ({} nodes)",
                v.0,
                self.nodes.len()
            )))
        }
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, op: Op) -> Result<Var> {
        let value = value.finite(op.name())?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            op,
            backward_override: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Replaces the gradient rule of `v`. [`BackwardOverride::Identity`] is only
    /// meaningful on a single-parent node of unchanged shape.
    pub fn set_backward_override(&mut self, v: Var, rule: BackwardOverride) -> Result<()> {
        self.check_var(v)?;
        if let BackwardOverride::Identity = rule {
            let node = &self.nodes[v.0];
            match node.parents.as_slice() {
                [p] if self.nodes[p.0].value.shape() == node.value.shape() => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "identity override on {} node {} needs one same-shaped parent",
                        node.op.name(),
                        v.0
                    )))
                }
            }
        }
        self.nodes[v.0].backward_override = Some(rule);
        Ok(())
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        parents: &[Var],
        value: Tensor,
        name: &'static str,
        backward: BackwardFn,
    ) -> Result<Var> {
        for &p in parents {
            self.check_var(p)?;
        }
        self.push(value, parents.to_vec(), Op::Custom { name, backward })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let value = self.value(a).zip_map(self.value(b), op.name(), f)?;
        self.push(value, vec![a, b], op)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check_var(a)?;
        let value = self.value(a).map(op.name(), f)?;
        self.push(value, vec![a], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(b)?;
        if self.value(b).data().contains(&0.0) {
            return Err(Error::DivisionByZero { op: "div" });
        }
        self.binary(a, b, Op::Div, |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Neg, |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn erf(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Erf, special::erf)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary(a, Op::Scale(factor), |x| x * factor)
    }

    pub fn max_with_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, Op::MaxScalar(s), |x| x.max(s))
    }

    pub fn min_with_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, Op::MinScalar(s), |x| x.min(s))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let value = Tensor::scalar(self.value(a).sum())?;
        self.push(value, vec![a], Op::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let value = Tensor::scalar(self.value(a).mean())?;
        self.push(value, vec![a], Op::Mean)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu, |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(a, Op::LeakyRelu(slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.unary(a, Op::Elu(alpha), |x| {
            if x > 0.0 {
                x
            } else {
                alpha * x.exp_m1()
            }
        })
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu, |x| x * sigmoid(x))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu, gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid, sigmoid)
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, vec![a, b], Op::MatMul)
    }

    /// `x · wᵀ` for `x: [n×in]`, `w: [out×in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(w)?;
        let [n, k] = self.value(x).dims2("linear")?;
        let [out, k2] = self.value(w).dims2("linear")?;
        if k != k2 {
            return Err(Error::dim(
                "linear",
                format!("input {:?} vs weight {:?}", self.value(x).shape(), self.value(w).shape()),
            ));
        }
        let mut data = vec![0.0; n * out];
        gemm(n, k, out, self.value(x).data(), false, self.value(w).data(), true, &mut data, false);
        self.push(Tensor::from_parts(vec![n, out], data), vec![x, w], Op::Linear)
    }

    /// Adds `b: [F]` along axis 1 of `x: [N×F]` or `x: [N×F×H×W]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(b)?;
        let xs = self.value(x).shape().to_vec();
        let bv = self.value(b);
        if xs.len() < 2 || bv.shape() != [xs[1]] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} vs input {xs:?}", bv.shape()),
            ));
        }
        let inner: usize = xs[2..].iter().product();
        let mut data = self.value(x).data().to_vec();
        for (chunk_idx, chunk) in data.chunks_mut(inner).enumerate() {
            let bias = bv.data()[chunk_idx % xs[1]];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        self.push(Tensor::from_parts(xs, data), vec![x, b], Op::AddBias)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check_var(x)?;
        let value = self.value(x).reshape(shape)?;
        self.push(value, vec![x], Op::Reshape)
    }

    /// `[N×…] -> [N×rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let shape = self.value(x).shape();
        let n = *shape
            .first()
            .ok_or_else(|| Error::dim("flatten", "rank-0 input"))?;
        let rest = self.value(x).len() / n;
        self.reshape(x, vec![n, rest])
    }

    /// Cross-correlation of `input: [N×C×H×W]` with `kernel: [F×C×kh×kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check_var(input)?;
        self.check_var(kernel)?;
        let [n, c, h, w] = self.value(input).dims4("conv2d")?;
        let [f, kc, kh, kw] = self.value(kernel).dims4("conv2d")?;
        if c != kc {
            return Err(Error::dim(
                "conv2d",
                format!("input has {c} channels, kernel expects {kc}"),
            ));
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            oh: conv_out(h, kh, stride, padding)?,
            ow: conv_out(w, kw, stride, padding)?,
            stride,
            padding,
        };
        let (rows, cols) = (geom.rows(), geom.cols());
        let mut buf = vec![0.0; rows * cols];
        let mut out = vec![0.0; n * f * cols];
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        for (img, dst) in x.chunks(c * h * w).zip(out.chunks_mut(f * cols)) {
            geom.im2col(img, &mut buf);
            gemm(f, rows, cols, k, false, &buf, false, dst, false);
        }
        let value = Tensor::from_parts(vec![n, f, geom.oh, geom.ow], out);
        self.push(value, vec![input, kernel], Op::Conv2d { stride, padding })
    }

    /// Non-overlapping `size×size` max pooling; trailing rows/columns are dropped.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        self.check_var(x)?;
        let [n, c, h, w] = self.value(x).dims4("max_pool2d")?;
        if size == 0 || size > h || size > w {
            return Err(Error::dim("max_pool2d", format!("window {size} on {h}x{w}")));
        }
        let (oh, ow) = (h / size, w / size);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for i in 0..size {
                        for j in 0..size {
                            let idx = base + (oy * size + i) * w + ox * size + j;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        self.push(value, vec![x], Op::MaxPool2d { argmax })
    }

    /// Mean softmax cross-entropy of `logits: [N×C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_var(logits)?;
        let [n, classes] = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != n {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * classes];
        let mut loss = 0.0;
        for (i, (row, p)) in z.chunks(classes).zip(probs.chunks_mut(classes)).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (pj, &zj) in p.iter_mut().zip(row) {
                *pj = (zj - m).exp();
                total += *pj;
            }
            p.iter_mut().for_each(|v| *v /= total);
            loss += m + total.ln() - row[labels[i]];
        }
        let value = Tensor::scalar(loss / n as f64)?;
        self.push(
            value,
            vec![logits],
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check_var(root)?;
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_parts(
            self.value(root).shape().to_vec(),
            vec![1.0],
        ));
        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.parents.iter().any(|p| p.0 >= idx) {
                return Err(Error::Structural(format!(
                    "node {idx} ({}) has a parent that is not earlier on the tape",
                    node.op.name()
                )));
            }
            if !node.requires_grad || node.parents.is_empty() {
                grads[idx] = Some(upstream);
                continue;
            }
            let parent_grads = self.node_backward(node, &upstream)?;
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let (Some(g), true) = (g, self.nodes[p.0].requires_grad) else {
                    continue;
                };
                let parent_shape = self.nodes[p.0].value.shape();
                if g.shape() != parent_shape {
                    return Err(Error::Structural(format!(
                        "{} produced gradient {:?} for parent of shape {parent_shape:?}",
                        node.op.name(),
                        g.shape()
                    )));
                }
                grads[p.0] = Some(match grads[p.0].take() {
                    Some(acc) => acc.zip_map(&g, "grad accumulate", |a, b| a + b)?,
                    None => g,
                });
            }
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let parents: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
        let needs: Vec<bool> = node
            .parents
            .iter()
            .map(|p| self.nodes[p.0].requires_grad)
            .collect();
        match &node.backward_override {
            Some(BackwardOverride::Identity) => return Ok(vec![Some(g.clone())]),
            Some(BackwardOverride::Rule(rule)) => {
                return Ok(rule(g, &parents, &node.value)?.into_iter().map(Some).collect())
            }
            None => {}
        }
        let name = node.op.name();
        let elementwise = |f: &dyn Fn(f64, f64) -> f64| -> Result<Vec<Option<Tensor>>> {
            Ok(vec![Some(g.zip_map(parents[0], name, f)?)])
        };
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![
                Some(reduce_to(parents[0], g.clone())),
                Some(reduce_to(parents[1], g.clone())),
            ],
            Op::Sub => vec![
                Some(reduce_to(parents[0], g.clone())),
                Some(reduce_to(parents[1], g.map(name, |v| -v)?)),
            ],
            Op::Mul => vec![
                Some(reduce_to(parents[0], g.zip_map(parents[1], name, |a, b| a * b)?)),
                Some(reduce_to(parents[1], g.zip_map(parents[0], name, |a, b| a * b)?)),
            ],
            Op::Div => {
                let ga = g.zip_map(parents[1], name, |a, b| a / b)?;
                let quotient = &node.value;
                let gb = g
                    .zip_map(quotient, name, |a, q| a * q)?
                    .zip_map(parents[1], name, |a, b| -a / b)?;
                vec![Some(reduce_to(parents[0], ga)), Some(reduce_to(parents[1], gb))]
            }
            Op::Neg => vec![Some(g.map(name, |v| -v)?)],
            Op::Exp => vec![Some(g.zip_map(&node.value, name, |a, y| a * y)?)],
            Op::Tanh => vec![Some(g.zip_map(&node.value, name, |a, y| a * (1.0 - y * y))?)],
            Op::Erf => elementwise(&|a, x| a * std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp())?,
            Op::Scale(s) => vec![Some(g.map(name, |v| v * s)?)],
            Op::MaxScalar(s) => elementwise(&|a, x| if x >= *s { a } else { 0.0 })?,
            Op::MinScalar(s) => elementwise(&|a, x| if x <= *s { a } else { 0.0 })?,
            Op::Sum => {
                let gv = g.item()?;
                vec![Some(Tensor::full(parents[0].shape().to_vec(), gv)?)]
            }
            Op::Mean => {
                let gv = g.item()? / parents[0].len() as f64;
                vec![Some(Tensor::full(parents[0].shape().to_vec(), gv)?)]
            }
            Op::MatMul => {
                let [m, k] = parents[0].dims2(name)?;
                let [_, n] = parents[1].dims2(name)?;
                let ga = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, parents[1].data(), true, &mut d, false);
                    Tensor::from_parts(vec![m, k], d)
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, parents[0].data(), true, g.data(), false, &mut d, false);
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![ga, gb]
            }
            Op::Linear => {
                let [n, k] = parents[0].dims2(name)?;
                let [out, _] = parents[1].dims2(name)?;
                let gx = needs[0].then(|| {
                    let mut d = vec![0.0; n * k];
                    gemm(n, out, k, g.data(), false, parents[1].data(), false, &mut d, false);
                    Tensor::from_parts(vec![n, k], d)
                });
                let gw = needs[1].then(|| {
                    let mut d = vec![0.0; out * k];
                    gemm(out, n, k, g.data(), true, parents[0].data(), false, &mut d, false);
                    Tensor::from_parts(vec![out, k], d)
                });
                vec![gx, gw]
            }
            Op::AddBias => {
                let shape = parents[0].shape();
                let f = shape[1];
                let inner: usize = shape[2..].iter().product();
                let mut gb = vec![0.0; f];
                for (chunk_idx, chunk) in g.data().chunks(inner).enumerate() {
                    gb[chunk_idx % f] += chunk.iter().sum::<f64>();
                }
                vec![Some(g.clone()), Some(Tensor::from_parts(vec![f], gb))]
            }
            Op::Reshape => vec![Some(g.reshape(parents[0].shape().to_vec())?)],
            Op::Conv2d { stride, padding } => {
                let [_, c, h, w] = parents[0].dims4(name)?;
                let [f, _, kh, kw] = parents[1].dims4(name)?;
                let [_, _, oh, ow] = node.value.dims4(name)?;
                let geom = ConvGeom {
                    c,
                    h,
                    w,
                    kh,
                    kw,
                    oh,
                    ow,
                    stride: *stride,
                    padding: *padding,
                };
                let (rows, cols) = (geom.rows(), geom.cols());
                let mut buf = vec![0.0; rows * cols];
                let mut gcols = vec![0.0; rows * cols];
                let mut gx = needs[0].then(|| vec![0.0; parents[0].len()]);
                let mut gk = needs[1].then(|| vec![0.0; parents[1].len()]);
                let kernel = parents[1].data();
                for (i, (img, gi)) in parents[0]
                    .data()
                    .chunks(c * h * w)
                    .zip(g.data().chunks(f * cols))
                    .enumerate()
                {
                    if let Some(gk) = gk.as_mut() {
                        geom.im2col(img, &mut buf);
                        gemm(f, cols, rows, gi, false, &buf, true, gk, true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(rows, f, cols, kernel, true, gi, false, &mut gcols, false);
                        geom.col2im(&gcols, &mut gx[i * c * h * w..(i + 1) * c * h * w]);
                    }
                }
                vec![
                    gx.map(|d| Tensor::from_parts(parents[0].shape().to_vec(), d)),
                    gk.map(|d| Tensor::from_parts(parents[1].shape().to_vec(), d)),
                ]
            }
            Op::MaxPool2d { argmax } => {
                let mut gx = vec![0.0; parents[0].len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx[src] += gv;
                }
                vec![Some(Tensor::from_parts(parents[0].shape().to_vec(), gx))]
            }
            Op::Relu => elementwise(&|a, x| if x > 0.0 { a } else { 0.0 })?,
            Op::LeakyRelu(slope) => elementwise(&|a, x| if x > 0.0 { a } else { a * slope })?,
            Op::Elu(alpha) => elementwise(&|a, x| if x > 0.0 { a } else { a * alpha * x.exp() })?,
            Op::Silu => elementwise(&|a, x| {
                let s = sigmoid(x);
                a * s * (1.0 + x * (1.0 - s))
            })?,
            Op::Gelu => elementwise(&|a, x| a * gelu_grad(x))?,
            Op::Sigmoid => vec![Some(g.zip_map(&node.value, name, |a, y| a * y * (1.0 - y))?)],
            Op::CrossEntropy { probs, labels } => {
                let [n, classes] = parents[0].dims2(name)?;
                let scale = g.item()? / n as f64;
                let mut d = probs.clone();
                for (row, &l) in d.chunks_mut(classes).zip(labels) {
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![Some(Tensor::from_parts(vec![n, classes], d))]
            }
            Op::Custom { backward, .. } => backward(g, &parents, &node.value)?
                .into_iter()
                .map(Some)
                .collect(),
        };
        if out.len() != node.parents.len() {
            return Err(Error::Structural(format!(
                "{name} returned {} gradients for {} parents",
                out.len(),
                node.parents.len()
            )));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_graph_has_unit_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.5).unwrap());
        let grads = g.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn foreign_var_is_structural_error() {
        let mut a = Graph::new();
        let x = a.param(t(&[2], &[1.0, 2.0]));
        let _ = a.param(t(&[2], &[1.0, 2.0]));
        let y = a.add(x, x).unwrap();
        let mut b = Graph::new();
        let _ = b.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(b.neg(y), Err(Error::Structural(_))));
    }

    #[test]
    fn diamond_accumulates_both_paths() {
        // y = sum(x*x + 3x) -> dy/dx = 2x + 3
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let three = g.constant(Tensor::scalar(3.0).unwrap());
        let lin = g.mul(x, three).unwrap();
        let s = g.add(sq, lin).unwrap();
        let y = g.sum(s).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, -1.0, 4.0]);
        assert!(grads.get(three).is_none());
    }

    #[test]
    fn identity_override_passes_gradient_through() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-2.0, 0.5, 3.0]));
        let c = g.relu(x).unwrap();
        g.set_backward_override(c, BackwardOverride::Identity).unwrap();
        let y = g.sum(c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), grads.get(c).unwrap());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn identity_override_needs_unary_node() {
        let mut g = Graph::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let b = g.add(a, a).unwrap();
        assert!(g.set_backward_override(b, BackwardOverride::Identity).is_err());
    }

    #[test]
    fn division_by_zero_errors() {
        let mut g = Graph::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.div(a, b), Err(Error::DivisionByZero { .. })));
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 3, 3]).unwrap());
        let k = g.constant(Tensor::ones(vec![1, 1, 3, 3]).unwrap());
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);

        let img: Vec<f64> = (0..25).map(|i| i as f64 * 0.1).collect();
        let x = g.constant(t(&[1, 1, 5, 5], &img));
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let k = g.constant(t(&[1, 1, 3, 3], &delta));
        let y = g.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let k = g.constant(Tensor::ones(vec![1, 1, 2, 2]).unwrap());
        assert!(matches!(g.conv2d(x, k, 2, 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn max_pool_routes_to_argmax() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1.0, 4.0, 3.0, 2.0]));
        let p = g.max_pool2d(x, 2).unwrap();
        assert_eq!(g.value(p).data(), &[4.0]);
        let y = g.sum(p).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::new();
        let z = g.param(Tensor::zeros(vec![2, 10]).unwrap());
        let l = g.cross_entropy(z, &[3, 7]).unwrap();
        assert!((g.value(l).item().unwrap() - 10f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.0; 10];
        logits[4] = 50.0;
        let z = g.param(t(&[1, 10], &logits));
        let l = g.cross_entropy(z, &[4]).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-9);

        assert!(matches!(g.cross_entropy(z, &[10]), Err(Error::Data(_))));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[1000.0]));
        assert!(matches!(g.exp(x), Err(Error::NonFinite { .. })));
    }
}

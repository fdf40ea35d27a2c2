//! Layers, activations and model assembly.

use std::fmt;

use crate::analog::{apply_chain_graph, Role, TransformChain};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::pseudo_param::PseudoParameter;
use crate::rng::{label, RngStream};
use crate::special;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
    Elu,
    Silu,
    Gelu,
}

impl Activation {
    pub const ALL: [Activation; 7] = [
        Activation::Identity,
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Tanh,
        Activation::Elu,
        Activation::Silu,
        Activation::Gelu,
    ];

    pub const LEAKY_SLOPE: f64 = 0.01;
    pub const ELU_ALPHA: f64 = 1.0;

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Tanh => "tanh",
            Activation::Elu => "elu",
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        let key = if key == "leakyrelu" { "leaky_relu".to_string() } else { key };
        Self::ALL
            .into_iter()
            .find(|a| a.name() == key)
            .ok_or_else(|| Error::param(format!("unknown activation {s:?}")))
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    Self::LEAKY_SLOPE * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    Self::ELU_ALPHA * x.exp_m1()
                }
            }
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Gelu => x * special::normal_cdf(x),
        }
    }

    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        x.map(self.name(), |v| self.eval(v))
    }

    pub fn record(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu => g.leaky_relu(x, Self::LEAKY_SLOPE),
            Activation::Tanh => g.tanh(x),
            Activation::Elu => g.elu(x, Self::ELU_ALPHA),
            Activation::Silu => g.silu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Row-wise softmax of a rank-2 tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let [_, cols] = logits.dims2("softmax_rows")?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Splits a signed signal into nonnegative halves with `y == plus − minus`.
pub fn incoherent_split(y: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((
        y.map("incoherent_split", |v| v.max(0.0))?,
        y.map("incoherent_split", |v| (-v).max(0.0))?,
    ))
}

/// The three chains wrapped around every analog layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerChains {
    pub input: TransformChain,
    pub weight: TransformChain,
    pub output: TransformChain,
}

impl Default for LayerChains {
    fn default() -> Self {
        LayerChains {
            input: TransformChain::empty(Role::Input),
            weight: TransformChain::empty(Role::Weight),
            output: TransformChain::empty(Role::Output),
        }
    }
}

impl LayerChains {
    pub fn is_digital(&self) -> bool {
        self.input.is_empty() && self.weight.is_empty() && self.output.is_empty()
    }
}

/// Uniform `±1/√fan_in`, clamped into the analog range.
fn init_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut RngStream) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| ((rng.uniform() * 2.0 - 1.0) * bound).clamp(-1.0, 1.0))
        .collect();
    Tensor::new(shape, data)
}

#[derive(Clone, Debug)]
pub struct AnalogLinear {
    pub weight: PseudoParameter,
    pub bias: PseudoParameter,
    pub input_chain: TransformChain,
    pub output_chain: TransformChain,
}

impl AnalogLinear {
    pub fn new(inputs: usize, outputs: usize, chains: &LayerChains, rng: &mut RngStream) -> Result<Self> {
        let w = init_uniform(vec![outputs, inputs], inputs, rng)?;
        let b = init_uniform(vec![outputs], inputs, rng)?;
        Ok(AnalogLinear {
            weight: PseudoParameter::new("weight", w, chains.weight.clone()),
            bias: PseudoParameter::new("bias", b, chains.weight.clone()),
            input_chain: chains.input.clone(),
            output_chain: chains.output.clone(),
        })
    }

    /// `output_chain(W' · input_chain(x) + b')`; also returns the raw leaves
    /// `[weight, bias]`.
    pub fn forward(&mut self, g: &mut Graph, x: Var, rng: &RngStream) -> Result<(Var, [Var; 2])> {
        let xin = apply_chain_graph(g, x, &self.input_chain, &rng.derive(label::INPUT_CHAIN))?;
        let (wl, w) = self.weight.record(g, &rng.derive(label::WEIGHT_CHAIN))?;
        let (bl, b) = self.bias.record(g, &rng.derive(label::BIAS_CHAIN))?;
        let y = g.linear(xin, w)?;
        let y = g.add_bias(y, b)?;
        let out = apply_chain_graph(g, y, &self.output_chain, &rng.derive(label::OUTPUT_CHAIN))?;
        Ok((out, [wl, bl]))
    }
}

#[derive(Clone, Debug)]
pub struct AnalogConv2d {
    pub kernel: PseudoParameter,
    pub bias: PseudoParameter,
    pub stride: usize,
    pub padding: usize,
    pub input_chain: TransformChain,
    pub output_chain: TransformChain,
}

impl AnalogConv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        chains: &LayerChains,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let k = init_uniform(vec![out_channels, in_channels, kernel, kernel], fan_in, rng)?;
        let b = init_uniform(vec![out_channels], fan_in, rng)?;
        Ok(AnalogConv2d {
            kernel: PseudoParameter::new("kernel", k, chains.weight.clone()),
            bias: PseudoParameter::new("bias", b, chains.weight.clone()),
            stride,
            padding,
            input_chain: chains.input.clone(),
            output_chain: chains.output.clone(),
        })
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, rng: &RngStream) -> Result<(Var, [Var; 2])> {
        let xin = apply_chain_graph(g, x, &self.input_chain, &rng.derive(label::INPUT_CHAIN))?;
        let (kl, k) = self.kernel.record(g, &rng.derive(label::WEIGHT_CHAIN))?;
        let (bl, b) = self.bias.record(g, &rng.derive(label::BIAS_CHAIN))?;
        let y = g.conv2d(xin, k, self.stride, self.padding)?;
        let y = g.add_bias(y, b)?;
        let out = apply_chain_graph(g, y, &self.output_chain, &rng.derive(label::OUTPUT_CHAIN))?;
        Ok((out, [kl, bl]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d(usize),
    Flatten,
    Linear(usize),
}

impl LayerSpec {
    /// 3×3, stride 1, padding 1.
    pub fn conv3(out_channels: usize) -> Self {
        LayerSpec::Conv2d {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    /// `[C, H, W]` of one sample.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub activation: Activation,
    pub classes: usize,
}

impl ModelSpec {
    pub const PRESETS: [&'static str; 7] = [
        "1linear",
        "2linear",
        "3linear",
        "3conv1linear",
        "3conv2linear",
        "3conv3linear",
        "cifar9",
    ];

    /// Named architecture for inputs of shape `input` and 10 classes.
    pub fn preset(id: &str, input: [usize; 3], activation: Activation) -> Result<Self> {
        use LayerSpec::*;
        let conv3 = |widths: &[usize]| -> Vec<LayerSpec> {
            widths
                .iter()
                .flat_map(|&w| [LayerSpec::conv3(w), MaxPool2d(2)])
                .collect()
        };
        let linear = |widths: &[usize]| widths.iter().map(|&w| Linear(w)).collect::<Vec<_>>();
        let layers: Vec<LayerSpec> = match id {
            "1linear" => [vec![Flatten], linear(&[10])].concat(),
            "2linear" => [vec![Flatten], linear(&[256, 10])].concat(),
            "3linear" => [vec![Flatten], linear(&[256, 128, 10])].concat(),
            "3conv1linear" => [conv3(&[32, 64, 64]), vec![Flatten], linear(&[10])].concat(),
            "3conv2linear" => [conv3(&[32, 64, 64]), vec![Flatten], linear(&[256, 10])].concat(),
            "3conv3linear" => {
                [conv3(&[32, 64, 64]), vec![Flatten], linear(&[256, 128, 10])].concat()
            }
            "cifar9" => {
                let mut l = Vec::new();
                for w in [32, 64, 128] {
                    l.extend([LayerSpec::conv3(w), LayerSpec::conv3(w), MaxPool2d(2)]);
                }
                l.push(Flatten);
                l.extend(linear(&[640, 128, 10]));
                l
            }
            _ => {
                return Err(Error::param(format!(
                    "unknown model {id:?}; expected one of {:?}",
                    Self::PRESETS
                )))
            }
        };
        Ok(ModelSpec {
            input,
            layers,
            activation,
            classes: 10,
        })
    }
}

#[derive(Clone, Debug)]
enum Block {
    Linear(AnalogLinear),
    Conv(AnalogConv2d),
    Pool(usize),
    Flatten,
    Act(Activation),
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    blocks: Vec<Block>,
}

/// Result of [`Model::forward`].
pub struct Forward {
    pub logits: Var,
    /// Raw-value leaves in [`Model::params_mut`] order.
    pub params: Vec<Var>,
}

/// Instantiates `spec`, drawing initial weights from `rng`.
pub fn build_model(spec: &ModelSpec, chains: &LayerChains, rng: &RngStream) -> Result<Model> {
    let build_err = |msg: String| Error::Structural(format!("model build: {msg}"));
    let mut init = rng.derive(label::INIT);
    let analog_total = spec
        .layers
        .iter()
        .filter(|l| matches!(l, LayerSpec::Conv2d { .. } | LayerSpec::Linear(_)))
        .count();
    let mut shape: Vec<usize> = spec.input.to_vec();
    let mut blocks = Vec::new();
    let mut analog_seen = 0;
    for (i, layer) in spec.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = shape[..] else {
                    return Err(build_err(format!("layer {i}: conv needs a C×H×W input, got {shape:?}")));
                };
                let out = |n: usize| -> Result<usize> {
                    let padded = n + 2 * padding;
                    if stride == 0 || kernel == 0 || kernel > padded || !(padded - kernel).is_multiple_of(stride) {
                        return Err(build_err(format!("layer {i}: kernel {kernel} does not tile {n}")));
                    }
                    Ok((padded - kernel) / stride + 1)
                };
                shape = vec![out_channels, out(h)?, out(w)?];
                blocks.push(Block::Conv(AnalogConv2d::new(
                    c,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    chains,
                    &mut init,
                )?));
            }
            LayerSpec::MaxPool2d(k) => {
                let [c, h, w] = shape[..] else {
                    return Err(build_err(format!("layer {i}: pooling needs C×H×W, got {shape:?}")));
                };
                if k == 0 || k > h || k > w {
                    return Err(build_err(format!("layer {i}: pool {k} on {h}×{w}")));
                }
                shape = vec![c, h / k, w / k];
                blocks.push(Block::Pool(k));
                continue;
            }
            LayerSpec::Flatten => {
                shape = vec![shape.iter().product()];
                blocks.push(Block::Flatten);
                continue;
            }
            LayerSpec::Linear(out) => {
                let [n] = shape[..] else {
                    return Err(build_err(format!("layer {i}: linear needs a flat input, got {shape:?}")));
                };
                shape = vec![out];
                blocks.push(Block::Linear(AnalogLinear::new(n, out, chains, &mut init)?));
            }
        }
        analog_seen += 1;
        if analog_seen < analog_total && spec.activation != Activation::Identity {
            blocks.push(Block::Act(spec.activation));
        }
    }
    if shape != [spec.classes] {
        return Err(build_err(format!(
            "final shape {shape:?} does not match {} classes",
            spec.classes
        )));
    }
    Ok(Model {
        spec: spec.clone(),
        blocks,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Records the forward pass of a `[N×C×H×W]` batch. Layer `i` draws its
    /// chain noise from `rng.derive(i)`.
    pub fn forward(&mut self, g: &mut Graph, x: Var, rng: &RngStream) -> Result<Forward> {
        let mut cur = x;
        let mut params = Vec::new();
        let mut layer = 0u64;
        for block in &mut self.blocks {
            cur = match block {
                Block::Linear(l) => {
                    let (y, p) = l.forward(g, cur, &rng.derive(layer))?;
                    layer += 1;
                    params.extend(p);
                    y
                }
                Block::Conv(c) => {
                    let (y, p) = c.forward(g, cur, &rng.derive(layer))?;
                    layer += 1;
                    params.extend(p);
                    y
                }
                Block::Pool(k) => g.max_pool2d(cur, *k)?,
                Block::Flatten => g.flatten(cur)?,
                Block::Act(a) => a.record(g, cur)?,
            };
        }
        Ok(Forward {
            logits: cur,
            params,
        })
    }

    /// Logits for a batch, without keeping the graph.
    pub fn predict(&mut self, x: &Tensor, rng: &RngStream) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = self.forward(&mut g, xv, rng)?;
        Ok(g.value(f.logits).clone())
    }

    pub fn params(&self) -> Vec<&PseudoParameter> {
        self.blocks
            .iter()
            .flat_map(|b| match b {
                Block::Linear(l) => vec![&l.weight, &l.bias],
                Block::Conv(c) => vec![&c.kernel, &c.bias],
                _ => Vec::new(),
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut PseudoParameter> {
        self.blocks
            .iter_mut()
            .flat_map(|b| match b {
                Block::Linear(l) => vec![&mut l.weight, &mut l.bias],
                Block::Conv(c) => vec![&mut c.kernel, &mut c.bias],
                _ => Vec::new(),
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.raw().len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analog::{NormSpec, PrecisionSpec, RoundingMode};

    #[test]
    fn activation_values() {
        for a in Activation::ALL {
            assert_eq!(a.eval(0.0), 0.0, "{a}");
            assert_eq!(Activation::parse(a.name()).unwrap(), a);
        }
        assert!((Activation::Gelu.eval(1.0) - 0.8413447460685429).abs() < 1e-12);
        assert!((Activation::LeakyRelu.eval(-2.0) + 0.02).abs() < 1e-15);
        assert!((Activation::Elu.eval(-1.0) - ((-1f64).exp() - 1.0)).abs() < 1e-15);
        assert!(Activation::parse("swish").is_err());
        assert_eq!(Activation::parse("LeakyReLU").unwrap(), Activation::LeakyRelu);
    }

    #[test]
    fn activation_graph_matches_eval() {
        let x = Tensor::vector(vec![-2.0, -0.3, 0.0, 0.4, 1.7]).unwrap();
        for a in Activation::ALL {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let y = a.record(&mut g, xv).unwrap();
            assert_eq!(g.value(y), &a.apply(&x).unwrap(), "{a}");
        }
    }

    #[test]
    fn split_examples() {
        let (p, m) = incoherent_split(&Tensor::vector(vec![0.5, -0.3]).unwrap()).unwrap();
        assert_eq!(p.data(), &[0.5, 0.0]);
        assert_eq!(m.data(), &[0.0, 0.3]);
        let (_, m) = incoherent_split(&Tensor::vector(vec![0.0, 0.2, 1.0]).unwrap()).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preset_parameter_counts() {
        let mnist = [1, 28, 28];
        let count = |id: &str, input| {
            let spec = ModelSpec::preset(id, input, Activation::Relu).unwrap();
            build_model(&spec, &LayerChains::default(), &RngStream::new(0, 0))
                .unwrap()
                .parameter_count()
        };
        assert_eq!(count("1linear", mnist), 7850);
        assert_eq!(count("3linear", mnist), 784 * 256 + 256 + 256 * 128 + 128 + 1290);
        let cifar = count("cifar9", [3, 32, 32]);
        assert!((1_600_000..=1_800_000).contains(&cifar), "{cifar}");
        assert!(ModelSpec::preset("4linear", mnist, Activation::Relu).is_err());
    }

    #[test]
    fn build_rejects_bad_shapes() {
        let spec = ModelSpec {
            input: [1, 28, 28],
            layers: vec![LayerSpec::Linear(10)],
            activation: Activation::Relu,
            classes: 10,
        };
        assert!(build_model(&spec, &LayerChains::default(), &RngStream::new(0, 0)).is_err());
        let spec = ModelSpec {
            layers: vec![LayerSpec::Flatten, LayerSpec::Linear(7)],
            ..spec
        };
        assert!(build_model(&spec, &LayerChains::default(), &RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn activation_after_all_but_last() {
        let spec = ModelSpec::preset("3conv3linear", [1, 28, 28], Activation::Tanh).unwrap();
        let m = build_model(&spec, &LayerChains::default(), &RngStream::new(0, 0)).unwrap();
        let acts = m.blocks.iter().filter(|b| matches!(b, Block::Act(_))).count();
        assert_eq!(acts, 5);
        assert!(!matches!(m.blocks.last(), Some(Block::Act(_))));
    }

    #[test]
    fn conv_model_forward_smoke() {
        let spec = ModelSpec::preset("3conv3linear", [1, 28, 28], Activation::Relu).unwrap();
        let q = Some((PrecisionSpec::new(4).unwrap(), RoundingMode::Stochastic));
        let chains = LayerChains {
            input: TransformChain::input(NormSpec::clamp(), q, None),
            weight: TransformChain::weight(NormSpec::clamp(), q),
            output: TransformChain::output(None, NormSpec::clamp(), q),
        };
        let rng = RngStream::new(3, 0);
        let mut m = build_model(&spec, &chains, &rng).unwrap();
        let x = Tensor::full(vec![128, 1, 28, 28], 0.5).unwrap();
        let logits = m.predict(&x, &rng).unwrap();
        assert_eq!(logits.shape(), &[128, 10]);
    }

    #[test]
    fn init_within_analog_range() {
        let spec = ModelSpec::preset("2linear", [1, 28, 28], Activation::Relu).unwrap();
        let m = build_model(&spec, &LayerChains::default(), &RngStream::new(0, 0)).unwrap();
        let params = m.params();
        assert!(params[0].raw().max_abs() <= 1.0 / 28.0);
        assert!(params.iter().all(|p| p.raw().max_abs() <= 1.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::matrix(&[&[1.0, 2.0, 3.0], &[-50.0, 0.0, 50.0]]).unwrap();
        let s = softmax_rows(&x).unwrap();
        for row in s.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

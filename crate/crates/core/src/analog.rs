//! Analog signal transforms: normalization, reduced precision and noise.
//!
//! Every transform exists twice: as a plain function on [`Tensor`]s and as a
//! node recorded on a [`Graph`] by [`apply_chain_graph`]. Both paths draw
//! random numbers in the same order, so for the same [`RngStream`] they
//! produce identical values.

use std::fmt;

use crate::autodiff::{BackwardOverride, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::special;
use crate::tensor::Tensor;

/// Bit precision of a quantized signal: `p = 2^bits − 1` levels per unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionSpec {
    bits: u32,
    divide: f64,
}

impl PrecisionSpec {
    pub const MAX_BITS: u32 = 32;

    pub fn new(bits: u32) -> Result<Self> {
        if bits == 0 || bits > Self::MAX_BITS {
            return Err(Error::param(format!(
                "bit precision must be in 1..={}, got {bits}",
                Self::MAX_BITS
            )));
        }
        Ok(PrecisionSpec { bits, divide: 0.5 })
    }

    /// Sets the rounding threshold `d` in `[0, 1]`.
    pub fn with_divide(self, divide: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&divide) {
            return Err(Error::param(format!("divide must be in [0, 1], got {divide}")));
        }
        Ok(PrecisionSpec { divide, ..self })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn divide(&self) -> f64 {
        self.divide
    }

    /// `p = 2^bits − 1`.
    pub fn levels(&self) -> u64 {
        (1u64 << self.bits) - 1
    }

    pub fn step_width(&self) -> f64 {
        1.0 / self.levels() as f64
    }
}

/// Gaussian additive noise with standard deviation `sigma`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    sigma: f64,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::param(format!("noise sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(NoiseSpec { sigma })
    }

    /// Noise strength giving error probability `ep` at `bits` of precision.
    /// `ep == 0` is the noiseless case.
    pub fn from_ep(ep: f64, bits: u32) -> Result<Self> {
        if ep == 0.0 {
            return Self::gaussian(0.0);
        }
        Self::gaussian(sigma_from_ep(ep, bits)?)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    None,
    Clamp,
    /// Each leading-index slice divided by its own p-norm.
    LpNorm,
    /// Whole tensor divided by its p-norm.
    LpNormW,
    LpNormM,
    LpNormWM,
}

impl NormKind {
    pub const ALL: [NormKind; 6] = [
        NormKind::None,
        NormKind::Clamp,
        NormKind::LpNorm,
        NormKind::LpNormW,
        NormKind::LpNormM,
        NormKind::LpNormWM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::Clamp => "clamp",
            NormKind::LpNorm => "lp_norm",
            NormKind::LpNormW => "lp_norm_w",
            NormKind::LpNormM => "lp_norm_m",
            NormKind::LpNormWM => "lp_norm_wm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::param(format!("unknown normalization {s:?}")))
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormSpec {
    kind: NormKind,
    order: u32,
    lo: f64,
    hi: f64,
}

impl NormSpec {
    pub fn none() -> Self {
        NormSpec {
            kind: NormKind::None,
            order: 2,
            lo: -1.0,
            hi: 1.0,
        }
    }

    /// Clamp to `[-1, 1]`.
    pub fn clamp() -> Self {
        NormSpec {
            kind: NormKind::Clamp,
            ..Self::none()
        }
    }

    pub fn clamp_to(lo: f64, hi: f64) -> Result<Self> {
        check_bounds(lo, hi)?;
        Ok(NormSpec {
            kind: NormKind::Clamp,
            lo,
            hi,
            ..Self::none()
        })
    }

    pub fn lp(kind: NormKind, order: u32) -> Result<Self> {
        if order == 0 {
            return Err(Error::param("norm order must be >= 1"));
        }
        Ok(NormSpec {
            kind,
            order,
            ..Self::none()
        })
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RoundingMode {
    Deterministic,
    Stochastic,
}

impl RoundingMode {
    pub fn name(self) -> &'static str {
        match self {
            RoundingMode::Deterministic => "rp",
            RoundingMode::Stochastic => "srp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rp" => Ok(RoundingMode::Deterministic),
            "srp" => Ok(RoundingMode::Stochastic),
            _ => Err(Error::param(format!("unknown rounding mode {s:?} (rp|srp)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Normalize(NormSpec),
    ReducePrecision(PrecisionSpec, RoundingMode),
    Noise(NoiseSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Input,
    Weight,
    Output,
}

/// Backward rule used for the quantization and noise stages of a chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StraightThrough {
    /// Gradient passes unchanged.
    #[default]
    Identity,
    /// Gradient passes where the stage input lies in `[-1, 1]`, zero elsewhere.
    Clipped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformChain {
    role: Role,
    transforms: Vec<Transform>,
    straight_through: StraightThrough,
}

impl TransformChain {
    pub fn empty(role: Role) -> Self {
        TransformChain {
            role,
            transforms: Vec::new(),
            straight_through: StraightThrough::Identity,
        }
    }

    pub fn push(mut self, t: Transform) -> Self {
        self.transforms.push(t);
        self
    }

    pub fn with_straight_through(mut self, rule: StraightThrough) -> Self {
        self.straight_through = rule;
        self
    }

    /// Normalization, then reduce precision, then noise.
    pub fn input(
        norm: NormSpec,
        precision: Option<(PrecisionSpec, RoundingMode)>,
        noise: Option<NoiseSpec>,
    ) -> Self {
        let mut c = Self::empty(Role::Input);
        c.push_norm(norm);
        c.push_precision(precision);
        c.push_noise(noise);
        c
    }

    /// Noise, then normalization, then reduce precision.
    pub fn output(
        noise: Option<NoiseSpec>,
        norm: NormSpec,
        precision: Option<(PrecisionSpec, RoundingMode)>,
    ) -> Self {
        let mut c = Self::empty(Role::Output);
        c.push_noise(noise);
        c.push_norm(norm);
        c.push_precision(precision);
        c
    }

    /// Normalization, then reduce precision. Weight noise belongs in the
    /// output chain of the layer.
    pub fn weight(norm: NormSpec, precision: Option<(PrecisionSpec, RoundingMode)>) -> Self {
        let mut c = Self::empty(Role::Weight);
        c.push_norm(norm);
        c.push_precision(precision);
        c
    }

    fn push_norm(&mut self, norm: NormSpec) {
        if norm.kind != NormKind::None {
            self.transforms.push(Transform::Normalize(norm));
        }
    }

    fn push_precision(&mut self, precision: Option<(PrecisionSpec, RoundingMode)>) {
        if let Some((spec, mode)) = precision {
            self.transforms.push(Transform::ReducePrecision(spec, mode));
        }
    }

    fn push_noise(&mut self, noise: Option<NoiseSpec>) {
        if let Some(n) = noise.filter(|n| n.sigma > 0.0) {
            self.transforms.push(Transform::Noise(n));
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn straight_through(&self) -> StraightThrough {
        self.straight_through
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }
}

fn check_bounds(lo: f64, hi: f64) -> Result<()> {
    if lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(Error::param(format!("clamp bounds need lo <= hi, got ({lo}, {hi})")));
    }
    Ok(())
}

pub fn clamp(x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    check_bounds(lo, hi)?;
    x.map("clamp", |v| v.clamp(lo, hi))
}

fn p_norm(xs: &[f64], order: u32) -> f64 {
    match order {
        1 => xs.iter().map(|v| v.abs()).sum(),
        2 => xs.iter().map(|v| v * v).sum::<f64>().sqrt(),
        _ => {
            let p = order as f64;
            xs.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Length of one leading-index slice. Vectors (biases) form a single slice.
fn slice_len(x: &Tensor) -> usize {
    match x.shape() {
        [n, _, ..] => x.len() / n,
        _ => x.len(),
    }
}

fn divide_slices(x: &Tensor, chunk: usize, order: u32, op: &'static str) -> Result<Tensor> {
    let mut out = Vec::with_capacity(x.len());
    for (i, s) in x.data().chunks(chunk).enumerate() {
        let n = p_norm(s, order);
        if n == 0.0 {
            return Err(Error::degenerate(op, format!("slice {i} is all zeros")));
        }
        out.extend(s.iter().map(|v| v / n));
    }
    Tensor::new(x.shape().to_vec(), out).map_err(|_| Error::NonFinite { op })
}

fn divide_max_abs(x: Tensor, op: &'static str) -> Result<Tensor> {
    let m = x.max_abs();
    if m == 0.0 {
        return Err(Error::degenerate(op, "all elements are zero"));
    }
    x.map(op, |v| v / m)
}

pub fn lp_norm_w(x: &Tensor, order: u32) -> Result<Tensor> {
    divide_slices(x, x.len(), order, "lp_norm_w")
}

pub fn lp_norm_wm(x: &Tensor, order: u32) -> Result<Tensor> {
    divide_max_abs(lp_norm_w(x, order)?, "lp_norm_wm")
}

pub fn lp_norm(x: &Tensor, order: u32) -> Result<Tensor> {
    divide_slices(x, slice_len(x), order, "lp_norm")
}

pub fn lp_norm_m(x: &Tensor, order: u32) -> Result<Tensor> {
    divide_max_abs(lp_norm(x, order)?, "lp_norm_m")
}

pub fn normalize(x: &Tensor, spec: &NormSpec) -> Result<Tensor> {
    match spec.kind {
        NormKind::None => Ok(x.clone()),
        NormKind::Clamp => clamp(x, spec.lo, spec.hi),
        NormKind::LpNorm => lp_norm(x, spec.order),
        NormKind::LpNormW => lp_norm_w(x, spec.order),
        NormKind::LpNormM => lp_norm_m(x, spec.order),
        NormKind::LpNormWM => lp_norm_wm(x, spec.order),
    }
}

/// `|x|·p`, snapped onto the nearest integer when within a few ulps of it so
/// that grid values computed as `k/p` are recognized as exact levels.
fn scaled_magnitude(x: f64, p: f64) -> f64 {
    let g = x.abs() * p;
    let n = floor_nonneg(g + 0.5);
    if (g - n).abs() <= 4.0 * f64::EPSILON * n.max(1.0) {
        n
    } else {
        g
    }
}

/// `floor` for `g >= 0` without a libm call; NaN passes through.
fn floor_nonneg(g: f64) -> f64 {
    // Every f64 at or above 2^52 is already an integer.
    if g < 4_503_599_627_370_496.0 {
        (g as i64) as f64
    } else {
        g
    }
}

fn rp_scalar(x: f64, p: f64, d: f64) -> f64 {
    let g = scaled_magnitude(x, p);
    let lower = floor_nonneg(g);
    let k = lower + f64::from(u8::from(g - lower > d));
    x.signum() * k / p
}

fn srp_scalar(x: f64, p: f64, r: f64) -> f64 {
    let g = scaled_magnitude(x, p);
    let lower = floor_nonneg(g);
    let k = lower + f64::from(u8::from(r < g - lower));
    x.signum() * k / p
}

pub fn reduce_precision(x: &Tensor, spec: &PrecisionSpec) -> Result<Tensor> {
    let (p, d) = (spec.levels() as f64, spec.divide);
    x.map("reduce_precision", |v| rp_scalar(v, p, d))
}

/// Rounds up with probability equal to the fractional part, else down.
pub fn stochastic_reduce_precision(
    x: &Tensor,
    spec: &PrecisionSpec,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let p = spec.levels() as f64;
    x.map("stochastic_reduce_precision", |v| srp_scalar(v, p, rng.uniform()))
}

pub fn gaussian_noise(x: &Tensor, spec: &NoiseSpec, rng: &mut RngStream) -> Result<Tensor> {
    if spec.sigma == 0.0 {
        return Ok(x.clone());
    }
    let s = spec.sigma;
    x.map("gaussian_noise", |v| v + s * rng.normal())
}

/// Fixed points of [`reduce_precision`] within `[a, b]`, ascending.
pub fn representable_values(spec: &PrecisionSpec, a: f64, b: f64) -> Result<Vec<f64>> {
    if a.is_nan() || b.is_nan() || a >= b {
        return Err(Error::param(format!("need a < b, got [{a}, {b}]")));
    }
    let p = spec.levels() as f64;
    let lo = (a * p).ceil() as i64;
    let hi = (b * p).floor() as i64;
    let (d, levels) = (spec.divide, spec.levels());
    Ok((lo..=hi)
        .map(|k| k as f64 / levels as f64)
        .filter(|&v| (a..=b).contains(&v) && rp_scalar(v, p, d) == v)
        .collect())
}

fn check_bits(bits: u32) -> Result<f64> {
    Ok(PrecisionSpec::new(bits)?.levels() as f64)
}

/// Probability that noise of strength `sigma` moves a `bits`-bit value to a
/// different level. Zero for `sigma <= 0`.
pub fn ep_from_sigma(sigma: f64, bits: u32) -> Result<f64> {
    let p = check_bits(bits)?;
    if sigma.is_nan() {
        return Err(Error::param("sigma is NaN"));
    }
    if sigma <= 0.0 {
        return Ok(0.0);
    }
    // 1 − erf(z) written as erfc(z) to keep precision for small EP.
    Ok(special::erfc(1.0 / (2.0 * std::f64::consts::SQRT_2 * sigma * p)))
}

/// Inverse of [`ep_from_sigma`] for `ep` in `(0, 1)`.
pub fn sigma_from_ep(ep: f64, bits: u32) -> Result<f64> {
    let p = check_bits(bits)?;
    if !(ep > 0.0 && ep < 1.0) {
        return Err(Error::param(format!("error probability must be in (0, 1), got {ep}")));
    }
    // erf⁻¹(1 − EP) == erfc⁻¹(EP)
    Ok(1.0 / (2.0 * std::f64::consts::SQRT_2 * p * special::erfc_inv(ep)))
}

/// Applies `chain` to a plain tensor. The i-th transform draws from
/// `rng.derive(i)`.
pub fn apply_chain(x: &Tensor, chain: &TransformChain, rng: &RngStream) -> Result<Tensor> {
    let mut cur = x.clone();
    for (i, t) in chain.transforms.iter().enumerate() {
        cur = match t {
            Transform::Normalize(spec) => normalize(&cur, spec)?,
            Transform::ReducePrecision(spec, RoundingMode::Deterministic) => {
                reduce_precision(&cur, spec)?
            }
            Transform::ReducePrecision(spec, RoundingMode::Stochastic) => {
                stochastic_reduce_precision(&cur, spec, &mut rng.derive(i as u64))?
            }
            Transform::Noise(spec) => gaussian_noise(&cur, spec, &mut rng.derive(i as u64))?,
        };
    }
    Ok(cur)
}

fn zero_grad(g: &Tensor) -> Result<Vec<Tensor>> {
    Ok(vec![Tensor::zeros(g.shape().to_vec())?])
}

fn straight_through_rule(rule: StraightThrough) -> BackwardOverride {
    match rule {
        StraightThrough::Identity => BackwardOverride::Identity,
        StraightThrough::Clipped => BackwardOverride::Rule(Box::new(|g, parents, _| {
            Ok(vec![g.zip_map(parents[0], "clipped straight-through", |a, x| {
                if (-1.0..=1.0).contains(&x) {
                    a
                } else {
                    0.0
                }
            })?])
        })),
    }
}

/// Gradient of `y = x / ‖x‖` per slice, given `y` and the slice norms.
fn norm_backward(g: &Tensor, y: &Tensor, norms: &[f64], chunk: usize, order: u32) -> Tensor {
    let mut out = Vec::with_capacity(y.len());
    for ((gs, ys), &n) in g.data().chunks(chunk).zip(y.data().chunks(chunk)).zip(norms) {
        let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
        out.extend(gs.iter().zip(ys).map(|(&gi, &yi)| {
            let s = sign(yi) * yi.abs().powi(order as i32 - 1);
            (gi - dot * s) / n
        }));
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

fn record_lp(g: &mut Graph, x: Var, order: u32, whole: bool) -> Result<Var> {
    let xv = g.value(x);
    let chunk = if whole { xv.len() } else { slice_len(xv) };
    let op = if whole { "lp_norm_w" } else { "lp_norm" };
    let y = divide_slices(xv, chunk, order, op)?;
    g.custom(
        &[x],
        y,
        op,
        Box::new(move |grad, parents, out| {
            let norms: Vec<f64> = parents[0]
                .data()
                .chunks(chunk)
                .map(|s| p_norm(s, order))
                .collect();
            Ok(vec![norm_backward(grad, out, &norms, chunk, order)])
        }),
    )
}

fn record_max_abs(g: &mut Graph, y: Var, op: &'static str) -> Result<Var> {
    let z = divide_max_abs(g.value(y).clone(), op)?;
    g.custom(
        &[y],
        z,
        op,
        Box::new(|grad, parents, out| {
            let y = parents[0].data();
            let k = crate::tensor::argmax(&y.iter().map(|v| v.abs()).collect::<Vec<_>>());
            let m = y[k].abs();
            let dot: f64 = grad.data().iter().zip(out.data()).map(|(a, b)| a * b).sum();
            let mut d: Vec<f64> = grad.data().iter().map(|v| v / m).collect();
            d[k] -= sign(y[k]) * dot / m;
            Ok(vec![Tensor::from_parts(out.shape().to_vec(), d)])
        }),
    )
}

fn record_norm(g: &mut Graph, x: Var, spec: &NormSpec) -> Result<Var> {
    match spec.kind {
        NormKind::None => Ok(x),
        NormKind::Clamp => {
            let (lo, hi) = (spec.lo, spec.hi);
            let y = clamp(g.value(x), lo, hi)?;
            g.custom(
                &[x],
                y,
                "clamp",
                Box::new(move |grad, parents, _| {
                    Ok(vec![grad.zip_map(parents[0], "clamp", |a, v| {
                        if (lo..=hi).contains(&v) {
                            a
                        } else {
                            0.0
                        }
                    })?])
                }),
            )
        }
        NormKind::LpNorm => record_lp(g, x, spec.order, false),
        NormKind::LpNormW => record_lp(g, x, spec.order, true),
        NormKind::LpNormM => {
            let y = record_lp(g, x, spec.order, false)?;
            record_max_abs(g, y, "lp_norm_m")
        }
        NormKind::LpNormWM => {
            let y = record_lp(g, x, spec.order, true)?;
            record_max_abs(g, y, "lp_norm_wm")
        }
    }
}

/// Records `chain` on the tape. Quantization and noise nodes carry their true
/// (zero or identity) gradient as `forward_op` and the chain's
/// straight-through rule as an override.
pub fn apply_chain_graph(
    g: &mut Graph,
    x: Var,
    chain: &TransformChain,
    rng: &RngStream,
) -> Result<Var> {
    let mut cur = x;
    for (i, t) in chain.transforms.iter().enumerate() {
        cur = match t {
            Transform::Normalize(spec) => record_norm(g, cur, spec)?,
            Transform::ReducePrecision(spec, mode) => {
                let value = match mode {
                    RoundingMode::Deterministic => reduce_precision(g.value(cur), spec)?,
                    RoundingMode::Stochastic => stochastic_reduce_precision(
                        g.value(cur),
                        spec,
                        &mut rng.derive(i as u64),
                    )?,
                };
                let name = match mode {
                    RoundingMode::Deterministic => "reduce_precision",
                    RoundingMode::Stochastic => "stochastic_reduce_precision",
                };
                let v = g.custom(&[cur], value, name, Box::new(|grad, _, _| zero_grad(grad)))?;
                g.set_backward_override(v, straight_through_rule(chain.straight_through))?;
                v
            }
            Transform::Noise(spec) => {
                let value = gaussian_noise(g.value(cur), spec, &mut rng.derive(i as u64))?;
                let v = g.custom(
                    &[cur],
                    value,
                    "gaussian_noise",
                    Box::new(|grad, _, _| Ok(vec![grad.clone()])),
                )?;
                g.set_backward_override(v, straight_through_rule(chain.straight_through))?;
                v
            }
        };
    }
    Ok(cur)
}

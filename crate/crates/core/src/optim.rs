//! First-order optimizers operating on the raw values of [`PseudoParameter`]s.

use crate::error::{Error, Result};
use crate::pseudo_param::PseudoParameter;
use crate::tensor::Tensor;

/// Per-parameter update rule. Each parameter owns a `slot` index that keys
/// its optimizer state; call [`begin_step`](Optimizer::begin_step) once per
/// step before the updates.
pub trait Optimizer {
    fn begin_step(&mut self);
    fn update(&mut self, slot: usize, raw: &mut [f64], grad: &[f64]);
}

/// One optimizer step over `params`, `grads[i]` belonging to `params[i]`.
pub fn step_all<'a>(
    opt: &mut dyn Optimizer,
    params: impl IntoIterator<Item = &'a mut PseudoParameter>,
    grads: &[Tensor],
) -> Result<()> {
    opt.begin_step();
    let mut n = 0;
    for (slot, p) in params.into_iter().enumerate() {
        let g = grads.get(slot).ok_or_else(|| {
            Error::Contract(format!("no gradient for parameter {slot} ({})", p.name()))
        })?;
        p.step(opt, slot, g)?;
        n += 1;
    }
    if n != grads.len() {
        return Err(Error::Contract(format!("{} gradients for {n} parameters", grads.len())));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }
}

impl Optimizer for Sgd {
    fn begin_step(&mut self) {}

    fn update(&mut self, _slot: usize, raw: &mut [f64], grad: &[f64]) {
        for (w, g) in raw.iter_mut().zip(grad) {
            *w -= self.lr * g;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction; weight decay is added to the gradient.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            ..Default::default()
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// `(first moments, second moments)` per slot.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores state saved from [`t`](Self::t) and [`moments`](Self::moments).
    pub fn restore(&mut self, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Contract("Adam moment shapes disagree".into()));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

impl Optimizer for Adam {
    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn update(&mut self, slot: usize, raw: &mut [f64], grad: &[f64]) {
        if self.m.len() <= slot {
            self.m.resize(slot + 1, Vec::new());
            self.v.resize(slot + 1, Vec::new());
        }
        if self.m[slot].len() != raw.len() {
            self.m[slot] = vec![0.0; raw.len()];
            self.v[slot] = vec![0.0; raw.len()];
        }
        let c = self.config;
        let t = self.t.max(1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..raw.len() {
            let g = grad[i] + c.weight_decay * raw[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            raw[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

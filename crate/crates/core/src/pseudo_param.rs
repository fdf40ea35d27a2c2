//! Full-precision shadow weights seen through an analog weight chain.

use crate::analog::{apply_chain, apply_chain_graph, Role, TransformChain};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// A trainable tensor whose forward value is `chain(raw)`.
///
/// The optimizer only ever touches `raw`; the transformed value is recomputed
/// on every forward pass, and gradients reach `raw` through the chain's
/// straight-through rules.
#[derive(Clone, Debug)]
pub struct PseudoParameter {
    name: String,
    raw: Tensor,
    chain: TransformChain,
    cached: Option<Tensor>,
}

impl PseudoParameter {
    pub fn new(name: impl Into<String>, raw: Tensor, chain: TransformChain) -> Self {
        PseudoParameter {
            name: name.into(),
            raw,
            chain,
            cached: None,
        }
    }

    /// Parameter with an empty chain, equivalent to a plain trainable tensor.
    pub fn plain(name: impl Into<String>, raw: Tensor) -> Self {
        Self::new(name, raw, TransformChain::empty(Role::Weight))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn raw(&self) -> &Tensor {
        &self.raw
    }

    pub fn chain(&self) -> &TransformChain {
        &self.chain
    }

    /// Value produced by the most recent forward pass, if any.
    pub fn cached_transformed(&self) -> Option<&Tensor> {
        self.cached.as_ref()
    }

    /// Replaces the shadow values, e.g. when restoring a checkpoint.
    pub fn set_raw(&mut self, raw: Tensor) -> Result<()> {
        if raw.shape() != self.raw.shape() {
            return Err(Error::dim(
                "set_raw",
                format!("{} expects {:?}, got {:?}", self.name, self.raw.shape(), raw.shape()),
            ));
        }
        self.raw = raw;
        self.cached = None;
        Ok(())
    }

    pub(crate) fn raw_data_mut(&mut self) -> &mut [f64] {
        self.cached = None;
        self.raw.data_mut()
    }

    /// `chain(raw)` without recording a graph.
    pub fn forward_value(&mut self, rng: &RngStream) -> Result<Tensor> {
        let v = apply_chain(&self.raw, &self.chain, rng)?;
        self.cached = Some(v.clone());
        Ok(v)
    }

    /// Records `raw` as a leaf and the chain on top of it. Returns
    /// `(raw leaf, transformed)`; gradients for the optimizer are read at the leaf.
    pub fn record(&mut self, g: &mut Graph, rng: &RngStream) -> Result<(Var, Var)> {
        let leaf = g.param(self.raw.clone());
        let out = apply_chain_graph(g, leaf, &self.chain, rng)?;
        self.cached = Some(g.value(out).clone());
        Ok((leaf, out))
    }

    /// Single-parameter optimizer update; `slot` identifies this parameter's
    /// state inside `opt`.
    pub fn step(&mut self, opt: &mut dyn Optimizer, slot: usize, grad: &Tensor) -> Result<()> {
        if grad.shape() != self.raw.shape() {
            return Err(Error::dim(
                "PseudoParameter::step",
                format!("{}: grad {:?} vs raw {:?}", self.name, grad.shape(), self.raw.shape()),
            ));
        }
        opt.update(slot, self.raw_data_mut(), grad.data());
        Ok(())
    }
}

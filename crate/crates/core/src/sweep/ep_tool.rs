//! Text front end for the EP ↔ σ relation.

use std::fmt::Write as _;

use crate::analog::{ep_from_sigma, sigma_from_ep};
use crate::error::{Error, Result};

/// `EP` for noise `sigma` at `bits`.
pub fn ep_text(sigma: f64, bits: u32) -> Result<String> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::param(format!("sigma must be >= 0, got {sigma}")));
    }
    Ok(format!("{:.6}\n", ep_from_sigma(sigma, bits)?))
}

/// `σ` giving error probability `ep` at `bits`.
pub fn sigma_text(ep: f64, bits: u32) -> Result<String> {
    Ok(format!("{:.6}\n", sigma_from_ep(ep, bits)?))
}

/// σ for every `(bits, ep)` pair: one row per precision, one column per EP.
pub fn table_text(bits: &[u32], eps: &[f64]) -> Result<String> {
    let mut out = String::from("bits");
    for ep in eps {
        write!(out, "  {:>10}", format!("EP={ep}")).ok();
    }
    out.push('\n');
    for &b in bits {
        write!(out, "{b:>4}").ok();
        for &ep in eps {
            write!(out, "  {:>10.6}", sigma_from_ep(ep, b)?).ok();
        }
        out.push('\n');
    }
    Ok(out)
}

pub const DEFAULT_TABLE_BITS: [u32; 6] = [1, 2, 3, 4, 5, 6];
pub const DEFAULT_TABLE_EPS: [f64; 6] = [0.05, 0.1, 0.25, 0.5, 0.75, 0.8];

//! Error probability of Gaussian noise on a quantized signal, and its inverse.
//!
//!     cargo run --example ep_table

use analog_nn::analog::{ep_from_sigma, sigma_from_ep};
use analog_nn::sweep::ep_tool::{table_text, DEFAULT_TABLE_BITS, DEFAULT_TABLE_EPS};

fn main() {
    print!("{}", table_text(&DEFAULT_TABLE_BITS, &DEFAULT_TABLE_EPS).unwrap());

    let sigma = sigma_from_ep(0.5, 4).unwrap();
    let back = ep_from_sigma(sigma, 4).unwrap();
    println!("\n4 bits: EP 0.5 -> sigma {sigma:.6} -> EP {back:.6}");
}

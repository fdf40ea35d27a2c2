//! Splitting a signed signal into two non-negative rails, as an optical
//! system with intensity-only signals would.
//!
//!     cargo run --example incoherent_split

use analog_nn::nn::incoherent_split;
use analog_nn::tensor::Tensor;

fn main() {
    let w = Tensor::new(vec![2, 3], vec![0.5, -0.25, 1.0, -1.0, 0.75, 0.2]).unwrap();
    let y = Tensor::new(vec![3, 1], vec![0.8, -0.6, 0.3]).unwrap();
    let (plus, minus) = incoherent_split(&y).unwrap();
    let direct = w.matmul(&y).unwrap();
    let rails = w.matmul(&plus).unwrap().zip_map(&w.matmul(&minus).unwrap(), "sub", |a, b| a - b).unwrap();
    println!("y+      {:?}", plus.data());
    println!("y-      {:?}", minus.data());
    println!("W y     {:?}", direct.data());
    println!("W y+ - W y-  {:?}", rails.data());
}

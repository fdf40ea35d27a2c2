use std::path::Path;

use analog_nn::data::{write_idx, Dataset};
use analog_nn::rng::RngStream;
use analog_nn::tensor::Tensor;

/// Writes a small MNIST-shaped set under `root/mnist`: class `c` lights up
/// a horizontal band of the image, plus pixel noise.
pub fn write_synthetic_mnist(root: &Path, train: usize, test: usize) {
    let dir = root.join("mnist");
    std::fs::create_dir_all(&dir).unwrap();
    for (n, seed, prefix) in [(train, 1, "train"), (test, 2, "t10k")] {
        let mut rng = RngStream::new(seed, 0);
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let mut px = Vec::with_capacity(n * 784);
        for &c in &labels {
            for r in 0..28 {
                let band = r / 3 == usize::from(c) % 9 + usize::from(c == 9);
                for _ in 0..28 {
                    let v = if band { 0.6 + 0.4 * rng.uniform() } else { 0.3 * rng.uniform() };
                    px.push((v * 255.0).round() / 255.0);
                }
            }
        }
        let images = Tensor::new(vec![n, 1, 28, 28], px).unwrap();
        let ds = Dataset::from_tensor(prefix, &images, labels).unwrap();
        write_idx(&ds, dir.join(format!("{prefix}-images-idx3-ubyte")), dir.join(format!("{prefix}-labels-idx1-ubyte"))).unwrap();
    }
}

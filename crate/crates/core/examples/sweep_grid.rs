//! A 3x3 precision grid run in parallel, interrupted and resumed, then summarized.
//! Uses a small synthetic dataset so it finishes in seconds.
//!
//!     cargo run --release --example sweep_grid

mod common;

use analog_nn::sweep::report::report;
use analog_nn::sweep::{run_sweep, ConfigFile, SweepOptions};

const GRID: &str = r#"
dataset = "mnist"
model = "2linear"
epochs = 2
batch_size = 32
lr = 0.01
rp_mode = "srp"
norm_y = "clamp"
norm_w = "clamp"
ep_y = 0.2

[grid]
bits_w = [2, 4, 6]
bits_y = [2, 4, 6]
"#;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    common::write_synthetic_mnist(dir.path(), 600, 200);
    let trials = ConfigFile::parse(GRID).unwrap().expand().unwrap();
    let opts = SweepOptions { jobs: 4, data_dir: dir.path().to_path_buf(), out: dir.path().join("results.csv"), log_dir: None };

    let first = run_sweep(&trials[..4], &opts).unwrap();
    println!("first pass: {} of {} trials", first.ok, trials.len());
    let second = run_sweep(&trials, &opts).unwrap();
    println!("second pass: {} skipped, {} run", second.skipped, second.ok + second.diverged + second.failed);

    print!("{}", report(&opts.out, Some("bits_w"), None).unwrap());
    print!("{}", report(&opts.out, Some("bits_y"), None).unwrap());
}

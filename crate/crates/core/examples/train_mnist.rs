//! One analog trial on MNIST: 3-layer MLP, 4-bit weights and signals with
//! stochastic rounding, noise at EP 0.25.
//!
//!     cargo run --release --example train_mnist -- [data_dir] [epochs]

use std::path::PathBuf;

use analog_nn::sweep::checkpoint::EpochMetrics;
use analog_nn::sweep::{run_trial, Bits, TrialConfig, TrialData, TrialOptions};

fn progress(_: &TrialConfig, epoch: u64, m: &EpochMetrics) {
    println!("epoch {epoch}: train loss {:.4}, eval loss {:.4}, eval acc {:.2}%", m.train_loss, m.eval_loss, m.eval_acc);
}

fn main() {
    let mut args = std::env::args().skip(1);
    let data_dir = args.next().map_or_else(|| PathBuf::from("data"), PathBuf::from);
    let epochs = args.next().map_or(3, |s| s.parse().expect("epochs"));
    let cfg = TrialConfig {
        model: "3linear".into(),
        norm_y: "clamp".into(),
        norm_w: "clamp".into(),
        bits_y: Bits::N(4),
        bits_w: Bits::N(4),
        rp_mode: "srp".into(),
        ep_y: 0.25,
        epochs,
        ..TrialConfig::default()
    };
    let data = match TrialData::for_config(&cfg, &data_dir) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(2);
        }
    };
    let opts = TrialOptions { progress: Some(progress), ..TrialOptions::default() };
    let r = run_trial(&cfg, &data, &opts).unwrap();
    println!("{}: max eval acc {:.2}%, test acc {:.2}%, {:.1}s", r.status.name(), r.max_eval_acc, r.official_test_acc, r.seconds);
}

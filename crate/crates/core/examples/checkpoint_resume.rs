//! Stop a trial part way, resume it from its checkpoint, and compare with an
//! uninterrupted run.
//!
//!     cargo run --release --example checkpoint_resume

mod common;

use analog_nn::sweep::checkpoint::Checkpoint;
use analog_nn::sweep::{run_trial, Bits, TrialConfig, TrialData, TrialOptions};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    common::write_synthetic_mnist(dir.path(), 600, 200);
    let cfg = TrialConfig {
        model: "2linear".into(),
        bits_w: Bits::N(3),
        rp_mode: "srp".into(),
        norm_w: "clamp".into(),
        ep_y: 0.2,
        epochs: 4,
        batch_size: 32,
        lr: 0.01,
        ..TrialConfig::default()
    };
    let data = TrialData::for_config(&cfg, dir.path()).unwrap();
    let ck = dir.path().join("trial");

    let partial = run_trial(&cfg, &data, &TrialOptions { checkpoint: Some(ck.clone()), stop_after: Some(2), ..TrialOptions::default() }).unwrap();
    let saved = Checkpoint::load(&ck).unwrap();
    println!("stopped after epoch {} ({} epochs recorded, {} tensors saved)", saved.epoch, partial.history.len(), saved.tensors.len());

    let resumed = run_trial(&cfg, &data, &TrialOptions { checkpoint: Some(ck), ..TrialOptions::default() }).unwrap();
    let straight = run_trial(&cfg, &data, &TrialOptions::default()).unwrap();
    println!("resumed:       test acc {:.2}%", resumed.official_test_acc);
    println!("uninterrupted: test acc {:.2}%", straight.official_test_acc);
    println!("identical histories: {}", resumed.history == straight.history);
}

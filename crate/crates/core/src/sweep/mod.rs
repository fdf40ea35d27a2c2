//! Config-driven experiment runner: single trials, grids, results CSV,
//! checkpoints and reporting.

pub mod checkpoint;
pub mod config;
pub mod ep_tool;
pub mod report;
pub mod results;
pub mod trial;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

pub use config::{Bits, ConfigFile, TrialConfig, WeightNoise};
pub use results::ResultsCsv;
pub use trial::{run_trial, TrialData, TrialOptions, TrialResult, TrialStatus};

use crate::data::DatasetKind;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub jobs: usize,
    pub data_dir: PathBuf,
    pub out: PathBuf,
    /// Write `<hash>.log` with per-epoch metrics for every trial.
    pub log_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SweepSummary {
    pub total: usize,
    pub skipped: usize,
    pub ok: usize,
    pub diverged: usize,
    pub failed: usize,
}

type DataKey = (DatasetKind, u64, u64);

fn data_key(cfg: &TrialConfig) -> Result<DataKey> {
    Ok((cfg.dataset_kind()?, cfg.split_seed, cfg.train_fraction.to_bits()))
}

/// Loads every distinct dataset/split used by `trials` once.
pub fn load_data(trials: &[TrialConfig], data_dir: &Path) -> Result<HashMap<DataKey, Arc<TrialData>>> {
    let mut cache: HashMap<DatasetKind, (crate::data::Dataset, crate::data::Dataset)> = HashMap::new();
    let mut out = HashMap::new();
    for cfg in trials {
        let key = data_key(cfg)?;
        if out.contains_key(&key) {
            continue;
        }
        if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(key.0) {
            e.insert(key.0.load(data_dir)?);
        }
        let (train, test) = &cache[&key.0];
        out.insert(key, Arc::new(TrialData::new(train, test.clone(), &cfg.split_plan())?));
    }
    Ok(out)
}

fn trial_log(r: &TrialResult) -> String {
    let mut s = format!("{}\nstatus {}\n", r.config.canonical_text(), r.status.name());
    for (e, h) in r.history.iter().enumerate() {
        s += &format!(
            "epoch {} train_loss {:.6} eval_loss {:.6} eval_acc {:.2}\n",
            e + 1,
            h.train_loss,
            h.eval_loss,
            h.eval_acc
        );
    }
    s += &format!("max_eval_acc {:.2}\nofficial_test_acc {:.2}\nseconds {:.1}\n", r.max_eval_acc, r.official_test_acc, r.seconds);
    s
}

/// Runs one trial, turning errors and panics into a non-ok result row.
fn isolated(cfg: &TrialConfig, data: &TrialData) -> TrialResult {
    let start = std::time::Instant::now();
    match catch_unwind(AssertUnwindSafe(|| run_trial(cfg, data, &TrialOptions::default()))) {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => {
            log::error!("{}: {e}", cfg.hash());
            TrialResult::from_error(cfg, &e, Vec::new(), start.elapsed().as_secs_f64())
        }
        Err(_) => {
            log::error!("{}: worker panicked", cfg.hash());
            let e = Error::Contract("worker panicked".into());
            TrialResult::from_error(cfg, &e, Vec::new(), start.elapsed().as_secs_f64())
        }
    }
}

/// Runs every trial not already recorded in `opts.out`, `opts.jobs` at a
/// time. Rows are appended as trials finish.
pub fn run_sweep(trials: &[TrialConfig], opts: &SweepOptions) -> Result<SweepSummary> {
    let csv = ResultsCsv::open(&opts.out)?;
    let done = csv.completed()?;
    let mut seen = done.clone();
    let todo: Vec<&TrialConfig> = trials.iter().filter(|t| seen.insert(t.hash())).collect();
    let mut summary = SweepSummary {
        total: trials.len(),
        skipped: trials.len() - todo.len(),
        ..Default::default()
    };
    if todo.is_empty() {
        return Ok(summary);
    }
    let owned: Vec<TrialConfig> = todo.iter().map(|t| (*t).clone()).collect();
    let data = load_data(&owned, &opts.data_dir)?;
    if let Some(dir) = &opts.log_dir {
        std::fs::create_dir_all(dir)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Result<TrialStatus>> = pool.install(|| {
        owned
            .par_iter()
            .map(|cfg| {
                let d = &data[&data_key(cfg)?];
                let r = isolated(cfg, d);
                log::info!(
                    "{} {} max_eval_acc {:.2} ({:.1}s)",
                    r.config_hash,
                    r.status.name(),
                    r.max_eval_acc,
                    r.seconds
                );
                csv.append(&r)?;
                if let Some(dir) = &opts.log_dir {
                    std::fs::write(dir.join(format!("{}.log", r.config_hash)), trial_log(&r))?;
                }
                Ok(r.status)
            })
            .collect()
    });
    for s in results {
        match s? {
            TrialStatus::Ok => summary.ok += 1,
            TrialStatus::Diverged => summary.diverged += 1,
            TrialStatus::Failed => summary.failed += 1,
        }
    }
    Ok(summary)
}

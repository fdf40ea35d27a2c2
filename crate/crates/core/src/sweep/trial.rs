//! One train/eval run of a [`TrialConfig`].

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::Graph;
use crate::data::{batches, sequential_batches, split, Dataset, DatasetKind, SplitPlan};
use crate::error::{Error, Result};
use crate::nn::{build_model, Model};
use crate::optim::{step_all, Adam};
use crate::rng::{label, RngStream};
use crate::sweep::checkpoint::{Checkpoint, EpochMetrics};
use crate::sweep::config::TrialConfig;
use crate::tensor::Tensor;

/// Train/eval split of the official training set plus the official test set.
#[derive(Clone, Debug)]
pub struct TrialData {
    pub train: Dataset,
    pub eval: Dataset,
    pub test: Dataset,
}

impl TrialData {
    pub fn new(full_train: &Dataset, test: Dataset, plan: &SplitPlan) -> Result<Self> {
        let (train, eval) = split(full_train, plan)?;
        Ok(TrialData { train, eval, test })
    }

    pub fn load(kind: DatasetKind, data_dir: &Path, plan: &SplitPlan) -> Result<Self> {
        let (train, test) = kind.load(data_dir)?;
        Self::new(&train, test, plan)
    }

    /// Data for `cfg` from `data_dir`.
    pub fn for_config(cfg: &TrialConfig, data_dir: &Path) -> Result<Self> {
        Self::load(cfg.dataset_kind()?, data_dir, &cfg.split_plan())
    }
}

impl TrialConfig {
    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            train_fraction: self.train_fraction,
            seed: self.split_seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrialStatus {
    Ok,
    /// Loss or an intermediate value became non-finite.
    Diverged,
    /// Any other runtime error, e.g. a normalization of an all-zero slice.
    Failed,
}

impl TrialStatus {
    pub fn name(self) -> &'static str {
        match self {
            TrialStatus::Ok => "ok",
            TrialStatus::Diverged => "diverged",
            TrialStatus::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [TrialStatus::Ok, TrialStatus::Diverged, TrialStatus::Failed]
            .into_iter()
            .find(|t| t.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub config: TrialConfig,
    pub config_hash: String,
    pub history: Vec<EpochMetrics>,
    /// Percent; NaN when no epoch finished.
    pub max_eval_acc: f64,
    /// Percent, measured once on the final model; NaN unless `status` is ok.
    pub official_test_acc: f64,
    pub seconds: f64,
    pub status: TrialStatus,
}

impl TrialResult {
    /// Result row for a trial that stopped with `err`.
    pub fn from_error(config: &TrialConfig, err: &Error, history: Vec<EpochMetrics>, seconds: f64) -> Self {
        let status = match err {
            Error::Divergence(_) | Error::NonFinite { .. } => TrialStatus::Diverged,
            _ => TrialStatus::Failed,
        };
        TrialResult {
            config: config.clone(),
            config_hash: config.hash(),
            max_eval_acc: max_acc(&history),
            history,
            official_test_acc: f64::NAN,
            seconds,
            status,
        }
    }
}

fn max_acc(history: &[EpochMetrics]) -> f64 {
    history.iter().map(|h| h.eval_acc).fold(f64::NAN, f64::max)
}

/// Knobs that do not change a trial's outcome.
#[derive(Clone, Debug, Default)]
pub struct TrialOptions {
    /// Save after every epoch and resume from here when the hash matches.
    pub checkpoint: Option<PathBuf>,
    /// Called after each epoch with `(epoch, metrics)`.
    pub progress: Option<fn(&TrialConfig, u64, &EpochMetrics)>,
    /// Stop after this many epochs in this process (for resumability tests).
    pub stop_after: Option<u64>,
}

fn limited(ds: &Dataset, limit: Option<usize>) -> Result<Option<Dataset>> {
    match limit {
        Some(n) if n < ds.len() => {
            let idx: Vec<usize> = (0..n).collect();
            Ok(Some(ds.subset(&idx, ds.name().to_string())?))
        }
        _ => Ok(None),
    }
}

fn diverged(e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence(format!("{op} produced a non-finite value")),
        e => e,
    }
}

/// Mean cross-entropy and accuracy (percent) of `model` on `ds`.
pub fn evaluate(model: &mut Model, ds: &Dataset, batch_size: usize, rng: &RngStream) -> Result<(f64, f64)> {
    let (mut loss, mut correct, mut n) = (0.0, 0usize, 0usize);
    for (b, batch) in sequential_batches(ds, batch_size)?.enumerate() {
        let (x, y) = batch?;
        let logits = model.predict(&x, &rng.derive(b as u64)).map_err(diverged)?;
        loss += batch_nll(&logits, &y)?;
        correct += logits.argmax_rows()?.iter().zip(&y).filter(|(p, t)| p == t).count();
        n += y.len();
    }
    if n == 0 {
        return Err(Error::Data(format!("{} is empty", ds.name())));
    }
    Ok((loss / n as f64, 100.0 * correct as f64 / n as f64))
}

fn batch_nll(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let [_, k] = logits.dims2("batch_nll")?;
    let mut total = 0.0;
    for (row, &t) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    if !total.is_finite() {
        return Err(Error::Divergence("evaluation loss is not finite".into()));
    }
    Ok(total)
}

fn train_epoch(model: &mut Model, adam: &mut Adam, ds: &Dataset, cfg: &TrialConfig, rng: &RngStream, epoch: u64) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for (b, batch) in batches(ds, cfg.batch_size, cfg.seed, epoch)?.enumerate() {
        let (x, y) = batch?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let fwd = model.forward(&mut g, xv, &rng.derive(b as u64))?;
        let loss = g.cross_entropy(fwd.logits, &y)?;
        let lv = g.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Divergence(format!("loss {lv} at epoch {epoch}, batch {b}")));
        }
        let mut grads = g.backward(loss)?;
        let gs: Vec<Tensor> = fwd
            .params
            .iter()
            .map(|&v| grads.take(v).ok_or_else(|| Error::Structural("parameter without gradient".into())))
            .collect::<Result<_>>()?;
        if gs.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence(format!("non-finite gradient at epoch {epoch}, batch {b}")));
        }
        step_all(adam, model.params_mut(), &gs)?;
        total += lv * y.len() as f64;
        n += y.len();
    }
    if n == 0 {
        return Err(Error::Data(format!("{} is empty", ds.name())));
    }
    Ok(total / n as f64)
}

fn snapshot(model: &Model, adam: &Adam, cfg: &TrialConfig, history: &[EpochMetrics], seconds: f64) -> Result<Checkpoint> {
    let mut tensors = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        tensors.push((format!("param.{i}"), p.raw().clone()));
    }
    let (m, v) = adam.moments();
    for (kind, moments) in [("adam.m", m), ("adam.v", v)] {
        for (i, mi) in moments.iter().enumerate() {
            tensors.push((format!("{kind}.{i}"), Tensor::vector(mi.clone())?));
        }
    }
    Ok(Checkpoint {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        epoch: history.len() as u64,
        adam_t: adam.t(),
        seconds,
        history: history.to_vec(),
        tensors,
    })
}

fn restore(ck: &Checkpoint, model: &mut Model, adam: &mut Adam) -> Result<()> {
    let missing = |n: &str| Error::Contract(format!("checkpoint lacks {n}"));
    let mut params = model.params_mut();
    for (i, p) in params.iter_mut().enumerate() {
        let name = format!("param.{i}");
        p.set_raw(ck.tensor(&name).ok_or_else(|| missing(&name))?.clone())?;
    }
    let moments = |kind: &str| -> Vec<Vec<f64>> {
        (0..)
            .map_while(|i| ck.tensor(&format!("{kind}.{i}")))
            .map(|t| t.data().to_vec())
            .collect()
    };
    adam.restore(ck.adam_t, moments("adam.m"), moments("adam.v"))
}

/// Runs `cfg` to completion. Errors before the first epoch (bad config,
/// shape mismatch) are returned; errors during training become a result
/// with a non-ok status.
pub fn run_trial(cfg: &TrialConfig, data: &TrialData, opts: &TrialOptions) -> Result<TrialResult> {
    cfg.validate()?;
    let start = Instant::now();
    let spec = cfg.model_spec()?;
    if data.train.sample_shape() != spec.input {
        return Err(Error::Data(format!(
            "{} samples are {:?}, model expects {:?}",
            data.train.name(),
            data.train.sample_shape(),
            spec.input
        )));
    }
    let chains = cfg.layer_chains()?;
    let root = RngStream::new(cfg.seed, 0);
    let mut model = build_model(&spec, &chains, &root)?;
    let mut adam = Adam::new(cfg.adam());
    let hash = cfg.hash();

    let train_small = limited(&data.train, cfg.train_limit)?;
    let eval_small = limited(&data.eval, cfg.eval_limit)?;
    let test_small = limited(&data.test, cfg.eval_limit)?;
    let train = train_small.as_ref().unwrap_or(&data.train);
    let eval = eval_small.as_ref().unwrap_or(&data.eval);
    let test = test_small.as_ref().unwrap_or(&data.test);

    let mut history = Vec::new();
    let mut prior_seconds = 0.0;
    if let Some(base) = opts.checkpoint.as_deref().filter(|b| Checkpoint::exists(b)) {
        let ck = Checkpoint::load(base)?;
        if ck.config_hash == hash {
            restore(&ck, &mut model, &mut adam)?;
            log::info!("{hash}: resuming after epoch {}", ck.epoch);
            history = ck.history;
            prior_seconds = ck.seconds;
        } else {
            log::warn!("{hash}: ignoring checkpoint for config {}", ck.config_hash);
        }
    }
    let elapsed = |start: &Instant| prior_seconds + start.elapsed().as_secs_f64();

    let mut ran = 0;
    while (history.len() as u64) < cfg.epochs {
        if opts.stop_after.is_some_and(|s| ran >= s) {
            break;
        }
        let epoch = history.len() as u64;
        let step = (|| -> Result<EpochMetrics> {
            let train_loss = train_epoch(&mut model, &mut adam, train, cfg, &root.derive_path(&[label::TRAIN, epoch]), epoch)
                .map_err(diverged)?;
            let (eval_loss, eval_acc) = evaluate(&mut model, eval, cfg.batch_size, &root.derive_path(&[label::EVAL, epoch]))?;
            Ok(EpochMetrics { train_loss, eval_loss, eval_acc })
        })();
        let m = match step {
            Ok(m) => m,
            Err(e @ (Error::Data(_) | Error::Io(_))) => return Err(e),
            Err(e) => {
                log::warn!("{hash}: epoch {epoch}: {e}");
                return Ok(TrialResult::from_error(cfg, &e, history, elapsed(&start)));
            }
        };
        if let Some(f) = opts.progress {
            f(cfg, epoch, &m);
        }
        history.push(m);
        ran += 1;
        if let Some(base) = &opts.checkpoint {
            snapshot(&model, &adam, cfg, &history, elapsed(&start))?.save(base)?;
        }
    }

    let official_test_acc = if history.len() as u64 == cfg.epochs {
        match evaluate(&mut model, test, cfg.batch_size, &root.derive_path(&[label::EVAL, cfg.epochs])) {
            Ok((_, acc)) => acc,
            Err(e) => return Ok(TrialResult::from_error(cfg, &e, history, elapsed(&start))),
        }
    } else {
        f64::NAN
    };
    Ok(TrialResult {
        config: cfg.clone(),
        config_hash: hash,
        max_eval_acc: max_acc(&history),
        history,
        official_test_acc,
        seconds: elapsed(&start),
        status: TrialStatus::Ok,
    })
}

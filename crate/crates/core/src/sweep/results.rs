//! Results CSV (schema version 1).
//!
//! One row per trial. Per-epoch metrics go in the trailing `train_loss`,
//! `eval_loss` and `eval_acc` columns as `;`-separated lists. Accuracies are
//! percentages; failed metrics are written as `NaN`.

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::sweep::checkpoint::EpochMetrics;
use crate::sweep::trial::{TrialResult, TrialStatus};

pub const SCHEMA_VERSION: u32 = 1;

pub const COLUMNS: [&str; 23] = [
    "schema_version",
    "config_hash",
    "dataset",
    "model",
    "activation",
    "norm_y",
    "norm_w",
    "bits_y",
    "bits_w",
    "rp_mode",
    "ep_y",
    "ep_w",
    "seed",
    "epochs",
    "batch_size",
    "max_eval_acc",
    "official_test_acc",
    "seconds",
    "status",
    "epochs_done",
    "train_loss",
    "eval_loss",
    "eval_acc",
];

/// Config fields usable as grouping keys.
pub const CONFIG_COLUMNS: std::ops::Range<usize> = 2..15;

fn join(v: impl Iterator<Item = f64>) -> String {
    v.map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// Cells of `r` in [`COLUMNS`] order.
pub fn row_cells(r: &TrialResult) -> Vec<String> {
    let c = &r.config;
    vec![
        SCHEMA_VERSION.to_string(),
        r.config_hash.clone(),
        c.dataset.clone(),
        c.model.clone(),
        c.activation.clone(),
        c.norm_y.clone(),
        c.norm_w.clone(),
        c.bits_y.to_string(),
        c.bits_w.to_string(),
        c.rp_mode.clone(),
        c.ep_y.to_string(),
        c.ep_w.to_string(),
        c.seed.to_string(),
        c.epochs.to_string(),
        c.batch_size.to_string(),
        r.max_eval_acc.to_string(),
        r.official_test_acc.to_string(),
        format!("{:.3}", r.seconds),
        r.status.name().to_string(),
        r.history.len().to_string(),
        join(r.history.iter().map(|h| h.train_loss)),
        join(r.history.iter().map(|h| h.eval_loss)),
        join(r.history.iter().map(|h| h.eval_acc)),
    ]
}

fn encode(cells: &[String]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(cells).map_err(|e| Error::Csv { line: 0, detail: e.to_string() })?;
    w.into_inner().map_err(|e| Error::Csv { line: 0, detail: e.to_string() })
}

/// Append-only results file shared between worker threads.
pub struct ResultsCsv {
    path: PathBuf,
    lock: Mutex<()>,
}

impl ResultsCsv {
    /// Opens (creating if needed) and validates the header of an existing file.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        if path.exists() {
            read_rows(&path)?;
        }
        Ok(ResultsCsv { path, lock: Mutex::new(()) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one row, writing the header first if the file is empty.
    pub fn append(&self, r: &TrialResult) -> Result<()> {
        let row = encode(&row_cells(r))?;
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        if f.metadata()?.len() == 0 {
            let header: Vec<String> = COLUMNS.iter().map(|s| s.to_string()).collect();
            f.write_all(&encode(&header)?)?;
        }
        f.write_all(&row)?;
        f.flush()?;
        Ok(())
    }

    /// Hashes of trials already recorded.
    pub fn completed(&self) -> Result<HashSet<String>> {
        if !self.path.exists() {
            return Ok(HashSet::new());
        }
        Ok(read_rows(&self.path)?.into_iter().map(|r| r.config_hash).collect())
    }
}

/// A parsed CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub config_hash: String,
    /// Cells of the config columns, keyed by column name.
    pub fields: Vec<(String, String)>,
    pub max_eval_acc: f64,
    pub official_test_acc: f64,
    pub seconds: f64,
    pub status: TrialStatus,
    pub history: Vec<EpochMetrics>,
}

impl ResultRow {
    pub fn field(&self, name: &str) -> Option<&str> {
        if name == "config_hash" {
            return Some(&self.config_hash);
        }
        self.fields.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }
}

fn parse_list(s: &str, line: u64, col: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|v| v.parse().map_err(|_| Error::Csv { line, detail: format!("{col}: bad number {v:?}") }))
        .collect()
}

/// Parses a results file. An empty file has no rows.
pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read(path)?;
    if text.iter().all(u8::is_ascii_whitespace) {
        return Ok(Vec::new());
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(&text[..]);
    let headers = rdr.headers().map_err(|e| Error::Csv { line: 1, detail: e.to_string() })?;
    if headers.iter().ne(COLUMNS) {
        return Err(Error::Csv {
            line: 1,
            detail: format!("header does not match schema v{SCHEMA_VERSION}"),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            cell(i).parse().map_err(|_| Error::Csv {
                line,
                detail: format!("{}: bad number {:?}", COLUMNS[i], cell(i)),
            })
        };
        if cell(0) != SCHEMA_VERSION.to_string() {
            return Err(Error::Csv { line, detail: format!("unsupported schema version {:?}", cell(0)) });
        }
        let status = TrialStatus::parse(cell(18))
            .ok_or_else(|| Error::Csv { line, detail: format!("bad status {:?}", cell(18)) })?;
        let (tl, el, ea) = (parse_list(cell(20), line, COLUMNS[20])?, parse_list(cell(21), line, COLUMNS[21])?, parse_list(cell(22), line, COLUMNS[22])?);
        let done: usize = cell(19)
            .parse()
            .map_err(|_| Error::Csv { line, detail: format!("bad epochs_done {:?}", cell(19)) })?;
        if tl.len() != done || el.len() != done || ea.len() != done {
            return Err(Error::Csv { line, detail: "epoch lists disagree with epochs_done".into() });
        }
        rows.push(ResultRow {
            config_hash: cell(1).to_string(),
            fields: CONFIG_COLUMNS.map(|i| (COLUMNS[i].to_string(), cell(i).to_string())).collect(),
            max_eval_acc: num(15)?,
            official_test_acc: num(16)?,
            seconds: num(17)?,
            status,
            history: (0..done)
                .map(|i| EpochMetrics { train_loss: tl[i], eval_loss: el[i], eval_acc: ea[i] })
                .collect(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweep::config::TrialConfig;

    pub(crate) fn fake(seed: u64, accs: &[f64], status: TrialStatus) -> TrialResult {
        let config = TrialConfig { seed, ..TrialConfig::default() };
        TrialResult {
            config_hash: config.hash(),
            config,
            history: accs.iter().map(|&a| EpochMetrics { train_loss: 1.0 / a, eval_loss: 0.5, eval_acc: a }).collect(),
            max_eval_acc: accs.iter().copied().fold(f64::NAN, f64::max),
            official_test_acc: if status == TrialStatus::Ok { 90.0 } else { f64::NAN },
            seconds: 1.5,
            status,
        }
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let csv = ResultsCsv::open(dir.path().join("r.csv")).unwrap();
        csv.append(&fake(1, &[80.0, 85.5], TrialStatus::Ok)).unwrap();
        csv.append(&fake(2, &[10.0], TrialStatus::Diverged)).unwrap();
        let text = fs::read_to_string(csv.path()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("schema_version,config_hash,"));
        let rows = read_rows(csv.path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].max_eval_acc, 85.5);
        assert_eq!(rows[0].history[1].eval_acc, 85.5);
        assert_eq!(rows[1].status, TrialStatus::Diverged);
        assert!(rows[1].official_test_acc.is_nan());
        assert_eq!(rows[0].field("seed"), Some("1"));
        assert_eq!(csv.completed().unwrap().len(), 2);
    }

    #[test]
    fn malformed_rows_report_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let csv = ResultsCsv::open(&path).unwrap();
        csv.append(&fake(1, &[80.0], TrialStatus::Ok)).unwrap();
        csv.append(&fake(2, &[81.0], TrialStatus::Ok)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let bad = text.replacen(",ok,", ",maybe,", 2).replacen(",maybe,", ",ok,", 1);
        fs::write(&path, bad).unwrap();
        match read_rows(&path) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_rows(&path), Err(Error::Csv { line: 1, .. })));
        fs::write(&path, "").unwrap();
        assert!(read_rows(&path).unwrap().is_empty());
    }
}

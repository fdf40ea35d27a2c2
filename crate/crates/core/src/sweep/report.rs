//! Grouped summaries of a results CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sweep::results::{read_rows, ResultRow, COLUMNS, CONFIG_COLUMNS};
use crate::sweep::trial::TrialStatus;

/// Aggregate of `max_eval_acc` over one group of ok trials.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub key: String,
    pub n: usize,
    pub failed: usize,
    pub max: f64,
    pub mean: f64,
    /// Mean eval accuracy per epoch over trials that reached that epoch.
    pub curve: Vec<f64>,
}

/// Groups rows by the value of `field` (all rows together when `None`).
pub fn group(rows: &[ResultRow], field: Option<&str>) -> Result<Vec<GroupStats>> {
    if let Some(f) = field {
        if !COLUMNS[CONFIG_COLUMNS].contains(&f) && f != "config_hash" {
            let names = &COLUMNS[CONFIG_COLUMNS];
            return Err(Error::Config(format!("cannot group by {f:?}; choose one of {}", names.join(", "))));
        }
    }
    let mut groups: BTreeMap<String, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = field.map_or("all", |f| r.field(f).unwrap_or(""));
        groups.entry(key.to_string()).or_default().push(r);
    }
    let mut out: Vec<GroupStats> = groups
        .into_iter()
        .map(|(key, members)| {
            let ok: Vec<&&ResultRow> = members.iter().filter(|r| r.status == TrialStatus::Ok).collect();
            let accs: Vec<f64> = ok.iter().map(|r| r.max_eval_acc).collect();
            let epochs = ok.iter().map(|r| r.history.len()).max().unwrap_or(0);
            let curve = (0..epochs)
                .map(|e| {
                    let at: Vec<f64> = ok.iter().filter_map(|r| r.history.get(e)).map(|h| h.eval_acc).collect();
                    at.iter().sum::<f64>() / at.len() as f64
                })
                .collect();
            GroupStats {
                n: accs.len(),
                failed: members.len() - accs.len(),
                max: accs.iter().copied().fold(f64::NAN, f64::max),
                mean: if accs.is_empty() { f64::NAN } else { accs.iter().sum::<f64>() / accs.len() as f64 },
                curve,
                key,
            }
        })
        .collect();
    // Numeric keys (bits, EP, seeds) sort by value.
    out.sort_by(|a, b| match (a.key.parse::<f64>(), b.key.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.key.cmp(&b.key),
    });
    Ok(out)
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

/// Summary text for `csv`, grouped by `field`. With `plot_dir`, also writes
/// `by_<field>.dat` (`key max mean` per group) and `curve_<field>_<key>.dat`
/// (`epoch mean_eval_acc`).
pub fn report(csv: &Path, field: Option<&str>, plot_dir: Option<&Path>) -> Result<String> {
    let rows = read_rows(csv)?;
    if rows.is_empty() {
        return Ok("no trials\n".into());
    }
    let groups = group(&rows, field)?;
    let name = field.unwrap_or("all");
    let width = groups.iter().map(|g| g.key.len()).max().unwrap_or(0).max(name.len());
    let mut text = format!("{name:<width$}  {:>4}  {:>6}  {:>7}  {:>7}\n", "n", "failed", "max", "mean");
    for g in &groups {
        writeln!(text, "{:<width$}  {:>4}  {:>6}  {:>7.2}  {:>7.2}", g.key, g.n, g.failed, g.max, g.mean).ok();
    }
    let best = rows
        .iter()
        .filter(|r| r.status == TrialStatus::Ok)
        .max_by(|a, b| a.max_eval_acc.total_cmp(&b.max_eval_acc));
    if let Some(b) = best {
        writeln!(text, "best: {:.2} ({}, seed {})", b.max_eval_acc, b.config_hash, b.field("seed").unwrap_or("?")).ok();
    }

    if let Some(dir) = plot_dir {
        fs::create_dir_all(dir)?;
        let mut dat = format!("# {name} max mean\n");
        for (i, g) in groups.iter().enumerate() {
            let x = if g.key.parse::<f64>().is_ok() { g.key.clone() } else { i.to_string() };
            writeln!(dat, "{x} {} {}", g.max, g.mean).ok();
            let mut curve = format!("# {name}={} epoch mean_eval_acc\n", g.key);
            for (e, a) in g.curve.iter().enumerate() {
                writeln!(curve, "{} {a}", e + 1).ok();
            }
            fs::write(dir.join(format!("curve_{}_{}.dat", file_safe(name), file_safe(&g.key))), curve)?;
        }
        fs::write(dir.join(format!("by_{}.dat", file_safe(name))), dat)?;
    }
    Ok(text)
}

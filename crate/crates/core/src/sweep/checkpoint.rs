//! Checkpoint container: `<base>.bin` holds the concatenated little-endian
//! `f64` data of named tensors, `<base>.manifest` describes them.
//!
//! Manifest layout, one record per line:
//!
//! ```text
//! format analog-nn-checkpoint 1
//! config_hash 3f9c0a1b22d4e5f6
//! seed 0
//! epoch 3
//! adam_t 1128
//! seconds 41.7
//! history <train_loss> <eval_loss> <eval_acc>      (one line per finished epoch)
//! tensor <name> <byte offset> <d0>x<d1>x...        (`scalar` for rank 0)
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "format analog-nn-checkpoint 1";

/// Metrics of one finished epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub train_loss: f64,
    pub eval_loss: f64,
    /// Percent.
    pub eval_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    /// Number of finished epochs.
    pub epoch: u64,
    pub adam_t: u64,
    pub seconds: f64,
    pub history: Vec<EpochMetrics>,
    pub tensors: Vec<(String, Tensor)>,
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn data_path(base: &Path) -> PathBuf {
    with_suffix(base, ".bin")
}

pub fn manifest_path(base: &Path) -> PathBuf {
    with_suffix(base, ".manifest")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = with_suffix(path, ".tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".into()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

impl Checkpoint {
    pub fn exists(base: &Path) -> bool {
        manifest_path(base).is_file() && data_path(base).is_file()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Writes data then manifest, each via rename, so a reader never sees a
    /// manifest pointing at missing data.
    pub fn save(&self, base: &Path) -> Result<()> {
        let mut data = Vec::new();
        let mut manifest = format!(
            "{MAGIC}\nconfig_hash {}\nseed {}\nepoch {}\nadam_t {}\nseconds {}\n",
            self.config_hash, self.seed, self.epoch, self.adam_t, self.seconds
        );
        for h in &self.history {
            manifest += &format!("history {} {} {}\n", h.train_loss, h.eval_loss, h.eval_acc);
        }
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Contract(format!("bad tensor name {name:?}")));
            }
            manifest += &format!("tensor {name} {} {}\n", data.len(), shape_text(t.shape()));
            for v in t.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_atomic(&data_path(base), &data)?;
        write_atomic(&manifest_path(base), manifest.as_bytes())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let mpath = manifest_path(base);
        let text = fs::read_to_string(&mpath)?;
        let data = fs::read(data_path(base))?;
        let mut lines = text.lines();
        let mut offset = 0u64;
        let err = |offset: u64, detail: String| Error::format(&mpath, offset, detail);
        if lines.next() != Some(MAGIC) {
            return Err(err(0, "missing format header".into()));
        }
        offset += MAGIC.len() as u64 + 1;

        let mut ck = Checkpoint {
            config_hash: String::new(),
            seed: 0,
            epoch: 0,
            adam_t: 0,
            seconds: 0.0,
            history: Vec::new(),
            tensors: Vec::new(),
        };
        let mut seen_hash = false;
        for line in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| err(offset, format!("bad number {s:?}")))
            };
            let int = |s: &str| -> Result<u64> {
                s.parse().map_err(|_| err(offset, format!("bad integer {s:?}")))
            };
            match fields[..] {
                [] => {}
                ["config_hash", h] => {
                    ck.config_hash = h.to_string();
                    seen_hash = true;
                }
                ["seed", v] => ck.seed = int(v)?,
                ["epoch", v] => ck.epoch = int(v)?,
                ["adam_t", v] => ck.adam_t = int(v)?,
                ["seconds", v] => ck.seconds = num(v)?,
                ["history", a, b, c] => ck.history.push(EpochMetrics {
                    train_loss: num(a)?,
                    eval_loss: num(b)?,
                    eval_acc: num(c)?,
                }),
                ["tensor", name, start, shape] => {
                    let start = int(start)? as usize;
                    let shape: Vec<usize> = if shape == "scalar" {
                        Vec::new()
                    } else {
                        shape
                            .split('x')
                            .map(|d| int(d).map(|d| d as usize))
                            .collect::<Result<_>>()?
                    };
                    let n: usize = shape.iter().product();
                    let end = start + 8 * n;
                    if !start.is_multiple_of(8) || end > data.len() {
                        return Err(err(offset, format!("tensor {name} spans {start}..{end} of {} bytes", data.len())));
                    }
                    let vals = data[start..end]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    ck.tensors.push((name.to_string(), Tensor::new(shape, vals)?));
                }
                _ => return Err(err(offset, format!("unrecognized line {line:?}"))),
            }
            offset += line.len() as u64 + 1;
        }
        if !seen_hash {
            return Err(err(offset, "missing config_hash".into()));
        }
        if ck.history.len() as u64 != ck.epoch {
            return Err(err(offset, format!("{} history lines for epoch {}", ck.history.len(), ck.epoch)));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_hash: "00ff00ff00ff00ff".into(),
            seed: 7,
            epoch: 2,
            adam_t: 10,
            seconds: 1.25,
            history: vec![
                EpochMetrics { train_loss: 0.5, eval_loss: 0.4, eval_acc: 88.1 },
                EpochMetrics { train_loss: 0.3, eval_loss: 0.35, eval_acc: 90.0 },
            ],
            tensors: vec![
                ("param.0".into(), Tensor::new(vec![2, 3], vec![0.1, -0.2, 1.0 / 3.0, 4.0, 5e-300, -0.0]).unwrap()),
                ("param.1".into(), Tensor::vector(vec![f64::MIN_POSITIVE, 2.0]).unwrap()),
                ("step".into(), Tensor::scalar(3.5).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck");
        let ck = sample();
        ck.save(&base).unwrap();
        assert!(Checkpoint::exists(&base));
        let back = Checkpoint::load(&base).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.tensor("param.1").unwrap().shape(), &[2]);
        assert_eq!(std::fs::metadata(data_path(&base)).unwrap().len(), 9 * 8);
    }

    #[test]
    fn corrupt_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck");
        sample().save(&base).unwrap();
        let good = std::fs::read_to_string(manifest_path(&base)).unwrap();

        std::fs::write(manifest_path(&base), good.replace("format", "fmt")).unwrap();
        assert!(matches!(Checkpoint::load(&base), Err(Error::Format { offset: 0, .. })));

        std::fs::write(manifest_path(&base), good.replace("2x3", "20x3")).unwrap();
        assert!(matches!(Checkpoint::load(&base), Err(Error::Format { .. })));

        std::fs::write(manifest_path(&base), good.replace("epoch 2", "epoch 3")).unwrap();
        assert!(matches!(Checkpoint::load(&base), Err(Error::Format { .. })));
    }
}

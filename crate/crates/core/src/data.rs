//! Image classification datasets: IDX (MNIST family) and CIFAR-10 binary.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{label, RngStream};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
enum Pixels {
    /// Raw bytes; the value of a pixel is `byte / 255`.
    Bytes(Vec<u8>),
    Real(Vec<f64>),
}

/// Images `[N×C×H×W]` with values in `[0, 1]` and labels in `0..10`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    shape: [usize; 3],
    pixels: Pixels,
    labels: Vec<u8>,
}

impl Dataset {
    fn from_bytes(name: impl Into<String>, shape: [usize; 3], pixels: Vec<u8>, labels: Vec<u8>) -> Self {
        debug_assert_eq!(pixels.len(), labels.len() * shape.iter().product::<usize>());
        Dataset {
            name: name.into(),
            shape,
            pixels: Pixels::Bytes(pixels),
            labels,
        }
    }

    /// Dataset from real-valued images `[N×C×H×W]` in `[0, 1]`.
    pub fn from_tensor(name: impl Into<String>, images: &Tensor, labels: Vec<u8>) -> Result<Self> {
        let [n, c, h, w] = images.dims4("Dataset::from_tensor")?;
        if n != labels.len() {
            return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= CLASSES) {
            return Err(Error::Data(format!("label {l} outside 0..{CLASSES}")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Dataset {
            name: name.into(),
            shape: [c, h, w],
            pixels: Pixels::Real(images.data().to_vec()),
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixel(&self, index: usize) -> f64 {
        match &self.pixels {
            Pixels::Bytes(b) => b[index] as f64 / 255.0,
            Pixels::Real(r) => r[index],
        }
    }

    /// The samples at `indices` as a `[len×C×H×W]` tensor plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let s = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * s);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample {i} out of range (len {})", self.len())));
            }
            match &self.pixels {
                Pixels::Bytes(b) => data.extend(b[i * s..(i + 1) * s].iter().map(|&v| v as f64 / 255.0)),
                Pixels::Real(r) => data.extend_from_slice(&r[i * s..(i + 1) * s]),
            }
            labels.push(self.labels[i] as usize);
        }
        let [c, h, w] = self.shape;
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    /// All images as one tensor.
    pub fn images(&self) -> Result<Tensor> {
        let all: Vec<usize> = (0..self.len()).collect();
        Ok(self.batch(&all)?.0)
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let s = self.sample_len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!("sample {bad} out of range (len {})", self.len())));
        }
        let pixels = match &self.pixels {
            Pixels::Bytes(b) => {
                Pixels::Bytes(indices.iter().flat_map(|&i| b[i * s..(i + 1) * s].iter().copied()).collect())
            }
            Pixels::Real(r) => {
                Pixels::Real(indices.iter().flat_map(|&i| r[i * s..(i + 1) * s].iter().copied()).collect())
            }
        };
        Ok(Dataset {
            name: name.into(),
            shape: self.shape,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn class_counts(&self) -> [usize; CLASSES] {
        let mut c = [0; CLASSES];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, 0, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(buf: &[u8], offset: usize, path: &Path) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, offset as u64, "truncated header"))
}

fn parse_idx_labels(buf: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(buf, 0, path)?;
    if magic != IDX_LABELS {
        return Err(Error::format(path, 0, format!("labels magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(buf, 4, path)? as usize;
    let body = &buf[8..];
    if body.len() != n {
        return Err(Error::format(path, 8, format!("header declares {n} labels, file holds {}", body.len())));
    }
    if let Some(pos) = body.iter().position(|&l| l as usize >= CLASSES) {
        return Err(Error::format(path, 8 + pos as u64, format!("label {} outside 0..{CLASSES}", body[pos])));
    }
    Ok(body.to_vec())
}

fn parse_idx_images(buf: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(buf, 0, path)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(path, 0, format!("images magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let n = be_u32(buf, 4, path)? as usize;
    let rows = be_u32(buf, 8, path)? as usize;
    let cols = be_u32(buf, 12, path)? as usize;
    let body = &buf[16..];
    let want = n * rows * cols;
    if body.len() != want {
        return Err(Error::format(
            path,
            16 + body.len().min(want) as u64,
            format!("header declares {n}×{rows}×{cols} = {want} pixel bytes, file holds {}", body.len()),
        ));
    }
    Ok((n, rows, cols, body.to_vec()))
}

/// Reads an IDX image/label file pair, raw or gzip-compressed.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let labels = parse_idx_labels(&read_maybe_gz(lp)?, lp)?;
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(ip)?, ip)?;
    if n != labels.len() {
        return Err(Error::format(lp, 4, format!("{} labels for {n} images", labels.len())));
    }
    let name = ip.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned());
    Ok(Dataset::from_bytes(name, [1, rows, cols], pixels, labels))
}

/// Writes a single-channel dataset to uncompressed IDX files. Real-valued
/// pixels must be multiples of 1/255.
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let converted;
    let pixels = match &ds.pixels {
        Pixels::Bytes(p) => p,
        Pixels::Real(v) => {
            converted = v
                .iter()
                .map(|&x| {
                    let b = (x * 255.0).round();
                    ((x * 255.0 - b).abs() < 1e-9).then_some(b as u8)
                })
                .collect::<Option<Vec<u8>>>()
                .ok_or_else(|| Error::Data("only byte-valued datasets can be written as IDX".into()))?;
            &converted
        }
    };
    let [c, h, w] = ds.shape;
    if c != 1 {
        return Err(Error::Data(format!("IDX images are single-channel, dataset has {c}")));
    }
    let mut img = fs::File::create(images_path)?;
    for v in [IDX_IMAGES, ds.len() as u32, h as u32, w as u32] {
        img.write_all(&v.to_be_bytes())?;
    }
    img.write_all(pixels)?;
    let mut lab = fs::File::create(labels_path)?;
    lab.write_all(&IDX_LABELS.to_be_bytes())?;
    lab.write_all(&(ds.len() as u32).to_be_bytes())?;
    lab.write_all(&ds.labels)?;
    Ok(())
}

/// Concatenates CIFAR-10 binary batch files (records of 1 label + 3072 pixel bytes).
pub fn load_cifar10<P: AsRef<Path>>(batch_files: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in batch_files {
        let path = f.as_ref();
        let buf = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if buf.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                path,
                (buf.len() - buf.len() % CIFAR_RECORD) as u64,
                format!("size {} is not a multiple of {CIFAR_RECORD}", buf.len()),
            ));
        }
        for (i, rec) in buf.chunks(CIFAR_RECORD).enumerate() {
            if rec[0] as usize >= CLASSES {
                return Err(Error::format(path, (i * CIFAR_RECORD) as u64, format!("label {}", rec[0])));
            }
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    Ok(Dataset::from_bytes("cifar10", [3, 32, 32], pixels, labels))
}

/// Single-channel luma `0.299 R + 0.587 G + 0.114 B` of an RGB dataset.
pub fn to_grayscale(ds: &Dataset) -> Result<Dataset> {
    let [c, h, w] = ds.shape;
    if c != 3 {
        return Err(Error::Data(format!("grayscale needs 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(ds.len() * plane);
    for i in 0..ds.len() {
        let base = i * 3 * plane;
        for j in 0..plane {
            let (r, g, b) = (ds.pixel(base + j), ds.pixel(base + plane + j), ds.pixel(base + 2 * plane + j));
            out.push((0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0));
        }
    }
    Ok(Dataset {
        name: format!("{}-gray", ds.name),
        shape: [1, h, w],
        pixels: Pixels::Real(out),
        labels: ds.labels.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
    Cifar10Gray,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::Mnist,
        DatasetKind::FashionMnist,
        DatasetKind::Cifar10,
        DatasetKind::Cifar10Gray,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion_mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar10Gray => "cifar10_gray",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        let key = match key.as_str() {
            "fashionmnist" => "fashion_mnist",
            "cifar_10" => "cifar10",
            k => k,
        };
        Self::ALL
            .into_iter()
            .find(|d| d.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown dataset {s:?}")))
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
            DatasetKind::Cifar10Gray => [1, 32, 32],
        }
    }

    /// Directory under the data root holding this dataset's files.
    pub fn subdir(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Cifar10 | DatasetKind::Cifar10Gray => "cifar-10-batches-bin",
        }
    }

    /// Whether the files for this dataset exist under `data_dir`.
    pub fn available(self, data_dir: &Path) -> bool {
        self.files(data_dir).iter().all(|f| locate(f).is_some())
    }

    fn files(self, data_dir: &Path) -> Vec<PathBuf> {
        let dir = data_dir.join(self.subdir());
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => [
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
            ]
            .iter()
            .map(|f| dir.join(f))
            .collect(),
            DatasetKind::Cifar10 | DatasetKind::Cifar10Gray => (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .chain([dir.join("test_batch.bin")])
                .collect(),
        }
    }

    /// Loads the official `(train, test)` sets from `data_dir`.
    pub fn load(self, data_dir: &Path) -> Result<(Dataset, Dataset)> {
        let files: Vec<PathBuf> = self
            .files(data_dir)
            .into_iter()
            .map(|f| {
                locate(&f).ok_or_else(|| {
                    Error::Data(format!(
                        "missing {} (or .gz); see scripts/fetch_data.sh",
                        f.display()
                    ))
                })
            })
            .collect::<Result<_>>()?;
        let (mut train, mut test) = match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => {
                (load_idx(&files[0], &files[1])?, load_idx(&files[2], &files[3])?)
            }
            DatasetKind::Cifar10 => (load_cifar10(&files[..5])?, load_cifar10(&files[5..])?),
            DatasetKind::Cifar10Gray => (
                to_grayscale(&load_cifar10(&files[..5])?)?,
                to_grayscale(&load_cifar10(&files[5..])?)?,
            ),
        };
        train.name = format!("{}-train", self.name());
        test.name = format!("{}-test", self.name());
        Ok((train, test))
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn locate(path: &Path) -> Option<PathBuf> {
    if path.is_file() {
        return Some(path.to_path_buf());
    }
    let mut gz = path.as_os_str().to_owned();
    gz.push(".gz");
    let gz = PathBuf::from(gz);
    gz.is_file().then_some(gz)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitPlan {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Shuffled disjoint `(train, eval)` index sets covering `0..n`.
pub fn split_indices(n: usize, plan: &SplitPlan) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(plan.train_fraction > 0.0 && plan.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {}",
            plan.train_fraction
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut RngStream::new(plan.seed, 0).derive(label::SPLIT));
    let cut = (n as f64 * plan.train_fraction).round() as usize;
    let eval = idx.split_off(cut);
    Ok((idx, eval))
}

pub fn split(ds: &Dataset, plan: &SplitPlan) -> Result<(Dataset, Dataset)> {
    let (tr, ev) = split_indices(ds.len(), plan)?;
    Ok((
        ds.subset(&tr, format!("{}-split-train", ds.name))?,
        ds.subset(&ev, format!("{}-split-eval", ds.name))?,
    ))
}

/// Index batches for one epoch, reshuffled per `(seed, epoch)`; the last
/// batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut RngStream::new(seed, 0).derive_path(&[label::SHUFFLE, epoch]));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Iterator over `(images, labels)` batches of one epoch.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = Result<(Tensor, Vec<usize>)>;

    fn next(&mut self) -> Option<Self::Item> {
        self.order.next().map(|b| self.ds.batch(&b))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.order.size_hint()
    }
}

impl ExactSizeIterator for Batches<'_> {}

pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Batches<'_>> {
    Ok(Batches {
        ds,
        order: batch_indices(ds.len(), batch_size, seed, epoch)?.into_iter(),
    })
}

/// Batches in stored order, for evaluation.
pub fn sequential_batches(ds: &Dataset, batch_size: usize) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    Ok(Batches {
        ds,
        order: idx.chunks(batch_size).map(<[usize]>::to_vec).collect::<Vec<_>>().into_iter(),
    })
}

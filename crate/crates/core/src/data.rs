//! Datasets: IDX ingestion, synthetic sparse regression, splitting and batching.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{DwfError, Result};
use crate::ndcore::{DenseMatrix, SeededRng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Class indices.
    Classes(Vec<usize>),
    /// Regression targets, one row per sample.
    Values(DenseMatrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(v.gather_rows(indices)),
        }
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match self {
            Targets::Classes(c) => Some(c),
            Targets::Values(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DenseMatrix,
    pub targets: Targets,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: DenseMatrix, targets: Targets, split: Split) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(DwfError::Consistency(format!(
                "{} input rows but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        Ok(Self {
            inputs,
            targets,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        Dataset {
            inputs: self.inputs.gather_rows(indices),
            targets: self.targets.gather(indices),
            split,
        }
    }

    /// First `n` samples (or all of them if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split)
    }
}

/// Reads a whole file, transparently inflating gzip content.
fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path).map_err(|e| {
        DwfError::Io(format!("{}: {e}", path.display()))
    })?)
    .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| DwfError::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DwfError::Length(format!("{what}: header truncated")))
}

/// Parsed IDX image file: `count` images of `rows × cols` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DwfError::Format(format!(
            "image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(DwfError::Length(format!(
            "image file holds {} pixel bytes, header promises {need}",
            body.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DwfError::Format(format!(
            "label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(DwfError::Length(format!(
            "label file holds {} labels, header promises {count}",
            body.len()
        )));
    }
    Ok(body[..count].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(path: &Path, bytes: &[u8]) -> Result<()> {
    File::create(path)?.write_all(bytes)?;
    Ok(())
}

/// Loads an image/label IDX pair (plain or gzip) with pixels scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read_maybe_gzip(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gzip(labels_path)?)?;
    if images.count != labels.len() {
        return Err(DwfError::Consistency(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let features = images.rows * images.cols;
    let values = images.pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let inputs = DenseMatrix::from_vec(images.count, features, values)?;
    let targets = Targets::Classes(labels.into_iter().map(usize::from).collect());
    Dataset::new(inputs, targets, Split::Train)
}

/// Locates `<stem>` or `<stem>.gz` in `dir`.
fn find_idx(dir: &Path, stem: &str) -> Result<std::path::PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(DwfError::Io(format!(
        "{} not found (also tried .gz)",
        dir.join(stem).display()
    )))
}

/// Official MNIST-layout train and test sets from a directory using the
/// standard file names.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = load_idx(
        &find_idx(dir, "train-images-idx3-ubyte")?,
        &find_idx(dir, "train-labels-idx1-ubyte")?,
    )?;
    train.split = Split::Train;
    let mut test = load_idx(
        &find_idx(dir, "t10k-images-idx3-ubyte")?,
        &find_idx(dir, "t10k-labels-idx1-ubyte")?,
    )?;
    test.split = Split::Test;
    Ok((train, test))
}

/// `X ~ N(0,1)`, `w*` with `k_nonzero` entries of magnitude in `[0.5, 1.5)` and
/// random signs, `y = X w* + N(0, noise_sigma²)`.
pub fn synth_sparse_regression(
    n: usize,
    p: usize,
    k_nonzero: usize,
    noise_sigma: f64,
    rng: &mut SeededRng,
) -> Result<(Dataset, Vec<f64>)> {
    if k_nonzero > p {
        return Err(DwfError::Config(format!(
            "{k_nonzero} nonzero coefficients requested with only {p} features"
        )));
    }
    if !(noise_sigma >= 0.0) {
        return Err(DwfError::Domain(format!(
            "noise sigma must be non-negative, got {noise_sigma}"
        )));
    }
    let x = DenseMatrix::from_vec(n, p, (0..n * p).map(|_| rng.normal()).collect())?;
    let mut support: Vec<usize> = (0..p).collect();
    rng.shuffle(&mut support);
    let mut w = vec![0.0; p];
    for &j in &support[..k_nonzero] {
        w[j] = rng.rademacher() * (0.5 + rng.uniform());
    }
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let signal: f64 = x.row(i).iter().zip(&w).map(|(a, b)| a * b).sum();
            signal + noise_sigma * rng.normal()
        })
        .collect();
    let targets = Targets::Values(DenseMatrix::from_vec(n, 1, y)?);
    Ok((Dataset::new(x, targets, Split::Synthetic)?, w))
}

/// Gaussian clusters for classification: class centers drawn from
/// `N(0, spread²)`, unit-variance noise around them, labels cycling through
/// the classes.
pub fn synth_blobs(
    n: usize,
    features: usize,
    classes: usize,
    spread: f64,
    rng: &mut SeededRng,
) -> Result<Dataset> {
    if n == 0 || features == 0 || classes < 2 {
        return Err(DwfError::Config(format!(
            "blobs need samples, features and at least two classes (got {n}, {features}, {classes})"
        )));
    }
    let centers: Vec<f64> = (0..classes * features).map(|_| spread * rng.normal()).collect();
    let mut x = Vec::with_capacity(n * features);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &c in &labels {
        x.extend(centers[c * features..(c + 1) * features].iter().map(|m| m + rng.normal()));
    }
    Dataset::new(
        DenseMatrix::from_vec(n, features, x)?,
        Targets::Classes(labels),
        Split::Synthetic,
    )
}

/// Seeded train/validation split: the samples in the final
/// `round(val_fraction · n)` positions of a random permutation form the
/// validation set. Both parts keep their original relative order.
pub fn train_val_split(
    ds: &Dataset,
    val_fraction: f64,
    rng: &mut SeededRng,
) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(DwfError::Config(format!(
            "validation fraction must lie in [0, 1), got {val_fraction}"
        )));
    }
    let n = ds.len();
    let n_val = (val_fraction * n as f64).round() as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let mut train_idx = perm[..n - n_val].to_vec();
    let mut val_idx = perm[n - n_val..].to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((
        ds.subset(&train_idx, Split::Train),
        ds.subset(&val_idx, Split::Val),
    ))
}

/// Minibatch index generator over `n` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Batcher {
    n: usize,
    batch_size: usize,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize) -> Result<Self> {
        if n == 0 {
            return Err(DwfError::Config("cannot batch an empty dataset".into()));
        }
        if batch_size == 0 || batch_size > n {
            return Err(DwfError::Config(format!(
                "batch size {batch_size} must lie in 1..={n}"
            )));
        }
        Ok(Self { n, batch_size })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// One epoch: a fresh permutation cut into consecutive batches, the last
    /// one possibly short.
    pub fn epoch(&self, rng: &mut SeededRng) -> Vec<Vec<usize>> {
        let mut perm: Vec<usize> = (0..self.n).collect();
        rng.shuffle(&mut perm);
        perm.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

pub fn split_and_batch(
    ds: &Dataset,
    val_fraction: f64,
    batch_size: usize,
    shuffle_rng: &mut SeededRng,
) -> Result<(Dataset, Dataset, Batcher)> {
    let (train, val) = train_val_split(ds, val_fraction, shuffle_rng)?;
    let batcher = Batcher::new(train.len(), batch_size)?;
    Ok((train, val, batcher))
}

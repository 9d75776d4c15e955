//! MNIST (IDX) and CIFAR-10 (binary) readers, splits, standardization and the
//! translated-canvas synthesizer.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use lrlc_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{format_err, io_err, Error, Result};
use crate::fsutil::sha256_hex;

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;
pub const CIFAR_RECORD: usize = 3073;
pub const CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [SplitName::Train, SplitName::Validation, SplitName::Test].into_iter().find(|n| n.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    /// `N×H×W×C`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// SHA-256 over the label bytes followed by the little-endian image data.
    pub checksum: String,
}

impl DatasetSplit {
    pub fn new(name: SplitName, images: Tensor<f32>, labels: Vec<usize>) -> Self {
        let mut s = DatasetSplit { name, images, labels, checksum: String::new() };
        s.rehash();
        s
    }

    fn rehash(&mut self) {
        let mut bytes: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        bytes.reserve(self.images.numel() * 4);
        for v in self.images.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.checksum = sha256_hex(&bytes);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)`.
    pub fn extent(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn example_len(&self) -> usize {
        let (h, w, c) = self.extent();
        h * w * c
    }

    pub fn example(&self, i: usize) -> &[f32] {
        let n = self.example_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Gathers the listed examples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let (h, w, c) = self.extent();
        let mut data = Vec::with_capacity(indices.len() * self.example_len());
        for &i in indices {
            data.extend_from_slice(self.example(i));
        }
        let images = Tensor::from_vec(&[indices.len(), h, w, c], data).expect("batch extents");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` examples (all of them when `n` is 0 or too large).
    pub fn truncate(mut self, n: usize) -> Self {
        if n == 0 || n >= self.len() {
            return self;
        }
        let (h, w, c) = self.extent();
        let mut data = self.images.into_data();
        data.truncate(n * h * w * c);
        self.images = Tensor::from_vec(&[n, h, w, c], data).expect("truncated extents");
        self.labels.truncate(n);
        self.rehash();
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train: DatasetSplit,
    pub validation: DatasetSplit,
    pub test: DatasetSplit,
    /// Per-channel statistics of the raw training split used for standardization.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &DatasetSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }
}

/// Reads a file, transparently inflating gzip content.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..]).read_to_end(&mut out).map_err(io_err(path))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(path, format!("file ends inside the header at byte offset {at}")))
}

fn check_magic(bytes: &[u8], want: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != want {
        return Err(format_err(path, format!("bad magic {magic} at byte offset 0, expected {want}")));
    }
    Ok(())
}

fn check_len(bytes: &[u8], want: usize, path: &Path) -> Result<()> {
    if bytes.len() < want {
        return Err(format_err(path, format!("file is short: payload ends at byte offset {} of {want}", bytes.len())));
    }
    Ok(())
}

/// Parses an IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IDX_IMAGE_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let h = be_u32(bytes, 8, path)? as usize;
    let w = be_u32(bytes, 12, path)? as usize;
    check_len(bytes, 16 + n * h * w, path)?;
    Ok((n, h, w, bytes[16..16 + n * h * w].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABEL_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    check_len(bytes, 8 + n, path)?;
    let labels: Vec<usize> = bytes[8..8 + n].iter().map(|&b| b as usize).collect();
    check_labels(&labels, 8, 1, path)?;
    Ok(labels)
}

fn check_labels(labels: &[usize], base: usize, stride: usize, path: &Path) -> Result<()> {
    if let Some(i) = labels.iter().position(|&l| l >= CLASSES) {
        return Err(format_err(
            path,
            format!("label {} at byte offset {} is outside 0..{CLASSES}", labels[i], base + i * stride),
        ));
    }
    Ok(())
}

pub fn encode_idx_images(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGE_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Decodes CIFAR-10 records into interleaved `H×W×C` pixels scaled to `[0, 1]`.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let at = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(format_err(path, format!("truncated record at byte offset {at} ({CIFAR_RECORD}-byte records)")));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = vec![0.0f32; n * 3072];
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        labels.push(rec[0] as usize);
        let out = &mut pixels[r * 3072..(r + 1) * 3072];
        for (c, plane) in rec[1..].chunks_exact(1024).enumerate() {
            for (p, &v) in plane.iter().enumerate() {
                out[p * 3 + c] = v as f32 / 255.0;
            }
        }
    }
    check_labels(&labels, 0, CIFAR_RECORD, path)?;
    Ok((pixels, labels))
}

fn find(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    for name in names {
        for candidate in [dir.join(name), dir.join(format!("{name}.gz"))] {
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(Error::Io {
        path: dir.join(names[0]),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found (raw or .gz)"),
    })
}

/// Raw pixels scaled to `[0, 1]`, before any split or standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawData {
    pub name: String,
    pub train: DatasetSplit,
    pub test: DatasetSplit,
}

fn idx_pair(dir: &Path, images: &[&str], labels: &[&str], name: SplitName) -> Result<DatasetSplit> {
    let ipath = find(dir, images)?;
    let lpath = find(dir, labels)?;
    let (n, h, w, px) = parse_idx_images(&read_maybe_gz(&ipath)?, &ipath)?;
    let labels = parse_idx_labels(&read_maybe_gz(&lpath)?, &lpath)?;
    if labels.len() != n {
        return Err(format_err(&lpath, format!("{} labels for {n} images in {}", labels.len(), ipath.display())));
    }
    let images = Tensor::from_vec(&[n, h, w, 1], px.iter().map(|&v| v as f32 / 255.0).collect())?;
    Ok(DatasetSplit::new(name, images, labels))
}

pub fn load_mnist_raw(dir: &Path) -> Result<RawData> {
    Ok(RawData {
        name: String::from("mnist"),
        train: idx_pair(
            dir,
            &["train-images-idx3-ubyte", "train-images.idx3-ubyte"],
            &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"],
            SplitName::Train,
        )?,
        test: idx_pair(
            dir,
            &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"],
            &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"],
            SplitName::Test,
        )?,
    })
}

fn cifar_files(dir: &Path, names: &[String], split: SplitName) -> Result<DatasetSplit> {
    let nested = dir.join("cifar-10-batches-bin");
    let root = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let (mut px, mut labels) = (Vec::new(), Vec::new());
    for name in names {
        let path = find(&root, &[name])?;
        let (p, l) = parse_cifar_batch(&read_maybe_gz(&path)?, &path)?;
        px.extend(p);
        labels.extend(l);
    }
    Ok(DatasetSplit::new(split, Tensor::from_vec(&[labels.len(), 32, 32, 3], px)?, labels))
}

pub fn load_cifar10_raw(dir: &Path) -> Result<RawData> {
    let train: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    Ok(RawData {
        name: String::from("cifar10"),
        train: cifar_files(dir, &train, SplitName::Train)?,
        test: cifar_files(dir, &[String::from("test_batch.bin")], SplitName::Test)?,
    })
}

/// Moves the last `count` training examples into a validation split.
pub fn split_tail(train: DatasetSplit, count: usize) -> Result<(DatasetSplit, DatasetSplit)> {
    let n = train.len();
    if count >= n {
        return Err(Error::Failed(format!("validation size {count} leaves no training examples out of {n}")));
    }
    let (h, w, c) = train.extent();
    let keep = n - count;
    let mut data = train.images.into_data();
    let val = data.split_off(keep * h * w * c);
    let mut labels = train.labels;
    let val_labels = labels.split_off(keep);
    Ok((
        DatasetSplit::new(SplitName::Train, Tensor::from_vec(&[keep, h, w, c], data)?, labels),
        DatasetSplit::new(SplitName::Validation, Tensor::from_vec(&[count, h, w, c], val)?, val_labels),
    ))
}

/// Per-channel mean and (population) standard deviation.
pub fn channel_stats(split: &DatasetSplit) -> (Vec<f64>, Vec<f64>) {
    let c = split.extent().2;
    let (mut sum, mut sq) = (vec![0.0f64; c], vec![0.0f64; c]);
    for px in split.images.data().chunks_exact(c) {
        for (k, &v) in px.iter().enumerate() {
            sum[k] += v as f64;
        }
    }
    let count = (split.images.numel() / c).max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    for px in split.images.data().chunks_exact(c) {
        for (k, &v) in px.iter().enumerate() {
            sq[k] += (v as f64 - mean[k]).powi(2);
        }
    }
    let std = sq.iter().map(|s| (s / count).sqrt().max(1e-12)).collect();
    (mean, std)
}

pub fn standardize(split: &mut DatasetSplit, mean: &[f64], std: &[f64]) {
    let c = mean.len();
    for px in split.images.data_mut().chunks_exact_mut(c) {
        for (k, v) in px.iter_mut().enumerate() {
            *v = ((*v as f64 - mean[k]) / std[k]) as f32;
        }
    }
    split.rehash();
}

/// Placement of each source image on a larger noise canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranslateSpec {
    pub canvas: usize,
    pub seed: u64,
}

impl TranslateSpec {
    /// Half again the source extent: 28 → 42, 32 → 48.
    pub fn default_canvas(source: usize) -> usize {
        source * 3 / 2
    }
}

/// Pastes every image at an independent uniform offset over fresh uniform
/// noise in `[0, 1]`. Returns the split and the `(row, col)` offsets.
pub fn translate_with_offsets(
    split: &DatasetSplit,
    spec: TranslateSpec,
) -> Result<(DatasetSplit, Vec<(usize, usize)>)> {
    let (h, w, c) = split.extent();
    if spec.canvas < h || spec.canvas < w {
        return Err(Error::Core(lrlc_core::Error::Config(format!(
            "canvas {} is smaller than the {h}x{w} source",
            spec.canvas
        ))));
    }
    let s = spec.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = vec![0.0f32; split.len() * s * s * c];
    let mut offsets = Vec::with_capacity(split.len());
    for (b, canvas) in data.chunks_exact_mut(s * s * c).enumerate() {
        let oi = rng.random_range(0..=s - h);
        let oj = rng.random_range(0..=s - w);
        offsets.push((oi, oj));
        for v in canvas.iter_mut() {
            *v = rng.random::<f32>();
        }
        let src = split.example(b);
        for i in 0..h {
            let row = &src[i * w * c..(i + 1) * w * c];
            let at = ((oi + i) * s + oj) * c;
            canvas[at..at + w * c].copy_from_slice(row);
        }
    }
    let images = Tensor::from_vec(&[split.len(), s, s, c], data)?;
    Ok((DatasetSplit::new(split.name, images, split.labels.clone()), offsets))
}

pub fn translate_dataset(split: &DatasetSplit, spec: TranslateSpec) -> Result<DatasetSplit> {
    Ok(translate_with_offsets(split, spec)?.0)
}

/// How a dataset is carved and preprocessed.
#[derive(Debug, Clone, PartialEq)]
pub struct Preparation {
    pub validation: usize,
    /// Canvas extent and seed when translating; `None` keeps the source images.
    pub translate: Option<TranslateSpec>,
    /// Keep only the first examples of a split (0 keeps all).
    pub train_limit: usize,
    pub test_limit: usize,
}

impl Default for Preparation {
    fn default() -> Self {
        Preparation { validation: 5000, translate: None, train_limit: 0, test_limit: 0 }
    }
}

/// Splits, optionally translates, then standardizes by training-split statistics.
pub fn prepare(raw: RawData, prep: &Preparation) -> Result<Dataset> {
    let (mut train, mut validation) = split_tail(raw.train, prep.validation)?;
    let mut test = raw.test;
    if let Some(t) = prep.translate {
        // one stream per split so the splits do not share offsets
        train = translate_dataset(&train, TranslateSpec { seed: t.seed.wrapping_mul(3), ..t })?;
        validation = translate_dataset(&validation, TranslateSpec { seed: t.seed.wrapping_mul(3) + 1, ..t })?;
        test = translate_dataset(&test, TranslateSpec { seed: t.seed.wrapping_mul(3) + 2, ..t })?;
    }
    let (mean, std) = channel_stats(&train);
    for s in [&mut train, &mut validation, &mut test] {
        standardize(s, &mean, &std);
    }
    Ok(Dataset {
        name: raw.name,
        train: train.truncate(prep.train_limit),
        validation,
        test: test.truncate(prep.test_limit),
        mean,
        std,
    })
}

pub fn load_mnist(dir: &Path) -> Result<Dataset> {
    prepare(load_mnist_raw(dir)?, &Preparation::default())
}

pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    prepare(load_cifar10_raw(dir)?, &Preparation::default())
}

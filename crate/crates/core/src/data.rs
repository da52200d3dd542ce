//! Datasets: IDX and CSV loaders, synthetic tasks, balanced halving and
//! batch ordering.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{ShapeError, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("file truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("image file has {images} items, label file has {labels}")]
    LengthMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("csv: {0}")]
    Csv(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("class {class} has {count} samples, at least 2 needed to split")]
    ClassTooSmall { class: usize, count: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Per-channel affine normalization `x' = (x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Images `(N, C, H, W)` stored normalized, with the normalization kept so
/// raw values can be recovered.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub id: String,
    images: Tensor<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    normalization: Normalization,
}

impl Dataset {
    /// Wraps raw (unnormalized) images; normalization starts as identity.
    pub fn new(id: impl Into<String>, images: Tensor<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(DataError::InvalidParameter(format!("images must be (N, C, H, W), got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(DataError::LengthMismatch {
                images: shape[0],
                labels: labels.len(),
            });
        }
        if num_classes == 0 {
            return Err(DataError::InvalidParameter("num_classes must be positive".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::LabelOutOfRange { label, num_classes });
        }
        let channels = shape[1];
        Ok(Dataset {
            id: id.into(),
            images,
            labels,
            num_classes,
            normalization: Normalization::identity(channels),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f64> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// `(H, W)`.
    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    fn plane(&self) -> usize {
        let s = self.images.shape();
        s[2] * s[3]
    }

    fn sample_len(&self) -> usize {
        self.channels() * self.plane()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Per-channel mean and standard deviation of the raw pixel values.
    pub fn raw_statistics(&self) -> Normalization {
        let c = self.channels();
        let plane = self.plane();
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let count = (self.len() * plane).max(1) as f64;
        let (m0, s0) = (&self.normalization.mean, &self.normalization.std);
        for sample in self.images.data().chunks(self.sample_len()) {
            for ch in 0..c {
                for &v in &sample[ch * plane..(ch + 1) * plane] {
                    let raw = v * s0[ch] + m0[ch];
                    mean[ch] += raw;
                    sq[ch] += raw * raw;
                }
            }
        }
        let std = (0..c)
            .map(|ch| {
                let m = mean[ch] / count;
                let var = (sq[ch] / count - m * m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mean = mean.into_iter().map(|m| m / count).collect();
        Normalization { mean, std }
    }

    /// Re-expresses the stored images under `target`.
    pub fn renormalize(&mut self, target: &Normalization) -> Result<(), DataError> {
        let c = self.channels();
        if target.mean.len() != c || target.std.len() != c {
            return Err(DataError::InvalidParameter(format!(
                "normalization has {} channels, dataset has {c}",
                target.mean.len()
            )));
        }
        if target.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(DataError::InvalidParameter("normalization std must be positive".into()));
        }
        let plane = self.plane();
        let sample_len = self.sample_len();
        let src = self.normalization.clone();
        for sample in self.images.data_mut().chunks_mut(sample_len) {
            for ch in 0..c {
                for v in &mut sample[ch * plane..(ch + 1) * plane] {
                    let raw = *v * src.std[ch] + src.mean[ch];
                    *v = (raw - target.mean[ch]) / target.std[ch];
                }
            }
        }
        self.normalization = target.clone();
        Ok(())
    }

    /// Normalizes with this dataset's own statistics.
    pub fn standardize(&mut self) -> Result<(), DataError> {
        let stats = self.raw_statistics();
        self.renormalize(&stats)
    }

    /// Pixel values with the normalization undone.
    pub fn raw_images(&self) -> Vec<f64> {
        let c = self.channels();
        let plane = self.plane();
        let n = &self.normalization;
        let mut out = self.images.data().to_vec();
        for sample in out.chunks_mut(self.sample_len()) {
            for ch in 0..c {
                for v in &mut sample[ch * plane..(ch + 1) * plane] {
                    *v = *v * n.std[ch] + n.mean[ch];
                }
            }
        }
        out
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, id: impl Into<String>, indices: &[usize]) -> Dataset {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            id: id.into(),
            images: Tensor::new(shape, data).expect("subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            normalization: self.normalization.clone(),
        }
    }

    /// A batch converted to the working precision.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend(self.images.data()[i * len..(i + 1) * len].iter().map(|&v| T::lit(v)));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }
}

/// A train split and a held-out test split normalized with the train
/// split's statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
}

impl TaskData {
    pub fn new(mut train: Dataset, mut test: Dataset) -> Result<Self, DataError> {
        if train.images.shape()[1..] != test.images.shape()[1..] {
            return Err(DataError::InvalidParameter(format!(
                "train images {:?} and test images {:?} differ in shape",
                &train.images.shape()[1..],
                &test.images.shape()[1..]
            )));
        }
        if train.num_classes != test.num_classes {
            return Err(DataError::InvalidParameter("train and test class counts differ".into()));
        }
        let stats = train.raw_statistics();
        train.renormalize(&stats)?;
        test.renormalize(&stats)?;
        Ok(TaskData { train, test })
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn id(&self) -> &str {
        &self.train.id
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            needed: offset + 4,
            available: bytes.len(),
        })
}

/// Parses an IDX image file (`u8`, `N x rows x cols`) and label file.
pub fn parse_idx(id: &str, images: &[u8], labels: &[u8]) -> Result<Dataset, DataError> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = be_u32(labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n != n_labels {
        return Err(DataError::LengthMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let pixels = n * rows * cols;
    let body = images.get(16..16 + pixels).ok_or(DataError::Truncated {
        needed: 16 + pixels,
        available: images.len(),
    })?;
    let label_bytes = labels.get(8..8 + n).ok_or(DataError::Truncated {
        needed: 8 + n,
        available: labels.len(),
    })?;
    let data = body.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    let tensor = Tensor::new(vec![n, 1, rows, cols], data)?;
    let mut ds = Dataset::new(id, tensor, labels, num_classes)?;
    ds.standardize()?;
    Ok(ds)
}

/// Loads an IDX image/label file pair, scaling bytes to `[0, 1]` and then
/// standardizing with the file's own statistics.
pub fn load_idx(path_images: &Path, path_labels: &Path) -> Result<Dataset, DataError> {
    let id = path_images
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    parse_idx(&id, &read(path_images)?, &read(path_labels)?)
}

/// Loads a CSV with a header row, a `label` column, and the remaining
/// columns holding pixel values in row-major `(C, H, W)` order.
pub fn load_csv(path: &Path, shape: [usize; 3], num_classes: Option<usize>) -> Result<Dataset, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| DataError::Csv(e.to_string()))?;
    let headers = reader.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| DataError::Csv("no `label` column".into()))?;
    let per_sample: usize = shape.iter().product();
    if headers.len() != per_sample + 1 {
        return Err(DataError::Csv(format!(
            "expected {} pixel columns for shape {shape:?}, found {}",
            per_sample,
            headers.len() - 1
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        for (col, field) in record.iter().enumerate() {
            let parse_err = || DataError::Csv(format!("row {}: column {col}: cannot parse `{field}`", row + 1));
            if col == label_col {
                labels.push(usize::from_str(field.trim()).map_err(|_| parse_err())?);
            } else {
                data.push(f64::from_str(field.trim()).map_err(|_| parse_err())?);
            }
        }
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let id = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    let tensor = Tensor::new(vec![labels.len(), shape[0], shape[1], shape[2]], data)?;
    let mut ds = Dataset::new(id, tensor, labels, classes)?;
    ds.standardize()?;
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Mixture-of-prototype images: each class owns a few random templates
    /// supported on a shared subset of informative pixels; the rest of the
    /// image is pure noise.
    Blobs,
    /// Oriented gratings with random phase; classes differ by orientation
    /// and frequency.
    Stripes,
}

impl FromStr for SynthKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blobs" => Ok(SynthKind::Blobs),
            "stripes" => Ok(SynthKind::Stripes),
            other => Err(DataError::InvalidParameter(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: SynthKind,
    /// Samples per class, train and test together.
    pub n_per_class: usize,
    pub num_classes: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    /// Fraction of each class held out for testing.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Fraction of pixels carrying signal (`blobs`).
    #[serde(default = "default_informative")]
    pub informative: f64,
    /// Templates per class (`blobs`).
    #[serde(default = "default_modes")]
    pub modes: usize,
    pub seed: u64,
}

fn default_channels() -> usize {
    1
}
fn default_size() -> usize {
    12
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_noise() -> f64 {
    1.0
}
fn default_informative() -> f64 {
    0.25
}
fn default_modes() -> usize {
    3
}

impl SynthConfig {
    pub fn new(kind: SynthKind, n_per_class: usize, num_classes: usize, seed: u64) -> Self {
        SynthConfig {
            kind,
            n_per_class,
            num_classes,
            channels: default_channels(),
            size: default_size(),
            test_fraction: default_test_fraction(),
            noise: default_noise(),
            informative: default_informative(),
            modes: default_modes(),
            seed,
        }
    }

    pub fn id(&self) -> String {
        let kind = match self.kind {
            SynthKind::Blobs => "blobs",
            SynthKind::Stripes => "stripes",
        };
        format!("synth-{kind}-c{}-s{}", self.num_classes, self.seed)
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidParameter(m.into()));
        if self.n_per_class == 0 {
            return bad("n_per_class must be positive");
        }
        if self.num_classes == 0 || self.channels == 0 || self.size == 0 || self.modes == 0 {
            return bad("num_classes, channels, size and modes must be positive");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)");
        }
        let n_test = self.test_count();
        if n_test == 0 || n_test == self.n_per_class {
            return bad("n_per_class too small for a train/test split");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be nonnegative");
        }
        if !(self.informative > 0.0 && self.informative <= 1.0) {
            return bad("informative must lie in (0, 1]");
        }
        Ok(())
    }

    fn test_count(&self) -> usize {
        (self.n_per_class as f64 * self.test_fraction).round() as usize
    }
}

/// Default synthetic task with the given kind, size and seed.
pub fn synth_task(kind: SynthKind, n_per_class: usize, num_classes: usize, seed: u64) -> Result<TaskData, DataError> {
    synth_task_with(&SynthConfig::new(kind, n_per_class, num_classes, seed))
}

/// Deterministic synthetic task; train and test samples are separate draws
/// from the same class-conditional distributions.
pub fn synth_task_with(cfg: &SynthConfig) -> Result<TaskData, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plane = cfg.size * cfg.size;
    let per = cfg.channels * plane;
    let k = cfg.num_classes;

    let sampler: Box<dyn Fn(&mut ChaCha8Rng, usize) -> Vec<f64>> = match cfg.kind {
        SynthKind::Blobs => {
            let n_inf = ((per as f64 * cfg.informative).round() as usize).clamp(1, per);
            let mut pixels: Vec<usize> = (0..per).collect();
            pixels.shuffle(&mut rng);
            pixels.truncate(n_inf);
            pixels.sort_unstable();
            let templates: Vec<Vec<Vec<f64>>> = (0..k)
                .map(|_| {
                    (0..cfg.modes)
                        .map(|_| (0..n_inf).map(|_| 2.0 * normal(&mut rng)).collect())
                        .collect()
                })
                .collect();
            let noise = cfg.noise;
            Box::new(move |rng, class| {
                let mode = rng.random_range(0..templates[class].len());
                let mut x: Vec<f64> = (0..per).map(|_| noise * normal(rng)).collect();
                for (&p, &t) in pixels.iter().zip(&templates[class][mode]) {
                    x[p] += t;
                }
                x
            })
        }
        SynthKind::Stripes => {
            let size = cfg.size;
            let channels = cfg.channels;
            let noise = cfg.noise;
            let tints: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..channels).map(|_| 0.5 + rng.random::<f64>()).collect())
                .collect();
            Box::new(move |rng, class| {
                let theta = std::f64::consts::PI * class as f64 / k as f64;
                let freq = 2.0 * std::f64::consts::PI * (1.0 + (class % 2) as f64) / size as f64 * 1.5;
                let phase = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
                let (s, c) = theta.sin_cos();
                let mut x = Vec::with_capacity(per);
                for tint in &tints[class] {
                    for i in 0..size {
                        for j in 0..size {
                            let u = c * j as f64 + s * i as f64;
                            x.push(tint * (freq * u + phase).sin() + noise * normal(rng));
                        }
                    }
                }
                x
            })
        }
    };

    let n_test = cfg.test_count();
    let n_train = cfg.n_per_class - n_test;
    let split = |count: usize, rng: &mut ChaCha8Rng| {
        let mut data = Vec::with_capacity(count * k * per);
        let mut labels = Vec::with_capacity(count * k);
        for _ in 0..count {
            for class in 0..k {
                data.extend(sampler(rng, class));
                labels.push(class);
            }
        }
        (data, labels)
    };
    let (train_x, train_y) = split(n_train, &mut rng);
    let (test_x, test_y) = split(n_test, &mut rng);
    let id = cfg.id();
    let shape = |n| vec![n, cfg.channels, cfg.size, cfg.size];
    let train = Dataset::new(id.clone(), Tensor::new(shape(train_y.len()), train_x)?, train_y, k)?;
    let test = Dataset::new(format!("{id}/test"), Tensor::new(shape(test_y.len()), test_x)?, test_y, k)?;
    TaskData::new(train, test)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Per-class balanced random halving. A class with an odd count puts the
/// extra sample in the second half.
pub fn split_halves(dataset: &Dataset, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(DataError::ClassTooSmall {
                class,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let half = idx.len() / 2;
        a.extend_from_slice(&idx[..half]);
        b.extend_from_slice(&idx[half..]);
    }
    a.sort_unstable();
    b.sort_unstable();
    Ok((
        dataset.subset(format!("{}/half-a", dataset.id), &a),
        dataset.subset(format!("{}/half-b", dataset.id), &b),
    ))
}

/// How to reconcile a dataset's channel count with a model's.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelAdapt {
    /// Fail on mismatch.
    #[default]
    Strict,
    /// 1 → C by copying; C → 1 by averaging.
    Auto,
}

/// Converts a dataset to `channels` channels. Only 1 ↔ C conversions are
/// defined: replication upward, averaging downward. The result is
/// standardized again with its own statistics.
pub fn adapt_channels(dataset: &Dataset, channels: usize, mode: ChannelAdapt) -> Result<Dataset, DataError> {
    let have = dataset.channels();
    if have == channels {
        return Ok(dataset.clone());
    }
    if mode == ChannelAdapt::Strict || (have != 1 && channels != 1) || channels == 0 {
        return Err(DataError::InvalidParameter(format!(
            "cannot adapt {have} channels to {channels} with mode {mode:?}"
        )));
    }
    let (h, w) = dataset.image_size();
    let plane = h * w;
    let raw = dataset.raw_images();
    let mut data = Vec::with_capacity(dataset.len() * channels * plane);
    for sample in raw.chunks(have * plane) {
        if have == 1 {
            for _ in 0..channels {
                data.extend_from_slice(sample);
            }
        } else {
            for p in 0..plane {
                data.push((0..have).map(|c| sample[c * plane + p]).sum::<f64>() / have as f64);
            }
        }
    }
    let tensor = Tensor::new(vec![dataset.len(), channels, h, w], data)?;
    let mut out = Dataset::new(dataset.id.clone(), tensor, dataset.labels.clone(), dataset.num_classes)?;
    out.standardize()?;
    Ok(out)
}

/// Sample order for one epoch, drawn from a stream keyed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut v = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [n, rows, cols] {
            v.extend(d.to_be_bytes());
        }
        v.extend((0..n * rows * cols).map(|i| (i % 256) as u8));
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        v.extend((labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn idx_shapes_and_magic() {
        let ds = parse_idx("t", &idx_images(3, 28, 28), &idx_labels(&[0, 1, 2])).unwrap();
        assert_eq!(ds.images().shape(), &[3, 1, 28, 28]);
        assert_eq!(ds.num_classes(), 3);

        let mut bad = idx_images(3, 28, 28);
        bad[3] = 0x02;
        assert!(matches!(
            parse_idx("t", &bad, &idx_labels(&[0, 1, 2])),
            Err(DataError::BadMagic { found: 0x802, .. })
        ));
        assert!(matches!(
            parse_idx("t", &idx_images(3, 2, 2), &idx_labels(&[0, 1])),
            Err(DataError::LengthMismatch { images: 3, labels: 2 })
        ));
        let mut short = idx_images(3, 2, 2);
        short.pop();
        assert!(matches!(
            parse_idx("t", &short, &idx_labels(&[0, 1, 2])),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn idx_values_scaled_then_standardized() {
        let ds = parse_idx("t", &idx_images(2, 2, 2), &idx_labels(&[0, 1])).unwrap();
        let raw = ds.raw_images();
        for (i, v) in raw.iter().enumerate() {
            assert!((v - i as f64 / 255.0).abs() < 1e-12);
        }
        let mean: f64 = ds.images().data().iter().sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_task(SynthKind::Blobs, 10, 4, 7).unwrap();
        let b = synth_task(SynthKind::Blobs, 10, 4, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.class_counts(), vec![8; 4]);
        assert_eq!(a.test.class_counts(), vec![2; 4]);
        let c = synth_task(SynthKind::Blobs, 10, 4, 8).unwrap();
        assert_ne!(a.train.images(), c.train.images());
        assert!(synth_task(SynthKind::Stripes, 0, 4, 7).is_err());
    }

    #[test]
    fn test_split_shares_train_normalization() {
        let t = synth_task(SynthKind::Stripes, 20, 3, 1).unwrap();
        assert_eq!(t.train.normalization(), t.test.normalization());
        let stats = t.train.raw_statistics();
        for (a, b) in stats.mean.iter().zip(&t.train.normalization().mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn halves_are_balanced_partition() {
        let t = synth_task(SynthKind::Blobs, 100, 2, 3).unwrap();
        let full = t.train.subset("full", &(0..t.train.len()).collect::<Vec<_>>());
        let (a, b) = split_halves(&full, 11).unwrap();
        assert_eq!(a.class_counts(), vec![40, 40]);
        assert_eq!(b.class_counts(), vec![40, 40]);
        assert!(split_halves(&full.subset("one", &[0]), 0).is_err());
    }

    #[test]
    fn channel_adaptation() {
        let t = synth_task(SynthKind::Stripes, 5, 2, 0).unwrap();
        let rgb = adapt_channels(&t.train, 3, ChannelAdapt::Auto).unwrap();
        assert_eq!(rgb.channels(), 3);
        let back = adapt_channels(&rgb, 1, ChannelAdapt::Auto).unwrap();
        assert_eq!(back.channels(), 1);
        assert!(adapt_channels(&t.train, 3, ChannelAdapt::Strict).is_err());
        assert!(adapt_channels(&rgb, 2, ChannelAdapt::Auto).is_err());
    }

    #[test]
    fn epoch_order_depends_on_seed_and_epoch() {
        let a = epoch_order(50, 1, 0);
        assert_eq!(a, epoch_order(50, 1, 0));
        assert_ne!(a, epoch_order(50, 1, 1));
        assert_ne!(a, epoch_order(50, 2, 0));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}

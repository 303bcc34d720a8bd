//! Datasets: IDX and CIFAR-binary readers, a procedural shapes generator and
//! stratified splitting. Pixels live in `[0, 1]`; labels are one-hot rows.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Tensor,
    classes: usize,
    name: String,
}

impl Dataset {
    /// Validates `N x C x H x W` images in `[0, 1]` and `N x K` one-hot labels.
    pub fn new(name: impl Into<String>, images: Tensor, labels: Tensor) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Validation(format!("images must be N x C x H x W, got {:?}", images.shape())));
        }
        if labels.rank() != 2 || labels.rows() != images.rows() {
            return Err(Error::Validation(format!(
                "labels {:?} do not match {} images",
                labels.shape(),
                images.rows()
            )));
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Validation("pixel outside [0, 1]".into()));
        }
        let classes = labels.shape()[1];
        for (i, row) in labels.data().chunks(classes).enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != classes {
                return Err(Error::Validation(format!("label row {i} is not one-hot")));
            }
        }
        Ok(Dataset { images, labels, classes, name: name.into() })
    }

    pub fn from_labels(name: impl Into<String>, images: Tensor, labels: &[usize], classes: usize) -> Result<Self> {
        let onehot = Tensor::one_hot(labels, classes)?;
        Self::new(name, images, onehot)
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &Tensor {
        &self.labels
    }

    /// Per-sample `C x H x W`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.data().chunks(self.classes).map(argmax).collect()
    }

    /// Inputs and labels for the given sample indices, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        Ok((self.images.select_rows(indices)?, self.labels.select_rows(indices)?))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Ok(Dataset { images, labels, classes: self.classes, name: self.name.clone() })
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Same labels, different pixels (e.g. a corrupted copy).
    pub fn with_images(&self, images: Tensor) -> Result<Self> {
        if images.shape() != self.images.shape() {
            return Err(Error::Dimension(format!(
                "replacement images {:?} vs {:?}",
                images.shape(),
                self.images.shape()
            )));
        }
        Dataset::new(self.name.clone(), images, self.labels.clone())
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("{what}: header truncated at byte {offset}")))
}

/// Parses IDX image and label buffers. The class count is one past the largest
/// label (at least two).
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let magic = be_u32(image_bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format { offset: 0, message: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}") });
    }
    let n = be_u32(image_bytes, 4, "images")? as usize;
    let h = be_u32(image_bytes, 8, "images")? as usize;
    let w = be_u32(image_bytes, 12, "images")? as usize;
    let pixels = &image_bytes[16..];
    if pixels.len() != n * h * w {
        return Err(Error::Length(format!(
            "images: {n}x{h}x{w} needs {} pixel bytes, found {}",
            n * h * w,
            pixels.len()
        )));
    }
    let magic = be_u32(label_bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format { offset: 0, message: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}") });
    }
    let count = be_u32(label_bytes, 4, "labels")? as usize;
    let labels = &label_bytes[8..];
    if count != n || labels.len() != n {
        return Err(Error::Length(format!(
            "labels: header says {count}, file holds {}, images hold {n}",
            labels.len()
        )));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Length("empty IDX file".into()));
    }
    let images = Tensor::new([n, 1, h, w], pixels.iter().map(|&b| b as f32 / 255.0).collect())?;
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let classes = (labels.iter().copied().max().unwrap_or(0) + 1).max(2);
    Dataset::from_labels("idx", images, &labels, classes)
}

pub fn read_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

/// Quantizes to bytes (`round(255 p)`) and emits IDX image and label buffers.
/// Only single-channel datasets are representable.
pub fn encode_idx(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = dataset.sample_shape();
    if s[0] != 1 {
        return Err(Error::Usage(format!("IDX holds single-channel images, dataset has {}", s[0])));
    }
    let n = dataset.len() as u32;
    let mut images = Vec::with_capacity(16 + dataset.images().len());
    for v in [IDX_IMAGES_MAGIC, n, s[1] as u32, s[2] as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(dataset.images().data().iter().map(|&p| (p * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    for l in dataset.label_indices() {
        if l > u8::MAX as usize {
            return Err(Error::Usage(format!("label {l} does not fit a byte")));
        }
        labels.push(l as u8);
    }
    Ok((images, labels))
}

pub fn write_idx(dataset: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (images, labels) = encode_idx(dataset)?;
    fs::File::create(images_path)?.write_all(&images)?;
    fs::File::create(labels_path)?.write_all(&labels)?;
    Ok(())
}

/// Parses concatenated CIFAR binary records: one label byte, then 1024 bytes
/// each of the red, green and blue 32x32 planes.
pub fn parse_cifar_binary(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            offset: bytes.len() - bytes.len() % CIFAR_RECORD,
            message: format!("length {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for (i, record) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format {
                offset: i * CIFAR_RECORD,
                message: format!("label {label} outside 0..{CIFAR_CLASSES}"),
            });
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::new([n, 3, 32, 32], pixels)?;
    Dataset::from_labels("cifar", images, &labels, CIFAR_CLASSES)
}

pub fn read_cifar_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_cifar_binary(&fs::read(path)?)
}

/// Shape families drawn by [`synth_shapes`], in class order.
pub const SHAPES: [&str; 6] = ["disk", "square", "cross", "ring", "triangle", "bar"];

fn inside(kind: usize, dx: f64, dy: f64, s: f64) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    match kind {
        0 => d <= s,
        1 => dx.abs() <= 0.8 * s && dy.abs() <= 0.8 * s,
        2 => (dx.abs() <= 0.3 * s && dy.abs() <= s) || (dy.abs() <= 0.3 * s && dx.abs() <= s),
        3 => d <= s && d >= 0.55 * s,
        4 => dy.abs() <= s && dx.abs() <= (dy + s) / 2.0,
        _ => dx.abs() <= s && dy.abs() <= 0.3 * s,
    }
}

/// Grayscale images of one procedurally drawn shape each, at a random
/// position, size and intensity, plus Gaussian pixel noise. Sample `i` has
/// label `i % classes`.
pub fn synth_shapes(n: usize, image_hw: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if !(2..=SHAPES.len()).contains(&classes) {
        return Err(Error::Config(format!("synth_shapes supports 2..=6 classes, got {classes}")));
    }
    if image_hw < 16 {
        return Err(Error::Config(format!("synth_shapes needs images of at least 16 pixels, got {image_hw}")));
    }
    if n == 0 || !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("synth_shapes with n = {n}, noise = {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = image_hw as f64;
    let mut pixels = Vec::with_capacity(n * image_hw * image_hw);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &kind in &labels {
        let s = hw * rng.random_range(0.25..0.36);
        let jitter = (hw / 2.0 - s).min(hw / 8.0);
        let cx = hw / 2.0 + rng.random_range(-jitter..=jitter);
        let cy = hw / 2.0 + rng.random_range(-jitter..=jitter);
        let background = rng.random_range(0.0..0.25);
        let ink = rng.random_range(0.65..1.0);
        for y in 0..image_hw {
            for x in 0..image_hw {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let mut v = if inside(kind, dx, dy, s) { ink } else { background };
                if noise > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    v += noise * z;
                }
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    let images = Tensor::new([n, 1, image_hw, image_hw], pixels)?;
    Dataset::from_labels("synth_shapes", images, &labels, classes)
}

/// Uniform-noise images, used as an out-of-distribution source.
pub fn uniform_noise(n: usize, sample_shape: &[usize], classes: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = sample_shape.iter().product();
    let data = (0..n * per).map(|_| rng.random::<f32>()).collect();
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    Dataset::from_labels("uniform_noise", Tensor::new(shape, data)?, &vec![0; n], classes)
}

/// Stratified, seed-deterministic partition into index sets (each sorted).
///
/// Every class is shuffled and its members spread evenly over one global
/// ordering; the ordering is then cut at the cumulative fractions, so each
/// part holds every class in proportion to within one sample.
pub fn split_indices(labels: &[usize], fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || (total - 1.0).abs() > 1e-6 || fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let n = labels.len();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
    for c in 0..classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let size = members.len() as f64;
        for (rank, idx) in members.into_iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / size, c, idx));
        }
    }
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut parts = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (k, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if k + 1 == fractions.len() { n } else { ((cum * n as f64).round() as usize).min(n) };
        let mut part: Vec<usize> = keyed[start..end.max(start)].iter().map(|e| e.2).collect();
        part.sort_unstable();
        parts.push(part);
        start = end.max(start);
    }
    Ok(parts)
}

pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    split_indices(&dataset.label_indices(), fractions, seed)?
        .into_iter()
        .map(|idx| {
            if idx.is_empty() {
                Err(Error::Config("split produced an empty part".into()))
            } else {
                dataset.subset(&idx)
            }
        })
        .collect()
}

//! In-memory image datasets, deterministic batching and augmentation.

mod cifar;
mod synthetic;

pub use cifar::{cifar_root, load_cifar, CifarVariant, Split, DATA_ROOT_ENV};
pub use synthetic::{synthetic_dataset, SyntheticConfig};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reviewkd_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Per-channel standardization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Random crop with zero padding plus horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentation {
    pub pad: usize,
    pub flip: bool,
}

impl Augmentation {
    /// Crop back to the input size after `pad = 4`, random horizontal flip.
    pub const CROP_FLIP: Augmentation = Augmentation { pad: 4, flip: true };
}

#[derive(Clone, Debug)]
enum Pixels {
    /// Already standardized values.
    Float(Vec<f32>),
    /// Raw bytes, scaled to `[0, 1]` then standardized on access.
    Bytes { data: Vec<u8>, norm: Normalization },
}

/// A labeled image collection stored as `(C, H, W)` records.
#[derive(Clone, Debug)]
pub struct Dataset {
    name: String,
    shape: (usize, usize, usize),
    classes: usize,
    labels: Vec<usize>,
    pixels: Pixels,
    augmentation: Option<Augmentation>,
}

/// One minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    /// `(N, C, H, W)`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Dataset record of every row.
    pub indices: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Hex SHA-256 over image bits and labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.images.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        for l in &self.labels {
            h.update((*l as u64).to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }
}

impl Dataset {
    /// Standardized float records; `data.len()` must be `labels.len() · C·H·W`.
    pub fn from_standardized(
        name: impl Into<String>,
        shape: (usize, usize, usize),
        classes: usize,
        data: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        Self::validated(name.into(), shape, classes, labels, Pixels::Float(data))
    }

    /// Raw byte records standardized on access with `norm`.
    pub fn from_bytes(
        name: impl Into<String>,
        shape: (usize, usize, usize),
        classes: usize,
        data: Vec<u8>,
        labels: Vec<usize>,
        norm: Normalization,
    ) -> Result<Self> {
        if norm.mean.len() != shape.0 || norm.std.len() != shape.0 || norm.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Data(format!("normalization does not fit {} channels", shape.0)));
        }
        Self::validated(name.into(), shape, classes, labels, Pixels::Bytes { data, norm })
    }

    fn validated(
        name: String,
        shape: (usize, usize, usize),
        classes: usize,
        labels: Vec<usize>,
        pixels: Pixels,
    ) -> Result<Self> {
        let record = shape.0 * shape.1 * shape.2;
        let len = match &pixels {
            Pixels::Float(d) => d.len(),
            Pixels::Bytes { data, .. } => data.len(),
        };
        if record == 0 || classes == 0 {
            return Err(Error::Data(format!("{name}: empty image shape or no classes")));
        }
        if len != labels.len() * record {
            return Err(Error::Data(format!(
                "{name}: {len} values for {} records of {record}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("{name}: label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            name,
            shape,
            classes,
            labels,
            pixels,
            augmentation: None,
        })
    }

    /// Hex SHA-256 over shape, labels and stored pixels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for d in [self.shape.0, self.shape.1, self.shape.2, self.classes] {
            h.update((d as u64).to_le_bytes());
        }
        for l in &self.labels {
            h.update((*l as u64).to_le_bytes());
        }
        match &self.pixels {
            Pixels::Float(d) => d.iter().for_each(|v| h.update(v.to_bits().to_le_bytes())),
            Pixels::Bytes { data, norm } => {
                h.update(data);
                for v in norm.mean.iter().chain(&norm.std) {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Enables augmentation for shuffled (training) iteration.
    pub fn with_augmentation(mut self, aug: Option<Augmentation>) -> Self {
        self.augmentation = aug;
        self
    }

    pub fn augmentation(&self) -> Option<Augmentation> {
        self.augmentation
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

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `(C, H, W)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn record_len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    /// Standardized, unaugmented record `i` written into `out`.
    fn write_record(&self, i: usize, out: &mut [f64]) {
        let r = self.record_len();
        let plane = self.shape.1 * self.shape.2;
        match &self.pixels {
            Pixels::Float(d) => {
                for (o, v) in out.iter_mut().zip(&d[i * r..(i + 1) * r]) {
                    *o = f64::from(*v);
                }
            }
            Pixels::Bytes { data, norm } => {
                for (k, (o, v)) in out.iter_mut().zip(&data[i * r..(i + 1) * r]).enumerate() {
                    let c = k / plane;
                    *o = (f64::from(*v) / 255.0 - norm.mean[c]) / norm.std[c];
                }
            }
        }
    }

    /// Standardized value of a zero pixel in channel `c`.
    fn pad_value(&self, c: usize) -> f64 {
        match &self.pixels {
            Pixels::Float(_) => 0.0,
            Pixels::Bytes { norm, .. } => -norm.mean[c] / norm.std[c],
        }
    }

    /// Record `i` as a `(1, C, H, W)` tensor.
    pub fn image(&self, i: usize) -> Result<Tensor> {
        self.check_index(i)?;
        let mut buf = vec![0.0; self.record_len()];
        self.write_record(i, &mut buf);
        let (c, h, w) = self.shape;
        Ok(Tensor::new(&[1, c, h, w], buf)?)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::Data(format!("{}: record {i} of {}", self.name, self.len())));
        }
        Ok(())
    }

    /// Assembles the given records; when `aug_rng` is supplied and the
    /// dataset has augmentation enabled, each record is randomly cropped and
    /// flipped.
    pub fn batch<R: Rng + ?Sized>(&self, indices: &[usize], mut aug_rng: Option<&mut R>) -> Result<LabeledBatch> {
        let (c, h, w) = self.shape;
        let r = self.record_len();
        let mut data = vec![0.0; indices.len() * r];
        let mut scratch = vec![0.0; r];
        for (row, &i) in indices.iter().enumerate() {
            self.check_index(i)?;
            let out = &mut data[row * r..(row + 1) * r];
            match (self.augmentation, aug_rng.as_deref_mut()) {
                (Some(aug), Some(rng)) => {
                    self.write_record(i, &mut scratch);
                    let p = aug.pad as i64;
                    let dy = rng.random_range(-p..=p) as isize;
                    let dx = rng.random_range(-p..=p) as isize;
                    let flip = aug.flip && rng.random_bool(0.5);
                    for ch in 0..c {
                        let pad = self.pad_value(ch);
                        for y in 0..h {
                            for x in 0..w {
                                let xs = if flip { w - 1 - x } else { x } as isize + dx;
                                let ys = y as isize + dy;
                                out[(ch * h + y) * w + x] =
                                    if ys < 0 || xs < 0 || ys >= h as isize || xs >= w as isize {
                                        pad
                                    } else {
                                        scratch[(ch * h + ys as usize) * w + xs as usize]
                                    };
                            }
                        }
                    }
                }
                _ => self.write_record(i, out),
            }
        }
        Ok(LabeledBatch {
            images: Tensor::new(&[indices.len(), c, h, w], data)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        })
    }

    /// Iterates once over every record in minibatches. With a seed the order
    /// is shuffled and augmentation (if enabled) applied; without one the
    /// order is sequential and images are untouched.
    pub fn batches(&self, batch_size: usize, seed: Option<u64>) -> Batches<'_> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let rng = seed.map(|s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            order.shuffle(&mut r);
            r
        });
        Batches {
            data: self,
            order,
            pos: 0,
            batch_size: batch_size.max(1),
            rng,
        }
    }

    /// A new dataset holding the given records in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let r = self.record_len();
        let pixels = match &self.pixels {
            Pixels::Float(d) => Pixels::Float(indices.iter().flat_map(|&i| d[i * r..(i + 1) * r].iter().copied()).collect()),
            Pixels::Bytes { data, norm } => Pixels::Bytes {
                data: indices.iter().flat_map(|&i| data[i * r..(i + 1) * r].iter().copied()).collect(),
                norm: norm.clone(),
            },
        };
        for &i in indices {
            self.check_index(i)?;
        }
        Ok(Self {
            name: self.name.clone(),
            shape: self.shape,
            classes: self.classes,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            pixels,
            augmentation: self.augmentation,
        })
    }

    /// Mean and standard deviation of each channel over all standardized,
    /// unaugmented records.
    pub fn channel_stats(&self) -> Normalization {
        let (c, h, w) = self.shape;
        let plane = (h * w) as f64 * self.len() as f64;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut buf = vec![0.0; self.record_len()];
        for i in 0..self.len() {
            self.write_record(i, &mut buf);
            for (k, v) in buf.iter().enumerate() {
                sum[k / (h * w)] += v;
                sq[k / (h * w)] += v * v;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / plane).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / plane - m * m).max(0.0).sqrt())
            .collect();
        Normalization { mean, std }
    }

    /// Records per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Minibatch iterator returned by [`Dataset::batches`].
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: Option<ChaCha8Rng>,
}

impl Iterator for Batches<'_> {
    type Item = LabeledBatch;

    fn next(&mut self) -> Option<LabeledBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        // indices come from 0..len, so assembling cannot fail
        self.data.batch(idx, self.rng.as_mut()).ok()
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

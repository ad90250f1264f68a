use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Augmentation, Dataset, Normalization};
use crate::error::{Error, Result};

/// Environment variable consulted when no data root is passed explicitly.
pub const DATA_ROOT_ENV: &str = "REVIEWKD_DATA_ROOT";

const RECORD_PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl CifarVariant {
    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// Bytes of label before each record's pixels.
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    /// Directory name of the official binary archive.
    fn archive_dir(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar-10-batches-bin",
            CifarVariant::Cifar100 => "cifar-100-binary",
        }
    }

    fn files(self, split: Split) -> Vec<String> {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => (1..=5).map(|k| format!("data_batch_{k}.bin")).collect(),
            (CifarVariant::Cifar10, Split::Test) => vec!["test_batch.bin".into()],
            (CifarVariant::Cifar100, Split::Train) => vec!["train.bin".into()],
            (CifarVariant::Cifar100, Split::Test) => vec!["test.bin".into()],
        }
    }
}

/// The explicit root if given, else the environment override.
pub fn cifar_root(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
}

fn resolve_dir(root: &Path, variant: CifarVariant) -> PathBuf {
    let nested = root.join(variant.archive_dir());
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn read_split(dir: &Path, variant: CifarVariant, split: Split) -> Result<(Vec<u8>, Vec<usize>)> {
    let lb = variant.label_bytes();
    let record = lb + RECORD_PIXELS;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in variant.files(split) {
        let path = dir.join(&name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(Error::format(
                &path,
                format!("size {} is not a multiple of the {record}-byte record", bytes.len()),
            ));
        }
        for chunk in bytes.chunks_exact(record) {
            // the fine label is the last label byte
            let label = usize::from(chunk[lb - 1]);
            if label >= variant.classes() {
                return Err(Error::format(&path, format!("label {label} out of range")));
            }
            labels.push(label);
            pixels.extend_from_slice(&chunk[lb..]);
        }
    }
    Ok((pixels, labels))
}

fn byte_stats(pixels: &[u8]) -> Normalization {
    let plane = 32 * 32;
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    for rec in pixels.chunks_exact(RECORD_PIXELS) {
        for c in 0..3 {
            for &v in &rec[c * plane..(c + 1) * plane] {
                let x = f64::from(v) / 255.0;
                sum[c] += x;
                sq[c] += x * x;
            }
        }
    }
    let n = (pixels.len() / 3) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(1e-12).sqrt())
        .collect();
    Normalization { mean, std }
}

/// Loads one split of the binary CIFAR distribution found under `root`
/// (either the archive directory itself or its parent).
///
/// Both splits are standardized with per-channel statistics of the training
/// split. The training split has crop-and-flip augmentation enabled.
pub fn load_cifar(root: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let dir = resolve_dir(root, variant);
    let (train_pixels, train_labels) = read_split(&dir, variant, Split::Train)?;
    let norm = byte_stats(&train_pixels);
    let (pixels, labels, aug) = match split {
        Split::Train => (train_pixels, train_labels, Some(Augmentation::CROP_FLIP)),
        Split::Test => {
            let (p, l) = read_split(&dir, variant, Split::Test)?;
            (p, l, None)
        }
    };
    let name = format!("{variant:?}-{split:?}").to_lowercase();
    Ok(Dataset::from_bytes(name, (3, 32, 32), variant.classes(), pixels, labels, norm)?.with_augmentation(aug))
}

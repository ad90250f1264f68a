use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Normalization};
use crate::error::{Error, Result};

/// Class-conditional Gaussian-blob images.
///
/// Every class owns a fixed prototype of colored Gaussian blobs. A sample
/// shifts the whole prototype, jitters each blob, scales its amplitude, adds
/// distractor blobs and pixel noise. Colors come from a palette shared by
/// all classes, so a small palette forces the network to use layout rather
/// than color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub seed: u64,
    pub blobs_per_class: usize,
    /// Number of distinct blob colors; 0 draws a fresh color per blob.
    pub palette: usize,
    /// Blob radius range as a fraction of the image size.
    pub sigma: (f64, f64),
    /// Maximum whole-image shift in pixels.
    pub shift: usize,
    /// Standard deviation of each blob's position, in pixels.
    pub blob_jitter: f64,
    /// Relative standard deviation of blob amplitudes.
    pub amplitude_spread: f64,
    pub distractors: usize,
    pub noise: f64,
}

impl SyntheticConfig {
    /// Well separated classes; a tiny network fits them within a few epochs.
    pub fn easy(classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        Self {
            classes,
            train_per_class: per_class,
            test_per_class: per_class / 4,
            size,
            seed,
            blobs_per_class: 2,
            palette: 0,
            sigma: (0.10, 0.20),
            shift: 1,
            blob_jitter: 0.5,
            amplitude_spread: 0.1,
            distractors: 0,
            noise: 0.1,
        }
    }

    /// Overlapping classes that separate small from large networks.
    pub fn hard(classes: usize, train_per_class: usize, test_per_class: usize, size: usize, seed: u64) -> Self {
        Self {
            classes,
            train_per_class,
            test_per_class,
            size,
            seed,
            blobs_per_class: 4,
            palette: 3,
            sigma: (0.06, 0.14),
            shift: 2,
            blob_jitter: 1.0,
            amplitude_spread: 0.3,
            distractors: 2,
            noise: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.size == 0 || self.blobs_per_class == 0 {
            return Err(Error::Data("synthetic data needs classes, size and blobs >= 1".into()));
        }
        if !(self.sigma.0 > 0.0 && self.sigma.0 <= self.sigma.1) {
            return Err(Error::Data(format!("bad sigma range {:?}", self.sigma)));
        }
        if self.noise < 0.0 || self.blob_jitter < 0.0 || self.amplitude_spread < 0.0 {
            return Err(Error::Data("noise and jitter must be >= 0".into()));
        }
        Ok(())
    }

    /// Generates `(train, test)`, both standardized with training-set
    /// per-channel statistics.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let mut proto_rng = stream(self.seed, 0);
        let palette: Vec<[f64; 3]> = (0..self.palette).map(|_| random_color(&mut proto_rng)).collect();
        let s = self.size as f64;
        let prototypes: Vec<Vec<Blob>> = (0..self.classes)
            .map(|_| {
                (0..self.blobs_per_class)
                    .map(|_| Blob::random(&mut proto_rng, s, self.sigma, &palette))
                    .collect()
            })
            .collect();
        let mut train = self.sample(&prototypes, &palette, self.train_per_class, &mut stream(self.seed, 1));
        let mut test = self.sample(&prototypes, &palette, self.test_per_class, &mut stream(self.seed, 2));
        let norm = stats(&train.0, self.size);
        standardize(&mut train.0, &norm, self.size);
        standardize(&mut test.0, &norm, self.size);
        let shape = (3, self.size, self.size);
        Ok((
            Dataset::from_standardized("synthetic-train", shape, self.classes, train.0, train.1)?,
            Dataset::from_standardized("synthetic-test", shape, self.classes, test.0, test.1)?,
        ))
    }

    fn sample(
        &self,
        prototypes: &[Vec<Blob>],
        palette: &[[f64; 3]],
        per_class: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<f32>, Vec<usize>) {
        let n = per_class * self.classes;
        let s = self.size;
        let plane = s * s;
        let mut data = vec![0f32; n * 3 * plane];
        let mut labels = Vec::with_capacity(n);
        let mut img = vec![0f64; 3 * plane];
        for r in 0..n {
            let class = r % self.classes;
            labels.push(class);
            img.iter_mut().for_each(|v| *v = 0.0);
            let sh = self.shift as i64;
            let dx = rng.random_range(-sh..=sh) as f64;
            let dy = rng.random_range(-sh..=sh) as f64;
            for blob in &prototypes[class] {
                let jx: f64 = rng.sample(StandardNormal);
                let jy: f64 = rng.sample(StandardNormal);
                let amp: f64 = rng.sample(StandardNormal);
                let moved = Blob {
                    x: blob.x + dx + self.blob_jitter * jx,
                    y: blob.y + dy + self.blob_jitter * jy,
                    amplitude: blob.amplitude * (1.0 + self.amplitude_spread * amp),
                    ..*blob
                };
                moved.draw(&mut img, s);
            }
            for _ in 0..self.distractors {
                let mut d = Blob::random(rng, s as f64, self.sigma, palette);
                d.amplitude *= 0.8;
                d.draw(&mut img, s);
            }
            let out = &mut data[r * 3 * plane..(r + 1) * 3 * plane];
            for (o, v) in out.iter_mut().zip(&img) {
                let e: f64 = rng.sample(StandardNormal);
                *o = (v + self.noise * e) as f32;
            }
        }
        (data, labels)
    }
}

/// `k` balanced classes with `m` examples each on `s × s` images, drawn
/// from the easy preset. Records cycle through the classes.
pub fn synthetic_dataset(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    let config = SyntheticConfig {
        test_per_class: 0,
        ..SyntheticConfig::easy(classes, per_class, size, seed)
    };
    Ok(config.generate()?.0)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let c: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-3 {
            return c.map(|v| v / n);
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    amplitude: f64,
    color: [f64; 3],
}

impl Blob {
    fn random<R: Rng + ?Sized>(rng: &mut R, s: f64, sigma: (f64, f64), palette: &[[f64; 3]]) -> Self {
        let color = if palette.is_empty() {
            random_color(rng)
        } else {
            palette[rng.random_range(0..palette.len())]
        };
        Self {
            x: rng.random_range(0.15 * s..0.85 * s),
            y: rng.random_range(0.15 * s..0.85 * s),
            sigma: rng.random_range(sigma.0..=sigma.1) * s,
            amplitude: 2.0,
            color,
        }
    }

    fn draw(&self, img: &mut [f64], s: usize) {
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        for yi in 0..s {
            let dy = yi as f64 + 0.5 - self.y;
            for xi in 0..s {
                let dx = xi as f64 + 0.5 - self.x;
                let g = self.amplitude * (-(dx * dx + dy * dy) * inv).exp();
                for c in 0..3 {
                    img[(c * s + yi) * s + xi] += g * self.color[c];
                }
            }
        }
    }
}

fn stats(data: &[f32], size: usize) -> Normalization {
    let plane = size * size;
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    for rec in data.chunks_exact(3 * plane) {
        for c in 0..3 {
            for &v in &rec[c * plane..(c + 1) * plane] {
                sum[c] += f64::from(v);
                sq[c] += f64::from(v) * f64::from(v);
            }
        }
    }
    let n = (data.len() / 3).max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(1e-12).sqrt())
        .collect();
    Normalization { mean, std }
}

fn standardize(data: &mut [f32], norm: &Normalization, size: usize) {
    let plane = size * size;
    for rec in data.chunks_exact_mut(3 * plane) {
        for c in 0..3 {
            for v in &mut rec[c * plane..(c + 1) * plane] {
                *v = ((f64::from(*v) - norm.mean[c]) / norm.std[c]) as f32;
            }
        }
    }
}

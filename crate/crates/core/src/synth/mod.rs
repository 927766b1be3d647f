//! Synthetic corrupted samples: ground truth ⊙ M + noise ⊙ (1 − M) with
//! irregular unknown masks and alpha-blended boundaries.

mod dataset;
mod mask;

pub use dataset::{make_dataset, read_manifest, DatasetSpec, ManifestEntry};
pub use mask::{alpha_blend_mask, edt, generate_irregular_mask};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

/// H x W map in [0,1]; 1 = uncorrupted, 0 = corrupted.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub binary: bool,
}

impl CorruptionMask {
    pub fn all_ones(h: usize, w: usize) -> Self {
        CorruptionMask {
            width: w,
            height: h,
            values: vec![1.0; h * w],
            binary: true,
        }
    }

    /// Fraction of corrupted mass, mean(1 - values).
    pub fn corruption_ratio(&self) -> f64 {
        self.values.iter().map(|v| 1.0 - v).sum::<f64>() / self.values.len() as f64
    }

    /// Round to a strict {0,1} mask.
    pub fn binarized(&self) -> CorruptionMask {
        CorruptionMask {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| v.round()).collect(),
            binary: true,
        }
    }

    pub fn to_image(&self) -> Image {
        Image {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.values.clone(),
        }
    }

    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels != 1 {
            return Err(Error::contract("mask image must have one channel"));
        }
        let binary = img.data.iter().all(|&v| v == 0.0 || v == 1.0);
        Ok(CorruptionMask {
            width: img.width,
            height: img.height,
            values: img.data.clone(),
            binary,
        })
    }
}

/// A (ground truth, mask, noise, corrupted input) quadruple.
#[derive(Debug, Clone)]
pub struct CorruptedSample {
    pub ground_truth: Image,
    pub mask: CorruptionMask,
    pub noise: Image,
    pub input: Image,
}

/// Where the corrupted-region content comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSource {
    Constant(f64),
    UniformRandom { lo: f64, hi: f64 },
    /// Donor images from a high-frequency procedural family.
    ImagePatch,
}

impl NoiseSource {
    pub fn sample(&self, channels: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            NoiseSource::Constant(v) => Image::filled(channels, h, w, v.clamp(0.0, 1.0)),
            NoiseSource::UniformRandom { lo, hi } => {
                let data = (0..channels * h * w)
                    .map(|_| rng.random_range(*lo..=*hi).clamp(0.0, 1.0))
                    .collect();
                Image {
                    channels,
                    height: h,
                    width: w,
                    data,
                }
            }
            NoiseSource::ImagePatch => high_frequency_image(channels, h, w, &mut rng),
        }
    }
}

/// input = gt ⊙ m + n ⊙ (1 − m), mask broadcast over channels.
pub fn compose_corrupted(
    ground_truth: &Image,
    mask: &CorruptionMask,
    noise: &Image,
) -> Result<CorruptedSample> {
    if ground_truth.height != mask.height
        || ground_truth.width != mask.width
        || !ground_truth.same_size(noise)
        || ground_truth.channels != noise.channels
    {
        return Err(Error::contract(format!(
            "compose_corrupted shape mismatch: gt {}x{}x{}, mask {}x{}, noise {}x{}x{}",
            ground_truth.channels,
            ground_truth.height,
            ground_truth.width,
            mask.height,
            mask.width,
            noise.channels,
            noise.height,
            noise.width
        )));
    }
    let hw = mask.height * mask.width;
    let mut input = ground_truth.clone();
    for c in 0..ground_truth.channels {
        for p in 0..hw {
            let m = mask.values[p];
            input.data[c * hw + p] =
                ground_truth.data[c * hw + p] * m + noise.data[c * hw + p] * (1.0 - m);
        }
    }
    Ok(CorruptedSample {
        ground_truth: ground_truth.clone(),
        mask: mask.clone(),
        noise: noise.clone(),
        input,
    })
}

/// Smooth procedural ground truth: mixtures of low-frequency sinusoids and
/// a gentle linear gradient per channel.
pub fn smooth_image(channels: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut data = vec![0.0; channels * h * w];
    for c in 0..channels {
        let gx = rng.random_range(-0.15..0.15);
        let gy = rng.random_range(-0.15..0.15);
        let base = rng.random_range(0.35..0.65);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.08..0.22),                         // amplitude
                    rng.random_range(-1.5..1.5),                          // fx cycles
                    rng.random_range(-1.5..1.5),                          // fy cycles
                    rng.random_range(0.0..std::f64::consts::TAU),         // phase
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 / w as f64;
                let v = y as f64 / h as f64;
                let mut val = base + gx * (u - 0.5) + gy * (v - 0.5);
                for &(a, fx, fy, ph) in &waves {
                    val += a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin();
                }
                data[(c * h + y) * w + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    Image {
        channels,
        height: h,
        width: w,
        data,
    }
}

/// High-frequency procedural donor: checker cells plus per-pixel jitter.
pub fn high_frequency_image(channels: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let cell = rng.random_range(1..=3usize);
    let jitter = rng.random_range(0.1..0.3);
    let mut data = vec![0.0; channels * h * w];
    for c in 0..channels {
        let a = rng.random_range(0.05..0.4);
        let b = rng.random_range(0.6..0.95);
        for y in 0..h {
            for x in 0..w {
                let on = (y / cell + x / cell) % 2 == 0;
                let base = if on { a } else { b };
                let v: f64 = base + rng.random_range(-jitter..jitter);
                data[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Image {
        channels,
        height: h,
        width: w,
        data,
    }
}

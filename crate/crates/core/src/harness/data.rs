//! Synthetic size-stratified shape classification task.
//!
//! Each image holds one shape on a structured-noise background. The class is
//! the shape type; the size band is the shape's pixel area as a fraction of
//! the image area.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Shapes in class order.
pub const SHAPES: [&str; 5] = ["square", "hbar", "vbar", "cross", "frame"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeBand {
    Small,
    Medium,
    Large,
}

impl SizeBand {
    pub const ALL: [SizeBand; 3] = [SizeBand::Small, SizeBand::Medium, SizeBand::Large];
}

impl fmt::Display for SizeBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeBand::Small => "small",
            SizeBand::Medium => "medium",
            SizeBand::Large => "large",
        })
    }
}

/// Upper area bounds of each band as fractions of the image area. Areas
/// above `medium` and up to `large` are large.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeBands {
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

impl Default for SizeBands {
    fn default() -> Self {
        SizeBands {
            small: 0.02,
            medium: 0.10,
            large: 0.30,
        }
    }
}

impl SizeBands {
    pub fn classify(&self, area_fraction: f64) -> SizeBand {
        if area_fraction <= self.small {
            SizeBand::Small
        } else if area_fraction <= self.medium {
            SizeBand::Medium
        } else {
            SizeBand::Large
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub num_samples: usize,
    pub bands: SizeBands,
    /// Std of the per-pixel background noise.
    pub noise: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            image_size: 32,
            num_classes: 3,
            num_samples: 2000,
            bands: SizeBands::default(),
            noise: 0.05,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("synthetic task", d));
        if self.image_size < 16 {
            return bad(format!("image_size must be at least 16, got {}", self.image_size));
        }
        if self.num_classes == 0 || self.num_classes > SHAPES.len() {
            return bad(format!("num_classes must be in 1..={}, got {}", SHAPES.len(), self.num_classes));
        }
        if self.num_samples == 0 {
            return bad("num_samples must be positive".into());
        }
        let b = self.bands;
        if !(b.small > 0.0 && b.small < b.medium && b.medium < b.large) {
            return bad(format!("band thresholds must increase, got {b:?}"));
        }
        if b.large > 1.0 {
            return bad(format!("large band bound {} exceeds the image area", b.large));
        }
        let min_area = 2.0 / (self.image_size * self.image_size) as f64;
        if b.small < min_area {
            return bad(format!("small band bound {} is below two pixels", b.small));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, S, S]`, row-major.
    pub image: Vec<f64>,
    pub label: usize,
    pub band: SizeBand,
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

/// Filled pixel mask of a shape with roughly `area` pixels; `None` if it
/// would not fit in `size x size`.
fn shape_mask(class: usize, area: f64, size: usize) -> Option<(usize, usize, Vec<bool>)> {
    let r = |v: f64| (v.round() as usize).max(1);
    let (h, w, mask): (usize, usize, Vec<bool>) = match SHAPES[class] {
        "square" => {
            let s = r(area.sqrt()).max(2);
            (s, s, vec![true; s * s])
        }
        "hbar" | "vbar" => {
            let thin = r((area / 3.0).sqrt());
            let long = r(area / thin as f64).max(2 * thin + 1);
            let mask = vec![true; thin * long];
            if SHAPES[class] == "hbar" {
                (thin, long, mask)
            } else {
                (long, thin, mask)
            }
        }
        "cross" => {
            let s = r((area * 9.0 / 5.0).sqrt()).max(3);
            let t = r(s as f64 / 3.0);
            let lo = (s - t) / 2;
            let mask = (0..s * s)
                .map(|i| {
                    let (y, x) = (i / s, i % s);
                    (lo..lo + t).contains(&y) || (lo..lo + t).contains(&x)
                })
                .collect();
            (s, s, mask)
        }
        "frame" => {
            // ring of thickness t around a hole: area = s^2 - (s - 2t)^2
            let s = r((area * 16.0 / 7.0).sqrt()).max(3);
            let t = r(s as f64 / 4.0);
            let mask = (0..s * s)
                .map(|i| {
                    let (y, x) = (i / s, i % s);
                    y < t || x < t || y + t >= s || x + t >= s
                })
                .collect();
            (s, s, mask)
        }
        _ => unreachable!("class index checked"),
    };
    (h <= size && w <= size).then_some((h, w, mask))
}

fn contrast_color(rng: &mut ChaCha8Rng) -> [f64; CHANNELS] {
    std::array::from_fn(|_| {
        let v = rng.gen_range(0.0..0.25);
        if rng.gen_bool(0.5) {
            v
        } else {
            1.0 - v
        }
    })
}

fn background(rng: &mut ChaCha8Rng, size: usize, noise: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut img = Vec::with_capacity(CHANNELS * size * size);
    for _ in 0..CHANNELS {
        let fy = rng.gen_range(0.5..2.0);
        let fx = rng.gen_range(0.5..2.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(0.05..0.15);
        for y in 0..size {
            for x in 0..size {
                let u = std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) / size as f64;
                let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
                img.push(0.5 + amp * (u + phase).sin() + n);
            }
        }
    }
    img
}

/// Generate a task; a pure function of `(config, seed)`.
///
/// Samples cycle through bands and classes so every band is populated and
/// classes are balanced within each band; the order is then shuffled.
pub fn gen_synthetic(config: &TaskConfig, seed: u64) -> Result<SyntheticTask> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let pixels = (size * size) as f64;
    let b = config.bands;
    let min_frac = (4.0 / pixels).min(b.small / 2.0);
    let ranges = [(min_frac, b.small), (b.small, b.medium), (b.medium, b.large)];

    let mut samples = Vec::with_capacity(config.num_samples);
    for i in 0..config.num_samples {
        let band_idx = i % 3;
        let label = (i / 3) % config.num_classes;
        let (lo, hi) = ranges[band_idx];
        let (h, w, mask) = (0..1000)
            .find_map(|_| {
                let frac = rng.gen_range(lo..=hi);
                let (h, w, mask) = shape_mask(label, frac * pixels, size)?;
                let area = mask.iter().filter(|&&m| m).count();
                (b.classify(area as f64 / pixels) == SizeBand::ALL[band_idx]).then_some((h, w, mask))
            })
            .ok_or_else(|| {
                Error::invalid(
                    "synthetic task",
                    format!("cannot draw a {} inside band {:?}", SHAPES[label], ranges[band_idx]),
                )
            })?;
        let area = mask.iter().filter(|&&m| m).count();

        let mut image = background(&mut rng, size, config.noise);
        let color = contrast_color(&mut rng);
        let oy = rng.gen_range(0..=size - h);
        let ox = rng.gen_range(0..=size - w);
        for y in 0..h {
            for x in 0..w {
                if mask[y * w + x] {
                    for (c, &v) in color.iter().enumerate() {
                        image[(c * size + oy + y) * size + ox + x] = v;
                    }
                }
            }
        }
        for v in &mut image {
            *v -= 0.5;
        }
        samples.push(Sample {
            image,
            label,
            band: SizeBand::ALL[band_idx],
            area,
        });
    }
    samples.shuffle(&mut rng);
    Ok(SyntheticTask {
        config: config.clone(),
        seed,
        samples,
    })
}

impl SyntheticTask {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Images `[B, 3, S, S]` and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f64>, Vec<usize>) {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(indices.len() * CHANNELS * s * s);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.samples[i].image);
            labels.push(self.samples[i].label);
        }
        let t = Tensor::new(vec![indices.len(), CHANNELS, s, s], data).expect("batch shape");
        (t, labels)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn bands(&self) -> Vec<SizeBand> {
        self.samples.iter().map(|s| s.band).collect()
    }

    pub fn band_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.samples {
            c[s.band as usize] += 1;
        }
        c
    }
}

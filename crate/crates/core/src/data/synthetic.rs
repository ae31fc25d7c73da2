use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{snv_normalize, Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng::{stream, streams, Rng};

/// Samples per class for five tasks of five classes (8675 in total).
pub const CLASS_COUNTS: [[usize; 5]; 5] = [
    [300, 150, 600, 150, 150],
    [150, 150, 300, 450, 450],
    [900, 150, 150, 600, 150],
    [275, 150, 900, 300, 300],
    [300, 900, 450, 150, 150],
];

pub fn default_class_counts() -> Vec<usize> {
    CLASS_COUNTS.iter().flatten().copied().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Samples per class before scaling; class `c` gets `counts[c]`.
    pub counts: Vec<usize>,
    /// Multiplier on `counts`; results are rounded and floored at 3 so every class can be split.
    pub scale: f64,
    pub bands: usize,
    /// Within-class variability. Zero makes all spectra of a class identical.
    pub noise: f64,
    pub seed: u64,
    pub snv: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            counts: default_class_counts(),
            scale: 1.0,
            bands: 128,
            noise: 0.15,
            seed: 0,
            snv: true,
        }
    }
}

impl SyntheticConfig {
    /// `classes` classes with `per_class` samples each.
    pub fn small(classes: usize, per_class: usize) -> Self {
        Self {
            counts: vec![per_class; classes],
            ..Self::default()
        }
    }

    pub fn scaled_counts(&self) -> Vec<usize> {
        self.counts
            .iter()
            .map(|&c| {
                if self.scale == 1.0 {
                    c
                } else {
                    ((c as f64 * self.scale).round() as usize).max(3)
                }
            })
            .collect()
    }
}

struct Peak {
    center: f64,
    width: f64,
    amplitude: f64,
}

struct ClassModel {
    peaks: Vec<Peak>,
    offset: f64,
    slope: f64,
}

impl ClassModel {
    fn draw(bands: usize, rng: &mut Rng) -> Self {
        let b = bands as f64;
        let k = rng.random_range(2..=4);
        let peaks = (0..k)
            .map(|_| Peak {
                center: rng.random_range(0.08 * b..0.92 * b),
                width: rng.random_range(0.03 * b..0.12 * b),
                amplitude: rng.random_range(0.3..1.0),
            })
            .collect();
        Self {
            peaks,
            offset: rng.random_range(0.2..0.6),
            slope: rng.random_range(-0.3..0.3),
        }
    }

    fn sample(&self, bands: usize, noise: f64, rng: &mut Rng) -> Vec<f64> {
        let mut z = || -> f64 { StandardNormal.sample(rng) };
        let b = bands as f64;
        let jittered: Vec<(f64, f64, f64)> = self
            .peaks
            .iter()
            .map(|p| {
                (
                    p.center + noise * 0.02 * b * z(),
                    p.width,
                    p.amplitude * (1.0 + noise * z()),
                )
            })
            .collect();
        let slope = self.slope + noise * 0.1 * z();
        (0..bands)
            .map(|i| {
                let t = i as f64;
                let peaks: f64 = jittered
                    .iter()
                    .map(|&(c, w, a)| a * (-0.5 * ((t - c) / w).powi(2)).exp())
                    .sum();
                self.offset + slope * t / b + peaks + noise * 0.05 * z()
            })
            .collect()
    }
}

/// Per class: a fixed sum of 2 to 4 Gaussian peaks over a linear baseline;
/// per sample: jittered peak positions and heights, baseline tilt and white noise.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.bands < 8 {
        return Err(Error::InvalidArgument(format!(
            "need at least 8 bands, got {}",
            cfg.bands
        )));
    }
    if cfg.counts.is_empty() || cfg.counts.contains(&0) {
        return Err(Error::InvalidArgument("class counts must be positive".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) || !(cfg.scale > 0.0 && cfg.scale.is_finite()) {
        return Err(Error::InvalidArgument("noise must be >= 0 and scale > 0".into()));
    }
    let mut rng = stream(cfg.seed, streams::SYNTHETIC);
    let models: Vec<ClassModel> = cfg
        .counts
        .iter()
        .map(|_| ClassModel::draw(cfg.bands, &mut rng))
        .collect();
    let mut samples = Vec::new();
    for (class_id, (model, n)) in models.iter().zip(cfg.scaled_counts()).enumerate() {
        for _ in 0..n {
            let raw = model.sample(cfg.bands, cfg.noise, &mut rng);
            let spectrum = if cfg.snv { snv_normalize(&raw)? } else { raw };
            samples.push(Sample { spectrum, class_id });
        }
    }
    Dataset::new(cfg.bands, cfg.counts.len(), samples)
}

use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::cube::HsiCube;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Amplitude of each class's deviation from the shared baseline.
const CLASS_CONTRAST: f64 = 0.04;

/// Parameters of a synthetic labelled scene: Voronoi regions, each
/// assigned a class whose mean spectrum plus Gaussian noise fills it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub region_seeds: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            bands: 32,
            classes: 4,
            noise_sigma: 0.05,
            region_seeds: 12,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("synthetic cube needs positive rows and cols".into()));
        }
        if self.bands < 8 {
            return Err(Error::Config(format!("synthetic cube needs >= 8 bands, got {}", self.bands)));
        }
        if self.classes == 0 || self.classes > u16::MAX as usize {
            return Err(Error::Config(format!("invalid class count {}", self.classes)));
        }
        if self.classes > self.region_seeds {
            return Err(Error::Config(format!(
                "{} classes need at least as many regions, got {}",
                self.classes, self.region_seeds
            )));
        }
        if self.region_seeds > self.rows * self.cols {
            return Err(Error::Config("more regions than pixels".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Mean spectrum of each class (index `k - 1` for class `k`): a shared
/// smooth baseline plus a broad sinusoidal deviation with `k / 2` cycles
/// across the band range, so every class differs over many bands.
pub fn class_mean_spectra(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(derive_seed(spec.seed, 0xC1A55));
    let b = spec.bands;
    let phase: f64 = rng.random_range(0.0..TAU);
    let x = |i: usize| i as f64 / (b - 1) as f64;
    (1..=spec.classes)
        .map(|k| {
            (0..b)
                .map(|i| {
                    let base = 0.45 + 0.2 * (TAU * 0.8 * x(i) + phase).sin();
                    base + CLASS_CONTRAST * (TAU * 0.5 * k as f64 * x(i) + (k - 1) as f64).sin()
                })
                .collect()
        })
        .collect()
}

/// Region label of every pixel: nearest of `region_seeds` distinct seed
/// pixels; the first `K` regions carry classes `1..=K`, the rest random.
fn region_classes(spec: &SyntheticSpec) -> Vec<u16> {
    let mut rng = rng_from_seed(derive_seed(spec.seed, 0x4E610));
    let seeds = rand::seq::index::sample(&mut rng, spec.rows * spec.cols, spec.region_seeds).into_vec();
    let classes: Vec<u16> = (0..spec.region_seeds)
        .map(|i| {
            if i < spec.classes {
                i as u16 + 1
            } else {
                rng.random_range(1..=spec.classes as u16)
            }
        })
        .collect();
    let points: Vec<(i64, i64)> = seeds
        .iter()
        .map(|&s| ((s / spec.cols) as i64, (s % spec.cols) as i64))
        .collect();
    let mut gt = Vec::with_capacity(spec.rows * spec.cols);
    for r in 0..spec.rows as i64 {
        for c in 0..spec.cols as i64 {
            let nearest = points
                .iter()
                .enumerate()
                .min_by_key(|(_, &(pr, pc))| (pr - r).pow(2) + (pc - c).pow(2))
                .map(|(i, _)| i)
                .expect("at least one region");
            gt.push(classes[nearest]);
        }
    }
    gt
}

/// Generates a fully labelled synthetic cube, deterministic in `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<HsiCube> {
    spec.validate()?;
    let gt = region_classes(spec);
    let means = class_mean_spectra(spec);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = rng_from_seed(derive_seed(spec.seed, 0x9015E));
    let mut values = Vec::with_capacity(gt.len() * spec.bands);
    for &label in &gt {
        for &m in &means[label as usize - 1] {
            let v = if spec.noise_sigma > 0.0 { m + noise.sample(&mut rng) } else { m };
            values.push(v as f32);
        }
    }
    HsiCube::new(spec.rows, spec.cols, spec.bands, values)?.with_gt(gt)
}

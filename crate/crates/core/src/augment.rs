//! Probabilistic patch augmentation.
//!
//! Nine transforms, each applied independently with its own probability in
//! `phi`, always in the order spectral (swap, drop, suppress, average),
//! spatial (flip, crop, rotate), spectral-spatial (pixel removal, noise).
//! Every transform maps a `p x p x B` patch to a `p x p x B` patch and
//! treats all bands of a pixel identically where it moves pixels.

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::data::Patch;
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

pub const TRANSFORM_COUNT: usize = 9;

/// The transforms in application order; `phi[i]` belongs to `Transform::ALL[i]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    ChannelSwap,
    ChannelDrop,
    ChannelSuppress,
    ChannelAverage,
    Flip,
    Crop,
    Rotate,
    PixelRemoval,
    Noise,
}

impl Transform {
    pub const ALL: [Transform; TRANSFORM_COUNT] = [
        Transform::ChannelSwap,
        Transform::ChannelDrop,
        Transform::ChannelSuppress,
        Transform::ChannelAverage,
        Transform::Flip,
        Transform::Crop,
        Transform::Rotate,
        Transform::PixelRemoval,
        Transform::Noise,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralKind {
    Swap,
    Drop,
    Suppress,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialKind {
    FlipH,
    FlipV,
    Mirror,
    Crop,
    Rotate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralSpatialKind {
    PixelRemoval,
    Noise,
}

/// Strength parameters of the individual transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// Fraction of channels zeroed by channel dropping.
    pub drop_fraction: f64,
    /// Fraction of channels scaled by intensity suppression.
    pub suppress_fraction: f64,
    pub suppress_min: f64,
    pub suppress_max: f64,
    /// Number of consecutive channels replaced by their mean.
    pub average_window: usize,
    /// Smallest crop side; `None` means `ceil(0.7 p)`.
    pub crop_min: Option<usize>,
    pub noise_sigma: f64,
    /// Fraction of spatial positions whose spectrum is zeroed.
    pub removal_fraction: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            drop_fraction: 0.1,
            suppress_fraction: 0.1,
            suppress_min: 0.2,
            suppress_max: 0.8,
            average_window: 3,
            crop_min: None,
            noise_sigma: 0.05,
            removal_fraction: 0.1,
        }
    }
}

impl AugmentParams {
    fn crop_min_for(&self, p: usize) -> usize {
        self.crop_min.unwrap_or_else(|| (0.7 * p as f64).ceil() as usize)
    }
}

/// `phi` holds one application probability per entry of [`Transform::ALL`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub phi: [f64; TRANSFORM_COUNT],
    pub params: AugmentParams,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            phi: [0.5; TRANSFORM_COUNT],
            params: AugmentParams::default(),
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

impl AugmentPolicy {
    /// A policy that never applies any transform.
    pub fn identity() -> Self {
        Self {
            phi: [0.0; TRANSFORM_COUNT],
            ..Self::default()
        }
    }

    /// Checks the patch-independent invariants.
    pub fn validate(&self) -> Result<()> {
        for (i, &p) in self.phi.iter().enumerate() {
            check_unit(&format!("phi[{i}] ({:?})", Transform::ALL[i]), p)?;
        }
        let q = &self.params;
        check_unit("drop_fraction", q.drop_fraction)?;
        check_unit("suppress_fraction", q.suppress_fraction)?;
        check_unit("removal_fraction", q.removal_fraction)?;
        if !(q.suppress_min > 0.0 && q.suppress_min <= q.suppress_max && q.suppress_max <= 1.0) {
            return Err(Error::Config(format!(
                "suppression range must satisfy 0 < min <= max <= 1, got [{}, {}]",
                q.suppress_min, q.suppress_max
            )));
        }
        if q.average_window < 2 {
            return Err(Error::Config("average_window must be >= 2".into()));
        }
        if q.crop_min.is_some_and(|m| m < 2) {
            return Err(Error::Config("crop_min must be >= 2".into()));
        }
        if !(q.noise_sigma >= 0.0 && q.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", q.noise_sigma)));
        }
        Ok(())
    }

    /// Checks the invariants that depend on the patch geometry.
    pub fn validate_for(&self, p: usize, bands: usize) -> Result<()> {
        self.validate()?;
        if self.phi[3] > 0.0 && self.params.average_window > bands {
            return Err(Error::Config(format!(
                "average_window {} exceeds {bands} bands",
                self.params.average_window
            )));
        }
        let q = self.params.crop_min_for(p);
        if self.phi[5] > 0.0 && q > p {
            return Err(Error::Config(format!("crop_min {q} exceeds patch size {p}")));
        }
        Ok(())
    }
}

/// Applies each transform independently with its probability, in fixed order.
pub fn augment(patch: &Patch, policy: &AugmentPolicy, seed: u64) -> Result<Patch> {
    policy.validate_for(patch.size, patch.bands)?;
    let mut rng = rng_from_seed(seed);
    let params = &policy.params;
    let mut out = patch.clone();
    for (t, &prob) in Transform::ALL.iter().zip(&policy.phi) {
        // one draw per transform keeps the stream aligned across policies
        let fire = rng.random::<f64>() < prob;
        if !fire {
            continue;
        }
        out = match t {
            Transform::ChannelSwap => spectral_transform(&out, SpectralKind::Swap, params, &mut rng)?,
            Transform::ChannelDrop => spectral_transform(&out, SpectralKind::Drop, params, &mut rng)?,
            Transform::ChannelSuppress => {
                spectral_transform(&out, SpectralKind::Suppress, params, &mut rng)?
            }
            Transform::ChannelAverage => {
                spectral_transform(&out, SpectralKind::Average, params, &mut rng)?
            }
            Transform::Flip => {
                let kind = [SpatialKind::FlipH, SpatialKind::FlipV, SpatialKind::Mirror]
                    [rng.random_range(0..3)];
                spatial_transform(&out, kind, params, &mut rng)?
            }
            Transform::Crop => spatial_transform(&out, SpatialKind::Crop, params, &mut rng)?,
            Transform::Rotate => spatial_transform(&out, SpatialKind::Rotate, params, &mut rng)?,
            Transform::PixelRemoval => {
                spectral_spatial_transform(&out, SpectralSpatialKind::PixelRemoval, params, &mut rng)?
            }
            Transform::Noise => {
                spectral_spatial_transform(&out, SpectralSpatialKind::Noise, params, &mut rng)?
            }
        };
    }
    Ok(out)
}

fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

pub fn spectral_transform(
    patch: &Patch,
    kind: SpectralKind,
    params: &AugmentParams,
    rng: &mut Rng,
) -> Result<Patch> {
    let b = patch.bands;
    match kind {
        SpectralKind::Swap => {
            if b < 2 {
                return Err(Error::Config("channel swap needs at least 2 bands".into()));
            }
            let pick = sample(rng, b, 2);
            Ok(swap_channels(patch, pick.index(0), pick.index(1)))
        }
        SpectralKind::Drop => {
            check_unit("drop_fraction", params.drop_fraction)?;
            let chosen = sample(rng, b, fraction_count(params.drop_fraction, b)).into_vec();
            Ok(scale_channels(patch, &chosen.iter().map(|&c| (c, 0.0)).collect::<Vec<_>>()))
        }
        SpectralKind::Suppress => {
            check_unit("suppress_fraction", params.suppress_fraction)?;
            let (lo, hi) = (params.suppress_min, params.suppress_max);
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("invalid suppression range [{lo}, {hi}]")));
            }
            let chosen = sample(rng, b, fraction_count(params.suppress_fraction, b)).into_vec();
            let factors: Vec<(usize, f32)> = chosen
                .into_iter()
                .map(|c| (c, rng.random_range(lo..=hi) as f32))
                .collect();
            Ok(scale_channels(patch, &factors))
        }
        SpectralKind::Average => {
            let k = params.average_window;
            if k < 2 || k > b {
                return Err(Error::Config(format!("average window {k} invalid for {b} bands")));
            }
            let start = rng.random_range(0..=b - k);
            Ok(average_channels(patch, start, k))
        }
    }
}

pub fn spatial_transform(
    patch: &Patch,
    kind: SpatialKind,
    params: &AugmentParams,
    rng: &mut Rng,
) -> Result<Patch> {
    Ok(match kind {
        SpatialKind::FlipH => flip_horizontal(patch),
        SpatialKind::FlipV => flip_vertical(patch),
        SpatialKind::Mirror => transpose(patch),
        SpatialKind::Rotate => rotate90(patch, rng.random_range(1..=3)),
        SpatialKind::Crop => {
            let p = patch.size;
            let q_min = params.crop_min_for(p);
            if q_min < 2 || q_min > p {
                return Err(Error::Config(format!("crop_min {q_min} invalid for patch size {p}")));
            }
            let q = rng.random_range(q_min..=p);
            let top = rng.random_range(0..=p - q);
            let left = rng.random_range(0..=p - q);
            crop_resize(patch, top, left, q)
        }
    })
}

pub fn spectral_spatial_transform(
    patch: &Patch,
    kind: SpectralSpatialKind,
    params: &AugmentParams,
    rng: &mut Rng,
) -> Result<Patch> {
    match kind {
        SpectralSpatialKind::PixelRemoval => {
            check_unit("removal_fraction", params.removal_fraction)?;
            let n = patch.size * patch.size;
            let chosen = sample(rng, n, fraction_count(params.removal_fraction, n)).into_vec();
            Ok(remove_pixels(patch, &chosen))
        }
        SpectralSpatialKind::Noise => {
            let sigma = params.noise_sigma;
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
            }
            if sigma == 0.0 {
                return Ok(patch.clone());
            }
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            let values = patch
                .values
                .iter()
                .map(|&v| (v as f64 + normal.sample(rng)) as f32)
                .collect();
            Ok(patch.with_values(values))
        }
    }
}

pub fn swap_channels(patch: &Patch, a: usize, b: usize) -> Patch {
    let mut out = patch.clone();
    for px in out.values.chunks_mut(patch.bands) {
        px.swap(a, b);
    }
    out
}

/// Multiplies channel `c` by `f` for every `(c, f)`.
pub fn scale_channels(patch: &Patch, factors: &[(usize, f32)]) -> Patch {
    let mut out = patch.clone();
    for px in out.values.chunks_mut(patch.bands) {
        for &(c, f) in factors {
            px[c] *= f;
        }
    }
    out
}

/// Replaces channels `start..start + k` by their per-pixel mean.
pub fn average_channels(patch: &Patch, start: usize, k: usize) -> Patch {
    let mut out = patch.clone();
    for px in out.values.chunks_mut(patch.bands) {
        let window = &mut px[start..start + k];
        let mean = (window.iter().map(|&v| v as f64).sum::<f64>() / k as f64) as f32;
        window.fill(mean);
    }
    out
}

/// Builds a patch whose pixel `(r, c)` is the input pixel `src(r, c)`.
fn remap(patch: &Patch, src: impl Fn(usize, usize) -> (usize, usize)) -> Patch {
    let p = patch.size;
    let mut values = Vec::with_capacity(patch.values.len());
    for r in 0..p {
        for c in 0..p {
            let (sr, sc) = src(r, c);
            values.extend_from_slice(patch.spectrum(sr, sc));
        }
    }
    patch.with_values(values)
}

/// Reverses the column axis.
pub fn flip_horizontal(patch: &Patch) -> Patch {
    let p = patch.size;
    remap(patch, |r, c| (r, p - 1 - c))
}

/// Reverses the row axis.
pub fn flip_vertical(patch: &Patch) -> Patch {
    let p = patch.size;
    remap(patch, |r, c| (p - 1 - r, c))
}

/// Swaps the two spatial axes.
pub fn transpose(patch: &Patch) -> Patch {
    remap(patch, |r, c| (c, r))
}

/// Rotates counter-clockwise by `quarter_turns * 90` degrees.
pub fn rotate90(patch: &Patch, quarter_turns: usize) -> Patch {
    let p = patch.size;
    match quarter_turns % 4 {
        0 => patch.clone(),
        1 => remap(patch, |r, c| (c, p - 1 - r)),
        2 => remap(patch, |r, c| (p - 1 - r, p - 1 - c)),
        _ => remap(patch, |r, c| (p - 1 - c, r)),
    }
}

/// Takes the `q x q` window at `(top, left)` and resizes it back to `p x p`
/// by nearest-neighbour sampling.
pub fn crop_resize(patch: &Patch, top: usize, left: usize, q: usize) -> Patch {
    let p = patch.size;
    remap(patch, |r, c| (top + r * q / p, left + c * q / p))
}

/// Zeroes the full spectrum at the given flat spatial positions.
pub fn remove_pixels(patch: &Patch, positions: &[usize]) -> Patch {
    let mut out = patch.clone();
    for &i in positions {
        out.spectrum_mut(i / patch.size, i % patch.size).fill(0.0);
    }
    out
}

use rand::Rng as _;

use super::cube::HsiCube;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// A `p x p x B` window (`[row][col][band]`) around `center`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub bands: usize,
    pub values: Vec<f32>,
    pub label: Option<u16>,
    pub center: (usize, usize),
}

impl Patch {
    #[inline]
    pub fn index(&self, row: usize, col: usize, band: usize) -> usize {
        (row * self.size + col) * self.bands + band
    }

    pub fn at(&self, row: usize, col: usize, band: usize) -> f32 {
        self.values[self.index(row, col, band)]
    }

    pub fn spectrum(&self, row: usize, col: usize) -> &[f32] {
        let i = self.index(row, col, 0);
        &self.values[i..i + self.bands]
    }

    pub fn spectrum_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let i = self.index(row, col, 0);
        &mut self.values[i..i + self.bands]
    }

    /// Same geometry and metadata, different values.
    pub fn with_values(&self, values: Vec<f32>) -> Patch {
        debug_assert_eq!(values.len(), self.values.len());
        Patch {
            values,
            ..self.clone()
        }
    }
}

/// Anchor and positive views whose windows overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub anchor: Patch,
    pub positive: Patch,
    pub overlap_fraction: f64,
}

/// Centers of one anchor/positive pair, before extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCenters {
    pub anchor: (usize, usize),
    pub positive: (usize, usize),
}

impl PairCenters {
    /// Area of the window intersection divided by `p^2`.
    pub fn overlap_fraction(&self, p: usize) -> f64 {
        let dr = self.anchor.0.abs_diff(self.positive.0);
        let dc = self.anchor.1.abs_diff(self.positive.1);
        let inter = p.saturating_sub(dr) * p.saturating_sub(dc);
        inter as f64 / (p * p) as f64
    }
}

/// Reflect ("mirror without edge repeat") an index into `0..n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

fn check_patch_size(p: usize) -> Result<()> {
    if p == 0 || p.is_multiple_of(2) {
        return Err(Error::Config(format!("patch size must be odd, got {p}")));
    }
    Ok(())
}

/// Cuts a `p x p` patch from the reflect-padded cube. The label is the
/// ground truth at the center, when present and nonzero.
pub fn extract_patch(cube: &HsiCube, center: (usize, usize), p: usize) -> Result<Patch> {
    check_patch_size(p)?;
    let (r0, c0) = center;
    if r0 >= cube.rows || c0 >= cube.cols {
        return Err(Error::Range(format!(
            "center {center:?} outside {}x{} cube",
            cube.rows, cube.cols
        )));
    }
    let half = (p / 2) as isize;
    let mut values = Vec::with_capacity(p * p * cube.bands);
    for dr in -half..=half {
        let r = reflect_index(r0 as isize + dr, cube.rows);
        for dc in -half..=half {
            let c = reflect_index(c0 as isize + dc, cube.cols);
            values.extend_from_slice(cube.spectrum(r, c));
        }
    }
    Ok(Patch {
        size: p,
        bands: cube.bands,
        values,
        label: cube.label(r0, c0),
        center,
    })
}

/// Pixel shift between anchor and positive centers: `round(p / 3)`.
pub fn view_shift(p: usize) -> usize {
    (p as f64 / 3.0).round() as usize
}

/// Draws `count` anchor/positive center pairs. Each positive is its anchor
/// shifted by [`view_shift`] pixels along one uniformly chosen axis and
/// direction; anchors are uniform over the centers for which the positive
/// stays inside the cube.
pub fn sample_view_centers(
    rows: usize,
    cols: usize,
    p: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PairCenters>> {
    check_patch_size(p)?;
    if count == 0 {
        return Err(Error::Config("pair count must be positive".into()));
    }
    if rows <= p || cols <= p {
        return Err(Error::Range(format!(
            "cube {rows}x{cols} must be larger than patch size {p}"
        )));
    }
    let shift = view_shift(p);
    let mut rng = rng_from_seed(seed);
    let pairs = (0..count)
        .map(|_| {
            let along_rows = rng.random_bool(0.5);
            let forward = rng.random_bool(0.5);
            let (lim_r, lim_c) = if along_rows { (rows - shift, cols) } else { (rows, cols - shift) };
            let (mut r, mut c) = (rng.random_range(0..lim_r), rng.random_range(0..lim_c));
            let anchor;
            let positive;
            if forward {
                anchor = (r, c);
                if along_rows { r += shift } else { c += shift }
                positive = (r, c);
            } else {
                if along_rows { r += shift } else { c += shift }
                anchor = (r, c);
                positive = if along_rows { (r - shift, c) } else { (r, c - shift) };
            }
            PairCenters { anchor, positive }
        })
        .collect();
    Ok(pairs)
}

/// Samples `count` spatially overlapping view pairs and extracts their patches.
pub fn sample_view_pairs(cube: &HsiCube, p: usize, count: usize, seed: u64) -> Result<Vec<ViewPair>> {
    sample_view_centers(cube.rows, cube.cols, p, count, seed)?
        .into_iter()
        .map(|pc| {
            Ok(ViewPair {
                anchor: extract_patch(cube, pc.anchor, p)?,
                positive: extract_patch(cube, pc.positive, p)?,
                overlap_fraction: pc.overlap_fraction(p),
            })
        })
        .collect()
}

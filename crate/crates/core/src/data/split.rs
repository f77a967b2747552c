use rand::seq::SliceRandom;

use super::cube::HsiCube;
use super::patch::{extract_patch, Patch};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// A labelled pixel: `(row, col)` and its class in `1..=K`.
pub type LabelledCenter = ((usize, usize), u16);

/// Support and test pixel centers, before patch extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitCenters {
    /// Grouped by class in ascending order.
    pub support: Vec<LabelledCenter>,
    /// Remaining labelled pixels in row-major order.
    pub test: Vec<LabelledCenter>,
    pub class_count: usize,
    pub per_class: usize,
}

/// Labelled reference patches and their one-hot label matrix `[N_s, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    pub patches: Vec<Patch>,
    pub labels: Tensor,
    pub class_count: usize,
    pub per_class: usize,
}

/// One-hot rows over classes `1..=k` (column `c - 1` for class `c`).
pub fn one_hot(classes: &[u16], k: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[classes.len().max(1), k.max(1)]);
    if classes.is_empty() || k == 0 {
        return Err(Error::Data("one-hot of an empty label set".into()));
    }
    for (i, &c) in classes.iter().enumerate() {
        if c == 0 || c as usize > k {
            return Err(Error::Data(format!("label {c} outside 1..={k}")));
        }
        t.data_mut()[i * k + c as usize - 1] = 1.0;
    }
    Ok(t)
}

impl SupportSet {
    /// Builds a class-balanced support set; every patch must be labelled and
    /// every class in `1..=class_count` must appear equally often.
    pub fn new(patches: Vec<Patch>, class_count: usize) -> Result<Self> {
        let classes = patches
            .iter()
            .map(|p| {
                p.label
                    .ok_or_else(|| Error::Data(format!("support patch at {:?} is unlabeled", p.center)))
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = one_hot(&classes, class_count)?;
        let mut counts = vec![0usize; class_count];
        for &c in &classes {
            counts[c as usize - 1] += 1;
        }
        let per_class = counts[0];
        if let Some(k) = counts.iter().position(|&n| n != per_class) {
            return Err(Error::Data(format!(
                "support set unbalanced: class {} has {} patches, class 1 has {per_class}",
                k + 1,
                counts[k]
            )));
        }
        Ok(Self {
            patches,
            labels,
            class_count,
            per_class,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Class index `0..K` of each support patch.
    pub fn class_indices(&self) -> Vec<usize> {
        self.patches
            .iter()
            .map(|p| p.label.expect("validated at construction") as usize - 1)
            .collect()
    }
}

/// Picks `per_class` support pixels per class at random; every other
/// labelled pixel becomes a test pixel.
pub fn split_centers(cube: &HsiCube, per_class: usize, seed: u64) -> Result<SplitCenters> {
    let gt = cube
        .gt
        .as_ref()
        .ok_or_else(|| Error::Data("splitting requires ground truth".into()))?;
    if per_class == 0 {
        return Err(Error::Config("support set needs at least one patch per class".into()));
    }
    let k = cube.class_count();
    if k == 0 {
        return Err(Error::Data("ground truth has no labelled pixels".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in gt.iter().enumerate() {
        if l != 0 {
            by_class[l as usize - 1].push(i);
        }
    }
    let mut rng = rng_from_seed(seed);
    let mut in_support = vec![false; gt.len()];
    let mut support = Vec::with_capacity(k * per_class);
    for (c, pixels) in by_class.iter_mut().enumerate() {
        if pixels.len() < per_class {
            return Err(Error::Data(format!(
                "class {} has {} labelled pixels, {per_class} needed",
                c + 1,
                pixels.len()
            )));
        }
        let (chosen, _) = pixels.partial_shuffle(&mut rng, per_class);
        for &i in chosen.iter() {
            in_support[i] = true;
            support.push(((i / cube.cols, i % cube.cols), c as u16 + 1));
        }
    }
    let test = gt
        .iter()
        .enumerate()
        .filter(|&(i, &l)| l != 0 && !in_support[i])
        .map(|(i, &l)| ((i / cube.cols, i % cube.cols), l))
        .collect();
    Ok(SplitCenters {
        support,
        test,
        class_count: k,
        per_class,
    })
}

/// Support set of `per_class` patches per class and all remaining labelled
/// pixels as test patches.
pub fn build_splits(
    cube: &HsiCube,
    per_class: usize,
    p: usize,
    seed: u64,
) -> Result<(SupportSet, Vec<Patch>)> {
    let centers = split_centers(cube, per_class, seed)?;
    let support = centers
        .support
        .iter()
        .map(|&(c, _)| extract_patch(cube, c, p))
        .collect::<Result<Vec<_>>>()?;
    let test = centers
        .test
        .iter()
        .map(|&(c, _)| extract_patch(cube, c, p))
        .collect::<Result<Vec<_>>>()?;
    Ok((SupportSet::new(support, centers.class_count)?, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn labelled_cube(rows: usize, cols: usize, gt: Vec<u16>) -> HsiCube {
        HsiCube::new(rows, cols, 1, vec![0.0; rows * cols])
            .unwrap()
            .with_gt(gt)
            .unwrap()
    }

    #[test]
    fn houston_style_support_size() {
        // 15 classes of 120 labelled pixels each, plus unlabeled background
        let (rows, cols) = (60, 40);
        let mut gt = vec![0u16; rows * cols];
        for (i, g) in gt.iter_mut().enumerate().take(15 * 120) {
            *g = (i % 15) as u16 + 1;
        }
        let cube = labelled_cube(rows, cols, gt);
        let (support, test) = build_splits(&cube, 100, 3, 5).unwrap();
        assert_eq!(support.len(), 1500);
        assert_eq!(test.len(), 15 * 20);
        assert_eq!(support.labels.shape(), &[1500, 15]);
        for row in support.labels.data().chunks(15) {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn pavia_style_counts() {
        // 42776 labelled pixels over 9 classes on a 220x220 grid
        let (rows, cols) = (220, 220);
        let mut gt = vec![0u16; rows * cols];
        for (i, g) in gt.iter_mut().enumerate().take(42776) {
            *g = (i % 9) as u16 + 1;
        }
        let cube = labelled_cube(rows, cols, gt);
        let s = split_centers(&cube, 100, 11).unwrap();
        assert_eq!(s.support.len(), 900);
        assert_eq!(s.test.len(), 41876);
        let sup: HashSet<_> = s.support.iter().map(|x| x.0).collect();
        assert!(s.test.iter().all(|t| !sup.contains(&t.0)));
        for c in 1..=9u16 {
            assert_eq!(s.support.iter().filter(|x| x.1 == c).count(), 100);
        }
    }

    #[test]
    fn short_class_is_named() {
        let cube = labelled_cube(2, 3, vec![1, 1, 1, 2, 0, 0]);
        match split_centers(&cube, 2, 0) {
            Err(Error::Data(msg)) => assert!(msg.contains("class 2"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_per_class_rejected() {
        let cube = labelled_cube(2, 2, vec![1, 2, 1, 2]);
        assert!(split_centers(&cube, 0, 0).is_err());
    }

    #[test]
    fn split_determinism() {
        let gt: Vec<u16> = (0..100).map(|i| (i % 4) as u16).collect();
        let cube = labelled_cube(10, 10, gt);
        assert_eq!(split_centers(&cube, 5, 3).unwrap(), split_centers(&cube, 5, 3).unwrap());
    }

    #[test]
    fn unbalanced_support_rejected() {
        let cube = labelled_cube(2, 2, vec![1, 1, 2, 2]);
        let patches: Vec<_> = [(0, 0), (0, 1), (1, 0)]
            .iter()
            .map(|&c| extract_patch(&cube, c, 1).unwrap())
            .collect();
        assert!(SupportSet::new(patches, 2).is_err());
    }
}

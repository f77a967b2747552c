//! Hyperspectral cubes: file I/O, synthetic scenes, patch extraction,
//! overlapping view sampling, and support/test splits.

mod cube;
mod patch;
mod split;
mod synthetic;

pub use cube::{read_cube, read_gt, write_cube, write_gt, GroundTruth, HsiCube};
pub use patch::{
    extract_patch, reflect_index, sample_view_centers, sample_view_pairs, view_shift, PairCenters,
    Patch, ViewPair,
};
pub use split::{build_splits, one_hot, split_centers, LabelledCenter, SplitCenters, SupportSet};
pub use synthetic::{class_mean_spectra, generate_synthetic, SyntheticSpec};

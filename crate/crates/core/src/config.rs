//! Experiment configuration: `[section]` / `key = value` files, defaults for
//! every omitted key, and a digest of the resolved settings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentParams, AugmentPolicy};
use crate::data::SyntheticSpec;
use crate::downstream::DownstreamConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::paws::{PawsHyper, DEFAULT_LOG_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub patch_size: usize,
    pub support_per_class: usize,
    /// Number of anchor/positive pairs sampled once per run.
    pub unlabeled_count: usize,
    /// Support patches per class drawn for each training step.
    pub support_draw_per_class: usize,
    /// Min-max scale each band to [0, 1] after loading.
    pub normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            patch_size: 9,
            support_per_class: 100,
            unlabeled_count: 2000,
            support_draw_per_class: 10,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PawsSection {
    pub tau: f64,
    #[serde(rename = "T")]
    pub sharpen_temperature: f64,
    pub epochs: usize,
    pub pairs_per_batch: usize,
    pub epsilon: f64,
    pub augment_support: bool,
}

impl Default for PawsSection {
    fn default() -> Self {
        Self {
            tau: 0.25,
            sharpen_temperature: 0.10,
            epochs: 50,
            pairs_per_batch: 64,
            epsilon: DEFAULT_LOG_EPS,
            augment_support: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub spectral_kernel: usize,
    pub spectral_stride: usize,
    pub conv3d_channels: usize,
    /// Defaults to `[64, 64, embedding_dim]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ds_widths: Option<Vec<usize>>,
    pub embedding_dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            spectral_kernel: 7,
            spectral_stride: 2,
            conv3d_channels: 8,
            ds_widths: None,
            embedding_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub channel_swap: f64,
    pub channel_drop: f64,
    pub channel_suppress: f64,
    pub channel_average: f64,
    pub flip: f64,
    pub crop: f64,
    pub rotate: f64,
    pub pixel_removal: f64,
    pub noise: f64,
    pub drop_fraction: f64,
    pub suppress_fraction: f64,
    pub suppress_min: f64,
    pub suppress_max: f64,
    pub average_window: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop_min: Option<usize>,
    pub noise_sigma: f64,
    pub removal_fraction: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let policy = AugmentPolicy::default();
        Self::from_policy(&policy)
    }
}

impl AugmentSection {
    pub fn from_policy(policy: &AugmentPolicy) -> Self {
        let [channel_swap, channel_drop, channel_suppress, channel_average, flip, crop, rotate, pixel_removal, noise] =
            policy.phi;
        let p = &policy.params;
        Self {
            channel_swap,
            channel_drop,
            channel_suppress,
            channel_average,
            flip,
            crop,
            rotate,
            pixel_removal,
            noise,
            drop_fraction: p.drop_fraction,
            suppress_fraction: p.suppress_fraction,
            suppress_min: p.suppress_min,
            suppress_max: p.suppress_max,
            average_window: p.average_window,
            crop_min: p.crop_min,
            noise_sigma: p.noise_sigma,
            removal_fraction: p.removal_fraction,
        }
    }

    pub fn policy(&self) -> AugmentPolicy {
        AugmentPolicy {
            phi: [
                self.channel_swap,
                self.channel_drop,
                self.channel_suppress,
                self.channel_average,
                self.flip,
                self.crop,
                self.rotate,
                self.pixel_removal,
                self.noise,
            ],
            params: AugmentParams {
                drop_fraction: self.drop_fraction,
                suppress_fraction: self.suppress_fraction,
                suppress_min: self.suppress_min,
                suppress_max: self.suppress_max,
                average_window: self.average_window,
                crop_min: self.crop_min,
                noise_sigma: self.noise_sigma,
                removal_fraction: self.removal_fraction,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self::from(&OptimizerConfig::lars())
    }
}

impl From<&OptimizerConfig> for OptimizerSection {
    fn from(c: &OptimizerConfig) -> Self {
        Self {
            kind: c.kind,
            lr: c.lr,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            trust_coefficient: c.trust_coefficient,
        }
    }
}

impl OptimizerSection {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.kind,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            trust_coefficient: self.trust_coefficient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
}

impl Default for DownstreamSection {
    fn default() -> Self {
        let d = DownstreamConfig::default();
        let o = OptimizerSection::from(&d.optimizer);
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            kind: o.kind,
            lr: o.lr,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            trust_coefficient: o.trust_coefficient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub region_seeds: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            rows: s.rows,
            cols: s.cols,
            bands: s.bands,
            classes: s.classes,
            noise_sigma: s.noise_sigma,
            region_seeds: s.region_seeds,
        }
    }
}

/// Every setting of a run. Field order is the order of the resolved file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataSection,
    pub paws: PawsSection,
    pub encoder: EncoderSection,
    pub augment: AugmentSection,
    pub optimizer: OptimizerSection,
    pub downstream: DownstreamSection,
    pub synth: SynthSection,
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.data.patch_size;
        if p == 0 || p.is_multiple_of(2) {
            return Err(Error::Config(format!("patch_size must be odd and positive, got {p}")));
        }
        if self.paws.epochs == 0 {
            return Err(Error::Config("paws.epochs must be at least 1".into()));
        }
        if self.data.support_per_class == 0 || self.data.support_draw_per_class == 0 {
            return Err(Error::Config("support sizes must be positive".into()));
        }
        if self.data.unlabeled_count == 0 {
            return Err(Error::Config("unlabeled_count must be positive".into()));
        }
        self.paws().validate()?;
        self.augment.policy().validate()?;
        self.optimizer.optimizer().validate()?;
        self.downstream().validate()?;
        self.synthetic_spec().validate()?;
        if let Some(w) = &self.encoder.ds_widths {
            if w.len() != 3 || w[2] != self.encoder.embedding_dim {
                return Err(Error::Config(format!(
                    "encoder.ds_widths must have 3 entries ending in embedding_dim {}, got {w:?}",
                    self.encoder.embedding_dim
                )));
            }
        }
        Ok(())
    }

    pub fn paws(&self) -> PawsHyper {
        PawsHyper {
            tau: self.paws.tau,
            sharpen_temperature: self.paws.sharpen_temperature,
            pairs_per_batch: self.paws.pairs_per_batch,
            epsilon: self.paws.epsilon,
            augment_support: self.paws.augment_support,
        }
    }

    pub fn encoder_config(&self, bands: usize) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            patch_size: self.data.patch_size,
            bands,
            spectral_kernel: e.spectral_kernel,
            spectral_stride: e.spectral_stride,
            conv3d_channels: e.conv3d_channels,
            ds_widths: e.ds_widths.clone().unwrap_or_else(|| vec![64, 64, e.embedding_dim]),
            embedding_dim: e.embedding_dim,
        }
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        self.augment.policy()
    }

    pub fn pretrain_optimizer(&self) -> OptimizerConfig {
        self.optimizer.optimizer()
    }

    pub fn downstream(&self) -> DownstreamConfig {
        let d = &self.downstream;
        DownstreamConfig {
            epochs: d.epochs,
            batch_size: d.batch_size,
            optimizer: OptimizerConfig {
                kind: d.kind,
                lr: d.lr,
                momentum: d.momentum,
                weight_decay: d.weight_decay,
                trust_coefficient: d.trust_coefficient,
            },
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let s = &self.synth;
        SyntheticSpec {
            rows: s.rows,
            cols: s.cols,
            bands: s.bands,
            classes: s.classes,
            noise_sigma: s.noise_sigma,
            region_seeds: s.region_seeds,
            seed: self.seed,
        }
    }

    /// The fully resolved configuration, with every default written out.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config sections serialize to TOML")
    }

    /// Hex SHA-256 of [`TrainConfig::resolved`].
    pub fn digest(&self) -> String {
        Sha256::digest(self.resolved().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = TrainConfig::parse("").unwrap();
        assert_eq!(cfg.paws.tau, 0.25);
        assert_eq!(cfg.paws.sharpen_temperature, 0.10);
        assert_eq!(cfg.paws.epochs, 50);
        assert_eq!(cfg.data.support_per_class, 100);
        assert_eq!(cfg.data.patch_size, 9);
        assert_eq!(cfg.paws.pairs_per_batch, 64);
        assert_eq!(cfg.downstream.epochs, 50);
        assert_eq!(cfg.encoder_config(32).ds_widths, vec![64, 64, 64]);
        assert_eq!(cfg, TrainConfig::default());
    }

    #[test]
    fn section_override_keeps_other_defaults() {
        let cfg = TrainConfig::parse("[paws]\nT = 0.5\n").unwrap();
        assert_eq!(cfg.paws.sharpen_temperature, 0.5);
        let mut expected = TrainConfig::default();
        expected.paws.sharpen_temperature = 0.5;
        assert_eq!(cfg, expected);
    }

    #[test]
    fn rejects_bad_values() {
        let e = TrainConfig::parse("[paws]\ntau = -1\n").unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("tau")), "{e}");
        let e = TrainConfig::parse("[paws]\nbogus_key = 3\n").unwrap_err();
        assert!(e.to_string().contains("bogus_key"), "{e}");
        let e = TrainConfig::parse("[data]\npatch_size = \"nine\"\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(TrainConfig::parse("[data]\npatch_size = 8\n").is_err());
        assert!(TrainConfig::parse("[paws]\nepochs = 0\n").is_err());
        assert!(TrainConfig::parse("[nosuchsection]\nx = 1\n").is_err());
        assert!(TrainConfig::parse("[encoder]\nds_widths = [8, 8]\n").is_err());
    }

    #[test]
    fn resolved_round_trips_and_digest_is_stable() {
        let mut cfg = TrainConfig::parse("seed = 7\n[optimizer]\nkind = \"sgd\"\nlr = 0.05\n").unwrap();
        assert_eq!(cfg.optimizer.kind, OptimizerKind::Sgd);
        let again = TrainConfig::parse(&cfg.resolved()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.digest(), cfg.digest());
        assert_eq!(cfg.digest().len(), 64);
        cfg.seed = 8;
        assert_ne!(again.digest(), cfg.digest());
    }

    #[test]
    fn augment_section_maps_to_policy() {
        let cfg = TrainConfig::parse("[augment]\nflip = 1.0\nnoise = 0.0\ncrop_min = 6\n").unwrap();
        let policy = cfg.augment_policy();
        assert_eq!(policy.phi[4], 1.0);
        assert_eq!(policy.phi[8], 0.0);
        assert_eq!(policy.params.crop_min, Some(6));
        assert_eq!(AugmentSection::from_policy(&policy), cfg.augment);
    }
}

//! The patch encoder: one spectral 3D convolution, a fold of the spectral
//! axis into channels, and three depthwise separable convolutions, each
//! followed by ReLU, then global average pooling to a `d`-dimensional
//! embedding.
//!
//! Embeddings are returned unnormalized.

mod model_file;

pub use model_file::{read_model, write_model};

use rand::Rng as _;

use crate::autodiff::{
    conv3d, conv3d_bands_out, conv3d_kernel_backward, dsconv2d, dsconv2d_backward,
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, ParamStore, Tensor,
};
use crate::data::Patch;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub const CONV3D_KERNEL: &str = "conv3d.kernel";
const SPATIAL_KERNEL: usize = 3;

fn depthwise_name(layer: usize) -> String {
    format!("ds{}.depthwise", layer + 1)
}

fn pointwise_name(layer: usize) -> String {
    format!("ds{}.pointwise", layer + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub bands: usize,
    pub spectral_kernel: usize,
    pub spectral_stride: usize,
    pub conv3d_channels: usize,
    /// Output widths of the three depthwise separable layers; the last is `d`.
    pub ds_widths: Vec<usize>,
    pub embedding_dim: usize,
}

impl EncoderConfig {
    /// Default layer sizes for `p x p x bands` inputs.
    pub fn new(patch_size: usize, bands: usize) -> Self {
        Self {
            patch_size,
            bands,
            spectral_kernel: 7,
            spectral_stride: 2,
            conv3d_channels: 8,
            ds_widths: vec![64, 64, 64],
            embedding_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size.is_multiple_of(2) {
            return Err(Error::Config(format!("patch size must be odd, got {}", self.patch_size)));
        }
        if self.spectral_kernel == 0 || self.spectral_kernel > self.bands {
            return Err(Error::Config(format!(
                "spectral kernel {} must lie in 1..={}",
                self.spectral_kernel, self.bands
            )));
        }
        if self.spectral_stride == 0 || self.conv3d_channels == 0 {
            return Err(Error::Config("spectral stride and conv3d channels must be positive".into()));
        }
        if self.ds_widths.len() != 3 {
            return Err(Error::Config(format!(
                "expected 3 depthwise separable widths, got {}",
                self.ds_widths.len()
            )));
        }
        if self.ds_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.ds_widths[2] != self.embedding_dim {
            return Err(Error::Config(format!(
                "last width {} must equal embedding dim {}",
                self.ds_widths[2], self.embedding_dim
            )));
        }
        Ok(())
    }

    /// Spectral length after the 3D convolution.
    pub fn bands_out(&self) -> usize {
        conv3d_bands_out(self.bands, self.spectral_kernel, self.spectral_stride).unwrap_or(0)
    }

    /// Channel count after folding the spectral axis: `conv3d_channels * B'`.
    pub fn folded_channels(&self) -> usize {
        self.conv3d_channels * self.bands_out()
    }

    /// `(name, shape)` of every parameter, in store order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = SPATIAL_KERNEL;
        let mut shapes = vec![(
            CONV3D_KERNEL.to_string(),
            vec![self.conv3d_channels, 1, self.spectral_kernel, k, k],
        )];
        let mut c_in = self.folded_channels();
        for (i, &w) in self.ds_widths.iter().enumerate() {
            shapes.push((depthwise_name(i), vec![c_in, k, k]));
            shapes.push((pointwise_name(i), vec![w, c_in]));
            c_in = w;
        }
        shapes
    }
}

/// Fresh encoder parameters, uniform in `+-sqrt(gain / fan_in)`.
pub fn build_encoder(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut params = ParamStore::new();
    for (name, shape) in cfg.param_shapes() {
        let fan_in: usize = shape[1..].iter().product();
        // depthwise kernels feed a linear channel mix, the rest feed a ReLU
        let gain = if name.ends_with("depthwise") { 3.0 } else { 6.0 };
        let bound = (gain / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        params.insert(name, Tensor::new(shape, data)?, true)?;
    }
    Ok(params)
}

/// Stacks patches into a `[batch, p, p, B]` tensor.
pub fn patches_to_batch<'a>(patches: impl IntoIterator<Item = &'a Patch>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut geometry = None;
    let mut n = 0;
    for p in patches {
        match geometry {
            None => geometry = Some((p.size, p.bands)),
            Some(g) if g != (p.size, p.bands) => {
                return Err(Error::Shape(format!(
                    "mixed patch geometry {g:?} and {:?}",
                    (p.size, p.bands)
                )))
            }
            _ => {}
        }
        data.extend(p.values.iter().map(|&v| v as f64));
        n += 1;
    }
    let (size, bands) = geometry.ok_or_else(|| Error::Shape("empty patch batch".into()))?;
    Tensor::new(vec![n, size, size, bands], data)
}

/// Activations kept from [`Encoder::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTape {
    spectral_input: Tensor,
    conv_out: Tensor,
    ds_inputs: Vec<Tensor>,
    ds_outputs: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Verifies that `params` holds every tensor this encoder needs, with the
    /// right shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        for (name, shape) in self.cfg.param_shapes() {
            let got = params.value(&name)?.shape();
            if got != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {got:?}")));
            }
        }
        Ok(())
    }

    fn to_spectral_layout(&self, batch: &Tensor) -> Result<Tensor> {
        let (p, b) = (self.cfg.patch_size, self.cfg.bands);
        batch.expect_rank(4, "encoder batch")?;
        let s = batch.shape();
        if s[1] != p || s[2] != p || s[3] != b {
            return Err(Error::Shape(format!(
                "encoder expects [batch, {p}, {p}, {b}], got {s:?}"
            )));
        }
        let n = s[0];
        let plane = p * p;
        let mut out = vec![0.0; batch.len()];
        for (i, sample) in batch.data().chunks(plane * b).enumerate() {
            let dst = &mut out[i * plane * b..(i + 1) * plane * b];
            for (px, spectrum) in sample.chunks(b).enumerate() {
                for (band, &v) in spectrum.iter().enumerate() {
                    dst[band * plane + px] = v;
                }
            }
        }
        Tensor::new(vec![n, 1, b, p, p], out)
    }

    /// `[batch, p, p, B] -> [batch, d]`, plus the tape for [`Self::backward`].
    pub fn forward(&self, params: &ParamStore, batch: &Tensor) -> Result<(Tensor, EncoderTape)> {
        let x = self.to_spectral_layout(batch)?;
        let n = x.shape()[0];
        let p = self.cfg.patch_size;
        let conv_out = conv3d(&x, params.value(CONV3D_KERNEL)?, self.cfg.spectral_stride)?;
        let mut h = relu(&conv_out).reshape(vec![n, self.cfg.folded_channels(), p, p])?;
        let mut ds_inputs = Vec::with_capacity(3);
        let mut ds_outputs = Vec::with_capacity(3);
        for i in 0..3 {
            let out = dsconv2d(
                &h,
                params.value(&depthwise_name(i))?,
                params.value(&pointwise_name(i))?,
            )?;
            let next = relu(&out);
            ds_inputs.push(h);
            ds_outputs.push(out);
            h = next;
        }
        let z = global_avg_pool(&h)?;
        Ok((
            z,
            EncoderTape {
                spectral_input: x,
                conv_out,
                ds_inputs,
                ds_outputs,
            },
        ))
    }

    pub fn encode(&self, params: &ParamStore, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(params, batch)?.0)
    }

    /// Embeds patches in chunks of `chunk` to bound memory.
    pub fn encode_patches(&self, params: &ParamStore, patches: &[Patch], chunk: usize) -> Result<Tensor> {
        let parts = patches
            .chunks(chunk.max(1))
            .map(|c| self.encode(params, &patches_to_batch(c)?))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    /// Backpropagates `upstream` (`[batch, d]`) and accumulates every
    /// parameter gradient into `params`.
    pub fn backward(&self, params: &mut ParamStore, tape: &EncoderTape, upstream: &Tensor) -> Result<()> {
        let last = tape.ds_outputs.last().expect("three layers");
        let mut g = global_avg_pool_backward(last.shape(), upstream)?;
        for i in (0..3).rev() {
            g = relu_backward(&tape.ds_outputs[i], &g)?;
            let (gi, gdw, gpw) = dsconv2d_backward(
                &tape.ds_inputs[i],
                params.value(&depthwise_name(i))?,
                params.value(&pointwise_name(i))?,
                &g,
            )?;
            params.accumulate(&depthwise_name(i), &gdw)?;
            params.accumulate(&pointwise_name(i), &gpw)?;
            g = gi;
        }
        let g = g.reshape(tape.conv_out.shape().to_vec())?;
        let g = relu_backward(&tape.conv_out, &g)?;
        let gk = conv3d_kernel_backward(
            &tape.spectral_input,
            params.value(CONV3D_KERNEL)?,
            self.cfg.spectral_stride,
            &g,
        )?;
        params.accumulate(CONV3D_KERNEL, &gk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Objective};

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            patch_size: 5,
            bands: 8,
            spectral_kernel: 3,
            spectral_stride: 2,
            conv3d_channels: 2,
            ds_widths: vec![4, 3, 3],
            embedding_dim: 3,
        }
    }

    fn random_batch(n: usize, cfg: &EncoderConfig, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let len = n * cfg.patch_size * cfg.patch_size * cfg.bands;
        Tensor::new(
            vec![n, cfg.patch_size, cfg.patch_size, cfg.bands],
            (0..len).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn deterministic_build() {
        let cfg = EncoderConfig::new(9, 32);
        let a = build_encoder(&cfg, 3).unwrap();
        assert!(a.values_bit_identical(&build_encoder(&cfg, 3).unwrap()));
        assert!(!a.values_bit_identical(&build_encoder(&cfg, 4).unwrap()));
    }

    #[test]
    fn houston_fold_width() {
        let cfg = EncoderConfig::new(9, 144);
        assert_eq!(cfg.bands_out(), 69);
        assert_eq!(cfg.folded_channels(), 552);
        let params = build_encoder(&cfg, 0).unwrap();
        assert!(params.numel() < 1_000_000);
    }

    #[test]
    fn config_errors() {
        let mut cfg = EncoderConfig::new(9, 32);
        cfg.ds_widths = vec![64, 64];
        assert!(matches!(build_encoder(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = EncoderConfig::new(9, 32);
        cfg.spectral_kernel = 40;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::new(9, 32);
        cfg.embedding_dim = 32;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_shape_contract() {
        for p in [5, 7, 9] {
            for b in [16, 32, 144] {
                let cfg = EncoderConfig::new(p, b);
                let enc = Encoder::new(cfg.clone()).unwrap();
                let params = build_encoder(&cfg, 1).unwrap();
                let z = enc.encode(&params, &random_batch(2, &cfg, 2)).unwrap();
                assert_eq!(z.shape(), &[2, 64]);
                assert!(z.all_finite());
            }
        }
    }

    #[test]
    fn identical_patches_give_identical_rows() {
        let cfg = EncoderConfig::new(9, 32);
        let enc = Encoder::new(cfg.clone()).unwrap();
        let params = build_encoder(&cfg, 1).unwrap();
        let one = random_batch(1, &cfg, 5);
        let two = Tensor::concat_rows(&[&one, &one]).unwrap();
        let z = enc.encode(&params, &two).unwrap();
        assert_eq!(z.row(0), z.row(1));
        let z4 = enc.encode(&params, &random_batch(4, &cfg, 6)).unwrap();
        assert_eq!(z4.shape(), &[4, 64]);
    }

    #[test]
    fn shape_mismatch() {
        let cfg = EncoderConfig::new(9, 32);
        let enc = Encoder::new(cfg.clone()).unwrap();
        let params = build_encoder(&cfg, 1).unwrap();
        let wrong = random_batch(1, &EncoderConfig::new(7, 32), 0);
        assert!(matches!(enc.encode(&params, &wrong), Err(Error::Shape(_))));
    }

    struct WeightedSum<'a> {
        enc: &'a Encoder,
        batch: Tensor,
        weights: Tensor,
    }

    impl Objective for WeightedSum<'_> {
        fn loss(&mut self, params: &ParamStore) -> Result<f64> {
            let z = self.enc.encode(params, &self.batch)?;
            Ok(z.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum())
        }

        fn loss_and_grad(&mut self, params: &mut ParamStore) -> Result<f64> {
            let (z, tape) = self.enc.forward(params, &self.batch)?;
            self.enc.backward(params, &tape, &self.weights)?;
            Ok(z.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum())
        }
    }

    #[test]
    fn full_stack_gradient_check() {
        let cfg = small_cfg();
        let enc = Encoder::new(cfg.clone()).unwrap();
        for seed in 0..3 {
            let mut params = build_encoder(&cfg, seed).unwrap();
            let mut rng = rng_from_seed(seed + 50);
            let weights = Tensor::new(vec![2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let mut obj = WeightedSum {
                enc: &enc,
                batch: random_batch(2, &cfg, seed + 10),
                weights,
            };
            let err = grad_check(&mut obj, &mut params, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}

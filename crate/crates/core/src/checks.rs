//! Central-difference checks of every layer's backward pass and of the full
//! encoder plus consistency-loss composite.

use rand::Rng as _;

use crate::autodiff::{
    conv3d, conv3d_backward, dense, dense_backward, dsconv2d, dsconv2d_backward, global_avg_pool,
    global_avg_pool_backward, grad_check, l2_normalize_rows, l2_normalize_rows_backward, max_relative_error, relu,
    relu_backward, softmax_rows, softmax_rows_backward, Tensor,
};
use crate::encoder::{build_encoder, EncoderConfig, Encoder};
use crate::error::Result;
use crate::paws::{
    paws_targets, snn_forward, snn_predict, loss_with_targets, PawsHyper, PawsObjective, StepBatch,
};
use crate::rng::{derive_seed, rng_from_seed, Rng};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_relative_error: f64,
}

impl CheckResult {
    fn new(name: &str, max_relative_error: f64) -> Self {
        Self { name: name.to_string(), max_relative_error }
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Inputs bounded away from zero so no perturbation crosses a ReLU kink.
fn random_off_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

fn weighted(out: &Tensor, w: &Tensor) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn with_data(like: &Tensor, d: &[f64]) -> Tensor {
    Tensor::new(like.shape().to_vec(), d.to_vec()).expect("same shape")
}

/// The small encoder used by the composite check.
pub fn check_encoder_config() -> EncoderConfig {
    EncoderConfig {
        patch_size: 5,
        bands: 8,
        spectral_kernel: 3,
        spectral_stride: 2,
        conv3d_channels: 2,
        ds_widths: vec![4, 4, 4],
        embedding_dim: 4,
    }
}

/// Full-stack objective: 2 anchor/positive pairs and 3 support points
/// through the encoder, pseudo-labelling and the loss.
pub fn composite_batch(seed: u64) -> StepBatch {
    let cfg = check_encoder_config();
    let (n, ns) = (2, 3);
    let mut rng = rng_from_seed(seed);
    let views = random(&mut rng, &[2 * n + ns, cfg.patch_size, cfg.patch_size, cfg.bands]);
    let labels = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).expect("rows");
    StepBatch { views, pairs: n, support: ns, labels }
}

/// Temperatures for the composite check; a cold classifier spreads the
/// predictions of a freshly initialized encoder.
pub fn composite_hyper() -> PawsHyper {
    PawsHyper { tau: 0.05, sharpen_temperature: 0.5, ..Default::default() }
}

/// `(frozen, unfrozen)`: the worst relative error of the analytic gradient
/// against central differences of the loss with targets held at their
/// initial values, and against central differences of the loss that
/// re-sharpens at every evaluation.
pub fn composite_errors(seed: u64) -> Result<(f64, f64)> {
    let cfg = check_encoder_config();
    let encoder = Encoder::new(cfg.clone())?;
    let mut params = build_encoder(&cfg, derive_seed(seed, 1))?;
    let batch = composite_batch(derive_seed(seed, 2));
    let hyper = composite_hyper();
    let mut frozen = PawsObjective::new(&encoder, &batch, &hyper);
    frozen.freeze_targets(&params)?;
    let frozen_err = grad_check(&mut frozen, &mut params, FD_STEP)?;
    let mut live = PawsObjective::new(&encoder, &batch, &hyper);
    let live_err = grad_check(&mut live, &mut params, FD_STEP)?;
    Ok((frozen_err, live_err))
}

/// Checks each layer in isolation, then the composite.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::new();

    let x = random(&mut rng, &[2, 1, 9, 4, 4]);
    let k = random(&mut rng, &[3, 1, 3, 3, 3]);
    let y = conv3d(&x, &k, 2)?;
    let w = random(&mut rng, y.shape());
    let (gx, gk) = conv3d_backward(&x, &k, 2, &w)?;
    let ex = max_relative_error(x.data(), gx.data(), FD_STEP, |d| {
        weighted(&conv3d(&with_data(&x, d), &k, 2).expect("conv3d"), &w)
    })?;
    let ek = max_relative_error(k.data(), gk.data(), FD_STEP, |d| {
        weighted(&conv3d(&x, &with_data(&k, d), 2).expect("conv3d"), &w)
    })?;
    out.push(CheckResult::new("conv3d", ex.max(ek)));

    let x = random(&mut rng, &[2, 3, 5, 4]);
    let dw = random(&mut rng, &[3, 3, 3]);
    let pw = random(&mut rng, &[4, 3]);
    let w = random(&mut rng, &[2, 4, 5, 4]);
    let (gx, gdw, gpw) = dsconv2d_backward(&x, &dw, &pw, &w)?;
    let f = |x: &Tensor, dw: &Tensor, pw: &Tensor| weighted(&dsconv2d(x, dw, pw).expect("dsconv2d"), &w);
    let e = [
        max_relative_error(x.data(), gx.data(), FD_STEP, |d| f(&with_data(&x, d), &dw, &pw))?,
        max_relative_error(dw.data(), gdw.data(), FD_STEP, |d| f(&x, &with_data(&dw, d), &pw))?,
        max_relative_error(pw.data(), gpw.data(), FD_STEP, |d| f(&x, &dw, &with_data(&pw, d)))?,
    ];
    out.push(CheckResult::new("dsconv2d", e.into_iter().fold(0.0, f64::max)));

    let x = random(&mut rng, &[3, 4]);
    let wt = random(&mut rng, &[2, 4]);
    let b = random(&mut rng, &[2]);
    let w = random(&mut rng, &[3, 2]);
    let (gx, gw, gb) = dense_backward(&x, &wt, &w)?;
    let f = |x: &Tensor, wt: &Tensor, b: &Tensor| weighted(&dense(x, wt, b).expect("dense"), &w);
    let e = [
        max_relative_error(x.data(), gx.data(), FD_STEP, |d| f(&with_data(&x, d), &wt, &b))?,
        max_relative_error(wt.data(), gw.data(), FD_STEP, |d| f(&x, &with_data(&wt, d), &b))?,
        max_relative_error(b.data(), gb.data(), FD_STEP, |d| f(&x, &wt, &with_data(&b, d)))?,
    ];
    out.push(CheckResult::new("dense", e.into_iter().fold(0.0, f64::max)));

    let x = random_off_zero(&mut rng, &[4, 6]);
    let w = random(&mut rng, &[4, 6]);
    let g = relu_backward(&x, &w)?;
    let e = max_relative_error(x.data(), g.data(), FD_STEP, |d| weighted(&relu(&with_data(&x, d)), &w))?;
    out.push(CheckResult::new("relu", e));

    let x = random(&mut rng, &[2, 3, 4, 5]);
    let w = random(&mut rng, &[2, 3]);
    let g = global_avg_pool_backward(x.shape(), &w)?;
    let e = max_relative_error(x.data(), g.data(), FD_STEP, |d| {
        weighted(&global_avg_pool(&with_data(&x, d)).expect("pool"), &w)
    })?;
    out.push(CheckResult::new("global_avg_pool", e));

    let x = random(&mut rng, &[3, 5]);
    let w = random(&mut rng, &[3, 5]);
    let s = softmax_rows(&x, 0.25)?;
    let g = softmax_rows_backward(&s, &w, 0.25)?;
    let e = max_relative_error(x.data(), g.data(), FD_STEP, |d| {
        weighted(&softmax_rows(&with_data(&x, d), 0.25).expect("softmax"), &w)
    })?;
    out.push(CheckResult::new("softmax", e));

    let x = random(&mut rng, &[3, 4]);
    let w = random(&mut rng, &[3, 4]);
    let g = l2_normalize_rows_backward(&x, &w)?;
    let e = max_relative_error(x.data(), g.data(), FD_STEP, |d| {
        weighted(&l2_normalize_rows(&with_data(&x, d)).expect("normalize"), &w)
    })?;
    out.push(CheckResult::new("l2_normalize", e));

    let z = random(&mut rng, &[4, 3]);
    let sz = random(&mut rng, &[3, 3]);
    let labels = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]])?;
    let w = random(&mut rng, &[4, 2]);
    let (gz, gs) = snn_forward(&z, &sz, &labels, 0.25)?.backward(&z, &sz, &w)?;
    let e = [
        max_relative_error(z.data(), gz.data(), FD_STEP, |d| {
            weighted(&snn_predict(&with_data(&z, d), &sz, &labels, 0.25).expect("snn"), &w)
        })?,
        max_relative_error(sz.data(), gs.data(), FD_STEP, |d| {
            weighted(&snn_predict(&z, &with_data(&sz, d), &labels, 0.25).expect("snn"), &w)
        })?,
    ];
    out.push(CheckResult::new("snn", e.into_iter().fold(0.0, f64::max)));

    let rows = |rng: &mut Rng| {
        let r: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let v: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
            .collect();
        Tensor::from_rows(&r).expect("rows")
    };
    let (pa, pp) = (rows(&mut rng), rows(&mut rng));
    let targets = paws_targets(&pa, &pp, 0.5)?;
    let l = loss_with_targets(&pa, &pp, &targets, 1e-12)?;
    let e = [
        max_relative_error(pa.data(), l.grad_anchor.data(), FD_STEP, |d| {
            loss_with_targets(&with_data(&pa, d), &pp, &targets, 1e-12).expect("loss").loss
        })?,
        max_relative_error(pp.data(), l.grad_positive.data(), FD_STEP, |d| {
            loss_with_targets(&pa, &with_data(&pp, d), &targets, 1e-12).expect("loss").loss
        })?,
    ];
    out.push(CheckResult::new("consistency_loss", e.into_iter().fold(0.0, f64::max)));

    let (frozen, _) = composite_errors(derive_seed(seed, 99))?;
    out.push(CheckResult::new("encoder+loss", frozen));
    Ok(out)
}

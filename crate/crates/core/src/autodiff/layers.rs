//! Forward and analytic backward passes for the layers the encoder and the
//! pseudo-labeling head are built from.
//!
//! Backward functions take the forward inputs (not cached activations) and
//! the upstream gradient, and return gradients with respect to every input.
//! Convolutions use zero "same" padding over the spatial axes.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Rows with a smaller Euclidean norm are rejected by [`l2_normalize_rows`].
pub const MIN_ROW_NORM: f64 = 1e-12;

struct Conv3dDims {
    batch: usize,
    bands: usize,
    height: usize,
    width: usize,
    c_out: usize,
    kb: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    bands_out: usize,
}

impl Conv3dDims {
    fn new(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Self> {
        input.expect_rank(5, "conv3d input")?;
        kernels.expect_rank(5, "conv3d kernels")?;
        let s = input.shape();
        let k = kernels.shape();
        if s[1] != 1 || k[1] != 1 {
            return Err(Error::Shape(format!(
                "conv3d expects a single input channel, got input {s:?} kernels {k:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv3d stride must be positive".into()));
        }
        if k[3].is_multiple_of(2) || k[4].is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "conv3d spatial kernel must be odd, got {}x{}",
                k[3], k[4]
            )));
        }
        if k[2] > s[2] || k[3] > s[3] || k[4] > s[4] {
            return Err(Error::Shape(format!(
                "conv3d kernel {k:?} larger than input {s:?}"
            )));
        }
        Ok(Self {
            batch: s[0],
            bands: s[2],
            height: s[3],
            width: s[4],
            c_out: k[0],
            kb: k[2],
            kh: k[3],
            kw: k[4],
            stride,
            bands_out: (s[2] - k[2]) / stride + 1,
        })
    }

    fn taps(&self) -> usize {
        self.kb * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.bands_out * self.height * self.width
    }

    /// Gathers one sample into a `[taps, bands_out*H*W]` column matrix.
    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        let (h, w) = (self.height, self.width);
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let plane = self.out_plane();
        cols.fill(0.0);
        for t in 0..self.kb {
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = ((t * self.kh + dy) * self.kw + dx) * plane;
                    for bo in 0..self.bands_out {
                        let band = bo * self.stride + t;
                        let src = &sample[band * h * w..(band + 1) * h * w];
                        for y in 0..h {
                            let sy = y + dy;
                            if sy < ph || sy - ph >= h {
                                continue;
                            }
                            let sy = sy - ph;
                            let dst = row + (bo * h + y) * w;
                            for x in 0..w {
                                let sx = x + dx;
                                if sx < pw || sx - pw >= w {
                                    continue;
                                }
                                cols[dst + x] = src[sy * w + sx - pw];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column-matrix gradient back onto one input sample.
    fn col2im(&self, cols: &[f64], sample: &mut [f64]) {
        let (h, w) = (self.height, self.width);
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let plane = self.out_plane();
        for t in 0..self.kb {
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = ((t * self.kh + dy) * self.kw + dx) * plane;
                    for bo in 0..self.bands_out {
                        let band = bo * self.stride + t;
                        for y in 0..h {
                            let sy = y + dy;
                            if sy < ph || sy - ph >= h {
                                continue;
                            }
                            let sy = sy - ph;
                            let src = row + (bo * h + y) * w;
                            for x in 0..w {
                                let sx = x + dx;
                                if sx < pw || sx - pw >= w {
                                    continue;
                                }
                                sample[band * h * w + sy * w + sx - pw] += cols[src + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output band count of a valid spectral convolution.
pub fn conv3d_bands_out(bands: usize, kernel_bands: usize, stride: usize) -> Option<usize> {
    (kernel_bands <= bands && stride > 0).then(|| (bands - kernel_bands) / stride + 1)
}

/// Spectral-valid, spatial-same 3D convolution.
///
/// `input`: `[batch, 1, B, H, W]`, `kernels`: `[c_out, 1, k_b, kh, kw]`.
/// Output: `[batch, c_out, B', H, W]` with `B' = (B - k_b) / stride + 1`.
pub fn conv3d(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor> {
    let d = Conv3dDims::new(input, kernels, stride)?;
    let in_len = d.bands * d.height * d.width;
    let plane = d.out_plane();
    let mut cols = vec![0.0; d.taps() * plane];
    let mut out = vec![0.0; d.batch * d.c_out * plane];
    for n in 0..d.batch {
        d.im2col(&input.data()[n * in_len..(n + 1) * in_len], &mut cols);
        gemm(
            d.c_out,
            d.taps(),
            plane,
            1.0,
            kernels.data(),
            false,
            &cols,
            false,
            0.0,
            &mut out[n * d.c_out * plane..(n + 1) * d.c_out * plane],
        );
    }
    Tensor::new(
        vec![d.batch, d.c_out, d.bands_out, d.height, d.width],
        out,
    )
}

/// Returns `(input_grad, kernel_grad)`.
pub fn conv3d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (gi, gk) = conv3d_backward_impl(input, kernels, stride, upstream, true)?;
    Ok((gi.expect("requested"), gk))
}

/// Kernel gradient only, skipping the input scatter.
pub fn conv3d_kernel_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    upstream: &Tensor,
) -> Result<Tensor> {
    Ok(conv3d_backward_impl(input, kernels, stride, upstream, false)?.1)
}

fn conv3d_backward_impl(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    upstream: &Tensor,
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let d = Conv3dDims::new(input, kernels, stride)?;
    let expected = [d.batch, d.c_out, d.bands_out, d.height, d.width];
    if upstream.shape() != expected {
        return Err(Error::Shape(format!(
            "conv3d upstream {:?}, expected {expected:?}",
            upstream.shape()
        )));
    }
    let in_len = d.bands * d.height * d.width;
    let plane = d.out_plane();
    let taps = d.taps();
    let mut cols = vec![0.0; taps * plane];
    let mut col_grad = vec![0.0; taps * plane];
    let mut input_grad = Tensor::zeros(input.shape());
    let mut kernel_grad = Tensor::zeros(kernels.shape());
    for n in 0..d.batch {
        let up = &upstream.data()[n * d.c_out * plane..(n + 1) * d.c_out * plane];
        d.im2col(&input.data()[n * in_len..(n + 1) * in_len], &mut cols);
        gemm(
            d.c_out,
            plane,
            taps,
            1.0,
            up,
            false,
            &cols,
            true,
            1.0,
            kernel_grad.data_mut(),
        );
        if !want_input {
            continue;
        }
        gemm(
            taps,
            d.c_out,
            plane,
            1.0,
            kernels.data(),
            true,
            up,
            false,
            0.0,
            &mut col_grad,
        );
        d.col2im(
            &col_grad,
            &mut input_grad.data_mut()[n * in_len..(n + 1) * in_len],
        );
    }
    Ok((want_input.then_some(input_grad), kernel_grad))
}

struct DsDims {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    c_out: usize,
}

impl DsDims {
    fn new(input: &Tensor, depthwise: &Tensor, pointwise: &Tensor) -> Result<Self> {
        input.expect_rank(4, "dsconv2d input")?;
        depthwise.expect_rank(3, "dsconv2d depthwise")?;
        pointwise.expect_rank(2, "dsconv2d pointwise")?;
        let s = input.shape();
        let dw = depthwise.shape();
        let pw = pointwise.shape();
        if dw[0] != s[1] || pw[1] != s[1] {
            return Err(Error::Shape(format!(
                "dsconv2d channel mismatch: input {s:?}, depthwise {dw:?}, pointwise {pw:?}"
            )));
        }
        if dw[1].is_multiple_of(2) || dw[2].is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "dsconv2d depthwise kernel must be odd, got {}x{}",
                dw[1], dw[2]
            )));
        }
        Ok(Self {
            batch: s[0],
            channels: s[1],
            height: s[2],
            width: s[3],
            kh: dw[1],
            kw: dw[2],
            c_out: pw[0],
        })
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Calls `f(out_index, in_index, tap_index)` for every in-bounds tap of
    /// a single channel plane.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w) = (self.height, self.width);
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        for dy in 0..self.kh {
            for dx in 0..self.kw {
                let tap = dy * self.kw + dx;
                let y0 = ph.saturating_sub(dy);
                let y1 = (h + ph).saturating_sub(dy).min(h);
                let x0 = pw.saturating_sub(dx);
                let x1 = (w + pw).saturating_sub(dx).min(w);
                for y in y0..y1 {
                    let sy = y + dy - ph;
                    for x in x0..x1 {
                        f(y * w + x, sy * w + x + dx - pw, tap);
                    }
                }
            }
        }
    }

    fn depthwise(&self, input: &[f64], depthwise: &[f64]) -> Vec<f64> {
        let plane = self.plane();
        let taps = self.kh * self.kw;
        let mut mid = vec![0.0; self.batch * self.channels * plane];
        for n in 0..self.batch {
            for c in 0..self.channels {
                let base = (n * self.channels + c) * plane;
                let src = &input[base..base + plane];
                let k = &depthwise[c * taps..(c + 1) * taps];
                let dst = &mut mid[base..base + plane];
                self.for_each_tap(|o, i, t| dst[o] += k[t] * src[i]);
            }
        }
        mid
    }
}

/// Depthwise separable convolution: per-channel same-padded spatial
/// convolution followed by a 1x1 channel mix.
///
/// `input`: `[batch, c, H, W]`, `depthwise`: `[c, kh, kw]`,
/// `pointwise`: `[c_out, c]`. Output: `[batch, c_out, H, W]`.
pub fn dsconv2d(input: &Tensor, depthwise: &Tensor, pointwise: &Tensor) -> Result<Tensor> {
    let d = DsDims::new(input, depthwise, pointwise)?;
    let mid = d.depthwise(input.data(), depthwise.data());
    let plane = d.plane();
    let mut out = vec![0.0; d.batch * d.c_out * plane];
    for n in 0..d.batch {
        gemm(
            d.c_out,
            d.channels,
            plane,
            1.0,
            pointwise.data(),
            false,
            &mid[n * d.channels * plane..(n + 1) * d.channels * plane],
            false,
            0.0,
            &mut out[n * d.c_out * plane..(n + 1) * d.c_out * plane],
        );
    }
    Tensor::new(vec![d.batch, d.c_out, d.height, d.width], out)
}

/// Returns `(input_grad, depthwise_grad, pointwise_grad)`.
pub fn dsconv2d_backward(
    input: &Tensor,
    depthwise: &Tensor,
    pointwise: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = DsDims::new(input, depthwise, pointwise)?;
    let expected = [d.batch, d.c_out, d.height, d.width];
    if upstream.shape() != expected {
        return Err(Error::Shape(format!(
            "dsconv2d upstream {:?}, expected {expected:?}",
            upstream.shape()
        )));
    }
    let plane = d.plane();
    let taps = d.kh * d.kw;
    let mid = d.depthwise(input.data(), depthwise.data());
    let mut mid_grad = vec![0.0; mid.len()];
    let mut pw_grad = Tensor::zeros(pointwise.shape());
    for n in 0..d.batch {
        let up = &upstream.data()[n * d.c_out * plane..(n + 1) * d.c_out * plane];
        let m = n * d.channels * plane..(n + 1) * d.channels * plane;
        gemm(
            d.c_out,
            plane,
            d.channels,
            1.0,
            up,
            false,
            &mid[m.clone()],
            true,
            1.0,
            pw_grad.data_mut(),
        );
        gemm(
            d.channels,
            d.c_out,
            plane,
            1.0,
            pointwise.data(),
            true,
            up,
            false,
            0.0,
            &mut mid_grad[m],
        );
    }
    let mut input_grad = Tensor::zeros(input.shape());
    let mut dw_grad = Tensor::zeros(depthwise.shape());
    let x = input.data();
    for n in 0..d.batch {
        for c in 0..d.channels {
            let base = (n * d.channels + c) * plane;
            let g = &mid_grad[base..base + plane];
            let src = &x[base..base + plane];
            let k = &depthwise.data()[c * taps..(c + 1) * taps];
            let kg = &mut dw_grad.data_mut()[c * taps..(c + 1) * taps];
            d.for_each_tap(|o, i, t| kg[t] += g[o] * src[i]);
            let ig = &mut input_grad.data_mut()[base..base + plane];
            d.for_each_tap(|o, i, t| ig[i] += k[t] * g[o]);
        }
    }
    Ok((input_grad, dw_grad, pw_grad))
}

fn dense_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    input.expect_rank(2, "dense input")?;
    weight.expect_rank(2, "dense weight")?;
    bias.expect_rank(1, "dense bias")?;
    let (b, m) = (input.shape()[0], input.shape()[1]);
    let n = weight.shape()[0];
    if weight.shape()[1] != m || bias.shape()[0] != n {
        return Err(Error::Shape(format!(
            "dense: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    Ok((b, m, n))
}

/// Affine map `input * weight^T + bias`; `input`: `[batch, m]`,
/// `weight`: `[n, m]`, `bias`: `[n]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, m, n) = dense_dims(input, weight, bias)?;
    let mut out = Vec::with_capacity(b * n);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    gemm(b, m, n, 1.0, input.data(), false, weight.data(), true, 1.0, &mut out);
    Tensor::new(vec![b, n], out)
}

/// Returns `(input_grad, weight_grad, bias_grad)`.
pub fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let bias = Tensor::zeros(&[weight.shape()[0]]);
    let (b, m, n) = dense_dims(input, weight, &bias)?;
    if upstream.shape() != [b, n] {
        return Err(Error::Shape(format!(
            "dense upstream {:?}, expected [{b}, {n}]",
            upstream.shape()
        )));
    }
    let mut gx = Tensor::zeros(&[b, m]);
    gemm(b, n, m, 1.0, upstream.data(), false, weight.data(), false, 0.0, gx.data_mut());
    let mut gw = Tensor::zeros(&[n, m]);
    gemm(n, b, m, 1.0, upstream.data(), true, input.data(), false, 0.0, gw.data_mut());
    let mut gb = bias;
    for row in upstream.data().chunks(n) {
        for (g, u) in gb.data_mut().iter_mut().zip(row) {
            *g += u;
        }
    }
    Ok((gx, gw, gb))
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Subgradient at zero is taken as zero.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if input.shape() != upstream.shape() {
        return Err(Error::Shape("relu upstream shape mismatch".into()));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Averages the spatial axes: `[batch, c, H, W] -> [batch, c]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    input.expect_rank(4, "global_avg_pool input")?;
    let s = input.shape();
    let plane = s[2] * s[3];
    let inv = 1.0 / plane as f64;
    let data = input
        .data()
        .chunks(plane)
        .map(|c| c.iter().sum::<f64>() * inv)
        .collect();
    Tensor::new(vec![s[0], s[1]], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], upstream: &Tensor) -> Result<Tensor> {
    if input_shape.len() != 4 || upstream.shape() != &input_shape[..2] {
        return Err(Error::Shape(format!(
            "global_avg_pool upstream {:?} for input {input_shape:?}",
            upstream.shape()
        )));
    }
    let plane = input_shape[2] * input_shape[3];
    let inv = 1.0 / plane as f64;
    let mut data = Vec::with_capacity(upstream.len() * plane);
    for &g in upstream.data() {
        data.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::new(input_shape.to_vec(), data)
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!(
            "softmax temperature must be > 0, got {tau}"
        )));
    }
    Ok(())
}

/// Row-wise `exp(x / tau)` normalized to the simplex.
pub fn softmax_rows(input: &Tensor, tau: f64) -> Result<Tensor> {
    check_temperature(tau)?;
    input.expect_rank(2, "softmax_rows input")?;
    let cols = input.shape()[1];
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

/// Gradient of [`softmax_rows`] given its `output`.
pub fn softmax_rows_backward(output: &Tensor, upstream: &Tensor, tau: f64) -> Result<Tensor> {
    check_temperature(tau)?;
    if output.shape() != upstream.shape() {
        return Err(Error::Shape("softmax upstream shape mismatch".into()));
    }
    let cols = output.shape()[1];
    let mut gx = Tensor::zeros(output.shape());
    for ((y, g), dst) in output
        .data()
        .chunks(cols)
        .zip(upstream.data().chunks(cols))
        .zip(gx.data_mut().chunks_mut(cols))
    {
        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((d, &yi), &gi) in dst.iter_mut().zip(y).zip(g) {
            *d = yi * (gi - dot) / tau;
        }
    }
    Ok(gx)
}

fn row_norms(input: &Tensor) -> Result<Vec<f64>> {
    input.expect_rank(2, "l2_normalize_rows input")?;
    let cols = input.shape()[1];
    input
        .data()
        .chunks(cols)
        .enumerate()
        .map(|(i, r)| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < MIN_ROW_NORM || !n.is_finite() {
                Err(Error::Numeric(format!("row {i} has norm {n:e}")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Scales each row to unit Euclidean norm.
pub fn l2_normalize_rows(input: &Tensor) -> Result<Tensor> {
    let norms = row_norms(input)?;
    let cols = input.shape()[1];
    let mut out = input.clone();
    for (row, n) in out.data_mut().chunks_mut(cols).zip(norms) {
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

pub fn l2_normalize_rows_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if input.shape() != upstream.shape() {
        return Err(Error::Shape("l2_normalize upstream shape mismatch".into()));
    }
    let norms = row_norms(input)?;
    let cols = input.shape()[1];
    let mut gx = Tensor::zeros(input.shape());
    for (((x, g), dst), n) in input
        .data()
        .chunks(cols)
        .zip(upstream.data().chunks(cols))
        .zip(gx.data_mut().chunks_mut(cols))
        .zip(norms)
    {
        let dot: f64 = x.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((d, &xi), &gi) in dst.iter_mut().zip(x).zip(g) {
            *d = (gi - xi / n * dot) / n;
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_relative_error;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn weighted_sum(t: &Tensor, w: &Tensor) -> f64 {
        t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    fn with_data(t: &Tensor, data: &[f64]) -> Tensor {
        Tensor::new(t.shape().to_vec(), data.to_vec()).unwrap()
    }

    const H: f64 = 1e-5;

    #[test]
    fn conv3d_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 1, 5, 4, 4], &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv3d(&x, &k, 1).unwrap();
        assert_eq!(y.shape(), &[2, 1, 5, 4, 4]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv3d_band_formula() {
        assert_eq!(conv3d_bands_out(144, 7, 2), Some(69));
        let x = Tensor::zeros(&[1, 1, 144, 3, 3]);
        let k = Tensor::zeros(&[2, 1, 7, 3, 3]);
        assert_eq!(conv3d(&x, &k, 2).unwrap().shape(), &[1, 2, 69, 3, 3]);
    }

    #[test]
    fn conv3d_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 1, 4, 3, 3]);
        let k = Tensor::zeros(&[1, 1, 5, 3, 3]);
        assert!(matches!(conv3d(&x, &k, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn conv3d_gradients_match_central_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[2, 1, 3, 4, 4], &mut rng);
            let k = random(&[2, 1, 2, 3, 3], &mut rng);
            let w = random(&[2, 2, 2, 4, 4], &mut rng);
            let (gx, gk) = conv3d_backward(&x, &k, 1, &w).unwrap();
            let ex = max_relative_error(x.data(), gx.data(), H, |d| {
                weighted_sum(&conv3d(&with_data(&x, d), &k, 1).unwrap(), &w)
            })
            .unwrap();
            let ek = max_relative_error(k.data(), gk.data(), H, |d| {
                weighted_sum(&conv3d(&x, &with_data(&k, d), 1).unwrap(), &w)
            })
            .unwrap();
            assert!(ex < 1e-4 && ek < 1e-4, "seed {seed}: {ex} {ek}");
        }
    }

    #[test]
    fn conv3d_strided_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[1, 1, 9, 3, 3], &mut rng);
        let k = random(&[3, 1, 3, 3, 3], &mut rng);
        let w = random(&[1, 3, 4, 3, 3], &mut rng);
        let (gx, gk) = conv3d_backward(&x, &k, 2, &w).unwrap();
        let ex = max_relative_error(x.data(), gx.data(), H, |d| {
            weighted_sum(&conv3d(&with_data(&x, d), &k, 2).unwrap(), &w)
        })
        .unwrap();
        let ek = max_relative_error(k.data(), gk.data(), H, |d| {
            weighted_sum(&conv3d(&x, &with_data(&k, d), 2).unwrap(), &w)
        })
        .unwrap();
        assert!(ex < 1e-4 && ek < 1e-4);
    }

    #[test]
    fn conv3d_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 1, 6, 5, 5], &mut rng);
        let y = random(&[1, 1, 6, 5, 5], &mut rng);
        let k = random(&[2, 1, 3, 3, 3], &mut rng);
        let (a, b) = (0.7, -1.3);
        let combo: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        let lhs = conv3d(&with_data(&x, &combo), &k, 2).unwrap();
        let cx = conv3d(&x, &k, 2).unwrap();
        let cy = conv3d(&y, &k, 2).unwrap();
        for i in 0..lhs.len() {
            let rhs = a * cx.data()[i] + b * cy.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn dsconv2d_identity_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 3, 4, 4], &mut rng);
        let mut dw = Tensor::zeros(&[3, 3, 3]);
        for c in 0..3 {
            dw.data_mut()[c * 9 + 4] = 1.0;
        }
        let y = dsconv2d(&x, &dw, &Tensor::identity(3)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dsconv2d_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let dw = Tensor::zeros(&[3, 3, 3]);
        let pw = Tensor::zeros(&[2, 2]);
        assert!(matches!(dsconv2d(&x, &dw, &pw), Err(Error::Shape(_))));
    }

    #[test]
    fn dsconv2d_matches_full_convolution_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 2, 4, 4], &mut rng);
        let dw = random(&[2, 3, 3], &mut rng);
        let pw = random(&[3, 2], &mut rng);
        let y = dsconv2d(&x, &dw, &pw).unwrap();
        // full kernel K[o, c, dy, dx] = pw[o, c] * dw[c, dy, dx]
        for o in 0..3 {
            for r in 0..4i64 {
                for col in 0..4i64 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for dy in 0..3i64 {
                            for dx in 0..3i64 {
                                let (sr, sc) = (r + dy - 1, col + dx - 1);
                                if !(0..4).contains(&sr) || !(0..4).contains(&sc) {
                                    continue;
                                }
                                let kf = pw.data()[o * 2 + c]
                                    * dw.data()[c * 9 + (dy * 3 + dx) as usize];
                                acc += kf * x.data()[c * 16 + (sr * 4 + sc) as usize];
                            }
                        }
                    }
                    let got = y.data()[o * 16 + (r * 4 + col) as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dsconv2d_gradients_match_central_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = random(&[2, 2, 4, 4], &mut rng);
            let dw = random(&[2, 3, 3], &mut rng);
            let pw = random(&[3, 2], &mut rng);
            let w = random(&[2, 3, 4, 4], &mut rng);
            let (gx, gdw, gpw) = dsconv2d_backward(&x, &dw, &pw, &w).unwrap();
            let ex = max_relative_error(x.data(), gx.data(), H, |d| {
                weighted_sum(&dsconv2d(&with_data(&x, d), &dw, &pw).unwrap(), &w)
            })
            .unwrap();
            let edw = max_relative_error(dw.data(), gdw.data(), H, |d| {
                weighted_sum(&dsconv2d(&x, &with_data(&dw, d), &pw).unwrap(), &w)
            })
            .unwrap();
            let epw = max_relative_error(pw.data(), gpw.data(), H, |d| {
                weighted_sum(&dsconv2d(&x, &dw, &with_data(&pw, d)).unwrap(), &w)
            })
            .unwrap();
            assert!(ex < 1e-4 && edw < 1e-4 && epw < 1e-4, "{ex} {edw} {epw}");
        }
    }

    #[test]
    fn dense_identity_and_bias_gradient() {
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let y = dense(&x, &Tensor::identity(2), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y, x);
        let up = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0]]).unwrap();
        let (_, _, gb) = dense_backward(&x, &Tensor::identity(2), &up).unwrap();
        assert_eq!(gb.data(), &[4.0, -2.0]);
    }

    #[test]
    fn dense_gradients_match_central_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let x = random(&[2, 3], &mut rng);
            let w = random(&[2, 3], &mut rng);
            let b = random(&[2], &mut rng);
            let up = random(&[2, 2], &mut rng);
            let (gx, gw, gb) = dense_backward(&x, &w, &up).unwrap();
            let ex = max_relative_error(x.data(), gx.data(), H, |d| {
                weighted_sum(&dense(&with_data(&x, d), &w, &b).unwrap(), &up)
            })
            .unwrap();
            let ew = max_relative_error(w.data(), gw.data(), H, |d| {
                weighted_sum(&dense(&x, &with_data(&w, d), &b).unwrap(), &up)
            })
            .unwrap();
            let eb = max_relative_error(b.data(), gb.data(), H, |d| {
                weighted_sum(&dense(&x, &w, &with_data(&b, d)).unwrap(), &up)
            })
            .unwrap();
            assert!(ex < 1e-6 && ew < 1e-6 && eb < 1e-6, "{ex} {ew} {eb}");
        }
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..20)
            .map(|_| {
                let v: f64 = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) { v } else { -v }
            })
            .collect();
        let x = Tensor::new(vec![4, 5], data).unwrap();
        let up = random(&[4, 5], &mut rng);
        let g = relu_backward(&x, &up).unwrap();
        let e = max_relative_error(x.data(), g.data(), H, |d| {
            weighted_sum(&relu(&with_data(&x, d)), &up)
        })
        .unwrap();
        assert!(e < 1e-8, "{e}");
        assert_eq!(relu_backward(&Tensor::zeros(&[1, 1]), &Tensor::new(vec![1, 1], vec![5.0]).unwrap()).unwrap().data(), &[0.0]);
    }

    #[test]
    fn pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 3, 3, 3], &mut rng);
        let up = random(&[2, 3], &mut rng);
        let g = global_avg_pool_backward(x.shape(), &up).unwrap();
        let e = max_relative_error(x.data(), g.data(), H, |d| {
            weighted_sum(&global_avg_pool(&with_data(&x, d)).unwrap(), &up)
        })
        .unwrap();
        assert!(e < 1e-8);
    }

    #[test]
    fn softmax_values() {
        let x = Tensor::from_rows(&[vec![4.0, 0.0], vec![2.5, 2.5]]).unwrap();
        let y = softmax_rows(&x, 1.0).unwrap();
        let e4 = 4f64.exp();
        assert!((y.data()[0] - e4 / (e4 + 1.0)).abs() < 1e-15);
        assert!((y.data()[0] - 0.98201).abs() < 1e-5);
        assert!((y.data()[1] - 0.01799).abs() < 1e-5);
        assert_eq!(&y.data()[2..], &[0.5, 0.5]);
        assert!(matches!(softmax_rows(&x, 0.0), Err(Error::Config(_))));
        assert!(matches!(softmax_rows(&x, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_and_l2_gradients() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let x = random(&[3, 4], &mut rng);
            let up = random(&[3, 4], &mut rng);
            for tau in [0.25, 1.0] {
                let y = softmax_rows(&x, tau).unwrap();
                let g = softmax_rows_backward(&y, &up, tau).unwrap();
                let e = max_relative_error(x.data(), g.data(), H, |d| {
                    weighted_sum(&softmax_rows(&with_data(&x, d), tau).unwrap(), &up)
                })
                .unwrap();
                assert!(e < 1e-4, "softmax {e}");
            }
            let g = l2_normalize_rows_backward(&x, &up).unwrap();
            let e = max_relative_error(x.data(), g.data(), H, |d| {
                weighted_sum(&l2_normalize_rows(&with_data(&x, d)).unwrap(), &up)
            })
            .unwrap();
            assert!(e < 1e-4, "l2 {e}");
        }
    }

    #[test]
    fn l2_normalize_values() {
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let y = l2_normalize_rows(&x).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        let zero = Tensor::zeros(&[2, 3]);
        assert!(matches!(l2_normalize_rows(&zero), Err(Error::Numeric(_))));
    }
}

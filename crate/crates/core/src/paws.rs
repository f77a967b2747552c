//! Soft-nearest-neighbour pseudo-labels, sharpening, and the consistency
//! loss with mean-entropy regularization.
//!
//! Given anchor and positive view embeddings and a labelled support set, each
//! view gets a class distribution from cosine similarities to the support
//! embeddings. The loss is the symmetric cross-entropy between each view's
//! prediction and the sharpened prediction of its partner, minus the entropy
//! of the mean sharpened prediction. Every sharpened term is a constant for
//! differentiation.

use crate::augment::{augment, AugmentPolicy};
use crate::autodiff::{
    l2_normalize_rows, l2_normalize_rows_backward, softmax_rows, softmax_rows_backward, Objective,
    ParamStore, Tensor,
};
use crate::autodiff::tensor::gemm;
use crate::data::{SupportSet, ViewPair};
use crate::encoder::{patches_to_batch, Encoder, EncoderTape};
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::rng::derive_seed;

pub const DEFAULT_LOG_EPS: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-9;
const LOSS_INPUT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PawsHyper {
    /// Softmax temperature of the similarity classifier.
    pub tau: f64,
    /// Sharpening temperature `T`.
    pub sharpen_temperature: f64,
    /// Anchor/positive pairs per batch.
    pub pairs_per_batch: usize,
    /// Guard added inside every logarithm.
    pub epsilon: f64,
    /// Augment support patches as well as the unlabeled views.
    pub augment_support: bool,
}

impl Default for PawsHyper {
    fn default() -> Self {
        Self {
            tau: 0.25,
            sharpen_temperature: 0.10,
            pairs_per_batch: 64,
            epsilon: DEFAULT_LOG_EPS,
            augment_support: false,
        }
    }
}

impl PawsHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        let t = self.sharpen_temperature;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config(format!("sharpening temperature must lie in (0, 1], got {t}")));
        }
        if self.pairs_per_batch == 0 {
            return Err(Error::Config("pairs_per_batch must be positive".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon < 1e-3) {
            return Err(Error::Config(format!("epsilon out of range: {}", self.epsilon)));
        }
        Ok(())
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_simplex(&values, SIMPLEX_TOL, 0)?;
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn sharpen(&self, temperature: f64) -> Result<ProbVector> {
        Ok(ProbVector(sharpen(&self.0, temperature)?))
    }
}

fn check_simplex(row: &[f64], tol: f64, index: usize) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.is_empty() || row.iter().any(|&v| !(v >= -tol) || !v.is_finite()) || (sum - 1.0).abs() > tol {
        return Err(Error::Validation(format!(
            "row {index} is not on the probability simplex (sum {sum})"
        )));
    }
    Ok(())
}

/// `p_k^(1/T) / sum_t p_t^(1/T)`.
pub fn sharpen(p: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("sharpening temperature must be > 0, got {temperature}")));
    }
    let max = p.iter().copied().fold(0.0f64, f64::max);
    if !(max > 0.0) {
        return Err(Error::Numeric("cannot sharpen a vector with no positive entry".into()));
    }
    let inv = 1.0 / temperature;
    // scaling by the max keeps p^(1/T) away from underflow
    let mut out: Vec<f64> = p.iter().map(|&v| (v.max(0.0) / max).powf(inv)).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

/// Row-wise [`sharpen`].
pub fn sharpen_rows(probs: &Tensor, temperature: f64) -> Result<Tensor> {
    probs.expect_rank(2, "sharpen_rows input")?;
    let k = probs.shape()[1];
    let mut data = Vec::with_capacity(probs.len());
    for row in probs.data().chunks(k) {
        data.extend(sharpen(row, temperature)?);
    }
    Tensor::new(probs.shape().to_vec(), data)
}

/// Elementwise mean of all `2n` sharpened rows.
pub fn mean_prediction(sharp_anchor: &Tensor, sharp_positive: &Tensor) -> Result<Vec<f64>> {
    sharp_anchor.expect_rank(2, "mean_prediction anchor")?;
    if sharp_anchor.shape() != sharp_positive.shape() {
        return Err(Error::Config(format!(
            "anchor {:?} and positive {:?} predictions differ in shape",
            sharp_anchor.shape(),
            sharp_positive.shape()
        )));
    }
    let (n, k) = (sharp_anchor.shape()[0], sharp_anchor.shape()[1]);
    let mut mean = vec![0.0; k];
    for row in sharp_anchor.data().chunks(k).chain(sharp_positive.data().chunks(k)) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let inv = 1.0 / (2 * n) as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

/// Mean over a list of probability vectors from both views.
pub fn mean_prediction_of(sharp_anchor: &[ProbVector], sharp_positive: &[ProbVector]) -> Result<ProbVector> {
    if sharp_anchor.is_empty() || sharp_anchor.len() != sharp_positive.len() {
        return Err(Error::Config(format!(
            "need equal, nonzero numbers of anchor ({}) and positive ({}) predictions",
            sharp_anchor.len(),
            sharp_positive.len()
        )));
    }
    let rows = |v: &[ProbVector]| Tensor::from_rows(&v.iter().map(|p| p.0.clone()).collect::<Vec<_>>());
    Ok(ProbVector(mean_prediction(&rows(sharp_anchor)?, &rows(sharp_positive)?)?))
}

/// Intermediates of [`snn_forward`] needed for the backward pass.
#[derive(Debug, Clone)]
pub struct SnnForward {
    pub probs: Tensor,
    query_unit: Tensor,
    support_unit: Tensor,
    attention: Tensor,
    labels: Tensor,
    tau: f64,
}

fn check_labels(labels: &Tensor, support_rows: usize) -> Result<()> {
    labels.expect_rank(2, "support labels")?;
    if labels.shape()[0] != support_rows {
        return Err(Error::Shape(format!(
            "{} label rows for {support_rows} support embeddings",
            labels.shape()[0]
        )));
    }
    for (i, row) in labels.data().chunks(labels.shape()[1]).enumerate() {
        check_simplex(row, SIMPLEX_TOL, i)?;
    }
    Ok(())
}

/// Soft nearest neighbour class probabilities:
/// `softmax_tau(normalize(z) normalize(support)^T) labels`.
pub fn snn_forward(z: &Tensor, support_z: &Tensor, labels: &Tensor, tau: f64) -> Result<SnnForward> {
    z.expect_rank(2, "snn queries")?;
    support_z.expect_rank(2, "snn support")?;
    if z.shape()[1] != support_z.shape()[1] {
        return Err(Error::Shape(format!(
            "query dim {} vs support dim {}",
            z.shape()[1],
            support_z.shape()[1]
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    check_labels(labels, support_z.shape()[0])?;
    let (m, d) = (z.shape()[0], z.shape()[1]);
    let (ns, k) = (support_z.shape()[0], labels.shape()[1]);
    let query_unit = l2_normalize_rows(z)?;
    let support_unit = l2_normalize_rows(support_z)?;
    let mut sim = Tensor::zeros(&[m, ns]);
    gemm(m, d, ns, 1.0, query_unit.data(), false, support_unit.data(), true, 0.0, sim.data_mut());
    let attention = softmax_rows(&sim, tau)?;
    let mut probs = Tensor::zeros(&[m, k]);
    gemm(m, ns, k, 1.0, attention.data(), false, labels.data(), false, 0.0, probs.data_mut());
    Ok(SnnForward {
        probs,
        query_unit,
        support_unit,
        attention,
        labels: labels.clone(),
        tau,
    })
}

impl SnnForward {
    /// Gradients with respect to the raw query and support embeddings.
    pub fn backward(&self, z: &Tensor, support_z: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
        if upstream.shape() != self.probs.shape() {
            return Err(Error::Shape("snn upstream shape mismatch".into()));
        }
        let (m, k) = (self.probs.shape()[0], self.probs.shape()[1]);
        let (ns, d) = (self.support_unit.shape()[0], self.support_unit.shape()[1]);
        let mut d_att = Tensor::zeros(&[m, ns]);
        gemm(m, k, ns, 1.0, upstream.data(), false, self.labels.data(), true, 0.0, d_att.data_mut());
        let d_sim = softmax_rows_backward(&self.attention, &d_att, self.tau)?;
        let mut d_query = Tensor::zeros(&[m, d]);
        gemm(m, ns, d, 1.0, d_sim.data(), false, self.support_unit.data(), false, 0.0, d_query.data_mut());
        let mut d_support = Tensor::zeros(&[ns, d]);
        gemm(ns, m, d, 1.0, d_sim.data(), true, self.query_unit.data(), false, 0.0, d_support.data_mut());
        Ok((
            l2_normalize_rows_backward(z, &d_query)?,
            l2_normalize_rows_backward(support_z, &d_support)?,
        ))
    }
}

pub fn snn_predict(z: &Tensor, support_z: &Tensor, labels: &Tensor, tau: f64) -> Result<Tensor> {
    Ok(snn_forward(z, support_z, labels, tau)?.probs)
}

/// Sharpened per-view targets and their mean, held constant by the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PawsTargets {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub mean: Vec<f64>,
}

pub fn paws_targets(p_anchor: &Tensor, p_positive: &Tensor, temperature: f64) -> Result<PawsTargets> {
    let anchor = sharpen_rows(p_anchor, temperature)?;
    let positive = sharpen_rows(p_positive, temperature)?;
    let mean = mean_prediction(&anchor, &positive)?;
    Ok(PawsTargets { anchor, positive, mean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PawsLoss {
    pub loss: f64,
    pub grad_anchor: Tensor,
    pub grad_positive: Tensor,
}

#[inline]
fn xlogy(t: f64, q: f64, eps: f64) -> f64 {
    if t == 0.0 {
        0.0
    } else {
        t * (q + eps).ln()
    }
}

/// Loss and gradients for fixed `targets`:
/// `1/(2n) sum_i [H(t^A_i, p^P_i) + H(t^P_i, p^A_i)] - H(mean)`.
pub fn loss_with_targets(
    p_anchor: &Tensor,
    p_positive: &Tensor,
    targets: &PawsTargets,
    eps: f64,
) -> Result<PawsLoss> {
    p_anchor.expect_rank(2, "anchor predictions")?;
    for t in [p_positive, &targets.anchor, &targets.positive] {
        if t.shape() != p_anchor.shape() {
            return Err(Error::Shape(format!(
                "prediction/target shapes differ: {:?} vs {:?}",
                t.shape(),
                p_anchor.shape()
            )));
        }
    }
    let (n, k) = (p_anchor.shape()[0], p_anchor.shape()[1]);
    let scale = 1.0 / (2 * n) as f64;
    let mut cross = 0.0;
    let mut grad_anchor = Tensor::zeros(&[n, k]);
    let mut grad_positive = Tensor::zeros(&[n, k]);
    for i in 0..n {
        let (pa, pp) = (p_anchor.row(i), p_positive.row(i));
        let (ta, tp) = (targets.anchor.row(i), targets.positive.row(i));
        let h_ap: f64 = ta.iter().zip(pp).map(|(&t, &q)| xlogy(t, q, eps)).sum();
        let h_pa: f64 = tp.iter().zip(pa).map(|(&t, &q)| xlogy(t, q, eps)).sum();
        cross += -h_ap - h_pa;
        let ga = &mut grad_anchor.data_mut()[i * k..(i + 1) * k];
        for ((g, &t), &q) in ga.iter_mut().zip(tp).zip(pa) {
            *g = -scale * t / (q + eps);
        }
        let gp = &mut grad_positive.data_mut()[i * k..(i + 1) * k];
        for ((g, &t), &q) in gp.iter_mut().zip(ta).zip(pp) {
            *g = -scale * t / (q + eps);
        }
    }
    let neg_entropy: f64 = targets.mean.iter().map(|&m| xlogy(m, m, eps)).sum();
    Ok(PawsLoss {
        loss: scale * cross + neg_entropy,
        grad_anchor,
        grad_positive,
    })
}

/// The consistency loss for predictions `p_anchor`, `p_positive`
/// (`[n, K]`, rows on the simplex), with stop-gradient on all sharpened
/// terms.
pub fn paws_loss(p_anchor: &Tensor, p_positive: &Tensor, hyper: &PawsHyper) -> Result<PawsLoss> {
    for (what, t) in [("anchor", p_anchor), ("positive", p_positive)] {
        t.expect_rank(2, what)?;
        for (i, row) in t.data().chunks(t.shape()[1]).enumerate() {
            check_simplex(row, LOSS_INPUT_TOL, i)
                .map_err(|_| Error::Validation(format!("{what} row {i} is off the simplex")))?;
        }
    }
    let targets = paws_targets(p_anchor, p_positive, hyper.sharpen_temperature)?;
    loss_with_targets(p_anchor, p_positive, &targets, hyper.epsilon)
}

/// Encoder input for one step: anchors, then positives, then support patches.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub views: Tensor,
    pub pairs: usize,
    pub support: usize,
    pub labels: Tensor,
}

/// Augments both views of every pair (and optionally the support patches)
/// and stacks them with the support set.
pub fn assemble_step_batch(
    pairs: &[ViewPair],
    support: &SupportSet,
    policy: &AugmentPolicy,
    hyper: &PawsHyper,
    seed: u64,
) -> Result<StepBatch> {
    if pairs.is_empty() || support.is_empty() {
        return Err(Error::Config("a step needs at least one pair and one support patch".into()));
    }
    let n = pairs.len();
    let mut patches = Vec::with_capacity(2 * n + support.len());
    for (i, pair) in pairs.iter().enumerate() {
        patches.push(augment(&pair.anchor, policy, derive_seed(seed, 2 * i as u64))?);
    }
    for (i, pair) in pairs.iter().enumerate() {
        patches.push(augment(&pair.positive, policy, derive_seed(seed, 2 * i as u64 + 1))?);
    }
    let support_seed = derive_seed(seed, u64::MAX);
    for (j, p) in support.patches.iter().enumerate() {
        if hyper.augment_support {
            patches.push(augment(p, policy, derive_seed(support_seed, j as u64))?);
        } else {
            patches.push(p.clone());
        }
    }
    Ok(StepBatch {
        views: patches_to_batch(&patches)?,
        pairs: n,
        support: support.len(),
        labels: support.labels.clone(),
    })
}

/// The step loss as a function of encoder parameters. With `frozen` set,
/// the sharpened targets are those constants; otherwise they are recomputed
/// from the current predictions on every evaluation.
pub struct PawsObjective<'a> {
    pub encoder: &'a Encoder,
    pub batch: &'a StepBatch,
    pub hyper: &'a PawsHyper,
    pub frozen: Option<PawsTargets>,
}

struct StepForward {
    z: Tensor,
    tape: EncoderTape,
    snn: SnnForward,
    queries: Tensor,
    support_z: Tensor,
    p_anchor: Tensor,
    p_positive: Tensor,
}

impl<'a> PawsObjective<'a> {
    pub fn new(encoder: &'a Encoder, batch: &'a StepBatch, hyper: &'a PawsHyper) -> Self {
        Self { encoder, batch, hyper, frozen: None }
    }

    /// Freezes the targets at their values under `params`.
    pub fn freeze_targets(&mut self, params: &ParamStore) -> Result<()> {
        let f = self.forward(params)?;
        self.frozen = Some(paws_targets(&f.p_anchor, &f.p_positive, self.hyper.sharpen_temperature)?);
        Ok(())
    }

    fn forward(&self, params: &ParamStore) -> Result<StepForward> {
        let (z, tape) = self.encoder.forward(params, &self.batch.views)?;
        let n = self.batch.pairs;
        let queries = z.slice_rows(0, 2 * n)?;
        let support_z = z.slice_rows(2 * n, 2 * n + self.batch.support)?;
        let snn = snn_forward(&queries, &support_z, &self.batch.labels, self.hyper.tau)?;
        let p_anchor = snn.probs.slice_rows(0, n)?;
        let p_positive = snn.probs.slice_rows(n, 2 * n)?;
        Ok(StepForward { z, tape, snn, queries, support_z, p_anchor, p_positive })
    }

    fn evaluate(&self, f: &StepForward) -> Result<PawsLoss> {
        match &self.frozen {
            Some(t) => loss_with_targets(&f.p_anchor, &f.p_positive, t, self.hyper.epsilon),
            None => paws_loss(&f.p_anchor, &f.p_positive, self.hyper),
        }
    }
}

impl Objective for PawsObjective<'_> {
    fn loss(&mut self, params: &ParamStore) -> Result<f64> {
        let f = self.forward(params)?;
        Ok(self.evaluate(&f)?.loss)
    }

    fn loss_and_grad(&mut self, params: &mut ParamStore) -> Result<f64> {
        let f = self.forward(params)?;
        let out = self.evaluate(&f)?;
        let d_probs = Tensor::concat_rows(&[&out.grad_anchor, &out.grad_positive])?;
        let (d_queries, d_support) = f.snn.backward(&f.queries, &f.support_z, &d_probs)?;
        let dz = Tensor::concat_rows(&[&d_queries, &d_support])?;
        debug_assert_eq!(dz.shape(), f.z.shape());
        self.encoder.backward(params, &f.tape, &dz)?;
        Ok(out.loss)
    }
}

/// One pretraining update: augment, encode views and support, pseudo-label,
/// backpropagate the consistency loss, and apply the optimizer. Returns the
/// loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    encoder: &Encoder,
    params: &mut ParamStore,
    pairs: &[ViewPair],
    support: &SupportSet,
    policy: &AugmentPolicy,
    hyper: &PawsHyper,
    optimizer: &mut OptimizerState,
    seed: u64,
) -> Result<f64> {
    hyper.validate()?;
    let batch = assemble_step_batch(pairs, support, policy, hyper, seed)?;
    params.zero_grads();
    let loss = PawsObjective::new(encoder, &batch, hyper).loss_and_grad(params)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("step loss is {loss}")));
    }
    optimizer.step(params)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::max_relative_error;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn snn_identity_support_example() {
        let p = snn_predict(&t(&[&[1.0, 0.0]]), &Tensor::identity(2), &Tensor::identity(2), 0.25).unwrap();
        let e4 = 4f64.exp();
        assert!((p.data()[0] - e4 / (e4 + 1.0)).abs() < 1e-12);
        assert!((p.data()[0] - 0.98201).abs() < 1e-5 && (p.data()[1] - 0.01799).abs() < 1e-5);
    }

    #[test]
    fn snn_equidistant_query_is_uniform() {
        let support = t(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let p = snn_predict(&t(&[&[1.0, 1.0, 1.0]]), &support, &Tensor::identity(3), 0.25).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn snn_low_temperature_picks_nearest() {
        let support = t(&[&[1.0, 0.2], &[0.3, 1.0], &[-1.0, 0.1]]);
        let p = snn_predict(&t(&[&[0.9, 0.5]]), &support, &Tensor::identity(3), 0.01).unwrap();
        assert!(p.data()[0] > 0.99, "{:?}", p.data());
    }

    #[test]
    fn snn_errors() {
        let zero = Tensor::zeros(&[1, 2]);
        let r = snn_predict(&zero, &Tensor::identity(2), &Tensor::identity(2), 0.25);
        assert!(matches!(r, Err(Error::Numeric(_))));
        let r = snn_predict(&t(&[&[1.0, 0.0]]), &Tensor::identity(2), &Tensor::identity(2), 0.0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn snn_gradients_match_central_differences() {
        let mut rng = rng_from_seed(4);
        let mut rand = |r: usize, c: usize| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let z = rand(3, 4);
        let s = rand(5, 4);
        let w = rand(3, 2);
        let labels = t(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let f = snn_forward(&z, &s, &labels, 0.25).unwrap();
        let (gz, gs) = f.backward(&z, &s, &w).unwrap();
        let dot = |p: &Tensor| p.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
        let ez = max_relative_error(z.data(), gz.data(), 1e-5, |d| {
            dot(&snn_predict(&Tensor::new(vec![3, 4], d.to_vec()).unwrap(), &s, &labels, 0.25).unwrap())
        })
        .unwrap();
        let es = max_relative_error(s.data(), gs.data(), 1e-5, |d| {
            dot(&snn_predict(&z, &Tensor::new(vec![5, 4], d.to_vec()).unwrap(), &labels, 0.25).unwrap())
        })
        .unwrap();
        assert!(ez < 1e-4 && es < 1e-4, "{ez} {es}");
    }

    #[test]
    fn sharpen_examples() {
        let u = sharpen(&[0.25; 4], 0.1).unwrap();
        assert!(u.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = sharpen(&[0.6, 0.4], 0.5).unwrap();
        assert!((s[0] - 0.36 / 0.52).abs() < 1e-12);
        assert!((s[0] - 0.69231).abs() < 1e-5 && (s[1] - 0.30769).abs() < 1e-5);
        let s = sharpen(&[0.6, 0.4], 0.10).unwrap();
        let r = 1.5f64.powi(10);
        assert!((s[0] - r / (r + 1.0)).abs() < 1e-12);
        assert!((s[0] - 0.98295).abs() < 1e-5 && (s[1] - 0.01705).abs() < 1e-5);
        assert!(matches!(sharpen(&[0.5, 0.5], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn mean_prediction_examples() {
        let one = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let m = mean_prediction_of(&[one.clone()], &[one]).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 0.0]);
        let a = ProbVector::new(vec![0.94118, 0.05882]).unwrap();
        let b = ProbVector::new(vec![0.69231, 0.30769]).unwrap();
        let m = mean_prediction_of(&[a], &[b]).unwrap();
        assert!((m.as_slice()[0] - 0.816745).abs() < 1e-5 && (m.as_slice()[1] - 0.183255).abs() < 1e-5);
        let u = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(mean_prediction_of(&[u.clone()], &[u]).unwrap().as_slice(), &[0.5, 0.5]);
        assert!(matches!(mean_prediction_of(&[], &[]), Err(Error::Config(_))));
    }

    /// Direct scalar evaluation of the loss for n = 1, written without any
    /// of the tensor helpers.
    fn scalar_loss(pa: &[f64], pp: &[f64], temp: f64) -> f64 {
        let sharp = |p: &[f64]| {
            let pw: Vec<f64> = p.iter().map(|v| v.powf(1.0 / temp)).collect();
            let s: f64 = pw.iter().sum();
            pw.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let (ta, tp) = (sharp(pa), sharp(pp));
        let ce = |t: &[f64], q: &[f64]| -> f64 { -t.iter().zip(q).map(|(a, b)| a * b.ln()).sum::<f64>() };
        let mean: Vec<f64> = ta.iter().zip(&tp).map(|(a, b)| (a + b) / 2.0).collect();
        let h = -mean.iter().map(|m| m * m.ln()).sum::<f64>();
        0.5 * (ce(&ta, pp) + ce(&tp, pa)) - h
    }

    #[test]
    fn loss_examples() {
        let hyper = PawsHyper { sharpen_temperature: 0.5, ..Default::default() };
        let one = t(&[&[1.0, 0.0]]);
        assert_eq!(paws_loss(&one, &one, &PawsHyper::default()).unwrap().loss, 0.0);
        let u = t(&[&[0.5, 0.5]]);
        assert!(paws_loss(&u, &u, &hyper).unwrap().loss.abs() < 1e-9);
        let l = paws_loss(&t(&[&[0.8, 0.2]]), &t(&[&[0.6, 0.4]]), &hyper).unwrap().loss;
        let oracle = scalar_loss(&[0.8, 0.2], &[0.6, 0.4], 0.5);
        assert!((l - oracle).abs() < 1e-6, "{l} vs {oracle}");
        assert!((l - 0.1159).abs() < 1e-4);
    }

    #[test]
    fn loss_rejects_off_simplex_rows() {
        let r = paws_loss(&t(&[&[0.7, 0.2]]), &t(&[&[0.5, 0.5]]), &PawsHyper::default());
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn loss_gradients_match_frozen_finite_differences() {
        let pa = t(&[&[0.7, 0.2, 0.1], &[0.3, 0.3, 0.4]]);
        let pp = t(&[&[0.5, 0.3, 0.2], &[0.1, 0.6, 0.3]]);
        let hyper = PawsHyper { sharpen_temperature: 0.5, ..Default::default() };
        let out = paws_loss(&pa, &pp, &hyper).unwrap();
        let targets = paws_targets(&pa, &pp, 0.5).unwrap();
        let e = max_relative_error(pa.data(), out.grad_anchor.data(), 1e-6, |d| {
            let a = Tensor::new(vec![2, 3], d.to_vec()).unwrap();
            loss_with_targets(&a, &pp, &targets, hyper.epsilon).unwrap().loss
        })
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn loss_is_symmetric_and_bounded_below() {
        let mut rng = rng_from_seed(11);
        let hyper = PawsHyper::default();
        for k in [2usize, 3, 5] {
            for _ in 0..20 {
                let mut rows = |n: usize| {
                    let rows: Vec<Vec<f64>> = (0..n)
                        .map(|_| {
                            let r: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
                            let s: f64 = r.iter().sum();
                            r.into_iter().map(|v| v / s).collect()
                        })
                        .collect();
                    Tensor::from_rows(&rows).unwrap()
                };
                let (a, b) = (rows(4), rows(4));
                let ab = paws_loss(&a, &b, &hyper).unwrap().loss;
                let ba = paws_loss(&b, &a, &hyper).unwrap().loss;
                assert!((ab - ba).abs() < 1e-12);
                assert!(ab >= -(k as f64).ln() - 1e-9, "{ab} below -log {k}");
            }
        }
    }

    #[test]
    fn snn_is_invariant_to_embedding_scale() {
        let z = t(&[&[0.3, -1.2, 0.5]]);
        let s = t(&[&[1.0, 0.0, 0.2], &[0.1, 0.9, -0.4], &[-0.5, 0.5, 0.5]]);
        let labels = Tensor::identity(3);
        let base = snn_predict(&z, &s, &labels, 0.25).unwrap();
        for c in [0.01, 3.0, 250.0] {
            let mut zc = z.clone();
            zc.scale(c);
            let mut sc = s.clone();
            sc.scale(1.0 / c);
            let p = snn_predict(&zc, &sc, &labels, 0.25).unwrap();
            for (x, y) in p.data().iter().zip(base.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    mod step {
        use super::*;
        use crate::autodiff::grad_check;
        use crate::data::{build_splits, generate_synthetic, sample_view_pairs, SyntheticSpec};
        use crate::encoder::{build_encoder, EncoderConfig};
        use crate::optim::OptimizerConfig;

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

        fn fixture() -> (Encoder, ParamStore, Vec<ViewPair>, SupportSet) {
            let spec = SyntheticSpec {
                rows: 16,
                cols: 16,
                bands: 8,
                classes: 2,
                noise_sigma: 0.05,
                region_seeds: 4,
                seed: 3,
            };
            let cube = generate_synthetic(&spec).unwrap();
            let (support, _) = build_splits(&cube, 2, 5, 1).unwrap();
            let pairs = sample_view_pairs(&cube, 5, 3, 2).unwrap();
            let cfg = small_cfg();
            let params = build_encoder(&cfg, 9).unwrap();
            (Encoder::new(cfg).unwrap(), params, pairs, support)
        }

        #[test]
        fn frozen_target_objective_matches_finite_differences() {
            let cfg = small_cfg();
            let encoder = Encoder::new(cfg.clone()).unwrap();
            let mut params = build_encoder(&cfg, 9).unwrap();
            let (n, ns) = (3, 4);
            let mut rng = rng_from_seed(21);
            let len = (2 * n + ns) * cfg.patch_size * cfg.patch_size * cfg.bands;
            let views = Tensor::new(
                vec![2 * n + ns, cfg.patch_size, cfg.patch_size, cfg.bands],
                (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let labels = t(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]]);
            let batch = StepBatch { views, pairs: n, support: ns, labels };
            let hyper = PawsHyper { tau: 0.05, sharpen_temperature: 0.5, ..Default::default() };
            let mut obj = PawsObjective::new(&encoder, &batch, &hyper);
            obj.freeze_targets(&params).unwrap();
            let err = grad_check(&mut obj, &mut params, 1e-5).unwrap();
            assert!(err < 1e-4, "max relative error {err}");
        }

        #[test]
        fn zero_learning_rate_leaves_parameters_unchanged() {
            let (encoder, mut params, pairs, support) = fixture();
            let before = params.clone();
            let cfg = OptimizerConfig { lr: 0.0, ..OptimizerConfig::lars() };
            let mut opt = OptimizerState::new(cfg, &params).unwrap();
            let hyper = PawsHyper::default();
            let policy = AugmentPolicy::default();
            let loss = pretrain_step(&encoder, &mut params, &pairs, &support, &policy, &hyper, &mut opt, 7)
                .unwrap();
            assert!(loss.is_finite());
            assert!(params.values_bit_identical(&before));
        }

        #[test]
        fn steps_are_deterministic() {
            let run = || {
                let (encoder, mut params, pairs, support) = fixture();
                let mut opt = OptimizerState::new(OptimizerConfig::lars(), &params).unwrap();
                let policy = AugmentPolicy::default();
                let hyper = PawsHyper::default();
                let losses: Vec<f64> = (0..3)
                    .map(|s| {
                        pretrain_step(&encoder, &mut params, &pairs, &support, &policy, &hyper, &mut opt, s)
                            .unwrap()
                    })
                    .collect();
                (losses, params)
            };
            let (la, pa) = run();
            let (lb, pb) = run();
            assert_eq!(la, lb);
            assert!(pa.values_bit_identical(&pb));
        }
    }
}

//! Evaluation protocols: linear probe on frozen features, full fine-tuning,
//! supervised training from scratch, and soft nearest neighbour
//! classification against a support set.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::autodiff::{dense, dense_backward, softmax_rows, ParamStore, Tensor};
use crate::data::{Patch, SupportSet};
use crate::encoder::{build_encoder, patches_to_batch, Encoder};
use crate::error::{Error, Result};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::paws::snn_predict;
use crate::rng::{derive_seed, rng_from_seed};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";
const EMBED_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvalMode {
    Linear,
    Finetune,
    Snn,
    Supervised,
}

impl EvalMode {
    pub const ALL: [EvalMode; 4] = [EvalMode::Linear, EvalMode::Finetune, EvalMode::Snn, EvalMode::Supervised];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Linear => "linear",
            EvalMode::Finetune => "finetune",
            EvalMode::Snn => "snn",
            EvalMode::Supervised => "supervised",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown evaluation mode {s:?} (linear|finetune|snn|supervised)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub overall_accuracy: f64,
    pub correct: usize,
    pub sample_count: usize,
    /// Accuracy on each class `1..=K`; `NaN`-free, 0 for classes absent from
    /// the evaluation set.
    pub per_class_accuracy: Vec<f64>,
    pub per_class_count: Vec<usize>,
    pub config_digest: String,
}

impl EvalReport {
    /// Builds a report from 0-based predicted and true class indices.
    pub fn from_predictions(
        mode: EvalMode,
        predicted: &[usize],
        truth: &[usize],
        class_count: usize,
        config_digest: impl Into<String>,
    ) -> Result<Self> {
        let overall = overall_accuracy(predicted, truth)?;
        let mut hits = vec![0usize; class_count];
        let mut counts = vec![0usize; class_count];
        for (&p, &t) in predicted.iter().zip(truth) {
            if t >= class_count {
                return Err(Error::Data(format!("class index {t} outside 0..{class_count}")));
            }
            counts[t] += 1;
            hits[t] += usize::from(p == t);
        }
        Ok(Self {
            mode,
            overall_accuracy: overall,
            correct: hits.iter().sum(),
            sample_count: truth.len(),
            per_class_accuracy: hits
                .iter()
                .zip(&counts)
                .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
                .collect(),
            per_class_count: counts,
            config_digest: config_digest.into(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "mode: {}\noverall_accuracy: {}\ncorrect: {}\nsample_count: {}\n",
            self.mode, self.overall_accuracy, self.correct, self.sample_count
        );
        for (i, (a, c)) in self.per_class_accuracy.iter().zip(&self.per_class_count).enumerate() {
            out.push_str(&format!("class_{}_accuracy: {a}\nclass_{}_count: {c}\n", i + 1, i + 1));
        }
        out.push_str(&format!("config_digest: {}\n", self.config_digest));
        out
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["mode".to_string(), "overall_accuracy".into(), "correct".into(), "sample_count".into()];
        cols.extend((1..=self.per_class_accuracy.len()).map(|k| format!("class_{k}_accuracy")));
        cols.push("config_digest".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.mode.to_string(),
            self.overall_accuracy.to_string(),
            self.correct.to_string(),
            self.sample_count.to_string(),
        ];
        cols.extend(self.per_class_accuracy.iter().map(f64::to_string));
        cols.push(self.config_digest.clone());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row())
    }

    /// Writes `<stem>.txt` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn overall_accuracy<T: PartialEq>(predicted: &[T], truth: &[T]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::Data(format!(
            "{} predictions for {} ground-truth labels",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Settings for the supervised protocols.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            optimizer: OptimizerConfig::sgd(),
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("downstream epochs and batch_size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// 0-based class indices of labelled patches, checked against `1..=K`.
pub fn class_indices(patches: &[Patch], class_count: usize) -> Result<Vec<usize>> {
    patches
        .iter()
        .map(|p| match p.label {
            Some(l) if l >= 1 && (l as usize) <= class_count => Ok(l as usize - 1),
            Some(l) => Err(Error::Data(format!("label {l} at {:?} outside 1..={class_count}", p.center))),
            None => Err(Error::Data(format!("patch at {:?} is unlabeled", p.center))),
        })
        .collect()
}

/// A freshly initialized `d -> K` classification head.
pub fn init_head(dim: usize, class_count: usize, seed: u64) -> Result<ParamStore> {
    use rand::Rng as _;
    if dim == 0 || class_count == 0 {
        return Err(Error::Config("head dimensions must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let bound = (1.0 / dim as f64).sqrt();
    let w = (0..dim * class_count).map(|_| rng.random_range(-bound..bound)).collect();
    let mut head = ParamStore::new();
    head.insert(HEAD_WEIGHT, Tensor::new(vec![class_count, dim], w)?, false)?;
    head.insert(HEAD_BIAS, Tensor::zeros(&[class_count]), false)?;
    Ok(head)
}

/// Mean softmax cross-entropy and its gradient with respect to `logits`.
fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let probs = softmax_rows(logits, 1.0)?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        loss -= probs.data()[i * k + t].max(f64::MIN_POSITIVE).ln();
        grad.data_mut()[i * k + t] -= 1.0;
    }
    grad.scale(1.0 / b as f64);
    Ok((loss / b as f64, grad))
}

fn head_logits(head: &ParamStore, features: &Tensor) -> Result<Tensor> {
    dense(features, head.value(HEAD_WEIGHT)?, head.value(HEAD_BIAS)?)
}

fn shuffled_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, epoch as u64)));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), w], data)
}

/// Trains a classification head on frozen encoder features. Returns the head
/// and its accuracy on the training patches.
pub fn train_linear_probe(
    encoder: &Encoder,
    params: &ParamStore,
    train: &[Patch],
    class_count: usize,
    cfg: &DownstreamConfig,
    seed: u64,
) -> Result<(ParamStore, EvalReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("linear probe needs training patches".into()));
    }
    let targets = class_indices(train, class_count)?;
    let features = encoder.encode_patches(params, train, EMBED_CHUNK)?;
    let mut head = init_head(encoder.config().embedding_dim, class_count, derive_seed(seed, 0))?;
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), &head)?;
    for epoch in 0..cfg.epochs {
        for idx in shuffled_batches(train.len(), cfg.batch_size, derive_seed(seed, 1), epoch) {
            let x = gather_rows(&features, &idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            let (_, g) = cross_entropy(&head_logits(&head, &x)?, &y)?;
            let (_, gw, gb) = dense_backward(&x, head.value(HEAD_WEIGHT)?, &g)?;
            head.zero_grads();
            head.accumulate(HEAD_WEIGHT, &gw)?;
            head.accumulate(HEAD_BIAS, &gb)?;
            opt.step(&mut head)?;
        }
    }
    let predicted = argmax_rows(&head_logits(&head, &features)?);
    let report = EvalReport::from_predictions(EvalMode::Linear, &predicted, &targets, class_count, "")?;
    Ok((head, report))
}

/// Trains encoder and a new head jointly. The returned store holds every
/// encoder parameter plus the head.
pub fn fine_tune(
    encoder: &Encoder,
    params: &ParamStore,
    train: &[Patch],
    class_count: usize,
    cfg: &DownstreamConfig,
    seed: u64,
) -> Result<(ParamStore, EvalReport)> {
    fine_tune_as(EvalMode::Finetune, encoder, params, train, class_count, cfg, seed)
}

/// Fine-tuning from a freshly initialized encoder.
pub fn train_supervised(
    encoder: &Encoder,
    train: &[Patch],
    class_count: usize,
    cfg: &DownstreamConfig,
    seed: u64,
) -> Result<(ParamStore, EvalReport)> {
    let params = build_encoder(encoder.config(), derive_seed(seed, 7))?;
    fine_tune_as(EvalMode::Supervised, encoder, &params, train, class_count, cfg, seed)
}

fn fine_tune_as(
    mode: EvalMode,
    encoder: &Encoder,
    params: &ParamStore,
    train: &[Patch],
    class_count: usize,
    cfg: &DownstreamConfig,
    seed: u64,
) -> Result<(ParamStore, EvalReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("fine-tuning needs training patches".into()));
    }
    encoder.check_params(params)?;
    let targets = class_indices(train, class_count)?;
    let mut model = params.clone();
    model.extend(init_head(encoder.config().embedding_dim, class_count, derive_seed(seed, 0))?)?;
    let mut opt = OptimizerState::new(cfg.optimizer.clone(), &model)?;
    for epoch in 0..cfg.epochs {
        for idx in shuffled_batches(train.len(), cfg.batch_size, derive_seed(seed, 1), epoch) {
            let batch: Vec<&Patch> = idx.iter().map(|&i| &train[i]).collect();
            let y: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            let (z, tape) = encoder.forward(&model, &patches_to_batch(batch)?)?;
            let (loss, g) = cross_entropy(&head_logits(&model, &z)?, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("fine-tuning loss is {loss} in epoch {epoch}")));
            }
            let (gz, gw, gb) = dense_backward(&z, model.value(HEAD_WEIGHT)?, &g)?;
            model.zero_grads();
            model.accumulate(HEAD_WEIGHT, &gw)?;
            model.accumulate(HEAD_BIAS, &gb)?;
            encoder.backward(&mut model, &tape, &gz)?;
            opt.step(&mut model)?;
        }
    }
    let predicted = predict_with_head(encoder, &model, &model, train)?;
    let report = EvalReport::from_predictions(mode, &predicted, &targets, class_count, "")?;
    Ok((model, report))
}

/// Class indices predicted by `head` on features from `params`.
pub fn predict_with_head(
    encoder: &Encoder,
    params: &ParamStore,
    head: &ParamStore,
    patches: &[Patch],
) -> Result<Vec<usize>> {
    let features = encoder.encode_patches(params, patches, EMBED_CHUNK)?;
    Ok(argmax_rows(&head_logits(head, &features)?))
}

/// Accuracy of a trained head on labelled `test` patches.
pub fn evaluate_head(
    mode: EvalMode,
    encoder: &Encoder,
    params: &ParamStore,
    head: &ParamStore,
    test: &[Patch],
    class_count: usize,
    config_digest: &str,
) -> Result<EvalReport> {
    let truth = class_indices(test, class_count)?;
    let predicted = predict_with_head(encoder, params, head, test)?;
    EvalReport::from_predictions(mode, &predicted, &truth, class_count, config_digest)
}

/// Soft nearest neighbour predictions (0-based classes) for `test`.
pub fn snn_classify(
    encoder: &Encoder,
    params: &ParamStore,
    support: &SupportSet,
    test: &[Patch],
    tau: f64,
) -> Result<Vec<usize>> {
    if support.is_empty() || test.is_empty() {
        return Err(Error::Data("snn evaluation needs support and test patches".into()));
    }
    let support_z = encoder.encode_patches(params, &support.patches, EMBED_CHUNK)?;
    let mut predicted = Vec::with_capacity(test.len());
    for chunk in test.chunks(EMBED_CHUNK) {
        let z = encoder.encode(params, &patches_to_batch(chunk)?)?;
        predicted.extend(argmax_rows(&snn_predict(&z, &support_z, &support.labels, tau)?));
    }
    Ok(predicted)
}

pub fn snn_evaluate(
    encoder: &Encoder,
    params: &ParamStore,
    support: &SupportSet,
    test: &[Patch],
    tau: f64,
    config_digest: &str,
) -> Result<EvalReport> {
    let truth = class_indices(test, support.class_count)?;
    let predicted = snn_classify(encoder, params, support, test, tau)?;
    EvalReport::from_predictions(EvalMode::Snn, &predicted, &truth, support.class_count, config_digest)
}

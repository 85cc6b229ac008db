//! Post-hoc calibration and calibration metrics.
//!
//! [`calibrate`] freezes the extractor and the class weights and re-fits only
//! the alpha/beta heads by minimising NLL. Because the heads act through one
//! positive multiplier shared by all classes, predictions and every
//! feature-derived score are untouched.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{GeodinError, Result};
use crate::head::{HeadParams, HeadVariant};
use crate::linalg::argmax;
use crate::scores::{log_sum_exp, softmax};
use crate::trainer::{cosine_lr, extract_features, Model, Sgd};

pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            epochs: 20,
            batch_size: 64,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            folds: 5,
            seed: 0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(GeodinError::Config("calibrate.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(GeodinError::Config("calibrate.batch_size must be at least 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(GeodinError::Config("calibrate.lr0 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(GeodinError::Config("calibrate.momentum must be in [0, 1)".into()));
        }
        if self.folds < 2 {
            return Err(GeodinError::Config("calibrate.folds must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

fn check_metric_inputs(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<()> {
    if confidences.is_empty() {
        return Err(GeodinError::Domain(
            "calibration metrics need at least one sample".into(),
        ));
    }
    if confidences.len() != correct.len() {
        return Err(GeodinError::Shape(format!(
            "{} confidences but {} correctness flags",
            confidences.len(),
            correct.len()
        )));
    }
    if n_bins == 0 {
        return Err(GeodinError::Config("n_bins must be at least 1".into()));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(GeodinError::Domain(format!("confidence {c} outside [0, 1]")));
    }
    Ok(())
}

/// Equal-width bin of `c`: `min(⌊c · n_bins⌋, n_bins − 1)`.
pub fn bin_index(c: f64, n_bins: usize) -> usize {
    ((c * n_bins as f64).floor() as usize).min(n_bins - 1)
}

pub fn reliability_bins(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    check_metric_inputs(confidences, correct, n_bins)?;
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, n_bins);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += ok as usize;
    }
    Ok((0..n_bins)
        .map(|b| {
            let n = count[b];
            let (mean_confidence, accuracy) = if n == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[b] / n as f64, hits[b] as f64 / n as f64)
            };
            ReliabilityBin {
                count: n,
                mean_confidence,
                accuracy,
            }
        })
        .collect())
}

/// `Σ (|B|/N) · |acc(B) − conf(B)|` over equal-width bins.
pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    let bins = reliability_bins(confidences, correct, n_bins)?;
    let n = confidences.len() as f64;
    Ok(bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * (b.accuracy - b.mean_confidence).abs())
        .sum())
}

/// Mean of `−ln P[label]`, with probabilities clamped at `1e-300`.
pub fn nll(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() {
        return Err(GeodinError::Domain("nll of an empty batch".into()));
    }
    if probs.len() != labels.len() {
        return Err(GeodinError::Shape(format!(
            "{} probability vectors but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        let py = *p.get(y).ok_or(GeodinError::Index { index: y, len: p.len() })?;
        total -= py.max(1e-300).ln();
    }
    Ok(total / probs.len() as f64)
}

fn scaled_nll(logits: &[Vec<f64>], labels: &[usize], inv_t: f64) -> f64 {
    let mut total = 0.0;
    let mut scaled = Vec::new();
    for (l, &y) in logits.iter().zip(labels) {
        scaled.clear();
        scaled.extend(l.iter().map(|v| v * inv_t));
        total += log_sum_exp(&scaled) - scaled[y];
    }
    total / logits.len() as f64
}

/// Temperature minimising the NLL of `softmax(l / T)`, by golden-section
/// search over `ln T ∈ [−3, 3]`.
pub fn temperature_scale(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(GeodinError::Domain(
            "temperature scaling needs a nonempty validation set".into(),
        ));
    }
    if logits.len() != labels.len() {
        return Err(GeodinError::Shape("logit and label counts differ".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits[0].len()) {
        return Err(GeodinError::Index {
            index: y,
            len: logits[0].len(),
        });
    }
    let objective = |log_t: f64| scaled_nll(logits, labels, (-log_t).exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (-3.0f64, 3.0f64);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = objective(x1);
    let mut f2 = objective(x2);
    while hi - lo > 1e-9 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = objective(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = objective(x2);
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
}

/// Accuracy, 15-bin ECE and NLL of the model's predictive distribution.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<SplitMetrics> {
    if data.is_empty() {
        return Err(GeodinError::Domain("cannot evaluate an empty split".into()));
    }
    let mut probs = Vec::with_capacity(data.len());
    let mut conf = Vec::with_capacity(data.len());
    let mut correct = Vec::with_capacity(data.len());
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let p = softmax(&model.logits(x)?);
        let k = argmax(&p);
        conf.push(p[k]);
        correct.push(k == y);
        probs.push(p);
    }
    Ok(SplitMetrics {
        accuracy: correct.iter().filter(|c| **c).count() as f64 / data.len() as f64,
        ece: ece(&conf, &correct, DEFAULT_BINS)?,
        nll: nll(&probs, &data.labels)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitComparison {
    pub split: String,
    pub before: SplitMetrics,
    pub after: SplitMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// First entry is always the tuning split.
    pub splits: Vec<SplitComparison>,
    /// Epoch whose parameters were kept; 0 means the input parameters.
    pub best_epoch: usize,
    /// Tuning NLL before training (index 0) and after each epoch.
    pub tuning_nll: Vec<f64>,
}

struct Tuning<'a> {
    features: Vec<Vec<f64>>,
    labels: &'a [usize],
}

impl Tuning<'_> {
    fn mean_nll(&self, head: &HeadParams) -> f64 {
        let mut total = 0.0;
        for (f, &y) in self.features.iter().zip(self.labels) {
            let t = head.forward_slice(f);
            total += log_sum_exp(&t.logits) - t.logits[y];
        }
        total / self.features.len() as f64
    }
}

fn head_groups(head: &HeadParams) -> Vec<&[f64]> {
    vec![
        &head.alpha_weights,
        std::slice::from_ref(&head.alpha_bias),
        &head.beta_weights,
        std::slice::from_ref(&head.beta_bias),
    ]
}

fn head_groups_mut(head: &mut HeadParams) -> Vec<&mut [f64]> {
    vec![
        &mut head.alpha_weights,
        std::slice::from_mut(&mut head.alpha_bias),
        &mut head.beta_weights,
        std::slice::from_mut(&mut head.beta_bias),
    ]
}

/// Re-fits the alpha/beta heads on `tuning` by NLL minimisation and reports
/// accuracy/ECE/NLL before and after on the tuning split and on each of
/// `eval_splits`. The parameters of the epoch with the lowest tuning NLL are
/// kept, including the untouched input parameters.
pub fn calibrate(
    model: &Model,
    tuning: &Dataset,
    eval_splits: &[(&str, &Dataset)],
    config: &CalibConfig,
) -> Result<(Model, CalibrationReport)> {
    config.validate()?;
    if model.variant() == HeadVariant::Vanilla {
        return Err(GeodinError::UnsupportedVariant {
            variant: model.variant().to_string(),
            hint: "a vanilla head has no alpha/beta parameters; use temperature scaling instead".into(),
        });
    }
    if tuning.is_empty() {
        return Err(GeodinError::Domain("calibration set is empty".into()));
    }
    if let Some(&y) = tuning.labels.iter().find(|&&y| y >= model.n_classes()) {
        return Err(GeodinError::Index {
            index: y,
            len: model.n_classes(),
        });
    }

    let set = Tuning {
        features: extract_features(model, &tuning.inputs)?
            .into_iter()
            .map(|f| f.into_inner())
            .collect(),
        labels: &tuning.labels,
    };

    let mut head = model.head.clone();
    let mut best = head.clone();
    let initial_nll = set.mean_nll(&head);
    let mut best_nll = initial_nll;
    let mut best_epoch = 0;
    let mut history = vec![initial_nll];

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new(&head_groups(&head), config.momentum, config.weight_decay, usize::MAX);
    let mut order: Vec<usize> = (0..tuning.len()).collect();
    let total_steps = config.epochs * tuning.len().div_ceil(config.batch_size);
    let mut step = 0;
    let d = head.feature_dim();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let lr = cosine_lr(step, total_steps, config.lr0)?;
            let mut grads = vec![vec![0.0; d], vec![0.0], vec![0.0; d], vec![0.0]];
            for &i in batch {
                let t = head.forward_slice(&set.features[i]);
                let mut g = softmax(&t.logits);
                g[set.labels[i]] -= 1.0;
                let hg = head.backward_unchecked(&t, &g);
                for (a, b) in grads[0].iter_mut().zip(&hg.alpha_weights) {
                    *a += b;
                }
                grads[1][0] += hg.alpha_bias;
                for (a, b) in grads[2].iter_mut().zip(&hg.beta_weights) {
                    *a += b;
                }
                grads[3][0] += hg.beta_bias;
            }
            sgd.step(head_groups_mut(&mut head), &grads, batch.len(), lr);
            step += 1;
        }
        let epoch_nll = set.mean_nll(&head);
        if !epoch_nll.is_finite() {
            return Err(GeodinError::Numeric(format!(
                "calibration diverged in epoch {epoch} (lr0 {})",
                config.lr0
            )));
        }
        history.push(epoch_nll);
        if epoch_nll < best_nll {
            best_nll = epoch_nll;
            best_epoch = epoch;
            best = head.clone();
        }
    }

    let mut calibrated = model.clone();
    calibrated.head = best;
    calibrated.meta.provenance = format!(
        "{}; calibrated: epochs={} lr0={} n={} best_epoch={}",
        model.meta.provenance,
        config.epochs,
        config.lr0,
        tuning.len(),
        best_epoch
    );

    let mut splits = Vec::with_capacity(eval_splits.len() + 1);
    for (name, data) in std::iter::once(&("tuning", tuning)).chain(eval_splits) {
        splits.push(SplitComparison {
            split: name.to_string(),
            before: evaluate(model, data)?,
            after: evaluate(&calibrated, data)?,
        });
    }
    Ok((
        calibrated,
        CalibrationReport {
            splits,
            best_epoch,
            tuning_nll: history,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationReport {
    /// Held-out fold metrics `(before, after)`.
    pub folds: Vec<(SplitMetrics, SplitMetrics)>,
    pub ece_before: MeanStd,
    pub ece_after: MeanStd,
    pub nll_before: MeanStd,
    pub nll_after: MeanStd,
    pub accuracy: MeanStd,
}

/// K-fold calibration: tune on `k − 1` folds, evaluate on the held-out one.
/// Fold assignment is a seeded permutation.
pub fn calibrate_cv(model: &Model, data: &Dataset, config: &CalibConfig) -> Result<CrossValidationReport> {
    config.validate()?;
    if data.len() < config.folds {
        return Err(GeodinError::Domain(format!(
            "{} samples cannot fill {} folds",
            data.len(),
            config.folds
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f01d));
    let mut folds = Vec::with_capacity(config.folds);
    for k in 0..config.folds {
        let held: Vec<usize> = order.iter().copied().skip(k).step_by(config.folds).collect();
        let rest: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(pos, _)| pos % config.folds != k)
            .map(|(_, &i)| i)
            .collect();
        let held_out = data.subset(&held);
        let (calibrated, _) = calibrate(model, &data.subset(&rest), &[], config)?;
        folds.push((evaluate(model, &held_out)?, evaluate(&calibrated, &held_out)?));
    }
    let col = |f: &dyn Fn(&(SplitMetrics, SplitMetrics)) -> f64| -> MeanStd {
        MeanStd::of(&folds.iter().map(f).collect::<Vec<_>>())
    };
    Ok(CrossValidationReport {
        ece_before: col(&|p| p.0.ece),
        ece_after: col(&|p| p.1.ece),
        nll_before: col(&|p| p.0.nll),
        nll_after: col(&|p| p.1.nll),
        accuracy: col(&|p| p.1.accuracy),
        folds,
    })
}

//! Desk-scale training of a rectified MLP feature extractor with the
//! decomposed head, using SGD with momentum, weight decay and cosine
//! annealing.
//!
//! Everything is sequential and driven by one seeded ChaCha stream, so the
//! same `(TrainConfig, Dataset)` pair always produces the same model bytes.
//! Batch gradients are summed in sample order before averaging.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{GeodinError, Result};
use crate::head::{softmax_cross_entropy, HeadForwardTrace, HeadParams, HeadVariant};
use crate::linalg::{argmax, norm, Matrix};
use crate::scores::FeatureVector;
use crate::EPS_NORM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

impl Layer {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weights.matvec(x);
        for (v, b) in y.iter_mut().zip(&self.biases) {
            *v = (*v + b).max(0.0);
        }
        y
    }
}

/// Stack of fully connected layers, every one followed by a rectifier, so
/// the final output is a nonnegative feature. With `normalize_input` the
/// input is first scaled to unit L2 norm (zero stays zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorParams {
    pub layers: Vec<Layer>,
    pub normalize_input: bool,
}

impl ExtractorParams {
    /// He-uniform weights, zero biases.
    pub fn init<R: Rng>(input_dim: usize, arch: &ArchConfig, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(arch.hidden.len() + 1);
        let mut fan_in = input_dim;
        for &width in arch.hidden.iter().chain(std::iter::once(&arch.feature_dim)) {
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..width * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
            layers.push(Layer {
                weights: Matrix::from_vec(width, fan_in, data).expect("sized above"),
                biases: vec![0.0; width],
            });
            fan_in = width;
        }
        ExtractorParams {
            layers,
            normalize_input: arch.normalize_input,
        }
    }

    pub fn zeros(input_dim: usize, arch: &ArchConfig) -> Self {
        let mut layers = Vec::new();
        let mut fan_in = input_dim;
        for &width in arch.hidden.iter().chain(std::iter::once(&arch.feature_dim)) {
            layers.push(Layer {
                weights: Matrix::zeros(width, fan_in),
                biases: vec![0.0; width],
            });
            fan_in = width;
        }
        ExtractorParams {
            layers,
            normalize_input: arch.normalize_input,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weights.rows()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weights.rows())
            .collect()
    }

    pub fn prepare_input(&self, x: &[f64]) -> Vec<f64> {
        if !self.normalize_input {
            return x.to_vec();
        }
        let n = norm(x);
        if n < EPS_NORM {
            x.to_vec()
        } else {
            x.iter().map(|v| v / n).collect()
        }
    }

    /// All post-activation outputs, prepared input first.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(self.prepare_input(x));
        for layer in &self.layers {
            let next = layer.forward(acts.last().expect("nonempty"));
            acts.push(next);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.layers
            .iter()
            .fold(self.prepare_input(x), |h, layer| layer.forward(&h))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub normalize_input: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: vec![64, 64],
            feature_dim: 16,
            normalize_input: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Whether weight decay also applies to the alpha and beta heads.
    pub decay_heads: bool,
    pub seed: u64,
    pub variant: HeadVariant,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_heads: true,
            seed: 0,
            variant: HeadVariant::AlphaBeta,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 200 epochs, batch 128, lr 0.1.
    pub fn full_schedule() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            lr0: 0.1,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(GeodinError::Config("train.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(GeodinError::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(GeodinError::Config(format!(
                "train.lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(GeodinError::Config(format!(
                "train.momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(GeodinError::Config("train.weight_decay must be nonnegative".into()));
        }
        if self.arch.feature_dim == 0 || self.arch.hidden.contains(&0) {
            return Err(GeodinError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub trained: bool,
    /// Free-form description of how the parameters were produced.
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub extractor: ExtractorParams,
    pub head: HeadParams,
    pub meta: ModelMeta,
}

/// Everything a single-sample forward pass produces.
pub struct ForwardPass {
    pub activations: Vec<Vec<f64>>,
    pub head: HeadForwardTrace,
}

impl Model {
    pub fn init(input_dim: usize, n_classes: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if n_classes < 2 || input_dim == 0 {
            return Err(GeodinError::Config(format!(
                "need at least 2 classes and a nonempty input, got M={n_classes} D_in={input_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self::init_with(input_dim, n_classes, config, &mut rng))
    }

    fn init_with<R: Rng>(input_dim: usize, n_classes: usize, config: &TrainConfig, rng: &mut R) -> Self {
        let extractor = ExtractorParams::init(input_dim, &config.arch, rng);
        let head = HeadParams::init(config.arch.feature_dim, n_classes, config.variant, rng);
        Model {
            extractor,
            head,
            meta: ModelMeta {
                seed: config.seed,
                trained: false,
                provenance: String::new(),
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    pub fn variant(&self) -> HeadVariant {
        self.head.variant
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(GeodinError::Shape(format!(
                "input has dimension {} but model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn feature(&self, x: &[f64]) -> Result<FeatureVector> {
        self.check_input(x)?;
        let f = self.extractor.forward(x);
        if f.iter().any(|v| !v.is_finite()) {
            return Err(GeodinError::Numeric("extractor produced a non-finite feature".into()));
        }
        Ok(FeatureVector::from_rectified(f))
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass> {
        self.check_input(x)?;
        let activations = self.extractor.activations(x);
        let head = self.head.forward_slice(activations.last().expect("nonempty"));
        Ok(ForwardPass { activations, head })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.head.logits)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(GeodinError::Domain("accuracy of an empty dataset".into()));
        }
        let mut correct = 0usize;
        for (x, &y) in data.inputs.iter().zip(&data.labels) {
            if self.predict(x)? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Parameter groups in a fixed order shared by [`Model::group_names`],
    /// gradients and the checkpoint layout.
    pub fn param_groups(&self) -> Vec<&[f64]> {
        let mut groups: Vec<&[f64]> = Vec::new();
        for layer in &self.extractor.layers {
            groups.push(layer.weights.as_slice());
            groups.push(&layer.biases);
        }
        groups.push(self.head.w.as_slice());
        groups.push(&self.head.alpha_weights);
        groups.push(std::slice::from_ref(&self.head.alpha_bias));
        groups.push(&self.head.beta_weights);
        groups.push(std::slice::from_ref(&self.head.beta_bias));
        groups
    }

    pub fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut groups: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.extractor.layers {
            groups.push(layer.weights.as_mut_slice());
            groups.push(&mut layer.biases);
        }
        let head = &mut self.head;
        groups.push(head.w.as_mut_slice());
        groups.push(&mut head.alpha_weights);
        groups.push(std::slice::from_mut(&mut head.alpha_bias));
        groups.push(&mut head.beta_weights);
        groups.push(std::slice::from_mut(&mut head.beta_bias));
        groups
    }

    pub fn group_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.extractor.layers.len() {
            names.push(format!("layer{i}.weights"));
            names.push(format!("layer{i}.biases"));
        }
        names.extend(
            [
                "head.w",
                "head.alpha_weights",
                "head.alpha_bias",
                "head.beta_weights",
                "head.beta_bias",
            ]
            .map(String::from),
        );
        names
    }

    /// Number of trailing groups that belong to the alpha/beta heads.
    pub(crate) const HEAD_GROUPS: usize = 4;

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.param_groups().iter().map(|g| vec![0.0; g.len()]).collect()
    }

    /// Cross-entropy loss of one sample; adds `d loss / d θ` into `grads`.
    pub fn accumulate_gradient(&self, x: &[f64], label: usize, grads: &mut [Vec<f64>]) -> Result<(f64, bool)> {
        let pass = self.forward(x)?;
        let (loss, grad_logits) = softmax_cross_entropy(&pass.head.logits, label)?;
        let correct = argmax(&pass.head.logits) == label;
        let hg = self.head.backward_unchecked(&pass.head, &grad_logits);

        let n_layers = self.extractor.layers.len();
        let h = 2 * n_layers;
        add_into(&mut grads[h], hg.w.as_slice());
        add_into(&mut grads[h + 1], &hg.alpha_weights);
        grads[h + 2][0] += hg.alpha_bias;
        add_into(&mut grads[h + 3], &hg.beta_weights);
        grads[h + 4][0] += hg.beta_bias;

        // back through the rectified layers
        let mut upstream = hg.feature;
        for li in (0..n_layers).rev() {
            let out = &pass.activations[li + 1];
            let input = &pass.activations[li];
            let delta: Vec<f64> = upstream
                .iter()
                .zip(out)
                .map(|(g, &a)| if a > 0.0 { *g } else { 0.0 })
                .collect();
            let layer = &self.extractor.layers[li];
            let cols = layer.weights.cols();
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                add_scaled(&mut grads[2 * li][r * cols..(r + 1) * cols], d, input);
            }
            add_into(&mut grads[2 * li + 1], &delta);
            if li > 0 {
                upstream = layer.weights.matvec_t(&delta);
            }
        }
        Ok((loss, correct))
    }

    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        let logits = self.logits(x)?;
        Ok(softmax_cross_entropy(&logits, label)?.0)
    }

    pub fn loss_gradient(&self, x: &[f64], label: usize) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut grads = self.zero_grads();
        let (loss, _) = self.accumulate_gradient(x, label, &mut grads)?;
        Ok((loss, grads))
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn add_scaled(acc: &mut [f64], s: f64, v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += s * b;
    }
}

/// `0.5 · lr0 · (1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(GeodinError::Config("cosine schedule needs total_steps >= 1".into()));
    }
    if step > total_steps {
        return Err(GeodinError::Config(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    let t = step as f64 / total_steps as f64;
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub history: Vec<EpochStats>,
}

/// SGD state: one momentum buffer per parameter group.
pub(crate) struct Sgd {
    momentum: f64,
    weight_decay: f64,
    /// Groups with index at or beyond this skip weight decay.
    decay_limit: usize,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub(crate) fn new(groups: &[&[f64]], momentum: f64, weight_decay: f64, decay_limit: usize) -> Self {
        Sgd {
            momentum,
            weight_decay,
            decay_limit,
            velocity: groups.iter().map(|g| vec![0.0; g.len()]).collect(),
        }
    }

    /// `v ← μ v + (g + λ θ)`, `θ ← θ − lr · v`; `grads` is the batch sum,
    /// scaled by `1/batch` here.
    pub(crate) fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>], batch: usize, lr: f64) {
        let scale = 1.0 / batch as f64;
        for (gi, ((p, g), v)) in params.into_iter().zip(grads).zip(&mut self.velocity).enumerate() {
            let wd = if gi < self.decay_limit { self.weight_decay } else { 0.0 };
            for ((pk, gk), vk) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = gk * scale + wd * *pk;
                *vk = self.momentum * *vk + d;
                *pk -= lr * *vk;
            }
        }
    }
}

pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    config.validate()?;
    if data.is_empty() {
        return Err(GeodinError::Domain("training set is empty".into()));
    }
    let n_classes = data.labels.iter().max().map_or(0, |m| m + 1).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let input_dim = data.dim();
    if input_dim == 0 {
        return Err(GeodinError::Shape("training inputs have dimension 0".into()));
    }
    let mut model = Model::init_with(input_dim, n_classes, config, &mut rng);
    train_model(&mut model, config, data, &mut rng).map(|history| TrainOutput { model, history })
}

/// Continues training `model` in place. Labels must fit the model's class
/// count.
pub fn train_model<R: Rng>(
    model: &mut Model,
    config: &TrainConfig,
    data: &Dataset,
    rng: &mut R,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if let Some(&bad) = data.labels.iter().find(|&&y| y >= model.n_classes()) {
        return Err(GeodinError::Index {
            index: bad,
            len: model.n_classes(),
        });
    }
    let n = data.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let n_groups = model.param_groups().len();
    let decay_limit = if config.decay_heads {
        n_groups
    } else {
        n_groups - Model::HEAD_GROUPS
    };
    let mut sgd = Sgd::new(&model.param_groups(), config.momentum, config.weight_decay, decay_limit);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut lr = config.lr0;
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            lr = cosine_lr(step, total_steps, config.lr0)?;
            let mut grads = model.zero_grads();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, ok) = model.accumulate_gradient(&data.inputs[i], data.labels[i], &mut grads)?;
                batch_loss += loss;
                correct += ok as usize;
            }
            if !batch_loss.is_finite() {
                return Err(GeodinError::Numeric(format!(
                    "non-finite loss in epoch {epoch}, batch {bi} at learning rate {lr:.6e}"
                )));
            }
            loss_sum += batch_loss;
            sgd.step(model.param_groups_mut(), &grads, batch.len(), lr);
            step += 1;
        }
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
            lr,
        });
    }
    if !model.head.is_finite() {
        return Err(GeodinError::Numeric(
            "training diverged: head parameters are not finite".into(),
        ));
    }
    model.meta.trained = true;
    model.meta.seed = config.seed;
    model.meta.provenance = format!(
        "trained: variant={} epochs={} batch={} lr0={} momentum={} wd={} decay_heads={} seed={} n={}",
        config.variant,
        config.epochs,
        config.batch_size,
        config.lr0,
        config.momentum,
        config.weight_decay,
        config.decay_heads,
        config.seed,
        n
    );
    Ok(history)
}

pub fn extract_features(model: &Model, inputs: &[Vec<f64>]) -> Result<Vec<FeatureVector>> {
    inputs.iter().map(|x| model.feature(x)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// `(group name, relative error)` per parameter group.
    pub groups: Vec<(String, f64)>,
}

/// Floor on the denominator of the relative error, so groups whose true
/// gradient vanishes are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Compares the analytic loss gradient with central differences over every
/// parameter. Each group's error is `‖analytic − numeric‖ / max(‖analytic‖,
/// ‖numeric‖, GRAD_CHECK_FLOOR)`.
pub fn full_gradient_check(model: &Model, x: &[f64], label: usize, eps: f64) -> Result<GradientCheck> {
    if !(eps > 0.0) {
        return Err(GeodinError::Config(format!("eps must be positive, got {eps}")));
    }
    let (_, analytic) = model.loss_gradient(x, label)?;
    let mut probe = model.clone();
    let names = model.group_names();
    let mut groups = Vec::with_capacity(names.len());
    for (gi, name) in names.into_iter().enumerate() {
        let len = analytic[gi].len();
        let mut numeric = vec![0.0; len];
        for k in 0..len {
            let original = probe.param_groups()[gi][k];
            probe.param_groups_mut()[gi][k] = original + eps;
            let plus = probe.loss(x, label)?;
            probe.param_groups_mut()[gi][k] = original - eps;
            let minus = probe.loss(x, label)?;
            probe.param_groups_mut()[gi][k] = original;
            numeric[k] = (plus - minus) / (2.0 * eps);
        }
        groups.push((name, relative_error(&analytic[gi], &numeric)));
    }
    let max_relative_error = groups.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradientCheck {
        max_relative_error,
        groups,
    })
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(GRAD_CHECK_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, seed: u64) -> Dataset {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -1.5 } else { 1.5 };
            let e0: f64 = StandardNormal.sample(&mut rng);
            let e1: f64 = StandardNormal.sample(&mut rng);
            inputs.push(vec![c + 0.4 * e0, c + 0.4 * e1]);
            labels.push(y);
        }
        Dataset::new(inputs, labels, seed).unwrap()
    }

    fn small_config(variant: HeadVariant) -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            variant,
            arch: ArchConfig {
                hidden: vec![16],
                feature_dim: 8,
                ..ArchConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.1).unwrap(), 0.1);
        assert!(cosine_lr(100, 100, 0.1).unwrap().abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert!(matches!(cosine_lr(0, 0, 0.1), Err(GeodinError::Config(_))));
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&cfg, &blobs(10, 0)), Err(GeodinError::Config(_))));
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs(200, 7);
        // a perceptron on the raw inputs confirms the classes are linearly separable
        let mut w = [0.0f64; 3];
        for _ in 0..100 {
            for (x, &y) in data.inputs.iter().zip(&data.labels) {
                let t = if y == 1 { 1.0 } else { -1.0 };
                if t * (w[0] * x[0] + w[1] * x[1] + w[2]) <= 0.0 {
                    w[0] += t * x[0];
                    w[1] += t * x[1];
                    w[2] += t;
                }
            }
        }
        let separable = data.inputs.iter().zip(&data.labels).all(|(x, &y)| {
            let t = if y == 1 { 1.0 } else { -1.0 };
            t * (w[0] * x[0] + w[1] * x[1] + w[2]) > 0.0
        });
        assert!(separable);

        for variant in HeadVariant::ALL {
            let out = train(&small_config(variant), &data).unwrap();
            let acc = out.model.accuracy(&data).unwrap();
            assert!(acc >= 0.99, "{variant}: accuracy {acc}");
            assert!(out.model.meta.trained);
            assert_eq!(out.history.len(), 30);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(64, 3);
        let cfg = TrainConfig {
            epochs: 3,
            ..small_config(HeadVariant::AlphaBeta)
        };
        let a = train(&cfg, &data).unwrap().model;
        let b = train(&cfg, &data).unwrap().model;
        let bits = |m: &Model| -> Vec<u64> { m.param_groups().concat().iter().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
        let c = train(&TrainConfig { seed: 1, ..cfg }, &data).unwrap().model;
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn exploding_learning_rate_is_reported() {
        let data = blobs(32, 1);
        let cfg = TrainConfig {
            lr0: 1e200,
            epochs: 2,
            ..small_config(HeadVariant::Vanilla)
        };
        match train(&cfg, &data) {
            Err(GeodinError::Numeric(msg)) => assert!(msg.contains("learning rate"), "{msg}"),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn zero_extractor_gives_zero_feature() {
        let arch = ArchConfig::default();
        let ex = ExtractorParams::zeros(5, &arch);
        assert_eq!(ex.forward(&[0.0; 5]), vec![0.0; 16]);
    }

    #[test]
    fn batch_and_single_features_agree() {
        let data = blobs(20, 4);
        let model = Model::init(2, 2, &small_config(HeadVariant::AlphaBeta)).unwrap();
        let batch = extract_features(&model, &data.inputs).unwrap();
        assert_eq!(batch.len(), 20);
        for (x, f) in data.inputs.iter().zip(&batch) {
            assert_eq!(&model.feature(x).unwrap(), f);
            assert!(f.as_slice().iter().all(|v| *v >= 0.0));
        }
        assert!(matches!(model.feature(&[1.0]), Err(GeodinError::Shape(_))));
    }

    #[test]
    fn features_match_layerwise_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = TrainConfig {
            arch: ArchConfig {
                hidden: vec![7, 5],
                feature_dim: 4,
                ..ArchConfig::default()
            },
            ..TrainConfig::default()
        };
        let model = Model::init(3, 3, &cfg).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let n = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            let mut h: Vec<f64> = x.iter().map(|v| v / n).collect();
            for layer in &model.extractor.layers {
                let mut next = Vec::new();
                for r in 0..layer.weights.rows() {
                    let mut s = layer.biases[r];
                    for c in 0..layer.weights.cols() {
                        s += layer.weights.row(r)[c] * h[c];
                    }
                    next.push(if s > 0.0 { s } else { 0.0 });
                }
                h = next;
            }
            let f = model.feature(&x).unwrap();
            for (a, b) in f.as_slice().iter().zip(&h) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_check_small_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for variant in HeadVariant::ALL {
            let cfg = TrainConfig {
                variant,
                arch: ArchConfig {
                    hidden: vec![6],
                    feature_dim: 5,
                    ..ArchConfig::default()
                },
                ..TrainConfig::default()
            };
            let mut model = Model::init(4, 3, &cfg).unwrap();
            for v in model
                .head
                .alpha_weights
                .iter_mut()
                .chain(model.head.beta_weights.iter_mut())
            {
                *v = rng.random_range(-0.5..0.5);
            }
            model.head.alpha_bias = 0.3;
            model.head.beta_bias = -0.2;
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let check = full_gradient_check(&model, &x, 1, 1e-5).unwrap();
            assert!(check.max_relative_error < 1e-5, "{variant}: {check:?}");
            assert_eq!(check.groups.len(), model.group_names().len());
        }
    }

    #[test]
    fn label_out_of_range_rejected() {
        let data = Dataset::new(vec![vec![0.0, 1.0]; 3], vec![0, 1, 5], 0).unwrap();
        let mut model = Model::init(2, 2, &small_config(HeadVariant::Vanilla)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            train_model(&mut model, &small_config(HeadVariant::Vanilla), &data, &mut rng),
            Err(GeodinError::Index { index: 5, .. })
        ));
    }
}

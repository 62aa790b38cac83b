//! Loss, optimizers, datasets, the training loop, and the finite-difference
//! gradient checker.
//!
//! Everything is deterministic in the configured seed: shuffling, dropout,
//! initialization, and synthetic data each draw from their own ChaCha8
//! stream derived via a splitmix64 mix, so results are bit-identical across
//! runs and independent of the worker thread count.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{
    conv_backward, conv_forward, dense_backward, dense_forward, Activation, ConvLayerSpec,
    ConvParams, DenseHeadSpec, DenseParams, VdpLayerParams, VdpLayerSpec,
};
use crate::network::{
    ffn_backward, ffn_forward, ffn_forward_cached, FfnGrads, FfnParams, FfnSpec, OutputGrad,
};
use crate::patcher::{resize_to_nearest_patch, PATCH_SIZES};
use crate::tensor::{Scalar, Shape, Tensor};

/// Gradient checks must agree to this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Central-difference step used by the gradient checker.
pub const FD_STEP: f64 = 1e-6;

/// Standard deviation of the synthetic-dataset noise, as a fraction of the
/// unit template amplitude.
pub const SYNTH_NOISE_STD: f64 = 0.3;

/// Upper bound on synthetic class count.
pub const SYNTH_MAX_CLASSES: usize = 32;

/// Samples processed per deterministic work chunk when training/evaluating.
const PARALLEL_CHUNK: usize = 8;

const SEED_INIT: u64 = 1;
const SEED_SHUFFLE: u64 = 2;
const SEED_DROPOUT: u64 = 3;
const SEED_TEMPLATES: u64 = 4;
const SEED_NOISE: u64 = 5;
const SEED_GRADCHECK: u64 = 6;
const SEED_COORDS: u64 = 7;
const SEED_EVAL_NOISE: u64 = 8;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministically folds several seed components into one stream seed.
pub(crate) fn mix_seeds(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3, |acc, &part| splitmix64(acc ^ splitmix64(part)))
}

fn argmax_slice<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (idx, &value) in values.iter().enumerate() {
        if value > values[best] {
            best = idx;
        }
    }
    best
}

/// Numerically stable softmax cross-entropy.
///
/// Uses the log-sum-exp identity `loss = lse(logits) - logits[label]`, so
/// extreme logits (for example 1000) do not overflow. Returns the loss and
/// the gradient with respect to the logits, `softmax(logits) - onehot`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax needs at least one logit".into()));
    }
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {bad}")));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum_exp: T = logits.iter().map(|&l| (l - max).exp()).sum();
    let lse = max + sum_exp.ln();
    let loss = lse - logits[label];
    let mut grad: Vec<T> = logits.iter().map(|&l| (l - lse).exp()).collect();
    grad[label] -= T::one();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("cross-entropy loss {loss}")));
    }
    Ok((loss, grad))
}

/// Parameter update rule.
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    /// Adam with the customary defaults.
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl std::str::FromStr for Optimizer {
    type Err = Error;
    fn from_str(text: &str) -> Result<Self> {
        match text {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::adam()),
            other => Err(Error::InvalidArgument(format!(
                "unknown optimizer {other:?}, expected sgd or adam"
            ))),
        }
    }
}

/// Optimizer state: Adam moment buffers aligned with the parameter buffers.
pub struct OptState<T> {
    moment1: Vec<Vec<T>>,
    moment2: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &FfnParams<T>, optimizer: Optimizer) -> Self {
        match optimizer {
            Optimizer::Sgd => OptState { moment1: Vec::new(), moment2: Vec::new(), step: 0 },
            Optimizer::Adam { .. } => {
                let shapes: Vec<Vec<T>> =
                    params.buffers().iter().map(|b| vec![T::zero(); b.len()]).collect();
                OptState { moment1: shapes.clone(), moment2: shapes, step: 0 }
            }
        }
    }
}

/// Applies one optimizer step in place. `grads` must mirror the parameter
/// structure (as produced by [`ffn_backward`] for these params).
pub fn apply_gradients<T: Scalar>(
    params: &mut FfnParams<T>,
    grads: &FfnGrads<T>,
    optimizer: Optimizer,
    learning_rate: f64,
    state: &mut OptState<T>,
) -> Result<()> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {learning_rate}")));
    }
    let mut param_buffers = params.buffers_mut();
    let grad_buffers = grads.buffers();
    if param_buffers.len() != grad_buffers.len()
        || param_buffers
            .iter()
            .zip(&grad_buffers)
            .any(|(p, g)| p.len() != g.len())
    {
        return Err(Error::ShapeMismatch(
            "gradient buffers do not mirror the parameter buffers".into(),
        ));
    }
    let lr = T::from_f64(learning_rate);
    match optimizer {
        Optimizer::Sgd => {
            for (p_buf, g_buf) in param_buffers.iter_mut().zip(&grad_buffers) {
                for (p, &g) in p_buf.iter_mut().zip(*g_buf) {
                    *p -= lr * g;
                }
            }
        }
        Optimizer::Adam { beta1, beta2, epsilon } => {
            if state.moment1.len() != grad_buffers.len() {
                return Err(Error::ShapeMismatch(
                    "optimizer state does not mirror the parameter buffers".into(),
                ));
            }
            state.step += 1;
            let b1 = T::from_f64(beta1);
            let b2 = T::from_f64(beta2);
            let eps = T::from_f64(epsilon);
            let correction1 = T::from_f64(1.0 - beta1.powi(state.step as i32));
            let correction2 = T::from_f64(1.0 - beta2.powi(state.step as i32));
            for (((p_buf, g_buf), m_buf), v_buf) in param_buffers
                .iter_mut()
                .zip(&grad_buffers)
                .zip(&mut state.moment1)
                .zip(&mut state.moment2)
            {
                for (((p, &g), m), v) in
                    p_buf.iter_mut().zip(*g_buf).zip(m_buf.iter_mut()).zip(v_buf.iter_mut())
                {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let m_hat = *m / correction1;
                    let v_hat = *v / correction2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    for buffer in &param_buffers {
        if let Some(bad) = buffer.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter became {bad} after update")));
        }
    }
    Ok(())
}

/// A classification dataset: images with integer labels.
#[derive(Clone, PartialEq, Debug)]
pub struct LabeledSet {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::CountMismatch(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        if let Some(first) = self.images.first() {
            if let Some(other) = self.images.iter().find(|i| i.shape() != first.shape()) {
                return Err(Error::ShapeMismatch(format!(
                    "images mix shapes {} and {}",
                    first.shape(),
                    other.shape()
                )));
            }
        }
        Ok(())
    }

    /// Per-channel mean and population standard deviation over all pixels.
    pub fn channel_stats(&self) -> Result<([f64; 3], [f64; 3])> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut sum = [0.0f64; 3];
        let mut sum_sq = [0.0f64; 3];
        let mut count = 0u64;
        for image in &self.images {
            let (_, _, channels) = image.shape().dims3()?;
            if channels != 3 {
                return Err(Error::ShapeMismatch("channel stats expect 3-channel images".into()));
            }
            for pixel in image.data().chunks_exact(3) {
                for c in 0..3 {
                    let v = pixel[c] as f64;
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
            count += (image.shape().numel() / 3) as u64;
        }
        let mut mean = [0.0f64; 3];
        let mut std = [0.0f64; 3];
        for c in 0..3 {
            mean[c] = sum[c] / count as f64;
            std[c] = (sum_sq[c] / count as f64 - mean[c] * mean[c]).max(0.0).sqrt();
        }
        Ok((mean, std))
    }

    /// Standardizes every channel in place with the given statistics
    /// (standard deviations are floored at 1e-6).
    pub fn normalize(&mut self, mean: [f64; 3], std: [f64; 3]) -> Result<()> {
        let scale: Vec<f32> = std.iter().map(|s| (1.0 / s.max(1e-6)) as f32).collect();
        let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
        for image in &mut self.images {
            for pixel in image.data_mut().chunks_exact_mut(3) {
                for c in 0..3 {
                    pixel[c] = (pixel[c] - mean[c]) * scale[c];
                }
            }
            image.check_finite("normalize")?;
        }
        Ok(())
    }
}

fn template_distance(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Draws one uniform `[-1, 1]` template per class, redrawing until all
/// pairwise Euclidean distances are at least `4 * SYNTH_NOISE_STD`.
pub fn synth_templates(num_classes: usize, patch: usize, seed: u64) -> Result<Vec<Tensor<f32>>> {
    if num_classes == 0 || num_classes > SYNTH_MAX_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "num_classes must be in 1..={SYNTH_MAX_CLASSES}, got {num_classes}"
        )));
    }
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(&[seed, SEED_TEMPLATES]));
    let shape = Shape::d3(patch, patch, 3);
    let min_distance = 4.0 * SYNTH_NOISE_STD;
    let mut templates: Vec<Tensor<f32>> = Vec::with_capacity(num_classes);
    while templates.len() < num_classes {
        let mut accepted = false;
        for _ in 0..100 {
            let candidate =
                Tensor::from_fn(shape.clone(), |_| rng.random_range(-1.0f64..1.0) as f32)?;
            if templates.iter().all(|t| template_distance(t, &candidate) >= min_distance) {
                templates.push(candidate);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::InvalidArgument(
                "could not draw separated templates; reduce num_classes or grow the patch".into(),
            ));
        }
    }
    Ok(templates)
}

/// Builds a separable synthetic dataset: `per_class` samples per class, each
/// a class template plus Gaussian noise of standard deviation
/// [`SYNTH_NOISE_STD`]. Samples are ordered class-major.
pub fn synth_dataset(
    num_classes: usize,
    per_class: usize,
    patch: usize,
    seed: u64,
) -> Result<LabeledSet> {
    synth_from_stream(num_classes, per_class, patch, seed, SEED_NOISE)
}

/// Like [`synth_dataset`] with the same templates (same `seed`) but an
/// independent noise stream, giving a held-out split of the same problem.
pub fn synth_eval_dataset(
    num_classes: usize,
    per_class: usize,
    patch: usize,
    seed: u64,
) -> Result<LabeledSet> {
    synth_from_stream(num_classes, per_class, patch, seed, SEED_EVAL_NOISE)
}

fn synth_from_stream(
    num_classes: usize,
    per_class: usize,
    patch: usize,
    seed: u64,
    stream: u64,
) -> Result<LabeledSet> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    let templates = synth_templates(num_classes, patch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(&[seed, stream]));
    let mut images = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..per_class {
            let image = Tensor::from_fn(template.shape().clone(), |idx| {
                let noise: f64 = rng.sample(StandardNormal);
                template.data()[idx] + (noise * SYNTH_NOISE_STD) as f32
            })?;
            images.push(image);
            labels.push(class);
        }
    }
    let set = LabeledSet { images, labels, num_classes };
    set.validate()?;
    Ok(set)
}

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

fn read_u32_be(bytes: &[u8], pos: usize, what: &str) -> Result<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::CorruptFile(format!("truncated while reading {what}")))
}

/// Loads an IDX image/label pair (the MNIST container format).
///
/// Pixels are normalized to `[0, 1]`, grayscale is replicated to three
/// channels, and every image is resized to the nearest supported patch size
/// (28x28 inputs become 32x32).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledSet> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;

    let magic = read_u32_be(&image_bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::CorruptFile(format!(
            "image magic {magic}, expected {IDX_IMAGES_MAGIC}"
        )));
    }
    let image_count = read_u32_be(&image_bytes, 4, "image count")? as usize;
    let rows = read_u32_be(&image_bytes, 8, "row count")? as usize;
    let cols = read_u32_be(&image_bytes, 12, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyImage);
    }
    if image_count == 0 {
        return Err(Error::EmptyDataset);
    }
    let expected = 16 + image_count * rows * cols;
    if image_bytes.len() != expected {
        return Err(Error::CorruptFile(format!(
            "image file holds {} bytes, expected {expected}",
            image_bytes.len()
        )));
    }

    let magic = read_u32_be(&label_bytes, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::CorruptFile(format!(
            "label magic {magic}, expected {IDX_LABELS_MAGIC}"
        )));
    }
    let label_count = read_u32_be(&label_bytes, 4, "label count")? as usize;
    if label_bytes.len() != 8 + label_count {
        return Err(Error::CorruptFile(format!(
            "label file holds {} bytes, expected {}",
            label_bytes.len(),
            8 + label_count
        )));
    }
    if label_count != image_count {
        return Err(Error::CountMismatch(format!(
            "{image_count} images but {label_count} labels"
        )));
    }

    let labels: Vec<usize> = label_bytes[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let mut images = Vec::with_capacity(image_count);
    for index in 0..image_count {
        let start = 16 + index * rows * cols;
        let pixels = &image_bytes[start..start + rows * cols];
        let gray = Tensor::from_fn(Shape::d3(rows, cols, 3), |flat| {
            pixels[flat / 3] as f32 / 255.0
        })?;
        images.push(resize_to_nearest_patch(&gray, &PATCH_SIZES)?);
    }
    let set = LabeledSet { images, labels, num_classes };
    set.validate()?;
    Ok(set)
}

/// Training hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::adam(),
            seed: 0,
        }
    }
}

/// One metrics row. Epoch 0 is the pre-training evaluation of the freshly
/// initialized network; later rows are running training averages.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

pub struct TrainOutcome {
    pub params: FfnParams<f32>,
    pub metrics: Vec<EpochMetrics>,
}

fn check_dataset_against(spec: &FfnSpec, set: &LabeledSet) -> Result<()> {
    set.validate()?;
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let expected = spec.input_shape();
    if *set.images[0].shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "network expects {expected} inputs, dataset holds {}",
            set.images[0].shape()
        )));
    }
    let head = spec
        .head
        .as_ref()
        .ok_or_else(|| Error::InvalidSpec("training requires a classifier head".into()))?;
    if head.num_classes != set.num_classes {
        return Err(Error::InvalidSpec(format!(
            "head has {} classes, dataset has {}",
            head.num_classes, set.num_classes
        )));
    }
    Ok(())
}

/// Mean loss and accuracy of `params` on `set` (no dropout).
pub fn evaluate(spec: &FfnSpec, params: &FfnParams<f32>, set: &LabeledSet) -> Result<(f64, f64)> {
    check_dataset_against(spec, set)?;
    params.conforms(spec)?;
    let indices: Vec<usize> = (0..set.len()).collect();
    let chunks: Vec<Result<(f64, usize)>> = indices
        .par_chunks(64)
        .map(|chunk| {
            let mut loss_sum = 0.0f64;
            let mut hits = 0usize;
            for &idx in chunk {
                let output = ffn_forward(spec, params, &set.images[idx])?;
                let logits = output.logits.expect("head checked above");
                let (loss, _) = softmax_cross_entropy(&logits, set.labels[idx])?;
                loss_sum += loss.to_f64();
                if argmax_slice(&logits) == set.labels[idx] {
                    hits += 1;
                }
            }
            Ok((loss_sum, hits))
        })
        .collect();
    let mut loss_sum = 0.0f64;
    let mut hits = 0usize;
    for chunk in chunks {
        let (loss, h) = chunk?;
        loss_sum += loss;
        hits += h;
    }
    Ok((loss_sum / set.len() as f64, hits as f64 / set.len() as f64))
}

/// Trains a fresh network on `train_set`.
///
/// Minibatch gradient descent with the configured optimizer; gradients are
/// averaged over each batch. Inverted dropout at `spec.dropout_rate` is
/// applied to the feature vector during training only. The metrics start
/// with an epoch-0 row measured before any update, so a K-class problem
/// starts near `ln K` train loss.
pub fn train(
    spec: &FfnSpec,
    train_set: &LabeledSet,
    eval_set: Option<&LabeledSet>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(spec, train_set, eval_set, config, |_| {})
}

/// [`train`] with a callback invoked after every metrics row (including the
/// epoch-0 row), for live progress reporting.
pub fn train_with_progress(
    spec: &FfnSpec,
    train_set: &LabeledSet,
    eval_set: Option<&LabeledSet>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    spec.validate()?;
    check_dataset_against(spec, train_set)?;
    if let Some(eval) = eval_set {
        check_dataset_against(spec, eval)?;
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate {}",
            config.learning_rate
        )));
    }

    let mut params = FfnParams::<f32>::init(spec, mix_seeds(&[config.seed, SEED_INIT]));
    let mut state = OptState::new(&params, config.optimizer);
    let mut metrics = Vec::with_capacity(config.epochs + 1);

    let (loss0, acc0) = evaluate(spec, &params, train_set)?;
    let eval0 = match eval_set {
        Some(set) => Some(evaluate(spec, &params, set)?.1),
        None => None,
    };
    metrics.push(EpochMetrics { epoch: 0, train_loss: loss0, train_acc: acc0, eval_acc: eval0 });
    on_epoch(&metrics[0]);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix_seeds(&[config.seed, SEED_SHUFFLE, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0f64;
        let mut hits = 0usize;
        for batch in order.chunks(config.batch_size) {
            let chunks: Vec<Result<(FfnGrads<f32>, f64, usize)>> = batch
                .par_chunks(PARALLEL_CHUNK)
                .map(|chunk| {
                    let mut grads = FfnGrads::<f32>::zeros(spec);
                    let mut chunk_loss = 0.0f64;
                    let mut chunk_hits = 0usize;
                    for &idx in chunk {
                        let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seeds(&[
                            config.seed,
                            SEED_DROPOUT,
                            epoch as u64,
                            idx as u64,
                        ]));
                        let cache = ffn_forward_cached(
                            spec,
                            &params,
                            &train_set.images[idx],
                            Some((spec.dropout_rate, &mut dropout_rng)),
                        )?;
                        let logits = cache.logits.as_ref().expect("head checked above");
                        let (loss, grad_logits) =
                            softmax_cross_entropy(logits, train_set.labels[idx])?;
                        chunk_loss += loss.to_f64();
                        if argmax_slice(logits) == train_set.labels[idx] {
                            chunk_hits += 1;
                        }
                        let sample =
                            ffn_backward(spec, &params, &cache, OutputGrad::Logits(&grad_logits))?;
                        grads.accumulate(&sample)?;
                    }
                    Ok((grads, chunk_loss, chunk_hits))
                })
                .collect();

            let mut batch_grads = FfnGrads::<f32>::zeros(spec);
            for chunk in chunks {
                let (grads, loss, h) = chunk?;
                batch_grads.accumulate(&grads)?;
                loss_sum += loss;
                hits += h;
            }
            batch_grads.scale(1.0 / batch.len() as f32);
            apply_gradients(
                &mut params,
                &batch_grads,
                config.optimizer,
                config.learning_rate,
                &mut state,
            )?;
        }

        let eval_acc = match eval_set {
            Some(set) => Some(evaluate(spec, &params, set)?.1),
            None => None,
        };
        metrics.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: hits as f64 / train_set.len() as f64,
            eval_acc,
        });
        on_epoch(metrics.last().expect("just pushed"));
    }
    Ok(TrainOutcome { params, metrics })
}

/// Writes metrics as CSV: `epoch,train_loss,train_acc,eval_acc`, with an
/// empty last column when no evaluation split was supplied.
pub fn write_metrics_csv(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,train_loss,train_acc,eval_acc\n");
    for row in metrics {
        let eval = row.eval_acc.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            row.epoch, row.train_loss, row.train_acc, eval
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Relative disagreement used by the gradient checker:
/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// A differentiable prediction whose gradients can be checked numerically.
///
/// A probe owns parameters, an input, and a fixed random projection; `loss`
/// is the projection applied to the output, so checking `loss` gradients
/// checks the full Jacobian against random directions. `reseed` must move
/// the probe to a fresh random point (ReLU probes should avoid near-zero
/// pre-activations where finite differences straddle the kink).
pub trait GradProbe {
    fn reseed(&mut self, seed: u64) -> Result<()>;
    /// One name per buffer; the input buffer comes last by convention.
    fn buffer_names(&self) -> Vec<String>;
    fn buffer_lens(&self) -> Vec<usize>;
    fn read(&self, buffer: usize, index: usize) -> f64;
    fn write(&mut self, buffer: usize, index: usize, value: f64);
    fn loss(&self) -> Result<f64>;
    /// Analytic gradients at the current point, aligned with the buffers.
    fn analytic_gradients(&self) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Check at most this many coordinates per buffer (all when `None`).
    pub samples_per_buffer: Option<usize>,
    pub tolerance: f64,
    pub fd_step: f64,
    /// Coordinates failing at one random point are retried at this many
    /// fresh points; only persistent failures count. This filters the
    /// measure-zero inputs where a ReLU kink falls inside the difference
    /// interval, while a wrong backward pass fails at every point.
    pub attempts: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples_per_buffer: None,
            tolerance: GRADCHECK_TOLERANCE,
            fd_step: FD_STEP,
            attempts: 3,
        }
    }
}

/// Worst relative error per buffer.
#[derive(Clone, PartialEq, Debug)]
pub struct GradCheckGroup {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, PartialEq, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GradCheckGroup>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// Compares the probe's analytic gradients against central finite
/// differences. Deterministic in `seed`.
pub fn run_gradcheck(
    probe: &mut dyn GradProbe,
    options: &GradCheckOptions,
    seed: u64,
) -> Result<GradCheckReport> {
    if options.attempts == 0 || options.fd_step <= 0.0 || options.tolerance <= 0.0 {
        return Err(Error::InvalidArgument(
            "gradcheck needs positive attempts, step, and tolerance".into(),
        ));
    }
    probe.reseed(mix_seeds(&[seed, SEED_GRADCHECK, 0]))?;
    let names = probe.buffer_names();
    let lens = probe.buffer_lens();
    if names.len() != lens.len() {
        return Err(Error::InvalidArgument("probe buffer names and lengths differ".into()));
    }

    let mut coord_rng = ChaCha8Rng::seed_from_u64(mix_seeds(&[seed, SEED_COORDS]));
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (buffer, &len) in lens.iter().enumerate() {
        match options.samples_per_buffer {
            Some(limit) if limit < len => {
                let mut picked = rand::seq::index::sample(&mut coord_rng, len, limit).into_vec();
                picked.sort_unstable();
                coords.extend(picked.into_iter().map(|index| (buffer, index)));
            }
            _ => coords.extend((0..len).map(|index| (buffer, index))),
        }
    }

    let step = options.fd_step;
    let mut best = vec![f64::INFINITY; coords.len()];
    let mut pending: Vec<usize> = (0..coords.len()).collect();
    for attempt in 0..options.attempts {
        if attempt > 0 {
            probe.reseed(mix_seeds(&[seed, SEED_GRADCHECK, attempt as u64]))?;
        }
        let analytic = probe.analytic_gradients()?;
        if analytic.len() != lens.len()
            || analytic.iter().zip(&lens).any(|(a, &len)| a.len() != len)
        {
            return Err(Error::InvalidArgument(
                "probe analytic gradients do not mirror its buffers".into(),
            ));
        }
        let mut still_failing = Vec::new();
        for &coord in &pending {
            let (buffer, index) = coords[coord];
            let original = probe.read(buffer, index);
            probe.write(buffer, index, original + step);
            let up = probe.loss();
            probe.write(buffer, index, original - step);
            let down = probe.loss();
            probe.write(buffer, index, original);
            let numeric = (up? - down?) / (2.0 * step);
            let err = relative_error(analytic[buffer][index], numeric);
            if err < best[coord] {
                best[coord] = err;
            }
            if best[coord] >= options.tolerance {
                still_failing.push(coord);
            }
        }
        pending = still_failing;
        if pending.is_empty() {
            break;
        }
    }

    let mut groups: Vec<GradCheckGroup> = names
        .into_iter()
        .map(|name| GradCheckGroup { name, checked: 0, max_rel_err: 0.0 })
        .collect();
    for (coord, &(buffer, _)) in coords.iter().enumerate() {
        groups[buffer].checked += 1;
        groups[buffer].max_rel_err = groups[buffer].max_rel_err.max(best[coord]);
    }
    Ok(GradCheckReport { groups, tolerance: options.tolerance })
}

fn normal_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Draws inputs until ReLU pre-activations stay away from zero, keeping the
/// best of `tries` candidates.
fn pick_input<F>(shape: &Shape, rng: &mut ChaCha8Rng, tries: usize, min_pre: F) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    let mut best: Option<(f64, Tensor<f64>)> = None;
    for _ in 0..tries {
        let candidate = normal_tensor(shape.clone(), rng)?;
        let margin = min_pre(&candidate)?;
        if margin > 1e-4 {
            return Ok(candidate);
        }
        if best.as_ref().is_none_or(|(m, _)| margin > *m) {
            best = Some((margin, candidate));
        }
    }
    Ok(best.expect("tries >= 1").1)
}

struct VdpProbe {
    spec: VdpLayerSpec,
    params: VdpLayerParams<f64>,
    input: Tensor<f64>,
    projection: Tensor<f64>,
}

impl VdpProbe {
    fn new(spec: VdpLayerSpec) -> Self {
        let params = VdpLayerParams::zeros(&spec);
        let input = Tensor::zeros(spec.input_shape());
        let projection = Tensor::zeros(spec.output_shape());
        VdpProbe { spec, params, input, projection }
    }
}

impl GradProbe for VdpProbe {
    fn reseed(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params = VdpLayerParams::init(&self.spec, &mut rng);
        let spec = self.spec.clone();
        let params = self.params.clone();
        let tries = if spec.activation == Activation::Relu { 25 } else { 1 };
        self.input = pick_input(&spec.input_shape(), &mut rng, tries, |input| {
            let (_, pre) = crate::layers::vdp_forward_cached(&spec, &params, input)?;
            Ok(pre.data().iter().fold(f64::INFINITY, |m, &z| m.min(z.abs())))
        })?;
        self.projection = normal_tensor(self.spec.output_shape(), &mut rng)?;
        Ok(())
    }

    fn buffer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for volume in 0..self.spec.grid.volume_count() {
            names.push(format!("volume{volume}/weights"));
            names.push(format!("volume{volume}/bias"));
        }
        names.push("input".into());
        names
    }

    fn buffer_lens(&self) -> Vec<usize> {
        let mut lens = Vec::new();
        for volume in 0..self.spec.grid.volume_count() {
            lens.push(self.params.weights[volume].len());
            lens.push(self.params.biases[volume].len());
        }
        lens.push(self.input.shape().numel());
        lens
    }

    fn read(&self, buffer: usize, index: usize) -> f64 {
        let volumes = self.spec.grid.volume_count();
        if buffer < 2 * volumes {
            let volume = buffer / 2;
            if buffer % 2 == 0 {
                self.params.weights[volume][index]
            } else {
                self.params.biases[volume][index]
            }
        } else {
            self.input.data()[index]
        }
    }

    fn write(&mut self, buffer: usize, index: usize, value: f64) {
        let volumes = self.spec.grid.volume_count();
        if buffer < 2 * volumes {
            let volume = buffer / 2;
            if buffer % 2 == 0 {
                self.params.weights[volume][index] = value;
            } else {
                self.params.biases[volume][index] = value;
            }
        } else {
            self.input.data_mut()[index] = value;
        }
    }

    fn loss(&self) -> Result<f64> {
        let output = crate::layers::vdp_forward(&self.spec, &self.params, &self.input)?;
        crate::tensor::dot(&output, &self.projection)
    }

    fn analytic_gradients(&self) -> Result<Vec<Vec<f64>>> {
        let (grads, grad_input) =
            crate::layers::vdp_backward(&self.spec, &self.params, &self.input, &self.projection)?;
        let mut out = Vec::new();
        for volume in 0..self.spec.grid.volume_count() {
            out.push(grads.weights[volume].clone());
            out.push(grads.biases[volume].clone());
        }
        out.push(grad_input.data().to_vec());
        Ok(out)
    }
}

struct ConvProbe {
    spec: ConvLayerSpec,
    input_shape: Shape,
    params: ConvParams<f64>,
    input: Tensor<f64>,
    projection: Tensor<f64>,
}

impl ConvProbe {
    fn new(spec: ConvLayerSpec, input_shape: Shape) -> Result<Self> {
        let output_shape = spec.output_shape(&input_shape)?;
        Ok(ConvProbe {
            params: ConvParams::zeros(&spec),
            input: Tensor::zeros(input_shape.clone()),
            projection: Tensor::zeros(output_shape),
            spec,
            input_shape,
        })
    }
}

impl GradProbe for ConvProbe {
    fn reseed(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params = ConvParams::init(&self.spec, &mut rng);
        self.input = normal_tensor(self.input_shape.clone(), &mut rng)?;
        self.projection = normal_tensor(self.spec.output_shape(&self.input_shape)?, &mut rng)?;
        Ok(())
    }

    fn buffer_names(&self) -> Vec<String> {
        vec!["weights".into(), "bias".into(), "input".into()]
    }

    fn buffer_lens(&self) -> Vec<usize> {
        vec![
            self.params.weights.shape().numel(),
            self.params.bias.len(),
            self.input.shape().numel(),
        ]
    }

    fn read(&self, buffer: usize, index: usize) -> f64 {
        match buffer {
            0 => self.params.weights.data()[index],
            1 => self.params.bias[index],
            _ => self.input.data()[index],
        }
    }

    fn write(&mut self, buffer: usize, index: usize, value: f64) {
        match buffer {
            0 => self.params.weights.data_mut()[index] = value,
            1 => self.params.bias[index] = value,
            _ => self.input.data_mut()[index] = value,
        }
    }

    fn loss(&self) -> Result<f64> {
        let output = conv_forward(&self.spec, &self.params, &self.input)?;
        crate::tensor::dot(&output, &self.projection)
    }

    fn analytic_gradients(&self) -> Result<Vec<Vec<f64>>> {
        let (grads, grad_input) =
            conv_backward(&self.spec, &self.params, &self.input, &self.projection)?;
        Ok(vec![
            grads.weights.data().to_vec(),
            grads.bias,
            grad_input.data().to_vec(),
        ])
    }
}

struct DenseProbe {
    spec: DenseHeadSpec,
    params: DenseParams<f64>,
    feature: Vec<f64>,
    projection: Vec<f64>,
}

impl DenseProbe {
    fn new(spec: DenseHeadSpec) -> Self {
        DenseProbe {
            params: DenseParams::zeros(&spec),
            feature: vec![0.0; spec.in_features],
            projection: vec![0.0; spec.num_classes],
            spec,
        }
    }
}

impl GradProbe for DenseProbe {
    fn reseed(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params = DenseParams::init(&self.spec, &mut rng);
        self.feature = (0..self.spec.in_features).map(|_| rng.sample(StandardNormal)).collect();
        self.projection =
            (0..self.spec.num_classes).map(|_| rng.sample(StandardNormal)).collect();
        Ok(())
    }

    fn buffer_names(&self) -> Vec<String> {
        vec!["weights".into(), "bias".into(), "input".into()]
    }

    fn buffer_lens(&self) -> Vec<usize> {
        vec![self.params.weights.shape().numel(), self.params.bias.len(), self.feature.len()]
    }

    fn read(&self, buffer: usize, index: usize) -> f64 {
        match buffer {
            0 => self.params.weights.data()[index],
            1 => self.params.bias[index],
            _ => self.feature[index],
        }
    }

    fn write(&mut self, buffer: usize, index: usize, value: f64) {
        match buffer {
            0 => self.params.weights.data_mut()[index] = value,
            1 => self.params.bias[index] = value,
            _ => self.feature[index] = value,
        }
    }

    fn loss(&self) -> Result<f64> {
        let logits = dense_forward(&self.spec, &self.params, &self.feature)?;
        Ok(logits.iter().zip(&self.projection).map(|(&l, &p)| l * p).sum())
    }

    fn analytic_gradients(&self) -> Result<Vec<Vec<f64>>> {
        let (grads, grad_feature) =
            dense_backward(&self.spec, &self.params, &self.feature, &self.projection)?;
        Ok(vec![grads.weights.data().to_vec(), grads.bias, grad_feature])
    }
}

struct NetworkProbe {
    spec: FfnSpec,
    params: FfnParams<f64>,
    input: Tensor<f64>,
    projection: Vec<f64>,
}

impl NetworkProbe {
    fn new(spec: FfnSpec) -> Self {
        let params = FfnParams::zeros(&spec);
        let input = Tensor::zeros(spec.input_shape());
        let projection = vec![0.0; spec.head.as_ref().map_or(spec.feature_len(), |h| h.num_classes)];
        NetworkProbe { spec, params, input, projection }
    }

    fn param_buffer_count(&self) -> usize {
        self.params.buffers().len()
    }
}

impl GradProbe for NetworkProbe {
    fn reseed(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params = FfnParams::init(&self.spec, rng.random());
        // Training starts biases at zero, but here that pins a volume whose
        // input is entirely dead ReLU output exactly on its own kink, where
        // no choice of network input separates the difference quotient from
        // the analytic derivative. Check at a generic point instead.
        for layer in &mut self.params.layers {
            for bias in &mut layer.biases {
                for value in bias.iter_mut() {
                    *value = rng.random_range(-0.25..0.25);
                }
            }
        }
        let spec = self.spec.clone();
        let params = self.params.clone();
        let relu = spec.layers.iter().any(|l| l.activation == Activation::Relu);
        self.input = pick_input(&spec.input_shape(), &mut rng, if relu { 8 } else { 1 }, |input| {
            let cache = ffn_forward_cached(&spec, &params, input, None)?;
            Ok(cache
                .pre_activations
                .iter()
                .flat_map(|pre| pre.data())
                .fold(f64::INFINITY, |m, &z| m.min(z.abs())))
        })?;
        self.projection = (0..self.projection.len()).map(|_| rng.sample(StandardNormal)).collect();
        Ok(())
    }

    fn buffer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (layer_idx, layer) in self.spec.layers.iter().enumerate() {
            for volume in 0..layer.grid.volume_count() {
                names.push(format!("layer{layer_idx}/volume{volume}/weights"));
                names.push(format!("layer{layer_idx}/volume{volume}/bias"));
            }
        }
        if self.spec.head.is_some() {
            names.push("head/weights".into());
            names.push("head/bias".into());
        }
        names.push("input".into());
        names
    }

    fn buffer_lens(&self) -> Vec<usize> {
        let mut lens: Vec<usize> = self.params.buffers().iter().map(|b| b.len()).collect();
        lens.push(self.input.shape().numel());
        lens
    }

    fn read(&self, buffer: usize, index: usize) -> f64 {
        if buffer < self.param_buffer_count() {
            self.params.buffers()[buffer][index]
        } else {
            self.input.data()[index]
        }
    }

    fn write(&mut self, buffer: usize, index: usize, value: f64) {
        if buffer < self.params.buffers().len() {
            self.params.buffers_mut()[buffer][index] = value;
        } else {
            self.input.data_mut()[index] = value;
        }
    }

    fn loss(&self) -> Result<f64> {
        let output = ffn_forward(&self.spec, &self.params, &self.input)?;
        let projected = match &output.logits {
            Some(logits) => logits.iter().zip(&self.projection).map(|(&l, &p)| l * p).sum(),
            None => output.feature.iter().zip(&self.projection).map(|(&f, &p)| f * p).sum(),
        };
        Ok(projected)
    }

    fn analytic_gradients(&self) -> Result<Vec<Vec<f64>>> {
        let cache = ffn_forward_cached(&self.spec, &self.params, &self.input, None)?;
        let output_grad = if self.spec.head.is_some() {
            OutputGrad::Logits(self.projection.as_slice())
        } else {
            OutputGrad::Feature(self.projection.as_slice())
        };
        let grads = ffn_backward(&self.spec, &self.params, &cache, output_grad)?;
        let mut out: Vec<Vec<f64>> = grads.buffers().iter().map(|b| b.to_vec()).collect();
        out.push(grads.grad_input.data().to_vec());
        Ok(out)
    }
}

/// Exhaustively checks one VDP layer's gradients (weights, biases, input).
pub fn gradcheck_vdp(spec: &VdpLayerSpec, seed: u64) -> Result<GradCheckReport> {
    run_gradcheck(&mut VdpProbe::new(spec.clone()), &GradCheckOptions::default(), seed)
}

/// Exhaustively checks one convolution layer's gradients on `input_shape`.
pub fn gradcheck_conv(
    spec: &ConvLayerSpec,
    input_shape: &Shape,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut probe = ConvProbe::new(*spec, input_shape.clone())?;
    run_gradcheck(&mut probe, &GradCheckOptions::default(), seed)
}

/// Exhaustively checks the dense head's gradients.
pub fn gradcheck_dense(spec: &DenseHeadSpec, seed: u64) -> Result<GradCheckReport> {
    run_gradcheck(&mut DenseProbe::new(*spec), &GradCheckOptions::default(), seed)
}

/// Checks a whole network's gradients; `samples_per_buffer` bounds the
/// coordinates checked in each weight/bias buffer (pass `None` for all,
/// which is only sensible for tiny networks).
pub fn gradcheck_network(
    spec: &FfnSpec,
    samples_per_buffer: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    spec.validate()?;
    let options = GradCheckOptions { samples_per_buffer, ..GradCheckOptions::default() };
    run_gradcheck(&mut NetworkProbe::new(spec.clone()), &options, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::VdpLayerSpec;
    use crate::network::{preset, Preset};

    #[test]
    fn uniform_logits_lose_ln_k() {
        let (loss, grad) = softmax_cross_entropy(&[0.0f64; 10], 3).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
        assert!((grad[0] - 0.1).abs() < 1e-12);
        assert!((grad[3] - (0.1 - 1.0)).abs() < 1e-12);
        let sum: f64 = grad.iter().sum();
        assert!(sum.abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_do_not_overflow() {
        let (loss, _) = softmax_cross_entropy(&[1000.0f64, 0.0], 0).unwrap();
        assert!(loss >= 0.0 && loss < 1e-12);
        let (loss, _) = softmax_cross_entropy(&[1000.0f64, 0.0], 1).unwrap();
        assert!((loss - 1000.0).abs() < 1e-9);
        assert!(softmax_cross_entropy(&[0.0f64], 1).is_err());
        assert!(softmax_cross_entropy(&[f64::NAN], 0).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = [0.3f64, -1.2, 0.7, 2.1, -0.4];
        let (_, grad) = softmax_cross_entropy(&logits, 2).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut up = logits;
            up[i] += h;
            let mut down = logits;
            down[i] -= h;
            let (lu, _) = softmax_cross_entropy(&up, 2).unwrap();
            let (ld, _) = softmax_cross_entropy(&down, 2).unwrap();
            let numeric = (lu - ld) / (2.0 * h);
            assert!(relative_error(grad[i], numeric) < 1e-8);
        }
    }

    fn one_param_spec() -> FfnSpec {
        FfnSpec::new(
            "unit",
            vec![VdpLayerSpec::for_input(
                &Shape::d3(1, 1, 1),
                (1, 1, 1),
                1,
                Activation::Identity,
            )
            .unwrap()],
        )
        .unwrap()
    }

    fn grads_of(spec: &FfnSpec, params: &FfnParams<f64>, scale: f64) -> FfnGrads<f64> {
        let mut grads = FfnGrads::zeros(spec);
        for (g, p) in grads.buffers_mut().into_iter().zip(params.buffers()) {
            for (gv, &pv) in g.iter_mut().zip(p) {
                *gv = scale * pv;
            }
        }
        grads
    }

    #[test]
    fn sgd_step_is_exact() {
        let spec = one_param_spec();
        let mut params = FfnParams::<f64>::zeros(&spec);
        let mut grads = FfnGrads::<f64>::zeros(&spec);
        grads.layers[0].weights[0][0] = 2.0;
        let mut state = OptState::new(&params, Optimizer::Sgd);
        apply_gradients(&mut params, &grads, Optimizer::Sgd, 1.0, &mut state).unwrap();
        assert_eq!(params.layers[0].weights[0][0], -2.0);
        assert_eq!(params.layers[0].biases[0][0], 0.0);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let spec = one_param_spec();
        for optimizer in [Optimizer::Sgd, Optimizer::adam()] {
            let mut params = FfnParams::<f64>::init(&spec, 5);
            let reference = params.clone();
            let mut state = OptState::new(&params, optimizer);
            let grads = FfnGrads::<f64>::zeros(&spec);
            for _ in 0..3 {
                apply_gradients(&mut params, &grads, optimizer, 0.1, &mut state).unwrap();
            }
            assert_eq!(params, reference);
        }
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        // Minimize sum(p^2): gradients are 2p per coordinate.
        let spec = one_param_spec();
        let mut params = FfnParams::<f64>::zeros(&spec);
        params.layers[0].weights[0][0] = 3.0;
        params.layers[0].biases[0][0] = -2.0;
        let optimizer = Optimizer::adam();
        let mut state = OptState::new(&params, optimizer);
        for _ in 0..400 {
            let grads = grads_of(&spec, &params, 2.0);
            apply_gradients(&mut params, &grads, optimizer, 0.05, &mut state).unwrap();
        }
        for buffer in params.buffers() {
            for &value in buffer {
                assert!(value.abs() < 1e-2, "did not converge: {value}");
            }
        }
    }

    #[test]
    fn synth_dataset_is_balanced_separable_and_deterministic() {
        let set = synth_dataset(5, 20, 8, 42).unwrap();
        assert_eq!(set.len(), 100);
        for class in 0..5 {
            assert_eq!(set.labels.iter().filter(|&&l| l == class).count(), 20);
        }
        let again = synth_dataset(5, 20, 8, 42).unwrap();
        assert_eq!(set, again);
        assert_ne!(set, synth_dataset(5, 20, 8, 43).unwrap());

        // Nearest-template classification must be perfect at this noise
        // level: templates are far apart relative to the noise.
        let templates = synth_templates(5, 8, 42).unwrap();
        for (image, &label) in set.images.iter().zip(&set.labels) {
            let nearest = (0..5)
                .min_by(|&a, &b| {
                    template_distance(image, &templates[a])
                        .partial_cmp(&template_distance(image, &templates[b]))
                        .unwrap()
                })
                .unwrap();
            assert_eq!(nearest, label);
        }

        // Noise magnitude sanity: squared distance to the own template
        // concentrates around d * sigma^2.
        let d = (8 * 8 * 3) as f64;
        let expected = d.sqrt() * SYNTH_NOISE_STD;
        for (image, &label) in set.images.iter().zip(&set.labels) {
            let distance = template_distance(image, &templates[label]);
            assert!(distance > 0.5 * expected && distance < 1.5 * expected);
        }
        assert!(synth_dataset(40, 1, 8, 0).is_err());

        // The eval split shares templates but not noise, so it stays
        // classifiable by the same nearest-template rule.
        let eval = synth_eval_dataset(5, 4, 8, 42).unwrap();
        assert_eq!(eval.len(), 20);
        for (image, &label) in eval.images.iter().zip(&eval.labels) {
            assert_ne!(image, &set.images[0]);
            let nearest = (0..5)
                .min_by(|&a, &b| {
                    template_distance(image, &templates[a])
                        .partial_cmp(&template_distance(image, &templates[b]))
                        .unwrap()
                })
                .unwrap();
            assert_eq!(nearest, label);
        }
    }

    fn write_idx_pair(
        dir: &Path,
        images: &[[u8; 16]],
        labels: &[u8],
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut image_bytes = Vec::new();
        image_bytes.extend_from_slice(&2051u32.to_be_bytes());
        image_bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
        image_bytes.extend_from_slice(&4u32.to_be_bytes());
        image_bytes.extend_from_slice(&4u32.to_be_bytes());
        for image in images {
            image_bytes.extend_from_slice(image);
        }
        let mut label_bytes = Vec::new();
        label_bytes.extend_from_slice(&2049u32.to_be_bytes());
        label_bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        label_bytes.extend_from_slice(labels);
        let images_path = dir.join("images.idx");
        let labels_path = dir.join("labels.idx");
        std::fs::write(&images_path, image_bytes).unwrap();
        std::fs::write(&labels_path, label_bytes).unwrap();
        (images_path, labels_path)
    }

    #[test]
    fn idx_loader_normalizes_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        let constant = [255u8; 16];
        let (images_path, labels_path) =
            write_idx_pair(dir.path(), &[constant, [0u8; 16]], &[1, 0]);
        let set = load_idx(&images_path, &labels_path).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.num_classes, 2);
        // 4x4 resizes to the nearest patch size, 16.
        assert_eq!(*set.images[0].shape(), Shape::d3(16, 16, 3));
        assert!(set.images[0].data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert!(set.images[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn idx_loader_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let (images_path, labels_path) = write_idx_pair(dir.path(), &[[7u8; 16]], &[0]);

        let (_, labels_short) = write_idx_pair(dir.path(), &[[7u8; 16]], &[0, 1]);
        assert!(matches!(
            load_idx(&images_path, &labels_short),
            Err(Error::CountMismatch(_))
        ));

        let bad_magic = dir.path().join("bad.idx");
        let mut bytes = std::fs::read(&images_path).unwrap();
        bytes[3] = 9;
        std::fs::write(&bad_magic, &bytes).unwrap();
        assert!(matches!(load_idx(&bad_magic, &labels_path), Err(Error::CorruptFile(_))));

        let truncated = dir.path().join("short.idx");
        let bytes = std::fs::read(&images_path).unwrap();
        std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_idx(&truncated, &labels_path), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn channel_stats_and_normalization() {
        let mut set = LabeledSet {
            images: vec![
                Tensor::filled(Shape::d3(2, 2, 3), 1.0f32).unwrap(),
                Tensor::filled(Shape::d3(2, 2, 3), 3.0f32).unwrap(),
            ],
            labels: vec![0, 1],
            num_classes: 2,
        };
        let (mean, std) = set.channel_stats().unwrap();
        assert_eq!(mean, [2.0; 3]);
        assert_eq!(std, [1.0; 3]);
        set.normalize(mean, std).unwrap();
        let (mean, std) = set.channel_stats().unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-6));
        assert!(std.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    fn mini_spec() -> FfnSpec {
        FfnSpec::new(
            "mini",
            vec![
                VdpLayerSpec::for_input(&Shape::d3(4, 4, 3), (2, 2, 3), 8, Activation::Relu)
                    .unwrap(),
                VdpLayerSpec::for_input(&Shape::d3(2, 2, 8), (2, 2, 8), 16, Activation::Relu)
                    .unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let spec = mini_spec().with_head(3).unwrap();
        let data = synth_dataset(3, 30, 4, 7).unwrap();
        let config =
            TrainConfig { epochs: 16, batch_size: 16, seed: 11, ..TrainConfig::default() };
        let a = train(&spec, &data, Some(&data), &config).unwrap();
        let b = train(&spec, &data, Some(&data), &config).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics, b.metrics);

        assert_eq!(a.metrics.len(), 17);
        assert_eq!(a.metrics[0].epoch, 0);
        let start = a.metrics[0].train_loss;
        assert!((start - 3.0f64.ln()).abs() < 0.2, "epoch-0 loss {start}");
        let end = a.metrics.last().unwrap();
        assert!(end.train_loss < start * 0.5, "loss {} -> {}", start, end.train_loss);
        assert!(end.train_acc > 0.9, "train accuracy {}", end.train_acc);
        assert_eq!(end.eval_acc.unwrap(), 1.0);

        let c = train(&spec, &data, None, &TrainConfig { seed: 12, ..config }).unwrap();
        assert_ne!(a.params, c.params);
        assert_eq!(c.metrics[0].eval_acc, None);
    }

    #[test]
    fn training_validates_inputs() {
        let spec = mini_spec();
        let data = synth_dataset(3, 2, 4, 7).unwrap();
        let config = TrainConfig::default();
        // No head attached.
        assert!(matches!(
            train(&spec, &data, None, &config),
            Err(Error::InvalidSpec(_))
        ));
        // Head class count disagrees with the dataset.
        let wrong = mini_spec().with_head(5).unwrap();
        assert!(matches!(
            train(&wrong, &data, None, &config),
            Err(Error::InvalidSpec(_))
        ));
        // Image shape disagrees with the network.
        let spec = mini_spec().with_head(3).unwrap();
        let big = synth_dataset(3, 2, 8, 7).unwrap();
        assert!(matches!(
            train(&spec, &big, None, &config),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn metrics_csv_has_the_documented_layout() {
        let rows = vec![
            EpochMetrics { epoch: 0, train_loss: 2.302585, train_acc: 0.1, eval_acc: None },
            EpochMetrics { epoch: 1, train_loss: 0.5, train_acc: 0.925, eval_acc: Some(0.9) },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "epoch,train_loss,train_acc,eval_acc\n0,2.302585,0.100000,\n1,0.500000,0.925000,0.900000\n"
        );
    }

    #[test]
    fn gradcheck_passes_for_correct_layers() {
        let vdp = VdpLayerSpec::for_input(&Shape::d3(4, 4, 2), (2, 2, 2), 3, Activation::Relu)
            .unwrap();
        let report = gradcheck_vdp(&vdp, 0).unwrap();
        assert!(report.passed(), "vdp max err {}", report.max_rel_err());

        let conv = ConvLayerSpec::standard((3, 3), (1, 1), (1, 1), 2, 3).unwrap();
        let report = gradcheck_conv(&conv, &Shape::d3(5, 5, 2), 0).unwrap();
        assert!(report.passed(), "conv max err {}", report.max_rel_err());

        let dense = DenseHeadSpec::new(6, 4).unwrap();
        let report = gradcheck_dense(&dense, 0).unwrap();
        assert!(report.passed(), "dense max err {}", report.max_rel_err());

        let report = gradcheck_network(&mini_spec().with_head(3).unwrap(), None, 0).unwrap();
        assert!(report.passed(), "network max err {}", report.max_rel_err());
        // Buffers: 4 volumes + 1 volume, two buffers each, head pair, input.
        assert_eq!(report.groups.len(), 13);
    }

    struct CorruptedProbe {
        inner: DenseProbe,
    }

    impl GradProbe for CorruptedProbe {
        fn reseed(&mut self, seed: u64) -> Result<()> {
            self.inner.reseed(seed)
        }
        fn buffer_names(&self) -> Vec<String> {
            self.inner.buffer_names()
        }
        fn buffer_lens(&self) -> Vec<usize> {
            self.inner.buffer_lens()
        }
        fn read(&self, buffer: usize, index: usize) -> f64 {
            self.inner.read(buffer, index)
        }
        fn write(&mut self, buffer: usize, index: usize, value: f64) {
            self.inner.write(buffer, index, value);
        }
        fn loss(&self) -> Result<f64> {
            self.inner.loss()
        }
        fn analytic_gradients(&self) -> Result<Vec<Vec<f64>>> {
            // A sign flip on one weight gradient: the checker must notice.
            let mut grads = self.inner.analytic_gradients()?;
            grads[0][0] = -grads[0][0];
            Ok(grads)
        }
    }

    #[test]
    fn corrupted_backward_fails_the_gradcheck() {
        let mut probe = CorruptedProbe { inner: DenseProbe::new(DenseHeadSpec::new(3, 2).unwrap()) };
        let report = run_gradcheck(&mut probe, &GradCheckOptions::default(), 0).unwrap();
        assert!(!report.passed());
        assert!(report.groups[0].max_rel_err > GRADCHECK_TOLERANCE);
        // Only the corrupted buffer fails.
        assert!(report.groups[1].max_rel_err < GRADCHECK_TOLERANCE);
        assert!(report.groups[2].max_rel_err < GRADCHECK_TOLERANCE);
    }

    #[test]
    fn gradcheck_on_a_preset_layer_subset() {
        // Exhaustive on the smallest preset layer type: a pointwise layer.
        let spec = preset(Preset::Ffn16);
        let pointwise = VdpLayerSpec::new(
            crate::tensor::VolumeGrid::new((2, 2, 1), (1, 1, 8)).unwrap(),
            4,
            spec.layers[1].activation,
        )
        .unwrap();
        let report = gradcheck_vdp(&pointwise, 3).unwrap();
        assert!(report.passed(), "max err {}", report.max_rel_err());
    }
}

//! Dense classifier head mapping the final feature vector to class logits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::xavier_limit;
use crate::tensor::{Scalar, Shape, Tensor};

/// Geometry of the head: `in_features -> num_classes`, no activation (the
/// softmax lives in the loss).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct DenseHeadSpec {
    pub in_features: usize,
    pub num_classes: usize,
}

impl DenseHeadSpec {
    pub fn new(in_features: usize, num_classes: usize) -> Result<Self> {
        if in_features == 0 || num_classes == 0 {
            return Err(Error::InvalidSpec(format!(
                "dense head needs positive dimensions, got {in_features} -> {num_classes}"
            )));
        }
        Ok(DenseHeadSpec { in_features, num_classes })
    }

    pub fn parameter_count(&self) -> u64 {
        (self.in_features * self.num_classes + self.num_classes) as u64
    }
}

/// Head weights, a flattened `in_features x num_classes` matrix (row-major,
/// class index fast) plus a bias vector.
#[derive(Clone, PartialEq, Debug)]
pub struct DenseParams<T> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn zeros(spec: &DenseHeadSpec) -> Self {
        DenseParams {
            weights: Tensor::zeros(Shape::new(&[spec.in_features, spec.num_classes]).unwrap()),
            bias: vec![T::zero(); spec.num_classes],
        }
    }

    pub fn init(spec: &DenseHeadSpec, rng: &mut ChaCha8Rng) -> Self {
        let limit = xavier_limit(spec.in_features, spec.num_classes);
        let mut params = DenseParams::zeros(spec);
        for value in params.weights.data_mut() {
            *value = T::from_f64(rng.random_range(-limit..limit));
        }
        params
    }

    pub fn conforms(&self, spec: &DenseHeadSpec) -> Result<()> {
        let expected = Shape::new(&[spec.in_features, spec.num_classes]).unwrap();
        if *self.weights.shape() != expected || self.bias.len() != spec.num_classes {
            return Err(Error::InvalidSpec(format!(
                "dense params with weights {} and {} biases do not fit {} -> {}",
                self.weights.shape(),
                self.bias.len(),
                spec.in_features,
                spec.num_classes
            )));
        }
        Ok(())
    }
}

/// Computes `W^T f + b`.
pub fn dense_forward<T: Scalar>(
    spec: &DenseHeadSpec,
    params: &DenseParams<T>,
    feature: &[T],
) -> Result<Vec<T>> {
    params.conforms(spec)?;
    if feature.len() != spec.in_features {
        return Err(Error::ShapeMismatch(format!(
            "head expects {} features, got {}",
            spec.in_features,
            feature.len()
        )));
    }
    let classes = spec.num_classes;
    let mut logits = params.bias.clone();
    let weights = params.weights.data();
    for (i, &f) in feature.iter().enumerate() {
        let row = &weights[i * classes..(i + 1) * classes];
        for (acc, &w) in logits.iter_mut().zip(row) {
            *acc += w * f;
        }
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("dense_forward produced {bad}")));
    }
    Ok(logits)
}

/// Backward pass. Returns `(parameter gradients, feature gradient)`.
pub fn dense_backward<T: Scalar>(
    spec: &DenseHeadSpec,
    params: &DenseParams<T>,
    feature: &[T],
    grad_logits: &[T],
) -> Result<(DenseParams<T>, Vec<T>)> {
    params.conforms(spec)?;
    if feature.len() != spec.in_features || grad_logits.len() != spec.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "dense_backward got {} features and {} logit gradients for a {} -> {} head",
            feature.len(),
            grad_logits.len(),
            spec.in_features,
            spec.num_classes
        )));
    }
    let classes = spec.num_classes;
    let mut grads = DenseParams::zeros(spec);
    grads.bias.copy_from_slice(grad_logits);
    let weights = params.weights.data();
    let mut grad_feature = vec![T::zero(); spec.in_features];
    for (i, &f) in feature.iter().enumerate() {
        let w_row = &weights[i * classes..(i + 1) * classes];
        let g_row = &mut grads.weights.data_mut()[i * classes..(i + 1) * classes];
        let mut acc = T::zero();
        for o in 0..classes {
            g_row[o] = f * grad_logits[o];
            acc += w_row[o] * grad_logits[o];
        }
        grad_feature[i] = acc;
    }
    if let Some(bad) = grad_feature.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("dense_backward produced {bad}")));
    }
    Ok((grads, grad_feature))
}

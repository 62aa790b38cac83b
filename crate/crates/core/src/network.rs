//! Whole-network specification and execution.
//!
//! An FFN is a chain of [`VdpLayerSpec`]s whose shapes must line up exactly,
//! optionally followed by a dense classifier head. The last layer's output is
//! flattened row-major into the feature vector; inverted dropout is applied
//! to that vector (and nowhere else) during training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{
    dense_backward, dense_forward, dropout, vdp_backward_cached, vdp_forward_cached, Activation,
    DenseHeadSpec, DenseParams, VdpLayerParams, VdpLayerSpec,
};
use crate::tensor::{Scalar, Shape, Tensor, VolumeGrid};

/// Default dropout rate on the final feature vector.
pub const DEFAULT_DROPOUT_RATE: f64 = 0.25;

/// Network architecture: VDP layer chain plus optional classifier head.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct FfnSpec {
    pub name: String,
    pub layers: Vec<VdpLayerSpec>,
    #[serde(default)]
    pub head: Option<DenseHeadSpec>,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
}

fn default_dropout() -> f64 {
    DEFAULT_DROPOUT_RATE
}

impl FfnSpec {
    pub fn new(name: impl Into<String>, layers: Vec<VdpLayerSpec>) -> Result<Self> {
        let spec = FfnSpec {
            name: name.into(),
            layers,
            head: None,
            dropout_rate: DEFAULT_DROPOUT_RATE,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks chain consistency: every layer's input shape must equal the
    /// previous layer's output shape, the head (if any) must match the
    /// flattened feature length, and the dropout rate must lie in `[0, 1)`.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec(format!("network {:?} has no layers", self.name)));
        }
        for layer in &self.layers {
            layer.grid.validate()?;
        }
        for (idx, pair) in self.layers.windows(2).enumerate() {
            let produced = pair[0].output_shape();
            let expected = pair[1].input_shape();
            if produced != expected {
                return Err(Error::InvalidSpec(format!(
                    "layer {} expects input {expected} but layer {} produces {produced}",
                    idx + 1,
                    idx
                )));
            }
        }
        if let Some(head) = &self.head {
            if head.in_features != self.feature_len() {
                return Err(Error::InvalidSpec(format!(
                    "head expects {} features but the last layer yields {}",
                    head.in_features,
                    self.feature_len()
                )));
            }
            DenseHeadSpec::new(head.in_features, head.num_classes)?;
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidSpec(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Shape the network consumes.
    pub fn input_shape(&self) -> Shape {
        self.layers[0].input_shape()
    }

    /// Length of the flattened final feature vector.
    pub fn feature_len(&self) -> usize {
        self.layers.last().map(|l| l.output_shape().numel()).unwrap_or(0)
    }

    /// Attaches a classifier head sized to the feature vector.
    pub fn with_head(mut self, num_classes: usize) -> Result<Self> {
        self.head = Some(DenseHeadSpec::new(self.feature_len(), num_classes)?);
        self.validate()?;
        Ok(self)
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        self.dropout_rate = rate;
        self.validate()?;
        Ok(self)
    }

    /// Serializes to human-editable JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialization cannot fail")
    }

    /// Parses and validates a spec from JSON.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: FfnSpec = serde_json::from_str(text)
            .map_err(|err| Error::InvalidSpec(format!("spec JSON: {err}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Canonical encoding used for digests: compact JSON with fields in
    /// declaration order.
    pub fn canonical_encoding(&self) -> String {
        serde_json::to_string(self).expect("spec serialization cannot fail")
    }

    /// SHA-256 of the canonical encoding; identifies the spec in checkpoints.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_encoding().as_bytes()).into()
    }
}

/// The three published network sizes, named by their input resolution.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Preset {
    Ffn16,
    Ffn32,
    Ffn96,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Ffn16, Preset::Ffn32, Preset::Ffn96];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Ffn16 => "ffn16",
            Preset::Ffn32 => "ffn32",
            Preset::Ffn96 => "ffn96",
        }
    }

    /// Side length of the square input patch.
    pub fn patch_size(self) -> usize {
        match self {
            Preset::Ffn16 => 16,
            Preset::Ffn32 => 32,
            Preset::Ffn96 => 96,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(text: &str) -> Result<Self> {
        match text {
            "ffn16" => Ok(Preset::Ffn16),
            "ffn32" => Ok(Preset::Ffn32),
            "ffn96" => Ok(Preset::Ffn96),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset {other:?}, expected ffn16, ffn32, or ffn96"
            ))),
        }
    }
}

/// Builds one of the published architectures (no head attached).
pub fn preset(which: Preset) -> FfnSpec {
    let rows: &[((usize, usize, usize), (usize, usize, usize), usize)] = match which {
        Preset::Ffn16 => &[
            ((4, 4, 3), (4, 4, 1), 64),
            ((1, 1, 64), (4, 4, 1), 64),
            ((2, 2, 64), (2, 2, 1), 256),
            ((1, 1, 256), (2, 2, 1), 256),
            ((2, 2, 64), (1, 1, 4), 256),
            ((1, 1, 1024), (1, 1, 1), 1024),
        ],
        Preset::Ffn32 => &[
            ((4, 4, 3), (8, 8, 1), 64),
            ((1, 1, 64), (8, 8, 1), 64),
            ((2, 2, 64), (4, 4, 1), 256),
            ((1, 1, 256), (4, 4, 1), 256),
            ((2, 2, 64), (2, 2, 4), 256),
            ((1, 1, 1024), (2, 2, 1), 1024),
            ((2, 2, 64), (1, 1, 16), 128),
            ((1, 1, 2048), (1, 1, 1), 2048),
        ],
        Preset::Ffn96 => &[
            ((6, 6, 3), (16, 16, 1), 64),
            ((1, 1, 64), (16, 16, 1), 64),
            ((2, 2, 64), (8, 8, 1), 256),
            ((1, 1, 256), (8, 8, 1), 256),
            ((2, 2, 64), (4, 4, 4), 256),
            ((1, 1, 1024), (4, 4, 1), 1024),
            ((2, 2, 64), (2, 2, 16), 128),
            ((1, 1, 2048), (2, 2, 1), 2048),
            ((2, 2, 64), (1, 1, 32), 128),
            ((1, 1, 4096), (1, 1, 1), 4096),
        ],
    };
    let layers: Vec<VdpLayerSpec> = rows
        .iter()
        .map(|&(volume, counts, out)| {
            let grid = VolumeGrid::new(counts, volume).expect("preset grid is valid");
            VdpLayerSpec::new(grid, out, Activation::Relu).expect("preset layer is valid")
        })
        .collect();
    FfnSpec::new(which.name(), layers).expect("preset chain is consistent")
}

/// All trainable parameters of a network.
///
/// Buffer order (used by optimizers and checkpoints): for each layer in
/// order, for each volume in row-major order, the weight matrix then the
/// bias; finally the head weights then the head bias.
#[derive(Clone, PartialEq, Debug)]
pub struct FfnParams<T> {
    pub layers: Vec<VdpLayerParams<T>>,
    pub head: Option<DenseParams<T>>,
}

impl<T: Scalar> FfnParams<T> {
    pub fn zeros(spec: &FfnSpec) -> Self {
        FfnParams {
            layers: spec.layers.iter().map(VdpLayerParams::zeros).collect(),
            head: spec.head.as_ref().map(DenseParams::zeros),
        }
    }

    /// Seed-deterministic initialization: a single ChaCha8 stream drawn in
    /// buffer order.
    pub fn init(spec: &FfnSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FfnParams {
            layers: spec.layers.iter().map(|l| VdpLayerParams::init(l, &mut rng)).collect(),
            head: spec.head.as_ref().map(|h| DenseParams::init(h, &mut rng)),
        }
    }

    pub fn conforms(&self, spec: &FfnSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::InvalidSpec(format!(
                "params hold {} layers, spec has {}",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        for (layer_params, layer_spec) in self.layers.iter().zip(&spec.layers) {
            layer_params.conforms(layer_spec)?;
        }
        match (&self.head, &spec.head) {
            (Some(params), Some(head)) => params.conforms(head)?,
            (None, None) => {}
            _ => {
                return Err(Error::InvalidSpec(
                    "params and spec disagree on the presence of a head".into(),
                ))
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> u64 {
        let mut total: u64 = self.layers.iter().map(|l| l.parameter_count()).sum();
        if let Some(head) = &self.head {
            total += head.weights.shape().numel() as u64 + head.bias.len() as u64;
        }
        total
    }

    /// All parameter buffers in the documented order.
    pub fn buffers(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for (weight, bias) in layer.weights.iter().zip(&layer.biases) {
                out.push(weight.as_slice());
                out.push(bias.as_slice());
            }
        }
        if let Some(head) = &self.head {
            out.push(head.weights.data());
            out.push(head.bias.as_slice());
        }
        out
    }

    /// Mutable view of all parameter buffers in the documented order.
    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            let VdpLayerParams { weights, biases } = layer;
            for (weight, bias) in weights.iter_mut().zip(biases.iter_mut()) {
                out.push(weight.as_mut_slice());
                out.push(bias.as_mut_slice());
            }
        }
        if let Some(head) = &mut self.head {
            out.push(head.weights.data_mut());
            out.push(head.bias.as_mut_slice());
        }
        out
    }
}

/// Result of an inference pass.
pub struct FfnOutput<T> {
    pub feature: Vec<T>,
    pub logits: Option<Vec<T>>,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache<T> {
    pub layer_inputs: Vec<Tensor<T>>,
    pub pre_activations: Vec<Tensor<T>>,
    /// Flattened last-layer output, before dropout.
    pub feature: Vec<T>,
    /// Dropout mask over the feature vector (all ones when not training).
    pub dropout_mask: Vec<T>,
    /// Feature vector after dropout; input to the head.
    pub dropped_feature: Vec<T>,
    pub logits: Option<Vec<T>>,
}

/// Inference forward pass: no dropout, logits only when a head is attached.
pub fn ffn_forward<T: Scalar>(
    spec: &FfnSpec,
    params: &FfnParams<T>,
    input: &Tensor<T>,
) -> Result<FfnOutput<T>> {
    let cache = ffn_forward_cached(spec, params, input, None)?;
    Ok(FfnOutput { feature: cache.feature, logits: cache.logits })
}

/// Forward pass retaining per-layer caches. Pass `Some((rate, rng))` to apply
/// inverted dropout to the feature vector (training mode).
pub fn ffn_forward_cached<T: Scalar>(
    spec: &FfnSpec,
    params: &FfnParams<T>,
    input: &Tensor<T>,
    dropout_rng: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<ForwardCache<T>> {
    spec.validate()?;
    params.conforms(spec)?;
    let expected = spec.input_shape();
    if *input.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "network {:?} expects input {expected}, got {}",
            spec.name,
            input.shape()
        )));
    }

    let mut layer_inputs = Vec::with_capacity(spec.layers.len());
    let mut pre_activations = Vec::with_capacity(spec.layers.len());
    let mut current = input.clone();
    for (idx, (layer, layer_params)) in spec.layers.iter().zip(&params.layers).enumerate() {
        let (output, pre) =
            vdp_forward_cached(layer, layer_params, &current).map_err(|err| at_layer(idx, err))?;
        layer_inputs.push(std::mem::replace(&mut current, output));
        pre_activations.push(pre);
    }

    let feature = current.data().to_vec();
    let (dropped_feature, dropout_mask) = match dropout_rng {
        Some((rate, rng)) => dropout(&feature, rate, rng, true)?,
        None => (feature.clone(), vec![T::one(); feature.len()]),
    };
    let logits = match (&spec.head, &params.head) {
        (Some(head), Some(head_params)) => {
            Some(dense_forward(head, head_params, &dropped_feature)?)
        }
        _ => None,
    };
    Ok(ForwardCache {
        layer_inputs,
        pre_activations,
        feature,
        dropout_mask,
        dropped_feature,
        logits,
    })
}

/// Where the loss gradient enters the backward pass.
pub enum OutputGrad<'a, T> {
    /// Gradient with respect to the logits; requires a head.
    Logits(&'a [T]),
    /// Gradient with respect to the (post-dropout) feature vector.
    Feature(&'a [T]),
}

/// Gradients of everything, mirroring [`FfnParams`] plus the input gradient.
pub struct FfnGrads<T> {
    pub layers: Vec<VdpLayerParams<T>>,
    pub head: Option<DenseParams<T>>,
    pub grad_input: Tensor<T>,
}

impl<T: Scalar> FfnGrads<T> {
    pub fn zeros(spec: &FfnSpec) -> Self {
        FfnGrads {
            layers: spec.layers.iter().map(VdpLayerParams::zeros).collect(),
            head: spec.head.as_ref().map(DenseParams::zeros),
            grad_input: Tensor::zeros(spec.input_shape()),
        }
    }

    /// Adds another gradient's parameter buffers into this one.
    pub fn accumulate(&mut self, other: &FfnGrads<T>) -> Result<()> {
        let mut dst = self.buffers_mut();
        let src = other.buffers();
        if dst.len() != src.len() {
            return Err(Error::ShapeMismatch("gradient structures differ".into()));
        }
        for (d, s) in dst.iter_mut().zip(src) {
            if d.len() != s.len() {
                return Err(Error::ShapeMismatch("gradient buffer lengths differ".into()));
            }
            for (a, &b) in d.iter_mut().zip(s) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Scales every parameter-gradient buffer in place.
    pub fn scale(&mut self, factor: T) {
        for buffer in self.buffers_mut() {
            for value in buffer {
                *value *= factor;
            }
        }
    }

    /// Parameter-gradient buffers in [`FfnParams`] buffer order (the input
    /// gradient is not a parameter and is excluded).
    pub fn buffers(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for (weight, bias) in layer.weights.iter().zip(&layer.biases) {
                out.push(weight.as_slice());
                out.push(bias.as_slice());
            }
        }
        if let Some(head) = &self.head {
            out.push(head.weights.data());
            out.push(head.bias.as_slice());
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            let VdpLayerParams { weights, biases } = layer;
            for (weight, bias) in weights.iter_mut().zip(biases.iter_mut()) {
                out.push(weight.as_mut_slice());
                out.push(bias.as_mut_slice());
            }
        }
        if let Some(head) = &mut self.head {
            out.push(head.weights.data_mut());
            out.push(head.bias.as_mut_slice());
        }
        out
    }
}

/// Backward pass through the whole network from a cached forward pass.
pub fn ffn_backward<T: Scalar>(
    spec: &FfnSpec,
    params: &FfnParams<T>,
    cache: &ForwardCache<T>,
    output_grad: OutputGrad<'_, T>,
) -> Result<FfnGrads<T>> {
    params.conforms(spec)?;
    let feature_len = spec.feature_len();

    let (head_grads, mut grad_feature) = match output_grad {
        OutputGrad::Logits(grad_logits) => {
            let (head, head_params) = match (&spec.head, &params.head) {
                (Some(head), Some(head_params)) => (head, head_params),
                _ => {
                    return Err(Error::InvalidSpec(
                        "logit gradient supplied but the network has no head".into(),
                    ))
                }
            };
            let (grads, grad_feature) =
                dense_backward(head, head_params, &cache.dropped_feature, grad_logits)?;
            (Some(grads), grad_feature)
        }
        OutputGrad::Feature(grad) => {
            if grad.len() != feature_len {
                return Err(Error::ShapeMismatch(format!(
                    "feature gradient length {} does not match feature length {feature_len}",
                    grad.len()
                )));
            }
            let head_grads = params.head.as_ref().map(|head| DenseParams {
                weights: Tensor::zeros(head.weights.shape().clone()),
                bias: vec![T::zero(); head.bias.len()],
            });
            (head_grads, grad.to_vec())
        }
    };

    if cache.dropout_mask.len() != feature_len {
        return Err(Error::ShapeMismatch("cache does not match this network".into()));
    }
    for (g, &m) in grad_feature.iter_mut().zip(&cache.dropout_mask) {
        *g *= m;
    }

    let last_shape = spec.layers.last().expect("validated spec has layers").output_shape();
    let mut grad_current = Tensor::new(last_shape, grad_feature)?;
    let mut layer_grads = Vec::with_capacity(spec.layers.len());
    for idx in (0..spec.layers.len()).rev() {
        let (grads, grad_input) = vdp_backward_cached(
            &spec.layers[idx],
            &params.layers[idx],
            &cache.layer_inputs[idx],
            &cache.pre_activations[idx],
            &grad_current,
        )
        .map_err(|err| at_layer(idx, err))?;
        layer_grads.push(grads);
        grad_current = grad_input;
    }
    layer_grads.reverse();
    Ok(FfnGrads { layers: layer_grads, head: head_grads, grad_input: grad_current })
}

/// Prefixes an error message with the index of the layer that raised it.
fn at_layer(idx: usize, err: Error) -> Error {
    match err {
        Error::NonFinite(msg) => Error::NonFinite(format!("layer {idx}: {msg}")),
        Error::ShapeMismatch(msg) => Error::ShapeMismatch(format!("layer {idx}: {msg}")),
        Error::InvalidSpec(msg) => Error::InvalidSpec(format!("layer {idx}: {msg}")),
        other => other,
    }
}

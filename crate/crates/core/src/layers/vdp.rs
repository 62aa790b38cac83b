//! Volume-wise dot product layer.
//!
//! The input is partitioned into non-overlapping hyper-volumes and every
//! volume gets its own weight matrix and bias: there is no parameter sharing
//! between positions. Volume `(i, j, k)` produces `volume_output` values via
//! `activation(W^T x + b)`; outputs keep the spatial grid `(n_h, n_w)` and
//! concatenate the channel groups, so the layer output has shape
//! `(n_h, n_w, n_c * volume_output)` with group `k` occupying channels
//! `[k * volume_output, (k + 1) * volume_output)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{xavier_limit, Activation};
use crate::tensor::{Scalar, Shape, Tensor, VolumeGrid};

/// Geometry and activation of one VDP layer.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct VdpLayerSpec {
    pub grid: VolumeGrid,
    pub volume_output: usize,
    pub activation: Activation,
}

impl VdpLayerSpec {
    /// Builds a layer for `input_shape` from volume extents alone; the volume
    /// counts are derived and must divide the input exactly.
    pub fn for_input(
        input_shape: &Shape,
        volume: (usize, usize, usize),
        volume_output: usize,
        activation: Activation,
    ) -> Result<Self> {
        let grid = VolumeGrid::for_input(input_shape, volume)?;
        VdpLayerSpec::new(grid, volume_output, activation)
    }

    pub fn new(grid: VolumeGrid, volume_output: usize, activation: Activation) -> Result<Self> {
        grid.validate()?;
        if volume_output == 0 {
            return Err(Error::InvalidSpec("volume_output must be positive".into()));
        }
        Ok(VdpLayerSpec { grid, volume_output, activation })
    }

    pub fn input_shape(&self) -> Shape {
        self.grid.input_shape()
    }

    /// Output shape `(n_h, n_w, n_c * volume_output)`.
    pub fn output_shape(&self) -> Shape {
        Shape::d3(self.grid.n_h, self.grid.n_w, self.grid.n_c * self.volume_output)
    }

    /// Total scalar parameters: one `volume_numel x volume_output` matrix and
    /// one bias vector per volume.
    pub fn parameter_count(&self) -> u64 {
        let per_volume = self.grid.volume_numel() as u64 * self.volume_output as u64
            + self.volume_output as u64;
        self.grid.volume_count() as u64 * per_volume
    }
}

/// Per-volume weights and biases of a VDP layer.
///
/// `weights[v]` is the flattened `volume_numel x volume_output` matrix of
/// volume `v` (row-major: input element index slow, output index fast) and
/// `biases[v]` its bias vector, with `v` ordered row-major by `(i, j, k)`.
#[derive(Clone, PartialEq, Debug)]
pub struct VdpLayerParams<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> VdpLayerParams<T> {
    pub fn zeros(spec: &VdpLayerSpec) -> Self {
        let volumes = spec.grid.volume_count();
        let weight_len = spec.grid.volume_numel() * spec.volume_output;
        VdpLayerParams {
            weights: vec![vec![T::zero(); weight_len]; volumes],
            biases: vec![vec![T::zero(); spec.volume_output]; volumes],
        }
    }

    /// Symmetric uniform initialization with limit
    /// `sqrt(6 / (volume_numel + volume_output))`; biases start at zero.
    pub fn init(spec: &VdpLayerSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut params = VdpLayerParams::zeros(spec);
        let limit = xavier_limit(spec.grid.volume_numel(), spec.volume_output);
        for weight in &mut params.weights {
            for value in weight.iter_mut() {
                *value = T::from_f64(rng.random_range(-limit..limit));
            }
        }
        params
    }

    /// Checks buffer counts and lengths against a spec.
    pub fn conforms(&self, spec: &VdpLayerSpec) -> Result<()> {
        let volumes = spec.grid.volume_count();
        let weight_len = spec.grid.volume_numel() * spec.volume_output;
        if self.weights.len() != volumes || self.biases.len() != volumes {
            return Err(Error::InvalidSpec(format!(
                "expected {volumes} volumes, got {} weight and {} bias buffers",
                self.weights.len(),
                self.biases.len()
            )));
        }
        for (v, (weight, bias)) in self.weights.iter().zip(&self.biases).enumerate() {
            if weight.len() != weight_len || bias.len() != spec.volume_output {
                return Err(Error::InvalidSpec(format!(
                    "volume {v}: weight len {} (want {weight_len}), bias len {} (want {})",
                    weight.len(),
                    bias.len(),
                    spec.volume_output
                )));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> u64 {
        let weights: usize = self.weights.iter().map(Vec::len).sum();
        let biases: usize = self.biases.iter().map(Vec::len).sum();
        (weights + biases) as u64
    }
}

/// Runs the layer forward. Output shape is `spec.output_shape()`.
pub fn vdp_forward<T: Scalar>(
    spec: &VdpLayerSpec,
    params: &VdpLayerParams<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (output, _) = vdp_forward_cached(spec, params, input)?;
    Ok(output)
}

/// Forward pass that also returns the pre-activation tensor needed by
/// [`vdp_backward_cached`]. Both tensors have shape `spec.output_shape()`.
pub fn vdp_forward_cached<T: Scalar>(
    spec: &VdpLayerSpec,
    params: &VdpLayerParams<T>,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let grid = &spec.grid;
    grid.check_input(input.shape())?;
    params.conforms(spec)?;
    let out = spec.volume_output;
    let volume_numel = grid.volume_numel();
    let mut pre = Tensor::zeros(spec.output_shape());
    let mut volume_in = vec![T::zero(); volume_numel];

    // Output layout: volume (i, j, k) owns the contiguous run
    // [volume_index * out, (volume_index + 1) * out).
    for i in 0..grid.n_h {
        for j in 0..grid.n_w {
            for k in 0..grid.n_c {
                let v = grid.volume_index(i, j, k);
                grid.copy_volume(input, i, j, k, &mut volume_in);
                let weight = &params.weights[v];
                let run = &mut pre.data_mut()[v * out..(v + 1) * out];
                run.copy_from_slice(&params.biases[v]);
                for (p, &x) in volume_in.iter().enumerate() {
                    let row = &weight[p * out..(p + 1) * out];
                    for (acc, &w) in run.iter_mut().zip(row) {
                        *acc += w * x;
                    }
                }
            }
        }
    }
    pre.check_finite("vdp_forward pre-activation")?;
    let output = Tensor::from_fn(spec.output_shape(), |idx| {
        spec.activation.apply(pre.data()[idx])
    })?;
    Ok((output, pre))
}

/// Backward pass. Returns `(parameter gradients, input gradient)`; the
/// parameter gradients reuse the [`VdpLayerParams`] layout.
///
/// Recomputes the forward pre-activations internally; use
/// [`vdp_backward_cached`] when they are already available.
pub fn vdp_backward<T: Scalar>(
    spec: &VdpLayerSpec,
    params: &VdpLayerParams<T>,
    input: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<(VdpLayerParams<T>, Tensor<T>)> {
    let (_, pre) = vdp_forward_cached(spec, params, input)?;
    vdp_backward_cached(spec, params, input, &pre, grad_output)
}

/// Backward pass given the cached pre-activation tensor from
/// [`vdp_forward_cached`].
pub fn vdp_backward_cached<T: Scalar>(
    spec: &VdpLayerSpec,
    params: &VdpLayerParams<T>,
    input: &Tensor<T>,
    pre: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<(VdpLayerParams<T>, Tensor<T>)> {
    let grid = &spec.grid;
    grid.check_input(input.shape())?;
    params.conforms(spec)?;
    let expected = spec.output_shape();
    if *grad_output.shape() != expected || *pre.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "vdp_backward expects output-shaped tensors {expected}, got gradient {} and pre-activation {}",
            grad_output.shape(),
            pre.shape()
        )));
    }

    let out = spec.volume_output;
    let volume_numel = grid.volume_numel();
    let mut grads = VdpLayerParams::zeros(spec);
    let mut grad_input = Tensor::zeros(grid.input_shape());
    let mut volume_in = vec![T::zero(); volume_numel];
    let mut delta = vec![T::zero(); out];
    let mut volume_grad = vec![T::zero(); volume_numel];

    for i in 0..grid.n_h {
        for j in 0..grid.n_w {
            for k in 0..grid.n_c {
                let v = grid.volume_index(i, j, k);
                grid.copy_volume(input, i, j, k, &mut volume_in);
                let pre_run = &pre.data()[v * out..(v + 1) * out];
                let grad_run = &grad_output.data()[v * out..(v + 1) * out];
                for o in 0..out {
                    delta[o] = grad_run[o] * spec.activation.derivative(pre_run[o]);
                }
                grads.biases[v].copy_from_slice(&delta);
                let weight = &params.weights[v];
                let grad_weight = &mut grads.weights[v];
                for (p, &x) in volume_in.iter().enumerate() {
                    let weight_row = &weight[p * out..(p + 1) * out];
                    let grad_row = &mut grad_weight[p * out..(p + 1) * out];
                    let mut acc = T::zero();
                    for o in 0..out {
                        grad_row[o] = x * delta[o];
                        acc += weight_row[o] * delta[o];
                    }
                    volume_grad[p] = acc;
                }
                grid.write_volume(&mut grad_input, i, j, k, &volume_grad);
            }
        }
    }
    grad_input.check_finite("vdp_backward input gradient")?;
    Ok((grads, grad_input))
}

//! 2-D convolution layers used as comparison baselines.
//!
//! Both standard and depthwise modes are purely linear (bias included, no
//! activation); stacks that need nonlinearities apply [`Activation`] between
//! layers. Padding is zero-filled and symmetric, and the output spatial size
//! `(dim + 2 * pad - kernel) / stride + 1` must come out as a positive
//! integer, fractional windows are rejected rather than floored.
//!
//! [`Activation`]: crate::layers::Activation

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::xavier_limit;
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    /// Every output channel sees every input channel.
    Standard,
    /// One filter per channel; `out_channels` equals `in_channels`.
    Depthwise,
}

/// Geometry of one convolution layer.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub mode: ConvMode,
}

impl ConvLayerSpec {
    pub fn standard(
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let spec = ConvLayerSpec {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
            mode: ConvMode::Standard,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn depthwise(
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        channels: usize,
    ) -> Result<Self> {
        let spec = ConvLayerSpec {
            kernel,
            stride,
            padding,
            in_channels: channels,
            out_channels: channels,
            mode: ConvMode::Depthwise,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::InvalidSpec(format!(
                "kernel and stride must be positive: kernel {:?}, stride {:?}",
                self.kernel, self.stride
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidSpec("channel counts must be positive".into()));
        }
        if self.mode == ConvMode::Depthwise && self.in_channels != self.out_channels {
            return Err(Error::InvalidSpec(format!(
                "depthwise layers keep the channel count, got {} in and {} out",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    fn output_extent(dim: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
        let padded = dim + 2 * pad;
        if padded < kernel {
            return Err(Error::ShapeMismatch(format!(
                "kernel {kernel} exceeds padded extent {padded}"
            )));
        }
        let span = padded - kernel;
        if span % stride != 0 {
            return Err(Error::ShapeMismatch(format!(
                "stride {stride} does not evenly cover extent {dim} with kernel {kernel} and padding {pad}"
            )));
        }
        Ok(span / stride + 1)
    }

    /// Output shape for the given input, or an error when the window
    /// arithmetic does not come out exact.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        let (h, w, c) = input.dims3()?;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "layer expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let out_h = Self::output_extent(h, self.kernel.0, self.stride.0, self.padding.0)?;
        let out_w = Self::output_extent(w, self.kernel.1, self.stride.1, self.padding.1)?;
        Ok(Shape::d3(out_h, out_w, self.out_channels))
    }

    /// Weight tensor shape: `[k_h, k_w, in, out]` standard,
    /// `[k_h, k_w, channels]` depthwise.
    pub fn weight_shape(&self) -> Shape {
        match self.mode {
            ConvMode::Standard => Shape::new(&[
                self.kernel.0,
                self.kernel.1,
                self.in_channels,
                self.out_channels,
            ])
            .expect("validated spec has positive extents"),
            ConvMode::Depthwise => Shape::d3(self.kernel.0, self.kernel.1, self.in_channels),
        }
    }
}

/// Weights and bias of a convolution layer.
#[derive(Clone, PartialEq, Debug)]
pub struct ConvParams<T> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(spec: &ConvLayerSpec) -> Self {
        ConvParams {
            weights: Tensor::zeros(spec.weight_shape()),
            bias: vec![T::zero(); spec.out_channels],
        }
    }

    pub fn init(spec: &ConvLayerSpec, rng: &mut ChaCha8Rng) -> Self {
        let receptive = spec.kernel.0 * spec.kernel.1;
        let (fan_in, fan_out) = match spec.mode {
            ConvMode::Standard => (receptive * spec.in_channels, receptive * spec.out_channels),
            ConvMode::Depthwise => (receptive, receptive),
        };
        let limit = xavier_limit(fan_in, fan_out);
        let mut params = ConvParams::zeros(spec);
        for value in params.weights.data_mut() {
            *value = T::from_f64(rng.random_range(-limit..limit));
        }
        params
    }

    pub fn conforms(&self, spec: &ConvLayerSpec) -> Result<()> {
        if *self.weights.shape() != spec.weight_shape() || self.bias.len() != spec.out_channels {
            return Err(Error::InvalidSpec(format!(
                "conv params with weights {} and {} biases do not fit spec {:?}",
                self.weights.shape(),
                self.bias.len(),
                spec
            )));
        }
        Ok(())
    }
}

/// Runs the convolution forward (linear, bias included, no activation).
pub fn conv_forward<T: Scalar>(
    spec: &ConvLayerSpec,
    params: &ConvParams<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    params.conforms(spec)?;
    let out_shape = spec.output_shape(input.shape())?;
    let (out_h, out_w, out_c) = out_shape.dims3()?;
    let (in_h, in_w, in_c) = input.shape().dims3()?;
    let (k_h, k_w) = spec.kernel;
    let mut output = Tensor::zeros(out_shape.clone());
    let in_data = input.data();
    let w_data = params.weights.data();

    for y in 0..out_h {
        for x in 0..out_w {
            let run = &mut output.data_mut()[(y * out_w + x) * out_c..][..out_c];
            run.copy_from_slice(&params.bias);
            for dy in 0..k_h {
                let iy = (y * spec.stride.0 + dy) as isize - spec.padding.0 as isize;
                if iy < 0 || iy >= in_h as isize {
                    continue;
                }
                for dx in 0..k_w {
                    let ix = (x * spec.stride.1 + dx) as isize - spec.padding.1 as isize;
                    if ix < 0 || ix >= in_w as isize {
                        continue;
                    }
                    let in_run = &in_data[(iy as usize * in_w + ix as usize) * in_c..][..in_c];
                    match spec.mode {
                        ConvMode::Standard => {
                            for (ic, &value) in in_run.iter().enumerate() {
                                let w_run =
                                    &w_data[((dy * k_w + dx) * in_c + ic) * out_c..][..out_c];
                                for (acc, &w) in run.iter_mut().zip(w_run) {
                                    *acc += w * value;
                                }
                            }
                        }
                        ConvMode::Depthwise => {
                            let w_run = &w_data[(dy * k_w + dx) * in_c..][..in_c];
                            for ((acc, &w), &value) in run.iter_mut().zip(w_run).zip(in_run) {
                                *acc += w * value;
                            }
                        }
                    }
                }
            }
        }
    }
    output.check_finite("conv_forward")?;
    Ok(output)
}

/// Backward pass. Returns `(parameter gradients, input gradient)`.
pub fn conv_backward<T: Scalar>(
    spec: &ConvLayerSpec,
    params: &ConvParams<T>,
    input: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<(ConvParams<T>, Tensor<T>)> {
    params.conforms(spec)?;
    let out_shape = spec.output_shape(input.shape())?;
    if *grad_output.shape() != out_shape {
        return Err(Error::ShapeMismatch(format!(
            "conv_backward expects gradient shape {out_shape}, got {}",
            grad_output.shape()
        )));
    }
    let (out_h, out_w, out_c) = out_shape.dims3()?;
    let (in_h, in_w, in_c) = input.shape().dims3()?;
    let (k_h, k_w) = spec.kernel;
    let mut grads = ConvParams::zeros(spec);
    let mut grad_input = Tensor::zeros(input.shape().clone());
    let in_data = input.data();
    let w_data = params.weights.data();

    for y in 0..out_h {
        for x in 0..out_w {
            let g_run = &grad_output.data()[(y * out_w + x) * out_c..][..out_c];
            for (acc, &g) in grads.bias.iter_mut().zip(g_run) {
                *acc += g;
            }
            for dy in 0..k_h {
                let iy = (y * spec.stride.0 + dy) as isize - spec.padding.0 as isize;
                if iy < 0 || iy >= in_h as isize {
                    continue;
                }
                for dx in 0..k_w {
                    let ix = (x * spec.stride.1 + dx) as isize - spec.padding.1 as isize;
                    if ix < 0 || ix >= in_w as isize {
                        continue;
                    }
                    let in_base = (iy as usize * in_w + ix as usize) * in_c;
                    match spec.mode {
                        ConvMode::Standard => {
                            for ic in 0..in_c {
                                let value = in_data[in_base + ic];
                                let w_base = ((dy * k_w + dx) * in_c + ic) * out_c;
                                let w_run = &w_data[w_base..][..out_c];
                                let gw_run = &mut grads.weights.data_mut()[w_base..][..out_c];
                                let mut acc = T::zero();
                                for o in 0..out_c {
                                    gw_run[o] += value * g_run[o];
                                    acc += w_run[o] * g_run[o];
                                }
                                grad_input.data_mut()[in_base + ic] += acc;
                            }
                        }
                        ConvMode::Depthwise => {
                            let w_base = (dy * k_w + dx) * in_c;
                            for c in 0..in_c {
                                grads.weights.data_mut()[w_base + c] +=
                                    in_data[in_base + c] * g_run[c];
                                grad_input.data_mut()[in_base + c] += w_data[w_base + c] * g_run[c];
                            }
                        }
                    }
                }
            }
        }
    }
    grad_input.check_finite("conv_backward input gradient")?;
    grads.weights.check_finite("conv_backward weight gradient")?;
    Ok((grads, grad_input))
}

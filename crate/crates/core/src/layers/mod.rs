//! Network layers: volume-wise dot product, convolution baselines, the dense
//! classifier head, and inverted dropout.

mod conv;
mod dense;
mod dropout;
mod vdp;

pub use conv::{conv_backward, conv_forward, ConvLayerSpec, ConvMode, ConvParams};
pub use dense::{dense_backward, dense_forward, DenseHeadSpec, DenseParams};
pub use dropout::dropout;
pub use vdp::{
    vdp_backward, vdp_backward_cached, vdp_forward, vdp_forward_cached, VdpLayerParams,
    VdpLayerSpec,
};

use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;

/// Elementwise activation applied by VDP layers and conv stacks.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, pre: T) -> T {
        match self {
            Activation::Relu => {
                if pre > T::zero() {
                    pre
                } else {
                    T::zero()
                }
            }
            Activation::Identity => pre,
        }
    }

    /// Derivative of the activation evaluated at the pre-activation value.
    /// The ReLU derivative at exactly zero is taken as zero.
    pub fn derivative<T: Scalar>(self, pre: T) -> T {
        match self {
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Identity => T::one(),
        }
    }
}

/// Symmetric uniform initialization limit, `sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn xavier_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

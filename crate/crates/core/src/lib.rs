//! Volume-wise dot product (VDP) layers, the FFN networks built from them,
//! and the surrounding tooling: exact parameter/MAC accounting, gradient
//! checking, effective-receptive-field probes, image patching, and a small
//! training loop. Everything is seed-deterministic.

pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod layers;
pub mod network;
pub mod patcher;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor, VolumeGrid};

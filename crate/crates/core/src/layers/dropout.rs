//! Inverted dropout on feature vectors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Applies inverted dropout to a feature vector.
///
/// Returns `(output, mask)`. In training mode each element is dropped with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`, so the
/// mask holds `0` or `1 / (1 - rate)` and the backward pass is an elementwise
/// product with it. Outside training (or at rate zero) the output is the
/// input and the mask is all ones. Expected activation magnitude is thereby
/// unchanged between training and inference. `rate` must lie in `[0, 1)`.
pub fn dropout<T: Scalar>(
    input: &[T],
    rate: f64,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok((input.to_vec(), vec![T::one(); input.len()]));
    }
    let keep_scale = T::from_f64(1.0 / (1.0 - rate));
    let mut output = Vec::with_capacity(input.len());
    let mut mask = Vec::with_capacity(input.len());
    for &value in input {
        if rng.random::<f64>() < rate {
            output.push(T::zero());
            mask.push(T::zero());
        } else {
            output.push(value * keep_scale);
            mask.push(keep_scale);
        }
    }
    Ok((output, mask))
}

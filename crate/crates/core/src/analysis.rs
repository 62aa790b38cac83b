//! Exact cost accounting (parameters and multiply-accumulates) and empirical
//! effective receptive field (ERF) probes.
//!
//! Costs are integer arithmetic over layer geometry, no estimation. The ERF
//! probe measures, for a freshly initialized network and a standard-normal
//! input, the mean absolute input gradient per spatial position when every
//! output unit receives gradient one; averaging over trials gives a map of
//! how strongly each input position influences the output.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{
    conv_backward, conv_forward, Activation, ConvLayerSpec, ConvMode, ConvParams, VdpLayerSpec,
};
use crate::network::{ffn_backward, ffn_forward_cached, FfnParams, FfnSpec, OutputGrad};
use crate::tensor::{Shape, Tensor};

/// Exact cost of one layer.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LayerCost {
    pub label: String,
    pub params: u64,
    pub macs: u64,
}

/// Cost of a VDP layer: with `N` volumes of `V` elements and `out` outputs
/// each, `params = N * (V * out + out)` and `macs = N * V * out`.
pub fn cost_of_vdp(spec: &VdpLayerSpec) -> LayerCost {
    let volumes = spec.grid.volume_count() as u64;
    let volume_numel = spec.grid.volume_numel() as u64;
    let out = spec.volume_output as u64;
    LayerCost {
        label: format!(
            "vdp v={} n={}x{}x{} out={}",
            spec.grid.volume_shape(),
            spec.grid.n_h,
            spec.grid.n_w,
            spec.grid.n_c,
            spec.volume_output
        ),
        params: volumes * (volume_numel * out + out),
        macs: volumes * volume_numel * out,
    }
}

/// Cost of a convolution layer applied to `input`.
pub fn cost_of_conv(spec: &ConvLayerSpec, input: &Shape) -> Result<LayerCost> {
    let output = spec.output_shape(input)?;
    let (out_h, out_w, _) = output.dims3()?;
    let positions = (out_h * out_w) as u64;
    let window = (spec.kernel.0 * spec.kernel.1) as u64;
    let (label, params, macs) = match spec.mode {
        ConvMode::Standard => {
            let in_c = spec.in_channels as u64;
            let out_c = spec.out_channels as u64;
            (
                format!(
                    "conv {}x{} {}->{}",
                    spec.kernel.0, spec.kernel.1, spec.in_channels, spec.out_channels
                ),
                window * in_c * out_c + out_c,
                positions * window * in_c * out_c,
            )
        }
        ConvMode::Depthwise => {
            let channels = spec.in_channels as u64;
            (
                format!("dwconv {}x{} c={}", spec.kernel.0, spec.kernel.1, spec.in_channels),
                window * channels + channels,
                positions * window * channels,
            )
        }
    };
    Ok(LayerCost { label, params, macs })
}

/// Cost breakdown for a whole network.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CostReport {
    pub name: String,
    pub layers: Vec<LayerCost>,
    pub parameter_count: u64,
    pub mac_count: u64,
    /// Number of activation layers in the VDP chain; the classifier softmax
    /// is conventionally displayed as a trailing `+1`.
    pub vdp_activations: usize,
    pub output_vector_length: usize,
}

impl CostReport {
    /// Renders the activation count in the `"<n>+1"` convention.
    pub fn activations_display(&self) -> String {
        format!("{}+1", self.vdp_activations)
    }
}

/// Sums exact per-layer costs over the VDP chain and the head, if any.
pub fn cost_of_network(spec: &FfnSpec) -> CostReport {
    let mut layers: Vec<LayerCost> = spec.layers.iter().map(cost_of_vdp).collect();
    if let Some(head) = &spec.head {
        let weights = (head.in_features * head.num_classes) as u64;
        layers.push(LayerCost {
            label: format!("dense {}->{}", head.in_features, head.num_classes),
            params: weights + head.num_classes as u64,
            macs: weights,
        });
    }
    let parameter_count = layers.iter().map(|l| l.params).sum();
    let mac_count = layers.iter().map(|l| l.macs).sum();
    CostReport {
        name: spec.name.clone(),
        layers,
        parameter_count,
        mac_count,
        vdp_activations: spec.layers.len(),
        output_vector_length: spec.feature_len(),
    }
}

/// Renders a count at million/thousand precision, truncating: `12546048`
/// becomes `"12M"`.
pub fn approx_count(count: u64) -> String {
    if count >= 1_000_000 {
        format!("{}M", count / 1_000_000)
    } else if count >= 1_000 {
        format!("{}k", count / 1_000)
    } else {
        count.to_string()
    }
}

/// A plain convolutional stack used as an ERF comparison baseline.
/// `activation` is applied after every layer except the last.
#[derive(Clone, PartialEq, Debug)]
pub struct ConvStackSpec {
    pub name: String,
    pub input_shape: Shape,
    pub layers: Vec<ConvLayerSpec>,
    pub activation: Activation,
}

impl ConvStackSpec {
    /// Four 3x3 stride-1 pad-1 layers, `3 -> 16 -> 16 -> 16 -> 16`, ReLU
    /// between layers. Spatial extent is preserved throughout.
    pub fn conv4_baseline(input_shape: &Shape) -> Result<Self> {
        let (_, _, channels) = input_shape.dims3()?;
        if channels != 3 {
            return Err(Error::ShapeMismatch(format!(
                "conv4 baseline expects 3 input channels, got {channels}"
            )));
        }
        let mut layers = Vec::new();
        let widths = [3usize, 16, 16, 16, 16];
        for pair in widths.windows(2) {
            layers.push(ConvLayerSpec::standard((3, 3), (1, 1), (1, 1), pair[0], pair[1])?);
        }
        let stack = ConvStackSpec {
            name: "conv4".into(),
            input_shape: input_shape.clone(),
            layers,
            activation: Activation::Relu,
        };
        stack.validate()?;
        Ok(stack)
    }

    /// Checks that the layers chain on the input shape.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec(format!("conv stack {:?} has no layers", self.name)));
        }
        self.output_shape()?;
        Ok(())
    }

    pub fn output_shape(&self) -> Result<Shape> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape)
    }

    /// Exact cost of the stack.
    pub fn cost(&self) -> Result<Vec<LayerCost>> {
        let mut shape = self.input_shape.clone();
        let mut costs = Vec::new();
        for layer in &self.layers {
            costs.push(cost_of_conv(layer, &shape)?);
            shape = layer.output_shape(&shape)?;
        }
        Ok(costs)
    }
}

fn conv_stack_init(stack: &ConvStackSpec, rng: &mut ChaCha8Rng) -> Vec<ConvParams<f64>> {
    stack.layers.iter().map(|layer| ConvParams::init(layer, rng)).collect()
}

fn conv_stack_input_gradient(
    stack: &ConvStackSpec,
    params: &[ConvParams<f64>],
    input: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let last = stack.layers.len() - 1;
    let mut inputs = Vec::with_capacity(stack.layers.len());
    let mut pres = Vec::with_capacity(stack.layers.len());
    let mut current = input.clone();
    for (idx, (layer, layer_params)) in stack.layers.iter().zip(params).enumerate() {
        let pre = conv_forward(layer, layer_params, &current)?;
        let output = if idx < last {
            Tensor::from_fn(pre.shape().clone(), |flat| {
                stack.activation.apply(pre.data()[flat])
            })?
        } else {
            pre.clone()
        };
        inputs.push(std::mem::replace(&mut current, output));
        pres.push(pre);
    }

    let mut grad = Tensor::filled(current.shape().clone(), 1.0)?;
    for idx in (0..stack.layers.len()).rev() {
        if idx < last {
            let pre = &pres[idx];
            grad = Tensor::from_fn(grad.shape().clone(), |flat| {
                grad.data()[flat] * stack.activation.derivative(pre.data()[flat])
            })?;
        }
        let (_, grad_input) =
            conv_backward(&stack.layers[idx], &params[idx], &inputs[idx], &grad)?;
        grad = grad_input;
    }
    Ok(grad)
}

/// A network the ERF probe can drive.
#[derive(Clone, Debug)]
pub enum ErfNetwork {
    Ffn(FfnSpec),
    ConvStack(ConvStackSpec),
}

impl ErfNetwork {
    pub fn name(&self) -> &str {
        match self {
            ErfNetwork::Ffn(spec) => &spec.name,
            ErfNetwork::ConvStack(stack) => &stack.name,
        }
    }

    pub fn input_shape(&self) -> Shape {
        match self {
            ErfNetwork::Ffn(spec) => spec.input_shape(),
            ErfNetwork::ConvStack(stack) => stack.input_shape.clone(),
        }
    }
}

/// Channel-averaged mean absolute input gradient per spatial position.
#[derive(Clone, PartialEq, Debug)]
pub struct ErfMap {
    pub name: String,
    /// Rank-2 tensor `[H, W]`.
    pub map: Tensor<f64>,
    /// Rank-2 tensor `[H, W]`: per position, the fraction of trials whose
    /// gradient magnitude there was nonzero.
    pub nonzero_fraction: Tensor<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl ErfMap {
    pub fn min(&self) -> f64 {
        self.map.data().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// The worst per-position fraction of trials with nonzero gradient.
    pub fn min_nonzero_fraction(&self) -> f64 {
        self.nonzero_fraction.data().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.map.reduce_sum() / self.map.shape().numel() as f64
    }

    /// Population standard deviation divided by the mean. Low values mean
    /// every input position influences the output about equally.
    pub fn coefficient_of_variation(&self) -> Result<f64> {
        let n = self.map.shape().numel() as f64;
        let mean = self.mean();
        if mean <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "ERF map {:?} is identically zero",
                self.name
            )));
        }
        let mean_sq = self.map.data().iter().map(|&v| v * v).sum::<f64>() / n;
        Ok((mean_sq - mean * mean).max(0.0).sqrt() / mean)
    }

    /// Mean over the central `block x block` positions divided by the mean
    /// over the four corner `block x block` positions. The blocks must fit
    /// without overlapping.
    pub fn center_corner_ratio(&self, block: usize) -> Result<f64> {
        let dims = self.map.shape().dims();
        let (h, w) = (dims[0], dims[1]);
        if block == 0 || 2 * block > h || 2 * block > w {
            return Err(Error::InvalidArgument(format!(
                "block {block} does not fit a {h}x{w} map"
            )));
        }
        let block_mean = |y0: usize, x0: usize| -> f64 {
            let mut acc = 0.0;
            for y in y0..y0 + block {
                for x in x0..x0 + block {
                    acc += self.map.data()[y * w + x];
                }
            }
            acc / (block * block) as f64
        };
        let center = block_mean((h - block) / 2, (w - block) / 2);
        let corners = (block_mean(0, 0)
            + block_mean(0, w - block)
            + block_mean(h - block, 0)
            + block_mean(h - block, w - block))
            / 4.0;
        if corners <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "ERF map {:?} has zero corner response",
                self.name
            )));
        }
        Ok(center / corners)
    }

    /// One CSV line per map row, comma-separated columns.
    pub fn to_csv(&self) -> String {
        let dims = self.map.shape().dims();
        let (h, w) = (dims[0], dims[1]);
        let mut out = String::new();
        for y in 0..h {
            let row: Vec<String> =
                (0..w).map(|x| self.map.data()[y * w + x].to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Single-line summary used by [`erf_report`].
    pub fn summary_line(&self) -> String {
        let cov = self
            .coefficient_of_variation()
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|_| "n/a".into());
        let dims = self.map.shape().dims();
        let block = (dims[0].min(dims[1]) / 2).min(4).max(1);
        let ratio = self
            .center_corner_ratio(block)
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|_| "n/a".into());
        format!(
            "{}: trials={} mean={:.6e} min={:.6e} min_nonzero_fraction={:.4} cov={} \
             center_corner_ratio={}",
            self.name,
            self.trials,
            self.mean(),
            self.min(),
            self.min_nonzero_fraction(),
            cov,
            ratio
        )
    }
}

/// Runs `trials` independent probes and averages the resulting maps.
///
/// Every trial freshly initializes the network from a trial seed derived from
/// `seed` and draws a standard-normal input; all output units receive
/// gradient one. The result is deterministic in `seed` regardless of thread
/// count.
pub fn erf_probe(network: &ErfNetwork, trials: usize, seed: u64) -> Result<ErfMap> {
    if trials == 0 {
        return Err(Error::InvalidArgument("erf_probe needs at least one trial".into()));
    }
    match network {
        ErfNetwork::Ffn(spec) => spec.validate()?,
        ErfNetwork::ConvStack(stack) => stack.validate()?,
    }
    let input_shape = network.input_shape();
    let (h, w, c) = input_shape.dims3()?;

    let mut seed_rng = ChaCha8Rng::seed_from_u64(seed);
    let trial_seeds: Vec<u64> = (0..trials).map(|_| seed_rng.random()).collect();

    let maps: Vec<Result<Vec<f64>>> = trial_seeds
        .par_iter()
        .map(|&trial_seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
            let input = Tensor::from_fn(input_shape.clone(), |_| {
                rng.sample::<f64, _>(StandardNormal)
            })?;
            let grad_input = match network {
                ErfNetwork::Ffn(spec) => {
                    let params = FfnParams::<f64>::init(spec, rng.random());
                    let cache = ffn_forward_cached(spec, &params, &input, None)?;
                    let ones = vec![1.0; spec.feature_len()];
                    ffn_backward(spec, &params, &cache, OutputGrad::Feature(&ones))?.grad_input
                }
                ErfNetwork::ConvStack(stack) => {
                    let mut init_rng = ChaCha8Rng::seed_from_u64(rng.random());
                    let params = conv_stack_init(stack, &mut init_rng);
                    conv_stack_input_gradient(stack, &params, &input)?
                }
            };
            let mut map = vec![0.0f64; h * w];
            for y in 0..h {
                for x in 0..w {
                    let base = (y * w + x) * c;
                    let sum: f64 =
                        grad_input.data()[base..base + c].iter().map(|g| g.abs()).sum();
                    map[y * w + x] = sum / c as f64;
                }
            }
            Ok(map)
        })
        .collect();

    let mut accumulated = vec![0.0f64; h * w];
    let mut nonzero = vec![0.0f64; h * w];
    for map in maps {
        for (index, value) in map?.into_iter().enumerate() {
            accumulated[index] += value;
            if value > 0.0 {
                nonzero[index] += 1.0;
            }
        }
    }
    for value in &mut accumulated {
        *value /= trials as f64;
    }
    for value in &mut nonzero {
        *value /= trials as f64;
    }
    Ok(ErfMap {
        name: network.name().to_string(),
        map: Tensor::new(Shape::new(&[h, w])?, accumulated)?,
        nonzero_fraction: Tensor::new(Shape::new(&[h, w])?, nonzero)?,
        trials,
        seed,
    })
}

/// Writes one CSV per map plus a `summary.txt` with one line per map into
/// `dir` (created if missing). Returns the written paths.
pub fn erf_report(maps: &[ErfMap], dir: &Path) -> Result<Vec<PathBuf>> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("erf_report needs at least one map".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut summary = String::new();
    for map in maps {
        let path = dir.join(format!("{}.csv", map.name));
        std::fs::write(&path, map.to_csv())?;
        written.push(path);
        summary.push_str(&map.summary_line());
        summary.push('\n');
    }
    let summary_path = dir.join("summary.txt");
    std::fs::write(&summary_path, summary)?;
    written.push(summary_path);
    Ok(written)
}

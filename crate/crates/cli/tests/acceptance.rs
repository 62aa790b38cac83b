//! Acceptance gate: eight numbered criteria, each printing one
//! `acceptance C<n> ...: PASS/FAIL (...)` line (visible with
//! `cargo test --test acceptance -- --nocapture`) and enforcing its own
//! runtime budget.
//!
//! C1  cost-table reproduction against an independent brute-force count
//! C2  per-layer output shapes of all three presets
//! C3  analytic gradients vs central finite differences, random configs
//! C4  VDP reduction oracles (dense equivalence, lossless partitioning)
//! C5  effective-receptive-field contrast: FFN flat, conv stack center-heavy
//! C6  toy training: convergence, ln-K initial loss, bit-identical reruns
//! C7  patcher arithmetic
//! C8  checkpoint round trip and digest rejection

use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ffn_core::analysis::{approx_count, cost_of_network, erf_probe, ConvStackSpec, ErfNetwork};
use ffn_core::checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
use ffn_core::layers::{
    vdp_forward, Activation, ConvLayerSpec, DenseHeadSpec, VdpLayerParams, VdpLayerSpec,
};
use ffn_core::network::{ffn_forward_cached, preset, FfnParams, FfnSpec, Preset};
use ffn_core::patcher::{multiscale, reassemble_scale, text_canvas, tile};
use ffn_core::tensor::{partition, reassemble};
use ffn_core::training::{
    gradcheck_conv, gradcheck_dense, gradcheck_network, gradcheck_vdp, synth_dataset, train,
    Optimizer, TrainConfig, GRADCHECK_TOLERANCE,
};
use ffn_core::{Shape, Tensor, VolumeGrid};

/// `(volume, counts, volume_output)` rows of the three published
/// architectures, re-typed here independently of the library's tables.
type Row = ((usize, usize, usize), (usize, usize, usize), usize);

const FFN16_ROWS: &[Row] = &[
    ((4, 4, 3), (4, 4, 1), 64),
    ((1, 1, 64), (4, 4, 1), 64),
    ((2, 2, 64), (2, 2, 1), 256),
    ((1, 1, 256), (2, 2, 1), 256),
    ((2, 2, 64), (1, 1, 4), 256),
    ((1, 1, 1024), (1, 1, 1), 1024),
];

const FFN32_ROWS: &[Row] = &[
    ((4, 4, 3), (8, 8, 1), 64),
    ((1, 1, 64), (8, 8, 1), 64),
    ((2, 2, 64), (4, 4, 1), 256),
    ((1, 1, 256), (4, 4, 1), 256),
    ((2, 2, 64), (2, 2, 4), 256),
    ((1, 1, 1024), (2, 2, 1), 1024),
    ((2, 2, 64), (1, 1, 16), 128),
    ((1, 1, 2048), (1, 1, 1), 2048),
];

const FFN96_ROWS: &[Row] = &[
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
];

const GOLDEN_TOTALS: &[(Preset, &[Row], u64, u64)] = &[
    (Preset::Ffn16, FFN16_ROWS, 1_955_840, 1_949_696),
    (Preset::Ffn32, FFN32_ROWS, 12_546_048, 12_517_376),
    (Preset::Ffn96, FFN96_ROWS, 69_001_216, 68_878_336),
];

fn check(criterion: &str, condition: bool, detail: &str) {
    if !condition {
        println!("acceptance {criterion}: FAIL ({detail})");
        panic!("{criterion} failed: {detail}");
    }
}

fn finish(criterion: &str, started: Instant, budget_secs: f64, detail: &str) {
    let elapsed = started.elapsed().as_secs_f64();
    check(
        criterion,
        elapsed < budget_secs,
        &format!("runtime {elapsed:.2}s exceeded the {budget_secs}s budget"),
    );
    println!("acceptance {criterion}: PASS ({detail}, {elapsed:.2}s)");
}

#[test]
fn c1_cost_table_reproduction() {
    const C: &str = "C1 cost-table reproduction";
    let started = Instant::now();

    for &(which, rows, golden_params, golden_macs) in GOLDEN_TOTALS {
        // Brute force: walk every volume of every row and add its dot
        // products and bias one term at a time.
        let mut params = 0u64;
        let mut macs = 0u64;
        for &((v_h, v_w, v_c), (n_h, n_w, n_c), out) in rows {
            for _volume in 0..n_h * n_w * n_c {
                for _o in 0..out {
                    for _p in 0..v_h * v_w * v_c {
                        params += 1;
                        macs += 1;
                    }
                    params += 1;
                }
            }
        }
        check(
            C,
            params == golden_params && macs == golden_macs,
            &format!(
                "{}: brute force {params}/{macs} vs golden {golden_params}/{golden_macs}",
                which.name()
            ),
        );

        let report = cost_of_network(&preset(which));
        check(
            C,
            report.parameter_count == golden_params && report.mac_count == golden_macs,
            &format!(
                "{}: library {}/{} vs golden {golden_params}/{golden_macs}",
                which.name(),
                report.parameter_count,
                report.mac_count
            ),
        );
    }

    let ffn32 = cost_of_network(&preset(Preset::Ffn32));
    check(
        C,
        approx_count(ffn32.parameter_count) == "12M" && approx_count(ffn32.mac_count) == "12M",
        "ffn32 counts do not render as 12M at table precision",
    );
    check(
        C,
        ffn32.output_vector_length == 2048 && ffn32.activations_display() == "8+1",
        "ffn32 output length or activation count diverges from the published row",
    );

    let output = Command::new(env!("CARGO_BIN_EXE_ffn"))
        .args(["analyze", "--preset", "ffn32"])
        .output()
        .expect("binary runs");
    let stdout = String::from_utf8_lossy(&output.stdout);
    check(
        C,
        output.status.success()
            && stdout.contains(
                "params 12546048 (≈12M), macs 12517376 (≈12M), activations 8+1, output 2048"
            ),
        &format!("CLI analyze output diverges: {stdout}"),
    );

    finish(C, started, 1.0, "brute force == library == CLI for all three presets");
}

#[test]
fn c2_shape_conformance() {
    const C: &str = "C2 shape conformance";
    let started = Instant::now();

    let expected: &[(Preset, &str, &[&str])] = &[
        (
            Preset::Ffn16,
            "16x16x3",
            &["4x4x64", "4x4x64", "2x2x256", "2x2x256", "1x1x1024", "1x1x1024"],
        ),
        (
            Preset::Ffn32,
            "32x32x3",
            &[
                "8x8x64", "8x8x64", "4x4x256", "4x4x256", "2x2x1024", "2x2x1024", "1x1x2048",
                "1x1x2048",
            ],
        ),
        (
            Preset::Ffn96,
            "96x96x3",
            &[
                "16x16x64",
                "16x16x64",
                "8x8x256",
                "8x8x256",
                "4x4x1024",
                "4x4x1024",
                "2x2x2048",
                "2x2x2048",
                "1x1x4096",
                "1x1x4096",
            ],
        ),
    ];

    let mut rows_checked = 0;
    for &(which, input, shapes) in expected {
        let spec = preset(which);
        check(
            C,
            spec.input_shape().to_string() == input,
            &format!("{} input shape {}", which.name(), spec.input_shape()),
        );
        // An actual forward pass, not just spec arithmetic.
        let params = FfnParams::<f32>::zeros(&spec);
        let probe = Tensor::zeros(spec.input_shape());
        let cache = ffn_forward_cached(&spec, &params, &probe, None).expect("forward runs");
        check(
            C,
            cache.pre_activations.len() == shapes.len(),
            &format!("{} produced {} layers", which.name(), cache.pre_activations.len()),
        );
        for (index, (tensor, expected_shape)) in
            cache.pre_activations.iter().zip(shapes).enumerate()
        {
            check(
                C,
                tensor.shape().to_string() == *expected_shape,
                &format!(
                    "{} layer {} produced {}, table says {}",
                    which.name(),
                    index + 1,
                    tensor.shape(),
                    expected_shape
                ),
            );
            rows_checked += 1;
        }
    }

    finish(C, started, 1.0, &format!("{rows_checked} published output-shape cells match"));
}

fn random_divisor(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let divisors: Vec<usize> = (1..=n).filter(|d| n % d == 0).collect();
    divisors[rng.random_range(0..divisors.len())]
}

fn random_vdp_spec(rng: &mut ChaCha8Rng) -> VdpLayerSpec {
    let h = rng.random_range(1..=4);
    let w = rng.random_range(1..=4);
    let c = rng.random_range(1..=3);
    let volume = (random_divisor(rng, h), random_divisor(rng, w), random_divisor(rng, c));
    let out = rng.random_range(1..=4);
    let activation = if rng.random_range(0..4) == 0 { Activation::Identity } else { Activation::Relu };
    VdpLayerSpec::for_input(&Shape::d3(h, w, c), volume, out, activation).expect("divisors fit")
}

fn random_conv_case(rng: &mut ChaCha8Rng, depthwise: bool) -> (ConvLayerSpec, Shape) {
    loop {
        let h = rng.random_range(3..=6);
        let w = rng.random_range(3..=6);
        let c = rng.random_range(1..=3);
        let kernel = (rng.random_range(1..=3), rng.random_range(1..=3));
        let stride = (rng.random_range(1..=2), rng.random_range(1..=2));
        let padding = (rng.random_range(0..=1), rng.random_range(0..=1));
        let spec = if depthwise {
            ConvLayerSpec::depthwise(kernel, stride, padding, c)
        } else {
            ConvLayerSpec::standard(kernel, stride, padding, c, rng.random_range(1..=3))
        };
        let shape = Shape::d3(h, w, c);
        if let Ok(spec) = spec {
            if spec.output_shape(&shape).is_ok() {
                return (spec, shape);
            }
        }
    }
}

fn random_mini_ffn(rng: &mut ChaCha8Rng, index: usize) -> FfnSpec {
    let first = random_vdp_spec(rng);
    let (h, w, c) = first.output_shape().dims3().expect("rank 3");
    let volume = (random_divisor(rng, h), random_divisor(rng, w), random_divisor(rng, c));
    let second = VdpLayerSpec::for_input(
        &first.output_shape(),
        volume,
        rng.random_range(1..=3),
        Activation::Relu,
    )
    .expect("divisors fit");
    let spec = FfnSpec::new(format!("mini{index}"), vec![first, second]).expect("chain holds");
    if index % 2 == 0 {
        spec.with_head(rng.random_range(2..=5)).expect("head fits")
    } else {
        spec
    }
}

#[test]
fn c3_gradient_correctness() {
    const C: &str = "C3 gradient correctness";
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut worst = 0.0f64;
    let mut track = |report: ffn_core::training::GradCheckReport, what: &str| {
        let breakdown: Vec<String> = report
            .groups
            .iter()
            .map(|g| format!("{} {:.3e}", g.name, g.max_rel_err))
            .collect();
        check(
            C,
            report.passed(),
            &format!(
                "{what}: max rel err {:.3e} at tolerance 1e-5 [{}]",
                report.max_rel_err(),
                breakdown.join(", ")
            ),
        );
        worst = worst.max(report.max_rel_err());
    };

    for index in 0..20 {
        let vdp = random_vdp_spec(&mut rng);
        track(gradcheck_vdp(&vdp, rng.random()).expect("runs"), &format!("vdp #{index}"));

        let (conv, shape) = random_conv_case(&mut rng, false);
        track(
            gradcheck_conv(&conv, &shape, rng.random()).expect("runs"),
            &format!("conv #{index}"),
        );

        let (depthwise, shape) = random_conv_case(&mut rng, true);
        track(
            gradcheck_conv(&depthwise, &shape, rng.random()).expect("runs"),
            &format!("depthwise #{index}"),
        );

        let dense =
            DenseHeadSpec::new(rng.random_range(1..=12), rng.random_range(1..=5)).expect("valid");
        track(gradcheck_dense(&dense, rng.random()).expect("runs"), &format!("dense #{index}"));

        let mini = random_mini_ffn(&mut rng, index);
        track(
            gradcheck_network(&mini, None, rng.random()).expect("runs"),
            &format!("mini-ffn #{index}"),
        );
    }

    check(C, worst < GRADCHECK_TOLERANCE, "aggregate maximum exceeded tolerance");
    finish(
        C,
        started,
        60.0,
        &format!("100 random configurations, max rel err {worst:.3e} < 1e-5"),
    );
}

#[test]
fn c4_oracle_equivalences() {
    const C: &str = "C4 oracle equivalences";
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(41);

    // (a) One whole-input volume is exactly a dense layer. The oracle below
    // is written directly from the definition: out[o] = sum_p x[p] W[p,o] + b[o].
    let spec = VdpLayerSpec::for_input(&Shape::d3(3, 4, 2), (3, 4, 2), 5, Activation::Relu)
        .expect("single volume");
    let params = VdpLayerParams::<f32>::init(&spec, &mut rng);
    let input = Tensor::from_fn(Shape::d3(3, 4, 2), |_| rng.random_range(-1.0f32..1.0))
        .expect("finite");
    let output = vdp_forward(&spec, &params, &input).expect("runs");
    let v = 3 * 4 * 2;
    for o in 0..5 {
        let mut acc = params.biases[0][o];
        for p in 0..v {
            acc += input.data()[p] * params.weights[0][p * 5 + o];
        }
        let oracle = acc.max(0.0);
        let got = output.data()[o];
        check(
            C,
            (got - oracle).abs() <= 1e-6 * oracle.abs().max(1.0),
            &format!("dense oracle unit {o}: vdp {got} vs oracle {oracle}"),
        );
    }

    // (b) Grid (H,W,1) with volume (1,1,C) is H*W independent dense layers,
    // one per spatial position.
    let spec = VdpLayerSpec::for_input(&Shape::d3(3, 2, 4), (1, 1, 4), 3, Activation::Identity)
        .expect("pointwise");
    let params = VdpLayerParams::<f32>::init(&spec, &mut rng);
    let input =
        Tensor::from_fn(Shape::d3(3, 2, 4), |_| rng.random_range(-1.0f32..1.0)).expect("finite");
    let output = vdp_forward(&spec, &params, &input).expect("runs");
    for y in 0..3 {
        for x in 0..2 {
            let volume = y * 2 + x;
            for o in 0..3 {
                let mut acc = params.biases[volume][o];
                for ch in 0..4 {
                    acc += input.at3(y, x, ch) * params.weights[volume][ch * 3 + o];
                }
                let got = output.at3(y, x, o);
                check(
                    C,
                    (got - acc).abs() <= 1e-6 * acc.abs().max(1.0),
                    &format!("position ({y},{x}) unit {o}: vdp {got} vs oracle {acc}"),
                );
            }
        }
    }

    // (c) Partitioning is lossless on 1000 random tensors.
    for trial in 0..1000 {
        let counts = (
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=2),
        );
        let volume = (
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=4),
        );
        let grid = VolumeGrid::new(counts, volume).expect("positive");
        let tensor = Tensor::from_fn(grid.input_shape(), |_| rng.random_range(-10.0f32..10.0))
            .expect("finite");
        let rebuilt =
            reassemble(&grid, &partition(&tensor, &grid).expect("fits")).expect("fits");
        check(C, rebuilt == tensor, &format!("round trip {trial} lost data"));
    }

    finish(C, started, 10.0, "dense equivalences at 1e-6 and 1000 lossless round trips");
}

#[test]
fn c5_erf_contrast() {
    const C: &str = "C5 ERF contrast";
    let started = Instant::now();
    let trials = 100;

    let ffn = erf_probe(&ErfNetwork::Ffn(preset(Preset::Ffn32)), trials, 42).expect("runs");
    let conv = erf_probe(
        &ErfNetwork::ConvStack(
            ConvStackSpec::conv4_baseline(&Shape::d3(32, 32, 3)).expect("valid"),
        ),
        trials,
        42,
    )
    .expect("runs");

    // (a) Every input position influences the feature vector in >= 99% of
    // trials.
    let nonzero = ffn.min_nonzero_fraction();
    check(C, nonzero >= 0.99, &format!("worst position nonzero in only {nonzero:.3} of trials"));

    // (b) The FFN map is near-uniform: coefficient of variation < 0.25.
    let cov = ffn.coefficient_of_variation().expect("nonzero mean");
    check(C, cov < 0.25, &format!("ffn32 coefficient of variation {cov:.4} >= 0.25"));

    // (c) The conv stack is center-biased relative to the FFN. Calibrated
    // threshold: across seeds the measured factor is 1.28..=1.36 under the
    // uniform-output-gradient protocol, so the gate is frozen at 1.2.
    let ffn_ratio = ffn.center_corner_ratio(4).expect("fits");
    let conv_ratio = conv.center_corner_ratio(4).expect("fits");
    let factor = conv_ratio / ffn_ratio;
    check(
        C,
        factor >= 1.2,
        &format!("conv/ffn center-corner factor {factor:.3} below the calibrated 1.2 gate"),
    );

    finish(
        C,
        started,
        300.0,
        &format!(
            "nonzero fraction {nonzero:.2}, cov {cov:.3} < 0.25, center-bias factor {factor:.2} >= 1.2"
        ),
    );
}

#[test]
fn c6_toy_training() {
    const C: &str = "C6 toy training";
    let started = Instant::now();

    let spec = preset(Preset::Ffn16).with_head(10).expect("head fits");
    let data = synth_dataset(10, 100, 16, 123).expect("separable");
    let config = TrainConfig {
        epochs: 20,
        batch_size: 32,
        learning_rate: 1e-3,
        optimizer: Optimizer::adam(),
        seed: 7,
    };

    let outcome = train(&spec, &data, None, &config).expect("trains");
    let initial = outcome.metrics[0].train_loss;
    let ln10 = 10.0f64.ln();
    check(
        C,
        (initial - ln10).abs() <= 0.2,
        &format!("epoch-0 loss {initial:.4} outside ln 10 = {ln10:.4} +- 0.2"),
    );
    let final_acc = outcome.metrics.last().expect("rows").train_acc;
    check(C, final_acc >= 0.95, &format!("train accuracy {final_acc:.4} < 0.95 after 20 epochs"));

    // Bit-identical reruns, compared at the serialized-checkpoint level.
    let short = TrainConfig { epochs: 2, ..config };
    let dir = tempfile::tempdir().expect("tempdir");
    let mut bytes = Vec::new();
    for run in 0..2 {
        let outcome = train(&spec, &data, None, &short).expect("trains");
        let path = dir.path().join(format!("run{run}.ckpt"));
        save_checkpoint(&spec, &outcome.params, &path).expect("writes");
        bytes.push(std::fs::read(&path).expect("readable"));
    }
    check(C, bytes[0] == bytes[1], "same seed produced different checkpoint bytes");

    let reseeded = train(&spec, &data, None, &TrainConfig { seed: 8, ..short }).expect("trains");
    let path = dir.path().join("reseeded.ckpt");
    save_checkpoint(&spec, &reseeded.params, &path).expect("writes");
    check(
        C,
        std::fs::read(&path).expect("readable") != bytes[0],
        "a different seed reproduced the same checkpoint",
    );

    finish(
        C,
        started,
        300.0,
        &format!(
            "epoch-0 loss {initial:.3} within ln10 +- 0.2, final accuracy {final_acc:.3} >= 0.95, reruns bit-identical"
        ),
    );
}

#[test]
fn c7_patcher_arithmetic() {
    const C: &str = "C7 patcher arithmetic";
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);

    // Multiscale 128x128 at patch 32: 16 + 4 + 1 = 21 patches, unique keys.
    let image = Tensor::from_fn(Shape::d3(128, 128, 3), |_| rng.random_range(0.0f32..1.0))
        .expect("finite");
    let set = multiscale(&image, 32, "c7").expect("tiles");
    check(C, set.patches.len() == 21, &format!("multiscale yielded {} patches", set.patches.len()));
    let mut keys: Vec<(usize, usize, usize)> =
        set.indices.iter().map(|index| (index.y, index.x, index.scale)).collect();
    keys.sort_unstable();
    keys.dedup();
    check(C, keys.len() == 21, "duplicate (y, x, scale) indices");
    for scale in [1usize, 2, 4] {
        let count = set.indices.iter().filter(|index| index.scale == scale).count();
        let side = 128 / scale / 32;
        check(
            C,
            count == side * side,
            &format!("scale {scale} produced {count} patches, expected {}", side * side),
        );
    }

    // A 64x128 text image scales exactly onto the 128x256 canvas: no
    // padding pixels survive.
    let text = Tensor::filled(Shape::d3(64, 128, 3), 1.0f32).expect("finite");
    let canvas = text_canvas(&text).expect("fits");
    check(
        C,
        canvas.shape().to_string() == "128x256x3",
        &format!("canvas shape {}", canvas.shape()),
    );
    let padding_pixels = canvas.data().iter().filter(|&&v| v == 0.0).count();
    check(C, padding_pixels == 0, &format!("{padding_pixels} padding pixels remain"));

    // Tiling a divisible image round-trips losslessly.
    let image = Tensor::from_fn(Shape::d3(64, 64, 3), |_| rng.random_range(0.0f32..1.0))
        .expect("finite");
    let tiled = tile(&image, 32, "c7rt").expect("tiles");
    let rebuilt = reassemble_scale(&tiled, 1).expect("reassembles");
    check(C, rebuilt == image, "tile/reassemble changed pixel data");

    finish(C, started, 1.0, "21 unique multiscale patches, exact canvas fill, lossless tiling");
}

fn patterned_params(spec: &FfnSpec) -> FfnParams<f32> {
    let mut params = FfnParams::zeros(spec);
    let mut state = 0x2545_F491_4F6C_DD1Du64;
    for buffer in params.buffers_mut() {
        for value in buffer {
            state = state.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
            *value = ((state >> 40) as f32) / (1u64 << 24) as f32 - 0.5;
        }
    }
    params
}

#[test]
fn c8_checkpoint_round_trip() {
    const C: &str = "C8 checkpoint round trip";
    let started = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");

    let mut total_params = 0usize;
    for which in Preset::ALL {
        let spec = preset(which).with_head(10).expect("head fits");
        let params = patterned_params(&spec);
        let path = dir.path().join(format!("{}.ckpt", which.name()));
        save_checkpoint(&spec, &params, &path).expect("writes");
        let (loaded_spec, loaded) = load_checkpoint(&path).expect("reads");
        check(C, loaded_spec == spec, &format!("{} spec changed in transit", which.name()));
        for (original, restored) in params.buffers().iter().zip(loaded.buffers()) {
            check(
                C,
                original.len() == restored.len()
                    && original
                        .iter()
                        .zip(restored.iter())
                        .all(|(a, b)| a.to_bits() == b.to_bits()),
                &format!("{} parameters not bit-identical", which.name()),
            );
            total_params += original.len();
        }
        std::fs::remove_file(&path).expect("cleanup");
    }

    // A checkpoint for one spec must be rejected when another is expected.
    let ffn16 = preset(Preset::Ffn16);
    let path = dir.path().join("mismatch.ckpt");
    save_checkpoint(&ffn16, &FfnParams::zeros(&ffn16), &path).expect("writes");
    let err = load_checkpoint_expecting(&path, &preset(Preset::Ffn32))
        .expect_err("mismatch must be rejected");
    check(
        C,
        matches!(err, ffn_core::Error::SpecMismatch(_)),
        &format!("wrong error variant: {err}"),
    );

    finish(
        C,
        started,
        5.0,
        &format!("{total_params} parameters round-tripped bit-exactly, digest mismatch rejected"),
    );
}

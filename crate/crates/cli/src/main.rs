//! `ffn`: describe, analyze, gradient-check, probe, train, evaluate, and
//! patch images for VDP networks.
//!
//! Exit codes: 0 success, 1 failed numerical check, 2 usage or
//! specification error, 3 I/O or corrupt data.

use std::path::{Path, PathBuf};
use std::process::exit;

use clap::{Args, Parser, Subcommand};

use ffn_core::analysis::{
    approx_count, cost_of_network, erf_probe, erf_report, ConvStackSpec, ErfNetwork,
};
use ffn_core::checkpoint::{load_checkpoint, save_checkpoint};
use ffn_core::network::{preset, FfnSpec, Preset};
use ffn_core::patcher::{
    load_image, multiscale, nearest_patch_size, resize_to_nearest_patch, text_canvas, tile,
    export_patchset, PATCH_SIZES,
};
use ffn_core::training::{
    evaluate, gradcheck_network, load_idx, synth_dataset, synth_eval_dataset, train_with_progress,
    write_metrics_csv, EpochMetrics, LabeledSet, Optimizer, TrainConfig,
};
use ffn_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ffn", version, about = "Volume-wise dot product networks")]
struct Cli {
    /// Master seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (falls back to the FFN_THREADS environment variable,
    /// then to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a network's per-layer geometry.
    Describe {
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Exact parameter and multiply-accumulate counts.
    Analyze {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        json: bool,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        spec: SpecArgs,
        /// Coordinates checked per weight/bias buffer (0 checks all).
        #[arg(long, default_value_t = 2)]
        samples: usize,
        #[arg(long)]
        json: bool,
    },
    /// Measure empirical effective receptive fields.
    Erf {
        #[command(flatten)]
        spec: SpecArgs,
        /// Also probe a comparison network (supported: conv4).
        #[arg(long)]
        compare: Option<String>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Directory for the per-network CSV maps and summary.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and optionally save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Cut an image into fixed-size patches.
    Patch(PatchArgs),
}

#[derive(Args)]
struct SpecArgs {
    /// Published architecture: ffn16, ffn32, or ffn96.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// JSON network description file.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl SpecArgs {
    fn load(&self) -> Result<FfnSpec> {
        match (&self.preset, &self.config) {
            (Some(name), None) => {
                let which: Preset = name.parse()?;
                Ok(preset(which))
            }
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)?;
                FfnSpec::from_json(&text)
            }
            _ => Err(Error::InvalidArgument("provide --preset or --config".into())),
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Synthetic dataset: CLASSESxPER_CLASS, for example 10x100.
    #[arg(long, value_name = "CxN")]
    synth: Option<String>,
    /// IDX image file (requires --idx-labels).
    #[arg(long, requires = "idx_labels", conflicts_with = "synth")]
    idx_images: Option<PathBuf>,
    /// IDX label file (requires --idx-images).
    #[arg(long, requires = "idx_images", conflicts_with = "synth")]
    idx_labels: Option<PathBuf>,
}

fn parse_synth(text: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = text.split('x').collect();
    let parsed = if parts.len() == 2 {
        match (parts[0].parse::<usize>(), parts[1].parse::<usize>()) {
            (Ok(classes), Ok(per_class)) => Some((classes, per_class)),
            _ => None,
        }
    } else {
        None
    };
    parsed.ok_or_else(|| {
        Error::InvalidArgument(format!(
            "--synth takes CLASSESxPER_CLASS (for example 10x100), got {text:?}"
        ))
    })
}

fn synth_patch_size(spec: &FfnSpec) -> Result<usize> {
    let (h, w, c) = spec.input_shape().dims3()?;
    if h != w || c != 3 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs a square 3-channel input, network expects {}",
            spec.input_shape()
        )));
    }
    Ok(h)
}

impl DataArgs {
    fn is_given(&self) -> bool {
        self.synth.is_some() || self.idx_images.is_some()
    }

    fn load_train(&self, spec: &FfnSpec, seed: u64) -> Result<LabeledSet> {
        match (&self.synth, &self.idx_images, &self.idx_labels) {
            (Some(text), None, None) => {
                let (classes, per_class) = parse_synth(text)?;
                synth_dataset(classes, per_class, synth_patch_size(spec)?, seed)
            }
            (None, Some(images), Some(labels)) => load_idx(images, labels),
            _ => Err(Error::InvalidArgument(
                "provide --synth or --idx-images with --idx-labels".into(),
            )),
        }
    }

    fn load_eval(&self, spec: &FfnSpec, seed: u64) -> Result<LabeledSet> {
        match (&self.synth, &self.idx_images, &self.idx_labels) {
            (Some(text), None, None) => {
                let (classes, per_class) = parse_synth(text)?;
                synth_eval_dataset(classes, per_class, synth_patch_size(spec)?, seed)
            }
            (None, Some(images), Some(labels)) => load_idx(images, labels),
            _ => Err(Error::InvalidArgument(
                "provide --synth or --idx-images with --idx-labels".into(),
            )),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    data: DataArgs,
    /// IDX image file for a held-out evaluation split.
    #[arg(long, requires = "eval_labels")]
    eval_images: Option<PathBuf>,
    /// IDX label file for a held-out evaluation split.
    #[arg(long, requires = "eval_images")]
    eval_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// sgd or adam.
    #[arg(long, default_value = "adam")]
    optimizer: String,
    /// Override the network's dropout rate.
    #[arg(long)]
    dropout: Option<f64>,
    /// Write the trained parameters to this checkpoint file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-epoch metrics to this CSV file.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct PatchArgs {
    /// Input image (binary or ASCII PPM/PGM, max value 255).
    #[arg(long)]
    input: PathBuf,
    /// Directory for the patch images and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Patch side length (default: nearest supported size to the image's
    /// larger side).
    #[arg(long)]
    patch_size: Option<usize>,
    /// Fit the image onto a fixed text-recognition canvas first.
    #[arg(long, conflicts_with = "resize_nearest")]
    text_canvas: bool,
    /// Resize to the nearest supported square size first.
    #[arg(long)]
    resize_nearest: bool,
    /// Tile at scales 1, 2, and 4 instead of only the native scale.
    #[arg(long)]
    multiscale: bool,
    /// Identifier used in output file names (default: input file stem).
    #[arg(long)]
    source_id: Option<String>,
}

fn main() {
    let cli = Cli::parse();
    init_threads(cli.threads);
    match run(cli) {
        Ok(code) => exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            exit(exit_code(&err));
        }
    }
}

fn init_threads(threads: Option<usize>) {
    let count = threads.or_else(|| {
        std::env::var("FFN_THREADS").ok().and_then(|value| value.parse().ok())
    });
    if let Some(count) = count {
        if count >= 1 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(count).build_global();
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_)
        | Error::CorruptFile(_)
        | Error::CorruptCheckpoint(_)
        | Error::CountMismatch(_) => 3,
        Error::NonFinite(_) => 1,
        Error::InvalidArgument(_)
        | Error::InvalidSpec(_)
        | Error::SpecMismatch(_)
        | Error::ShapeMismatch(_)
        | Error::EmptyImage
        | Error::EmptyDataset => 2,
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Describe { spec } => cmd_describe(&spec),
        Command::Analyze { spec, json } => cmd_analyze(&spec, json),
        Command::Gradcheck { spec, samples, json } => {
            cmd_gradcheck(&spec, samples, json, cli.seed)
        }
        Command::Erf { spec, compare, trials, out } => {
            cmd_erf(&spec, compare.as_deref(), trials, &out, cli.seed)
        }
        Command::Train(args) => cmd_train(&args, cli.seed),
        Command::Eval(args) => cmd_eval(&args, cli.seed),
        Command::Patch(args) => cmd_patch(&args),
    }
}

fn cmd_describe(spec_args: &SpecArgs) -> Result<i32> {
    let spec = spec_args.load()?;
    println!(
        "{}: input {}, {} layers, feature length {}",
        spec.name,
        spec.input_shape(),
        spec.layers.len(),
        spec.feature_len()
    );
    println!(
        "{:<6} {:<10} {:<10} {:>8} {:>12} {:>12}",
        "layer", "volume", "grid", "out/vol", "output", "params"
    );
    for (index, layer) in spec.layers.iter().enumerate() {
        let grid = &layer.grid;
        println!(
            "{:<6} {:<10} {:<10} {:>8} {:>12} {:>12}",
            index + 1,
            format!("{}x{}x{}", grid.v_h, grid.v_w, grid.v_c),
            format!("{}x{}x{}", grid.n_h, grid.n_w, grid.n_c),
            layer.volume_output,
            layer.output_shape().to_string(),
            layer.parameter_count()
        );
    }
    if let Some(head) = &spec.head {
        println!(
            "head: dense {} -> {} classes, params {}",
            head.in_features,
            head.num_classes,
            head.parameter_count()
        );
    }
    println!("dropout rate {} (training only)", spec.dropout_rate);
    Ok(0)
}

fn cmd_analyze(spec_args: &SpecArgs, json: bool) -> Result<i32> {
    let spec = spec_args.load()?;
    let report = cost_of_network(&spec);
    if json {
        let layers: Vec<serde_json::Value> = report
            .layers
            .iter()
            .map(|layer| {
                serde_json::json!({
                    "label": layer.label,
                    "params": layer.params,
                    "macs": layer.macs,
                })
            })
            .collect();
        let value = serde_json::json!({
            "name": report.name,
            "layers": layers,
            "parameter_count": report.parameter_count,
            "mac_count": report.mac_count,
            "parameter_count_approx": approx_count(report.parameter_count),
            "mac_count_approx": approx_count(report.mac_count),
            "activations": report.activations_display(),
            "output_vector_length": report.output_vector_length,
        });
        println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
    } else {
        println!("{}", report.name);
        println!("{:<6} {:<30} {:>12} {:>12}", "layer", "kind", "params", "macs");
        for (index, layer) in report.layers.iter().enumerate() {
            println!(
                "{:<6} {:<30} {:>12} {:>12}",
                index + 1,
                layer.label,
                layer.params,
                layer.macs
            );
        }
        println!(
            "params {} (≈{}), macs {} (≈{}), activations {}, output {}",
            report.parameter_count,
            approx_count(report.parameter_count),
            report.mac_count,
            approx_count(report.mac_count),
            report.activations_display(),
            report.output_vector_length
        );
    }
    Ok(0)
}

fn cmd_gradcheck(spec_args: &SpecArgs, samples: usize, json: bool, seed: u64) -> Result<i32> {
    let spec = spec_args.load()?;
    let samples = if samples == 0 { None } else { Some(samples) };
    let report = gradcheck_network(&spec, samples, seed)?;
    let checked: usize = report.groups.iter().map(|group| group.checked).sum();
    if json {
        let groups: Vec<serde_json::Value> = report
            .groups
            .iter()
            .map(|group| {
                serde_json::json!({
                    "name": group.name,
                    "checked": group.checked,
                    "max_rel_err": group.max_rel_err,
                })
            })
            .collect();
        let value = serde_json::json!({
            "network": spec.name,
            "passed": report.passed(),
            "checked": checked,
            "max_rel_err": report.max_rel_err(),
            "tolerance": report.tolerance,
            "groups": groups,
        });
        println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
    } else {
        for group in &report.groups {
            if group.max_rel_err >= report.tolerance {
                println!(
                    "  {}: max rel err {:.3e} over {} coordinates",
                    group.name, group.max_rel_err, group.checked
                );
            }
        }
        println!(
            "gradcheck {}: {} ({} coordinates, max rel err {:.3e}, tolerance {:.0e})",
            spec.name,
            if report.passed() { "PASS" } else { "FAIL" },
            checked,
            report.max_rel_err(),
            report.tolerance
        );
    }
    Ok(if report.passed() { 0 } else { 1 })
}

fn cmd_erf(
    spec_args: &SpecArgs,
    compare: Option<&str>,
    trials: usize,
    out: &Path,
    seed: u64,
) -> Result<i32> {
    let spec = spec_args.load()?;
    let mut networks = vec![ErfNetwork::Ffn(spec.clone())];
    match compare {
        None => {}
        Some("conv4") => {
            networks.push(ErfNetwork::ConvStack(ConvStackSpec::conv4_baseline(
                &spec.input_shape(),
            )?));
        }
        Some(other) => {
            return Err(Error::InvalidArgument(format!(
                "unknown comparison network {other:?}, expected conv4"
            )));
        }
    }
    let maps = networks
        .iter()
        .map(|network| erf_probe(network, trials, seed))
        .collect::<Result<Vec<_>>>()?;
    for map in &maps {
        println!("{}", map.summary_line());
    }
    for path in erf_report(&maps, out)? {
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn print_epoch(row: &EpochMetrics) {
    match row.eval_acc {
        Some(eval_acc) => println!(
            "epoch {:>3}: train_loss {:.4} train_acc {:.4} eval_acc {:.4}",
            row.epoch, row.train_loss, row.train_acc, eval_acc
        ),
        None => println!(
            "epoch {:>3}: train_loss {:.4} train_acc {:.4}",
            row.epoch, row.train_loss, row.train_acc
        ),
    }
}

fn ensure_parent_dir(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs, seed: u64) -> Result<i32> {
    let mut spec = args.spec.load()?;
    if let Some(rate) = args.dropout {
        spec = spec.with_dropout(rate)?;
    }
    let optimizer: Optimizer = args.optimizer.parse()?;
    if !args.data.is_given() {
        return Err(Error::InvalidArgument(
            "provide --synth or --idx-images with --idx-labels".into(),
        ));
    }
    let train_set = args.data.load_train(&spec, seed)?;
    let eval_set = match (&args.eval_images, &args.eval_labels, &args.data.synth) {
        (Some(images), Some(labels), _) => Some(load_idx(images, labels)?),
        (None, None, Some(text)) => {
            let (classes, per_class) = parse_synth(text)?;
            let per_eval = (per_class / 5).max(1);
            Some(synth_eval_dataset(classes, per_eval, synth_patch_size(&spec)?, seed)?)
        }
        _ => None,
    };
    if spec.head.is_none() {
        spec = spec.with_head(train_set.num_classes)?;
    }
    if let Some(path) = &args.out {
        ensure_parent_dir(path)?;
    }
    if let Some(path) = &args.metrics {
        ensure_parent_dir(path)?;
    }

    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        optimizer,
        seed,
    };
    println!(
        "training {} on {} samples ({} classes), {} epochs",
        spec.name,
        train_set.len(),
        train_set.num_classes,
        config.epochs
    );
    let outcome =
        train_with_progress(&spec, &train_set, eval_set.as_ref(), &config, print_epoch)?;
    if let Some(path) = &args.metrics {
        write_metrics_csv(&outcome.metrics, path)?;
        println!("wrote metrics to {}", path.display());
    }
    if let Some(path) = &args.out {
        save_checkpoint(&spec, &outcome.params, path)?;
        println!("saved checkpoint to {}", path.display());
    }
    Ok(0)
}

fn cmd_eval(args: &EvalArgs, seed: u64) -> Result<i32> {
    let (spec, params) = load_checkpoint(&args.checkpoint)?;
    let set = args.data.load_eval(&spec, seed)?;
    let (loss, acc) = evaluate(&spec, &params, &set)?;
    println!("eval {}: loss {:.4} acc {:.4} ({} samples)", spec.name, loss, acc, set.len());
    Ok(0)
}

fn cmd_patch(args: &PatchArgs) -> Result<i32> {
    let mut image = load_image(&args.input)?;
    let source_id = match &args.source_id {
        Some(id) => id.clone(),
        None => args
            .input
            .file_stem()
            .map(|stem| stem.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into()),
    };
    if args.text_canvas {
        image = text_canvas(&image)?;
    }
    if args.resize_nearest {
        image = resize_to_nearest_patch(&image, &PATCH_SIZES)?;
    }
    let (height, width, _) = image.shape().dims3()?;
    let patch_size = match args.patch_size {
        Some(size) => size,
        None => nearest_patch_size(height.max(width), &PATCH_SIZES)?,
    };
    let set = if args.multiscale {
        multiscale(&image, patch_size, &source_id)?
    } else {
        tile(&image, patch_size, &source_id)?
    };
    let manifest = export_patchset(&set, &args.out)?;
    println!(
        "wrote {} patches of {}x{} to {} (manifest {})",
        set.patches.len(),
        patch_size,
        patch_size,
        args.out.display(),
        manifest.display()
    );
    Ok(0)
}

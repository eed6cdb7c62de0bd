//! `fido-masks` command-line interface.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};
use log::info;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autodiff::NumericMode;
use crate::classifier::{accuracy, argmax, train, ArchSpec, ClassifierModel, InputSpec, TrainConfig};
use crate::dropout::{Formulation, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::evaluation::{
    bbox_from_mask, coherency_tv, iou, tta_bbox, tta_predict, BBox, BinaryMask, TtaInputs, TtaMethod,
    DEFAULT_THRESHOLD,
};
use crate::evaluation::threshold_mask;
use crate::fido::{
    estimate_pair, estimate_pair_snapshots, mask_iou, optimize_mask, retain_map, AttributionResult, FidoConfig,
    MapKind, OptimizationTrace, DEFAULT_MASK_LEARNING_RATE,
};
use crate::infill::{InfillKind, InfillSpec};
use crate::objectives::{LossConfig, ObjectiveKind, TvTarget};
use crate::synthetic::{self, generate_with, mask_to_png, Dataset, LabeledSample, PatchMode, SyntheticConfig};
use crate::tensor::{Precision, Tensor};

pub const JOBS_ENV: &str = "FIDO_MASKS_JOBS";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "model.fmwt";

const DEFAULTS: &str = "\
Defaults:
  dataset      image side 32, patch side 6, 3 channels, 2 classes,
               200 train / 25 test samples per class, noise amplitude 0.15
  classifier   conv3x3(8) + conv3x3(16), AdamW lr 0.05, eps 0.1,
               weight decay 0.01, 15 epochs, batch 16
  masks        batch 8, 100 steps, temperature 0.1, Adam lr 0.05,
               lambda 0.001, TV weight 0.01 on theta, probability clamp 1e-6,
               Gaussian blur infill with sigma = side / 8, single precision
  evaluation   threshold 0.5 (strict), crop fraction 0.75
  jobs         1 (or FIDO_MASKS_JOBS)";

#[derive(Debug, Parser)]
#[command(name = "fido-masks", version, about = "Attribution masks with concrete dropout", after_help = DEFAULTS)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic patch dataset.
    GenerateDataset(GenerateArgs),
    /// Train the toy classifier on a generated dataset.
    Train(TrainArgs),
    /// Estimate attribution masks for one image.
    Explain(ExplainArgs),
    /// Mask quality over a grid of batch sizes, step counts and formulations.
    Benchmark(BenchmarkArgs),
    /// Test-time augmentation accuracy table.
    Tta(TtaArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub image_side: usize,
    #[arg(long, default_value_t = 6)]
    pub patch_side: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 25)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 0.15)]
    pub noise_amplitude: f64,
    #[arg(long, default_value_t = 0)]
    pub texture_seed: u64,
    /// Leave the background in place of the patch (control dataset).
    #[arg(long)]
    pub ablate_patch: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = Precision::Single)]
    pub precision: Precision,
    #[arg(long, default_value_t = 8)]
    pub conv1: usize,
    #[arg(long, default_value_t = 16)]
    pub conv2: usize,
}

/// Mask optimization settings shared by `explain`, `benchmark` and `tta`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct MaskOptions {
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.001)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.01)]
    pub tv_weight: f64,
    /// `theta` or `samples`.
    #[arg(long, default_value = "theta")]
    pub tv_target: TvTarget,
    #[arg(long, default_value_t = 1e-6)]
    pub prob_eps: f64,
    #[arg(long, default_value_t = DEFAULT_MASK_LEARNING_RATE)]
    pub mask_lr: f64,
    #[arg(long, default_value_t = Precision::Single)]
    pub precision: Precision,
    /// `strict` fails on the first non-finite value, `permissive` records it.
    #[arg(long, default_value_t = NumericMode::Permissive)]
    pub numeric_mode: NumericMode,
    /// `gaussian_blur`, `constant` or `uniform_random`.
    #[arg(long, default_value = "gaussian_blur")]
    pub infill: InfillKind,
    /// Blur sigma in pixels; defaults to image side / 8.
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub infill_value: f64,
}

impl MaskOptions {
    fn fido_config(&self, formulation: Formulation, batch_size: usize, steps: usize, seed: u64, side: usize) -> FidoConfig {
        let infill = match self.infill {
            InfillKind::GaussianBlur => InfillSpec::gaussian_blur(self.blur_sigma.unwrap_or(side as f64 / 8.0)),
            InfillKind::Constant => InfillSpec::constant(self.infill_value),
            InfillKind::UniformRandom => InfillSpec::uniform_random(seed),
        };
        FidoConfig {
            formulation,
            batch_size,
            steps,
            temperature: self.temperature,
            loss: LossConfig {
                lambda_l1: self.lambda,
                tv_weight: self.tv_weight,
                prob_clamp_eps: self.prob_eps,
                tv_target: self.tv_target,
            },
            learning_rate: self.mask_lr,
            seed,
            precision: self.precision,
            mode: self.numeric_mode,
            infill: Some(infill),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// PNG image to explain.
    #[arg(long, conflicts_with = "data")]
    pub image: Option<PathBuf>,
    /// Dataset directory; use with --index and --split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Class to explain; defaults to the predicted class.
    #[arg(long)]
    pub class: Option<usize>,
    /// Repeat to run several objectives; both give the joint map.
    #[arg(long = "objective", default_values = ["ssr", "sdr"])]
    pub objectives: Vec<ObjectiveKind>,
    #[arg(long, default_value_t = Formulation::Simplified)]
    pub formulation: Formulation,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub mask: MaskOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 8, 16, 32])]
    pub batch_sizes: Vec<usize>,
    #[arg(long = "steps", value_delimiter = ',', default_values_t = [10usize, 30, 50, 100])]
    pub steps: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [Formulation::Original, Formulation::Simplified])]
    pub formulations: Vec<Formulation>,
    /// Number of test images, taken from the start of the test split.
    #[arg(long, default_value_t = 20)]
    pub images: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = JOBS_ENV, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub mask: MaskOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TtaArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = TtaMethod::ALL)]
    pub methods: Vec<TtaMethod>,
    /// Limit to the first N test images.
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long, default_value_t = Formulation::Simplified)]
    pub formulation: Formulation,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = JOBS_ENV, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub mask: MaskOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        CliError::Run(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenerateDataset(a) => cmd_generate_dataset(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Explain(a) => cmd_explain(&a),
        Command::Benchmark(a) => cmd_benchmark(&a),
        Command::Tta(a) => cmd_tta(&a).map(|_| ()),
    }
}

/// Echo of a command invocation, written once per output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub config: &'a C,
    pub seed: u64,
    pub precision: Option<Precision>,
    /// Git-style SHA-256 object ids of the inputs (trees for directories).
    pub input_hashes: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

fn write_manifest<C: Serialize>(dir: &Path, manifest: &RunManifest<'_, C>) -> Result<()> {
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Blob hash of a file, or a tree hash over the sorted `hash path` lines of
/// every file below a directory.
pub fn content_hash(path: &Path) -> Result<String> {
    if path.is_file() {
        return Ok(blob_hash(&fs::read(path)?));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut listing = String::new();
    for rel in files {
        let hash = blob_hash(&fs::read(path.join(&rel))?);
        listing.push_str(&format!("{hash} {rel}\n"));
    }
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", listing.len()).as_bytes());
    h.update(listing.as_bytes());
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("below root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn hashes(inputs: &[(&str, &Path)]) -> Result<BTreeMap<String, String>> {
    inputs
        .iter()
        .map(|(name, p)| Ok((name.to_string(), content_hash(p)?)))
        .collect()
}

fn thread_pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(usage(format!("--jobs must be at least 1 (also settable via {JOBS_ENV})")));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Run(Error::Config(format!("cannot start {jobs} worker threads: {e}"))))
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn load_model_for(weights: &Path, dataset: Option<&Dataset>) -> Result<ClassifierModel> {
    let model = ClassifierModel::load(weights)?;
    if let Some(ds) = dataset {
        let c = &ds.config;
        let want = InputSpec::new(c.channels, c.image_side, c.image_side);
        if model.input_spec() != want || model.classes() != c.classes {
            return Err(Error::Config(format!(
                "weights expect {:?} with {} classes but the dataset has {:?} with {} classes",
                model.input_spec(),
                model.classes(),
                want,
                c.classes
            )));
        }
    }
    Ok(model)
}

pub fn cmd_generate_dataset(a: &GenerateArgs) -> CliResult<()> {
    if a.patch_side > a.image_side {
        return Err(usage(format!(
            "--patch-side {} does not fit inside --image-side {}",
            a.patch_side, a.image_side
        )));
    }
    let cfg = SyntheticConfig {
        image_side: a.image_side,
        channels: a.channels,
        patch_side: a.patch_side,
        classes: a.classes,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        texture_seed: a.texture_seed,
        noise_amplitude: a.noise_amplitude,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let mode = if a.ablate_patch { PatchMode::Ablate } else { PatchMode::Draw };
    let ds = generate_with(&cfg, a.seed, mode)?;
    ds.save(&a.out)?;
    info!("wrote {} train and {} test samples to {}", ds.train.len(), ds.test.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct EpochRow {
    epoch: usize,
    train_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
struct AccuracyRow {
    split: &'static str,
    accuracy: f64,
}

/// Trains and returns the test accuracy.
fn images(s: &[LabeledSample]) -> Vec<&Tensor<f64>> {
    s.iter().map(|s| &s.image).collect()
}

fn labels(s: &[LabeledSample]) -> Vec<usize> {
    s.iter().map(|s| s.label).collect()
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<f64> {
    if a.epochs == 0 {
        return Err(usage("--epochs must be at least 1"));
    }
    if a.batch_size == 0 {
        return Err(usage("--batch-size must be at least 1"));
    }
    if !(a.lr > 0.0) {
        return Err(usage("--lr must be positive"));
    }
    let start = Instant::now();
    let ds = Dataset::load(&a.data)?;
    let c = ds.config;
    let arch = ArchSpec {
        conv1: a.conv1,
        conv2: a.conv2,
    };
    let mut model = ClassifierModel::build_with(InputSpec::new(c.channels, c.image_side, c.image_side), c.classes, arch, a.seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        adam_eps: a.adam_eps,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let (train_x, train_y) = (images(&ds.train), labels(&ds.train));
    let (test_x, test_y) = (images(&ds.test), labels(&ds.test));
    let report = match a.precision {
        Precision::Single => train::<f32>(&mut model, &train_x, &train_y, &cfg)?,
        Precision::Double => train::<f64>(&mut model, &train_x, &train_y, &cfg)?,
    };
    let (train_acc, test_acc) = match a.precision {
        Precision::Single => (accuracy::<f32>(&model, &train_x, &train_y)?, accuracy::<f32>(&model, &test_x, &test_y)?),
        Precision::Double => (accuracy::<f64>(&model, &train_x, &train_y)?, accuracy::<f64>(&model, &test_x, &test_y)?),
    };
    fs::create_dir_all(&a.out)?;
    model.save(a.out.join(WEIGHTS_FILE))?;
    let rows: Vec<EpochRow> = report
        .epoch_loss
        .iter()
        .enumerate()
        .map(|(i, &l)| EpochRow {
            epoch: i + 1,
            train_loss: l,
        })
        .collect();
    write_csv(&a.out.join("loss_curve.csv"), &rows)?;
    write_csv(
        &a.out.join("accuracy.csv"),
        &[
            AccuracyRow {
                split: "train",
                accuracy: train_acc,
            },
            AccuracyRow {
                split: "test",
                accuracy: test_acc,
            },
        ],
    )?;
    write_manifest(
        &a.out,
        &RunManifest {
            command: "train",
            version: env!("CARGO_PKG_VERSION"),
            config: a,
            seed: a.seed,
            precision: Some(a.precision),
            input_hashes: hashes(&[("data", &a.data)])?,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    )?;
    println!("train accuracy: {train_acc:.4}");
    println!("test accuracy: {test_acc:.4}");
    Ok(test_acc)
}

fn save_map(dir: &Path, name: &str, map: &Tensor<f64>) -> Result<()> {
    let mut f = fs::File::create(dir.join(format!("{name}.tnsr")))?;
    map.write_to(&mut f)?;
    f.flush()?;
    mask_to_png(map)?.save(dir.join(format!("{name}.png")))?;
    Ok(())
}

fn save_trace(dir: &Path, trace: &OptimizationTrace) -> Result<()> {
    trace.write_csv(fs::File::create(dir.join(format!("trace_{}.csv", trace.objective)))?)
}

/// Input image with positive mask pixels tinted magenta and the crop box
/// outlined in cyan.
pub fn overlay(image: &Tensor<f64>, mask: &BinaryMask, bbox: &BBox) -> Result<RgbImage> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let d = image.data();
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = if c == 3 {
            [byte(d[i]), byte(d[h * w + i]), byte(d[2 * h * w + i])]
        } else {
            [byte(d[i]); 3]
        };
        if mask.get(y as usize, x as usize) {
            let tint = [255u16, 0, 255];
            Rgb([0, 1, 2].map(|k| ((px[k] as u16 + tint[k]) / 2) as u8))
        } else {
            Rgb(px)
        }
    });
    for x in bbox.x0..bbox.x1 {
        out.put_pixel(x as u32, bbox.y0 as u32, Rgb([0, 255, 255]));
        out.put_pixel(x as u32, (bbox.y1 - 1) as u32, Rgb([0, 255, 255]));
    }
    for y in bbox.y0..bbox.y1 {
        out.put_pixel(bbox.x0 as u32, y as u32, Rgb([0, 255, 255]));
        out.put_pixel((bbox.x1 - 1) as u32, y as u32, Rgb([0, 255, 255]));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct MapSummary {
    map: &'static str,
    tv: f64,
    nonfinite_count: usize,
    iou: Option<f64>,
}

pub fn cmd_explain(a: &ExplainArgs) -> CliResult<()> {
    let start = Instant::now();
    if a.batch_size == 0 || a.steps == 0 {
        return Err(usage("--batch-size and --steps must be at least 1"));
    }
    let mut objectives = a.objectives.clone();
    objectives.dedup();
    if objectives.is_empty() {
        return Err(usage("need at least one --objective"));
    }
    let mut inputs: Vec<(&str, &Path)> = vec![("weights", &a.weights)];
    let (model, image, gt) = match (&a.image, &a.data) {
        (Some(path), None) => {
            let model = load_model_for(&a.weights, None)?;
            inputs.push(("image", path));
            let img = synthetic::load_png_image(path, model.input_spec().channels)?;
            (model, img, None)
        }
        (None, Some(dir)) => {
            let ds = Dataset::load(dir)?;
            let model = load_model_for(&a.weights, Some(&ds))?;
            inputs.push(("data", dir));
            let split = match a.split {
                SplitArg::Train => &ds.train,
                SplitArg::Test => &ds.test,
            };
            let s = split
                .get(a.index)
                .ok_or_else(|| usage(format!("--index {} is out of range for {} samples", a.index, split.len())))?;
            (model, s.image.clone(), Some(s.gt_mask.clone()))
        }
        _ => return Err(usage("pass exactly one of --image or --data")),
    };
    let class = match a.class {
        Some(c) if c >= model.classes() => {
            return Err(usage(format!("--class {c} is out of range for {} classes", model.classes())))
        }
        Some(c) => c,
        None => model.predict_class(&image)?,
    };
    let cfg = a
        .mask
        .fido_config(a.formulation, a.batch_size, a.steps, a.seed, model.input_spec().height);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    fs::create_dir_all(&a.out)?;

    let both = objectives.contains(&ObjectiveKind::Ssr) && objectives.contains(&ObjectiveKind::Sdr);
    let mut summaries = Vec::new();
    let iou_of = |importance: &Tensor<f64>| gt.as_ref().map(|g| mask_iou(importance, g)).transpose();
    let highlight: Tensor<f64>;
    if both {
        let r = estimate_pair(&model, &image, class, &cfg)?;
        for kind in MapKind::ALL {
            save_map(&a.out, &format!("theta_{}", kind.as_str()), r.map(kind))?;
            let nonfinite = match kind {
                MapKind::Ssr => r.ssr_trace.total_nonfinite(),
                MapKind::Sdr => r.sdr_trace.total_nonfinite(),
                MapKind::Joint => r.total_nonfinite(),
            };
            summaries.push(MapSummary {
                map: kind.as_str(),
                tv: coherency_tv(r.map(kind))?,
                nonfinite_count: nonfinite,
                iou: iou_of(&r.importance(kind))?,
            });
        }
        save_trace(&a.out, &r.ssr_trace)?;
        save_trace(&a.out, &r.sdr_trace)?;
        highlight = r.theta_joint.clone();
    } else {
        let kind = objectives[0];
        let (logits, trace) = optimize_mask(&model, &image, class, kind, &cfg)?;
        let map = retain_map(&logits);
        let (map_kind, importance) = match kind {
            ObjectiveKind::Ssr => (MapKind::Ssr, map.clone()),
            ObjectiveKind::Sdr => (MapKind::Sdr, map.map(|v| 1.0 - v)),
        };
        save_map(&a.out, &format!("theta_{}", map_kind.as_str()), &map)?;
        save_trace(&a.out, &trace)?;
        summaries.push(MapSummary {
            map: map_kind.as_str(),
            tv: coherency_tv(&map)?,
            nonfinite_count: trace.total_nonfinite(),
            iou: iou_of(&importance)?,
        });
        highlight = importance;
    }
    let mask = threshold_mask(&highlight, DEFAULT_THRESHOLD)?;
    overlay(&image, &mask, &bbox_from_mask(&mask))?.save(a.out.join("overlay.png"))?;
    write_csv(&a.out.join("summary.csv"), &summaries)?;
    for s in &summaries {
        println!(
            "{}: tv {:.4}, non-finite gradients {}{}",
            s.map,
            s.tv,
            s.nonfinite_count,
            s.iou.map(|v| format!(", iou {v:.4}")).unwrap_or_default()
        );
    }
    #[derive(Serialize)]
    struct ExplainEcho<'a> {
        args: &'a ExplainArgs,
        class: usize,
        fido: &'a FidoConfig,
    }
    write_manifest(
        &a.out,
        &RunManifest {
            command: "explain",
            version: env!("CARGO_PKG_VERSION"),
            config: &ExplainEcho {
                args: a,
                class,
                fido: &cfg,
            },
            seed: a.seed,
            precision: Some(cfg.precision),
            input_hashes: hashes(&inputs)?,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(())
}

/// One benchmark measurement: a map of one image under one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct BenchmarkRow {
    pub formulation: Formulation,
    pub objective: MapKind,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub image: String,
    pub iou: f64,
    pub tv: f64,
    pub nonfinite_count: usize,
    pub grad_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct AggregateRow {
    pub formulation: Formulation,
    pub objective: MapKind,
    pub batch_size: usize,
    pub steps: usize,
    pub images: usize,
    pub mean_iou: f64,
    pub mean_tv: f64,
    pub nonfinite_count: usize,
    pub mean_grad_var: f64,
}

#[derive(Debug, Clone, Serialize)]
struct TimingRow {
    formulation: Formulation,
    batch_size: usize,
    steps: usize,
    image: String,
    runtime_s: f64,
}

fn benchmark_rows(r: &AttributionResult, gt: &Tensor<f64>, image: &str, seed: u64) -> Result<Vec<BenchmarkRow>> {
    MapKind::ALL
        .into_iter()
        .map(|kind| {
            let (nonfinite_count, grad_var) = match kind {
                MapKind::Ssr => (r.ssr_trace.total_nonfinite(), r.ssr_trace.mean_grad_var()),
                MapKind::Sdr => (r.sdr_trace.total_nonfinite(), r.sdr_trace.mean_grad_var()),
                MapKind::Joint => (
                    r.total_nonfinite(),
                    (r.ssr_trace.mean_grad_var() + r.sdr_trace.mean_grad_var()) / 2.0,
                ),
            };
            Ok(BenchmarkRow {
                formulation: r.config.formulation,
                objective: kind,
                batch_size: r.config.batch_size,
                steps: r.config.steps,
                seed,
                image: image.to_string(),
                iou: mask_iou(&r.importance(kind), gt)?,
                tv: coherency_tv(r.map(kind))?,
                nonfinite_count,
                grad_var,
            })
        })
        .collect()
}

fn aggregate(rows: &[BenchmarkRow]) -> Vec<AggregateRow> {
    let mut cells: BTreeMap<(usize, usize, usize, usize), Vec<&BenchmarkRow>> = BTreeMap::new();
    let form_idx = |f: Formulation| Formulation::ALL.iter().position(|&g| g == f).unwrap_or(0);
    let map_idx = |m: MapKind| MapKind::ALL.iter().position(|&g| g == m).unwrap_or(0);
    for r in rows {
        cells
            .entry((form_idx(r.formulation), map_idx(r.objective), r.batch_size, r.steps))
            .or_default()
            .push(r);
    }
    cells
        .into_values()
        .map(|group| {
            let n = group.len() as f64;
            let first = group[0];
            AggregateRow {
                formulation: first.formulation,
                objective: first.objective,
                batch_size: first.batch_size,
                steps: first.steps,
                images: group.len(),
                mean_iou: group.iter().map(|r| r.iou).sum::<f64>() / n,
                mean_tv: group.iter().map(|r| r.tv).sum::<f64>() / n,
                nonfinite_count: group.iter().map(|r| r.nonfinite_count).sum(),
                mean_grad_var: group.iter().map(|r| r.grad_var).sum::<f64>() / n,
            }
        })
        .collect()
}

pub fn cmd_benchmark(a: &BenchmarkArgs) -> CliResult<()> {
    let start = Instant::now();
    if a.batch_sizes.is_empty() || a.steps.is_empty() || a.formulations.is_empty() {
        return Err(usage("the benchmark grid is empty: --batch-sizes, --steps and --formulations need values"));
    }
    if a.batch_sizes.contains(&0) || a.steps.contains(&0) {
        return Err(usage("batch sizes and step counts must be at least 1"));
    }
    if a.images == 0 {
        return Err(usage("--images must be at least 1"));
    }
    let pool = thread_pool(a.jobs)?;
    let ds = Dataset::load(&a.data)?;
    let model = load_model_for(&a.weights, Some(&ds))?;
    if a.images > ds.test.len() {
        return Err(usage(format!("--images {} exceeds the {} test samples", a.images, ds.test.len())));
    }
    let side = ds.config.image_side;
    let mut formulations = a.formulations.clone();
    formulations.dedup();
    let mut batch_sizes = a.batch_sizes.clone();
    batch_sizes.sort_unstable();
    batch_sizes.dedup();
    a.mask
        .fido_config(Formulation::Simplified, 1, 1, a.seed, side)
        .validate()
        .map_err(|e| usage(e.to_string()))?;

    let per_image: Vec<(Vec<BenchmarkRow>, Vec<TimingRow>)> = pool.install(|| {
        ds.test[..a.images]
            .par_iter()
            .enumerate()
            .map(|(i, sample)| -> Result<_> {
                let seed = a.seed + i as u64;
                let mut rows = Vec::new();
                let mut timings = Vec::new();
                for &formulation in &formulations {
                    for &b in &batch_sizes {
                        let cfg = a.mask.fido_config(formulation, b, 1, seed, side);
                        let t = Instant::now();
                        let results = estimate_pair_snapshots(&model, &sample.image, sample.label, &cfg, &a.steps)?;
                        timings.push(TimingRow {
                            formulation,
                            batch_size: b,
                            steps: results.last().map(|r| r.config.steps).unwrap_or(0),
                            image: sample.id.clone(),
                            runtime_s: t.elapsed().as_secs_f64(),
                        });
                        for r in &results {
                            rows.extend(benchmark_rows(r, &sample.gt_mask, &sample.id, seed)?);
                        }
                    }
                }
                info!("benchmark: finished {}", sample.id);
                Ok((rows, timings))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (rows, timings): (Vec<_>, Vec<_>) = per_image.into_iter().unzip();
    let rows: Vec<BenchmarkRow> = rows.into_iter().flatten().collect();
    let timings: Vec<TimingRow> = timings.into_iter().flatten().collect();
    let agg = aggregate(&rows);
    fs::create_dir_all(&a.out)?;
    write_csv(&a.out.join("runs.csv"), &rows)?;
    write_csv(&a.out.join("aggregate.csv"), &agg)?;
    write_csv(&a.out.join("timings.csv"), &timings)?;
    for r in agg.iter().filter(|r| r.objective == MapKind::Joint) {
        println!(
            "{:<10} B={:<3} steps={:<4} joint iou {:.4} tv {:.4} non-finite {}",
            r.formulation.as_str(),
            r.batch_size,
            r.steps,
            r.mean_iou,
            r.mean_tv,
            r.nonfinite_count
        );
    }
    write_manifest(
        &a.out,
        &RunManifest {
            command: "benchmark",
            version: env!("CARGO_PKG_VERSION"),
            config: a,
            seed: a.seed,
            precision: Some(a.mask.precision),
            input_hashes: hashes(&[("weights", &a.weights), ("data", &a.data)])?,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(())
}

/// Accuracy of one TTA method, in the shared report schema.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct TtaRow {
    pub method: TtaMethod,
    pub accuracy: f64,
    /// IoU between the crop box and the ground-truth mask.
    pub mean_iou: Option<f64>,
    /// Mean total variation of the joint map (`fido_joint` only).
    pub mean_tv: Option<f64>,
    pub batch_size: usize,
    pub steps: usize,
    pub formulation: Formulation,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
struct PredictionRow {
    image: String,
    label: usize,
    method: TtaMethod,
    predicted: usize,
    probability: f64,
}

struct TtaImage {
    predictions: Vec<PredictionRow>,
    box_iou: Vec<Option<f64>>,
    joint_tv: Option<f64>,
}

pub fn cmd_tta(a: &TtaArgs) -> CliResult<Vec<TtaRow>> {
    let start = Instant::now();
    if a.methods.is_empty() {
        return Err(usage("--methods needs at least one method"));
    }
    if a.batch_size == 0 || a.steps == 0 {
        return Err(usage("--batch-size and --steps must be at least 1"));
    }
    let pool = thread_pool(a.jobs)?;
    let ds = Dataset::load(&a.data)?;
    let model = load_model_for(&a.weights, Some(&ds))?;
    let n = a.images.unwrap_or(ds.test.len());
    if n == 0 || n > ds.test.len() {
        return Err(usage(format!("--images must lie in 1..={}", ds.test.len())));
    }
    let side = ds.config.image_side;
    a.mask
        .fido_config(a.formulation, a.batch_size, a.steps, a.seed, side)
        .validate()
        .map_err(|e| usage(e.to_string()))?;
    let needs_fido = a.methods.contains(&TtaMethod::FidoJoint);

    let per_image: Vec<TtaImage> = pool.install(|| {
        ds.test[..n]
            .par_iter()
            .enumerate()
            .map(|(i, s)| -> Result<TtaImage> {
                let seed = a.seed + i as u64;
                let gt_mask = BinaryMask::from_indicator(&s.gt_mask)?;
                let joint = if needs_fido {
                    let predicted = argmax(&model.predict_proba(&s.image)?);
                    let cfg = a.mask.fido_config(a.formulation, a.batch_size, a.steps, seed, side);
                    Some(estimate_pair(&model, &s.image, predicted, &cfg)?.theta_joint)
                } else {
                    None
                };
                let inputs = TtaInputs {
                    gt_bbox: Some(bbox_from_mask(&gt_mask)),
                    attribution: joint.as_ref(),
                    crop_seed: seed,
                };
                let mut predictions = Vec::new();
                let mut box_iou = Vec::new();
                for &m in &a.methods {
                    let p = tta_predict(&model, &s.image, m, &inputs)?;
                    let predicted = argmax(&p);
                    predictions.push(PredictionRow {
                        image: s.id.clone(),
                        label: s.label,
                        method: m,
                        predicted,
                        probability: p[predicted],
                    });
                    let b = tta_bbox(m, side, side, &inputs)?;
                    box_iou.push(b.map(|b| iou(&BinaryMask::from_bbox(side, side, &b), &gt_mask)).transpose()?);
                }
                Ok(TtaImage {
                    predictions,
                    box_iou,
                    joint_tv: joint.as_ref().map(coherency_tv).transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let rows: Vec<TtaRow> = a
        .methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let correct = per_image
                .iter()
                .filter(|img| img.predictions[k].predicted == img.predictions[k].label)
                .count();
            let ious: Vec<f64> = per_image.iter().filter_map(|img| img.box_iou[k]).collect();
            let mean_iou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
            let mean_tv = (method == TtaMethod::FidoJoint)
                .then(|| per_image.iter().filter_map(|img| img.joint_tv).sum::<f64>() / n as f64);
            TtaRow {
                method,
                accuracy: correct as f64 / n as f64,
                mean_iou,
                mean_tv,
                batch_size: a.batch_size,
                steps: a.steps,
                formulation: a.formulation,
                seed: a.seed,
            }
        })
        .collect();
    let predictions: Vec<&PredictionRow> = per_image.iter().flat_map(|img| &img.predictions).collect();
    fs::create_dir_all(&a.out)?;
    write_csv(&a.out.join("tta.csv"), &rows)?;
    write_csv(&a.out.join("predictions.csv"), &predictions)?;
    for r in &rows {
        println!("{:<13} accuracy {:.4}", r.method.as_str(), r.accuracy);
    }
    write_manifest(
        &a.out,
        &RunManifest {
            command: "tta",
            version: env!("CARGO_PKG_VERSION"),
            config: a,
            seed: a.seed,
            precision: Some(a.mask.precision),
            input_hashes: hashes(&[("weights", &a.weights), ("data", &a.data)])?,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_sha256_objects() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn parses_defaults() {
        let cli = Cli::try_parse_from(["fido-masks", "benchmark", "--weights", "w", "--data", "d", "--out", "o"]).unwrap();
        let Command::Benchmark(b) = cli.command else { panic!() };
        assert_eq!(b.batch_sizes, vec![2, 4, 8, 16, 32]);
        assert_eq!(b.steps, vec![10, 30, 50, 100]);
        assert_eq!(b.formulations, Formulation::ALL.to_vec());
        let cli = Cli::try_parse_from(["fido-masks", "explain", "--weights", "w", "--image", "i", "--out", "o"]).unwrap();
        let Command::Explain(e) = cli.command else { panic!() };
        assert_eq!(e.objectives, vec![ObjectiveKind::Ssr, ObjectiveKind::Sdr]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(main_with_args(["fido-masks", "generate-dataset"]), 2);
        assert_eq!(main_with_args(["fido-masks", "--help"]), 0);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        let code = main_with_args([
            "fido-masks",
            "generate-dataset",
            "--out",
            out.to_str().unwrap(),
            "--patch-side",
            "64",
            "--image-side",
            "32",
        ]);
        assert_eq!(code, 2);
        let missing = dir.path().join("nothing");
        let code = main_with_args([
            "fido-masks",
            "tta",
            "--weights",
            missing.to_str().unwrap(),
            "--data",
            missing.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }
}

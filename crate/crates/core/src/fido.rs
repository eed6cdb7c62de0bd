//! The mask optimization loop: sample relaxed masks, blend in the infill,
//! score the class, and update the logits `ϑ` with Adam.
//!
//! Reported maps are retain probabilities `1 - θ = σ(-ϑ)`, the probability
//! that a pixel is kept from the original image. Under SSR they are high on
//! the evidence, under SDR they are low on it, and the joint map
//! `sqrt(m_ssr ⊙ (1 - m_sdr))` is high where both agree.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, NumericMode, Tape};
use crate::classifier::ClassifierModel;
use crate::dropout::{record_sample, seeded_rng, Formulation, NoiseDraw, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::evaluation::{coherency_tv, iou, joint_mask, threshold_mask, BinaryMask, DEFAULT_THRESHOLD};
use crate::infill::{make_infill, InfillSpec};
use crate::objectives::{record_loss, record_scores, LossConfig, ObjectiveKind};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Precision, Real, Tensor};

pub const DEFAULT_MASK_LEARNING_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidoConfig {
    pub formulation: Formulation,
    pub batch_size: usize,
    pub steps: usize,
    pub temperature: f64,
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub seed: u64,
    pub precision: Precision,
    pub mode: NumericMode,
    /// `None` uses a Gaussian blur with `sigma = side / 8`.
    pub infill: Option<InfillSpec>,
}

impl Default for FidoConfig {
    fn default() -> Self {
        Self {
            formulation: Formulation::Simplified,
            batch_size: 8,
            steps: 100,
            temperature: DEFAULT_TEMPERATURE,
            loss: LossConfig::default(),
            learning_rate: DEFAULT_MASK_LEARNING_RATE,
            seed: 0,
            precision: Precision::Single,
            mode: NumericMode::Strict,
            infill: None,
        }
    }
}

impl FidoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature", "must be positive and finite"));
        }
        self.loss.validate()?;
        AdamConfig::new(self.learning_rate).validate()?;
        if let Some(spec) = &self.infill {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn infill_for(&self, image_side: usize) -> InfillSpec {
        self.infill.unwrap_or_else(|| InfillSpec::default_for(image_side))
    }
}

/// Noise stream used by each objective, so SSR and SDR draw independently.
pub fn noise_stream(kind: ObjectiveKind) -> u64 {
    match kind {
        ObjectiveKind::Ssr => 1,
        ObjectiveKind::Sdr => 2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub grad_mean_abs: f64,
    pub grad_var: f64,
    pub nonfinite_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub objective: ObjectiveKind,
    pub formulation: Formulation,
    pub steps: Vec<StepStats>,
}

impl OptimizationTrace {
    pub fn total_nonfinite(&self) -> usize {
        self.steps.iter().map(|s| s.nonfinite_count).sum()
    }

    pub fn mean_grad_var(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.grad_var).sum::<f64>() / self.steps.len() as f64
    }

    /// First `steps` entries.
    pub fn truncated(&self, steps: usize) -> Self {
        Self {
            objective: self.objective,
            formulation: self.formulation,
            steps: self.steps[..steps.min(self.steps.len())].to_vec(),
        }
    }

    /// CSV with columns `step, loss, grad_mean_abs, grad_var, nonfinite_count`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for s in &self.steps {
            out.serialize(s)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Loss and gradients of one Monte-Carlo batch.
#[derive(Debug, Clone)]
pub struct LossEvaluation<T> {
    pub loss: T,
    /// `∂L/∂ϑ`, `[H, W]`.
    pub grad: Tensor<T>,
    /// Gradient contributed by each mask row, scaled to a full-batch
    /// estimate: `[B, H, W]`. Excludes the `θ` total-variation term, which
    /// does not depend on the noise.
    pub per_sample: Tensor<T>,
}

/// Everything about one image that stays fixed during optimization.
pub struct Problem<'a, T> {
    model: &'a ClassifierModel,
    image: Tensor<T>,
    infill: Tensor<T>,
    class: usize,
}

impl<'a, T: Real> Problem<'a, T> {
    pub fn new(model: &'a ClassifierModel, image: &Tensor<f64>, class: usize, infill: &InfillSpec) -> Result<Self> {
        let spec = model.input_spec();
        if image.shape() != spec.shape() {
            return Err(Error::ShapeMismatch {
                op: "mask optimization input",
                lhs: spec.shape().to_vec(),
                rhs: image.shape().to_vec(),
            });
        }
        if class >= model.classes() {
            return Err(Error::invalid("class", format!("{class} out of range for {} classes", model.classes())));
        }
        let image: Tensor<T> = image.cast();
        let infill = make_infill(&image, infill)?;
        Ok(Self {
            model,
            image,
            infill,
            class,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Records sampling, blending, scoring and the objective for logits
    /// `ϑ` and fixed noise, then runs backward.
    pub fn evaluate(
        &self,
        logits: &Tensor<T>,
        noise: &NoiseDraw,
        objective: ObjectiveKind,
        formulation: Formulation,
        temperature: f64,
        loss_cfg: &LossConfig,
        mode: NumericMode,
    ) -> Result<LossEvaluation<T>> {
        let mut tape = Tape::<T>::with_mode(mode);
        let theta = tape.param(logits.clone());
        let sample = record_sample(&mut tape, theta, noise, temperature, formulation)?;
        let base = tape.constant(self.image.clone());
        let infill = tape.constant(self.infill.clone());
        let blended = tape.blend(base, infill, sample.z)?;
        let probs = self.model.record_probs(&mut tape, blended)?;
        let scores = record_scores(&mut tape, probs, self.class, loss_cfg.prob_clamp_eps)?;
        let rec = record_loss(&mut tape, objective, scores, sample.z, theta, loss_cfg)?;
        let grads = tape.backward(rec.loss)?;
        let batch = T::from_f64_lossy(noise.batch() as f64);
        Ok(LossEvaluation {
            loss: tape.value(rec.loss).item()?,
            grad: grads.get_or_zeros(&tape, theta),
            per_sample: grads.get_or_zeros(&tape, sample.expanded_logits).map(|g| g * batch),
        })
    }
}

fn step_stats<T: Real>(step: usize, eval: &LossEvaluation<T>) -> StepStats {
    let grad = &eval.grad;
    let nonfinite_count = grad.count_non_finite();
    let grad_mean_abs = grad.data().iter().map(|g| g.to_f64_lossy().abs()).sum::<f64>() / grad.len() as f64;
    let b = eval.per_sample.shape()[0];
    let plane = grad.len();
    let grad_var = if b < 2 {
        0.0
    } else {
        let rows = eval.per_sample.data();
        let mut total = 0.0;
        for i in 0..plane {
            let column = (0..b).map(|r| rows[r * plane + i].to_f64_lossy());
            let mean = column.clone().sum::<f64>() / b as f64;
            total += column.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (b - 1) as f64;
        }
        total / plane as f64
    };
    StepStats {
        step,
        loss: eval.loss.to_f64_lossy(),
        grad_mean_abs,
        grad_var,
        nonfinite_count,
    }
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Domain { .. })
}

/// Logits `ϑ` captured after a given number of steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub logits: Tensor<f64>,
}

fn run<T: Real>(
    problem: &Problem<'_, T>,
    objective: ObjectiveKind,
    cfg: &FidoConfig,
    snapshot_steps: &[usize],
) -> Result<(Vec<Snapshot>, OptimizationTrace)> {
    let (h, w) = (problem.height(), problem.width());
    let mut logits = Tensor::<T>::zeros(&[h, w]);
    let mut adam = Adam::<T>::new(AdamConfig::new(cfg.learning_rate), &[h * w])?;
    let mut rng = seeded_rng(cfg.seed, noise_stream(objective));
    let mut trace = OptimizationTrace {
        objective,
        formulation: cfg.formulation,
        steps: Vec::with_capacity(cfg.steps),
    };
    let mut snapshots = Vec::new();
    for step in 1..=cfg.steps {
        let noise = NoiseDraw::sample(&mut rng, cfg.batch_size, h, w)?;
        let eval = problem
            .evaluate(&logits, &noise, objective, cfg.formulation, cfg.temperature, &cfg.loss, cfg.mode)
            .map_err(|e| if is_numeric_failure(&e) { Error::NonFiniteLoss { step } } else { e })?;
        let stats = step_stats(step, &eval);
        if cfg.mode == NumericMode::Strict && (stats.nonfinite_count > 0 || !stats.loss.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        trace.steps.push(stats);
        adam.step(&mut [logits.data_mut()], &[eval.grad.data()])?;
        if snapshot_steps.contains(&step) {
            snapshots.push(Snapshot {
                step,
                logits: logits.cast(),
            });
        }
    }
    if snapshots.last().map(|s| s.step) != Some(cfg.steps) {
        snapshots.push(Snapshot {
            step: cfg.steps,
            logits: logits.cast(),
        });
    }
    Ok((snapshots, trace))
}

fn run_in_precision(
    model: &ClassifierModel,
    image: &Tensor<f64>,
    class: usize,
    objective: ObjectiveKind,
    cfg: &FidoConfig,
    snapshot_steps: &[usize],
) -> Result<(Vec<Snapshot>, OptimizationTrace)> {
    cfg.validate()?;
    let infill = cfg.infill_for(image.shape().get(1).copied().unwrap_or(0));
    match cfg.precision {
        Precision::Single => run(&Problem::<f32>::new(model, image, class, &infill)?, objective, cfg, snapshot_steps),
        Precision::Double => run(&Problem::<f64>::new(model, image, class, &infill)?, objective, cfg, snapshot_steps),
    }
}

/// Runs `cfg.steps` updates of the given objective from `ϑ = 0` and returns
/// the final logits with the per-step trace.
pub fn optimize_mask(
    model: &ClassifierModel,
    image: &Tensor<f64>,
    class: usize,
    objective: ObjectiveKind,
    cfg: &FidoConfig,
) -> Result<(Tensor<f64>, OptimizationTrace)> {
    let (mut snaps, trace) = run_in_precision(model, image, class, objective, cfg, &[])?;
    Ok((snaps.pop().expect("final snapshot").logits, trace))
}

/// Like [`optimize_mask`] but also captures `ϑ` after each step count in
/// `snapshot_steps`. A snapshot at step `k` equals the result of a `k`-step run.
pub fn optimize_mask_snapshots(
    model: &ClassifierModel,
    image: &Tensor<f64>,
    class: usize,
    objective: ObjectiveKind,
    cfg: &FidoConfig,
    snapshot_steps: &[usize],
) -> Result<(Vec<Snapshot>, OptimizationTrace)> {
    if let Some(&bad) = snapshot_steps.iter().find(|&&s| s == 0 || s > cfg.steps) {
        return Err(Error::invalid("snapshot_steps", format!("step {bad} is outside 1..={}", cfg.steps)));
    }
    run_in_precision(model, image, class, objective, cfg, snapshot_steps)
}

/// Retain probability `σ(-ϑ)`.
pub fn retain_map(logits: &Tensor<f64>) -> Tensor<f64> {
    logits.map(|v| sigmoid(-v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionResult {
    pub theta_ssr: Tensor<f64>,
    pub theta_sdr: Tensor<f64>,
    pub theta_joint: Tensor<f64>,
    pub ssr_trace: OptimizationTrace,
    pub sdr_trace: OptimizationTrace,
    pub config: FidoConfig,
}

impl AttributionResult {
    fn from_logits(
        ssr: &Tensor<f64>,
        sdr: &Tensor<f64>,
        ssr_trace: OptimizationTrace,
        sdr_trace: OptimizationTrace,
        config: FidoConfig,
    ) -> Result<Self> {
        let theta_ssr = retain_map(ssr);
        let theta_sdr = retain_map(sdr);
        let theta_joint = joint_mask(&theta_ssr, &theta_sdr)?;
        Ok(Self {
            theta_ssr,
            theta_sdr,
            theta_joint,
            ssr_trace,
            sdr_trace,
            config,
        })
    }

    /// Map whose high values mark evidence: `θ_SSR`, `1 - θ_SDR` or the joint map.
    pub fn importance(&self, which: MapKind) -> Tensor<f64> {
        match which {
            MapKind::Ssr => self.theta_ssr.clone(),
            MapKind::Sdr => self.theta_sdr.map(|v| 1.0 - v),
            MapKind::Joint => self.theta_joint.clone(),
        }
    }

    pub fn map(&self, which: MapKind) -> &Tensor<f64> {
        match which {
            MapKind::Ssr => &self.theta_ssr,
            MapKind::Sdr => &self.theta_sdr,
            MapKind::Joint => &self.theta_joint,
        }
    }

    pub fn total_nonfinite(&self) -> usize {
        self.ssr_trace.total_nonfinite() + self.sdr_trace.total_nonfinite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Ssr,
    Sdr,
    Joint,
}

impl MapKind {
    pub const ALL: [MapKind; 3] = [MapKind::Ssr, MapKind::Sdr, MapKind::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            MapKind::Ssr => "ssr",
            MapKind::Sdr => "sdr",
            MapKind::Joint => "joint",
        }
    }
}

/// SSR and SDR runs (independent noise streams) and their joint map.
pub fn estimate_pair(
    model: &ClassifierModel,
    image: &Tensor<f64>,
    class: usize,
    cfg: &FidoConfig,
) -> Result<AttributionResult> {
    let mut all = estimate_pair_snapshots(model, image, class, cfg, &[cfg.steps])?;
    Ok(all.pop().expect("one snapshot"))
}

/// One [`AttributionResult`] per entry of `snapshot_steps` (ascending), taken
/// from a single run of `max(snapshot_steps)` steps.
pub fn estimate_pair_snapshots(
    model: &ClassifierModel,
    image: &Tensor<f64>,
    class: usize,
    cfg: &FidoConfig,
    snapshot_steps: &[usize],
) -> Result<Vec<AttributionResult>> {
    let mut steps = snapshot_steps.to_vec();
    steps.sort_unstable();
    steps.dedup();
    let Some(&last) = steps.last() else {
        return Err(Error::invalid("snapshot_steps", "need at least one step count"));
    };
    let run_cfg = FidoConfig { steps: last, ..*cfg };
    let (ssr, ssr_trace) = optimize_mask_snapshots(model, image, class, ObjectiveKind::Ssr, &run_cfg, &steps)?;
    let (sdr, sdr_trace) = optimize_mask_snapshots(model, image, class, ObjectiveKind::Sdr, &run_cfg, &steps)?;
    ssr.iter()
        .zip(&sdr)
        .map(|(a, b)| {
            AttributionResult::from_logits(
                &a.logits,
                &b.logits,
                ssr_trace.truncated(a.step),
                sdr_trace.truncated(b.step),
                FidoConfig { steps: a.step, ..*cfg },
            )
        })
        .collect()
}

/// IoU of the thresholded importance map against a 0/1 ground-truth map.
pub fn mask_iou(importance: &Tensor<f64>, gt_mask: &Tensor<f64>) -> Result<f64> {
    iou(&threshold_mask(importance, DEFAULT_THRESHOLD)?, &BinaryMask::from_indicator(gt_mask)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub batch_size: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub formulation: Formulation,
    pub batch_size: usize,
    pub steps: usize,
    /// Mean per-sample gradient variance over both runs' steps.
    pub grad_var: f64,
    /// Mean `|∂L/∂ϑ (single) - ∂L/∂ϑ (double)|` at the final logits with
    /// shared noise, averaged over both objectives.
    pub precision_deviation: f64,
    pub nonfinite_count: usize,
    pub wall_time_s: f64,
    pub joint_iou: Option<f64>,
    pub joint_tv: f64,
}

fn precision_deviation(
    model: &ClassifierModel,
    image: &Tensor<f64>,
    class: usize,
    objective: ObjectiveKind,
    logits: &Tensor<f64>,
    cfg: &FidoConfig,
) -> Result<f64> {
    let infill = cfg.infill_for(image.shape()[1]);
    let (h, w) = (logits.shape()[0], logits.shape()[1]);
    let mut rng = seeded_rng(cfg.seed, 16 + noise_stream(objective));
    let noise = NoiseDraw::sample(&mut rng, cfg.batch_size, h, w)?;
    let single = Problem::<f32>::new(model, image, class, &infill)?.evaluate(
        &logits.cast(),
        &noise,
        objective,
        cfg.formulation,
        cfg.temperature,
        &cfg.loss,
        NumericMode::Permissive,
    )?;
    let double = Problem::<f64>::new(model, image, class, &infill)?.evaluate(
        logits,
        &noise,
        objective,
        cfg.formulation,
        cfg.temperature,
        &cfg.loss,
        NumericMode::Permissive,
    )?;
    let single = single.grad.cast::<f64>();
    let total: f64 = single
        .data()
        .iter()
        .zip(double.grad.data())
        .map(|(a, b)| if a.is_finite() && b.is_finite() { (a - b).abs() } else { f64::INFINITY })
        .sum();
    Ok(total / single.len() as f64)
}

/// Runs both formulations over every grid cell with the same seed, so each
/// cell sees identical noise under either formulation.
pub fn compare_formulations(
    model: &ClassifierModel,
    image: &Tensor<f64>,
    class: usize,
    gt_mask: Option<&Tensor<f64>>,
    base: &FidoConfig,
    grid: &[GridCell],
) -> Result<Vec<ComparisonRecord>> {
    if grid.is_empty() {
        return Err(Error::invalid("grid", "comparison grid is empty"));
    }
    let mut records = Vec::with_capacity(2 * grid.len());
    for cell in grid {
        for formulation in Formulation::ALL {
            let cfg = FidoConfig {
                formulation,
                batch_size: cell.batch_size,
                steps: cell.steps,
                ..*base
            };
            let start = Instant::now();
            let (ssr, ssr_trace) = optimize_mask(model, image, class, ObjectiveKind::Ssr, &cfg)?;
            let (sdr, sdr_trace) = optimize_mask(model, image, class, ObjectiveKind::Sdr, &cfg)?;
            let wall_time_s = start.elapsed().as_secs_f64();
            let result = AttributionResult::from_logits(&ssr, &sdr, ssr_trace, sdr_trace, cfg)?;
            let deviation = (precision_deviation(model, image, class, ObjectiveKind::Ssr, &ssr, &cfg)?
                + precision_deviation(model, image, class, ObjectiveKind::Sdr, &sdr, &cfg)?)
                / 2.0;
            records.push(ComparisonRecord {
                formulation,
                batch_size: cell.batch_size,
                steps: cell.steps,
                grad_var: (result.ssr_trace.mean_grad_var() + result.sdr_trace.mean_grad_var()) / 2.0,
                precision_deviation: deviation,
                nonfinite_count: result.total_nonfinite(),
                wall_time_s,
                joint_iou: gt_mask.map(|gt| mask_iou(&result.theta_joint, gt)).transpose()?,
                joint_tv: coherency_tv(&result.theta_joint)?,
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::InputSpec;

    fn setup() -> (ClassifierModel, Tensor<f64>) {
        let model = ClassifierModel::build(InputSpec::new(3, 8, 8), 2, 5).unwrap();
        let x = Tensor::from_fn(&[3, 8, 8], |i| ((i as f64) * 0.41).sin() * 0.5 + 0.5);
        (model, x)
    }

    fn quick() -> FidoConfig {
        FidoConfig {
            batch_size: 3,
            steps: 4,
            infill: Some(InfillSpec::gaussian_blur(1.0)),
            ..FidoConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_logits() {
        let (model, x) = setup();
        let cfg = FidoConfig {
            learning_rate: 0.0,
            ..quick()
        };
        let (logits, trace) = optimize_mask(&model, &x, 0, ObjectiveKind::Ssr, &cfg).unwrap();
        assert_eq!(logits, Tensor::zeros(&[8, 8]));
        assert_eq!(trace.steps.len(), 4);
    }

    #[test]
    fn deterministic_given_seed() {
        let (model, x) = setup();
        let a = optimize_mask(&model, &x, 1, ObjectiveKind::Sdr, &quick()).unwrap();
        let b = optimize_mask(&model, &x, 1, ObjectiveKind::Sdr, &quick()).unwrap();
        assert_eq!(a, b);
        let c = optimize_mask(&model, &x, 1, ObjectiveKind::Sdr, &FidoConfig { seed: 9, ..quick() }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn snapshots_match_shorter_runs() {
        let (model, x) = setup();
        let (snaps, trace) =
            optimize_mask_snapshots(&model, &x, 0, ObjectiveKind::Ssr, &FidoConfig { steps: 6, ..quick() }, &[2, 6])
                .unwrap();
        let (short, short_trace) = optimize_mask(&model, &x, 0, ObjectiveKind::Ssr, &FidoConfig { steps: 2, ..quick() }).unwrap();
        assert_eq!(snaps[0].logits, short);
        assert_eq!(trace.truncated(2), short_trace);
        assert_eq!(snaps.len(), 2);
    }

    #[test]
    fn pair_maps_and_joint() {
        let (model, x) = setup();
        let r = estimate_pair(&model, &x, 0, &quick()).unwrap();
        for m in MapKind::ALL {
            assert!(r.map(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert_eq!(joint_mask(&r.theta_ssr, &r.theta_sdr).unwrap(), r.theta_joint);
        assert_ne!(r.theta_ssr, r.theta_sdr);
    }

    #[test]
    fn invalid_inputs() {
        let (model, x) = setup();
        assert!(optimize_mask(&model, &x, 2, ObjectiveKind::Ssr, &quick()).is_err());
        assert!(optimize_mask(&model, &x, 0, ObjectiveKind::Ssr, &FidoConfig { steps: 0, ..quick() }).is_err());
        assert!(optimize_mask(&model, &x, 0, ObjectiveKind::Ssr, &FidoConfig { batch_size: 0, ..quick() }).is_err());
        let wrong = Tensor::<f64>::zeros(&[3, 8, 7]);
        assert!(optimize_mask(&model, &wrong, 0, ObjectiveKind::Ssr, &quick()).is_err());
    }

    #[test]
    fn per_sample_gradients_average_to_the_batch_gradient() {
        let (model, x) = setup();
        let problem = Problem::<f64>::new(&model, &x, 0, &InfillSpec::gaussian_blur(1.0)).unwrap();
        let logits = Tensor::from_fn(&[8, 8], |i| ((i % 5) as f64 - 2.0) * 0.3);
        let mut rng = seeded_rng(3, 0);
        let noise = NoiseDraw::sample(&mut rng, 4, 8, 8).unwrap();
        let loss = LossConfig {
            tv_weight: 0.0,
            ..LossConfig::default()
        };
        for f in Formulation::ALL {
            let e = problem
                .evaluate(&logits, &noise, ObjectiveKind::Ssr, f, 0.1, &loss, NumericMode::Strict)
                .unwrap();
            for i in 0..64 {
                let mean: f64 = (0..4).map(|r| e.per_sample.data()[r * 64 + i]).sum::<f64>() / 4.0;
                assert!((mean - e.grad.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn comparison_records() {
        let (model, x) = setup();
        let gt = Tensor::from_fn(&[8, 8], |i| if i < 16 { 1.0 } else { 0.0 });
        let grid = [GridCell { batch_size: 2, steps: 2 }];
        let recs = compare_formulations(&model, &x, 0, Some(&gt), &quick(), &grid).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.joint_iou.is_some() && r.precision_deviation.is_finite()));
        assert!(compare_formulations(&model, &x, 0, None, &quick(), &[]).is_err());
    }

    #[test]
    fn trace_csv_header() {
        let (model, x) = setup();
        let (_, trace) = optimize_mask(&model, &x, 0, ObjectiveKind::Ssr, &quick()).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,loss,grad_mean_abs,grad_var,nonfinite_count\n"));
        assert_eq!(text.lines().count(), 5);
    }
}

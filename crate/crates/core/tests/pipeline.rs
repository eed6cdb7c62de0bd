//! Checks that need a trained toy model.

use std::sync::OnceLock;

use fido_masks::autodiff::{NumericMode, Tape};
use fido_masks::classifier::{accuracy, argmax, train, ClassifierModel, InputSpec, TrainConfig, TrainReport};
use fido_masks::dropout::{seeded_rng, Formulation, NoiseDraw};
use fido_masks::evaluation::BinaryMask;
use fido_masks::fido::{
    compare_formulations, estimate_pair, mask_iou, optimize_mask, retain_map, FidoConfig, GridCell, MapKind,
    Problem,
};
use fido_masks::infill::{make_infill, InfillSpec};
use fido_masks::objectives::{record_scores, LossConfig, ObjectiveKind};
use fido_masks::synthetic::{generate, generate_with, Dataset, LabeledSample, PatchMode, SyntheticConfig};
use fido_masks::tensor::{Precision, Tensor};

struct Fixture {
    data: Dataset,
    model: ClassifierModel,
    report: TrainReport,
}

fn images(s: &[LabeledSample]) -> Vec<&Tensor<f64>> {
    s.iter().map(|s| &s.image).collect()
}

fn labels(s: &[LabeledSample]) -> Vec<usize> {
    s.iter().map(|s| s.label).collect()
}

fn trained(cfg: &SyntheticConfig, mode: PatchMode) -> Fixture {
    let data = generate_with(cfg, 1, mode).unwrap();
    let spec = InputSpec::new(cfg.channels, cfg.image_side, cfg.image_side);
    let mut model = ClassifierModel::build(spec, cfg.classes, 0).unwrap();
    let report = train::<f32>(&mut model, &images(&data.train), &labels(&data.train), &TrainConfig::default()).unwrap();
    Fixture { data, model, report }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| trained(&SyntheticConfig::default(), PatchMode::Draw))
}

fn test_accuracy(f: &Fixture) -> f64 {
    accuracy::<f32>(&f.model, &images(&f.data.test), &labels(&f.data.test)).unwrap()
}

#[test]
fn default_training_reaches_95_percent() {
    let f = fixture();
    let acc = test_accuracy(f);
    assert!(acc >= 0.95, "test accuracy {acc}");
    let curve = &f.report.epoch_loss;
    assert!(curve.last().unwrap() < curve.first().unwrap());
}

#[test]
fn untrained_model_is_at_chance() {
    let data = generate(&SyntheticConfig::default(), 3).unwrap();
    let model = ClassifierModel::build(InputSpec::new(3, 32, 32), 2, 0).unwrap();
    let acc = accuracy::<f64>(&model, &images(&data.train), &labels(&data.train)).unwrap();
    assert!(data.train.len() >= 200);
    assert!((0.3..=0.7).contains(&acc), "{acc}");
}

#[test]
fn patch_ablated_control_is_not_learnable() {
    let control = trained(&SyntheticConfig::default(), PatchMode::Ablate);
    let acc = test_accuracy(&control);
    assert!(acc <= 0.6, "control accuracy {acc}");
}

/// With two classes the model detects one patch colour and reads "no patch"
/// as the other class, so blurring lowers the target probability for the
/// detected class only.
#[test]
fn blurring_removes_the_detected_evidence() {
    let f = fixture();
    let blur = InfillSpec::default_for(32);
    let mut per_class = [(0usize, 0usize); 2];
    for s in &f.data.test {
        let p = f.model.predict_proba::<f64>(&s.image).unwrap();
        if argmax(&p) != s.label {
            continue;
        }
        let pb = f.model.predict_proba::<f64>(&make_infill(&s.image, &blur).unwrap()).unwrap();
        per_class[s.label].0 += 1;
        if pb[s.label] < p[s.label] {
            per_class[s.label].1 += 1;
        }
    }
    let evidence_class = if per_class[0].1 >= per_class[1].1 { 0 } else { 1 };
    let (correct, dropped) = per_class[evidence_class];
    assert!(correct > 0);
    assert!(dropped as f64 >= 0.9 * correct as f64, "{dropped} of {correct}");
    // The other class gains from blurring.
    let (other_correct, other_dropped) = per_class[1 - evidence_class];
    assert!((other_dropped as f64) <= 0.1 * other_correct as f64, "{other_dropped} of {other_correct}");
}

#[test]
fn log_odds_input_gradients_are_finite() {
    let f = fixture();
    for s in &f.data.test {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(s.image.reshape_clone());
        let probs = f.model.record_probs(&mut tape, x).unwrap();
        let score = record_scores(&mut tape, probs, s.label, 1e-6).unwrap();
        let total = tape.sum_all(score).unwrap();
        let g = tape.backward(total).unwrap().get_or_zeros(&tape, x);
        assert!(g.all_finite());
    }
}

trait ReshapeClone {
    fn reshape_clone(&self) -> Tensor<f64>;
}

impl ReshapeClone for Tensor<f64> {
    fn reshape_clone(&self) -> Tensor<f64> {
        let mut shape = vec![1];
        shape.extend_from_slice(self.shape());
        self.clone().reshape(&shape).unwrap()
    }
}

#[test]
fn masks_find_the_patch() {
    let f = fixture();
    let cfg = FidoConfig::default();
    let (mut ssr_iou, mut sdr_inside, mut sdr_outside) = (0.0, 0.0, 0.0);
    let n = 20;
    for (i, s) in f.data.test.iter().take(n).enumerate() {
        let cfg = FidoConfig { seed: i as u64, ..cfg };
        let r = estimate_pair(&f.model, &s.image, s.label, &cfg).unwrap();
        ssr_iou += mask_iou(&r.importance(MapKind::Ssr), &s.gt_mask).unwrap();
        // Perturbation probability σ(ϑ_SDR) = 1 - retain map.
        let gt = BinaryMask::from_indicator(&s.gt_mask).unwrap();
        let perturb = r.theta_sdr.map(|v| 1.0 - v);
        let (mut inside, mut outside) = (vec![], vec![]);
        for (k, &v) in perturb.data().iter().enumerate() {
            if gt.data()[k] {
                inside.push(v)
            } else {
                outside.push(v)
            }
        }
        sdr_inside += inside.iter().sum::<f64>() / inside.len() as f64;
        sdr_outside += outside.iter().sum::<f64>() / outside.len() as f64;
        assert!(r.theta_joint.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!([&r.theta_ssr, &r.theta_sdr].iter().all(|m| m.data().iter().all(|&v| v > 0.0 && v < 1.0)));
    }
    let mean_iou = ssr_iou / n as f64;
    assert!(mean_iou >= 0.3, "SSR IoU {mean_iou}");
    assert!(sdr_inside > sdr_outside, "{sdr_inside} vs {sdr_outside}");
}

#[test]
fn simplified_is_no_worse_at_batch_four() {
    let f = fixture();
    let grid = [GridCell {
        batch_size: 4,
        steps: 100,
    }];
    let (mut simplified, mut original, mut nonfinite_simplified) = (0.0, 0.0, 0);
    for (i, s) in f.data.test.iter().take(20).enumerate() {
        let base = FidoConfig {
            seed: i as u64,
            mode: NumericMode::Permissive,
            ..FidoConfig::default()
        };
        for r in compare_formulations(&f.model, &s.image, s.label, Some(&s.gt_mask), &base, &grid).unwrap() {
            match r.formulation {
                Formulation::Simplified => {
                    simplified += r.joint_iou.unwrap();
                    nonfinite_simplified += r.nonfinite_count;
                }
                Formulation::Original => original += r.joint_iou.unwrap(),
            }
        }
    }
    assert!(simplified >= original, "{simplified} vs {original}");
    assert_eq!(nonfinite_simplified, 0);
}

#[test]
fn simplified_single_precision_traces_stay_finite() {
    let f = fixture();
    for (i, s) in f.data.test.iter().take(4).enumerate() {
        let cfg = FidoConfig {
            seed: i as u64,
            precision: Precision::Single,
            mode: NumericMode::Permissive,
            learning_rate: 0.5,
            ..FidoConfig::default()
        };
        for objective in [ObjectiveKind::Ssr, ObjectiveKind::Sdr] {
            let (logits, trace) = optimize_mask(&f.model, &s.image, s.label, objective, &cfg).unwrap();
            assert_eq!(trace.total_nonfinite(), 0);
            assert!(retain_map(&logits).all_finite());
        }
    }
}

#[test]
fn monte_carlo_spread_shrinks_like_inverse_sqrt_batch() {
    let f = fixture();
    let s = &f.data.test[0];
    let problem = Problem::<f64>::new(&f.model, &s.image, s.label, &InfillSpec::default_for(32)).unwrap();
    let logits = Tensor::<f64>::from_fn(&[32, 32], |i| ((i as f64) * 0.37).sin());
    let spread = |b: usize| {
        let mut rng = seeded_rng(77, b as u64);
        let losses: Vec<f64> = (0..200)
            .map(|_| {
                let noise = NoiseDraw::sample(&mut rng, b, 32, 32).unwrap();
                problem
                    .evaluate(
                        &logits,
                        &noise,
                        ObjectiveKind::Ssr,
                        Formulation::Simplified,
                        0.1,
                        &LossConfig::default(),
                        NumericMode::Strict,
                    )
                    .unwrap()
                    .loss
            })
            .collect();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        (losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (losses.len() - 1) as f64).sqrt()
    };
    // Quadrupling B should halve the spread; allow a factor of two either way.
    let ratio = spread(2) / spread(8);
    assert!((1.0..=4.0).contains(&ratio), "std ratio {ratio}");
}

#[test]
fn constant_model_gives_exactly_zero_gradient() {
    let mut model = ClassifierModel::build(InputSpec::new(3, 8, 8), 2, 1).unwrap();
    model.set_parameters(&vec![0.0; model.parameter_count()]).unwrap();
    let image = Tensor::<f64>::from_fn(&[3, 8, 8], |i| (i % 7) as f64 / 7.0);
    let problem = Problem::<f64>::new(&model, &image, 1, &InfillSpec::gaussian_blur(1.0)).unwrap();
    let cfg = LossConfig {
        lambda_l1: 0.0,
        tv_weight: 0.0,
        ..LossConfig::default()
    };
    let mut rng = seeded_rng(3, 0);
    let noise = NoiseDraw::sample(&mut rng, 4, 8, 8).unwrap();
    let logits = Tensor::<f64>::from_fn(&[8, 8], |i| (i as f64 * 0.3).cos());
    for objective in [ObjectiveKind::Ssr, ObjectiveKind::Sdr] {
        for f in Formulation::ALL {
            let e = problem
                .evaluate(&logits, &noise, objective, f, 0.1, &cfg, NumericMode::Strict)
                .unwrap();
            assert!(e.grad.data().iter().all(|&g| g == 0.0));
        }
    }
}

#[test]
fn outside_the_patch_classes_look_alike() {
    let cfg = SyntheticConfig {
        train_per_class: 1000,
        test_per_class: 1,
        ..SyntheticConfig::default()
    };
    let data = generate(&cfg, 5).unwrap();
    let plane = 32 * 32;
    for ch in 0..3 {
        let mut stats = [(0.0, 0.0, 0usize); 2];
        for s in &data.train {
            for p in 0..plane {
                if s.gt_mask.data()[p] == 0.0 {
                    let v = s.image.data()[ch * plane + p];
                    let e = &mut stats[s.label];
                    e.0 += v;
                    e.1 += v * v;
                    e.2 += 1;
                }
            }
        }
        let [(m0, v0), (m1, v1)] = stats.map(|(s, q, n)| {
            let m = s / n as f64;
            (m, q / n as f64 - m * m)
        });
        assert!((m0 - m1).abs() < 0.01, "channel {ch} means {m0} vs {m1}");
        assert!((v0 - v1).abs() < 0.01, "channel {ch} variances {v0} vs {v1}");
    }
}

#[test]
fn splits_are_disjoint() {
    let data = &fixture().data;
    for a in &data.test {
        assert!(data.train.iter().all(|b| b.id != a.id && b.image != a.image));
    }
}

#![allow(dead_code)]

use std::path::Path;

use fido_masks::autodiff::{
    finite_difference_gradient, BinaryOp, Conv2dOptions, NumericMode, ReduceOp, Tape, UnaryOp, Var,
};
use fido_masks::classifier::{ClassifierModel, InputSpec};
use fido_masks::dropout::{record_sample, seeded_rng, sample_simplified, Formulation, MaskParams, NoiseDraw};
use fido_masks::fido::Problem;
use fido_masks::infill::InfillSpec;
use fido_masks::objectives::{LossConfig, ObjectiveKind, TvTarget};
use fido_masks::tensor::Tensor;
use fido_masks::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// `‖a - b‖∞ / max(‖a‖∞, ‖b‖∞)`, with a floor so all-zero gradients compare as equal.
pub fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = a.max_abs_diff(b).unwrap();
    let scale = a
        .data()
        .iter()
        .chain(b.data())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-6);
    diff / scale
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values in `[lo, hi]` with magnitude at least `gap` (keeps kinks out of reach).
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], hi: f64, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Max relative error between backward() and central differences of
/// `sum(w ⊙ build(inputs))` over every input.
pub fn check_op(inputs: &[Tensor<f64>], weight_seed: u64, build: &Build) -> f64 {
    let forward = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::with_mode(NumericMode::Strict);
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let mut rng = seeded_rng(weight_seed, 99);
        let w = uniform(&mut rng, tape.shape(out), -1.0, 1.0);
        let w = tape.constant(w);
        let weighted = tape.mul(out, w)?;
        let total = tape.sum_all(weighted)?;
        Ok((tape, vars, total))
    };
    let (tape, vars, total) = forward(inputs).unwrap();
    let grads = tape.backward(total).unwrap();
    let mut worst = 0.0f64;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, v);
        let numeric = finite_difference_gradient(
            |probe| {
                let mut values = inputs.to_vec();
                values[k] = probe.clone();
                let (tape, _, total) = forward(&values)?;
                tape.value(total).item()
            },
            &inputs[k],
            FD_STEP,
        )
        .unwrap();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub struct PrimitiveCase {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    pub build: fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.gen_range(1..4), rng.gen_range(2..5)]
}

fn one(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let s = small_shape(rng);
    vec![uniform(rng, &s, -2.0, 2.0)]
}

fn positive(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let s = small_shape(rng);
    vec![uniform(rng, &s, 0.2, 3.0)]
}

fn kinked(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let s = small_shape(rng);
    vec![away_from_zero(rng, &s, 2.0, 0.05)]
}

fn probability(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let s = small_shape(rng);
    vec![uniform(rng, &s, 0.05, 0.95)]
}

fn clampable(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let s = small_shape(rng);
    // Clamp bounds are ±1; stay clear of them.
    vec![Tensor::from_fn(&s, |_| {
        let v: f64 = rng.gen_range(-1.9..1.9);
        if (v.abs() - 1.0).abs() < 0.05 {
            v * 0.8
        } else {
            v
        }
    })]
}

fn two(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let s = small_shape(rng);
    vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &s, -2.0, 2.0)]
}

fn two_divisor(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let s = small_shape(rng);
    vec![uniform(rng, &s, -2.0, 2.0), away_from_zero(rng, &s, 2.0, 0.3)]
}

fn with_scalar(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let s = small_shape(rng);
    vec![uniform(rng, &s, -2.0, 2.0), away_from_zero(rng, &[1], 2.0, 0.3)]
}

fn rank3(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let s = [rng.gen_range(1..3), rng.gen_range(2..4), rng.gen_range(2..4)];
    vec![uniform(rng, &s, -2.0, 2.0)]
}

fn pool_input(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let s = [rng.gen_range(1..3), 2 * rng.gen_range(1..3), 2 * rng.gen_range(1..3) + rng.gen_range(0..2)];
    vec![uniform(rng, &s, -2.0, 2.0)]
}

fn matrix(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let s = [rng.gen_range(1..4), rng.gen_range(2..5)];
    vec![uniform(rng, &s, -3.0, 3.0)]
}

fn conv_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3));
    let k = [1, 3][rng.gen_range(0..2)];
    let (h, w) = (rng.gen_range(k..6), rng.gen_range(k..6));
    vec![
        uniform(rng, &[n, c, h, w], -1.0, 1.0),
        uniform(rng, &[o, c, k, k], -1.0, 1.0),
        uniform(rng, &[o], -1.0, 1.0),
    ]
}

fn conv_build(tape: &mut Tape<f64>, v: &[Var]) -> Result<Var> {
    let k = tape.shape(v[1])[2];
    // Alternate geometry with the kernel size so both strides and paddings show up.
    let opts = if k == 3 {
        Conv2dOptions::same(3)
    } else {
        Conv2dOptions {
            stride: 2,
            padding: (1, 0),
        }
    };
    tape.conv2d(v[0], v[1], Some(v[2]), opts)
}

fn linear_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let (n, d, o) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4));
    vec![
        uniform(rng, &[n, d], -1.0, 1.0),
        uniform(rng, &[o, d], -1.0, 1.0),
        uniform(rng, &[o], -1.0, 1.0),
    ]
}

fn blend_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let (b, c, h, w) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
    vec![
        uniform(rng, &[c, h, w], 0.0, 1.0),
        uniform(rng, &[c, h, w], 0.0, 1.0),
        uniform(rng, &[b, h, w], 0.0, 1.0),
    ]
}

/// Every differentiable primitive on the tape.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    macro_rules! unary {
        ($name:expr, $inputs:expr, $op:expr) => {
            PrimitiveCase {
                name: $name,
                inputs: $inputs,
                build: |t, v| t.unary($op, v[0]),
            }
        };
    }
    macro_rules! binary {
        ($name:expr, $inputs:expr, $op:expr) => {
            PrimitiveCase {
                name: $name,
                inputs: $inputs,
                build: |t, v| t.binary($op, v[0], v[1]),
            }
        };
    }
    vec![
        unary!("neg", one, UnaryOp::Neg),
        unary!("sigmoid", one, UnaryOp::Sigmoid),
        unary!("log", positive, UnaryOp::Log),
        unary!("exp", one, UnaryOp::Exp),
        unary!("sqrt", positive, UnaryOp::Sqrt),
        unary!("abs", kinked, UnaryOp::Abs),
        unary!("square", one, UnaryOp::Square),
        unary!("relu", kinked, UnaryOp::Relu),
        unary!("log_odds", probability, UnaryOp::LogOdds),
        unary!("scale", one, UnaryOp::Scale(-2.5)),
        unary!("offset", one, UnaryOp::Offset(0.7)),
        unary!("rsub", one, UnaryOp::RSub(1.0)),
        unary!("clamp", clampable, UnaryOp::Clamp { lo: -1.0, hi: 1.0 }),
        binary!("add", two, BinaryOp::Add),
        binary!("sub", two, BinaryOp::Sub),
        binary!("mul", two, BinaryOp::Mul),
        binary!("div", two_divisor, BinaryOp::Div),
        binary!("mul_scalar", with_scalar, BinaryOp::Mul),
        binary!("div_scalar", with_scalar, BinaryOp::Div),
        PrimitiveCase {
            name: "scalar_div_tensor",
            inputs: |rng| {
                let s = small_shape(rng);
                vec![uniform(rng, &[1], -2.0, 2.0), away_from_zero(rng, &s, 2.0, 0.3)]
            },
            build: |t, v| t.div(v[0], v[1]),
        },
        PrimitiveCase {
            name: "sum_axis",
            inputs: rank3,
            build: |t, v| t.reduce(ReduceOp::Sum, v[0], &[1]),
        },
        PrimitiveCase {
            name: "mean_axes",
            inputs: rank3,
            build: |t, v| t.reduce(ReduceOp::Mean, v[0], &[0, 2]),
        },
        PrimitiveCase {
            name: "reshape",
            inputs: rank3,
            build: |t, v| {
                let n = t.shape(v[0]).iter().product::<usize>();
                t.reshape(v[0], &[n])
            },
        },
        PrimitiveCase {
            name: "expand_leading",
            inputs: one,
            build: |t, v| t.expand_leading(v[0], 3),
        },
        PrimitiveCase {
            name: "gather",
            inputs: matrix,
            build: |t, v| {
                let (n, c) = (t.shape(v[0])[0], t.shape(v[0])[1]);
                let idx: Vec<usize> = (0..n).map(|i| (i * 7 + 1) % c).collect();
                t.gather(v[0], &idx)
            },
        },
        PrimitiveCase {
            name: "softmax",
            inputs: matrix,
            build: |t, v| t.softmax(v[0]),
        },
        PrimitiveCase {
            name: "log_softmax",
            inputs: matrix,
            build: |t, v| t.log_softmax(v[0]),
        },
        PrimitiveCase {
            name: "conv2d",
            inputs: conv_inputs,
            build: conv_build,
        },
        PrimitiveCase {
            name: "avg_pool2",
            inputs: pool_input,
            build: |t, v| t.avg_pool2(v[0]),
        },
        PrimitiveCase {
            name: "linear",
            inputs: linear_inputs,
            build: |t, v| t.linear(v[0], v[1], v[2]),
        },
        PrimitiveCase {
            name: "blend",
            inputs: blend_inputs,
            build: |t, v| t.blend(v[0], v[1], v[2]),
        },
        PrimitiveCase {
            name: "total_variation",
            inputs: rank3,
            build: |t, v| t.total_variation(v[0]),
        },
    ]
}

/// Worst relative error of each primitive over `trials` random cases.
pub fn primitive_errors(trials: u64) -> Vec<(&'static str, f64)> {
    primitive_cases()
        .into_iter()
        .enumerate()
        .map(|(k, case)| {
            let mut worst = 0.0f64;
            for trial in 0..trials {
                let mut rng = seeded_rng(trial, 1000 + k as u64);
                let inputs = (case.inputs)(&mut rng);
                worst = worst.max(check_op(&inputs, trial, &case.build));
            }
            (case.name, worst)
        })
        .collect()
}

/// Worst relative error of `∂ sum(w ⊙ z) / ∂ϑ` for the simplified sampler.
pub fn sample_simplified_error(trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = seeded_rng(trial, 2000);
        let (b, h, w) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5));
        let t = [0.1, 0.5, 1.0][trial as usize % 3];
        let logits = uniform(&mut rng, &[h, w], -2.0, 2.0);
        let noise = NoiseDraw::sample(&mut rng, b, h, w).unwrap();
        let weights = uniform(&mut rng, &[b, h, w], -1.0, 1.0);

        let mut tape = Tape::<f64>::new();
        let theta = tape.param(logits.clone());
        let rec = record_sample(&mut tape, theta, &noise, t, Formulation::Simplified).unwrap();
        let wv = tape.constant(weights.clone());
        let prod = tape.mul(rec.z, wv).unwrap();
        let total = tape.sum_all(prod).unwrap();
        let analytic = tape.backward(total).unwrap().get_or_zeros(&tape, theta);

        let numeric = finite_difference_gradient(
            |probe| {
                let z = sample_simplified(&MaskParams::from_logits(probe.clone())?, &noise, t)?;
                Ok(z.values.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
            },
            &logits,
            FD_STEP,
        )
        .unwrap();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Worst relative error of the full objective gradient `∂L/∂ϑ` with frozen
/// noise, on a randomly initialised classifier.
pub fn loss_gradient_error(objective: ObjectiveKind, trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = seeded_rng(trial, 3000 + objective as u64);
        let side = [4, 8][trial as usize % 2];
        let model = ClassifierModel::build(InputSpec::new(3, side, side), 2 + trial as usize % 2, trial).unwrap();
        let image = uniform(&mut rng, &[3, side, side], 0.0, 1.0);
        let class = rng.gen_range(0..model.classes());
        let infill = InfillSpec::gaussian_blur(side as f64 / 8.0);
        let problem = Problem::<f64>::new(&model, &image, class, &infill).unwrap();
        let b = rng.gen_range(1..4);
        let noise = NoiseDraw::sample(&mut rng, b, side, side).unwrap();
        let logits = uniform(&mut rng, &[side, side], -1.5, 1.5);
        let formulation = Formulation::ALL[trial as usize % 2];
        let t = [0.1, 0.3, 1.0][trial as usize % 3];
        let cfg = LossConfig {
            lambda_l1: rng.gen_range(0.0..0.05),
            tv_weight: rng.gen_range(0.0..0.1),
            tv_target: if trial % 4 == 3 { TvTarget::Samples } else { TvTarget::Theta },
            ..LossConfig::default()
        };
        let eval = |l: &Tensor<f64>| {
            problem.evaluate(l, &noise, objective, formulation, t, &cfg, NumericMode::Strict)
        };
        let analytic = eval(&logits).unwrap().grad;
        let numeric = finite_difference_gradient(|probe| Ok(eval(probe)?.loss), &logits, FD_STEP).unwrap();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn write_file(path: &Path, bytes: &[u8]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, bytes).unwrap();
}

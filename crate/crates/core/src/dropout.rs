//! Relaxed Bernoulli ("concrete") dropout masks driven by trainable logits.
//!
//! Both samplers map logits `ϑ`, logistic noise `η̂ = log(η / (1 - η))` and a
//! temperature `t` to `z ∈ (0, 1)`:
//!
//! * [`Formulation::Original`] evaluates the textbook chain
//!   `σ((log(θ / (1 - θ)) + η̂) / t)` with `θ = σ(ϑ)`, literally, operation by
//!   operation. In single precision `θ` saturates to exactly `1` (or `0`) for
//!   moderately large `|ϑ|` and the chain breaks.
//! * [`Formulation::Simplified`] uses the algebraically identical
//!   `σ((ϑ + η̂) / t)`, which stays finite for every finite input.
//!
//! Noise comes from ChaCha8 (`rand_chacha`) seeded with `seed_from_u64`; the
//! stream id selects independent sequences for the same seed.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, NumericMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    Original,
    Simplified,
}

impl Formulation {
    pub const ALL: [Formulation; 2] = [Formulation::Original, Formulation::Simplified];

    pub fn as_str(self) -> &'static str {
        match self {
            Formulation::Original => "original",
            Formulation::Simplified => "simplified",
        }
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Formulation::Original),
            "simplified" => Ok(Formulation::Simplified),
            other => Err(Error::invalid("formulation", format!("unknown formulation `{other}`"))),
        }
    }
}

/// Deterministic RNG for a `(seed, stream)` pair.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `log(η / (1 - η))` for `η` strictly inside `(0, 1)`.
pub fn noise_logit(eta: f64) -> Result<f64> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::invalid("eta", format!("{eta} is not inside (0, 1)")));
    }
    Ok((eta / (1.0 - eta)).ln())
}

/// Per-pixel logits `ϑ` of the mask distribution; `θ = σ(ϑ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskParams<T> {
    logits: Tensor<T>,
}

impl<T: Real> MaskParams<T> {
    /// `ϑ = 0` everywhere, i.e. `θ = 0.5`.
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            logits: Tensor::zeros(&[height, width]),
        }
    }

    pub fn from_logits(logits: Tensor<T>) -> Result<Self> {
        if logits.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: logits.shape().to_vec(),
                reason: "mask logits must be [H, W]".into(),
            });
        }
        if !logits.all_finite() {
            return Err(Error::invalid("logits", "mask logits must be finite"));
        }
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Tensor<T> {
        &mut self.logits
    }

    pub fn into_logits(self) -> Tensor<T> {
        self.logits
    }

    pub fn theta(&self) -> Tensor<T> {
        self.logits.map(sigmoid)
    }

    pub fn height(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.logits.shape()[1]
    }
}

/// Uniform draws `η` and their logits `η̂`, shaped `[B, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    uniform: Tensor<f64>,
    logits: Tensor<f64>,
}

impl NoiseDraw {
    /// Draws `η ~ U(0, 1)`, redrawing the (measure-zero) endpoints.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, batch: usize, height: usize, width: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::invalid("batch", "batch size must be at least 1"));
        }
        let uniform = Tensor::from_fn(&[batch, height, width], |_| loop {
            let eta: f64 = rng.gen();
            if eta > 0.0 && eta < 1.0 {
                break eta;
            }
        });
        Self::from_uniform(uniform)
    }

    pub fn from_uniform(uniform: Tensor<f64>) -> Result<Self> {
        if uniform.rank() != 3 || uniform.shape()[0] == 0 {
            return Err(Error::InvalidShape {
                shape: uniform.shape().to_vec(),
                reason: "noise must be [B, H, W] with B >= 1".into(),
            });
        }
        let logits = uniform
            .data()
            .iter()
            .map(|&eta| noise_logit(eta))
            .collect::<Result<Vec<_>>>()?;
        let logits = Tensor::new(uniform.shape().to_vec(), logits)?;
        Ok(Self { uniform, logits })
    }

    /// Noise with the same `η` at every position.
    pub fn constant(eta: f64, batch: usize, height: usize, width: usize) -> Result<Self> {
        Self::from_uniform(Tensor::full(&[batch, height, width], eta))
    }

    pub fn uniform(&self) -> &Tensor<f64> {
        &self.uniform
    }

    pub fn logits(&self) -> &Tensor<f64> {
        &self.logits
    }

    pub fn batch(&self) -> usize {
        self.uniform.shape()[0]
    }

    pub fn row_shape(&self) -> (usize, usize) {
        (self.uniform.shape()[1], self.uniform.shape()[2])
    }
}

/// Sampled relaxed masks `z`, shaped `[B, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch<T> {
    pub values: Tensor<T>,
    pub formulation: Formulation,
    pub temperature: f64,
}

impl<T: Real> MaskBatch<T> {
    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn row(&self, i: usize) -> Result<Tensor<T>> {
        self.values.outer_slice(i)
    }
}

/// Tape handles of one recorded sampling step.
#[derive(Debug, Clone, Copy)]
pub struct RecordedSample {
    /// The relaxed masks `z`, `[B, H, W]`.
    pub z: Var,
    /// `ϑ` repeated over the batch axis. Its adjoint holds one gradient per
    /// mask row, which is what per-sample gradient statistics read.
    pub expanded_logits: Var,
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid("temperature", format!("{t} must be positive and finite")));
    }
    Ok(())
}

/// Records `z` for logits `ϑ` (`[H, W]` on the tape) and the given noise.
pub fn record_sample<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    noise: &NoiseDraw,
    temperature: f64,
    formulation: Formulation,
) -> Result<RecordedSample> {
    check_temperature(temperature)?;
    let (h, w) = noise.row_shape();
    if tape.shape(logits) != [h, w] {
        return Err(Error::ShapeMismatch {
            op: "record_sample",
            lhs: tape.shape(logits).to_vec(),
            rhs: noise.uniform().shape().to_vec(),
        });
    }
    let expanded = tape.expand_leading(logits, noise.batch())?;
    let eta_hat = tape.constant(noise.logits().cast());
    let z = match formulation {
        Formulation::Original => {
            // σ((1/t)(log(θ/(1-θ)) + η̂)), θ = σ(ϑ), one primitive at a time.
            let theta = tape.sigmoid(expanded)?;
            let one_minus = tape.rsub(1.0, theta)?;
            let ratio = tape.div(theta, one_minus)?;
            let log_ratio = tape.log(ratio)?;
            let shifted = tape.add(log_ratio, eta_hat)?;
            let scaled = tape.scale(shifted, 1.0 / temperature)?;
            tape.sigmoid(scaled)?
        }
        Formulation::Simplified => {
            let shifted = tape.add(expanded, eta_hat)?;
            let t = tape.constant(Tensor::scalar(T::from_f64_lossy(temperature)));
            let scaled = tape.div(shifted, t)?;
            tape.sigmoid(scaled)?
        }
    };
    Ok(RecordedSample {
        z,
        expanded_logits: expanded,
    })
}

fn sample_with<T: Real>(
    params: &MaskParams<T>,
    noise: &NoiseDraw,
    temperature: f64,
    formulation: Formulation,
    mode: NumericMode,
) -> Result<MaskBatch<T>> {
    let mut tape = Tape::with_mode(mode);
    let logits = tape.constant(params.logits().clone());
    let rec = record_sample(&mut tape, logits, noise, temperature, formulation)?;
    Ok(MaskBatch {
        values: tape.value(rec.z).clone(),
        formulation,
        temperature,
    })
}

/// Original concrete-dropout chain. In [`NumericMode::Strict`] a saturated
/// `θ` is reported as an error; in permissive mode it propagates.
pub fn sample_original<T: Real>(
    params: &MaskParams<T>,
    noise: &NoiseDraw,
    temperature: f64,
    mode: NumericMode,
) -> Result<MaskBatch<T>> {
    sample_with(params, noise, temperature, Formulation::Original, mode)
}

pub fn sample_simplified<T: Real>(params: &MaskParams<T>, noise: &NoiseDraw, temperature: f64) -> Result<MaskBatch<T>> {
    sample_with(params, noise, temperature, Formulation::Simplified, NumericMode::Strict)
}

/// Draws `batch` noise fields from `seed` and samples masks with `formulation`.
pub fn sample_batch<T: Real>(
    params: &MaskParams<T>,
    batch: usize,
    temperature: f64,
    seed: u64,
    formulation: Formulation,
    mode: NumericMode,
) -> Result<MaskBatch<T>> {
    let mut rng = seeded_rng(seed, 0);
    let noise = NoiseDraw::sample(&mut rng, batch, params.height(), params.width())?;
    sample_with(params, &noise, temperature, formulation, mode)
}

/// `∂z/∂ϑ` for every element, plus the sampled `z`. Both are evaluated in
/// permissive mode so saturation shows up as non-finite values instead of an error.
pub fn sample_with_gradient<T: Real>(
    params: &MaskParams<T>,
    noise: &NoiseDraw,
    temperature: f64,
    formulation: Formulation,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if noise.batch() != 1 {
        return Err(Error::invalid("noise", "elementwise gradients need a single noise row"));
    }
    let mut tape = Tape::with_mode(NumericMode::Permissive);
    let logits = tape.param(params.logits().clone());
    let rec = record_sample(&mut tape, logits, noise, temperature, formulation)?;
    let total = tape.sum_all(rec.z)?;
    let grads = tape.backward(total)?;
    let z = tape.value(rec.z).clone().reshape(params.logits().shape())?;
    Ok((z, grads.get_or_zeros(&tape, logits)))
}

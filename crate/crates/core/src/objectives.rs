//! Log-odds scores, the SSR/SDR Monte-Carlo losses, L1 sparsity and total variation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{real, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    /// Smallest sufficient region: keep the score while retaining as little as possible.
    Ssr,
    /// Smallest destroying region: kill the score while perturbing as little as possible.
    Sdr,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Ssr => "ssr",
            ObjectiveKind::Sdr => "sdr",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssr" => Ok(ObjectiveKind::Ssr),
            "sdr" => Ok(ObjectiveKind::Sdr),
            other => Err(Error::invalid("objective", format!("unknown objective `{other}`"))),
        }
    }
}

/// Which map the total-variation term regularizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TvTarget {
    /// `θ = σ(ϑ)`, added once outside the batch mean.
    Theta,
    /// Every sampled `z` row, averaged over the batch.
    Samples,
}

impl FromStr for TvTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theta" => Ok(TvTarget::Theta),
            "samples" => Ok(TvTarget::Samples),
            other => Err(Error::invalid("tv_target", format!("unknown TV target `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_l1: f64,
    pub tv_weight: f64,
    pub prob_clamp_eps: f64,
    pub tv_target: TvTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 0.001,
            tv_weight: 0.01,
            prob_clamp_eps: 1e-6,
            tv_target: TvTarget::Theta,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0) {
            return Err(Error::invalid("lambda_l1", "must be non-negative"));
        }
        if !(self.tv_weight >= 0.0) {
            return Err(Error::invalid("tv_weight", "must be non-negative"));
        }
        if !(self.prob_clamp_eps > 0.0 && self.prob_clamp_eps < 0.5) {
            return Err(Error::invalid("prob_clamp_eps", "must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// `log(p / (1 - p))` with `p` clamped to `[eps, 1 - eps]`.
pub fn log_odds(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

/// `Σ (m[i,j] - m[i,j+1])² + Σ (m[i,j] - m[i+1,j])²` over an `[H, W]` map.
pub fn total_variation<T: Real>(m: &Tensor<T>) -> Result<T> {
    if m.rank() != 2 || m.is_empty() {
        return Err(Error::InvalidShape {
            shape: m.shape().to_vec(),
            reason: "total variation expects a non-empty [H, W] map".into(),
        });
    }
    Ok(kernels::total_variation_forward(1, m.shape()[0], m.shape()[1], m.data())[0])
}

/// Log-odds of class `class` for every row of a `[B, C]` probability matrix.
pub fn record_scores<T: Real>(tape: &mut Tape<T>, probs: Var, class: usize, eps: f64) -> Result<Var> {
    let rows = tape.shape(probs)[0];
    let picked = tape.gather(probs, &vec![class; rows])?;
    let clamped = tape.clamp(picked, eps, 1.0 - eps)?;
    tape.log_odds(clamped)
}

#[derive(Debug, Clone, Copy)]
pub struct RecordedLoss {
    /// Scalar objective.
    pub loss: Var,
    /// Per-row Monte-Carlo terms `∓s + λ·L1`, shape `[B]`.
    pub per_row: Var,
}

/// Records the SSR or SDR objective on the tape.
///
/// `scores` is `[B]`, `z` is `[B, H, W]` and `logits` the `[H, W]` mask
/// parameters (used by the `θ` total-variation term).
pub fn record_loss<T: Real>(
    tape: &mut Tape<T>,
    kind: ObjectiveKind,
    scores: Var,
    z: Var,
    logits: Var,
    cfg: &LossConfig,
) -> Result<RecordedLoss> {
    cfg.validate()?;
    let batch = tape.shape(z).first().copied().unwrap_or(0);
    if batch == 0 || tape.shape(z).len() != 3 {
        return Err(Error::invalid("z", "loss needs a non-empty [B, H, W] mask batch"));
    }
    if tape.shape(scores) != [batch] {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: tape.shape(scores).to_vec(),
            rhs: tape.shape(z).to_vec(),
        });
    }
    let (signed_score, penalized) = match kind {
        ObjectiveKind::Ssr => (tape.neg(scores)?, tape.rsub(1.0, z)?),
        ObjectiveKind::Sdr => (scores, z),
    };
    let magnitude = tape.abs(penalized)?;
    let l1 = tape.sum(magnitude, &[1, 2])?;
    let l1 = tape.scale(l1, cfg.lambda_l1)?;
    let per_row = tape.add(signed_score, l1)?;
    let mut loss = tape.mean_all(per_row)?;
    if cfg.tv_weight > 0.0 {
        let tv = match cfg.tv_target {
            TvTarget::Theta => {
                let theta = tape.sigmoid(logits)?;
                tape.total_variation(theta)?
            }
            TvTarget::Samples => {
                let per_sample = tape.total_variation(z)?;
                tape.mean_all(per_sample)?
            }
        };
        let tv = tape.scale(tv, cfg.tv_weight)?;
        loss = tape.add(loss, tv)?;
    }
    Ok(RecordedLoss { loss, per_row })
}

/// Value of the objective for precomputed scores and masks. `theta` is the
/// `[H, W]` map used by the [`TvTarget::Theta`] term.
pub fn objective_loss<T: Real>(
    kind: ObjectiveKind,
    scores: &[T],
    z: &Tensor<T>,
    theta: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<T> {
    cfg.validate()?;
    if z.rank() != 3 || z.shape()[0] == 0 || scores.len() != z.shape()[0] {
        return Err(Error::invalid("z", "loss needs a non-empty [B, H, W] batch aligned with the scores"));
    }
    let plane = z.shape()[1] * z.shape()[2];
    let lambda = real::<T>(cfg.lambda_l1);
    let mut total = T::zero();
    for (row, &s) in z.data().chunks_exact(plane).zip(scores) {
        let term = match kind {
            ObjectiveKind::Ssr => -s + lambda * row.iter().map(|&v| (T::one() - v).abs()).sum::<T>(),
            ObjectiveKind::Sdr => s + lambda * row.iter().map(|&v| v.abs()).sum::<T>(),
        };
        total += term;
    }
    let mut loss = total / real(scores.len() as f64);
    if cfg.tv_weight > 0.0 {
        let tv = match cfg.tv_target {
            TvTarget::Theta => total_variation(theta)?,
            TvTarget::Samples => {
                let (h, w) = (z.shape()[1], z.shape()[2]);
                let per = kernels::total_variation_forward(scores.len(), h, w, z.data());
                per.into_iter().sum::<T>() / real(scores.len() as f64)
            }
        };
        loss += real::<T>(cfg.tv_weight) * tv;
    }
    Ok(loss)
}

pub fn ssr_loss<T: Real>(scores: &[T], z: &Tensor<T>, theta: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    objective_loss(ObjectiveKind::Ssr, scores, z, theta, cfg)
}

pub fn sdr_loss<T: Real>(scores: &[T], z: &Tensor<T>, theta: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    objective_loss(ObjectiveKind::Sdr, scores, z, theta, cfg)
}

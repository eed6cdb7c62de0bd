use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{real, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta", "moment decay rates must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps", "must be positive"));
        }
        Ok(())
    }
}

/// Adam/AdamW over a fixed list of parameter buffers.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Applies one update to `params[k]` using `grads[k]`.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::invalid("params", "parameter list does not match the optimizer state"));
        }
        self.steps += 1;
        let lr = real::<T>(self.cfg.learning_rate);
        let (b1, b2) = (real::<T>(self.cfg.beta1), real::<T>(self.cfg.beta2));
        let c1 = T::one() - b1.powi(self.steps);
        let c2 = T::one() - b2.powi(self.steps);
        let eps = real::<T>(self.cfg.eps);
        let decay = real::<T>(self.cfg.learning_rate * self.cfg.weight_decay);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first[k].len() {
                return Err(Error::invalid("grads", format!("buffer {k} has the wrong length")));
            }
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] - decay * p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

//! Infill images and the perturbation `φ(x, z) = (1 - z) ⊙ x + z ⊙ x̂`.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dOptions, Tape};
use crate::dropout::{seeded_rng, MaskBatch};
use crate::error::{Error, Result};
use crate::tensor::{real, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfillKind {
    GaussianBlur,
    Constant,
    UniformRandom,
}

impl FromStr for InfillKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blur" | "blur" => Ok(InfillKind::GaussianBlur),
            "constant" => Ok(InfillKind::Constant),
            "uniform_random" | "random" => Ok(InfillKind::UniformRandom),
            other => Err(Error::invalid("infill", format!("unsupported infill kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfillSpec {
    pub kind: InfillKind,
    /// Standard deviation in pixels, used by [`InfillKind::GaussianBlur`].
    pub blur_sigma: f64,
    pub constant_value: f64,
    pub seed: u64,
}

impl InfillSpec {
    pub fn gaussian_blur(sigma: f64) -> Self {
        Self {
            kind: InfillKind::GaussianBlur,
            blur_sigma: sigma,
            constant_value: 0.0,
            seed: 0,
        }
    }

    /// Blur with `sigma = image_side / 8`.
    pub fn default_for(image_side: usize) -> Self {
        Self::gaussian_blur(image_side as f64 / 8.0)
    }

    pub fn constant(value: f64) -> Self {
        Self {
            kind: InfillKind::Constant,
            blur_sigma: 0.0,
            constant_value: value,
            seed: 0,
        }
    }

    pub fn uniform_random(seed: u64) -> Self {
        Self {
            kind: InfillKind::UniformRandom,
            blur_sigma: 0.0,
            constant_value: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            InfillKind::GaussianBlur if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) => {
                Err(Error::invalid("blur_sigma", format!("{} must be positive", self.blur_sigma)))
            }
            InfillKind::Constant if !(0.0..=1.0).contains(&self.constant_value) => Err(Error::invalid(
                "constant_value",
                format!("{} is outside [0, 1]", self.constant_value),
            )),
            _ => Ok(()),
        }
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / total).collect()
}

/// Mirror index without edge repetition (`-1 -> 1`), valid for any offset.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn reflect_pad<T: Real>(x: &Tensor<T>, pad: usize) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    Tensor::from_fn(&[c, 1, ph, pw], |i| {
        let ch = i / (ph * pw);
        let y = reflect((i / pw % ph) as isize - pad as isize, h);
        let xx = reflect((i % pw) as isize - pad as isize, w);
        x.data()[(ch * h + y) * w + xx]
    })
}

fn gaussian_blur<T: Real>(x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let taps = gaussian_kernel(sigma);
    let radius = taps.len() / 2;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut tape = Tape::<T>::new();
    let padded = tape.constant(reflect_pad(x, radius));
    let k = taps.iter().map(|&v| real::<T>(v)).collect::<Vec<_>>();
    let horizontal = tape.constant(Tensor::new(vec![1, 1, 1, k.len()], k.clone())?);
    let vertical = tape.constant(Tensor::new(vec![1, 1, k.len(), 1], k)?);
    let rows = tape.conv2d(padded, horizontal, None, Conv2dOptions::default())?;
    let out = tape.conv2d(rows, vertical, None, Conv2dOptions::default())?;
    tape.value(out).clone().reshape(&[c, h, w])
}

/// Builds the replacement image `x̂` for `x` (`[C, H, W]`, values in `[0, 1]`).
pub fn make_infill<T: Real>(x: &Tensor<T>, spec: &InfillSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    if x.rank() != 3 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "infill expects a [C, H, W] image".into(),
        });
    }
    match spec.kind {
        InfillKind::GaussianBlur => gaussian_blur(x, spec.blur_sigma),
        InfillKind::Constant => Ok(Tensor::full(x.shape(), real(spec.constant_value))),
        InfillKind::UniformRandom => {
            let mut rng = seeded_rng(spec.seed, 1);
            Ok(Tensor::from_fn(x.shape(), |_| real(rng.gen::<f64>())))
        }
    }
}

/// `[B, C, H, W]` batch of perturbed images, one per mask row.
pub fn compose<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>, z: &MaskBatch<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::<T>::new();
    let base = tape.constant(x.clone());
    let infill = tape.constant(x_hat.clone());
    let mask = tape.constant(z.values.clone());
    let out = tape.blend(base, infill, mask)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout::Formulation;

    fn image() -> Tensor<f64> {
        Tensor::from_fn(&[3, 6, 5], |i| ((i as f64) * 0.31).sin() * 0.5 + 0.5)
    }

    fn batch(values: Tensor<f64>) -> MaskBatch<f64> {
        MaskBatch {
            values,
            formulation: Formulation::Simplified,
            temperature: 0.1,
        }
    }

    #[test]
    fn kernel_is_normalized() {
        for sigma in [0.5, 1.0, 4.0, 11.3] {
            let k = gaussian_kernel(sigma);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
        }
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let x = Tensor::<f64>::full(&[3, 8, 8], 0.37);
        let y = make_infill(&x, &InfillSpec::gaussian_blur(2.0)).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-6);
    }

    #[test]
    fn huge_blur_approaches_the_mean() {
        let x = Tensor::<f64>::from_fn(&[1, 16, 16], |i| if (i / 16 + i % 16) % 2 == 0 { 1.0 } else { 0.0 });
        let mean = x.mean();
        let y = make_infill(&x, &InfillSpec::gaussian_blur(40.0)).unwrap();
        assert!(y.data().iter().all(|v| (v - mean).abs() < 0.02));
    }

    #[test]
    fn constant_and_random_ignore_input() {
        let x = image();
        assert_eq!(make_infill(&x, &InfillSpec::constant(0.0)).unwrap(), Tensor::zeros(x.shape()));
        let a = make_infill(&x, &InfillSpec::uniform_random(3)).unwrap();
        let b = make_infill(&Tensor::zeros(x.shape()), &InfillSpec::uniform_random(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!("gan".parse::<InfillKind>().is_err());
        assert!(make_infill(&image(), &InfillSpec::gaussian_blur(0.0)).is_err());
        assert!(make_infill(&image(), &InfillSpec::constant(1.5)).is_err());
    }

    #[test]
    fn compose_identities() {
        let x = image();
        let xh = make_infill(&x, &InfillSpec::gaussian_blur(1.0)).unwrap();
        let zeros = compose(&x, &xh, &batch(Tensor::zeros(&[2, 6, 5]))).unwrap();
        let ones = compose(&x, &xh, &batch(Tensor::ones(&[2, 6, 5]))).unwrap();
        let half = compose(&x, &xh, &batch(Tensor::full(&[1, 6, 5], 0.5))).unwrap();
        for b in 0..2 {
            assert_eq!(zeros.outer_slice(b).unwrap(), x);
            assert_eq!(ones.outer_slice(b).unwrap(), xh);
        }
        let mid = x.zip_map(&xh, |a, b| (a + b) / 2.0).unwrap();
        assert!(half.outer_slice(0).unwrap().max_abs_diff(&mid).unwrap() < 1e-15);
        assert!(compose(&x, &xh, &batch(Tensor::zeros(&[2, 5, 6]))).is_err());
    }
}

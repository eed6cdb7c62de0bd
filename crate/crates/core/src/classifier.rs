//! Small differentiable CNN: two `conv3x3 → ReLU → avgpool2` stages, global
//! average pooling, a dense head and a softmax.
//!
//! Parameters are kept in double precision; a forward pass casts them into
//! the tape's working precision.
//!
//! Weight file layout (little endian):
//!
//! | bytes  | content                          |
//! |--------|----------------------------------|
//! | 0..4   | magic `FMWT`                     |
//! | 4..8   | format version (`u32`, 1)        |
//! | 8..12  | layer count (`u32`, 3)           |
//! | 12..14 | input height (`u16`)             |
//! | 14..16 | input width (`u16`)              |
//!
//! followed by `weight, bias` tensor blobs for each layer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dOptions, Tape, Var};
use crate::dropout::seeded_rng;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

pub const WEIGHT_MAGIC: &[u8; 4] = b"FMWT";
pub const WEIGHT_VERSION: u32 = 1;
const LAYER_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputSpec {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Channel widths of the two convolution stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub conv1: usize,
    pub conv2: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self { conv1: 8, conv2: 16 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    weight: Tensor<f64>,
    bias: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    input: InputSpec,
    classes: usize,
    layers: Vec<Layer>,
}

fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl ClassifierModel {
    pub fn build(input: InputSpec, classes: usize, seed: u64) -> Result<Self> {
        Self::build_with(input, classes, ArchSpec::default(), seed)
    }

    pub fn build_with(input: InputSpec, classes: usize, arch: ArchSpec, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("classes", "need at least two classes"));
        }
        if input.channels == 0 || input.height < 4 || input.width < 4 {
            return Err(Error::invalid("input", format!("unsupported input spec {input:?}")));
        }
        if arch.conv1 == 0 || arch.conv2 == 0 {
            return Err(Error::invalid("arch", "channel widths must be positive"));
        }
        let mut rng = seeded_rng(seed, 0);
        let c = input.channels;
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let layers = vec![
            Layer {
                weight: uniform_tensor(&mut rng, &[arch.conv1, c, 3, 3], he(c * 9)),
                bias: Tensor::zeros(&[arch.conv1]),
            },
            Layer {
                weight: uniform_tensor(&mut rng, &[arch.conv2, arch.conv1, 3, 3], he(arch.conv1 * 9)),
                bias: Tensor::zeros(&[arch.conv2]),
            },
            Layer {
                weight: uniform_tensor(&mut rng, &[classes, arch.conv2], (6.0 / (arch.conv2 + classes) as f64).sqrt()),
                bias: Tensor::zeros(&[classes]),
            },
        ];
        Ok(Self { input, classes, layers })
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            conv1: self.layers[0].bias.len(),
            conv2: self.layers[1].bias.len(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Flattened copy of every parameter, in file order.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
            .collect()
    }

    /// Overwrites every parameter from a flat slice in [`Self::parameters`] order.
    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::invalid(
                "parameters",
                format!("expected {} values, got {}", self.parameter_count(), values.len()),
            ));
        }
        let mut rest = values;
        for buf in self.buffers_mut() {
            let (head, tail) = rest.split_at(buf.len());
            buf.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut() as &mut [f64], l.bias.data_mut()])
            .collect()
    }

    fn buffer_sizes(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| [l.weight.len(), l.bias.len()]).collect()
    }

    /// Records the network on `tape` for a `[N, C, H, W]` input and returns the
    /// `[N, classes]` logits together with the parameter leaves.
    pub fn record_logits<T: Real>(&self, tape: &mut Tape<T>, input: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let shape = tape.shape(input).to_vec();
        let expected = self.input.shape();
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::ShapeMismatch {
                op: "classifier input",
                lhs: expected.to_vec(),
                rhs: shape,
            });
        }
        let params: Vec<Var> = self
            .layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .map(|t| tape.leaf(t.cast(), trainable))
            .collect();
        let mut h = input;
        for stage in 0..2 {
            h = tape.conv2d(h, params[2 * stage], Some(params[2 * stage + 1]), Conv2dOptions::same(3))?;
            h = tape.relu(h)?;
            h = tape.avg_pool2(h)?;
        }
        let h = tape.mean(h, &[2, 3])?;
        let logits = tape.linear(h, params[4], params[5])?;
        Ok((logits, params))
    }

    /// Records the `[N, classes]` class probabilities.
    pub fn record_probs<T: Real>(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        let (logits, _) = self.record_logits(tape, input, false)?;
        tape.softmax(logits)
    }

    /// Class probabilities for a batch `[N, C, H, W]`; returns `[N, classes]`.
    pub fn predict_batch<T: Real>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::<T>::new();
        let x = tape.constant(images.clone());
        let p = self.record_probs(&mut tape, x)?;
        Ok(tape.value(p).clone())
    }

    /// `p(c | x)` for a single `[C, H, W]` image.
    pub fn predict_proba<T: Real>(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        if image.shape() != self.input.shape() {
            return Err(Error::ShapeMismatch {
                op: "predict_proba",
                lhs: self.input.shape().to_vec(),
                rhs: image.shape().to_vec(),
            });
        }
        let mut batched = image.clone().reshape(&[1, self.input.channels, self.input.height, self.input.width])?;
        batched = self.predict_batch(&batched)?;
        Ok(batched.into_data())
    }

    pub fn predict_class<T: Real>(&self, image: &Tensor<T>) -> Result<usize> {
        Ok(argmax(&self.predict_proba(image)?))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = [0u8; 16];
        header[..4].copy_from_slice(WEIGHT_MAGIC);
        header[4..8].copy_from_slice(&WEIGHT_VERSION.to_le_bytes());
        header[8..12].copy_from_slice(&(LAYER_COUNT as u32).to_le_bytes());
        let dim = |v: usize| u16::try_from(v).map_err(|_| Error::Format(format!("input dimension {v} exceeds u16")));
        header[12..14].copy_from_slice(&dim(self.input.height)?.to_le_bytes());
        header[14..16].copy_from_slice(&dim(self.input.width)?.to_le_bytes());
        w.write_all(&header)?;
        for layer in &self.layers {
            layer.weight.write_to(w)?;
            layer.bias.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|e| Error::Format(format!("truncated weight header: {e}")))?;
        if &header[..4] != WEIGHT_MAGIC {
            return Err(Error::Format(format!(
                "not a weight file: magic {:?}, expected \"FMWT\"",
                String::from_utf8_lossy(&header[..4])
            )));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
        if version != WEIGHT_VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let count = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
        if count != LAYER_COUNT {
            return Err(Error::Format(format!("expected {LAYER_COUNT} layers, found {count}")));
        }
        let height = u16::from_le_bytes([header[12], header[13]]) as usize;
        let width = u16::from_le_bytes([header[14], header[15]]) as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let weight = Tensor::<f64>::read_from(r)?;
            let bias = Tensor::<f64>::read_from(r)?;
            layers.push(Layer { weight, bias });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after the last layer".into()));
        }
        let bad = |what: &str| Error::Format(format!("inconsistent layer shapes: {what}"));
        let (w1, w2, w3) = (layers[0].weight.shape(), layers[1].weight.shape(), layers[2].weight.shape());
        if w1.len() != 4 || w2.len() != 4 || w3.len() != 2 {
            return Err(bad("ranks"));
        }
        if w2[1] != w1[0] || w1[2..] != [3, 3] || w2[2..] != [3, 3] {
            return Err(bad("convolution stages"));
        }
        if w3[1] != w2[0] {
            return Err(bad("dense head"));
        }
        if layers.iter().any(|l| l.bias.shape() != [l.weight.shape()[0]]) {
            return Err(bad("bias"));
        }
        let input = InputSpec::new(w1[1], height, width);
        let classes = w3[0];
        Ok(Self { input, classes, layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            learning_rate: 0.05,
            adam_eps: 0.1,
            weight_decay: 0.01,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate", "must be non-negative"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            ..AdamConfig::new(self.learning_rate)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross-entropy over each epoch's mini-batches.
    pub epoch_loss: Vec<f64>,
    /// Cross-entropy of every optimizer step.
    pub step_loss: Vec<f64>,
}

/// Mini-batch AdamW on the softmax cross-entropy, in precision `T`.
pub fn train<T: Real>(
    model: &mut ClassifierModel,
    images: &[&Tensor<f64>],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::invalid("dataset", "need a non-empty set of images with one label each"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.classes) {
        return Err(Error::invalid("labels", format!("label {bad} out of range for {} classes", model.classes)));
    }
    let spec = model.input.shape();
    if let Some(img) = images.iter().find(|img| img.shape() != spec) {
        return Err(Error::ShapeMismatch {
            op: "train",
            lhs: spec.to_vec(),
            rhs: img.shape().to_vec(),
        });
    }
    let mut opt = Adam::<f64>::new(cfg.adam(), &model.buffer_sizes())?;
    let mut rng = seeded_rng(cfg.seed, 7);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut report = TrainReport::default();
    let plane: usize = spec.iter().product();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * plane);
            for &i in chunk {
                data.extend(images[i].data().iter().map(|&v| T::from_f64_lossy(v)));
            }
            let batch = Tensor::new(vec![chunk.len(), spec[0], spec[1], spec[2]], data)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

            let mut tape = Tape::<T>::new();
            let x = tape.constant(batch);
            let (logits, params) = model.record_logits(&mut tape, x, true)?;
            let log_probs = tape.log_softmax(logits)?;
            let picked = tape.gather(log_probs, &targets)?;
            let mean = tape.mean_all(picked)?;
            let loss = tape.neg(mean)?;
            let loss_value = tape.value(loss).item()?.to_f64_lossy();
            let grads = tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = params.iter().map(|&p| grads.get_or_zeros(&tape, p).to_f64_vec()).collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut buffers = model.buffers_mut();
            opt.step(&mut buffers, &grad_refs)?;

            report.step_loss.push(loss_value);
            epoch_total += loss_value;
            batches += 1;
        }
        report.epoch_loss.push(epoch_total / batches as f64);
    }
    Ok(report)
}

/// Fraction of `images` whose argmax prediction equals the label.
pub fn accuracy<T: Real>(model: &ClassifierModel, images: &[&Tensor<f64>], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("images", "accuracy of an empty set"));
    }
    let mut correct = 0;
    for chunk in (0..images.len()).collect::<Vec<_>>().chunks(32) {
        let parts: Vec<Tensor<T>> = chunk.iter().map(|&i| images[i].cast()).collect();
        let probs = model.predict_batch(&Tensor::stack(&parts)?)?;
        for (row, &i) in probs.data().chunks_exact(model.classes).zip(chunk) {
            if argmax(row) == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> InputSpec {
        InputSpec::new(3, 8, 8)
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = ClassifierModel::build(spec(), 2, 9).unwrap();
        let b = ClassifierModel::build(spec(), 2, 9).unwrap();
        let c = ClassifierModel::build(spec(), 2, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(ClassifierModel::build(spec(), 1, 9).is_err());
    }

    #[test]
    fn default_arch_parameter_count() {
        let m = ClassifierModel::build(InputSpec::new(3, 32, 32), 2, 0).unwrap();
        assert_eq!(m.parameter_count(), 3 * 8 * 9 + 8 + 8 * 16 * 9 + 16 + 2 * 16 + 2);
    }

    #[test]
    fn probabilities_are_a_distribution() {
        let m = ClassifierModel::build(spec(), 3, 1).unwrap();
        let x = Tensor::<f64>::from_fn(&[3, 8, 8], |i| (i as f64 * 0.13).cos().abs());
        let p = m.predict_proba(&x).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(p, m.predict_proba(&x).unwrap());
        assert!(m.predict_proba(&Tensor::<f64>::zeros(&[3, 8, 9])).is_err());
    }

    #[test]
    fn weight_file_round_trip_and_errors() {
        let m = ClassifierModel::build(spec(), 2, 4).unwrap();
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        let back = ClassifierModel::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        let x = Tensor::<f32>::from_fn(&[3, 8, 8], |i| (i % 7) as f32 / 7.0);
        assert_eq!(back.predict_proba(&x).unwrap(), m.predict_proba(&x).unwrap());

        let truncated = &bytes[..bytes.len() - 3];
        assert!(ClassifierModel::read_from(&mut &truncated[..]).is_err());
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        let err = ClassifierModel::read_from(&mut bad.as_slice()).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut m = ClassifierModel::build(spec(), 2, 4).unwrap();
        let before = m.clone();
        let img = Tensor::<f64>::full(&[3, 8, 8], 0.3);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        train::<f64>(&mut m, &[&img, &img], &[0, 1], &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn memorizes_a_single_sample() {
        let mut m = ClassifierModel::build(spec(), 2, 4).unwrap();
        let img = Tensor::<f64>::from_fn(&[3, 8, 8], |i| (i as f64 * 0.37).sin().abs());
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 0.05,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 1,
            seed: 3,
        };
        let report = train::<f64>(&mut m, &[&img], &[1], &cfg).unwrap();
        assert_eq!(report.step_loss.len(), 50);
        assert!(*report.step_loss.last().unwrap() < 0.01, "{:?}", report.step_loss.last());
    }

    #[test]
    fn label_out_of_range() {
        let mut m = ClassifierModel::build(spec(), 2, 4).unwrap();
        let img = Tensor::<f64>::zeros(&[3, 8, 8]);
        assert!(train::<f64>(&mut m, &[&img], &[2], &TrainConfig::default()).is_err());
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train::<f64>(&mut m, &[&img], &[0], &cfg).is_err());
    }
}

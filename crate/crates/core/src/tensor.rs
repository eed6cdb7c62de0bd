//! Dense row-major tensors in single or double precision.
//!
//! The on-disk format is a 16-byte header followed by the raw little-endian
//! IEEE-754 values:
//!
//! | bytes  | content                                   |
//! |--------|-------------------------------------------|
//! | 0..4   | magic `TNSR`                              |
//! | 4      | precision flag (`1` = f32, `2` = f64)     |
//! | 5      | rank (0..=4)                              |
//! | 6..8   | reserved, zero                            |
//! | 8..16  | four `u16` dimensions, unused slots zero  |

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const TENSOR_HEADER_LEN: usize = 16;
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn flag(self) -> u8 {
        match self {
            Precision::Single => 1,
            Precision::Double => 2,
        }
    }

    pub fn from_flag(flag: u8) -> Result<Self> {
        match flag {
            1 => Ok(Precision::Single),
            2 => Ok(Precision::Double),
            other => Err(Error::Format(format!("unknown precision flag {other}"))),
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(Error::invalid("precision", format!("unknown precision `{other}`"))),
        }
    }
}

/// Floating-point element type of a [`Tensor`].
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn write_le<W: Write>(self, w: &mut W) -> std::io::Result<()>;
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn write_le<W: Write>(self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&self.to_le_bytes())
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn write_le<W: Write>(self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&self.to_le_bytes())
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Converts an `f64` literal into the working precision.
#[inline]
pub fn real<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                reason: format!("expected {} values, got {}", numel(&shape), data.len()),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| real(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar_like(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarOutput {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("cannot reshape {} values", self.data.len()),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / real(self.data.len() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn count_non_finite(&self) -> usize {
        self.data.iter().filter(|v| !v.is_finite()).count()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        let diff = self.zip_map(other, |a, b| (a - b).abs())?;
        Ok(diff.data.iter().fold(0.0, |m, v| m.max(v.to_f64_lossy())))
    }

    /// View of the `index`-th slice along the leading axis.
    pub fn outer_slice(&self, index: usize) -> Result<Tensor<T>> {
        let (&n, rest) = self.shape.split_first().ok_or_else(|| Error::InvalidShape {
            shape: self.shape.clone(),
            reason: "cannot slice a scalar".into(),
        })?;
        if index >= n {
            return Err(Error::invalid("index", format!("{index} out of range for axis of length {n}")));
        }
        let stride = numel(rest);
        Tensor::new(rest.to_vec(), self.data[index * stride..(index + 1) * stride].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("parts", "cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        if self.rank() > MAX_RANK {
            return Err(Error::Format(format!("rank {} exceeds {MAX_RANK}", self.rank())));
        }
        let mut header = [0u8; TENSOR_HEADER_LEN];
        header[..4].copy_from_slice(TENSOR_MAGIC);
        header[4] = T::PRECISION.flag();
        header[5] = self.rank() as u8;
        for (i, &d) in self.shape.iter().enumerate() {
            let d = u16::try_from(d).map_err(|_| Error::Format(format!("dimension {d} does not fit in u16")))?;
            header[8 + 2 * i..10 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.data.len() * T::PRECISION.byte_width());
        for &v in &self.data {
            v.write_le(&mut buf)?;
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    /// Reads one tensor blob; the stored precision must match `T`.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        match DynTensor::read_from(r)? {
            DynTensor::Single(t) if T::PRECISION == Precision::Single => Ok(t.cast()),
            DynTensor::Double(t) if T::PRECISION == Precision::Double => Ok(t.cast()),
            other => Err(Error::Format(format!(
                "stored precision {} does not match requested {}",
                other.precision(),
                T::PRECISION
            ))),
        }
    }
}

/// A tensor whose precision is only known at run time (e.g. after reading a file).
#[derive(Debug, Clone, PartialEq)]
pub enum DynTensor {
    Single(Tensor<f32>),
    Double(Tensor<f64>),
}

impl DynTensor {
    pub fn precision(&self) -> Precision {
        match self {
            DynTensor::Single(_) => Precision::Single,
            DynTensor::Double(_) => Precision::Double,
        }
    }

    pub fn to_precision<T: Real>(&self) -> Tensor<T> {
        match self {
            DynTensor::Single(t) => t.cast(),
            DynTensor::Double(t) => t.cast(),
        }
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut header = [0u8; TENSOR_HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|e| Error::Format(format!("truncated tensor header: {e}")))?;
        if &header[..4] != TENSOR_MAGIC {
            return Err(Error::Format(format!(
                "bad tensor magic {:?}, expected \"TNSR\"",
                String::from_utf8_lossy(&header[..4])
            )));
        }
        let precision = Precision::from_flag(header[4])?;
        let rank = header[5] as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("tensor rank {rank} exceeds {MAX_RANK}")));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|i| u16::from_le_bytes([header[8 + 2 * i], header[9 + 2 * i]]) as usize)
            .collect();
        let width = precision.byte_width();
        let mut raw = vec![0u8; numel(&shape) * width];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated tensor payload for shape {shape:?}: {e}")))?;
        Ok(match precision {
            Precision::Single => DynTensor::Single(Tensor::new(shape, raw.chunks_exact(4).map(f32::read_le).collect())?),
            Precision::Double => DynTensor::Double(Tensor::new(shape, raw.chunks_exact(8).map(f64::read_le).collect())?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let bytes = t.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"TNSR");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[8..12], &[2, 0, 3, 0]);
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(&bytes[16 + 4..16 + 8], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_and_bad_magic() {
        let t = Tensor::<f64>::ones(&[4]);
        let bytes = t.to_bytes().unwrap();
        assert!(matches!(
            DynTensor::read_from(&mut &bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = DynTensor::read_from(&mut bad.as_slice()).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn precision_mismatch_is_reported() {
        let bytes = Tensor::<f32>::ones(&[2]).to_bytes().unwrap();
        assert!(Tensor::<f64>::read_from(&mut bytes.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn serialization_round_trips(dims in proptest::collection::vec(1usize..5, 0..=4), seed in any::<u64>()) {
            let t = Tensor::<f64>::from_fn(&dims, |i| (seed as f64 * 1e-9 + i as f64).sin());
            let back = Tensor::<f64>::read_from(&mut t.to_bytes().unwrap().as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}

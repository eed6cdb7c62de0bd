//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to its variables together with
//! the forward value. [`Tape::backward`] replays the records in reverse,
//! visiting each one exactly once and accumulating adjoints additively, so a
//! value consumed twice receives the sum of both path gradients.
//!
//! Tapes are cheap to build and meant to be thrown away after one
//! optimization step.
//!
//! ```
//! use fido_masks::autodiff::Tape;
//! use fido_masks::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::scalar(2.0));
//! let y = tape.param(Tensor::scalar(3.0));
//! let xy = tape.mul(x, y).unwrap();
//! let grads = tape.backward(xy).unwrap();
//! assert_eq!(grads.get(x).unwrap().item().unwrap(), 3.0);
//! assert_eq!(grads.get(y).unwrap().item().unwrap(), 2.0);
//! ```

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{numel, real, Real, Tensor};

/// How non-finite values are treated during the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumericMode {
    /// Domain violations and non-finite results are errors.
    #[default]
    Strict,
    /// Non-finite values propagate silently.
    Permissive,
}

impl NumericMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NumericMode::Strict => "strict",
            NumericMode::Permissive => "permissive",
        }
    }
}

impl std::fmt::Display for NumericMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NumericMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(NumericMode::Strict),
            "permissive" => Ok(NumericMode::Permissive),
            other => Err(Error::invalid("mode", format!("unknown numeric mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Neg,
    Sigmoid,
    Log,
    Exp,
    Sqrt,
    Abs,
    Square,
    Relu,
    /// `log(p / (1 - p))`
    LogOdds,
    /// `c * x`
    Scale(f64),
    /// `x + c`
    Offset(f64),
    /// `c - x`
    RSub(f64),
    Clamp { lo: f64, hi: f64 },
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Log => "log",
            UnaryOp::Exp => "exp",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Abs => "abs",
            UnaryOp::Square => "square",
            UnaryOp::Relu => "relu",
            UnaryOp::LogOdds => "log_odds",
            UnaryOp::Scale(_) => "scale",
            UnaryOp::Offset(_) => "offset",
            UnaryOp::RSub(_) => "rsub",
            UnaryOp::Clamp { .. } => "clamp",
        }
    }

    fn check_domain<T: Real>(self, x: T) -> Result<()> {
        let bad = match self {
            UnaryOp::Log => x <= T::zero(),
            UnaryOp::Sqrt => x < T::zero(),
            UnaryOp::LogOdds => x <= T::zero() || x >= T::one(),
            _ => false,
        };
        if bad {
            return Err(Error::Domain {
                op: self.name(),
                value: x.to_f64_lossy(),
            });
        }
        Ok(())
    }

    #[inline]
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Log => x.ln(),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Abs => x.abs(),
            UnaryOp::Square => x * x,
            UnaryOp::Relu => x.max(T::zero()),
            UnaryOp::LogOdds => (x / (T::one() - x)).ln(),
            UnaryOp::Scale(c) => real::<T>(c) * x,
            UnaryOp::Offset(c) => x + real(c),
            UnaryOp::RSub(c) => real::<T>(c) - x,
            UnaryOp::Clamp { lo, hi } => x.max(real(lo)).min(real(hi)),
        }
    }

    /// Local derivative given input `x` and output `y`.
    #[inline]
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            UnaryOp::Neg => -T::one(),
            UnaryOp::Sigmoid => y * (T::one() - y),
            UnaryOp::Log => T::one() / x,
            UnaryOp::Exp => y,
            UnaryOp::Sqrt => real::<T>(0.5) / y,
            UnaryOp::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            UnaryOp::Square => real::<T>(2.0) * x,
            UnaryOp::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryOp::LogOdds => T::one() / (x * (T::one() - x)),
            UnaryOp::Scale(c) => real(c),
            UnaryOp::Offset(_) => T::one(),
            UnaryOp::RSub(_) => -T::one(),
            UnaryOp::Clamp { lo, hi } => {
                if x >= real(lo) && x <= real(hi) {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Logistic sigmoid, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }

    /// Partial derivatives `(d/da, d/db)`.
    #[inline]
    fn partials<T: Real>(self, a: T, b: T) -> (T, T) {
        match self {
            BinaryOp::Add => (T::one(), T::one()),
            BinaryOp::Sub => (T::one(), -T::one()),
            BinaryOp::Mul => (b, a),
            BinaryOp::Div => (T::one() / b, -a / (b * b)),
        }
    }
}

/// Operation selector for [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Unary(UnaryOp),
    Binary(BinaryOp),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: (usize, usize),
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: (0, 0),
        }
    }
}

impl Conv2dOptions {
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: (kernel / 2, kernel / 2),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    Reduce {
        op: ReduceOp,
        input: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    ExpandLeading(Var, usize),
    Gather(Var, Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    AvgPool2(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Blend {
        base: Var,
        infill: Var,
        mask: Var,
    },
    TotalVariation(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    mode: NumericMode,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_mode(NumericMode::Strict)
    }

    pub fn with_mode(mode: NumericMode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> NumericMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, value: Tensor<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if self.mode == NumericMode::Strict && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (ElementwiseOp::Unary(u), None) => self.unary(u, a),
            (ElementwiseOp::Binary(k), Some(b)) => self.binary(k, a, b),
            (ElementwiseOp::Unary(_), Some(_)) => Err(Error::invalid("b", "unary operation takes one operand")),
            (ElementwiseOp::Binary(_), None) => Err(Error::invalid("b", "binary operation needs two operands")),
        }
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if self.mode == NumericMode::Strict {
            for &v in x.data() {
                op.check_domain(v)?;
            }
        }
        let y = x.map(|v| op.apply(v));
        self.push(Op::Unary(op, a), y, &[a], op.name())
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if x.shape() == y.shape() {
            x.zip_map(y, |p, q| op.apply(p, q))?
        } else if y.is_scalar_like() {
            let q = y.data()[0];
            x.map(|p| op.apply(p, q))
        } else if x.is_scalar_like() {
            let p = x.data()[0];
            y.map(|q| op.apply(p, q))
        } else {
            return Err(Error::ShapeMismatch {
                op: op.name(),
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        };
        self.push(Op::Binary(op, a, b), out, &[a, b], op.name())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn log_odds(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::LogOdds, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(c), a)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::Offset(c), a)
    }

    /// `c - a`
    pub fn rsub(&mut self, c: f64, a: Var) -> Result<Var> {
        self.unary(UnaryOp::RSub(c), a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnaryOp::Clamp { lo, hi }, a)
    }

    /// Sums or averages over `axes`; the reduced axes are removed from the shape.
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axes: &[usize]) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let shape = x.shape().to_vec();
        let mut reduced = vec![false; shape.len()];
        for &axis in axes {
            if axis >= shape.len() || reduced[axis] {
                return Err(Error::InvalidAxis {
                    axis,
                    rank: shape.len(),
                });
            }
            reduced[axis] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let mut out = vec![T::zero(); numel(&out_shape)];
        for (i, &v) in x.data().iter().enumerate() {
            out[reduced_index(i, &shape, &reduced)] += v;
        }
        if op == ReduceOp::Mean {
            let count: usize = shape.iter().zip(&reduced).filter(|(_, &r)| r).map(|(&d, _)| d).product();
            let inv = T::one() / real(count as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(
            Op::Reduce {
                op,
                input: a,
                axes: axes.to_vec(),
            },
            value,
            &[a],
            "reduce",
        )
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axes)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axes)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        self.push(Op::Reshape(a), value, &[a], "reshape")
    }

    /// Repeats `a` along a new leading axis of length `count`.
    pub fn expand_leading(&mut self, a: Var, count: usize) -> Result<Var> {
        if count == 0 {
            return Err(Error::invalid("count", "must be at least 1"));
        }
        let x = &self.nodes[a.0].value;
        let mut shape = vec![count];
        shape.extend_from_slice(x.shape());
        let mut data = Vec::with_capacity(x.len() * count);
        for _ in 0..count {
            data.extend_from_slice(x.data());
        }
        let value = Tensor::new(shape, data)?;
        self.push(Op::ExpandLeading(a, count), value, &[a], "expand_leading")
    }

    /// Picks `a[i, indices[i]]` from a `[n, c]` matrix.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let (n, c) = matrix_dims(x.shape(), "gather")?;
        if indices.len() != n {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: x.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= c) {
            return Err(Error::invalid("indices", format!("column {bad} out of range for {c} columns")));
        }
        let data = indices.iter().enumerate().map(|(i, &j)| x.data()[i * c + j]).collect();
        let value = Tensor::new(vec![n], data)?;
        self.push(Op::Gather(a, indices.to_vec()), value, &[a], "gather")
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let cols = *x.shape().last().ok_or_else(|| Error::invalid("a", "softmax of a scalar"))?;
        let value = Tensor::new(x.shape().to_vec(), kernels::softmax_rows(cols, x.data()))?;
        self.push(Op::Softmax(a), value, &[a], "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let cols = *x.shape().last().ok_or_else(|| Error::invalid("a", "log_softmax of a scalar"))?;
        let value = Tensor::new(x.shape().to_vec(), kernels::log_softmax_rows(cols, x.data()))?;
        self.push(Op::LogSoftmax(a), value, &[a], "log_softmax")
    }

    /// Cross-correlation of `input` (`[C,H,W]` or `[N,C,H,W]`) with `kernel`
    /// (`[O,C,KH,KW]`), plus an optional per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, opts: Conv2dOptions) -> Result<Var> {
        let x = self.shape(input).to_vec();
        let k = self.shape(kernel).to_vec();
        let (batch, c, h, w) = match x.as_slice() {
            &[c, h, w] => (1, c, h, w),
            &[n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::InvalidShape {
                    shape: x,
                    reason: "conv2d input must be [C,H,W] or [N,C,H,W]".into(),
                })
            }
        };
        let &[o, kc, kh, kw] = k.as_slice() else {
            return Err(Error::InvalidShape {
                shape: k,
                reason: "conv2d kernel must be [O,C,KH,KW]".into(),
            });
        };
        if kc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x,
                rhs: k,
            });
        }
        if opts.stride == 0 || h + 2 * opts.padding.0 < kh || w + 2 * opts.padding.1 < kw {
            return Err(Error::invalid("kernel", format!("{kh}x{kw} kernel does not fit {h}x{w} input with {opts:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![o],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeometry {
            batch,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride: opts.stride,
            pad_h: opts.padding.0,
            pad_w: opts.padding.1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out_shape = if x.len() == 3 {
            vec![o, geom.out_h(), geom.out_w()]
        } else {
            vec![batch, o, geom.out_h(), geom.out_w()]
        };
        let value = Tensor::new(out_shape, out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            value,
            &inputs,
            "conv2d",
        )
    }

    /// 2x2 average pooling over the last two axes.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let (planes, h, w) = plane_dims(x.shape(), "avg_pool2")?;
        if h < 2 || w < 2 {
            return Err(Error::invalid("a", "avg_pool2 needs at least 2x2 planes"));
        }
        let mut shape = x.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = h / 2;
        shape[r - 1] = w / 2;
        let value = Tensor::new(shape, kernels::avg_pool2_forward(planes, h, w, x.data()))?;
        self.push(Op::AvgPool2(a), value, &[a], "avg_pool2")
    }

    /// `input [N,D] · weight[O,D]^T + bias[O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d) = matrix_dims(self.shape(input), "linear")?;
        let (o, wd) = matrix_dims(self.shape(weight), "linear")?;
        if wd != d || self.shape(bias) != [o] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.shape(input).to_vec(),
                rhs: self.shape(weight).to_vec(),
            });
        }
        let out = kernels::linear_forward(
            n,
            d,
            o,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![n, o], out)?;
        self.push(Op::Linear { input, weight, bias }, value, &[input, weight, bias], "linear")
    }

    /// `(1 - z) ⊙ x + z ⊙ x̂` for image `x`, infill `x̂` (`[C,H,W]`) and mask
    /// batch `z` (`[B,H,W]`); the mask is shared across channels. Output is `[B,C,H,W]`.
    pub fn blend(&mut self, base: Var, infill: Var, mask: Var) -> Result<Var> {
        let xs = self.shape(base).to_vec();
        let zs = self.shape(mask).to_vec();
        if xs.len() != 3 || self.shape(infill) != xs.as_slice() || zs.len() != 3 || zs[1..] != xs[1..] {
            return Err(Error::ShapeMismatch {
                op: "blend",
                lhs: xs,
                rhs: zs,
            });
        }
        let (b, c, plane) = (zs[0], xs[0], xs[1] * xs[2]);
        let (x, xh, z) = (self.value(base).data(), self.value(infill).data(), self.value(mask).data());
        let mut out = Vec::with_capacity(b * c * plane);
        for row in 0..b {
            let zr = &z[row * plane..][..plane];
            for ch in 0..c {
                let xr = &x[ch * plane..][..plane];
                let hr = &xh[ch * plane..][..plane];
                out.extend(zr.iter().zip(xr.iter().zip(hr)).map(|(&m, (&p, &q))| (T::one() - m) * p + m * q));
            }
        }
        let value = Tensor::new(vec![b, c, xs[1], xs[2]], out)?;
        self.push(Op::Blend { base, infill, mask }, value, &[base, infill, mask], "blend")
    }

    /// Squared-difference total variation of each trailing `(H, W)` plane.
    pub fn total_variation(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let (planes, h, w) = plane_dims(x.shape(), "total_variation")?;
        let shape = x.shape()[..x.rank() - 2].to_vec();
        let value = Tensor::new(shape, kernels::total_variation_forward(planes, h, w, x.data()))?;
        self.push(Op::TotalVariation(a), value, &[a], "total_variation")
    }

    /// Gradients of a scalar output with respect to every variable that requires them.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::NonScalarOutput {
                shape: out.shape().to_vec(),
            });
        }
        self.backward_with_seed(output, Tensor::full(out.shape(), T::one()))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`) backwards.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                lhs: self.shape(output).to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        let mut visited = Vec::new();
        if self.nodes[output.0].requires_grad {
            adj[output.0] = Some(seed);
        }
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            visited.push(Var(i));
            self.propagate(node, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        visited.reverse();
        Ok(Gradients { adj, visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::Unary(op, a) => {
                let x = self.value(a);
                let data = x
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * op.derivative(xi, yi))
                    .collect();
                accumulate(adj, a, Tensor::new(x.shape().to_vec(), data)?);
            }
            &Op::Binary(op, a, b) => {
                let (x, y) = (self.value(a), self.value(b));
                let n = node.value.len();
                let xv = |i: usize| if x.len() == n { x.data()[i] } else { x.data()[0] };
                let yv = |i: usize| if y.len() == n { y.data()[i] } else { y.data()[0] };
                let mut ga = vec![T::zero(); x.len()];
                let mut gb = vec![T::zero(); y.len()];
                for (i, &gi) in g.data().iter().enumerate() {
                    let (da, db) = op.partials(xv(i), yv(i));
                    ga[if x.len() == n { i } else { 0 }] += gi * da;
                    gb[if y.len() == n { i } else { 0 }] += gi * db;
                }
                if self.wants(a) {
                    accumulate(adj, a, Tensor::new(x.shape().to_vec(), ga)?);
                }
                if self.wants(b) {
                    accumulate(adj, b, Tensor::new(y.shape().to_vec(), gb)?);
                }
            }
            Op::Reduce { op, input, axes } => {
                let x = self.value(*input);
                let shape = x.shape();
                let mut reduced = vec![false; shape.len()];
                axes.iter().for_each(|&a| reduced[a] = true);
                let scale = match op {
                    ReduceOp::Sum => T::one(),
                    ReduceOp::Mean => {
                        let count: usize = shape.iter().zip(&reduced).filter(|(_, &r)| r).map(|(&d, _)| d).product();
                        T::one() / real(count as f64)
                    }
                };
                let data = (0..x.len()).map(|i| g.data()[reduced_index(i, shape, &reduced)] * scale).collect();
                accumulate(adj, *input, Tensor::new(shape.to_vec(), data)?);
            }
            &Op::Reshape(a) => {
                accumulate(adj, a, g.clone().reshape(self.shape(a))?);
            }
            &Op::ExpandLeading(a, count) => {
                let inner = self.value(a).len();
                let mut data = vec![T::zero(); inner];
                for k in 0..count {
                    for (d, &s) in data.iter_mut().zip(&g.data()[k * inner..(k + 1) * inner]) {
                        *d += s;
                    }
                }
                accumulate(adj, a, Tensor::new(self.shape(a).to_vec(), data)?);
            }
            Op::Gather(a, indices) => {
                let (_, c) = matrix_dims(self.shape(*a), "gather")?;
                let mut data = vec![T::zero(); self.value(*a).len()];
                for (i, &j) in indices.iter().enumerate() {
                    data[i * c + j] += g.data()[i];
                }
                accumulate(adj, *a, Tensor::new(self.shape(*a).to_vec(), data)?);
            }
            &Op::Softmax(a) => {
                let cols = *self.shape(a).last().expect("rank checked");
                let mut data = Vec::with_capacity(g.len());
                for (y, gr) in node.value.data().chunks_exact(cols).zip(g.data().chunks_exact(cols)) {
                    let dotp: T = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    data.extend(y.iter().zip(gr).map(|(&p, &q)| p * (q - dotp)));
                }
                accumulate(adj, a, Tensor::new(self.shape(a).to_vec(), data)?);
            }
            &Op::LogSoftmax(a) => {
                let cols = *self.shape(a).last().expect("rank checked");
                let mut data = Vec::with_capacity(g.len());
                for (y, gr) in node.value.data().chunks_exact(cols).zip(g.data().chunks_exact(cols)) {
                    let total: T = gr.iter().copied().sum();
                    data.extend(y.iter().zip(gr).map(|(&ly, &q)| q - ly.exp() * total));
                }
                accumulate(adj, a, Tensor::new(self.shape(a).to_vec(), data)?);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                if self.wants(*input) {
                    let gi = kernels::conv2d_backward_input(geom, g.data(), self.value(*kernel).data());
                    accumulate(adj, *input, Tensor::new(self.shape(*input).to_vec(), gi)?);
                }
                let bias_wants = bias.is_some_and(|b| self.wants(b));
                if self.wants(*kernel) || bias_wants {
                    let (gk, gb) = kernels::conv2d_backward_params(geom, g.data(), self.value(*input).data());
                    if self.wants(*kernel) {
                        accumulate(adj, *kernel, Tensor::new(self.shape(*kernel).to_vec(), gk)?);
                    }
                    if let (Some(b), true) = (bias, bias_wants) {
                        accumulate(adj, *b, Tensor::new(vec![gb.len()], gb)?);
                    }
                }
            }
            &Op::AvgPool2(a) => {
                let (planes, h, w) = plane_dims(self.shape(a), "avg_pool2")?;
                let data = kernels::avg_pool2_backward(planes, h, w, g.data());
                accumulate(adj, a, Tensor::new(self.shape(a).to_vec(), data)?);
            }
            &Op::Linear { input, weight, bias } => {
                let (n, d) = matrix_dims(self.shape(input), "linear")?;
                let o = self.shape(bias)[0];
                let (gx, gw, gb) =
                    kernels::linear_backward(n, d, o, self.value(input).data(), self.value(weight).data(), g.data());
                if self.wants(input) {
                    accumulate(adj, input, Tensor::new(vec![n, d], gx)?);
                }
                if self.wants(weight) {
                    accumulate(adj, weight, Tensor::new(vec![o, d], gw)?);
                }
                if self.wants(bias) {
                    accumulate(adj, bias, Tensor::new(vec![o], gb)?);
                }
            }
            &Op::Blend { base, infill, mask } => {
                let zs = self.shape(mask);
                let (b, plane) = (zs[0], zs[1] * zs[2]);
                let c = self.shape(base)[0];
                let (x, xh, z) = (self.value(base).data(), self.value(infill).data(), self.value(mask).data());
                if self.wants(mask) {
                    let mut gz = vec![T::zero(); b * plane];
                    for row in 0..b {
                        for ch in 0..c {
                            let gr = &g.data()[(row * c + ch) * plane..][..plane];
                            let dst = &mut gz[row * plane..][..plane];
                            for p in 0..plane {
                                dst[p] += gr[p] * (xh[ch * plane + p] - x[ch * plane + p]);
                            }
                        }
                    }
                    accumulate(adj, mask, Tensor::new(zs.to_vec(), gz)?);
                }
                let wants_base = self.wants(base);
                let wants_infill = self.wants(infill);
                if wants_base || wants_infill {
                    let mut gx = vec![T::zero(); c * plane];
                    let mut gh = vec![T::zero(); c * plane];
                    for row in 0..b {
                        for ch in 0..c {
                            let gr = &g.data()[(row * c + ch) * plane..][..plane];
                            let zr = &z[row * plane..][..plane];
                            for p in 0..plane {
                                gx[ch * plane + p] += gr[p] * (T::one() - zr[p]);
                                gh[ch * plane + p] += gr[p] * zr[p];
                            }
                        }
                    }
                    if wants_base {
                        accumulate(adj, base, Tensor::new(self.shape(base).to_vec(), gx)?);
                    }
                    if wants_infill {
                        accumulate(adj, infill, Tensor::new(self.shape(infill).to_vec(), gh)?);
                    }
                }
            }
            &Op::TotalVariation(a) => {
                let (planes, h, w) = plane_dims(self.shape(a), "total_variation")?;
                let data = kernels::total_variation_backward(planes, h, w, self.value(a).data(), g.data());
                accumulate(adj, a, Tensor::new(self.shape(a).to_vec(), data)?);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(adj: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut adj[v.0] {
        Some(existing) => existing.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn reduced_index(flat: usize, shape: &[usize], reduced: &[bool]) -> usize {
    let mut rem = flat;
    let mut out = 0;
    let mut out_stride = 1;
    for axis in (0..shape.len()).rev() {
        let coord = rem % shape[axis];
        rem /= shape[axis];
        if !reduced[axis] {
            out += coord * out_stride;
            out_stride *= shape[axis];
        }
    }
    out
}

fn matrix_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        &[n, c] => Ok((n, c)),
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op} expects a rank-2 tensor"),
        }),
    }
}

fn plane_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op} expects at least two axes"),
        });
    }
    let r = shape.len();
    Ok((numel(&shape[..r - 2]), shape[r - 2], shape[r - 1]))
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    adj: Vec<Option<Tensor<T>>>,
    visited: Vec<Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the output with respect to `v`, if `v` requires gradients
    /// and influences the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros shaped like `v` when the
    /// output does not depend on it.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    /// Records processed by the backward pass, in forward order.
    pub fn visited(&self) -> &[Var] {
        &self.visited
    }
}

/// Central-difference approximation of `∂f/∂x`.
pub fn finite_difference_gradient<T, F>(mut f: F, x: &Tensor<T>, step: f64) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    let h = real::<T>(step);
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (h + h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

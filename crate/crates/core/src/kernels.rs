//! Raw forward/backward loops for the structured tape primitives.
//!
//! Everything here works on plain slices in row-major order; shape checking
//! happens in the tape before these are called.

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad_h - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad_w - self.kernel_w) / self.stride + 1
    }

    /// Calls `f(out_offset, in_offset, len)` for every contiguous run of
    /// output positions that read input through kernel tap `(ky, kx)`.
    /// Offsets are relative to a single `(H, W)` / `(OH, OW)` plane.
    fn for_each_span(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for oy in 0..oh {
            let iy = (oy * self.stride + ky) as isize - self.pad_h as isize;
            if iy < 0 || iy >= self.height as isize {
                continue;
            }
            let iy = iy as usize;
            if self.stride == 1 {
                let lo = self.pad_w.saturating_sub(kx);
                let hi = (self.width + self.pad_w).saturating_sub(kx).min(ow);
                if lo < hi {
                    f(oy * ow + lo, iy * self.width + lo + kx - self.pad_w, hi - lo);
                }
            } else {
                for ox in 0..ow {
                    let ix = (ox * self.stride + kx) as isize - self.pad_w as isize;
                    if ix >= 0 && ix < self.width as isize {
                        f(oy * ow + ox, iy * self.width + ix as usize, 1);
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

pub fn conv2d_forward<T: Real>(g: &ConvGeometry, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_plane = g.height * g.width;
    let out_plane = oh * ow;
    let taps = g.kernel_h * g.kernel_w;
    let mut out = vec![T::zero(); g.batch * g.out_channels * out_plane];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let dst = &mut out[(n * g.out_channels + o) * out_plane..][..out_plane];
            if let Some(b) = bias {
                dst.iter_mut().for_each(|v| *v = b[o]);
            }
            for c in 0..g.in_channels {
                let src = &input[(n * g.in_channels + c) * in_plane..][..in_plane];
                let k = &kernel[(o * g.in_channels + c) * taps..][..taps];
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let w = k[ky * g.kernel_w + kx];
                        if w == T::zero() {
                            continue;
                        }
                        g.for_each_span(ky, kx, |oo, io, len| {
                            axpy(w, &src[io..io + len], &mut dst[oo..oo + len]);
                        });
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_backward_input<T: Real>(g: &ConvGeometry, grad_out: &[T], kernel: &[T]) -> Vec<T> {
    let in_plane = g.height * g.width;
    let out_plane = g.out_h() * g.out_w();
    let taps = g.kernel_h * g.kernel_w;
    let mut grad_in = vec![T::zero(); g.batch * g.in_channels * in_plane];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let go = &grad_out[(n * g.out_channels + o) * out_plane..][..out_plane];
            for c in 0..g.in_channels {
                let gi = &mut grad_in[(n * g.in_channels + c) * in_plane..][..in_plane];
                let k = &kernel[(o * g.in_channels + c) * taps..][..taps];
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let w = k[ky * g.kernel_w + kx];
                        if w == T::zero() {
                            continue;
                        }
                        if g.stride == 1 {
                            g.for_each_span(ky, kx, |oo, io, len| {
                                axpy(w, &go[oo..oo + len], &mut gi[io..io + len]);
                            });
                        } else {
                            g.for_each_span(ky, kx, |oo, io, _| gi[io] += w * go[oo]);
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Returns `(grad_kernel, grad_bias)`.
pub fn conv2d_backward_params<T: Real>(g: &ConvGeometry, grad_out: &[T], input: &[T]) -> (Vec<T>, Vec<T>) {
    let in_plane = g.height * g.width;
    let out_plane = g.out_h() * g.out_w();
    let taps = g.kernel_h * g.kernel_w;
    let mut grad_k = vec![T::zero(); g.out_channels * g.in_channels * taps];
    let mut grad_b = vec![T::zero(); g.out_channels];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let go = &grad_out[(n * g.out_channels + o) * out_plane..][..out_plane];
            grad_b[o] += go.iter().copied().sum::<T>();
            for c in 0..g.in_channels {
                let src = &input[(n * g.in_channels + c) * in_plane..][..in_plane];
                let gk = &mut grad_k[(o * g.in_channels + c) * taps..][..taps];
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let mut acc = T::zero();
                        g.for_each_span(ky, kx, |oo, io, len| {
                            acc += dot(&go[oo..oo + len], &src[io..io + len]);
                        });
                        gk[ky * g.kernel_w + kx] += acc;
                    }
                }
            }
        }
    }
    (grad_k, grad_b)
}

/// 2x2 average pooling over the trailing two axes; odd trailing rows/columns are dropped.
pub fn avg_pool2_forward<T: Real>(planes: usize, h: usize, w: usize, input: &[T]) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                dst[y * ow + x] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(planes: usize, h: usize, w: usize, grad_out: &[T]) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut grad = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let go = &grad_out[p * oh * ow..][..oh * ow];
        let gi = &mut grad[p * h * w..][..h * w];
        for y in 0..oh {
            for x in 0..ow {
                let v = go[y * ow + x] * quarter;
                let i = 2 * y * w + 2 * x;
                gi[i] += v;
                gi[i + 1] += v;
                gi[i + w] += v;
                gi[i + w + 1] += v;
            }
        }
    }
    grad
}

/// `y = x W^T + b` for `x: [n, d]`, `W: [o, d]`.
pub fn linear_forward<T: Real>(n: usize, d: usize, o: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); n * o];
    for i in 0..n {
        let row = &x[i * d..][..d];
        for j in 0..o {
            out[i * o + j] = dot(row, &w[j * d..][..d]) + b[j];
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn linear_backward<T: Real>(
    n: usize,
    d: usize,
    o: usize,
    x: &[T],
    w: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); n * d];
    let mut gw = vec![T::zero(); o * d];
    let mut gb = vec![T::zero(); o];
    for i in 0..n {
        let row = &x[i * d..][..d];
        for j in 0..o {
            let g = grad_out[i * o + j];
            gb[j] += g;
            axpy(g, &w[j * d..][..d], &mut gx[i * d..][..d]);
            axpy(g, row, &mut gw[j * d..][..d]);
        }
    }
    (gx, gw, gb)
}

pub fn softmax_rows<T: Real>(cols: usize, input: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(input.len());
    for row in input.chunks_exact(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    out
}

pub fn log_softmax_rows<T: Real>(cols: usize, input: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(input.len());
    for row in input.chunks_exact(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

/// Squared-difference total variation of each `(h, w)` plane.
pub fn total_variation_forward<T: Real>(planes: usize, h: usize, w: usize, input: &[T]) -> Vec<T> {
    (0..planes)
        .map(|p| {
            let m = &input[p * h * w..][..h * w];
            let mut acc = T::zero();
            for y in 0..h {
                for x in 0..w {
                    let v = m[y * w + x];
                    if x + 1 < w {
                        let d = v - m[y * w + x + 1];
                        acc += d * d;
                    }
                    if y + 1 < h {
                        let d = v - m[(y + 1) * w + x];
                        acc += d * d;
                    }
                }
            }
            acc
        })
        .collect()
}

pub fn total_variation_backward<T: Real>(planes: usize, h: usize, w: usize, input: &[T], grad_out: &[T]) -> Vec<T> {
    let two = T::from_f64_lossy(2.0);
    let mut grad = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let m = &input[p * h * w..][..h * w];
        let gi = &mut grad[p * h * w..][..h * w];
        let g = grad_out[p];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let d = two * g * (m[i] - m[i + 1]);
                    gi[i] += d;
                    gi[i + 1] -= d;
                }
                if y + 1 < h {
                    let d = two * g * (m[i] - m[i + w]);
                    gi[i] += d;
                    gi[i + w] -= d;
                }
            }
        }
    }
    grad
}

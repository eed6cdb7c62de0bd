//! Mask fusion, thresholding, boxes, IoU, coherency and single-crop
//! test-time augmentation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::dropout::seeded_rng;
use crate::error::{Error, Result};
use crate::objectives;
use crate::tensor::{real, Real, Tensor};

/// Side fraction kept by the random and center crop baselines.
pub const CROP_FRACTION: f64 = 0.75;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_map<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[h, w] if h > 0 && w > 0 => Ok((h, w)),
        other => Err(Error::InvalidShape {
            shape: other.to_vec(),
            reason: format!("{what} must be a non-empty [H, W] map"),
        }),
    }
}

/// `sqrt(θ_SSR ⊙ (1 − θ_SDR))`.
pub fn joint_mask<T: Real>(theta_ssr: &Tensor<T>, theta_sdr: &Tensor<T>) -> Result<Tensor<T>> {
    check_map(theta_ssr, "theta_ssr")?;
    if theta_ssr.shape() != theta_sdr.shape() {
        return Err(Error::ShapeMismatch {
            op: "joint_mask",
            lhs: theta_ssr.shape().to_vec(),
            rhs: theta_sdr.shape().to_vec(),
        });
    }
    theta_ssr.zip_map(theta_sdr, |a, b| (a * (T::one() - b)).max(T::zero()).sqrt())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid("mask", format!("{} values for a {height}x{width} mask", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Positive where `m > 0.5`, for 0/1 ground-truth maps.
    pub fn from_indicator<T: Real>(m: &Tensor<T>) -> Result<Self> {
        threshold_mask(m, 0.5)
    }

    pub fn from_bbox(height: usize, width: usize, b: &BBox) -> Self {
        let mut m = Self::empty(height, width);
        for y in b.y0..b.y1.min(height) {
            for x in b.x0..b.x1.min(width) {
                m.data[y * width + x] = true;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(
            vec![self.height, self.width],
            self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        )
        .expect("shape matches data")
    }
}

/// Positive iff `theta > tau` (ties are negative).
pub fn threshold_mask<T: Real>(theta: &Tensor<T>, tau: f64) -> Result<BinaryMask> {
    let (h, w) = check_map(theta, "theta")?;
    let tau = real::<T>(tau);
    BinaryMask::new(h, w, theta.data().iter().map(|&v| v > tau).collect())
}

/// Half-open pixel box: columns `x0..x1`, rows `y0..y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::invalid("bbox", format!("degenerate box ({x0}, {y0}, {x1}, {y1})")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    /// Expands the shorter side to match the longer one, centred on the box
    /// and shifted or clipped to stay inside a `height × width` image.
    pub fn squared(&self, height: usize, width: usize) -> BBox {
        fn grow(lo: usize, hi: usize, target: usize, limit: usize) -> (usize, usize) {
            let target = target.min(limit);
            let extra = target.saturating_sub(hi - lo);
            let mut lo = lo.saturating_sub(extra / 2);
            let mut hi = lo + target;
            if hi > limit {
                lo -= hi - limit;
                hi = limit;
            }
            (lo, hi)
        }
        let side = self.width().max(self.height());
        let (x0, x1) = grow(self.x0, self.x1, side, width);
        let (y0, y1) = grow(self.y0, self.y1, side, height);
        BBox { x0, y0, x1, y1 }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x0, self.y0, self.x1, self.y1)
    }
}

/// Tight box around the positive pixels; an empty mask yields the whole image.
pub fn bbox_from_mask(mask: &BinaryMask) -> BBox {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x1 == 0 {
        return BBox::full(mask.height, mask.width);
    }
    BBox { x0, y0, x1, y1 }
}

pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::ShapeMismatch {
            op: "iou",
            lhs: vec![a.height, a.width],
            rhs: vec![b.height, b.width],
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.data.iter().zip(&b.data) {
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Total variation of an attribution map (lower is more coherent).
pub fn coherency_tv<T: Real>(theta: &Tensor<T>) -> Result<f64> {
    Ok(objectives::total_variation(theta)?.to_f64_lossy())
}

/// Bilinear resize of the `bbox` region of a `[C, H, W]` image to
/// `out_h × out_w`, sampling at pixel centres with edge clamping.
pub fn crop_resize<T: Real>(x: &Tensor<T>, bbox: &BBox, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = match x.shape() {
        &[c, h, w] => (c, h, w),
        other => {
            return Err(Error::InvalidShape {
                shape: other.to_vec(),
                reason: "crop_resize expects a [C, H, W] image".into(),
            })
        }
    };
    if !bbox.fits(h, w) {
        return Err(Error::invalid("bbox", format!("{bbox} is empty or outside a {h}x{w} image")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("output size", "must be positive"));
    }
    let axis = |lo: usize, len: usize, out: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (lo + i0, lo + i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(bbox.y0, bbox.height(), out_h);
    let xs = axis(bbox.x0, bbox.width(), out_w);
    let d = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, ty) in &ys {
            let ty = real::<T>(ty);
            for &(x0, x1, tx) in &xs {
                let tx = real::<T>(tx);
                let top = plane[y0 * w + x0] * (T::one() - tx) + plane[y0 * w + x1] * tx;
                let bottom = plane[y1 * w + x0] * (T::one() - tx) + plane[y1 * w + x1] * tx;
                out.push(top * (T::one() - ty) + bottom * ty);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaMethod {
    None,
    GtBbox,
    GtBboxOnly,
    RandomCrop,
    CenterCrop,
    FidoJoint,
}

impl TtaMethod {
    pub const ALL: [TtaMethod; 6] = [
        TtaMethod::None,
        TtaMethod::GtBbox,
        TtaMethod::GtBboxOnly,
        TtaMethod::RandomCrop,
        TtaMethod::CenterCrop,
        TtaMethod::FidoJoint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TtaMethod::None => "none",
            TtaMethod::GtBbox => "gt_bbox",
            TtaMethod::GtBboxOnly => "gt_bbox_only",
            TtaMethod::RandomCrop => "random_crop",
            TtaMethod::CenterCrop => "center_crop",
            TtaMethod::FidoJoint => "fido_joint",
        }
    }
}

impl fmt::Display for TtaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TtaMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TtaMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid("method", format!("unknown TTA method `{s}`")))
    }
}

/// Side inputs some TTA methods need.
#[derive(Debug, Clone, Copy, Default)]
pub struct TtaInputs<'a, T> {
    pub gt_bbox: Option<BBox>,
    /// Joint attribution map used by [`TtaMethod::FidoJoint`].
    pub attribution: Option<&'a Tensor<T>>,
    /// Seed of the random crop position.
    pub crop_seed: u64,
}

fn fraction_box(h: usize, w: usize) -> (usize, usize) {
    let ch = ((h as f64 * CROP_FRACTION).round() as usize).clamp(1, h);
    let cw = ((w as f64 * CROP_FRACTION).round() as usize).clamp(1, w);
    (ch, cw)
}

/// The crop box a method would use, before squaring; `None` for
/// [`TtaMethod::None`].
pub fn tta_bbox<T: Real>(method: TtaMethod, h: usize, w: usize, inputs: &TtaInputs<'_, T>) -> Result<Option<BBox>> {
    let missing_gt = || Error::invalid("gt_bbox", format!("method {method} needs a ground-truth box"));
    let b = match method {
        TtaMethod::None => return Ok(None),
        TtaMethod::GtBbox | TtaMethod::GtBboxOnly => inputs.gt_bbox.ok_or_else(missing_gt)?,
        TtaMethod::CenterCrop => {
            let (ch, cw) = fraction_box(h, w);
            let (y0, x0) = ((h - ch) / 2, (w - cw) / 2);
            BBox::new(x0, y0, x0 + cw, y0 + ch)?
        }
        TtaMethod::RandomCrop => {
            let (ch, cw) = fraction_box(h, w);
            let mut rng = seeded_rng(inputs.crop_seed, 3);
            let y0 = rng.gen_range(0..=h - ch);
            let x0 = rng.gen_range(0..=w - cw);
            BBox::new(x0, y0, x0 + cw, y0 + ch)?
        }
        TtaMethod::FidoJoint => {
            let joint = inputs
                .attribution
                .ok_or_else(|| Error::invalid("attribution", "method fido_joint needs a joint attribution map"))?;
            if joint.shape() != [h, w] {
                return Err(Error::ShapeMismatch {
                    op: "tta attribution",
                    lhs: vec![h, w],
                    rhs: joint.shape().to_vec(),
                });
            }
            bbox_from_mask(&threshold_mask(joint, DEFAULT_THRESHOLD)?)
        }
    };
    if !b.fits(h, w) {
        return Err(Error::invalid("bbox", format!("{b} is outside a {h}x{w} image")));
    }
    Ok(Some(b))
}

/// Class probabilities under a TTA method: the plain prediction for `none`,
/// the crop prediction for `gt_bbox_only`, otherwise the mean of the full
/// image and crop predictions.
pub fn tta_predict<T: Real>(
    model: &ClassifierModel,
    x: &Tensor<T>,
    method: TtaMethod,
    inputs: &TtaInputs<'_, T>,
) -> Result<Vec<T>> {
    let spec = model.input_spec();
    if x.shape() != spec.shape() {
        return Err(Error::ShapeMismatch {
            op: "tta_predict",
            lhs: spec.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let Some(b) = tta_bbox(method, spec.height, spec.width, inputs)? else {
        return model.predict_proba(x);
    };
    let crop = crop_resize(x, &b.squared(spec.height, spec.width), spec.height, spec.width)?;
    if method == TtaMethod::GtBboxOnly {
        return model.predict_proba(&crop);
    }
    let batch = Tensor::stack(&[x.clone(), crop])?;
    let probs = model.predict_batch(&batch)?;
    let k = model.classes();
    let half = real::<T>(0.5);
    Ok((0..k).map(|i| (probs.data()[i] + probs.data()[k + i]) * half).collect())
}

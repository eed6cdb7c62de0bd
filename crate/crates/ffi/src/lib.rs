//! C ABI over `fido_masks`.
//!
//! Every function returns an [`FmStatus`]. On failure the message is kept in
//! a thread-local slot readable with [`fm_last_error_message`]. Models are
//! opaque [`FmModel`] handles that must be released with [`fm_model_free`].
//! Images are `C x H x W` row-major `double` buffers in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fido_masks::autodiff::NumericMode;
use fido_masks::classifier::ClassifierModel;
use fido_masks::dropout::Formulation;
use fido_masks::fido::{estimate_pair, FidoConfig, MapKind};
use fido_masks::objectives::LossConfig;
use fido_masks::tensor::{Precision, Tensor};
use fido_masks::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    NonFinite = 5,
    BufferSize = 6,
    Panic = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmFormulation {
    Original = 0,
    Simplified = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmPrecision {
    Single = 0,
    Double = 1,
}

/// Mask optimization settings. Start from [`fm_explain_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FmExplainOptions {
    /// An [`FmFormulation`] value.
    pub formulation: u32,
    /// An [`FmPrecision`] value.
    pub precision: u32,
    pub batch_size: usize,
    pub steps: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub tv_weight: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Non-zero aborts on the first non-finite value instead of recording it.
    pub strict: u8,
}

/// Opaque classifier handle.
pub struct FmModel {
    inner: ClassifierModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FmStatus {
    match e {
        Error::Io(_) => FmStatus::Io,
        Error::Format(_) | Error::Image(_) | Error::Json(_) | Error::Csv(_) => FmStatus::Format,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::Domain { .. } => FmStatus::NonFinite,
        Error::ShapeMismatch { .. }
        | Error::InvalidShape { .. }
        | Error::InvalidAxis { .. }
        | Error::InvalidArgument { .. }
        | Error::Config(_) => FmStatus::InvalidArgument,
        _ => FmStatus::Internal,
    }
}

struct Failure(FmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FmStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(model: *const FmModel) -> Result<&'a ClassifierModel, Failure> {
    model.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn image_tensor(model: &ClassifierModel, image: *const f64, len: usize) -> Result<Tensor<f64>, Failure> {
    if image.is_null() {
        return Err(null("image"));
    }
    let shape = model.input_spec().shape();
    let want: usize = shape.iter().product();
    if len != want {
        return Err(Failure(
            FmStatus::BufferSize,
            format!("image buffer holds {len} values, the model expects {want}"),
        ));
    }
    let data = std::slice::from_raw_parts(image, len).to_vec();
    Ok(Tensor::new(shape.to_vec(), data)?)
}

unsafe fn copy_out(dst: *mut f64, dst_len: usize, src: &[f64], what: &str) -> Result<(), Failure> {
    if dst.is_null() {
        return Err(null(what));
    }
    if dst_len < src.len() {
        return Err(Failure(
            FmStatus::BufferSize,
            format!("{what} holds {dst_len} values, need {}", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads weights written by `fido-masks train`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fm_model_load(path: *const c_char, out: *mut *mut FmModel) -> FmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(FmStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
        let inner = ClassifierModel::load(path)?;
        *out = Box::into_raw(Box::new(FmModel { inner }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`fm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fm_model_free(model: *mut FmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input shape and class count of a model. Any output pointer may be NULL.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn fm_model_shape(
    model: *const FmModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    classes: *mut usize,
) -> FmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let spec = m.input_spec();
        for (p, v) in [
            (channels, spec.channels),
            (height, spec.height),
            (width, spec.width),
            (classes, m.classes()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Softmax class probabilities for one image.
///
/// # Safety
/// `image` must hold `image_len` doubles and `probs` `probs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fm_model_predict_proba(
    model: *const FmModel,
    image: *const f64,
    image_len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> FmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = image_tensor(m, image, image_len)?;
        let p = m.predict_proba::<f64>(&x)?;
        copy_out(probs, probs_len, &p, "probs")
    })
}

#[no_mangle]
pub extern "C" fn fm_explain_options_default() -> FmExplainOptions {
    let d = FidoConfig::default();
    FmExplainOptions {
        formulation: FmFormulation::Simplified as u32,
        precision: FmPrecision::Single as u32,
        batch_size: d.batch_size,
        steps: d.steps,
        temperature: d.temperature,
        lambda: d.loss.lambda_l1,
        tv_weight: d.loss.tv_weight,
        learning_rate: d.learning_rate,
        seed: d.seed,
        strict: 1,
    }
}

fn fido_config(o: &FmExplainOptions) -> Result<FidoConfig, Failure> {
    let bad = |what: &str, v: u32| Failure(FmStatus::InvalidArgument, format!("unknown {what} {v}"));
    let formulation = match o.formulation {
        x if x == FmFormulation::Original as u32 => Formulation::Original,
        x if x == FmFormulation::Simplified as u32 => Formulation::Simplified,
        x => return Err(bad("formulation", x)),
    };
    let precision = match o.precision {
        x if x == FmPrecision::Single as u32 => Precision::Single,
        x if x == FmPrecision::Double as u32 => Precision::Double,
        x => return Err(bad("precision", x)),
    };
    Ok(FidoConfig {
        formulation,
        precision,
        batch_size: o.batch_size,
        steps: o.steps,
        temperature: o.temperature,
        loss: LossConfig {
            lambda_l1: o.lambda,
            tv_weight: o.tv_weight,
            ..LossConfig::default()
        },
        learning_rate: o.learning_rate,
        seed: o.seed,
        mode: if o.strict != 0 { NumericMode::Strict } else { NumericMode::Permissive },
        infill: None,
    })
}

/// Runs both objectives for `class_index` and writes the `H x W` retain maps
/// (SSR, SDR) and the joint map. Output pointers may be NULL to skip a map;
/// each non-null one must hold `map_len >= H * W` doubles. `options` may be
/// NULL for the defaults.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn fm_explain(
    model: *const FmModel,
    image: *const f64,
    image_len: usize,
    class_index: usize,
    options: *const FmExplainOptions,
    theta_ssr: *mut f64,
    theta_sdr: *mut f64,
    theta_joint: *mut f64,
    map_len: usize,
) -> FmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = image_tensor(m, image, image_len)?;
        let opts = options.as_ref().copied().unwrap_or_else(|| fm_explain_options_default());
        let r = estimate_pair(m, &x, class_index, &fido_config(&opts)?)?;
        for (dst, kind) in [(theta_ssr, MapKind::Ssr), (theta_sdr, MapKind::Sdr), (theta_joint, MapKind::Joint)] {
            if !dst.is_null() {
                copy_out(dst, map_len, r.map(kind).data(), kind.as_str())?;
            }
        }
        Ok(())
    })
}

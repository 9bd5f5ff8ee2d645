//! C interface: load a checkpoint, decode grayscale images, read back
//! predictions. Every call returns a [`PsStatus`]; on failure
//! [`ps_last_error`] describes it.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pointspot::decode::{DecodeConfig, Engine};
use pointspot::image::Image;
use pointspot::model::Weights;
use pointspot::seqcodec::loop_counts;
use pointspot::train::checkpoint;
use pointspot::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Image = 5,
    OutOfRange = 6,
    Internal = 7,
}

/// Loaded model. Opaque to C.
pub struct PsModel {
    weights: Weights<f32>,
}

/// Predictions of one image. Opaque to C.
pub struct PsPredictions {
    items: Vec<(PsPrediction, CString)>,
}

/// One prediction. `transcript` stays valid until the owning
/// [`PsPredictions`] is freed.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct PsPrediction {
    pub x: f64,
    pub y: f64,
    /// Zero for transcription-only decoding, where `x` and `y` are unset.
    pub has_point: i32,
    pub score: f64,
    pub transcript: *const c_char,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsLoopCounts {
    pub joint: usize,
    pub split: usize,
    pub reduction: usize,
    pub reduction_rate: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PsStatus {
    match e {
        Error::Io { .. } => PsStatus::Io,
        Error::Checkpoint { .. } => PsStatus::Checkpoint,
        Error::Image(_) => PsStatus::Image,
        Error::InvalidArgument(_) | Error::Config(_) | Error::Shape { .. } | Error::NonFinite { .. } => {
            PsStatus::InvalidArgument
        }
        _ => PsStatus::Internal,
    }
}

/// Run `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (PsStatus, String)>) -> PsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PsStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PsStatus::Internal
        }
    }
}

fn lift(e: Error) -> (PsStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (PsStatus, String) {
    (PsStatus::NullArgument, format!("`{}` is null", name))
}

/// Message describing the last failed call on this thread; empty after a
/// successful one. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ps_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load the checkpoint directory at `path` into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_model_load(path: *const c_char, out: *mut *mut PsModel) -> PsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let s = CStr::from_ptr(path).to_str().map_err(|_| (PsStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let weights = checkpoint::load_weights(Path::new(s)).map_err(lift)?;
        *out = Box::into_raw(Box::new(PsModel { weights }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`ps_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ps_model_free(model: *mut PsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Square canvas side the model decodes at.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_model_image_side(model: *const PsModel, out: *mut usize) -> PsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.weights.config.image_side;
        Ok(())
    })
}

/// Decode a row-major 8-bit grayscale image. Points are reported in the
/// image's own pixel coordinates; predictions scoring below `threshold`
/// are dropped.
///
/// # Safety
/// `pixels` must hold `height * width` bytes; `model` must be live and
/// `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ps_decode_gray(
    model: *const PsModel,
    pixels: *const u8,
    height: usize,
    width: usize,
    threshold: f64,
    out: *mut *mut PsPredictions,
) -> PsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = height
            .checked_mul(width)
            .filter(|&n| n > 0)
            .ok_or_else(|| (PsStatus::InvalidArgument, format!("bad image size {}x{}", height, width)))?;
        let bytes = std::slice::from_raw_parts(pixels, n);
        let image = Image::from_gray_bytes(height, width, bytes).map_err(lift)?;
        let cfg = DecodeConfig { threshold, ..DecodeConfig::default() };
        cfg.validate().map_err(lift)?;
        let (canvas, scale) = image.fit_square(m.weights.config.image_side);
        let decoded = Engine::new(&m.weights).decode_image(&canvas, &cfg).map_err(lift)?;
        let items = decoded
            .predictions
            .into_iter()
            .map(|p| {
                let text = CString::new(p.transcript.replace('\0', " ")).expect("nul bytes replaced");
                let [x, y] = p.point.map_or([0.0, 0.0], |q| [q[0] / scale, q[1] / scale]);
                let pred = PsPrediction {
                    x,
                    y,
                    has_point: i32::from(p.point.is_some()),
                    score: p.score,
                    transcript: ptr::null(),
                };
                (pred, text)
            })
            .collect();
        *out = Box::into_raw(Box::new(PsPredictions { items }));
        Ok(())
    })
}

/// # Safety
/// `preds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_predictions_len(preds: *const PsPredictions) -> usize {
    preds.as_ref().map_or(0, |p| p.items.len())
}

/// Copy prediction `index` into `*out`.
///
/// # Safety
/// `preds` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_prediction_get(preds: *const PsPredictions, index: usize, out: *mut PsPrediction) -> PsStatus {
    guard(|| {
        let p = preds.as_ref().ok_or_else(|| null("preds"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (pred, text) = p
            .items
            .get(index)
            .ok_or_else(|| (PsStatus::OutOfRange, format!("index {} of {}", index, p.items.len())))?;
        *out = PsPrediction { transcript: text.as_ptr(), ..*pred };
        Ok(())
    })
}

/// # Safety
/// `preds` must come from [`ps_decode_gray`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ps_predictions_free(preds: *mut PsPredictions) {
    if !preds.is_null() {
        drop(Box::from_raw(preds));
    }
}

/// Decoding loops for `n` instances of up to `k` characters, single-stream
/// versus split.
#[no_mangle]
pub extern "C" fn ps_loop_counts(n: usize, k: usize) -> PsLoopCounts {
    let c = loop_counts(n, k);
    PsLoopCounts { joint: c.joint, split: c.split, reduction: c.reduction, reduction_rate: c.reduction_rate }
}

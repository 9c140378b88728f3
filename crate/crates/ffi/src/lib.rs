//! C ABI for the polyp-segmentation toolkit.
//!
//! Conventions, mirrored in the generated `include/polypseg.h`:
//! - every fallible call returns a [`PsgStatus`]; `PSG_STATUS_OK` is zero
//! - on failure a thread-local message is readable through
//!   [`psg_last_error`] until the next fallible call on the same thread
//! - [`PsgModel`] is opaque; release it with [`psg_model_free`]
//! - images are channel-first RGB `f64` in `[0,1]` of length
//!   `3 * side * side`; masks and heatmaps are row-major `side * side`
//!
//! Panics never unwind across the boundary: they are caught and surfaced
//! as `PSG_STATUS_RUNTIME_ERROR`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::{Array2, Array3};
use polypseg::error::Error;
use polypseg::train::checkpoint::load_checkpoint;
use polypseg::{gradcam, metrics, model};

/// Result of a fallible C-ABI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsgStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument failed validation (bad side, bad path encoding, ...).
    InvalidArgument = 2,
    /// The checkpoint file could not be read or decoded.
    IoError = 3,
    /// A numeric failure, or a caught internal panic.
    RuntimeError = 4,
}

/// A loaded segmentation model. Opaque; create with [`psg_model_load`]
/// and destroy with [`psg_model_free`].
pub struct PsgModel {
    inner: model::UNet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    // Interior NULs would truncate the C string; make them visible instead.
    let clean = msg.replace('\0', "\\0");
    let stored = CString::new(clean).expect("NULs escaped above");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(stored));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

type CallResult = Result<(), (PsgStatus, String)>;

/// Runs a fallible body, translating the outcome (including panics) into
/// a status code plus thread-local message.
fn guarded<F: FnOnce() -> CallResult>(body: F) -> PsgStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => PsgStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let what = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {what}"));
            PsgStatus::RuntimeError
        }
    }
}

fn from_core(e: Error) -> (PsgStatus, String) {
    let status = match &e {
        Error::Config(_) | Error::Validation(_) => PsgStatus::InvalidArgument,
        Error::Io { .. } => PsgStatus::IoError,
        Error::Runtime(_) => PsgStatus::RuntimeError,
    };
    (status, e.to_string())
}

fn non_null<T>(ptr: *const T, name: &str) -> CallResult {
    if ptr.is_null() {
        return Err((PsgStatus::NullArgument, format!("{name} is null")));
    }
    Ok(())
}

/// side * side, rejecting zero and overflow before any buffer is touched.
fn plane_len(side: u32) -> Result<usize, (PsgStatus, String)> {
    if side == 0 {
        return Err((PsgStatus::InvalidArgument, "side must be positive".into()));
    }
    (side as usize)
        .checked_mul(side as usize)
        .ok_or((PsgStatus::InvalidArgument, "side overflows usize".into()))
}

/// Rebuilds the channel-first image tensor an inference call was handed.
unsafe fn image_from_raw(image: *const f64, side: u32) -> Result<Array3<f64>, (PsgStatus, String)> {
    let plane = plane_len(side)?;
    let len = plane
        .checked_mul(3)
        .ok_or((PsgStatus::InvalidArgument, "side overflows usize".into()))?;
    let slice = std::slice::from_raw_parts(image, len);
    Ok(Array3::from_shape_vec((3, side as usize, side as usize), slice.to_vec())
        .expect("len computed from shape"))
}

unsafe fn mask_from_raw(ptr: *const u8, side: u32) -> Result<Array2<u8>, (PsgStatus, String)> {
    let plane = plane_len(side)?;
    let slice = std::slice::from_raw_parts(ptr, plane);
    Ok(Array2::from_shape_vec((side as usize, side as usize), slice.to_vec())
        .expect("len computed from shape"))
}

/// Version of the toolkit ABI as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn psg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failing call on this thread, or null if
/// the last call succeeded. The pointer is valid until the next fallible
/// call on the same thread.
#[no_mangle]
pub extern "C" fn psg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |s| s.as_ptr())
    })
}

/// Loads a model from a checkpoint file written by the `polypseg` trainer.
/// On success `*out_model` owns the handle.
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out_model` to a
/// writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn psg_model_load(
    path: *const c_char,
    out_model: *mut *mut PsgModel,
) -> PsgStatus {
    guarded(|| {
        non_null(path, "path")?;
        non_null(out_model as *const *mut PsgModel, "out_model")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (PsgStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
        let (inner, _state) = load_checkpoint(Path::new(path)).map_err(from_core)?;
        *out_model = Box::into_raw(Box::new(PsgModel { inner }));
        Ok(())
    })
}

/// Releases a model handle. Null is a no-op.
///
/// # Safety
/// `model` must have come from [`psg_model_load`] and not been freed.
#[no_mangle]
pub unsafe extern "C" fn psg_model_free(model: *mut PsgModel) {
    if model.is_null() {
        return;
    }
    let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
}

/// Number of trainable parameters in the model.
///
/// # Safety
/// `model` must be a live handle and `out_count` writable.
#[no_mangle]
pub unsafe extern "C" fn psg_model_param_count(
    model: *const PsgModel,
    out_count: *mut u64,
) -> PsgStatus {
    guarded(|| {
        non_null(model, "model")?;
        non_null(out_count as *const u64, "out_count")?;
        *out_count = (*model).inner.count_params() as u64;
        Ok(())
    })
}

/// Segments one image: argmax over the class probabilities, written as
/// 0 (background) / 1 (polyp) into `out_mask`.
///
/// `image` holds `3 * side * side` values, channel-first; `out_mask`
/// receives `side * side` bytes. `side` must be divisible by the model's
/// pooling factor (2 per encoder stage).
///
/// # Safety
/// All pointers must be valid for the advertised lengths.
#[no_mangle]
pub unsafe extern "C" fn psg_model_predict(
    model: *const PsgModel,
    image: *const f64,
    side: u32,
    out_mask: *mut u8,
) -> PsgStatus {
    guarded(|| {
        non_null(model, "model")?;
        non_null(image, "image")?;
        non_null(out_mask as *const u8, "out_mask")?;
        let x = image_from_raw(image, side)?;
        let pred = (*model).inner.forward_one(&x).map_err(from_core)?;
        let mask = metrics::binarize_prediction(&pred.probs);
        let out = std::slice::from_raw_parts_mut(out_mask, mask.len());
        for (dst, &src) in out.iter_mut().zip(mask.iter()) {
            *dst = src;
        }
        Ok(())
    })
}

/// Grad-CAM heatmap for one image, taken from the last decoder block and
/// upsampled to input resolution. `out_heatmap` receives `side * side`
/// values in `[0,1]` (all zeros when the raw map is constant).
///
/// # Safety
/// All pointers must be valid for the advertised lengths.
#[no_mangle]
pub unsafe extern "C" fn psg_model_gradcam(
    model: *const PsgModel,
    image: *const f64,
    side: u32,
    out_heatmap: *mut f64,
) -> PsgStatus {
    guarded(|| {
        non_null(model, "model")?;
        non_null(image, "image")?;
        non_null(out_heatmap as *const f64, "out_heatmap")?;
        let x = image_from_raw(image, side)?;
        let map = gradcam::gradcam(&(*model).inner, &x, None).map_err(from_core)?;
        let out = std::slice::from_raw_parts_mut(out_heatmap, map.values.len());
        for (dst, &src) in out.iter_mut().zip(map.values.iter()) {
            *dst = src;
        }
        Ok(())
    })
}

/// Intersection-over-union of two `side * side` masks (nonzero = polyp).
/// Both masks empty scores 1.
///
/// # Safety
/// `pred` and `truth` must each hold `side * side` bytes.
#[no_mangle]
pub unsafe extern "C" fn psg_iou(
    pred: *const u8,
    truth: *const u8,
    side: u32,
    out_value: *mut f64,
) -> PsgStatus {
    guarded(|| {
        non_null(pred, "pred")?;
        non_null(truth, "truth")?;
        non_null(out_value as *const f64, "out_value")?;
        let p = mask_from_raw(pred, side)?;
        let g = mask_from_raw(truth, side)?;
        *out_value = metrics::iou(&p, &g).map_err(from_core)?;
        Ok(())
    })
}

/// Dice coefficient (F-score) of two `side * side` masks (nonzero =
/// polyp). Both masks empty scores 1.
///
/// # Safety
/// `pred` and `truth` must each hold `side * side` bytes.
#[no_mangle]
pub unsafe extern "C" fn psg_dice(
    pred: *const u8,
    truth: *const u8,
    side: u32,
    out_value: *mut f64,
) -> PsgStatus {
    guarded(|| {
        non_null(pred, "pred")?;
        non_null(truth, "truth")?;
        non_null(out_value as *const f64, "out_value")?;
        let p = mask_from_raw(pred, side)?;
        let g = mask_from_raw(truth, side)?;
        *out_value = metrics::dice_f(&p, &g).map_err(from_core)?;
        Ok(())
    })
}

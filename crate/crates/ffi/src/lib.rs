//! C ABI over the `mfenet` engine.
//!
//! Every function returns an [`MfeStatus`]. On failure a message describing
//! the last error on the calling thread is available from
//! [`mfe_last_error`]. Images cross the boundary as interleaved 8-bit RGB,
//! row-major, `width * height * 3` bytes.

use std::any::Any;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use mfenet::data::Image;
use mfenet::metrics;
use mfenet::network::ModelConfig;
use mfenet::trainer::{self, Checkpoint};
use mfenet::params::ModelParams;
use mfenet::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MfeStatus {
    Ok = 0,
    NullPointer = 1,
    /// Sizes, shapes or other arguments out of range.
    InvalidArgument = 2,
    Io = 3,
    /// Malformed checkpoint or image bytes.
    Format = 4,
    /// Checkpoint tensors do not match its model configuration.
    ParameterMismatch = 5,
    NonFinite = 6,
    /// A Rust panic was caught at the boundary.
    Internal = 7,
}

/// A loaded model. Opaque to C.
pub struct MfeModel {
    config: ModelConfig,
    params: ModelParams<f32>,
}

/// Quality of a restored image against its reference, on 8-bit values.
/// `psnr` is `+inf` for identical images.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MfeMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub vif: f64,
    pub mse: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(e: &Error) -> MfeStatus {
    match e {
        Error::Io { .. } => MfeStatus::Io,
        Error::Parse { .. } | Error::BadMagic { .. } | Error::BadVersion { .. } | Error::Truncated { .. } => {
            MfeStatus::Format
        }
        Error::UnknownParameter(_) | Error::MissingParameter { .. } => MfeStatus::ParameterMismatch,
        Error::NonFinite(_) => MfeStatus::NonFinite,
        Error::Contract(_) | Error::Config(_) => MfeStatus::InvalidArgument,
    }
}

fn panic_text(p: &(dyn Any + Send)) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Runs `f`, recording any failure for [`mfe_last_error`].
fn guard(f: impl FnOnce() -> Result<(), (MfeStatus, String)>) -> MfeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MfeStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_error(&message);
            status
        }
        Err(p) => {
            set_error(&format!("internal error: {}", panic_text(p.as_ref())));
            MfeStatus::Internal
        }
    }
}

fn lift(e: Error) -> (MfeStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MfeStatus, String) {
    (MfeStatus::NullPointer, format!("{what} is null"))
}

fn rgb_len(width: usize, height: usize) -> Result<usize, (MfeStatus, String)> {
    if width == 0 || height == 0 {
        return Err((MfeStatus::InvalidArgument, format!("image size {width}x{height} is empty")));
    }
    width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| (MfeStatus::InvalidArgument, format!("image size {width}x{height} overflows")))
}

/// # Safety
/// `rgb` must be null or point to `width * height * 3` readable bytes.
unsafe fn read_image(rgb: *const u8, width: usize, height: usize, what: &str) -> Result<Image, (MfeStatus, String)> {
    let len = rgb_len(width, height)?;
    if rgb.is_null() {
        return Err(null(what));
    }
    let bytes = unsafe { slice::from_raw_parts(rgb, len) };
    Image::new(width, height, bytes.to_vec()).map_err(lift)
}

fn into_model(ckpt: Checkpoint) -> Box<MfeModel> {
    Box::new(MfeModel { config: ckpt.config, params: ckpt.params })
}

/// Message for the last failing call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn mfe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mfe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file into a new model stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mfe_model_load(path: *const c_char, out: *mut *mut MfeModel) -> MfeStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (MfeStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
        let ckpt = trainer::load_checkpoint(Path::new(path)).map_err(lift)?;
        unsafe { *out = Box::into_raw(into_model(ckpt)) };
        Ok(())
    })
}

/// Like [`mfe_model_load`] from an in-memory checkpoint image.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn mfe_model_from_bytes(data: *const u8, len: usize, out: *mut *mut MfeModel) -> MfeStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = unsafe { slice::from_raw_parts(data, len) };
        let ckpt = Checkpoint::from_bytes(bytes).map_err(lift)?;
        unsafe { *out = Box::into_raw(into_model(ckpt)) };
        Ok(())
    })
}

/// Releases a model. Null is a no-op.
///
/// # Safety
/// `model` must come from a load function and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mfe_model_free(model: *mut MfeModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of trainable scalars in the model.
///
/// # Safety
/// `model` must be a live model and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mfe_model_param_count(model: *const MfeModel, out: *mut usize) -> MfeStatus {
    guard(|| {
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { *out = model.params.trainable_count() };
        Ok(())
    })
}

/// Deblurs one RGB image of any size into `out_rgb` (same size).
///
/// # Safety
/// `model` must be live; `rgb` and `out_rgb` must each hold
/// `width * height * 3` bytes and may alias.
#[no_mangle]
pub unsafe extern "C" fn mfe_model_infer(
    model: *const MfeModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    out_rgb: *mut u8,
) -> MfeStatus {
    guard(|| {
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let img = unsafe { read_image(rgb, width, height, "rgb") }?;
        if out_rgb.is_null() {
            return Err(null("out_rgb"));
        }
        let restored = trainer::restore(&model.params, &model.config, &img.to_tensor()).map_err(lift)?;
        let restored = Image::from_tensor(&restored).map_err(lift)?;
        let out = unsafe { slice::from_raw_parts_mut(out_rgb, img.pixels().len()) };
        out.copy_from_slice(restored.pixels());
        Ok(())
    })
}

/// PSNR, SSIM and VIF of `restored` against `reference`. Both images need
/// at least 32 pixels per side for VIF.
///
/// # Safety
/// Both buffers must hold `width * height * 3` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mfe_metrics(
    restored: *const u8,
    reference: *const u8,
    width: usize,
    height: usize,
    out: *mut MfeMetrics,
) -> MfeStatus {
    guard(|| {
        let r = unsafe { read_image(restored, width, height, "restored") }?;
        let s = unsafe { read_image(reference, width, height, "reference") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = metrics::evaluate_pair(&r.to_tensor::<f64>(), &s.to_tensor::<f64>()).map_err(lift)?;
        unsafe { *out = MfeMetrics { psnr: m.psnr, ssim: m.ssim, vif: m.vif, mse: m.mse } };
        Ok(())
    })
}

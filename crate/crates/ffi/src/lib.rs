//! C ABI over the caatp retouching library.
//!
//! Every function returns a [`CaatpStatus`]. On failure the message is kept
//! in thread-local storage and can be read with [`caatp_last_error_message`].
//! Images cross the boundary as interleaved 8-bit RGB, row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use caatp::app::pipeline::{check_delta, retouch, Mode};
use caatp::attributes::{attribute_vector, NUM_ATTRIBUTES};
use caatp::model::{ModelConfig, RetouchModel};
use caatp::style::{render_text, AtpModel};
use caatp::{Error, Image};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaatpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Image = 3,
    Checkpoint = 4,
    MissingArtifact = 5,
    Io = 6,
    Internal = 7,
    Panic = 8,
}

/// Opaque handle to a loaded retouching model.
pub struct CaatpModel {
    model: RetouchModel,
}

/// Opaque handle to a loaded attribute predictor.
pub struct CaatpPredictor {
    atp: AtpModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CaatpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Image(_) => CaatpStatus::Image,
            Error::Checkpoint(_) | Error::Json(_) => CaatpStatus::Checkpoint,
            Error::MissingArtifact(_) => CaatpStatus::MissingArtifact,
            Error::Io(_) => CaatpStatus::Io,
            Error::Config(_) | Error::Text(_) | Error::Shape(_) => CaatpStatus::InvalidArgument,
            _ => CaatpStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

impl From<caatp::ImageError> for Failure {
    fn from(e: caatp::ImageError) -> Self {
        Error::from(e).into()
    }
}

fn null(what: &str) -> Failure {
    Failure(CaatpStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CaatpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CaatpStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("panic inside caatp".into());
            CaatpStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Failure(CaatpStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn image_arg(rgb: *const u8, height: usize, width: usize) -> Result<Image, Failure> {
    if rgb.is_null() {
        return Err(null("rgb"));
    }
    let len = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Failure(CaatpStatus::InvalidArgument, "image dimensions overflow".into()))?;
    Ok(Image::from_rgb8(height, width, std::slice::from_raw_parts(rgb, len))?)
}

unsafe fn delta_arg(delta: *const f64) -> Result<[f64; NUM_ATTRIBUTES], Failure> {
    if delta.is_null() {
        return Err(null("delta"));
    }
    let mut d = [0.0; NUM_ATTRIBUTES];
    d.copy_from_slice(std::slice::from_raw_parts(delta, NUM_ATTRIBUTES));
    Ok(d)
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Loads a retouching model checkpoint. On success `*out` owns the handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caatp_model_load(path: *const c_char, out: *mut *mut CaatpModel) -> CaatpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        if !std::path::Path::new(path).exists() {
            return Err(Error::MissingArtifact(format!("model checkpoint {path}")).into());
        }
        let model = RetouchModel::load(path)?;
        out.write(Box::into_raw(Box::new(CaatpModel { model })));
        Ok(())
    })
}

/// Creates a freshly initialized model with the default architecture.
/// Before training it reproduces its input.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caatp_model_new(seed: u64, out: *mut *mut CaatpModel) -> CaatpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = RetouchModel::new(ModelConfig::default(), seed)?;
        out.write(Box::into_raw(Box::new(CaatpModel { model })));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn caatp_model_free(model: *mut CaatpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads an attribute predictor checkpoint for automatic mode.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caatp_predictor_load(path: *const c_char, out: *mut *mut CaatpPredictor) -> CaatpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        if !std::path::Path::new(path).exists() {
            return Err(Error::MissingArtifact(format!("attribute predictor checkpoint {path}")).into());
        }
        let atp = AtpModel::load(path)?;
        out.write(Box::into_raw(Box::new(CaatpPredictor { atp })));
        Ok(())
    })
}

/// Releases a predictor handle. Null is ignored.
///
/// # Safety
/// `predictor` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn caatp_predictor_free(predictor: *mut CaatpPredictor) {
    if !predictor.is_null() {
        drop(Box::from_raw(predictor));
    }
}

/// Retouches an image by an explicit six-component preference delta.
/// `out_rgb` receives `height * width * 3` bytes.
///
/// # Safety
/// `rgb` and `out_rgb` must hold `height * width * 3` bytes and `delta` six
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn caatp_retouch(
    model: *const CaatpModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    delta: *const f64,
    out_rgb: *mut u8,
) -> CaatpStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let img = image_arg(rgb, height, width)?;
        let delta = delta_arg(delta)?;
        check_delta(&delta)?;
        if out_rgb.is_null() {
            return Err(null("out_rgb"));
        }
        let r = retouch(&model.model, None, &img, &Mode::Manual(delta))?;
        let bytes = r.image.to_rgb8();
        ptr::copy_nonoverlapping(bytes.as_ptr(), out_rgb, bytes.len());
        Ok(())
    })
}

/// Retouches an image using the predictor to choose the target style.
/// When `out_delta` is not null it receives the delta that was applied.
///
/// # Safety
/// `rgb` and `out_rgb` must hold `height * width * 3` bytes; `out_delta`
/// must be null or hold six doubles.
#[no_mangle]
pub unsafe extern "C" fn caatp_retouch_auto(
    model: *const CaatpModel,
    predictor: *const CaatpPredictor,
    rgb: *const u8,
    height: usize,
    width: usize,
    out_rgb: *mut u8,
    out_delta: *mut f64,
) -> CaatpStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let atp = predictor.as_ref().map(|p| &p.atp);
        let img = image_arg(rgb, height, width)?;
        if out_rgb.is_null() {
            return Err(null("out_rgb"));
        }
        let r = retouch(&model.model, atp, &img, &Mode::Auto)?;
        let bytes = r.image.to_rgb8();
        ptr::copy_nonoverlapping(bytes.as_ptr(), out_rgb, bytes.len());
        if !out_delta.is_null() {
            ptr::copy_nonoverlapping(r.delta.as_ptr(), out_delta, NUM_ATTRIBUTES);
        }
        Ok(())
    })
}

/// Renders the style sentence for a preference delta. Free the result with
/// [`caatp_string_free`].
///
/// # Safety
/// `delta` must hold six doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caatp_render_text(delta: *const f64, out: *mut *mut c_char) -> CaatpStatus {
    guard(|| {
        let delta = delta_arg(delta)?;
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Failure(CaatpStatus::InvalidArgument, "delta must be finite".into()));
        }
        let text = CString::new(render_text(&delta)).map_err(|e| Failure(CaatpStatus::Internal, e.to_string()))?;
        write_out(out, text.into_raw(), "out")
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn caatp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Computes the six discrete attribute levels (1 to 5) of an image.
///
/// # Safety
/// `rgb` must hold `height * width * 3` bytes and `out_levels` six bytes.
#[no_mangle]
pub unsafe extern "C" fn caatp_attributes(
    rgb: *const u8,
    height: usize,
    width: usize,
    out_levels: *mut u8,
) -> CaatpStatus {
    guard(|| {
        let img = image_arg(rgb, height, width)?;
        if out_levels.is_null() {
            return Err(null("out_levels"));
        }
        let levels = attribute_vector(&img).levels.map(|l| l as u8);
        ptr::copy_nonoverlapping(levels.as_ptr(), out_levels, NUM_ATTRIBUTES);
        Ok(())
    })
}

/// Counts the distinct RGB triplets of an image.
///
/// # Safety
/// `rgb` must hold `height * width * 3` bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caatp_unique_color_count(
    rgb: *const u8,
    height: usize,
    width: usize,
    out: *mut usize,
) -> CaatpStatus {
    guard(|| {
        let img = image_arg(rgb, height, width)?;
        write_out(out, caatp::curves::unique_color_count(&img), "out")
    })
}

/// Message for the most recent failure on this thread, or null after a
/// success. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn caatp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

//! C ABI over the segmentation model and the evaluation metrics.
//!
//! Every fallible call returns a [`ScsStatus`]; on failure the message is
//! available from [`scs_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ndarray::Array3;
use scribble_seg::data::ImageVolume;
use scribble_seg::metrics::{dsc3d, hd95, BinaryVolume};
use scribble_seg::model::{init_params, load_checkpoint, ModelConfig, ModelParams};
use scribble_seg::train::{infer_volume, DecoderChoice};
use scribble_seg::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numerical = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScsDecoder {
    Main = 0,
    Aux = 1,
}

/// A loaded network.
pub struct ScsModel {
    params: ModelParams<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: ScsStatus, message: impl Into<String>) -> ScsStatus {
    set_error(message.into());
    status
}

fn status_of(err: &Error) -> ScsStatus {
    match err {
        Error::Validation(_) => ScsStatus::InvalidArgument,
        Error::Format { .. } | Error::Json(_) => ScsStatus::Format,
        Error::Io { .. } => ScsStatus::Io,
        Error::Numerical(_) => ScsStatus::Numerical,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), ScsStatus>) -> ScsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScsStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(ScsStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: scribble_seg::Result<T>) -> Result<T, ScsStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn volume_len(depth: usize, height: usize, width: usize) -> Result<usize, ScsStatus> {
    let n = depth
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| fail(ScsStatus::InvalidArgument, "volume size overflows"))?;
    if n == 0 {
        return Err(fail(ScsStatus::InvalidArgument, "volume has a zero dimension"));
    }
    Ok(n)
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), ScsStatus> {
    if p.is_null() {
        Err(fail(ScsStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn scs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn scs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scs_model_load(path: *const c_char, out: *mut *mut ScsModel) -> ScsStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| fail(ScsStatus::InvalidArgument, "path is not UTF-8"))?;
        let (params, _) = lift(load_checkpoint(Path::new(path)))?;
        unsafe { *out = Box::into_raw(Box::new(ScsModel { params })) };
        Ok(())
    })
}

/// Creates a freshly initialized model (single input channel).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scs_model_init(
    levels: usize,
    base_width: usize,
    num_classes: usize,
    seed: u64,
    out: *mut *mut ScsModel,
) -> ScsStatus {
    guard(|| {
        non_null(out, "out")?;
        let config = ModelConfig {
            levels,
            base_width,
            num_classes,
            ..ModelConfig::default()
        };
        let params = lift(init_params::<f32>(&config, seed))?;
        unsafe { *out = Box::into_raw(Box::new(ScsModel { params })) };
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn scs_model_free(model: *mut ScsModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn scs_model_num_classes(model: *const ScsModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.params.config.num_classes)
}

/// Segments a `[depth, height, width]` volume slice by slice into `out_labels`.
///
/// # Safety
/// `image` and `out_labels` must each hold `depth * height * width` elements.
#[no_mangle]
pub unsafe extern "C" fn scs_model_segment(
    model: *const ScsModel,
    image: *const f32,
    depth: usize,
    height: usize,
    width: usize,
    input_size: usize,
    decoder: ScsDecoder,
    out_labels: *mut u8,
) -> ScsStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(image, "image")?;
        non_null(out_labels, "out_labels")?;
        let n = volume_len(depth, height, width)?;
        let model = unsafe { &*model };
        let voxels = unsafe { std::slice::from_raw_parts(image, n) }.to_vec();
        let voxels = Array3::from_shape_vec((depth, height, width), voxels).expect("length checked");
        let volume = lift(ImageVolume::new(voxels, [1.0; 3], "ffi", "0"))?;
        let decoder = match decoder {
            ScsDecoder::Main => DecoderChoice::Main,
            ScsDecoder::Aux => DecoderChoice::Aux,
        };
        let labels = lift(infer_volume(&model.params, &volume, decoder, input_size))?;
        let out = unsafe { std::slice::from_raw_parts_mut(out_labels, n) };
        for (o, &v) in out.iter_mut().zip(labels.iter()) {
            *o = v;
        }
        Ok(())
    })
}

unsafe fn binary_pair(
    pred: *const u8,
    gt: *const u8,
    depth: usize,
    height: usize,
    width: usize,
    spacing: [f64; 3],
) -> Result<(BinaryVolume, BinaryVolume), ScsStatus> {
    non_null(pred, "pred")?;
    non_null(gt, "gt")?;
    let n = volume_len(depth, height, width)?;
    let to_mask = |p: *const u8| {
        let values = unsafe { std::slice::from_raw_parts(p, n) };
        Array3::from_shape_fn((depth, height, width), |(z, y, x)| values[(z * height + y) * width + x] != 0)
    };
    Ok((
        lift(BinaryVolume::new(to_mask(pred), spacing))?,
        lift(BinaryVolume::new(to_mask(gt), spacing))?,
    ))
}

/// Dice coefficient of two masks (nonzero is foreground).
///
/// # Safety
/// `pred` and `gt` must each hold `depth * height * width` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn scs_dsc3d(
    pred: *const u8,
    gt: *const u8,
    depth: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> ScsStatus {
    guard(|| {
        non_null(out, "out")?;
        let (p, g) = unsafe { binary_pair(pred, gt, depth, height, width, [1.0; 3]) }?;
        unsafe { *out = lift(dsc3d(&p, &g))? };
        Ok(())
    })
}

/// 95th-percentile symmetric surface distance in mm. `spacing` points to
/// three values `(z, y, x)`. `out_sentinel` (optional) is set when exactly
/// one mask is empty and the volume diagonal was returned.
///
/// # Safety
/// `pred` and `gt` must each hold `depth * height * width` bytes, `spacing`
/// three doubles; `out_mm` must be valid and `out_sentinel` null or valid.
#[no_mangle]
pub unsafe extern "C" fn scs_hd95(
    pred: *const u8,
    gt: *const u8,
    depth: usize,
    height: usize,
    width: usize,
    spacing: *const f64,
    out_mm: *mut f64,
    out_sentinel: *mut bool,
) -> ScsStatus {
    guard(|| {
        non_null(spacing, "spacing")?;
        non_null(out_mm, "out_mm")?;
        let s = unsafe { std::slice::from_raw_parts(spacing, 3) };
        let (p, g) = unsafe { binary_pair(pred, gt, depth, height, width, [s[0], s[1], s[2]]) }?;
        let h = lift(hd95(&p, &g))?;
        unsafe {
            *out_mm = h.mm;
            if !out_sentinel.is_null() {
                *out_sentinel = h.sentinel;
            }
        }
        Ok(())
    })
}

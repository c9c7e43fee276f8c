//! C ABI over the `rfbsr` library.
//!
//! Every fallible function returns an [`RfbsrStatus`]. On failure a
//! description is available from [`rfbsr_last_error_message`] on the same
//! thread until the next call into this library. Panics are caught and
//! reported as [`RfbsrStatus::Panic`]; they never unwind into C.
//!
//! Images cross the boundary as interleaved `h * w * channels` `float`
//! buffers (row-major, channel fastest) with values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use rfbsr::checkpoint::Checkpoint;
use rfbsr::config::Config;
use rfbsr::data::{bicubic_resize, resized_len, EdgeMode};
use rfbsr::ensemble::average_checkpoints;
use rfbsr::infer::Upscaler;
use rfbsr::metrics::{psnr, ssim};
use rfbsr::nn::{count_parameters, Generator};
use rfbsr::{Error, Tensor};

/// Result of a call. Values 3 and above match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfbsrStatus {
    Ok = 0,
    NullPointer = 1,
    Panic = 2,
    Io = 3,
    Image = 4,
    Config = 5,
    Checkpoint = 6,
    Diverged = 7,
    Shape = 9,
    InvalidArgument = 10,
    Internal = 11,
}

/// Opaque generator with loaded weights.
pub struct RfbsrUpscaler {
    inner: Upscaler<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum FfiError {
    Null(&'static str),
    Invalid(String),
    Core(Error),
}

impl From<Error> for FfiError {
    fn from(e: Error) -> Self {
        FfiError::Core(e)
    }
}

fn status_of(e: &Error) -> RfbsrStatus {
    match e.kind() {
        "io" => RfbsrStatus::Io,
        "image" => RfbsrStatus::Image,
        "config" => RfbsrStatus::Config,
        "checkpoint" => RfbsrStatus::Checkpoint,
        "diverged" => RfbsrStatus::Diverged,
        "shape" => RfbsrStatus::Shape,
        "invalid_argument" => RfbsrStatus::InvalidArgument,
        _ => RfbsrStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), FfiError>) -> RfbsrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RfbsrStatus::Ok,
        Ok(Err(FfiError::Null(what))) => {
            set_last_error(format!("{what} is null"));
            RfbsrStatus::NullPointer
        }
        Ok(Err(FfiError::Invalid(msg))) => {
            set_last_error(msg);
            RfbsrStatus::InvalidArgument
        }
        Ok(Err(FfiError::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            RfbsrStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<(), FfiError> {
    if p.is_null() {
        Err(FfiError::Null(what))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` is null or a valid nul-terminated string.
unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, FfiError> {
    non_null(p, what)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| FfiError::Invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// # Safety
/// `p` is null or a valid nul-terminated string.
unsafe fn config_arg(p: *const c_char) -> Result<Config, FfiError> {
    if p.is_null() {
        Ok(Config::default())
    } else {
        Ok(Config::load(path_arg(p, "config_path")?)?)
    }
}

fn image_len(h: usize, w: usize, channels: usize) -> Result<usize, FfiError> {
    if h == 0 || w == 0 || channels == 0 {
        return Err(FfiError::Invalid(format!("empty image {h}x{w}x{channels}")));
    }
    h.checked_mul(w)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| FfiError::Invalid("image size overflows".into()))
}

/// # Safety
/// `data` points to `h * w * channels` readable floats.
unsafe fn read_hwc<T: rfbsr::Scalar>(
    data: *const f32,
    h: usize,
    w: usize,
    channels: usize,
    what: &'static str,
) -> Result<Tensor<T>, FfiError> {
    non_null(data, what)?;
    let len = image_len(h, w, channels)?;
    let src = std::slice::from_raw_parts(data, len);
    Ok(Tensor::from_fn([1, channels, h, w], |_, c, y, x| {
        T::of_f64(src[(y * w + x) * channels + c] as f64)
    }))
}

/// # Safety
/// `out` points to `out_len` writable floats.
unsafe fn write_hwc<T: rfbsr::Scalar>(t: &Tensor<T>, out: *mut f32, out_len: usize) -> Result<(), FfiError> {
    non_null(out, "out")?;
    let s = t.shape();
    let needed = s.h * s.w * s.c;
    if out_len < needed {
        return Err(FfiError::Invalid(format!(
            "output buffer holds {out_len} floats, need {needed}"
        )));
    }
    let dst = std::slice::from_raw_parts_mut(out, needed);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                dst[(y * s.w + x) * s.c + c] = t.at(0, c, y, x).as_f64() as f32;
            }
        }
    }
    Ok(())
}

/// Description of the last failure on this thread, or null if the last call
/// succeeded. The pointer is valid until the next call into this library
/// from the same thread.
#[no_mangle]
pub extern "C" fn rfbsr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn rfbsr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds the generator described by `config_path` (null for defaults),
/// loads `checkpoint_path` into it, and stores the handle in `*out`.
///
/// # Safety
/// `config_path` is null or a valid string; `checkpoint_path` is a valid
/// string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfbsr_upscaler_new(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut RfbsrUpscaler,
) -> RfbsrStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = config_arg(config_path)?;
        let ck = path_arg(checkpoint_path, "checkpoint_path")?;
        let (inner, _) = Upscaler::<f32>::from_file(&cfg.model, ck, false)?;
        *out = Box::into_raw(Box::new(RfbsrUpscaler { inner }));
        Ok(())
    })
}

/// Releases a handle from [`rfbsr_upscaler_new`]. Null is ignored.
///
/// # Safety
/// `handle` is null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rfbsr_upscaler_free(handle: *mut RfbsrUpscaler) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Upscaling factor of the handle's generator.
///
/// # Safety
/// `handle` is a live handle; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfbsr_upscaler_scale(handle: *const RfbsrUpscaler, out: *mut usize) -> RfbsrStatus {
    guard(|| {
        non_null(handle, "handle")?;
        non_null(out, "out")?;
        *out = (*handle).inner.scale();
        Ok(())
    })
}

/// Super-resolves an `h * w` RGB image. `out` must hold
/// `(h * scale) * (w * scale) * 3` floats; results are clamped to `[0, 1]`.
///
/// # Safety
/// `handle` is a live handle; `rgb` holds `h * w * 3` floats; `out` holds
/// `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn rfbsr_upscale(
    handle: *const RfbsrUpscaler,
    rgb: *const f32,
    h: usize,
    w: usize,
    out: *mut f32,
    out_len: usize,
) -> RfbsrStatus {
    guard(|| {
        non_null(handle, "handle")?;
        let lr = read_hwc::<f32>(rgb, h, w, 3, "rgb")?;
        let sr = (*handle).inner.upscale(&lr)?;
        write_hwc(&sr, out, out_len)
    })
}

/// Output length of resizing `len` samples by `scale`.
///
/// # Safety
/// `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfbsr_resized_len(len: usize, scale: f64, out: *mut usize) -> RfbsrStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = resized_len(len, scale)?;
        Ok(())
    })
}

/// Bicubic resize by `scale` (antialiased when shrinking, replicated
/// edges). `out` must hold `resized_len(h) * resized_len(w) * channels`
/// floats. Computation is in double precision.
///
/// # Safety
/// `src` holds `h * w * channels` floats; `out` holds `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn rfbsr_bicubic_resize(
    src: *const f32,
    h: usize,
    w: usize,
    channels: usize,
    scale: f64,
    out: *mut f32,
    out_len: usize,
) -> RfbsrStatus {
    guard(|| {
        let img = read_hwc::<f64>(src, h, w, channels, "src")?;
        let resized = bicubic_resize(&img, scale, EdgeMode::Replicate)?;
        write_hwc(&resized, out, out_len)
    })
}

/// PSNR in dB between two images, capped at 100.
///
/// # Safety
/// `a` and `b` hold `h * w * channels` floats; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfbsr_psnr(
    a: *const f32,
    b: *const f32,
    h: usize,
    w: usize,
    channels: usize,
    out: *mut f64,
) -> RfbsrStatus {
    guard(|| {
        non_null(out, "out")?;
        let (x, y) = (
            read_hwc::<f64>(a, h, w, channels, "a")?,
            read_hwc::<f64>(b, h, w, channels, "b")?,
        );
        *out = psnr(&x, &y)?;
        Ok(())
    })
}

/// Mean SSIM (11x11 Gaussian window, sigma 1.5) averaged over channels.
/// Images must be at least 11x11.
///
/// # Safety
/// `a` and `b` hold `h * w * channels` floats; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfbsr_ssim(
    a: *const f32,
    b: *const f32,
    h: usize,
    w: usize,
    channels: usize,
    out: *mut f64,
) -> RfbsrStatus {
    guard(|| {
        non_null(out, "out")?;
        let (x, y) = (
            read_hwc::<f64>(a, h, w, channels, "a")?,
            read_hwc::<f64>(b, h, w, channels, "b")?,
        );
        *out = ssim(&x, &y)?;
        Ok(())
    })
}

/// Writes the parameter-space mean of `count` checkpoints to `out_path`.
///
/// # Safety
/// `paths` holds `count` valid strings; `out_path` is a valid string.
#[no_mangle]
pub unsafe extern "C" fn rfbsr_checkpoint_average(
    paths: *const *const c_char,
    count: usize,
    out_path: *const c_char,
) -> RfbsrStatus {
    guard(|| {
        non_null(paths, "paths")?;
        let out = path_arg(out_path, "out_path")?;
        let inputs = std::slice::from_raw_parts(paths, count)
            .iter()
            .map(|&p| path_arg(p, "paths[i]"))
            .collect::<Result<Vec<_>, _>>()?;
        let cks = inputs.iter().map(Checkpoint::read).collect::<rfbsr::Result<Vec<_>>>()?;
        average_checkpoints(&cks, count)?.write(out)?;
        Ok(())
    })
}

/// Trainable parameter count of the generator described by `config_path`
/// (null for defaults).
///
/// # Safety
/// `config_path` is null or a valid string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rfbsr_parameter_count(config_path: *const c_char, out: *mut u64) -> RfbsrStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = config_arg(config_path)?;
        let (_, store) = Generator::build::<f32>(&cfg.model, 0)?;
        *out = count_parameters(&store) as u64;
        Ok(())
    })
}

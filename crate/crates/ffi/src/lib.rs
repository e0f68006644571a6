//! C interface to `dualdiff`.
//!
//! Objects cross the boundary as opaque handles created by `dd_*_new`/`load`
//! functions and released with the matching `dd_*_free`. Every fallible call
//! returns a [`DdStatus`]; on failure `dd_last_error` describes the problem
//! for the calling thread. Panics are caught and reported as
//! `DD_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dualdiff::bundle::ModelBundle;
use dualdiff::degradation::{degrade_with_kernel_size, psnr};
use dualdiff::image::{Image, ValueRange};
use dualdiff::kernelgen::{kernel_from_params, KernelParams};
use dualdiff::pipeline::{predict_kernel, super_resolve};
use dualdiff::rng::stream;
use dualdiff::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Data = 4,
    Numerical = 5,
    MissingCheckpoint = 6,
    Io = 7,
    Usage = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// A loaded three-network model.
pub struct DdBundle {
    inner: ModelBundle,
}

/// An RGB or grayscale image with values in `[0, 1]`.
pub struct DdImage {
    inner: Image,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DdStatus {
    match e {
        Error::Shape(_) => DdStatus::Shape,
        Error::InvalidArgument(_) => DdStatus::InvalidArgument,
        Error::Usage(_) => DdStatus::Usage,
        Error::Numerical(_) => DdStatus::Numerical,
        Error::MissingCheckpoint { .. } => DdStatus::MissingCheckpoint,
        Error::Io { .. } => DdStatus::Io,
        _ => DdStatus::Data,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Buffer { needed: usize, given: usize },
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DdStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            DdStatus::NullPointer
        }
        Ok(Err(Fail::Buffer { needed, given })) => {
            set_error(format!("buffer holds {given} values, {needed} needed"));
            DdStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic".into());
            DdStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::InvalidArgument(format!("{what} is not UTF-8"))))?;
    Ok(PathBuf::from(s))
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, needed: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    if len < needed {
        return Err(Fail::Buffer { needed, given: len });
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the calling thread's last failure, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load `encoder.ckpt`, `kernel.ckpt` and `recon.ckpt` from `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dd_bundle_load(dir: *const c_char, out: *mut *mut DdBundle) -> DdStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        put(out, DdBundle {
            inner: ModelBundle::load_dir(&dir)?,
        })
    })
}

/// Upscaling factor of the bundle, or 0 for a null handle.
///
/// # Safety
/// `bundle` must come from `dd_bundle_load`.
#[no_mangle]
pub unsafe extern "C" fn dd_bundle_scale(bundle: *const DdBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.inner.config.scale)
}

/// Number of values in a predicted kernel (`kernel_size²`).
///
/// # Safety
/// `bundle` must come from `dd_bundle_load`.
#[no_mangle]
pub unsafe extern "C" fn dd_bundle_kernel_len(bundle: *const DdBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.inner.config.kernel_len())
}

/// # Safety
/// `bundle` must come from `dd_bundle_load` or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn dd_bundle_free(bundle: *mut DdBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Image from interleaved 8-bit samples, `channels` 1 or 3.
///
/// # Safety
/// `data` must hold `width * height * channels` bytes.
#[no_mangle]
pub unsafe extern "C" fn dd_image_from_u8(
    data: *const u8,
    width: usize,
    height: usize,
    channels: usize,
    out: *mut *mut DdImage,
) -> DdStatus {
    guard(|| {
        if data.is_null() {
            return Err(Fail::Null("data"));
        }
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Fail::Lib(Error::InvalidArgument("image dimensions overflow".into())))?;
        let bytes = std::slice::from_raw_parts(data, n);
        put(out, DdImage {
            inner: Image::from_u8(channels, height, width, bytes)?,
        })
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dd_image_load_png(path: *const c_char, out: *mut *mut DdImage) -> DdStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        put(out, DdImage {
            inner: Image::load_png(&path)?,
        })
    })
}

/// # Safety
/// `image` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dd_image_save_png(image: *const DdImage, path: *const c_char) -> DdStatus {
    guard(|| {
        let img = deref(image, "image")?;
        img.inner.save_png(&path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `image` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dd_image_width(image: *const DdImage) -> usize {
    image.as_ref().map_or(0, |i| i.inner.width())
}

/// # Safety
/// `image` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dd_image_height(image: *const DdImage) -> usize {
    image.as_ref().map_or(0, |i| i.inner.height())
}

/// # Safety
/// `image` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dd_image_channels(image: *const DdImage) -> usize {
    image.as_ref().map_or(0, |i| i.inner.channels())
}

/// Copy interleaved 8-bit samples into `buf`, which must hold
/// `width * height * channels` bytes.
///
/// # Safety
/// `buf` must be writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dd_image_to_u8(image: *const DdImage, buf: *mut u8, len: usize) -> DdStatus {
    guard(|| {
        let bytes = deref(image, "image")?.inner.to_u8();
        out_slice(buf, len, bytes.len(), "buf")?.copy_from_slice(&bytes);
        Ok(())
    })
}

/// # Safety
/// `image` must be a live handle or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn dd_image_free(image: *mut DdImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Render the normalized anisotropic Gaussian kernel into `buf` (row-major,
/// `size * size` values).
///
/// # Safety
/// `buf` must be writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn dd_kernel_render(
    lambda1: f64,
    lambda2: f64,
    theta: f64,
    size: usize,
    buf: *mut f64,
    len: usize,
) -> DdStatus {
    guard(|| {
        let k = kernel_from_params(&KernelParams::new(lambda1, lambda2, theta)?, size)?;
        out_slice(buf, len, k.values().len(), "buf")?.copy_from_slice(k.values());
        Ok(())
    })
}

/// Blur `hr` with the kernel of the given parameters and keep every
/// `scale`-th pixel.
///
/// # Safety
/// `hr` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dd_degrade(
    hr: *const DdImage,
    lambda1: f64,
    lambda2: f64,
    theta: f64,
    scale: usize,
    kernel_size: usize,
    out: *mut *mut DdImage,
) -> DdStatus {
    guard(|| {
        let hr = deref(hr, "hr")?;
        let p = KernelParams::new(lambda1, lambda2, theta)?;
        let (lr, _) = degrade_with_kernel_size(&hr.inner, &p, scale, kernel_size)?;
        put(out, DdImage { inner: lr })
    })
}

/// PSNR in dB of two images of equal shape; identical images give +infinity.
///
/// # Safety
/// `a` and `b` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dd_psnr(a: *const DdImage, b: *const DdImage, out: *mut f64) -> DdStatus {
    guard(|| {
        let (a, b) = (deref(a, "a")?, deref(b, "b")?);
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = psnr(&a.inner, &b.inner)?;
        Ok(())
    })
}

/// Projected kernel estimate of `lr` into `buf` (`dd_bundle_kernel_len` values).
///
/// # Safety
/// Handles must be live; `buf` must be writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn dd_predict_kernel(
    bundle: *const DdBundle,
    lr: *const DdImage,
    seed: u64,
    buf: *mut f64,
    len: usize,
) -> DdStatus {
    guard(|| {
        let (b, lr) = (deref(bundle, "bundle")?, deref(lr, "lr")?);
        let pred = predict_kernel(&lr.inner, &b.inner, &mut stream(seed, "ffi", 0))?;
        let v = pred.projected.values();
        out_slice(buf, len, v.len(), "buf")?.copy_from_slice(v);
        Ok(())
    })
}

/// Super-resolve `lr`. `out_sr` receives a new image handle; when
/// `kernel_buf` is non-null it receives the projected kernel.
///
/// # Safety
/// Handles must be live; `out_sr` writable; `kernel_buf` null or writable for
/// `kernel_len` values.
#[no_mangle]
pub unsafe extern "C" fn dd_super_resolve(
    bundle: *const DdBundle,
    lr: *const DdImage,
    seed: u64,
    out_sr: *mut *mut DdImage,
    kernel_buf: *mut f64,
    kernel_len: usize,
) -> DdStatus {
    guard(|| {
        let (b, lr) = (deref(bundle, "bundle")?, deref(lr, "lr")?);
        if out_sr.is_null() {
            return Err(Fail::Null("out_sr"));
        }
        let out = super_resolve(&lr.inner, &b.inner, &mut stream(seed, "ffi", 0))?;
        if !kernel_buf.is_null() {
            let v = out.kernel.projected.values();
            out_slice(kernel_buf, kernel_len, v.len(), "kernel_buf")?.copy_from_slice(v);
        }
        put(out_sr, DdImage {
            inner: out.sr.to_range(ValueRange::Unit),
        })
    })
}

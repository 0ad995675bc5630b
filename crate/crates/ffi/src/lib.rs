//! C ABI over `remix-core`: load a checkpoint, query its partition and
//! mixing coefficients, and draw samples.
//!
//! Every function returns a [`RemixStatus`]. On failure the message is kept
//! per thread and can be copied out with [`remix_last_error`]. Panics are
//! caught at the boundary and reported as `REMIX_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use remix_core::diffusion::{sample, ExpertProvider, SamplerConfig};
use remix_core::training::RemixModel;
use remix_core::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RemixStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct RemixHandle {
    model: RemixModel<f32>,
}

/// Sizes of a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RemixModelInfo {
    /// Diffusion length `T`.
    pub timesteps: usize,
    /// Expert count `N`.
    pub experts: usize,
    /// Basis count `K`; 1 for plain checkpoints.
    pub bases: usize,
    /// Floats per sample.
    pub sample_len: usize,
    /// 0 for unconditional models.
    pub num_classes: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> RemixStatus {
    match e {
        Error::Io { .. } => RemixStatus::Io,
        Error::Checkpoint(_) => RemixStatus::Checkpoint,
        Error::NonFinite(_) => RemixStatus::Numeric,
        _ => RemixStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (RemixStatus, String)>) -> RemixStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RemixStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside remix-ffi");
            RemixStatus::Panic
        }
    }
}

fn core<T>(r: remix_core::Result<T>) -> Result<T, (RemixStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (RemixStatus, String) {
    (RemixStatus::NullPointer, format!("{what} is null"))
}

fn handle<'a>(h: *const RemixHandle) -> Result<&'a RemixHandle, (RemixStatus, String)> {
    // SAFETY: the caller passes a handle from `remix_model_load` that has
    // not been freed, or null (rejected here).
    unsafe { h.as_ref() }.ok_or_else(|| null("model"))
}

/// Loads a checkpoint. On success `*out` owns a handle to release with
/// [`remix_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn remix_model_load(path: *const c_char, out: *mut *mut RemixHandle) -> RemixStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: non-null and NUL-terminated per the contract.
        let p = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (RemixStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = core(RemixModel::<f32>::load(Path::new(p)))?;
        // SAFETY: `out` is non-null and writable per the contract.
        unsafe { *out = Box::into_raw(Box::new(RemixHandle { model })) };
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`remix_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn remix_model_free(model: *mut RemixHandle) {
    if !model.is_null() {
        // SAFETY: ownership returns from the caller exactly once.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn remix_model_info(model: *const RemixHandle, out: *mut RemixModelInfo) -> RemixStatus {
    guard(|| {
        let h = handle(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = &h.model;
        let info = RemixModelInfo {
            timesteps: m.sched.len(),
            experts: m.experts(),
            bases: m.bases(),
            sample_len: m.config().sample_shape().iter().product(),
            num_classes: m.config().num_classes,
        };
        // SAFETY: checked non-null above.
        unsafe { *out = info };
        Ok(())
    })
}

/// Expert index serving timestep `t`.
///
/// # Safety
/// `model` must be a live handle and `out_expert` writable.
#[no_mangle]
pub unsafe extern "C" fn remix_interval_of(model: *const RemixHandle, t: usize, out_expert: *mut usize) -> RemixStatus {
    guard(|| {
        let h = handle(model)?;
        if out_expert.is_null() {
            return Err(null("out_expert"));
        }
        let i = core(h.model.partition.interval_of(t))?;
        // SAFETY: checked non-null above.
        unsafe { *out_expert = i };
        Ok(())
    })
}

/// Copies the `K` mixing coefficients of `expert` into `out`. Local mixers
/// report their first table. Plain checkpoints report `[1]`.
///
/// # Safety
/// `model` must be a live handle and `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn remix_coefficients(
    model: *const RemixHandle,
    expert: usize,
    out: *mut f32,
    len: usize,
) -> RemixStatus {
    guard(|| {
        let h = handle(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = &h.model;
        if expert >= m.experts() {
            return Err((
                RemixStatus::InvalidArgument,
                format!("expert {expert} out of range 0..{}", m.experts()),
            ));
        }
        let row = match m.mixer() {
            Some(mixer) => core(mixer.coefficients(expert))?,
            None => vec![1.0],
        };
        if len < row.len() {
            return Err((
                RemixStatus::BufferTooSmall,
                format!("need {} floats, got {len}", row.len()),
            ));
        }
        // SAFETY: `out` holds at least `len >= row.len()` floats.
        unsafe { ptr::copy_nonoverlapping(row.as_ptr(), out, row.len()) };
        Ok(())
    })
}

/// Draws `n` samples into `out` (`n * sample_len` floats, row-major).
/// `steps = 0` uses all `T` steps. `labels` may be null; for conditional
/// models classes then cycle `0, 1, ...`. `runtime_mix != 0` mixes the
/// bank inside every step instead of precomputing experts.
///
/// # Safety
/// `model` must be a live handle, `labels` null or `n` entries, and `out`
/// must hold `out_len` floats.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn remix_sample(
    model: *const RemixHandle,
    n: usize,
    seed: u64,
    steps: usize,
    guidance: f32,
    runtime_mix: i32,
    labels: *const u32,
    out: *mut f32,
    out_len: usize,
) -> RemixStatus {
    guard(|| {
        let h = handle(model)?;
        let m = &h.model;
        let per = m.config().sample_shape().iter().product::<usize>();
        if n > 0 && out.is_null() {
            return Err(null("out"));
        }
        if out_len < n * per {
            return Err((
                RemixStatus::BufferTooSmall,
                format!("need {} floats, got {out_len}", n * per),
            ));
        }
        let classes = m.config().num_classes;
        let labels: Option<Vec<usize>> = match (classes, labels.is_null()) {
            (0, true) => None,
            (0, false) => {
                return Err((
                    RemixStatus::InvalidArgument,
                    "labels given for an unconditional model".into(),
                ))
            }
            (c, true) => Some((0..n).map(|i| i % c).collect()),
            // SAFETY: non-null `labels` holds `n` entries per the contract.
            (_, false) => Some(unsafe { std::slice::from_raw_parts(labels, n) }.iter().map(|&l| l as usize).collect()),
        };
        let cfg = SamplerConfig {
            n_steps: if steps == 0 { m.sched.len() } else { steps },
            guidance_scale: guidance as f64,
            stochastic: true,
            seed,
        };
        let pre;
        let rt;
        let provider: &dyn ExpertProvider<f32> = if runtime_mix != 0 {
            rt = m.runtime_mixer();
            &rt
        } else {
            pre = core(m.precompute())?;
            &pre
        };
        let x = core(sample(provider, &m.sched, &cfg, &m.config().sample_shape(), n, labels.as_deref()))?;
        core(x.check_finite("sampling"))?;
        if n > 0 {
            // SAFETY: `out` holds at least `n * per` floats, checked above.
            unsafe { ptr::copy_nonoverlapping(x.data().as_ptr(), out, n * per) };
        }
        Ok(())
    })
}

/// Copies the calling thread's last error message (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding NUL.
///
/// # Safety
/// `buf` must be null or hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn remix_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            // SAFETY: `buf` holds `len > n` bytes per the contract.
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Crate version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn remix_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

//! C interface: load a checkpoint, enhance sample buffers, score SI-SDR.
//!
//! Every entry point returns an [`SbctmStatus`]; on failure a description is
//! kept per thread and can be copied out with [`sbctm_last_error`]. Panics
//! never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sbctm::bridge::TimeGrid;
use sbctm::config::RunConfig;
use sbctm::inference::{Enhancer, InferenceError, StudentEnhancer, TeacherEnhancer};
use sbctm::metrics::{si_sdr, MetricError};
use sbctm::model::DenoiserModel;
use sbctm::pipeline::{load_model, ModelKind, PipelineError};
use sbctm::teacher::TeacherModel;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SbctmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Numeric = 5,
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Failure(SbctmStatus, String);

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = if e.is_config() {
            SbctmStatus::Config
        } else if e.is_numeric() {
            SbctmStatus::Numeric
        } else if matches!(e, PipelineError::Checkpoint { .. } | PipelineError::Io { .. }) {
            SbctmStatus::Io
        } else {
            SbctmStatus::InvalidArgument
        };
        Failure(code, e.to_string())
    }
}

impl From<InferenceError> for Failure {
    fn from(e: InferenceError) -> Self {
        let code = match &e {
            InferenceError::Train(t) if t.is_numeric() => SbctmStatus::Numeric,
            _ => SbctmStatus::InvalidArgument,
        };
        Failure(code, e.to_string())
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        Failure(SbctmStatus::InvalidArgument, e.to_string())
    }
}

fn invalid(msg: &str) -> Failure {
    Failure(SbctmStatus::InvalidArgument, msg.to_string())
}

fn null(what: &str) -> Failure {
    Failure(SbctmStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, records any failure, and converts it to a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SbctmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SbctmStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            SbctmStatus::Internal
        }
    }
}

/// A loaded enhancement model. Opaque to C.
pub struct SbctmEnhancer {
    model: DenoiserModel<f32>,
    teacher: Option<TeacherModel<f32>>,
    config: RunConfig,
    grid: TimeGrid,
}

impl SbctmEnhancer {
    fn run(&self, input: &[f32], nfe: usize) -> Result<Vec<f32>, Failure> {
        if nfe == 0 || nfe > self.grid.len() {
            return Err(invalid(&format!("nfe must lie in 1..={}", self.grid.len())));
        }
        let front = self.config.front_end();
        let out = match &self.teacher {
            Some(teacher) => TeacherEnhancer {
                teacher,
                schedule: &self.config.schedule,
                grid: &self.grid,
                front,
            }
            .enhance_wave(input, nfe)?,
            None => StudentEnhancer {
                model: &self.model,
                grid: &self.grid,
                front,
            }
            .enhance_wave(input, nfe)?,
        };
        Ok(out)
    }
}

/// Loads a teacher or student checkpoint. On success `*out` owns a handle
/// to be released with [`sbctm_enhancer_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sbctm_enhancer_load(path: *const c_char, out: *mut *mut SbctmEnhancer) -> SbctmStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
        let loaded = load_model(Path::new(path))?;
        let grid = loaded.config.time_grid().map_err(PipelineError::from)?;
        let teacher = (loaded.kind == ModelKind::Teacher).then(|| TeacherModel::new(loaded.model.clone()));
        let h = SbctmEnhancer {
            model: loaded.model,
            teacher,
            config: loaded.config,
            grid,
        };
        *out = Box::into_raw(Box::new(h));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `h` must come from [`sbctm_enhancer_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sbctm_enhancer_free(h: *mut SbctmEnhancer) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Sample rate the model expects, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbctm_enhancer_sample_rate(h: *const SbctmEnhancer) -> u32 {
    h.as_ref().map_or(0, |h| h.config.stft.sample_rate)
}

/// Number of points on the model's time grid, the largest accepted NFE.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbctm_enhancer_max_nfe(h: *const SbctmEnhancer) -> usize {
    h.as_ref().map_or(0, |h| h.grid.len())
}

/// Enhances `len` mono samples into `output`, which must hold `len` floats.
/// Teacher checkpoints are sampled with the bridge solver.
///
/// # Safety
/// `input` and `output` must point to `len` floats; they may alias.
#[no_mangle]
pub unsafe extern "C" fn sbctm_enhance(h: *const SbctmEnhancer, input: *const f32, len: usize, nfe: usize, output: *mut f32) -> SbctmStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| null("handle"))?;
        if input.is_null() {
            return Err(null("input"));
        }
        if output.is_null() {
            return Err(null("output"));
        }
        if len == 0 {
            return Err(invalid("empty input"));
        }
        let wave = std::slice::from_raw_parts(input, len).to_vec();
        let est = h.run(&wave, nfe)?;
        std::ptr::copy_nonoverlapping(est.as_ptr(), output, len);
        Ok(())
    })
}

/// Scale-invariant SDR in dB of `estimate` against `reference`.
///
/// # Safety
/// Both buffers must hold `len` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sbctm_si_sdr(reference: *const f32, estimate: *const f32, len: usize, out: *mut f64) -> SbctmStatus {
    guard(|| {
        if reference.is_null() || estimate.is_null() {
            return Err(null("signal"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let r = std::slice::from_raw_parts(reference, len);
        let e = std::slice::from_raw_parts(estimate, len);
        *out = si_sdr(r, e)?;
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sbctm_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sbctm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

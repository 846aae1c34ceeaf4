//! C ABI over the docprune pipeline.
//!
//! Every function returns a [`DpStatus`]. On failure the message is kept
//! per thread and can be read with [`dp_last_error`]. Strings handed out
//! by the library must be released with [`dp_string_free`], pipelines with
//! [`dp_pipeline_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use docprune::content_filter::binarize;
use docprune::encoder::merge_probs;
use docprune::patching::ProbabilityMap;
use docprune::pipeline::{Pipeline, PipelineConfig};
use docprune::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ConfigError = 3,
    RuntimeError = 4,
    Panic = 5,
}

/// Opaque pipeline handle.
pub struct DpPipeline {
    inner: Pipeline,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(e: Error) -> DpStatus {
    let status = if e.is_config_error() {
        DpStatus::ConfigError
    } else {
        DpStatus::RuntimeError
    };
    set_error(e.to_string());
    status
}

/// Runs `f`, turning a panic into [`DpStatus::Panic`].
fn guard(f: impl FnOnce() -> DpStatus) -> DpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
        set_error("internal panic");
        DpStatus::Panic
    })
}

fn null(what: &str) -> DpStatus {
    set_error(format!("{what} is null"));
    DpStatus::NullArgument
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn dp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Builds a pipeline from a TOML config; null `config_toml` means defaults.
///
/// # Safety
/// `config_toml` must be null or a valid NUL-terminated string; `out` must
/// be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn dp_pipeline_new(
    config_toml: *const c_char,
    out: *mut *mut DpPipeline,
) -> DpStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        let config = if config_toml.is_null() {
            PipelineConfig::default()
        } else {
            let Ok(text) = CStr::from_ptr(config_toml).to_str() else {
                set_error("config is not valid UTF-8");
                return DpStatus::InvalidUtf8;
            };
            match PipelineConfig::from_toml(text) {
                Ok(c) => c,
                Err(e) => return fail(e),
            }
        };
        match Pipeline::new(config) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DpPipeline { inner }));
                DpStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a pipeline. Null is ignored.
///
/// # Safety
/// `pipeline` must be null or come from [`dp_pipeline_new`] and not have
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn dp_pipeline_free(pipeline: *mut DpPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Runs the pipeline on its configured corpus and returns the JSON report.
///
/// # Safety
/// `pipeline` must come from [`dp_pipeline_new`]; `report_json` must be a
/// valid pointer. The returned string is freed with [`dp_string_free`].
#[no_mangle]
pub unsafe extern "C" fn dp_pipeline_run(
    pipeline: *const DpPipeline,
    report_json: *mut *mut c_char,
) -> DpStatus {
    guard(|| {
        if pipeline.is_null() {
            return null("pipeline");
        }
        if report_json.is_null() {
            return null("report_json");
        }
        let p = &(*pipeline).inner;
        let text = p
            .corpus()
            .and_then(|c| p.run(&c))
            .and_then(|(r, _)| r.to_json());
        match text {
            Ok(t) => {
                *report_json = CString::new(t).expect("JSON has no NUL").into_raw();
                DpStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn probabilities(p: *const f64, n: usize) -> Result<ProbabilityMap, DpStatus> {
    if p.is_null() && n > 0 {
        return Err(null("probabilities"));
    }
    let values = if n == 0 {
        Vec::new()
    } else {
        std::slice::from_raw_parts(p, n).to_vec()
    };
    ProbabilityMap::new(values).map_err(fail)
}

/// Writes 1 where `p[i] >= eps` and 0 elsewhere into `out[0..n]`.
///
/// # Safety
/// `p` and `out` must each point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dp_binarize(p: *const f64, n: usize, eps: f64, out: *mut f64) -> DpStatus {
    guard(|| {
        if out.is_null() && n > 0 {
            return null("out");
        }
        if !(0.0..=1.0).contains(&eps) {
            set_error(format!("threshold {eps} outside [0,1]"));
            return DpStatus::ConfigError;
        }
        let map = match probabilities(p, n) {
            Ok(m) => m,
            Err(s) => return s,
        };
        let b = binarize(&map, eps);
        if n > 0 {
            std::slice::from_raw_parts_mut(out, n).copy_from_slice(b.values());
        }
        DpStatus::Ok
    })
}

/// 2×2 max-pooling of a row-major `rows×cols` grid into
/// `out[0..rows*cols/4]`. Both sides must be even.
///
/// # Safety
/// `p` must point to `rows*cols` doubles and `out` to `rows*cols/4`.
#[no_mangle]
pub unsafe extern "C" fn dp_merge_max(
    p: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> DpStatus {
    guard(|| {
        let Some(n) = rows.checked_mul(cols) else {
            set_error("grid size overflows");
            return DpStatus::ConfigError;
        };
        if out.is_null() && n > 0 {
            return null("out");
        }
        let map = match probabilities(p, n) {
            Ok(m) => m,
            Err(s) => return s,
        };
        match merge_probs(&map, rows, cols) {
            Ok(m) => {
                if !m.is_empty() {
                    std::slice::from_raw_parts_mut(out, m.len()).copy_from_slice(m.values());
                }
                DpStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

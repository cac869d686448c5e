//! C ABI over the adaptation engine.
//!
//! Every function returns a [`KffStatus`]; on failure the message is
//! available from [`kff_last_error`] on the same thread. Strings handed out
//! by the library must be released with [`kff_string_free`], engines with
//! [`kff_engine_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use kff::harness::{compute_source_stats, gradcheck, CttaEngine, GradcheckConfig, Hyperparams};
use kff::{KffError, ToyModel};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KffStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    NonFinite = 4,
    InsufficientData = 5,
    Config = 6,
    Io = 7,
    Parse = 8,
    Internal = 9,
    Panic = 10,
}

/// Opaque adaptation engine.
pub struct KffEngine {
    inner: CttaEngine,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &KffError) -> KffStatus {
    match err {
        KffError::Dimension { .. } => KffStatus::Dimension,
        KffError::NonFinite(_) => KffStatus::NonFinite,
        KffError::InsufficientData { .. } | KffError::Empty(_) => KffStatus::InsufficientData,
        KffError::Config(_) | KffError::Certificate(_) => KffStatus::Config,
        KffError::Io { .. } => KffStatus::Io,
        KffError::Parse { .. } | KffError::Json(_) => KffStatus::Parse,
        KffError::Domain(_) | KffError::UndefinedSimilarity => KffStatus::InvalidArgument,
        _ => KffStatus::Internal,
    }
}

struct Failure(KffStatus, String);

impl From<KffError> for Failure {
    fn from(e: KffError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KffStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KffStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            KffStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(KffStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(KffStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn engine_ref<'a>(engine: *const KffEngine) -> Result<&'a KffEngine, Failure> {
    engine.as_ref().ok_or_else(|| null("engine"))
}

unsafe fn rows(
    data: *const f64,
    rows: usize,
    cols: usize,
    what: &str,
) -> Result<Vec<Vec<f64>>, Failure> {
    if data.is_null() {
        return Err(null(what));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Failure(KffStatus::InvalidArgument, format!("{what} size overflows")))?;
    let flat = std::slice::from_raw_parts(data, len);
    Ok(flat.chunks(cols.max(1)).map(<[f64]>::to_vec).collect())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn kff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Creates an engine.
///
/// `model_json` is a model snapshot; `source_samples` holds `source_count`
/// row-major samples of the model's input dimension; `hyperparams_json` may
/// be null for defaults.
///
/// # Safety
/// Pointers must be valid for the documented lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kff_engine_new(
    model_json: *const c_char,
    source_samples: *const f64,
    source_count: usize,
    hyperparams_json: *const c_char,
    seed: u64,
    out: *mut *mut KffEngine,
) -> KffStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model: ToyModel = serde_json::from_str(str_arg(model_json, "model_json")?)
            .map_err(|e| Failure(KffStatus::Parse, format!("model_json: {e}")))?;
        let model = ToyModel::new(
            model.extractor().clone(),
            model.head().clone(),
            model.bias().to_vec(),
            model.seed(),
        )?
        .with_prompt_scale(model.prompt_scale())?;
        let hp: Hyperparams = if hyperparams_json.is_null() {
            Hyperparams::default()
        } else {
            serde_json::from_str(str_arg(hyperparams_json, "hyperparams_json")?)
                .map_err(|e| Failure(KffStatus::Config, format!("hyperparams_json: {e}")))?
        };
        let samples = rows(
            source_samples,
            source_count,
            model.input_dim(),
            "source_samples",
        )?;
        let source = compute_source_stats(&model, &samples)?;
        let inner = CttaEngine::new(model, source, hp, seed)?;
        *out = Box::into_raw(Box::new(KffEngine { inner }));
        Ok(())
    })
}

/// Releases an engine; null is ignored.
///
/// # Safety
/// `engine` must come from [`kff_engine_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kff_engine_free(engine: *mut KffEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Adapts to one batch of `batch_size × input_dim` row-major samples.
/// When `predictions` is non-null it receives `batch_size × num_classes`
/// class probabilities.
///
/// # Safety
/// `samples` and, if given, `predictions` must be valid for those lengths.
#[no_mangle]
pub unsafe extern "C" fn kff_engine_step(
    engine: *mut KffEngine,
    samples: *const f64,
    batch_size: usize,
    input_dim: usize,
    predictions: *mut f64,
) -> KffStatus {
    guard(|| {
        let engine = engine.as_mut().ok_or_else(|| null("engine"))?;
        let expected = engine.inner.model().input_dim();
        if input_dim != expected {
            return Err(KffError::Dimension {
                expected,
                got: input_dim,
            }
            .into());
        }
        let batch = rows(samples, batch_size, input_dim, "samples")?;
        let report = engine.inner.step(&batch)?;
        if !predictions.is_null() {
            let c = engine.inner.model().num_classes();
            let dst = std::slice::from_raw_parts_mut(predictions, batch_size * c);
            for (chunk, p) in dst.chunks_mut(c).zip(&report.predictions) {
                chunk.copy_from_slice(p);
            }
        }
        Ok(())
    })
}

/// Writes the input dimension, class count, both pool sizes and the
/// learnable parameter count; any output pointer may be null.
///
/// # Safety
/// Non-null pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn kff_engine_info(
    engine: *const KffEngine,
    input_dim: *mut usize,
    num_classes: *mut usize,
    domain_pool_size: *mut usize,
    class_pool_size: *mut usize,
    param_count: *mut usize,
) -> KffStatus {
    guard(|| {
        let e = &engine_ref(engine)?.inner;
        let fields = [
            (input_dim, e.model().input_dim()),
            (num_classes, e.model().num_classes()),
            (domain_pool_size, e.domain_pool().len()),
            (class_pool_size, e.class_pool().len()),
            (param_count, e.param_count()),
        ];
        for (dst, v) in fields {
            if !dst.is_null() {
                *dst = v;
            }
        }
        Ok(())
    })
}

/// Serializes both pools as JSON into a new string owned by the caller.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kff_engine_snapshot_json(
    engine: *const KffEngine,
    out: *mut *mut c_char,
) -> KffStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let snap = engine_ref(engine)?.inner.snapshot();
        let text = serde_json::to_string(&snap).map_err(KffError::from)?;
        *out = CString::new(text)
            .map_err(|_| Failure(KffStatus::Internal, "snapshot contains NUL".into()))?
            .into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library; null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kff_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Runs the seeded gradient check and reports the largest relative error.
/// Returns `Ok` only if it is below `tolerance`.
///
/// # Safety
/// `max_rel_error` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn kff_gradcheck(
    seed: u64,
    configs: usize,
    step: f64,
    tolerance: f64,
    max_rel_error: *mut f64,
) -> KffStatus {
    guard(|| {
        let r = gradcheck(&GradcheckConfig {
            configs,
            step,
            tolerance,
            seed,
            ..GradcheckConfig::default()
        })?;
        if !max_rel_error.is_null() {
            *max_rel_error = r.max_rel_error;
        }
        if r.passed {
            Ok(())
        } else {
            Err(Failure(
                KffStatus::Internal,
                format!(
                    "max relative error {:e} exceeds {tolerance:e}",
                    r.max_rel_error
                ),
            ))
        }
    })
}

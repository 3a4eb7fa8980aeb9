//! C ABI over the padnet library: opaque model handles, integer status
//! codes, and a thread-local last-error message. Every function returning
//! [`PadnetStatus`] stores a human-readable message retrievable through
//! [`padnet_last_error`] when it fails; the message pointer stays valid until
//! the next padnet call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use padnet::config::ExperimentConfig;
use padnet::harness::{self, load_datasets};
use padnet::layers::TemperaturePlan;
use padnet::model::Model;
use padnet::tensor::Float;
use padnet::PadError;

/// Result of every fallible call; `Ok` is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ShapeMismatch = 3,
    InvalidArgument = 4,
    NonFiniteGradient = 5,
    InvalidConfig = 6,
    BadFormat = 7,
    DataExhausted = 8,
    Diverged = 9,
    AlreadyCompacted = 10,
    Io = 11,
    Json = 12,
    Panic = 13,
}

/// Opaque handle to a loaded model and its embedded experiment config.
pub struct PadnetModel {
    model: Model,
    config: ExperimentConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: PadnetStatus, message: &str) -> PadnetStatus {
    let owned = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(owned));
    status
}

fn status_of(e: &PadError) -> PadnetStatus {
    match e {
        PadError::ShapeMismatch { .. } => PadnetStatus::ShapeMismatch,
        PadError::InvalidArgument(_) => PadnetStatus::InvalidArgument,
        PadError::NonFiniteGradient { .. } => PadnetStatus::NonFiniteGradient,
        PadError::Config { .. } => PadnetStatus::InvalidConfig,
        PadError::Format { .. } => PadnetStatus::BadFormat,
        PadError::DataExhausted { .. } => PadnetStatus::DataExhausted,
        PadError::Diverged { .. } => PadnetStatus::Diverged,
        PadError::AlreadyCompacted(_) => PadnetStatus::AlreadyCompacted,
        PadError::Io(_) => PadnetStatus::Io,
        PadError::Json(_) => PadnetStatus::Json,
    }
}

fn fail_err(e: &PadError) -> PadnetStatus {
    fail(status_of(e), &e.to_string())
}

fn guarded(f: impl FnOnce() -> PadnetStatus) -> PadnetStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(PadnetStatus::Panic, "internal panic"),
    }
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, PadnetStatus> {
    if p.is_null() {
        return Err(fail(PadnetStatus::NullPointer, &format!("{name} is null")));
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| fail(PadnetStatus::InvalidUtf8, &format!("{name} is not valid UTF-8")))
}

fn final_tau(cfg: &ExperimentConfig) -> padnet::Result<Float> {
    let plan = TemperaturePlan::new(
        cfg.train.temperature.start as Float,
        cfg.train.temperature.end as Float,
        cfg.train.temperature.anneal_epochs,
    )?;
    Ok(plan.tau_at(cfg.train.epochs.saturating_sub(1)))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn padnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread, or null after a
/// success. Valid until the next padnet call on the same thread.
#[no_mangle]
pub extern "C" fn padnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Train from a JSON experiment config, writing artifacts under `out_dir`.
/// On success, when `summary_json` is non-null it receives a heap-allocated
/// JSON summary; release it with [`padnet_string_free`].
///
/// # Safety
/// `config_json` and `out_dir` must be valid NUL-terminated strings;
/// `summary_json` must be null or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn padnet_train(
    config_json: *const c_char,
    out_dir: *const c_char,
    summary_json: *mut *mut c_char,
) -> PadnetStatus {
    guarded(|| {
        let config = match unsafe { read_str(config_json, "config_json") } {
            Ok(s) => s,
            Err(status) => return status,
        };
        let out = match unsafe { read_str(out_dir, "out_dir") } {
            Ok(s) => s,
            Err(status) => return status,
        };
        let cfg = match ExperimentConfig::from_json(config) {
            Ok(cfg) => cfg,
            Err(e) => return fail_err(&e),
        };
        let summary = match harness::train(&cfg, Path::new(out)) {
            Ok(summary) => summary,
            Err(e) => return fail_err(&e),
        };
        if !summary_json.is_null() {
            let text = match serde_json::to_string_pretty(&summary) {
                Ok(t) => t,
                Err(e) => return fail_err(&PadError::Json(e)),
            };
            let owned = CString::new(text.replace('\0', " ")).unwrap_or_default();
            unsafe { *summary_json = owned.into_raw() };
        }
        PadnetStatus::Ok
    })
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer obtained from a padnet function.
#[no_mangle]
pub unsafe extern "C" fn padnet_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Load a checkpoint written by training into an opaque handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn padnet_model_open(path: *const c_char, out: *mut *mut PadnetModel) -> PadnetStatus {
    guarded(|| {
        if out.is_null() {
            return fail(PadnetStatus::NullPointer, "out is null");
        }
        let path = match unsafe { read_str(path, "path") } {
            Ok(s) => s,
            Err(status) => return status,
        };
        match Model::load(Path::new(path)) {
            Ok((model, config, _)) => {
                unsafe { *out = Box::into_raw(Box::new(PadnetModel { model, config })) };
                PadnetStatus::Ok
            }
            Err(e) => fail_err(&e),
        }
    })
}

/// Release a handle returned by [`padnet_model_open`]. Null is a no-op.
///
/// # Safety
/// `model` must be null or a pointer obtained from [`padnet_model_open`]
/// that has not been closed yet.
#[no_mangle]
pub unsafe extern "C" fn padnet_model_close(model: *mut PadnetModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of stored parameter scalars (after compaction this is the reduced
/// count).
///
/// # Safety
/// `model` must be a live handle; `count` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn padnet_model_param_count(model: *const PadnetModel, count: *mut u64) -> PadnetStatus {
    guarded(|| {
        if model.is_null() || count.is_null() {
            return fail(PadnetStatus::NullPointer, "model and count must be non-null");
        }
        let handle = unsafe { &*model };
        unsafe { *count = handle.model.scalar_count() as u64 };
        PadnetStatus::Ok
    })
}

/// Whether any layer's storage has been compacted.
///
/// # Safety
/// `model` must be a live handle; `compacted` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn padnet_model_is_compacted(model: *const PadnetModel, compacted: *mut bool) -> PadnetStatus {
    guarded(|| {
        if model.is_null() || compacted.is_null() {
            return fail(PadnetStatus::NullPointer, "model and compacted must be non-null");
        }
        let handle = unsafe { &*model };
        unsafe { *compacted = handle.model.is_compacted() };
        PadnetStatus::Ok
    })
}

/// Evaluate the model on its config's test split, materializing synthetic
/// data under `workdir` when the config calls for it.
///
/// # Safety
/// `model` must be a live handle; `workdir` must be a valid NUL-terminated
/// string; `accuracy` and `mean_loss` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn padnet_model_evaluate(
    model: *const PadnetModel,
    workdir: *const c_char,
    accuracy: *mut f64,
    mean_loss: *mut f64,
) -> PadnetStatus {
    guarded(|| {
        if model.is_null() || accuracy.is_null() || mean_loss.is_null() {
            return fail(PadnetStatus::NullPointer, "model, accuracy, and mean_loss must be non-null");
        }
        let dir = match unsafe { read_str(workdir, "workdir") } {
            Ok(s) => s,
            Err(status) => return status,
        };
        let handle = unsafe { &*model };
        let report = (|| {
            let (_, test) = load_datasets(&handle.config, Path::new(dir))?;
            let tau = final_tau(&handle.config)?;
            harness::evaluate(&handle.model, &test, tau, handle.config.train.batch_size)
        })();
        match report {
            Ok(r) => {
                unsafe {
                    *accuracy = r.accuracy;
                    *mean_loss = r.mean_loss;
                }
                PadnetStatus::Ok
            }
            Err(e) => fail_err(&e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn cfg_json() -> CString {
        CString::new(
            r#"{
  "seed": 4,
  "data": { "source": { "kind": "clusters", "classes": 3, "dim": 6, "n_train": 24, "n_test": 12, "noise_std": 0.25 } },
  "model": { "layers": [ { "kind": "moe", "experts": 4, "top_n": 2, "hidden": 5 }, { "kind": "linear", "out_dim": 3 } ] },
  "train": { "epochs": 2, "batch_size": 8, "lr": 0.05 },
  "pad": { "method": "mp", "kappa": 0.5, "partition_epochs": [1], "batches_per_step": 2 }
}"#,
        )
        .unwrap()
    }

    #[test]
    fn version_is_a_c_string() {
        let v = unsafe { CStr::from_ptr(padnet_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn null_arguments_set_status_and_message() {
        let status = unsafe { padnet_train(ptr::null(), ptr::null(), ptr::null_mut()) };
        assert_eq!(status, PadnetStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(padnet_last_error()) };
        assert!(msg.to_str().unwrap().contains("config_json"));
    }

    #[test]
    fn invalid_config_reports_the_field() {
        let bad = CString::new(r#"{ "seed": 1 }"#).unwrap();
        let out = CString::new("/tmp/unused").unwrap();
        let status = unsafe { padnet_train(bad.as_ptr(), out.as_ptr(), ptr::null_mut()) };
        assert_eq!(status, PadnetStatus::Json);
        assert!(!padnet_last_error().is_null());
    }

    #[test]
    fn train_open_evaluate_close_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = CString::new(dir.path().join("run").to_str().unwrap()).unwrap();
        let mut summary: *mut c_char = ptr::null_mut();
        let status = unsafe { padnet_train(cfg_json().as_ptr(), out.as_ptr(), &mut summary) };
        assert_eq!(status, PadnetStatus::Ok);
        assert!(padnet_last_error().is_null());
        let text = unsafe { CStr::from_ptr(summary) }.to_str().unwrap().to_string();
        assert!(text.contains("final_test_accuracy"));
        unsafe { padnet_string_free(summary) };

        let ckpt = CString::new(dir.path().join("run").join("model.ckpt").to_str().unwrap()).unwrap();
        let mut handle: *mut PadnetModel = ptr::null_mut();
        assert_eq!(unsafe { padnet_model_open(ckpt.as_ptr(), &mut handle) }, PadnetStatus::Ok);

        let mut count = 0u64;
        assert_eq!(unsafe { padnet_model_param_count(handle, &mut count) }, PadnetStatus::Ok);
        assert!(count > 0);

        let mut compacted = false;
        assert_eq!(unsafe { padnet_model_is_compacted(handle, &mut compacted) }, PadnetStatus::Ok);
        assert!(compacted);

        let workdir = CString::new(dir.path().join("eval").to_str().unwrap()).unwrap();
        let (mut acc, mut loss) = (f64::NAN, f64::NAN);
        assert_eq!(
            unsafe { padnet_model_evaluate(handle, workdir.as_ptr(), &mut acc, &mut loss) },
            PadnetStatus::Ok
        );
        assert!((0.0..=1.0).contains(&acc));
        assert!(loss.is_finite());
        unsafe { padnet_model_close(handle) };
    }

    #[test]
    fn missing_checkpoint_is_an_io_error() {
        let path = CString::new("/nonexistent/model.ckpt").unwrap();
        let mut handle: *mut PadnetModel = ptr::null_mut();
        let status = unsafe { padnet_model_open(path.as_ptr(), &mut handle) };
        assert_eq!(status, PadnetStatus::Io);
        assert!(handle.is_null());
    }
}

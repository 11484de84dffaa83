//! C ABI over the training and evaluation pipeline.
//!
//! Conventions: every function that can fail returns a [`GpsviStatus`];
//! handles are opaque pointers created by the library and released with the
//! matching `_free` function; on failure a human-readable message is
//! available from [`gpsvi_last_error`] until the next call on the same
//! thread. Handles are not synchronized — use each from one thread at a
//! time. All panics are caught at the boundary and reported as
//! `GPSVI_STATUS_RUNTIME_ERROR`.

use gpsvi::config::RunConfig;
use gpsvi::data::{load_jsonl, Dataset, SynthConfig};
use gpsvi::eval::{evaluate, score_dataset, EvalError};
use gpsvi::models::CtrModel;
use gpsvi::params::ParamStore;
use gpsvi::train::{resolve_datasets, train_in_memory, TrainError};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

/// Result of every fallible call. Mirrors the CLI exit codes: bad input vs
/// runtime failure.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpsviStatus {
    /// Success.
    Ok = 0,
    /// Null pointer, malformed UTF-8/JSON, or a config/data validation error.
    InvalidArgument = 1,
    /// Training or evaluation failed after inputs validated (non-finite
    /// loss, tensor-engine failure, i/o error, internal panic).
    RuntimeError = 2,
    /// The requested metric has no value (e.g. AUC of a single-class set).
    UndefinedMetric = 3,
}

/// A loaded or generated dataset.
pub struct GpsviDataset {
    ds: Dataset,
}

/// A trained model: run configuration, architecture, and parameters.
pub struct GpsviModel {
    cfg: RunConfig,
    model: CtrModel,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes stripped");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Message for the most recent failure on this thread, or null after a
/// success. The pointer is owned by the library and is invalidated by the
/// next library call on the same thread.
#[no_mangle]
pub extern "C" fn gpsvi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(ptr::null(), |c| c.as_ptr())
    })
}

/// ABI revision; bump on any breaking change to this header.
#[no_mangle]
pub extern "C" fn gpsvi_abi_version() -> u32 {
    1
}

fn status_of_train_error(e: &TrainError) -> GpsviStatus {
    if e.is_runtime_abort() || matches!(e, TrainError::Io(_)) {
        GpsviStatus::RuntimeError
    } else {
        GpsviStatus::InvalidArgument
    }
}

fn fail(status: GpsviStatus, msg: String) -> GpsviStatus {
    set_error(msg);
    status
}

/// Runs `f` with panics converted to `RuntimeError`; clears the error slot
/// first so `gpsvi_last_error` reflects this call only.
fn guarded(f: impl FnOnce() -> GpsviStatus) -> GpsviStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(GpsviStatus::RuntimeError, format!("internal panic: {msg}"))
        }
    }
}

/// # Safety
/// `p` must be null or a valid C string.
unsafe fn utf8_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, GpsviStatus> {
    if p.is_null() {
        return Err(fail(
            GpsviStatus::InvalidArgument,
            format!("{what} must not be null"),
        ));
    }
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| {
        fail(
            GpsviStatus::InvalidArgument,
            format!("{what} must be valid UTF-8"),
        )
    })
}

fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, GpsviStatus> {
    if p.is_null() {
        Err(fail(
            GpsviStatus::InvalidArgument,
            format!("{what} must not be null"),
        ))
    } else {
        Ok(unsafe { &mut *p })
    }
}

fn handle_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, GpsviStatus> {
    if p.is_null() {
        Err(fail(
            GpsviStatus::InvalidArgument,
            format!("{what} must not be null"),
        ))
    } else {
        Ok(unsafe { &*p })
    }
}

// ── datasets ────────────────────────────────────────────────────────

/// Generate a synthetic dataset from a JSON spec (same schema as the CLI's
/// `generate-data` config). On success `*out` owns the new handle.
///
/// # Safety
/// `synth_json` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gpsvi_dataset_generate(
    synth_json: *const c_char,
    seed: u64,
    out: *mut *mut GpsviDataset,
) -> GpsviStatus {
    guarded(|| {
        let out = match out_arg(out, "out") {
            Ok(o) => o,
            Err(s) => return s,
        };
        let text = match unsafe { utf8_arg(synth_json, "synth_json") } {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg: SynthConfig = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => {
                return fail(
                    GpsviStatus::InvalidArgument,
                    format!("synth config at line {}: {e}", e.line()),
                )
            }
        };
        if let Err(e) = cfg.validate() {
            return fail(GpsviStatus::InvalidArgument, e.to_string());
        }
        match gpsvi::data::generate_synthetic(&cfg, seed) {
            Ok(ds) => {
                *out = Box::into_raw(Box::new(GpsviDataset { ds }));
                GpsviStatus::Ok
            }
            Err(e) => fail(GpsviStatus::RuntimeError, e.to_string()),
        }
    })
}

/// Load a JSONL dataset from disk, truncating histories to `max_seq_len`.
/// On success `*out` owns the new handle.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gpsvi_dataset_load(
    path: *const c_char,
    max_seq_len: usize,
    out: *mut *mut GpsviDataset,
) -> GpsviStatus {
    guarded(|| {
        let out = match out_arg(out, "out") {
            Ok(o) => o,
            Err(s) => return s,
        };
        let path = match unsafe { utf8_arg(path, "path") } {
            Ok(t) => t,
            Err(s) => return s,
        };
        match load_jsonl(Path::new(path), max_seq_len) {
            Ok(ds) => {
                *out = Box::into_raw(Box::new(GpsviDataset { ds }));
                GpsviStatus::Ok
            }
            Err(e) => fail(GpsviStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Number of records in the dataset; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn gpsvi_dataset_len(ds: *const GpsviDataset) -> usize {
    if ds.is_null() {
        return 0;
    }
    unsafe { &*ds }.ds.len()
}

/// Release a dataset handle. Null is a no-op.
///
/// # Safety
/// `ds` must be null or a live dataset handle; it is dead afterwards.
#[no_mangle]
pub unsafe extern "C" fn gpsvi_dataset_free(ds: *mut GpsviDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

// ── models ──────────────────────────────────────────────────────────

/// Train per a run-config JSON (same schema as the CLI's `train` config;
/// synthetic and file-backed data sources both work). Returns the first
/// repeat's trained model. On success `*out` owns the new handle.
///
/// # Safety
/// `config_json` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gpsvi_train(
    config_json: *const c_char,
    out: *mut *mut GpsviModel,
) -> GpsviStatus {
    guarded(|| {
        let out = match out_arg(out, "out") {
            Ok(o) => o,
            Err(s) => return s,
        };
        let text = match unsafe { utf8_arg(config_json, "config_json") } {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg = match RunConfig::from_json(text, "config") {
            Ok(c) => c,
            Err(e) => return fail(GpsviStatus::InvalidArgument, e.to_string()),
        };
        match train_handle(cfg) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(m));
                GpsviStatus::Ok
            }
            Err(e) => fail(status_of_train_error(&e), e.to_string()),
        }
    })
}

fn train_handle(cfg: RunConfig) -> Result<GpsviModel, TrainError> {
    // The trainer resolves its own data; resolve once more for the model's
    // vocabulary and length cap (deterministic, so the views agree).
    let (train_ds, _) = resolve_datasets(&cfg)?;
    let (_, mut stores) = train_in_memory(&cfg)?;
    let store = stores.swap_remove(0);
    let model = CtrModel::new(cfg.model.clone(), train_ds.vocab, train_ds.max_seq_len)?;
    Ok(GpsviModel { cfg, model, store })
}

/// Reload a trained model from a checkpoint plus its `run_config.json`
/// sidecar; `data` supplies the vocabulary, exactly as for evaluation.
/// On success `*out` owns the new handle.
///
/// # Safety
/// Both paths must be valid C strings, `data` a live dataset handle, and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gpsvi_model_load(
    checkpoint_path: *const c_char,
    run_config_path: *const c_char,
    data: *const GpsviDataset,
    out: *mut *mut GpsviModel,
) -> GpsviStatus {
    guarded(|| {
        let out = match out_arg(out, "out") {
            Ok(o) => o,
            Err(s) => return s,
        };
        let ckpt = match unsafe { utf8_arg(checkpoint_path, "checkpoint_path") } {
            Ok(t) => t,
            Err(s) => return s,
        };
        let rc = match unsafe { utf8_arg(run_config_path, "run_config_path") } {
            Ok(t) => t,
            Err(s) => return s,
        };
        let data = match handle_arg(data, "data") {
            Ok(d) => d,
            Err(s) => return s,
        };
        let cfg = match RunConfig::load(Path::new(rc)) {
            Ok(c) => c,
            Err(e) => return fail(GpsviStatus::InvalidArgument, e.to_string()),
        };
        let cap = cfg
            .data
            .synthetic
            .as_ref()
            .map(|s| s.max_seq_len)
            .unwrap_or(cfg.data.max_seq_len);
        let (model, store) =
            match CtrModel::init(cfg.model.clone(), data.ds.vocab, cap, 0) {
                Ok(p) => p,
                Err(e) => return fail(GpsviStatus::InvalidArgument, e.to_string()),
            };
        if let Err(e) = store.load_checkpoint(Path::new(ckpt)) {
            return fail(GpsviStatus::InvalidArgument, e.to_string());
        }
        *out = Box::into_raw(Box::new(GpsviModel { cfg, model, store }));
        GpsviStatus::Ok
    })
}

/// Write `checkpoint.json` and `run_config.json` into `dir` (created if
/// missing) so the CLI's `evaluate` and `report` commands can consume them.
///
/// # Safety
/// `model` must be a live model handle and `dir` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn gpsvi_model_save(
    model: *const GpsviModel,
    dir: *const c_char,
) -> GpsviStatus {
    guarded(|| {
        let m = match handle_arg(model, "model") {
            Ok(m) => m,
            Err(s) => return s,
        };
        let dir = match unsafe { utf8_arg(dir, "dir") } {
            Ok(t) => t,
            Err(s) => return s,
        };
        let dir = Path::new(dir);
        if let Err(e) = std::fs::create_dir_all(dir) {
            return fail(GpsviStatus::RuntimeError, e.to_string());
        }
        if let Err(e) = m.cfg.write_to(dir) {
            return fail(GpsviStatus::RuntimeError, e.to_string());
        }
        match m.store.save_checkpoint(&dir.join("checkpoint.json")) {
            Ok(()) => GpsviStatus::Ok,
            Err(e) => fail(GpsviStatus::RuntimeError, e.to_string()),
        }
    })
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a live model handle; it is dead afterwards.
#[no_mangle]
pub unsafe extern "C" fn gpsvi_model_free(model: *mut GpsviModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

// ── scoring ─────────────────────────────────────────────────────────

/// Segment-wise AUC of `model` on `data`, using the model's configured
/// head/tail quantile and scoring mode. Each non-null output receives the
/// AUC, or NaN when that segment has only one class. Output pointers may be
/// null to skip a segment.
///
/// # Safety
/// `model` and `data` must be live handles; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn gpsvi_evaluate(
    model: *const GpsviModel,
    data: *const GpsviDataset,
    auc_all: *mut f64,
    auc_head: *mut f64,
    auc_tail: *mut f64,
) -> GpsviStatus {
    guarded(|| {
        let m = match handle_arg(model, "model") {
            Ok(m) => m,
            Err(s) => return s,
        };
        let d = match handle_arg(data, "data") {
            Ok(d) => d,
            Err(s) => return s,
        };
        let segments = match gpsvi::data::split_head_tail(&d.ds, m.cfg.eval.head_quantile) {
            Ok(s) => s,
            Err(e) => return fail(GpsviStatus::InvalidArgument, e.to_string()),
        };
        let report = match evaluate(
            &m.model,
            &m.store,
            &d.ds,
            &segments,
            m.cfg.eval.mc_samples,
            m.cfg.seeds.noise,
        ) {
            Ok(r) => r,
            Err(e) => return fail(GpsviStatus::RuntimeError, e.to_string()),
        };
        let emit = |p: *mut f64, v: Option<f64>| {
            if !p.is_null() {
                unsafe { *p = v.unwrap_or(f64::NAN) };
            }
        };
        emit(auc_all, report.auc.all);
        emit(auc_head, report.auc.head);
        emit(auc_tail, report.auc.tail);
        GpsviStatus::Ok
    })
}

/// Click probabilities for every record of `data`, written to `out` (length
/// `len`, which must equal the dataset length). Deterministic mean-path
/// scoring unless the model was configured for Monte Carlo evaluation.
///
/// # Safety
/// `model` and `data` must be live handles; `out` must point to `len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gpsvi_scores(
    model: *const GpsviModel,
    data: *const GpsviDataset,
    out: *mut f64,
    len: usize,
) -> GpsviStatus {
    guarded(|| {
        let m = match handle_arg(model, "model") {
            Ok(m) => m,
            Err(s) => return s,
        };
        let d = match handle_arg(data, "data") {
            Ok(d) => d,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(GpsviStatus::InvalidArgument, "out must not be null".into());
        }
        if len != d.ds.len() {
            return fail(
                GpsviStatus::InvalidArgument,
                format!("out length {len} does not match dataset length {}", d.ds.len()),
            );
        }
        match score_dataset(&m.model, &m.store, &d.ds, m.cfg.eval.mc_samples, m.cfg.seeds.noise) {
            Ok(scored) => {
                let dst = unsafe { std::slice::from_raw_parts_mut(out, len) };
                dst.copy_from_slice(&scored.probs);
                GpsviStatus::Ok
            }
            Err(e) => fail(GpsviStatus::RuntimeError, e.to_string()),
        }
    })
}

/// Area under the ROC curve with exact tie handling. `labels` are 0/1.
/// Returns `GPSVI_STATUS_UNDEFINED_METRIC` when only one class is present.
///
/// # Safety
/// `scores` and `labels` must point to `n` readable elements; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gpsvi_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> GpsviStatus {
    guarded(|| {
        let out = match out_arg(out, "out") {
            Ok(o) => o,
            Err(s) => return s,
        };
        if n == 0 || scores.is_null() || labels.is_null() {
            return fail(
                GpsviStatus::InvalidArgument,
                "scores and labels must be non-null and non-empty".into(),
            );
        }
        let scores = unsafe { std::slice::from_raw_parts(scores, n) };
        let labels = unsafe { std::slice::from_raw_parts(labels, n) };
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return fail(
                GpsviStatus::InvalidArgument,
                format!("labels must be 0 or 1, got {bad}"),
            );
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return fail(
                GpsviStatus::InvalidArgument,
                "scores must be finite".into(),
            );
        }
        match gpsvi::eval::auc(scores, labels) {
            Ok(v) => {
                *out = v;
                GpsviStatus::Ok
            }
            Err(e @ EvalError::UndefinedMetric { .. }) => {
                fail(GpsviStatus::UndefinedMetric, e.to_string())
            }
            Err(e) => fail(GpsviStatus::RuntimeError, e.to_string()),
        }
    })
}

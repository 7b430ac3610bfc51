//! C ABI surface: opaque model handles, integer status codes, and a
//! per-thread last-error message.
//!
//! Every entry point catches panics at the boundary and reports them as a
//! status code, so unwinding never crosses into the caller. The pointer
//! returned by [`cil_last_error`] stays valid until the next toolkit call on
//! the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use cil_core::error::Error;
use cil_core::harness::checkpoint::{load_backbone, load_model, save_model};
use cil_core::harness::config::{load_config, ExperimentConfig};
use cil_core::harness::experiment::run_from_config;
use cil_core::harness::plot::write_plot;
use cil_core::harness::report::{write_report, write_timing};
use cil_core::inference::{predict, StrategyKind};
use cil_core::model::{AdapterId, ModelState};

/// Outcome of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CilStatus {
    /// The call succeeded.
    CilOk = 0,
    /// Invalid configuration.
    CilConfigError = 1,
    /// Unreadable or inconsistent data, including I/O failures.
    CilDataError = 2,
    /// Numerical failure, e.g. a non-finite training loss.
    CilNumericalError = 3,
    /// A required pointer was null or an argument was malformed.
    CilInvalidArgument = 4,
    /// An internal panic was caught at the boundary.
    CilPanic = 5,
}

/// One classified instance.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CilPrediction {
    /// External label of the winning class.
    pub class_id: usize,
    /// Classifier column of the winning class.
    pub column: usize,
    /// 1-based id of the task adapter the answer was read from; 0 means the
    /// universal adapter.
    pub selected_task: usize,
}

/// Opaque handle to a loaded model.
pub struct CilModel {
    state: ModelState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn fail(e: &Error) -> CilStatus {
    set_last_error(&e.to_string());
    match e {
        Error::Config(_) => CilStatus::CilConfigError,
        Error::Data(_) | Error::Io(_) => CilStatus::CilDataError,
        Error::Numerical(_) => CilStatus::CilNumericalError,
    }
}

fn invalid(msg: &str) -> CilStatus {
    set_last_error(msg);
    CilStatus::CilInvalidArgument
}

/// Runs a body with panic containment; the body reports its own status.
fn guarded(body: impl FnOnce() -> CilStatus) -> CilStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            CilStatus::CilPanic
        }
    }
}

/// `ptr` must be null or a NUL-terminated string valid for the whole call.
unsafe fn required_path(ptr: *const c_char, what: &str) -> Result<PathBuf, CilStatus> {
    if ptr.is_null() {
        return Err(invalid(&format!("{what} must not be null")));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => Err(invalid(&format!("{what} is not valid UTF-8"))),
    }
}

/// Message describing the most recent failure on this thread, empty when the
/// last call succeeded. The pointer is invalidated by the next toolkit call
/// on the same thread; copy the string before calling anything else.
#[no_mangle]
pub extern "C" fn cil_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a model checkpoint written by the `cil` CLI or
/// [`cil_run_experiment`] and stores the handle in `out`.
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out` to writable
/// storage for one pointer; both must stay valid for the whole call.
#[no_mangle]
pub unsafe extern "C" fn cil_model_load(path: *const c_char, out: *mut *mut CilModel) -> CilStatus {
    guarded(|| {
        if out.is_null() {
            return invalid("out must not be null");
        }
        let path = match required_path(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_model(&path) {
            Ok(state) => {
                *out = Box::into_raw(Box::new(CilModel { state }));
                set_last_error("");
                CilStatus::CilOk
            }
            Err(e) => fail(&e),
        }
    })
}

/// Releases a handle obtained from [`cil_model_load`]. A null handle is a
/// no-op.
///
/// # Safety
/// `model` must be a pointer returned by [`cil_model_load`] that has not
/// been freed yet, or null.
#[no_mangle]
pub unsafe extern "C" fn cil_model_free(model: *mut CilModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of tasks the model has been trained on.
///
/// # Safety
/// `model` must be a live handle from [`cil_model_load`]; `out` must point
/// to writable storage for one `size_t`.
#[no_mangle]
pub unsafe extern "C" fn cil_model_num_tasks(model: *const CilModel, out: *mut usize) -> CilStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return invalid("model and out must not be null");
        }
        *out = (*model).state.num_tasks();
        set_last_error("");
        CilStatus::CilOk
    })
}

/// Number of classes the model can currently distinguish.
///
/// # Safety
/// `model` must be a live handle from [`cil_model_load`]; `out` must point
/// to writable storage for one `size_t`.
#[no_mangle]
pub unsafe extern "C" fn cil_model_seen_classes(model: *const CilModel, out: *mut usize) -> CilStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return invalid("model and out must not be null");
        }
        *out = (*model).state.seen_classes();
        set_last_error("");
        CilStatus::CilOk
    })
}

/// Length of the flattened token buffer one instance occupies, i.e.
/// sequence length times token dimension.
///
/// # Safety
/// `model` must be a live handle from [`cil_model_load`]; `out` must point
/// to writable storage for one `size_t`.
#[no_mangle]
pub unsafe extern "C" fn cil_model_input_len(model: *const CilModel, out: *mut usize) -> CilStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return invalid("model and out must not be null");
        }
        let cfg = &(*model).state.backbone.config;
        *out = cfg.seq_len * cfg.token_dim;
        set_last_error("");
        CilStatus::CilOk
    })
}

/// Classifies one instance. `strategy` is one of `"ensemble"`,
/// `"entropy_only"`, `"universal_only"`, `"max_logit"`; `tokens` holds the
/// row-major token matrix, `tokens_len` values as reported by
/// [`cil_model_input_len`].
///
/// # Safety
/// `model` must be a live handle from [`cil_model_load`]; `strategy` must be
/// NUL-terminated; `tokens` must point to `tokens_len` readable doubles;
/// `out` must point to writable storage for one [`CilPrediction`].
#[no_mangle]
pub unsafe extern "C" fn cil_model_predict(
    model: *const CilModel,
    strategy: *const c_char,
    tokens: *const f64,
    tokens_len: usize,
    out: *mut CilPrediction,
) -> CilStatus {
    guarded(|| {
        if model.is_null() || strategy.is_null() || tokens.is_null() || out.is_null() {
            return invalid("model, strategy, tokens, and out must not be null");
        }
        let strategy = match CStr::from_ptr(strategy).to_str() {
            Ok(s) => match s.parse::<StrategyKind>() {
                Ok(k) => k,
                Err(e) => return fail(&e),
            },
            Err(_) => return invalid("strategy is not valid UTF-8"),
        };
        let state = &(*model).state;
        let cfg = &state.backbone.config;
        let expected = cfg.seq_len * cfg.token_dim;
        if tokens_len != expected {
            return fail(&Error::Data(format!(
                "instance holds {tokens_len} values, expected {expected}"
            )));
        }
        let tokens = std::slice::from_raw_parts(tokens, tokens_len);
        match predict(state, tokens, strategy) {
            Ok(p) => {
                *out = CilPrediction {
                    class_id: p.class_id,
                    column: p.column,
                    selected_task: match p.selected {
                        AdapterId::Task(t) => t,
                        AdapterId::Universal => 0,
                    },
                };
                set_last_error("");
                CilStatus::CilOk
            }
            Err(e) => fail(&e),
        }
    })
}

fn run_experiment_inner(
    config_path: Option<&Path>,
    backbone_path: Option<&Path>,
    out_dir: &Path,
) -> Result<(), Error> {
    let cfg = match config_path {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    let pretrained = match backbone_path {
        Some(path) => Some(load_backbone(path)?),
        None => None,
    };
    let started = Instant::now();
    let arts = run_from_config(&cfg, pretrained)?;
    let elapsed = started.elapsed().as_secs_f64();
    write_report(&arts.report, out_dir)?;
    write_timing(out_dir, elapsed)?;
    write_plot(&arts.report, &out_dir.join("curves.svg"))?;
    save_model(&arts.state, &out_dir.join("model.ckpt"))?;
    Ok(())
}

/// Runs the full incremental experiment and writes `report.json`,
/// `timing.txt`, `curves.svg`, and `model.ckpt` into `out_dir`. A null
/// `config_path` runs the built-in defaults; a null `backbone_path`
/// pretrains the backbone from scratch instead of reusing a checkpoint.
///
/// # Safety
/// Non-null pointers must be NUL-terminated strings valid for the whole
/// call.
#[no_mangle]
pub unsafe extern "C" fn cil_run_experiment(
    config_path: *const c_char,
    backbone_path: *const c_char,
    out_dir: *const c_char,
) -> CilStatus {
    guarded(|| {
        let config = if config_path.is_null() {
            None
        } else {
            match required_path(config_path, "config_path") {
                Ok(p) => Some(p),
                Err(status) => return status,
            }
        };
        let backbone = if backbone_path.is_null() {
            None
        } else {
            match required_path(backbone_path, "backbone_path") {
                Ok(p) => Some(p),
                Err(status) => return status,
            }
        };
        let out_dir = match required_path(out_dir, "out_dir") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match run_experiment_inner(config.as_deref(), backbone.as_deref(), &out_dir) {
            Ok(()) => {
                set_last_error("");
                CilStatus::CilOk
            }
            Err(e) => fail(&e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    use cil_core::fusion::fuse;
    use cil_core::harness::checkpoint::save_model;
    use cil_core::model::{AdapterSet, Backbone, BackboneConfig, Classifier};
    use cil_core::rng::Rng;
    use cil_core::trainer::ClassStatistics;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            num_blocks: 1,
            embed_dim: 6,
            num_heads: 2,
            mlp_hidden: 8,
            seq_len: 3,
            token_dim: 4,
            mean_pool: false,
        }
    }

    fn populated_state(seed: u64) -> ModelState {
        let mut rng = Rng::new(seed);
        let mut backbone = Backbone::init(tiny_cfg(), &mut rng).unwrap();
        backbone.freeze();
        let mut state = ModelState::new(backbone, 3);
        for t in 1..=2 {
            let a = AdapterSet::init(&state.backbone.config, 3, AdapterId::Task(t), &mut rng);
            for b in 0..a.num_blocks() {
                let vals = rng.normal_vec(a.w_up[b].len(), 0.4);
                a.w_up[b].update_data(|d| d.copy_from_slice(&vals));
            }
            state.task_adapters.push(a);
        }
        let refs: Vec<&AdapterSet> = state.task_adapters.iter().collect();
        state.universal = Some(fuse(&refs).unwrap());
        let d = state.backbone.config.embed_dim;
        state.classifier =
            Classifier::from_parts(d, rng.normal_vec(d * 4, 0.2), vec![7, 3, 9, 1], vec![1, 1, 2, 2])
                .unwrap();
        for col in 0..4 {
            state.stats.insert(
                col,
                ClassStatistics {
                    mean: rng.normal_vec(d, 1.0),
                    var: rng.normal_vec(d, 1.0).iter().map(|v| v.abs() + 1e-4).collect(),
                    count: 5 + col,
                },
            );
        }
        state
    }

    fn saved_model_path(dir: &Path, seed: u64) -> PathBuf {
        let path = dir.join("model.ckpt");
        save_model(&populated_state(seed), &path).unwrap();
        path
    }

    fn cstring(path: &Path) -> CString {
        CString::new(path.to_str().unwrap()).unwrap()
    }

    fn last_error_string() -> String {
        unsafe { CStr::from_ptr(cil_last_error()) }.to_str().unwrap().to_string()
    }

    #[test]
    fn load_query_predict_free_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = cstring(&saved_model_path(dir.path(), 5));
        let mut handle: *mut CilModel = std::ptr::null_mut();
        unsafe {
            assert_eq!(cil_model_load(path.as_ptr(), &mut handle), CilStatus::CilOk);
            assert!(!handle.is_null());

            let mut tasks = 0usize;
            assert_eq!(cil_model_num_tasks(handle, &mut tasks), CilStatus::CilOk);
            assert_eq!(tasks, 2);

            let mut classes = 0usize;
            assert_eq!(cil_model_seen_classes(handle, &mut classes), CilStatus::CilOk);
            assert_eq!(classes, 4);

            let mut input_len = 0usize;
            assert_eq!(cil_model_input_len(handle, &mut input_len), CilStatus::CilOk);
            assert_eq!(input_len, 12);

            let tokens: Vec<f64> = (0..input_len).map(|i| (i as f64) * 0.1 - 0.5).collect();
            let strategy = CString::new("ensemble").unwrap();
            let mut pred = CilPrediction { class_id: 0, column: 0, selected_task: 0 };
            assert_eq!(
                cil_model_predict(handle, strategy.as_ptr(), tokens.as_ptr(), tokens.len(), &mut pred),
                CilStatus::CilOk
            );
            assert!(pred.column < 4);
            assert!([7, 3, 9, 1].contains(&pred.class_id));
            assert!(pred.selected_task <= 2);

            cil_model_free(handle);
        }
    }

    #[test]
    fn predictions_match_the_core_library() {
        let dir = tempfile::tempdir().unwrap();
        let state = populated_state(11);
        let path = dir.path().join("model.ckpt");
        save_model(&state, &path).unwrap();
        let cpath = cstring(&path);

        let mut handle: *mut CilModel = std::ptr::null_mut();
        unsafe {
            assert_eq!(cil_model_load(cpath.as_ptr(), &mut handle), CilStatus::CilOk);
            let tokens: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64) * 0.3 - 0.6).collect();
            for kind in StrategyKind::ALL {
                let expected = predict(&state, &tokens, kind).unwrap();
                let strategy = CString::new(kind.name()).unwrap();
                let mut got = CilPrediction { class_id: 0, column: 0, selected_task: 0 };
                assert_eq!(
                    cil_model_predict(handle, strategy.as_ptr(), tokens.as_ptr(), tokens.len(), &mut got),
                    CilStatus::CilOk
                );
                assert_eq!(got.class_id, expected.class_id, "strategy {kind}");
                assert_eq!(got.column, expected.column, "strategy {kind}");
            }
            cil_model_free(handle);
        }
    }

    #[test]
    fn missing_checkpoint_reports_data_error_with_message() {
        let missing = CString::new("/nonexistent/cil/model.ckpt").unwrap();
        let mut handle: *mut CilModel = std::ptr::null_mut();
        let status = unsafe { cil_model_load(missing.as_ptr(), &mut handle) };
        assert_eq!(status, CilStatus::CilDataError);
        assert!(handle.is_null());
        assert!(!last_error_string().is_empty());
    }

    #[test]
    fn null_arguments_are_rejected_not_crashed() {
        let mut handle: *mut CilModel = std::ptr::null_mut();
        unsafe {
            assert_eq!(
                cil_model_load(std::ptr::null(), &mut handle),
                CilStatus::CilInvalidArgument
            );
            assert_eq!(
                cil_model_num_tasks(std::ptr::null(), std::ptr::null_mut()),
                CilStatus::CilInvalidArgument
            );
            cil_model_free(std::ptr::null_mut());
        }
        assert!(!last_error_string().is_empty());
    }

    #[test]
    fn unknown_strategy_reports_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = cstring(&saved_model_path(dir.path(), 23));
        let mut handle: *mut CilModel = std::ptr::null_mut();
        unsafe {
            assert_eq!(cil_model_load(path.as_ptr(), &mut handle), CilStatus::CilOk);
            let strategy = CString::new("softmax_vote").unwrap();
            let tokens = [0.0; 12];
            let mut pred = CilPrediction { class_id: 0, column: 0, selected_task: 0 };
            assert_eq!(
                cil_model_predict(handle, strategy.as_ptr(), tokens.as_ptr(), tokens.len(), &mut pred),
                CilStatus::CilConfigError
            );
            assert!(last_error_string().contains("softmax_vote"));
            cil_model_free(handle);
        }
    }

    #[test]
    fn wrong_token_count_reports_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = cstring(&saved_model_path(dir.path(), 31));
        let mut handle: *mut CilModel = std::ptr::null_mut();
        unsafe {
            assert_eq!(cil_model_load(path.as_ptr(), &mut handle), CilStatus::CilOk);
            let strategy = CString::new("entropy_only").unwrap();
            let tokens = [0.0; 5];
            let mut pred = CilPrediction { class_id: 0, column: 0, selected_task: 0 };
            assert_eq!(
                cil_model_predict(handle, strategy.as_ptr(), tokens.as_ptr(), tokens.len(), &mut pred),
                CilStatus::CilDataError
            );
            cil_model_free(handle);
        }
    }

    #[test]
    fn success_clears_the_previous_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = cstring(&saved_model_path(dir.path(), 43));
        let missing = CString::new("/nonexistent/cil/model.ckpt").unwrap();
        let mut handle: *mut CilModel = std::ptr::null_mut();
        unsafe {
            assert_eq!(
                cil_model_load(missing.as_ptr(), &mut handle),
                CilStatus::CilDataError
            );
            assert!(!last_error_string().is_empty());
            assert_eq!(cil_model_load(path.as_ptr(), &mut handle), CilStatus::CilOk);
            assert!(last_error_string().is_empty());
            cil_model_free(handle);
        }
    }

    #[test]
    fn header_is_generated_with_the_exported_names() {
        let header = std::fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cil.h"),
        )
        .unwrap();
        for name in [
            "cil_last_error",
            "cil_model_load",
            "cil_model_free",
            "cil_model_num_tasks",
            "cil_model_seen_classes",
            "cil_model_input_len",
            "cil_model_predict",
            "cil_run_experiment",
            "CilStatus",
            "CilPrediction",
            "CIL_H",
        ] {
            assert!(header.contains(name), "header lacks {name}");
        }
    }
}

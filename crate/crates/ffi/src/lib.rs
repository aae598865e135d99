//! C ABI surface for the forecasting toolkit; the build script regenerates
//! `include/stae.h` from this file.
//!
//! Every fallible call returns a status code and, on failure, stashes a
//! message retrievable through [`stae_last_error_message`]. Handles returned
//! through out-parameters are owned by the caller and must be released with
//! the matching `_free` function. Handles are not thread-safe; the error
//! message is thread-local.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use stae::data::{generate_synthetic, SyntheticConfig, TrafficDataset, WindowSet};
use stae::error::Error;
use stae::metrics::{evaluate, EvalConfig};
use stae::model::{load_checkpoint, Checkpoint, Model};
use stae::stts::{load_dataset, save_dataset};

pub const STAE_OK: c_int = 0;
/// The call was rejected before touching any data (bad argument or geometry).
pub const STAE_ERR_USAGE: c_int = 2;
/// A file or its contents could not be used.
pub const STAE_ERR_DATA: c_int = 3;
/// A computation produced a non-finite or otherwise unusable result.
pub const STAE_ERR_NUMERIC: c_int = 4;
/// A required pointer was null.
pub const STAE_ERR_NULL: c_int = -1;
/// An internal invariant failed; the library state is still consistent.
pub const STAE_ERR_PANIC: c_int = -2;

/// A loaded or generated traffic series.
pub struct StaeDataset(TrafficDataset);

/// A trained model together with its input scaler.
pub struct StaeModel(Checkpoint);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: Vec<u8> = msg.bytes().filter(|&b| b != 0).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(err: Error) -> c_int {
    let code = err.kind().exit_code();
    set_error(&err.to_string());
    code
}

fn guarded(body: impl FnOnce() -> c_int) -> c_int {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            STAE_ERR_PANIC
        }
    }
}

/// Copies the message from the most recent failure on this thread into
/// `buf` (NUL-terminated, truncated to `cap` bytes) and returns the full
/// message length in bytes, excluding the NUL. `buf` may be null when
/// `cap` is zero.
#[no_mangle]
pub extern "C" fn stae_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast(), n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Returns the library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, c_int> {
    if ptr.is_null() {
        set_error("path pointer is null");
        return Err(STAE_ERR_NULL);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(STAE_ERR_USAGE)
        }
    }
}

macro_rules! deref {
    ($ptr:expr) => {
        match unsafe { $ptr.as_ref() } {
            Some(v) => v,
            None => {
                set_error(concat!(stringify!($ptr), " is null"));
                return STAE_ERR_NULL;
            }
        }
    };
}

// ── datasets ──

/// Generates a seeded synthetic series; see the CLI `gen-data` command for
/// the meaning of the knobs. On success stores a new handle in `*out`.
#[no_mangle]
pub extern "C" fn stae_dataset_generate(
    seed: u64,
    nodes: usize,
    steps: usize,
    clusters: usize,
    noise_std: f64,
    out: *mut *mut StaeDataset,
) -> c_int {
    guarded(|| {
        if out.is_null() {
            set_error("out pointer is null");
            return STAE_ERR_NULL;
        }
        let cfg = SyntheticConfig {
            nodes,
            steps,
            clusters,
            noise_std,
            seed,
            ..Default::default()
        };
        match generate_synthetic(&cfg) {
            Ok(ds) => {
                unsafe { *out = Box::into_raw(Box::new(StaeDataset(ds))) };
                STAE_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Loads a `.stts` series from `path` into a new handle at `*out`.
#[no_mangle]
pub extern "C" fn stae_dataset_load(path: *const c_char, out: *mut *mut StaeDataset) -> c_int {
    guarded(|| {
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        if out.is_null() {
            set_error("out pointer is null");
            return STAE_ERR_NULL;
        }
        match load_dataset(path).and_then(|ds| ds.validate().map(|_| ds)) {
            Ok(ds) => {
                unsafe { *out = Box::into_raw(Box::new(StaeDataset(ds))) };
                STAE_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Writes the series to `path` in `.stts` form (atomically).
#[no_mangle]
pub extern "C" fn stae_dataset_save(ds: *const StaeDataset, path: *const c_char) -> c_int {
    guarded(|| {
        let ds = deref!(ds);
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        match save_dataset(&ds.0, path) {
            Ok(()) => STAE_OK,
            Err(e) => fail(e),
        }
    })
}

/// Number of sensors in the series; zero when `ds` is null.
#[no_mangle]
pub extern "C" fn stae_dataset_nodes(ds: *const StaeDataset) -> usize {
    unsafe { ds.as_ref() }.map_or(0, |d| d.0.nodes)
}

/// Number of time steps in the series; zero when `ds` is null.
#[no_mangle]
pub extern "C" fn stae_dataset_steps(ds: *const StaeDataset) -> usize {
    unsafe { ds.as_ref() }.map_or(0, |d| d.0.steps())
}

/// Releases a dataset handle. Null is ignored.
#[no_mangle]
pub extern "C" fn stae_dataset_free(ds: *mut StaeDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

// ── models ──

/// Loads a checkpoint written by the CLI `train` command. `prefix` is the
/// path without the `.manifest`/`.blob` suffix.
#[no_mangle]
pub extern "C" fn stae_checkpoint_load(prefix: *const c_char, out: *mut *mut StaeModel) -> c_int {
    guarded(|| {
        let prefix = match path_arg(prefix) {
            Ok(p) => p,
            Err(code) => return code,
        };
        if out.is_null() {
            set_error("out pointer is null");
            return STAE_ERR_NULL;
        }
        match load_checkpoint(prefix) {
            Ok(ck) => {
                unsafe { *out = Box::into_raw(Box::new(StaeModel(ck))) };
                STAE_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Total number of trainable values; zero when `model` is null.
#[no_mangle]
pub extern "C" fn stae_model_parameter_count(model: *const StaeModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.0.model.params.total_values())
}

/// Input window length in frames; zero when `model` is null.
#[no_mangle]
pub extern "C" fn stae_model_input_len(model: *const StaeModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.0.model.config.input_len)
}

/// Prediction length in frames; zero when `model` is null.
#[no_mangle]
pub extern "C" fn stae_model_output_len(model: *const StaeModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.0.model.config.output_len)
}

/// Number of sensors the model was trained on; zero when `model` is null.
#[no_mangle]
pub extern "C" fn stae_model_nodes(model: *const StaeModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.0.model.config.nodes)
}

/// Releases a model handle. Null is ignored.
#[no_mangle]
pub extern "C" fn stae_model_free(model: *mut StaeModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

fn window_geometry(model: &Model, ds: &TrafficDataset) -> Result<(), Error> {
    if model.config.nodes != ds.nodes {
        return Err(Error::Contract(format!(
            "model expects {} nodes but the series has {}",
            model.config.nodes, ds.nodes
        )));
    }
    Ok(())
}

/// Predicts from the input window starting at step `start` of the series and
/// writes `output_len * nodes` readings (horizon-major, original units) into
/// `out`. `out_len` must be at least that product.
#[no_mangle]
pub extern "C" fn stae_predict(
    model: *const StaeModel,
    ds: *const StaeDataset,
    start: usize,
    out: *mut f64,
    out_len: usize,
) -> c_int {
    guarded(|| {
        let model = deref!(model);
        let ds = deref!(ds);
        if out.is_null() {
            set_error("out pointer is null");
            return STAE_ERR_NULL;
        }
        let ck = &model.0;
        let cfg = &ck.model.config;
        let needed = cfg.output_len * cfg.nodes;
        if out_len < needed {
            set_error(&format!("out buffer holds {out_len} values but {needed} are needed"));
            return STAE_ERR_USAGE;
        }
        let run = || -> Result<Vec<f64>, Error> {
            window_geometry(&ck.model, &ds.0)?;
            let ws = WindowSet::new(&ds.0, cfg.input_len, cfg.output_len)?;
            let batch = ws.batch(&[start], Some(&ck.normalizer))?;
            let pred = ck.model.predict(&batch, &ck.normalizer)?;
            Ok(pred.data().to_vec())
        };
        match run() {
            Ok(values) => {
                unsafe { std::ptr::copy_nonoverlapping(values.as_ptr(), out, needed) };
                STAE_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Evaluates the model over every window of the series and writes the
/// horizon-averaged masked errors to the non-null out-parameters.
#[no_mangle]
pub extern "C" fn stae_evaluate(
    model: *const StaeModel,
    ds: *const StaeDataset,
    mae: *mut f64,
    rmse: *mut f64,
    mape: *mut f64,
) -> c_int {
    guarded(|| {
        let model = deref!(model);
        let ds = deref!(ds);
        let ck = &model.0;
        let run = || -> Result<(f64, f64, f64), Error> {
            window_geometry(&ck.model, &ds.0)?;
            let ws = WindowSet::new(&ds.0, ck.model.config.input_len, ck.model.config.output_len)?;
            let report = evaluate(&ck.model, &ws, &ck.normalizer, &EvalConfig::default())?;
            Ok((report.mae, report.rmse, report.mape))
        };
        match run() {
            Ok((a, r, p)) => {
                unsafe {
                    if !mae.is_null() {
                        *mae = a;
                    }
                    if !rmse.is_null() {
                        *rmse = r;
                    }
                    if !mape.is_null() {
                        *mape = p;
                    }
                }
                STAE_OK
            }
            Err(e) => fail(e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use stae::data::Normalizer;
    use stae::model::{save_checkpoint, ModelConfig, Variant};
    use stae::transformer::AttentionScale;

    fn c_path(path: &Path) -> CString {
        CString::new(path.to_str().unwrap()).unwrap()
    }

    fn last_error() -> String {
        let needed = stae_last_error_message(std::ptr::null_mut(), 0);
        let mut buf = vec![0i8; needed + 1];
        stae_last_error_message(buf.as_mut_ptr().cast(), buf.len());
        unsafe { CStr::from_ptr(buf.as_ptr().cast()) }
            .to_str()
            .unwrap()
            .to_owned()
    }

    fn tiny_checkpoint(dir: &Path) -> CString {
        let cfg = ModelConfig {
            variant: Variant::Full,
            input_len: 4,
            output_len: 2,
            nodes: 3,
            feature_dim: 2,
            adaptive_dim: 2,
            heads: 2,
            layers: 1,
            ffn_dim: 8,
            dropout: 0.0,
            scale_mode: AttentionScale::PerHead,
        };
        let model = Model::new(cfg, 5).unwrap();
        let norm = Normalizer { mean: 40.0, std: 12.0 };
        let prefix = dir.join("model");
        save_checkpoint(&model, &norm, 1, &prefix).unwrap();
        c_path(&prefix)
    }

    #[test]
    fn dataset_roundtrip_through_the_c_surface() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds: *mut StaeDataset = std::ptr::null_mut();
        assert_eq!(stae_dataset_generate(9, 3, 60, 1, 0.5, &mut ds), STAE_OK);
        assert_eq!(stae_dataset_nodes(ds), 3);
        assert_eq!(stae_dataset_steps(ds), 60);

        let path = c_path(&dir.path().join("series.stts"));
        assert_eq!(stae_dataset_save(ds, path.as_ptr()), STAE_OK);

        let mut reloaded: *mut StaeDataset = std::ptr::null_mut();
        assert_eq!(stae_dataset_load(path.as_ptr(), &mut reloaded), STAE_OK);
        unsafe {
            assert_eq!((*ds).0.values, (*reloaded).0.values);
        }
        stae_dataset_free(ds);
        stae_dataset_free(reloaded);
    }

    #[test]
    fn null_and_missing_inputs_are_rejected_with_messages() {
        assert_eq!(
            stae_dataset_save(std::ptr::null(), std::ptr::null()),
            STAE_ERR_NULL
        );

        let mut ds: *mut StaeDataset = std::ptr::null_mut();
        let missing = CString::new("/nonexistent/series.stts").unwrap();
        assert_eq!(stae_dataset_load(missing.as_ptr(), &mut ds), STAE_ERR_DATA);
        assert!(last_error().contains("series.stts"), "{}", last_error());

        assert_eq!(stae_dataset_generate(1, 0, 10, 1, 0.0, &mut ds), STAE_ERR_USAGE);
    }

    #[test]
    fn predict_and_evaluate_run_against_a_saved_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = tiny_checkpoint(dir.path());

        let mut model: *mut StaeModel = std::ptr::null_mut();
        assert_eq!(stae_checkpoint_load(prefix.as_ptr(), &mut model), STAE_OK);
        assert_eq!(stae_model_input_len(model), 4);
        assert_eq!(stae_model_output_len(model), 2);
        assert_eq!(stae_model_nodes(model), 3);
        assert!(stae_model_parameter_count(model) > 0);

        let mut ds: *mut StaeDataset = std::ptr::null_mut();
        assert_eq!(stae_dataset_generate(9, 3, 60, 1, 0.5, &mut ds), STAE_OK);

        let mut out = vec![0.0f64; 2 * 3];
        assert_eq!(stae_predict(model, ds, 0, out.as_mut_ptr(), out.len()), STAE_OK);
        assert!(out.iter().all(|v| v.is_finite()));

        assert_eq!(
            stae_predict(model, ds, 0, out.as_mut_ptr(), 1),
            STAE_ERR_USAGE
        );
        assert_eq!(
            stae_predict(model, ds, 10_000, out.as_mut_ptr(), out.len()),
            STAE_ERR_USAGE
        );

        let (mut mae, mut rmse, mut mape) = (0.0, 0.0, 0.0);
        assert_eq!(stae_evaluate(model, ds, &mut mae, &mut rmse, &mut mape), STAE_OK);
        assert!(mae > 0.0 && rmse >= mae && mape > 0.0);

        stae_dataset_free(ds);
        stae_model_free(model);
    }

    #[test]
    fn node_count_mismatch_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = tiny_checkpoint(dir.path());
        let mut model: *mut StaeModel = std::ptr::null_mut();
        assert_eq!(stae_checkpoint_load(prefix.as_ptr(), &mut model), STAE_OK);

        let mut ds: *mut StaeDataset = std::ptr::null_mut();
        assert_eq!(stae_dataset_generate(9, 5, 60, 1, 0.5, &mut ds), STAE_OK);
        let mut out = vec![0.0f64; 2 * 5];
        assert_eq!(
            stae_predict(model, ds, 0, out.as_mut_ptr(), out.len()),
            STAE_ERR_USAGE
        );
        assert!(last_error().contains("nodes"), "{}", last_error());

        stae_dataset_free(ds);
        stae_model_free(model);
    }

    #[test]
    fn version_and_truncated_error_messages_are_well_formed() {
        let version = unsafe { CStr::from_ptr(stae_version()) };
        assert!(!version.to_str().unwrap().is_empty());

        set_error("0123456789");
        let mut buf = [0i8; 4];
        let full = stae_last_error_message(buf.as_mut_ptr().cast(), buf.len());
        assert_eq!(full, 10);
        let copied = unsafe { CStr::from_ptr(buf.as_ptr().cast()) };
        assert_eq!(copied.to_bytes(), b"012");
    }
}

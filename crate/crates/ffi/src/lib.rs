//! C ABI over the `ramen` library.
//!
//! Every fallible function returns a [`RamenStatus`]; on failure the
//! message is available from [`ramen_last_error`] on the same thread.
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `_free` function. Strings are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ramen::data::{generate_corpus, read_dataset, write_dataset, DataConfig, Dataset, TokenVocab};
use ramen::model::{Batch, RamenModel, RegionSet};
use ramen::run::{self, RunConfig};
use ramen::tensor::Real;
use ramen::train::{checkpoint_precision, load_checkpoint, lr_at_epoch, Precision, Schedule};
use ramen::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RamenStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Checkpoint = 5,
    Io = 6,
    InvalidUtf8 = 7,
    /// The call panicked; the handle it was given may be unusable.
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RamenStatus {
    match e {
        Error::Config(_) => RamenStatus::Config,
        Error::Data(_) | Error::Parse { .. } | Error::Json(_) => RamenStatus::Data,
        Error::Numeric(_) | Error::Tensor(_) => RamenStatus::Numeric,
        Error::Checkpoint(_) => RamenStatus::Checkpoint,
        Error::Io { .. } => RamenStatus::Io,
    }
}

enum Failure {
    Status(RamenStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(RamenStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, turning errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RamenStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RamenStatus::Ok
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            RamenStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(RamenStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn opt_text<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle pointer"));
    }
    // SAFETY: checked non-null; the caller provides writable storage.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ramen_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Short fixed description of a status code; never null.
#[no_mangle]
pub extern "C" fn ramen_status_name(status: RamenStatus) -> *const c_char {
    let s: &'static CStr = match status {
        RamenStatus::Ok => c"ok",
        RamenStatus::NullArgument => c"null argument",
        RamenStatus::Config => c"configuration error",
        RamenStatus::Data => c"data error",
        RamenStatus::Numeric => c"numeric failure",
        RamenStatus::Checkpoint => c"checkpoint error",
        RamenStatus::Io => c"i/o error",
        RamenStatus::InvalidUtf8 => c"invalid utf-8",
        RamenStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Learning rate of a 1-based epoch under the default schedule.
#[no_mangle]
pub extern "C" fn ramen_lr_at_epoch(epoch: u32) -> f64 {
    lr_at_epoch(&Schedule::default(), epoch as usize)
}

/// A question-answer corpus with its scenes.
pub struct RamenDataset {
    data: Dataset,
}

/// Generates a corpus. `config_json` holds a data configuration object
/// (null for the defaults).
///
/// # Safety
/// `config_json` is null or a valid string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ramen_dataset_generate(
    config_json: *const c_char,
    out: *mut *mut RamenDataset,
) -> RamenStatus {
    guard(|| {
        let cfg: DataConfig = match opt_text(config_json, "config_json")? {
            Some(s) => serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?,
            None => DataConfig::default(),
        };
        let (data, _) = generate_corpus(&cfg)?;
        store(out, RamenDataset { data })
    })
}

/// Reads a corpus directory written by `gen-data` or
/// [`ramen_dataset_write`].
///
/// # Safety
/// `dir` is a valid string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ramen_dataset_read(dir: *const c_char, out: *mut *mut RamenDataset) -> RamenStatus {
    guard(|| {
        let dir = PathBuf::from(text(dir, "dir")?);
        store(
            out,
            RamenDataset {
                data: read_dataset(&dir)?,
            },
        )
    })
}

/// # Safety
/// `dataset` is a live handle; `dir` is a valid string.
#[no_mangle]
pub unsafe extern "C" fn ramen_dataset_write(dataset: *const RamenDataset, dir: *const c_char) -> RamenStatus {
    guard(|| {
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let dir = PathBuf::from(text(dir, "dir")?);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        write_dataset(&dir, &ds.data, None)?;
        Ok(())
    })
}

/// Number of question-answer items; 0 for a null handle.
///
/// # Safety
/// `dataset` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ramen_dataset_num_items(dataset: *const RamenDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.data.items.len())
}

/// Number of scenes; 0 for a null handle.
///
/// # Safety
/// `dataset` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ramen_dataset_num_scenes(dataset: *const RamenDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.data.scenes.len())
}

/// Number of items whose stored answer disagrees with the answer oracle.
///
/// # Safety
/// `dataset` is a live handle; `out_mismatches` is writable.
#[no_mangle]
pub unsafe extern "C" fn ramen_dataset_validate(
    dataset: *const RamenDataset,
    out_mismatches: *mut usize,
) -> RamenStatus {
    guard(|| {
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let out = out_mismatches.as_mut().ok_or_else(|| null("out_mismatches"))?;
        *out = ds.data.validate_answers()?.len();
        Ok(())
    })
}

/// # Safety
/// `dataset` is null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ramen_dataset_free(dataset: *mut RamenDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

enum AnyModel {
    F32(RamenModel<f32>),
    F64(RamenModel<f64>),
}

/// A trained model loaded from a checkpoint, with its answer vocabulary.
pub struct RamenModelHandle {
    model: AnyModel,
    answers: Vec<CString>,
    tokens: TokenVocab,
}

fn loaded<T: Real>(path: &std::path::Path) -> Result<(RamenModel<T>, Vec<String>), Failure> {
    let ckpt = load_checkpoint::<T>(path, None)?;
    let mut model = ckpt.model;
    model.set_training(false);
    Ok((model, ckpt.vocab.answers.clone()))
}

/// Loads a checkpoint written by `train`, in evaluation mode.
///
/// # Safety
/// `path` is a valid string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ramen_model_load(path: *const c_char, out: *mut *mut RamenModelHandle) -> RamenStatus {
    guard(|| {
        let path = PathBuf::from(text(path, "path")?);
        let (model, answers) = match checkpoint_precision(&path)? {
            Precision::F32 => {
                let (m, a) = loaded::<f32>(&path)?;
                (AnyModel::F32(m), a)
            }
            Precision::F64 => {
                let (m, a) = loaded::<f64>(&path)?;
                (AnyModel::F64(m), a)
            }
        };
        let answers = answers
            .into_iter()
            .map(|a| CString::new(a).map_err(|_| Error::Checkpoint("answer holds a NUL byte".into())))
            .collect::<Result<_, _>>()?;
        store(
            out,
            RamenModelHandle {
                model,
                answers,
                tokens: TokenVocab::new(),
            },
        )
    })
}

/// Size of the answer vocabulary; 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ramen_model_num_answers(model: *const RamenModelHandle) -> usize {
    model.as_ref().map_or(0, |m| m.answers.len())
}

/// Width of one region vector the model expects (visual + spatial).
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ramen_model_region_dim(model: *const RamenModelHandle) -> usize {
    model.as_ref().map_or(0, |m| match &m.model {
        AnyModel::F32(x) => x.config.region_dim(),
        AnyModel::F64(x) => x.config.region_dim(),
    })
}

/// Answer string for an index; null when out of range. Owned by the
/// handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ramen_model_answer(model: *const RamenModelHandle, index: usize) -> *const c_char {
    model
        .as_ref()
        .and_then(|m| m.answers.get(index))
        .map_or(ptr::null(), |a| a.as_ptr())
}

fn predict_one<T: Real>(model: &RamenModel<T>, set: &RegionSet, tokens: Vec<usize>) -> Result<usize, Failure> {
    let batch = Batch::<T>::new(&[set], vec![tokens])?;
    Ok(model.predict(&batch)?[0])
}

/// Answers one question about one image. `regions` holds `num_regions`
/// row-major vectors of the model's region width. The question is
/// lowercased and `?` dropped before tokenizing.
///
/// # Safety
/// `model` is a live handle; `regions` points to
/// `num_regions * region_dim` floats; `question` is a valid string;
/// `out_index` is writable.
#[no_mangle]
pub unsafe extern "C" fn ramen_model_predict(
    model: *const RamenModelHandle,
    regions: *const f32,
    num_regions: usize,
    question: *const c_char,
    out_index: *mut usize,
) -> RamenStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if regions.is_null() {
            return Err(null("regions"));
        }
        let out = out_index.as_mut().ok_or_else(|| null("out_index"))?;
        let dim = ramen_model_region_dim(m);
        let values = std::slice::from_raw_parts(regions, num_regions * dim).to_vec();
        let set = RegionSet::new(num_regions, dim, values)?;
        let q = text(question, "question")?.to_lowercase().replace('?', " ");
        let tokens = m.tokens.encode(&q);
        *out = match &m.model {
            AnyModel::F32(x) => predict_one(x, &set, tokens)?,
            AnyModel::F64(x) => predict_one(x, &set, tokens)?,
        };
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ramen_model_free(model: *mut RamenModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn run_config(config_json: *const c_char) -> Result<RunConfig, Failure> {
    // SAFETY: forwarded from the caller's contract.
    match unsafe { opt_text(config_json, "config_json") }? {
        Some(s) => Ok(serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?),
        None => Ok(RunConfig::default()),
    }
}

/// Trains one model as the `train` command does, writing checkpoints, the
/// learning curve and `report.json` to `out_dir`. `out_best_val` (may be
/// null) receives the best validation accuracy.
///
/// # Safety
/// `config_json` is null or a valid string holding a run configuration;
/// `out_dir` is a valid string; `out_best_val` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn ramen_train(
    config_json: *const c_char,
    out_dir: *const c_char,
    out_best_val: *mut f64,
) -> RamenStatus {
    guard(|| {
        let cfg = run_config(config_json)?;
        cfg.validate()?;
        let dir = PathBuf::from(text(out_dir, "out_dir")?);
        let rep = run::train_command(&cfg, &dir, false)?;
        if let Some(v) = out_best_val.as_mut() {
            *v = rep.best_val;
        }
        Ok(())
    })
}

/// Finite-difference check of every op and model gradient. `out_passed`
/// receives 1 when every check passed, else 0; `out_worst` (may be null)
/// the largest relative error seen.
///
/// # Safety
/// `out_passed` is writable; `out_worst` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn ramen_grad_check(seed: u64, out_passed: *mut i32, out_worst: *mut f64) -> RamenStatus {
    guard(|| {
        let passed = out_passed.as_mut().ok_or_else(|| null("out_passed"))?;
        let summary = run::grad_check(seed)?;
        *passed = i32::from(summary.passed);
        if let Some(w) = out_worst.as_mut() {
            *w = summary.reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        }
        Ok(())
    })
}

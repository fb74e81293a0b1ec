//! C ABI for the sktune library.
//!
//! Objects cross the boundary as opaque handles created and released by this
//! library; every fallible call returns an [`SkStatus`] and leaves a message
//! for [`sk_last_error`]. Handles are not thread-safe: confine each handle to
//! one thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use sktune::cli::{load_model_bundle, save_model_bundle, ModelBundle, PretrainArgs};
use sktune::data::{self, Example, TaskKind, Vocab};
use sktune::error::Error;
use sktune::model::ModelConfig;
use sktune::peft::{MethodSpec, PeftMethod};
use sktune::tensor::Tape;
use sktune::train::{self, Hyperparams};

/// Status code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkStatus {
    SkOk = 0,
    SkNullArgument = 1,
    SkIoError = 2,
    SkInvalidArgument = 3,
    SkNumericError = 4,
    SkUtf8Error = 5,
    SkPanic = 6,
}

/// Frozen model plus its vocabulary.
pub struct SkModel {
    bundle: ModelBundle,
}

/// A configured PEFT method bound to a task.
pub struct SkMethod {
    method: PeftMethod,
    task: TaskKind,
}

/// An in-memory dataset of supervised examples.
pub struct SkDataset {
    examples: Vec<Example>,
}

/// Scalar results of one training run.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SkTrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    /// First step whose loss fell below the threshold, or -1.
    pub convergence_step: i64,
    pub accuracy: f64,
    pub f1: f64,
    pub trainable_count: usize,
    pub params_pct: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(cleaned).unwrap();
    });
}

fn status_of(err: &Error) -> SkStatus {
    match err {
        Error::Io(_) => SkStatus::SkIoError,
        Error::NonFinite { .. } => SkStatus::SkNumericError,
        _ => SkStatus::SkInvalidArgument,
    }
}

fn run<F: FnOnce() -> Result<(), SkStatus>>(f: F) -> SkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SkStatus::SkOk,
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("internal panic");
            SkStatus::SkPanic
        }
    }
}

fn fail(err: Error) -> SkStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, SkStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(SkStatus::SkNullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        SkStatus::SkUtf8Error
    })
}

unsafe fn deref<'a, T>(ptr: *const T) -> Result<&'a T, SkStatus> {
    ptr.as_ref().ok_or_else(|| {
        set_error("null handle");
        SkStatus::SkNullArgument
    })
}

/// Message describing the most recent failure on this thread. Valid until
/// the next failing call.
#[no_mangle]
pub extern "C" fn sk_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn sk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Pretrain a reference-configuration model on the bundled synthetic
/// language. The returned handle must be released with `sk_model_free`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sk_model_pretrain(
    seed: u64,
    steps: usize,
    lr: f64,
    out: *mut *mut SkModel,
) -> SkStatus {
    run(|| {
        if out.is_null() {
            set_error("null out pointer");
            return Err(SkStatus::SkNullArgument);
        }
        let config = ModelConfig { seed, ..ModelConfig::reference() };
        let args = PretrainArgs::default();
        let corpus = data::synthetic_lm_corpus(config.vocab_size, args.corpus_seqs, args.corpus_len, seed);
        let model = sktune::model::pretrain(&config, &corpus, steps, lr).map_err(fail)?;
        let bundle = ModelBundle { model, vocab: Vocab::desk() };
        *out = Box::into_raw(Box::new(SkModel { bundle }));
        Ok(())
    })
}

/// Load a model checkpoint written by `sk_model_save` or the CLI.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sk_model_load(path: *const c_char, out: *mut *mut SkModel) -> SkStatus {
    run(|| {
        if out.is_null() {
            set_error("null out pointer");
            return Err(SkStatus::SkNullArgument);
        }
        let path = PathBuf::from(read_str(path)?);
        let bundle = load_model_bundle(&path).map_err(fail)?;
        *out = Box::into_raw(Box::new(SkModel { bundle }));
        Ok(())
    })
}

/// Write the model checkpoint (byte-deterministic SKT1 JSON).
///
/// # Safety
/// `model` must be a live handle and `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn sk_model_save(model: *const SkModel, path: *const c_char) -> SkStatus {
    run(|| {
        let model = deref(model)?;
        let path = PathBuf::from(read_str(path)?);
        save_model_bundle(Path::new(&path), &model.bundle.model, &model.bundle.vocab).map_err(fail)
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sk_model_free(model: *mut SkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Build a method over the model. `method` is one of full, prompt, prefix,
/// ptuning, lora2, lora4, sk-prompt, sk-prefix; `task` is seqcls, tokcls or
/// nli; `prompt` may be null for non-SK methods.
///
/// # Safety
/// Pointer arguments must be valid; `out` receives an owned handle.
#[no_mangle]
pub unsafe extern "C" fn sk_method_new(
    model: *const SkModel,
    method: *const c_char,
    task: *const c_char,
    prompt: *const c_char,
    seed: u64,
    out: *mut *mut SkMethod,
) -> SkStatus {
    run(|| {
        if out.is_null() {
            set_error("null out pointer");
            return Err(SkStatus::SkNullArgument);
        }
        let model = deref(model)?;
        let spec = MethodSpec::parse(read_str(method)?).map_err(fail)?;
        let task = TaskKind::parse(read_str(task)?).map_err(fail)?;
        let prompt_ids = if prompt.is_null() {
            Vec::new()
        } else {
            model.bundle.vocab.tokenize(read_str(prompt)?)
        };
        let built = PeftMethod::build(&model.bundle.model, &spec, task, &prompt_ids, seed)
            .map_err(fail)?;
        *out = Box::into_raw(Box::new(SkMethod { method: built, task }));
        Ok(())
    })
}

/// # Safety
/// `method` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sk_method_free(method: *mut SkMethod) {
    if !method.is_null() {
        drop(Box::from_raw(method));
    }
}

/// Exact trainable-parameter count and percentage for a method.
///
/// # Safety
/// Handles must be live; out pointers may be null to skip a field.
#[no_mangle]
pub unsafe extern "C" fn sk_method_trainable(
    model: *const SkModel,
    method: *const SkMethod,
    count: *mut usize,
    pct: *mut f64,
) -> SkStatus {
    run(|| {
        let model = deref(model)?;
        let method = deref(method)?;
        if !count.is_null() {
            *count = method.method.trainable_count();
        }
        if !pct.is_null() {
            *pct = method.method.params_percentage(&model.bundle.model);
        }
        Ok(())
    })
}

/// Generate `n` deterministic synthetic examples for a task.
///
/// # Safety
/// Pointer arguments must be valid.
#[no_mangle]
pub unsafe extern "C" fn sk_dataset_synthetic(
    model: *const SkModel,
    task: *const c_char,
    n: usize,
    seed: u64,
    out: *mut *mut SkDataset,
) -> SkStatus {
    run(|| {
        if out.is_null() {
            set_error("null out pointer");
            return Err(SkStatus::SkNullArgument);
        }
        let model = deref(model)?;
        let task = TaskKind::parse(read_str(task)?).map_err(fail)?;
        let examples = data::gen_synthetic(task, n, seed, &model.bundle.vocab);
        *out = Box::into_raw(Box::new(SkDataset { examples }));
        Ok(())
    })
}

/// Load a JSONL dataset with the model's vocabulary.
///
/// # Safety
/// Pointer arguments must be valid.
#[no_mangle]
pub unsafe extern "C" fn sk_dataset_load_jsonl(
    model: *const SkModel,
    task: *const c_char,
    path: *const c_char,
    out: *mut *mut SkDataset,
) -> SkStatus {
    run(|| {
        if out.is_null() {
            set_error("null out pointer");
            return Err(SkStatus::SkNullArgument);
        }
        let model = deref(model)?;
        let task = TaskKind::parse(read_str(task)?).map_err(fail)?;
        let path = PathBuf::from(read_str(path)?);
        let examples = data::load_jsonl(&path, task, &model.bundle.vocab).map_err(fail)?;
        *out = Box::into_raw(Box::new(SkDataset { examples }));
        Ok(())
    })
}

/// Number of examples in the dataset; 0 for a null handle.
///
/// # Safety
/// `ds` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sk_dataset_len(ds: *const SkDataset) -> usize {
    ds.as_ref().map(|d| d.examples.len()).unwrap_or(0)
}

/// # Safety
/// `ds` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sk_dataset_free(ds: *mut SkDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Train the method in place. `eval_set` may be null to evaluate on the
/// training set. The frozen model is never modified.
///
/// # Safety
/// Handles must be live; `summary` may be null.
#[no_mangle]
pub unsafe extern "C" fn sk_train(
    model: *const SkModel,
    method: *mut SkMethod,
    train_set: *const SkDataset,
    eval_set: *const SkDataset,
    lr: f64,
    epochs: usize,
    batch: usize,
    seed: u64,
    threshold: f64,
    summary: *mut SkTrainSummary,
) -> SkStatus {
    run(|| {
        let model = deref(model)?;
        let method = deref(method as *const SkMethod)?;
        let train_set = deref(train_set)?;
        let eval = eval_set.as_ref().map(|d| d.examples.as_slice());
        let hp = Hyperparams {
            lr,
            epochs,
            batch_size: batch,
            seed,
            loss_threshold: threshold,
            ..Hyperparams::default()
        };
        let run = train::train(&model.bundle.model, &method.method, &train_set.examples, eval, &hp)
            .map_err(fail)?;
        if !summary.is_null() {
            *summary = SkTrainSummary {
                steps: run.losses.len(),
                final_loss: run.losses.last().copied().unwrap_or(f64::NAN),
                convergence_step: run.convergence_step.map(|s| s as i64).unwrap_or(-1),
                accuracy: run.metrics.accuracy,
                f1: run.metrics.f1,
                trainable_count: run.trainable_count,
                params_pct: run.trainable_pct,
            };
        }
        Ok(())
    })
}

/// Accuracy and F1 of the method over a dataset.
///
/// # Safety
/// Handles must be live; out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn sk_evaluate(
    model: *const SkModel,
    method: *const SkMethod,
    ds: *const SkDataset,
    accuracy: *mut f64,
    f1: *mut f64,
) -> SkStatus {
    run(|| {
        let model = deref(model)?;
        let method = deref(method)?;
        let ds = deref(ds)?;
        let report = train::evaluate(&model.bundle.model, &method.method, &ds.examples).map_err(fail)?;
        if !accuracy.is_null() {
            *accuracy = report.accuracy;
        }
        if !f1.is_null() {
            *f1 = report.f1;
        }
        Ok(())
    })
}

/// Class logits for one whitespace-tokenized text. Sequence and entailment
/// heads write `classes` values; token heads write `classes` per token.
/// `written` receives the number of values produced.
///
/// # Safety
/// Handles and strings must be valid; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sk_logits(
    model: *const SkModel,
    method: *const SkMethod,
    text: *const c_char,
    out: *mut f64,
    out_len: usize,
    written: *mut usize,
) -> SkStatus {
    run(|| {
        let model = deref(model)?;
        let method = deref(method)?;
        let ids = model.bundle.vocab.tokenize(read_str(text)?);
        let tape = Tape::new();
        let logits = method
            .method
            .forward(&model.bundle.model, &tape, &ids)
            .map_err(fail)?;
        let values = logits.to_vec();
        if out.is_null() || out_len < values.len() {
            set_error(&format!("output buffer needs {} doubles", values.len()));
            return Err(SkStatus::SkInvalidArgument);
        }
        std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
        if !written.is_null() {
            *written = values.len();
        }
        let _ = method.task;
        Ok(())
    })
}

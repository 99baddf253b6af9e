//! C interface to `remede-core`.
//!
//! Models and datasets are opaque handles created by the library and
//! released with the matching `*_free` function. Every fallible call returns
//! a [`RemedeStatus`]; on failure [`remede_last_error`] describes the problem
//! for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use remede::datagen::{self, GenConfig, SequenceExample, Task};
use remede::diffcore::Tensor;
use remede::eval;
use remede::remede::{Checkpoint, RemedeCell};
use remede::training::{self, TrainConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemedeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Training = 5,
    Panic = 6,
}

/// Trained model.
pub struct RemedeModel {
    cell: RemedeCell,
    seed: u64,
    task: Option<Task>,
}

/// In-memory dataset.
pub struct RemedeDataset {
    data: Vec<SequenceExample>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("nul bytes removed"));
}

struct Failure(RemedeStatus, String);

fn fail<T>(status: RemedeStatus, message: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, message.into()))
}

fn guard<F>(f: F) -> RemedeStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RemedeStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RemedeStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return fail(RemedeStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(s)
        .to_str()
        .or_else(|_| fail(RemedeStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .map_or_else(|| fail(RemedeStatus::NullPointer, format!("{what} is null")), Ok)
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return fail(RemedeStatus::NullPointer, "output pointer is null");
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message for the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn remede_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Generates `n_sequences` sequences of `task` (`"poc1"` .. `"poc5"`) with
/// the default task parameters.
///
/// # Safety
/// `task` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn remede_dataset_generate(
    task: *const c_char,
    seed: u64,
    n_sequences: usize,
    out: *mut *mut RemedeDataset,
) -> RemedeStatus {
    guard(|| {
        let task: Task = read_str(task, "task")?
            .parse()
            .or_else(|e: datagen::DataError| fail(RemedeStatus::InvalidArgument, e.to_string()))?;
        let cfg = GenConfig {
            n_sequences,
            seed,
            ..GenConfig::default()
        };
        let data = datagen::generate_dataset(task, &cfg)
            .or_else(|e| fail(RemedeStatus::InvalidArgument, e.to_string()))?;
        store(out, RemedeDataset { data })
    })
}

/// Reads a JSONL dataset.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn remede_dataset_load(path: *const c_char, out: *mut *mut RemedeDataset) -> RemedeStatus {
    guard(|| {
        let path = read_str(path, "path")?;
        let data = datagen::read_jsonl(Path::new(path)).or_else(|e| match e {
            datagen::DataError::Io(io) => fail(RemedeStatus::Io, io.to_string()),
            other => fail(RemedeStatus::Parse, other.to_string()),
        })?;
        store(out, RemedeDataset { data })
    })
}

/// Number of sequences; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn remede_dataset_len(dataset: *const RemedeDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.data.len())
}

/// # Safety
/// `dataset` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn remede_dataset_free(dataset: *mut RemedeDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Splits `dataset` 80/20 by `seed`, trains a depth-6 tree with a
/// five-dimensional memory on the training part and returns the model.
/// `test_accuracy` (optional) receives the held-out accuracy.
///
/// # Safety
/// `dataset` must be a live handle, `out` a valid pointer and
/// `test_accuracy` null or valid.
#[no_mangle]
pub unsafe extern "C" fn remede_model_train(
    dataset: *const RemedeDataset,
    learning_rate: f64,
    seed: u64,
    max_epochs: usize,
    out: *mut *mut RemedeModel,
    test_accuracy: *mut f64,
) -> RemedeStatus {
    guard(|| {
        let data = &deref(dataset, "dataset")?.data;
        let Some(first) = data.first() else {
            return fail(RemedeStatus::InvalidArgument, "dataset is empty");
        };
        let cfg = TrainConfig {
            learning_rate,
            seed,
            max_epochs,
            ..TrainConfig::default()
        };
        let train_err = |e: training::TrainError| Failure(RemedeStatus::Training, e.to_string());
        cfg.validate()
            .map_err(|e| Failure(RemedeStatus::InvalidArgument, e.to_string()))?;
        let split = training::trial_split(data, seed).map_err(train_err)?;
        let cell = training::init_cell(first.input_dim(), &split.train, &cfg).map_err(train_err)?;
        let result = training::fit(cell, &split.train, &split.valid, &cfg).map_err(train_err)?;
        if !test_accuracy.is_null() {
            *test_accuracy = eval::evaluate_model(&result.cell, &split.test)
                .or_else(|e| fail(RemedeStatus::Training, e.to_string()))?;
        }
        store(
            out,
            RemedeModel {
                cell: result.cell,
                seed,
                task: Some(first.task),
            },
        )
    })
}

/// Reads a JSON checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn remede_model_load(path: *const c_char, out: *mut *mut RemedeModel) -> RemedeStatus {
    guard(|| {
        let path = read_str(path, "path")?;
        let text = std::fs::read_to_string(path).or_else(|e| fail(RemedeStatus::Io, format!("{path}: {e}")))?;
        let ck = Checkpoint::from_json(&text).or_else(|e| fail(RemedeStatus::Parse, e.to_string()))?;
        let cell = ck.to_cell().or_else(|e| fail(RemedeStatus::Parse, e.to_string()))?;
        store(
            out,
            RemedeModel {
                cell,
                seed: ck.seed,
                task: ck.task_id,
            },
        )
    })
}

/// Writes the model as a JSON checkpoint.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn remede_model_save(model: *const RemedeModel, path: *const c_char) -> RemedeStatus {
    guard(|| {
        let model = deref(model, "model")?;
        let path = read_str(path, "path")?;
        let ck = Checkpoint::from_cell(&model.cell, model.seed, model.task);
        std::fs::write(path, ck.to_json()).or_else(|e| fail(RemedeStatus::Io, format!("{path}: {e}")))
    })
}

/// Input width the model expects.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn remede_model_input_dim(model: *const RemedeModel) -> usize {
    model.as_ref().map_or(0, |m| m.cell.dims.n_x)
}

/// Predicts targets in `{-1, 0, 1}` for one sequence of `len` steps stored
/// row-major in `inputs` (`len * n_x` values). Writes `len` values to
/// `targets`.
///
/// # Safety
/// `inputs` must hold `len * n_x` doubles and `targets` room for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn remede_model_predict(
    model: *const RemedeModel,
    inputs: *const f64,
    len: usize,
    n_x: usize,
    targets: *mut i8,
) -> RemedeStatus {
    guard(|| {
        let model = deref(model, "model")?;
        if inputs.is_null() || targets.is_null() {
            return fail(RemedeStatus::NullPointer, "inputs or targets is null");
        }
        if n_x != model.cell.dims.n_x {
            return fail(
                RemedeStatus::InvalidArgument,
                format!("model expects {} input columns, got {n_x}", model.cell.dims.n_x),
            );
        }
        if len == 0 {
            return fail(RemedeStatus::InvalidArgument, "empty sequence");
        }
        let values = std::slice::from_raw_parts(inputs, len * n_x).to_vec();
        let seq = SequenceExample {
            task: model.task.unwrap_or(Task::Poc1),
            inputs: Tensor::new(vec![len, n_x], values)
                .or_else(|e| fail(RemedeStatus::InvalidArgument, e.to_string()))?,
            targets: vec![0; len],
        };
        let classes = model
            .cell
            .predict(&seq)
            .or_else(|e| fail(RemedeStatus::InvalidArgument, e.to_string()))?;
        let out = std::slice::from_raw_parts_mut(targets, len);
        for (o, c) in out.iter_mut().zip(classes) {
            *o = datagen::class_to_target(c);
        }
        Ok(())
    })
}

/// Elementwise accuracy of the model over `dataset`.
///
/// # Safety
/// Handles must be live and `accuracy` valid.
#[no_mangle]
pub unsafe extern "C" fn remede_model_evaluate(
    model: *const RemedeModel,
    dataset: *const RemedeDataset,
    accuracy: *mut f64,
) -> RemedeStatus {
    guard(|| {
        let model = deref(model, "model")?;
        let data = &deref(dataset, "dataset")?.data;
        if accuracy.is_null() {
            return fail(RemedeStatus::NullPointer, "accuracy is null");
        }
        *accuracy = eval::evaluate_model(&model.cell, data).or_else(|e| fail(RemedeStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

/// Node count of the tree pruned against `dataset`.
///
/// # Safety
/// Handles must be live and `size` valid.
#[no_mangle]
pub unsafe extern "C" fn remede_model_pruned_size(
    model: *const RemedeModel,
    dataset: *const RemedeDataset,
    size: *mut usize,
) -> RemedeStatus {
    guard(|| {
        let model = deref(model, "model")?;
        let data = &deref(dataset, "dataset")?.data;
        if size.is_null() {
            return fail(RemedeStatus::NullPointer, "size is null");
        }
        *size = model
            .cell
            .prune(data)
            .or_else(|e| fail(RemedeStatus::InvalidArgument, e.to_string()))?
            .size();
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn remede_model_free(model: *mut RemedeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

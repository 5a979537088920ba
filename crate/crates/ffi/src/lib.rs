//! C ABI over the `acorl` library.
//!
//! Models and datasets are opaque handles created by `*_load` and released by
//! the matching `*_free`. Every fallible function returns an [`AcorlStatus`];
//! on failure the message is available from [`acorl_last_error`] on the same
//! thread until the next failing call. Status values other than
//! `ACORL_STATUS_INTERNAL` and `ACORL_STATUS_NULL_POINTER` match the CLI exit
//! codes.
//!
//! All buffers are caller-owned, row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use acorl::data::{read_dataset, Dataset};
use acorl::metrics::{eer, integrated_gradients, top1_accuracy, Selector};
use acorl::nn::{Head, Mlp};
use acorl::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcorlStatus {
    Ok = 0,
    Config = 2,
    Data = 3,
    Contract = 4,
    NullPointer = 5,
    Internal = 6,
}

/// Opaque model handle.
pub struct AcorlModel(Mlp);

/// Opaque dataset handle.
pub struct AcorlDataset(Dataset);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> AcorlStatus {
    match err.exit_code() {
        2 => AcorlStatus::Config,
        3 => AcorlStatus::Data,
        _ => AcorlStatus::Contract,
    }
}

#[derive(Debug)]
enum Failure {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Run `f`, translating errors and panics into a status plus last-error text.
fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> AcorlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AcorlStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            AcorlStatus::NullPointer
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            AcorlStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn to_path(ptr: *const c_char) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure::Lib(Error::Config("path is not valid UTF-8".into())))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const AcorlModel) -> Result<&'a Mlp, Failure> {
    m.as_ref().map(|m| &m.0).ok_or(Failure::Null("model"))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(what));
    }
    *out = value;
    Ok(())
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn acorl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn acorl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a model checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn acorl_model_load(path: *const c_char, out: *mut *mut AcorlModel) -> AcorlStatus {
    guard(|| {
        let p = to_path(path)?;
        let model = acorl::checkpoint::load_model(&p)?;
        write_out(out, Box::into_raw(Box::new(AcorlModel(model))), "out")
    })
}

/// Save a model to a checkpoint file.
///
/// # Safety
/// `model` must come from [`acorl_model_load`]; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn acorl_model_save(model: *const AcorlModel, path: *const c_char) -> AcorlStatus {
    guard(|| {
        let m = model_ref(model)?;
        Ok(acorl::checkpoint::save_model(m, &to_path(path)?)?)
    })
}

/// Release a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`acorl_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn acorl_model_free(model: *mut AcorlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acorl_model_input_dim(model: *const AcorlModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.spec().input_dim)
}

/// Representation width, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acorl_model_repr_dim(model: *const AcorlModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.spec().repr_dim)
}

/// Width of the task output: the number of classes for classifiers, the
/// representation width for embedding models. 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acorl_model_output_dim(model: *const AcorlModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.spec().output_dim())
}

/// 1 when the model has an embedding head, 0 otherwise.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acorl_model_is_embedding(model: *const AcorlModel) -> i32 {
    model
        .as_ref()
        .map_or(0, |m| i32::from(matches!(m.0.spec().head, Head::Embedding { .. })))
}

unsafe fn forward(
    model: *const AcorlModel,
    inputs: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
    representation: bool,
) -> AcorlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = m.spec().input_dim;
        let x = slice(inputs, rows * d, "inputs")?;
        let y = m.predict(&Tensor::matrix(rows, d, x.to_vec())?)?;
        let t = if representation { y.representation } else { y.task_out };
        if out_len != t.numel() {
            return Err(Error::Contract(format!("output buffer holds {out_len} values, {} needed", t.numel())).into());
        }
        slice_mut(out, out_len, "out")?.copy_from_slice(t.data());
        Ok(())
    })
}

/// Task output (logits or unit embeddings) for `rows` inputs of width
/// `input_dim`; `out_len` must equal `rows * output_dim`.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn acorl_model_forward(
    model: *const AcorlModel,
    inputs: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> AcorlStatus {
    forward(model, inputs, rows, out, out_len, false)
}

/// Representation for `rows` inputs; `out_len` must equal `rows * repr_dim`.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn acorl_model_representation(
    model: *const AcorlModel,
    inputs: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> AcorlStatus {
    forward(model, inputs, rows, out, out_len, true)
}

/// Load a CSV dataset into `*out`.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn acorl_dataset_load(path: *const c_char, out: *mut *mut AcorlDataset) -> AcorlStatus {
    guard(|| {
        let data = read_dataset(&to_path(path)?)?;
        write_out(out, Box::into_raw(Box::new(AcorlDataset(data))), "out")
    })
}

/// Release a dataset. NULL is ignored.
///
/// # Safety
/// `data` must come from [`acorl_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn acorl_dataset_free(data: *mut AcorlDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Number of rows, or 0 for NULL.
///
/// # Safety
/// `data` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acorl_dataset_rows(data: *const AcorlDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

/// Feature width, or 0 for NULL.
///
/// # Safety
/// `data` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acorl_dataset_dim(data: *const AcorlDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.dim)
}

/// Copy features (`rows * dim` doubles) and labels (`rows` values) out. Either
/// destination may be NULL to skip it.
///
/// # Safety
/// Non-NULL buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn acorl_dataset_copy(
    data: *const AcorlDataset,
    features: *mut f64,
    features_len: usize,
    labels: *mut u64,
    labels_len: usize,
) -> AcorlStatus {
    guard(|| {
        let d = &data.as_ref().ok_or(Failure::Null("data"))?.0;
        if !features.is_null() {
            if features_len != d.features.len() {
                return Err(Error::Contract(format!("features buffer holds {features_len}, {} needed", d.features.len())).into());
            }
            slice_mut(features, features_len, "features")?.copy_from_slice(&d.features);
        }
        if !labels.is_null() {
            if labels_len != d.len() {
                return Err(Error::Contract(format!("labels buffer holds {labels_len}, {} needed", d.len())).into());
            }
            for (o, &l) in slice_mut(labels, labels_len, "labels")?.iter_mut().zip(&d.labels) {
                *o = l as u64;
            }
        }
        Ok(())
    })
}

/// Equal error rate of `n` scores; `genuine[i]` is nonzero for genuine trials.
/// `threshold` may be NULL.
///
/// # Safety
/// `scores` and `genuine` must hold `n` elements; `out_eer` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acorl_eer(
    scores: *const f64,
    genuine: *const u8,
    n: usize,
    out_eer: *mut f64,
    out_threshold: *mut f64,
) -> AcorlStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let g: Vec<bool> = slice(genuine, n, "genuine")?.iter().map(|&v| v != 0).collect();
        let r = eer(s, &g)?;
        write_out(out_eer, r.eer, "out_eer")?;
        if !out_threshold.is_null() {
            *out_threshold = r.threshold;
        }
        Ok(())
    })
}

/// Top-1 accuracy of `rows × cols` logits against `labels`.
///
/// # Safety
/// `logits` must hold `rows * cols` doubles and `labels` `rows` values.
#[no_mangle]
pub unsafe extern "C" fn acorl_top1_accuracy(
    logits: *const f64,
    rows: usize,
    cols: usize,
    labels: *const u64,
    out: *mut f64,
) -> AcorlStatus {
    guard(|| {
        let l = Tensor::matrix(rows, cols, slice(logits, rows * cols, "logits")?.to_vec())?;
        let y: Vec<usize> = slice(labels, rows, "labels")?.iter().map(|&v| v as usize).collect();
        write_out(out, top1_accuracy(&l, &y)?, "out")
    })
}

#[allow(clippy::too_many_arguments)]
unsafe fn ig(
    model: *const AcorlModel,
    selector: Selector,
    x: *const f64,
    baseline: *const f64,
    steps: usize,
    out: *mut f64,
    out_gap: *mut f64,
) -> Result<(), Failure> {
    let m = model_ref(model)?;
    let d = m.spec().input_dim;
    let (values, gap, _) = integrated_gradients(m, &selector, slice(x, d, "x")?, slice(baseline, d, "baseline")?, steps)?;
    slice_mut(out, d, "out")?.copy_from_slice(&values);
    if !out_gap.is_null() {
        *out_gap = gap;
    }
    Ok(())
}

/// Integrated gradients of a class logit. `x`, `baseline` and `out` hold
/// `input_dim` doubles; `out_gap` (nullable) receives the completeness gap.
///
/// # Safety
/// Buffers must hold `input_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn acorl_ig_class(
    model: *const AcorlModel,
    class_index: usize,
    x: *const f64,
    baseline: *const f64,
    steps: usize,
    out: *mut f64,
    out_gap: *mut f64,
) -> AcorlStatus {
    guard(|| ig(model, Selector::ClassLogit(class_index), x, baseline, steps, out, out_gap))
}

/// Integrated gradients of the cosine between the embedding and `reference`
/// (`repr_dim` doubles).
///
/// # Safety
/// `reference` must hold `repr_dim` doubles; the other buffers `input_dim`.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn acorl_ig_cosine(
    model: *const AcorlModel,
    reference: *const f64,
    reference_len: usize,
    x: *const f64,
    baseline: *const f64,
    steps: usize,
    out: *mut f64,
    out_gap: *mut f64,
) -> AcorlStatus {
    guard(|| {
        let r = slice(reference, reference_len, "reference")?.to_vec();
        ig(model, Selector::CosineTo(r), x, baseline, steps, out, out_gap)
    })
}

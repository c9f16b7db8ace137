//! C ABI over `nested_factor`.
//!
//! Every fallible function returns an [`NfStatus`]; on failure a message is
//! available from [`nf_last_error_message`] on the same thread. Datasets and
//! models are opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nested_factor::data::{read_container, DataError, DomainDataset};
use nested_factor::metrics::{self, MetricsError};
use nested_factor::nested::{load_model, ModelError, SavedModel};
use nested_factor::tensor::Tensor;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Model = 5,
    Metrics = 6,
    Panic = 7,
}

/// A dataset container loaded in memory.
pub struct NfDataset {
    inner: DomainDataset,
}

/// A trained model loaded from a checkpoint.
pub struct NfModel {
    inner: SavedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(NfStatus, String);

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure(NfStatus::Metrics, e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let status = match e {
            DataError::Io { .. } => NfStatus::Io,
            DataError::Format { .. } => NfStatus::Format,
            _ => NfStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure(NfStatus::Model, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(NfStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            NfStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(NfStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `n` readable values.
unsafe fn slice<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or a nul-terminated string.
unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn nf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn nf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `scores` must point to `n` doubles and `out` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn nf_adjusted_parity(
    scores: *const f64,
    n: usize,
    out: *mut f64,
) -> NfStatus {
    guard(|| {
        non_null(out, "out")?;
        let s = slice(scores, n, "scores")?;
        *out = metrics::adjusted_parity(s)?;
        Ok(())
    })
}

/// # Safety
/// `out` must point to one writable double.
#[no_mangle]
pub unsafe extern "C" fn nf_normalize_score(acc: f64, n_classes: usize, out: *mut f64) -> NfStatus {
    guard(|| {
        non_null(out, "out")?;
        if n_classes < 2 || !(0.0..=1.0).contains(&acc) {
            return Err(invalid(format!(
                "need acc in [0, 1] and n_classes >= 2, got {acc} and {n_classes}"
            )));
        }
        *out = metrics::normalize_score(acc, n_classes);
        Ok(())
    })
}

/// # Safety
/// `pred` and `truth` must point to `n` values; `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn nf_macro_f1(
    pred: *const usize,
    truth: *const usize,
    n: usize,
    n_classes: usize,
    out: *mut f64,
) -> NfStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = metrics::macro_f1(
            slice(pred, n, "pred")?,
            slice(truth, n, "truth")?,
            n_classes,
        )?;
        Ok(())
    })
}

/// Accuracy of 2-means change detection on row distances between two
/// row-major `n × dim` embedding sets.
///
/// # Safety
/// `a` and `b` must point to `n * dim` doubles, `changed` to `n` bytes and
/// `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn nf_change_detection_accuracy(
    a: *const f64,
    b: *const f64,
    n: usize,
    dim: usize,
    changed: *const u8,
    out: *mut f64,
) -> NfStatus {
    guard(|| {
        non_null(out, "out")?;
        let len = n
            .checked_mul(dim)
            .ok_or_else(|| invalid("n * dim overflows"))?;
        let ta = Tensor::new(vec![n, dim], slice(a, len, "a")?.to_vec())
            .map_err(|e| invalid(e.to_string()))?;
        let tb = Tensor::new(vec![n, dim], slice(b, len, "b")?.to_vec())
            .map_err(|e| invalid(e.to_string()))?;
        *out = metrics::change_detection_accuracy(&ta, &tb, slice(changed, n, "changed")?)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nf_dataset_load(
    path: *const c_char,
    out: *mut *mut NfDataset,
) -> NfStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = read_container(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(NfDataset { inner }));
        Ok(())
    })
}

/// Number of items, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nf_dataset_len(ds: *const NfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `ds` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn nf_dataset_item_shape(
    ds: *const NfDataset,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> NfStatus {
    guard(|| {
        let d = ds
            .as_ref()
            .ok_or_else(|| Failure(NfStatus::NullPointer, "dataset is null".into()))?;
        for (p, name) in [(channels, "channels"), (height, "height"), (width, "width")] {
            non_null(p, name)?;
        }
        (*channels, *height, *width) = d.inner.item_shape();
        Ok(())
    })
}

/// Copies class and domain labels into caller buffers of `len` items each;
/// `len` must equal the dataset length. Either buffer may be null.
///
/// # Safety
/// `ds` must be a live handle; non-null buffers must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn nf_dataset_labels(
    ds: *const NfDataset,
    class_out: *mut i32,
    domain_out: *mut i32,
    len: usize,
) -> NfStatus {
    guard(|| {
        let d = &ds
            .as_ref()
            .ok_or_else(|| Failure(NfStatus::NullPointer, "dataset is null".into()))?
            .inner;
        if len != d.len() {
            return Err(invalid(format!(
                "buffer holds {len} items, dataset has {}",
                d.len()
            )));
        }
        if !class_out.is_null() {
            std::slice::from_raw_parts_mut(class_out, len).copy_from_slice(&d.class_labels);
        }
        if !domain_out.is_null() {
            std::slice::from_raw_parts_mut(domain_out, len).copy_from_slice(&d.domain_labels);
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from [`nf_dataset_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn nf_dataset_free(ds: *mut NfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nf_model_load(path: *const c_char, out: *mut *mut NfModel) -> NfStatus {
    guard(|| {
        non_null(out, "out")?;
        let (inner, _) = load_model(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(NfModel { inner }));
        Ok(())
    })
}

fn embedding_dim(m: &SavedModel) -> usize {
    match m {
        SavedModel::Nested(n) => n.config.nested_dim,
        SavedModel::BetaVae(b) => b.config.latent_dim,
    }
}

/// Width of the representation returned by the embed functions.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nf_model_embedding_dim(
    model: *const NfModel,
    out: *mut usize,
) -> NfStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| Failure(NfStatus::NullPointer, "model is null".into()))?;
        non_null(out, "out")?;
        *out = embedding_dim(&m.inner);
        Ok(())
    })
}

fn embed_into(m: &SavedModel, x: &Tensor, out: *mut f64, out_len: usize) -> Result<(), Failure> {
    let need = x.shape()[0] * embedding_dim(m);
    if out_len != need {
        return Err(invalid(format!(
            "output holds {out_len} values, need {need}"
        )));
    }
    let e = m.representation(x)?;
    if need > 0 {
        non_null(out, "out")?;
        // SAFETY: the caller guarantees `out` holds `out_len` doubles.
        unsafe { std::slice::from_raw_parts_mut(out, need) }.copy_from_slice(e.data());
    }
    Ok(())
}

/// Embeds `n` row-major images of the model's input shape into `out`
/// (`n × embedding_dim` doubles).
///
/// # Safety
/// `images` must hold `n · C · H · W` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn nf_model_embed(
    model: *const NfModel,
    images: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> NfStatus {
    guard(|| {
        let m = &model
            .as_ref()
            .ok_or_else(|| Failure(NfStatus::NullPointer, "model is null".into()))?
            .inner;
        let img = m.config().image;
        let len = n * img.channels * img.height * img.width;
        let x = Tensor::new(
            vec![n, img.channels, img.height, img.width],
            slice(images, len, "images")?.to_vec(),
        )
        .map_err(|e| invalid(e.to_string()))?;
        embed_into(m, &x, out, out_len)
    })
}

/// Embeds every item of a dataset.
///
/// # Safety
/// Both handles must be live and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn nf_model_embed_dataset(
    model: *const NfModel,
    ds: *const NfDataset,
    out: *mut f64,
    out_len: usize,
) -> NfStatus {
    guard(|| {
        let m = &model
            .as_ref()
            .ok_or_else(|| Failure(NfStatus::NullPointer, "model is null".into()))?
            .inner;
        let d = &ds
            .as_ref()
            .ok_or_else(|| Failure(NfStatus::NullPointer, "dataset is null".into()))?
            .inner;
        let img = m.config().image;
        if d.item_shape() != (img.channels, img.height, img.width) {
            return Err(invalid(format!(
                "dataset items are {:?}, model expects {}x{}x{}",
                d.item_shape(),
                img.channels,
                img.height,
                img.width
            )));
        }
        embed_into(m, &d.images, out, out_len)
    })
}

/// # Safety
/// `model` must be null or a handle from [`nf_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn nf_model_free(model: *mut NfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

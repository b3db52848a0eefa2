//! C ABI over `atx_core`.
//!
//! Every fallible function returns an [`AtxStatus`]. On failure the message is
//! kept per thread and can be copied out with [`atx_last_error_message`].
//! Models and manifests cross the boundary as opaque handles that the caller
//! releases with the matching `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use atx_core::attention::{attention_loss, AttentionTap, DEFAULT_NORM_EPS};
use atx_core::data::{load_manifest, split_by_patient, DatasetManifest, SplitSizes};
use atx_core::metrics::{mean_multilabel_auc, roc_auc, weighted_f1};
use atx_core::model::Model;
use atx_core::tensor::Tensor;
use atx_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AtxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Parse = 5,
    Checkpoint = 6,
    NonFinite = 7,
    Metric = 8,
    Config = 9,
    Training = 10,
    Panic = 11,
    Other = 12,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> AtxStatus {
    match e {
        Error::Shape { .. } => AtxStatus::Shape,
        Error::InvalidArgument(_) => AtxStatus::InvalidArgument,
        Error::NonFinite(_) => AtxStatus::NonFinite,
        Error::Parse { .. } | Error::Csv(_) | Error::Json(_) => AtxStatus::Parse,
        Error::Image { .. } | Error::Io { .. } => AtxStatus::Io,
        Error::Checkpoint { .. } => AtxStatus::Checkpoint,
        Error::Config(_) => AtxStatus::Config,
        Error::Metric(_) => AtxStatus::Metric,
        Error::TrainingAborted { .. } => AtxStatus::Training,
        _ => AtxStatus::Other,
    }
}

struct Fail(AtxStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AtxStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic for [`atx_last_error_message`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AtxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            AtxStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AtxStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail(AtxStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(AtxStatus::InvalidArgument, msg.into())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length in bytes,
/// excluding the terminator.
#[no_mangle]
pub unsafe extern "C" fn atx_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn atx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Learning rate halved every `period` epochs.
#[no_mangle]
pub extern "C" fn atx_lr_schedule(epoch: usize, base_lr: f64, period: usize) -> f64 {
    atx_core::train::lr_schedule(epoch, base_lr, period)
}

/// ROC-AUC of `n` scores against 0/1 labels.
#[no_mangle]
pub unsafe extern "C" fn atx_roc_auc(scores: *const f64, labels: *const u8, n: usize, auc: *mut f64) -> AtxStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let l: Vec<bool> = slice(labels, n, "labels")?.iter().map(|&b| b != 0).collect();
        *out(auc, "auc")? = roc_auc(s, &l)?;
        Ok(())
    })
}

/// Unweighted mean of per-class AUCs. `scores` and `labels` are row-major
/// `[n_samples, n_classes]`.
#[no_mangle]
pub unsafe extern "C" fn atx_mean_multilabel_auc(
    scores: *const f64,
    labels: *const u8,
    n_samples: usize,
    n_classes: usize,
    mean_auc: *mut f64,
) -> AtxStatus {
    guard(|| {
        let len = n_samples.checked_mul(n_classes).ok_or_else(|| invalid("size overflow"))?;
        let s = slice(scores, len, "scores")?;
        let l: Vec<bool> = slice(labels, len, "labels")?.iter().map(|&b| b != 0).collect();
        *out(mean_auc, "mean_auc")? = mean_multilabel_auc(s, &l, n_classes)?.mean;
        Ok(())
    })
}

/// Support-weighted F1 of predicted against true class indices.
#[no_mangle]
pub unsafe extern "C" fn atx_weighted_f1(
    predicted: *const u32,
    truth: *const u32,
    n: usize,
    n_classes: usize,
    f1: *mut f64,
) -> AtxStatus {
    guard(|| {
        let p: Vec<usize> = slice(predicted, n, "predicted")?.iter().map(|&v| v as usize).collect();
        let t: Vec<usize> = slice(truth, n, "truth")?.iter().map(|&v| v as usize).collect();
        *out(f1, "f1")? = weighted_f1(&p, &t, n_classes)?;
        Ok(())
    })
}

/// Attention-transfer loss between two `[n, c, h, w]` activation tensors.
#[no_mangle]
pub unsafe extern "C" fn atx_attention_loss(
    student: *const f64,
    teacher: *const f64,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    loss: *mut f64,
) -> AtxStatus {
    guard(|| {
        let shape = [n, c, h, w];
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| invalid("size overflow"))?;
        let s = Tensor::new(&shape, slice(student, len, "student")?.to_vec())?;
        let t = Tensor::new(&shape, slice(teacher, len, "teacher")?.to_vec())?;
        *out(loss, "loss")? = attention_loss(&AttentionTap::student(s)?, &AttentionTap::teacher(t)?, DEFAULT_NORM_EPS)?;
        Ok(())
    })
}

/// Opaque model handle.
pub struct AtxModel(Model);

/// Loads a checkpoint in evaluation mode.
#[no_mangle]
pub unsafe extern "C" fn atx_model_load(path: *const c_char, model: *mut *mut AtxModel) -> AtxStatus {
    guard(|| {
        let slot = out(model, "model")?;
        *slot = ptr::null_mut();
        let (mut m, _) = Model::from_checkpoint(&path_arg(path)?)?;
        m.set_training(false);
        *slot = Box::into_raw(Box::new(AtxModel(m)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn atx_model_free(model: *mut AtxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn model_ref<'a>(m: *const AtxModel) -> Result<&'a Model, Fail> {
    m.as_ref().map(|m| &m.0).ok_or_else(|| null("model"))
}

#[no_mangle]
pub unsafe extern "C" fn atx_model_param_count(model: *const AtxModel, count: *mut usize) -> AtxStatus {
    guard(|| {
        *out(count, "count")? = model_ref(model)?.param_count();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn atx_model_num_classes(model: *const AtxModel, classes: *mut usize) -> AtxStatus {
    guard(|| {
        *out(classes, "classes")? = model_ref(model)?.config().num_classes;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn atx_model_in_channels(model: *const AtxModel, channels: *mut usize) -> AtxStatus {
    guard(|| {
        *out(channels, "channels")? = model_ref(model)?.config().in_channels;
        Ok(())
    })
}

/// Shape of the attention tap for an `height` x `width` input.
#[no_mangle]
pub unsafe extern "C" fn atx_model_attention_shape(
    model: *const AtxModel,
    height: usize,
    width: usize,
    c: *mut usize,
    h: *mut usize,
    w: *mut usize,
) -> AtxStatus {
    guard(|| {
        let (sc, sh, sw) = model_ref(model)?.attention_shape(height, width)?;
        *out(c, "c")? = sc;
        *out(h, "h")? = sh;
        *out(w, "w")? = sw;
        Ok(())
    })
}

/// Class probabilities for a normalised `[n, channels, height, width]`
/// batch. `probs` must hold `n * num_classes` values.
#[no_mangle]
pub unsafe extern "C" fn atx_model_predict(
    model: *const AtxModel,
    images: *const f32,
    n: usize,
    height: usize,
    width: usize,
    probs: *mut f64,
    probs_len: usize,
) -> AtxStatus {
    guard(|| {
        let m = model_ref(model)?;
        let shape = [n, m.config().in_channels, height, width];
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| invalid("size overflow"))?;
        let batch = Tensor::new(&shape, slice(images, len, "images")?.to_vec())?;
        let p = m.predict_proba(&batch)?;
        if probs_len < p.len() {
            return Err(invalid(format!("probs holds {probs_len} values, {} needed", p.len())));
        }
        if probs.is_null() {
            return Err(null("probs"));
        }
        ptr::copy_nonoverlapping(p.as_ptr(), probs, p.len());
        Ok(())
    })
}

/// Opaque dataset manifest handle.
pub struct AtxManifest(DatasetManifest);

#[no_mangle]
pub unsafe extern "C" fn atx_manifest_load(path: *const c_char, manifest: *mut *mut AtxManifest) -> AtxStatus {
    guard(|| {
        let slot = out(manifest, "manifest")?;
        *slot = ptr::null_mut();
        let m = load_manifest(&path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(AtxManifest(m)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn atx_manifest_free(manifest: *mut AtxManifest) {
    if !manifest.is_null() {
        drop(Box::from_raw(manifest));
    }
}

unsafe fn manifest_ref<'a>(m: *const AtxManifest) -> Result<&'a DatasetManifest, Fail> {
    m.as_ref().map(|m| &m.0).ok_or_else(|| null("manifest"))
}

#[no_mangle]
pub unsafe extern "C" fn atx_manifest_len(manifest: *const AtxManifest, len: *mut usize) -> AtxStatus {
    guard(|| {
        *out(len, "len")? = manifest_ref(manifest)?.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn atx_manifest_num_classes(manifest: *const AtxManifest, classes: *mut usize) -> AtxStatus {
    guard(|| {
        *out(classes, "classes")? = manifest_ref(manifest)?.num_classes();
        Ok(())
    })
}

/// Patient-level split by fractions. Writes the record counts of the train,
/// validation and test splits into `counts[0..3]`.
#[no_mangle]
pub unsafe extern "C" fn atx_manifest_split_counts(
    manifest: *const AtxManifest,
    train: f64,
    validation: f64,
    test: f64,
    seed: u64,
    counts: *mut usize,
) -> AtxStatus {
    guard(|| {
        let m = manifest_ref(manifest)?;
        let s = split_by_patient(m, SplitSizes::Fractions { train, validation, test }, seed)?;
        if counts.is_null() {
            return Err(null("counts"));
        }
        let c = std::slice::from_raw_parts_mut(counts, 3);
        c[0] = s.train_records.len();
        c[1] = s.validation_records.len();
        c[2] = s.test_records.len();
        Ok(())
    })
}

//! C ABI over `genlie-core`.
//!
//! Every fallible function returns a [`GenlieStatus`]; on failure the message
//! is available from [`genlie_last_error`] on the same thread. Handles are
//! opaque and must be released with their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use genlie_core::cues::{load_manifest, CorpusManifest};
use genlie_core::error::Error;
use genlie_core::metrics;
use genlie_core::model::{self, ModelParams};
use genlie_core::preprocess::{preprocess, PreprocessConfig, Strategy};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenlieStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Dimension = 6,
    UndefinedAuc = 7,
    BufferTooSmall = 8,
    OutOfRange = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenlieStrategy {
    Uniform = 0,
    Au = 1,
    MicroExpression = 2,
    Gaze = 3,
    Posture = 4,
    Fusion = 5,
}

impl From<GenlieStrategy> for Strategy {
    fn from(s: GenlieStrategy) -> Self {
        match s {
            GenlieStrategy::Uniform => Strategy::Uniform,
            GenlieStrategy::Au => Strategy::Au,
            GenlieStrategy::MicroExpression => Strategy::MicroExpression,
            GenlieStrategy::Gaze => Strategy::Gaze,
            GenlieStrategy::Posture => Strategy::Posture,
            GenlieStrategy::Fusion => Strategy::Fusion,
        }
    }
}

/// A loaded corpus manifest with its cue tracks.
pub struct GenlieCorpus {
    manifest: CorpusManifest,
}

/// Trained model parameters.
pub struct GenlieModel {
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> GenlieStatus {
    match e {
        Error::Io { .. } => GenlieStatus::Io,
        Error::Parse { .. } | Error::Schema { .. } | Error::Format { .. } | Error::OutOfRange { .. } | Error::Contiguity { .. } => GenlieStatus::Parse,
        Error::Dimension { .. } | Error::LengthMismatch { .. } => GenlieStatus::Dimension,
        Error::UndefinedAuc => GenlieStatus::UndefinedAuc,
        Error::LabelOutOfRange { .. } => GenlieStatus::OutOfRange,
        _ => GenlieStatus::Validation,
    }
}

enum Failure {
    Status(GenlieStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GenlieStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GenlieStatus::Ok,
        Ok(Err(Failure::Status(s, m))) => {
            set_error(m);
            s
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            GenlieStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(GenlieStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(GenlieStatus::InvalidUtf8, format!("{what} is not UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread. Valid until the next
/// call into the library from the same thread. Never null.
#[no_mangle]
pub extern "C" fn genlie_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `manifest_path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn genlie_corpus_load(manifest_path: *const c_char, out: *mut *mut GenlieCorpus) -> GenlieStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let manifest = load_manifest(path_arg(manifest_path, "manifest_path")?)?;
        *out = Box::into_raw(Box::new(GenlieCorpus { manifest }));
        Ok(())
    })
}

/// # Safety
/// `corpus` must come from [`genlie_corpus_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn genlie_corpus_free(corpus: *mut GenlieCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// # Safety
/// `corpus` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn genlie_corpus_len(corpus: *const GenlieCorpus, out: *mut usize) -> GenlieStatus {
    guard(|| {
        let c = corpus.as_ref().ok_or_else(|| null("corpus"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = c.manifest.len();
        Ok(())
    })
}

/// Selects frames for the `video_index`-th video (manifest order, sorted by
/// id). Writes the flat list of selected frame indices to `out_indices`.
/// `out_len` always receives the required length; when it exceeds
/// `capacity` nothing is written and `BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `out_indices` must hold `capacity` elements; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn genlie_select_frames(
    corpus: *const GenlieCorpus,
    video_index: usize,
    strategy: GenlieStrategy,
    n_segments: usize,
    frames_per_segment: usize,
    out_indices: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> GenlieStatus {
    guard(|| {
        let c = corpus.as_ref().ok_or_else(|| null("corpus"))?;
        let out_len = out_len.as_mut().ok_or_else(|| null("out_len"))?;
        let track = c.manifest.videos().get(video_index).ok_or_else(|| {
            Failure::Status(
                GenlieStatus::OutOfRange,
                format!("video index {video_index} out of range ({} videos)", c.manifest.len()),
            )
        })?;
        let cfg = PreprocessConfig {
            n_segments,
            frames_per_segment,
            strategy: strategy.into(),
            ..PreprocessConfig::default()
        };
        let selection = preprocess(track, &cfg)?;
        let flat: Vec<usize> = selection.all_indices().collect();
        *out_len = flat.len();
        if flat.len() > capacity {
            return Err(Failure::Status(
                GenlieStatus::BufferTooSmall,
                format!("{} indices do not fit in {capacity}", flat.len()),
            ));
        }
        if !flat.is_empty() {
            if out_indices.is_null() {
                return Err(null("out_indices"));
            }
            ptr::copy_nonoverlapping(flat.as_ptr(), out_indices, flat.len());
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn genlie_model_load(path: *const c_char, out: *mut *mut GenlieModel) -> GenlieStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let params = model::read_checkpoint(path_arg(path, "path")?, 0.0)?;
        *out = Box::into_raw(Box::new(GenlieModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`genlie_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn genlie_model_free(model: *mut GenlieModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn genlie_model_dims(
    model: *const GenlieModel,
    d: *mut usize,
    hidden: *mut usize,
    d_out: *mut usize,
    n_speakers: *mut usize,
) -> GenlieStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let dims = m.params.dims();
        for (p, v, name) in [
            (d, dims.d, "d"),
            (hidden, dims.hidden, "hidden"),
            (d_out, dims.d_out, "d_out"),
            (n_speakers, dims.n_speakers, "n_speakers"),
        ] {
            *p.as_mut().ok_or_else(|| null(name))? = v;
        }
        Ok(())
    })
}

/// Deceptive-class probability for one pooled segment feature.
///
/// # Safety
/// `pooled` must hold `len` values; `out_probability` must be valid.
#[no_mangle]
pub unsafe extern "C" fn genlie_model_predict(
    model: *const GenlieModel,
    pooled: *const f64,
    len: usize,
    use_reembedding: c_int,
    out_probability: *mut f64,
) -> GenlieStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out_probability.as_mut().ok_or_else(|| null("out_probability"))?;
        let x = slice_arg(pooled, len, "pooled")?;
        let d = m.params.dims().d;
        if x.len() != d {
            return Err(Error::Dimension {
                what: "pooled feature".into(),
                expected: d,
                found: x.len(),
            }
            .into());
        }
        let (z, _) = model::embed(&m.params, x, use_reembedding != 0)?;
        if z.len() != m.params.heads.embedding_dim() {
            return Err(Error::Dimension {
                what: "embedding for the classifier".into(),
                expected: m.params.heads.embedding_dim(),
                found: z.len(),
            }
            .into());
        }
        *out = genlie_core::heads::cls_probabilities(&[z], &m.params.heads)[0];
        Ok(())
    })
}

/// ROC AUC in percent.
///
/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn genlie_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> GenlieStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = metrics::auc(slice_arg(scores, n, "scores")?, slice_arg(labels, n, "labels")?)?;
        Ok(())
    })
}

/// Positive-class F1 in percent.
///
/// # Safety
/// `predictions` and `labels` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn genlie_f1(predictions: *const u8, labels: *const u8, n: usize, out: *mut f64) -> GenlieStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = metrics::f1_positive(slice_arg(predictions, n, "predictions")?, slice_arg(labels, n, "labels")?)?;
        Ok(())
    })
}

/// Accuracy in percent.
///
/// # Safety
/// `predictions` and `labels` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn genlie_accuracy(predictions: *const u8, labels: *const u8, n: usize, out: *mut f64) -> GenlieStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = metrics::accuracy(slice_arg(predictions, n, "predictions")?, slice_arg(labels, n, "labels")?)?;
        Ok(())
    })
}

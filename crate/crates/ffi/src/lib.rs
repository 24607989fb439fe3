//! C ABI over `ord2seq`.
//!
//! Every fallible function returns an [`Ord2SeqStatus`]. On failure a
//! human-readable message is kept per thread and can be copied out with
//! [`ord2seq_last_error`]. Trees and models are opaque handles that must be
//! released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use ord2seq::decoder;
use ord2seq::numerics::{Checkpoint, Tensor};
use ord2seq::training::TrainedModel;
use ord2seq::{CategoryId, DichotomicTree, Error, PathCode};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ord2SeqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidCategory = 3,
    Io = 4,
    Checkpoint = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// Opaque dichotomic tree.
pub struct Ord2SeqTree {
    inner: DichotomicTree,
}

/// Opaque trained model loaded from a checkpoint.
pub struct Ord2SeqModel {
    inner: TrainedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> Ord2SeqStatus {
    match err {
        Error::InvalidCategory { .. } => Ord2SeqStatus::InvalidCategory,
        Error::Io(_) => Ord2SeqStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => Ord2SeqStatus::Checkpoint,
        Error::InvalidCategoryCount(_)
        | Error::InvalidPath(_)
        | Error::InvalidPrefix { .. }
        | Error::Shape { .. }
        | Error::Config(_)
        | Error::Spec(_) => Ord2SeqStatus::InvalidArgument,
        _ => Ord2SeqStatus::Internal,
    }
}

struct Fail(Ord2SeqStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(Ord2SeqStatus::NullPointer, format!("{what} is null"))
}

fn too_small(need: usize, cap: usize) -> Fail {
    Fail(Ord2SeqStatus::BufferTooSmall, format!("buffer holds {cap} values, need {need}"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> Ord2SeqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            Ord2SeqStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            Ord2SeqStatus::Internal
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn write<T>(p: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(value);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ord2seq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap - 1` bytes) and returns the full message
/// length excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Builds the tree over `categories` ordered categories.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_tree_new(categories: usize, out: *mut *mut Ord2SeqTree) -> Ord2SeqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = DichotomicTree::build(categories)?;
        *out = Box::into_raw(Box::new(Ord2SeqTree { inner }));
        Ok(())
    })
}

/// # Safety
/// `tree` must be null or a handle from [`ord2seq_tree_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_tree_free(tree: *mut Ord2SeqTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// Tree depth, or 0 for a null handle.
///
/// # Safety
/// `tree` must be null or a live tree handle.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_tree_depth(tree: *const Ord2SeqTree) -> usize {
    tree.as_ref().map_or(0, |t| t.inner.depth())
}

/// Number of categories, or 0 for a null handle.
///
/// # Safety
/// `tree` must be null or a live tree handle.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_tree_categories(tree: *const Ord2SeqTree) -> usize {
    tree.as_ref().map_or(0, |t| t.inner.n())
}

/// Writes the depth-length bit path of `category` into `bits`.
///
/// # Safety
/// `tree` must be a live tree handle and `bits` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_tree_encode(
    tree: *const Ord2SeqTree,
    category: usize,
    bits: *mut u8,
    cap: usize,
) -> Ord2SeqStatus {
    guard(|| {
        let tree = &as_ref(tree, "tree")?.inner;
        let path = tree.encode_path(CategoryId(category))?;
        if cap < path.bits().len() {
            return Err(too_small(path.bits().len(), cap));
        }
        output(bits, cap, "bits")?[..path.bits().len()].copy_from_slice(path.bits());
        Ok(())
    })
}

/// Maps a bit path of length `len` back to its category.
///
/// # Safety
/// `tree` must be a live tree handle, `bits` must hold `len` bytes and
/// `category` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_tree_decode(
    tree: *const Ord2SeqTree,
    bits: *const u8,
    len: usize,
    category: *mut usize,
) -> Ord2SeqStatus {
    guard(|| {
        let tree = &as_ref(tree, "tree")?.inner;
        let path = PathCode::new(input(bits, len, "bits")?.to_vec())?;
        let c = tree.decode_path(&path)?;
        write(category, c.0, "category")
    })
}

/// Writes the `depth × categories` multi-hot matrix of `category`,
/// row-major, into `out`.
///
/// # Safety
/// `tree` must be a live tree handle and `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_tree_multihot(
    tree: *const Ord2SeqTree,
    category: usize,
    out: *mut f64,
    cap: usize,
) -> Ord2SeqStatus {
    guard(|| {
        let tree = &as_ref(tree, "tree")?.inner;
        let mh = tree.encode_multihot(CategoryId(category))?;
        let need = tree.depth() * tree.n();
        if cap < need {
            return Err(too_small(need, cap));
        }
        let out = output(out, cap, "out")?;
        for (dst, row) in out.chunks_mut(tree.n()).zip(mh.steps()) {
            dst.copy_from_slice(row);
        }
        Ok(())
    })
}

/// Masked sigmoid probabilities: `sigmoid(logits)` scaled by `alpha` where
/// `prev_multihot` is 0. Pass a null `prev_multihot` for the first step.
///
/// # Safety
/// `logits` and `out` must hold `n` doubles; `prev_multihot` must be null
/// or hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_apply_mask(
    logits: *const f64,
    prev_multihot: *const f64,
    n: usize,
    alpha: f64,
    out: *mut f64,
) -> Ord2SeqStatus {
    guard(|| {
        let z = input(logits, n, "logits")?;
        let prev = if prev_multihot.is_null() { None } else { Some(input(prev_multihot, n, "prev_multihot")?) };
        let p = decoder::apply_mask(z, prev, alpha)?;
        output(out, n, "out")?.copy_from_slice(&p);
        Ok(())
    })
}

/// Loads a model from a checkpoint file written by `ord2seq train`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_model_load(path: *const c_char, out: *mut *mut Ord2SeqModel) -> Ord2SeqStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(Ord2SeqStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = Checkpoint::load(Path::new(path))?;
        let inner = TrainedModel::from_checkpoint(&ck)?;
        *out = Box::into_raw(Box::new(Ord2SeqModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`ord2seq_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_model_free(model: *mut Ord2SeqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_model_categories(model: *const Ord2SeqModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.model.config().categories)
}

/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_model_feature_dim(model: *const Ord2SeqModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.model.config().feature_dim)
}

/// Mask factor the model decodes with.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_model_alpha(model: *const Ord2SeqModel) -> f64 {
    model.as_ref().map_or(f64::NAN, |m| m.inner.alpha)
}

/// Replaces the mask factor used for decoding; must lie in (0, 1].
///
/// # Safety
/// `model` must be a live model handle.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_model_set_alpha(model: *mut Ord2SeqModel, alpha: f64) -> Ord2SeqStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        decoder::validate_alpha(alpha)?;
        m.inner.alpha = alpha;
        Ok(())
    })
}

/// Predicts a category for each of `rows` feature vectors stored row-major
/// in `features` (`rows × feature_dim` doubles).
///
/// # Safety
/// `model` must be a live model handle, `features` must hold
/// `rows * feature_dim` doubles and `categories` must hold `rows` values.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_model_predict(
    model: *const Ord2SeqModel,
    features: *const f64,
    rows: usize,
    categories: *mut usize,
) -> Ord2SeqStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.inner;
        if rows == 0 {
            return Ok(());
        }
        let f = m.model.config().feature_dim;
        let x = Tensor::new(vec![rows, f], input(features, rows * f, "features")?.to_vec())?;
        let preds = m.predict(&x)?;
        for (dst, c) in output(categories, rows, "categories")?.iter_mut().zip(preds) {
            *dst = c.0;
        }
        Ok(())
    })
}

/// Greedy-decodes one feature vector. Writes the category, and if
/// `probs` is non-null the masked probabilities of every step
/// (`depth × categories` doubles, row-major).
///
/// # Safety
/// `model` must be a live model handle, `features` must hold `feature_dim`
/// doubles, `category` must be writable and `probs` must be null or hold
/// `probs_cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn ord2seq_model_decode(
    model: *const Ord2SeqModel,
    features: *const f64,
    category: *mut usize,
    probs: *mut f64,
    probs_cap: usize,
) -> Ord2SeqStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.inner;
        let x = input(features, m.model.config().feature_dim, "features")?;
        let encoded = decoder::encode_features(&m.model, x)?;
        let decoded = decoder::greedy_decode(&m.model, &encoded, m.alpha)?;
        if !probs.is_null() {
            let n = m.model.config().categories;
            let need = decoded.steps.len() * n;
            if probs_cap < need {
                return Err(too_small(need, probs_cap));
            }
            let out = output(probs, probs_cap, "probs")?;
            for (dst, step) in out.chunks_mut(n).zip(&decoded.steps) {
                dst.copy_from_slice(&step.y_prob);
            }
        }
        write(category, decoded.category.0, "category")
    })
}

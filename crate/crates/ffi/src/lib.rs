//! C ABI over the retrieval side of denoise-i2w: open a store and a trained
//! mapping, compose template queries and rank the store's images.
//!
//! Every function returns a [`Di2wStatus`]. On failure a message is kept per
//! thread and can be read with [`di2w_last_error_message`]. Handles are opaque
//! and must be released with their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use denoise_i2w::encoders::{Encoders, Template};
use denoise_i2w::eval::{compose_query, Gallery};
use denoise_i2w::pcm::{GradCheckConfig, GradCheckProblem, LossTerms, MappingParams, ObjectiveConfig};
use denoise_i2w::store::{normalize_slice, read_store, Store};
use denoise_i2w::trainer::Checkpoint;
use denoise_i2w::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Di2wStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    BadMagic = 4,
    UnsupportedVersion = 5,
    Truncated = 6,
    NonFinite = 7,
    DimensionMismatch = 8,
    ZeroNorm = 9,
    UnknownWord = 10,
    InvalidConfig = 11,
    Empty = 12,
    BufferTooSmall = 13,
    Internal = 14,
    Panic = 15,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Di2wTemplate {
    /// `a photo of [*]`
    Global = 0,
    /// `a photo of [*] , <words>`
    Compose = 1,
    /// `a <word> of [*]`
    Domain = 2,
    /// `a photo of [*] , w1 and w2 , and w3 ...`
    ObjectComposition = 3,
    /// `a photo of [*] , <words>` with the words as one sentence.
    Sentence = 4,
}

/// Store records plus a normalized gallery of their image embeddings.
pub struct Di2wStore {
    store: Store,
    gallery: Gallery,
}

/// Trained mapping network with the frozen text side it was trained against.
pub struct Di2wModel {
    params: MappingParams,
    encoders: Encoders,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(Di2wStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.kind() {
            "io" | "json" => Di2wStatus::Io,
            "bad_magic" => Di2wStatus::BadMagic,
            "unsupported_version" => Di2wStatus::UnsupportedVersion,
            "truncated" => Di2wStatus::Truncated,
            "non_finite" => Di2wStatus::NonFinite,
            "dimension_mismatch" => Di2wStatus::DimensionMismatch,
            "zero_norm" => Di2wStatus::ZeroNorm,
            "unknown_word" | "unknown_token" => Di2wStatus::UnknownWord,
            "invalid_config" | "invalid_template" | "batch_too_small" => Di2wStatus::InvalidConfig,
            "empty" => Di2wStatus::Empty,
            _ => Di2wStatus::Internal,
        };
        Failure(status, format!("{}: {e}", e.kind()))
    }
}

fn fail(status: Di2wStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> Di2wStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(String::new());
            Di2wStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside denoise-i2w".into());
            Di2wStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(Di2wStatus::NullPointer, format!("{what} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(Di2wStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(fail(Di2wStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(fail(Di2wStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(Di2wStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(Di2wStatus::NullPointer, format!("{what} is null")))
}

/// Message from the last call on this thread, empty after a success. The
/// pointer stays valid until the next call into this library on the thread.
#[no_mangle]
pub extern "C" fn di2w_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn di2w_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opens a `.di2w` store. On success `*out` owns a handle for
/// [`di2w_store_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn di2w_store_open(path: *const c_char, out: *mut *mut Di2wStore) -> Di2wStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let store = read_store(path_arg(path, "path")?)?;
        let images: Vec<_> = store.records().iter().map(|r| r.image.embedding.clone()).collect();
        let gallery = Gallery::new(&images)?;
        *out = Box::into_raw(Box::new(Di2wStore { store, gallery }));
        Ok(())
    })
}

/// # Safety
/// `store` must come from [`di2w_store_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn di2w_store_free(store: *mut Di2wStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of records and embedding dimension.
///
/// # Safety
/// `store` must be a live handle; `len` and `dim` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn di2w_store_info(store: *const Di2wStore, len: *mut usize, dim: *mut usize) -> Di2wStatus {
    guard(|| {
        let s = ref_arg(store, "store")?;
        *out_arg(len, "len")? = s.store.len();
        *out_arg(dim, "dim")? = s.store.dim();
        Ok(())
    })
}

/// Copies the image embedding of record `index` into `out[0..dim]`.
///
/// # Safety
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn di2w_store_image_embedding(
    store: *const Di2wStore,
    index: usize,
    out: *mut f64,
    out_len: usize,
) -> Di2wStatus {
    guard(|| {
        let s = ref_arg(store, "store")?;
        let rec = s.store.records().get(index).ok_or_else(|| {
            fail(
                Di2wStatus::InvalidArgument,
                format!("index {index} >= {}", s.store.len()),
            )
        })?;
        let v = rec.image.embedding.values();
        if out_len < v.len() {
            return Err(fail(Di2wStatus::BufferTooSmall, format!("need {} doubles", v.len())));
        }
        slice_mut_arg(out, out_len, "out")?[..v.len()].copy_from_slice(v);
        Ok(())
    })
}

/// Writes up to `k` record indices into `out`, by descending cosine similarity
/// to `query` with ties to the lower index, and their count into `written`.
///
/// # Safety
/// `query` must hold `query_len` doubles and `out` at least `k` entries.
#[no_mangle]
pub unsafe extern "C" fn di2w_rank(
    store: *const Di2wStore,
    query: *const f64,
    query_len: usize,
    k: usize,
    out: *mut usize,
    written: *mut usize,
) -> Di2wStatus {
    guard(|| {
        let s = ref_arg(store, "store")?;
        let q = slice_arg(query, query_len, "query")?;
        let written = out_arg(written, "written")?;
        *written = 0;
        let ranking = s.gallery.rank(q)?;
        let n = k.min(ranking.len());
        if n > 0 {
            slice_mut_arg(out, n, "out")?.copy_from_slice(&ranking[..n]);
        }
        *written = n;
        Ok(())
    })
}

/// Loads a training checkpoint and the encoders file it was trained with.
///
/// # Safety
/// Both paths must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn di2w_model_open(
    checkpoint_path: *const c_char,
    encoders_path: *const c_char,
    out: *mut *mut Di2wModel,
) -> Di2wStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let ck = Checkpoint::load(path_arg(checkpoint_path, "checkpoint_path")?)?;
        let encoders = Encoders::load(path_arg(encoders_path, "encoders_path")?)?;
        if ck.params.output_dim() != encoders.token_dim() {
            return Err(Error::DimensionMismatch {
                expected: encoders.token_dim(),
                got: ck.params.output_dim(),
                context: "checkpoint token dim vs encoders",
            }
            .into());
        }
        *out = Box::into_raw(Box::new(Di2wModel {
            params: ck.params,
            encoders,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`di2w_model_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn di2w_model_free(model: *mut Di2wModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image embedding dimension the model expects and the query dimension it
/// produces.
///
/// # Safety
/// `model` must be a live handle; outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn di2w_model_info(
    model: *const Di2wModel,
    input_dim: *mut usize,
    query_dim: *mut usize,
) -> Di2wStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        *out_arg(input_dim, "input_dim")? = m.params.input_dim();
        *out_arg(query_dim, "query_dim")? = m.encoders.out_dim();
        Ok(())
    })
}

fn template_for(kind: Di2wTemplate, words: &[&str], encoders: &Encoders) -> Result<Template, Failure> {
    let ids = encoders.vocab.encode_words(words)?;
    let need_words = |t: Template| {
        if ids.is_empty() {
            Err(fail(Di2wStatus::InvalidArgument, "template needs at least one word"))
        } else {
            Ok(t)
        }
    };
    match kind {
        Di2wTemplate::Global => Ok(Template::Global),
        Di2wTemplate::Compose => need_words(Template::Compose { caption: ids.clone() }),
        Di2wTemplate::Domain => match ids.as_slice() {
            [tag] => Ok(Template::Domain { tag: *tag }),
            _ => Err(fail(
                Di2wStatus::InvalidArgument,
                "domain template takes exactly one word",
            )),
        },
        Di2wTemplate::ObjectComposition => need_words(Template::ObjectComposition { tags: ids.clone() }),
        Di2wTemplate::Sentence => need_words(Template::Sentence { tokens: ids.clone() }),
    }
}

/// Maps `reference` to a pseudo word, places it in the template with the
/// space-separated `words` (may be null for the global template), encodes the
/// prompt and writes the unit-norm query into `out`.
///
/// # Safety
/// `reference` must hold `reference_len` doubles, `out` `out_len` doubles and
/// `words` must be null or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn di2w_compose_query(
    model: *const Di2wModel,
    reference: *const f64,
    reference_len: usize,
    template: Di2wTemplate,
    words: *const c_char,
    out: *mut f64,
    out_len: usize,
) -> Di2wStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let v_r = slice_arg(reference, reference_len, "reference")?;
        let text = if words.is_null() {
            ""
        } else {
            CStr::from_ptr(words)
                .to_str()
                .map_err(|_| fail(Di2wStatus::InvalidArgument, "words are not UTF-8"))?
        };
        let words: Vec<&str> = text.split_whitespace().collect();
        let t = template_for(template, &words, &m.encoders)?;
        let q = compose_query(&m.params, v_r, &t, &m.encoders)?;
        let v = q.values();
        if out_len < v.len() {
            return Err(fail(Di2wStatus::BufferTooSmall, format!("need {} doubles", v.len())));
        }
        slice_mut_arg(out, out_len, "out")?[..v.len()].copy_from_slice(v);
        Ok(())
    })
}

/// Scales `v` to unit L2 norm in place.
///
/// # Safety
/// `v` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn di2w_l2_normalize(v: *mut f64, len: usize) -> Di2wStatus {
    guard(|| {
        let v = slice_mut_arg(v, len, "v")?;
        let unit = normalize_slice(v)?;
        v.copy_from_slice(&unit);
        Ok(())
    })
}

/// Finite-difference check of the full objective's gradient on a random
/// problem. Writes the largest relative error and whether it is within
/// `tolerance`.
///
/// # Safety
/// `max_rel_err` and `passed` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn di2w_gradcheck(
    d: usize,
    token_dim: usize,
    batch: usize,
    seed: u64,
    h: f64,
    tolerance: f64,
    max_rel_err: *mut f64,
    passed: *mut bool,
) -> Di2wStatus {
    guard(|| {
        let max_rel_err = out_arg(max_rel_err, "max_rel_err")?;
        let passed = out_arg(passed, "passed")?;
        let prob = GradCheckProblem::random(d, token_dim, batch, seed)?;
        let cfg = GradCheckConfig {
            h,
            tolerance,
            ..GradCheckConfig::default()
        };
        let obj = ObjectiveConfig {
            terms: LossTerms::FULL,
            ..ObjectiveConfig::default()
        };
        let r = prob.check(&obj, &cfg)?;
        *max_rel_err = r.max_rel_err;
        *passed = r.passed;
        Ok(())
    })
}

//! C ABI over the unhate embedding index, metrics, response parser and
//! verdict store.
//!
//! Every fallible call returns an [`UnhateStatus`]; on failure the message
//! is available from [`unhate_last_error`] on the same thread. Objects are
//! opaque handles released with their matching `_free` function. Strings
//! handed to the caller are released with [`unhate_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use unhate::detector::{auroc, MetricsError};
use unhate::human_eval::{majority, Decision, EvalError, Status, VerdictRecord, VerdictStore, Q1, Q2};
use unhate::index::{EmbeddingIndex, Hit, IndexError, RicesConfig};
use unhate::model::{EmbeddingVector, Label, Split};
use unhate::prompt::parse_detection_response;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnhateStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    BadFormat = 4,
    DimMismatch = 5,
    EmptyIndex = 6,
    InsufficientExamples = 7,
    Parse = 8,
    SingleClass = 9,
    Duplicate = 10,
    NotFound = 11,
    NotAssigned = 12,
    Eval = 13,
    Panic = 99,
}

struct Failure(UnhateStatus, String);

impl Failure {
    fn new(status: UnhateStatus, msg: impl Into<String>) -> Self {
        Failure(status, msg.into())
    }
}

impl From<IndexError> for Failure {
    fn from(e: IndexError) -> Self {
        let status = match &e {
            IndexError::DimMismatch { .. } => UnhateStatus::DimMismatch,
            IndexError::EmptyIndex => UnhateStatus::EmptyIndex,
            IndexError::InsufficientClassExamples { .. } | IndexError::MissingClassTag(_) => UnhateStatus::InsufficientExamples,
            IndexError::DuplicateId(_) => UnhateStatus::Duplicate,
            IndexError::Io(_) => UnhateStatus::Io,
            IndexError::BadMagic(_)
            | IndexError::VersionMismatch(_)
            | IndexError::TruncatedFile
            | IndexError::TrailingBytes(_)
            | IndexError::BadClassTag(_)
            | IndexError::BadUtf8 => UnhateStatus::BadFormat,
            _ => UnhateStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let status = match &e {
            EvalError::DuplicateVerdict { .. } => UnhateStatus::Duplicate,
            EvalError::UnknownVariant(_) => UnhateStatus::NotFound,
            EvalError::NotAssigned { .. } => UnhateStatus::NotAssigned,
            EvalError::Io(_) => UnhateStatus::Io,
            EvalError::Corrupt { .. } => UnhateStatus::BadFormat,
            _ => UnhateStatus::Eval,
        };
        Failure(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> UnhateStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            UnhateStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            UnhateStatus::Panic
        }
    }
}

fn null() -> Failure {
    Failure::new(UnhateStatus::NullPointer, "null pointer argument")
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(UnhateStatus::InvalidArgument, "string is not UTF-8"))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(null)
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(null)
}

unsafe fn handle_mut<'a, T>(p: *mut T) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(null)
}

fn owned_string(s: &str) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

fn label_of(code: u8) -> Result<Label, Failure> {
    match code {
        0 => Ok(Label::NonHateful),
        1 => Ok(Label::Hateful),
        _ => Err(Failure::new(UnhateStatus::InvalidArgument, format!("label code {code}"))),
    }
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn unhate_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn unhate_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn unhate_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opaque embedding index.
pub struct UnhateIndex(EmbeddingIndex);

/// Opaque ranked hit list.
pub struct UnhateHits {
    ids: Vec<CString>,
    similarities: Vec<f64>,
}

impl UnhateHits {
    fn from_hits(hits: Vec<Hit>) -> Box<Self> {
        Box::new(UnhateHits {
            ids: hits.iter().map(|h| CString::new(h.id.clone()).unwrap_or_default()).collect(),
            similarities: hits.iter().map(|h| h.similarity).collect(),
        })
    }
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn unhate_index_new(dim: usize, out: *mut *mut UnhateIndex) -> UnhateStatus {
    guard(|| {
        let out = out_arg(out)?;
        if dim == 0 {
            return Err(Failure::new(UnhateStatus::InvalidArgument, "dim must be positive"));
        }
        *out = Box::into_raw(Box::new(UnhateIndex(EmbeddingIndex::new(dim))));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn unhate_index_load(path: *const c_char, out: *mut *mut UnhateIndex) -> UnhateStatus {
    guard(|| {
        let path = str_arg(path)?;
        let out = out_arg(out)?;
        *out = Box::into_raw(Box::new(UnhateIndex(EmbeddingIndex::load(Path::new(path))?)));
        Ok(())
    })
}

/// # Safety
/// `index` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn unhate_index_save(index: *const UnhateIndex, path: *const c_char) -> UnhateStatus {
    guard(|| {
        let index = handle(index)?;
        Ok(index.0.save(Path::new(str_arg(path)?))?)
    })
}

/// # Safety
/// `index` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn unhate_index_free(index: *mut UnhateIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Dimension of the index, 0 for NULL.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unhate_index_dim(index: *const UnhateIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.dim())
}

/// Entry count, 0 for NULL.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unhate_index_len(index: *const UnhateIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.len())
}

/// Insert a vector (normalized on insert). `class_tag` is 0 (non-hateful),
/// 1 (hateful) or -1 (untagged).
///
/// # Safety
/// `index` must be a live handle, `id` a NUL-terminated string and `values`
/// point to `len` floats.
#[no_mangle]
pub unsafe extern "C" fn unhate_index_insert(
    index: *mut UnhateIndex,
    id: *const c_char,
    values: *const f32,
    len: usize,
    class_tag: i32,
) -> UnhateStatus {
    guard(|| {
        let index = handle_mut(index)?;
        let id = str_arg(id)?;
        let values = slice_arg(values, len)?;
        let tag = match class_tag {
            -1 => None,
            0 | 1 => Some(label_of(class_tag as u8)?),
            _ => return Err(Failure::new(UnhateStatus::InvalidArgument, format!("class tag {class_tag}"))),
        };
        Ok(index.0.insert_raw(id, values, tag)?)
    })
}

unsafe fn query(values: *const f32, len: usize) -> Result<EmbeddingVector, Failure> {
    EmbeddingVector::normalized(slice_arg(values, len)?).map_err(|e| Failure::new(UnhateStatus::InvalidArgument, e.to_string()))
}

/// Exhaustive cosine top-k, ties broken by id.
///
/// # Safety
/// `index` must be a live handle, `values` point to `len` floats and `out`
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn unhate_index_top_k(
    index: *const UnhateIndex,
    values: *const f32,
    len: usize,
    k: usize,
    out: *mut *mut UnhateHits,
) -> UnhateStatus {
    guard(|| {
        let index = handle(index)?;
        let q = query(values, len)?;
        let out = out_arg(out)?;
        *out = Box::into_raw(UnhateHits::from_hits(index.0.top_k(&q, k)?));
        Ok(())
    })
}

/// Class-balanced demonstration selection: `shots / 2` nearest entries of
/// each class.
///
/// # Safety
/// As for [`unhate_index_top_k`].
#[no_mangle]
pub unsafe extern "C" fn unhate_index_rices(
    index: *const UnhateIndex,
    values: *const f32,
    len: usize,
    shots: usize,
    out: *mut *mut UnhateHits,
) -> UnhateStatus {
    guard(|| {
        let index = handle(index)?;
        let q = query(values, len)?;
        let out = out_arg(out)?;
        let cfg = RicesConfig::new(shots)?;
        *out = Box::into_raw(UnhateHits::from_hits(index.0.rices_select(&q, cfg)?));
        Ok(())
    })
}

/// # Safety
/// `hits` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unhate_hits_len(hits: *const UnhateHits) -> usize {
    hits.as_ref().map_or(0, |h| h.ids.len())
}

/// Id of hit `i`, borrowed from the hit list; NULL when out of range.
///
/// # Safety
/// `hits` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unhate_hits_id(hits: *const UnhateHits, i: usize) -> *const c_char {
    hits.as_ref()
        .and_then(|h| h.ids.get(i))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Cosine similarity of hit `i`; NaN when out of range.
///
/// # Safety
/// `hits` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unhate_hits_similarity(hits: *const UnhateHits, i: usize) -> f64 {
    hits.as_ref()
        .and_then(|h| h.similarities.get(i))
        .copied()
        .unwrap_or(f64::NAN)
}

/// # Safety
/// `hits` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn unhate_hits_free(hits: *mut UnhateHits) {
    if !hits.is_null() {
        drop(Box::from_raw(hits));
    }
}

/// Area under the ROC curve; `labels` holds 0 (non-hateful) or 1 (hateful).
///
/// # Safety
/// `scores` and `labels` must point to `n` elements and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn unhate_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> UnhateStatus {
    guard(|| {
        let scores = slice_arg(scores, n)?;
        let labels = slice_arg(labels, n)?;
        let out = out_arg(out)?;
        let pairs = scores
            .iter()
            .zip(labels)
            .map(|(s, l)| Ok((*s, label_of(*l)?)))
            .collect::<Result<Vec<_>, Failure>>()?;
        *out = auroc(&pairs).map_err(|e| {
            let status = match e {
                MetricsError::SingleClass => UnhateStatus::SingleClass,
                _ => UnhateStatus::InvalidArgument,
            };
            Failure::new(status, e.to_string())
        })?;
        Ok(())
    })
}

/// Parsed model answer.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct UnhateDetection {
    /// 0 non-hateful, 1 hateful.
    pub label: u8,
    pub probability: f64,
    /// Nonzero when no probability was found and one was derived from the label.
    pub probability_fallback: u8,
}

/// Parse a detection response into label and probability.
///
/// # Safety
/// `raw` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn unhate_parse_detection(raw: *const c_char, out: *mut UnhateDetection) -> UnhateStatus {
    guard(|| {
        let raw = str_arg(raw)?;
        let out = out_arg(out)?;
        let r = parse_detection_response(raw).map_err(|e| Failure::new(UnhateStatus::Parse, e.to_string()))?;
        *out = UnhateDetection {
            label: r.label.code(),
            probability: r.probability,
            probability_fallback: r.probability_fallback as u8,
        };
        Ok(())
    })
}

/// Majority of `n` binary answers (0 or 1). Writes the winning answer, or
/// -1 when the answers are evenly split and a tiebreak is needed.
///
/// # Safety
/// `answers` must point to `n` bytes and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn unhate_majority(answers: *const u8, n: usize, out: *mut i32) -> UnhateStatus {
    guard(|| {
        let answers = slice_arg(answers, n)?;
        let out = out_arg(out)?;
        if let Some(bad) = answers.iter().find(|a| **a > 1) {
            return Err(Failure::new(UnhateStatus::InvalidArgument, format!("answer {bad}")));
        }
        *out = match majority(answers)? {
            Decision::Decided(a) => a as i32,
            Decision::NeedsTiebreak => -1,
        };
        Ok(())
    })
}

/// Opaque verdict store.
pub struct UnhateStore(VerdictStore);

unsafe fn pool_arg(pool: *const *const c_char, n: usize) -> Result<Vec<String>, Failure> {
    slice_arg(pool, n)?.iter().map(|p| str_arg(*p).map(str::to_string)).collect()
}

/// In-memory store over `n` evaluator ids.
///
/// # Safety
/// `pool` must point to `n` NUL-terminated strings and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn unhate_store_new(pool: *const *const c_char, n: usize, out: *mut *mut UnhateStore) -> UnhateStatus {
    guard(|| {
        let pool = pool_arg(pool, n)?;
        let out = out_arg(out)?;
        *out = Box::into_raw(Box::new(UnhateStore(VerdictStore::new(pool))));
        Ok(())
    })
}

/// Directory-backed store; existing files are replayed.
///
/// # Safety
/// As for [`unhate_store_new`], plus `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn unhate_store_open(
    dir: *const c_char,
    pool: *const *const c_char,
    n: usize,
    out: *mut *mut UnhateStore,
) -> UnhateStatus {
    guard(|| {
        let dir = str_arg(dir)?;
        let pool = pool_arg(pool, n)?;
        let out = out_arg(out)?;
        *out = Box::into_raw(Box::new(UnhateStore(VerdictStore::open(Path::new(dir), pool)?)));
        Ok(())
    })
}

/// # Safety
/// `store` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn unhate_store_free(store: *mut UnhateStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Register a variant and assign three evaluators. `split` is 0 unimodal
/// text, 1 unimodal image, 2 unimodal both, 3 multimodal.
///
/// # Safety
/// `store` must be a live handle and `variant` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn unhate_store_enqueue(store: *mut UnhateStore, variant: *const c_char, split: u8) -> UnhateStatus {
    guard(|| {
        let store = handle_mut(store)?;
        let variant = str_arg(variant)?;
        let split = *Split::ALL
            .get(split as usize)
            .ok_or_else(|| Failure::new(UnhateStatus::InvalidArgument, format!("split code {split}")))?;
        store.0.enqueue(variant, split)?;
        Ok(())
    })
}

/// Record a verdict. `q1` is 0 non-hateful / 1 hateful, `q2` is 0 not
/// coherent / 1 coherent. When the verdict leaves an even split, the newly
/// assigned tiebreaker id is written to `tiebreaker` (free it with
/// [`unhate_string_free`]); otherwise NULL is written.
///
/// # Safety
/// `store` must be a live handle, the strings NUL-terminated, and
/// `tiebreaker` NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn unhate_store_submit(
    store: *mut UnhateStore,
    variant: *const c_char,
    evaluator: *const c_char,
    q1: u8,
    q2: u8,
    ts: u64,
    tiebreaker: *mut *mut c_char,
) -> UnhateStatus {
    guard(|| {
        let store = handle_mut(store)?;
        let verdict = VerdictRecord {
            meme_variant_id: str_arg(variant)?.to_string(),
            evaluator_id: str_arg(evaluator)?.to_string(),
            q1: match q1 {
                0 => Q1::NH,
                1 => Q1::H,
                _ => return Err(Failure::new(UnhateStatus::InvalidArgument, format!("q1 {q1}"))),
            },
            q2: match q2 {
                0 => Q2::NC,
                1 => Q2::C,
                _ => return Err(Failure::new(UnhateStatus::InvalidArgument, format!("q2 {q2}"))),
            },
            ts,
        };
        let assigned = store.0.submit(verdict)?;
        if let Some(out) = tiebreaker.as_mut() {
            *out = assigned.map_or(ptr::null_mut(), |id| owned_string(&id));
        }
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnhateReviewState {
    Pending = 0,
    NeedsTiebreak = 1,
    Decided = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct UnhateReviewStatus {
    pub state: UnhateReviewState,
    pub received: usize,
    /// Decided answers; only meaningful when `state` is decided.
    pub q1: u8,
    pub q2: u8,
    pub shareable: u8,
}

/// # Safety
/// `store` must be a live handle, `variant` NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn unhate_store_status(
    store: *const UnhateStore,
    variant: *const c_char,
    out: *mut UnhateReviewStatus,
) -> UnhateStatus {
    guard(|| {
        let store = handle(store)?;
        let variant = str_arg(variant)?;
        let out = out_arg(out)?;
        *out = match store.0.status(variant)? {
            Status::Pending { received, .. } => UnhateReviewStatus {
                state: UnhateReviewState::Pending,
                received,
                q1: 0,
                q2: 0,
                shareable: 0,
            },
            Status::NeedsTiebreak { received } => UnhateReviewStatus {
                state: UnhateReviewState::NeedsTiebreak,
                received,
                q1: 0,
                q2: 0,
                shareable: 0,
            },
            Status::Decided { q1, q2, shareable, verdicts } => UnhateReviewStatus {
                state: UnhateReviewState::Decided,
                received: verdicts,
                q1: (q1 == Q1::H) as u8,
                q2: (q2 == Q2::C) as u8,
                shareable: shareable as u8,
            },
        };
        Ok(())
    })
}

/// Aggregate report as JSON; free the result with [`unhate_string_free`].
///
/// # Safety
/// `store` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn unhate_store_report_json(store: *const UnhateStore, out: *mut *mut c_char) -> UnhateStatus {
    guard(|| {
        let store = handle(store)?;
        let out = out_arg(out)?;
        let json = serde_json::to_string(&store.0.aggregate()).map_err(|e| Failure::new(UnhateStatus::Eval, e.to_string()))?;
        *out = owned_string(&json);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let p = unhate_last_error();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    #[test]
    fn null_arguments_are_reported() {
        let mut out = ptr::null_mut();
        assert_eq!(unsafe { unhate_index_load(ptr::null(), &mut out) }, UnhateStatus::NullPointer);
        assert!(last_error().contains("null"));
        assert_eq!(unsafe { unhate_index_new(3, ptr::null_mut()) }, UnhateStatus::NullPointer);
        assert_eq!(unsafe { unhate_index_len(ptr::null()) }, 0);
    }

    #[test]
    fn success_clears_last_error() {
        let mut out = ptr::null_mut();
        assert_eq!(unsafe { unhate_index_new(0, &mut out) }, UnhateStatus::InvalidArgument);
        assert!(!unhate_last_error().is_null());
        assert_eq!(unsafe { unhate_index_new(2, &mut out) }, UnhateStatus::Ok);
        assert!(unhate_last_error().is_null());
        unsafe { unhate_index_free(out) };
    }
}

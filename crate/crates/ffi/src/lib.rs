//! C ABI over the experiential toolkit.
//!
//! Every fallible function returns an [`ExpStatus`]; on failure a message is
//! available from [`exp_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Strings returned through
//! out-parameters are owned by the caller and released with [`exp_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use experiential::env::{shop_reward, ShopGoal, ShopItem};
use experiential::insights::{render_insights, InsightSet, Operation};
use experiential::model::ExperiencePool;
use experiential::retrieval::{EmbeddingIndex, HashEmbedder};
use experiential::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// A precondition or configuration value was violated.
    InvalidArgument = 3,
    /// Input could not be parsed or failed validation.
    InvalidData = 4,
    Io = 5,
    /// An insight operation was rejected; the set is unchanged.
    Rejected = 6,
    OutOfRange = 7,
    Internal = 8,
}

/// An experience pool.
pub struct ExpPool(ExperiencePool);

/// An insight set with its audit log.
pub struct ExpInsights(InsightSet);

/// A task-description index together with the hash embedder that built it.
pub struct ExpIndex {
    index: EmbeddingIndex,
    embedder: HashEmbedder,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ExpStatus {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::UnknownTask(_) => ExpStatus::InvalidArgument,
        Error::Io { .. } => ExpStatus::Io,
        Error::Stage { source, .. } => status_of(source),
        _ => ExpStatus::InvalidData,
    }
}

struct Fail(ExpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Self {
        Fail(ExpStatus::InvalidData, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ExpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ExpStatus::Ok
        }
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ExpStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(ExpStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ExpStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(ExpStatus::NullArgument, format!("{name} is null")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail(ExpStatus::NullArgument, format!("{name} is null")))
}

unsafe fn put<T>(out: *mut T, value: T, name: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(ExpStatus::NullArgument, format!("{name} is null")));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s)
        .map_err(|_| Fail(ExpStatus::InvalidData, "string contains a NUL byte".into()))?;
    put(out, c.into_raw(), "out")
}

unsafe fn put_box<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(ExpStatus::NullArgument, "out is null".into()));
    }
    out.write(Box::into_raw(Box::new(value)));
    Ok(())
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn exp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn exp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn exp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Reads a pool file (one JSON trajectory per line).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn exp_pool_load(path: *const c_char, out: *mut *mut ExpPool) -> ExpStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put_box(out, ExpPool(ExperiencePool::load(Path::new(path))?))
    })
}

/// Number of trajectories, or 0 for a null handle.
///
/// # Safety
/// `pool` must be null or a live pool handle.
#[no_mangle]
pub unsafe extern "C" fn exp_pool_len(pool: *const ExpPool) -> usize {
    pool.as_ref().map_or(0, |p| p.0.len())
}

/// Number of successful trajectories, counting manual demonstrations when asked.
///
/// # Safety
/// `pool` must be null or a live pool handle.
#[no_mangle]
pub unsafe extern "C" fn exp_pool_success_count(
    pool: *const ExpPool,
    include_manual: bool,
) -> usize {
    pool.as_ref()
        .map_or(0, |p| p.0.successes(include_manual).count())
}

/// The trajectory at `index` as a JSON string.
///
/// # Safety
/// `pool` must be a live pool handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn exp_pool_trajectory_json(
    pool: *const ExpPool,
    index: usize,
    out: *mut *mut c_char,
) -> ExpStatus {
    guard(|| {
        let pool = handle(pool, "pool")?;
        let t = pool.0.get(index).ok_or_else(|| {
            Fail(
                ExpStatus::OutOfRange,
                format!("index {index} out of range for a pool of {}", pool.0.len()),
            )
        })?;
        put_string(out, serde_json::to_string(t)?)
    })
}

/// # Safety
/// `pool` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn exp_pool_free(pool: *mut ExpPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

/// An empty insight set.
#[no_mangle]
pub extern "C" fn exp_insights_new() -> *mut ExpInsights {
    Box::into_raw(Box::new(ExpInsights(InsightSet::new())))
}

/// Reads an insight file; its audit log must replay to the stored insights.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn exp_insights_load(
    path: *const c_char,
    out: *mut *mut ExpInsights,
) -> ExpStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put_box(out, ExpInsights(InsightSet::load(Path::new(path))?))
    })
}

/// # Safety
/// `set` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn exp_insights_save(
    set: *const ExpInsights,
    path: *const c_char,
) -> ExpStatus {
    guard(|| {
        let set = handle(set, "set")?;
        let path = str_arg(path, "path")?;
        Ok(set.0.save(Path::new(path))?)
    })
}

/// Applies one operation given as JSON, e.g. `{"op":"add","text":"..."}` or
/// `{"op":"upvote","id":1}`. A rejected operation leaves the set unchanged.
///
/// # Safety
/// `set` must be a live handle; `op_json` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn exp_insights_apply(
    set: *mut ExpInsights,
    op_json: *const c_char,
) -> ExpStatus {
    guard(|| {
        let set = handle_mut(set, "set")?;
        let op: Operation = serde_json::from_str(str_arg(op_json, "op_json")?)?;
        set.0
            .apply(op)
            .map_err(|r| Fail(ExpStatus::Rejected, format!("{}: {}", r.reason, r.line)))
    })
}

/// Number of live insights, or 0 for a null handle.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn exp_insights_len(set: *const ExpInsights) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// Importance of the insight with stable id `id`; 0 when it does not exist.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn exp_insights_importance(set: *const ExpInsights, id: u32) -> u32 {
    set.as_ref()
        .and_then(|s| s.0.get(id))
        .map_or(0, |i| i.importance)
}

/// The numbered listing shown to models.
///
/// # Safety
/// `set` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn exp_insights_render(
    set: *const ExpInsights,
    out: *mut *mut c_char,
) -> ExpStatus {
    guard(|| put_string(out, render_insights(&handle(set, "set")?.0)))
}

/// The set, with its audit log, as JSON.
///
/// # Safety
/// `set` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn exp_insights_to_json(
    set: *const ExpInsights,
    out: *mut *mut c_char,
) -> ExpStatus {
    guard(|| put_string(out, handle(set, "set")?.0.to_json()?))
}

/// # Safety
/// `set` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn exp_insights_free(set: *mut ExpInsights) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Indexes the task descriptions of the pool's successes with a hash embedder.
///
/// # Safety
/// `pool` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn exp_index_build(
    pool: *const ExpPool,
    dimension: usize,
    seed: u64,
    include_manual: bool,
    out: *mut *mut ExpIndex,
) -> ExpStatus {
    guard(|| {
        let pool = handle(pool, "pool")?;
        if dimension == 0 {
            return Err(Fail(
                ExpStatus::InvalidArgument,
                "dimension must be positive".into(),
            ));
        }
        let embedder = HashEmbedder::new(dimension, seed);
        let index = EmbeddingIndex::build(&pool.0, &embedder, include_manual)?;
        put_box(out, ExpIndex { index, embedder })
    })
}

/// Reads an index file built with a hash embedder using `seed`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn exp_index_load(
    path: *const c_char,
    seed: u64,
    out: *mut *mut ExpIndex,
) -> ExpStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let index = EmbeddingIndex::load(Path::new(path))?;
        if index.dimension() == 0 {
            return Err(Fail(ExpStatus::InvalidData, "index has dimension 0".into()));
        }
        let embedder = HashEmbedder::new(index.dimension(), seed);
        put_box(out, ExpIndex { index, embedder })
    })
}

/// # Safety
/// `index` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn exp_index_save(index: *const ExpIndex, path: *const c_char) -> ExpStatus {
    guard(|| {
        let index = handle(index, "index")?;
        Ok(index.index.save(Path::new(str_arg(path, "path")?))?)
    })
}

/// Number of indexed entries, or 0 for a null handle.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn exp_index_len(index: *const ExpIndex) -> usize {
    index.as_ref().map_or(0, |i| i.index.len())
}

/// Top-`k` pool positions by inner product with the embedding of `query`,
/// best first. Writes at most `capacity` results and their count to `out_count`.
/// `out_scores` may be null.
///
/// # Safety
/// `index` must be a live handle; `query` a NUL-terminated string; the output
/// arrays must hold `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn exp_index_query(
    index: *const ExpIndex,
    query: *const c_char,
    k: usize,
    out_pool_indices: *mut u64,
    out_scores: *mut f64,
    capacity: usize,
    out_count: *mut usize,
) -> ExpStatus {
    guard(|| {
        let index = handle(index, "index")?;
        let query = str_arg(query, "query")?;
        if out_pool_indices.is_null() && capacity > 0 {
            return Err(Fail(
                ExpStatus::NullArgument,
                "out_pool_indices is null".into(),
            ));
        }
        let hits = index.index.query_topk(&index.embedder, query, k)?;
        let n = hits.len().min(capacity);
        for (i, hit) in hits.iter().take(n).enumerate() {
            out_pool_indices.add(i).write(hit.pool_index as u64);
            if !out_scores.is_null() {
                out_scores.add(i).write(hit.score);
            }
        }
        put(out_count, n, "out_count")
    })
}

/// # Safety
/// `index` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn exp_index_free(index: *mut ExpIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Shop reward of a purchased item against a goal, both given as JSON.
///
/// # Safety
/// Both strings must be NUL-terminated; `out_reward` must be writable.
#[no_mangle]
pub unsafe extern "C" fn exp_shop_reward(
    purchased_json: *const c_char,
    goal_json: *const c_char,
    out_reward: *mut f64,
) -> ExpStatus {
    guard(|| {
        let item: ShopItem = serde_json::from_str(str_arg(purchased_json, "purchased_json")?)?;
        let goal: ShopGoal = serde_json::from_str(str_arg(goal_json, "goal_json")?)?;
        put(out_reward, shop_reward(&item, &goal), "out_reward")
    })
}

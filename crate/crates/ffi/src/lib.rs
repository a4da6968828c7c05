//! C ABI over the toolplan core.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free` function. Every fallible call returns a [`TpStatus`];
//! on failure [`tp_last_error`] describes the problem for the calling thread.
//! Strings returned through out-pointers are NUL-terminated UTF-8 JSON and
//! must be released with [`tp_string_free`].

use std::cell::RefCell;
use std::collections::HashSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use serde_json::Value;
use toolplan::aggregation::{fuse, FusionMethod, LabeledRun, DEFAULT_RRF_C};
use toolplan::corpus::{RenderStyle, ToolCorpus};
use toolplan::metrics::{completeness_at_k, ndcg_at_k, recall_at_k};
use toolplan::retriever::{build_index, Bm25Index, Bm25Params, HashEmbedder, RetrievalRun, Retriever};
use toolplan::reward::{total_reward, RewardComponents, RewardWeights};
use toolplan::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    UnknownTool = 6,
    EmptyIndex = 7,
    Internal = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpBackend {
    Hash = 0,
    Bm25 = 1,
}

/// Loaded tool corpus.
pub struct TpCorpus {
    inner: Arc<ToolCorpus>,
}

/// Searchable index bound to the corpus it was built from.
pub struct TpIndex {
    corpus: Arc<ToolCorpus>,
    retriever: Box<dyn Retriever>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TpRewardComponents {
    pub delta_ndcg: f64,
    pub delta_recall: f64,
    pub format_fraction: f64,
    pub stop_flag: u8,
    pub plan_similarity: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TpRewardWeights {
    pub ndcg: f64,
    pub recall: f64,
    pub format: f64,
    pub stop: f64,
    pub plan: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TpScores {
    pub ndcg: f64,
    pub recall: f64,
    pub completeness: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(TpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => TpStatus::Io,
            Error::CorpusParse { .. } | Error::DuplicateTool { .. } | Error::Json(_) => TpStatus::Parse,
            Error::UnknownTool(_) => TpStatus::UnknownTool,
            Error::EmptyIndex => TpStatus::EmptyIndex,
            Error::InvalidArgument(_) | Error::Config(_) => TpStatus::InvalidArgument,
            _ => TpStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(TpStatus::Parse, e.to_string())
    }
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            TpStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("panic inside toolplan".into());
            TpStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(TpStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(TpStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(TpStatus::NullArgument, format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(TpStatus::NullArgument, format!("{name} is null")))
}

fn c_string(s: String) -> Result<*mut c_char, Failure> {
    Ok(CString::new(s).map_err(|e| Failure(TpStatus::Internal, e.to_string()))?.into_raw())
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn tp_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn tp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn tp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a JSONL corpus from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_corpus_load(path: *const c_char, out: *mut *mut TpCorpus) -> TpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let corpus = toolplan::corpus::load_corpus(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(TpCorpus { inner: Arc::new(corpus) }));
        Ok(())
    })
}

/// Parses a corpus from JSONL text held in memory.
///
/// # Safety
/// `jsonl` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_corpus_from_jsonl(jsonl: *const c_char, out: *mut *mut TpCorpus) -> TpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let corpus = ToolCorpus::from_reader(str_arg(jsonl, "jsonl")?.as_bytes())?;
        *out = Box::into_raw(Box::new(TpCorpus { inner: Arc::new(corpus) }));
        Ok(())
    })
}

/// # Safety
/// `corpus` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tp_corpus_len(corpus: *const TpCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.inner.len())
}

/// # Safety
/// `corpus` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tp_corpus_free(corpus: *mut TpCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Builds an index over `corpus`. `dim` and `seed` apply to the hash backend
/// only. The index keeps its own reference to the corpus.
///
/// # Safety
/// `corpus` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tp_index_build(
    corpus: *const TpCorpus,
    backend: TpBackend,
    dim: usize,
    seed: u64,
    out: *mut *mut TpIndex,
) -> TpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let corpus = ref_arg(corpus, "corpus")?.inner.clone();
        let retriever: Box<dyn Retriever> = match backend {
            TpBackend::Hash => {
                if dim == 0 {
                    return Err(Failure(TpStatus::InvalidArgument, "dim must be positive".into()));
                }
                let embedder = Arc::new(HashEmbedder::new(dim, seed));
                Box::new(build_index(&corpus, embedder, RenderStyle::SchemaJson)?)
            }
            TpBackend::Bm25 => Box::new(Bm25Index::build(&corpus, RenderStyle::SchemaJson, Bm25Params::default())?),
        };
        *out = Box::into_raw(Box::new(TpIndex { corpus, retriever }));
        Ok(())
    })
}

/// Top-`k` search. Writes a JSON object `{"query_text", "hits": [{"tool_id",
/// "score", "rank"}]}` to `out_json`.
///
/// # Safety
/// `index` must be a live handle, `query` a NUL-terminated string and
/// `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn tp_index_search(
    index: *const TpIndex,
    query: *const c_char,
    k: usize,
    out_json: *mut *mut c_char,
) -> TpStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        let index = ref_arg(index, "index")?;
        let run = index.retriever.search(str_arg(query, "query")?, k)?;
        *out = c_string(serde_json::to_string(&run)?)?;
        Ok(())
    })
}

/// # Safety
/// `index` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tp_index_free(index: *mut TpIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Fuses a JSON array of runs as produced by [`tp_index_search`]. Each run may
/// carry an optional `"view"` string used by `multi_view`. `method` is one of
/// `peak_rank`, `rrf`, `multi_view`; `rrf_c <= 0` selects the default.
///
/// # Safety
/// `index` must be a live handle; string arguments NUL-terminated;
/// `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn tp_fuse(
    index: *const TpIndex,
    runs_json: *const c_char,
    method: *const c_char,
    rrf_c: f64,
    out_json: *mut *mut c_char,
) -> TpStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        let index = ref_arg(index, "index")?;
        let method: FusionMethod = serde_json::from_value(Value::String(str_arg(method, "method")?.into()))
            .map_err(|_| Failure(TpStatus::InvalidArgument, "unknown fusion method".into()))?;
        let raw: Vec<Value> = serde_json::from_str(str_arg(runs_json, "runs_json")?)?;
        let mut views = Vec::with_capacity(raw.len());
        let mut runs = Vec::with_capacity(raw.len());
        for v in raw {
            views.push(v.get("view").and_then(Value::as_str).map(str::to_owned));
            let run: RetrievalRun = serde_json::from_value(v)?;
            run.validate()?;
            runs.push(run);
        }
        let labeled: Vec<LabeledRun<'_>> = runs
            .iter()
            .zip(&views)
            .map(|(run, view)| LabeledRun { view: view.as_deref(), run })
            .collect();
        let c = if rrf_c > 0.0 { rrf_c } else { DEFAULT_RRF_C };
        *out = c_string(serde_json::to_string(&fuse(method, &labeled, c, &index.corpus))?)?;
        Ok(())
    })
}

/// Scores a ranked list of tool ids (JSON array of strings) against a JSON
/// array of target ids.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tp_metrics(
    ranked_json: *const c_char,
    targets_json: *const c_char,
    k: usize,
    out: *mut TpScores,
) -> TpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ranked: Vec<String> = serde_json::from_str(str_arg(ranked_json, "ranked_json")?)?;
        let targets: Vec<String> = serde_json::from_str(str_arg(targets_json, "targets_json")?)?;
        let set: HashSet<&str> = targets.iter().map(String::as_str).collect();
        *out = TpScores {
            ndcg: ndcg_at_k(&ranked, &set, k)?,
            recall: recall_at_k(&ranked, &set, k)?,
            completeness: completeness_at_k(&ranked, &set, k)?,
        };
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn tp_reward_default_weights() -> TpRewardWeights {
    let w = RewardWeights::default();
    TpRewardWeights { ndcg: w.ndcg, recall: w.recall, format: w.format, stop: w.stop, plan: w.plan }
}

/// Weighted reward total. A null `weights` uses the defaults.
///
/// # Safety
/// `components` must be readable, `weights` null or readable, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tp_reward_total(
    components: *const TpRewardComponents,
    weights: *const TpRewardWeights,
    out: *mut f64,
) -> TpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let c = ref_arg(components, "components")?;
        let w = weights.as_ref().copied().unwrap_or_else(|| tp_reward_default_weights());
        let weights = RewardWeights { ndcg: w.ndcg, recall: w.recall, format: w.format, stop: w.stop, plan: w.plan };
        weights.validate()?;
        let components = RewardComponents {
            delta_ndcg: c.delta_ndcg,
            delta_recall: c.delta_recall,
            format_fraction: c.format_fraction,
            stop_flag: c.stop_flag,
            plan_similarity: c.plan_similarity,
        };
        *out = total_reward(components, &weights).total;
        Ok(())
    })
}

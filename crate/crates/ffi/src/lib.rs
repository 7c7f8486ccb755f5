//! C ABI over the treesynth library.
//!
//! Objects are opaque handles created by `*_load` / `*_open` functions and
//! released with the matching `*_free`. Every fallible call returns a
//! [`TsStatus`]; on failure, [`ts_last_error`] describes what went wrong on
//! the calling thread. Strings returned as `char *` are owned by the caller
//! and must be released with [`ts_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use treesynth::dataset::{Dataset, DatasetError};
use treesynth::partition::PartitionError;
use treesynth::pipeline::{BaselineArgs, PipelineConfig, PipelineError, Run, SynthesizeArgs};
use treesynth::quality::{filter_near_duplicates, rouge_l_text, QualityError};
use treesynth::synth::SynthError;
use treesynth::tree::{SpaceTree, TreeError};
use treesynth::GatewayError;

/// Result codes for every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Provider = 6,
    Invalid = 7,
    FingerprintMismatch = 8,
    Incomplete = 9,
    OutOfRange = 10,
    Panic = 11,
}

/// A loaded partition tree.
pub struct TsTree(SpaceTree);

/// A loaded dataset.
pub struct TsDataset(Dataset);

/// An open run directory with its provider.
pub struct TsRun(Run);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(TsStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(TsStatus::NullArgument, format!("`{what}` is null"))
    }
}

fn gateway_status(_: &GatewayError) -> TsStatus {
    TsStatus::Provider
}

fn tree_status(e: &TreeError) -> TsStatus {
    match e {
        TreeError::TreeIncomplete => TsStatus::Incomplete,
        TreeError::Json(_) => TsStatus::Parse,
        TreeError::UnknownNode(_) => TsStatus::OutOfRange,
        _ => TsStatus::Invalid,
    }
}

fn dataset_status(e: &DatasetError) -> TsStatus {
    match e {
        DatasetError::Io { .. } => TsStatus::Io,
        DatasetError::Parse { .. } | DatasetError::Manifest { .. } => TsStatus::Parse,
        DatasetError::FingerprintMismatch { .. } => TsStatus::FingerprintMismatch,
        _ => TsStatus::Invalid,
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Config(_) | PipelineError::RunMismatch { .. } => TsStatus::Config,
            PipelineError::Io { .. } => TsStatus::Io,
            PipelineError::MissingInput(_) => TsStatus::Io,
            PipelineError::FingerprintMismatch { .. } => TsStatus::FingerprintMismatch,
            PipelineError::Dataset(d) => dataset_status(d),
            PipelineError::Tree(t) => tree_status(t),
            PipelineError::Partition(p) => match p {
                PartitionError::Gateway(g) => gateway_status(g),
                PartitionError::Tree(t) => tree_status(t),
                PartitionError::CorruptCheckpoint { .. } => TsStatus::Parse,
                PartitionError::ConfigMismatch(_) => TsStatus::Config,
                PartitionError::Io(_) => TsStatus::Io,
                _ => TsStatus::Invalid,
            },
            PipelineError::Synth(s) => match s {
                SynthError::Gateway(g) => gateway_status(g),
                SynthError::Tree(t) => tree_status(t),
                _ => TsStatus::Provider,
            },
            PipelineError::Quality(q) => match q {
                QualityError::Gateway(g) => gateway_status(g),
                _ => TsStatus::Invalid,
            },
        };
        Failure(status, e.to_string())
    }
}

impl From<TreeError> for Failure {
    fn from(e: TreeError) -> Self {
        Failure(tree_status(&e), e.to_string())
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Failure(dataset_status(&e), e.to_string())
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TsStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {message}"));
            TsStatus::Panic
        }
    }
}

unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(TsStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| Failure::null(what))
}

unsafe fn handle_mut<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| Failure::null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null(what));
    }
    out.write(value);
    Ok(())
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ts_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn ts_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// ROUGE-L F1 between two texts.
///
/// # Safety
/// `a` and `b` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_rouge_l(a: *const c_char, b: *const c_char, out: *mut f64) -> TsStatus {
    guard(|| {
        let score = rouge_l_text(text(a, "a")?, text(b, "b")?);
        put(out, score, "out")
    })
}

/// Loads a tree from its JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_tree_load(path: *const c_char, out: *mut *mut TsTree) -> TsStatus {
    guard(|| {
        let path = text(path, "path")?;
        let json = std::fs::read_to_string(path).map_err(|e| Failure(TsStatus::Io, format!("{path}: {e}")))?;
        let tree = SpaceTree::from_json(&json)?;
        put(out, Box::into_raw(Box::new(TsTree(tree))), "out")
    })
}

/// # Safety
/// `tree` must come from [`ts_tree_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn ts_tree_free(tree: *mut TsTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// Number of nodes, or 0 for NULL.
///
/// # Safety
/// `tree` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn ts_tree_node_count(tree: *const TsTree) -> usize {
    tree.as_ref().map_or(0, |t| t.0.len())
}

/// # Safety
/// `tree` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn ts_tree_is_complete(tree: *const TsTree) -> bool {
    tree.as_ref().is_some_and(|t| t.0.is_complete())
}

/// Number of leaves; fails with `TS_STATUS_INCOMPLETE` on an unfinished tree.
///
/// # Safety
/// `tree` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_tree_leaf_count(tree: *const TsTree, out: *mut usize) -> TsStatus {
    guard(|| {
        let leaves = handle(tree, "tree")?.0.leaf_nodes()?;
        put(out, leaves.len(), "out")
    })
}

/// Composed subspace description of the `index`-th leaf (depth-first order).
///
/// # Safety
/// `tree` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_tree_leaf_description(tree: *const TsTree, index: usize, out: *mut *mut c_char) -> TsStatus {
    guard(|| {
        let tree = &handle(tree, "tree")?.0;
        let leaves = tree.leaf_nodes()?;
        let id = leaves
            .get(index)
            .ok_or_else(|| Failure(TsStatus::OutOfRange, format!("leaf {index} of {}", leaves.len())))?;
        put(out, owned_string(tree.node_description(id)?), "out")
    })
}

/// SHA-256 of the tree's canonical JSON, hex encoded. NULL for NULL.
///
/// # Safety
/// `tree` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn ts_tree_fingerprint(tree: *const TsTree) -> *mut c_char {
    tree.as_ref().map_or(ptr::null_mut(), |t| owned_string(t.0.fingerprint()))
}

/// Canonical JSON of the tree. NULL for NULL.
///
/// # Safety
/// `tree` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn ts_tree_to_json(tree: *const TsTree) -> *mut c_char {
    tree.as_ref().map_or(ptr::null_mut(), |t| owned_string(t.0.to_json()))
}

/// Loads a JSONL dataset, verifying its sidecar manifest when present.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_dataset_load(path: *const c_char, out: *mut *mut TsDataset) -> TsStatus {
    guard(|| {
        let dataset = Dataset::read(&PathBuf::from(text(path, "path")?))?;
        put(out, Box::into_raw(Box::new(TsDataset(dataset))), "out")
    })
}

/// # Safety
/// `dataset` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn ts_dataset_free(dataset: *mut TsDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of records, or 0 for NULL.
///
/// # Safety
/// `dataset` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn ts_dataset_len(dataset: *const TsDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// Instruction text of record `index`.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_dataset_instruction(dataset: *const TsDataset, index: usize, out: *mut *mut c_char) -> TsStatus {
    guard(|| {
        let records = &handle(dataset, "dataset")?.0.records;
        let record = records
            .get(index)
            .ok_or_else(|| Failure(TsStatus::OutOfRange, format!("record {index} of {}", records.len())))?;
        put(out, owned_string(record.instruction.clone()), "out")
    })
}

/// Writes the dataset and its sidecar manifest.
///
/// # Safety
/// `dataset` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ts_dataset_write(dataset: *const TsDataset, path: *const c_char) -> TsStatus {
    guard(|| {
        let dataset = &handle(dataset, "dataset")?.0;
        dataset.write(&PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

/// Near-duplicate filter. Produces a new handle with the kept records and
/// optionally reports how many were removed.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be writable; `removed` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn ts_dataset_dedup(
    dataset: *const TsDataset,
    threshold: f64,
    out: *mut *mut TsDataset,
    removed: *mut usize,
) -> TsStatus {
    guard(|| {
        let dataset = &handle(dataset, "dataset")?.0;
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Failure(TsStatus::OutOfRange, format!("threshold {threshold} is outside [0, 1]")));
        }
        let outcome = filter_near_duplicates(dataset, threshold);
        if !removed.is_null() {
            removed.write(outcome.log.removed.len());
        }
        put(out, Box::into_raw(Box::new(TsDataset(outcome.kept))), "out")
    })
}

/// Opens a run from a TOML config. `run_dir` may be NULL to use the
/// location derived from the config.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `run_dir` one or NULL;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_run_open(config_path: *const c_char, run_dir: *const c_char, out: *mut *mut TsRun) -> TsStatus {
    guard(|| {
        let config = PipelineConfig::load(&PathBuf::from(text(config_path, "config_path")?))?;
        let dir = if run_dir.is_null() { None } else { Some(PathBuf::from(text(run_dir, "run_dir")?)) };
        let run = Run::open(config, dir)?;
        put(out, Box::into_raw(Box::new(TsRun(run))), "out")
    })
}

/// # Safety
/// `run` must come from [`ts_run_open`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn ts_run_free(run: *mut TsRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Builds or resumes the tree. `leaves` receives the leaf count (may be NULL).
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ts_run_partition(run: *mut TsRun, leaves: *mut usize) -> TsStatus {
    guard(|| {
        let summary = handle_mut(run, "run")?.0.partition(false, None)?;
        if !leaves.is_null() {
            leaves.write(summary.leaves);
        }
        Ok(())
    })
}

/// Synthesizes records for every leaf; `per_leaf` 0 uses the config value.
///
/// # Safety
/// `run` must be a live handle; `records` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn ts_run_synthesize(run: *mut TsRun, per_leaf: usize, records: *mut usize) -> TsStatus {
    guard(|| {
        let args = SynthesizeArgs { per_leaf: (per_leaf > 0).then_some(per_leaf), ..SynthesizeArgs::default() };
        let summary = handle_mut(run, "run")?.0.synthesize(&args)?;
        if !records.is_null() {
            records.write(summary.records);
        }
        Ok(())
    })
}

/// Answers records that lack an answer.
///
/// # Safety
/// `run` must be a live handle; `failures` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn ts_run_answer(run: *mut TsRun, failures: *mut usize) -> TsStatus {
    guard(|| {
        let summary = handle_mut(run, "run")?.0.answer(None)?;
        if !failures.is_null() {
            failures.write(summary.failures);
        }
        Ok(())
    })
}

/// Deduplicates the run's dataset; a negative threshold uses the config value.
///
/// # Safety
/// `run` must be a live handle; `kept` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn ts_run_dedup(run: *mut TsRun, threshold: f64, kept: *mut usize) -> TsStatus {
    guard(|| {
        let threshold = (threshold >= 0.0).then_some(threshold);
        let summary = handle_mut(run, "run")?.0.dedup(None, threshold)?;
        if !kept.is_null() {
            kept.write(summary.records);
        }
        Ok(())
    })
}

/// Diversity score (mean pairwise cosine) of the run's latest dataset.
///
/// # Safety
/// `run` must be a live handle; `score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_run_diversity(run: *mut TsRun, score: *mut f64) -> TsStatus {
    guard(|| {
        let summary = handle_mut(run, "run")?.0.diversity(&[], None, None)?;
        put(score, summary.scores[0].1, "score")
    })
}

/// Temperature-sampling baseline. `count` 0 matches the synthesized dataset;
/// a negative `temperature` uses the config value.
///
/// # Safety
/// `run` must be a live handle; `records` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn ts_run_baseline(run: *mut TsRun, count: usize, temperature: f64, records: *mut usize) -> TsStatus {
    guard(|| {
        let args = BaselineArgs {
            count: (count > 0).then_some(count),
            temperature: (temperature >= 0.0).then_some(temperature),
            ..BaselineArgs::default()
        };
        let summary = handle_mut(run, "run")?.0.baseline(&args)?;
        if !records.is_null() {
            records.write(summary.records);
        }
        Ok(())
    })
}

//! C ABI over `protofed`.
//!
//! Every fallible function returns a [`PfStatus`]; on failure the message is
//! kept per thread and can be read with [`pf_last_error_message`]. Objects
//! are opaque handles created by `*_new`/`*_load`/`*_run` functions and
//! released with the matching `*_free`. Panics never cross the boundary.
//!
//! Memories are row-major `M x D` arrays of `double`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use protofed::federation::{run_simulation, write_summary_csv, RunConfig, SimulationResult};
use protofed::memory::{PrototypeMemory, Provenance};
use protofed::server::{aggregate_average, align_memories, cosine_similarity, AlignmentConfig};
use protofed::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Parse = 5,
    Config = 6,
    NonFinite = 7,
    Serialization = 8,
    /// Caller buffer too small; the required size was written.
    BufferTooSmall = 9,
    Runtime = 10,
    Panic = 11,
}

/// Opaque prototype memory.
pub struct PfMemory(PrototypeMemory);

/// Opaque run configuration.
pub struct PfConfig(RunConfig);

/// Opaque simulation result.
pub struct PfSimulation {
    result: SimulationResult,
    names: Vec<CString>,
}

/// Test metrics and traffic of one domain.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PfDomainSummary {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub upload_bytes_per_round: usize,
    pub download_bytes_per_round: usize,
    pub total_bytes: usize,
    pub full_model_bytes: usize,
    pub payload_ratio: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> PfStatus {
    match e {
        Error::Io { .. } => PfStatus::Io,
        Error::Parse { .. } => PfStatus::Parse,
        Error::Empty(_) | Error::InvalidSplit(_) | Error::InvalidArgument(_) => {
            PfStatus::InvalidArgument
        }
        Error::ShapeMismatch(_) => PfStatus::ShapeMismatch,
        Error::NonFinite(_) => PfStatus::NonFinite,
        Error::Config(_) => PfStatus::Config,
        Error::Serialization(_) => PfStatus::Serialization,
        _ => PfStatus::Runtime,
    }
}

struct Fail(PfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: PfStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

/// Runs `f`, recording its error and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PfStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            PfStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    // SAFETY: the caller guarantees `p` is null or a live handle.
    unsafe { p.as_ref() }.ok_or_else(|| Fail(PfStatus::NullPointer, format!("{name} is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    // SAFETY: the caller guarantees `p` is null or a live, unaliased handle.
    unsafe { p.as_mut() }.ok_or_else(|| Fail(PfStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(PfStatus::NullPointer, format!("{name} is null"));
    }
    // SAFETY: the caller guarantees `len` readable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return fail(PfStatus::NullPointer, format!("{name} is null"));
    }
    // SAFETY: the caller guarantees `len` writable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

unsafe fn string<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return fail(PfStatus::NullPointer, format!("{name} is null"));
    }
    // SAFETY: the caller guarantees a nul-terminated string.
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| {
        Fail(
            PfStatus::InvalidArgument,
            format!("{name} is not valid UTF-8"),
        )
    })
}

unsafe fn put<T>(out: *mut T, value: T, name: &str) -> Result<(), Fail> {
    if out.is_null() {
        return fail(PfStatus::NullPointer, format!("{name} is null"));
    }
    // SAFETY: checked non-null; the caller guarantees it is writable.
    unsafe { out.write(value) };
    Ok(())
}

/// Copies `bytes` into a caller buffer. With a null buffer or too small a
/// length only the required size is written.
unsafe fn copy_out(
    bytes: &[u8],
    buf: *mut u8,
    len: usize,
    written: *mut usize,
) -> Result<(), Fail> {
    unsafe { put(written, bytes.len(), "written") }?;
    if buf.is_null() || len < bytes.len() {
        return fail(
            PfStatus::BufferTooSmall,
            format!("buffer of {len} bytes, {} required", bytes.len()),
        );
    }
    // SAFETY: `buf` holds at least `bytes.len()` writable bytes.
    unsafe { ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len()) };
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn pf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Serialized size in bytes of an `m x d` memory.
#[no_mangle]
pub extern "C" fn pf_wire_size(m: usize, d: usize) -> usize {
    protofed::memory::wire_size(m, d)
}

/// Seeded random memory with `m` prototypes of dimension `d`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_memory_new(
    m: usize,
    d: usize,
    seed: u64,
    out: *mut *mut PfMemory,
) -> PfStatus {
    guard(|| {
        let mem = PrototypeMemory::init(m, d, seed)?;
        unsafe { put(out, Box::into_raw(Box::new(PfMemory(mem))), "out") }
    })
}

/// Memory holding a copy of the row-major `m x d` array `rows`.
///
/// # Safety
/// `rows` must hold `m * d` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_memory_from_rows(
    rows: *const f64,
    m: usize,
    d: usize,
    out: *mut *mut PfMemory,
) -> PfStatus {
    guard(|| {
        if m == 0 || d == 0 {
            return fail(PfStatus::InvalidArgument, "memory needs m > 0 and d > 0");
        }
        let data = unsafe { slice(rows, m * d, "rows") }?;
        let vectors = Array2::from_shape_vec((m, d), data.to_vec()).expect("m * d values");
        let mem = PrototypeMemory::from_vectors(vectors, Provenance::Fresh);
        mem.check_finite()?;
        unsafe { put(out, Box::into_raw(Box::new(PfMemory(mem))), "out") }
    })
}

/// Releases a memory. Null is ignored.
///
/// # Safety
/// `memory` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_memory_free(memory: *mut PfMemory) {
    if !memory.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(memory) });
    }
}

/// Writes the memory's shape.
///
/// # Safety
/// `memory` must be a live handle; `m` and `d` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_memory_shape(
    memory: *const PfMemory,
    m: *mut usize,
    d: *mut usize,
) -> PfStatus {
    guard(|| {
        let mem = &unsafe { deref(memory, "memory") }?.0;
        unsafe { put(m, mem.size(), "m") }?;
        unsafe { put(d, mem.dim(), "d") }
    })
}

/// Copies row `k` into `out` (`d` doubles).
///
/// # Safety
/// `memory` must be a live handle and `out` must hold `d` doubles.
#[no_mangle]
pub unsafe extern "C" fn pf_memory_row(
    memory: *const PfMemory,
    k: usize,
    out: *mut f64,
    d: usize,
) -> PfStatus {
    guard(|| {
        let mem = &unsafe { deref(memory, "memory") }?.0;
        if k >= mem.size() {
            return fail(
                PfStatus::InvalidArgument,
                format!("row {k} out of range for {} rows", mem.size()),
            );
        }
        if d != mem.dim() {
            return fail(
                PfStatus::ShapeMismatch,
                format!("buffer of {d} for dimension {}", mem.dim()),
            );
        }
        let dst = unsafe { slice_mut(out, d, "out") }?;
        for (o, v) in dst.iter_mut().zip(mem.vectors.row(k)) {
            *o = *v;
        }
        Ok(())
    })
}

/// Copies the usage counts into `out` (`m` values).
///
/// # Safety
/// `memory` must be a live handle and `out` must hold `m` values.
#[no_mangle]
pub unsafe extern "C" fn pf_memory_usage(
    memory: *const PfMemory,
    out: *mut u64,
    m: usize,
) -> PfStatus {
    guard(|| {
        let mem = &unsafe { deref(memory, "memory") }?.0;
        if m != mem.size() {
            return fail(
                PfStatus::ShapeMismatch,
                format!("buffer of {m} for {} rows", mem.size()),
            );
        }
        unsafe { slice_mut(out, m, "out") }?.copy_from_slice(&mem.usage);
        Ok(())
    })
}

/// Index of the prototype nearest to `query` (`d` doubles); ties go to the
/// lowest index.
///
/// # Safety
/// `memory` must be a live handle, `query` must hold `d` doubles and `index`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_memory_retrieve(
    memory: *const PfMemory,
    query: *const f64,
    d: usize,
    index: *mut usize,
) -> PfStatus {
    guard(|| {
        let mem = &unsafe { deref(memory, "memory") }?.0;
        let q = unsafe { slice(query, d, "query") }?;
        let (k, _) = mem.retrieve(ArrayView1::from(q))?;
        unsafe { put(index, k, "index") }
    })
}

/// Quantizes `n` row-major queries, writing one index per row and, when
/// `record_usage` is set, adding the assignments to the usage counts.
///
/// # Safety
/// `memory` must be a live handle, `queries` must hold `n * d` doubles and
/// `indices` `n` values.
#[no_mangle]
pub unsafe extern "C" fn pf_memory_quantize(
    memory: *mut PfMemory,
    queries: *const f64,
    n: usize,
    d: usize,
    record_usage: bool,
    indices: *mut usize,
) -> PfStatus {
    guard(|| {
        let mem = &mut unsafe { deref_mut(memory, "memory") }?.0;
        let q = unsafe { slice(queries, n * d, "queries") }?;
        let view = ArrayView2::from_shape((n, d), q)
            .map_err(|e| Fail(PfStatus::ShapeMismatch, e.to_string()))?;
        let result = mem.retrieve_batch(view, record_usage)?;
        unsafe { slice_mut(indices, n, "indices") }?.copy_from_slice(&result.indices);
        Ok(())
    })
}

/// Serializes vectors and usage counts (little-endian). Pass a null buffer
/// to query the size.
///
/// # Safety
/// `memory` must be a live handle, `buf` null or `len` writable bytes, and
/// `written` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_memory_serialize(
    memory: *const PfMemory,
    buf: *mut u8,
    len: usize,
    written: *mut usize,
) -> PfStatus {
    guard(|| {
        let mem = &unsafe { deref(memory, "memory") }?.0;
        unsafe { copy_out(&mem.to_wire(), buf, len, written) }
    })
}

/// Rebuilds an `m x d` memory from [`pf_memory_serialize`] output.
///
/// # Safety
/// `bytes` must hold `len` bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_memory_deserialize(
    bytes: *const u8,
    len: usize,
    m: usize,
    d: usize,
    out: *mut *mut PfMemory,
) -> PfStatus {
    guard(|| {
        let data = unsafe { slice(bytes, len, "bytes") }?;
        let mem = PrototypeMemory::from_wire(data, m, d)?;
        unsafe { put(out, Box::into_raw(Box::new(PfMemory(mem))), "out") }
    })
}

/// Cosine similarity of two `d`-vectors; 0 when either is near zero.
///
/// # Safety
/// `a` and `b` must hold `d` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_cosine_similarity(
    a: *const f64,
    b: *const f64,
    d: usize,
    out: *mut f64,
) -> PfStatus {
    guard(|| {
        let a = unsafe { slice(a, d, "a") }?;
        let b = unsafe { slice(b, d, "b") }?;
        let c = cosine_similarity(ArrayView1::from(a), ArrayView1::from(b))?;
        unsafe { put(out, c, "out") }
    })
}

unsafe fn collect_uploads(
    uploads: *const *const PfMemory,
    n: usize,
) -> Result<Vec<PrototypeMemory>, Fail> {
    if n == 0 {
        return fail(PfStatus::InvalidArgument, "no uploads");
    }
    let handles = unsafe { slice(uploads, n, "uploads") }?;
    handles
        .iter()
        .enumerate()
        .map(|(i, &h)| unsafe { deref(h, &format!("uploads[{i}]")) }.map(|m| m.0.clone()))
        .collect()
}

/// Server update over `n` uploaded memories. Writes `n` new handles, one per
/// domain, into `out`; the caller frees each.
///
/// # Safety
/// `uploads` must hold `n` live handles and `out` room for `n` handles.
#[no_mangle]
pub unsafe extern "C" fn pf_align_memories(
    uploads: *const *const PfMemory,
    n: usize,
    gamma: f64,
    delta: f64,
    seed: u64,
    round: u64,
    out: *mut *mut PfMemory,
) -> PfStatus {
    guard(|| {
        let memories = unsafe { collect_uploads(uploads, n) }?;
        let dst = unsafe { slice_mut(out, n, "out") }?;
        let config = AlignmentConfig {
            gamma,
            delta,
            ..Default::default()
        };
        let outcome = align_memories(&memories, &config, seed, round)?;
        for (slot, mem) in dst.iter_mut().zip(outcome.memories) {
            *slot = Box::into_raw(Box::new(PfMemory(mem)));
        }
        Ok(())
    })
}

/// Index-wise mean of `n` uploaded memories.
///
/// # Safety
/// `uploads` must hold `n` live handles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_aggregate_average(
    uploads: *const *const PfMemory,
    n: usize,
    out: *mut *mut PfMemory,
) -> PfStatus {
    guard(|| {
        let memories = unsafe { collect_uploads(uploads, n) }?;
        let mem = aggregate_average(&memories)?;
        unsafe { put(out, Box::into_raw(Box::new(PfMemory(mem))), "out") }
    })
}

/// Loads a TOML run config; relative dataset paths resolve against its
/// directory.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_config_load(path: *const c_char, out: *mut *mut PfConfig) -> PfStatus {
    guard(|| {
        let path = unsafe { string(path, "path") }?;
        let config = RunConfig::load(Path::new(path))?;
        unsafe { put(out, Box::into_raw(Box::new(PfConfig(config))), "out") }
    })
}

/// Parses a TOML run config from a string.
///
/// # Safety
/// `toml` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_config_parse(toml: *const c_char, out: *mut *mut PfConfig) -> PfStatus {
    guard(|| {
        let text = unsafe { string(toml, "toml") }?;
        let config = RunConfig::from_toml_str(text)?;
        unsafe { put(out, Box::into_raw(Box::new(PfConfig(config))), "out") }
    })
}

/// Applies one `key=value` override. The config is unchanged on failure.
///
/// # Safety
/// `config` must be a live handle and `assignment` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pf_config_set(
    config: *mut PfConfig,
    assignment: *const c_char,
) -> PfStatus {
    guard(|| {
        let cfg = unsafe { deref_mut(config, "config") }?;
        let kv = unsafe { string(assignment, "assignment") }?;
        cfg.0 = cfg.0.with_overrides(&[kv])?;
        Ok(())
    })
}

/// Releases a config. Null is ignored.
///
/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_config_free(config: *mut PfConfig) {
    if !config.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(config) });
    }
}

/// Runs a full simulation. With `write_files` set, reports, summary and
/// checkpoints are written under the configured run directory.
///
/// # Safety
/// `config` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_simulation_run(
    config: *const PfConfig,
    write_files: bool,
    out: *mut *mut PfSimulation,
) -> PfStatus {
    guard(|| {
        let cfg = unsafe { deref(config, "config") }?;
        let result = run_simulation(&cfg.0, write_files)?;
        let names = result
            .summary
            .iter()
            .map(|s| CString::new(s.domain.replace('\0', " ")).expect("nul bytes removed"))
            .collect();
        unsafe {
            put(
                out,
                Box::into_raw(Box::new(PfSimulation { result, names })),
                "out",
            )
        }
    })
}

/// Number of domains in a result; 0 for null.
///
/// # Safety
/// `sim` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_simulation_domain_count(sim: *const PfSimulation) -> usize {
    // SAFETY: the caller guarantees null or a live handle.
    unsafe { sim.as_ref() }.map_or(0, |s| s.result.summary.len())
}

/// Round whose checkpoints were selected; 0 for null.
///
/// # Safety
/// `sim` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_simulation_best_round(sim: *const PfSimulation) -> usize {
    // SAFETY: the caller guarantees null or a live handle.
    unsafe { sim.as_ref() }.map_or(0, |s| s.result.best_round)
}

/// Number of rounds that ran; 0 for null.
///
/// # Safety
/// `sim` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_simulation_rounds(sim: *const PfSimulation) -> usize {
    // SAFETY: the caller guarantees null or a live handle.
    unsafe { sim.as_ref() }.map_or(0, |s| s.result.reports.len())
}

/// Name of domain `i`, owned by the result; null when out of range.
///
/// # Safety
/// `sim` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_simulation_domain_name(
    sim: *const PfSimulation,
    i: usize,
) -> *const c_char {
    // SAFETY: the caller guarantees null or a live handle.
    unsafe { sim.as_ref() }
        .and_then(|s| s.names.get(i))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Test metrics and traffic of domain `i`.
///
/// # Safety
/// `sim` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_simulation_domain_summary(
    sim: *const PfSimulation,
    i: usize,
    out: *mut PfDomainSummary,
) -> PfStatus {
    guard(|| {
        let s = unsafe { deref(sim, "sim") }?;
        let Some(row) = s.result.summary.get(i) else {
            return fail(
                PfStatus::InvalidArgument,
                format!("domain {i} out of range"),
            );
        };
        let summary = PfDomainSummary {
            horizon: row.horizon,
            mse: row.mse,
            mae: row.mae,
            upload_bytes_per_round: row.upload_bytes_per_round,
            download_bytes_per_round: row.download_bytes_per_round,
            total_bytes: row.total_bytes,
            full_model_bytes: row.full_model_bytes,
            payload_ratio: row.payload_ratio,
        };
        unsafe { put(out, summary, "out") }
    })
}

/// Summary CSV (header plus one row per domain). Pass a null buffer to
/// query the size.
///
/// # Safety
/// `sim` must be a live handle, `buf` null or `len` writable bytes, and
/// `written` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_simulation_summary_csv(
    sim: *const PfSimulation,
    buf: *mut u8,
    len: usize,
    written: *mut usize,
) -> PfStatus {
    guard(|| {
        let s = unsafe { deref(sim, "sim") }?;
        let mut bytes = Vec::new();
        write_summary_csv(&s.result.summary, &mut bytes)?;
        unsafe { copy_out(&bytes, buf, len, written) }
    })
}

/// Releases a result. Null is ignored.
///
/// # Safety
/// `sim` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_simulation_free(sim: *mut PfSimulation) {
    if !sim.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(sim) });
    }
}

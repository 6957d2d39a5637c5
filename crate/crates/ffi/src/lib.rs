//! C interface to the kvtier simulator.
//!
//! Every fallible call returns a [`KvtStatus`]; on failure the message is
//! available from [`kvt_last_error`] on the same thread. Objects are
//! opaque handles released with their matching `_free` function. Strings
//! returned by the library are released with [`kvt_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use kvtier::cli::Point;
use kvtier::config::{BackendPreset, RunConfig};
use kvtier::engine::SimOutput;
use kvtier::io::sustained_throughput;
use kvtier::metrics::to_stable_json;
use kvtier::workload::parse_trace;
use kvtier::{Error, HiRadixTree, IoBackendSpec, KvGeometry, Layout, LinkSpec, TierId, TierSpec, TierStore};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Trace = 4,
    Simulation = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvtTier {
    Device = 0,
    Host = 1,
    Disk = 2,
}

impl From<KvtTier> for TierId {
    fn from(t: KvtTier) -> Self {
        match t {
            KvtTier::Device => TierId::Device,
            KvtTier::Host => TierId::Host,
            KvtTier::Disk => TierId::Disk,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvtLink {
    Pcie5 = 0,
    NvlinkC2c = 1,
    Nvme = 2,
}

impl From<KvtLink> for LinkSpec {
    fn from(l: KvtLink) -> Self {
        match l {
            KvtLink::Pcie5 => LinkSpec::pcie5(),
            KvtLink::NvlinkC2c => LinkSpec::nvlink_c2c(),
            KvtLink::Nvme => LinkSpec::nvme(),
        }
    }
}

/// Headline numbers of a finished run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KvtSummary {
    pub requests: u64,
    pub ttft_mean: f64,
    pub ttft_p50: f64,
    pub ttft_p90: f64,
    pub output_throughput: f64,
    pub stall_fraction: f64,
    pub hit_rate: f64,
    pub compute_tokens: u64,
    pub deferrals: u64,
    pub bundle_hits: u64,
}

/// Prefix match split by tier, in tokens.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KvtMatch {
    pub matched: usize,
    pub device: usize,
    pub host: usize,
    pub disk: usize,
}

pub struct KvtConfig(RunConfig);

pub struct KvtReport(SimOutput);

/// A radix index with unbounded page pools at every tier.
pub struct KvtTree {
    tree: HiRadixTree,
    store: TierStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let mut bytes = msg.into();
    bytes.retain(|&b| b != 0);
    let c = CString::new(bytes).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> KvtStatus {
    match e {
        Error::Config(_) | Error::Granularity { .. } | Error::Unsupported(_) => KvtStatus::Config,
        Error::Trace(_) | Error::Parse { .. } => KvtStatus::Trace,
        _ => KvtStatus::Simulation,
    }
}

fn guard(f: impl FnOnce() -> Result<(), KvtStatus>) -> KvtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KvtStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            KvtStatus::Panic
        }
    }
}

fn fail(e: Error) -> KvtStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn null(what: &str) -> KvtStatus {
    set_error(format!("{what} is null"));
    KvtStatus::NullPointer
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, KvtStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        KvtStatus::InvalidArgument
    })
}

/// # Safety
/// `out` is null or writable.
unsafe fn put<T>(out: *mut *mut T, v: T) {
    *out = Box::into_raw(Box::new(v));
}

/// Message of the last failed call on this thread, or null. Free with
/// [`kvt_string_free`].
#[no_mangle]
pub extern "C" fn kvt_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// # Safety
/// `s` is null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kvt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a configuration from named profiles, e.g. `"h200-pcie5"`,
/// `"gpu_assist"`, `"loogle"`.
///
/// # Safety
/// String arguments are NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn kvt_config_from_profiles(
    hardware: *const c_char,
    backend: *const c_char,
    workload: *const c_char,
    out: *mut *mut KvtConfig,
) -> KvtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let backend: BackendPreset = text(backend, "backend")?.parse().map_err(fail)?;
        let cfg = RunConfig::from_profiles(text(hardware, "hardware")?, backend, text(workload, "workload")?).map_err(fail)?;
        put(out, KvtConfig(cfg));
        Ok(())
    })
}

/// Parses a TOML run configuration.
///
/// # Safety
/// `toml` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn kvt_config_parse(toml: *const c_char, out: *mut *mut KvtConfig) -> KvtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = RunConfig::parse(text(toml, "toml")?).map_err(fail)?;
        put(out, KvtConfig(cfg));
        Ok(())
    })
}

/// # Safety
/// `cfg` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn kvt_config_set_seed(cfg: *mut KvtConfig, seed: u64) -> KvtStatus {
    guard(|| {
        let c = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        c.0.set_seed(seed);
        Ok(())
    })
}

/// # Safety
/// `cfg` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kvt_config_free(cfg: *mut KvtConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs one simulation. With `trace_jsonl` null the workload is generated
/// from the configuration; otherwise it holds the trace file contents.
///
/// # Safety
/// `cfg` is a live handle, `trace_jsonl` is null or NUL-terminated, `out`
/// is writable.
#[no_mangle]
pub unsafe extern "C" fn kvt_simulate(cfg: *const KvtConfig, trace_jsonl: *const c_char, out: *mut *mut KvtReport) -> KvtStatus {
    guard(|| {
        let c = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let trace = if trace_jsonl.is_null() {
            None
        } else {
            Some(parse_trace(text(trace_jsonl, "trace_jsonl")?.as_bytes()).map_err(fail)?)
        };
        let point = Point {
            label: "ffi".into(),
            cfg: c.0.clone(),
            pattern: None,
        };
        let (output, _) = point.simulate(trace.as_deref()).map_err(fail)?;
        put(out, KvtReport(output));
        Ok(())
    })
}

/// # Safety
/// `report` is a live handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn kvt_report_summary(report: *const KvtReport, out: *mut KvtSummary) -> KvtStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let a = &r.0.report.aggregate;
        *out = KvtSummary {
            requests: a.requests,
            ttft_mean: a.ttft_mean,
            ttft_p50: a.ttft_p50,
            ttft_p90: a.ttft_p90,
            output_throughput: a.output_throughput,
            stall_fraction: a.stall_fraction,
            hit_rate: a.hit_rate,
            compute_tokens: a.compute_tokens,
            deferrals: a.deferrals,
            bundle_hits: a.bundle_hits,
        };
        Ok(())
    })
}

/// The full report as stable JSON, or null on failure. Free with
/// [`kvt_string_free`].
///
/// # Safety
/// `report` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kvt_report_json(report: *const KvtReport) -> *mut c_char {
    let mut s = ptr::null_mut();
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let json = to_stable_json(&r.0.report).map_err(fail)?;
        s = CString::new(json).map_err(|_| KvtStatus::Simulation)?.into_raw();
        Ok(())
    });
    s
}

/// # Safety
/// `report` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kvt_report_free(report: *mut KvtReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Creates an empty prefix index with `page_size` tokens per page.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn kvt_tree_new(page_size: u32, out: *mut *mut KvtTree) -> KvtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let geometry = KvGeometry {
            num_layers: 1,
            kv_bytes_per_token_per_layer: 1,
            page_size_tokens: page_size,
        };
        geometry.validate().map_err(fail)?;
        let specs: Vec<TierSpec> = TierId::ALL
            .iter()
            .map(|&tier| TierSpec {
                tier,
                capacity_bytes: u64::MAX / 2,
                layout: if tier == TierId::Device { Layout::LayerFirst } else { Layout::PageFirst },
            })
            .collect();
        let store = TierStore::new(geometry, &specs).map_err(fail)?;
        let tree = HiRadixTree::new(page_size as usize, geometry.page_bytes(), &TierId::ALL);
        put(out, KvtTree { tree, store });
        Ok(())
    })
}

/// # Safety
/// `tokens` is null only when `len` is 0.
unsafe fn tokens<'a>(p: *const u32, len: usize) -> Result<&'a [u32], KvtStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null("tokens"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Records `tokens` as cached at `tier`. Trailing tokens short of a full
/// page are ignored.
///
/// # Safety
/// `tree` is a live handle; `tokens` points to `len` readable values.
#[no_mangle]
pub unsafe extern "C" fn kvt_tree_insert(tree: *mut KvtTree, tokens_ptr: *const u32, len: usize, tier: KvtTier) -> KvtStatus {
    guard(|| {
        let t = tree.as_mut().ok_or_else(|| null("tree"))?;
        let seq = tokens(tokens_ptr, len)?;
        let tier = TierId::from(tier);
        let need = t.tree.missing_tokens(seq, 0, tier);
        let pages = t.store.allocate_pages(tier, need).map_err(fail)?;
        t.tree.insert_committed(seq, tier, pages).map_err(fail)?;
        Ok(())
    })
}

/// Longest cached prefix of `tokens`.
///
/// # Safety
/// `tree` is a live handle; `tokens` points to `len` readable values;
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn kvt_tree_match(tree: *mut KvtTree, tokens_ptr: *const u32, len: usize, out: *mut KvtMatch) -> KvtStatus {
    guard(|| {
        let t = tree.as_mut().ok_or_else(|| null("tree"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m = t.tree.match_prefix(tokens(tokens_ptr, len)?);
        *out = KvtMatch {
            matched: m.committed_tokens(),
            device: m.device_tokens,
            host: m.host_tokens,
            disk: m.disk_tokens,
        };
        Ok(())
    })
}

/// # Safety
/// `tree` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kvt_tree_free(tree: *mut KvtTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// Sustained bytes per second of DMA copies with the given per-operation
/// latency and queue depth.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn kvt_throughput_dma(
    per_op_latency_s: f64,
    max_concurrency: u32,
    link: KvtLink,
    chunk_size: u64,
    out: *mut f64,
) -> KvtStatus {
    let backend = IoBackendSpec::DmaCopy {
        per_op_latency_s,
        max_concurrency,
    };
    throughput(backend, link, chunk_size, out)
}

/// Sustained bytes per second of GPU copy kernels on `blocks` blocks.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn kvt_throughput_gpu_assist(
    blocks: u32,
    per_block_bandwidth: f64,
    link: KvtLink,
    chunk_size: u64,
    out: *mut f64,
) -> KvtStatus {
    throughput(IoBackendSpec::gpu_assist(blocks, per_block_bandwidth), link, chunk_size, out)
}

unsafe fn throughput(backend: IoBackendSpec, link: KvtLink, chunk_size: u64, out: *mut f64) -> KvtStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        backend.validate().map_err(fail)?;
        *out = sustained_throughput(&backend, &link.into(), chunk_size).map_err(fail)?;
        Ok(())
    })
}

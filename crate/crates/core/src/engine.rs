//! Event-driven serving simulation.
//!
//! One logical GPU alternates prefill batches and decode steps, with
//! prefill taking priority. The next prefill batch is planned when the
//! current one starts, so requests that arrive behind an in-flight shared
//! context can be deferred instead of recomputing it. Host loads overlap
//! compute layer by layer; new KV is backed up host-ward in the background.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::sync::Arc;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{interference_factors, plan_transfer, sustained_throughput, IoBackendSpec, LinkSpec};
use crate::metrics::{aggregate, BatchRow, Counters, RequestRow, SimReport};
use crate::scheduler::{
    defer_delay_hits, form_batch, plan_bubble_fill, BatchLimits, BatchPlan, Candidate, SchedulerConfig, SchedulerLogRecord,
};
use crate::tier::{transfer_chunk_size, KvGeometry, Layout, PageRef, TierId, TierSpec, TierStore};
use crate::tree::{HiRadixTree, SegmentKind, TokenId, TransientEvent, Writeback};
use crate::workload::{output_tokens, prompt_tokens, TraceRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeModel {
    /// Seconds per prefilled token.
    pub prefill_token_cost: f64,
    /// Seconds per (new token × attended token).
    pub prefill_attn_cost: f64,
    pub decode_step_base: f64,
    /// Seconds per active token in the decode batch.
    pub decode_step_per_token: f64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        Self {
            prefill_token_cost: 155e-6,
            prefill_attn_cost: 1e-9,
            decode_step_base: 5e-3,
            decode_step_per_token: 1e-8,
        }
    }
}

impl ComputeModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.prefill_token_cost,
            self.prefill_attn_cost,
            self.decode_step_base,
            self.decode_step_per_token,
        ];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("compute model costs must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// Total prefill compute for `new_tokens` attending over `attended`
    /// (the sum of new × context tokens per request).
    pub fn prefill_time(&self, new_tokens: u64, attended: f64) -> f64 {
        self.prefill_token_cost * new_tokens as f64 + self.prefill_attn_cost * attended
    }
}

/// Duration of one decode step.
pub fn decode_step_time(model: &ComputeModel, active_tokens: u64, decode_slowdown: f64) -> f64 {
    (model.decode_step_base + model.decode_step_per_token * active_tokens as f64) * (1.0 + decode_slowdown)
}

/// Layer-pipelined prefill: layer `l` computes once its KV has loaded and
/// layer `l - 1` has computed. Returns `(wall, stall)`.
pub fn prefill_wall_time(t_load: &[f64], t_comp: &[f64]) -> (f64, f64) {
    prefill_wall_time_after(t_load, t_comp, 0.0)
}

/// Same recurrence with compute unable to start before `offset`, the time
/// the GPU spends on decode steps placed in the loading bubble.
pub fn prefill_wall_time_after(t_load: &[f64], t_comp: &[f64], offset: f64) -> (f64, f64) {
    debug_assert_eq!(t_load.len(), t_comp.len());
    let mut load_finish = 0.0;
    let mut comp_finish = offset;
    for (l, c) in t_load.iter().zip(t_comp) {
        load_finish += l;
        comp_finish = f64::max(comp_finish, load_finish) + c;
    }
    let busy: f64 = t_comp.iter().sum::<f64>() + offset;
    (comp_finish, (comp_finish - busy).max(0.0))
}

/// Per-layer timing of one prefill batch, including any decode steps
/// slotted into its loading bubble.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefillSchedule {
    pub t_load: Vec<f64>,
    pub t_comp: Vec<f64>,
    pub bubble_steps: usize,
    pub step: f64,
    pub wall: f64,
    pub stall: f64,
}

/// Times `plan` on `cfg`. `io_busy` marks background copies still sharing
/// the GPU; `decode_active` and `active_tokens` describe the decode pool.
pub fn prefill_schedule(
    cfg: &EngineConfig,
    plan: &BatchPlan,
    io_busy: bool,
    decode_active: usize,
    active_tokens: u64,
) -> Result<PrefillSchedule> {
    let layers = cfg.geometry.num_layers as usize;
    let gpu = cfg.backend.is_gpu_assist();
    let load_bytes = plan.host_load_tokens as u64 * cfg.geometry.kv_bytes_per_token_per_layer;
    let t_load_layer = if load_bytes > 0 {
        load_bytes as f64 / sustained_throughput(&cfg.backend, &cfg.links.host_device, cfg.load_chunk())?
    } else {
        0.0
    };
    let io_active = gpu && (load_bytes > 0 || io_busy);
    let (prefill_slow, decode_slow) = interference_factors(&cfg.backend, io_active);
    let attended: f64 = plan.members.iter().map(|m| m.compute_tokens as f64 * m.total_tokens as f64).sum();
    let t_comp_layer = cfg.compute.prefill_time(plan.compute_tokens as u64, attended) / layers as f64 * (1.0 + prefill_slow);
    let mut t_load = vec![t_load_layer; layers];
    let t_comp = vec![t_comp_layer; layers];

    let mut step = decode_step_time(&cfg.compute, active_tokens, decode_slow);
    let total_load = t_load_layer * layers as f64;
    let total_comp = t_comp_layer * layers as f64;
    let mut steps = plan_bubble_fill(total_load, total_comp, decode_active, step, &cfg.scheduler).unwrap_or(0);
    let mut offset = 0.0;
    if steps > 0 {
        let (wall0, _) = prefill_wall_time(&t_load, &t_comp);
        let c = cfg.contention_factor;
        let slowed: Vec<f64> = t_load.iter().map(|l| l * (1.0 + c)).collect();
        let slowed_step = step * (1.0 + c);
        while steps > 0 && prefill_wall_time_after(&slowed, &t_comp, steps as f64 * slowed_step).0 > wall0 * (1.0 + 1e-12) {
            steps -= 1;
        }
        if steps > 0 {
            t_load = slowed;
            step = slowed_step;
            offset = steps as f64 * step;
        }
    }
    let (wall, stall) = prefill_wall_time_after(&t_load, &t_comp, offset);
    Ok(PrefillSchedule {
        t_load,
        t_comp,
        bubble_steps: steps,
        step,
        wall,
        stall,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Links {
    pub host_device: LinkSpec,
    pub disk_host: LinkSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub compute: ComputeModel,
    pub geometry: KvGeometry,
    pub tiers: Vec<TierSpec>,
    pub links: Links,
    /// Host–device copies.
    pub backend: IoBackendSpec,
    /// Disk–host copies.
    pub disk_backend: IoBackendSpec,
    /// Block quota for background backups under the GPU-assisted backend.
    pub backup_blocks: u32,
    pub scheduler: SchedulerConfig,
    pub max_inflight: usize,
    /// Delay between a conversation round finishing and the next arriving.
    pub thinking_time_s: f64,
    /// Mutual slowdown of bubble-fill decode and overlapping loads.
    pub contention_factor: f64,
    pub seed: u64,
    /// Check tree and allocator invariants after every event.
    #[serde(default)]
    pub check_invariants: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let geometry = KvGeometry {
            num_layers: 32,
            kv_bytes_per_token_per_layer: 4096,
            page_size_tokens: 32,
        };
        Self {
            compute: ComputeModel::default(),
            geometry,
            tiers: vec![
                TierSpec {
                    tier: TierId::Device,
                    capacity_bytes: 500_000 * geometry.bytes_per_token(),
                    layout: Layout::LayerFirst,
                },
                TierSpec {
                    tier: TierId::Host,
                    capacity_bytes: 1_000_000_000_000,
                    layout: Layout::PageFirst,
                },
            ],
            links: Links {
                host_device: LinkSpec::pcie5(),
                disk_host: LinkSpec::nvme(),
            },
            backend: IoBackendSpec::gpu_assist(2, 25e9),
            disk_backend: IoBackendSpec::DmaCopy {
                per_op_latency_s: 100e-6,
                max_concurrency: 64,
            },
            backup_blocks: 1,
            scheduler: SchedulerConfig::default(),
            max_inflight: 128,
            thinking_time_s: 0.0,
            contention_factor: 0.0,
            seed: 0,
            check_invariants: false,
        }
    }
}

impl EngineConfig {
    pub fn layout(&self, tier: TierId) -> Option<Layout> {
        self.tiers.iter().find(|t| t.tier == tier).map(|t| t.layout)
    }

    pub fn has_tier(&self, tier: TierId) -> bool {
        self.layout(tier).is_some()
    }

    /// Bytes per host-to-device copy operation.
    pub fn load_chunk(&self) -> u64 {
        let host = self.layout(TierId::Host).unwrap_or(Layout::LayerFirst);
        transfer_chunk_size(&self.geometry, host, Layout::LayerFirst)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.compute.validate()?;
        TierStore::new(self.geometry, &self.tiers)?;
        self.links.host_device.validate()?;
        self.links.disk_host.validate()?;
        self.backend.validate()?;
        self.disk_backend.validate()?;
        self.scheduler.validate()?;
        if self.max_inflight == 0 || self.backup_blocks == 0 {
            return Err(Error::Config("max_inflight and backup_blocks must be positive".into()));
        }
        if !(self.thinking_time_s >= 0.0) || !(self.contention_factor >= 0.0) {
            return Err(Error::Config("thinking_time_s and contention_factor must be ≥ 0".into()));
        }
        if self.has_tier(TierId::Disk) && !self.has_tier(TierId::Host) {
            return Err(Error::Config("a disk tier requires a host tier".into()));
        }
        if self.has_tier(TierId::Host) {
            sustained_throughput(&self.backend, &self.links.host_device, self.load_chunk())
                .map_err(|e| Error::Config(format!("host-device backend: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub report: SimReport,
    pub scheduler_log: Vec<SchedulerLogRecord>,
}

/// Replays `trace` under `cfg`.
pub fn run(trace: &[TraceRecord], cfg: &EngineConfig) -> Result<SimOutput> {
    cfg.validate()?;
    crate::workload::validate_trace(trace)?;
    let mut engine = Engine::new(trace, cfg)?;
    engine.run()?;
    engine.finish_report()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Blocked,
    Pending,
    Queued,
    Scheduled,
    Prefilling,
    Decoding,
    Finished,
}

#[derive(Debug, Clone, Copy, Default)]
struct Accounting {
    device_hit: u64,
    host_loaded: u64,
    disk_staged: u64,
    recomputed: u64,
}

#[derive(Debug, Clone, Copy)]
struct Prefetch {
    gen: u64,
    start: f64,
    end: f64,
    from: usize,
    tokens: usize,
}

#[derive(Debug)]
struct Req {
    rec: TraceRecord,
    conversational: bool,
    tokens: Option<Arc<[TokenId]>>,
    arrival: f64,
    phase: Phase,
    deferrals: u32,
    pinned: usize,
    generated: u32,
    ttft: f64,
    acct: Accounting,
    prefetch: Option<Prefetch>,
    staged: usize,
}

struct Prepared {
    plan: BatchPlan,
    members: Vec<usize>,
    reservation: Vec<PageRef>,
    log: SchedulerLogRecord,
}

struct Running {
    members: Vec<usize>,
    reservation: Vec<PageRef>,
    row: BatchRow,
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Arrival(usize),
    Kick,
    PrefillDone,
    DecodeStep { bubble: bool },
    Background(usize),
    PrefetchDone(usize, u64),
}

struct Event {
    time: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (time, seq)
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

struct BgJob {
    tokens: Arc<[TokenId]>,
    from: usize,
    to: TierId,
    writeback: Option<Writeback>,
}

struct Engine<'a> {
    cfg: &'a EngineConfig,
    tree: HiRadixTree,
    store: TierStore,
    reqs: Vec<Req>,
    children: HashMap<usize, Vec<usize>>,
    heap: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    queue: VecDeque<usize>,
    pending: VecDeque<usize>,
    inflight: usize,
    gpu_busy: bool,
    prepared: Option<Prepared>,
    running: Option<Running>,
    reserved_bytes: u64,
    decoding: Vec<usize>,
    backup_free: f64,
    disk_free: f64,
    gpu_io_until: f64,
    jobs: Vec<Option<BgJob>>,
    batches: Vec<BatchRow>,
    log: Vec<SchedulerLogRecord>,
    next_batch: usize,
    decode_steps: u64,
    prefetch_gen: u64,
    rows: Vec<RequestRow>,
    bytes_per_token: u64,
}

impl<'a> Engine<'a> {
    fn new(trace: &[TraceRecord], cfg: &'a EngineConfig) -> Result<Self> {
        let store = TierStore::new(cfg.geometry, &cfg.tiers)?;
        let tiers: Vec<TierId> = cfg.tiers.iter().map(|t| t.tier).collect();
        let tree = HiRadixTree::new(cfg.geometry.page_size_tokens as usize, cfg.geometry.page_bytes(), &tiers);
        let pos: HashMap<u64, usize> = trace.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
        let parents: std::collections::HashSet<u64> = trace.iter().filter_map(|r| r.depends_on).collect();
        let mut children: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut reqs = Vec::with_capacity(trace.len());
        let mut heap = BinaryHeap::new();
        let mut seq = 0;
        for (i, r) in trace.iter().enumerate() {
            let conversational = r.depends_on.is_some() || parents.contains(&r.id);
            if let Some(p) = r.depends_on {
                children.entry(pos[&p]).or_default().push(i);
            } else {
                heap.push(Event {
                    time: r.arrival_s,
                    seq,
                    ev: Ev::Arrival(i),
                });
                seq += 1;
            }
            reqs.push(Req {
                rec: r.clone(),
                conversational,
                tokens: None,
                arrival: r.arrival_s,
                phase: Phase::Blocked,
                deferrals: 0,
                pinned: 0,
                generated: 0,
                ttft: 0.0,
                acct: Accounting::default(),
                prefetch: None,
                staged: 0,
            });
        }
        Ok(Self {
            cfg,
            tree,
            store,
            reqs,
            children,
            heap,
            seq,
            now: 0.0,
            queue: VecDeque::new(),
            pending: VecDeque::new(),
            inflight: 0,
            gpu_busy: false,
            prepared: None,
            running: None,
            reserved_bytes: 0,
            decoding: Vec::new(),
            backup_free: 0.0,
            disk_free: 0.0,
            gpu_io_until: 0.0,
            jobs: Vec::new(),
            batches: Vec::new(),
            log: Vec::new(),
            next_batch: 0,
            decode_steps: 0,
            prefetch_gen: 0,
            rows: Vec::new(),
            bytes_per_token: cfg.geometry.bytes_per_token(),
        })
    }

    fn push(&mut self, time: f64, ev: Ev) {
        debug_assert!(time >= self.now);
        self.heap.push(Event { time, seq: self.seq, ev });
        self.seq += 1;
    }

    fn run(&mut self) -> Result<()> {
        while let Some(e) = self.heap.pop() {
            if e.time < self.now {
                return Err(Error::Invariant("event scheduled in the past".into()));
            }
            self.now = e.time;
            self.tree.set_clock(self.now);
            debug!("t={:.9} {:?}", self.now, e.ev);
            match e.ev {
                Ev::Arrival(i) => self.on_arrival(i),
                Ev::Kick => self.try_schedule()?,
                Ev::PrefillDone => self.on_prefill_done()?,
                Ev::DecodeStep { bubble } => self.on_decode_step(bubble)?,
                Ev::Background(j) => self.on_background(j)?,
                Ev::PrefetchDone(i, gen) => self.on_prefetch_done(i, gen)?,
            }
            if self.cfg.check_invariants {
                self.check_invariants()?;
            }
        }
        if let Some(r) = self.reqs.iter().find(|r| r.phase != Phase::Finished) {
            return Err(Error::Invariant(format!("request {} never finished ({:?})", r.rec.id, r.phase)));
        }
        Ok(())
    }

    fn check_invariants(&self) -> Result<()> {
        self.tree.check_invariants()?;
        let dev = self.tree.resident_bytes(TierId::Device) + self.reserved_bytes;
        if dev != self.store.usage(TierId::Device) {
            return Err(Error::Invariant(format!(
                "device usage {} differs from tree plus reservations {dev}",
                self.store.usage(TierId::Device)
            )));
        }
        for t in [TierId::Host, TierId::Disk] {
            if self.tree.resident_bytes(t) != self.store.usage(t) {
                return Err(Error::Invariant(format!("{t} usage differs from tree residency")));
            }
        }
        Ok(())
    }

    fn tokens(&self, i: usize) -> Arc<[TokenId]> {
        self.reqs[i].tokens.clone().expect("tokens of an admitted request")
    }

    fn on_arrival(&mut self, i: usize) {
        self.reqs[i].arrival = self.now;
        if self.inflight < self.cfg.max_inflight {
            self.admit(i);
        } else {
            self.reqs[i].phase = Phase::Pending;
            self.pending.push_back(i);
        }
    }

    fn admit(&mut self, i: usize) {
        self.inflight += 1;
        let r = &mut self.reqs[i];
        r.phase = Phase::Queued;
        r.tokens = Some(prompt_tokens(&r.rec, r.conversational, self.cfg.seed).into());
        self.queue.push_back(i);
        self.start_prefetch(i);
        self.push(self.now, Ev::Kick);
    }

    // ---- cache plumbing ----

    fn release(&mut self, pages: &[PageRef]) -> Result<()> {
        self.store.release_pages(pages).map(|_| ())
    }

    /// Evicts from `tier` until `bytes` are free, scheduling write-backs.
    fn handle_pressure(&mut self, tier: TierId, bytes: u64) -> Result<()> {
        let plan = self.tree.evict(tier, bytes, self.now)?;
        self.release(&plan.released_pages)?;
        debug!("evict {tier}: {} tokens, {} write-backs", plan.victim_tokens, plan.writebacks.len());
        for wb in plan.writebacks {
            let tokens: Arc<[TokenId]> = wb.path.clone().into();
            let (from, to, bytes) = (wb.start, wb.to, wb.bytes);
            self.schedule_background(tokens, from, to, bytes, Some(wb))?;
        }
        Ok(())
    }

    fn allocate(&mut self, tier: TierId, tokens: usize) -> Result<Vec<PageRef>> {
        match self.store.allocate_pages(tier, tokens) {
            Err(Error::Capacity { shortfall, .. }) => {
                self.handle_pressure(tier, shortfall)?;
                self.store.allocate_pages(tier, tokens)
            }
            other => other,
        }
    }

    /// Makes `tokens[from..]` resident at `tier`. Returns false when the
    /// tier cannot make room.
    fn cache_range(&mut self, tokens: &[TokenId], from: usize, tier: TierId) -> Result<bool> {
        for _ in 0..4 {
            let missing = self.tree.missing_tokens(tokens, from, tier);
            if missing == 0 {
                return Ok(true);
            }
            let pages = match self.allocate(tier, missing) {
                Ok(p) => p,
                Err(Error::Capacity { .. } | Error::Pressure { .. }) => return Ok(false),
                Err(e) => return Err(e),
            };
            if self.tree.missing_tokens(tokens, from, tier) != missing {
                // eviction reshaped the path; retry with a fresh count
                self.release(&pages)?;
                continue;
            }
            match self.tree.insert_range(tokens, from, tier, pages.clone()) {
                Ok(_) => return Ok(true),
                Err(_) => {
                    self.release(&pages)?;
                    return Ok(false);
                }
            }
        }
        Ok(false)
    }

    fn schedule_background(&mut self, tokens: Arc<[TokenId]>, from: usize, to: TierId, bytes: u64, writeback: Option<Writeback>) -> Result<()> {
        if bytes == 0 {
            return Ok(());
        }
        let cfg = self.cfg;
        let host = cfg.layout(TierId::Host).unwrap_or(Layout::LayerFirst);
        let (backend, link, chunk, channel_free) = match to {
            TierId::Host => (
                cfg.backend.with_blocks(cfg.backup_blocks),
                &cfg.links.host_device,
                transfer_chunk_size(&cfg.geometry, Layout::LayerFirst, host),
                self.backup_free,
            ),
            TierId::Disk => (
                cfg.disk_backend.clone(),
                &cfg.links.disk_host,
                transfer_chunk_size(&cfg.geometry, host, cfg.layout(TierId::Disk).unwrap_or(Layout::LayerFirst)),
                self.disk_free,
            ),
            TierId::Device => return Err(Error::Invariant("background copies never target the device".into())),
        };
        let start = self.now.max(channel_free);
        let job = plan_transfer(bytes, chunk, (to, to), &backend, link, start, false)?;
        let end = job.end();
        match to {
            TierId::Host => {
                self.backup_free = end;
                if backend.is_gpu_assist() {
                    self.gpu_io_until = self.gpu_io_until.max(end);
                }
            }
            _ => self.disk_free = end,
        }
        self.jobs.push(Some(BgJob {
            tokens,
            from,
            to,
            writeback,
        }));
        let j = self.jobs.len() - 1;
        self.push(end, Ev::Background(j));
        Ok(())
    }

    fn on_background(&mut self, j: usize) -> Result<()> {
        let job = self.jobs[j].take().expect("background job runs once");
        let ok = self.cache_range(&job.tokens, job.from, job.to)?;
        if !ok {
            if let Some(wb) = &job.writeback {
                self.tree.cancel_writeback(wb);
            }
        }
        Ok(())
    }

    fn backup(&mut self, tokens: Arc<[TokenId]>) -> Result<()> {
        if !self.cfg.has_tier(TierId::Host) {
            return Ok(());
        }
        let missing = self.tree.missing_tokens(&tokens, 0, TierId::Host);
        self.schedule_background(tokens, 0, TierId::Host, missing as u64 * self.bytes_per_token, None)
    }

    // ---- disk prefetch ----

    fn start_prefetch(&mut self, i: usize) {
        if !self.cfg.has_tier(TierId::Disk) {
            return;
        }
        let tokens = self.tokens(i);
        let m = self.tree.match_prefix(&tokens);
        let mut from = 0;
        let mut disk = 0;
        for s in &m.segments {
            match s.kind {
                SegmentKind::Tier(TierId::Disk) => disk += s.tokens,
                SegmentKind::Tier(_) if disk == 0 => from += s.tokens,
                _ => break,
            }
        }
        let cap = self.cfg.geometry.align_down(self.reqs[i].rec.context_len as usize);
        let disk = disk.min(cap.saturating_sub(from));
        if disk == 0 {
            return;
        }
        let cfg = self.cfg;
        let chunk = transfer_chunk_size(
            &cfg.geometry,
            cfg.layout(TierId::Disk).expect("disk configured"),
            cfg.layout(TierId::Host).expect("host configured"),
        );
        let Ok(job) = plan_transfer(
            disk as u64 * self.bytes_per_token,
            chunk,
            (TierId::Disk, TierId::Host),
            &cfg.disk_backend,
            &cfg.links.disk_host,
            self.now.max(self.disk_free),
            true,
        ) else {
            return;
        };
        self.disk_free = job.end();
        self.prefetch_gen += 1;
        let gen = self.prefetch_gen;
        self.reqs[i].prefetch = Some(Prefetch {
            gen,
            start: job.start,
            end: job.end(),
            from,
            tokens: disk,
        });
        self.push(job.end(), Ev::PrefetchDone(i, gen));
    }

    fn stage(&mut self, i: usize, p: Prefetch, tokens: usize) -> Result<()> {
        let n = self.cfg.geometry.align_down(tokens);
        if n == 0 {
            return Ok(());
        }
        let seq = self.tokens(i);
        if self.cache_range(&seq[..p.from + n], p.from, TierId::Host)? {
            self.reqs[i].staged += n;
        }
        Ok(())
    }

    fn on_prefetch_done(&mut self, i: usize, gen: u64) -> Result<()> {
        match self.reqs[i].prefetch {
            Some(p) if p.gen == gen => {
                self.reqs[i].prefetch = None;
                self.stage(i, p, p.tokens)
            }
            _ => Ok(()),
        }
    }

    /// Stops an in-flight prefetch, keeping the part already copied.
    fn cancel_prefetch(&mut self, i: usize) -> Result<()> {
        let Some(p) = self.reqs[i].prefetch.take() else { return Ok(()) };
        let frac = if self.now >= p.end {
            1.0
        } else if self.now <= p.start {
            0.0
        } else {
            (self.now - p.start) / (p.end - p.start)
        };
        let done = (frac * p.tokens as f64).floor() as usize;
        debug!("cancel prefetch of request {}: {done}/{} tokens staged", self.reqs[i].rec.id, p.tokens);
        self.stage(i, p, done)
    }

    // ---- scheduling ----

    fn profile(&mut self, i: usize) -> Candidate {
        let tokens = self.tokens(i);
        let m = self.tree.match_prefix(&tokens);
        let (mut dev, mut host) = (0usize, 0usize);
        for s in &m.segments {
            match s.kind {
                SegmentKind::Tier(TierId::Device) => dev += s.tokens,
                SegmentKind::Tier(TierId::Host) => host += s.tokens,
                _ => break,
            }
        }
        let r = &self.reqs[i];
        let cap = (r.rec.context_len as usize).min(tokens.len() - 1);
        if dev + host > cap {
            let excess = dev + host - cap;
            let cut = excess.min(host);
            host -= cut;
            dev -= excess - cut;
        }
        Candidate {
            id: i as u64,
            tokens,
            context_len: r.rec.context_len as usize,
            device_hit: dev,
            host_load: host,
            deferrals: r.deferrals,
        }
    }

    fn device_budget_tokens(&self) -> usize {
        let cap = self.store.capacity(TierId::Device);
        let held = self.tree.pinned_bytes(TierId::Device) + self.reserved_bytes;
        (cap.saturating_sub(held) / self.bytes_per_token) as usize
    }

    fn pin(&mut self, i: usize, n: usize) -> Result<()> {
        let tokens = self.tokens(i);
        self.tree.adjust_refs(&tokens[..n], 1)?;
        self.reqs[i].pinned = n;
        Ok(())
    }

    fn unpin(&mut self, i: usize) -> Result<()> {
        let n = std::mem::take(&mut self.reqs[i].pinned);
        if n > 0 {
            let tokens = self.tokens(i);
            self.tree.adjust_refs(&tokens[..n], -1)?;
        }
        Ok(())
    }

    fn plan_batch(&mut self) -> Result<Option<Prepared>> {
        if self.queue.is_empty() {
            return Ok(None);
        }
        let keep: Vec<Arc<[TokenId]>> = match &self.running {
            Some(r) => r.members.iter().map(|&i| self.tokens(i)).collect(),
            None => Vec::new(),
        };
        let keep_refs: Vec<&[TokenId]> = keep.iter().map(|t| &t[..]).collect();
        self.tree.clear_transient_except(&keep_refs);

        let sched = &self.cfg.scheduler;
        let queued: Vec<usize> = self.queue.drain(..).collect();
        let cands: Vec<Candidate> = queued.into_iter().map(|i| self.profile(i)).collect();
        let (eligible, deferred) = defer_delay_hits(cands, &mut self.tree, sched);
        for d in &deferred {
            self.reqs[d.id as usize].deferrals = d.deferrals;
        }
        let deferred_ids: Vec<usize> = deferred.iter().map(|c| c.id as usize).collect();
        if eligible.is_empty() {
            self.queue.extend(deferred_ids);
            return Ok(None);
        }
        let limits = BatchLimits {
            max_batch_tokens: sched.max_batch_tokens,
            device_budget_tokens: self.device_budget_tokens(),
        };
        let (plan, leftover) = form_batch(eligible, sched, limits);
        let mut members: Vec<usize> = plan.members.iter().map(|m| m.id as usize).collect();
        let mut requeue: VecDeque<usize> = deferred_ids.iter().copied().chain(leftover.iter().map(|c| c.id as usize)).collect();
        for &i in &members {
            self.cancel_prefetch(i)?;
        }

        let fifo = SchedulerConfig {
            balanced_batching_enabled: false,
            ..sched.clone()
        };
        let unlimited = BatchLimits {
            max_batch_tokens: usize::MAX,
            device_budget_tokens: usize::MAX,
        };
        // failed allocations leave the tree untouched and pinned prefixes
        // cannot be evicted, so the profiles stay valid while shrinking
        let mut cands: Vec<Candidate> = members.iter().map(|&i| self.profile(i)).collect();
        let (mut plan, _) = form_batch(cands.clone(), &fifo, unlimited);
        for c in &cands {
            self.pin(c.id as usize, c.cached())?;
        }
        let reservation = loop {
            match self.allocate(TierId::Device, plan.device_tokens()) {
                Ok(pages) => break pages,
                Err(Error::Capacity { .. } | Error::Pressure { .. }) => {
                    let last = members.pop().expect("non-empty");
                    self.unpin(last)?;
                    cands.pop();
                    requeue.push_front(last);
                    if members.is_empty() {
                        let held = self.running.is_some() || !self.decoding.is_empty() || self.reserved_bytes > 0;
                        if held {
                            // wait for running work to release device memory
                            self.queue = requeue;
                            return Ok(None);
                        }
                        return Err(Error::Config(format!(
                            "device capacity cannot hold request {} ({} tokens)",
                            self.reqs[last].rec.id,
                            plan.device_tokens() + plan.device_hit_tokens
                        )));
                    }
                    plan.pop();
                }
                Err(e) => return Err(e),
            }
        };
        self.reserved_bytes += reservation.len() as u64 * self.cfg.geometry.page_bytes();
        self.queue = requeue;

        for c in &cands {
            let i = c.id as usize;
            if self.tree.path_transient_tokens(&c.tokens) > 0 {
                self.tree.transition_transient(&c.tokens, TransientEvent::Dispatch, None)?;
            }
            let r = &mut self.reqs[i];
            let staged = r.staged.min(c.host_load);
            r.acct = Accounting {
                device_hit: c.device_hit as u64,
                host_loaded: (c.host_load - staged) as u64,
                disk_staged: staged as u64,
                recomputed: (c.context_len - c.cached()) as u64,
            };
            r.phase = Phase::Scheduled;
        }
        let trace_id = |i: usize| self.reqs[i].rec.id;
        let log = SchedulerLogRecord {
            batch: self.next_batch,
            time: self.now,
            members: members.iter().map(|&i| trace_id(i)).collect(),
            compute_tokens: plan.compute_tokens,
            host_load_tokens: plan.host_load_tokens,
            ratio: plan.load_compute_ratio(),
            deferred: deferred_ids.iter().map(|&i| trace_id(i)).collect(),
            deferral_counts: deferred_ids.iter().map(|&i| self.reqs[i].deferrals).collect(),
            bundle_groups: plan
                .bundle_groups()
                .into_iter()
                .map(|g| g.into_iter().map(|i| trace_id(i as usize)).collect())
                .collect(),
            bubble_steps: 0,
        };
        self.next_batch += 1;
        Ok(Some(Prepared {
            plan,
            members,
            reservation,
            log,
        }))
    }

    fn try_schedule(&mut self) -> Result<()> {
        if self.gpu_busy {
            return Ok(());
        }
        if let Some(p) = self.prepared.take() {
            return self.start_batch(p);
        }
        if let Some(p) = self.plan_batch()? {
            return self.start_batch(p);
        }
        if !self.decoding.is_empty() {
            self.start_decode_step(false);
        }
        Ok(())
    }

    fn active_tokens(&self) -> u64 {
        self.decoding
            .iter()
            .map(|&i| {
                let r = &self.reqs[i];
                (r.rec.context_len + r.rec.query_len + r.generated) as u64
            })
            .sum()
    }

    fn start_batch(&mut self, p: Prepared) -> Result<()> {
        let cfg = self.cfg;
        let plan = &p.plan;
        let io_busy = self.gpu_io_until > self.now;
        let t = prefill_schedule(cfg, plan, io_busy, self.decoding.len(), self.active_tokens())?;
        let (wall, stall, steps, step) = (t.wall, t.stall, t.bubble_steps, t.step);
        let total_comp: f64 = t.t_comp.iter().sum();
        let t_load = t.t_load;
        if cfg.backend.is_gpu_assist() && plan.host_load_tokens > 0 {
            self.gpu_io_until = self.gpu_io_until.max(self.now + t_load.iter().sum::<f64>());
        }
        for k in 1..=steps {
            self.push(self.now + k as f64 * step, Ev::DecodeStep { bubble: true });
        }
        self.push(self.now + wall, Ev::PrefillDone);
        for &i in &p.members {
            self.reqs[i].phase = Phase::Prefilling;
        }
        let row = BatchRow {
            batch: p.log.batch as u64,
            start: self.now,
            requests: p.members.len() as u64,
            compute_tokens: plan.compute_tokens as u64,
            host_load_tokens: plan.host_load_tokens as u64,
            ratio: plan.load_compute_ratio(),
            load_time: t_load.iter().sum(),
            compute_time: total_comp,
            wall,
            stall,
            bubble_steps: steps as u64,
            bundle_hits: plan.bundle_hits as u64,
        };
        debug!(
            "batch {} start: {} requests, compute {}, load {}, wall {wall:.6}, stall {stall:.6}, bubble {steps}",
            row.batch, row.requests, row.compute_tokens, row.host_load_tokens
        );
        let mut log = p.log;
        log.bubble_steps = steps;
        self.log.push(log);
        self.running = Some(Running {
            members: p.members,
            reservation: p.reservation,
            row,
        });
        self.gpu_busy = true;
        self.prepared = self.plan_batch()?;
        Ok(())
    }

    fn on_prefill_done(&mut self) -> Result<()> {
        let run = self.running.take().expect("a running batch");
        self.release(&run.reservation)?;
        self.reserved_bytes -= run.reservation.len() as u64 * self.cfg.geometry.page_bytes();
        for &i in &run.members {
            self.commit(i)?;
        }
        self.batches.push(run.row);
        self.gpu_busy = false;
        self.try_schedule()
    }

    fn commit(&mut self, i: usize) -> Result<()> {
        let tokens = self.tokens(i);
        let cached = self.cache_range(&tokens, 0, TierId::Device)?;
        self.unpin(i)?;
        if !cached && self.tree.path_transient_tokens(&tokens) > 0 {
            self.tree.transition_transient(&tokens, TransientEvent::Abort, None)?;
        }
        let r = &mut self.reqs[i];
        r.ttft = self.now - r.arrival;
        r.generated = 1;
        if cached {
            self.pin(i, tokens.len())?;
            self.backup(tokens)?;
        }
        if self.reqs[i].rec.output_len <= 1 {
            self.finish(i)
        } else {
            self.reqs[i].phase = Phase::Decoding;
            self.decoding.push(i);
            Ok(())
        }
    }

    fn start_decode_step(&mut self, bubble: bool) {
        let io_active = self.cfg.backend.is_gpu_assist() && self.gpu_io_until > self.now;
        let (_, slow) = interference_factors(&self.cfg.backend, io_active);
        let step = decode_step_time(&self.cfg.compute, self.active_tokens(), slow);
        self.gpu_busy = true;
        self.push(self.now + step, Ev::DecodeStep { bubble });
    }

    fn on_decode_step(&mut self, bubble: bool) -> Result<()> {
        self.decode_steps += 1;
        let active = std::mem::take(&mut self.decoding);
        for i in active {
            self.reqs[i].generated += 1;
            if self.reqs[i].generated >= self.reqs[i].rec.output_len {
                self.finish(i)?;
            } else {
                self.decoding.push(i);
            }
        }
        if !bubble {
            self.gpu_busy = false;
            self.try_schedule()?;
        }
        Ok(())
    }

    fn finish(&mut self, i: usize) -> Result<()> {
        let now = self.now;
        if self.reqs[i].conversational {
            let r = &self.reqs[i];
            let mut full: Vec<TokenId> = self.tokens(i).to_vec();
            full.extend(output_tokens(&r.rec, true, self.cfg.seed));
            let full: Arc<[TokenId]> = full.into();
            if self.cache_range(&full, 0, TierId::Device)? {
                self.backup(full)?;
            }
        }
        self.unpin(i)?;
        let r = &mut self.reqs[i];
        r.phase = Phase::Finished;
        r.tokens = None;
        r.prefetch = None;
        self.rows.push(RequestRow {
            id: r.rec.id,
            arrival: r.arrival,
            ttft: r.ttft,
            e2e: now - r.arrival,
            context_len: r.rec.context_len,
            query_len: r.rec.query_len,
            output_len: r.rec.output_len,
            device_hit_tokens: r.acct.device_hit,
            host_loaded_tokens: r.acct.host_loaded,
            disk_staged_tokens: r.acct.disk_staged,
            recomputed_tokens: r.acct.recomputed,
            deferrals: r.deferrals,
        });
        self.inflight -= 1;
        while self.inflight < self.cfg.max_inflight {
            let Some(p) = self.pending.pop_front() else { break };
            self.admit(p);
        }
        if let Some(kids) = self.children.remove(&i) {
            for c in kids {
                let t = self.reqs[c].rec.arrival_s.max(now + self.cfg.thinking_time_s);
                self.push(t, Ev::Arrival(c));
            }
        }
        Ok(())
    }

    fn finish_report(mut self) -> Result<SimOutput> {
        self.rows.sort_by_key(|r| r.id);
        let report = aggregate(
            self.rows,
            self.batches,
            Counters {
                decode_steps: self.decode_steps,
            },
        )?;
        Ok(SimOutput {
            report,
            scheduler_log: self.log,
        })
    }
}

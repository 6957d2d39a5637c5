//! Cache-aware prefill scheduling.
//!
//! Requests whose uncached prefix is already being produced by another
//! request are deferred. The rest are packed into batches that keep the
//! ratio of host loading to fresh computation under a bound, preferring
//! requests that share an uncached prefix with a batch member.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use crate::tree::common_prefix;
use crate::tree::{HiRadixTree, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub deferral_threshold: usize,
    pub loading_bound_ratio: f64,
    pub max_batch_tokens: usize,
    pub bubble_fill_enabled: bool,
    pub deferral_enabled: bool,
    pub balanced_batching_enabled: bool,
    /// Count a shared uncached prefix once per batch.
    pub dedup_enabled: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            deferral_threshold: 100,
            loading_bound_ratio: 100.0,
            max_batch_tokens: 32_768,
            bubble_fill_enabled: true,
            deferral_enabled: true,
            balanced_batching_enabled: true,
            dedup_enabled: true,
        }
    }
}

impl SchedulerConfig {
    /// Every optimization off: FIFO batches, no deferral, no dedup.
    pub fn baseline() -> Self {
        Self {
            bubble_fill_enabled: false,
            deferral_enabled: false,
            balanced_batching_enabled: false,
            dedup_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.deferral_threshold == 0 || !(self.loading_bound_ratio > 0.0) || self.max_batch_tokens == 0 {
            return Err(crate::Error::Config("scheduler thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// A queued request as seen by the scheduler.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: u64,
    /// Full prompt: context followed by query.
    pub tokens: Arc<[TokenId]>,
    pub context_len: usize,
    /// Tokens resident on the device.
    pub device_hit: usize,
    /// Tokens to load from host, directly after the device hit.
    pub host_load: usize,
    pub deferrals: u32,
}

impl Candidate {
    pub fn cached(&self) -> usize {
        self.device_hit + self.host_load
    }

    pub fn new_tokens(&self) -> usize {
        self.tokens.len() - self.cached()
    }
}

/// Tokens both requests would compute that are identical.
pub fn shared_uncached(a: &Candidate, b: &Candidate) -> usize {
    common_prefix(&a.tokens, &b.tokens).saturating_sub(a.cached().max(b.cached()))
}

fn shared_host(a: &Candidate, b: &Candidate) -> usize {
    let lcp = common_prefix(&a.tokens, &b.tokens);
    let hi = lcp.min(a.cached()).min(b.cached());
    let lo = a.device_hit.max(b.device_hit);
    hi.saturating_sub(lo)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchMember {
    pub id: u64,
    /// New tokens this member adds to the batch after dedup.
    pub compute_tokens: usize,
    pub host_load_tokens: usize,
    pub device_hit_tokens: usize,
    /// Uncached tokens before dedup.
    pub new_tokens: usize,
    pub context_len: usize,
    pub total_tokens: usize,
    pub bundle_hit: bool,
    pub group: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BatchPlan {
    pub members: Vec<BatchMember>,
    pub compute_tokens: usize,
    pub host_load_tokens: usize,
    pub device_hit_tokens: usize,
    pub bundle_hits: usize,
}

impl BatchPlan {
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.members.iter().map(|m| m.id).collect()
    }

    pub fn load_compute_ratio(&self) -> f64 {
        self.host_load_tokens as f64 / self.compute_tokens.max(1) as f64
    }

    /// Request ids partitioned by shared uncached prefix.
    pub fn bundle_groups(&self) -> Vec<Vec<u64>> {
        let mut groups: Vec<Vec<u64>> = Vec::new();
        for m in &self.members {
            if m.group == groups.len() {
                groups.push(Vec::new());
            }
            groups[m.group].push(m.id);
        }
        groups
    }

    /// Device tokens the batch needs for computed and loaded KV.
    pub fn device_tokens(&self) -> usize {
        self.compute_tokens + self.host_load_tokens
    }

    /// Drops the last member. Exact for FIFO plans, where a member's
    /// contribution depends only on the members before it.
    pub fn pop(&mut self) -> Option<BatchMember> {
        let m = self.members.pop()?;
        self.compute_tokens -= m.compute_tokens;
        self.host_load_tokens -= m.host_load_tokens;
        self.device_hit_tokens -= m.device_hit_tokens;
        self.bundle_hits -= m.bundle_hit as usize;
        Some(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchLimits {
    pub max_batch_tokens: usize,
    /// Device tokens available for new KV; `usize::MAX` for no limit.
    pub device_budget_tokens: usize,
}

struct Builder<'a> {
    cfg: &'a SchedulerConfig,
    limits: BatchLimits,
    plan: BatchPlan,
    admitted: Vec<Candidate>,
}

struct Contribution {
    compute: usize,
    host: usize,
    best_overlap: usize,
    best_member: Option<usize>,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a SchedulerConfig, limits: BatchLimits) -> Self {
        Self {
            cfg,
            limits,
            plan: BatchPlan::default(),
            admitted: Vec::new(),
        }
    }

    fn contribution(&self, c: &Candidate) -> Contribution {
        let mut best_overlap = 0;
        let mut best_member = None;
        let mut host_shared = 0;
        for (i, m) in self.admitted.iter().enumerate() {
            let o = shared_uncached(m, c);
            if o > best_overlap {
                best_overlap = o;
                best_member = Some(i);
            }
            host_shared = host_shared.max(shared_host(m, c));
        }
        let dedup = if self.cfg.dedup_enabled { best_overlap } else { 0 };
        Contribution {
            compute: c.new_tokens() - dedup,
            host: c.host_load - host_shared,
            best_overlap,
            best_member,
        }
    }

    fn fits(&self, k: &Contribution) -> bool {
        self.plan.compute_tokens + k.compute <= self.limits.max_batch_tokens
            && self.plan.device_tokens() + k.compute + k.host <= self.limits.device_budget_tokens
    }

    fn loading_bound(&self, k: &Contribution) -> bool {
        let host = (self.plan.host_load_tokens + k.host) as f64;
        let compute = (self.plan.compute_tokens + k.compute).max(1) as f64;
        host / compute > self.cfg.loading_bound_ratio
    }

    fn is_bundle_hit(&self, k: &Contribution) -> bool {
        k.best_overlap > self.cfg.deferral_threshold
    }

    fn add(&mut self, c: Candidate, k: Contribution) {
        let bundle_hit = self.is_bundle_hit(&k);
        let group = match (bundle_hit, k.best_member) {
            (true, Some(i)) => self.plan.members[i].group,
            _ => self.plan.members.iter().map(|m| m.group + 1).max().unwrap_or(0),
        };
        self.plan.compute_tokens += k.compute;
        self.plan.host_load_tokens += k.host;
        self.plan.device_hit_tokens += c.device_hit;
        self.plan.bundle_hits += bundle_hit as usize;
        self.plan.members.push(BatchMember {
            id: c.id,
            compute_tokens: k.compute,
            host_load_tokens: k.host,
            device_hit_tokens: c.device_hit,
            new_tokens: c.new_tokens(),
            context_len: c.context_len,
            total_tokens: c.tokens.len(),
            bundle_hit,
            group,
        });
        self.admitted.push(c);
    }

    /// Pulls every remaining request that bundle-hits the batch.
    fn add_bundle_hits(&mut self, queue: &mut VecDeque<Candidate>) {
        let mut i = 0;
        while i < queue.len() {
            let k = self.contribution(&queue[i]);
            if self.is_bundle_hit(&k) && self.fits(&k) {
                let c = queue.remove(i).expect("index in range");
                self.add(c, k);
            } else {
                i += 1;
            }
        }
    }
}

/// Forms one prefill batch from `queue`, returning it with the requests
/// left for later rounds in their new queue order.
///
/// The head always enters the batch, alone if it exceeds the limits. The
/// batch counts as full once a request that would be admitted does not fit.
pub fn form_batch(queue: Vec<Candidate>, cfg: &SchedulerConfig, limits: BatchLimits) -> (BatchPlan, Vec<Candidate>) {
    let mut q: VecDeque<Candidate> = queue.into();
    let mut b = Builder::new(cfg, limits);
    let Some(head) = q.pop_front() else {
        return (b.plan, Vec::new());
    };
    let k = b.contribution(&head);
    b.add(head, k);

    if !cfg.balanced_batching_enabled {
        while let Some(c) = q.pop_front() {
            let k = b.contribution(&c);
            if !b.fits(&k) {
                q.push_front(c);
                break;
            }
            b.add(c, k);
        }
        return (b.plan, q.into());
    }

    b.add_bundle_hits(&mut q);
    let mut deprioritized = Vec::new();
    while let Some(c) = q.pop_front() {
        let k = b.contribution(&c);
        if b.loading_bound(&k) {
            deprioritized.push(c);
        } else if b.fits(&k) {
            b.add(c, k);
            b.add_bundle_hits(&mut q);
        } else {
            q.push_front(c);
            break;
        }
    }
    let mut d = deprioritized.into_iter().peekable();
    while let Some(c) = d.peek() {
        let k = b.contribution(c);
        if !b.fits(&k) {
            break;
        }
        let c = d.next().expect("peeked");
        b.add(c, k);
    }
    let leftover = d.chain(q).collect();
    (b.plan, leftover)
}

/// Splits `queue` into requests that can run now and requests whose
/// uncached prefix overlaps in-progress work by more than the threshold.
/// Eligible requests get in-queue marks.
pub fn defer_delay_hits(queue: Vec<Candidate>, tree: &mut HiRadixTree, cfg: &SchedulerConfig) -> (Vec<Candidate>, Vec<Candidate>) {
    if !cfg.deferral_enabled {
        return (queue, Vec::new());
    }
    let mut eligible = Vec::new();
    let mut deferred = Vec::new();
    for mut c in queue {
        if tree.path_transient_tokens(&c.tokens) > cfg.deferral_threshold {
            c.deferrals += 1;
            deferred.push(c);
        } else {
            tree.mark_in_queue(&c.tokens);
            eligible.push(c);
        }
    }
    (eligible, deferred)
}

/// Whether adding a request with the given loads makes the batch
/// loading-bound.
pub fn loading_bound(batch: &BatchPlan, candidate_host: usize, candidate_new: usize, cfg: &SchedulerConfig) -> bool {
    let host = (batch.host_load_tokens + candidate_host) as f64;
    let compute = (batch.compute_tokens + candidate_new).max(1) as f64;
    host / compute > cfg.loading_bound_ratio
}

/// Decode steps that fit in the loading bubble of a prefill batch.
pub fn plan_bubble_fill(t_load: f64, t_comp: f64, decode_active: usize, step_time: f64, cfg: &SchedulerConfig) -> Option<usize> {
    if !cfg.bubble_fill_enabled || decode_active == 0 || t_load <= t_comp || step_time <= 0.0 {
        return None;
    }
    let steps = ((t_load - t_comp) / step_time).floor() as usize;
    (steps >= 1).then_some(steps)
}

/// One JSON-lines record per formed batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchedulerLogRecord {
    pub batch: usize,
    pub time: f64,
    pub members: Vec<u64>,
    pub compute_tokens: usize,
    pub host_load_tokens: usize,
    pub ratio: f64,
    pub deferred: Vec<u64>,
    pub deferral_counts: Vec<u32>,
    pub bundle_groups: Vec<Vec<u64>>,
    pub bubble_steps: usize,
}

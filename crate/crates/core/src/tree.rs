//! Tiered radix tree over token sequences.
//!
//! Every committed node records which tiers hold its KV pages. Transient
//! nodes carry no pages; they mark prefixes whose KV is waiting in the queue
//! or being computed, so later requests can detect that they would
//! recompute the same tokens.
//!
//! Matching is page granular: edges are always a whole number of pages and a
//! query only matches full pages. With a page size of one this is a plain
//! token radix tree.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tier::{PageRef, TierId};

pub type TokenId = u32;

/// Length of the common prefix of two token sequences.
pub fn common_prefix(a: &[TokenId], b: &[TokenId]) -> usize {
    const BLOCK: usize = 512;
    let n = a.len().min(b.len());
    let mut i = 0;
    while i + BLOCK <= n && a[i..i + BLOCK] == b[i..i + BLOCK] {
        i += BLOCK;
    }
    while i < n && a[i] == b[i] {
        i += 1;
    }
    i
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TransientMark {
    InQueue,
    InFlight,
}

impl TransientMark {
    fn name(self) -> &'static str {
        match self {
            TransientMark::InQueue => "in_queue",
            TransientMark::InFlight => "in_flight",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransientEvent {
    Dispatch,
    Commit,
    Abort,
}

#[derive(Debug, Clone)]
struct Node {
    parent: Option<NodeId>,
    edge: Vec<TokenId>,
    children: BTreeMap<Box<[TokenId]>, NodeId>,
    pages: [Option<Vec<PageRef>>; 3],
    /// Write-back in progress towards this tier.
    pending: [bool; 3],
    last_access: f64,
    ref_count: u32,
    transient: Option<TransientMark>,
}

impl Node {
    fn new(parent: Option<NodeId>, edge: Vec<TokenId>, now: f64) -> Self {
        Self {
            parent,
            edge,
            children: BTreeMap::new(),
            pages: [None, None, None],
            pending: [false; 3],
            last_access: now,
            ref_count: 0,
            transient: None,
        }
    }

    fn resident(&self, tier: TierId) -> bool {
        self.pages[tier.index()].is_some()
    }

    fn any_resident(&self) -> bool {
        self.pages.iter().any(Option::is_some)
    }

    /// Closest tier holding a readable copy.
    fn best_tier(&self) -> Option<TierId> {
        TierId::ALL.into_iter().find(|t| self.resident(*t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Tier(TierId),
    Transient(TransientMark),
}

/// One node's contribution to a match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MatchSegment {
    pub node: NodeId,
    pub tokens: usize,
    pub kind: SegmentKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MatchResult {
    pub total_matched: usize,
    pub device_tokens: usize,
    pub host_tokens: usize,
    pub disk_tokens: usize,
    pub transient_tokens: usize,
    pub segments: Vec<MatchSegment>,
}

impl MatchResult {
    pub fn node_path(&self) -> Vec<NodeId> {
        self.segments.iter().map(|s| s.node).collect()
    }

    /// Tokens matched on committed nodes, i.e. the reusable prefix.
    pub fn committed_tokens(&self) -> usize {
        self.device_tokens + self.host_tokens + self.disk_tokens
    }

    pub fn tier_tokens(&self, tier: TierId) -> usize {
        match tier {
            TierId::Device => self.device_tokens,
            TierId::Host => self.host_tokens,
            TierId::Disk => self.disk_tokens,
        }
    }
}

/// A node whose copy at `from` was dropped and must land at `to` before it
/// becomes readable again.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Writeback {
    /// Tokens from the root through the end of the victim node.
    pub path: Vec<TokenId>,
    /// Offset of the victim node's first token within `path`.
    pub start: usize,
    pub from: TierId,
    pub to: TierId,
    pub bytes: u64,
}

impl Writeback {
    pub fn tokens(&self) -> usize {
        self.path.len() - self.start
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvictionPlan {
    pub victim_tokens: usize,
    pub freed_bytes: u64,
    pub released_pages: Vec<PageRef>,
    pub writebacks: Vec<Writeback>,
}

#[derive(Debug, Clone)]
pub struct HiRadixTree {
    nodes: Vec<Option<Node>>,
    free: Vec<usize>,
    page_size: usize,
    page_bytes: u64,
    configured: [bool; 3],
    clock: f64,
}

const ROOT: NodeId = NodeId(0);

impl HiRadixTree {
    /// `tiers` lists the configured tiers; write-backs only target those.
    pub fn new(page_size: usize, page_bytes: u64, tiers: &[TierId]) -> Self {
        assert!(page_size >= 1, "page size must be positive");
        let mut configured = [false; 3];
        for t in tiers {
            configured[t.index()] = true;
        }
        Self {
            nodes: vec![Some(Node::new(None, Vec::new(), 0.0))],
            free: Vec::new(),
            page_size,
            page_bytes,
            configured,
            clock: 0.0,
        }
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn set_clock(&mut self, now: f64) {
        if now > self.clock {
            self.clock = now;
        }
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    fn node(&self, id: NodeId) -> &Node {
        self.nodes[id.0].as_ref().expect("live node")
    }

    fn node_mut(&mut self, id: NodeId) -> &mut Node {
        self.nodes[id.0].as_mut().expect("live node")
    }

    fn alloc(&mut self, node: Node) -> NodeId {
        if let Some(i) = self.free.pop() {
            self.nodes[i] = Some(node);
            NodeId(i)
        } else {
            self.nodes.push(Some(node));
            NodeId(self.nodes.len() - 1)
        }
    }

    fn aligned<'a>(&self, tokens: &'a [TokenId]) -> &'a [TokenId] {
        &tokens[..tokens.len() / self.page_size * self.page_size]
    }

    fn key(&self, tokens: &[TokenId]) -> Box<[TokenId]> {
        tokens[..self.page_size].into()
    }

    fn common_len(&self, a: &[TokenId], b: &[TokenId]) -> usize {
        common_prefix(a, b) / self.page_size * self.page_size
    }

    fn child(&self, of: NodeId, rest: &[TokenId]) -> Option<NodeId> {
        self.node(of).children.get(&rest[..self.page_size]).copied()
    }

    pub fn live_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_some()).count() - 1
    }

    /// Splits `id` after `at` tokens. The returned new node holds the top
    /// part; `id` keeps the bottom part and its children.
    fn split(&mut self, id: NodeId, at: usize) -> NodeId {
        debug_assert!(at > 0 && at.is_multiple_of(self.page_size));
        let page_size = self.page_size;
        let (parent, top_edge, top_pages, pending, last_access, ref_count, transient) = {
            let n = self.node_mut(id);
            debug_assert!(at < n.edge.len());
            let bottom = n.edge.split_off(at);
            let top_edge = std::mem::replace(&mut n.edge, bottom);
            let mut top_pages: [Option<Vec<PageRef>>; 3] = [None, None, None];
            for (i, p) in n.pages.iter_mut().enumerate() {
                if let Some(v) = p {
                    let rest = v.split_off(at / page_size);
                    top_pages[i] = Some(std::mem::replace(v, rest));
                }
            }
            (n.parent, top_edge, top_pages, n.pending, n.last_access, n.ref_count, n.transient)
        };
        let key = self.key(&top_edge);
        let bottom_key = self.key(&self.node(id).edge);
        let mut top = Node::new(parent, top_edge, last_access);
        top.pages = top_pages;
        top.pending = pending;
        top.ref_count = ref_count;
        top.transient = transient;
        top.children.insert(bottom_key, id);
        let top_id = self.alloc(top);
        self.node_mut(id).parent = Some(top_id);
        let parent = parent.expect("root is never split");
        self.node_mut(parent).children.insert(key, top_id);
        top_id
    }

    fn remove_node(&mut self, id: NodeId) {
        let n = self.nodes[id.0].take().expect("live node");
        debug_assert!(n.children.is_empty());
        if let Some(p) = n.parent {
            let key = self.key(&n.edge);
            self.node_mut(p).children.remove(&key);
        }
        self.free.push(id.0);
    }

    /// Longest stored prefix of `tokens` with its per-tier breakdown.
    ///
    /// Refreshes `last_access` on the committed nodes it passes through;
    /// never changes the tree's shape. Nodes whose only copy is still being
    /// written back end the match.
    pub fn match_prefix(&mut self, tokens: &[TokenId]) -> MatchResult {
        let q = self.aligned(tokens);
        let now = self.clock;
        let mut res = MatchResult::default();
        let mut cur = ROOT;
        let mut pos = 0;
        while pos < q.len() {
            let Some(c) = self.child(cur, &q[pos..]) else { break };
            let l = self.common_len(&self.node(c).edge, &q[pos..]);
            let node = self.node(c);
            let full = l == node.edge.len();
            let kind = match (node.transient, node.best_tier()) {
                (Some(m), _) => SegmentKind::Transient(m),
                (None, Some(t)) => SegmentKind::Tier(t),
                (None, None) => break,
            };
            match kind {
                SegmentKind::Tier(TierId::Device) => res.device_tokens += l,
                SegmentKind::Tier(TierId::Host) => res.host_tokens += l,
                SegmentKind::Tier(TierId::Disk) => res.disk_tokens += l,
                SegmentKind::Transient(_) => res.transient_tokens += l,
            }
            if let SegmentKind::Tier(_) = kind {
                self.node_mut(c).last_access = now;
            }
            res.segments.push(MatchSegment { node: c, tokens: l, kind });
            res.total_matched += l;
            pos += l;
            if !full {
                break;
            }
            cur = c;
        }
        res
    }

    /// Tokens in `tokens[from..]` (page aligned) without a copy at `tier`,
    /// including tokens not in the tree at all.
    pub fn missing_tokens(&self, tokens: &[TokenId], from: usize, tier: TierId) -> usize {
        let q = self.aligned(tokens);
        let mut cur = ROOT;
        let mut pos = 0;
        let mut missing = 0;
        while pos < q.len() {
            let Some(c) = self.child(cur, &q[pos..]) else { break };
            let n = self.node(c);
            let l = self.common_len(&n.edge, &q[pos..]);
            let lo = pos.max(from);
            if pos + l > lo && !n.resident(tier) {
                missing += pos + l - lo;
            }
            pos += l;
            if l < n.edge.len() {
                break;
            }
            cur = c;
        }
        missing + q.len().saturating_sub(pos.max(from))
    }

    /// Inserts `tokens` as committed at `tier`; `pages` must cover exactly
    /// the tokens not already resident there. Returns the newly resident
    /// token count.
    pub fn insert_committed(&mut self, tokens: &[TokenId], tier: TierId, pages: Vec<PageRef>) -> Result<usize> {
        self.insert_range(tokens, 0, tier, pages)
    }

    /// Like [`insert_committed`](Self::insert_committed) but only touches
    /// residency for positions at or after `from`. The path before `from`
    /// must already exist.
    pub fn insert_range(&mut self, tokens: &[TokenId], from: usize, tier: TierId, pages: Vec<PageRef>) -> Result<usize> {
        let q = self.aligned(tokens);
        if !from.is_multiple_of(self.page_size) || from > q.len() {
            return Err(Error::Invariant(format!("insert offset {from} is not a page boundary within the sequence")));
        }
        if self.prefix_exists_len(q) < from {
            return Err(Error::Invariant("insert_range requires an existing path before the offset".into()));
        }
        let need = self.missing_tokens(q, from, tier);
        let covered: usize = pages.iter().map(|p| p.tokens_covered as usize).sum();
        if covered != need || pages.iter().any(|p| p.tokens_covered as usize != self.page_size || p.tier != tier) {
            return Err(Error::Invariant(format!(
                "insert at {tier} needs {need} tokens of full {tier} pages, got {} pages covering {covered}",
                pages.len()
            )));
        }
        if need == 0 {
            return Ok(0);
        }
        let now = self.clock;
        let ps = self.page_size;
        let mut pages = pages.into_iter();
        let mut cur = ROOT;
        let mut pos = 0;
        while pos < q.len() {
            let c = match self.child(cur, &q[pos..]) {
                None => {
                    let mut n = Node::new(Some(cur), q[pos..].to_vec(), now);
                    n.pages[tier.index()] = Some(pages.by_ref().take((q.len() - pos) / ps).collect());
                    let key = self.key(&n.edge);
                    let id = self.alloc(n);
                    self.node_mut(cur).children.insert(key, id);
                    break;
                }
                Some(c) => c,
            };
            let l = self.common_len(&self.node(c).edge, &q[pos..]);
            let c = if l < self.node(c).edge.len() { self.split(c, l) } else { c };
            if pos < from && pos + l > from {
                // leave the part before `from` untouched; revisit the rest
                let top = self.split(c, from - pos);
                pos = from;
                cur = top;
                continue;
            }
            if pos >= from {
                let n = self.node_mut(c);
                if n.pages[tier.index()].is_none() {
                    n.pages[tier.index()] = Some(pages.by_ref().take(l / ps).collect());
                    n.pending[tier.index()] = false;
                    n.transient = None;
                }
                n.last_access = now;
            }
            pos += l;
            cur = c;
        }
        debug_assert!(pages.next().is_none());
        Ok(need)
    }

    fn prefix_exists_len(&self, q: &[TokenId]) -> usize {
        let mut cur = ROOT;
        let mut pos = 0;
        while pos < q.len() {
            let Some(c) = self.child(cur, &q[pos..]) else { break };
            let l = self.common_len(&self.node(c).edge, &q[pos..]);
            pos += l;
            if l < self.node(c).edge.len() {
                break;
            }
            cur = c;
        }
        pos
    }

    /// Records that a request in the waiting queue references `tokens`.
    ///
    /// Returns how many tokens matched transient nodes that already existed,
    /// then extends in-queue transient nodes over the rest of the uncached
    /// suffix. Committed prefixes are never covered by transient nodes.
    pub fn mark_in_queue(&mut self, tokens: &[TokenId]) -> usize {
        let q = self.aligned(tokens);
        let now = self.clock;
        let mut cur = ROOT;
        let mut pos = 0;
        let mut transient_matched = 0;
        while pos < q.len() {
            let Some(c) = self.child(cur, &q[pos..]) else { break };
            let n = self.node(c);
            if n.transient.is_none() && !n.any_resident() {
                // copy in transit; nothing can hang below it for now
                return transient_matched;
            }
            let l = self.common_len(&n.edge, &q[pos..]);
            let is_transient = n.transient.is_some();
            let c = if l < n.edge.len() { self.split(c, l) } else { c };
            if is_transient {
                transient_matched += l;
            }
            pos += l;
            cur = c;
        }
        if pos < q.len() {
            let mut n = Node::new(Some(cur), q[pos..].to_vec(), now);
            n.transient = Some(TransientMark::InQueue);
            let key = self.key(&n.edge);
            let id = self.alloc(n);
            self.node_mut(cur).children.insert(key, id);
        }
        transient_matched
    }

    /// Removes every in-queue transient node. Called at the start of each
    /// scheduling round so marks reflect only the current queue.
    pub fn clear_in_queue(&mut self) -> usize {
        let ids: Vec<NodeId> = self.dfs_order();
        let mut removed = 0;
        for id in ids.into_iter().rev() {
            let n = self.node(id);
            if n.transient == Some(TransientMark::InQueue) && n.children.is_empty() {
                self.remove_node(id);
                removed += 1;
            }
        }
        removed
    }

    /// Removes every transient node not on one of the `keep` paths.
    pub fn clear_transient_except(&mut self, keep: &[&[TokenId]]) -> usize {
        let mut kept = std::collections::HashSet::new();
        for seq in keep {
            let q = self.aligned(seq);
            let mut cur = ROOT;
            let mut pos = 0;
            while pos < q.len() {
                let Some(c) = self.child(cur, &q[pos..]) else { break };
                let n = self.node(c);
                let l = self.common_len(&n.edge, &q[pos..]);
                if n.transient.is_some() {
                    kept.insert(c);
                }
                pos += l;
                if l < n.edge.len() {
                    break;
                }
                cur = c;
            }
        }
        let mut removed = 0;
        for id in self.dfs_order().into_iter().rev() {
            let n = self.node(id);
            if n.transient.is_some() && !kept.contains(&id) && n.children.is_empty() {
                self.remove_node(id);
                removed += 1;
            }
        }
        removed
    }

    /// Transient nodes along the full path of `tokens`, splitting a partially
    /// covered final node so only the covered part is affected.
    fn transient_path(&mut self, tokens: &[TokenId]) -> (Vec<NodeId>, Option<NodeId>) {
        let q = self.aligned(tokens);
        let mut cur = ROOT;
        let mut pos = 0;
        let mut out = Vec::new();
        let mut last = None;
        while pos < q.len() {
            let Some(c) = self.child(cur, &q[pos..]) else { break };
            let l = self.common_len(&self.node(c).edge, &q[pos..]);
            let c = if l < self.node(c).edge.len() { self.split(c, l) } else { c };
            if self.node(c).transient.is_some() {
                out.push(c);
            }
            last = Some(c);
            pos += l;
            cur = c;
        }
        (out, last)
    }

    /// Number of transient tokens on the path of `tokens`.
    pub fn path_transient_tokens(&self, tokens: &[TokenId]) -> usize {
        let q = self.aligned(tokens);
        let mut cur = ROOT;
        let mut pos = 0;
        let mut n_tok = 0;
        while pos < q.len() {
            let Some(c) = self.child(cur, &q[pos..]) else { break };
            let n = self.node(c);
            let l = self.common_len(&n.edge, &q[pos..]);
            if n.transient.is_some() {
                n_tok += l;
            }
            pos += l;
            if l < n.edge.len() {
                break;
            }
            cur = c;
        }
        n_tok
    }

    /// Advances the transient nodes on the path of `tokens`.
    ///
    /// * `Dispatch` flips in-queue nodes to in-flight (in-flight ones shared
    ///   with another request are left alone).
    /// * `Commit` turns in-flight nodes into device-resident nodes backed by
    ///   `pages`; any in-queue node on the path is an error.
    /// * `Abort` removes the transient nodes that no other mark hangs from.
    pub fn transition_transient(&mut self, tokens: &[TokenId], event: TransientEvent, pages: Option<Vec<PageRef>>) -> Result<()> {
        let (path, last) = self.transient_path(tokens);
        if path.is_empty() {
            return Err(Error::TransientState {
                node: last.map_or(0, |n| n.0),
                expected: match event {
                    TransientEvent::Dispatch => "in_queue",
                    _ => "in_flight",
                },
                found: "committed",
            });
        }
        match event {
            TransientEvent::Dispatch => {
                for id in path {
                    let n = self.node_mut(id);
                    if n.transient == Some(TransientMark::InQueue) {
                        n.transient = Some(TransientMark::InFlight);
                    }
                }
            }
            TransientEvent::Commit => {
                if let Some(&bad) = path.iter().find(|id| self.node(**id).transient == Some(TransientMark::InQueue)) {
                    return Err(Error::TransientState {
                        node: bad.0,
                        expected: "in_flight",
                        found: TransientMark::InQueue.name(),
                    });
                }
                let pages = pages.unwrap_or_default();
                let need: usize = path.iter().map(|id| self.node(*id).edge.len()).sum();
                let covered: usize = pages.iter().map(|p| p.tokens_covered as usize).sum();
                if covered != need
                    || pages
                        .iter()
                        .any(|p| p.tokens_covered as usize != self.page_size || p.tier != TierId::Device)
                {
                    return Err(Error::Invariant(format!(
                        "commit needs device pages covering {need} tokens, got {covered}"
                    )));
                }
                let now = self.clock;
                let ps = self.page_size;
                let mut it = pages.into_iter();
                for id in path {
                    let n = self.node_mut(id);
                    let k = n.edge.len() / ps;
                    n.pages[TierId::Device.index()] = Some(it.by_ref().take(k).collect());
                    n.transient = None;
                    n.last_access = now;
                }
            }
            TransientEvent::Abort => {
                for id in path.into_iter().rev() {
                    if self.node(id).children.is_empty() {
                        self.remove_node(id);
                    }
                }
            }
        }
        Ok(())
    }

    /// Adjusts pin counts on every node covering `tokens` (page aligned).
    /// The prefix must exist; a node straddling its end is split first.
    pub fn adjust_refs(&mut self, tokens: &[TokenId], delta: i32) -> Result<()> {
        let q = self.aligned(tokens);
        if self.prefix_exists_len(q) < q.len() {
            return Err(Error::Invariant("adjust_refs on a prefix not in the tree".into()));
        }
        let mut ids = Vec::new();
        let mut cur = ROOT;
        let mut pos = 0;
        while pos < q.len() {
            let c = self.child(cur, &q[pos..]).expect("checked above");
            let l = self.common_len(&self.node(c).edge, &q[pos..]);
            let c = if l < self.node(c).edge.len() { self.split(c, l) } else { c };
            ids.push(c);
            pos += l;
            cur = c;
        }
        if delta < 0 {
            if let Some(bad) = ids.iter().find(|id| (self.node(**id).ref_count as i64) < -(delta as i64)) {
                return Err(Error::Invariant(format!("ref_count underflow on node {}", bad.0)));
            }
        }
        for id in ids {
            let n = self.node_mut(id);
            n.ref_count = (n.ref_count as i64 + delta as i64) as u32;
        }
        Ok(())
    }

    fn path_tokens(&self, id: NodeId) -> (Vec<TokenId>, usize) {
        let mut chain = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            if c == ROOT {
                break;
            }
            chain.push(c);
            cur = self.node(c).parent;
        }
        let mut path = Vec::new();
        let mut start = 0;
        for c in chain.into_iter().rev() {
            start = path.len();
            path.extend_from_slice(&self.node(c).edge);
        }
        (path, start)
    }

    fn writeback_target(&self, n: &Node, tier: TierId) -> Option<TierId> {
        let lower = tier.lower()?;
        if !self.configured[lower.index()] || n.resident(lower) || n.pending[lower.index()] {
            return None;
        }
        Some(lower)
    }

    fn evict_eligible(&self, id: NodeId, tier: TierId, res_children: &HashMap<NodeId, usize>, alive_children: &HashMap<NodeId, usize>) -> bool {
        if id == ROOT {
            return false;
        }
        let n = self.node(id);
        if n.transient.is_some() || n.ref_count > 0 || !n.resident(tier) {
            return false;
        }
        if res_children.get(&id).copied().unwrap_or(0) > 0 {
            return false;
        }
        let keeps_copy = TierId::ALL.into_iter().any(|t| t != tier && (n.resident(t) || n.pending[t.index()]));
        keeps_copy || self.writeback_target(n, tier).is_some() || alive_children.get(&id).copied().unwrap_or(0) == 0
    }

    /// Frees at least `bytes_needed` at `tier` by dropping unpinned,
    /// leaf-ward nodes in least-recently-used order.
    ///
    /// Victims without a copy in the next lower tier get a [`Writeback`];
    /// until the caller completes it the node is unreadable. Fails without
    /// changing anything when not enough bytes are evictable.
    pub fn evict(&mut self, tier: TierId, bytes_needed: u64, clock: f64) -> Result<EvictionPlan> {
        self.set_clock(clock);
        if bytes_needed == 0 {
            return Ok(EvictionPlan::default());
        }
        let ids = self.dfs_order();
        let mut res_children: HashMap<NodeId, usize> = HashMap::new();
        let mut alive_children: HashMap<NodeId, usize> = HashMap::new();
        for &id in &ids {
            let n = self.node(id);
            alive_children.insert(id, n.children.len());
            let r = n
                .children
                .values()
                .filter(|c| {
                    let cn = self.node(**c);
                    cn.resident(tier) || cn.pending[tier.index()]
                })
                .count();
            res_children.insert(id, r);
        }
        let mut heap = BinaryHeap::new();
        let key = |n: &Node, id: NodeId| Reverse((OrdF64(n.last_access), id));
        for &id in &ids {
            if self.evict_eligible(id, tier, &res_children, &alive_children) {
                heap.push(key(self.node(id), id));
            }
        }
        let mut victims = Vec::new();
        let mut freed = 0u64;
        while freed < bytes_needed {
            let Some(Reverse((_, id))) = heap.pop() else { break };
            let n = self.node(id);
            freed += n.pages[tier.index()].as_ref().map_or(0, |p| p.len() as u64) * self.page_bytes;
            victims.push(id);
            let keeps_copy = TierId::ALL.into_iter().any(|t| t != tier && (n.resident(t) || n.pending[t.index()]));
            let removed = !keeps_copy && self.writeback_target(n, tier).is_none();
            if let Some(p) = n.parent {
                *res_children.get_mut(&p).expect("parent counted") -= 1;
                if removed {
                    *alive_children.get_mut(&p).expect("parent counted") -= 1;
                }
                if self.evict_eligible(p, tier, &res_children, &alive_children) && !victims.contains(&p) {
                    heap.push(key(self.node(p), p));
                }
            }
        }
        if freed < bytes_needed {
            return Err(Error::Pressure {
                tier,
                shortfall: bytes_needed - freed,
            });
        }
        let mut plan = EvictionPlan {
            freed_bytes: freed,
            ..Default::default()
        };
        for id in victims {
            let target = self.writeback_target(self.node(id), tier);
            if let Some(to) = target {
                let (path, start) = self.path_tokens(id);
                let bytes = self.node(id).pages[tier.index()].as_ref().map_or(0, |p| p.len() as u64) * self.page_bytes;
                plan.writebacks.push(Writeback {
                    path,
                    start,
                    from: tier,
                    to,
                    bytes,
                });
            }
            let n = self.node_mut(id);
            let pages = n.pages[tier.index()].take().unwrap_or_default();
            plan.victim_tokens += n.edge.len();
            if let Some(to) = target {
                n.pending[to.index()] = true;
            }
            plan.released_pages.extend(pages);
            let n = self.node(id);
            let keeps = TierId::ALL.into_iter().any(|t| n.resident(t) || n.pending[t.index()]);
            if !keeps && n.children.is_empty() {
                self.remove_node(id);
            }
        }
        Ok(plan)
    }

    /// Completes a write-back: `pages` must cover the still-missing tokens
    /// of the victim at its destination tier.
    pub fn complete_writeback(&mut self, wb: &Writeback, pages: Vec<PageRef>) -> Result<usize> {
        self.insert_range(&wb.path, wb.start, wb.to, pages)
    }

    /// Drops a write-back whose destination could not accept it. The node
    /// is removed when nothing else references it.
    pub fn cancel_writeback(&mut self, wb: &Writeback) {
        let q = &wb.path[..];
        let mut cur = ROOT;
        let mut pos = 0;
        let mut hits = Vec::new();
        while pos < q.len() {
            let Some(c) = self.child(cur, &q[pos..]) else { break };
            let l = self.common_len(&self.node(c).edge, &q[pos..]);
            if pos >= wb.start {
                hits.push(c);
            }
            pos += l;
            if l < self.node(c).edge.len() {
                break;
            }
            cur = c;
        }
        for id in hits.into_iter().rev() {
            let n = self.node_mut(id);
            n.pending[wb.to.index()] = false;
            let n = self.node(id);
            let keeps = TierId::ALL.into_iter().any(|t| n.resident(t) || n.pending[t.index()]);
            if !keeps && n.transient.is_none() && n.children.is_empty() {
                self.remove_node(id);
            }
        }
    }

    /// Bytes held by committed nodes at `tier`.
    pub fn resident_bytes(&self, tier: TierId) -> u64 {
        self.nodes
            .iter()
            .flatten()
            .map(|n| n.pages[tier.index()].as_ref().map_or(0, |p| p.len() as u64))
            .sum::<u64>()
            * self.page_bytes
    }

    /// Bytes at `tier` pinned by a positive ref count.
    pub fn pinned_bytes(&self, tier: TierId) -> u64 {
        self.nodes
            .iter()
            .flatten()
            .filter(|n| n.ref_count > 0)
            .map(|n| n.pages[tier.index()].as_ref().map_or(0, |p| p.len() as u64))
            .sum::<u64>()
            * self.page_bytes
    }

    fn dfs_order(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![ROOT];
        while let Some(id) = stack.pop() {
            out.push(id);
            stack.extend(self.node(id).children.values().rev().copied());
        }
        out
    }

    /// Checks structural invariants; used by tests and debug builds.
    pub fn check_invariants(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invariant(m));
        for id in self.dfs_order() {
            let n = self.node(id);
            if id != ROOT {
                if n.edge.is_empty() || !n.edge.len().is_multiple_of(self.page_size) {
                    return bad(format!("node {} has edge length {}", id.0, n.edge.len()));
                }
                if n.transient.is_some() && (n.any_resident() || n.pending.iter().any(|p| *p)) {
                    return bad(format!("transient node {} holds pages", id.0));
                }
                for p in n.pages.iter().flatten() {
                    let covered: usize = p.iter().map(|r| r.tokens_covered as usize).sum();
                    if covered != n.edge.len() {
                        return bad(format!("node {} pages cover {covered} of {} tokens", id.0, n.edge.len()));
                    }
                }
            }
            for (k, c) in &n.children {
                let cn = self.node(*c);
                if cn.parent != Some(id) {
                    return bad(format!("node {} has a stale parent link", c.0));
                }
                if cn.edge.len() < self.page_size || cn.edge[..self.page_size] != k[..] {
                    return bad(format!("child key of node {} does not match its edge", c.0));
                }
                if n.transient.is_some() && cn.transient.is_none() {
                    return bad(format!("committed node {} below transient node {}", c.0, id.0));
                }
            }
        }
        Ok(())
    }

    /// One JSON object per node in depth-first order.
    pub fn dump_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            path: Vec<TokenId>,
            residency: Vec<&'a str>,
            transient: Option<TransientMark>,
            last_access: f64,
            ref_count: u32,
        }
        for id in self.dfs_order().into_iter().skip(1) {
            let n = self.node(id);
            let (path, _) = self.path_tokens(id);
            let row = Row {
                path,
                residency: TierId::ALL.into_iter().filter(|t| n.resident(*t)).map(TierId::as_str).collect(),
                transient: n.transient,
                last_access: n.last_access,
                ref_count: n.ref_count,
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);
impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

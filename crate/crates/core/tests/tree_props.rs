use kvtier::tree::EvictionPlan;
use kvtier::{HiRadixTree, KvGeometry, Layout, TierId, TierSpec, TierStore, TokenId};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Insert(usize, TierId),
    Match(usize),
    Pin(usize),
    Unpin,
    Evict(u64),
    Mark(usize),
    ClearMarks,
}

impl Op {
    fn reindex(&self, n: usize) -> Op {
        match *self {
            Op::Insert(i, t) => Op::Insert(i % n, t),
            Op::Match(i) => Op::Match(i % n),
            Op::Pin(i) => Op::Pin(i % n),
            Op::Mark(i) => Op::Mark(i % n),
            ref other => other.clone(),
        }
    }
}

fn op(n: usize) -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0..n, prop_oneof![Just(TierId::Device), Just(TierId::Host)]).prop_map(|(i, t)| Op::Insert(i, t)),
        2 => (0..n).prop_map(Op::Match),
        1 => (0..n).prop_map(Op::Pin),
        1 => Just(Op::Unpin),
        2 => (1u64..24).prop_map(Op::Evict),
        1 => (0..n).prop_map(Op::Mark),
        1 => Just(Op::ClearMarks),
    ]
}

fn seqs() -> impl Strategy<Value = Vec<Vec<TokenId>>> {
    prop::collection::vec(prop::collection::vec(0u32..3, 1..24), 1..8)
}

struct World {
    tree: HiRadixTree,
    store: TierStore,
    /// Pinned prefixes with their device-resident token count.
    pins: Vec<(Vec<TokenId>, usize)>,
    page: usize,
}

impl World {
    fn new(page: usize, with_host: bool) -> Self {
        let geometry = KvGeometry {
            num_layers: 1,
            kv_bytes_per_token_per_layer: 1,
            page_size_tokens: page as u32,
        };
        let mut specs = vec![TierSpec {
            tier: TierId::Device,
            capacity_bytes: 24,
            layout: Layout::LayerFirst,
        }];
        if with_host {
            specs.push(TierSpec {
                tier: TierId::Host,
                capacity_bytes: 1 << 20,
                layout: Layout::PageFirst,
            });
        }
        let tiers: Vec<TierId> = specs.iter().map(|s| s.tier).collect();
        Self {
            tree: HiRadixTree::new(page, geometry.page_bytes(), &tiers),
            store: TierStore::new(geometry, &specs).unwrap(),
            pins: Vec::new(),
            page,
        }
    }

    fn aligned<'a>(&self, s: &'a [TokenId]) -> &'a [TokenId] {
        &s[..s.len() / self.page * self.page]
    }

    fn dump(&self) -> String {
        let mut out = Vec::new();
        self.tree.dump_jsonl(&mut out).unwrap();
        String::from_utf8(out).unwrap()
    }

    fn settle(&mut self, plan: EvictionPlan) {
        self.store.release_pages(&plan.released_pages).unwrap();
        for wb in &plan.writebacks {
            let need = self.tree.missing_tokens(&wb.path, wb.start, wb.to);
            let pages = self.store.allocate_pages(wb.to, need).unwrap();
            self.tree.complete_writeback(wb, pages).unwrap();
        }
    }

    fn apply(&mut self, op: &Op, seqs: &[Vec<TokenId>]) -> Result<(), TestCaseError> {
        match op {
            Op::Insert(i, tier) => {
                if !self.store.has_tier(*tier) {
                    return Ok(());
                }
                let s = &seqs[*i];
                let need = self.tree.missing_tokens(s, 0, *tier);
                if let Ok(pages) = self.store.allocate_pages(*tier, need) {
                    let got = self.tree.insert_committed(s, *tier, pages).unwrap();
                    prop_assert_eq!(got, need);
                    prop_assert_eq!(self.tree.missing_tokens(s, 0, *tier), 0);
                }
            }
            Op::Match(i) => {
                let s = &seqs[*i];
                let m = self.tree.match_prefix(s);
                prop_assert_eq!(m.total_matched, m.committed_tokens() + m.transient_tokens);
                prop_assert_eq!(m.total_matched, m.segments.iter().map(|g| g.tokens).sum::<usize>());
                prop_assert!(m.total_matched <= self.aligned(s).len());
                prop_assert_eq!(m.total_matched % self.page, 0);
            }
            Op::Pin(i) => {
                let s = self.aligned(&seqs[*i]).to_vec();
                let m = self.tree.match_prefix(&s);
                if !s.is_empty() && m.committed_tokens() == s.len() {
                    self.tree.adjust_refs(&s, 1).unwrap();
                    self.pins.push((s, m.device_tokens));
                }
            }
            Op::Unpin => {
                if let Some((s, _)) = self.pins.pop() {
                    self.tree.adjust_refs(&s, -1).unwrap();
                }
            }
            Op::Evict(bytes) => {
                let before = self.dump();
                let pinned = self.tree.pinned_bytes(TierId::Device);
                let resident = self.tree.resident_bytes(TierId::Device);
                let clock = self.tree.clock();
                match self.tree.evict(TierId::Device, *bytes, clock) {
                    Ok(plan) => {
                        prop_assert!(plan.freed_bytes >= *bytes);
                        prop_assert_eq!(plan.freed_bytes, (plan.released_pages.len() * self.page) as u64);
                        self.settle(plan);
                        prop_assert_eq!(self.tree.pinned_bytes(TierId::Device), pinned);
                        prop_assert!(self.tree.resident_bytes(TierId::Device) + bytes <= resident);
                    }
                    Err(kvtier::Error::Pressure { .. }) => {
                        prop_assert_eq!(self.dump(), before, "failed eviction changed the tree");
                    }
                    Err(e) => return Err(TestCaseError::fail(e.to_string())),
                }
                for (s, device) in &mut self.pins {
                    let m = self.tree.match_prefix(s);
                    prop_assert_eq!(m.committed_tokens(), s.len());
                    prop_assert!(m.device_tokens >= *device, "pinned device tokens were evicted");
                    *device = m.device_tokens;
                }
            }
            Op::Mark(i) => {
                self.tree.mark_in_queue(&seqs[*i]);
            }
            Op::ClearMarks => {
                self.tree.clear_in_queue();
            }
        }
        Ok(())
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(256) })]

    #[test]
    fn random_operations_keep_tree_and_store_consistent(
        page in prop::sample::select(vec![1usize, 2, 4]),
        with_host in any::<bool>(),
        seqs in seqs(),
        ops in prop::collection::vec(op(8), 1..60),
    ) {
        let mut w = World::new(page, with_host);
        for (step, o) in ops.iter().enumerate() {
            w.tree.set_clock(step as f64);
            let o = o.reindex(seqs.len());
            w.apply(&o, &seqs)?;
            if let Err(e) = w.tree.check_invariants() {
                return Err(TestCaseError::fail(format!("after {o:?}: {e}")));
            }
            for tier in [TierId::Device, TierId::Host] {
                if w.store.has_tier(tier) {
                    prop_assert_eq!(w.store.usage(tier), w.tree.resident_bytes(tier));
                    prop_assert!(w.store.usage(tier) <= w.store.capacity(tier));
                }
            }
        }
    }

    #[test]
    fn common_prefix_matches_elementwise_scan(
        a in prop::collection::vec(0u32..3, 0..1200),
        cut in any::<prop::sample::Index>(),
        tail in prop::collection::vec(0u32..3, 0..40),
    ) {
        let mut b = a[..cut.index(a.len() + 1)].to_vec();
        b.extend(tail);
        let naive = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
        prop_assert_eq!(kvtier::tree::common_prefix(&a, &b), naive);
    }
}

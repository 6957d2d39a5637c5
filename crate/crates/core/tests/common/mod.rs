#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use kvtier::metrics::SimReport;
use kvtier::scheduler::{form_batch, BatchLimits, Candidate, SchedulerConfig};
use kvtier::{HiRadixTree, TierId, TierSpec, TierStore, KvGeometry, Layout, TokenId};
use serde::Deserialize;

pub fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Efficiency curve evaluated segment by segment in base 2.
pub fn eta_oracle(anchors: &[(u64, f64)], s: u64) -> f64 {
    if s <= anchors[0].0 {
        return anchors[0].1;
    }
    for w in anchors.windows(2) {
        let ((s0, e0), (s1, e1)) = (w[0], w[1]);
        if s == s0 {
            return e0;
        }
        if s == s1 {
            return e1;
        }
        if s > s0 && s < s1 {
            let f = ((s as f64).log2() - (s0 as f64).log2()) / ((s1 as f64).log2() - (s0 as f64).log2());
            return e0 * (1.0 - f) + e1 * f;
        }
    }
    anchors[anchors.len() - 1].1
}

pub fn dma_throughput_oracle(c: u32, l: f64, s: u64, anchors: &[(u64, f64)], peak: f64) -> f64 {
    let littles = c as f64 * s as f64 / l;
    let link = eta_oracle(anchors, s) * peak;
    if littles < link { littles } else { link }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// A set of token sequences, each cached at one tier.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub page: usize,
    pub seqs: Vec<(Vec<TokenId>, TierId)>,
}

fn lcp(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

impl Corpus {
    pub fn build(&self) -> HiRadixTree {
        let geometry = KvGeometry {
            num_layers: 1,
            kv_bytes_per_token_per_layer: 1,
            page_size_tokens: self.page as u32,
        };
        let specs: Vec<TierSpec> = TierId::ALL
            .iter()
            .map(|&tier| TierSpec {
                tier,
                capacity_bytes: 1 << 40,
                layout: if tier == TierId::Device { Layout::LayerFirst } else { Layout::PageFirst },
            })
            .collect();
        let mut store = TierStore::new(geometry, &specs).unwrap();
        let mut tree = HiRadixTree::new(self.page, geometry.page_bytes(), &TierId::ALL);
        for (seq, tier) in &self.seqs {
            let missing = tree.missing_tokens(seq, 0, *tier);
            let pages = store.allocate_pages(*tier, missing).unwrap();
            tree.insert_committed(seq, *tier, pages).unwrap();
        }
        tree
    }

    /// `(matched, [device, host, disk])` by scanning every sequence.
    /// A position counts at the fastest tier of any sequence covering it.
    pub fn oracle(&self, q: &[TokenId]) -> (usize, [usize; 3]) {
        let align = |n: usize| n / self.page * self.page;
        let q = &q[..align(q.len())];
        let mut best = vec![usize::MAX; q.len()];
        for (seq, tier) in &self.seqs {
            let covered = align(lcp(q, &seq[..align(seq.len())]));
            for b in &mut best[..covered] {
                *b = (*b).min(tier.index());
            }
        }
        let matched = best.iter().take_while(|&&b| b != usize::MAX).count();
        let mut split = [0; 3];
        for &b in &best[..matched] {
            split[b] += 1;
        }
        (matched, split)
    }
}

#[derive(Debug, Deserialize)]
pub struct GoldenConfig {
    pub balanced_batching: bool,
    pub dedup: bool,
    pub loading_bound_ratio: f64,
    pub deferral_threshold: usize,
    pub max_batch_tokens: usize,
    #[serde(default)]
    pub device_budget_tokens: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct GoldenRequest {
    pub id: String,
    pub context: String,
    pub context_len: usize,
    pub query_len: usize,
    pub device_hit: usize,
    pub host_load: usize,
}

#[derive(Debug, Deserialize, PartialEq)]
pub struct GoldenExpected {
    pub batch: Vec<String>,
    pub leftover: Vec<String>,
    pub compute_tokens: usize,
    pub host_load_tokens: usize,
    pub device_hit_tokens: usize,
    pub bundle_hits: usize,
}

#[derive(Debug, Deserialize)]
pub struct Golden {
    pub description: String,
    pub config: GoldenConfig,
    pub queue: Vec<GoldenRequest>,
    pub expected: GoldenExpected,
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/alg1")
}

pub fn load_goldens() -> Vec<(String, Golden)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(golden_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let g: Golden = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
            (p.file_stem().unwrap().to_string_lossy().into_owned(), g)
        })
        .collect()
}

fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Runs one golden queue; returns a description of any mismatch.
pub fn run_golden(g: &Golden) -> Result<(), String> {
    let cfg = SchedulerConfig {
        deferral_threshold: g.config.deferral_threshold,
        loading_bound_ratio: g.config.loading_bound_ratio,
        max_batch_tokens: g.config.max_batch_tokens,
        balanced_batching_enabled: g.config.balanced_batching,
        dedup_enabled: g.config.dedup,
        ..SchedulerConfig::default()
    };
    let limits = BatchLimits {
        max_batch_tokens: g.config.max_batch_tokens,
        device_budget_tokens: g.config.device_budget_tokens.unwrap_or(usize::MAX),
    };
    let queue: Vec<Candidate> = g
        .queue
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let h = label_hash(&r.context);
            let mut tokens: Vec<TokenId> = (0..r.context_len as u64)
                .map(|p| (splitmix(h ^ p.wrapping_mul(0x1234_5678_9abc)) % 1_000_000) as TokenId)
                .collect();
            tokens.extend((0..r.query_len).map(|j| (1_000_000 + i * 10_000 + j) as TokenId));
            Candidate {
                id: i as u64,
                tokens: Arc::from(tokens),
                context_len: r.context_len,
                device_hit: r.device_hit,
                host_load: r.host_load,
                deferrals: 0,
            }
        })
        .collect();
    let (plan, leftover) = form_batch(queue, &cfg, limits);
    let name = |id: u64| g.queue[id as usize].id.clone();
    let got = GoldenExpected {
        batch: plan.ids().into_iter().map(name).collect(),
        leftover: leftover.iter().map(|c| name(c.id)).collect(),
        compute_tokens: plan.compute_tokens,
        host_load_tokens: plan.host_load_tokens,
        device_hit_tokens: plan.device_hit_tokens,
        bundle_hits: plan.bundle_hits,
    };
    if got == g.expected {
        Ok(())
    } else {
        Err(format!("expected {:?}\n     got {:?}", g.expected, got))
    }
}

/// Every request's context splits exactly into hit, loaded, staged and
/// recomputed tokens, and batch totals add up.
pub fn check_conservation(report: &SimReport) -> Result<(), String> {
    for r in &report.per_request {
        let parts = r.device_hit_tokens + r.host_loaded_tokens + r.disk_staged_tokens + r.recomputed_tokens;
        if parts != r.context_len as u64 {
            return Err(format!("request {}: {parts} accounted tokens for context {}", r.id, r.context_len));
        }
    }
    let compute: u64 = report.per_batch.iter().map(|b| b.compute_tokens).sum();
    if compute != report.aggregate.compute_tokens {
        return Err(format!("batch compute {compute} != aggregate {}", report.aggregate.compute_tokens));
    }
    let loaded: u64 = report.per_batch.iter().map(|b| b.host_load_tokens).sum();
    let per_req: u64 = report.per_request.iter().map(|r| r.host_loaded_tokens + r.disk_staged_tokens).sum();
    if loaded > per_req {
        return Err(format!("batches loaded {loaded} host tokens, requests account for {per_req}"));
    }
    Ok(())
}

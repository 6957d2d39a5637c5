//! Memory tiers, page allocation, and layout-aware transfer sizing.
//!
//! Each tier is a pool of fixed-size pages. A page always occupies a full
//! `page_size_tokens` worth of bytes even when the last page of an
//! allocation covers fewer tokens.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Memory tier, ordered by distance from compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TierId {
    Device,
    Host,
    Disk,
}

impl TierId {
    pub const ALL: [TierId; 3] = [TierId::Device, TierId::Host, TierId::Disk];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The next tier further from compute, if any.
    pub fn lower(self) -> Option<TierId> {
        match self {
            TierId::Device => Some(TierId::Host),
            TierId::Host => Some(TierId::Disk),
            TierId::Disk => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TierId::Device => "device",
            TierId::Host => "host",
            TierId::Disk => "disk",
        }
    }
}

impl fmt::Display for TierId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// All pages of one layer are contiguous.
    LayerFirst,
    /// All layers of one page are contiguous.
    PageFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvGeometry {
    pub num_layers: u32,
    pub kv_bytes_per_token_per_layer: u64,
    pub page_size_tokens: u32,
}

impl KvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.kv_bytes_per_token_per_layer == 0 || self.page_size_tokens == 0 {
            return Err(Error::Config("geometry fields must all be positive".into()));
        }
        Ok(())
    }

    pub fn bytes_per_token(&self) -> u64 {
        self.num_layers as u64 * self.kv_bytes_per_token_per_layer
    }

    pub fn page_bytes(&self) -> u64 {
        self.page_size_tokens as u64 * self.bytes_per_token()
    }

    pub fn pages_for(&self, tokens: usize) -> usize {
        tokens.div_ceil(self.page_size_tokens as usize)
    }

    /// Largest multiple of the page size not exceeding `tokens`.
    pub fn align_down(&self, tokens: usize) -> usize {
        let p = self.page_size_tokens as usize;
        tokens / p * p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierSpec {
    pub tier: TierId,
    pub capacity_bytes: u64,
    pub layout: Layout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PageRef {
    pub tier: TierId,
    pub page_index: u64,
    pub tokens_covered: u32,
}

/// Bytes moved per contiguous I/O operation between two layouts.
///
/// A layer-first endpoint splits each page into one chunk per layer, so it
/// governs whenever present.
pub fn transfer_chunk_size(geometry: &KvGeometry, source: Layout, dest: Layout) -> u64 {
    let per_layer = geometry.page_size_tokens as u64 * geometry.kv_bytes_per_token_per_layer;
    match (source, dest) {
        (Layout::PageFirst, Layout::PageFirst) => per_layer * geometry.num_layers as u64,
        _ => per_layer,
    }
}

#[derive(Debug, Clone)]
struct Pool {
    spec: TierSpec,
    live: BTreeSet<u64>,
    free: Vec<u64>,
    next: u64,
}

impl Pool {
    fn usage(&self, page_bytes: u64) -> u64 {
        self.live.len() as u64 * page_bytes
    }
}

/// Per-tier page pools sharing one KV geometry.
#[derive(Debug, Clone)]
pub struct TierStore {
    geometry: KvGeometry,
    pools: BTreeMap<TierId, Pool>,
}

impl TierStore {
    pub fn new(geometry: KvGeometry, tiers: &[TierSpec]) -> Result<Self> {
        geometry.validate()?;
        let mut pools = BTreeMap::new();
        for spec in tiers {
            if spec.capacity_bytes == 0 {
                return Err(Error::Config(format!("{} capacity must be positive", spec.tier)));
            }
            if spec.tier == TierId::Device && spec.layout != Layout::LayerFirst {
                return Err(Error::Config("device layout must be layer_first".into()));
            }
            let pool = Pool {
                spec: *spec,
                live: BTreeSet::new(),
                free: Vec::new(),
                next: 0,
            };
            if pools.insert(spec.tier, pool).is_some() {
                return Err(Error::Config(format!("tier {} configured twice", spec.tier)));
            }
        }
        if !pools.contains_key(&TierId::Device) {
            return Err(Error::Config("a device tier is required".into()));
        }
        Ok(Self { geometry, pools })
    }

    pub fn geometry(&self) -> &KvGeometry {
        &self.geometry
    }

    pub fn has_tier(&self, tier: TierId) -> bool {
        self.pools.contains_key(&tier)
    }

    pub fn spec(&self, tier: TierId) -> Option<&TierSpec> {
        self.pools.get(&tier).map(|p| &p.spec)
    }

    pub fn capacity(&self, tier: TierId) -> u64 {
        self.pools.get(&tier).map_or(0, |p| p.spec.capacity_bytes)
    }

    pub fn usage(&self, tier: TierId) -> u64 {
        let pb = self.geometry.page_bytes();
        self.pools.get(&tier).map_or(0, |p| p.usage(pb))
    }

    pub fn free_bytes(&self, tier: TierId) -> u64 {
        self.capacity(tier).saturating_sub(self.usage(tier))
    }

    pub fn live_pages(&self, tier: TierId) -> usize {
        self.pools.get(&tier).map_or(0, |p| p.live.len())
    }

    /// Bytes that allocating `token_count` tokens would consume.
    pub fn bytes_for(&self, token_count: usize) -> u64 {
        self.geometry.pages_for(token_count) as u64 * self.geometry.page_bytes()
    }

    pub fn allocate_pages(&mut self, tier: TierId, token_count: usize) -> Result<Vec<PageRef>> {
        let page_bytes = self.geometry.page_bytes();
        let page_size = self.geometry.page_size_tokens as usize;
        let n = self.geometry.pages_for(token_count);
        let pool = self.pools.get_mut(&tier).ok_or(Error::MissingTier(tier))?;
        let need = n as u64 * page_bytes;
        let free = pool.spec.capacity_bytes.saturating_sub(pool.usage(page_bytes));
        if need > free {
            return Err(Error::Capacity {
                tier,
                shortfall: need - free,
            });
        }
        let mut pages = Vec::with_capacity(n);
        let mut remaining = token_count;
        for _ in 0..n {
            let idx = pool.free.pop().unwrap_or_else(|| {
                let i = pool.next;
                pool.next += 1;
                i
            });
            pool.live.insert(idx);
            let covered = remaining.min(page_size);
            remaining -= covered;
            pages.push(PageRef {
                tier,
                page_index: idx,
                tokens_covered: covered as u32,
            });
        }
        Ok(pages)
    }

    /// Releases pages and returns the bytes freed. All pages are validated
    /// before any is released.
    pub fn release_pages(&mut self, pages: &[PageRef]) -> Result<u64> {
        let mut seen = BTreeSet::new();
        for p in pages {
            let pool = self.pools.get(&p.tier).ok_or(Error::MissingTier(p.tier))?;
            if !pool.live.contains(&p.page_index) || !seen.insert((p.tier, p.page_index)) {
                return Err(Error::Invariant(format!(
                    "release of page {} on {} which is not live",
                    p.page_index, p.tier
                )));
            }
        }
        for p in pages {
            let pool = self.pools.get_mut(&p.tier).expect("validated above");
            pool.live.remove(&p.page_index);
            pool.free.push(p.page_index);
        }
        Ok(pages.len() as u64 * self.geometry.page_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(page: u32) -> KvGeometry {
        KvGeometry {
            num_layers: 32,
            kv_bytes_per_token_per_layer: 4096,
            page_size_tokens: page,
        }
    }

    fn store(page: u32, cap_pages: u64) -> TierStore {
        let g = geom(page);
        TierStore::new(
            g,
            &[TierSpec {
                tier: TierId::Device,
                capacity_bytes: cap_pages * g.page_bytes(),
                layout: Layout::LayerFirst,
            }],
        )
        .unwrap()
    }

    #[test]
    fn allocate_full_and_partial_pages() {
        let mut s = store(32, 10);
        assert_eq!(s.allocate_pages(TierId::Device, 64).unwrap().len(), 2);
        let p = s.allocate_pages(TierId::Device, 33).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[1].tokens_covered, 1);
        assert_eq!(s.usage(TierId::Device), 4 * geom(32).page_bytes());
    }

    #[test]
    fn allocate_beyond_capacity() {
        let mut s = store(32, 2);
        let err = s.allocate_pages(TierId::Device, 65).unwrap_err();
        assert_eq!(
            err,
            Error::Capacity {
                tier: TierId::Device,
                shortfall: geom(32).page_bytes()
            }
        );
        assert_eq!(s.usage(TierId::Device), 0);
    }

    #[test]
    fn release_round_trip_and_double_release() {
        let mut s = store(32, 10);
        let before = s.usage(TierId::Device);
        let pages = s.allocate_pages(TierId::Device, 100).unwrap();
        let freed = s.release_pages(&pages).unwrap();
        assert_eq!(freed, 4 * geom(32).page_bytes());
        assert_eq!(s.usage(TierId::Device), before);
        assert!(matches!(s.release_pages(&pages), Err(Error::Invariant(_))));
        assert_eq!(s.release_pages(&[]).unwrap(), 0);
    }

    #[test]
    fn duplicate_in_one_release_is_rejected() {
        let mut s = store(1, 10);
        let pages = s.allocate_pages(TierId::Device, 1).unwrap();
        let twice = [pages[0], pages[0]];
        assert!(s.release_pages(&twice).is_err());
        assert_eq!(s.live_pages(TierId::Device), 1);
    }

    #[test]
    fn chunk_sizes() {
        let g = geom(32);
        assert_eq!(transfer_chunk_size(&g, Layout::LayerFirst, Layout::PageFirst), 128 * 1024);
        assert_eq!(transfer_chunk_size(&g, Layout::PageFirst, Layout::LayerFirst), 128 * 1024);
        assert_eq!(transfer_chunk_size(&g, Layout::PageFirst, Layout::PageFirst), 4 * 1024 * 1024);
        let g1 = geom(1);
        assert_eq!(transfer_chunk_size(&g1, Layout::LayerFirst, Layout::LayerFirst), 4096);
    }

    #[test]
    fn device_must_be_layer_first() {
        let g = geom(1);
        let r = TierStore::new(
            g,
            &[TierSpec {
                tier: TierId::Device,
                capacity_bytes: 1 << 20,
                layout: Layout::PageFirst,
            }],
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}

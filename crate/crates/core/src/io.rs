//! Analytical transfer model: a Little's-law throughput bound for DMA copy
//! engines, a transfer-size efficiency curve per link, and the fixed
//! compute slowdowns caused by GPU-assisted copies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tier::TierId;

/// One direction of an interconnect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    /// Bytes per second, unidirectional.
    pub peak_bandwidth: f64,
    /// `(chunk_size_bytes, efficiency)` pairs, strictly increasing in chunk size.
    pub efficiency_anchors: Vec<(u64, f64)>,
}

impl LinkSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_bandwidth > 0.0) {
            return Err(Error::Config("link peak_bandwidth must be positive".into()));
        }
        if self.efficiency_anchors.is_empty() {
            return Err(Error::Config("link needs at least one efficiency anchor".into()));
        }
        for w in self.efficiency_anchors.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("efficiency anchors must be strictly increasing in chunk size".into()));
            }
        }
        if self
            .efficiency_anchors
            .iter()
            .any(|&(s, e)| s == 0 || !(e > 0.0 && e <= 1.0))
        {
            return Err(Error::Config("anchor chunk sizes must be >= 1 and efficiencies in (0, 1]".into()));
        }
        Ok(())
    }

    /// PCIe 5.0 x16, one direction.
    pub fn pcie5() -> Self {
        Self {
            peak_bandwidth: 64e9,
            efficiency_anchors: vec![(128 * 1024, 0.22), (1024 * 1024, 0.75), (2 * 1024 * 1024, 0.80)],
        }
    }

    /// Chip-to-chip NVLink: six times the PCIe peak, same size curve.
    pub fn nvlink_c2c() -> Self {
        Self {
            peak_bandwidth: 6.0 * 64e9,
            ..Self::pcie5()
        }
    }

    /// NVMe SSD to host memory.
    pub fn nvme() -> Self {
        Self {
            peak_bandwidth: 7e9,
            efficiency_anchors: vec![(128 * 1024, 0.25), (4 * 1024 * 1024, 0.9)],
        }
    }

    fn top_efficiency(&self) -> f64 {
        self.efficiency_anchors.last().map_or(1.0, |a| a.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IoBackendSpec {
    /// Host-driven copies through the DMA engines.
    DmaCopy {
        per_op_latency_s: f64,
        max_concurrency: u32,
    },
    /// Copy kernels running on a few GPU blocks.
    GpuAssist {
        blocks: u32,
        per_block_bandwidth: f64,
        #[serde(default = "default_granularity")]
        min_granularity: u64,
        #[serde(default = "default_prefill_slowdown")]
        prefill_slowdown: f64,
        #[serde(default = "default_decode_slowdown")]
        decode_slowdown: f64,
    },
}

fn default_granularity() -> u64 {
    128
}
fn default_prefill_slowdown() -> f64 {
    0.05
}
fn default_decode_slowdown() -> f64 {
    0.10
}

impl IoBackendSpec {
    pub fn gpu_assist(blocks: u32, per_block_bandwidth: f64) -> Self {
        IoBackendSpec::GpuAssist {
            blocks,
            per_block_bandwidth,
            min_granularity: default_granularity(),
            prefill_slowdown: default_prefill_slowdown(),
            decode_slowdown: default_decode_slowdown(),
        }
    }

    pub fn is_gpu_assist(&self) -> bool {
        matches!(self, IoBackendSpec::GpuAssist { .. })
    }

    /// Same backend with a different block quota; DMA backends are unchanged.
    pub fn with_blocks(&self, n: u32) -> Self {
        match self {
            IoBackendSpec::GpuAssist {
                per_block_bandwidth,
                min_granularity,
                prefill_slowdown,
                decode_slowdown,
                ..
            } => IoBackendSpec::GpuAssist {
                blocks: n,
                per_block_bandwidth: *per_block_bandwidth,
                min_granularity: *min_granularity,
                prefill_slowdown: *prefill_slowdown,
                decode_slowdown: *decode_slowdown,
            },
            other => other.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            IoBackendSpec::DmaCopy {
                per_op_latency_s,
                max_concurrency,
            } => {
                if !(per_op_latency_s > 0.0) || max_concurrency < 1 {
                    return Err(Error::Config("dma_copy needs latency > 0 and concurrency >= 1".into()));
                }
            }
            IoBackendSpec::GpuAssist {
                blocks,
                per_block_bandwidth,
                min_granularity,
                prefill_slowdown,
                decode_slowdown,
            } => {
                if blocks < 1 || !(per_block_bandwidth > 0.0) || min_granularity < 1 {
                    return Err(Error::Config(
                        "gpu_assist needs blocks >= 1, per_block_bandwidth > 0, min_granularity >= 1".into(),
                    ));
                }
                let ok = |s: f64| (0.0..1.0).contains(&s);
                if !ok(prefill_slowdown) || !ok(decode_slowdown) {
                    return Err(Error::Config("gpu_assist slowdowns must lie in [0, 1)".into()));
                }
            }
        }
        Ok(())
    }
}

/// Fraction of peak bandwidth reached at a given transfer size.
///
/// Log-linear between anchors, clamped outside them. Anchors are returned
/// exactly.
pub fn efficiency(link: &LinkSpec, chunk_size: u64) -> f64 {
    let anchors = &link.efficiency_anchors;
    let (first, last) = (anchors[0], anchors[anchors.len() - 1]);
    if chunk_size <= first.0 {
        return first.1;
    }
    if chunk_size >= last.0 {
        return last.1;
    }
    let i = anchors.partition_point(|a| a.0 <= chunk_size);
    let (lo, hi) = (anchors[i - 1], anchors[i]);
    if lo.0 == chunk_size {
        return lo.1;
    }
    let t = ((chunk_size as f64).ln() - (lo.0 as f64).ln()) / ((hi.0 as f64).ln() - (lo.0 as f64).ln());
    lo.1 + t * (hi.1 - lo.1)
}

/// Steady-state bytes/second for one transfer stream.
pub fn sustained_throughput(backend: &IoBackendSpec, link: &LinkSpec, chunk_size: u64) -> Result<f64> {
    match *backend {
        IoBackendSpec::DmaCopy {
            per_op_latency_s,
            max_concurrency,
        } => {
            if chunk_size < 1 {
                return Err(Error::Granularity { chunk: chunk_size, min: 1 });
            }
            let littles = max_concurrency as f64 * chunk_size as f64 / per_op_latency_s;
            Ok(littles.min(efficiency(link, chunk_size) * link.peak_bandwidth))
        }
        IoBackendSpec::GpuAssist {
            blocks,
            per_block_bandwidth,
            min_granularity,
            ..
        } => {
            if chunk_size < min_granularity {
                return Err(Error::Granularity {
                    chunk: chunk_size,
                    min: min_granularity,
                });
            }
            Ok((blocks as f64 * per_block_bandwidth).min(link.top_efficiency() * link.peak_bandwidth))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferJob {
    pub bytes_total: u64,
    pub chunk_size: u64,
    pub source: TierId,
    pub dest: TierId,
    pub backend: IoBackendSpec,
    pub start: f64,
    pub duration: f64,
    pub cancellable: bool,
}

impl TransferJob {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    /// Bytes moved by time `t`, proportional to elapsed time.
    pub fn progress_bytes(&self, t: f64) -> u64 {
        if t <= self.start {
            return 0;
        }
        if t >= self.end() || self.duration <= 0.0 {
            return self.bytes_total;
        }
        let frac = (t - self.start) / self.duration;
        (self.bytes_total as f64 * frac).floor() as u64
    }
}

pub fn plan_transfer(
    bytes_total: u64,
    chunk_size: u64,
    (source, dest): (TierId, TierId),
    backend: &IoBackendSpec,
    link: &LinkSpec,
    start: f64,
    cancellable: bool,
) -> Result<TransferJob> {
    if bytes_total == 0 {
        return Err(Error::Invariant("transfer of zero bytes".into()));
    }
    let x = sustained_throughput(backend, link, chunk_size)?;
    Ok(TransferJob {
        bytes_total,
        chunk_size,
        source,
        dest,
        backend: backend.clone(),
        start,
        duration: bytes_total as f64 / x,
        cancellable,
    })
}

/// `(prefill_slowdown, decode_slowdown)` applied to compute overlapping an
/// in-flight job on this backend.
pub fn interference_factors(backend: &IoBackendSpec, active: bool) -> (f64, f64) {
    match *backend {
        IoBackendSpec::GpuAssist {
            prefill_slowdown,
            decode_slowdown,
            ..
        } if active => (prefill_slowdown, decode_slowdown),
        _ => (0.0, 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KIB: u64 = 1024;
    const MIB: u64 = 1024 * 1024;

    fn pcie() -> LinkSpec {
        LinkSpec {
            peak_bandwidth: 64e9,
            efficiency_anchors: vec![(128 * KIB, 0.22), (MIB, 0.75), (2 * MIB, 0.80)],
        }
    }

    fn dma(c: u32, l: f64) -> IoBackendSpec {
        IoBackendSpec::DmaCopy {
            per_op_latency_s: l,
            max_concurrency: c,
        }
    }

    #[test]
    fn anchors_and_clamping() {
        let l = pcie();
        assert_eq!(efficiency(&l, 128 * KIB), 0.22);
        assert_eq!(efficiency(&l, MIB), 0.75);
        assert_eq!(efficiency(&l, 2 * MIB), 0.80);
        assert_eq!(efficiency(&l, 4 * MIB), 0.80);
        assert_eq!(efficiency(&l, 1), 0.22);
        // halfway in log space between 128 KiB and 1 MiB is 362 KiB-ish
        let mid = efficiency(&l, 256 * KIB);
        assert!((mid - (0.22 + 0.53 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn dma_examples() {
        let l = pcie();
        let x = sustained_throughput(&dma(2, 40e-6), &l, MIB).unwrap();
        assert!((x - 48e9).abs() < 1.0);
        let x = sustained_throughput(&dma(2, 40e-6), &l, 128 * KIB).unwrap();
        let expect = 2.0 * 131072.0 / 40e-6;
        assert!((x - expect).abs() / expect < 1e-12);
        assert!((x / 1e9 - 6.5536).abs() < 1e-9);
        assert!(matches!(
            sustained_throughput(&dma(2, 40e-6), &l, 0),
            Err(Error::Granularity { chunk: 0, min: 1 })
        ));
    }

    #[test]
    fn gpu_assist_flat() {
        let l = pcie();
        let b = IoBackendSpec::gpu_assist(2, 25e9);
        for chunk in [128, 4096, 128 * KIB, 4 * MIB] {
            assert_eq!(sustained_throughput(&b, &l, chunk).unwrap(), 50e9);
        }
        assert!(matches!(sustained_throughput(&b, &l, 64), Err(Error::Granularity { .. })));
    }

    #[test]
    fn plan_transfer_duration() {
        let l = pcie();
        let b = IoBackendSpec::gpu_assist(2, 25e9);
        let j = plan_transfer(4 * MIB, 4096, (TierId::Host, TierId::Device), &b, &l, 1.0, true).unwrap();
        assert!((j.duration - 83.886_08e-6).abs() < 1e-12);
        let j2 = plan_transfer(8 * MIB, 4096, (TierId::Host, TierId::Device), &b, &l, 1.0, true).unwrap();
        assert_eq!(j2.duration, 2.0 * j.duration);
        assert_eq!(j.progress_bytes(1.0 + j.duration / 2.0), 2 * MIB);
        assert_eq!(j.progress_bytes(0.5), 0);
        assert!(plan_transfer(0, 4096, (TierId::Host, TierId::Device), &b, &l, 0.0, false).is_err());
    }

    #[test]
    fn interference() {
        let g = IoBackendSpec::gpu_assist(2, 25e9);
        assert_eq!(interference_factors(&g, true), (0.05, 0.10));
        assert_eq!(interference_factors(&g, false), (0.0, 0.0));
        assert_eq!(interference_factors(&dma(2, 1e-5), true), (0.0, 0.0));
    }

    #[test]
    fn validation() {
        assert!(pcie().validate().is_ok());
        let bad = LinkSpec {
            peak_bandwidth: 1e9,
            efficiency_anchors: vec![(MIB, 0.5), (MIB, 0.6)],
        };
        assert!(bad.validate().is_err());
        assert!(dma(0, 1e-6).validate().is_err());
        let g = IoBackendSpec::GpuAssist {
            blocks: 1,
            per_block_bandwidth: 1e9,
            min_granularity: 128,
            prefill_slowdown: 1.0,
            decode_slowdown: 0.0,
        };
        assert!(g.validate().is_err());
    }
}

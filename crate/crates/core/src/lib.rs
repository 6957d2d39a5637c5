//! Discrete-event simulator for hierarchical KV-cache serving.
//!
//! A tiered radix tree tracks which token prefixes hold KV state on the
//! device, in host memory, or on disk. A scheduler forms prefill batches
//! that balance recomputation against cache loading, and an event-driven
//! engine replays request traces to produce latency and throughput reports.

pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod io;
pub mod metrics;
pub mod scheduler;
pub mod tier;
pub mod tree;
pub mod workload;

pub use error::{Error, Result};
pub use io::{IoBackendSpec, LinkSpec, TransferJob};
pub use tier::{KvGeometry, Layout, PageRef, TierId, TierSpec, TierStore};
pub use tree::{HiRadixTree, MatchResult, NodeId, TokenId, TransientEvent, TransientMark};

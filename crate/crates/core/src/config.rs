//! Run configuration: a versioned TOML file layered over named hardware
//! and workload profiles.
//!
//! ```toml
//! config_version = 1
//! hardware = "h200-pcie5"      # or "gh200-nvlink"
//! backend = "gpu_assist"       # or "dma_copy"
//!
//! [engine.scheduler]
//! deferral_enabled = false
//!
//! [workload]
//! profile = "loogle"
//! num_contexts = 20
//! rate = 4.0
//! ```
//!
//! Every key under `[engine]` and `[workload]` overrides the matching field
//! of the selected profile; tables merge recursively.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::io::{IoBackendSpec, LinkSpec};
use crate::tier::{Layout, TierId};
use crate::workload::WorkloadSpec;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendPreset {
    /// Copy kernels on two GPU blocks; host memory page-first.
    GpuAssist,
    /// DMA copy engines; host memory layer-first.
    DmaCopy,
}

impl FromStr for BackendPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gpu_assist" | "gpu-assist" => Ok(BackendPreset::GpuAssist),
            "dma_copy" | "dma-copy" => Ok(BackendPreset::DmaCopy),
            _ => Err(Error::Config(format!("unknown backend {s:?}; expected gpu_assist or dma_copy"))),
        }
    }
}

impl BackendPreset {
    pub fn apply(self, cfg: &mut EngineConfig) {
        let (backend, layout) = match self {
            BackendPreset::GpuAssist => (IoBackendSpec::gpu_assist(2, 25e9), Layout::PageFirst),
            BackendPreset::DmaCopy => (
                IoBackendSpec::DmaCopy {
                    per_op_latency_s: 40e-6,
                    max_concurrency: 4,
                },
                Layout::LayerFirst,
            ),
        };
        cfg.backend = backend;
        for t in &mut cfg.tiers {
            if t.tier != TierId::Device {
                t.layout = layout;
            }
        }
    }
}

/// Named hardware profile.
pub fn hardware_profile(name: &str) -> Result<EngineConfig> {
    match name {
        "h200-pcie5" => Ok(EngineConfig::default()),
        "gh200-nvlink" => {
            let mut cfg = EngineConfig::default();
            cfg.links.host_device = LinkSpec::nvlink_c2c();
            for t in &mut cfg.tiers {
                if t.tier == TierId::Host {
                    t.capacity_bytes = 400_000_000_000;
                }
            }
            Ok(cfg)
        }
        other => Err(Error::Config(format!(
            "unknown hardware profile {other:?}; expected h200-pcie5 or gh200-nvlink"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hardware: String,
    pub backend: BackendPreset,
    pub engine: EngineConfig,
    pub workload: WorkloadSpec,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    config_version: u32,
    #[serde(default = "default_hardware")]
    hardware: String,
    #[serde(default = "default_backend")]
    backend: BackendPreset,
    #[serde(default)]
    engine: Option<toml::Table>,
    #[serde(default)]
    workload: Option<toml::Table>,
}

fn default_hardware() -> String {
    "h200-pcie5".into()
}

fn default_backend() -> BackendPreset {
    BackendPreset::GpuAssist
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn overlay<T: Serialize + for<'de> Deserialize<'de>>(base: &T, over: Option<toml::Table>, what: &str) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut table, over.unwrap_or_default());
    T::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(format!("[{what}]: {e}")))
}

impl RunConfig {
    /// Defaults: H200 over PCIe 5.0, GPU-assisted copies, loogle workload.
    pub fn from_profiles(hardware: &str, backend: BackendPreset, workload: &str) -> Result<Self> {
        let mut engine = hardware_profile(hardware)?;
        backend.apply(&mut engine);
        Ok(Self {
            hardware: hardware.into(),
            backend,
            engine,
            workload: WorkloadSpec::profile(workload)?,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if raw.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                raw.config_version
            )));
        }
        let mut engine = hardware_profile(&raw.hardware)?;
        raw.backend.apply(&mut engine);
        let engine: EngineConfig = overlay(&engine, raw.engine, "engine")?;
        let mut wl_table = raw.workload.unwrap_or_default();
        let profile = match wl_table.remove("profile") {
            Some(toml::Value::String(s)) => s,
            Some(_) => return Err(Error::Config("[workload] profile must be a string".into())),
            None => "loogle".into(),
        };
        let workload: WorkloadSpec = overlay(&WorkloadSpec::profile(&profile)?, Some(wl_table), "workload")?;
        engine.validate()?;
        workload.validate()?;
        Ok(Self {
            hardware: raw.hardware,
            backend: raw.backend,
            engine,
            workload,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Re-applies a hardware profile, keeping scheduler, geometry,
    /// compute model and capacities.
    pub fn with_hardware(mut self, name: &str) -> Result<Self> {
        let hw = hardware_profile(name)?;
        self.engine.links = hw.links;
        self.hardware = name.into();
        Ok(self)
    }

    pub fn with_backend(mut self, backend: BackendPreset) -> Self {
        backend.apply(&mut self.engine);
        self.backend = backend;
        self
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.engine.seed = seed;
        self.workload.seed = seed;
    }
}

//! Cluster description and the analytic cycle models shared by the tiler
//! and the simulator.

mod cost;
mod presets;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::DType;

pub(crate) use cost::hwpe_runs_op;
pub use cost::{
    compute_cycles, core_kernel_cycles, dma_cycles, hwpe_job_cycles, op_cost_factor, CostError,
    Engine, Kernel, Workload,
};
pub use presets::{preset, preset_names};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IsaProfile {
    RvBase,
    Xpulp,
    Xpulpnn,
}

impl IsaProfile {
    /// Default MACs/cycle/core for each dtype the profile supports.
    ///
    /// `xpulp` packs four 8-bit lanes per dot-product; `xpulpnn` adds
    /// nibble and crumb lanes, so throughput scales inversely with width.
    pub fn default_throughput(self) -> BTreeMap<DType, u32> {
        use DType::*;
        let table: &[(DType, u32)] = match self {
            IsaProfile::RvBase => &[(Int8, 1), (Int32, 1)],
            IsaProfile::Xpulp => &[
                (Int2, 4),
                (Int4, 4),
                (Int8, 4),
                (Int32, 1),
                (Fp16, 1),
                (Bf16, 1),
            ],
            IsaProfile::Xpulpnn => &[
                (Int2, 16),
                (Int4, 8),
                (Int8, 4),
                (Int32, 1),
                (Fp16, 1),
                (Bf16, 1),
            ],
        };
        table.iter().copied().collect()
    }
}

fn default_efficiency() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoreDescriptor {
    pub count: u32,
    pub isa_profile: IsaProfile,
    /// Overrides of the profile's default throughput table.
    #[serde(default)]
    pub macs_per_cycle_per_core: BTreeMap<DType, u32>,
    #[serde(default = "default_efficiency")]
    pub parallel_efficiency: f64,
}

impl CoreDescriptor {
    pub fn new(count: u32, isa_profile: IsaProfile) -> Self {
        Self {
            count,
            isa_profile,
            macs_per_cycle_per_core: isa_profile.default_throughput(),
            parallel_efficiency: default_efficiency(),
        }
    }

    /// MACs/cycle/core for `dtype`; int32 is always available at 1.
    pub fn throughput(&self, dtype: DType) -> Option<u32> {
        match self.macs_per_cycle_per_core.get(&dtype) {
            Some(&r) => Some(r),
            None if dtype == DType::Int32 => Some(1),
            None => None,
        }
    }

    pub fn supports(&self, dtype: DType) -> bool {
        self.throughput(dtype).is_some()
    }

    /// Aggregate MACs/cycle of the whole cluster.
    pub fn peak_macs_per_cycle(&self, dtype: DType) -> Option<f64> {
        self.throughput(dtype)
            .map(|r| self.count as f64 * r as f64 * self.parallel_efficiency)
    }

    /// Efficiency as parts-per-million so that cycle counts are computed in
    /// integer arithmetic.
    pub(crate) fn efficiency_ppm(&self) -> u128 {
        (self.parallel_efficiency * 1e6).round() as u128
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HwpeKind {
    /// Systolic M x N array of FMA computing elements (RedMulE-like).
    GemmSystolic,
    /// Quantized convolution / GEMM engine (N-EUREKA-like).
    ConvQuantized,
}

fn default_contexts() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HwpeDescriptor {
    pub name: String,
    pub kind: HwpeKind,
    pub rows: u32,
    pub cols: u32,
    /// Pipeline latency of one computing element.
    #[serde(default = "one")]
    pub ce_latency: u32,
    /// Cycles to program the register file and start one job.
    pub setup: u32,
    #[serde(default = "default_contexts")]
    pub contexts: u32,
    pub supported_dtypes: BTreeSet<DType>,
    #[serde(default)]
    pub requires_const_operand: bool,
    #[serde(default)]
    pub macs_per_cycle: BTreeMap<DType, u64>,
}

fn one() -> u32 {
    1
}

impl HwpeDescriptor {
    /// Peak MACs/cycle for a supported dtype.
    pub fn peak(&self, dtype: DType) -> Option<u64> {
        if !self.supported_dtypes.contains(&dtype) {
            return None;
        }
        self.macs_per_cycle.get(&dtype).copied()
    }

    fn fill_defaults(&mut self) {
        for &dtype in &self.supported_dtypes {
            if self.macs_per_cycle.contains_key(&dtype) {
                continue;
            }
            let peak = match self.kind {
                HwpeKind::GemmSystolic => self.rows as u64 * self.cols as u64,
                HwpeKind::ConvQuantized => match dtype {
                    DType::Int2 => 1024,
                    DType::Int4 => 512,
                    _ => 256,
                },
            };
            self.macs_per_cycle.insert(dtype, peak);
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(format!("hwpe `{}`: {msg}", self.name)));
        if self.name.is_empty() || self.name == "cores" {
            return bad("name must be non-empty and not `cores`".into());
        }
        if self.rows == 0 || self.cols == 0 || self.ce_latency == 0 || self.contexts == 0 {
            return bad("rows, cols, ce_latency and contexts must be >= 1".into());
        }
        if self.supported_dtypes.is_empty() {
            return bad("supports no dtype".into());
        }
        for (dtype, &peak) in &self.macs_per_cycle {
            if !self.supported_dtypes.contains(dtype) {
                return bad(format!("throughput given for unsupported {dtype}"));
            }
            if peak == 0 {
                return bad(format!("zero throughput for {dtype}"));
            }
            if self.kind == HwpeKind::GemmSystolic
                && dtype.is_float()
                && peak != self.rows as u64 * self.cols as u64
            {
                return bad(format!(
                    "systolic peak for {dtype} must equal rows x cols = {}",
                    self.rows * self.cols
                ));
            }
        }
        Ok(())
    }
}

fn default_residency() -> f64 {
    0.25
}

fn default_reserved() -> u64 {
    8 * 1024
}

/// Platform model of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(default)]
    pub name: String,
    pub l1_bytes: u64,
    pub l1_banks: u32,
    pub l2_bytes: u64,
    /// Bytes per cycle moved by the cluster DMA between L2 and L1.
    pub dma_bw: u64,
    /// Fixed cycles per DMA transfer job.
    pub dma_startup: u64,
    pub cores: CoreDescriptor,
    #[serde(default)]
    pub hwpes: Vec<HwpeDescriptor>,
    /// Width of the shared HWPE port into the TCDM, in bytes per cycle.
    pub hwpe_port_bytes: u64,
    /// Fraction of L1 that may hold whole tensors across nodes.
    #[serde(default = "default_residency")]
    pub l1_residency_fraction: f64,
    /// L1 bytes kept for stacks and runtime state.
    #[serde(default = "default_reserved")]
    pub l1_reserved_bytes: u64,
}

impl ClusterConfig {
    /// Parses a JSON or TOML platform document and validates it.
    pub fn from_json(document: &str) -> Result<Self, ConfigError> {
        let cfg: ClusterConfig =
            serde_json::from_str(document).map_err(|e| ConfigError::Schema(e.to_string()))?;
        cfg.finish()
    }

    pub fn from_toml(document: &str) -> Result<Self, ConfigError> {
        let cfg: ClusterConfig =
            toml::from_str(document).map_err(|e| ConfigError::Schema(e.to_string()))?;
        cfg.finish()
    }

    /// Loads a document from disk; `.toml` files are read as TOML, anything
    /// else as JSON.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml(&text)
        } else {
            Self::from_json(&text)
        }
    }

    /// Resolves a bundled preset name or a file path.
    pub fn resolve(preset_or_path: &str) -> Result<Self, ConfigError> {
        match preset(preset_or_path) {
            Ok(cfg) => Ok(cfg),
            Err(ConfigError::UnknownPreset(_)) if Path::new(preset_or_path).exists() => {
                Self::load(Path::new(preset_or_path))
            }
            Err(e) => Err(e),
        }
    }

    fn finish(mut self) -> Result<Self, ConfigError> {
        let defaults = self.cores.isa_profile.default_throughput();
        for (dtype, rate) in defaults {
            self.cores
                .macs_per_cycle_per_core
                .entry(dtype)
                .or_insert(rate);
        }
        for h in &mut self.hwpes {
            h.fill_defaults();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if !(1 << 10..=1 << 24).contains(&self.l1_bytes) {
            return invalid(format!("l1_bytes {} outside [2^10, 2^24]", self.l1_bytes));
        }
        if self.l1_banks == 0 {
            return invalid("l1_banks must be >= 1".into());
        }
        if self.l2_bytes == 0 {
            return invalid("l2_bytes must be >= 1".into());
        }
        if self.dma_bw == 0 {
            return invalid("dma_bw must be >= 1".into());
        }
        if self.hwpe_port_bytes == 0 || self.hwpe_port_bytes > self.l1_banks as u64 * 4 {
            return invalid(format!(
                "hwpe_port_bytes {} must be in [1, l1_banks x 4 = {}]",
                self.hwpe_port_bytes,
                self.l1_banks as u64 * 4
            ));
        }
        if !(0.0..=1.0).contains(&self.l1_residency_fraction) {
            return invalid("l1_residency_fraction must be in [0, 1]".into());
        }
        if self.l1_reserved_bytes >= self.l1_bytes {
            return invalid("l1_reserved_bytes leaves no L1".into());
        }
        let c = &self.cores;
        if c.count == 0 {
            return invalid("cores.count must be >= 1".into());
        }
        if !(c.parallel_efficiency > 0.0 && c.parallel_efficiency <= 1.0) {
            return invalid(format!(
                "parallel_efficiency {} outside (0, 1]",
                c.parallel_efficiency
            ));
        }
        if let Some((dtype, _)) = c.macs_per_cycle_per_core.iter().find(|(_, &r)| r == 0) {
            return invalid(format!("core throughput for {dtype} must be > 0"));
        }
        let mut names = BTreeSet::new();
        for h in &self.hwpes {
            h.validate()?;
            if !names.insert(h.name.as_str()) {
                return invalid(format!("duplicate hwpe `{}`", h.name));
            }
        }
        Ok(())
    }

    pub fn hwpe(&self, name: &str) -> Option<&HwpeDescriptor> {
        self.hwpes.iter().find(|h| h.name == name)
    }

    /// Bytes available to tiling buffers once `resident` bytes are pinned.
    pub fn tiling_budget(&self, resident: u64) -> i64 {
        self.l1_bytes as i64 - resident as i64 - self.l1_reserved_bytes as i64
    }

    pub fn residency_budget(&self) -> u64 {
        (self.l1_bytes as f64 * self.l1_residency_fraction).floor() as u64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn darkside_redmule_peak() {
        let cfg = preset("darkside-redmule").unwrap();
        let redmule = &cfg.hwpes[0];
        assert_eq!((redmule.rows, redmule.cols, redmule.ce_latency), (12, 4, 4));
        assert_eq!(redmule.peak(DType::Fp16), Some(48));
    }

    #[test]
    fn siracusa_like_preset() {
        let cfg = preset("8xRVnn+NE").unwrap();
        assert_eq!(cfg.cores.count, 8);
        assert_eq!(cfg.cores.isa_profile, IsaProfile::Xpulpnn);
        assert_eq!(cfg.hwpes[0].kind, HwpeKind::ConvQuantized);
        assert_eq!(cfg.hwpes[0].peak(DType::Int8), Some(256));
        assert_eq!(cfg.hwpes[0].peak(DType::Int4), Some(512));
    }

    #[test]
    fn port_wider_than_banks_rejected() {
        let mut cfg = preset("8xRV").unwrap();
        cfg.l1_banks = 8;
        cfg.hwpe_port_bytes = 64;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn defaults_filled() {
        let doc = r#"{
            "l1_bytes": 65536, "l1_banks": 16, "l2_bytes": 1048576,
            "dma_bw": 8, "dma_startup": 16, "hwpe_port_bytes": 32,
            "cores": {"count": 8, "isa_profile": "xpulp"},
            "hwpes": [{"name": "ne", "kind": "conv-quantized", "rows": 32, "cols": 32,
                       "setup": 10, "supported_dtypes": ["int8"], "requires_const_operand": true}]
        }"#;
        let cfg = ClusterConfig::from_json(doc).unwrap();
        assert_eq!(cfg.cores.parallel_efficiency, 0.8);
        assert_eq!(cfg.hwpes[0].contexts, 2);
        assert_eq!(cfg.cores.throughput(DType::Int8), Some(4));
        assert_eq!(cfg.l1_reserved_bytes, 8192);
    }

    #[test]
    fn toml_documents_load() {
        let doc = r#"
            l1_bytes = 131072
            l1_banks = 16
            l2_bytes = 1048576
            dma_bw = 8
            dma_startup = 16
            hwpe_port_bytes = 32
            [cores]
            count = 4
            isa_profile = "rv-base"
        "#;
        let cfg = ClusterConfig::from_toml(doc).unwrap();
        assert!(cfg.hwpes.is_empty());
        assert_eq!(cfg.cores.throughput(DType::Int8), Some(1));
        assert_eq!(cfg.cores.throughput(DType::Fp16), None);
    }

    #[test]
    fn schema_violation_reported() {
        assert!(matches!(
            ClusterConfig::from_json(r#"{"l1_bytes": 1}"#),
            Err(ConfigError::Schema(_))
        ));
    }

    #[test]
    fn systolic_peak_must_match_geometry() {
        let mut cfg = preset("darkside-redmule").unwrap();
        cfg.hwpes[0].macs_per_cycle.insert(DType::Fp16, 64);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tiling_budget_arithmetic() {
        let mut cfg = preset("8xRVnn").unwrap();
        cfg.l1_bytes = 128 * 1024;
        assert_eq!(cfg.tiling_budget(0), 122_880);
    }
}

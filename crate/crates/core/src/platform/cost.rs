//! Closed-form cycle models.
//!
//! All arithmetic is integral: the core parallel efficiency is carried as
//! parts-per-million so `ceil` never sees a rounding artefact.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ClusterConfig, CoreDescriptor, HwpeDescriptor, HwpeKind};
use crate::graph::{DType, Op};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CostError {
    #[error("{engine} does not support dtype {dtype}")]
    UnsupportedDtype { engine: String, dtype: DType },
    #[error("{engine} cannot execute {op}")]
    UnsupportedOp { engine: String, op: Op },
    #[error("{engine} needs one constant operand for {op}")]
    MissingConstOperand { engine: String, op: Op },
    #[error("unknown engine `{0}`")]
    UnknownEngine(String),
}

/// Compute engine a fused node is bound to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Engine {
    Cores,
    Hwpe(String),
}

impl From<String> for Engine {
    fn from(s: String) -> Self {
        if s == "cores" {
            Engine::Cores
        } else {
            Engine::Hwpe(s)
        }
    }
}

impl From<Engine> for String {
    fn from(e: Engine) -> Self {
        e.to_string()
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Engine::Cores => f.write_str("cores"),
            Engine::Hwpe(name) => f.write_str(name),
        }
    }
}

/// Iteration-space geometry of one unit of work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Kernel {
    Matmul {
        m: u64,
        k: u64,
        n: u64,
    },
    /// Depthwise convolutions use `cin = 1`.
    Conv {
        oh: u64,
        ow: u64,
        cout: u64,
        cin: u64,
        kernel: u64,
    },
    Elementwise {
        elements: u64,
    },
}

impl Kernel {
    pub fn macs(&self) -> u64 {
        match *self {
            Kernel::Matmul { m, k, n } => m * k * n,
            Kernel::Conv {
                oh,
                ow,
                cout,
                cin,
                kernel,
            } => oh * ow * cout * cin * kernel * kernel,
            Kernel::Elementwise { .. } => 0,
        }
    }
}

/// A node (or tile) workload as seen by the cost models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    /// Anchor op.
    pub op: Op,
    pub kernel: Kernel,
    pub dtype: DType,
    /// One operand is a constant (weight) tensor.
    #[serde(default)]
    pub const_operand: bool,
    /// Fused elementwise ops applied to the output.
    #[serde(default)]
    pub tail: Vec<Op>,
    /// Output elements of the unit (tail ops and partial passes scale with it).
    pub out_elements: u64,
    /// Re-materialize partial sums from a previous reduction tile.
    #[serde(default)]
    pub partial_pass: bool,
    /// Last reduction step: the fused tail is applied.
    #[serde(default = "yes")]
    pub finalize: bool,
}

fn yes() -> bool {
    true
}

impl Workload {
    pub fn new(op: Op, kernel: Kernel, dtype: DType) -> Self {
        let out_elements = match kernel {
            Kernel::Matmul { m, n, .. } => m * n,
            Kernel::Conv { oh, ow, cout, .. } => oh * ow * cout,
            Kernel::Elementwise { elements } => elements,
        };
        Self {
            op,
            kernel,
            dtype,
            const_operand: false,
            tail: Vec::new(),
            out_elements,
            partial_pass: false,
            finalize: true,
        }
    }

    /// Work as counted by the conservation audit: MACs, or elements for
    /// non-MAC anchors.
    pub fn work(&self) -> u64 {
        match self.kernel {
            Kernel::Elementwise { elements } => elements,
            k => k.macs(),
        }
    }
}

/// Cycles per element of non-MAC kernels on one core.
pub fn op_cost_factor(op: Op) -> u64 {
    match op {
        Op::Softmax => 15,
        Op::LayerNorm => 8,
        Op::Add => 1,
        Op::Requant => 2,
        _ => 1,
    }
}

fn div_ceil_ppm(numerator: u128, per_cycle: u128, ppm: u128) -> u64 {
    (numerator * 1_000_000).div_ceil(per_cycle * ppm) as u64
}

/// Cycles for the core cluster.
///
/// MAC kernels: `ceil(MACs / (count x rate[dtype] x efficiency))`.
/// Other kernels: `ceil(elements x factor / (count x efficiency))`.
pub fn core_kernel_cycles(w: &Workload, cores: &CoreDescriptor) -> Result<u64, CostError> {
    let rate = cores
        .throughput(w.dtype)
        .ok_or_else(|| CostError::UnsupportedDtype {
            engine: "cores".into(),
            dtype: w.dtype,
        })? as u128;
    let count = cores.count as u128;
    let ppm = cores.efficiency_ppm();
    let mut cycles = match w.kernel {
        Kernel::Elementwise { elements } => {
            div_ceil_ppm(elements as u128 * op_cost_factor(w.op) as u128, count, ppm)
        }
        k => div_ceil_ppm(k.macs() as u128, count * rate, ppm),
    };
    if w.finalize && !w.tail.is_empty() {
        let factor: u64 = w.tail.iter().map(|&op| op_cost_factor(op)).sum();
        cycles += div_ceil_ppm(w.out_elements as u128 * factor as u128, count, ppm);
    }
    if w.partial_pass {
        cycles += div_ceil_ppm(w.out_elements as u128, count, ppm);
    }
    Ok(cycles)
}

/// Whether `h` can run the anchor op at all (dtype and constant-operand
/// requirements are checked separately).
pub(crate) fn hwpe_runs_op(h: &HwpeDescriptor, op: Op) -> bool {
    match h.kind {
        HwpeKind::GemmSystolic => op == Op::Gemm,
        HwpeKind::ConvQuantized => matches!(op, Op::Gemm | Op::Conv2D | Op::DepthwiseConv2D),
    }
}

/// Cycles of one HWPE job.
///
/// Systolic arrays stream the `n` columns of B through each of the
/// `ceil(m/M) x ceil(k/N)` stationary blocks of A; a partial C element
/// needs `L x N` cycles to circulate a row, so a block pass lasts
/// `max(n, L x N)` whenever it feeds the next reduction block. The first
/// pass of each row block has no such dependency. One final `L x N` drains
/// the array and `setup` programs the job.
///
/// Quantized engines: `ceil(MACs / peak[dtype]) + setup`. Fused tail ops
/// run in the engine's output stage at no extra cost.
pub fn hwpe_job_cycles(w: &Workload, h: &HwpeDescriptor) -> Result<u64, CostError> {
    if !hwpe_runs_op(h, w.op) {
        return Err(CostError::UnsupportedOp {
            engine: h.name.clone(),
            op: w.op,
        });
    }
    let peak = h.peak(w.dtype).ok_or_else(|| CostError::UnsupportedDtype {
        engine: h.name.clone(),
        dtype: w.dtype,
    })?;
    if h.requires_const_operand && !w.const_operand {
        return Err(CostError::MissingConstOperand {
            engine: h.name.clone(),
            op: w.op,
        });
    }
    let setup = h.setup as u64;
    let cycles = match (h.kind, w.kernel) {
        (HwpeKind::GemmSystolic, Kernel::Matmul { m, k, n }) => {
            let (rows, cols, lat) = (h.rows as u64, h.cols as u64, h.ce_latency as u64);
            let fill = lat * cols;
            let row_blocks = m.div_ceil(rows);
            let k_blocks = k.div_ceil(cols);
            row_blocks * ((k_blocks - 1) * n.max(fill) + n) + fill + setup
        }
        (HwpeKind::GemmSystolic, _) => {
            return Err(CostError::UnsupportedOp {
                engine: h.name.clone(),
                op: w.op,
            })
        }
        (HwpeKind::ConvQuantized, kernel) => kernel.macs().div_ceil(peak) + setup,
    };
    Ok(cycles)
}

/// Compute cycles of a unit of work on `engine`, including the streamer
/// pass that re-reads 32-bit partial sums when a reduction is split.
pub fn compute_cycles(
    w: &Workload,
    engine: &Engine,
    cfg: &ClusterConfig,
) -> Result<u64, CostError> {
    match engine {
        Engine::Cores => core_kernel_cycles(w, &cfg.cores),
        Engine::Hwpe(name) => {
            let h = cfg
                .hwpe(name)
                .ok_or_else(|| CostError::UnknownEngine(name.clone()))?;
            let mut cycles = hwpe_job_cycles(w, h)?;
            if w.partial_pass {
                cycles += (w.out_elements * 4).div_ceil(cfg.hwpe_port_bytes);
            }
            Ok(cycles)
        }
    }
}

/// `dma_startup + ceil(bytes / dma_bw)`, or 0 for an empty transfer.
pub fn dma_cycles(bytes: u64, cfg: &ClusterConfig) -> u64 {
    if bytes == 0 {
        0
    } else {
        cfg.dma_startup + bytes.div_ceil(cfg.dma_bw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::platform::{preset, IsaProfile};

    fn cores(count: u32, profile: IsaProfile, eff: f64) -> CoreDescriptor {
        CoreDescriptor {
            parallel_efficiency: eff,
            ..CoreDescriptor::new(count, profile)
        }
    }

    fn gemm(m: u64, k: u64, n: u64, dtype: DType) -> Workload {
        let mut w = Workload::new(Op::Gemm, Kernel::Matmul { m, k, n }, dtype);
        w.const_operand = true;
        w
    }

    fn redmule(setup: u32) -> HwpeDescriptor {
        let mut h = preset("darkside-redmule").unwrap().hwpes[0].clone();
        h.setup = setup;
        h
    }

    #[test]
    fn simd_gemm_on_eight_cores() {
        let c = cores(8, IsaProfile::Xpulp, 1.0);
        assert_eq!(
            core_kernel_cycles(&gemm(64, 64, 64, DType::Int8), &c).unwrap(),
            8192
        );
    }

    #[test]
    fn scalar_single_core_equals_macs() {
        let mut c = cores(1, IsaProfile::RvBase, 1.0);
        c.macs_per_cycle_per_core.insert(DType::Int8, 1);
        assert_eq!(
            core_kernel_cycles(&gemm(64, 64, 64, DType::Int8), &c).unwrap(),
            262_144
        );
    }

    #[test]
    fn softmax_cost_table() {
        let c = cores(8, IsaProfile::Xpulpnn, 1.0);
        let w = Workload::new(
            Op::Softmax,
            Kernel::Elementwise { elements: 32 },
            DType::Int8,
        );
        assert_eq!(core_kernel_cycles(&w, &c).unwrap(), 60);
    }

    #[test]
    fn efficiency_does_not_round_up_exact_quotients() {
        // 256 / (8 * 4 * 0.8) is exactly 10
        let c = cores(8, IsaProfile::Xpulp, 0.8);
        assert_eq!(
            core_kernel_cycles(&gemm(1, 1, 256, DType::Int8), &c).unwrap(),
            10
        );
    }

    #[test]
    fn unsupported_core_dtype() {
        let c = cores(8, IsaProfile::RvBase, 1.0);
        assert!(matches!(
            core_kernel_cycles(&gemm(4, 4, 4, DType::Fp16), &c),
            Err(CostError::UnsupportedDtype { .. })
        ));
        // int32 always runs, at one MAC per cycle per core
        assert_eq!(
            core_kernel_cycles(&gemm(4, 4, 4, DType::Int32), &c).unwrap(),
            8
        );
    }

    #[test]
    fn systolic_job_48_cube() {
        assert_eq!(
            hwpe_job_cycles(&gemm(48, 48, 48, DType::Fp16), &redmule(10)).unwrap(),
            2330
        );
    }

    #[test]
    fn systolic_degenerate_tile_is_fill_dominated() {
        assert_eq!(
            hwpe_job_cycles(&gemm(1, 1, 1, DType::Fp16), &redmule(10)).unwrap(),
            27
        );
    }

    #[test]
    fn systolic_asymptotic_utilization() {
        let h = redmule(10);
        let (m, k, n) = (512, 512, 512);
        let cycles = hwpe_job_cycles(&gemm(m, k, n, DType::Fp16), &h).unwrap();
        let util = (m * k * n) as f64 / (cycles as f64 * 48.0);
        assert!(util >= 0.99, "{util}");
    }

    #[test]
    fn quantized_conv_job() {
        let ne = preset("8xRVnn+NE").unwrap().hwpes[0].clone();
        let mut w = Workload::new(
            Op::Conv2D,
            Kernel::Conv {
                oh: 8,
                ow: 8,
                cout: 32,
                cin: 16,
                kernel: 3,
            },
            DType::Int8,
        );
        w.const_operand = true;
        assert_eq!(w.kernel.macs(), 294_912);
        assert_eq!(hwpe_job_cycles(&w, &ne).unwrap(), 1162);
    }

    #[test]
    fn const_operand_required() {
        let ne = preset("8xRVnn+NE").unwrap().hwpes[0].clone();
        let mut w = gemm(16, 16, 16, DType::Int8);
        w.const_operand = false;
        assert!(matches!(
            hwpe_job_cycles(&w, &ne),
            Err(CostError::MissingConstOperand { .. })
        ));
        let mm = Workload::new(Op::MatMul, Kernel::Matmul { m: 4, k: 4, n: 4 }, DType::Int8);
        assert!(matches!(
            hwpe_job_cycles(&mm, &ne),
            Err(CostError::UnsupportedOp { .. })
        ));
    }

    #[test]
    fn dma_formula() {
        let mut cfg = preset("8xRV").unwrap();
        cfg.dma_bw = 8;
        cfg.dma_startup = 16;
        assert_eq!(dma_cycles(0, &cfg), 0);
        assert_eq!(dma_cycles(512, &cfg), 80);
        assert_eq!(dma_cycles(1, &cfg), 17);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn costs_are_monotone(
                m in 1u64..96, k in 1u64..96, n in 1u64..96,
                dm in 0u64..8, dk in 0u64..8, dn in 0u64..8,
                bytes in 0u64..100_000, extra in 0u64..5000,
            ) {
                let cfg = preset("8xRVnn+NE").unwrap();
                let small = gemm(m, k, n, DType::Int8);
                let large = gemm(m + dm, k + dk, n + dn, DType::Int8);
                prop_assert!(core_kernel_cycles(&small, &cfg.cores).unwrap()
                    <= core_kernel_cycles(&large, &cfg.cores).unwrap());
                prop_assert!(hwpe_job_cycles(&small, &cfg.hwpes[0]).unwrap()
                    <= hwpe_job_cycles(&large, &cfg.hwpes[0]).unwrap());
                let h = redmule(10);
                let (sf, lf) = (gemm(m, k, n, DType::Fp16), gemm(m + dm, k + dk, n + dn, DType::Fp16));
                prop_assert!(hwpe_job_cycles(&sf, &h).unwrap() <= hwpe_job_cycles(&lf, &h).unwrap());
                prop_assert!(dma_cycles(bytes, &cfg) <= dma_cycles(bytes + extra, &cfg));
            }

            #[test]
            fn unit_rate_single_core_counts_macs(m in 1u64..64, k in 1u64..64, n in 1u64..64) {
                let mut c = cores(1, IsaProfile::RvBase, 1.0);
                c.macs_per_cycle_per_core.insert(DType::Int8, 1);
                prop_assert_eq!(core_kernel_cycles(&gemm(m, k, n, DType::Int8), &c).unwrap(), m * k * n);
            }
        }
    }
}

//! Tile-size selection for fused nodes.
//!
//! Each fused node becomes an iteration space whose operands have
//! footprint functions of the tile extents. [`solve_tiling`] runs a
//! branch-and-bound search over a candidate set of extents per dim and
//! polishes the result one dim at a time;
//! [`brute_force_tiling`] enumerates every integer extent and serves as
//! the reference optimum.

mod space;

use std::cmp::{Ordering, Reverse};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DType, Graph, Op, TensorKind};
use crate::lowering::{FusedNode, LifetimeTable};
use crate::par::Exec;
use crate::platform::{
    compute_cycles, dma_cycles, ClusterConfig, CostError, Engine, HwpeKind, Workload,
};

pub use space::{tiles, Dim, Geometry, Halo, IterSpace, Operand, Role, Tile};

/// Upper limit on tilings enumerated by [`brute_force_tiling`].
pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TilerError {
    #[error("node `{node}`: no L1 left for tiles (budget {budget} B)")]
    Budget { node: String, budget: i64 },
    #[error("node `{node}`: smallest tile needs {min_footprint} B, budget is {budget} B")]
    Infeasible {
        node: String,
        min_footprint: u64,
        budget: u64,
    },
    #[error("{combinations} tilings exceed the exhaustive search limit")]
    TooLarge { combinations: u128 },
    #[error("node `{node}`: {source}")]
    Cost {
        node: String,
        #[source]
        source: CostError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub dim: usize,
    pub unit: u64,
}

/// Search problem for one fused node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub node: String,
    pub space: IterSpace,
    /// Bytes available for tile buffers.
    pub budget: u64,
    /// Buffers per L2-tiled operand.
    pub multiplicity: u64,
    /// Preferred tile-size multiples.
    pub align: Vec<Alignment>,
    pub prefer_alignment: bool,
    pub engine: Engine,
    pub op: Op,
    pub dtype: DType,
    pub tail: Vec<Op>,
    pub cfg: ClusterConfig,
}

/// Chosen tiling of one fused node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingSolution {
    pub node: String,
    pub dims: Vec<String>,
    pub extents: Vec<u64>,
    pub tile: Vec<u64>,
    pub counts: Vec<u64>,
    pub n_tiles: u64,
    /// Double-buffered L1 footprint.
    pub l1_footprint_bytes: u64,
    pub predicted_cycles: u64,
    pub objective: u64,
}

impl TilingSolution {
    pub fn tiles(&self, reduction: Option<usize>) -> Vec<Tile> {
        tiles(&self.extents, &self.tile, reduction)
    }
}

/// Transfer and compute demand of one tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileCost {
    pub in_bytes: u64,
    pub out_bytes: u64,
    pub kernel_cycles: u64,
}

impl ConstraintSet {
    fn has_weight(&self) -> bool {
        self.space
            .operands
            .iter()
            .any(|o| o.role == Role::Input && o.constant)
    }

    pub fn workload(&self, ext: &[u64], first_k: bool, last_k: bool) -> Workload {
        Workload {
            op: self.op,
            kernel: self.space.kernel(ext),
            dtype: self.dtype,
            const_operand: self.has_weight(),
            tail: self.tail.clone(),
            out_elements: self.space.out_elements(ext),
            partial_pass: !first_k,
            finalize: last_k,
        }
    }

    /// Bytes moved in and out for a tile, plus its compute cycles.
    pub fn tile_cost(
        &self,
        ext: &[u64],
        first_k: bool,
        last_k: bool,
    ) -> Result<TileCost, TilerError> {
        let mut in_bytes = 0;
        let mut out_bytes = 0;
        for o in self.space.operands.iter().filter(|o| !o.resident) {
            match o.role {
                Role::Input => in_bytes += o.bytes(ext),
                Role::Residual if last_k => in_bytes += o.bytes(ext),
                Role::Output if last_k => out_bytes += o.bytes(ext),
                _ => {}
            }
        }
        let kernel_cycles = compute_cycles(
            &self.workload(ext, first_k, last_k),
            &self.engine,
            &self.cfg,
        )
        .map_err(|source| TilerError::Cost {
            node: self.node.clone(),
            source,
        })?;
        Ok(TileCost {
            in_bytes,
            out_bytes,
            kernel_cycles,
        })
    }

    /// L1 bytes for all tile buffers: `multiplicity` slots per L2-tiled
    /// operand. A split reduction keeps 32-bit partial sums in the output
    /// slots (or in one extra buffer when the output is resident).
    pub fn footprint(&self, tile: &[u64]) -> u64 {
        let split = self.space.splits_reduction(tile);
        let mut total = 0;
        for o in &self.space.operands {
            let elements = o.elements(tile);
            let bytes = if o.role == Role::Output && split {
                o.bytes(tile).max(elements * 4)
            } else {
                o.bytes(tile)
            };
            if !o.resident {
                total += self.multiplicity * bytes;
            } else if o.role == Role::Output && split {
                total += elements * 4;
            }
        }
        total
    }

    fn misaligned(&self, tile: &[u64]) -> u32 {
        if !self.prefer_alignment {
            return 0;
        }
        self.align
            .iter()
            .filter(|a| {
                let t = tile[a.dim];
                !t.is_multiple_of(a.unit) && t != self.space.dims[a.dim].extent
            })
            .count() as u32
    }

    /// Compact description of everything that determines the solution
    /// except tensor and node names.
    pub fn signature(&self) -> String {
        let operands: Vec<_> = self
            .space
            .operands
            .iter()
            .map(|o| {
                (
                    o.role, o.dtype, &o.dims, o.factor, o.halo, o.resident, o.constant,
                )
            })
            .collect();
        format!(
            "{:?}|{:?}|{:?}|{:?}|{}|{}|{:?}|{}|{:?}|{:?}|{:?}",
            self.space.extents(),
            self.space.geometry,
            self.space.reduction,
            operands,
            self.budget,
            self.multiplicity,
            self.align,
            self.prefer_alignment,
            self.engine,
            self.op,
            (self.dtype, &self.tail),
        )
    }
}

/// Builds the search problem for a colored fused node.
///
/// The budget is L1 minus the resident region and the reserved runtime
/// area. L2-tiled operands are double buffered; resident operands need no
/// transfer and no tile buffer.
pub fn build_constraints(
    node: &FusedNode,
    g: &Graph,
    cfg: &ClusterConfig,
    lifetimes: &LifetimeTable,
) -> Result<ConstraintSet, TilerError> {
    let budget = cfg.tiling_budget(lifetimes.resident_bytes);
    if budget <= 0 {
        return Err(TilerError::Budget {
            node: node.name().to_string(),
            budget,
        });
    }
    let anchor = &node.anchor;
    let out_tensor = node.output();
    let operand = |tensor: &str, role: Role, dims: Vec<usize>, factor: u64| {
        let spec = g.spec(tensor);
        Operand {
            tensor: tensor.to_string(),
            role,
            dtype: spec.dtype,
            dims,
            factor,
            halo: None,
            resident: lifetimes.is_resident(tensor),
            constant: spec.kind == TensorKind::Weight,
        }
    };
    let dim = |name: &str, extent: u64| Dim {
        name: name.to_string(),
        extent,
    };

    let (dims, geometry, reduction, mut operands, out_dims, out_factor) = match anchor.op {
        Op::Gemm | Op::MatMul => {
            let (m, k, n) = g.matmul_dims(anchor);
            let ops = vec![
                operand(&anchor.inputs[0], Role::Input, vec![0, 2], 1),
                operand(&anchor.inputs[1], Role::Input, vec![2, 1], 1),
            ];
            (
                vec![dim("m", m), dim("n", n), dim("k", k)],
                Geometry::Matmul,
                Some(2),
                ops,
                vec![0, 1],
                1,
            )
        }
        Op::Conv2D | Op::DepthwiseConv2D => {
            let x = g.spec(&anchor.inputs[0]);
            let w = g.spec(&anchor.inputs[1]);
            let out = g.spec(&anchor.outputs[0]);
            let kernel = w.shape[2];
            let depthwise = anchor.op == Op::DepthwiseConv2D;
            let halo = Halo {
                channel_dim: if depthwise { 0 } else { 3 },
                row_dim: 1,
                col_dim: 2,
                stride: anchor.attr("stride", 1) as u64,
                kernel,
                height: x.shape[1],
                width: x.shape[2],
            };
            let mut input = operand(&anchor.inputs[0], Role::Input, vec![], 1);
            input.halo = Some(halo);
            let mut dims = vec![
                dim("cout", out.shape[0]),
                dim("oh", out.shape[1]),
                dim("ow", out.shape[2]),
            ];
            let (weight_dims, reduction) = if depthwise {
                (vec![0], None)
            } else {
                dims.push(dim("cin", x.shape[0]));
                (vec![0, 3], Some(3))
            };
            let ops = vec![
                input,
                operand(&anchor.inputs[1], Role::Input, weight_dims, kernel * kernel),
            ];
            (
                dims,
                Geometry::Conv { kernel, depthwise },
                reduction,
                ops,
                vec![0, 1, 2],
                1,
            )
        }
        _ => {
            let out = g.spec(&anchor.outputs[0]);
            let (rows, row) = match anchor.op {
                Op::Softmax | Op::LayerNorm | Op::Concat => {
                    let last = *out.shape.last().expect("shaped");
                    (out.elements() / last, last)
                }
                Op::Transpose => {
                    let input = g.spec(&anchor.inputs[0]);
                    (input.shape[0], input.shape[1])
                }
                _ => (out.elements(), 1),
            };
            let ops = anchor
                .inputs
                .iter()
                .map(|t| {
                    let factor = match anchor.op {
                        Op::Concat => *g.spec(t).shape.last().expect("shaped"),
                        _ => row,
                    };
                    operand(t, Role::Input, vec![0], factor)
                })
                .collect();
            (
                vec![dim("rows", rows)],
                Geometry::Elementwise { row },
                None,
                ops,
                vec![0],
                row,
            )
        }
    };
    for t in node.tail_inputs() {
        operands.push(operand(t, Role::Residual, out_dims.clone(), out_factor));
    }
    operands.push(operand(out_tensor, Role::Output, out_dims, out_factor));

    let engine = node.engine().clone();
    let align = alignment(anchor.op, &geometry, reduction, node.dtype, &engine, cfg);
    Ok(ConstraintSet {
        node: node.name().to_string(),
        space: IterSpace {
            dims,
            geometry,
            reduction,
            operands,
        },
        budget: budget as u64,
        multiplicity: 2,
        align,
        prefer_alignment: true,
        engine,
        op: anchor.op,
        dtype: node.dtype,
        tail: node.tail_ops(),
        cfg: cfg.clone(),
    })
}

/// Engine-geometry multiples: systolic arrays want `m` in multiples of
/// rows and `k` in multiples of columns; quantized engines want channel
/// blocks; cores want the reduction in whole SIMD words.
fn alignment(
    op: Op,
    geometry: &Geometry,
    reduction: Option<usize>,
    dtype: DType,
    engine: &Engine,
    cfg: &ClusterConfig,
) -> Vec<Alignment> {
    let a = |dim: usize, unit: u64| Alignment { dim, unit };
    let mut out = match engine {
        Engine::Hwpe(name) => {
            let Some(h) = cfg.hwpe(name) else {
                return Vec::new();
            };
            let (rows, cols) = (h.rows as u64, h.cols as u64);
            match (h.kind, geometry) {
                (HwpeKind::GemmSystolic, Geometry::Matmul) => vec![a(0, rows), a(2, cols)],
                (HwpeKind::ConvQuantized, Geometry::Matmul) => vec![a(2, rows), a(1, cols)],
                (
                    HwpeKind::ConvQuantized,
                    Geometry::Conv {
                        depthwise: false, ..
                    },
                ) => {
                    vec![a(3, rows), a(0, cols)]
                }
                (
                    HwpeKind::ConvQuantized,
                    Geometry::Conv {
                        depthwise: true, ..
                    },
                ) => {
                    vec![a(0, cols)]
                }
                _ => Vec::new(),
            }
        }
        Engine::Cores => match reduction {
            Some(r) if op.is_mac() => vec![a(r, (32 / dtype.bits()).max(1))],
            _ => Vec::new(),
        },
    };
    out.retain(|x| x.unit > 1);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Position {
    Any,
    Only,
    First,
    Middle,
    Last,
}

/// Tiles grouped by identical extents and reduction position.
fn classes(
    extents: &[u64],
    tile: &[u64],
    reduction: Option<usize>,
) -> Vec<(Vec<u64>, u64, bool, bool)> {
    let mut per_dim: Vec<Vec<(u64, u64, Position)>> = Vec::with_capacity(extents.len());
    for (d, (&e, &t)) in extents.iter().zip(tile).enumerate() {
        let mut opts = Vec::with_capacity(3);
        if Some(d) == reduction {
            let n = e.div_ceil(t);
            if n == 1 {
                opts.push((e, 1, Position::Only));
            } else {
                opts.push((t, 1, Position::First));
                if n > 2 {
                    opts.push((t, n - 2, Position::Middle));
                }
                opts.push((e - (n - 1) * t, 1, Position::Last));
            }
        } else {
            if e / t > 0 {
                opts.push((t, e / t, Position::Any));
            }
            if e % t > 0 {
                opts.push((e % t, 1, Position::Any));
            }
        }
        per_dim.push(opts);
    }
    let mut out = vec![(Vec::with_capacity(extents.len()), 1u64, true, true)];
    for opts in per_dim {
        let mut next = Vec::with_capacity(out.len() * opts.len());
        for (ext, count, first, last) in &out {
            for &(size, n, pos) in &opts {
                let mut e = ext.clone();
                e.push(size);
                let f = matches!(pos, Position::Any | Position::Only | Position::First);
                let l = matches!(pos, Position::Any | Position::Only | Position::Last);
                next.push((e, count * n, *first && f, *last && l));
            }
        }
        out = next;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Eval {
    cycles: u64,
    /// `max(sum of compute, sum of transfers)`; never above `cycles` and
    /// never above the value of any refinement of the tiling.
    bound: u64,
}

/// Predicted node cycles under the double-buffered pipeline:
/// `in(first) + sum_i max(kernel_i, in_i + out_i) + out(last)`.
fn evaluate(cs: &ConstraintSet, tile: &[u64]) -> Result<Eval, TilerError> {
    let extents = cs.space.extents();
    let reduction = cs.space.reduction;
    let cfg = &cs.cfg;
    let mut steady = 0;
    let mut compute = 0;
    let mut transfer = 0;
    for (ext, count, first, last) in classes(&extents, tile, reduction) {
        let c = cs.tile_cost(&ext, first, last)?;
        let dma = dma_cycles(c.in_bytes, cfg) + dma_cycles(c.out_bytes, cfg);
        steady += count * c.kernel_cycles.max(dma);
        compute += count * c.kernel_cycles;
        transfer += count * dma;
    }
    let single_k = reduction.is_none_or(|r| tile[r] >= extents[r]);
    let first_ext: Vec<u64> = extents.iter().zip(tile).map(|(&e, &t)| e.min(t)).collect();
    let last_ext: Vec<u64> = extents
        .iter()
        .zip(tile)
        .map(|(&e, &t)| e - (e.div_ceil(t) - 1) * t)
        .collect();
    let fill = dma_cycles(cs.tile_cost(&first_ext, true, single_k)?.in_bytes, cfg);
    let drain = dma_cycles(cs.tile_cost(&last_ext, single_k, true)?.out_bytes, cfg);
    Ok(Eval {
        cycles: fill + steady + drain,
        bound: compute.max(transfer),
    })
}

/// Total order used to pick among feasible tilings: cycles, then aligned
/// dims, then larger tiles, then fewer tiles on the outermost dim, then
/// the lexicographically larger tile.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Score {
    cycles: u64,
    misaligned: u32,
    volume: Reverse<u128>,
    outer_tiles: u64,
    tile: Reverse<Vec<u64>>,
}

fn score(cs: &ConstraintSet, tile: &[u64], cycles: u64) -> Score {
    let extents = cs.space.extents();
    Score {
        cycles,
        misaligned: cs.misaligned(tile),
        volume: Reverse(tile.iter().map(|&t| t as u128).product()),
        outer_tiles: extents.first().map_or(1, |&e| e.div_ceil(tile[0])),
        tile: Reverse(tile.to_vec()),
    }
}

fn solution(cs: &ConstraintSet, tile: Vec<u64>, cycles: u64) -> TilingSolution {
    let extents = cs.space.extents();
    let counts: Vec<u64> = extents
        .iter()
        .zip(&tile)
        .map(|(e, t)| e.div_ceil(*t))
        .collect();
    let footprint = cs.footprint(&tile);
    assert!(
        footprint <= cs.budget,
        "tiling of `{}` exceeds the L1 budget",
        cs.node
    );
    TilingSolution {
        node: cs.node.clone(),
        dims: cs.space.dims.iter().map(|d| d.name.clone()).collect(),
        n_tiles: counts.iter().product(),
        extents,
        tile,
        counts,
        l1_footprint_bytes: footprint,
        predicted_cycles: cycles,
        objective: cycles,
    }
}

/// Solution record for a given tile, without searching.
pub fn evaluate_tiling(cs: &ConstraintSet, tile: &[u64]) -> Result<TilingSolution, TilerError> {
    let tile: Vec<u64> = cs
        .space
        .extents()
        .iter()
        .zip(tile)
        .map(|(&e, &t)| t.clamp(1, e))
        .collect();
    let footprint = cs.footprint(&tile);
    if footprint > cs.budget {
        return Err(TilerError::Infeasible {
            node: cs.node.clone(),
            min_footprint: footprint,
            budget: cs.budget,
        });
    }
    let cycles = evaluate(cs, &tile)?.cycles;
    Ok(solution(cs, tile, cycles))
}

/// Smallest footprint over all completions of `prefix`. Footprints grow
/// with every extent except at the reduction boundary, where the 32-bit
/// partial sums disappear once the reduction is not split.
fn min_footprint(cs: &ConstraintSet, prefix: &[u64]) -> u64 {
    let mut tile: Vec<u64> = (0..cs.space.dims.len())
        .map(|d| prefix.get(d).copied().unwrap_or(1))
        .collect();
    let mut min = cs.footprint(&tile);
    if let Some(r) = cs.space.reduction.filter(|&r| r >= prefix.len()) {
        tile[r] = cs.space.dims[r].extent;
        min = min.min(cs.footprint(&tile));
    }
    min
}

fn check_feasible(cs: &ConstraintSet) -> Result<(), TilerError> {
    let ones = vec![1; cs.space.dims.len()];
    let min = min_footprint(cs, &[]);
    if min > cs.budget {
        return Err(TilerError::Infeasible {
            node: cs.node.clone(),
            min_footprint: min,
            budget: cs.budget,
        });
    }
    // surface cost-model errors before searching
    evaluate(cs, &ones).map(|_| ())
}

/// Candidate extents for a dim, largest first: divisors, multiples of the
/// alignment unit, balanced splits `ceil(E / n)` and the full extent.
pub fn candidates(extent: u64, unit: Option<u64>) -> Vec<u64> {
    let mut c = Vec::new();
    let mut i = 1;
    while i <= extent && (i - 1) * (i - 1) <= extent {
        if extent.is_multiple_of(i) {
            c.push(i);
            c.push(extent / i);
        }
        c.push(extent.div_ceil(i));
        c.push(i);
        i += 1;
    }
    if let Some(u) = unit {
        c.extend((1..=extent / u).map(|j| j * u));
    }
    c.push(extent);
    c.sort_unstable_by(|a, b| b.cmp(a));
    c.dedup();
    c
}

/// One step of the branch-and-bound search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub node: String,
    /// Extents fixed so far (outermost first).
    pub tile: Vec<u64>,
    pub bound: u64,
    pub outcome: TraceOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceOutcome {
    /// Smallest completion already exceeds the budget.
    Footprint,
    /// Lower bound exceeds the incumbent.
    Bound,
    Branch,
    Leaf,
    Incumbent,
}

/// Trace as JSON lines.
pub fn trace_json_lines(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace serializes"));
        out.push('\n');
    }
    out
}

struct Search<'a> {
    cs: &'a ConstraintSet,
    cands: Vec<Vec<u64>>,
    extents: Vec<u64>,
    trace: bool,
}

#[derive(Default)]
struct Branch {
    best: Option<(Score, Vec<u64>)>,
    events: Vec<TraceEvent>,
}

impl Search<'_> {
    fn event(&self, out: &mut Branch, tile: &[u64], bound: u64, outcome: TraceOutcome) {
        if self.trace {
            out.events.push(TraceEvent {
                node: self.cs.node.clone(),
                tile: tile.to_vec(),
                bound,
                outcome,
            });
        }
    }

    fn completion(&self, prefix: &[u64], fill: impl Fn(usize) -> u64) -> Vec<u64> {
        (0..self.extents.len())
            .map(|d| if d < prefix.len() { prefix[d] } else { fill(d) })
            .collect()
    }

    fn visit(&self, prefix: &mut Vec<u64>, out: &mut Branch) {
        if min_footprint(self.cs, prefix) > self.cs.budget {
            self.event(out, prefix, 0, TraceOutcome::Footprint);
            return;
        }
        let coarsest = self.completion(prefix, |d| self.extents[d]);
        let eval = evaluate(self.cs, &coarsest).expect("cost model checked");
        let incumbent = out.best.as_ref().map(|(s, _)| s.cycles);
        if incumbent.is_some_and(|c| eval.bound > c) {
            self.event(out, prefix, eval.bound, TraceOutcome::Bound);
            return;
        }
        if prefix.len() == self.extents.len() {
            let s = score(self.cs, prefix, eval.cycles);
            let better = out.best.as_ref().is_none_or(|(b, _)| s < *b);
            let outcome = if better {
                TraceOutcome::Incumbent
            } else {
                TraceOutcome::Leaf
            };
            self.event(out, prefix, eval.bound, outcome);
            if better {
                out.best = Some((s, prefix.clone()));
            }
            return;
        }
        self.event(out, prefix, eval.bound, TraceOutcome::Branch);
        for &c in &self.cands[prefix.len()] {
            prefix.push(c);
            self.visit(prefix, out);
            prefix.pop();
        }
    }
}

fn merge(branches: Vec<Branch>) -> Branch {
    let mut out = Branch::default();
    for b in branches {
        out.events.extend(b.events);
        if let Some((s, t)) = b.best {
            if out
                .best
                .as_ref()
                .is_none_or(|(o, _)| s.cmp(o) == Ordering::Less)
            {
                out.best = Some((s, t));
            }
        }
    }
    out
}

/// Branch-and-bound search over the candidate extents.
pub fn solve_tiling(cs: &ConstraintSet) -> Result<TilingSolution, TilerError> {
    solve_tiling_with(cs, Exec::default(), false).map(|(s, _)| s)
}

/// [`solve_tiling`] with an explicit execution strategy and optional trace.
/// Subtrees of the outermost dim are searched independently and merged by
/// score, so the result does not depend on the strategy.
pub fn solve_tiling_with(
    cs: &ConstraintSet,
    exec: Exec,
    trace: bool,
) -> Result<(TilingSolution, Vec<TraceEvent>), TilerError> {
    check_feasible(cs)?;
    let extents = cs.space.extents();
    let cands = extents
        .iter()
        .enumerate()
        .map(|(d, &e)| {
            let unit = cs.align.iter().find(|a| a.dim == d).map(|a| a.unit);
            candidates(e, unit)
        })
        .collect();
    let search = Search {
        cs,
        cands,
        extents,
        trace,
    };
    let branches = exec.map(&search.cands[0], |&c| {
        let mut out = Branch::default();
        search.visit(&mut vec![c], &mut out);
        out
    });
    let merged = merge(branches);
    let (best, tile) = merged.best.expect("all-ones tiling is feasible");
    let (best, tile) = polish(cs, best, tile)?;
    Ok((solution(cs, tile, best.cycles), merged.events))
}

/// Coordinate descent from the search result over every integer extent of
/// one dim at a time. Recovers uneven splits the candidate set misses.
fn polish(
    cs: &ConstraintSet,
    mut best: Score,
    mut tile: Vec<u64>,
) -> Result<(Score, Vec<u64>), TilerError> {
    const MAX_ROUNDS: usize = 8;
    let extents = cs.space.extents();
    for _ in 0..MAX_ROUNDS {
        let mut improved = false;
        for d in 0..extents.len() {
            let mut trial = tile.clone();
            for t in 1..=extents[d] {
                trial[d] = t;
                if t == tile[d] || cs.footprint(&trial) > cs.budget {
                    continue;
                }
                let s = score(cs, &trial, evaluate(cs, &trial)?.cycles);
                if s < best {
                    best = s;
                    tile = trial.clone();
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    Ok((best, tile))
}

/// Exhaustive search over every integer tile extent.
pub fn brute_force_tiling(cs: &ConstraintSet) -> Result<TilingSolution, TilerError> {
    let extents = cs.space.extents();
    let combinations: u128 = extents.iter().map(|&e| e as u128).product();
    if combinations > BRUTE_FORCE_LIMIT as u128 {
        return Err(TilerError::TooLarge { combinations });
    }
    check_feasible(cs)?;
    let mut best: Option<(Score, Vec<u64>)> = None;
    let mut tile = vec![1u64; extents.len()];
    loop {
        if cs.footprint(&tile) <= cs.budget {
            let cycles = evaluate(cs, &tile)?.cycles;
            let s = score(cs, &tile, cycles);
            if best.as_ref().is_none_or(|(b, _)| s < *b) {
                best = Some((s, tile.clone()));
            }
        }
        let mut d = extents.len();
        loop {
            if d == 0 {
                let (s, t) = best.expect("all-ones tiling is feasible");
                return Ok(solution(cs, t, s.cycles));
            }
            d -= 1;
            tile[d] += 1;
            if tile[d] <= extents[d] {
                break;
            }
            tile[d] = 1;
        }
    }
}

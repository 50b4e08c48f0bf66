//! Fusion, engine coloring, tensor lifetimes and L1 promotion.

mod alloc;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{topo_order, DType, Graph, GraphError, Node, Op, TensorKind};
use crate::platform::{hwpe_runs_op, ClusterConfig, Engine};

pub use alloc::{first_fit, Interval, Placement};

#[derive(Debug, Error)]
pub enum LoweringError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node `{node}`: dtype {dtype} is not supported by any engine")]
    UnsupportedDtype { node: String, dtype: DType },
    #[error("tensor `{tensor}` needs {bytes} B but L2 holds {l2_bytes} B")]
    L2Capacity {
        tensor: String,
        bytes: u64,
        l2_bytes: u64,
    },
}

/// A compute op plus the elementwise chain fused onto its output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedNode {
    pub anchor: Node,
    pub tail: Vec<Node>,
    /// `None` until [`color`] runs.
    pub engine: Option<Engine>,
    /// Dtype of the anchor's first operand.
    pub dtype: DType,
}

impl FusedNode {
    pub fn name(&self) -> &str {
        &self.anchor.name
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        std::iter::once(&self.anchor).chain(&self.tail)
    }

    /// Tensor written back by the group.
    pub fn output(&self) -> &str {
        self.tail.last().unwrap_or(&self.anchor).output()
    }

    /// Tensors read from outside the group, in first-use order.
    pub fn inputs(&self) -> Vec<&str> {
        let internal: HashSet<&str> = self.nodes().map(|n| n.output()).collect();
        let mut seen = HashSet::new();
        self.nodes()
            .flat_map(|n| n.inputs.iter().map(String::as_str))
            .filter(|t| !internal.contains(t) && seen.insert(*t))
            .collect()
    }

    /// Ops of the fused chain.
    pub fn tail_ops(&self) -> Vec<Op> {
        self.tail.iter().map(|n| n.op).collect()
    }

    /// Tensors consumed only by tail ops (residual operands of a fused Add).
    pub fn tail_inputs(&self) -> Vec<&str> {
        let anchor: HashSet<&str> = self.anchor.inputs.iter().map(String::as_str).collect();
        self.inputs()
            .into_iter()
            .filter(|t| !anchor.contains(t))
            .collect()
    }

    pub fn engine(&self) -> &Engine {
        self.engine.as_ref().expect("fused node is colored")
    }
}

fn is_anchor(op: Op) -> bool {
    op.is_mac()
}

/// Groups nodes into fused nodes.
///
/// A MAC op absorbs, in this order, an optional Requant, an optional
/// Activation and an optional Add that combines the chain output with a
/// residual. The chain only grows through tensors with a single consumer
/// that are not graph outputs. Groups are ordered by the topological
/// position of their last member.
pub fn fuse(g: &Graph) -> Result<Vec<FusedNode>, LoweringError> {
    let order = topo_order(g)?;
    let position: HashMap<usize, usize> = order.iter().enumerate().map(|(p, &n)| (n, p)).collect();
    let consumers = g.consumers();
    let nodes = g.nodes();
    let mut taken = vec![false; nodes.len()];
    let mut groups: Vec<(usize, FusedNode)> = Vec::new();

    for &ni in &order {
        if taken[ni] {
            continue;
        }
        taken[ni] = true;
        let anchor = &nodes[ni];
        let mut tail = Vec::new();
        let mut last = ni;
        if is_anchor(anchor.op) {
            let mut current = anchor.output();
            for allowed in [Op::Requant, Op::Activation, Op::Add] {
                if g.spec(current).kind == TensorKind::GraphOutput {
                    break;
                }
                let next = match consumers.get(current).map(Vec::as_slice) {
                    Some(&[c]) => c,
                    _ => break,
                };
                let node = &nodes[next];
                if node.op != allowed || taken[next] {
                    continue;
                }
                if node.op == Op::Add && node.inputs.iter().all(|i| i == current) {
                    continue;
                }
                taken[next] = true;
                tail.push(node.clone());
                last = next;
                current = node.output();
            }
        }
        let dtype = g.spec(&anchor.inputs[0]).dtype;
        groups.push((
            position[&last],
            FusedNode {
                anchor: anchor.clone(),
                tail,
                engine: None,
                dtype,
            },
        ));
    }
    groups.sort_by_key(|(p, _)| *p);
    Ok(groups.into_iter().map(|(_, f)| f).collect())
}

/// Assigns each fused node to the highest-throughput engine that can run
/// it. An HWPE must run the anchor op and dtype and, if it needs a
/// stationary operand, the anchor must read a weight. Ties go to the HWPE
/// declared first; the core cluster is the fallback.
pub fn color(
    nodes: &[FusedNode],
    g: &Graph,
    cfg: &ClusterConfig,
) -> Result<Vec<FusedNode>, LoweringError> {
    nodes
        .iter()
        .map(|f| {
            let mut f = f.clone();
            f.engine = Some(pick_engine(&f, g, cfg)?);
            Ok(f)
        })
        .collect()
}

fn pick_engine(f: &FusedNode, g: &Graph, cfg: &ClusterConfig) -> Result<Engine, LoweringError> {
    let has_weight = f
        .anchor
        .inputs
        .iter()
        .any(|t| g.spec(t).kind == TensorKind::Weight);
    let mut best: Option<(f64, Engine)> = cfg
        .cores
        .peak_macs_per_cycle(f.dtype)
        .map(|p| (p, Engine::Cores));
    for h in &cfg.hwpes {
        if !hwpe_runs_op(h, f.anchor.op) || (h.requires_const_operand && !has_weight) {
            continue;
        }
        let Some(peak) = h.peak(f.dtype) else {
            continue;
        };
        let peak = peak as f64;
        let better = match &best {
            None => true,
            Some((p, Engine::Cores)) => peak >= *p,
            Some((p, _)) => peak > *p,
        };
        if better {
            best = Some((peak, Engine::Hwpe(h.name.clone())));
        }
    }
    best.map(|(_, e)| e)
        .ok_or_else(|| LoweringError::UnsupportedDtype {
            node: f.name().to_string(),
            dtype: f.dtype,
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemLevel {
    L2,
    L1Resident,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lifetime {
    pub tensor: String,
    /// Index of the producing fused node, -1 for graph inputs and weights.
    pub first_def: i64,
    pub last_use: i64,
    pub bytes: u64,
    pub kind: TensorKind,
    pub level: MemLevel,
    /// Offset inside the L1 resident region.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1_offset: Option<u64>,
    /// Produced but never read.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub dead: bool,
}

impl Lifetime {
    pub fn interval(&self) -> Interval {
        Interval::new(self.first_def, self.last_use)
    }
}

/// Lifetimes of every tensor visible at fused-node granularity, keyed by
/// tensor name. Tensors internal to a fused group never reach memory and
/// are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LifetimeTable {
    pub entries: BTreeMap<String, Lifetime>,
    /// Bytes reserved at the bottom of L1 for resident tensors.
    pub resident_bytes: u64,
}

impl LifetimeTable {
    pub fn get(&self, tensor: &str) -> Option<&Lifetime> {
        self.entries.get(tensor)
    }

    pub fn level(&self, tensor: &str) -> MemLevel {
        self.entries.get(tensor).map_or(MemLevel::L2, |l| l.level)
    }

    pub fn is_resident(&self, tensor: &str) -> bool {
        self.level(tensor) == MemLevel::L1Resident
    }
}

/// Lifetimes in fused-node order. Graph outputs live until the last node.
pub fn compute_lifetimes(nodes: &[FusedNode], g: &Graph) -> LifetimeTable {
    let end = nodes.len() as i64 - 1;
    let mut entries = BTreeMap::new();
    let mut touch = |tensor: &str, def: Option<i64>, usage: Option<i64>| {
        let spec = g.spec(tensor);
        let e = entries
            .entry(tensor.to_string())
            .or_insert_with(|| Lifetime {
                tensor: tensor.to_string(),
                first_def: -1,
                last_use: -1,
                bytes: spec.bytes(),
                kind: spec.kind,
                level: MemLevel::L2,
                l1_offset: None,
                dead: false,
            });
        if let Some(d) = def {
            e.first_def = d;
            e.last_use = e.last_use.max(d);
        }
        if let Some(u) = usage {
            e.last_use = e.last_use.max(u);
        }
    };
    for (i, f) in nodes.iter().enumerate() {
        let i = i as i64;
        for t in f.inputs() {
            touch(t, None, Some(i));
        }
        touch(f.output(), Some(i), None);
    }
    let consumed: HashSet<&str> = nodes.iter().flat_map(|f| f.inputs()).collect();
    for e in entries.values_mut() {
        if e.kind == TensorKind::GraphOutput {
            e.last_use = end;
        } else if e.kind.is_produced() && !consumed.contains(e.tensor.as_str()) {
            log::warn!("tensor `{}` is produced but never used", e.tensor);
            e.dead = true;
        }
    }
    LifetimeTable {
        entries,
        resident_bytes: 0,
    }
}

/// Marks intermediate activations as L1-resident.
///
/// Candidates span at least two fused nodes and are visited by ascending
/// size (then name); each is placed first-fit among residents with
/// overlapping lifetimes and accepted if it stays within the residency
/// budget. Everything else stays in L2 and is tiled in and out.
pub fn promote(table: &LifetimeTable, cfg: &ClusterConfig) -> Result<LifetimeTable, LoweringError> {
    let mut out = table.clone();
    for e in out.entries.values_mut() {
        if e.bytes > cfg.l2_bytes {
            return Err(LoweringError::L2Capacity {
                tensor: e.tensor.clone(),
                bytes: e.bytes,
                l2_bytes: cfg.l2_bytes,
            });
        }
        e.level = MemLevel::L2;
        e.l1_offset = None;
    }
    let budget = cfg.residency_budget();
    let mut candidates: Vec<&Lifetime> = out
        .entries
        .values()
        .filter(|e| {
            e.kind == TensorKind::Activation
                && !e.dead
                && e.last_use > e.first_def
                && e.bytes <= budget
        })
        .collect();
    candidates.sort_by(|a, b| a.bytes.cmp(&b.bytes).then_with(|| a.tensor.cmp(&b.tensor)));

    let mut placed: Vec<Placement> = Vec::new();
    let mut accepted = Vec::new();
    for c in candidates {
        let offset = first_fit(&placed, c.interval(), c.bytes);
        if offset + c.bytes <= budget {
            placed.push(Placement {
                interval: c.interval(),
                offset,
                bytes: c.bytes,
            });
            accepted.push((c.tensor.clone(), offset));
        }
    }
    for (tensor, offset) in accepted {
        let e = out.entries.get_mut(&tensor).expect("candidate exists");
        e.level = MemLevel::L1Resident;
        e.l1_offset = Some(offset);
    }
    out.resident_bytes = placed.iter().map(|p| p.offset + p.bytes).max().unwrap_or(0);
    Ok(out)
}

/// Fused, colored and memory-annotated graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lowered {
    pub nodes: Vec<FusedNode>,
    pub lifetimes: LifetimeTable,
}

/// Runs fusion, coloring, lifetime analysis and promotion.
pub fn lower(g: &Graph, cfg: &ClusterConfig) -> Result<Lowered, LoweringError> {
    let nodes = color(&fuse(g)?, g, cfg)?;
    let lifetimes = promote(&compute_lifetimes(&nodes, g), cfg)?;
    Ok(Lowered { nodes, lifetimes })
}

#[derive(Serialize)]
struct ReportNode<'a> {
    index: usize,
    name: &'a str,
    op: Op,
    engine: String,
    dtype: DType,
    fused: Vec<&'a str>,
    inputs: Vec<&'a str>,
    output: &'a str,
}

#[derive(Serialize)]
struct Report<'a> {
    nodes: Vec<ReportNode<'a>>,
    resident_bytes: u64,
    lifetimes: Vec<&'a Lifetime>,
}

/// Per-node engine, fusion groups and lifetimes as pretty JSON.
pub fn lowering_report(l: &Lowered) -> String {
    let report = Report {
        nodes: l
            .nodes
            .iter()
            .enumerate()
            .map(|(index, f)| ReportNode {
                index,
                name: f.name(),
                op: f.anchor.op,
                engine: f.engine.as_ref().map_or("-".into(), Engine::to_string),
                dtype: f.dtype,
                fused: f.tail.iter().map(|n| n.name.as_str()).collect(),
                inputs: f.inputs(),
                output: f.output(),
            })
            .collect(),
        resident_bytes: l.lifetimes.resident_bytes,
        lifetimes: l.lifetimes.entries.values().collect(),
    };
    serde_json::to_string_pretty(&report).expect("report serializes")
}

#[cfg(test)]
mod tests;

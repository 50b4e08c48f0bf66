//! Double-buffered action DAG for a tiled, lowered graph.

mod alloc;
mod emit;
mod hazard;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::graph::Op;
use crate::platform::{ClusterConfig, Engine, Workload};
use crate::tiler::{ConstraintSet, Role, TilingSolution};

pub use alloc::{allocate_buffers, AllocError, AllocationMap, Buffer, ResidentBuffer};
pub use emit::{emit_pseudocode, schedule_json};
pub use hazard::{check_hazards, reachability, HazardError};

use hazard::Tracker;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    DmaIn,
    DmaOut,
    HwpeProgram,
    HwpeTrigger,
    HwpeJob,
    CoreKernel,
    WaitEot,
    WaitEoc,
    AcquireLock,
    SoftClear,
}

impl ActionKind {
    pub fn is_compute(self) -> bool {
        matches!(self, ActionKind::HwpeJob | ActionKind::CoreKernel)
    }

    pub fn is_dma(self) -> bool {
        matches!(self, ActionKind::DmaIn | ActionKind::DmaOut)
    }
}

/// Byte range of L1 touched by an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub offset: u64,
    pub bytes: u64,
    pub write: bool,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.offset + self.bytes
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.bytes > 0 && other.bytes > 0 && self.offset < other.end() && other.offset < self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub id: usize,
    pub kind: ActionKind,
    /// Fused-node index.
    pub node: usize,
    pub tile: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot: Option<u8>,
    /// Transfer size for DMA actions.
    pub bytes: u64,
    /// Tile extents for compute actions.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub dims: Vec<u64>,
    /// MACs (or elements for non-MAC anchors) of compute actions.
    pub work: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workload: Option<Workload>,
    /// HWPE addressed by HWPE actions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hwpe: Option<String>,
    pub deps: Vec<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub l1: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub name: String,
    pub op: Op,
    pub tail: Vec<Op>,
    pub engine: Engine,
    pub reduction: Option<usize>,
    pub tiling: TilingSolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub nodes: Vec<NodeInfo>,
    /// Topologically ordered: every dependency has a smaller id.
    pub actions: Vec<Action>,
    pub allocation: AllocationMap,
    /// Register-file contexts per HWPE.
    pub contexts: BTreeMap<String, u32>,
}

struct Builder {
    actions: Vec<Action>,
    tracker: Tracker,
}

impl Builder {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        kind: ActionKind,
        node: usize,
        tile: u64,
        slot: Option<u8>,
        mut deps: Vec<usize>,
        l1: Vec<Region>,
        l2: &[(String, bool)],
    ) -> usize {
        let id = self.actions.len();
        for r in &l1 {
            self.tracker.access_l1(id, *r, &mut deps);
        }
        for (tensor, write) in l2 {
            self.tracker.access_l2(id, tensor, *write, &mut deps);
        }
        deps.sort_unstable();
        deps.dedup();
        self.actions.push(Action {
            id,
            kind,
            node,
            tile,
            slot,
            bytes: 0,
            dims: Vec::new(),
            work: 0,
            workload: None,
            hwpe: None,
            deps,
            l1,
        });
        id
    }
}

/// Expands every node into its tile pipeline.
///
/// Per tile `i` (input slot `i mod 2`, output slot `block mod 2`):
/// `DMA_IN(i)` waits for tile `i-2` to release its slot (its copy-out, or
/// its compute when it has none); HWPE tiles acquire a register-file
/// context (freed by the job `contexts` jobs earlier), program it, wait
/// for the copy-in and trigger; the job follows the previous job on the
/// same engine; `DMA_OUT` waits for end-of-computation. Core tiles replace
/// the HWPE sequence by one `CORE_KERNEL`. On top of these, every action
/// depends on earlier actions touching the same L1 bytes or L2 tensor
/// (read-after-write, write-after-read, write-after-write), which also
/// orders nodes by dataflow.
pub fn build_schedule(
    plans: &[(ConstraintSet, TilingSolution)],
    alloc: &AllocationMap,
    cfg: &ClusterConfig,
) -> Schedule {
    use ActionKind::*;
    let mut b = Builder {
        actions: Vec::new(),
        tracker: Tracker::default(),
    };
    let contexts: BTreeMap<String, u32> = cfg
        .hwpes
        .iter()
        .map(|h| (h.name.clone(), h.contexts))
        .collect();
    let mut jobs: HashMap<String, Vec<usize>> = HashMap::new();
    let mut last_kernel: Option<usize> = None;
    let mut nodes = Vec::with_capacity(plans.len());

    for (ni, (cs, sol)) in plans.iter().enumerate() {
        let reduction = cs.space.reduction;
        let tiles = sol.tiles(reduction);
        let hwpe = match &cs.engine {
            Engine::Hwpe(name) => Some(name.clone()),
            Engine::Cores => None,
        };
        let slot_region = |tensor: &str, slot: Option<u8>, bytes: u64, write: bool| {
            let buf = alloc
                .buffer(ni, tensor, slot)
                .unwrap_or_else(|| panic!("no buffer for {tensor} in node {ni}"));
            debug_assert!(bytes <= buf.bytes);
            Region {
                offset: buf.offset,
                bytes,
                write,
            }
        };
        let resident_region = |tensor: &str, write: bool| {
            let r = alloc.resident(tensor).expect("resident tensor is placed");
            Region {
                offset: r.offset,
                bytes: r.bytes,
                write,
            }
        };

        let mut dma_in: Vec<Option<usize>> = Vec::with_capacity(tiles.len());
        let mut compute: Vec<usize> = Vec::with_capacity(tiles.len());
        let mut dma_out: Vec<Option<usize>> = Vec::with_capacity(tiles.len());

        // Copy-in of tile i into input slot i mod 2.
        let issue_in = |b: &mut Builder, i: usize, dma_out: &[Option<usize>], compute: &[usize]| {
            let t = &tiles[i];
            let slot = (i % 2) as u8;
            let mut regions = Vec::new();
            let mut l2 = Vec::new();
            let mut bytes = 0;
            for o in &cs.space.operands {
                let loaded = match o.role {
                    Role::Input => true,
                    Role::Residual => t.last_k,
                    Role::Output => false,
                };
                if !loaded || o.resident {
                    continue;
                }
                let n = o.bytes(&t.extents);
                bytes += n;
                regions.push(slot_region(&o.tensor, Some(slot), n, true));
                l2.push((o.tensor.clone(), false));
            }
            if bytes == 0 {
                return None;
            }
            let mut deps = Vec::new();
            if i >= 2 {
                deps.push(dma_out[i - 2].unwrap_or(compute[i - 2]));
            }
            let id = b.push(DmaIn, ni, t.index, Some(slot), deps, regions, &l2);
            b.actions[id].bytes = bytes;
            Some(id)
        };

        dma_in.push(issue_in(&mut b, 0, &dma_out, &compute));
        for (i, t) in tiles.iter().enumerate() {
            let in_slot = (i % 2) as u8;
            let out_slot = (t.block % 2) as u8;
            let split = cs.space.splits_reduction(&sol.tile);

            // L1 regions read and written by the compute step.
            let mut regions = Vec::new();
            for o in &cs.space.operands {
                let used = match o.role {
                    Role::Input => true,
                    Role::Residual => t.last_k,
                    Role::Output => true,
                };
                if !used {
                    continue;
                }
                let write = o.role == Role::Output;
                if o.resident {
                    regions.push(resident_region(&o.tensor, write));
                    if write && split {
                        let acc = o.elements(&t.extents) * 4;
                        regions.push(slot_region(&o.tensor, None, acc, true));
                    }
                } else if write {
                    let n = if split {
                        o.bytes(&t.extents).max(o.elements(&t.extents) * 4)
                    } else {
                        o.bytes(&t.extents)
                    };
                    regions.push(slot_region(&o.tensor, Some(out_slot), n, true));
                } else {
                    regions.push(slot_region(
                        &o.tensor,
                        Some(in_slot),
                        o.bytes(&t.extents),
                        false,
                    ));
                }
            }

            let wait_deps: Vec<usize> = dma_in[i].into_iter().collect();
            let workload = cs.workload(&t.extents, t.first_k, t.last_k);
            let work = workload.work();
            let c = match &hwpe {
                Some(name) => {
                    let ctx = contexts.get(name).copied().unwrap_or(1) as usize;
                    let engine_jobs = jobs.entry(name.clone()).or_default();
                    let k = engine_jobs.len();
                    let freed: Vec<usize> = (k >= ctx)
                        .then(|| engine_jobs[k - ctx])
                        .into_iter()
                        .collect();
                    let prev_job = engine_jobs.last().copied();
                    let lock = b.push(AcquireLock, ni, t.index, None, freed.clone(), vec![], &[]);
                    let mut program_deps = freed;
                    program_deps.push(lock);
                    let program = b.push(HwpeProgram, ni, t.index, None, program_deps, vec![], &[]);
                    if i + 1 < tiles.len() {
                        let next = issue_in(&mut b, i + 1, &dma_out, &compute);
                        dma_in.push(next);
                    }
                    let eot = b.push(WaitEot, ni, t.index, Some(in_slot), wait_deps, vec![], &[]);
                    let trigger = b.push(
                        HwpeTrigger,
                        ni,
                        t.index,
                        None,
                        vec![program, eot],
                        vec![],
                        &[],
                    );
                    let mut job_deps = vec![trigger];
                    job_deps.extend(prev_job);
                    let job = b.push(HwpeJob, ni, t.index, None, job_deps, regions, &[]);
                    jobs.get_mut(name).expect("engine entry").push(job);
                    for id in [lock, program, trigger, job] {
                        b.actions[id].hwpe = Some(name.clone());
                    }
                    job
                }
                None => {
                    if i + 1 < tiles.len() {
                        let next = issue_in(&mut b, i + 1, &dma_out, &compute);
                        dma_in.push(next);
                    }
                    let eot = b.push(WaitEot, ni, t.index, Some(in_slot), wait_deps, vec![], &[]);
                    let mut deps = vec![eot];
                    deps.extend(last_kernel);
                    let k = b.push(CoreKernel, ni, t.index, None, deps, regions, &[]);
                    last_kernel = Some(k);
                    k
                }
            };
            b.actions[c].dims = t.extents.clone();
            b.actions[c].work = work;
            b.actions[c].workload = Some(workload);
            compute.push(c);

            let done = match &hwpe {
                Some(name) => {
                    let eoc = b.push(WaitEoc, ni, t.index, None, vec![c], vec![], &[]);
                    b.actions[eoc].hwpe = Some(name.clone());
                    eoc
                }
                None => c,
            };
            let out = cs
                .space
                .operands
                .iter()
                .find(|o| o.role == Role::Output)
                .expect("every space has an output");
            let out_id = if t.last_k && !out.resident {
                let bytes = out.bytes(&t.extents);
                let region = slot_region(&out.tensor, Some(out_slot), bytes, false);
                let id = b.push(
                    DmaOut,
                    ni,
                    t.index,
                    Some(out_slot),
                    vec![done],
                    vec![region],
                    &[(out.tensor.clone(), true)],
                );
                b.actions[id].bytes = bytes;
                Some(id)
            } else {
                None
            };
            dma_out.push(out_id);
        }
        if let Some(name) = &hwpe {
            let last = b.actions.len() - 1;
            let clear = b.push(
                SoftClear,
                ni,
                tiles.len() as u64 - 1,
                None,
                vec![last],
                vec![],
                &[],
            );
            b.actions[clear].hwpe = Some(name.clone());
        }
        nodes.push(NodeInfo {
            name: sol.node.clone(),
            op: cs.op,
            tail: cs.tail.clone(),
            engine: cs.engine.clone(),
            reduction,
            tiling: sol.clone(),
        });
    }
    Schedule {
        nodes,
        actions: b.actions,
        allocation: alloc.clone(),
        contexts,
    }
}

impl Schedule {
    pub fn node_actions(&self, node: usize) -> impl Iterator<Item = &Action> {
        self.actions.iter().filter(move |a| a.node == node)
    }

    /// Sum of `work` over compute actions, per node.
    pub fn work_by_node(&self) -> Vec<u64> {
        let mut out = vec![0; self.nodes.len()];
        for a in self.actions.iter().filter(|a| a.kind.is_compute()) {
            out[a.node] += a.work;
        }
        out
    }
}

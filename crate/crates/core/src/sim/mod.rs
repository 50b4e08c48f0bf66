//! Event-driven execution of a schedule on the cluster model.

mod check;
mod render;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::platform::{compute_cycles, dma_cycles, ClusterConfig, CostError, Engine};
use crate::schedule::{Action, ActionKind, Schedule};

pub use check::{check_schedule_against_sim, work_conservation_audit, AuditError, Violation};
pub use render::{gantt, timeline_csv};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("action {id}: {source}")]
    Cost { id: usize, source: CostError },
    #[error("deadlock at cycle {time}: actions {stuck:?} cannot start")]
    Deadlock { time: u64, stuck: Vec<usize> },
}

/// Exclusive resource occupied by an action.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String")]
pub enum Resource {
    Dma,
    Cores,
    Hwpe(String),
}

impl From<Resource> for String {
    fn from(r: Resource) -> String {
        r.to_string()
    }
}

impl std::fmt::Display for Resource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Resource::Dma => f.write_str("dma"),
            Resource::Cores => f.write_str("cores"),
            Resource::Hwpe(h) => f.write_str(h),
        }
    }
}

pub fn resource_of(a: &Action) -> Option<Resource> {
    match a.kind {
        ActionKind::DmaIn | ActionKind::DmaOut => Some(Resource::Dma),
        ActionKind::CoreKernel => Some(Resource::Cores),
        ActionKind::HwpeJob => a.hwpe.clone().map(Resource::Hwpe),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Start,
    Finish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: u64,
    pub action: usize,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub id: usize,
    pub kind: ActionKind,
    pub node: usize,
    pub tile: u64,
    pub start: u64,
    pub finish: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resource: Option<Resource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub name: String,
    pub engine: Engine,
    pub start: u64,
    pub finish: u64,
    pub cycles: u64,
    pub compute_busy: u64,
    /// Job busy cycles over the node span (HWPE nodes only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hwpe_utilization: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub total_cycles: u64,
    pub busy: BTreeMap<String, u64>,
    pub nodes: Vec<NodeReport>,
    /// Cycles with the DMA busy and every compute resource idle, over total.
    pub data_movement_overhead: f64,
    pub timeline: Vec<Span>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Start and finish events in time order (finish before start at ties).
    pub fn events(&self) -> Vec<SimEvent> {
        let mut ev: Vec<SimEvent> = self
            .timeline
            .iter()
            .flat_map(|s| {
                [
                    SimEvent {
                        time: s.start,
                        action: s.id,
                        phase: Phase::Start,
                    },
                    SimEvent {
                        time: s.finish,
                        action: s.id,
                        phase: Phase::Finish,
                    },
                ]
            })
            .collect();
        ev.sort_by_key(|e| (e.time, e.phase == Phase::Start, e.action));
        ev
    }
}

/// Cycles an action occupies.
pub fn duration(a: &Action, s: &Schedule, cfg: &ClusterConfig) -> Result<u64, SimError> {
    let cost = |r: Result<u64, CostError>| r.map_err(|source| SimError::Cost { id: a.id, source });
    Ok(match a.kind {
        ActionKind::DmaIn | ActionKind::DmaOut => dma_cycles(a.bytes, cfg).max(1),
        ActionKind::HwpeJob | ActionKind::CoreKernel => {
            let w = a
                .workload
                .as_ref()
                .expect("compute actions carry a workload");
            cost(compute_cycles(w, &s.nodes[a.node].engine, cfg))?.max(1)
        }
        ActionKind::HwpeProgram => a
            .hwpe
            .as_deref()
            .and_then(|h| cfg.hwpe(h))
            .map_or(1, |h| h.setup as u64)
            .max(1),
        _ => 1,
    })
}

/// List-schedules the DAG: an action starts once its dependencies have
/// finished and its resource is free; among startable actions the lowest id
/// goes first. A `HWPE_PROGRAM` also needs a free register-file context; the
/// context is held until the matching job finishes.
pub fn simulate(s: &Schedule, cfg: &ClusterConfig) -> Result<SimReport, SimError> {
    let n = s.actions.len();
    let durations: Vec<u64> = s
        .actions
        .iter()
        .map(|a| duration(a, s, cfg))
        .collect::<Result<_, _>>()?;
    let resources: Vec<Option<Resource>> = s.actions.iter().map(resource_of).collect();
    let contexts: HashMap<&str, u32> = cfg
        .hwpes
        .iter()
        .map(|h| (h.name.as_str(), h.contexts))
        .collect();
    let job_of_program: HashMap<usize, usize> = {
        let mut jobs: HashMap<(usize, u64), usize> = HashMap::new();
        for a in s.actions.iter().filter(|a| a.kind == ActionKind::HwpeJob) {
            jobs.insert((a.node, a.tile), a.id);
        }
        s.actions
            .iter()
            .filter(|a| a.kind == ActionKind::HwpeProgram)
            .filter_map(|a| jobs.get(&(a.node, a.tile)).map(|&j| (j, a.id)))
            .collect()
    };

    let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut pending: Vec<usize> = vec![0; n];
    for a in &s.actions {
        pending[a.id] = a.deps.len();
        for &d in &a.deps {
            succs[d].push(a.id);
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| pending[i] == 0).collect();
    let mut busy_until: HashMap<Resource, u64> = HashMap::new();
    let mut outstanding: HashMap<String, u32> = HashMap::new();
    let mut running: BinaryHeap<Reverse<(u64, usize)>> = BinaryHeap::new();
    let mut start = vec![u64::MAX; n];
    let mut finish = vec![u64::MAX; n];
    let mut done = 0;
    let mut now = 0u64;

    while done < n {
        let mut started = Vec::new();
        for &id in &ready {
            if let Some(r) = &resources[id] {
                if busy_until.get(r).is_some_and(|&t| t > now) {
                    continue;
                }
            }
            let a = &s.actions[id];
            if a.kind == ActionKind::HwpeProgram {
                if let Some(h) = a.hwpe.as_deref() {
                    let used = outstanding.get(h).copied().unwrap_or(0);
                    if used >= contexts.get(h).copied().unwrap_or(1) {
                        continue;
                    }
                    *outstanding.entry(h.to_string()).or_default() += 1;
                }
            }
            let end = now + durations[id];
            if let Some(r) = &resources[id] {
                busy_until.insert(r.clone(), end);
            }
            start[id] = now;
            finish[id] = end;
            running.push(Reverse((end, id)));
            started.push(id);
        }
        for id in started {
            ready.remove(&id);
        }
        let Some(&Reverse((t, _))) = running.peek() else {
            return Err(SimError::Deadlock {
                time: now,
                stuck: (0..n).filter(|&i| start[i] == u64::MAX).collect(),
            });
        };
        now = t;
        while let Some(&Reverse((t, id))) = running.peek() {
            if t != now {
                break;
            }
            running.pop();
            done += 1;
            let a = &s.actions[id];
            if a.kind == ActionKind::HwpeJob && job_of_program.contains_key(&id) {
                if let Some(c) = a.hwpe.as_deref().and_then(|h| outstanding.get_mut(h)) {
                    *c -= 1;
                }
            }
            for &succ in &succs[id] {
                pending[succ] -= 1;
                if pending[succ] == 0 {
                    ready.insert(succ);
                }
            }
        }
    }
    Ok(report(s, &resources, &start, &finish))
}

fn report(
    s: &Schedule,
    resources: &[Option<Resource>],
    start: &[u64],
    finish: &[u64],
) -> SimReport {
    let total = finish.iter().copied().max().unwrap_or(0);
    let timeline: Vec<Span> = s
        .actions
        .iter()
        .map(|a| Span {
            id: a.id,
            kind: a.kind,
            node: a.node,
            tile: a.tile,
            start: start[a.id],
            finish: finish[a.id],
            resource: resources[a.id].clone(),
        })
        .collect();

    let mut busy: BTreeMap<String, u64> = BTreeMap::new();
    busy.insert("dma".into(), 0);
    busy.insert("cores".into(), 0);
    for h in s.contexts.keys() {
        busy.insert(h.clone(), 0);
    }
    for sp in &timeline {
        if let Some(r) = &sp.resource {
            *busy.entry(r.to_string()).or_default() += sp.finish - sp.start;
        }
    }

    let nodes = s
        .nodes
        .iter()
        .enumerate()
        .map(|(ni, info)| {
            let spans: Vec<&Span> = timeline.iter().filter(|sp| sp.node == ni).collect();
            let lo = spans.iter().map(|sp| sp.start).min().unwrap_or(0);
            let hi = spans.iter().map(|sp| sp.finish).max().unwrap_or(0);
            let compute_busy: u64 = spans
                .iter()
                .filter(|sp| sp.kind.is_compute())
                .map(|sp| sp.finish - sp.start)
                .sum();
            let cycles = hi - lo;
            NodeReport {
                name: info.name.clone(),
                engine: info.engine.clone(),
                start: lo,
                finish: hi,
                cycles,
                compute_busy,
                hwpe_utilization: match info.engine {
                    Engine::Hwpe(_) if cycles > 0 => Some(compute_busy as f64 / cycles as f64),
                    _ => None,
                },
            }
        })
        .collect();

    // sweep: DMA busy while every compute resource idles
    let mut edges: Vec<(u64, i64, i64)> = Vec::new();
    for sp in &timeline {
        let (dma, comp) = match &sp.resource {
            Some(Resource::Dma) => (1, 0),
            Some(_) => (0, 1),
            None => continue,
        };
        edges.push((sp.start, dma, comp));
        edges.push((sp.finish, -dma, -comp));
    }
    edges.sort_unstable();
    let (mut dma, mut comp, mut last, mut exposed) = (0i64, 0i64, 0u64, 0u64);
    for (t, dd, dc) in edges {
        if dma > 0 && comp == 0 {
            exposed += t - last;
        }
        dma += dd;
        comp += dc;
        last = t;
    }
    let overhead = if total == 0 {
        0.0
    } else {
        exposed as f64 / total as f64
    };

    SimReport {
        total_cycles: total,
        busy,
        nodes,
        data_movement_overhead: overhead,
        timeline,
    }
}

#[cfg(test)]
mod tests;

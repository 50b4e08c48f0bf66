use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use thiserror::Error;

use super::{Resource, SimReport, Span};
use crate::graph::Graph;
use crate::schedule::{ActionKind, Region, Schedule};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Error)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    #[error("{resource}: actions {a} and {b} overlap in time")]
    ResourceOverlap {
        resource: String,
        a: usize,
        b: usize,
    },
    #[error("action {action} starts at {start} before dependency {dep} finishes at {finish}")]
    Causality {
        action: usize,
        dep: usize,
        start: u64,
        finish: u64,
    },
    #[error("actions {a} and {b} access overlapping L1 bytes concurrently")]
    Aliasing { a: usize, b: usize },
    #[error("`{hwpe}` has {outstanding} programmed jobs at cycle {time} with {contexts} contexts")]
    Contexts {
        hwpe: String,
        time: u64,
        outstanding: u32,
        contexts: u32,
    },
    #[error("action {0} never ran")]
    Missing(usize),
}

fn overlap(a: &Span, b: &Span) -> bool {
    a.start < b.finish && b.start < a.finish
}

/// Verifies a simulated timeline against the schedule contract: resource
/// exclusivity, dependency causality, no concurrent access to aliasing L1
/// bytes (one of them a write) and the register-file context bound.
pub fn check_schedule_against_sim(s: &Schedule, report: &SimReport) -> Vec<Violation> {
    let mut out = Vec::new();
    let spans: &[Span] = &report.timeline;
    if spans.len() != s.actions.len() {
        let have: std::collections::HashSet<usize> = spans.iter().map(|sp| sp.id).collect();
        out.extend(
            s.actions
                .iter()
                .filter(|a| !have.contains(&a.id))
                .map(|a| Violation::Missing(a.id)),
        );
        return out;
    }
    let by_id: HashMap<usize, &Span> = spans.iter().map(|sp| (sp.id, sp)).collect();

    let mut per_resource: BTreeMap<&Resource, Vec<&Span>> = BTreeMap::new();
    for sp in spans {
        if let Some(r) = &sp.resource {
            per_resource.entry(r).or_default().push(sp);
        }
    }
    for (r, mut list) in per_resource {
        list.sort_by_key(|sp| (sp.start, sp.id));
        for w in list.windows(2) {
            if overlap(w[0], w[1]) {
                out.push(Violation::ResourceOverlap {
                    resource: r.to_string(),
                    a: w[0].id,
                    b: w[1].id,
                });
            }
        }
    }

    for a in &s.actions {
        let sp = by_id[&a.id];
        for &d in &a.deps {
            let dep = by_id[&d];
            if sp.start < dep.finish {
                out.push(Violation::Causality {
                    action: a.id,
                    dep: d,
                    start: sp.start,
                    finish: dep.finish,
                });
            }
        }
    }

    let mut accesses: Vec<(usize, Region)> = s
        .actions
        .iter()
        .flat_map(|a| a.l1.iter().map(move |r| (a.id, *r)))
        .filter(|(_, r)| r.bytes > 0)
        .collect();
    accesses.sort_by_key(|(id, r)| (r.offset, *id));
    let mut aliasing = std::collections::BTreeSet::new();
    for (i, (a, ra)) in accesses.iter().enumerate() {
        for (b, rb) in &accesses[i + 1..] {
            if rb.offset >= ra.end() {
                break;
            }
            if a != b && (ra.write || rb.write) && overlap(by_id[a], by_id[b]) {
                let (lo, hi) = if a < b { (*a, *b) } else { (*b, *a) };
                aliasing.insert((lo, hi));
            }
        }
    }
    out.extend(
        aliasing
            .into_iter()
            .map(|(a, b)| Violation::Aliasing { a, b }),
    );

    let jobs: HashMap<(usize, u64), usize> = s
        .actions
        .iter()
        .filter(|a| a.kind == ActionKind::HwpeJob)
        .map(|a| ((a.node, a.tile), a.id))
        .collect();
    let mut windows: BTreeMap<&str, Vec<(u64, i64)>> = BTreeMap::new();
    for a in s
        .actions
        .iter()
        .filter(|a| a.kind == ActionKind::HwpeProgram)
    {
        let (Some(h), Some(j)) = (a.hwpe.as_deref(), jobs.get(&(a.node, a.tile))) else {
            continue;
        };
        let w = windows.entry(h).or_default();
        w.push((by_id[&a.id].start, 1));
        w.push((by_id[j].finish, -1));
    }
    for (h, mut edges) in windows {
        let contexts = s.contexts.get(h).copied().unwrap_or(1);
        edges.sort_unstable();
        let mut level = 0i64;
        for (time, d) in edges {
            level += d;
            if level > contexts as i64 {
                out.push(Violation::Contexts {
                    hwpe: h.to_string(),
                    time,
                    outstanding: level as u32,
                    contexts,
                });
                break;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuditError {
    #[error("node `{node}`: scheduled work {actual} differs from {expected}")]
    Mismatch {
        node: String,
        expected: u64,
        actual: u64,
    },
    #[error("node `{0}` is not in the graph")]
    UnknownNode(String),
}

/// Checks that the compute actions of every node add up to the node's
/// work in the graph (MACs, or elements for non-MAC anchors). Returns the
/// total MACs.
pub fn work_conservation_audit(s: &Schedule, g: &Graph) -> Result<u64, AuditError> {
    let work = s.work_by_node();
    let mut macs = 0;
    for (info, &actual) in s.nodes.iter().zip(&work) {
        let node = g
            .node_index(&info.name)
            .map(|i| &g.nodes()[i])
            .ok_or_else(|| AuditError::UnknownNode(info.name.clone()))?;
        let expected = g.node_work(node);
        if expected != actual {
            return Err(AuditError::Mismatch {
                node: info.name.clone(),
                expected,
                actual,
            });
        }
        if node.op.is_mac() {
            macs += actual;
        }
    }
    Ok(macs)
}

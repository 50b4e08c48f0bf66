use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::{ActionKind, Region, Schedule};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HazardError {
    #[error("action {0} depends on later action {1}")]
    Order(usize, usize),
    #[error("actions {a} and {b} touch overlapping L1 bytes without an ordering")]
    Unordered { a: usize, b: usize },
    #[error("`{hwpe}` job {job} may be programmed while {contexts} earlier jobs are pending")]
    Contexts {
        hwpe: String,
        job: usize,
        contexts: u32,
    },
}

#[derive(Debug, Clone, Copy)]
struct Record {
    id: usize,
    region: Region,
}

#[derive(Debug, Default)]
struct L2Record {
    writers: Vec<usize>,
    readers: Vec<usize>,
}

/// Last accesses to L1 byte ranges and L2 tensors.
#[derive(Debug, Default)]
pub(super) struct Tracker {
    l1: Vec<Record>,
    l2: HashMap<String, L2Record>,
}

impl Tracker {
    pub(super) fn access_l1(&mut self, id: usize, region: Region, deps: &mut Vec<usize>) {
        if region.bytes == 0 {
            return;
        }
        for r in &self.l1 {
            if (region.write || r.region.write) && r.region.overlaps(&region) && r.id != id {
                deps.push(r.id);
            }
        }
        if region.write {
            self.l1.retain(|r| {
                r.id == id || !(r.region.offset >= region.offset && r.region.end() <= region.end())
            });
        }
        self.l1.push(Record { id, region });
    }

    /// Reads join all pending writers, so later readers need only one edge.
    pub(super) fn access_l2(
        &mut self,
        id: usize,
        tensor: &str,
        write: bool,
        deps: &mut Vec<usize>,
    ) {
        let rec = self.l2.entry(tensor.to_string()).or_default();
        if write {
            deps.extend(rec.readers.iter().copied());
            rec.writers.push(id);
        } else {
            deps.extend(rec.writers.iter().copied());
            if rec.writers.len() > 1 {
                rec.writers = vec![id];
            }
            rec.readers.push(id);
        }
    }
}

/// Transitive predecessors of every action as bitsets.
pub fn reachability(s: &Schedule) -> Vec<Vec<u64>> {
    let n = s.actions.len();
    let words = n.div_ceil(64);
    let mut reach: Vec<Vec<u64>> = Vec::with_capacity(n);
    for a in &s.actions {
        let mut bits = vec![0u64; words];
        for &d in &a.deps {
            bits[d / 64] |= 1 << (d % 64);
            for (w, x) in bits.iter_mut().zip(&reach[d]) {
                *w |= x;
            }
        }
        reach.push(bits);
    }
    reach
}

fn reaches(reach: &[Vec<u64>], from: usize, to: usize) -> bool {
    reach[to][from / 64] >> (from % 64) & 1 == 1
}

/// Static checks on the DAG: dependencies point backwards, every pair of
/// conflicting L1 accesses is ordered and no HWPE is programmed before a
/// register-file context is free.
pub fn check_hazards(s: &Schedule) -> Result<(), HazardError> {
    for a in &s.actions {
        if let Some(&d) = a.deps.iter().find(|&&d| d >= a.id) {
            return Err(HazardError::Order(a.id, d));
        }
    }
    let reach = reachability(s);

    let mut accesses: Vec<(usize, Region)> = s
        .actions
        .iter()
        .flat_map(|a| a.l1.iter().map(move |r| (a.id, *r)))
        .filter(|(_, r)| r.bytes > 0)
        .collect();
    accesses.sort_by_key(|(id, r)| (r.offset, *id));
    for (i, (a, ra)) in accesses.iter().enumerate() {
        for (b, rb) in &accesses[i + 1..] {
            if rb.offset >= ra.end() {
                break;
            }
            if a == b || !(ra.write || rb.write) {
                continue;
            }
            let (lo, hi) = if a < b { (*a, *b) } else { (*b, *a) };
            if !reaches(&reach, lo, hi) {
                return Err(HazardError::Unordered { a: lo, b: hi });
            }
        }
    }

    let mut jobs: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut programs: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for a in &s.actions {
        let Some(h) = a.hwpe.as_deref() else { continue };
        match a.kind {
            ActionKind::HwpeJob => jobs.entry(h).or_default().push(a.id),
            ActionKind::HwpeProgram => programs.entry(h).or_default().push(a.id),
            _ => {}
        }
    }
    for (hwpe, progs) in &programs {
        let contexts = s.contexts.get(*hwpe).copied().unwrap_or(1);
        let js = &jobs[hwpe];
        for (k, &p) in progs.iter().enumerate() {
            if k >= contexts as usize && !reaches(&reach, js[k - contexts as usize], p) {
                return Err(HazardError::Contexts {
                    hwpe: hwpe.to_string(),
                    job: k,
                    contexts,
                });
            }
        }
    }
    Ok(())
}

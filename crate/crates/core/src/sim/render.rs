use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;

use super::SimReport;
use crate::schedule::{ActionKind, Schedule};

const GANTT_COLUMNS: u64 = 80;

#[derive(Serialize)]
struct TimelineRow<'a> {
    id: usize,
    kind: ActionKind,
    node: &'a str,
    tile: u64,
    start: u64,
    finish: u64,
    resource: String,
}

/// One CSV row per action: id, kind, node, tile, start, finish, resource.
pub fn timeline_csv(s: &Schedule, report: &SimReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for sp in &report.timeline {
        w.serialize(TimelineRow {
            id: sp.id,
            kind: sp.kind,
            node: &s.nodes[sp.node].name,
            tile: sp.tile,
            start: sp.start,
            finish: sp.finish,
            resource: sp
                .resource
                .as_ref()
                .map(|r| r.to_string())
                .unwrap_or_default(),
        })
        .expect("timeline row serializes");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
}

/// Text Gantt chart, one row per resource on a fixed 80-column scale.
/// A cell is `#` when the resource is busy for at least half of it, `-`
/// when busy for less, `.` when idle.
pub fn gantt(report: &SimReport) -> String {
    let total = report.total_cycles.max(1);
    let mut busy: BTreeMap<String, Vec<u64>> = report
        .busy
        .keys()
        .map(|k| (k.clone(), vec![0; GANTT_COLUMNS as usize]))
        .collect();
    let cell = |c: u64| (c * total / GANTT_COLUMNS, (c + 1) * total / GANTT_COLUMNS);
    for sp in &report.timeline {
        let Some(r) = &sp.resource else { continue };
        let row = busy
            .entry(r.to_string())
            .or_insert_with(|| vec![0; GANTT_COLUMNS as usize]);
        let first = sp.start * GANTT_COLUMNS / total;
        let last = (sp.finish * GANTT_COLUMNS)
            .div_ceil(total)
            .min(GANTT_COLUMNS);
        for c in first..last {
            let (lo, hi) = cell(c);
            row[c as usize] += sp.finish.min(hi).saturating_sub(sp.start.max(lo));
        }
    }
    let width = busy.keys().map(|k| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (name, row) in &busy {
        let line: String = row
            .iter()
            .enumerate()
            .map(|(c, &b)| {
                let (lo, hi) = cell(c as u64);
                match b {
                    0 => '.',
                    b if 2 * b >= hi - lo => '#',
                    _ => '-',
                }
            })
            .collect();
        let _ = writeln!(out, "{name:>width$} |{line}|");
    }
    let _ = writeln!(
        out,
        "{:>width$}  0{:>w$}",
        "",
        total,
        w = GANTT_COLUMNS as usize - 1
    );
    out
}

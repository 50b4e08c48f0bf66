use std::fmt::Write;

use serde::Serialize;

use super::{ActionKind, AllocationMap, Schedule};
use crate::platform::Engine;

/// Per-node C-like listing of the tile loop.
pub fn emit_pseudocode(s: &Schedule) -> String {
    let mut out = String::new();
    for (ni, node) in s.nodes.iter().enumerate() {
        let t = &node.tiling;
        let tile: Vec<String> = t
            .dims
            .iter()
            .zip(&t.tile)
            .map(|(d, v)| format!("{d}={v}"))
            .collect();
        let tail: String = node.tail.iter().map(|op| format!("+{op}")).collect();
        let _ = writeln!(
            out,
            "/* {} : {}{} on {}, tile {}, {} tiles */",
            node.name,
            node.op,
            tail,
            node.engine,
            tile.join(" "),
            t.n_tiles
        );
        for b in s.allocation.buffers.iter().filter(|b| b.node == ni) {
            let slot = b.slot.map_or("acc".to_string(), |s| s.to_string());
            let _ = writeln!(
                out,
                "/*   {}[{}] @ L1+{} ({} B) */",
                b.tensor, slot, b.offset, b.bytes
            );
        }
        let has_in = s.node_actions(ni).any(|a| a.kind == ActionKind::DmaIn);
        let has_out = s.node_actions(ni).any(|a| a.kind == ActionKind::DmaOut);
        let n = t.n_tiles;
        let (hwpe, body) = match &node.engine {
            Engine::Hwpe(h) => (
                Some(h.as_str()),
                vec![
                    format!("hwpe_acquire({h});"),
                    format!("hwpe_program({h}, {});", tile_arg(n)),
                    prefetch(n, has_in),
                    wait_in(n, has_in),
                    format!("hwpe_trigger({h});"),
                    format!("hwpe_wait_eoc({h});"),
                    copy_out(n, has_out, node.reduction.is_some()),
                ],
            ),
            Engine::Cores => (
                None,
                vec![
                    prefetch(n, has_in),
                    wait_in(n, has_in),
                    format!("core_kernel({}, {});", node.op, tile_arg(n)),
                    copy_out(n, has_out, node.reduction.is_some()),
                ],
            ),
        };
        let body: Vec<String> = body.into_iter().filter(|l| !l.is_empty()).collect();
        if has_in {
            let _ = writeln!(out, "dma_in(slot=0, tile=0);");
        }
        if n == 1 {
            for line in &body {
                let _ = writeln!(out, "{line}");
            }
        } else {
            let _ = writeln!(out, "for (int t = 0; t < {n}; t++) {{");
            for line in &body {
                let _ = writeln!(out, "    {line}");
            }
            let _ = writeln!(out, "}}");
        }
        if let Some(h) = hwpe {
            let _ = writeln!(out, "hwpe_soft_clear({h});");
        }
        out.push('\n');
    }
    out
}

fn tile_arg(n: u64) -> &'static str {
    if n == 1 {
        "0"
    } else {
        "t"
    }
}

fn prefetch(n: u64, has_in: bool) -> String {
    if !has_in || n == 1 {
        String::new()
    } else {
        format!("if (t + 1 < {n}) dma_in(slot=(t+1)%2, tile=t+1);")
    }
}

fn wait_in(n: u64, has_in: bool) -> String {
    match (has_in, n) {
        (false, _) => String::new(),
        (true, 1) => "dma_wait(slot=0);".into(),
        _ => "dma_wait(slot=t%2);".into(),
    }
}

fn copy_out(n: u64, has_out: bool, reduction: bool) -> String {
    match (has_out, n, reduction) {
        (false, ..) => String::new(),
        (true, 1, _) => "dma_out(slot=0, tile=0);".into(),
        (true, _, false) => "dma_out(slot=t%2, tile=t);".into(),
        (true, _, true) => "if (last_k(t)) dma_out(slot=block(t)%2, tile=t);".into(),
    }
}

#[derive(Serialize)]
struct ActionView<'a> {
    id: usize,
    kind: ActionKind,
    node: &'a str,
    tile: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    slot: Option<u8>,
    bytes: u64,
    deps: &'a [usize],
}

#[derive(Serialize)]
struct NodeView<'a> {
    name: &'a str,
    op: String,
    engine: String,
    dims: &'a [String],
    extents: &'a [u64],
    tile: &'a [u64],
    n_tiles: u64,
    l1_footprint_bytes: u64,
    predicted_cycles: u64,
}

#[derive(Serialize)]
struct ScheduleView<'a> {
    nodes: Vec<NodeView<'a>>,
    actions: Vec<ActionView<'a>>,
    allocation: &'a AllocationMap,
}

/// Compact JSON form: nodes, actions with dependencies, L1 allocation.
pub fn schedule_json(s: &Schedule) -> String {
    let view = ScheduleView {
        nodes: s
            .nodes
            .iter()
            .map(|n| NodeView {
                name: &n.name,
                op: n.op.to_string(),
                engine: n.engine.to_string(),
                dims: &n.tiling.dims,
                extents: &n.tiling.extents,
                tile: &n.tiling.tile,
                n_tiles: n.tiling.n_tiles,
                l1_footprint_bytes: n.tiling.l1_footprint_bytes,
                predicted_cycles: n.tiling.predicted_cycles,
            })
            .collect(),
        actions: s
            .actions
            .iter()
            .map(|a| ActionView {
                id: a.id,
                kind: a.kind,
                node: &s.nodes[a.node].name,
                tile: a.tile,
                slot: a.slot,
                bytes: a.bytes,
                deps: &a.deps,
            })
            .collect(),
        allocation: &s.allocation,
    };
    serde_json::to_string_pretty(&view).expect("schedule serializes")
}

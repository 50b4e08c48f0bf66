use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lowering::{first_fit, Interval, LifetimeTable, MemLevel, Placement};
use crate::platform::ClusterConfig;
use crate::tiler::{ConstraintSet, Role, TilingSolution};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("L1 overflow: `{what}` needs [{offset}, {end}) but only {limit} B are usable")]
pub struct AllocError {
    pub what: String,
    pub offset: u64,
    pub end: u64,
    pub limit: u64,
}

/// Double-buffer slot (or accumulator) of one node operand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Buffer {
    pub node: usize,
    pub tensor: String,
    pub role: Role,
    /// `None` for the single partial-sum buffer of a resident output.
    pub slot: Option<u8>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidentBuffer {
    pub tensor: String,
    pub offset: u64,
    pub bytes: u64,
    pub interval: Interval,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationMap {
    pub resident: Vec<ResidentBuffer>,
    pub buffers: Vec<Buffer>,
    /// End of the resident region; tile buffers start here.
    pub resident_bytes: u64,
    pub peak_bytes: u64,
}

impl AllocationMap {
    pub fn buffer(&self, node: usize, tensor: &str, slot: Option<u8>) -> Option<&Buffer> {
        self.buffers
            .iter()
            .find(|b| b.node == node && b.tensor == tensor && b.slot == slot)
    }

    pub fn resident(&self, tensor: &str) -> Option<&ResidentBuffer> {
        self.resident.iter().find(|r| r.tensor == tensor)
    }
}

/// First-fit placement of every L1 buffer.
///
/// Resident tensors keep the offsets chosen at promotion, at the bottom of
/// L1. Each node's tile buffers live only while the node runs, so every
/// node allocates from the top of the resident region: two slots per
/// L2-tiled operand (inputs, residuals, output, in declaration order) and
/// one partial-sum buffer when a resident output has a split reduction.
pub fn allocate_buffers(
    plans: &[(ConstraintSet, TilingSolution)],
    lifetimes: &LifetimeTable,
    cfg: &ClusterConfig,
) -> Result<AllocationMap, AllocError> {
    let limit = cfg.l1_bytes - cfg.l1_reserved_bytes;
    let mut map = AllocationMap {
        resident_bytes: lifetimes.resident_bytes,
        ..Default::default()
    };
    for l in lifetimes.entries.values() {
        if l.level != MemLevel::L1Resident {
            continue;
        }
        let offset = l.l1_offset.expect("resident tensors have an offset");
        map.resident.push(ResidentBuffer {
            tensor: l.tensor.clone(),
            offset,
            bytes: l.bytes,
            interval: l.interval(),
        });
    }
    map.resident.sort_by_key(|r| (r.offset, r.interval.start));
    let base = lifetimes.resident_bytes;

    let mut placed: Vec<Placement> = Vec::new();
    for (node, (cs, sol)) in plans.iter().enumerate() {
        let interval = Interval::new(node as i64, node as i64);
        let tile: Vec<u64> = sol
            .extents
            .iter()
            .zip(&sol.tile)
            .map(|(&e, &t)| e.min(t))
            .collect();
        let split = cs.space.splits_reduction(&tile);
        for o in &cs.space.operands {
            let elements = o.elements(&tile);
            let bytes = if o.role == Role::Output && split {
                o.bytes(&tile).max(elements * 4)
            } else {
                o.bytes(&tile)
            };
            let slots: Vec<Option<u8>> = if !o.resident {
                (0..cs.multiplicity as u8).map(Some).collect()
            } else if o.role == Role::Output && split {
                vec![None]
            } else {
                Vec::new()
            };
            let bytes = if o.resident { elements * 4 } else { bytes };
            for slot in slots {
                let offset = base + first_fit(&placed, interval, bytes);
                if offset + bytes > limit {
                    return Err(AllocError {
                        what: format!("{}:{}", sol.node, o.tensor),
                        offset,
                        end: offset + bytes,
                        limit,
                    });
                }
                placed.push(Placement {
                    interval,
                    offset: offset - base,
                    bytes,
                });
                map.buffers.push(Buffer {
                    node,
                    tensor: o.tensor.clone(),
                    role: o.role,
                    slot,
                    offset,
                    bytes,
                });
            }
        }
    }
    let tiles_end = map
        .buffers
        .iter()
        .map(|b| b.offset + b.bytes)
        .max()
        .unwrap_or(base);
    map.peak_bytes = tiles_end.max(base);
    Ok(map)
}

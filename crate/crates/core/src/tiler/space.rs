use serde::{Deserialize, Serialize};

use crate::graph::{bytes_for, DType};
use crate::platform::Kernel;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    pub extent: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Input,
    /// Operand of a fused tail op, read only when the output is finalized.
    Residual,
    Output,
}

/// Convolution input window: a tile of `th` output rows reads
/// `(th - 1) x stride + kernel` input rows, clipped to the input extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Halo {
    pub channel_dim: usize,
    pub row_dim: usize,
    pub col_dim: usize,
    pub stride: u64,
    pub kernel: u64,
    pub height: u64,
    pub width: u64,
}

impl Halo {
    fn window(&self, tile: u64, limit: u64) -> u64 {
        ((tile - 1) * self.stride + self.kernel).min(limit)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Operand {
    pub tensor: String,
    pub role: Role,
    pub dtype: DType,
    /// Iteration dims indexing the operand.
    pub dims: Vec<usize>,
    /// Elements per unit of the indexing dims (e.g. `k x k` for weights).
    pub factor: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub halo: Option<Halo>,
    /// Lives in the L1 resident region: no transfers, no tile buffer.
    pub resident: bool,
    pub constant: bool,
}

impl Operand {
    pub fn elements(&self, tile: &[u64]) -> u64 {
        match self.halo {
            Some(h) => {
                tile[h.channel_dim]
                    * h.window(tile[h.row_dim], h.height)
                    * h.window(tile[h.col_dim], h.width)
                    * self.factor
            }
            None => self.dims.iter().map(|&d| tile[d]).product::<u64>() * self.factor,
        }
    }

    pub fn bytes(&self, tile: &[u64]) -> u64 {
        bytes_for(self.elements(tile), self.dtype)
    }
}

/// How tile extents map to a cost-model kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Geometry {
    /// Dims `[m, n, k]`.
    Matmul,
    /// Dims `[cout, oh, ow, cin]`, or `[c, oh, ow]` when depthwise.
    Conv { kernel: u64, depthwise: bool },
    /// One dim of rows, each `row` elements long.
    Elementwise { row: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IterSpace {
    pub dims: Vec<Dim>,
    pub geometry: Geometry,
    /// Reduction dim; always the innermost one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduction: Option<usize>,
    pub operands: Vec<Operand>,
}

impl IterSpace {
    pub fn extents(&self) -> Vec<u64> {
        self.dims.iter().map(|d| d.extent).collect()
    }

    pub fn kernel(&self, tile: &[u64]) -> Kernel {
        match self.geometry {
            Geometry::Matmul => Kernel::Matmul {
                m: tile[0],
                n: tile[1],
                k: tile[2],
            },
            Geometry::Conv {
                kernel,
                depthwise: false,
            } => Kernel::Conv {
                cout: tile[0],
                oh: tile[1],
                ow: tile[2],
                cin: tile[3],
                kernel,
            },
            Geometry::Conv {
                kernel,
                depthwise: true,
            } => Kernel::Conv {
                cout: tile[0],
                oh: tile[1],
                ow: tile[2],
                cin: 1,
                kernel,
            },
            Geometry::Elementwise { row } => Kernel::Elementwise {
                elements: tile[0] * row,
            },
        }
    }

    /// Output elements of a tile.
    pub fn out_elements(&self, tile: &[u64]) -> u64 {
        self.operands
            .iter()
            .find(|o| o.role == Role::Output)
            .map_or(0, |o| o.elements(tile))
    }

    /// Whether a tiling splits the reduction dim.
    pub fn splits_reduction(&self, tile: &[u64]) -> bool {
        self.reduction
            .is_some_and(|r| tile[r] < self.dims[r].extent)
    }
}

/// One tile in row-major order (last dim fastest).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub index: u64,
    pub coords: Vec<u64>,
    pub extents: Vec<u64>,
    /// First step of its reduction (no partial sums to re-read).
    pub first_k: bool,
    /// Last step of its reduction: the output is final and written back.
    pub last_k: bool,
    /// Index of the output block (tile index over non-reduction dims).
    pub block: u64,
}

/// Enumerates the tiles of `extents` tiled by `tile`; boundary tiles are
/// ragged.
pub fn tiles(extents: &[u64], tile: &[u64], reduction: Option<usize>) -> Vec<Tile> {
    let counts: Vec<u64> = extents
        .iter()
        .zip(tile)
        .map(|(e, t)| e.div_ceil(*t))
        .collect();
    let total: u64 = counts.iter().product();
    let per_block = reduction.map_or(1, |r| counts[r]);
    let mut out = Vec::with_capacity(total as usize);
    let mut coords = vec![0u64; extents.len()];
    for index in 0..total {
        let ext: Vec<u64> = coords
            .iter()
            .zip(extents.iter().zip(tile))
            .map(|(&c, (&e, &t))| t.min(e - c * t))
            .collect();
        let (first_k, last_k) = match reduction {
            Some(r) => (coords[r] == 0, coords[r] + 1 == counts[r]),
            None => (true, true),
        };
        out.push(Tile {
            index,
            coords: coords.clone(),
            extents: ext,
            first_k,
            last_k,
            block: index / per_block,
        });
        for d in (0..coords.len()).rev() {
            coords[d] += 1;
            if coords[d] < counts[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

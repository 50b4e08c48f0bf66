//! End-to-end flow: lower, tile, allocate, schedule, simulate.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::graph::{build_transformer_encoder, Graph, GraphError, TransformerParams};
use crate::lowering::{lower, Lowered, LoweringError};
use crate::par::Exec;
use crate::platform::{ClusterConfig, ConfigError};
use crate::schedule::{allocate_buffers, build_schedule, AllocError, Schedule};
use crate::sim::{simulate, SimError, SimReport};
use crate::tiler::{
    build_constraints, solve_tiling_with, ConstraintSet, TilerError, TilingSolution, TraceEvent,
};

/// Pipeline stage an error is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Graph,
    Lowering,
    Tiler,
    Schedule,
    Sim,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Lowering(#[from] LoweringError),
    #[error("node `{node}`: {source}")]
    Tiler { node: String, source: TilerError },
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl PipelineError {
    pub fn stage(&self) -> Stage {
        match self {
            PipelineError::Config(_) => Stage::Config,
            PipelineError::Graph(_) => Stage::Graph,
            PipelineError::Lowering(_) => Stage::Lowering,
            PipelineError::Tiler { .. } => Stage::Tiler,
            PipelineError::Alloc(_) => Stage::Schedule,
            PipelineError::Sim(_) => Stage::Sim,
        }
    }

    /// `{"stage": ..., "error": ...}`
    pub fn to_json(&self) -> String {
        serde_json::json!({ "stage": self.stage(), "error": self.to_string() }).to_string()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Options {
    pub exec: Exec,
    pub trace: bool,
}

#[derive(Debug, Clone)]
pub struct Compiled {
    pub lowered: Lowered,
    pub plans: Plans,
    pub schedule: Schedule,
    pub trace: Vec<TraceEvent>,
}

/// Per-node constraint sets with their solutions.
pub type Plans = Vec<(ConstraintSet, TilingSolution)>;

/// Tiles every fused node, solving each distinct constraint set once.
pub fn tile_nodes(
    g: &Graph,
    lowered: &Lowered,
    cfg: &ClusterConfig,
    opts: Options,
) -> Result<(Plans, Vec<TraceEvent>), PipelineError> {
    let sets: Vec<ConstraintSet> = lowered
        .nodes
        .iter()
        .map(|n| {
            build_constraints(n, g, cfg, &lowered.lifetimes).map_err(|source| {
                PipelineError::Tiler {
                    node: n.name().to_string(),
                    source,
                }
            })
        })
        .collect::<Result<_, _>>()?;
    let mut first: HashMap<String, usize> = HashMap::new();
    let mut unique: Vec<usize> = Vec::new();
    let keys: Vec<String> = sets.iter().map(|cs| cs.signature()).collect();
    for (i, k) in keys.iter().enumerate() {
        first.entry(k.clone()).or_insert_with(|| {
            unique.push(i);
            i
        });
    }
    let solved = opts.exec.map(&unique, |&i| {
        solve_tiling_with(&sets[i], Exec::Sequential, opts.trace).map_err(|source| {
            PipelineError::Tiler {
                node: sets[i].node.clone(),
                source,
            }
        })
    });
    let mut by_rep: HashMap<usize, TilingSolution> = HashMap::new();
    let mut trace = Vec::new();
    for (&i, r) in unique.iter().zip(solved) {
        let (sol, events) = r?;
        by_rep.insert(i, sol);
        trace.extend(events);
    }
    let plans = sets
        .into_iter()
        .zip(&keys)
        .map(|(cs, k)| {
            let mut sol = by_rep[&first[k]].clone();
            sol.node = cs.node.clone();
            (cs, sol)
        })
        .collect();
    Ok((plans, trace))
}

pub fn compile(g: &Graph, cfg: &ClusterConfig, opts: Options) -> Result<Compiled, PipelineError> {
    cfg.validate()?;
    let lowered = lower(g, cfg)?;
    let (plans, trace) = tile_nodes(g, &lowered, cfg, opts)?;
    let alloc = allocate_buffers(&plans, &lowered.lifetimes, cfg)?;
    let schedule = build_schedule(&plans, &alloc, cfg);
    Ok(Compiled {
        lowered,
        plans,
        schedule,
        trace,
    })
}

pub fn run(
    g: &Graph,
    cfg: &ClusterConfig,
    opts: Options,
) -> Result<(Compiled, SimReport), PipelineError> {
    let c = compile(g, cfg, opts)?;
    let report = simulate(&c.schedule, cfg)?;
    Ok((c, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub s: u64,
    pub config: String,
    pub total_cycles: u64,
    pub overhead: f64,
    /// Baseline cycles (first config) over these cycles.
    pub speedup_vs_baseline: f64,
}

/// A failed sweep point, with the rows that precede it.
#[derive(Debug, Error)]
#[error("sweep point s={s} on `{config}`: {source}")]
pub struct SweepError {
    pub rows: Vec<SweepRow>,
    pub s: u64,
    pub config: String,
    pub source: Box<PipelineError>,
}

/// Encoder sequence-length sweep. Rows are ordered by `(s, config)` with
/// configs in the given order; the first config is the baseline.
pub fn sweep_sequence(
    base: &TransformerParams,
    seq: &[u64],
    configs: &[ClusterConfig],
    exec: Exec,
) -> Result<Vec<SweepRow>, SweepError> {
    let points: Vec<(u64, usize)> = seq
        .iter()
        .flat_map(|&s| (0..configs.len()).map(move |c| (s, c)))
        .collect();
    let results = exec.map(&points, |&(s, c)| -> Result<SimReport, PipelineError> {
        let p = TransformerParams::new(base.layers, base.d_m, base.h, base.d_ff, s)?;
        let g = build_transformer_encoder(&p)?;
        let opts = Options {
            exec: Exec::Sequential,
            trace: false,
        };
        Ok(run(&g, &configs[c], opts)?.1)
    });
    let mut rows = Vec::with_capacity(points.len());
    let mut baseline = 0;
    for (&(s, c), r) in points.iter().zip(results) {
        let r = match r {
            Ok(r) => r,
            Err(source) => {
                return Err(SweepError {
                    rows,
                    s,
                    config: configs[c].name.clone(),
                    source: Box::new(source),
                })
            }
        };
        if c == 0 {
            baseline = r.total_cycles;
        }
        rows.push(SweepRow {
            s,
            config: configs[c].name.clone(),
            total_cycles: r.total_cycles,
            overhead: r.data_movement_overhead,
            speedup_vs_baseline: baseline as f64 / r.total_cycles.max(1) as f64,
        });
    }
    Ok(rows)
}

/// CSV with header `s,config,total_cycles,overhead,speedup_vs_baseline`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("sweep row serializes");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
}

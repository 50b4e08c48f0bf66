use super::*;
use crate::graph::{
    build_transformer_encoder, infer_shapes, DType, Graph, Node, Op, TensorKind, TensorSpec,
    TransformerParams,
};
use crate::lowering::lower;
use crate::pipeline::{compile, run, Options};
use crate::platform::{dma_cycles, hwpe_job_cycles, preset, Kernel, Workload};
use crate::schedule::{allocate_buffers, build_schedule};
use crate::tiler::{build_constraints, evaluate_tiling};

fn gemm_graph(m: u64, k: u64, n: u64, dtype: DType) -> Graph {
    let g = Graph::new(
        vec![
            TensorSpec::new("a", vec![m, k], dtype, TensorKind::GraphInput),
            TensorSpec::new("w", vec![k, n], dtype, TensorKind::Weight),
            TensorSpec::new("y", vec![], dtype, TensorKind::GraphOutput),
        ],
        vec![Node::new("gemm", Op::Gemm, &["a", "w"], &["y"])],
    )
    .unwrap();
    infer_shapes(&g).unwrap()
}

/// Schedule of a one-node graph with a pinned tile.
fn pinned(g: &Graph, cfg: &ClusterConfig, tile: &[u64]) -> Schedule {
    let l = lower(g, cfg).unwrap();
    let cs = build_constraints(&l.nodes[0], g, cfg, &l.lifetimes).unwrap();
    let sol = evaluate_tiling(&cs, tile).unwrap();
    let plans = vec![(cs, sol)];
    let alloc = allocate_buffers(&plans, &l.lifetimes, cfg).unwrap();
    build_schedule(&plans, &alloc, cfg)
}

fn redmule(dma_bw: u64) -> ClusterConfig {
    let mut cfg = preset("darkside-redmule").unwrap();
    cfg.dma_bw = dma_bw;
    cfg
}

fn jobs(report: &SimReport) -> Vec<&Span> {
    report
        .timeline
        .iter()
        .filter(|s| s.kind == ActionKind::HwpeJob)
        .collect()
}

#[test]
fn single_tile_critical_path() {
    let cfg = redmule(8);
    let g = gemm_graph(12, 16, 8, DType::Fp16);
    let s = pinned(&g, &cfg, &[12, 8, 16]);
    let r = simulate(&s, &cfg).unwrap();
    let h = cfg.hwpe("redmule").unwrap();
    let din = dma_cycles((12 * 16 + 16 * 8) * 2, &cfg);
    let dout = dma_cycles(12 * 8 * 2, &cfg);
    let w = Workload::new(Op::Gemm, Kernel::Matmul { m: 12, k: 16, n: 8 }, DType::Fp16);
    let job = hwpe_job_cycles(&w, h).unwrap();
    // lock, program | copy-in, wait; trigger; job; wait eoc; copy-out; clear
    let expected = (1 + h.setup as u64).max(din + 1) + 1 + job + 1 + dout + 1;
    assert_eq!(r.total_cycles, expected);
    assert!(check_schedule_against_sim(&s, &r).is_empty());
}

#[test]
fn compute_bound_tiles_run_back_to_back() {
    let cfg = redmule(32);
    let g = gemm_graph(96, 64, 64, DType::Fp16);
    let s = pinned(&g, &cfg, &[12, 64, 64]);
    assert_eq!(s.nodes[0].tiling.n_tiles, 8);
    let r = simulate(&s, &cfg).unwrap();
    let j = jobs(&r);
    for w in j[1..].windows(2) {
        assert_eq!(
            w[1].start, w[0].finish,
            "idle gap before tile {}",
            w[1].tile
        );
    }
    let busy: u64 = j[2..].iter().map(|s| s.finish - s.start).sum();
    let span = j[7].finish - j[2].start;
    assert!(busy as f64 / span as f64 >= 0.95);
    assert!(check_schedule_against_sim(&s, &r).is_empty());
}

#[test]
fn fast_dma_leaves_jobs_and_fill() {
    let g = gemm_graph(96, 64, 64, DType::Fp16);
    let slow = redmule(8);
    let fast = redmule(1 << 30);
    let s = pinned(&g, &fast, &[12, 64, 64]);
    let r = simulate(&s, &fast).unwrap();
    let job_sum: u64 = jobs(&r).iter().map(|s| s.finish - s.start).sum();
    assert!(r.total_cycles >= job_sum);
    assert!(r.total_cycles <= job_sum + 100);
    let rs = simulate(&pinned(&g, &slow, &[12, 64, 64]), &slow).unwrap();
    assert!(rs.total_cycles > r.total_cycles);
}

#[test]
fn removed_dependency_is_reported() {
    let cfg = redmule(8);
    let g = gemm_graph(96, 64, 64, DType::Fp16);
    let mut s = pinned(&g, &cfg, &[12, 64, 64]);
    // let the first job start before its operands arrive
    let eot = s
        .actions
        .iter()
        .position(|a| a.kind == ActionKind::WaitEot)
        .unwrap();
    let copy_in = s.actions[eot].deps[0];
    s.actions[eot].deps.clear();
    let job = s
        .actions
        .iter()
        .position(|a| a.kind == ActionKind::HwpeJob)
        .unwrap();
    s.actions[job].deps.retain(|&d| d != copy_in);
    let r = simulate(&s, &cfg).unwrap();
    let v = check_schedule_against_sim(&s, &r);
    assert!(
        v.iter().any(|v| matches!(v, Violation::Aliasing { .. })),
        "{v:?}"
    );
}

#[test]
fn context_window_violation_is_reported() {
    let cfg = redmule(32);
    let g = gemm_graph(96, 64, 64, DType::Fp16);
    let mut s = pinned(&g, &cfg, &[12, 64, 64]);
    let r = simulate(&s, &cfg).unwrap();
    assert!(check_schedule_against_sim(&s, &r).is_empty());
    s.contexts.insert("redmule".into(), 1);
    let v = check_schedule_against_sim(&s, &r);
    assert!(
        v.iter()
            .any(|v| matches!(v, Violation::Contexts { contexts: 1, .. })),
        "{v:?}"
    );
}

#[test]
fn one_context_serializes_programming() {
    let mut cfg = redmule(32);
    cfg.hwpes[0].contexts = 1;
    let g = gemm_graph(96, 64, 64, DType::Fp16);
    let s = pinned(&g, &cfg, &[12, 64, 64]);
    let job0 = s
        .actions
        .iter()
        .find(|a| a.kind == ActionKind::HwpeJob)
        .unwrap()
        .id;
    let program1 = s
        .actions
        .iter()
        .filter(|a| a.kind == ActionKind::HwpeProgram)
        .nth(1)
        .unwrap();
    assert!(program1.deps.contains(&job0));
    let r = simulate(&s, &cfg).unwrap();
    assert!(check_schedule_against_sim(&s, &r).is_empty());
}

#[test]
fn deterministic_reports() {
    let g = build_transformer_encoder(&TransformerParams::new(1, 64, 4, 128, 16).unwrap()).unwrap();
    let cfg = preset("8xRVnn+NE").unwrap();
    let (_, a) = run(&g, &cfg, Options::default()).unwrap();
    let (_, b) = run(&g, &cfg, Options::default()).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert!(a.busy.values().all(|&b| b <= a.total_cycles));
    assert!((0.0..=1.0).contains(&a.data_movement_overhead));
}

#[test]
fn encoder_audit() {
    let p = TransformerParams::new(1, 64, 16, 256, 32).unwrap();
    let g = build_transformer_encoder(&p).unwrap();
    let c = compile(&g, &preset("8xRVnn+NE").unwrap(), Options::default()).unwrap();
    let macs = work_conservation_audit(&c.schedule, &g).unwrap();
    assert_eq!(
        macs,
        4 * 32 * 64 * 64 + 2 * 32 * 32 * 64 + 2 * 32 * 64 * 256
    );
    assert_eq!(macs, 1_703_936);
}

#[test]
fn ragged_tiles_conserve_work() {
    let g = gemm_graph(65, 65, 65, DType::Int8);
    let cfg = preset("8xRVnn").unwrap();
    let s = pinned(&g, &cfg, &[16, 16, 16]);
    assert_eq!(work_conservation_audit(&s, &g).unwrap(), 65 * 65 * 65);
    let r = simulate(&s, &cfg).unwrap();
    assert!(check_schedule_against_sim(&s, &r).is_empty());
}

#[test]
fn renderings() {
    let cfg = redmule(8);
    let g = gemm_graph(96, 64, 64, DType::Fp16);
    let s = pinned(&g, &cfg, &[12, 64, 64]);
    let r = simulate(&s, &cfg).unwrap();
    let csv = timeline_csv(&s, &r);
    assert_eq!(csv.lines().count(), s.actions.len() + 1);
    assert!(csv
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("0,DMA_IN,gemm,0,0,"));
    let chart = gantt(&r);
    let rows: Vec<&str> = chart.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[..3]
        .iter()
        .all(|l| l.chars().filter(|c| "#-.".contains(*c)).count() >= 80));
    assert!(rows[1].starts_with("    dma |#"));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn more_bandwidth_never_slows_down(
            m in 1u64..64, k in 1u64..64, n in 1u64..64,
            t in (1u64..64, 1u64..64, 1u64..64),
            bw in 1u64..16, extra in 1u64..16,
            cfg_name in prop::sample::select(vec!["8xRVnn", "8xRVnn+NE", "darkside-redmule"]),
        ) {
            let dtype = if cfg_name == "darkside-redmule" { DType::Fp16 } else { DType::Int8 };
            let g = gemm_graph(m, k, n, dtype);
            let mut cfg = preset(cfg_name).unwrap();
            cfg.dma_bw = bw;
            let s = pinned(&g, &cfg, &[t.0, t.1, t.2]);
            let slow = simulate(&s, &cfg).unwrap();
            cfg.dma_bw = bw + extra;
            let fast = simulate(&s, &cfg).unwrap();
            prop_assert!(fast.total_cycles <= slow.total_cycles,
                "{} > {}", fast.total_cycles, slow.total_cycles);
            prop_assert!(check_schedule_against_sim(&s, &fast).is_empty());
        }

        #[test]
        fn pipeline_schedules_are_sound(
            layers in 1u64..3, heads in prop::sample::select(vec![1u64, 2, 4]),
            s in 1u64..20,
            cfg_name in prop::sample::select(vec!["8xRV", "8xRVnn", "8xRVnn+NE"]),
        ) {
            let p = TransformerParams::new(layers, 32, heads, 64, s).unwrap();
            let g = build_transformer_encoder(&p).unwrap();
            let cfg = preset(cfg_name).unwrap();
            let (c, r) = run(&g, &cfg, Options::default()).unwrap();
            prop_assert_eq!(check_schedule_against_sim(&c.schedule, &r), vec![]);
            prop_assert_eq!(work_conservation_audit(&c.schedule, &g).unwrap(), g.total_macs());
        }
    }
}

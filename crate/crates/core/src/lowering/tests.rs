use super::*;
use crate::graph::{build_transformer_encoder, infer_shapes, TensorSpec, TransformerParams};
use crate::platform::preset;

fn t(name: &str, shape: &[u64], dtype: DType, kind: TensorKind) -> TensorSpec {
    TensorSpec::new(name, shape.to_vec(), dtype, kind)
}

fn act(name: &str, dtype: DType) -> TensorSpec {
    TensorSpec::new(name, vec![], dtype, TensorKind::Activation)
}

fn shaped(tensors: Vec<TensorSpec>, nodes: Vec<Node>) -> Graph {
    infer_shapes(&Graph::new(tensors, nodes).unwrap()).unwrap()
}

fn gemm_chain(branch: bool) -> Graph {
    let mut tensors = vec![
        t("x", &[8, 8], DType::Int8, TensorKind::GraphInput),
        t("w", &[8, 8], DType::Int8, TensorKind::Weight),
        act("acc", DType::Int32),
        act("q", DType::Int8),
    ];
    let mut nodes = vec![
        Node::new("gemm", Op::Gemm, &["x", "w"], &["acc"]),
        Node::new("rq", Op::Requant, &["acc"], &["q"]),
    ];
    if branch {
        tensors.push(t("a", &[], DType::Int8, TensorKind::GraphOutput));
        tensors.push(t("b", &[], DType::Int8, TensorKind::GraphOutput));
        nodes.push(Node::new("relu", Op::Activation, &["q"], &["a"]));
        nodes.push(Node::new("sm", Op::Softmax, &["q"], &["b"]));
    } else {
        tensors.push(t("y", &[], DType::Int8, TensorKind::GraphOutput));
        nodes.push(Node::new("relu", Op::Activation, &["q"], &["y"]));
    }
    shaped(tensors, nodes)
}

#[test]
fn linear_chain_fuses_into_one_group() {
    let fused = fuse(&gemm_chain(false)).unwrap();
    assert_eq!(fused.len(), 1);
    assert_eq!(fused[0].tail_ops(), [Op::Requant, Op::Activation]);
    assert_eq!(fused[0].output(), "y");
    assert_eq!(fused[0].inputs(), ["x", "w"]);
}

#[test]
fn branching_requant_ends_the_group() {
    let fused = fuse(&gemm_chain(true)).unwrap();
    let names: Vec<_> = fused.iter().map(|f| f.name()).collect();
    assert_eq!(names, ["gemm", "relu", "sm"]);
    assert_eq!(fused[0].tail_ops(), [Op::Requant]);
    assert_eq!(fused[0].output(), "q");
    assert!(fused[1].tail.is_empty() && fused[2].tail.is_empty());
}

#[test]
fn softmax_is_a_singleton() {
    let g = shaped(
        vec![
            t("x", &[4, 4], DType::Int8, TensorKind::GraphInput),
            t("y", &[], DType::Int8, TensorKind::GraphOutput),
        ],
        vec![Node::new("sm", Op::Softmax, &["x"], &["y"])],
    );
    let fused = fuse(&g).unwrap();
    assert_eq!(fused.len(), 1);
    assert!(fused[0].tail.is_empty());
}

#[test]
fn residual_add_is_absorbed() {
    let p = TransformerParams::new(1, 64, 16, 256, 32).unwrap();
    let g = build_transformer_encoder(&p).unwrap();
    let fused = fuse(&g).unwrap();
    let o = fused.iter().find(|f| f.name() == "l0.o_gemm").unwrap();
    assert_eq!(o.tail_ops(), [Op::Requant, Op::Add]);
    assert_eq!(o.tail_inputs(), ["x"]);
    let ff1 = fused.iter().find(|f| f.name() == "l0.ff1_gemm").unwrap();
    assert_eq!(ff1.tail_ops(), [Op::Requant, Op::Activation]);
    // 6 projections, 32 attention MatMuls, 16 softmaxes, concat, 2 LayerNorms
    assert_eq!(fused.len(), 6 + 32 + 16 + 1 + 2);
}

#[test]
fn groups_are_topologically_ordered() {
    let p = TransformerParams::new(2, 16, 4, 32, 5).unwrap();
    let g = build_transformer_encoder(&p).unwrap();
    let fused = fuse(&g).unwrap();
    let producer: HashMap<&str, usize> = fused
        .iter()
        .enumerate()
        .map(|(i, f)| (f.output(), i))
        .collect();
    for (i, f) in fused.iter().enumerate() {
        for input in f.inputs() {
            if let Some(&p) = producer.get(input) {
                assert!(p < i, "{} consumes {input} before it is produced", f.name());
            }
        }
    }
}

#[test]
fn projections_go_to_the_quantized_engine() {
    let p = TransformerParams::new(1, 64, 16, 256, 32).unwrap();
    let g = build_transformer_encoder(&p).unwrap();
    let cfg = preset("8xRVnn+NE").unwrap();
    let colored = color(&fuse(&g).unwrap(), &g, &cfg).unwrap();
    for f in &colored {
        let expect = match f.anchor.op {
            Op::Gemm => Engine::Hwpe("neureka".into()),
            _ => Engine::Cores,
        };
        assert_eq!(f.engine(), &expect, "{}", f.name());
    }
}

#[test]
fn float_gemm_falls_back_to_cores_without_float_engine() {
    let g = shaped(
        vec![
            t("x", &[8, 8], DType::Fp16, TensorKind::GraphInput),
            t("w", &[8, 8], DType::Fp16, TensorKind::Weight),
            t("y", &[], DType::Fp16, TensorKind::GraphOutput),
        ],
        vec![Node::new("g", Op::Gemm, &["x", "w"], &["y"])],
    );
    let ne = preset("8xRVnn+NE").unwrap();
    let colored = color(&fuse(&g).unwrap(), &g, &ne).unwrap();
    assert_eq!(colored[0].engine(), &Engine::Cores);
    let redmule = preset("darkside-redmule").unwrap();
    let colored = color(&fuse(&g).unwrap(), &g, &redmule).unwrap();
    assert_eq!(colored[0].engine(), &Engine::Hwpe("redmule".into()));
}

#[test]
fn dtype_without_any_engine_is_an_error() {
    let g = shaped(
        vec![
            t("x", &[8, 8], DType::Fp8E4m3, TensorKind::GraphInput),
            t("y", &[], DType::Fp8E4m3, TensorKind::GraphOutput),
        ],
        vec![Node::new("sm", Op::Softmax, &["x"], &["y"])],
    );
    let cfg = preset("8xRVnn").unwrap();
    assert!(matches!(
        color(&fuse(&g).unwrap(), &g, &cfg),
        Err(LoweringError::UnsupportedDtype { .. })
    ));
}

fn elementwise_chain(len: usize, residual: Option<usize>, dead: bool) -> Graph {
    let mut tensors = vec![t("t0", &[16, 16], DType::Int8, TensorKind::GraphInput)];
    let mut nodes = Vec::new();
    for i in 0..len {
        let kind = if i + 1 == len {
            TensorKind::GraphOutput
        } else {
            TensorKind::Activation
        };
        tensors.push(t(&format!("t{}", i + 1), &[], DType::Int8, kind));
        let input = format!("t{i}");
        let output = format!("t{}", i + 1);
        let node = match residual {
            Some(r) if i + 1 == len => Node::new(
                format!("n{i}"),
                Op::Add,
                &[&input, &format!("t{r}")],
                &[&output],
            ),
            _ => Node::new(format!("n{i}"), Op::Softmax, &[&input], &[&output]),
        };
        nodes.push(node);
    }
    if dead {
        tensors.push(act("unused", DType::Int8));
        nodes.push(Node::new("dead", Op::Softmax, &["t1"], &["unused"]));
    }
    shaped(tensors, nodes)
}

#[test]
fn chain_lifetimes() {
    let g = elementwise_chain(3, None, false);
    let fused = fuse(&g).unwrap();
    let table = compute_lifetimes(&fused, &g);
    let l = |name: &str| table.get(name).unwrap().interval();
    assert_eq!(l("t0"), Interval::new(-1, 0));
    assert_eq!(l("t1"), Interval::new(0, 1));
    assert_eq!(l("t3"), Interval::new(2, 2));
}

#[test]
fn residual_extends_to_last_consumer() {
    let g = elementwise_chain(6, Some(1), false);
    let fused = fuse(&g).unwrap();
    let table = compute_lifetimes(&fused, &g);
    assert_eq!(table.get("t1").unwrap().interval(), Interval::new(0, 5));
}

#[test]
fn unused_intermediate_is_flagged() {
    let g = elementwise_chain(2, None, true);
    let fused = fuse(&g).unwrap();
    let table = compute_lifetimes(&fused, &g);
    let dead = table.get("unused").unwrap();
    assert!(dead.dead);
    assert_eq!(dead.first_def, dead.last_use);
    assert!(!table.get("t1").unwrap().dead);
}

fn table_with(bytes: u64, span: i64) -> LifetimeTable {
    let mut entries = BTreeMap::new();
    entries.insert(
        "a".to_string(),
        Lifetime {
            tensor: "a".into(),
            first_def: 0,
            last_use: span,
            bytes,
            kind: TensorKind::Activation,
            level: MemLevel::L2,
            l1_offset: None,
            dead: false,
        },
    );
    LifetimeTable {
        entries,
        resident_bytes: 0,
    }
}

fn small_l1() -> ClusterConfig {
    let mut cfg = preset("8xRVnn").unwrap();
    cfg.l1_bytes = 128 * 1024;
    cfg.l2_bytes = 16 << 20;
    cfg
}

#[test]
fn small_activation_becomes_resident() {
    let cfg = small_l1();
    assert_eq!(cfg.residency_budget(), 32 * 1024);
    let out = promote(&table_with(2048, 3), &cfg).unwrap();
    assert!(out.is_resident("a"));
    assert_eq!(out.get("a").unwrap().l1_offset, Some(0));
    assert_eq!(out.resident_bytes, 2048);
}

#[test]
fn large_activation_stays_in_l2() {
    let out = promote(&table_with(1 << 20, 3), &small_l1()).unwrap();
    assert!(!out.is_resident("a"));
    assert_eq!(out.resident_bytes, 0);
}

#[test]
fn single_node_lifetime_is_not_promoted() {
    let out = promote(&table_with(64, 0), &small_l1()).unwrap();
    assert!(!out.is_resident("a"));
}

#[test]
fn oversized_tensor_rejected() {
    assert!(matches!(
        promote(&table_with(300 << 20, 3), &small_l1()),
        Err(LoweringError::L2Capacity { .. })
    ));
}

#[test]
fn residents_respect_budget_and_do_not_overlap() {
    let p = TransformerParams::new(2, 64, 16, 256, 32).unwrap();
    let g = build_transformer_encoder(&p).unwrap();
    let cfg = preset("8xRVnn+NE").unwrap();
    let l = lower(&g, &cfg).unwrap();
    let residents: Vec<_> = l
        .lifetimes
        .entries
        .values()
        .filter(|e| e.level == MemLevel::L1Resident)
        .collect();
    assert!(!residents.is_empty());
    assert!(l.lifetimes.resident_bytes <= cfg.residency_budget());
    for (i, a) in residents.iter().enumerate() {
        for b in &residents[i + 1..] {
            if a.interval().overlaps(&b.interval()) {
                let (ao, bo) = (a.l1_offset.unwrap(), b.l1_offset.unwrap());
                assert!(
                    ao + a.bytes <= bo || bo + b.bytes <= ao,
                    "{} / {}",
                    a.tensor,
                    b.tensor
                );
            }
        }
    }
}

#[test]
fn report_lists_every_group() {
    let g = gemm_chain(true);
    let l = lower(&g, &preset("8xRVnn+NE").unwrap()).unwrap();
    let report: serde_json::Value = serde_json::from_str(&lowering_report(&l)).unwrap();
    assert_eq!(report["nodes"].as_array().unwrap().len(), 3);
    assert_eq!(report["nodes"][0]["engine"], "neureka");
    assert_eq!(report["nodes"][0]["fused"][0], "rq");
    assert_eq!(lowering_report(&l), lowering_report(&l));
}

mod props {
    use super::*;
    use crate::graph::{build_cnn, CnnSpec, ConvDesc};
    use proptest::prelude::*;

    fn cnn() -> impl Strategy<Value = Graph> {
        let layer = (1u64..24, 1u64..4, 1u64..3, any::<bool>(), any::<bool>()).prop_map(
            |(cout, k, stride, depthwise, relu)| ConvDesc {
                cout,
                kernel: 2 * k - 1,
                stride,
                pad: k - 1,
                depthwise,
                relu,
            },
        );
        (1u64..12, 4u64..16, proptest::collection::vec(layer, 1..4)).prop_map(|(c, hw, layers)| {
            let spec = CnnSpec {
                input: [c, hw, hw],
                dtype: DType::Int8,
                layers,
            };
            build_cnn(&spec).unwrap()
        })
    }

    fn encoder() -> impl Strategy<Value = Graph> {
        (1u64..3, 1u64..4, 1u64..9, 1u64..6).prop_map(|(layers, h, dh, s)| {
            let p = TransformerParams::new(layers, h * dh, h, 2 * h * dh, s).unwrap();
            build_transformer_encoder(&p).unwrap()
        })
    }

    fn check(g: &Graph) -> Result<(), TestCaseError> {
        let fused = fuse(g).unwrap();
        let mut names: Vec<&str> = fused
            .iter()
            .flat_map(|f| f.nodes())
            .map(|n| n.name.as_str())
            .collect();
        names.sort_unstable();
        let mut original: Vec<&str> = g.nodes().iter().map(|n| n.name.as_str()).collect();
        original.sort_unstable();
        prop_assert_eq!(names, original);

        for cfg_name in ["8xRV", "8xRVnn", "8xRVnn+NE", "darkside-redmule"] {
            let cfg = preset(cfg_name).unwrap();
            let colored = color(&fused, g, &cfg).unwrap();
            for f in &colored {
                if let Engine::Hwpe(h) = f.engine() {
                    let h = cfg.hwpe(h).unwrap();
                    if h.requires_const_operand {
                        prop_assert!(f
                            .anchor
                            .inputs
                            .iter()
                            .any(|t| g.spec(t).kind == TensorKind::Weight));
                    }
                }
            }
            let table = compute_lifetimes(&colored, g);
            for (i, f) in colored.iter().enumerate() {
                for input in f.inputs() {
                    prop_assert!(table.get(input).unwrap().last_use >= i as i64);
                }
            }
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cnn_invariants(g in cnn()) {
            check(&g)?;
        }

        #[test]
        fn encoder_invariants(g in encoder()) {
            check(&g)?;
        }
    }
}

//! JSON graph documents: `{"tensors": [...], "nodes": [...]}`.

use serde::{Deserialize, Serialize};

use super::{DType, Graph, GraphError, Node, Result, TensorKind, TensorSpec};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    tensors: Vec<TensorDoc>,
    nodes: Vec<Node>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDoc {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<Vec<i64>>,
    dtype: DType,
    kind: TensorKind,
}

/// Parses and validates a graph document.
///
/// Shapes may be omitted for produced tensors (they are inferred later);
/// any non-positive dimension is rejected since all geometry is static.
pub fn parse_graph(document: &str) -> Result<Graph> {
    let doc: GraphDoc = serde_json::from_str(document).map_err(|e| GraphError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut tensors = Vec::with_capacity(doc.tensors.len());
    for t in doc.tensors {
        let shape = match t.shape {
            None => Vec::new(),
            Some(dims) => {
                if dims.is_empty() {
                    return Err(GraphError::InvalidTensor {
                        tensor: t.name,
                        message: "shape must have at least one dimension".into(),
                    });
                }
                if let Some(bad) = dims.iter().find(|&&d| d < 1) {
                    return Err(GraphError::InvalidTensor {
                        tensor: t.name,
                        message: format!("dynamic or empty dimension {bad} is not supported"),
                    });
                }
                dims.into_iter().map(|d| d as u64).collect()
            }
        };
        tensors.push(TensorSpec {
            name: t.name,
            shape,
            dtype: t.dtype,
            kind: t.kind,
        });
    }
    Graph::new(tensors, doc.nodes)
}

/// Serializes a graph to its document form (pretty-printed, stable order).
pub fn emit_graph(g: &Graph) -> String {
    let doc = GraphDoc {
        tensors: g
            .tensors()
            .iter()
            .map(|t| TensorDoc {
                name: t.name.clone(),
                shape: t
                    .has_shape()
                    .then(|| t.shape.iter().map(|&d| d as i64).collect()),
                dtype: t.dtype,
                kind: t.kind,
            })
            .collect(),
        nodes: g.nodes().to_vec(),
    };
    serde_json::to_string_pretty(&doc).expect("graph documents always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    const SINGLE_GEMM: &str = r#"{
        "tensors": [
            {"name": "X", "shape": [8, 8], "dtype": "int8", "kind": "graph-input"},
            {"name": "A", "shape": [8, 8], "dtype": "int8", "kind": "weight"},
            {"name": "Y", "dtype": "int32", "kind": "graph-output"}
        ],
        "nodes": [
            {"name": "g0", "op": "GEMM", "inputs": ["X", "A"], "outputs": ["Y"]}
        ]
    }"#;

    #[test]
    fn minimal_gemm_document() {
        let g = parse_graph(SINGLE_GEMM).unwrap();
        assert_eq!(g.nodes().len(), 1);
        assert_eq!(g.tensors().len(), 3);
        assert_eq!(g.spec("A").kind, TensorKind::Weight);
    }

    #[test]
    fn undefined_tensor_is_named() {
        let doc = SINGLE_GEMM.replace(r#"["X", "A"]"#, r#"["X", "W0"]"#);
        let err = parse_graph(&doc).unwrap_err();
        assert!(matches!(&err, GraphError::UnknownTensor { tensor, .. } if tensor == "W0"));
        assert!(err.to_string().contains("W0"));
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_graph("{\n  \"tensors\": [,]\n}").unwrap_err();
        match err {
            GraphError::Syntax { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_dtype_is_a_syntax_error() {
        let doc = SINGLE_GEMM.replace(
            r#""dtype": "int8", "kind": "weight""#,
            r#""dtype": "int7", "kind": "weight""#,
        );
        assert!(matches!(parse_graph(&doc), Err(GraphError::Syntax { .. })));
    }

    #[test]
    fn dynamic_dimension_rejected() {
        let doc = SINGLE_GEMM.replace(
            "[8, 8], \"dtype\": \"int8\", \"kind\": \"graph-input\"",
            "[-1, 8], \"dtype\": \"int8\", \"kind\": \"graph-input\"",
        );
        assert!(matches!(
            parse_graph(&doc),
            Err(GraphError::InvalidTensor { tensor, .. }) if tensor == "X"
        ));
    }

    #[test]
    fn arity_mismatch_rejected() {
        let doc = SINGLE_GEMM.replace(r#"["X", "A"]"#, r#"["X"]"#);
        assert!(matches!(parse_graph(&doc), Err(GraphError::Arity { .. })));
    }

    #[test]
    fn cyclic_def_use_rejected() {
        let doc = r#"{
            "tensors": [
                {"name": "a", "shape": [4], "dtype": "int8", "kind": "activation"},
                {"name": "b", "shape": [4], "dtype": "int8", "kind": "activation"},
                {"name": "c", "shape": [4], "dtype": "int8", "kind": "graph-output"}
            ],
            "nodes": [
                {"name": "n0", "op": "Add", "inputs": ["b", "b"], "outputs": ["a"]},
                {"name": "n1", "op": "Requant", "inputs": ["a"], "outputs": ["b"]},
                {"name": "n2", "op": "Requant", "inputs": ["a"], "outputs": ["c"]}
            ]
        }"#;
        assert!(matches!(parse_graph(doc), Err(GraphError::Cycle { .. })));
    }

    #[test]
    fn emit_then_parse_is_identity() {
        let g = parse_graph(SINGLE_GEMM).unwrap();
        assert_eq!(parse_graph(&emit_graph(&g)).unwrap(), g);
    }
}

use super::{topo_order, Graph, GraphError, Node, Op, Result};

/// Computes every produced tensor's shape from graph inputs and weights.
///
/// Declared shapes on produced tensors are checked against the inferred
/// ones, which makes the pass idempotent.
pub fn infer_shapes(g: &Graph) -> Result<Graph> {
    let mut tensors = g.tensors().to_vec();
    let index: std::collections::HashMap<String, usize> = tensors
        .iter()
        .enumerate()
        .map(|(i, t)| (t.name.clone(), i))
        .collect();
    for ni in topo_order(g)? {
        let node = &g.nodes()[ni];
        let inputs: Vec<&[u64]> = node
            .inputs
            .iter()
            .map(|name| tensors[index[name]].shape.as_slice())
            .collect();
        if let Some(pos) = inputs.iter().position(|s| s.is_empty()) {
            return Err(mismatch(
                node,
                format!("input `{}` has no shape", node.inputs[pos]),
            ));
        }
        let shape = output_shape(node, &inputs)?;
        let out = &mut tensors[index[node.output()]];
        if out.has_shape() && out.shape != shape {
            return Err(mismatch(
                node,
                format!("declared output {:?} but inferred {:?}", out.shape, shape),
            ));
        }
        out.shape = shape;
    }
    Graph::new(tensors, g.nodes().to_vec())
}

fn mismatch(node: &Node, message: String) -> GraphError {
    GraphError::ShapeMismatch {
        node: node.name.clone(),
        message,
    }
}

fn rank(node: &Node, shape: &[u64], want: usize, what: &str) -> Result<()> {
    if shape.len() != want {
        return Err(mismatch(
            node,
            format!("{what} must have rank {want}, got {shape:?}"),
        ));
    }
    Ok(())
}

fn divide(node: &Node, extent: u64, heads: u64, what: &str) -> Result<u64> {
    if !extent.is_multiple_of(heads) {
        return Err(mismatch(
            node,
            format!("{what} extent {extent} not divisible by {heads} heads"),
        ));
    }
    Ok(extent / heads)
}

fn conv_extent(node: &Node, input: u64, kernel: u64, stride: u64, pad: u64) -> Result<u64> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(mismatch(
            node,
            format!("kernel {kernel} larger than padded input {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

fn output_shape(node: &Node, inputs: &[&[u64]]) -> Result<Vec<u64>> {
    match node.op {
        Op::Gemm => {
            let (a, w) = (inputs[0], inputs[1]);
            rank(node, a, 2, "GEMM input")?;
            rank(node, w, 2, "GEMM weight")?;
            if a[1] != w[0] {
                return Err(mismatch(
                    node,
                    format!("inner dimensions differ: {:?} x {:?}", a, w),
                ));
            }
            Ok(vec![a[0], w[1]])
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            rank(node, a, 2, "MatMul lhs")?;
            rank(node, b, 2, "MatMul rhs")?;
            let heads = node.attr("heads", 1) as u64;
            let k_lhs = if node.attr("slice_a", 0) == 1 {
                divide(node, a[1], heads, "lhs")?
            } else {
                a[1]
            };
            let slice_b = node.attr("slice_b", 0) == 1;
            let (k_rhs, n) = if node.attr("transpose_b", 0) == 1 {
                let k = if slice_b {
                    divide(node, b[1], heads, "rhs")?
                } else {
                    b[1]
                };
                (k, b[0])
            } else {
                let n = if slice_b {
                    divide(node, b[1], heads, "rhs")?
                } else {
                    b[1]
                };
                (b[0], n)
            };
            if k_lhs != k_rhs {
                return Err(mismatch(
                    node,
                    format!("inner dimensions differ: {k_lhs} vs {k_rhs}"),
                ));
            }
            Ok(vec![a[0], n])
        }
        Op::Conv2D | Op::DepthwiseConv2D => {
            let (x, w) = (inputs[0], inputs[1]);
            rank(node, x, 3, "convolution input [C, H, W]")?;
            rank(node, w, 4, "convolution weight [Cout, Cin, Kh, Kw]")?;
            let kernel = node.attr("kernel", w[2] as i64) as u64;
            if w[2] != kernel || w[3] != kernel {
                return Err(mismatch(
                    node,
                    format!(
                        "weight window {}x{} does not match kernel {kernel}",
                        w[2], w[3]
                    ),
                ));
            }
            let cout = if node.op == Op::Conv2D {
                if w[1] != x[0] {
                    return Err(mismatch(
                        node,
                        format!("weight expects {} input channels, input has {}", w[1], x[0]),
                    ));
                }
                w[0]
            } else {
                if w[0] != x[0] || w[1] != 1 {
                    return Err(mismatch(
                        node,
                        format!("depthwise weight must be [{}, 1, k, k], got {:?}", x[0], w),
                    ));
                }
                x[0]
            };
            let stride = node.attr("stride", 1) as u64;
            let pad = node.attr("pad", 0) as u64;
            Ok(vec![
                cout,
                conv_extent(node, x[1], kernel, stride, pad)?,
                conv_extent(node, x[2], kernel, stride, pad)?,
            ])
        }
        Op::Softmax | Op::LayerNorm | Op::Requant | Op::Activation => Ok(inputs[0].to_vec()),
        Op::Add => {
            if inputs[0] != inputs[1] {
                return Err(mismatch(
                    node,
                    format!("operands differ: {:?} vs {:?}", inputs[0], inputs[1]),
                ));
            }
            Ok(inputs[0].to_vec())
        }
        Op::Transpose => {
            rank(node, inputs[0], 2, "Transpose input")?;
            Ok(vec![inputs[0][1], inputs[0][0]])
        }
        Op::Concat => {
            let first = inputs[0];
            let lead = &first[..first.len() - 1];
            let mut last = 0;
            for s in inputs {
                if s.len() != first.len() || &s[..s.len() - 1] != lead {
                    return Err(mismatch(
                        node,
                        format!("cannot concatenate {:?} with {:?}", first, s),
                    ));
                }
                last += s[s.len() - 1];
            }
            let mut out = lead.to_vec();
            out.push(last);
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DType, TensorKind, TensorSpec};

    fn gemm(a: Vec<u64>, w: Vec<u64>) -> Graph {
        Graph::new(
            vec![
                TensorSpec::new("a", a, DType::Int8, TensorKind::GraphInput),
                TensorSpec::new("w", w, DType::Int8, TensorKind::Weight),
                TensorSpec::new("y", vec![], DType::Int32, TensorKind::GraphOutput),
            ],
            vec![Node::new("g", Op::Gemm, &["a", "w"], &["y"])],
        )
        .unwrap()
    }

    #[test]
    fn gemm_product_shape() {
        let g = infer_shapes(&gemm(vec![4, 3], vec![3, 5])).unwrap();
        assert_eq!(g.spec("y").shape, [4, 5]);
    }

    #[test]
    fn gemm_inner_mismatch() {
        assert!(matches!(
            infer_shapes(&gemm(vec![4, 3], vec![4, 5])),
            Err(GraphError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn same_padding_conv() {
        let g = Graph::new(
            vec![
                TensorSpec::new("x", vec![8, 16, 16], DType::Int8, TensorKind::GraphInput),
                TensorSpec::new("w", vec![4, 8, 3, 3], DType::Int8, TensorKind::Weight),
                TensorSpec::new("y", vec![], DType::Int32, TensorKind::GraphOutput),
            ],
            vec![Node::new("c", Op::Conv2D, &["x", "w"], &["y"])
                .with_attr("kernel", 3)
                .with_attr("pad", 1)
                .with_attr("stride", 1)],
        )
        .unwrap();
        let g = infer_shapes(&g).unwrap();
        assert_eq!(g.spec("y").shape, [4, 16, 16]);
    }

    #[test]
    fn strided_conv_floors() {
        let g = Graph::new(
            vec![
                TensorSpec::new("x", vec![1, 7, 7], DType::Int8, TensorKind::GraphInput),
                TensorSpec::new("w", vec![1, 1, 3, 3], DType::Int8, TensorKind::Weight),
                TensorSpec::new("y", vec![], DType::Int32, TensorKind::GraphOutput),
            ],
            vec![Node::new("c", Op::Conv2D, &["x", "w"], &["y"]).with_attr("stride", 2)],
        )
        .unwrap();
        assert_eq!(infer_shapes(&g).unwrap().spec("y").shape, [1, 3, 3]);
    }

    #[test]
    fn per_head_matmul_shapes() {
        let g = Graph::new(
            vec![
                TensorSpec::new("q", vec![32, 64], DType::Int8, TensorKind::GraphInput),
                TensorSpec::new("k", vec![32, 64], DType::Int8, TensorKind::GraphInput),
                TensorSpec::new("s", vec![], DType::Int32, TensorKind::GraphOutput),
            ],
            vec![Node::new("qk", Op::MatMul, &["q", "k"], &["s"])
                .with_attr("heads", 16)
                .with_attr("head", 3)
                .with_attr("slice_a", 1)
                .with_attr("slice_b", 1)
                .with_attr("transpose_b", 1)],
        )
        .unwrap();
        let g = infer_shapes(&g).unwrap();
        assert_eq!(g.spec("s").shape, [32, 32]);
        assert_eq!(g.matmul_dims(&g.nodes()[0]), (32, 4, 32));
    }

    #[test]
    fn declared_output_checked() {
        let g = Graph::new(
            vec![
                TensorSpec::new("a", vec![4, 3], DType::Int8, TensorKind::GraphInput),
                TensorSpec::new("w", vec![3, 5], DType::Int8, TensorKind::Weight),
                TensorSpec::new("y", vec![4, 6], DType::Int32, TensorKind::GraphOutput),
            ],
            vec![Node::new("g", Op::Gemm, &["a", "w"], &["y"])],
        )
        .unwrap();
        assert!(infer_shapes(&g).is_err());
    }
}

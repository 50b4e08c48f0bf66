//! Computational-graph IR: tensors, nodes, validation and workload generators.

mod builders;
mod doc;
mod order;
mod shape;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use builders::{build_cnn, build_transformer_encoder, CnnSpec, ConvDesc, TransformerParams};
pub use doc::{emit_graph, parse_graph};
pub use order::topo_order;
pub use shape::infer_shapes;

/// Element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "int2")]
    Int2,
    #[serde(rename = "int4")]
    Int4,
    #[serde(rename = "int8")]
    Int8,
    #[serde(rename = "int32")]
    Int32,
    #[serde(rename = "fp16")]
    Fp16,
    #[serde(rename = "bf16")]
    Bf16,
    #[serde(rename = "fp8e4m3")]
    Fp8E4m3,
    #[serde(rename = "fp8e5m2")]
    Fp8E5m2,
}

impl DType {
    pub const ALL: [DType; 8] = [
        DType::Int2,
        DType::Int4,
        DType::Int8,
        DType::Int32,
        DType::Fp16,
        DType::Bf16,
        DType::Fp8E4m3,
        DType::Fp8E5m2,
    ];

    pub fn bits(self) -> u64 {
        match self {
            DType::Int2 => 2,
            DType::Int4 => 4,
            DType::Int8 | DType::Fp8E4m3 | DType::Fp8E5m2 => 8,
            DType::Fp16 | DType::Bf16 => 16,
            DType::Int32 => 32,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(
            self,
            DType::Fp16 | DType::Bf16 | DType::Fp8E4m3 | DType::Fp8E5m2
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::Int2 => "int2",
            DType::Int4 => "int4",
            DType::Int8 => "int8",
            DType::Int32 => "int32",
            DType::Fp16 => "fp16",
            DType::Bf16 => "bf16",
            DType::Fp8E4m3 => "fp8e4m3",
            DType::Fp8E5m2 => "fp8e5m2",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Bytes needed to hold `elements` values of `dtype`.
pub fn bytes_for(elements: u64, dtype: DType) -> u64 {
    (elements * dtype.bits()).div_ceil(8)
}

/// Role of a tensor in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensorKind {
    /// Constant operand (weights).
    Weight,
    /// Intermediate value produced and consumed inside the graph.
    Activation,
    GraphInput,
    GraphOutput,
}

impl TensorKind {
    pub fn is_constant(self) -> bool {
        self == TensorKind::Weight
    }

    /// Produced by a node (as opposed to supplied from outside).
    pub fn is_produced(self) -> bool {
        matches!(self, TensorKind::Activation | TensorKind::GraphOutput)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    /// Elements per dimension. Empty until inferred for produced tensors.
    pub shape: Vec<u64>,
    pub dtype: DType,
    pub kind: TensorKind,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: Vec<u64>, dtype: DType, kind: TensorKind) -> Self {
        Self {
            name: name.into(),
            shape,
            dtype,
            kind,
        }
    }

    pub fn elements(&self) -> u64 {
        if self.shape.is_empty() {
            0
        } else {
            self.shape.iter().product()
        }
    }

    pub fn bytes(&self) -> u64 {
        bytes_for(self.elements(), self.dtype)
    }

    pub fn has_shape(&self) -> bool {
        !self.shape.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "GEMM")]
    Gemm,
    Conv2D,
    DepthwiseConv2D,
    /// Dynamic x dynamic matrix product.
    MatMul,
    Softmax,
    LayerNorm,
    Add,
    Requant,
    /// ReLU (`kind` = 0) or GELU (`kind` = 1).
    Activation,
    Transpose,
    /// Concatenation along the last axis; gathers per-head attention outputs.
    Concat,
}

impl Op {
    /// Ops whose cost is dominated by multiply-accumulates.
    pub fn is_mac(self) -> bool {
        matches!(
            self,
            Op::Gemm | Op::Conv2D | Op::DepthwiseConv2D | Op::MatMul
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Op::Gemm => "GEMM",
            Op::Conv2D => "Conv2D",
            Op::DepthwiseConv2D => "DepthwiseConv2D",
            Op::MatMul => "MatMul",
            Op::Softmax => "Softmax",
            Op::LayerNorm => "LayerNorm",
            Op::Add => "Add",
            Op::Requant => "Requant",
            Op::Activation => "Activation",
            Op::Transpose => "Transpose",
            Op::Concat => "Concat",
        }
    }

    /// Accepted input count range.
    fn input_arity(self) -> (usize, usize) {
        match self {
            Op::Gemm | Op::Conv2D | Op::DepthwiseConv2D | Op::MatMul | Op::Add => (2, 2),
            Op::Softmax | Op::LayerNorm | Op::Requant | Op::Activation | Op::Transpose => (1, 1),
            Op::Concat => (1, usize::MAX),
        }
    }

    /// Legal attributes and their inclusive ranges.
    fn attr_ranges(self) -> &'static [(&'static str, i64, i64)] {
        match self {
            Op::Conv2D | Op::DepthwiseConv2D => {
                &[("kernel", 1, 64), ("stride", 1, 64), ("pad", 0, 64)]
            }
            Op::MatMul => &[
                ("heads", 1, 4096),
                ("head", 0, 4095),
                ("slice_a", 0, 1),
                ("slice_b", 0, 1),
                ("transpose_b", 0, 1),
            ],
            Op::Softmax | Op::LayerNorm => &[("heads", 1, 4096)],
            Op::Activation => &[("kind", 0, 1)],
            _ => &[],
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: Op,
    #[serde(default)]
    pub attrs: BTreeMap<String, i64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Node {
    pub fn new(name: impl Into<String>, op: Op, inputs: &[&str], outputs: &[&str]) -> Self {
        Self {
            name: name.into(),
            op,
            attrs: BTreeMap::new(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_attr(mut self, key: &str, value: i64) -> Self {
        self.attrs.insert(key.to_string(), value);
        self
    }

    pub fn attr(&self, key: &str, default: i64) -> i64 {
        self.attrs.get(key).copied().unwrap_or(default)
    }

    pub fn output(&self) -> &str {
        &self.outputs[0]
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("node `{node}` references unknown tensor `{tensor}`")]
    UnknownTensor { node: String, tensor: String },
    #[error("duplicate {what} name `{name}`")]
    Duplicate { what: &'static str, name: String },
    #[error("node `{node}` ({op}): expected {expected} {side}, found {found}")]
    Arity {
        node: String,
        op: Op,
        side: &'static str,
        expected: String,
        found: usize,
    },
    #[error("node `{node}`: attribute `{attr}`: {message}")]
    Attr {
        node: String,
        attr: String,
        message: String,
    },
    #[error("tensor `{tensor}`: {message}")]
    Producer { tensor: String, message: String },
    #[error("tensor `{tensor}`: {message}")]
    InvalidTensor { tensor: String, message: String },
    #[error("cycle through nodes {nodes:?}")]
    Cycle { nodes: Vec<String> },
    #[error("shape mismatch at node `{node}`: {message}")]
    ShapeMismatch { node: String, message: String },
    #[error("graph has no nodes")]
    Empty,
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Validated computational graph.
///
/// Construction through [`Graph::new`] guarantees that every referenced
/// tensor exists, op arities and attributes are legal, every produced tensor
/// has exactly one producer and the def-use relation is acyclic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    tensors: Vec<TensorSpec>,
    nodes: Vec<Node>,
    index: HashMap<String, usize>,
}

impl Graph {
    pub fn new(tensors: Vec<TensorSpec>, nodes: Vec<Node>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tensors.len());
        for (i, t) in tensors.iter().enumerate() {
            if index.insert(t.name.clone(), i).is_some() {
                return Err(GraphError::Duplicate {
                    what: "tensor",
                    name: t.name.clone(),
                });
            }
            if t.shape.contains(&0) {
                return Err(GraphError::InvalidTensor {
                    tensor: t.name.clone(),
                    message: "dimensions must be >= 1".into(),
                });
            }
            if !t.kind.is_produced() && t.shape.is_empty() {
                return Err(GraphError::InvalidTensor {
                    tensor: t.name.clone(),
                    message: "input and weight tensors need a static shape".into(),
                });
            }
        }
        let g = Self {
            tensors,
            nodes,
            index,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let mut node_names = HashMap::new();
        let mut producers: HashMap<&str, usize> = HashMap::new();
        for (ni, node) in self.nodes.iter().enumerate() {
            if node_names.insert(node.name.as_str(), ni).is_some() {
                return Err(GraphError::Duplicate {
                    what: "node",
                    name: node.name.clone(),
                });
            }
            let (lo, hi) = node.op.input_arity();
            if node.inputs.len() < lo || node.inputs.len() > hi {
                let expected = if lo == hi {
                    lo.to_string()
                } else {
                    format!("at least {lo}")
                };
                return Err(GraphError::Arity {
                    node: node.name.clone(),
                    op: node.op,
                    side: "inputs",
                    expected,
                    found: node.inputs.len(),
                });
            }
            if node.outputs.len() != 1 {
                return Err(GraphError::Arity {
                    node: node.name.clone(),
                    op: node.op,
                    side: "outputs",
                    expected: "1".into(),
                    found: node.outputs.len(),
                });
            }
            for name in node.inputs.iter().chain(&node.outputs) {
                if !self.index.contains_key(name) {
                    return Err(GraphError::UnknownTensor {
                        node: node.name.clone(),
                        tensor: name.clone(),
                    });
                }
            }
            self.check_attrs(node)?;
            for out in &node.outputs {
                let t = self.tensor(out).expect("checked above");
                if !t.kind.is_produced() {
                    return Err(GraphError::Producer {
                        tensor: out.clone(),
                        message: format!(
                            "{:?} tensor cannot be written by node `{}`",
                            t.kind, node.name
                        ),
                    });
                }
                if producers.insert(out.as_str(), ni).is_some() {
                    return Err(GraphError::Producer {
                        tensor: out.clone(),
                        message: "has more than one producer".into(),
                    });
                }
            }
        }
        for t in &self.tensors {
            if t.kind.is_produced() && !producers.contains_key(t.name.as_str()) {
                return Err(GraphError::Producer {
                    tensor: t.name.clone(),
                    message: "is never produced".into(),
                });
            }
        }
        topo_order(self).map(|_| ())
    }

    fn check_attrs(&self, node: &Node) -> Result<()> {
        let ranges = node.op.attr_ranges();
        for (key, &value) in &node.attrs {
            let Some(&(_, lo, hi)) = ranges.iter().find(|(k, _, _)| k == key) else {
                return Err(GraphError::Attr {
                    node: node.name.clone(),
                    attr: key.clone(),
                    message: format!("not an attribute of {}", node.op),
                });
            };
            if value < lo || value > hi {
                return Err(GraphError::Attr {
                    node: node.name.clone(),
                    attr: key.clone(),
                    message: format!("{value} outside [{lo}, {hi}]"),
                });
            }
        }
        if node.op == Op::MatMul && node.attr("head", 0) >= node.attr("heads", 1) {
            return Err(GraphError::Attr {
                node: node.name.clone(),
                attr: "head".into(),
                message: "must be < heads".into(),
            });
        }
        Ok(())
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    /// Looks up a tensor known to exist (validated graphs only).
    pub fn spec(&self, name: &str) -> &TensorSpec {
        self.tensor(name)
            .unwrap_or_else(|| panic!("tensor `{name}` missing from validated graph"))
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Index of the node producing each tensor.
    pub fn producers(&self) -> HashMap<&str, usize> {
        let mut map = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for o in &n.outputs {
                map.insert(o.as_str(), i);
            }
        }
        map
    }

    /// Consumer node indices of each tensor, in declaration order.
    pub fn consumers(&self) -> HashMap<&str, Vec<usize>> {
        let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                let list = map.entry(inp.as_str()).or_default();
                if list.last() != Some(&i) {
                    list.push(i);
                }
            }
        }
        map
    }

    pub fn is_fully_shaped(&self) -> bool {
        self.tensors.iter().all(TensorSpec::has_shape)
    }

    /// Arithmetic work of one node: multiply-accumulates for MAC ops,
    /// output elements otherwise. Requires inferred shapes.
    pub fn node_work(&self, node: &Node) -> u64 {
        let out = self.spec(node.output());
        match node.op {
            Op::Gemm | Op::MatMul => {
                let (m, k, n) = self.matmul_dims(node);
                m * k * n
            }
            Op::Conv2D => {
                let w = self.spec(&node.inputs[1]);
                let (cout, cin, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
                cout * cin * kh * kw * out.shape[1] * out.shape[2]
            }
            Op::DepthwiseConv2D => {
                let w = self.spec(&node.inputs[1]);
                w.shape[0] * w.shape[2] * w.shape[3] * out.shape[1] * out.shape[2]
            }
            _ => out.elements(),
        }
    }

    pub fn total_macs(&self) -> u64 {
        self.nodes
            .iter()
            .filter(|n| n.op.is_mac())
            .map(|n| self.node_work(n))
            .sum()
    }

    /// (m, k, n) of a GEMM or (per-head) MatMul after slicing/transposition.
    pub fn matmul_dims(&self, node: &Node) -> (u64, u64, u64) {
        let a = &self.spec(&node.inputs[0]).shape;
        let b = &self.spec(&node.inputs[1]).shape;
        let heads = node.attr("heads", 1) as u64;
        let (m, mut k) = (a[0], a[a.len() - 1]);
        if node.attr("slice_a", 0) == 1 {
            k /= heads;
        }
        let mut n = if node.attr("transpose_b", 0) == 1 {
            b[0]
        } else {
            b[b.len() - 1]
        };
        if node.attr("slice_b", 0) == 1 && node.attr("transpose_b", 0) == 0 {
            n /= heads;
        }
        (m, k, n)
    }
}

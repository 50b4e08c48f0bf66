//! Programmatic benchmark workloads.

use serde::{Deserialize, Serialize};

use super::{infer_shapes, DType, Graph, GraphError, Node, Op, Result, TensorKind, TensorSpec};

/// Encoder geometry: `layers` blocks of hidden size `d_m`, `h` heads,
/// feed-forward width `d_ff`, sequence length `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerParams {
    pub layers: u64,
    pub d_m: u64,
    pub h: u64,
    pub d_ff: u64,
    pub s: u64,
}

impl TransformerParams {
    pub fn new(layers: u64, d_m: u64, h: u64, d_ff: u64, s: u64) -> Result<Self> {
        let p = Self {
            layers,
            d_m,
            h,
            d_ff,
            s,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.layers, self.d_m, self.h, self.d_ff, self.s].contains(&0) {
            return Err(GraphError::InvalidParams(
                "all encoder parameters must be >= 1".into(),
            ));
        }
        if !self.d_m.is_multiple_of(self.h) {
            return Err(GraphError::InvalidParams(format!(
                "hidden size {} not divisible by {} heads",
                self.d_m, self.h
            )));
        }
        Ok(())
    }

    /// Analytic multiply-accumulate count of the whole encoder.
    pub fn macs(&self) -> u64 {
        let (s, d, f) = (self.s, self.d_m, self.d_ff);
        self.layers * (4 * s * d * d + 2 * s * s * d + 2 * s * d * f)
    }
}

struct Builder {
    tensors: Vec<TensorSpec>,
    nodes: Vec<Node>,
}

impl Builder {
    fn new() -> Self {
        Self {
            tensors: Vec::new(),
            nodes: Vec::new(),
        }
    }

    fn tensor(&mut self, name: String, shape: Vec<u64>, dtype: DType, kind: TensorKind) -> String {
        self.tensors
            .push(TensorSpec::new(name.clone(), shape, dtype, kind));
        name
    }

    fn act(&mut self, name: String, dtype: DType) -> String {
        self.tensor(name, Vec::new(), dtype, TensorKind::Activation)
    }

    fn node(&mut self, node: Node) {
        self.nodes.push(node);
    }

    fn op(&mut self, name: &str, op: Op, inputs: &[&str], out: &str) {
        self.nodes.push(Node::new(name, op, inputs, &[out]));
    }

    fn finish(mut self, output: &str) -> Result<Graph> {
        if let Some(t) = self.tensors.iter_mut().find(|t| t.name == output) {
            t.kind = TensorKind::GraphOutput;
        }
        infer_shapes(&Graph::new(self.tensors, self.nodes)?)
    }
}

/// Builds an int8-quantized Transformer encoder.
///
/// Per layer: Q/K/V/output projection GEMMs with constant weights, one
/// QK^T and one attention-times-V MatMul per head (both operands dynamic)
/// with a Softmax in between, a Concat gathering the heads, two
/// feed-forward GEMMs (`d_m -> d_ff -> d_m`, GELU in between), two
/// residual Adds and two LayerNorms. Every linear op is followed by a
/// Requant from int32 back to int8.
pub fn build_transformer_encoder(p: &TransformerParams) -> Result<Graph> {
    p.validate()?;
    let (s, d, h, f) = (p.s, p.d_m, p.h, p.d_ff);
    let mut b = Builder::new();
    let mut x = b.tensor("x".into(), vec![s, d], DType::Int8, TensorKind::GraphInput);

    for l in 0..p.layers {
        let pre = format!("l{l}");
        let projection = |b: &mut Builder, tag: &str, input: &str, k: u64, n: u64| -> String {
            let w = b.tensor(
                format!("{pre}.w{tag}"),
                vec![k, n],
                DType::Int8,
                TensorKind::Weight,
            );
            let acc = b.act(format!("{pre}.{tag}_acc"), DType::Int32);
            let out = b.act(format!("{pre}.{tag}"), DType::Int8);
            b.op(&format!("{pre}.{tag}_gemm"), Op::Gemm, &[input, &w], &acc);
            b.op(&format!("{pre}.{tag}_rq"), Op::Requant, &[&acc], &out);
            out
        };
        let q = projection(&mut b, "q", &x, d, d);
        let k = projection(&mut b, "k", &x, d, d);
        let v = projection(&mut b, "v", &x, d, d);

        let mut heads = Vec::with_capacity(h as usize);
        for j in 0..h {
            let hp = format!("{pre}.h{j}");
            let scores_acc = b.act(format!("{hp}.s_acc"), DType::Int32);
            let scores = b.act(format!("{hp}.s"), DType::Int8);
            let probs = b.act(format!("{hp}.p"), DType::Int8);
            let ctx_acc = b.act(format!("{hp}.o_acc"), DType::Int32);
            let ctx = b.act(format!("{hp}.o"), DType::Int8);
            b.node(
                Node::new(format!("{hp}.qk"), Op::MatMul, &[&q, &k], &[&scores_acc])
                    .with_attr("heads", h as i64)
                    .with_attr("head", j as i64)
                    .with_attr("slice_a", 1)
                    .with_attr("slice_b", 1)
                    .with_attr("transpose_b", 1),
            );
            b.op(&format!("{hp}.qk_rq"), Op::Requant, &[&scores_acc], &scores);
            b.op(&format!("{hp}.softmax"), Op::Softmax, &[&scores], &probs);
            b.node(
                Node::new(format!("{hp}.av"), Op::MatMul, &[&probs, &v], &[&ctx_acc])
                    .with_attr("heads", h as i64)
                    .with_attr("head", j as i64)
                    .with_attr("slice_b", 1),
            );
            b.op(&format!("{hp}.av_rq"), Op::Requant, &[&ctx_acc], &ctx);
            heads.push(ctx);
        }
        let concat = b.act(format!("{pre}.concat"), DType::Int8);
        let head_refs: Vec<&str> = heads.iter().map(String::as_str).collect();
        b.op(&format!("{pre}.concat"), Op::Concat, &head_refs, &concat);

        let o = projection(&mut b, "o", &concat, d, d);
        let res1 = b.act(format!("{pre}.res1"), DType::Int8);
        b.op(&format!("{pre}.add1"), Op::Add, &[&o, &x], &res1);
        let ln1 = b.act(format!("{pre}.ln1"), DType::Int8);
        b.op(&format!("{pre}.ln1"), Op::LayerNorm, &[&res1], &ln1);

        let ff1 = projection(&mut b, "ff1", &ln1, d, f);
        let gelu = b.act(format!("{pre}.gelu"), DType::Int8);
        b.node(
            Node::new(format!("{pre}.gelu"), Op::Activation, &[&ff1], &[&gelu])
                .with_attr("kind", 1),
        );
        let ff2 = projection(&mut b, "ff2", &gelu, f, d);
        let res2 = b.act(format!("{pre}.res2"), DType::Int8);
        b.op(&format!("{pre}.add2"), Op::Add, &[&ff2, &ln1], &res2);
        let ln2 = b.act(format!("{pre}.ln2"), DType::Int8);
        b.op(&format!("{pre}.ln2"), Op::LayerNorm, &[&res2], &ln2);
        x = ln2;
    }
    b.finish(&x)
}

/// One convolution stage of a CNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvDesc {
    pub cout: u64,
    pub kernel: u64,
    #[serde(default = "one")]
    pub stride: u64,
    #[serde(default)]
    pub pad: u64,
    #[serde(default)]
    pub depthwise: bool,
    #[serde(default = "yes")]
    pub relu: bool,
}

fn one() -> u64 {
    1
}

fn yes() -> bool {
    true
}

impl ConvDesc {
    pub fn new(cout: u64, kernel: u64, stride: u64, pad: u64) -> Self {
        Self {
            cout,
            kernel,
            stride,
            pad,
            depthwise: false,
            relu: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnSpec {
    /// Input activation `[C, H, W]`.
    pub input: [u64; 3],
    #[serde(default = "int8")]
    pub dtype: DType,
    pub layers: Vec<ConvDesc>,
}

fn int8() -> DType {
    DType::Int8
}

/// Builds a chain of Conv2D (+Requant, +ReLU) stages.
pub fn build_cnn(spec: &CnnSpec) -> Result<Graph> {
    if spec.layers.is_empty() {
        return Err(GraphError::Empty);
    }
    let mut b = Builder::new();
    let mut x = b.tensor(
        "x".into(),
        spec.input.to_vec(),
        spec.dtype,
        TensorKind::GraphInput,
    );
    let mut channels = spec.input[0];
    for (i, layer) in spec.layers.iter().enumerate() {
        if layer.cout == 0 || layer.kernel == 0 || layer.stride == 0 {
            return Err(GraphError::InvalidParams(format!("layer {i}: zero extent")));
        }
        let (op, wshape, cout) = if layer.depthwise {
            (
                Op::DepthwiseConv2D,
                vec![channels, 1, layer.kernel, layer.kernel],
                channels,
            )
        } else {
            (
                Op::Conv2D,
                vec![layer.cout, channels, layer.kernel, layer.kernel],
                layer.cout,
            )
        };
        let w = b.tensor(format!("c{i}.w"), wshape, spec.dtype, TensorKind::Weight);
        let acc = b.act(format!("c{i}.acc"), DType::Int32);
        b.node(
            Node::new(format!("c{i}.conv"), op, &[&x, &w], &[&acc])
                .with_attr("kernel", layer.kernel as i64)
                .with_attr("stride", layer.stride as i64)
                .with_attr("pad", layer.pad as i64),
        );
        let q = b.act(format!("c{i}.q"), spec.dtype);
        b.op(&format!("c{i}.rq"), Op::Requant, &[&acc], &q);
        x = q;
        if layer.relu {
            let r = b.act(format!("c{i}.relu"), spec.dtype);
            b.node(
                Node::new(format!("c{i}.relu"), Op::Activation, &[&x], &[&r]).with_attr("kind", 0),
            );
            x = r;
        }
        channels = cout;
    }
    b.finish(&x)
}

//! Networks as DAGs of loop-nest layers.
//!
//! Every MAC layer is the seven-deep loop nest over `B, K, C, OX, OY, FX, FY`.
//! Vector layers (LayerNorm, Softmax, elementwise add, activation) reuse the
//! `B, C, OX, OY` bounds and carry no MACs.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dim {
    B,
    K,
    C,
    OX,
    OY,
    FX,
    FY,
}

impl Dim {
    pub const ALL: [Dim; 7] = [Dim::B, Dim::K, Dim::C, Dim::OX, Dim::OY, Dim::FX, Dim::FY];

    pub fn name(self) -> &'static str {
        match self {
            Dim::B => "B",
            Dim::K => "K",
            Dim::C => "C",
            Dim::OX => "OX",
            Dim::OY => "OY",
            Dim::FX => "FX",
            Dim::FY => "FY",
        }
    }

    pub fn parse(s: &str) -> Option<Dim> {
        Dim::ALL.into_iter().find(|d| d.name().eq_ignore_ascii_case(s))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Loop bounds of a layer. Unused dimensions are 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub b: u32,
    pub k: u32,
    pub c: u32,
    pub ox: u32,
    pub oy: u32,
    pub fx: u32,
    pub fy: u32,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { b: 1, k: 1, c: 1, ox: 1, oy: 1, fx: 1, fy: 1 }
    }
}

impl Dims {
    pub fn get(&self, d: Dim) -> u32 {
        match d {
            Dim::B => self.b,
            Dim::K => self.k,
            Dim::C => self.c,
            Dim::OX => self.ox,
            Dim::OY => self.oy,
            Dim::FX => self.fx,
            Dim::FY => self.fy,
        }
    }

    pub fn set(&mut self, d: Dim, v: u32) {
        match d {
            Dim::B => self.b = v,
            Dim::K => self.k = v,
            Dim::C => self.c = v,
            Dim::OX => self.ox = v,
            Dim::OY => self.oy = v,
            Dim::FX => self.fx = v,
            Dim::FY => self.fy = v,
        }
    }

    pub fn product(&self) -> u64 {
        Dim::ALL.iter().map(|&d| self.get(d) as u64).product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2D,
    DWConv2D,
    PWConv,
    GeMM,
    ElementwiseAdd,
    LayerNorm,
    Softmax,
    Activation,
}

impl LayerKind {
    pub const ALL: [LayerKind; 8] = [
        LayerKind::Conv2D,
        LayerKind::DWConv2D,
        LayerKind::PWConv,
        LayerKind::GeMM,
        LayerKind::ElementwiseAdd,
        LayerKind::LayerNorm,
        LayerKind::Softmax,
        LayerKind::Activation,
    ];

    pub fn is_mac(self) -> bool {
        matches!(self, LayerKind::Conv2D | LayerKind::DWConv2D | LayerKind::PWConv | LayerKind::GeMM)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2D => "conv",
            LayerKind::DWConv2D => "dwconv",
            LayerKind::PWConv => "pwconv",
            LayerKind::GeMM => "gemm",
            LayerKind::ElementwiseAdd => "add",
            LayerKind::LayerNorm => "layernorm",
            LayerKind::Softmax => "softmax",
            LayerKind::Activation => "activation",
        }
    }

    pub fn parse(s: &str) -> Option<LayerKind> {
        LayerKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActKind {
    Relu,
    /// Hard sigmoid-gated approximation evaluated on integer codes, see `golden`.
    Gelu,
}

impl ActKind {
    pub fn name(self) -> &'static str {
        match self {
            ActKind::Relu => "relu",
            ActKind::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Option<ActKind> {
        match s {
            "relu" => Some(ActKind::Relu),
            "gelu" => Some(ActKind::Gelu),
            _ => None,
        }
    }
}

/// Per-tensor requantization: `sat8(round_half_away(x * mult / 2^shift))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Requant {
    pub mult: i32,
    pub shift: u8,
}

/// LayerNorm affine parameters. `gamma` is Q8 and already folds in the output
/// scale; `beta` is in output LSBs. Empty vectors mean gamma = 1.0, beta = 0.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct NormParams {
    pub gamma: Vec<i16>,
    pub beta: Vec<i16>,
}

impl NormParams {
    pub fn gamma_at(&self, c: usize) -> i16 {
        self.gamma.get(c).copied().unwrap_or(256)
    }

    pub fn beta_at(&self, c: usize) -> i16 {
        self.beta.get(c).copied().unwrap_or(0)
    }
}

/// Softmax input scaling into the base-2 exponent domain:
/// `z_q8 = round((x - max) * mult / 2^shift)` with `z` in Q8.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SoftmaxParams {
    pub mult: i32,
    pub shift: u8,
}

/// Knots of `2^(-j/16)` in Q16, `j = 0..=16`; softmax interpolates linearly between them.
pub const EXP2_NEG_Q16: [u32; 17] = [
    65536, 62757, 60097, 57549, 55109, 52773, 50535, 48393, 46341, 44376, 42495, 40693, 38968, 37316, 35734, 34219, 32768,
];

/// Newton seeds for `1/sqrt(w)` in Q16 at the midpoints of `w in [i/16, (i+1)/16)`, `i = 4..16`.
pub const RSQRT_SEED_Q16: [u32; 12] = [123576, 111779, 102821, 95721, 89915, 85051, 80899, 77302, 74146, 71347, 68842, 66585];

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum PostOp {
    Activation(ActKind),
    LayerNorm(NormParams),
    Softmax(SoftmaxParams),
    Requantize(Requant),
}

impl PostOp {
    /// True for operators that need the whole channel vector of a pixel.
    pub fn needs_statistics(&self) -> bool {
        matches!(self, PostOp::LayerNorm(_) | PostOp::Softmax(_))
    }

    /// True for operators that leave 8-bit codes behind.
    pub fn narrows(&self) -> bool {
        matches!(self, PostOp::LayerNorm(_) | PostOp::Softmax(_) | PostOp::Requantize(_))
    }
}

/// Operand precisions; fixed by the datapath.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Precision {
    pub input_bits: u32,
    pub weight_bits: u32,
    pub acc_bits: u32,
}

pub const PRECISION: Precision = Precision { input_bits: 8, weight_bits: 8, acc_bits: 32 };

/// The three operands of a loop nest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operand {
    I,
    W,
    O,
}

impl Operand {
    pub const ALL: [Operand; 3] = [Operand::I, Operand::W, Operand::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Operand::I => "I",
            Operand::W => "W",
            Operand::O => "O",
        }
    }
}

/// `{X, Y, C}` shape of an activation tensor; `B` folds into `X` for reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorShape {
    pub b: u32,
    pub x: u32,
    pub y: u32,
    pub c: u32,
}

impl TensorShape {
    pub fn new(b: u32, x: u32, y: u32, c: u32) -> Self {
        TensorShape { b, x, y, c }
    }

    pub fn elements(&self) -> u64 {
        self.b as u64 * self.x as u64 * self.y as u64 * self.c as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub dims: Dims,
    /// `(x, y)` stride.
    pub stride: (u32, u32),
    pub post_ops: Vec<PostOp>,
    /// For GeMM: the second operand is an activation (attention) rather than
    /// static weights. Dynamic weights carry the batch axis.
    pub dynamic_weights: bool,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, dims: Dims) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            dims,
            stride: (1, 1),
            post_ops: Vec::new(),
            dynamic_weights: false,
        }
    }

    pub fn with_stride(mut self, s: u32) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_post_ops(mut self, ops: Vec<PostOp>) -> Self {
        self.post_ops = ops;
        self
    }

    pub fn pw(name: &str, c: u32, k: u32, ox: u32, oy: u32) -> Self {
        LayerSpec::new(name, LayerKind::PWConv, Dims { k, c, ox, oy, ..Dims::default() })
    }

    pub fn dw(name: &str, c: u32, f: u32, ox: u32, oy: u32) -> Self {
        LayerSpec::new(name, LayerKind::DWConv2D, Dims { k: c, c, ox, oy, fx: f, fy: f, ..Dims::default() })
    }

    pub fn conv(name: &str, c: u32, k: u32, f: u32, ox: u32, oy: u32) -> Self {
        LayerSpec::new(name, LayerKind::Conv2D, Dims { k, c, ox, oy, fx: f, fy: f, ..Dims::default() })
    }

    pub fn gemm(name: &str, b: u32, m: u32, c: u32, k: u32) -> Self {
        LayerSpec::new(name, LayerKind::GeMM, Dims { b, k, c, ox: m, ..Dims::default() })
    }

    pub fn vector(name: &str, kind: LayerKind, c: u32, ox: u32, oy: u32) -> Self {
        LayerSpec::new(name, kind, Dims { k: c, c, ox, oy, ..Dims::default() })
    }

    pub fn is_dw(&self) -> bool {
        self.kind == LayerKind::DWConv2D
    }

    /// Bound of dimension `d` as seen by the loop nest. Depthwise layers run
    /// the channel loop once (`K` collapses onto `C`).
    pub fn loop_bound(&self, d: Dim) -> u32 {
        if self.kind == LayerKind::DWConv2D && d == Dim::K {
            1
        } else {
            self.dims.get(d)
        }
    }

    /// Zero padding per axis: "same" for unit stride, none for strided layers.
    pub fn padding(&self) -> (u32, u32) {
        let p = |f: u32, s: u32| if s == 1 { (f - 1) / 2 } else { 0 };
        (p(self.dims.fx, self.stride.0), p(self.dims.fy, self.stride.1))
    }

    /// Output channels (the channel vector post-ops see).
    pub fn out_channels(&self) -> u32 {
        match self.kind {
            LayerKind::Conv2D | LayerKind::PWConv | LayerKind::GeMM => self.dims.k,
            _ => self.dims.c,
        }
    }

    pub fn output_shape(&self) -> TensorShape {
        TensorShape::new(self.dims.b, self.dims.ox, self.dims.oy, self.out_channels())
    }

    pub fn input_shape(&self) -> TensorShape {
        let d = &self.dims;
        match self.kind {
            LayerKind::Conv2D | LayerKind::DWConv2D => {
                let (px, py) = self.padding();
                let ix = (d.ox - 1) * self.stride.0 + d.fx - 2 * px;
                let iy = (d.oy - 1) * self.stride.1 + d.fy - 2 * py;
                TensorShape::new(d.b, ix, iy, d.c)
            }
            _ => TensorShape::new(d.b, d.ox, d.oy, d.c),
        }
    }

    /// Shape in which the layer reads operand `op`.
    pub fn operand_shape(&self, op: Operand) -> TensorShape {
        let d = self.dims;
        match op {
            Operand::I => self.input_shape(),
            Operand::W => TensorShape::new(if self.dynamic_weights { d.b } else { 1 }, d.k, 1, d.c),
            Operand::O => self.output_shape(),
        }
    }

    /// Number of weight elements (or second-operand elements for dynamic GeMM).
    pub fn weight_elements(&self) -> u64 {
        let d = &self.dims;
        match self.kind {
            LayerKind::Conv2D => d.k as u64 * d.c as u64 * d.fx as u64 * d.fy as u64,
            LayerKind::DWConv2D => d.c as u64 * d.fx as u64 * d.fy as u64,
            LayerKind::PWConv => d.k as u64 * d.c as u64,
            LayerKind::GeMM => {
                let b = if self.dynamic_weights { d.b as u64 } else { 1 };
                b * d.k as u64 * d.c as u64
            }
            LayerKind::ElementwiseAdd => self.output_shape().elements(),
            _ => 0,
        }
    }

    /// Bytes per output element after the post-op chain.
    pub fn output_bytes_per_element(&self) -> u32 {
        if !self.kind.is_mac() || self.post_ops.iter().any(|p| p.narrows()) {
            1
        } else {
            4
        }
    }

    pub fn has_fused_statistics(&self) -> bool {
        self.post_ops.iter().any(|p| p.needs_statistics())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |what: String| Err(Error::Invariant { layer: self.name.clone(), what });
        for dim in Dim::ALL {
            if self.dims.get(dim) == 0 {
                return fail(format!("dimension {dim} must be >= 1"));
            }
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return fail("stride must be >= 1".to_string());
        }
        let d = &self.dims;
        match self.kind {
            LayerKind::DWConv2D => {
                if d.k != d.c {
                    return fail(format!("DWConv2D requires K = C (K={}, C={})", d.k, d.c));
                }
            }
            LayerKind::PWConv => {
                if d.fx != 1 || d.fy != 1 {
                    return fail("PWConv requires FX = FY = 1".to_string());
                }
                if self.stride != (1, 1) {
                    return fail("PWConv requires unit stride".to_string());
                }
            }
            LayerKind::GeMM => {
                if d.fx != 1 || d.fy != 1 || d.oy != 1 {
                    return fail("GeMM requires FX = FY = OY = 1".to_string());
                }
            }
            LayerKind::Conv2D => {}
            _ => {
                if d.fx != 1 || d.fy != 1 || d.k != d.c {
                    return fail("vector layers require FX = FY = 1 and K = C".to_string());
                }
            }
        }
        if let Some(PostOp::Requantize(r)) = self.post_ops.iter().find(|p| matches!(p, PostOp::Requantize(r) if r.shift > 31)) {
            return fail(format!("requantize shift {} exceeds 31", r.shift));
        }
        if self.dynamic_weights && self.kind != LayerKind::GeMM {
            return fail("dynamic weights are only defined for GeMM".to_string());
        }
        Ok(())
    }
}

/// Closed-form MAC count of a layer; zero for vector layers.
pub fn layer_macs(layer: &LayerSpec) -> u64 {
    let d = &layer.dims;
    match layer.kind {
        LayerKind::Conv2D | LayerKind::PWConv | LayerKind::GeMM => d.product(),
        LayerKind::DWConv2D => {
            d.b as u64 * d.c as u64 * d.ox as u64 * d.oy as u64 * d.fx as u64 * d.fy as u64
        }
        _ => 0,
    }
}

/// Elementwise work of a vector layer (elements streamed through the
/// post-processing engine).
pub fn layer_vector_ops(layer: &LayerSpec) -> u64 {
    if layer.kind.is_mac() {
        0
    } else {
        layer.output_shape().elements()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockTag {
    DS,
    CNN,
    ViT,
    IB,
    Head,
}

impl BlockTag {
    pub fn name(self) -> &'static str {
        match self {
            BlockTag::DS => "DS",
            BlockTag::CNN => "CNN",
            BlockTag::ViT => "ViT",
            BlockTag::IB => "IB",
            BlockTag::Head => "Head",
        }
    }

    pub fn parse(s: &str) -> Option<BlockTag> {
        [BlockTag::DS, BlockTag::CNN, BlockTag::ViT, BlockTag::IB, BlockTag::Head]
            .into_iter()
            .find(|t| t.name() == s)
    }
}

/// Producer -> consumer tensor link. `view` edges feed a slice or reshape of
/// the producer output (channel splits, attention heads).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub operand: Operand,
    pub shape: TensorShape,
    pub bits: u32,
    pub view: bool,
}

impl Edge {
    pub fn bytes(&self) -> u64 {
        self.shape.elements() * self.bits as u64 / 8
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Node {
    pub layer: LayerSpec,
    pub tag: BlockTag,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct NetworkGraph {
    pub name: String,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

/// An inverted-bottleneck pair located in a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IbPair {
    pub expand: usize,
    pub project: usize,
}

impl NetworkGraph {
    pub fn new(name: impl Into<String>) -> Self {
        NetworkGraph { name: name.into(), ..Default::default() }
    }

    pub fn add(&mut self, layer: LayerSpec, tag: BlockTag) -> usize {
        self.nodes.push(Node { layer, tag });
        self.nodes.len() - 1
    }

    /// Link `from`'s output to operand `operand` of `to`.
    pub fn connect(&mut self, from: usize, to: usize, operand: Operand, view: bool) {
        let p = &self.nodes[from].layer;
        let shape = p.output_shape();
        let bits = p.output_bytes_per_element() * 8;
        self.edges.push(Edge { from, to, operand, shape, bits, view });
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.layer.name == name)
    }

    pub fn consumers(&self, node: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.from == node)
    }

    pub fn producers(&self, node: usize) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.to == node)
    }

    /// Recompute edge shapes from the producers (after post-op rewrites).
    pub fn refresh_edges(&mut self) {
        for e in &mut self.edges {
            let p = &self.nodes[e.from].layer;
            e.shape = p.output_shape();
            e.bits = p.output_bytes_per_element() * 8;
        }
    }

    pub fn total_macs(&self) -> u64 {
        self.nodes.iter().map(|n| layer_macs(&n.layer)).sum()
    }

    /// Inverted-bottleneck pairs: an IB-tagged PW whose single consumer is an
    /// IB-tagged PW projecting back to its input width.
    pub fn ib_pairs(&self) -> Vec<IbPair> {
        let mut out = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.tag != BlockTag::IB || n.layer.kind != LayerKind::PWConv {
                continue;
            }
            let cons: Vec<&Edge> = self.consumers(i).collect();
            if cons.len() != 1 {
                continue;
            }
            let j = cons[0].to;
            let m = &self.nodes[j];
            if m.tag == BlockTag::IB && m.layer.kind == LayerKind::PWConv && m.layer.dims.c == n.layer.dims.k {
                out.push(IbPair { expand: i, project: j });
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = alloc::collections::BTreeSet::new();
        for n in &self.nodes {
            n.layer.validate()?;
            if !names.insert(n.layer.name.as_str()) {
                return Err(Error::Invariant { layer: n.layer.name.clone(), what: "duplicate layer name".into() });
            }
        }
        for e in &self.edges {
            if e.from >= self.nodes.len() || e.to >= self.nodes.len() {
                return Err(Error::Config(format!("edge {}->{} references a missing node", e.from, e.to)));
            }
            let cons = &self.nodes[e.to].layer;
            if e.from >= e.to {
                return Err(Error::Invariant {
                    layer: cons.name.clone(),
                    what: "graph must be acyclic with producers listed before consumers".into(),
                });
            }
            let prod = &self.nodes[e.from].layer;
            if e.shape != prod.output_shape() || e.bits != prod.output_bytes_per_element() * 8 {
                return Err(Error::Invariant {
                    layer: cons.name.clone(),
                    what: format!("edge from `{}` does not match producer output", prod.name),
                });
            }
            if e.operand == Operand::O {
                return Err(Error::Invariant { layer: cons.name.clone(), what: "edges cannot feed an output".into() });
            }
            let need = cons.operand_shape(e.operand);
            if !e.view && need != e.shape {
                return Err(Error::Invariant {
                    layer: cons.name.clone(),
                    what: format!(
                        "input from `{}` has shape {}x{}x{}x{}, layer expects {}x{}x{}x{}",
                        prod.name, e.shape.b, e.shape.x, e.shape.y, e.shape.c, need.b, need.x, need.y, need.c
                    ),
                });
            }
        }
        // View edges (slices, concatenations, reshapes) must jointly cover the operand.
        for (to, n) in self.nodes.iter().enumerate() {
            for op in [Operand::I, Operand::W] {
                let views: Vec<&Edge> = self.producers(to).filter(|e| e.operand == op && e.view).collect();
                if views.is_empty() {
                    continue;
                }
                let have: u64 = views.iter().map(|e| e.shape.elements()).sum();
                if have < n.layer.operand_shape(op).elements() {
                    return Err(Error::Invariant {
                        layer: n.layer.name.clone(),
                        what: format!("view inputs cover {have} elements, operand {} needs more", op.name()),
                    });
                }
            }
        }
        // Every IB-tagged node belongs to exactly one expand/project pair.
        let pairs = self.ib_pairs();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.tag == BlockTag::IB && !pairs.iter().any(|p| p.expand == i || p.project == i) {
                return Err(Error::Invariant {
                    layer: n.layer.name.clone(),
                    what: "IB tag must cover a PW(expand) -> activation -> PW(project) pair".into(),
                });
            }
        }
        for p in &pairs {
            let has_act = self.nodes[p.expand].layer.post_ops.iter().any(|o| matches!(o, PostOp::Activation(_)));
            if !has_act {
                return Err(Error::Invariant {
                    layer: self.nodes[p.expand].layer.name.clone(),
                    what: "IB expand layer must carry the activation".into(),
                });
            }
        }
        Ok(())
    }

    /// Fold every standalone LayerNorm / Softmax into the post-op chain of its
    /// MAC producer when that producer has no other consumer.
    pub fn fuse_normalization(&self) -> NetworkGraph {
        let mut g = self.clone();
        let mut removed = vec![false; g.nodes.len()];
        for i in 0..g.nodes.len() {
            let kind = g.nodes[i].layer.kind;
            if !matches!(kind, LayerKind::LayerNorm | LayerKind::Softmax) {
                continue;
            }
            let prods: Vec<usize> = g.producers(i).map(|e| e.from).collect();
            if prods.len() != 1 {
                continue;
            }
            let p = prods[0];
            if removed[p] || !g.nodes[p].layer.kind.is_mac() || g.consumers(p).count() != 1 {
                continue;
            }
            let op = match &g.nodes[i].layer.post_ops.first() {
                Some(op @ (PostOp::LayerNorm(_) | PostOp::Softmax(_))) => (*op).clone(),
                _ => continue,
            };
            // Drop the producer's narrowing requantize; the statistics op narrows.
            let prod = &mut g.nodes[p].layer;
            if matches!(prod.post_ops.last(), Some(PostOp::Requantize(_))) {
                prod.post_ops.pop();
            }
            prod.post_ops.push(op);
            removed[i] = true;
            // Re-wire consumers of the norm layer to the producer.
            for e in g.edges.iter_mut() {
                if e.from == i {
                    e.from = p;
                }
            }
            g.edges.retain(|e| !(e.from == p && e.to == i));
        }
        g.compact(&removed)
    }

    fn compact(mut self, removed: &[bool]) -> NetworkGraph {
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::new();
        for (i, n) in self.nodes.drain(..).enumerate() {
            if !removed[i] {
                remap[i] = nodes.len();
                nodes.push(n);
            }
        }
        self.nodes = nodes;
        for e in &mut self.edges {
            e.from = remap[e.from];
            e.to = remap[e.to];
        }
        self.refresh_edges();
        self
    }
}

/// Shape parameters of the EdgeNeXt family builder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeNextConfig {
    pub resolution: u32,
    pub channels: [u32; 4],
    pub depths: [u32; 4],
    pub kernels: [u32; 4],
    /// Number of trailing blocks per stage that are transposed-attention blocks.
    pub global_blocks: [u32; 4],
    pub scales: [u32; 4],
    pub heads: u32,
    pub expansion: u32,
    pub classes: u32,
}

impl EdgeNextConfig {
    /// EdgeNeXt-S at 256x256.
    pub fn small() -> Self {
        EdgeNextConfig {
            resolution: 256,
            channels: [48, 96, 160, 304],
            depths: [3, 3, 9, 3],
            kernels: [3, 5, 7, 9],
            global_blocks: [0, 1, 1, 1],
            scales: [2, 2, 3, 4],
            heads: 8,
            expansion: 4,
            classes: 1000,
        }
    }
}

pub const EDGENEXT_S_CHANNELS: [u32; 4] = [48, 96, 160, 304];

/// Build the EdgeNeXt-S topology at `resolution` with the given stage widths.
pub fn build_edgenext_s(resolution: u32, stage_channels: &[u32]) -> Result<NetworkGraph> {
    let channels: [u32; 4] = stage_channels
        .try_into()
        .map_err(|_| Error::Config(format!("expected 4 stage channel widths, got {}", stage_channels.len())))?;
    build_edgenext(&EdgeNextConfig { resolution, channels, ..EdgeNextConfig::small() })
}

fn default_requant(reduction: u64) -> PostOp {
    // Keeps random int8 products inside the int8 output range on average.
    let mut shift = 6u8;
    let mut r = reduction;
    while r > 1 {
        r >>= 2;
        shift += 1;
    }
    PostOp::Requantize(Requant { mult: 1, shift: shift.min(31) })
}

fn mac_layer(mut l: LayerSpec, extra: &[PostOp]) -> LayerSpec {
    let red = l.dims.c as u64 * l.dims.fx as u64 * l.dims.fy as u64 / if l.is_dw() { l.dims.c as u64 } else { 1 };
    l.post_ops.push(default_requant(red));
    l.post_ops.extend_from_slice(extra);
    l
}

pub fn build_edgenext(cfg: &EdgeNextConfig) -> Result<NetworkGraph> {
    if cfg.resolution == 0 || !cfg.resolution.is_multiple_of(32) {
        return Err(Error::Config(format!(
            "resolution {} is not divisible by the total downsampling factor 32",
            cfg.resolution
        )));
    }
    if cfg.channels.contains(&0) {
        return Err(Error::Config("stage channels must be positive".into()));
    }
    for s in 1..4 {
        if cfg.global_blocks[s] > 0 && !cfg.channels[s].is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "stage {s} width {} is not divisible by {} heads",
                cfg.channels[s], cfg.heads
            )));
        }
    }
    let mut g = NetworkGraph::new("edgenext_s");
    let ln = |name: String, c: u32, x: u32, y: u32| {
        LayerSpec::vector(&name, LayerKind::LayerNorm, c, x, y).with_post_ops(vec![PostOp::LayerNorm(NormParams::default())])
    };

    // Stem: 4x4 stride-4 conv + LayerNorm.
    let mut x = cfg.resolution / 4;
    let c0 = cfg.channels[0];
    let stem = g.add(mac_layer(LayerSpec::conv("stem.conv", 3, c0, 4, x, x).with_stride(4), &[]), BlockTag::DS);
    let stem_ln = g.add(ln("stem.ln".into(), c0, x, x), BlockTag::DS);
    g.connect(stem, stem_ln, Operand::I, false);
    let mut cur = stem_ln;

    for s in 0..4 {
        let c = cfg.channels[s];
        if s > 0 {
            let cp = cfg.channels[s - 1];
            let l = g.add(ln(format!("ds{s}.ln"), cp, x, x), BlockTag::DS);
            g.connect(cur, l, Operand::I, false);
            x /= 2;
            let conv = g.add(mac_layer(LayerSpec::conv(&format!("ds{s}.conv"), cp, c, 2, x, x).with_stride(2), &[]), BlockTag::DS);
            g.connect(l, conv, Operand::I, false);
            cur = conv;
        }
        let depth = cfg.depths[s];
        let global = cfg.global_blocks[s].min(depth);
        for b in 0..depth {
            let p = format!("s{s}.b{b}");
            if b < depth - global {
                cur = conv_encoder(&mut g, &p, cur, c, cfg.kernels[s], x, cfg.expansion);
            } else {
                cur = sdta_encoder(&mut g, &p, cur, c, x, cfg.scales[s], cfg.heads, cfg.expansion);
            }
        }
    }

    // Head: global average pool (8x8 depthwise window), LayerNorm, classifier.
    let c = cfg.channels[3];
    let pool = g.add(
        mac_layer(
            LayerSpec::new("head.pool", LayerKind::DWConv2D, Dims { k: c, c, fx: x, fy: x, ..Dims::default() })
                .with_stride(x.max(1)),
            &[],
        ),
        BlockTag::Head,
    );
    g.connect(cur, pool, Operand::I, false);
    let hln = g.add(ln("head.ln".into(), c, 1, 1), BlockTag::Head);
    g.connect(pool, hln, Operand::I, false);
    let fc = g.add(mac_layer(LayerSpec::gemm("head.fc", 1, 1, c, cfg.classes), &[]), BlockTag::Head);
    g.connect(hln, fc, Operand::I, false);
    g.validate()?;
    Ok(g)
}

fn inverted_bottleneck(g: &mut NetworkGraph, p: &str, input: usize, c: u32, x: u32, expansion: u32) -> usize {
    let ct = c * expansion;
    let e = g.add(mac_layer(LayerSpec::pw(&format!("{p}.pw1"), c, ct, x, x), &[PostOp::Activation(ActKind::Gelu)]), BlockTag::IB);
    g.connect(input, e, Operand::I, false);
    let pj = g.add(mac_layer(LayerSpec::pw(&format!("{p}.pw2"), ct, c, x, x), &[]), BlockTag::IB);
    g.connect(e, pj, Operand::I, false);
    pj
}

fn residual(g: &mut NetworkGraph, name: String, tag: BlockTag, a: usize, b: usize, c: u32, x: u32) -> usize {
    let add = g.add(
        LayerSpec::vector(&name, LayerKind::ElementwiseAdd, c, x, x)
            .with_post_ops(vec![PostOp::Requantize(Requant { mult: 1, shift: 1 })]),
        tag,
    );
    g.connect(a, add, Operand::I, false);
    g.connect(b, add, Operand::I, false);
    add
}

fn conv_encoder(g: &mut NetworkGraph, p: &str, input: usize, c: u32, k: u32, x: u32, expansion: u32) -> usize {
    let dw = g.add(mac_layer(LayerSpec::dw(&format!("{p}.dw"), c, k, x, x), &[]), BlockTag::CNN);
    g.connect(input, dw, Operand::I, false);
    let l = g.add(
        LayerSpec::vector(&format!("{p}.ln"), LayerKind::LayerNorm, c, x, x)
            .with_post_ops(vec![PostOp::LayerNorm(NormParams::default())]),
        BlockTag::CNN,
    );
    g.connect(dw, l, Operand::I, false);
    let ib = inverted_bottleneck(g, p, l, c, x, expansion);
    residual(g, format!("{p}.add"), BlockTag::CNN, input, ib, c, x)
}

#[allow(clippy::too_many_arguments)]
fn sdta_encoder(g: &mut NetworkGraph, p: &str, input: usize, c: u32, x: u32, scales: u32, heads: u32, expansion: u32) -> usize {
    let n = x * x;
    // Multi-scale depthwise split: ceil(C/scales) wide chunks, scales-1 convs.
    let width = c.div_ceil(scales);
    let nums = if scales == 1 { 1 } else { scales - 1 };
    let mut prev: Option<usize> = None;
    let mut chunks = Vec::new();
    for i in 0..nums {
        let src = match prev {
            None => input,
            Some(pv) => {
                let a = g.add(
                    LayerSpec::vector(&format!("{p}.split{i}.add"), LayerKind::ElementwiseAdd, width, x, x)
                        .with_post_ops(vec![PostOp::Requantize(Requant { mult: 1, shift: 1 })]),
                    BlockTag::ViT,
                );
                g.connect(pv, a, Operand::I, false);
                g.connect(input, a, Operand::I, true);
                a
            }
        };
        let dw = g.add(mac_layer(LayerSpec::dw(&format!("{p}.split{i}.dw"), width, 3, x, x), &[]), BlockTag::ViT);
        g.connect(src, dw, Operand::I, prev.is_none());
        prev = Some(dw);
        chunks.push(dw);
    }
    // Cross-covariance (transposed) attention over channels.
    let norm = g.add(
        LayerSpec::vector(&format!("{p}.xca.ln"), LayerKind::LayerNorm, c, x, x)
            .with_post_ops(vec![PostOp::LayerNorm(NormParams::default())]),
        BlockTag::ViT,
    );
    // Concatenation of the processed chunks and the untouched tail.
    for &dw in &chunks {
        g.connect(dw, norm, Operand::I, true);
    }
    g.connect(input, norm, Operand::I, true);
    let qkv = g.add(mac_layer(LayerSpec::gemm(&format!("{p}.xca.qkv"), 1, n, c, 3 * c), &[]), BlockTag::ViT);
    g.connect(norm, qkv, Operand::I, true);
    let d = c / heads;
    let mut qk = LayerSpec::gemm(&format!("{p}.xca.qk"), heads, d, n, d);
    qk.dynamic_weights = true;
    let qk = g.add(mac_layer(qk, &[]), BlockTag::ViT);
    g.connect(qkv, qk, Operand::I, true);
    g.connect(qkv, qk, Operand::W, true);
    let sm = g.add(
        LayerSpec::vector(&format!("{p}.xca.softmax"), LayerKind::Softmax, d, d, 1)
            .with_post_ops(vec![PostOp::Softmax(SoftmaxParams { mult: 1, shift: 0 })]),
        BlockTag::ViT,
    );
    // Softmax runs over every head; batch dimension carries the heads.
    g.nodes[sm].layer.dims.b = heads;
    g.connect(qk, sm, Operand::I, false);
    let mut av = LayerSpec::gemm(&format!("{p}.xca.av"), heads, n, d, d);
    av.dynamic_weights = true;
    let av = g.add(mac_layer(av, &[]), BlockTag::ViT);
    g.connect(qkv, av, Operand::I, true);
    g.connect(sm, av, Operand::W, true);
    let proj = g.add(mac_layer(LayerSpec::gemm(&format!("{p}.xca.proj"), 1, n, c, c), &[]), BlockTag::ViT);
    g.connect(av, proj, Operand::I, true);
    let r1 = residual(g, format!("{p}.xca.add"), BlockTag::ViT, input, proj, c, x);
    // proj emits x*x tokens as a GeMM; the residual reads it as an x by x map.
    let idx = g.edges.len() - 1;
    g.edges[idx].view = true;
    let l2 = g.add(
        LayerSpec::vector(&format!("{p}.ln"), LayerKind::LayerNorm, c, x, x)
            .with_post_ops(vec![PostOp::LayerNorm(NormParams::default())]),
        BlockTag::ViT,
    );
    g.connect(r1, l2, Operand::I, false);
    let ib = inverted_bottleneck(g, p, l2, c, x, expansion);
    residual(g, format!("{p}.add"), BlockTag::ViT, r1, ib, c, x)
}

/// Frozen total of the closed-form counts over the default EdgeNeXt-S graph.
pub const EDGENEXT_S_MACS: u64 = 1_246_962_816;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mac_counts_closed_form() {
        assert_eq!(layer_macs(&LayerSpec::pw("pw", 96, 192, 14, 14)), 3_612_672);
        assert_eq!(layer_macs(&LayerSpec::dw("dw", 96, 3, 56, 56)), 2_709_504);
        assert_eq!(layer_macs(&LayerSpec::vector("ln", LayerKind::LayerNorm, 192, 14, 14)), 0);
    }

    #[test]
    fn dw_requires_k_equals_c() {
        let mut l = LayerSpec::dw("dw", 16, 3, 8, 8);
        l.dims.k = 8;
        let err = l.validate().unwrap_err();
        assert!(alloc::format!("{err}").contains("K = C"));
    }

    #[test]
    fn resolution_must_divide_by_32() {
        assert!(matches!(build_edgenext_s(250, &EDGENEXT_S_CHANNELS), Err(Error::Config(_))));
    }

    #[test]
    fn miniature_graph_is_valid() {
        let g = build_edgenext_s(32, &[4, 8, 16, 32]).unwrap();
        g.validate().unwrap();
        let full = build_edgenext_s(256, &EDGENEXT_S_CHANNELS).unwrap();
        assert_eq!(g.nodes.len(), full.nodes.len());
        assert_eq!(g.ib_pairs().len(), full.ib_pairs().len());
    }

    #[test]
    fn edgenext_s_mac_total() {
        let g = build_edgenext_s(256, &EDGENEXT_S_CHANNELS).unwrap();
        // Sum of per-layer closed forms over the pinned topology.
        assert_eq!(g.total_macs(), EDGENEXT_S_MACS);
        let gm = g.total_macs() as f64 / 1e9;
        assert!((gm - 1.26).abs() < 0.06, "{gm}");
        assert_eq!(g.ib_pairs().len(), 18);
    }

    #[test]
    fn strided_input_shapes() {
        let l = LayerSpec::conv("stem", 3, 48, 4, 64, 64).with_stride(4);
        assert_eq!(l.input_shape(), TensorShape::new(1, 256, 256, 3));
        let d = LayerSpec::dw("dw", 48, 7, 16, 16);
        assert_eq!(d.input_shape(), TensorShape::new(1, 16, 16, 48));
    }

    #[test]
    fn normalization_fusion_folds_into_dw() {
        let g = build_edgenext_s(32, &[4, 8, 16, 32]).unwrap();
        let f = g.fuse_normalization();
        f.validate().unwrap();
        assert!(f.nodes.len() < g.nodes.len());
        let dw = &f.nodes[f.find("s0.b0.dw").unwrap()].layer;
        assert!(dw.has_fused_statistics());
        assert_eq!(f.total_macs(), g.total_macs());
    }
}

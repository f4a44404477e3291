//! Model representation: a stem segment, an ordered list of blocks and a head
//! segment. Each segment is a small DAG of layer nodes in topological order.

mod checkpoint;
mod forward;
mod init;
mod shape;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, ParamEntry};
pub use forward::{apply_bn_updates, eval_segment, predict, BnUpdate, Ctx, Mode};
pub use init::{init_params, materialize_params, Init, ParamSpec};
pub use shape::{count_params, FlopsReport, ModelShapes};

use serde::{Deserialize, Serialize};
use updp_tensor::{Activation, Conv2dGeom};

use crate::error::{Error, Result};

pub type Shape = Vec<usize>;

/// Where a node reads from: the segment input or an earlier node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Src {
    Input,
    Node(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn square(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, groups: usize, bias: bool) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel: [k, k],
            stride: [stride, stride],
            padding: [pad, pad],
            groups,
            bias,
        }
    }

    pub fn geom(&self) -> Conv2dGeom {
        Conv2dGeom {
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.cin && self.cin == self.cout
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1]
    }

    pub fn weight_shape(&self) -> Shape {
        vec![self.cout, self.cin / self.groups, self.kernel[0], self.kernel[1]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerKind {
    Conv(ConvSpec),
    Linear { cin: usize, cout: usize, bias: bool },
    BatchNorm { channels: usize, eps: f64, momentum: f64 },
    LayerNorm { channels: usize, eps: f64 },
    GroupNorm { channels: usize, groups: usize, eps: f64 },
    Activation { act: Activation },
    /// Elementwise sum; inputs are `[main, skip]`.
    Add,
    /// Constant padding with a stored per-channel fill.
    Pad { channels: usize, padding: [usize; 2] },
    MaxPool { kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool,
    Flatten,
    /// `[C, H, W] → [H·W, C]`
    ToTokens,
    /// Prepends a class token and adds position embeddings; `tokens` excludes the class token.
    ClassToken { dim: usize, tokens: usize },
    SelectToken,
    /// Token mixing over a fused `[q | k | v]` projection.
    Attention { dim: usize, heads: usize },
    /// Per-channel learned scale.
    LayerScale { channels: usize, init: f64 },
    /// Fixed additive `[C, H, W]` map.
    PositionBias { shape: [usize; 3] },
}

impl LayerKind {
    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Add => 2,
            _ => 1,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::Linear { .. } => "linear",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::LayerNorm { .. } => "layernorm",
            LayerKind::GroupNorm { .. } => "groupnorm",
            LayerKind::Activation { .. } => "activation",
            LayerKind::Add => "add",
            LayerKind::Pad { .. } => "pad",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::GlobalAvgPool => "pool",
            LayerKind::Flatten => "flatten",
            LayerKind::ToTokens => "to_tokens",
            LayerKind::ClassToken { .. } => "class_token",
            LayerKind::SelectToken => "select_token",
            LayerKind::Attention { .. } => "attention",
            LayerKind::LayerScale { .. } => "layer_scale",
            LayerKind::PositionBias { .. } => "position_bias",
        }
    }

    pub fn activation(&self) -> Option<Activation> {
        match self {
            LayerKind::Activation { act } => Some(*act),
            _ => None,
        }
    }

    pub fn is_nonidentity_activation(&self) -> bool {
        matches!(self.activation(), Some(a) if !a.is_identity())
    }
}

/// Initialization recipe for a node whose parameters are derived from another node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Derive {
    /// Copy the centered crop of the source conv's kernel (and its bias).
    CenterCrop { from: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<Src>,
    /// Prefix of this node's parameter names. Nodes sharing a key share storage.
    pub param_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derive: Option<Derive>,
}

impl LayerNode {
    pub fn param(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.param_key)
    }

    pub fn conv(&self) -> Option<&ConvSpec> {
        match &self.kind {
            LayerKind::Conv(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub nodes: Vec<LayerNode>,
    pub output: Src,
}

impl Segment {
    pub fn empty() -> Self {
        Segment {
            nodes: Vec::new(),
            output: Src::Input,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.inputs.len() != node.kind.arity() {
                return Err(Error::Graph(format!(
                    "`{}` ({}) takes {} inputs, has {}",
                    node.name,
                    node.kind.tag(),
                    node.kind.arity(),
                    node.inputs.len()
                )));
            }
            for src in &node.inputs {
                if let Src::Node(j) = src {
                    if *j >= i {
                        return Err(Error::Graph(format!("`{}` reads node {j}, breaking topological order", node.name)));
                    }
                }
            }
            if let LayerKind::Conv(c) = &node.kind {
                if c.groups == 0 || c.cin % c.groups != 0 || c.cout % c.groups != 0 {
                    return Err(Error::Graph(format!(
                        "`{}`: groups {} must divide {} and {}",
                        node.name, c.groups, c.cin, c.cout
                    )));
                }
            }
        }
        if let Src::Node(j) = self.output {
            if j >= self.nodes.len() {
                return Err(Error::Graph(format!("segment output refers to missing node {j}")));
            }
        }
        Ok(())
    }

    pub fn node(&self, name: &str) -> Option<(usize, &LayerNode)> {
        self.nodes.iter().enumerate().find(|(_, n)| n.name == name)
    }

    /// Indices of nodes that feed the output (directly or transitively).
    pub fn live_nodes(&self) -> Vec<bool> {
        let mut live = vec![false; self.nodes.len()];
        if let Src::Node(j) = self.output {
            live[j] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if live[i] {
                for src in &self.nodes[i].inputs {
                    if let Src::Node(j) = src {
                        live[*j] = true;
                    }
                }
            }
        }
        live
    }

    /// Indices of nodes that read `src`.
    pub fn consumers(&self, src: Src) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.contains(&src))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Appends nodes to a segment, naming parameters `{prefix}.{node}`.
pub struct SegmentBuilder {
    prefix: String,
    nodes: Vec<LayerNode>,
}

impl SegmentBuilder {
    pub fn new(prefix: impl Into<String>) -> Self {
        SegmentBuilder {
            prefix: prefix.into(),
            nodes: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, kind: LayerKind, inputs: Vec<Src>) -> Src {
        let param_key = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.push_keyed(name, kind, inputs, param_key)
    }

    pub fn push_keyed(&mut self, name: &str, kind: LayerKind, inputs: Vec<Src>, param_key: String) -> Src {
        self.nodes.push(LayerNode {
            name: name.to_string(),
            kind,
            inputs,
            param_key,
            derive: None,
        });
        Src::Node(self.nodes.len() - 1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, name: &str, x: Src, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, groups: usize, bias: bool) -> Src {
        self.push(name, LayerKind::Conv(ConvSpec::square(cin, cout, k, stride, pad, groups, bias)), vec![x])
    }

    pub fn linear(&mut self, name: &str, x: Src, cin: usize, cout: usize) -> Src {
        self.push(name, LayerKind::Linear { cin, cout, bias: true }, vec![x])
    }

    pub fn bn(&mut self, name: &str, x: Src, channels: usize) -> Src {
        self.push(
            name,
            LayerKind::BatchNorm {
                channels,
                eps: BN_EPS,
                momentum: BN_MOMENTUM,
            },
            vec![x],
        )
    }

    pub fn ln(&mut self, name: &str, x: Src, channels: usize) -> Src {
        self.push(name, LayerKind::LayerNorm { channels, eps: LN_EPS }, vec![x])
    }

    pub fn act(&mut self, name: &str, x: Src, act: Activation) -> Src {
        self.push(name, LayerKind::Activation { act }, vec![x])
    }

    pub fn add(&mut self, name: &str, main: Src, skip: Src) -> Src {
        self.push(name, LayerKind::Add, vec![main, skip])
    }

    pub fn simple(&mut self, name: &str, kind: LayerKind, x: Src) -> Src {
        self.push(name, kind, vec![x])
    }

    pub fn finish(self, output: Src) -> Segment {
        Segment {
            nodes: self.nodes,
            output,
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    BasicResidual,
    InvertedResidual,
    ConvNeXt,
    Transformer,
    /// Non-residual stage transition (e.g. a downsampling layer).
    Transition,
    /// A block produced by merging.
    Merged,
}

/// Residual shortcut of a block, derived from its final addition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Skip {
    None,
    Identity,
    Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub kind: BlockKind,
    pub prunable: bool,
    /// Set on blocks produced by `make_pruned_block`.
    #[serde(default)]
    pub pruned: bool,
    pub body: Segment,
}

impl BlockSpec {
    /// Index of the last residual addition in the body.
    pub fn final_add(&self) -> Option<usize> {
        self.body.nodes.iter().rposition(|n| n.kind == LayerKind::Add)
    }

    pub fn skip(&self) -> Skip {
        match self.final_add() {
            None => Skip::None,
            Some(i) => match self.body.nodes[i].inputs[1] {
                Src::Input => Skip::Identity,
                Src::Node(_) => Skip::Projection,
            },
        }
    }

    /// Node indices of the main branch in execution order: the chain that
    /// ends at the final addition's first input (or at the block output),
    /// followed back through first inputs to the block input.
    pub fn main_path(&self) -> Vec<usize> {
        let mut cur = match self.final_add() {
            Some(i) => self.body.nodes[i].inputs[0],
            None => self.body.output,
        };
        let mut path = Vec::new();
        while let Src::Node(j) = cur {
            path.push(j);
            cur = self.body.nodes[j].inputs[0];
        }
        path.reverse();
        path
    }

    /// Main-branch convolutions in execution order.
    pub fn main_convs(&self) -> Vec<usize> {
        self.main_path().into_iter().filter(|&i| self.body.nodes[i].conv().is_some()).collect()
    }

    pub fn count_kind(&self, pred: impl Fn(&LayerKind) -> bool) -> usize {
        self.body.nodes.iter().filter(|n| pred(&n.kind)).count()
    }

    pub fn conv_count(&self) -> usize {
        self.count_kind(|k| matches!(k, LayerKind::Conv(_)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub name: String,
    /// Per-sample input shape, e.g. `[3, 32, 32]`.
    pub input: Shape,
    pub classes: usize,
    pub stem: Segment,
    pub blocks: Vec<BlockSpec>,
    pub head: Segment,
}

impl Model {
    /// A graph with no nodes: output equals input.
    pub fn empty(input: Shape) -> Self {
        Model {
            name: "empty".into(),
            input,
            classes: 0,
            stem: Segment::empty(),
            blocks: Vec::new(),
            head: Segment::empty(),
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        std::iter::once(&self.stem)
            .chain(self.blocks.iter().map(|b| &b.body))
            .chain(std::iter::once(&self.head))
    }

    pub fn validate(&self) -> Result<()> {
        for seg in self.segments() {
            seg.validate()?;
        }
        self.infer_shapes().map(|_| ())
    }

    /// Prunable flags, one per block.
    pub fn prunable(&self) -> Vec<bool> {
        self.blocks.iter().map(|b| b.prunable).collect()
    }
}

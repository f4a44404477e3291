//! Per-sample shape inference, MAC counting and parameter counting.
//!
//! Shapes exclude the batch axis. MACs follow the multiply-accumulate
//! convention: conv `Cout·Cin/g·Kh·Kw·Ho·Wo`, linear `Cout·Cin·tokens`,
//! attention `2·L²·D` for the two token-mixing products. Norms, activations,
//! additions and biases cost nothing.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use updp_tensor::kernels::conv_out_extent;

use super::{LayerKind, Model, Segment, Shape, Src};
use crate::error::{Error, Result};

/// Channel axis of a per-sample shape: the last axis of token layouts, else axis 0.
pub(crate) fn channel_axis(shape: &[usize]) -> usize {
    if shape.len() == 2 {
        1
    } else {
        0
    }
}

impl LayerKind {
    pub fn infer(&self, node: &str, ins: &[&Shape]) -> Result<Shape> {
        let x = ins[0];
        let want_chw = |what: &str| -> Result<(usize, usize, usize)> {
            if x.len() != 3 {
                return Err(Error::shape(node, format!("{what} needs [C, H, W], got {x:?}")));
            }
            Ok((x[0], x[1], x[2]))
        };
        let channels_match = |c: usize| -> Result<()> {
            if x.is_empty() || x[channel_axis(x)] != c {
                return Err(Error::shape(node, format!("expects {c} channels, got {x:?}")));
            }
            Ok(())
        };
        match self {
            LayerKind::Conv(c) => {
                let (ch, h, w) = want_chw("conv")?;
                if ch != c.cin {
                    return Err(Error::shape(node, format!("expects {} input channels, got {ch}", c.cin)));
                }
                let oh = conv_out_extent(h, c.kernel[0], c.stride[0], c.padding[0]);
                let ow = conv_out_extent(w, c.kernel[1], c.stride[1], c.padding[1]);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![c.cout, oh, ow]),
                    _ => Err(Error::shape(node, format!("kernel {:?} larger than padded input {x:?}", c.kernel))),
                }
            }
            LayerKind::Linear { cin, cout, .. } => {
                if x.last() != Some(cin) {
                    return Err(Error::shape(node, format!("expects {cin} features, got {x:?}")));
                }
                let mut out = x.clone();
                *out.last_mut().expect("non-empty") = *cout;
                Ok(out)
            }
            LayerKind::BatchNorm { channels, .. }
            | LayerKind::LayerNorm { channels, .. }
            | LayerKind::LayerScale { channels, .. } => {
                channels_match(*channels)?;
                Ok(x.clone())
            }
            LayerKind::GroupNorm { channels, groups, .. } => {
                want_chw("groupnorm")?;
                channels_match(*channels)?;
                if *groups == 0 || channels % groups != 0 {
                    return Err(Error::shape(node, format!("{groups} groups do not divide {channels}")));
                }
                Ok(x.clone())
            }
            LayerKind::Activation { .. } => Ok(x.clone()),
            LayerKind::Add => {
                if ins[0] != ins[1] {
                    return Err(Error::shape(node, format!("add of {:?} and {:?}", ins[0], ins[1])));
                }
                Ok(x.clone())
            }
            LayerKind::Pad { channels, padding } => {
                let (c, h, w) = want_chw("pad")?;
                if c != *channels {
                    return Err(Error::shape(node, format!("expects {channels} channels, got {c}")));
                }
                Ok(vec![c, h + 2 * padding[0], w + 2 * padding[1]])
            }
            LayerKind::MaxPool { kernel, stride, padding } => {
                let (c, h, w) = want_chw("max_pool")?;
                match (
                    conv_out_extent(h, *kernel, *stride, *padding),
                    conv_out_extent(w, *kernel, *stride, *padding),
                ) {
                    (Some(oh), Some(ow)) => Ok(vec![c, oh, ow]),
                    _ => Err(Error::shape(node, format!("window {kernel} larger than padded input {x:?}"))),
                }
            }
            LayerKind::GlobalAvgPool => {
                let (c, _, _) = want_chw("pool")?;
                Ok(vec![c])
            }
            LayerKind::Flatten => Ok(vec![x.iter().product()]),
            LayerKind::ToTokens => {
                let (c, h, w) = want_chw("to_tokens")?;
                Ok(vec![h * w, c])
            }
            LayerKind::ClassToken { dim, tokens } => {
                if x != &vec![*tokens, *dim] {
                    return Err(Error::shape(node, format!("expects [{tokens}, {dim}] tokens, got {x:?}")));
                }
                Ok(vec![tokens + 1, *dim])
            }
            LayerKind::SelectToken => {
                if x.len() != 2 {
                    return Err(Error::shape(node, format!("expects [L, D], got {x:?}")));
                }
                Ok(vec![x[1]])
            }
            LayerKind::Attention { dim, heads } => {
                if x.len() != 2 || x[1] != 3 * dim {
                    return Err(Error::shape(node, format!("expects [L, {}], got {x:?}", 3 * dim)));
                }
                if *heads == 0 || dim % heads != 0 {
                    return Err(Error::shape(node, format!("{heads} heads do not divide {dim}")));
                }
                Ok(vec![x[0], *dim])
            }
            LayerKind::PositionBias { shape } => {
                if x.as_slice() != shape {
                    return Err(Error::shape(node, format!("map {shape:?} does not match {x:?}")));
                }
                Ok(x.clone())
            }
        }
    }

    /// Multiply-accumulates for one sample.
    pub fn macs(&self, ins: &[&Shape], out: &Shape) -> u64 {
        match self {
            LayerKind::Conv(c) => {
                (c.cout * (c.cin / c.groups) * c.kernel[0] * c.kernel[1] * out[1] * out[2]) as u64
            }
            LayerKind::Linear { cin, cout, .. } => {
                let tokens: usize = ins[0][..ins[0].len() - 1].iter().product();
                (cin * cout * tokens) as u64
            }
            LayerKind::Attention { dim, .. } => {
                let l = out[0];
                (2 * l * l * dim) as u64
            }
            _ => 0,
        }
    }
}

impl Segment {
    /// Output shape of every node.
    pub fn infer(&self, input: &[usize]) -> Result<Vec<Shape>> {
        let input = input.to_vec();
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let ins = node
                .inputs
                .iter()
                .map(|s| match s {
                    Src::Input => Ok(&input),
                    Src::Node(j) if *j < i => Ok(&shapes[*j]),
                    Src::Node(j) => Err(Error::Graph(format!("`{}` reads later node {j}", node.name))),
                })
                .collect::<Result<Vec<_>>>()?;
            if ins.len() != node.kind.arity() {
                return Err(Error::Graph(format!("`{}` has {} inputs", node.name, ins.len())));
            }
            let out = node.kind.infer(&node.name, &ins)?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self, input: &[usize], shapes: &[Shape]) -> Shape {
        match self.output {
            Src::Input => input.to_vec(),
            Src::Node(j) => shapes[j].clone(),
        }
    }

    pub fn out_shape(&self, input: &[usize]) -> Result<Shape> {
        let shapes = self.infer(input)?;
        Ok(self.output_shape(input, &shapes))
    }

    pub fn macs(&self, input: &[usize]) -> Result<u64> {
        let input_v = input.to_vec();
        let shapes = self.infer(input)?;
        let mut total = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<&Shape> = node
                .inputs
                .iter()
                .map(|s| match s {
                    Src::Input => &input_v,
                    Src::Node(j) => &shapes[*j],
                })
                .collect();
            total += node.kind.macs(&ins, &shapes[i]);
        }
        Ok(total)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelShapes {
    pub stem: Vec<Shape>,
    /// Input shape of each block; entry `n_blocks` is the head input.
    pub block_inputs: Vec<Shape>,
    pub blocks: Vec<Vec<Shape>>,
    pub head: Vec<Shape>,
    pub output: Shape,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub stem: u64,
    pub blocks: Vec<u64>,
    pub head: u64,
}

impl FlopsReport {
    pub fn total(&self) -> u64 {
        self.stem + self.blocks.iter().sum::<u64>() + self.head
    }
}

impl Model {
    pub fn infer_shapes(&self) -> Result<ModelShapes> {
        self.infer_shapes_for(&self.input)
    }

    pub fn infer_shapes_for(&self, input: &[usize]) -> Result<ModelShapes> {
        let stem = self.stem.infer(input)?;
        let mut x = self.stem.output_shape(input, &stem);
        let mut block_inputs = Vec::with_capacity(self.blocks.len() + 1);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let shapes = b.body.infer(&x).map_err(|e| match e {
                Error::Shape { node, msg } => Error::Shape {
                    node: format!("{}/{node}", b.name),
                    msg,
                },
                other => other,
            })?;
            let out = b.body.output_shape(&x, &shapes);
            block_inputs.push(std::mem::replace(&mut x, out));
            blocks.push(shapes);
        }
        block_inputs.push(x.clone());
        let head = self.head.infer(&x)?;
        let output = self.head.output_shape(&x, &head);
        Ok(ModelShapes {
            stem,
            block_inputs,
            blocks,
            head,
            output,
        })
    }

    /// MACs per sample, split into stem, blocks and head.
    pub fn count_flops(&self) -> Result<FlopsReport> {
        let shapes = self.infer_shapes()?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (b, input) in self.blocks.iter().zip(&shapes.block_inputs) {
            blocks.push(b.body.macs(input)?);
        }
        Ok(FlopsReport {
            stem: self.stem.macs(&self.input)?,
            blocks,
            head: self.head.macs(&shapes.block_inputs[self.blocks.len()])?,
        })
    }

    pub fn count_params(&self) -> usize {
        count_params(self.segments())
    }
}

/// Trainable parameter elements over distinct parameter names.
pub fn count_params<'a>(segments: impl IntoIterator<Item = &'a Segment>) -> usize {
    let mut seen = BTreeSet::new();
    let mut total = 0;
    for seg in segments {
        for node in &seg.nodes {
            for spec in super::init::node_param_specs(node) {
                if spec.trainable && seen.insert(spec.name.clone()) {
                    total += spec.shape.iter().product::<usize>();
                }
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BlockKind, BlockSpec, SegmentBuilder};

    fn single_conv() -> Model {
        let mut b = SegmentBuilder::new("stem");
        let c = b.conv("conv", Src::Input, 64, 64, 3, 1, 1, 1, true);
        Model {
            name: "one".into(),
            input: vec![64, 56, 56],
            classes: 0,
            stem: b.finish(c),
            blocks: vec![],
            head: Segment::empty(),
        }
    }

    #[test]
    fn single_conv_macs_and_params() {
        let m = single_conv();
        assert_eq!(m.count_flops().unwrap().total(), 64 * 64 * 9 * 56 * 56);
        assert_eq!(m.count_flops().unwrap().total(), 115_605_504);
        assert_eq!(m.count_params(), 36_928);
    }

    #[test]
    fn stride_two_seven_by_seven() {
        let mut b = SegmentBuilder::new("");
        let c = b.conv("conv", Src::Input, 3, 64, 7, 2, 3, 1, false);
        let seg = b.finish(c);
        assert_eq!(seg.out_shape(&[3, 224, 224]).unwrap(), vec![64, 112, 112]);
    }

    #[test]
    fn empty_graph() {
        let m = Model::empty(vec![3, 8, 8]);
        assert_eq!(m.infer_shapes().unwrap().output, vec![3, 8, 8]);
        assert_eq!(m.count_params(), 0);
        assert_eq!(m.count_flops().unwrap().total(), 0);
    }

    #[test]
    fn add_shape_mismatch_names_block_and_node() {
        let mut b = SegmentBuilder::new("blk");
        let c = b.conv("c", Src::Input, 4, 8, 1, 1, 0, 1, false);
        let a = b.add("add", c, Src::Input);
        let mut m = Model::empty(vec![4, 5, 5]);
        m.blocks.push(BlockSpec {
            name: "blk".into(),
            kind: BlockKind::BasicResidual,
            prunable: true,
            pruned: false,
            body: b.finish(a),
        });
        let err = m.infer_shapes().unwrap_err().to_string();
        assert!(err.contains("blk/add"), "{err}");
    }
}

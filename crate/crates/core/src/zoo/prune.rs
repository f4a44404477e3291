use updp_tensor::Activation;

use crate::error::{Error, Result};
use crate::graph::{BlockKind, BlockSpec, Derive, LayerKind, LayerNode, Model, Segment, Src, BN_EPS, BN_MOMENTUM};

/// Parameter key of a norm that belongs to the pruned flow only.
fn private_key(key: &str) -> String {
    format!("{key}.pruned")
}

/// Channel extent produced by `src`, found by walking back to a layer that fixes it.
pub(crate) fn out_channels(seg: &Segment, src: Src) -> Option<usize> {
    let Src::Node(i) = src else { return None };
    let node = &seg.nodes[i];
    match &node.kind {
        LayerKind::Conv(c) => Some(c.cout),
        LayerKind::Linear { cout, .. } => Some(*cout),
        LayerKind::BatchNorm { channels, .. }
        | LayerKind::LayerNorm { channels, .. }
        | LayerKind::GroupNorm { channels, .. }
        | LayerKind::LayerScale { channels, .. }
        | LayerKind::Pad { channels, .. } => Some(*channels),
        LayerKind::Attention { dim, .. } => Some(*dim),
        LayerKind::ClassToken { dim, .. } => Some(*dim),
        LayerKind::PositionBias { shape } => Some(shape[0]),
        _ => node.inputs.iter().find_map(|&s| out_channels(seg, s)),
    }
}

/// The block's native activation kind, with clamped ReLU mapped to ReLU.
fn native_activation(block: &BlockSpec) -> Activation {
    let act = block
        .body
        .nodes
        .iter()
        .filter_map(|n| n.kind.activation())
        .find(|a| !a.is_identity())
        .unwrap_or(Activation::Relu);
    match act {
        Activation::Relu6 => Activation::Relu,
        a => a,
    }
}

/// Builds the pruned counterpart of a baseline block: interior activations
/// removed, every normalization turned into a private batch norm, and an
/// activation + batch norm tail after the block output. A block that already
/// ends in an activation keeps it and only gains the batch norm.
pub fn make_pruned_block(block: &BlockSpec) -> Result<BlockSpec> {
    let fail = |msg: &str| Error::Block {
        block: block.name.clone(),
        msg: msg.to_string(),
    };
    if !block.prunable {
        return Err(fail("block is not prunable"));
    }
    if block.pruned {
        return Err(fail("block is already pruned"));
    }
    let body = &block.body;
    let out_idx = match body.output {
        Src::Node(j) => Some(j),
        Src::Input => None,
    };
    let ends_in_act = out_idx.is_some_and(|j| body.nodes[j].kind.is_nonidentity_activation());
    let tail_act = native_activation(block);
    let channels = out_channels(body, body.output).ok_or_else(|| fail("cannot determine output channels"))?;

    let mut map: Vec<Src> = Vec::with_capacity(body.nodes.len());
    let mut nodes: Vec<LayerNode> = Vec::with_capacity(body.nodes.len() + 2);
    let remap = |map: &[Src], s: Src| match s {
        Src::Input => Src::Input,
        Src::Node(j) => map[j],
    };
    for (i, node) in body.nodes.iter().enumerate() {
        let inputs: Vec<Src> = node.inputs.iter().map(|&s| remap(&map, s)).collect();
        if node.kind.activation().is_some() && !(ends_in_act && out_idx == Some(i)) {
            map.push(inputs[0]);
            continue;
        }
        let mut n = node.clone();
        n.inputs = inputs;
        match node.kind {
            LayerKind::LayerNorm { channels, .. } | LayerKind::GroupNorm { channels, .. } => {
                n.kind = LayerKind::BatchNorm {
                    channels,
                    eps: BN_EPS,
                    momentum: BN_MOMENTUM,
                };
                n.param_key = private_key(&node.param_key);
            }
            LayerKind::BatchNorm { .. } => n.param_key = private_key(&node.param_key),
            _ => {}
        }
        nodes.push(n);
        map.push(Src::Node(nodes.len() - 1));
    }
    let mut out = remap(&map, body.output);
    let mut push = |name: &str, kind: LayerKind, input: Src| {
        nodes.push(LayerNode {
            name: name.to_string(),
            kind,
            inputs: vec![input],
            param_key: format!("{}.{name}", block.name),
            derive: None,
        });
        Src::Node(nodes.len() - 1)
    };
    if !ends_in_act {
        out = push("tail_act", LayerKind::Activation { act: tail_act }, out);
    }
    out = push(
        "tail_bn",
        LayerKind::BatchNorm {
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        },
        out,
    );
    Ok(BlockSpec {
        name: block.name.clone(),
        kind: block.kind,
        prunable: true,
        pruned: true,
        body: Segment { nodes, output: out },
    })
}

/// Replaces every `from×from` depthwise kernel with its central `to×to` crop,
/// adjusting padding so output shapes are unchanged. The cropped weights live
/// under a new key and are initialized from the source kernel's center.
pub fn change_dw_kernel(block: &BlockSpec, from: usize, to: usize) -> Result<BlockSpec> {
    let fail = |msg: String| Error::Block {
        block: block.name.clone(),
        msg,
    };
    if to > from || (from - to) % 2 != 0 {
        return Err(fail(format!("cannot center-crop a {from}×{from} kernel to {to}×{to}")));
    }
    let shrink = (from - to) / 2;
    let mut out = block.clone();
    let mut changed = 0;
    for node in &mut out.body.nodes {
        let LayerKind::Conv(c) = &mut node.kind else { continue };
        if !c.is_depthwise() || c.kernel != [from, from] {
            continue;
        }
        if c.padding[0] < shrink || c.padding[1] < shrink {
            return Err(fail(format!("`{}` has padding {:?}, needs at least {shrink}", node.name, c.padding)));
        }
        c.kernel = [to, to];
        c.padding = [c.padding[0] - shrink, c.padding[1] - shrink];
        node.derive = Some(Derive::CenterCrop {
            from: node.param_key.clone(),
        });
        node.param_key = format!("{}.k{to}", node.param_key);
        changed += 1;
    }
    if changed == 0 {
        return Err(fail(format!("no {from}×{from} depthwise conv to change")));
    }
    Ok(out)
}

/// Pruned counterpart of every prunable block (`None` elsewhere). ConvNeXt
/// blocks additionally get the 7→3 depthwise kernel.
pub fn pruned_blocks(model: &Model) -> Result<Vec<Option<BlockSpec>>> {
    model
        .blocks
        .iter()
        .map(|b| {
            if !b.prunable {
                return Ok(None);
            }
            let p = make_pruned_block(b)?;
            if b.kind == BlockKind::ConvNeXt {
                change_dw_kernel(&p, 7, 3).map(Some)
            } else {
                Ok(Some(p))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SegmentBuilder;
    use crate::zoo::mobilenet::inverted_residual;

    #[test]
    fn inverted_residual_gets_relu_bn_tail() {
        let b = inverted_residual("blk", 8, 8, 6, 1, 3, Activation::Relu6);
        let p = make_pruned_block(&b).unwrap();
        let tags: Vec<&str> = p.body.nodes.iter().map(|n| n.kind.tag()).collect();
        assert_eq!(
            tags,
            ["conv", "batchnorm", "conv", "batchnorm", "conv", "batchnorm", "add", "activation", "batchnorm"]
        );
        assert_eq!(p.body.nodes[7].kind.activation(), Some(Activation::Relu));
        assert_eq!(p.body.nodes[1].param_key, "blk.expand_bn.pruned");
        assert_eq!(p.body.nodes[0].param_key, "blk.expand");
        assert_eq!(p.body.nodes[8].param_key, "blk.tail_bn");
        assert_eq!(p.body.output, Src::Node(8));
        assert_eq!(p.skip(), b.skip());
    }

    #[test]
    fn degenerate_block_gains_only_the_tail() {
        let mut s = SegmentBuilder::new("b");
        let c = s.conv("c", Src::Input, 4, 4, 3, 1, 1, 1, true);
        let a = s.add("add", c, Src::Input);
        let b = BlockSpec {
            name: "b".into(),
            kind: BlockKind::BasicResidual,
            prunable: true,
            pruned: false,
            body: s.finish(a),
        };
        let p = make_pruned_block(&b).unwrap();
        assert_eq!(p.body.nodes.len(), 4);
        assert_eq!(p.body.nodes[2].kind.activation(), Some(Activation::Relu));
        assert!(matches!(p.body.nodes[3].kind, LayerKind::BatchNorm { channels: 4, .. }));
    }

    #[test]
    fn non_prunable_is_rejected() {
        let mut b = inverted_residual("blk", 8, 8, 6, 1, 3, Activation::Relu6);
        b.prunable = false;
        assert!(matches!(make_pruned_block(&b), Err(Error::Block { .. })));
        b.prunable = true;
        let p = make_pruned_block(&b).unwrap();
        assert!(make_pruned_block(&p).is_err());
    }

    #[test]
    fn kernel_change_requires_a_match() {
        let b = inverted_residual("blk", 8, 8, 6, 1, 3, Activation::Relu6);
        assert!(change_dw_kernel(&b, 7, 3).is_err());
        let c = change_dw_kernel(&b, 3, 1).unwrap();
        let dw = c.body.node("dw").unwrap().1;
        assert_eq!(dw.conv().unwrap().kernel, [1, 1]);
        assert_eq!(dw.conv().unwrap().padding, [0, 0]);
        assert_eq!(dw.param_key, "blk.dw.k1");
        assert_eq!(dw.derive, Some(Derive::CenterCrop { from: "blk.dw".into() }));
    }
}

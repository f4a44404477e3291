use updp_tensor::Activation;

use super::{ArchConfig, Scale};
use crate::error::{Error, Result};
use crate::graph::{BlockKind, BlockSpec, LayerKind, Model, SegmentBuilder, Src};

const DEPTH: usize = 12;
const HEADS: usize = 3;
const MLP_RATIO: usize = 4;

/// Pre-norm transformer block: attention sub-block then MLP sub-block.
fn block(name: &str, dim: usize) -> BlockSpec {
    let mut b = SegmentBuilder::new(name);
    let n1 = b.ln("norm1", Src::Input, dim);
    let qkv = b.linear("qkv", n1, dim, 3 * dim);
    let att = b.simple("attn", LayerKind::Attention { dim, heads: HEADS }, qkv);
    let proj = b.linear("proj", att, dim, dim);
    let r1 = b.add("add1", proj, Src::Input);
    let n2 = b.ln("norm2", r1, dim);
    let f1 = b.linear("fc1", n2, dim, MLP_RATIO * dim);
    let a = b.act("act", f1, Activation::Gelu);
    let f2 = b.linear("fc2", a, MLP_RATIO * dim, dim);
    let r2 = b.add("add2", f2, r1);
    BlockSpec {
        name: name.to_string(),
        kind: BlockKind::Transformer,
        prunable: true,
        pruned: false,
        body: b.finish(r2),
    }
}

pub(super) fn build(cfg: &ArchConfig) -> Result<Model> {
    let (base, patch) = match cfg.scale {
        Scale::Full => (192, 16),
        Scale::Tiny => (24, 4),
    };
    let dim = cfg.ch(base / HEADS) * HEADS;
    if cfg.resolution % patch != 0 {
        return Err(Error::Config(format!("resolution {} is not a multiple of the patch size {patch}", cfg.resolution)));
    }
    let side = cfg.resolution / patch;
    let tokens = side * side;
    let mut s = SegmentBuilder::new("stem");
    let c = s.conv("patch", Src::Input, 3, dim, patch, patch, 0, 1, true);
    let t = s.simple("tokens", LayerKind::ToTokens, c);
    let stem_out = s.simple("embed", LayerKind::ClassToken { dim, tokens }, t);
    let blocks = (0..DEPTH).map(|i| block(&format!("blocks.{i}"), dim)).collect();
    let mut h = SegmentBuilder::new("head");
    let n = h.ln("norm", Src::Input, dim);
    let cls = h.simple("cls", LayerKind::SelectToken, n);
    let fc = h.linear("fc", cls, dim, cfg.classes);
    Ok(Model {
        name: "deit_tiny".into(),
        input: vec![3, cfg.resolution, cfg.resolution],
        classes: cfg.classes,
        stem: s.finish(stem_out),
        blocks,
        head: h.finish(fc),
    })
}

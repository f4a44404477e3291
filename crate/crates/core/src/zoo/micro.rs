use updp_tensor::Activation;

use super::mobilenet::inverted_residual;
use super::ArchConfig;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, Model, SegmentBuilder, Src};

pub const DEFAULT_BLOCKS: usize = 8;
const CHANNELS: usize = 12;
const EXPANSION: usize = 8;
const PATCH: usize = 4;

/// Patchifying stem, a stack of identical inverted-residual blocks, pooled linear head.
pub(super) fn build(cfg: &ArchConfig) -> Result<Model> {
    let n = cfg.blocks.unwrap_or(DEFAULT_BLOCKS);
    if n == 0 {
        return Err(Error::Config("micro_cnn needs at least one block".into()));
    }
    let c = cfg.ch(CHANNELS);
    let act = Activation::Relu;
    let mut s = SegmentBuilder::new("stem");
    let conv = s.conv("conv", Src::Input, 3, c, PATCH, PATCH, 0, 1, false);
    let bn = s.bn("bn", conv, c);
    let stem_out = s.act("act", bn, act);
    let blocks = (0..n)
        .map(|i| inverted_residual(&format!("blocks.{i}"), c, c, EXPANSION, 1, 3, act))
        .collect();
    let mut h = SegmentBuilder::new("head");
    let p = h.simple("pool", LayerKind::GlobalAvgPool, Src::Input);
    let fc = h.linear("fc", p, c, cfg.classes);
    Ok(Model {
        name: "micro_cnn".into(),
        input: vec![3, cfg.resolution, cfg.resolution],
        classes: cfg.classes,
        stem: s.finish(stem_out),
        blocks,
        head: h.finish(fc),
    })
}

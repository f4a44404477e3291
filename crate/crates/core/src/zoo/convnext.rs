use updp_tensor::Activation;

use super::{ArchConfig, Scale};
use crate::graph::{BlockKind, BlockSpec, LayerKind, Model, SegmentBuilder, Src};

const DEPTHS: [usize; 4] = [3, 3, 9, 3];
const LAYER_SCALE_INIT: f64 = 1e-6;

fn block(name: &str, dim: usize) -> BlockSpec {
    let mut b = SegmentBuilder::new(name);
    let dw = b.conv("dw", Src::Input, dim, dim, 7, 1, 3, dim, true);
    let n = b.ln("norm", dw, dim);
    let p1 = b.conv("pw1", n, dim, 4 * dim, 1, 1, 0, 1, true);
    let a = b.act("act", p1, Activation::Gelu);
    let p2 = b.conv("pw2", a, 4 * dim, dim, 1, 1, 0, 1, true);
    let g = b.simple(
        "scale",
        LayerKind::LayerScale {
            channels: dim,
            init: LAYER_SCALE_INIT,
        },
        p2,
    );
    let add = b.add("add", g, Src::Input);
    BlockSpec {
        name: name.to_string(),
        kind: BlockKind::ConvNeXt,
        prunable: true,
        pruned: false,
        body: b.finish(add),
    }
}

fn downsample(name: &str, cin: usize, cout: usize) -> BlockSpec {
    let mut b = SegmentBuilder::new(name);
    let n = b.ln("norm", Src::Input, cin);
    let c = b.conv("conv", n, cin, cout, 2, 2, 0, 1, true);
    BlockSpec {
        name: name.to_string(),
        kind: BlockKind::Transition,
        prunable: false,
        pruned: false,
        body: b.finish(c),
    }
}

pub(super) fn build(cfg: &ArchConfig) -> Model {
    let (base, patch) = match cfg.scale {
        Scale::Full => ([96, 192, 384, 768], 4),
        Scale::Tiny => ([8, 16, 24, 32], 2),
    };
    let dims = base.map(|c| cfg.ch(c));
    let mut s = SegmentBuilder::new("stem");
    let c = s.conv("conv", Src::Input, 3, dims[0], patch, patch, 0, 1, true);
    let stem_out = s.ln("norm", c, dims[0]);
    let mut blocks = Vec::new();
    for (stage, (&depth, &dim)) in DEPTHS.iter().zip(&dims).enumerate() {
        if stage > 0 {
            blocks.push(downsample(&format!("blocks.{}", blocks.len()), dims[stage - 1], dim));
        }
        for _ in 0..depth {
            blocks.push(block(&format!("blocks.{}", blocks.len()), dim));
        }
    }
    let last = dims[3];
    let mut h = SegmentBuilder::new("head");
    let p = h.simple("pool", LayerKind::GlobalAvgPool, Src::Input);
    let n = h.ln("norm", p, last);
    let fc = h.linear("fc", n, last, cfg.classes);
    Model {
        name: "convnext_t".into(),
        input: vec![3, cfg.resolution, cfg.resolution],
        classes: cfg.classes,
        stem: s.finish(stem_out),
        blocks,
        head: h.finish(fc),
    }
}

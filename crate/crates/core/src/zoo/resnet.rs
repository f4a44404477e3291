use updp_tensor::Activation;

use super::{ArchConfig, Scale};
use crate::graph::{BlockKind, BlockSpec, LayerKind, Model, SegmentBuilder, Src};

const DEPTHS: [usize; 4] = [3, 4, 6, 3];

fn basic_block(name: &str, cin: usize, cout: usize, stride: usize) -> BlockSpec {
    let mut b = SegmentBuilder::new(name);
    let c1 = b.conv("conv1", Src::Input, cin, cout, 3, stride, 1, 1, false);
    let n1 = b.bn("bn1", c1, cout);
    let a1 = b.act("relu1", n1, Activation::Relu);
    let c2 = b.conv("conv2", a1, cout, cout, 3, 1, 1, 1, false);
    let n2 = b.bn("bn2", c2, cout);
    let skip = if stride != 1 || cin != cout {
        let p = b.conv("down", Src::Input, cin, cout, 1, stride, 0, 1, false);
        b.bn("down_bn", p, cout)
    } else {
        Src::Input
    };
    let add = b.add("add", n2, skip);
    let out = b.act("relu2", add, Activation::Relu);
    BlockSpec {
        name: name.to_string(),
        kind: BlockKind::BasicResidual,
        prunable: true,
        pruned: false,
        body: b.finish(out),
    }
}

pub(super) fn build(cfg: &ArchConfig) -> Model {
    let base = match cfg.scale {
        Scale::Full => [64, 128, 256, 512],
        Scale::Tiny => [8, 16, 32, 64],
    };
    let widths = base.map(|c| cfg.ch(c));
    let mut s = SegmentBuilder::new("stem");
    let stem_out = match cfg.scale {
        Scale::Full => {
            let c = s.conv("conv", Src::Input, 3, widths[0], 7, 2, 3, 1, false);
            let n = s.bn("bn", c, widths[0]);
            let a = s.act("relu", n, Activation::Relu);
            s.simple(
                "pool",
                LayerKind::MaxPool {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                a,
            )
        }
        Scale::Tiny => {
            let c = s.conv("conv", Src::Input, 3, widths[0], 3, 1, 1, 1, false);
            let n = s.bn("bn", c, widths[0]);
            s.act("relu", n, Activation::Relu)
        }
    };
    let mut blocks = Vec::new();
    let mut cin = widths[0];
    for (stage, (&depth, &w)) in DEPTHS.iter().zip(&widths).enumerate() {
        for i in 0..depth {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            blocks.push(basic_block(&format!("blocks.{}", blocks.len()), cin, w, stride));
            cin = w;
        }
    }
    let mut h = SegmentBuilder::new("head");
    let p = h.simple("pool", LayerKind::GlobalAvgPool, Src::Input);
    let fc = h.linear("fc", p, cin, cfg.classes);
    Model {
        name: "resnet34".into(),
        input: vec![3, cfg.resolution, cfg.resolution],
        classes: cfg.classes,
        stem: s.finish(stem_out),
        blocks,
        head: h.finish(fc),
    }
}

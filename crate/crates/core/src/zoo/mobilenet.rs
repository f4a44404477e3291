use updp_tensor::Activation;

use super::{ArchConfig, Scale};
use crate::graph::{BlockKind, BlockSpec, LayerKind, Model, SegmentBuilder, Src};

/// (expansion, channels, repeats, stride)
const SCHEDULE: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

/// Rounds to the nearest multiple of `divisor`, never dropping more than 10%.
pub(crate) fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut n = (((v + d / 2.0) / d).floor() * d).max(d);
    if n < 0.9 * v {
        n += d;
    }
    n as usize
}

/// Inverted residual: optional 1×1 expansion, k×k depthwise, linear 1×1
/// projection, identity skip when shapes allow.
pub(crate) fn inverted_residual(
    name: &str,
    cin: usize,
    cout: usize,
    expand: usize,
    stride: usize,
    kernel: usize,
    act: Activation,
) -> BlockSpec {
    let mut b = SegmentBuilder::new(name);
    let hidden = cin * expand;
    let mut x = Src::Input;
    if expand != 1 {
        let c = b.conv("expand", x, cin, hidden, 1, 1, 0, 1, false);
        let n = b.bn("expand_bn", c, hidden);
        x = b.act("expand_act", n, act);
    }
    let c = b.conv("dw", x, hidden, hidden, kernel, stride, kernel / 2, hidden, false);
    let n = b.bn("dw_bn", c, hidden);
    let a = b.act("dw_act", n, act);
    let c = b.conv("project", a, hidden, cout, 1, 1, 0, 1, false);
    let mut out = b.bn("project_bn", c, cout);
    if stride == 1 && cin == cout {
        out = b.add("add", out, Src::Input);
    }
    BlockSpec {
        name: name.to_string(),
        kind: BlockKind::InvertedResidual,
        prunable: true,
        pruned: false,
        body: b.finish(out),
    }
}

pub(super) fn build(cfg: &ArchConfig) -> Model {
    let (scale, last_base, divisor) = match cfg.scale {
        Scale::Full => (cfg.width, 1280, 8),
        Scale::Tiny => (cfg.width / 8.0, 128, 4),
    };
    let first = make_divisible(32.0 * scale, divisor);
    let last = if cfg.scale == Scale::Full {
        make_divisible(last_base as f64 * scale.max(1.0), divisor)
    } else {
        cfg.ch(last_base).min(last_base)
    };
    let act = Activation::Relu6;
    let mut s = SegmentBuilder::new("stem");
    let c = s.conv("conv", Src::Input, 3, first, 3, 2, 1, 1, false);
    let n = s.bn("bn", c, first);
    let stem_out = s.act("act", n, act);
    let mut blocks = Vec::new();
    let mut cin = first;
    for &(t, c, n, stride) in &SCHEDULE {
        let cout = make_divisible(c as f64 * scale, divisor);
        for i in 0..n {
            let st = if i == 0 { stride } else { 1 };
            blocks.push(inverted_residual(&format!("blocks.{}", blocks.len()), cin, cout, t, st, 3, act));
            cin = cout;
        }
    }
    let mut h = SegmentBuilder::new("head");
    let c = h.conv("conv", Src::Input, cin, last, 1, 1, 0, 1, false);
    let n = h.bn("bn", c, last);
    let a = h.act("act", n, act);
    let p = h.simple("pool", LayerKind::GlobalAvgPool, a);
    let fc = h.linear("fc", p, last, cfg.classes);
    Model {
        name: "mobilenetv2".into(),
        input: vec![3, cfg.resolution, cfg.resolution],
        classes: cfg.classes,
        stem: s.finish(stem_out),
        blocks,
        head: h.finish(fc),
    }
}

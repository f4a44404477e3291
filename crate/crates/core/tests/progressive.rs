use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use updp::data::{generate_synthetic, SyntheticSpec};
use updp::graph::{materialize_params, predict, BlockKind, BlockSpec, Ctx, LayerKind, Mode, SegmentBuilder, Src};
use updp::progressive::{
    check_shape_preserved, lambda_at, migrate, mixed_forward, shrink_kernel_to_center, shrink_targets, train_subnet, LambdaSchedule,
    ProgressiveConfig,
};
use updp::supernet::{PruneMask, Supernet};
use updp::train::{forward_backward, OptimConfig};
use updp::zoo::{build_model, ArchConfig};
use updp_tensor::{ParamStore, Tape, Tensor};

#[test]
fn lambda_rises_monotonically_to_one() {
    for (k, t) in [(3.0, 30), (3.0, 150), (4.5, 45), (1.0, 7)] {
        let s = LambdaSchedule::new(k, t).unwrap();
        let seq: Vec<f64> = (0..=t as i64).map(|c| lambda_at(&s, c).unwrap()).collect();
        assert_eq!(seq[0], 0.0);
        assert_eq!(*seq.last().unwrap(), 1.0);
        assert!(seq.windows(2).all(|w| w[0] <= w[1]), "K={k} T={t}");
        assert!(seq.iter().all(|l| (0.0..=1.0).contains(l)));
        assert_eq!(seq[s.stage_two_start()], 1.0);
    }
}

fn scale_segment(w: f64) -> (updp::graph::Segment, ParamStore<f64>) {
    let mut b = SegmentBuilder::new(format!("s{w}"));
    let c = b.conv("c", Src::Input, 1, 1, 1, 1, 0, 1, false);
    let mut store = ParamStore::new();
    store.insert(format!("s{w}.c.weight"), Tensor::full(vec![1, 1, 1, 1], w), true);
    (b.finish(c), store)
}

#[test]
fn mixing_interpolates_the_two_flows() {
    let (base, mut store) = scale_segment(2.0);
    let (pruned, other) = scale_segment(4.0);
    for (n, l) in other.iter() {
        store.insert(n, l.value.clone(), true);
    }
    let x = Tensor::from_fn(vec![1, 1, 2, 2], |i| i as f64 - 1.5);
    for (lambda, factor) in [(0.0, 2.0), (0.5, 3.0), (0.25, 2.5), (1.0, 4.0)] {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let y = mixed_forward(&mut tape, &base, &pruned, xv, &mut ctx, lambda).unwrap();
        let want = x.scale(factor);
        assert!(tape.value(y).max_abs_diff(&want).unwrap() < 1e-15, "λ={lambda}");
    }
    let mut tape = Tape::inference();
    let xv = tape.constant(x);
    assert!(mixed_forward(&mut tape, &base, &pruned, xv, &mut Ctx::new(&store, Mode::Eval), 1.5).is_err());
}

#[test]
fn gradients_reach_each_flow_only_when_it_is_mixed_in() {
    let net = Supernet::new(build_model(&ArchConfig::tiny("micro_cnn").with_blocks(2)).unwrap()).unwrap();
    let data = generate_synthetic(&SyntheticSpec {
        classes: 10,
        samples_per_class: 1,
        image_size: 32,
        seed: 0,
    })
    .unwrap();
    let (x, y) = data.batch::<f64>(&(0..4).collect::<Vec<_>>());
    let private = "blocks.0.expand_bn.pruned.weight";
    let baseline_only = "blocks.0.expand_bn.weight";
    for (lambda, base_live, pruned_live) in [(0.0, true, false), (0.5, true, true), (1.0, false, true)] {
        let mut store = net.init_params::<f64>(1).unwrap();
        forward_backward(&mut store, &x, &y, |tape, xv, ctx| {
            net.base.forward_with(tape, xv, ctx, |tape, i, h, ctx| {
                mixed_forward(tape, &net.base.blocks[i].body, &net.pruned[i].as_ref().unwrap().body, h, ctx, lambda)
            })
        })
        .unwrap();
        let g = |n: &str| store.get(n).unwrap().grad.max_abs();
        assert_eq!(g(baseline_only) > 0.0, base_live, "λ={lambda}");
        assert_eq!(g(private) > 0.0, pruned_live, "λ={lambda}");
        assert!(g("blocks.0.expand.weight") > 0.0);
    }
}

#[test]
fn migration_preserves_shapes_on_every_zoo_block() {
    for family in ["micro_cnn", "resnet34", "mobilenetv2", "convnext_t", "deit_tiny"] {
        for cfg in [ArchConfig::tiny(family), ArchConfig::full(family)] {
            let net = Supernet::new(build_model(&cfg).unwrap()).unwrap();
            let shapes = net.base.infer_shapes().unwrap();
            for (i, p) in net.pruned.iter().enumerate() {
                let Some(p) = p else { continue };
                let input = &shapes.block_inputs[i];
                let m = migrate(p, input).unwrap();
                check_shape_preserved(&net.base.blocks[i], &m, input).unwrap();
                let convs = m.main_convs();
                for (j, &c) in convs.iter().enumerate() {
                    let c = m.body.nodes[c].conv().unwrap();
                    if j > 0 {
                        assert_eq!(c.padding, [0, 0], "{family} {}", p.name);
                    }
                    if j + 1 < convs.len() {
                        assert_eq!(c.stride, [1, 1], "{family} {}", p.name);
                    }
                }
                let mut shrunk = m.clone();
                for name in shrink_targets(&m) {
                    shrunk = shrink_kernel_to_center(&shrunk, &name).unwrap();
                }
                check_shape_preserved(p, &shrunk, input).unwrap();
            }
        }
    }
}

#[test]
fn shrinking_a_center_only_kernel_changes_nothing() {
    let net = Supernet::new(build_model(&ArchConfig::tiny("resnet34")).unwrap()).unwrap();
    let shapes = net.base.infer_shapes().unwrap();
    let i = net.pruned.iter().position(|p| p.as_ref().is_some_and(|b| !shrink_targets(b).is_empty())).unwrap();
    let block: BlockSpec = migrate(net.pruned[i].as_ref().unwrap(), &shapes.block_inputs[i]).unwrap();
    let mut store = net.init_params::<f64>(3).unwrap();
    let target = shrink_targets(&block)[0].clone();
    let key = block.body.node(&target).unwrap().1.param("weight");
    let w = store.value(&key).unwrap();
    let [k0, k1] = [w.dim(2), w.dim(3)];
    let centered = Tensor::from_fn(w.shape().to_vec(), |j| {
        let (y, x) = ((j / k1) % k0, j % k1);
        if y == k0 / 2 && x == k1 / 2 {
            w.data()[j]
        } else {
            0.0
        }
    });
    store.set_value(&key, centered).unwrap();
    let shrunk = shrink_kernel_to_center(&block, &target).unwrap();
    materialize_params([&shrunk.body], &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut shape = vec![2];
    shape.extend_from_slice(&shapes.block_inputs[i]);
    let x = Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let a = predict(&block.body, &store, &x).unwrap();
    let b = predict(&shrunk.body, &store, &x).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    let node = shrunk.body.node(&target).unwrap().1;
    assert!(node.param_key.ends_with(".center"));
    assert!(matches!(&node.kind, LayerKind::Conv(c) if c.kernel == [1, 1]));
}

#[test]
fn short_progressive_run_returns_the_migrated_subnet() {
    let net = Supernet::new(build_model(&ArchConfig::tiny("micro_cnn").with_blocks(3)).unwrap()).unwrap();
    let data = generate_synthetic(&SyntheticSpec {
        classes: 10,
        samples_per_class: 6,
        image_size: 32,
        seed: 1,
    })
    .unwrap();
    let (train, val) = data.split(40);
    let params = net.init_params::<f32>(0).unwrap();
    let mask: PruneMask = "010".parse().unwrap();
    let cfg = ProgressiveConfig {
        optim: OptimConfig {
            batch_size: 16,
            ..OptimConfig::default()
        },
        ..ProgressiveConfig::new(2.0, 4)
    };
    let mut seen = Vec::new();
    let out = train_subnet(&net, &params, &mask, &train, &val, &cfg, |e| seen.push(e.lambda)).unwrap();
    assert_eq!(out.log.len(), 4);
    assert_eq!(seen, out.log.iter().map(|e| e.lambda).collect::<Vec<_>>());
    assert_eq!(seen[0], 0.0);
    assert!(seen[1] > 0.0 && seen[1] < 1.0);
    assert_eq!(&seen[2..], [1.0, 1.0]);
    assert!(out.log[3].lr < out.log[0].lr);
    assert!(out.log.iter().all(|e| e.train_loss.is_finite()));

    assert!(out.model.blocks[1].pruned && !out.model.blocks[0].pruned && !out.model.blocks[2].pruned);
    assert_eq!(out.model.blocks[1].kind, BlockKind::InvertedResidual);
    let first = out.model.blocks[1].main_convs()[0];
    assert_eq!(out.model.blocks[1].body.nodes[first].conv().unwrap().padding, [1, 1]);
    let names = out.model.param_names();
    assert_eq!(names.len(), out.params.len());
    assert!(names.iter().all(|n| out.params.contains(n)));
    let (x, _) = val.batch::<f32>(&[0, 1]);
    assert!(out.model.forward(&out.params, &x).unwrap().data().iter().all(|v| v.is_finite()));
}

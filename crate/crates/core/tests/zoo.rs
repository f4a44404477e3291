use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use updp::graph::{init_params, predict, BlockKind, LayerKind, Model};
use updp::zoo::{build_model, change_dw_kernel, make_pruned_block, pruned_blocks, ArchConfig};
use updp_tensor::{Activation, ParamStore, Tensor};

const FAMILIES: [&str; 5] = ["resnet34", "mobilenetv2", "convnext_t", "deit_tiny", "micro_cnn"];

fn all_models() -> Vec<Model> {
    FAMILIES
        .iter()
        .flat_map(|f| [build_model(&ArchConfig::full(f)).unwrap(), build_model(&ArchConfig::tiny(f)).unwrap()])
        .collect()
}

#[test]
fn resnet34_layout() {
    let m = build_model(&ArchConfig::full("resnet34")).unwrap();
    assert_eq!(m.n_blocks(), 16);
    assert!(m.prunable().iter().all(|&p| p));
    let shapes = m.infer_shapes().unwrap();
    assert_eq!(shapes.block_inputs[16], vec![512, 7, 7]);
    assert_eq!(shapes.output, vec![1000]);
}

#[test]
fn micro_cnn_layout() {
    let m = build_model(&ArchConfig::tiny("micro_cnn")).unwrap();
    assert_eq!(m.n_blocks(), 8);
    assert!(m.blocks.iter().all(|b| b.kind == BlockKind::InvertedResidual && b.prunable));
    assert_eq!(m.infer_shapes().unwrap().output, vec![10]);
    let six = build_model(&ArchConfig::tiny("micro_cnn").with_blocks(6)).unwrap();
    assert_eq!(six.n_blocks(), 6);
}

#[test]
fn full_scale_costs_are_canonical() {
    let cost = |f: &str| {
        let m = build_model(&ArchConfig::full(f)).unwrap();
        (m.count_flops().unwrap().total(), m.count_params())
    };
    let (r_macs, r_params) = cost("resnet34");
    assert_eq!(r_params, 21_797_672);
    assert!((3.60e9..3.70e9).contains(&(r_macs as f64)), "{r_macs}");
    let mb = build_model(&ArchConfig::full("mobilenetv2").with_width(1.4)).unwrap();
    assert_eq!(mb.n_blocks(), 17);
    assert_eq!(mb.count_params(), 6_108_776);
    let (c_macs, c_params) = cost("convnext_t");
    assert!((28.5e6..28.7e6).contains(&(c_params as f64)), "{c_params}");
    assert!((4.4e9..4.5e9).contains(&(c_macs as f64)), "{c_macs}");
    let (_, d_params) = cost("deit_tiny");
    assert_eq!(d_params, 5_717_416);
}

#[test]
fn flops_are_additive_over_blocks() {
    for m in all_models() {
        let r = m.count_flops().unwrap();
        let shapes = m.infer_shapes().unwrap();
        let per_block: u64 = m
            .blocks
            .iter()
            .zip(&shapes.block_inputs)
            .map(|(b, s)| b.body.macs(s).unwrap())
            .sum();
        assert_eq!(r.total(), r.stem + per_block + r.head, "{}", m.name);
    }
}

#[test]
fn pruned_blocks_preserve_shapes_and_structure() {
    for m in all_models() {
        let shapes = m.infer_shapes().unwrap();
        for (i, p) in pruned_blocks(&m).unwrap().into_iter().enumerate() {
            let Some(p) = p else {
                assert!(!m.blocks[i].prunable);
                continue;
            };
            let input = &shapes.block_inputs[i];
            assert_eq!(p.body.out_shape(input).unwrap(), shapes.block_inputs[i + 1], "{} {}", m.name, p.name);
            let norms = p.count_kind(|k| matches!(k, LayerKind::LayerNorm { .. } | LayerKind::GroupNorm { .. }));
            assert_eq!(norms, 0);
            assert_eq!(p.count_kind(|k| k.activation().is_some()), 1, "{} {}", m.name, p.name);
            let last = match p.body.output {
                updp::graph::Src::Node(j) => &p.body.nodes[j],
                _ => unreachable!(),
            };
            assert!(matches!(last.kind, LayerKind::BatchNorm { .. }));
        }
    }
}

#[test]
fn resnet_block_keeps_its_final_relu() {
    let m = build_model(&ArchConfig::tiny("resnet34")).unwrap();
    let p = make_pruned_block(&m.blocks[0]).unwrap();
    let tags: Vec<&str> = p.body.nodes.iter().map(|n| n.kind.tag()).collect();
    assert_eq!(tags, ["conv", "batchnorm", "conv", "batchnorm", "add", "activation", "batchnorm"]);
    assert_eq!(p.body.nodes[5].name, "relu2");
}

#[test]
fn deit_block_has_bn_in_place_of_ln_and_a_gelu_tail() {
    let m = build_model(&ArchConfig::tiny("deit_tiny")).unwrap();
    let p = make_pruned_block(&m.blocks[3]).unwrap();
    let tags: Vec<&str> = p.body.nodes.iter().map(|n| n.kind.tag()).collect();
    assert_eq!(
        tags,
        ["batchnorm", "linear", "attention", "linear", "add", "batchnorm", "linear", "linear", "add", "activation", "batchnorm"]
    );
    assert_eq!(p.body.nodes[9].kind.activation(), Some(Activation::Gelu));
}

/// With neutral norms and an identity tail, a pruned inverted residual is affine.
#[test]
fn pruned_inverted_residual_is_affine() {
    let m = build_model(&ArchConfig::tiny("mobilenetv2")).unwrap();
    let shapes = m.infer_shapes().unwrap();
    let idx = m.blocks.iter().position(|b| b.skip() == updp::graph::Skip::Identity).unwrap();
    let mut p = make_pruned_block(&m.blocks[idx]).unwrap();
    for n in &mut p.body.nodes {
        if n.kind.activation().is_some() {
            n.kind = LayerKind::Activation { act: Activation::Identity };
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let store: ParamStore<f64> = init_params([&p.body], &mut rng).unwrap();
    let mut shape = vec![1];
    shape.extend(&shapes.block_inputs[idx]);
    let x = Tensor::<f64>::randn(shape.clone(), 1.0, &mut rng);
    let y = Tensor::<f64>::randn(shape.clone(), 1.0, &mut rng);
    let f = |t: &Tensor<f64>| predict(&p.body, &store, t).unwrap();
    let f0 = f(&Tensor::zeros(shape.clone()));
    let (a, b) = (0.7, -1.3);
    let combo = x.scale(a).add(&y.scale(b)).unwrap();
    let lhs = f(&combo).sub(&f0).unwrap();
    let rhs = f(&x).sub(&f0).unwrap().scale(a).add(&f(&y).sub(&f0).unwrap().scale(b)).unwrap();
    assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
}

#[test]
fn center_only_kernel_survives_the_7_to_3_change() {
    let m = build_model(&ArchConfig::tiny("convnext_t")).unwrap();
    let block = &m.blocks[0];
    let changed = change_dw_kernel(block, 7, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store: ParamStore<f64> = init_params([&block.body], &mut rng).unwrap();
    let key = "blocks.0.dw.weight";
    let w = store.value(key).unwrap().clone();
    let (k, kw) = (w.dim(2), w.dim(3));
    let masked = Tensor::from_fn(w.shape().to_vec(), |i| {
        let (y, x) = ((i / kw) % k, i % kw);
        if (2..=4).contains(&y) && (2..=4).contains(&x) {
            w.data()[i]
        } else {
            0.0
        }
    });
    store.set_value(key, masked).unwrap();
    updp::graph::materialize_params([&changed.body], &mut store, &mut rng).unwrap();
    let shape = m.infer_shapes().unwrap().block_inputs[0].clone();
    let mut s = vec![2];
    s.extend(&shape);
    let x = Tensor::<f64>::randn(s, 1.0, &mut rng);
    let a = predict(&block.body, &store, &x).unwrap();
    let b = predict(&changed.body, &store, &x).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
}


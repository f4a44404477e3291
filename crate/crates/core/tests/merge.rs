use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use updp::graph::{materialize_params, predict, BlockSpec, LayerKind};
use updp::merge::{merge_block, merge_model, verify_equivalence, ExactMode, MergedForm, Rule};
use updp::progressive::{migrate, shrink_kernel_to_center, shrink_targets};
use updp::supernet::{PruneMask, Supernet};
use updp::zoo::{build_model, ArchConfig};
use updp_tensor::{ParamStore, Tensor};

const FAMILIES: [&str; 5] = ["micro_cnn", "resnet34", "mobilenetv2", "convnext_t", "deit_tiny"];

/// Replaces every value with a random one so no fold is trivially neutral.
fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let shape = store.value(&name).unwrap().shape().to_vec();
        let v = if name.ends_with("running_var") {
            Tensor::uniform(shape, 0.5, 1.5, &mut rng)
        } else {
            Tensor::uniform(shape, -0.5, 0.5, &mut rng)
        };
        store.set_value(&name, v).unwrap();
    }
}

/// Migrated and shrunk pruned block, as after progressive training.
fn prepare(block: &BlockSpec, input: &[usize]) -> BlockSpec {
    let mut b = migrate(block, input).unwrap();
    for name in shrink_targets(&b) {
        b = shrink_kernel_to_center(&b, &name).unwrap();
    }
    b
}

fn batch(input: &[usize], n: usize, seed: u64) -> Tensor<f64> {
    let mut shape = vec![n];
    shape.extend_from_slice(input);
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn every_zoo_block_merges_exactly_after_migration() {
    for family in FAMILIES {
        let net = Supernet::new(build_model(&ArchConfig::tiny(family)).unwrap()).unwrap();
        let shapes = net.base.infer_shapes().unwrap();
        let mut store = net.init_params::<f64>(1).unwrap();
        for (i, p) in net.pruned.iter().enumerate() {
            let Some(p) = p else { continue };
            let input = &shapes.block_inputs[i];
            let block = prepare(p, input);
            materialize_params([&block.body], &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            randomize(&mut store, i as u64);
            let m = merge_block(&block, &store, input, ExactMode::Interior).unwrap();
            let x = batch(input, 2, 3);
            let want = predict(&block.body, &store, &x).unwrap();
            let got = predict(&m.block.body, &m.params, &x).unwrap();
            let err = want.max_abs_diff(&got).unwrap();
            let tol = 1e-9 * want.max_abs().max(1.0);
            assert!(err <= tol, "{family} {}: {err:e}", block.name);
            assert!(m.plan.border_exact, "{family} {}", block.name);
            assert!(m.plan.macs_after <= m.plan.macs_before, "{family} {}: {:?}", block.name, m.plan);
            if block.conv_count() >= 2 && m.plan.form == MergedForm::Dense {
                assert!(m.plan.macs_after < m.plan.macs_before, "{family} {}", block.name);
            }
            let convs = m.block.conv_count();
            let linears = m.block.count_kind(|k| matches!(k, LayerKind::Linear { .. }));
            match m.plan.form {
                MergedForm::Dense => assert_eq!(convs, 1, "{family} {}", block.name),
                MergedForm::Factorized => assert_eq!(convs, 2, "{family} {}", block.name),
                // qkv, proj and the merged MLP
                MergedForm::Linear => assert_eq!(linears, 3, "{family} {}", block.name),
            }
            assert!(m.block.body.nodes.iter().all(|n| !matches!(n.kind, LayerKind::LayerNorm { .. })));
        }
    }
}

#[test]
fn forms_follow_the_cheaper_layout() {
    let cases = [
        ("micro_cnn", MergedForm::Dense),
        ("resnet34", MergedForm::Dense),
        ("deit_tiny", MergedForm::Linear),
    ];
    for (family, form) in cases {
        let net = Supernet::new(build_model(&ArchConfig::tiny(family)).unwrap()).unwrap();
        let shapes = net.base.infer_shapes().unwrap();
        let store = {
            let mut s = net.init_params::<f64>(0).unwrap();
            randomize(&mut s, 0);
            s
        };
        let p = net.pruned[0].as_ref().unwrap();
        let block = prepare(p, &shapes.block_inputs[0]);
        let mut store = store;
        materialize_params([&block.body], &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let m = merge_block(&block, &store, &shapes.block_inputs[0], ExactMode::Interior).unwrap();
        assert_eq!(m.plan.form, form, "{family}");
    }
    // Full-width ConvNeXt: a dense 3×3 would cost more than the block itself.
    let net = Supernet::new(build_model(&ArchConfig::full("convnext_t")).unwrap()).unwrap();
    let shapes = net.base.infer_shapes().unwrap();
    let p = net.pruned[0].as_ref().unwrap();
    let mut store = ParamStore::<f64>::new();
    materialize_params([&net.base.blocks[0].body, &p.body], &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let m = merge_block(p, &store, &shapes.block_inputs[0], ExactMode::Interior).unwrap();
    assert_eq!(m.plan.form, MergedForm::Factorized);
    assert!(m.plan.macs_after < m.plan.macs_before);
}

#[test]
fn unmigrated_padding_is_exact_inside_and_repaired_by_exact_pad() {
    let net = Supernet::new(build_model(&ArchConfig::tiny("micro_cnn").with_blocks(1)).unwrap()).unwrap();
    let input = net.base.infer_shapes().unwrap().block_inputs[0].clone();
    let mut store = net.init_params::<f64>(4).unwrap();
    randomize(&mut store, 4);
    let block = net.pruned[0].as_ref().unwrap();
    let x = batch(&input, 2, 5);
    let want = predict(&block.body, &store, &x).unwrap();

    let m = merge_block(block, &store, &input, ExactMode::Interior).unwrap();
    assert!(!m.plan.border_exact);
    let got = predict(&m.block.body, &m.params, &x).unwrap();
    let (c, h, w) = (want.dim(1), want.dim(2), want.dim(3));
    let (mut inner, mut border) = (0.0f64, 0.0f64);
    for (i, (a, b)) in want.data().iter().zip(got.data()).enumerate() {
        let (y, xx) = ((i / w) % h, i % w);
        let d = (a - b).abs();
        if y >= 1 && y + 1 < h && xx >= 1 && xx + 1 < w {
            inner = inner.max(d);
        } else {
            border = border.max(d);
        }
    }
    assert!(c > 0 && inner < 1e-9, "{inner:e}");
    assert!(border > 1e-6, "{border:e}");

    let e = merge_block(block, &store, &input, ExactMode::ExactPad).unwrap();
    assert!(e.plan.border_exact);
    assert!(e.plan.steps.iter().any(|s| s.rule == Rule::PositionBias));
    let got = predict(&e.block.body, &e.params, &x).unwrap();
    assert!(want.max_abs_diff(&got).unwrap() < 1e-9);
}

#[test]
fn baseline_blocks_are_rejected_by_node() {
    let model = build_model(&ArchConfig::tiny("micro_cnn").with_blocks(1)).unwrap();
    let input = model.infer_shapes().unwrap().block_inputs[0].clone();
    let store = Supernet::new(model.clone()).unwrap().init_params::<f64>(0).unwrap();
    let err = merge_block(&model.blocks[0], &store, &input, ExactMode::Interior).err().unwrap().to_string();
    assert!(err.contains("expand_act") || err.contains("dw_act"), "{err}");

    let cx = build_model(&ArchConfig::tiny("convnext_t")).unwrap();
    let input = cx.infer_shapes().unwrap().block_inputs[0].clone();
    let store = Supernet::new(cx.clone()).unwrap().init_params::<f64>(0).unwrap();
    let err = merge_block(&cx.blocks[0], &store, &input, ExactMode::Interior).err().unwrap().to_string();
    assert!(err.contains("norm"), "{err}");
}

#[test]
fn merged_model_matches_and_is_cheaper() {
    let net = Supernet::new(build_model(&ArchConfig::tiny("micro_cnn").with_blocks(4)).unwrap()).unwrap();
    let mask: PruneMask = "0110".parse().unwrap();
    let shapes = net.base.infer_shapes().unwrap();
    let mut sub = net.subnet(&mask).unwrap();
    for i in mask.indices() {
        sub.blocks[i] = prepare(&sub.blocks[i], &shapes.block_inputs[i]);
    }
    let mut store = net.init_params::<f64>(6).unwrap();
    materialize_params(sub.segments(), &mut store, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    randomize(&mut store, 6);
    let m = merge_model(&sub, &store, ExactMode::Interior).unwrap();
    assert_eq!(m.plans.len(), 2);
    let x = batch(&sub.input, 3, 7);
    let r = verify_equivalence(&sub, &store, &m.model, &m.params, &x).unwrap();
    assert_eq!(r.blocks.len(), 2);
    assert!(r.interior_max < 1e-9 && r.border_max < 1e-9, "{r:?}");
    assert!(r.logits_max < 1e-9 * r.macs_before as f64, "{r:?}");
    assert_eq!(r.top1_agreement, 1.0);
    assert!(r.macs_after < r.macs_before);
    assert!(r.params_after < r.params_before);
    let names = m.model.param_names();
    assert!(names.iter().all(|n| m.params.contains(n)));
    assert_eq!(names.len(), m.params.len());
}

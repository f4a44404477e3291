use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use updp::data::{generate_synthetic, Dataset, SyntheticSpec};
use updp::graph::{eval_segment, load_checkpoint, predict, save_checkpoint, Ctx, LayerKind, Mode};
use updp::supernet::{accumulate_mask_grads, sample_sandwich, train_supernet, PruneMask, Supernet, SupernetConfig};
use updp::train::OptimConfig;
use updp::zoo::{build_model, ArchConfig};
use updp_tensor::{ParamStore, Tape, Tensor};

fn micro(blocks: usize) -> Supernet {
    Supernet::new(build_model(&ArchConfig::tiny("micro_cnn").with_blocks(blocks)).unwrap()).unwrap()
}

fn input(n: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(vec![n, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn small_data(per_class: usize) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        classes: 10,
        samples_per_class: per_class,
        image_size: 32,
        seed: 3,
    })
    .unwrap()
}

/// Perturbs every BN buffer so eval-mode paths are not trivially neutral.
fn randomize_buffers(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.iter().filter(|(_, l)| !l.trainable).map(|(n, _)| n.to_string()).collect();
    for name in names {
        let v = store.value(&name).unwrap();
        let new = if name.ends_with("running_var") {
            Tensor::<f64>::uniform(v.shape().to_vec(), 0.5, 1.5, &mut rng)
        } else {
            Tensor::<f64>::uniform(v.shape().to_vec(), -0.5, 0.5, &mut rng)
        };
        store.set_value(&name, new).unwrap();
    }
}

#[test]
fn all_zero_mask_is_the_baseline_bit_for_bit() {
    for family in ["micro_cnn", "resnet34", "convnext_t"] {
        let net = Supernet::new(build_model(&ArchConfig::tiny(family)).unwrap()).unwrap();
        let mut store = net.init_params::<f64>(1).unwrap();
        randomize_buffers(&mut store, 2);
        let x = input(2, 3);
        let a = net.forward(&store, &x, &PruneMask::zeros(net.n_blocks())).unwrap();
        let b = net.base.forward(&store, &x).unwrap();
        assert_eq!(a.data(), b.data(), "{family}");
    }
}

#[test]
fn masks_select_flows_block_by_block() {
    let net = micro(2);
    let mut store = net.init_params::<f64>(4).unwrap();
    randomize_buffers(&mut store, 5);
    let x = input(3, 6);
    let p0 = net.pruned[0].as_ref().unwrap();
    let p1 = net.pruned[1].as_ref().unwrap();
    let compose = |first: &updp::graph::Segment, second: &updp::graph::Segment| {
        let h = predict(&net.base.stem, &store, &x).unwrap();
        let h = predict(first, &store, &h).unwrap();
        let h = predict(second, &store, &h).unwrap();
        predict(&net.base.head, &store, &h).unwrap()
    };
    let cases = [
        ("10", compose(&p0.body, &net.base.blocks[1].body)),
        ("01", compose(&net.base.blocks[0].body, &p1.body)),
        ("11", compose(&p0.body, &p1.body)),
    ];
    for (bits, want) in cases {
        let got = net.forward(&store, &x, &bits.parse().unwrap()).unwrap();
        assert_eq!(got.data(), want.data(), "{bits}");
    }
    let all_pruned = net.forward(&store, &x, &PruneMask::ones(2)).unwrap();
    let all_base = net.forward(&store, &x, &PruneMask::zeros(2)).unwrap();
    assert!(all_pruned.max_abs_diff(&all_base).unwrap() > 1e-6);
}

#[test]
fn mask_length_and_prunability_are_checked() {
    let net = micro(3);
    let store = net.init_params::<f64>(0).unwrap();
    assert!(net.forward(&store, &input(1, 0), &PruneMask::zeros(2)).is_err());
    let cx = Supernet::new(build_model(&ArchConfig::tiny("convnext_t")).unwrap()).unwrap();
    let transition = cx.prunable().iter().position(|&p| !p).unwrap();
    let mut m = PruneMask::zeros(cx.n_blocks());
    m.set(transition, true);
    assert!(cx.check_mask(&m).is_err());
}

#[test]
fn conv_weights_are_shared_and_norms_are_private() {
    let net = micro(2);
    for (base, pruned) in net.base.blocks.iter().zip(net.pruned.iter().flatten()) {
        for node in &pruned.body.nodes {
            match &node.kind {
                LayerKind::Conv(_) | LayerKind::Linear { .. } => {
                    let (_, twin) = base.body.node(&node.name).unwrap();
                    assert_eq!(twin.param_key, node.param_key);
                }
                LayerKind::BatchNorm { .. } => {
                    assert!(base.body.nodes.iter().all(|b| b.param_key != node.param_key), "{}", node.name);
                }
                _ => {}
            }
        }
    }

    // Mutating the shared storage changes both flows.
    let mut store = net.init_params::<f64>(7).unwrap();
    let x = input(1, 8);
    let before: Vec<Tensor<f64>> = ["00", "11"].iter().map(|m| net.forward(&store, &x, &m.parse().unwrap()).unwrap()).collect();
    let w = store.value("blocks.0.project.weight").unwrap().scale(1.5);
    store.set_value("blocks.0.project.weight", w).unwrap();
    for (m, old) in ["00", "11"].iter().zip(&before) {
        let new = net.forward(&store, &x, &m.parse().unwrap()).unwrap();
        assert!(new.max_abs_diff(old).unwrap() > 1e-9, "{m}");
    }
}

#[test]
fn accumulated_grads_equal_the_sum_of_losses_gradient() {
    let net = micro(3);
    let data = small_data(1);
    let (x, y) = data.batch::<f64>(&(0..6).collect::<Vec<_>>());
    let masks = sample_sandwich(&mut ChaCha8Rng::seed_from_u64(11), 3);
    let init = net.init_params::<f64>(12).unwrap();

    let mut acc = init.clone();
    accumulate_mask_grads(&net, &mut acc, &x, &y, &masks).unwrap();

    // Four separate single-mask passes, summed by hand.
    let mut separate = init.clone();
    let mut sum: Vec<Tensor<f64>> = separate.iter().map(|(_, l)| Tensor::zeros(l.value.shape().to_vec())).collect();
    for m in &masks {
        separate.zero_grad();
        accumulate_mask_grads(&net, &mut separate, &x, &y, std::slice::from_ref(m)).unwrap();
        for (s, (_, l)) in sum.iter_mut().zip(separate.iter()) {
            *s = s.add(&l.grad).unwrap();
        }
    }

    // One tape holding all four forwards, differentiated through the summed loss.
    let mut joint = init.clone();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut total = None;
    for m in &masks {
        let mut ctx = Ctx::new(&joint, Mode::Train);
        let logits = net.forward_var(&mut tape, xv, &mut ctx, m).unwrap();
        let l = tape.cross_entropy(logits, &y).unwrap();
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l).unwrap(),
        });
    }
    let grads = tape.backward(total.unwrap()).unwrap();
    grads.accumulate_into(&mut joint).unwrap();

    let mut checked = 0;
    for (((name, a), s), (_, j)) in acc.iter().zip(&sum).zip(joint.iter()) {
        let scale = j.grad.max_abs().max(1e-8);
        assert!(a.grad.max_abs_diff(s).unwrap() <= 1e-6 * scale, "{name} vs separate");
        assert!(a.grad.max_abs_diff(&j.grad).unwrap() <= 1e-6 * scale, "{name} vs joint");
        if a.trainable && a.grad.max_abs() > 0.0 {
            checked += 1;
        }
    }
    assert!(checked > 10);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let net = micro(2);
    let data = small_data(1);
    let mut store = net.init_params::<f32>(0).unwrap();
    let before = store.clone();
    let cfg = SupernetConfig {
        epochs: 1,
        optim: OptimConfig {
            batch_size: 16,
            lr: 0.0,
            ..OptimConfig::default()
        },
        seed: 1,
    };
    train_supernet(&net, &mut store, &data, &cfg, |_| {}).unwrap();
    for ((name, a), (_, b)) in store.iter().zip(before.iter()) {
        if a.trainable {
            assert_eq!(a.value.data(), b.value.data(), "{name}");
        }
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let net = micro(1);
    let mut store = net.init_params::<f32>(0).unwrap();
    let empty = Dataset::new([3, 32, 32], Vec::new(), Vec::new(), 10).unwrap();
    assert!(train_supernet(&net, &mut store, &empty, &SupernetConfig::default(), |_| {}).is_err());
}

#[test]
fn baseline_loss_decreases_and_checkpoint_keeps_both_flows() {
    let net = micro(4);
    let data = small_data(16);
    let mut store = net.init_params::<f32>(2).unwrap();
    let cfg = SupernetConfig {
        epochs: 6,
        optim: OptimConfig::default(),
        seed: 4,
    };
    let log = train_supernet(&net, &mut store, &data, &cfg, |_| {}).unwrap();
    assert_eq!(log.len(), 6);
    assert!(log[5].losses[0] < log[0].losses[0], "{log:?}");
    assert!(log.iter().all(|e| e.losses.iter().all(|l| l.is_finite())));

    let bytes = save_checkpoint(&net, &store, &serde_json::json!({"stage": "train-supernet"})).unwrap();
    let ck = load_checkpoint::<Supernet, f32>(&bytes).unwrap();
    assert_eq!(ck.graph, net);
    assert!(ck.params.iter().any(|(n, _)| n.contains(".pruned")));
    let (x, _) = data.batch::<f32>(&[0, 1, 2]);
    for m in ["0000", "1111", "0110"] {
        let m: PruneMask = m.parse().unwrap();
        assert_eq!(net.forward(&store, &x, &m).unwrap().data(), ck.graph.forward(&ck.params, &x, &m).unwrap().data());
    }
}

#[test]
fn eval_segment_matches_predict_for_pruned_flows() {
    let net = micro(1);
    let store = net.init_params::<f64>(9).unwrap();
    let body = &net.pruned[0].as_ref().unwrap().body;
    let shape = net.base.infer_shapes().unwrap().block_inputs[0].clone();
    let mut s = vec![2];
    s.extend(shape);
    let x = Tensor::<f64>::randn(s, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let y = eval_segment(&mut tape, body, xv, &mut ctx).unwrap();
    assert_eq!(tape.value(y).data(), predict(body, &store, &x).unwrap().data());
}

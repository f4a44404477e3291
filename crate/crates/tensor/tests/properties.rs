use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use updp_tensor::kernels::{batchnorm_eval, conv2d, conv2d_reference, Conv2dGeom};
use updp_tensor::{ParamStore, Sgd, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_without_bias(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0,
                                   groups in 1usize..3, stride in 1usize..3, pad in 0usize..2) {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(vec![2, 2 * groups, 5, 4], 1.0, &mut r);
        let y = Tensor::<f64>::randn(vec![2, 2 * groups, 5, 4], 1.0, &mut r);
        let w = Tensor::<f64>::randn(vec![2 * groups, 2, 3, 3], 1.0, &mut r);
        let g = Conv2dGeom::new(stride, pad, groups);
        let combo = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv2d(&combo, &w, None, &g).unwrap();
        let rhs = conv2d(&x, &w, None, &g).unwrap().scale(a)
            .add(&conv2d(&y, &w, None, &g).unwrap().scale(b)).unwrap();
        let scale = 1.0 + rhs.max_abs();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12 * scale);
    }

    #[test]
    fn im2col_matches_reference(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5]),
                                stride in 1usize..3, pad in 0usize..3) {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(vec![1, 3, 7, 6], 1.0, &mut r);
        let w = Tensor::<f64>::randn(vec![4, 3, k, k], 1.0, &mut r);
        let b = Tensor::<f64>::randn(vec![4], 1.0, &mut r);
        let g = Conv2dGeom::new(stride, pad, 1);
        let fast = conv2d(&x, &w, Some(&b), &g).unwrap();
        let slow = conv2d_reference(&x, &w, Some(&b), &g).unwrap();
        for (f, s) in fast.data().iter().zip(slow.data()) {
            prop_assert!((f - s).abs() <= 1e-6 * s.abs().max(1.0));
        }
    }

    #[test]
    fn eval_batchnorm_is_affine(seed in any::<u64>(), a in -2.0f64..2.0) {
        let mut r = rng(seed);
        let c = 3;
        let gamma = Tensor::<f64>::randn(vec![c], 1.0, &mut r);
        let beta = Tensor::<f64>::randn(vec![c], 1.0, &mut r);
        let mean = Tensor::<f64>::randn(vec![c], 1.0, &mut r);
        let var = Tensor::<f64>::uniform(vec![c], 0.1, 2.0, &mut r);
        let bn = |x: &Tensor<f64>| batchnorm_eval(x, &gamma, &beta, &mean, &var, 1e-5).unwrap().output;
        let x = Tensor::<f64>::randn(vec![2, c, 2, 2], 1.0, &mut r);
        let y = Tensor::<f64>::randn(vec![2, c, 2, 2], 1.0, &mut r);
        let zero = bn(&Tensor::zeros(vec![2, c, 2, 2]));
        let lin = |t: &Tensor<f64>| bn(t).sub(&zero).unwrap();
        let lhs = lin(&x.scale(a).add(&y).unwrap());
        let rhs = lin(&x).scale(a).add(&lin(&y)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut r = rng(seed);
            let x = Tensor::<f32>::randn(vec![2, 3, 6, 6], 1.0, &mut r);
            let w = Tensor::<f32>::randn(vec![4, 3, 3, 3], 0.3, &mut r);
            let mut t = Tape::new();
            let xv = t.input(x);
            let wv = t.input(w);
            let y = t.conv2d(xv, wv, None, Conv2dGeom::new(1, 1, 1)).unwrap();
            let loss = t.sum(y);
            let g = t.backward(loss).unwrap();
            (t.value(y).clone(), g.get(wv).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn linear_weight_gradient_is_broadcast_input() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("w", Tensor::full(vec![2, 3], 0.7), true);
    let x = Tensor::new(vec![1, 3], vec![1.0, -2.0, 4.0]).unwrap();
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let w = t.param(&store, id);
    let y = t.linear(xv, w, None).unwrap();
    let loss = t.sum(y);
    t.backward(loss).unwrap().accumulate_into(&mut store).unwrap();
    assert_eq!(store.leaf(id).grad.data(), &[1.0, -2.0, 4.0, 1.0, -2.0, 4.0]);
}

#[test]
fn repeated_backward_doubles_gradients() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("w", Tensor::full(vec![3], 0.5), true);
    let mut t = Tape::new();
    let w = t.param(&store, id);
    let sq = t.activation(w, updp_tensor::Activation::Gelu);
    let loss = t.sum(sq);
    let grads = t.backward(loss).unwrap();
    grads.accumulate_into(&mut store).unwrap();
    let once = store.leaf(id).grad.clone();
    t.backward(loss).unwrap().accumulate_into(&mut store).unwrap();
    assert_eq!(store.leaf(id).grad, once.scale(2.0));
}

#[test]
fn sgd_trivial_cases() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("p", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), true);
    store.accumulate_grad(id, &Tensor::new(vec![2], vec![3.0, 5.0]).unwrap()).unwrap();
    Sgd::new(0.0, 0.9, 0.1).step(&mut store);
    assert_eq!(store.leaf(id).value.data(), &[1.0, -1.0]);
    Sgd::new(0.5, 0.0, 0.0).step(&mut store);
    assert_eq!(store.leaf(id).value.data(), &[-0.5, -3.5]);
    store.zero_grad();
    assert!(store.leaf(id).grad.data().iter().all(|&g| g == 0.0));
}

//! Catalogue of finite-difference checks covering every differentiable tape
//! op. Each check draws random double-precision instances from its own seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::finite_diff_check;
use crate::error::Result;
use crate::kernels::{Activation, Conv2dGeom};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const TOL: f64 = 1e-6;
pub const STEP: f64 = 1e-4;

type OpFn = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;
type CaseFn = Box<dyn Fn(&mut ChaCha8Rng) -> (Tensor<f64>, OpFn)>;

/// One op argument under test.
pub struct OpCheck {
    pub name: String,
    seed: u64,
    case: CaseFn,
}

impl OpCheck {
    /// Worst relative error over `instances` random cases, with the index of
    /// the worst instance.
    pub fn run(&self, instances: u64) -> Result<(f64, u64)> {
        let mut worst = (0.0f64, 0);
        for i in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed * 1000 + i);
            let (point, f) = (self.case)(&mut rng);
            let err = finite_diff_check(f, &point, STEP)?;
            if err > worst.0 || i == 0 {
                worst = (err, i);
            }
        }
        Ok(worst)
    }
}

pub struct Suite(Vec<OpCheck>);

impl Suite {
    fn add<F>(&mut self, name: &str, seed: u64, case: impl Fn(&mut ChaCha8Rng) -> (Tensor<f64>, F) + 'static)
    where
        F: Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static,
    {
        self.0.push(OpCheck {
            name: name.to_string(),
            seed,
            case: Box::new(move |rng| {
                let (p, f) = case(rng);
                (p, Box::new(f) as OpFn)
            }),
        });
    }
}

/// Every check, in a fixed order.
pub fn op_checks() -> Vec<OpCheck> {
    let mut s = Suite(Vec::new());
    for group in [
        conv2d_input,
        conv2d_weight,
        conv2d_bias,
        linear_all_arguments,
        batchnorm_train_all_arguments,
        batchnorm_eval_all_arguments,
        layernorm_all_arguments,
        groupnorm_all_arguments,
        activations,
        elementwise_combinators,
        layout_ops,
        attention_qkv,
        cross_entropy_logits,
        composed_block,
    ] {
        group(&mut s);
    }
    s.0
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Values bounded away from the kinks at 0 and 6.
fn kink_free(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let region = rng.gen_range(0..3);
        match region {
            0 => rng.gen_range(-3.0..-0.05),
            1 => rng.gen_range(0.05..5.95),
            _ => rng.gen_range(6.05..8.0),
        }
    })
}

fn conv_case(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>, Conv2dGeom) {
    let groups = [1, 2][rng.gen_range(0..2)];
    let cin = groups * rng.gen_range(1..3);
    let cout = groups * rng.gen_range(1..3);
    let k = [1, 3][rng.gen_range(0..2)];
    let stride = rng.gen_range(1..3);
    let pad = rng.gen_range(0..=k / 2 + 1);
    let h = rng.gen_range(3..6);
    (
        vec![rng.gen_range(1..3), cin, h, h + 1],
        vec![cout, cin / groups, k, k],
        Conv2dGeom::new(stride, pad, groups),
    )
}

fn conv2d_input(s: &mut Suite) {
    s.add("conv2d/input", 1, |rng| {
        let (xs, ws, g) = conv_case(rng);
        let w = randn(&ws, rng);
        let b = randn(&[ws[0]], rng);
        (randn(&xs, rng), move |t: &mut Tape<f64>, x: Var| {
            let w = t.constant(w.clone());
            let b = t.constant(b.clone());
            t.conv2d(x, w, Some(b), g)
        })
    });
}

fn conv2d_weight(s: &mut Suite) {
    s.add("conv2d/weight", 2, |rng| {
        let (xs, ws, g) = conv_case(rng);
        let x = randn(&xs, rng);
        (randn(&ws, rng), move |t: &mut Tape<f64>, w: Var| {
            let x = t.constant(x.clone());
            t.conv2d(x, w, None, g)
        })
    });
}

fn conv2d_bias(s: &mut Suite) {
    s.add("conv2d/bias", 3, |rng| {
        let (xs, ws, g) = conv_case(rng);
        let x = randn(&xs, rng);
        let w = randn(&ws, rng);
        (randn(&[ws[0]], rng), move |t: &mut Tape<f64>, b: Var| {
            let x = t.constant(x.clone());
            let w = t.constant(w.clone());
            t.conv2d(x, w, Some(b), g)
        })
    });
}

fn linear_dims(rng: &mut ChaCha8Rng) -> (Vec<usize>, usize) {
    let cin = rng.gen_range(1..6);
    let mut xs = vec![rng.gen_range(1..4)];
    if rng.gen_bool(0.5) {
        xs.push(rng.gen_range(1..4));
    }
    xs.push(cin);
    (xs, rng.gen_range(1..5))
}

fn linear_all_arguments(s: &mut Suite) {
    s.add("linear/input", 4, |rng| {
        let (xs, cout) = linear_dims(rng);
        let w = randn(&[cout, xs[xs.len() - 1]], rng);
        let b = randn(&[cout], rng);
        (randn(&xs, rng), move |t: &mut Tape<f64>, x: Var| {
            let w = t.constant(w.clone());
            let b = t.constant(b.clone());
            t.linear(x, w, Some(b))
        })
    });
    s.add("linear/weight", 5, |rng| {
        let (xs, cout) = linear_dims(rng);
        let ws = [cout, xs[xs.len() - 1]];
        let x = randn(&xs, rng);
        (randn(&ws, rng), move |t: &mut Tape<f64>, w: Var| {
            let x = t.constant(x.clone());
            t.linear(x, w, None)
        })
    });
    s.add("linear/bias", 6, |rng| {
        let (xs, cout) = linear_dims(rng);
        let x = randn(&xs, rng);
        let w = randn(&[cout, xs[xs.len() - 1]], rng);
        (randn(&[cout], rng), move |t: &mut Tape<f64>, b: Var| {
            let x = t.constant(x.clone());
            let w = t.constant(w.clone());
            t.linear(x, w, Some(b))
        })
    });
}

/// NCHW or token-layout `[N, L, D]` shapes for the norm ops.
fn norm_shape(rng: &mut ChaCha8Rng) -> (Vec<usize>, usize) {
    if rng.gen_bool(0.5) {
        let c = rng.gen_range(1..4);
        (vec![rng.gen_range(2..4), c, rng.gen_range(1..3), rng.gen_range(2..4)], c)
    } else {
        let d = rng.gen_range(2..5);
        (vec![rng.gen_range(1..3), rng.gen_range(2..4), d], d)
    }
}

fn batchnorm_train_all_arguments(s: &mut Suite) {
    s.add("batchnorm_train/input", 7, |rng| {
        let (xs, c) = norm_shape(rng);
        let g = randn(&[c], rng);
        let b = randn(&[c], rng);
        (randn(&xs, rng), move |t: &mut Tape<f64>, x: Var| {
            let g = t.constant(g.clone());
            let b = t.constant(b.clone());
            Ok(t.batchnorm_train(x, g, b, 1e-5)?.0)
        })
    });
    s.add("batchnorm_train/gamma", 8, |rng| {
        let (xs, c) = norm_shape(rng);
        let x = randn(&xs, rng);
        let b = randn(&[c], rng);
        (randn(&[c], rng), move |t: &mut Tape<f64>, g: Var| {
            let x = t.constant(x.clone());
            let b = t.constant(b.clone());
            Ok(t.batchnorm_train(x, g, b, 1e-5)?.0)
        })
    });
    s.add("batchnorm_train/beta", 9, |rng| {
        let (xs, c) = norm_shape(rng);
        let x = randn(&xs, rng);
        let g = randn(&[c], rng);
        (randn(&[c], rng), move |t: &mut Tape<f64>, b: Var| {
            let x = t.constant(x.clone());
            let g = t.constant(g.clone());
            Ok(t.batchnorm_train(x, g, b, 1e-5)?.0)
        })
    });
}

fn stats(c: usize, rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>) {
    (randn(&[c], rng), Tensor::uniform(vec![c], 0.2, 2.0, rng))
}

fn batchnorm_eval_all_arguments(s: &mut Suite) {
    s.add("batchnorm_eval/input", 10, |rng| {
        let (xs, c) = norm_shape(rng);
        let (g, b) = (randn(&[c], rng), randn(&[c], rng));
        let (m, v) = stats(c, rng);
        (randn(&xs, rng), move |t: &mut Tape<f64>, x: Var| {
            let g = t.constant(g.clone());
            let b = t.constant(b.clone());
            t.batchnorm_eval(x, g, b, &m, &v, 1e-5)
        })
    });
    s.add("batchnorm_eval/gamma", 11, |rng| {
        let (xs, c) = norm_shape(rng);
        let (x, b) = (randn(&xs, rng), randn(&[c], rng));
        let (m, v) = stats(c, rng);
        (randn(&[c], rng), move |t: &mut Tape<f64>, g: Var| {
            let x = t.constant(x.clone());
            let b = t.constant(b.clone());
            t.batchnorm_eval(x, g, b, &m, &v, 1e-5)
        })
    });
}

fn layernorm_all_arguments(s: &mut Suite) {
    s.add("layernorm/input", 12, |rng| {
        let (xs, c) = norm_shape(rng);
        let (g, b) = (randn(&[c], rng), randn(&[c], rng));
        (randn(&xs, rng), move |t: &mut Tape<f64>, x: Var| {
            let g = t.constant(g.clone());
            let b = t.constant(b.clone());
            t.layernorm(x, g, b, 1e-6)
        })
    });
    s.add("layernorm/gamma", 13, |rng| {
        let (xs, c) = norm_shape(rng);
        let (x, b) = (randn(&xs, rng), randn(&[c], rng));
        (randn(&[c], rng), move |t: &mut Tape<f64>, g: Var| {
            let x = t.constant(x.clone());
            let b = t.constant(b.clone());
            t.layernorm(x, g, b, 1e-6)
        })
    });
    s.add("layernorm/beta", 14, |rng| {
        let (xs, c) = norm_shape(rng);
        let (x, g) = (randn(&xs, rng), randn(&[c], rng));
        (randn(&[c], rng), move |t: &mut Tape<f64>, b: Var| {
            let x = t.constant(x.clone());
            let g = t.constant(g.clone());
            t.layernorm(x, g, b, 1e-6)
        })
    });
}

fn groupnorm_shape(rng: &mut ChaCha8Rng) -> (Vec<usize>, usize, usize) {
    let groups = rng.gen_range(1..3);
    let c = groups * rng.gen_range(1..3);
    (vec![rng.gen_range(1..3), c, rng.gen_range(1..3), rng.gen_range(2..4)], c, groups)
}

fn groupnorm_all_arguments(s: &mut Suite) {
    s.add("groupnorm/input", 15, |rng| {
        let (xs, c, groups) = groupnorm_shape(rng);
        let (g, b) = (randn(&[c], rng), randn(&[c], rng));
        (randn(&xs, rng), move |t: &mut Tape<f64>, x: Var| {
            let g = t.constant(g.clone());
            let b = t.constant(b.clone());
            t.groupnorm(x, groups, g, b, 1e-5)
        })
    });
    s.add("groupnorm/gamma", 16, |rng| {
        let (xs, c, groups) = groupnorm_shape(rng);
        let (x, b) = (randn(&xs, rng), randn(&[c], rng));
        (randn(&[c], rng), move |t: &mut Tape<f64>, g: Var| {
            let x = t.constant(x.clone());
            let b = t.constant(b.clone());
            t.groupnorm(x, groups, g, b, 1e-5)
        })
    });
}

fn activations(s: &mut Suite) {
    for (i, act) in [Activation::Relu, Activation::Relu6, Activation::Gelu, Activation::Identity]
        .into_iter()
        .enumerate()
    {
        s.add(&format!("activation/{act:?}"), 20 + i as u64, move |rng| {
            let shape = [rng.gen_range(1..4), rng.gen_range(1..6)];
            (kink_free(&shape, rng), move |t: &mut Tape<f64>, x: Var| Ok(t.activation(x, act)))
        });
    }
}

fn elementwise_combinators(s: &mut Suite) {
    s.add("add", 30, |rng| {
        let shape = [rng.gen_range(1..4), rng.gen_range(1..4)];
        let other = randn(&shape, rng);
        (randn(&shape, rng), move |t: &mut Tape<f64>, x: Var| {
            let o = t.constant(other.clone());
            let s = t.add(x, o)?;
            t.add(s, x)
        })
    });
    s.add("scale", 31, |rng| {
        let s: f64 = rng.gen_range(-2.0..2.0);
        (randn(&[3, 2], rng), move |t: &mut Tape<f64>, x: Var| Ok(t.scale(x, s)))
    });
    s.add("mix", 32, |rng| {
        let lambda: f64 = rng.gen_range(0.0..1.0);
        let other = randn(&[2, 3], rng);
        (randn(&[2, 3], rng), move |t: &mut Tape<f64>, x: Var| {
            let o = t.constant(other.clone());
            let a = t.mix(x, o, lambda)?;
            let sq = t.scale(x, 2.0);
            t.mix(a, sq, lambda)
        })
    });
    s.add("sum", 33, |rng| {
        (randn(&[rng.gen_range(1..5)], rng), |t: &mut Tape<f64>, x: Var| Ok(t.sum(x)))
    });
    s.add("dot", 34, |rng| {
        let w = randn(&[4], rng);
        (randn(&[4], rng), move |t: &mut Tape<f64>, x: Var| t.dot(x, &w))
    });
}

fn layout_ops(s: &mut Suite) {
    s.add("pad", 40, |rng| {
        let c = rng.gen_range(1..3);
        let fill: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = [rng.gen_range(0..3), rng.gen_range(0..3)];
        (randn(&[2, c, 2, 3], rng), move |t: &mut Tape<f64>, x: Var| t.pad(x, p, &fill))
    });
    s.add("max_pool", 52, |rng| {
        // A shuffled, well-separated grid keeps every window maximum unique under perturbation.
        let h = rng.gen_range(3..6);
        let n = 2 * 2 * h * h;
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        for i in (1..n).rev() {
            vals.swap(i, rng.gen_range(0..=i));
        }
        let (k, s) = (rng.gen_range(2..4), rng.gen_range(1..3));
        let p = rng.gen_range(0..k.min(2));
        (Tensor::new(vec![2, 2, h, h], vals).unwrap(), move |t: &mut Tape<f64>, x: Var| t.max_pool(x, k, s, p))
    });
    s.add("global_avg_pool", 41, |rng| {
        (randn(&[2, 3, rng.gen_range(1..4), 2], rng), |t: &mut Tape<f64>, x: Var| t.global_avg_pool(x))
    });
    s.add("flatten", 42, |rng| {
        (randn(&[2, 3, 2, 2], rng), |t: &mut Tape<f64>, x: Var| t.flatten(x))
    });
    s.add("to_tokens", 43, |rng| {
        (randn(&[2, 3, 2, rng.gen_range(1..4)], rng), |t: &mut Tape<f64>, x: Var| t.to_tokens(x))
    });
    s.add("select_first_token", 44, |rng| {
        (randn(&[2, 3, 4], rng), |t: &mut Tape<f64>, x: Var| t.select_first_token(x))
    });
    s.add("class_token/input", 45, |rng| {
        let (l, d) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let cls = randn(&[d], rng);
        let pos = randn(&[l + 1, d], rng);
        (randn(&[2, l, d], rng), move |t: &mut Tape<f64>, x: Var| {
            let c = t.constant(cls.clone());
            let p = t.constant(pos.clone());
            t.class_token(x, c, p)
        })
    });
    s.add("class_token/cls", 46, |rng| {
        let (l, d) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let x = randn(&[2, l, d], rng);
        let pos = randn(&[l + 1, d], rng);
        (randn(&[d], rng), move |t: &mut Tape<f64>, c: Var| {
            let x = t.constant(x.clone());
            let p = t.constant(pos.clone());
            t.class_token(x, c, p)
        })
    });
    s.add("class_token/pos", 47, |rng| {
        let (l, d) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let x = randn(&[2, l, d], rng);
        let cls = randn(&[d], rng);
        (randn(&[l + 1, d], rng), move |t: &mut Tape<f64>, p: Var| {
            let x = t.constant(x.clone());
            let c = t.constant(cls.clone());
            t.class_token(x, c, p)
        })
    });
    s.add("channel_scale/input", 48, |rng| {
        let (xs, c) = norm_shape(rng);
        let g = randn(&[c], rng);
        (randn(&xs, rng), move |t: &mut Tape<f64>, x: Var| {
            let g = t.constant(g.clone());
            t.channel_scale(x, g)
        })
    });
    s.add("channel_scale/gamma", 49, |rng| {
        let (xs, c) = norm_shape(rng);
        let x = randn(&xs, rng);
        (randn(&[c], rng), move |t: &mut Tape<f64>, g: Var| {
            let x = t.constant(x.clone());
            t.channel_scale(x, g)
        })
    });
    s.add("position_bias/input", 50, |rng| {
        let map = randn(&[2, 2, 3], rng);
        (randn(&[2, 2, 2, 3], rng), move |t: &mut Tape<f64>, x: Var| {
            let m = t.constant(map.clone());
            t.position_bias(x, m)
        })
    });
    s.add("position_bias/map", 51, |rng| {
        let x = randn(&[2, 2, 2, 3], rng);
        (randn(&[2, 2, 3], rng), move |t: &mut Tape<f64>, m: Var| {
            let x = t.constant(x.clone());
            t.position_bias(x, m)
        })
    });
}

fn attention_qkv(s: &mut Suite) {
    s.add("attention", 60, |rng| {
        let heads = rng.gen_range(1..3);
        let d = heads * rng.gen_range(1..3);
        let l = rng.gen_range(1..4);
        (randn(&[rng.gen_range(1..3), l, 3 * d], rng), move |t: &mut Tape<f64>, x: Var| {
            t.attention(x, heads)
        })
    });
}

fn cross_entropy_logits(s: &mut Suite) {
    s.add("cross_entropy", 70, |rng| {
        let (n, c) = (rng.gen_range(1..5), rng.gen_range(2..6));
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        (randn(&[n, c], rng), move |t: &mut Tape<f64>, x: Var| t.cross_entropy(x, &labels))
    });
}

fn composed_block(s: &mut Suite) {
    // conv → BN(train) → GELU → global pool → linear → CE, differentiated w.r.t. the input.
    s.add("composed", 80, |rng| {
        let w = randn(&[3, 2, 3, 3], rng);
        let fc = randn(&[4, 3], rng);
        let labels = vec![rng.gen_range(0..4), rng.gen_range(0..4)];
        (randn(&[2, 2, 4, 4], rng), move |t: &mut Tape<f64>, x: Var| {
            let w = t.constant(w.clone());
            let y = t.conv2d(x, w, None, Conv2dGeom::new(1, 1, 1))?;
            let g = t.constant(Tensor::ones(vec![3]));
            let b = t.constant(Tensor::zeros(vec![3]));
            let (y, _) = t.batchnorm_train(y, g, b, 1e-5)?;
            let y = t.activation(y, Activation::Gelu);
            let y = t.global_avg_pool(y)?;
            let fc = t.constant(fc.clone());
            let y = t.linear(y, fc, None)?;
            t.cross_entropy(y, &labels)
        })
    });
}

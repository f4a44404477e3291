//! Progressive subnet training. Stage one blends each selected block's
//! baseline and pruned flows, `o = (1−λ)·B_b(x) + λ·B_p(x)`, with λ rising
//! from 0 to 1 over the first `T/K` epochs; stage two finetunes the pure
//! pruned subnet. Structural preparation (padding/stride migration, kernel
//! shrinking) lives here too.

use std::f64::consts::FRAC_PI_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use updp_tensor::{Element, ParamStore, Tape, Tensor, Var};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{eval_segment, materialize_params, BlockSpec, Ctx, Derive, LayerKind, Mode, Model, Segment};
use crate::supernet::{PruneMask, Supernet};
use crate::train::{accuracy, cosine_lr, epoch_batches, forward_backward, train_batch, OptimConfig};

const EVAL_BATCH: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    #[serde(rename = "K")]
    pub k: f64,
    /// Total training epochs.
    #[serde(rename = "T")]
    pub t: usize,
}

impl LambdaSchedule {
    pub fn new(k: f64, t: usize) -> Result<Self> {
        let s = LambdaSchedule { k, t };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 1.0) || !self.k.is_finite() || self.t == 0 {
            return Err(Error::Config(format!("lambda schedule needs K ≥ 1 and T ≥ 1, got K = {}, T = {}", self.k, self.t)));
        }
        Ok(())
    }

    /// `T/K`, the epoch at which λ reaches 1.
    pub fn transition(&self) -> f64 {
        self.t as f64 / self.k
    }

    /// First epoch of the finetuning stage (λ = 1).
    pub fn stage_two_start(&self) -> usize {
        self.transition().ceil() as usize
    }
}

/// λ at epoch `c`: `1 − max(0, cos(c·K/T · π/2))` before `T/K`, 1 from then on.
pub fn lambda_at(schedule: &LambdaSchedule, c: i64) -> Result<f64> {
    schedule.validate()?;
    if c < 0 || c as usize > schedule.t {
        return Err(Error::Config(format!("epoch {c} outside [0, {}]", schedule.t)));
    }
    let c = c as f64;
    if c >= schedule.transition() {
        return Ok(1.0);
    }
    Ok(1.0 - (c * schedule.k / schedule.t as f64 * FRAC_PI_2).cos().max(0.0))
}

/// Convex combination of the two flows of one block.
pub fn mixed_forward<T: Element>(
    tape: &mut Tape<T>,
    baseline: &Segment,
    pruned: &Segment,
    x: Var,
    ctx: &mut Ctx<'_, T>,
    lambda: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("λ = {lambda} outside [0, 1]")));
    }
    if lambda == 0.0 {
        return eval_segment(tape, baseline, x, ctx);
    }
    if lambda == 1.0 {
        return eval_segment(tape, pruned, x, ctx);
    }
    let b = eval_segment(tape, baseline, x, ctx)?;
    let p = eval_segment(tape, pruned, x, ctx)?;
    Ok(tape.mix(b, p, T::from_f64(lambda))?)
}

fn conv_mut(block: &mut BlockSpec, i: usize) -> &mut crate::graph::ConvSpec {
    match &mut block.body.nodes[i].kind {
        LayerKind::Conv(c) => c,
        _ => unreachable!("main_convs yields convolutions"),
    }
}

/// Moves the summed padding of the main-branch convolutions onto the first one.
pub fn migrate_padding(block: &BlockSpec) -> BlockSpec {
    let mut out = block.clone();
    let convs = out.main_convs();
    if convs.len() < 2 {
        return out;
    }
    let mut total = [0, 0];
    for &i in &convs {
        let c = conv_mut(&mut out, i);
        total = [total[0] + c.padding[0], total[1] + c.padding[1]];
        c.padding = [0, 0];
    }
    conv_mut(&mut out, convs[0]).padding = total;
    out
}

/// Moves the product of the main-branch strides onto the last convolution.
pub fn migrate_stride(block: &BlockSpec) -> BlockSpec {
    let mut out = block.clone();
    let convs = out.main_convs();
    if convs.len() < 2 {
        return out;
    }
    let mut total = [1, 1];
    for &i in &convs {
        let c = conv_mut(&mut out, i);
        total = [total[0] * c.stride[0], total[1] * c.stride[1]];
        c.stride = [1, 1];
    }
    conv_mut(&mut out, *convs.last().expect("two or more")).stride = total;
    out
}

/// Errors unless `changed` maps `input` to the same shape as `original`.
pub fn check_shape_preserved(original: &BlockSpec, changed: &BlockSpec, input: &[usize]) -> Result<()> {
    let want = original.body.out_shape(input)?;
    let got = changed.body.out_shape(input).map_err(|e| Error::block(&changed.name, format!("after migration: {e}")))?;
    if want != got {
        return Err(Error::block(&changed.name, format!("migration changed the output shape {want:?} → {got:?} for input {input:?}")));
    }
    Ok(())
}

/// Stride then padding migration, checked for shape preservation.
pub fn migrate(block: &BlockSpec, input: &[usize]) -> Result<BlockSpec> {
    let out = migrate_padding(&migrate_stride(block));
    check_shape_preserved(block, &out, input)?;
    Ok(out)
}

/// Replaces the conv named `node` by a 1×1 conv holding its kernel's center
/// tap. The new weight lives under `{key}.center`, cropped from the current
/// weight when parameters are materialized.
pub fn shrink_kernel_to_center(block: &BlockSpec, node: &str) -> Result<BlockSpec> {
    let mut out = block.clone();
    let (i, _) = out.body.node(node).ok_or_else(|| Error::block(&block.name, format!("no node `{node}`")))?;
    let n = &mut out.body.nodes[i];
    let LayerKind::Conv(c) = &mut n.kind else {
        return Err(Error::block(&block.name, format!("`{node}` is not a convolution")));
    };
    let [kh, kw] = c.kernel;
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::block(&block.name, format!("`{node}` has even kernel {kh}×{kw}; no center tap")));
    }
    let (rh, rw) = (kh / 2, kw / 2);
    if c.padding[0] < rh || c.padding[1] < rw {
        return Err(Error::block(&block.name, format!("`{node}` padding {:?} is below the kernel radius", c.padding)));
    }
    c.kernel = [1, 1];
    c.padding = [c.padding[0] - rh, c.padding[1] - rw];
    n.derive = Some(Derive::CenterCrop { from: n.param_key.clone() });
    n.param_key = format!("{}.center", n.param_key);
    Ok(out)
}

/// Main-branch dense k×k convs that must become 1×1 before merging: all but
/// the last when a block holds two or more.
pub fn shrink_targets(block: &BlockSpec) -> Vec<String> {
    let spatial: Vec<usize> = block
        .main_convs()
        .into_iter()
        .filter(|&i| block.body.nodes[i].conv().is_some_and(|c| c.groups == 1 && !c.is_pointwise()))
        .collect();
    if spatial.len() < 2 {
        return Vec::new();
    }
    spatial[..spatial.len() - 1].iter().map(|&i| block.body.nodes[i].name.clone()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveConfig {
    pub schedule: LambdaSchedule,
    pub optim: OptimConfig,
    /// Epoch at which spatial kernels are shrunk to their center; `None` disables it.
    #[serde(default)]
    pub shrink_milestone: Option<usize>,
    /// Migrate padding and stride before training.
    #[serde(default = "yes")]
    pub migrate: bool,
    /// Train the pruned subnet directly (λ = 1 from epoch 0).
    #[serde(default)]
    pub direct: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl ProgressiveConfig {
    /// Defaults with the shrink milestone at `round(2T/3)`.
    pub fn new(k: f64, t: usize) -> Self {
        ProgressiveConfig {
            schedule: LambdaSchedule { k, t },
            optim: OptimConfig::default(),
            shrink_milestone: Some(default_milestone(t)),
            migrate: true,
            direct: false,
            seed: 0,
        }
    }

    pub fn lambda(&self, epoch: usize) -> Result<f64> {
        if self.direct {
            return Ok(1.0);
        }
        lambda_at(&self.schedule, epoch as i64)
    }

    /// Constant rate through stage one, cosine decay to zero over stage two.
    pub fn lr(&self, epoch: usize) -> f64 {
        let s2 = self.schedule.stage_two_start().min(self.schedule.t);
        if epoch < s2 {
            self.optim.lr
        } else {
            cosine_lr(self.optim.lr, epoch - s2, self.schedule.t - s2)
        }
    }
}

pub fn default_milestone(t: usize) -> usize {
    (2.0 * t as f64 / 3.0).round() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedSubnet<T> {
    pub model: Model,
    pub params: ParamStore<T>,
    pub log: Vec<EpochLog>,
}

/// A supernet whose pruned flows exist only where `mask` is set.
fn masked_supernet(net: &Supernet, mask: &PruneMask) -> Supernet {
    Supernet {
        base: net.base.clone(),
        pruned: net.pruned.iter().enumerate().map(|(i, p)| p.clone().filter(|_| mask.get(i))).collect(),
    }
}

fn forward_mixed<T: Element>(net: &Supernet, tape: &mut Tape<T>, x: Var, ctx: &mut Ctx<'_, T>, lambda: f64) -> Result<Var> {
    net.base.forward_with(tape, x, ctx, |tape, i, h, ctx| match &net.pruned[i] {
        Some(p) => mixed_forward(tape, &net.base.blocks[i].body, &p.body, h, ctx, lambda),
        None => eval_segment(tape, &net.base.blocks[i].body, h, ctx),
    })
}

/// Eval-mode logits of the blended network.
pub fn predict_mixed<T: Element>(net: &Supernet, params: &ParamStore<T>, x: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let mut ctx = Ctx::new(params, Mode::Eval);
    let y = forward_mixed(net, &mut tape, xv, &mut ctx, lambda)?;
    Ok(tape.value(y).clone())
}

/// Trains the subnet selected by `mask` starting from supernet weights and
/// returns it with exactly the parameters it reads.
pub fn train_subnet<T: Element>(
    net: &Supernet,
    params: &ParamStore<T>,
    mask: &PruneMask,
    train: &Dataset,
    val: &Dataset,
    cfg: &ProgressiveConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainedSubnet<T>> {
    net.check_mask(mask)?;
    cfg.schedule.validate()?;
    cfg.optim.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Training("subnet training needs non-empty train and validation sets".into()));
    }
    let mut work = masked_supernet(net, mask);
    if cfg.migrate {
        let shapes = net.base.infer_shapes()?;
        for (i, p) in work.pruned.iter_mut().enumerate() {
            if let Some(p) = p {
                *p = migrate(p, &shapes.block_inputs[i])?;
            }
        }
    }
    let mut store = params.clone();
    materialize_params(work.segments(), &mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = cfg.optim.sgd::<T>();
    let mut log = Vec::with_capacity(cfg.schedule.t);
    store.zero_grad();
    for epoch in 0..cfg.schedule.t {
        if cfg.shrink_milestone == Some(epoch) {
            for p in work.pruned.iter_mut().flatten() {
                for name in shrink_targets(p) {
                    *p = shrink_kernel_to_center(p, &name)?;
                }
            }
            materialize_params(work.segments(), &mut store, &mut rng)?;
        }
        let lambda = cfg.lambda(epoch)?;
        let lr = cfg.lr(epoch);
        sgd.lr = T::from_f64(lr);
        let mut total = 0.0;
        let mut steps = 0;
        for idx in epoch_batches(train.len(), cfg.optim.batch_size, &mut rng) {
            let (x, y) = train_batch::<T, _>(train, &idx, &cfg.optim, &mut rng);
            let loss = forward_backward(&mut store, &x, &y, |tape, xv, ctx| forward_mixed(&work, tape, xv, ctx, lambda))?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
            }
            sgd.step(&mut store);
            store.zero_grad();
            total += loss;
            steps += 1;
        }
        let eval_acc = accuracy(val, EVAL_BATCH, |x| predict_mixed(&work, &store, x, lambda))?;
        let rec = EpochLog {
            epoch,
            lambda,
            lr,
            train_loss: total / steps as f64,
            eval_acc,
        };
        on_epoch(&rec);
        log.push(rec);
    }
    let model = work.subnet(mask)?;
    let names = model.param_names();
    let params = store.filtered(|n| names.contains(n));
    Ok(TrainedSubnet { model, params, log })
}

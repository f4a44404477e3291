//! Weight-sharing supernet: each prunable block carries a baseline flow and a
//! pruned flow; a binary mask picks one per block.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use updp_tensor::{Element, ParamStore, Tape, Tensor, Var};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{eval_segment, materialize_params, BlockSpec, Ctx, Mode, Model, Segment};
use crate::train::{epoch_batches, forward_backward, train_batch, OptimConfig};
use crate::zoo::pruned_blocks;

/// Bit `i` set means block `i` runs its pruned flow.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PruneMask(Vec<bool>);

impl PruneMask {
    pub fn new(bits: Vec<bool>) -> Self {
        PruneMask(bits)
    }

    pub fn zeros(n: usize) -> Self {
        PruneMask(vec![false; n])
    }

    pub fn ones(n: usize) -> Self {
        PruneMask(vec![true; n])
    }

    pub fn from_indices(n: usize, idx: &[usize]) -> Self {
        let mut bits = vec![false; n];
        for &i in idx {
            bits[i] = true;
        }
        PruneMask(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.0[i] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.0[i]).collect()
    }

    /// Clears bits where `allowed` is false.
    pub fn restrict(&self, allowed: &[bool]) -> Self {
        PruneMask(self.0.iter().zip(allowed).map(|(&b, &a)| b && a).collect())
    }
}

impl fmt::Display for PruneMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for PruneMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Mask(format!("`{other}` in mask `{s}`; use 0 and 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(PruneMask)
    }
}

impl Serialize for PruneMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PruneMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The four sandwich masks: all baseline, two independent Bernoulli(½) draws, all pruned.
pub fn sample_sandwich<R: Rng + ?Sized>(rng: &mut R, n: usize) -> [PruneMask; 4] {
    let mut random = || PruneMask((0..n).map(|_| rng.gen_bool(0.5)).collect());
    let (a, b) = (random(), random());
    [PruneMask::zeros(n), a, b, PruneMask::ones(n)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Supernet {
    pub base: Model,
    /// Pruned flow per block; `None` for blocks that always run the baseline.
    pub pruned: Vec<Option<BlockSpec>>,
}

impl Supernet {
    pub fn new(base: Model) -> Result<Self> {
        let pruned = pruned_blocks(&base)?;
        Ok(Supernet { base, pruned })
    }

    pub fn n_blocks(&self) -> usize {
        self.base.blocks.len()
    }

    /// Blocks that have a pruned flow.
    pub fn prunable(&self) -> Vec<bool> {
        self.pruned.iter().map(Option::is_some).collect()
    }

    pub fn check_mask(&self, mask: &PruneMask) -> Result<()> {
        if mask.len() != self.n_blocks() {
            return Err(Error::Mask(format!("mask has {} bits, model has {} blocks", mask.len(), self.n_blocks())));
        }
        if let Some(i) = (0..mask.len()).find(|&i| mask.get(i) && self.pruned[i].is_none()) {
            return Err(Error::Mask(format!("block {i} (`{}`) is not prunable", self.base.blocks[i].name)));
        }
        Ok(())
    }

    /// Baseline segments first, then the pruned flows.
    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.base.segments().chain(self.pruned.iter().flatten().map(|b| &b.body))
    }

    pub fn init_params<T: Element>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        materialize_params(self.segments(), &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(store)
    }

    /// Body executed for block `i` under `mask`.
    pub fn block_body(&self, i: usize, mask: &PruneMask) -> &Segment {
        match (&self.pruned[i], mask.get(i)) {
            (Some(p), true) => &p.body,
            _ => &self.base.blocks[i].body,
        }
    }

    pub fn forward_var<T: Element>(&self, tape: &mut Tape<T>, x: Var, ctx: &mut Ctx<'_, T>, mask: &PruneMask) -> Result<Var> {
        self.check_mask(mask)?;
        self.base
            .forward_with(tape, x, ctx, |tape, i, h, ctx| eval_segment(tape, self.block_body(i, mask), h, ctx))
    }

    /// Eval-mode logits under `mask`.
    pub fn forward<T: Element>(&self, params: &ParamStore<T>, x: &Tensor<T>, mask: &PruneMask) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let mut ctx = Ctx::new(params, Mode::Eval);
        let y = self.forward_var(&mut tape, xv, &mut ctx, mask)?;
        Ok(tape.value(y).clone())
    }

    /// The standalone network selected by `mask`.
    pub fn subnet(&self, mask: &PruneMask) -> Result<Model> {
        self.check_mask(mask)?;
        let mut model = self.base.clone();
        for (i, block) in model.blocks.iter_mut().enumerate() {
            if mask.get(i) {
                *block = self.pruned[i].clone().expect("checked");
            }
        }
        model.name = format!("{}-pruned-{mask}", self.base.name);
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub epochs: usize,
    pub optim: OptimConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig {
            epochs: 10,
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupernetEpoch {
    pub epoch: usize,
    /// Mean loss of each sandwich slot: all-baseline, two random, all-pruned.
    pub losses: [f64; 4],
}

/// Forward/backward of every mask on one batch, accumulating gradients in
/// `store`. Returns the per-mask losses.
pub fn accumulate_mask_grads<T: Element>(
    net: &Supernet,
    store: &mut ParamStore<T>,
    x: &Tensor<T>,
    labels: &[usize],
    masks: &[PruneMask],
) -> Result<Vec<f64>> {
    masks
        .iter()
        .map(|mask| forward_backward(store, x, labels, |tape, xv, ctx| net.forward_var(tape, xv, ctx, mask)))
        .collect()
}

/// Sandwich-rule training: per step the gradients of the four sampled
/// subnets are accumulated before one optimizer step.
pub fn train_supernet<T: Element>(
    net: &Supernet,
    store: &mut ParamStore<T>,
    data: &Dataset,
    cfg: &SupernetConfig,
    mut on_epoch: impl FnMut(&SupernetEpoch),
) -> Result<Vec<SupernetEpoch>> {
    if data.is_empty() {
        return Err(Error::Training("supernet training needs a non-empty dataset".into()));
    }
    cfg.optim.validate()?;
    let prunable = net.prunable();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = cfg.optim.sgd::<T>();
    let mut log = Vec::with_capacity(cfg.epochs);
    store.zero_grad();
    for epoch in 0..cfg.epochs {
        let mut sums = [0.0; 4];
        let mut steps = 0;
        for idx in epoch_batches(data.len(), cfg.optim.batch_size, &mut rng) {
            let masks = sample_sandwich(&mut rng, net.n_blocks()).map(|m| m.restrict(&prunable));
            let (x, y) = train_batch::<T, _>(data, &idx, &cfg.optim, &mut rng);
            let losses = accumulate_mask_grads(net, store, &x, &y, &masks)?;
            if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
                return Err(Error::Training(format!("non-finite supernet loss {bad} at epoch {epoch}")));
            }
            sgd.step(store);
            store.zero_grad();
            for (s, l) in sums.iter_mut().zip(&losses) {
                *s += l;
            }
            steps += 1;
        }
        let rec = SupernetEpoch {
            epoch,
            losses: sums.map(|s| s / steps as f64),
        };
        on_epoch(&rec);
        log.push(rec);
    }
    Ok(log)
}

//! Shared training-loop pieces: batching, one recorded forward/backward pass,
//! and accuracy evaluation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use updp_tensor::{Element, ParamStore, Sgd, Tape, Tensor, Var};

use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::graph::{apply_bn_updates, Ctx, Mode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Crop padding for flip-and-crop augmentation; `None` disables it.
    #[serde(default)]
    pub augment_pad: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment_pad: None,
        }
    }
}

impl OptimConfig {
    pub fn sgd<T: Element>(&self) -> Sgd<T> {
        Sgd::new(T::from_f64(self.lr), T::from_f64(self.momentum), T::from_f64(self.weight_decay))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Shuffled index batches covering the dataset once (the last may be short).
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Training batch, augmented when configured.
pub fn train_batch<T: Element, R: Rng + ?Sized>(data: &Dataset, idx: &[usize], cfg: &OptimConfig, rng: &mut R) -> (Tensor<T>, Vec<usize>) {
    let (mut x, y) = data.batch::<T>(idx);
    if let Some(pad) = cfg.augment_pad {
        augment(&mut x, pad, rng);
    }
    (x, y)
}

/// Records a train-mode forward built by `forward`, backpropagates the mean
/// cross-entropy, adds the gradients into `store` and applies the collected
/// running-statistics updates. Returns the loss.
pub fn forward_backward<T: Element>(
    store: &mut ParamStore<T>,
    x: &Tensor<T>,
    labels: &[usize],
    forward: impl FnOnce(&mut Tape<T>, Var, &mut Ctx<'_, T>) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut ctx = Ctx::new(store, Mode::Train);
    let logits = forward(&mut tape, xv, &mut ctx)?;
    let updates = std::mem::take(&mut ctx.updates);
    let loss = tape.cross_entropy(logits, labels)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).data()[0].as_f64();
    grads.accumulate_into(store)?;
    apply_bn_updates(store, updates)?;
    Ok(value)
}

/// Top-1 accuracy of eval-mode logits produced by `forward`.
pub fn accuracy<T: Element>(data: &Dataset, batch: usize, forward: impl Fn(&Tensor<T>) -> Result<Tensor<T>>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch::<T>(chunk);
        let logits = forward(&x)?;
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Row-wise argmax of `[N, C]` logits; ties go to the lowest class.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.dim(1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Cosine decay from `lr` at `step = 0` to zero at `step = total`.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batches_cover_every_index_once() {
        let b = epoch_batches(10, 4, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.into_iter().flatten().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 3.0, 3.0, 0.0, -1.0, -2.0]).unwrap();
        assert_eq!(argmax_rows::<f64>(&t), vec![1, 0]);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
    }
}

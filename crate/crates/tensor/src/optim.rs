use crate::element::Element;
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// SGD with momentum and L2 weight decay folded into the gradient:
/// `g' = g + wd·p`, `v = μ·v + g'` (first step `v = g'`), `p -= lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates every trainable parameter that received a gradient.
    /// Gradients are left in place; call `ParamStore::zero_grad` afterwards.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for id in store.ids().collect::<Vec<_>>() {
            let leaf = store.leaf_mut(id);
            if !leaf.trainable || !leaf.touched() {
                continue;
            }
            let wd = self.weight_decay;
            let g: Vec<T> = leaf
                .grad
                .data()
                .iter()
                .zip(leaf.value.data())
                .map(|(&g, &p)| g + wd * p)
                .collect();
            let v = match &mut self.velocity[id.0] {
                Some(v) if v.shape() == leaf.value.shape() => {
                    for (vi, gi) in v.data_mut().iter_mut().zip(&g) {
                        *vi = self.momentum * *vi + *gi;
                    }
                    v
                }
                slot => slot.insert(Tensor::new(leaf.value.shape().to_vec(), g).expect("param shape")),
            };
            for (p, &vi) in leaf.value.data_mut().iter_mut().zip(v.data()) {
                *p -= self.lr * vi;
            }
        }
    }

    /// Forgets all momentum buffers.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_momentum_steps_by_hand() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("p", Tensor::scalar(1.0), true);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        for _ in 0..2 {
            store.zero_grad();
            store.accumulate_grad(id, &Tensor::scalar(0.5)).unwrap();
            opt.step(&mut store);
        }
        // v1 = 0.5 -> 0.95; v2 = 0.9·0.5 + 0.5 = 0.95 -> 0.855
        assert!((store.leaf(id).value.item().unwrap() - 0.855).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_and_skips() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::scalar(2.0), true);
        let frozen = store.insert("frozen", Tensor::scalar(2.0), false);
        let idle = store.insert("idle", Tensor::scalar(2.0), true);
        store.accumulate_grad(a, &Tensor::scalar(0.0)).unwrap();
        store.accumulate_grad(frozen, &Tensor::scalar(1.0)).unwrap();
        Sgd::new(0.5, 0.0, 0.1).step(&mut store);
        assert!((store.leaf(a).value.item().unwrap() - 1.9).abs() < 1e-12);
        assert_eq!(store.leaf(frozen).value.item(), Some(2.0));
        assert_eq!(store.leaf(idle).value.item(), Some(2.0));
    }
}

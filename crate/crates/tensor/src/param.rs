//! Named parameter storage shared by every forward pass over a model.

use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamLeaf<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Buffers (running statistics, fixed maps) are stored with `trainable = false`.
    pub trainable: bool,
    touched: bool,
}

impl<T: Element> ParamLeaf<T> {
    fn new(value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        ParamLeaf {
            value,
            grad,
            trainable,
            touched: false,
        }
    }

    /// Whether a gradient has been accumulated since the last `zero_grad`.
    pub fn touched(&self) -> bool {
        self.touched
    }
}

/// Insertion-ordered map from parameter name to leaf.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    leaves: Vec<ParamLeaf<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            leaves: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Inserts a new parameter, or replaces the value of an existing one.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.leaves[id.0] = ParamLeaf::new(value, trainable);
            return id;
        }
        let id = ParamId(self.leaves.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.leaves.push(ParamLeaf::new(value, trainable));
        id
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn leaf(&self, id: ParamId) -> &ParamLeaf<T> {
        &self.leaves[id.0]
    }

    pub fn leaf_mut(&mut self, id: ParamId) -> &mut ParamLeaf<T> {
        &mut self.leaves[id.0]
    }

    pub fn get(&self, name: &str) -> Result<&ParamLeaf<T>> {
        Ok(self.leaf(self.id(name)?))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    /// Overwrites the value of an existing parameter, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name)?;
        let leaf = &mut self.leaves[id.0];
        leaf.value.expect_same_shape(&value, "set_value")?;
        leaf.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamLeaf<T>)> {
        self.names.iter().map(String::as_str).zip(self.leaves.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.leaves.len()).map(ParamId)
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let leaf = &mut self.leaves[id.0];
        leaf.grad.add_assign(grad)?;
        leaf.touched = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for leaf in &mut self.leaves {
            leaf.grad.fill(T::zero());
            leaf.touched = false;
        }
    }

    /// New store holding only the parameters accepted by `keep`, in the same order.
    pub fn filtered(&self, mut keep: impl FnMut(&str) -> bool) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, leaf) in self.iter() {
            if keep(name) {
                out.insert(name, leaf.value.clone(), leaf.trainable);
            }
        }
        out
    }

    /// Converts every value to another precision; gradients are reset.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, leaf) in self.iter() {
            out.insert(name, leaf.value.cast(), leaf.trainable);
        }
        out
    }

    /// Total element count of trainable parameters.
    pub fn trainable_numel(&self) -> usize {
        self.leaves.iter().filter(|l| l.trainable).map(|l| l.value.numel()).sum()
    }
}

impl<T: Element> PartialEq for ParamStore<T> {
    /// Equal when names, order, values and trainability agree; gradients are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .leaves
                .iter()
                .zip(&other.leaves)
                .all(|(a, b)| a.value == b.value && a.trainable == b.trainable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_get_and_replace() {
        let mut s = ParamStore::<f32>::new();
        let a = s.insert("a", Tensor::ones(vec![2]), true);
        let b = s.insert("b", Tensor::zeros(vec![3]), false);
        assert_eq!((a, b), (ParamId(0), ParamId(1)));
        assert_eq!(s.insert("a", Tensor::zeros(vec![4]), true), a);
        assert_eq!(s.value("a").unwrap().shape(), &[4]);
        assert_eq!(s.trainable_numel(), 4);
        assert!(s.get("missing").is_err());
    }

    #[test]
    fn zero_grad_clears_and_untouches() {
        let mut s = ParamStore::<f64>::new();
        let a = s.insert("a", Tensor::ones(vec![2]), true);
        s.accumulate_grad(a, &Tensor::ones(vec![2])).unwrap();
        s.accumulate_grad(a, &Tensor::ones(vec![2])).unwrap();
        assert_eq!(s.leaf(a).grad.data(), &[2.0, 2.0]);
        assert!(s.leaf(a).touched());
        s.zero_grad();
        assert_eq!(s.leaf(a).grad.data(), &[0.0, 0.0]);
        assert!(!s.leaf(a).touched());
    }
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op evaluates eagerly and, when the tape is recording, stores a
//! closure mapping the output gradient to gradients of its parents.
//! Parameters enter through [`Tape::param`]; each call creates a fresh leaf
//! bound to a [`ParamId`], so a parameter used twice accumulates both
//! contributions when [`Gradients::accumulate_into`] runs.

use crate::element::Element;
use crate::error::{dim_err, Result, TensorError};
use crate::kernels::activation::{activation_backward, activation_forward, Activation};
use crate::kernels::attention::{attention, attention_backward};
use crate::kernels::conv::{conv2d, conv2d_backward, Conv2dGeom};
use crate::kernels::layout;
use crate::kernels::linear::{linear, linear_backward};
use crate::kernels::loss::{cross_entropy, cross_entropy_backward};
use crate::kernels::norm::{self, BatchStats, SampleNormOut};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Grads<T> = Vec<Option<Tensor<T>>>;
type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Result<Grads<T>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates; `backward` yields no leaf gradients.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.recording,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// A leaf whose gradient is reported by `backward`.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, None)
    }

    /// A leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let leaf = store.leaf(id);
        self.leaf(leaf.value.clone(), leaf.trainable, Some(id))
    }

    pub fn param_named(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        Ok(self.param(store, store.id(name)?))
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: impl Fn(&Tensor<T>, &[&Tensor<T>]) -> Result<Grads<T>> + 'static) -> Var {
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: if requires_grad { parents.iter().map(|p| p.0).collect() } else { Vec::new() },
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        self.recording && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom) -> Result<Var> {
        let out = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        Ok(self.push(out, &parents, move |g, p| {
            let gr = conv2d_backward(p[0], p[1], &geom, g)?;
            let mut out = vec![Some(gr.input), Some(gr.weight)];
            if has_bias {
                out.push(Some(gr.bias));
            }
            Ok(out)
        }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        Ok(self.push(out, &parents, move |g, p| {
            let gr = linear_backward(p[0], p[1], g)?;
            let mut out = vec![Some(gr.input), Some(gr.weight)];
            if has_bias {
                out.push(Some(gr.bias));
            }
            Ok(out)
        }))
    }

    /// Batch norm with batch statistics. The returned statistics are the
    /// biased batch mean and variance, for running-average updates.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let out = norm::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let stats = out.stats.expect("train mode yields statistics");
        let v = self.batchnorm_node(out.output, out.xhat, out.inv_std, x, gamma, beta, true);
        Ok((v, stats))
    }

    /// Batch norm with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        let out = norm::batchnorm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        Ok(self.batchnorm_node(out.output, out.xhat, out.inv_std, x, gamma, beta, false))
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_node(
        &mut self,
        output: Tensor<T>,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        train: bool,
    ) -> Var {
        let (xhat, inv_std) = if self.needs_grad(&[x, gamma, beta]) {
            (xhat, inv_std)
        } else {
            (Tensor::zeros(vec![0]), Vec::new())
        };
        self.push(output, &[x, gamma, beta], move |g, p| {
            let gr = norm::batchnorm_backward(g, &xhat, &inv_std, p[1], train)?;
            Ok(vec![Some(gr.input), Some(gr.gamma), Some(gr.beta)])
        })
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let out = norm::layernorm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let (output, saved) = split_sample_norm(out);
        Ok(self.push(output, &[x, gamma, beta], move |g, p| {
            let gr = norm::layernorm_backward(g, &saved, p[1])?;
            Ok(vec![Some(gr.input), Some(gr.gamma), Some(gr.beta)])
        }))
    }

    pub fn groupnorm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let out = norm::groupnorm(self.value(x), groups, self.value(gamma), self.value(beta), eps)?;
        let (output, saved) = split_sample_norm(out);
        Ok(self.push(output, &[x, gamma, beta], move |g, p| {
            let gr = norm::groupnorm_backward(g, &saved, groups, p[1])?;
            Ok(vec![Some(gr.input), Some(gr.gamma), Some(gr.beta)])
        }))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act.is_identity() {
            return x;
        }
        let out = activation_forward(self.value(x), act);
        self.push(out, &[x], move |g, p| Ok(vec![Some(activation_backward(p[0], g, act))]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, &[a, b], |g, _| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, &[a], move |g, _| Ok(vec![Some(g.scale(s))]))
    }

    /// `(1 − λ)·a + λ·b`
    pub fn mix(&mut self, a: Var, b: Var, lambda: T) -> Result<Var> {
        let wa = T::one() - lambda;
        let out = self.value(a).zip_map(self.value(b), "mix", |x, y| wa * x + lambda * y)?;
        Ok(self.push(out, &[a, b], move |g, _| Ok(vec![Some(g.scale(wa)), Some(g.scale(lambda))])))
    }

    pub fn pad(&mut self, x: Var, padding: [usize; 2], fill: &[T]) -> Result<Var> {
        let out = layout::pad2d(self.value(x), padding, fill)?;
        Ok(self.push(out, &[x], move |g, _| Ok(vec![Some(layout::pad2d_backward(g, padding)?)])))
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (out, arg) = layout::max_pool2d(self.value(x), kernel, stride, padding)?;
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(out, &[x], move |g, _| {
            Ok(vec![Some(layout::max_pool2d_backward(g, &arg, &shape)?)])
        }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = layout::global_avg_pool(self.value(x))?;
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(out, &[x], move |g, _| {
            Ok(vec![Some(layout::global_avg_pool_backward(g, &shape)?)])
        }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).shape().to_vec();
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, &[x], move |g, _| Ok(vec![Some(g.clone().reshape(src.clone())?)])))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return dim_err("flatten", "cannot flatten a scalar");
        }
        let n = t.dim(0);
        let rest = t.numel() / n.max(1);
        self.reshape(x, vec![n, rest])
    }

    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let out = layout::to_tokens(self.value(x))?;
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(out, &[x], move |g, _| Ok(vec![Some(layout::to_tokens_backward(g, &shape)?)])))
    }

    pub fn class_token(&mut self, x: Var, cls: Var, pos: Var) -> Result<Var> {
        let out = layout::class_token(self.value(x), self.value(cls), self.value(pos))?;
        Ok(self.push(out, &[x, cls, pos], |g, _| {
            let gr = layout::class_token_backward(g)?;
            Ok(vec![Some(gr.input), Some(gr.cls), Some(gr.pos)])
        }))
    }

    pub fn select_first_token(&mut self, x: Var) -> Result<Var> {
        let out = layout::select_first_token(self.value(x))?;
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(out, &[x], move |g, _| {
            Ok(vec![Some(layout::select_first_token_backward(g, &shape)?)])
        }))
    }

    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let out = attention(self.value(qkv), heads)?;
        let probs = if self.needs_grad(&[qkv]) { out.probs } else { Vec::new() };
        Ok(self.push(out.output, &[qkv], move |g, p| {
            Ok(vec![Some(attention_backward(p[0], heads, &probs, g)?)])
        }))
    }

    pub fn channel_scale(&mut self, x: Var, gamma: Var) -> Result<Var> {
        let out = layout::channel_scale(self.value(x), self.value(gamma))?;
        Ok(self.push(out, &[x, gamma], |g, p| {
            let (gx, gg) = layout::channel_scale_backward(p[0], p[1], g)?;
            Ok(vec![Some(gx), Some(gg)])
        }))
    }

    /// Adds a `[C, H, W]` map to every sample; the map gets a gradient summed over the batch.
    pub fn position_bias(&mut self, x: Var, map: Var) -> Result<Var> {
        let out = layout::add_position_bias(self.value(x), self.value(map))?;
        Ok(self.push(out, &[x, map], |g, p| {
            let per = p[1].numel();
            let mut gm = vec![T::zero(); per];
            for (i, &v) in g.data().iter().enumerate() {
                gm[i % per] += v;
            }
            Ok(vec![Some(g.clone()), Some(Tensor::new(p[1].shape().to_vec(), gm)?)])
        }))
    }

    /// Mean cross-entropy of `[N, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        if self.value(logits).rank() != 2 {
            return dim_err("cross_entropy", format!("logits must be [N, C], got {:?}", self.value(logits).shape()));
        }
        let (loss, probs) = cross_entropy(self.value(logits), labels)?;
        let labels = labels.to_vec();
        Ok(self.push(Tensor::scalar(loss), &[logits], move |g, _| {
            let gs = g.item().expect("scalar");
            Ok(vec![Some(cross_entropy_backward(&probs, &labels, gs))])
        }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::scalar(total), &[x], move |g, _| {
            Ok(vec![Some(Tensor::full(shape.clone(), g.item().expect("scalar")))])
        })
    }

    /// `Σ x ⊙ w` for a fixed weight tensor.
    pub fn dot(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        let prod = self.value(x).mul(w)?;
        let w = w.clone();
        Ok(self.push(Tensor::scalar(prod.sum()), &[x], move |g, _| {
            Ok(vec![Some(w.scale(g.item().expect("scalar")))])
        }))
    }

    /// Reverse pass from a scalar. Gradients are retained for leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let idx = loss.0;
        let node = self.nodes.get(idx).ok_or(TensorError::UnknownVar(idx))?;
        if node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(node.value.shape().to_vec()));
        }
        let mut grads: Grads<T> = (0..self.nodes.len()).map(|_| None).collect();
        grads[idx] = Some(Tensor::ones(node.value.shape().to_vec()));
        for i in (0..=idx).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parents: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pg = backward(&g, &parents)?;
            for (&p, gp) in node.parents.iter().zip(pg) {
                let Some(gp) = gp else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp)?,
                    slot => *slot = Some(gp),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|id| (i, id)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn split_sample_norm<T: Element>(out: SampleNormOut<T>) -> (Tensor<T>, SampleNormOut<T>) {
    let saved = SampleNormOut {
        output: Tensor::zeros(vec![0]),
        xhat: out.xhat,
        inv_std: out.inv_std,
    };
    (out.output, saved)
}

pub struct Gradients<T> {
    grads: Grads<T>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter-leaf gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::ones(vec![3]));
        assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shared_param_accumulates_both_uses() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::full(vec![2], 3.0), true);
        let mut t = Tape::new();
        let a = t.param(&store, id);
        let b = t.param(&store, id);
        let s = t.add(a, b).unwrap();
        let loss = t.sum(s);
        t.backward(loss).unwrap().accumulate_into(&mut store).unwrap();
        assert_eq!(store.leaf(id).grad.data(), &[2.0, 2.0]);
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::full(vec![2], 3.0), false);
        let mut t = Tape::new();
        let a = t.param(&store, id);
        let x = t.input(Tensor::ones(vec![2]));
        let s = t.add(a, x).unwrap();
        let loss = t.sum(s);
        let g = t.backward(loss).unwrap();
        g.accumulate_into(&mut store).unwrap();
        assert!(!store.leaf(id).touched());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn mix_weights_both_branches() {
        let mut t = Tape::<f64>::new();
        let a = t.input(Tensor::full(vec![1], 2.0));
        let b = t.input(Tensor::full(vec![1], 6.0));
        let m = t.mix(a, b, 0.25).unwrap();
        assert_eq!(t.value(m).data(), &[3.0]);
        let loss = t.sum(m);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.75]);
        assert_eq!(g.get(b).unwrap().data(), &[0.25]);
    }
}

use updp_tensor::{lit, BatchStats, Element, ParamStore, Tape, Tensor, Var};

use super::{LayerKind, LayerNode, Model, Segment, Src};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running-statistic updates are collected in the context.
    Train,
    /// Running statistics.
    Eval,
}

/// A pending running-statistics update for one batch-norm call.
pub struct BnUpdate<T> {
    pub key: String,
    pub stats: BatchStats<T>,
    pub momentum: f64,
}

pub struct Ctx<'a, T> {
    pub params: &'a ParamStore<T>,
    pub mode: Mode,
    pub updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(params: &'a ParamStore<T>, mode: Mode) -> Self {
        Ctx {
            params,
            mode,
            updates: Vec::new(),
        }
    }

    fn value(&self, name: &str) -> Result<&'a Tensor<T>> {
        Ok(self.params.value(name)?)
    }
}

/// Exponential moving average of batch statistics (biased variance).
pub fn apply_bn_updates<T: Element>(store: &mut ParamStore<T>, updates: Vec<BnUpdate<T>>) -> Result<()> {
    for u in updates {
        let m = T::from_f64(u.momentum);
        for (suffix, batch) in [("running_mean", &u.stats.mean), ("running_var", &u.stats.var)] {
            let name = format!("{}.{suffix}", u.key);
            let cur = store.value(&name)?;
            let next = cur.zip_map(batch, "running_stats", |r, b| (T::one() - m) * r + m * b)?;
            store.set_value(&name, next)?;
        }
    }
    Ok(())
}

fn eval_node<T: Element>(tape: &mut Tape<T>, node: &LayerNode, ins: &[Var], ctx: &mut Ctx<'_, T>) -> Result<Var> {
    let p = |tape: &mut Tape<T>, suffix: &str| -> Result<Var> { Ok(tape.param_named(ctx.params, &node.param(suffix))?) };
    let x = ins[0];
    let v = match &node.kind {
        LayerKind::Conv(c) => {
            let w = p(tape, "weight")?;
            let b = if c.bias { Some(p(tape, "bias")?) } else { None };
            tape.conv2d(x, w, b, c.geom())?
        }
        LayerKind::Linear { bias, .. } => {
            let w = p(tape, "weight")?;
            let b = if *bias { Some(p(tape, "bias")?) } else { None };
            tape.linear(x, w, b)?
        }
        LayerKind::BatchNorm { eps, momentum, .. } => {
            let g = p(tape, "weight")?;
            let b = p(tape, "bias")?;
            match ctx.mode {
                Mode::Train => {
                    let (v, stats) = tape.batchnorm_train(x, g, b, lit(*eps))?;
                    ctx.updates.push(BnUpdate {
                        key: node.param_key.clone(),
                        stats,
                        momentum: *momentum,
                    });
                    v
                }
                Mode::Eval => {
                    let rm = ctx.value(&node.param("running_mean"))?;
                    let rv = ctx.value(&node.param("running_var"))?;
                    tape.batchnorm_eval(x, g, b, rm, rv, lit(*eps))?
                }
            }
        }
        LayerKind::LayerNorm { eps, .. } => {
            let g = p(tape, "weight")?;
            let b = p(tape, "bias")?;
            tape.layernorm(x, g, b, lit(*eps))?
        }
        LayerKind::GroupNorm { groups, eps, .. } => {
            let g = p(tape, "weight")?;
            let b = p(tape, "bias")?;
            tape.groupnorm(x, *groups, g, b, lit(*eps))?
        }
        LayerKind::Activation { act } => tape.activation(x, *act),
        LayerKind::Add => tape.add(ins[0], ins[1])?,
        LayerKind::Pad { padding, .. } => {
            let fill = ctx.value(&node.param("fill"))?.data().to_vec();
            tape.pad(x, *padding, &fill)?
        }
        LayerKind::MaxPool { kernel, stride, padding } => tape.max_pool(x, *kernel, *stride, *padding)?,
        LayerKind::GlobalAvgPool => tape.global_avg_pool(x)?,
        LayerKind::Flatten => tape.flatten(x)?,
        LayerKind::ToTokens => tape.to_tokens(x)?,
        LayerKind::ClassToken { .. } => {
            let cls = p(tape, "cls")?;
            let pos = p(tape, "pos")?;
            tape.class_token(x, cls, pos)?
        }
        LayerKind::SelectToken => tape.select_first_token(x)?,
        LayerKind::Attention { heads, .. } => tape.attention(x, *heads)?,
        LayerKind::LayerScale { .. } => {
            let g = p(tape, "gamma")?;
            tape.channel_scale(x, g)?
        }
        LayerKind::PositionBias { .. } => {
            let m = p(tape, "map")?;
            tape.position_bias(x, m)?
        }
    };
    Ok(v)
}

/// Evaluates a segment on a batched input variable.
pub fn eval_segment<T: Element>(tape: &mut Tape<T>, seg: &Segment, input: Var, ctx: &mut Ctx<'_, T>) -> Result<Var> {
    let live = seg.live_nodes();
    let mut vals: Vec<Option<Var>> = vec![None; seg.nodes.len()];
    for (i, node) in seg.nodes.iter().enumerate() {
        if !live[i] {
            continue;
        }
        let ins = node
            .inputs
            .iter()
            .map(|s| match s {
                Src::Input => Ok(input),
                Src::Node(j) => vals[*j].ok_or_else(|| Error::Graph(format!("`{}` reads unevaluated node {j}", node.name))),
            })
            .collect::<Result<Vec<_>>>()?;
        vals[i] = Some(eval_node(tape, node, &ins, ctx).map_err(|e| match e {
            Error::Tensor(t) => Error::shape(&node.name, t.to_string()),
            other => other,
        })?);
    }
    Ok(match seg.output {
        Src::Input => input,
        Src::Node(j) => vals[j].expect("output node is live"),
    })
}

impl Model {
    /// Full forward pass with a per-block override hook.
    pub fn forward_with<T: Element>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut Ctx<'_, T>,
        mut block: impl FnMut(&mut Tape<T>, usize, Var, &mut Ctx<'_, T>) -> Result<Var>,
    ) -> Result<Var> {
        let mut h = eval_segment(tape, &self.stem, x, ctx)?;
        for i in 0..self.blocks.len() {
            h = block(tape, i, h, ctx)?;
        }
        eval_segment(tape, &self.head, h, ctx)
    }

    pub fn forward_var<T: Element>(&self, tape: &mut Tape<T>, x: Var, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        self.forward_with(tape, x, ctx, |tape, i, h, ctx| eval_segment(tape, &self.blocks[i].body, h, ctx))
    }

    /// Eval-mode forward of a batch without recording gradients.
    pub fn forward<T: Element>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let mut ctx = Ctx::new(params, Mode::Eval);
        let y = self.forward_var(&mut tape, xv, &mut ctx)?;
        Ok(tape.value(y).clone())
    }
}

/// Eval-mode forward of any segment.
pub fn predict<T: Element>(seg: &Segment, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let mut ctx = Ctx::new(params, Mode::Eval);
    let y = eval_segment(&mut tape, seg, xv, &mut ctx)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{init_params, SegmentBuilder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use updp_tensor::Activation;

    #[test]
    fn running_stats_follow_momentum() {
        let mut b = SegmentBuilder::new("s");
        let n = b.bn("bn", Src::Input, 1);
        let seg = b.finish(n);
        let mut store: ParamStore<f64> = init_params([&seg], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut ctx = Ctx::new(&store, Mode::Train);
        eval_segment(&mut tape, &seg, xv, &mut ctx).unwrap();
        let updates = ctx.updates;
        apply_bn_updates(&mut store, updates).unwrap();
        // mean 2, biased var 1: 0.9·0 + 0.1·2, 0.9·1 + 0.1·1
        assert!((store.value("s.bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-12);
        assert!((store.value("s.bn.running_var").unwrap().data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_is_per_sample_independent() {
        let mut b = SegmentBuilder::new("s");
        let c = b.conv("c", Src::Input, 2, 3, 3, 1, 1, 1, true);
        let n = b.bn("bn", c, 3);
        let a = b.act("act", n, Activation::Relu);
        let seg = b.finish(a);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store: ParamStore<f64> = init_params([&seg], &mut rng).unwrap();
        let x = Tensor::randn(vec![3, 2, 4, 4], 1.0, &mut rng);
        let all = predict(&seg, &store, &x).unwrap();
        let one = predict(&seg, &store, &Tensor::new(vec![1, 2, 4, 4], x.data()[32..64].to_vec()).unwrap()).unwrap();
        assert_eq!(&all.data()[48..96], one.data());
    }
}

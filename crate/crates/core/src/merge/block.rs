use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use updp_tensor::{Element, ParamStore, Tensor};

use super::fuse::{
    border_inexact, fold_bn_into_linear, fuse_branch_add, fuse_conv1x1_convkxk, fuse_conv_bn, fuse_convkxk_conv1x1, fuse_fc_fc,
    fuse_kxk_kxk_via_center, fuse_linear_bn, BnState, FusedConv, FusedLinear, SkipBranch,
};
use crate::error::{Error, Result};
use crate::graph::{predict, BlockKind, BlockSpec, LayerKind, LayerNode, Segment, Src};

/// How border pixels are treated when a fused conv would zero-pad an
/// intermediate that carries a bias.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExactMode {
    /// Exact on interior pixels only.
    #[default]
    Interior,
    /// Adds a fixed position-dependent map that restores the border.
    ExactPad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    FoldBn,
    FoldLayerScale,
    FoldBnIntoLinear,
    Conv1x1ConvKxK,
    ConvKxKConv1x1,
    FcFc,
    BranchAdd,
    FoldTailBn,
    KeepTail,
    PositionBias,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    pub rule: Rule,
    pub nodes: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergedForm {
    /// One dense conv absorbing the shortcut.
    Dense,
    /// Depthwise conv, one pointwise conv and the identity addition; chosen
    /// when it costs fewer MACs than the dense form.
    Factorized,
    /// One fully connected layer absorbing the shortcut.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub block: String,
    pub form: MergedForm,
    pub steps: Vec<MergeStep>,
    /// True when the merged block matches the original on every pixel.
    pub border_exact: bool,
    pub macs_before: u64,
    pub macs_after: u64,
}

pub struct MergedBlock<T> {
    pub block: BlockSpec,
    pub params: ParamStore<T>,
    pub plan: MergePlan,
}

enum SkipLayout {
    None,
    Identity,
    Branch(Vec<usize>),
}

/// Where the parts of a block sit in its body.
struct Layout {
    /// Nodes kept before the fused span (transformer attention sub-block).
    prefix: Vec<usize>,
    /// Input of the fused span and of its shortcut.
    fork: Src,
    chain: Vec<usize>,
    skip: SkipLayout,
    add: Option<usize>,
    tail: Vec<usize>,
}

/// Follows first inputs back from `from` until `stop`, in execution order.
fn walk_back(body: &Segment, from: Src, stop: Src) -> Vec<usize> {
    let mut path = Vec::new();
    let mut cur = from;
    while cur != stop {
        let Src::Node(j) = cur else { break };
        path.push(j);
        cur = body.nodes[j].inputs[0];
    }
    path.reverse();
    path
}

fn layout(block: &BlockSpec) -> Result<Layout> {
    let body = &block.body;
    let fail = |msg: &str| Error::merge(&block.name, msg.to_string());
    let lay = match block.final_add() {
        Some(a) => {
            let tail = walk_back(body, body.output, Src::Node(a));
            if tail.first().is_some_and(|&t| body.nodes[t].inputs[0] != Src::Node(a)) || (tail.is_empty() && body.output != Src::Node(a)) {
                return Err(fail("the final addition does not feed the block output"));
            }
            let add = &body.nodes[a];
            let main = walk_back(body, add.inputs[0], Src::Input);
            match add.inputs[1] {
                Src::Input => Layout {
                    prefix: Vec::new(),
                    fork: Src::Input,
                    chain: main,
                    skip: SkipLayout::Identity,
                    add: Some(a),
                    tail,
                },
                Src::Node(j) => match main.iter().position(|&m| m == j) {
                    Some(p) => Layout {
                        prefix: main[..=p].to_vec(),
                        fork: Src::Node(j),
                        chain: main[p + 1..].to_vec(),
                        skip: SkipLayout::Identity,
                        add: Some(a),
                        tail,
                    },
                    None => {
                        let branch = walk_back(body, Src::Node(j), Src::Input);
                        if branch.iter().any(|b| main.contains(b)) {
                            return Err(fail("shortcut branch joins the main branch"));
                        }
                        Layout {
                            prefix: Vec::new(),
                            fork: Src::Input,
                            chain: main,
                            skip: SkipLayout::Branch(branch),
                            add: Some(a),
                            tail,
                        }
                    }
                },
            }
        }
        None => {
            let path = walk_back(body, body.output, Src::Input);
            let q = path
                .iter()
                .position(|&i| body.nodes[i].kind.is_nonidentity_activation())
                .unwrap_or(path.len());
            Layout {
                prefix: Vec::new(),
                fork: Src::Input,
                chain: path[..q].to_vec(),
                skip: SkipLayout::None,
                add: None,
                tail: path[q..].to_vec(),
            }
        }
    };
    let mut covered: BTreeSet<usize> = lay.prefix.iter().chain(&lay.chain).chain(&lay.tail).copied().collect();
    if let SkipLayout::Branch(b) = &lay.skip {
        covered.extend(b);
    }
    covered.extend(lay.add);
    let live = body.live_nodes();
    if let Some(i) = (0..body.nodes.len()).find(|&i| live[i] && !covered.contains(&i)) {
        return Err(Error::merge(&body.nodes[i].name, "node is off every fusable path"));
    }
    if lay.chain.is_empty() {
        return Err(fail("no layers between the block input and its output to merge"));
    }
    Ok(lay)
}

enum Op<T> {
    Conv(FusedConv<T>),
    Lin(FusedLinear<T>),
}

/// Renames the node reported by a primitive's error.
fn at(name: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Merge { msg, .. } => Error::merge(name, msg),
        other => other,
    }
}

/// Folds every norm and scale of a span into its neighbouring linear op.
fn fold_span<T: Element>(body: &Segment, idx: &[usize], params: &ParamStore<T>, steps: &mut Vec<MergeStep>) -> Result<Vec<(Op<T>, String)>> {
    let mut ops: Vec<(Op<T>, String)> = Vec::new();
    let mut pending: Option<(BnState<T>, String)> = None;
    for &i in idx {
        let node = &body.nodes[i];
        let name = node.name.clone();
        match &node.kind {
            LayerKind::Conv(_) => {
                if let Some((_, bn)) = pending.take() {
                    return Err(Error::merge(&bn, "a batch norm in front of a padded conv cannot be folded"));
                }
                ops.push((Op::Conv(FusedConv::from_node(node, params)?), name));
            }
            LayerKind::Linear { .. } => {
                let mut l = FusedLinear::from_node(node, params)?;
                if let Some((bn, bn_name)) = pending.take() {
                    l = fold_bn_into_linear(&bn, &l).map_err(at(&bn_name))?;
                    steps.push(MergeStep {
                        rule: Rule::FoldBnIntoLinear,
                        nodes: vec![bn_name, name.clone()],
                    });
                }
                ops.push((Op::Lin(l), name));
            }
            LayerKind::BatchNorm { .. } => {
                let bn = BnState::from_node(node, params)?;
                match ops.last_mut() {
                    Some((op, prev)) => {
                        *op = match op {
                            Op::Conv(c) => Op::Conv(fuse_conv_bn(c, &bn).map_err(at(&name))?),
                            Op::Lin(l) => Op::Lin(fuse_linear_bn(l, &bn).map_err(at(&name))?),
                        };
                        steps.push(MergeStep {
                            rule: Rule::FoldBn,
                            nodes: vec![prev.clone(), name],
                        });
                    }
                    None if pending.is_none() => pending = Some((bn, name)),
                    None => return Err(Error::merge(&name, "two leading batch norms")),
                }
            }
            LayerKind::LayerScale { .. } => {
                let g = params.value(&node.param("gamma"))?.data().to_vec();
                let zero = vec![T::zero(); g.len()];
                let Some((op, prev)) = ops.last_mut() else {
                    return Err(Error::merge(&name, "layer scale without a preceding linear layer"));
                };
                *op = match op {
                    Op::Conv(c) => Op::Conv(c.scale_output(&g, &zero).map_err(at(&name))?),
                    Op::Lin(l) => Op::Lin(l.scale_output(&g, &zero).map_err(at(&name))?),
                };
                steps.push(MergeStep {
                    rule: Rule::FoldLayerScale,
                    nodes: vec![prev.clone(), name],
                });
            }
            LayerKind::Activation { act } if act.is_identity() => {}
            LayerKind::Activation { .. } => return Err(Error::merge(&name, "nonlinear activation inside the span to fuse")),
            LayerKind::LayerNorm { .. } | LayerKind::GroupNorm { .. } => {
                return Err(Error::merge(&name, "only batch norms fold; merge the pruned block"))
            }
            other => return Err(Error::merge(&name, format!("{} cannot be fused", other.tag()))),
        }
    }
    if let Some((_, bn)) = pending {
        return Err(Error::merge(&bn, "batch norm with no layer to fold into"));
    }
    Ok(ops)
}

/// Composes a conv sequence front to back. Returns the conv and whether it is
/// exact on border pixels.
fn compose_convs<T: Element>(ops: Vec<(FusedConv<T>, String)>, steps: &mut Vec<MergeStep>) -> Result<(FusedConv<T>, bool)> {
    let mut it = ops.into_iter();
    let (mut state, mut names) = match it.next() {
        Some((c, n)) => (c, vec![n]),
        None => return Err(Error::merge("conv", "empty conv sequence")),
    };
    let mut exact = true;
    for (next, name) in it {
        names.push(name.clone());
        let rule;
        state = if state.is_pointwise() && state.stride == [1, 1] {
            exact &= !border_inexact(&state, &next);
            rule = Rule::Conv1x1ConvKxK;
            fuse_conv1x1_convkxk(&state, &next)
        } else if next.is_pointwise() && next.padding == [0, 0] {
            rule = Rule::ConvKxKConv1x1;
            fuse_convkxk_conv1x1(&state, &next)
        } else {
            rule = Rule::Conv1x1ConvKxK;
            fuse_kxk_kxk_via_center(&state, &next)
        }
        .map_err(at(&name))?;
        steps.push(MergeStep { rule, nodes: names.clone() });
    }
    Ok((state, exact))
}

fn compose_linears<T: Element>(ops: Vec<(FusedLinear<T>, String)>, steps: &mut Vec<MergeStep>) -> Result<FusedLinear<T>> {
    let mut it = ops.into_iter();
    let (mut state, mut names) = match it.next() {
        Some((l, n)) => (l, vec![n]),
        None => return Err(Error::merge("linear", "empty layer sequence")),
    };
    for (next, name) in it {
        names.push(name.clone());
        state = fuse_fc_fc(&state, &next).map_err(at(&name))?;
        steps.push(MergeStep {
            rule: Rule::FcFc,
            nodes: names.clone(),
        });
    }
    Ok(state)
}

fn split_convs<T>(ops: Vec<(Op<T>, String)>) -> Result<Vec<(FusedConv<T>, String)>> {
    ops.into_iter()
        .map(|(op, n)| match op {
            Op::Conv(c) => Ok((c, n)),
            Op::Lin(_) => Err(Error::merge(&n, "linear layer mixed with convolutions")),
        })
        .collect()
}

fn split_linears<T>(ops: Vec<(Op<T>, String)>) -> Result<Vec<(FusedLinear<T>, String)>> {
    ops.into_iter()
        .map(|(op, n)| match op {
            Op::Lin(l) => Ok((l, n)),
            Op::Conv(_) => Err(Error::merge(&n, "convolution mixed with linear layers")),
        })
        .collect()
}

/// Result of collapsing the fused span and its shortcut.
enum Collapsed<T> {
    Dense(FusedConv<T>),
    Factorized(FusedConv<T>, FusedConv<T>),
    Linear(FusedLinear<T>),
}

/// Output nodes being assembled, with their parameters.
struct Emit<T> {
    block: String,
    nodes: Vec<LayerNode>,
    params: ParamStore<T>,
}

impl<T: Element> Emit<T> {
    fn push(&mut self, name: &str, kind: LayerKind, inputs: Vec<Src>, key: String) -> Src {
        self.nodes.push(LayerNode {
            name: name.to_string(),
            kind,
            inputs,
            param_key: key,
            derive: None,
        });
        Src::Node(self.nodes.len() - 1)
    }

    fn key(&self, name: &str) -> String {
        format!("{}.{name}", self.block)
    }

    /// Copies `node` and all of its parameters unchanged.
    fn copy(&mut self, node: &LayerNode, inputs: Vec<Src>, from: &ParamStore<T>) -> Result<Src> {
        for spec in node.param_specs() {
            let leaf = from.get(&spec.name)?;
            self.params.insert(spec.name, leaf.value.clone(), leaf.trainable);
        }
        let mut n = node.clone();
        n.inputs = inputs;
        n.derive = None;
        self.nodes.push(n);
        Ok(Src::Node(self.nodes.len() - 1))
    }

    fn conv(&mut self, name: &str, c: &FusedConv<T>, input: Src) -> Src {
        let key = self.key(name);
        self.params.insert(format!("{key}.weight"), c.weight.clone(), true);
        self.params.insert(format!("{key}.bias"), c.bias.clone(), true);
        self.push(name, LayerKind::Conv(c.spec()), vec![input], key)
    }

    fn linear(&mut self, name: &str, l: &FusedLinear<T>, input: Src) -> Src {
        let key = self.key(name);
        self.params.insert(format!("{key}.weight"), l.weight.clone(), true);
        self.params.insert(format!("{key}.bias"), l.bias.clone(), true);
        let kind = LayerKind::Linear {
            cin: l.cin(),
            cout: l.cout(),
            bias: true,
        };
        self.push(name, kind, vec![input], key)
    }

    fn segment(&self, output: Src) -> Segment {
        Segment {
            nodes: self.nodes.clone(),
            output,
        }
    }
}

fn conv_macs<T: Element>(c: &FusedConv<T>, hw: [usize; 2]) -> Option<u64> {
    let [oh, ow] = c.out_hw(hw)?;
    let [kh, kw] = c.kernel();
    Some((c.cout() * (c.cin() / c.groups) * kh * kw * oh * ow) as u64)
}

/// Merges a pruned block into the fewest linear layers that reproduce it.
///
/// Order: every norm and layer scale is folded into the adjacent linear
/// layer, sequential convs (or linear layers) are composed front to back, the
/// shortcut is absorbed, and the tail batch norm is folded when no nonlinear
/// activation precedes it (otherwise it is kept after the activation).
/// `input` is the per-sample input shape of the block.
pub fn merge_block<T: Element>(block: &BlockSpec, params: &ParamStore<T>, input: &[usize], mode: ExactMode) -> Result<MergedBlock<T>> {
    if let Some(n) = block
        .body
        .nodes
        .iter()
        .find(|n| matches!(n.kind, LayerKind::LayerNorm { .. } | LayerKind::GroupNorm { .. }))
    {
        return Err(Error::merge(&n.name, format!("{} cannot be folded; merge the pruned block", n.kind.tag())));
    }
    let body = &block.body;
    let lay = layout(block)?;
    let mut steps = Vec::new();
    let mut emit = Emit {
        block: block.name.clone(),
        nodes: Vec::new(),
        params: ParamStore::new(),
    };

    // Prefix: copied, folding a batch norm into the linear layer it feeds.
    let mut map: Vec<Option<Src>> = vec![None; body.nodes.len()];
    let remap = |map: &[Option<Src>], s: Src| -> Result<Src> {
        match s {
            Src::Input => Ok(Src::Input),
            Src::Node(j) => map[j].ok_or_else(|| Error::merge(&body.nodes[j].name, "read before it was emitted")),
        }
    };
    let mut pending: Option<(BnState<T>, usize)> = None;
    for (pos, &i) in lay.prefix.iter().enumerate() {
        let node = &body.nodes[i];
        let next = lay.prefix.get(pos + 1).map(|&j| &body.nodes[j]);
        let foldable = matches!(node.kind, LayerKind::BatchNorm { .. })
            && next.is_some_and(|n| matches!(n.kind, LayerKind::Linear { .. }) && n.inputs[0] == Src::Node(i))
            && body.consumers(Src::Node(i)).len() == 1;
        if foldable {
            pending = Some((BnState::from_node(node, params)?, i));
            continue;
        }
        let inputs = node.inputs.iter().map(|&s| remap(&map, s)).collect::<Result<Vec<_>>>();
        let src = match pending.take() {
            Some((bn, bn_idx)) => {
                let l = fold_bn_into_linear(&bn, &FusedLinear::from_node(node, params)?).map_err(at(&node.name))?;
                steps.push(MergeStep {
                    rule: Rule::FoldBnIntoLinear,
                    nodes: vec![body.nodes[bn_idx].name.clone(), node.name.clone()],
                });
                let input = remap(&map, body.nodes[bn_idx].inputs[0])?;
                emit.linear(&format!("merged_{}", node.name), &l, input)
            }
            None => emit.copy(node, inputs?, params)?,
        };
        map[i] = Some(src);
    }
    let fork = remap(&map, lay.fork)?;

    // The span and its shortcut.
    let ops = fold_span(body, &lay.chain, params, &mut steps)?;
    let skip_ops = match &lay.skip {
        SkipLayout::Branch(b) => Some(fold_span(body, b, params, &mut steps)?),
        _ => None,
    };
    let add_name = lay.add.map(|a| body.nodes[a].name.clone()).unwrap_or_default();
    let is_linear = matches!(ops.first(), Some((Op::Lin(_), _)));
    let mut border_exact = true;
    let mut collapsed = if is_linear {
        let mut l = compose_linears(split_linears(ops)?, &mut steps)?;
        let skip = match (&lay.skip, skip_ops) {
            (SkipLayout::Identity, _) => Some(FusedLinear::identity(l.cin())),
            (SkipLayout::Branch(_), Some(s)) => Some(compose_linears(split_linears(s)?, &mut steps)?),
            _ => None,
        };
        if let Some(s) = skip {
            l = l.add(&s).map_err(|e| Error::merge(&add_name, e.to_string()))?;
            steps.push(MergeStep {
                rule: Rule::BranchAdd,
                nodes: vec![add_name.clone()],
            });
        }
        Collapsed::Linear(l)
    } else {
        let convs = split_convs(ops)?;
        let hw = [input[1], input[2]];
        let factor_ok = convs.len() >= 2
            && convs[0].0.is_depthwise()
            && !convs[0].0.is_pointwise()
            && convs[1..].iter().all(|(c, _)| c.is_pointwise() && c.padding == [0, 0] && c.stride == [1, 1])
            && !matches!(lay.skip, SkipLayout::Branch(_));
        let factorized = if factor_ok {
            let dw = convs[0].clone();
            let mut pw_steps = Vec::new();
            let (pw, _) = compose_convs(convs[1..].to_vec(), &mut pw_steps)?;
            Some((dw, pw, pw_steps))
        } else {
            None
        };
        let mut dense_steps = Vec::new();
        let (mut dense, exact) = compose_convs(convs, &mut dense_steps)?;
        let skip = match (&lay.skip, skip_ops) {
            (SkipLayout::Identity, _) => Some(SkipBranch::Identity),
            (SkipLayout::Branch(_), Some(s)) => {
                let (c, ex) = compose_convs(split_convs(s)?, &mut dense_steps)?;
                if !ex {
                    return Err(Error::merge(&add_name, "shortcut branch is not exact at the border"));
                }
                Some(SkipBranch::Conv(c))
            }
            _ => None,
        };
        if let Some(s) = &skip {
            dense = fuse_branch_add(&dense, s).map_err(at(&add_name))?;
            dense_steps.push(MergeStep {
                rule: Rule::BranchAdd,
                nodes: vec![add_name.clone()],
            });
        }
        let dense_cost = conv_macs(&dense, hw).ok_or_else(|| Error::merge(&block.name, format!("input {input:?} too small")))?;
        match factorized {
            Some(((dw, _), pw, pw_steps))
                if conv_macs(&dw, hw).and_then(|a| dw.out_hw(hw).and_then(|o| conv_macs(&pw, o)).map(|b| a + b)) < Some(dense_cost) =>
            {
                steps.extend(pw_steps);
                Collapsed::Factorized(dw, pw)
            }
            _ => {
                border_exact = exact;
                steps.extend(dense_steps);
                Collapsed::Dense(dense)
            }
        }
    };

    // Tail: identity activations vanish, a batch norm ahead of any
    // nonlinearity folds when the span ends in a single layer.
    let single = match collapsed {
        Collapsed::Factorized(..) => lay.add.is_none(),
        _ => true,
    };
    let mut kept = Vec::new();
    let mut before_act = true;
    for &i in &lay.tail {
        let node = &body.nodes[i];
        match &node.kind {
            LayerKind::Activation { act } if act.is_identity() => {}
            LayerKind::Activation { .. } => {
                before_act = false;
                kept.push(i);
            }
            LayerKind::BatchNorm { .. } if before_act && single && kept.is_empty() => {
                let bn = BnState::from_node(node, params)?;
                collapsed = match collapsed {
                    Collapsed::Dense(c) => Collapsed::Dense(fuse_conv_bn(&c, &bn).map_err(at(&node.name))?),
                    Collapsed::Factorized(d, p) => Collapsed::Factorized(d, fuse_conv_bn(&p, &bn).map_err(at(&node.name))?),
                    Collapsed::Linear(l) => Collapsed::Linear(fuse_linear_bn(&l, &bn).map_err(at(&node.name))?),
                };
                steps.push(MergeStep {
                    rule: Rule::FoldTailBn,
                    nodes: vec![node.name.clone()],
                });
            }
            LayerKind::BatchNorm { .. } => {
                steps.push(MergeStep {
                    rule: Rule::KeepTail,
                    nodes: vec![node.name.clone()],
                });
                kept.push(i);
            }
            other => return Err(Error::merge(&node.name, format!("{} cannot follow the residual addition", other.tag()))),
        }
    }

    let (form, mut out) = match &collapsed {
        Collapsed::Dense(c) => (MergedForm::Dense, emit.conv("merged", c, fork)),
        Collapsed::Factorized(d, p) => {
            let h = emit.conv("merged_dw", d, fork);
            let mut h = emit.conv("merged_pw", p, h);
            if lay.add.is_some() {
                h = emit.push("add", LayerKind::Add, vec![h, fork], emit.key("add"));
            }
            (MergedForm::Factorized, h)
        }
        Collapsed::Linear(l) => (MergedForm::Linear, emit.linear("merged_fc", l, fork)),
    };

    if !border_exact && mode == ExactMode::ExactPad {
        // Both forms share their linear part, so the difference of their
        // responses to a zero input is the whole border correction.
        let pre = match kept.first() {
            Some(&k) => body.nodes[k].inputs[0],
            None => body.output,
        };
        let mut zshape = vec![1];
        zshape.extend_from_slice(input);
        let zero = Tensor::zeros(zshape);
        let orig = Segment {
            nodes: body.nodes.clone(),
            output: pre,
        };
        let want = predict(&orig, params, &zero)?;
        let got = predict(&emit.segment(out), &emit.params, &zero)?;
        let map = want.sub(&got)?;
        let shape = [map.dim(1), map.dim(2), map.dim(3)];
        let key = emit.key("border");
        emit.params.insert(format!("{key}.map"), map.reshape(shape.to_vec())?, false);
        out = emit.push("border", LayerKind::PositionBias { shape }, vec![out], key);
        steps.push(MergeStep {
            rule: Rule::PositionBias,
            nodes: vec!["merged".into()],
        });
        border_exact = true;
    }

    for &i in &kept {
        out = emit.copy(&body.nodes[i], vec![out], params)?;
    }
    let merged = BlockSpec {
        name: block.name.clone(),
        kind: BlockKind::Merged,
        prunable: false,
        pruned: true,
        body: emit.segment(out),
    };
    merged.body.validate()?;
    let plan = MergePlan {
        block: block.name.clone(),
        form,
        steps,
        border_exact,
        macs_before: body.macs(input)?,
        macs_after: merged.body.macs(input)?,
    };
    Ok(MergedBlock {
        block: merged,
        params: emit.params,
        plan,
    })
}

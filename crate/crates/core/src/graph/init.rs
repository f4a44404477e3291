use rand::Rng;
use updp_tensor::{Element, ParamStore, Tensor};

use super::{Derive, LayerKind, LayerNode, Model, Segment, Shape};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// He-normal with the given fan-in.
    Kaiming { fan_in: usize },
    Normal { std: f64 },
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub trainable: bool,
    pub init: Init,
}

fn spec(node: &LayerNode, suffix: &str, shape: Shape, trainable: bool, init: Init) -> ParamSpec {
    ParamSpec {
        name: node.param(suffix),
        shape,
        trainable,
        init,
    }
}

pub(crate) fn node_param_specs(node: &LayerNode) -> Vec<ParamSpec> {
    let zeros = Init::Const(0.0);
    let ones = Init::Const(1.0);
    match &node.kind {
        LayerKind::Conv(c) => {
            let fan_in = c.cin / c.groups * c.kernel[0] * c.kernel[1];
            let mut v = vec![spec(node, "weight", c.weight_shape(), true, Init::Kaiming { fan_in })];
            if c.bias {
                v.push(spec(node, "bias", vec![c.cout], true, zeros));
            }
            v
        }
        LayerKind::Linear { cin, cout, bias } => {
            let mut v = vec![spec(node, "weight", vec![*cout, *cin], true, Init::Normal { std: (1.0 / *cin as f64).sqrt() })];
            if *bias {
                v.push(spec(node, "bias", vec![*cout], true, zeros));
            }
            v
        }
        LayerKind::BatchNorm { channels, .. } => vec![
            spec(node, "weight", vec![*channels], true, ones.clone()),
            spec(node, "bias", vec![*channels], true, zeros.clone()),
            spec(node, "running_mean", vec![*channels], false, zeros),
            spec(node, "running_var", vec![*channels], false, ones),
        ],
        LayerKind::LayerNorm { channels, .. } | LayerKind::GroupNorm { channels, .. } => vec![
            spec(node, "weight", vec![*channels], true, ones),
            spec(node, "bias", vec![*channels], true, zeros),
        ],
        LayerKind::Pad { channels, .. } => vec![spec(node, "fill", vec![*channels], false, zeros)],
        LayerKind::ClassToken { dim, tokens } => vec![
            spec(node, "cls", vec![*dim], true, Init::Normal { std: 0.02 }),
            spec(node, "pos", vec![tokens + 1, *dim], true, Init::Normal { std: 0.02 }),
        ],
        LayerKind::LayerScale { channels, init } => vec![spec(node, "gamma", vec![*channels], true, Init::Const(*init))],
        LayerKind::PositionBias { shape } => vec![spec(node, "map", shape.to_vec(), false, zeros)],
        LayerKind::Activation { .. }
        | LayerKind::Add
        | LayerKind::MaxPool { .. }
        | LayerKind::GlobalAvgPool
        | LayerKind::Flatten
        | LayerKind::ToTokens
        | LayerKind::SelectToken
        | LayerKind::Attention { .. } => Vec::new(),
    }
}

impl LayerNode {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        node_param_specs(self)
    }
}

fn sample<T: Element, R: Rng + ?Sized>(spec: &ParamSpec, rng: &mut R) -> Tensor<T> {
    match spec.init {
        Init::Kaiming { fan_in } => Tensor::randn(spec.shape.clone(), (2.0 / fan_in.max(1) as f64).sqrt(), rng),
        Init::Normal { std } => Tensor::randn(spec.shape.clone(), std, rng),
        Init::Const(v) => Tensor::full(spec.shape.clone(), T::from_f64(v)),
    }
}

/// Centered crop of `src` (`[O, I, H, W]`) to the spatial size of `shape`.
pub(crate) fn center_crop<T: Element>(src: &Tensor<T>, shape: &[usize]) -> Option<Tensor<T>> {
    if src.rank() != 4 || shape.len() != 4 || src.shape()[..2] != shape[..2] {
        return None;
    }
    let (sh, sw, th, tw) = (src.dim(2), src.dim(3), shape[2], shape[3]);
    if th > sh || tw > sw || (sh - th) % 2 != 0 || (sw - tw) % 2 != 0 {
        return None;
    }
    let (oy, ox) = ((sh - th) / 2, (sw - tw) / 2);
    let mut out = Vec::with_capacity(shape.iter().product());
    for oi in 0..shape[0] * shape[1] {
        for y in 0..th {
            let row = oi * sh * sw + (y + oy) * sw + ox;
            out.extend_from_slice(&src.data()[row..row + tw]);
        }
    }
    Tensor::new(shape.to_vec(), out).ok()
}

/// Inserts every parameter of `segments` missing from `store`, deriving or
/// sampling values. Existing entries (shared keys) are left untouched.
pub fn materialize_params<'a, T: Element, R: Rng + ?Sized>(
    segments: impl IntoIterator<Item = &'a Segment>,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<()> {
    for seg in segments {
        for node in &seg.nodes {
            for spec in node.param_specs() {
                if let Ok(existing) = store.get(&spec.name) {
                    if existing.value.shape() != spec.shape.as_slice() {
                        return Err(Error::Graph(format!(
                            "parameter `{}` has shape {:?}, node `{}` needs {:?}",
                            spec.name,
                            existing.value.shape(),
                            node.name,
                            spec.shape
                        )));
                    }
                    continue;
                }
                let value = match (&node.derive, spec.name.rsplit('.').next()) {
                    (Some(Derive::CenterCrop { from }), Some("weight")) => {
                        let src = store.value(&format!("{from}.weight"))?;
                        center_crop(src, &spec.shape).ok_or_else(|| {
                            Error::Graph(format!("cannot crop {:?} to {:?} for `{}`", src.shape(), spec.shape, node.name))
                        })?
                    }
                    (Some(Derive::CenterCrop { from }), Some("bias")) => store.value(&format!("{from}.bias"))?.clone(),
                    _ => sample(&spec, rng),
                };
                store.insert(spec.name.clone(), value, spec.trainable);
            }
        }
    }
    Ok(())
}

impl Model {
    /// Every parameter and buffer name the model reads.
    pub fn param_names(&self) -> std::collections::BTreeSet<String> {
        self.segments().flat_map(|s| &s.nodes).flat_map(|n| n.param_specs()).map(|p| p.name).collect()
    }
}

/// Fresh parameter store for a set of segments.
pub fn init_params<'a, T: Element, R: Rng + ?Sized>(
    segments: impl IntoIterator<Item = &'a Segment>,
    rng: &mut R,
) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    materialize_params(segments, &mut store, rng)?;
    Ok(store)
}

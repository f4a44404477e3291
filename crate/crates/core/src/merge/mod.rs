//! Structural re-parameterization: collapsing activation-free blocks into
//! single linear layers, plus equivalence checking.

mod block;
mod fuse;
mod impulse;
mod verify;

pub use block::{merge_block, ExactMode, MergePlan, MergeStep, MergedBlock, MergedForm, Rule};
pub use fuse::{
    border_inexact, fold_bn_into_linear, fuse_branch_add, fuse_conv1x1_convkxk, fuse_conv_bn, fuse_convkxk_conv1x1, fuse_dw_into_dense,
    fuse_fc_fc, fuse_kxk_kxk_via_center, fuse_linear_bn, identity_conv, lift_kernel, BnState, FusedConv, FusedLinear, SkipBranch,
};
pub use impulse::{extract_kernel_by_impulse, extract_linear_by_impulse, ImpulseProbe};
pub use verify::{receptive_field, verify_equivalence, BlockError, EquivalenceReport, ReceptiveField};

use updp_tensor::{Element, ParamStore};

use crate::error::Result;
use crate::graph::{BlockKind, Model};

pub struct MergedModel<T> {
    pub model: Model,
    pub params: ParamStore<T>,
    pub plans: Vec<MergePlan>,
}

fn copy_params<T: Element>(dst: &mut ParamStore<T>, src: &ParamStore<T>, names: impl IntoIterator<Item = String>) -> Result<()> {
    for name in names {
        let leaf = src.get(&name)?;
        dst.insert(name, leaf.value.clone(), leaf.trainable);
    }
    Ok(())
}

/// Merges every pruned block of `model`; other blocks, the stem and the head
/// are carried over with their parameters.
pub fn merge_model<T: Element>(model: &Model, params: &ParamStore<T>, mode: ExactMode) -> Result<MergedModel<T>> {
    let shapes = model.infer_shapes()?;
    let mut out = model.clone();
    let mut store = ParamStore::new();
    let mut plans = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        if b.pruned && b.kind != BlockKind::Merged {
            let m = merge_block(b, params, &shapes.block_inputs[i], mode)?;
            for (name, leaf) in m.params.iter() {
                store.insert(name, leaf.value.clone(), leaf.trainable);
            }
            out.blocks[i] = m.block;
            plans.push(m.plan);
        } else {
            copy_params(&mut store, params, b.body.nodes.iter().flat_map(|n| n.param_specs()).map(|s| s.name))?;
        }
    }
    for seg in [&model.stem, &model.head] {
        copy_params(&mut store, params, seg.nodes.iter().flat_map(|n| n.param_specs()).map(|s| s.name))?;
    }
    out.name = format!("{}-merged", model.name);
    out.validate()?;
    Ok(MergedModel {
        model: out,
        params: store,
        plans,
    })
}

use serde::{Deserialize, Serialize};
use updp_tensor::{Element, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::graph::{predict, BlockSpec, Model};
use crate::train::argmax_rows;

/// Composite geometry of a block's main-branch convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl ReceptiveField {
    /// Whether output pixel `(y, x)` reads only real input pixels of an
    /// `[h, w]` input.
    pub fn is_interior(&self, y: usize, x: usize, h: usize, w: usize) -> bool {
        let inside = |o: usize, k: usize, s: usize, p: usize, n: usize| o * s >= p && o * s - p + k <= n;
        inside(y, self.kernel[0], self.stride[0], self.padding[0], h) && inside(x, self.kernel[1], self.stride[1], self.padding[1], w)
    }
}

pub fn receptive_field(block: &BlockSpec) -> Option<ReceptiveField> {
    let mut rf: Option<ReceptiveField> = None;
    for i in block.main_convs() {
        let c = block.body.nodes[i].conv().expect("conv");
        rf = Some(match rf {
            None => ReceptiveField {
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
            },
            Some(r) => ReceptiveField {
                kernel: [0, 1].map(|a| r.kernel[a] + (c.kernel[a] - 1) * r.stride[a]),
                stride: [0, 1].map(|a| r.stride[a] * c.stride[a]),
                padding: [0, 1].map(|a| r.padding[a] + c.padding[a] * r.stride[a]),
            },
        });
    }
    rf
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub block: String,
    /// Max absolute output difference over interior pixels.
    pub interior: f64,
    /// Max absolute output difference over border pixels.
    pub border: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub blocks: Vec<BlockError>,
    pub interior_max: f64,
    pub border_max: f64,
    /// Max absolute logit difference of the full networks.
    pub logits_max: f64,
    /// Fraction of samples with the same top-1 class.
    pub top1_agreement: f64,
    pub macs_before: u64,
    pub macs_after: u64,
    pub params_before: usize,
    pub params_after: usize,
}

/// Compares `merged` with `original` block by block (each block fed the same
/// original activations) and end to end on `x`.
pub fn verify_equivalence<T: Element>(
    original: &Model,
    original_params: &ParamStore<T>,
    merged: &Model,
    merged_params: &ParamStore<T>,
    x: &Tensor<T>,
) -> Result<EquivalenceReport> {
    if original.blocks.len() != merged.blocks.len() {
        return Err(Error::Graph(format!(
            "{} blocks against {}",
            original.blocks.len(),
            merged.blocks.len()
        )));
    }
    let mut h = predict(&original.stem, original_params, x)?;
    let mut blocks = Vec::new();
    for (a, b) in original.blocks.iter().zip(&merged.blocks) {
        let want = predict(&a.body, original_params, &h)?;
        if a != b {
            let got = predict(&b.body, merged_params, &h)?;
            if got.shape() != want.shape() {
                return Err(Error::shape(&b.name, format!("merged output {:?} vs {:?}", got.shape(), want.shape())));
            }
            let (mut interior, mut border) = (0.0f64, 0.0f64);
            match (receptive_field(b), want.rank(), h.rank()) {
                (Some(rf), 4, 4) => {
                    let (oh, ow) = (want.dim(2), want.dim(3));
                    let (ih, iw) = (h.dim(2), h.dim(3));
                    for (i, (p, q)) in want.data().iter().zip(got.data()).enumerate() {
                        let d = (p.as_f64() - q.as_f64()).abs();
                        let (y, xx) = ((i / ow) % oh, i % ow);
                        if rf.is_interior(y, xx, ih, iw) {
                            interior = interior.max(d);
                        } else {
                            border = border.max(d);
                        }
                    }
                }
                _ => interior = want.max_abs_diff(&got)?.as_f64(),
            }
            blocks.push(BlockError {
                block: b.name.clone(),
                interior,
                border,
            });
        }
        h = want;
    }
    let la = original.forward(original_params, x)?;
    let lb = merged.forward(merged_params, x)?;
    let agree = argmax_rows(&la).iter().zip(argmax_rows(&lb)).filter(|(p, q)| **p == *q).count();
    Ok(EquivalenceReport {
        interior_max: blocks.iter().map(|b| b.interior).fold(0.0, f64::max),
        border_max: blocks.iter().map(|b| b.border).fold(0.0, f64::max),
        blocks,
        logits_max: la.max_abs_diff(&lb)?.as_f64(),
        top1_agreement: agree as f64 / x.dim(0).max(1) as f64,
        macs_before: original.count_flops()?.total(),
        macs_after: merged.count_flops()?.total(),
        params_before: original.count_params(),
        params_after: merged.count_params(),
    })
}

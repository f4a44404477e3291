//! Multi-head scaled dot-product attention over a fused `qkv` projection.
//!
//! `qkv: [N, L, 3D]` is laid out as `[q | k | v]`, each split into `heads`
//! contiguous slices of width `D / heads`.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::element::Element;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub struct AttentionOut<T> {
    pub output: Tensor<T>,
    /// Softmax probabilities `[N, H, L, L]`.
    pub probs: Vec<T>,
}

fn split_dims<T: Element>(qkv: &Tensor<T>, heads: usize) -> Result<(usize, usize, usize, usize)> {
    if qkv.rank() != 3 || qkv.dim(2) % 3 != 0 {
        return dim_err("attention", format!("qkv must be [N, L, 3D], got {:?}", qkv.shape()));
    }
    let d = qkv.dim(2) / 3;
    if heads == 0 || d % heads != 0 {
        return dim_err("attention", format!("dim {d} not divisible by {heads} heads"));
    }
    Ok((qkv.dim(0), qkv.dim(1), d, d / heads))
}

fn gather<T: Element>(src: &[T], l: usize, stride: usize, offset: usize, width: usize, dst: &mut [T]) {
    for t in 0..l {
        dst[t * width..(t + 1) * width].copy_from_slice(&src[t * stride + offset..t * stride + offset + width]);
    }
}

fn scatter_add<T: Element>(src: &[T], l: usize, stride: usize, offset: usize, width: usize, dst: &mut [T]) {
    for t in 0..l {
        for j in 0..width {
            dst[t * stride + offset + j] += src[t * width + j];
        }
    }
}

pub fn attention<T: Element>(qkv: &Tensor<T>, heads: usize) -> Result<AttentionOut<T>> {
    let (n, l, d, dh) = split_dims(qkv, heads)?;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut out = vec![T::zero(); n * l * d];
    let mut probs = vec![T::zero(); n * heads * l * l];
    let (mut q, mut k, mut v) = (vec![T::zero(); l * dh], vec![T::zero(); l * dh], vec![T::zero(); l * dh]);
    let mut o = vec![T::zero(); l * dh];
    for b in 0..n {
        let src = &qkv.data()[b * l * 3 * d..(b + 1) * l * 3 * d];
        for h in 0..heads {
            gather(src, l, 3 * d, h * dh, dh, &mut q);
            gather(src, l, 3 * d, d + h * dh, dh, &mut k);
            gather(src, l, 3 * d, 2 * d + h * dh, dh, &mut v);
            let p = &mut probs[(b * heads + h) * l * l..(b * heads + h + 1) * l * l];
            gemm_nt(&q, &k, p, l, dh, l);
            for row in p.chunks_mut(l) {
                let mut mx = T::neg_infinity();
                for s in row.iter_mut() {
                    *s *= scale;
                    mx = mx.max(*s);
                }
                let mut z = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
            }
            o.fill(T::zero());
            gemm_nn(p, &v, &mut o, l, l, dh);
            scatter_add(&o, l, d, h * dh, dh, &mut out[b * l * d..(b + 1) * l * d]);
        }
    }
    Ok(AttentionOut {
        output: Tensor::new(vec![n, l, d], out)?,
        probs,
    })
}

pub fn attention_backward<T: Element>(
    qkv: &Tensor<T>,
    heads: usize,
    probs: &[T],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, l, d, dh) = split_dims(qkv, heads)?;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut gqkv = vec![T::zero(); qkv.numel()];
    let buf = || vec![T::zero(); l * dh];
    let (mut q, mut k, mut v, mut go) = (buf(), buf(), buf(), buf());
    let (mut gq, mut gk, mut gv) = (buf(), buf(), buf());
    let mut gp = vec![T::zero(); l * l];
    for b in 0..n {
        let src = &qkv.data()[b * l * 3 * d..(b + 1) * l * 3 * d];
        let gsrc = &grad_out.data()[b * l * d..(b + 1) * l * d];
        let gdst = &mut gqkv[b * l * 3 * d..(b + 1) * l * 3 * d];
        for h in 0..heads {
            gather(src, l, 3 * d, h * dh, dh, &mut q);
            gather(src, l, 3 * d, d + h * dh, dh, &mut k);
            gather(src, l, 3 * d, 2 * d + h * dh, dh, &mut v);
            gather(gsrc, l, d, h * dh, dh, &mut go);
            let p = &probs[(b * heads + h) * l * l..(b * heads + h + 1) * l * l];
            gv.fill(T::zero());
            gemm_tn(p, &go, &mut gv, l, l, dh);
            gp.fill(T::zero());
            gemm_nt(&go, &v, &mut gp, l, dh, l);
            for (prow, grow) in p.chunks(l).zip(gp.chunks_mut(l)) {
                let dot: T = prow.iter().zip(grow.iter()).map(|(&a, &b)| a * b).sum();
                for (g, &pv) in grow.iter_mut().zip(prow) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            gq.fill(T::zero());
            gemm_nn(&gp, &k, &mut gq, l, l, dh);
            gk.fill(T::zero());
            gemm_tn(&gp, &q, &mut gk, l, l, dh);
            scatter_add(&gq, l, 3 * d, h * dh, dh, gdst);
            scatter_add(&gk, l, 3 * d, d + h * dh, dh, gdst);
            scatter_add(&gv, l, 3 * d, 2 * d + h * dh, dh, gdst);
        }
    }
    Tensor::new(qkv.shape().to_vec(), gqkv)
}

//! Normalization kernels.
//!
//! Channel layout convention: rank-3 tensors `[N, L, D]` are token sequences
//! whose channel axis is the last one; every other rank uses axis 1 (NCHW or
//! `[N, C]`). Every tensor is viewed as `(outer, C, inner)`.

use crate::element::Element;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// `(outer, channels, inner)` view of a tensor under the channel convention.
pub fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        0 | 1 => dim_err("norm", format!("rank >= 2 required, got {shape:?}")),
        3 => Ok((shape[0] * shape[1], shape[2], 1)),
        _ => Ok((shape[0], shape[1], shape[2..].iter().product())),
    }
}

fn check_channels<T: Element>(op: &'static str, c: usize, params: &[&Tensor<T>]) -> Result<()> {
    for p in params {
        if p.shape() != [c] {
            return dim_err(op, format!("per-channel parameter shape {:?} != [{c}]", p.shape()));
        }
    }
    Ok(())
}

/// Batch statistics computed by a train-mode batch norm (biased variance).
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

pub struct BatchNormOut<T> {
    pub output: Tensor<T>,
    /// Normalized input, kept for the backward pass.
    pub xhat: Tensor<T>,
    /// `1/sqrt(var + eps)` per channel.
    pub inv_std: Vec<T>,
    pub stats: Option<BatchStats<T>>,
}

pub fn batchnorm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<BatchNormOut<T>> {
    let (outer, c, inner) = channel_layout(x.shape())?;
    check_channels("batchnorm", c, &[gamma, beta])?;
    let m = T::from_f64((outer * inner) as f64);
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            mean[ch] += xd[base..base + inner].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let mu = mean[ch];
            var[ch] += xd[base..base + inner].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let out = normalize(x, &mean, &inv_std, gamma, beta, outer, c, inner);
    Ok(BatchNormOut {
        output: out.0,
        xhat: out.1,
        inv_std,
        stats: Some(BatchStats {
            mean: Tensor::new(vec![c], mean)?,
            var: Tensor::new(vec![c], var)?,
        }),
    })
}

pub fn batchnorm_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<BatchNormOut<T>> {
    let (outer, c, inner) = channel_layout(x.shape())?;
    check_channels("batchnorm", c, &[gamma, beta, running_mean, running_var])?;
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let (output, xhat) = normalize(x, running_mean.data(), &inv_std, gamma, beta, outer, c, inner);
    Ok(BatchNormOut {
        output,
        xhat,
        inv_std,
        stats: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn normalize<T: Element>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    outer: usize,
    c: usize,
    inner: usize,
) -> (Tensor<T>, Tensor<T>) {
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in base..base + inner {
                let h = (xd[i] - mu) * is;
                xhat[i] = h;
                y[i] = g * h + b;
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), y).expect("same shape"),
        Tensor::new(x.shape().to_vec(), xhat).expect("same shape"),
    )
}

pub struct AffineNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Backward of batch norm. `train` selects batch-statistics (coupled) gradients.
pub fn batchnorm_backward<T: Element>(
    grad_out: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    train: bool,
) -> Result<AffineNormGrads<T>> {
    let (outer, c, inner) = channel_layout(grad_out.shape())?;
    let gy = grad_out.data();
    let xh = xhat.data();
    let mut g_gamma = vec![T::zero(); c];
    let mut g_beta = vec![T::zero(); c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                g_beta[ch] += gy[i];
                g_gamma[ch] += gy[i] * xh[i];
            }
        }
    }
    let m = T::from_f64((outer * inner) as f64);
    let mut gx = vec![T::zero(); gy.len()];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let k = gamma.data()[ch] * inv_std[ch];
            if train {
                let mb = g_beta[ch] / m;
                let mg = g_gamma[ch] / m;
                for i in base..base + inner {
                    gx[i] = k * (gy[i] - mb - xh[i] * mg);
                }
            } else {
                for i in base..base + inner {
                    gx[i] = k * gy[i];
                }
            }
        }
    }
    Ok(AffineNormGrads {
        input: Tensor::new(grad_out.shape().to_vec(), gx)?,
        gamma: Tensor::new(vec![c], g_gamma)?,
        beta: Tensor::new(vec![c], g_beta)?,
    })
}

/// Forward output of a per-sample normalization (layer or group norm).
pub struct SampleNormOut<T> {
    pub output: Tensor<T>,
    pub xhat: Tensor<T>,
    /// One `1/sqrt(var + eps)` per normalization group, in group order.
    pub inv_std: Vec<T>,
}

/// Enumerates the flat indices of each normalization group.
trait GroupIndex {
    fn groups(&self) -> usize;
    fn for_each(&self, grp: usize, f: &mut dyn FnMut(usize, usize));
    fn group_len(&self) -> usize;
}

/// Layer norm: one group per `(outer, inner)` position, spanning all channels.
struct LayerGroups {
    c: usize,
    inner: usize,
    outer: usize,
}

impl GroupIndex for LayerGroups {
    fn groups(&self) -> usize {
        self.outer * self.inner
    }
    fn group_len(&self) -> usize {
        self.c
    }
    fn for_each(&self, grp: usize, f: &mut dyn FnMut(usize, usize)) {
        let (o, i) = (grp / self.inner, grp % self.inner);
        for ch in 0..self.c {
            f((o * self.c + ch) * self.inner + i, ch);
        }
    }
}

/// Group norm over NCHW: one group per `(n, g)`, spanning `C/G` channels and all pixels.
struct ChannelGroups {
    c: usize,
    g: usize,
    inner: usize,
    outer: usize,
}

impl GroupIndex for ChannelGroups {
    fn groups(&self) -> usize {
        self.outer * self.g
    }
    fn group_len(&self) -> usize {
        self.c / self.g * self.inner
    }
    fn for_each(&self, grp: usize, f: &mut dyn FnMut(usize, usize)) {
        let (n, gi) = (grp / self.g, grp % self.g);
        let cg = self.c / self.g;
        for ch in gi * cg..(gi + 1) * cg {
            let base = (n * self.c + ch) * self.inner;
            for i in 0..self.inner {
                f(base + i, ch);
            }
        }
    }
}

fn sample_norm_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    idx: &dyn GroupIndex,
) -> SampleNormOut<T> {
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_stds = Vec::with_capacity(idx.groups());
    let m = T::from_f64(idx.group_len() as f64);
    for grp in 0..idx.groups() {
        let mut sum = T::zero();
        idx.for_each(grp, &mut |i, _| sum += xd[i]);
        let mean = sum / m;
        let mut sq = T::zero();
        idx.for_each(grp, &mut |i, _| sq += (xd[i] - mean) * (xd[i] - mean));
        let inv_std = T::one() / (sq / m + eps).sqrt();
        idx.for_each(grp, &mut |i, ch| {
            let h = (xd[i] - mean) * inv_std;
            xhat[i] = h;
            y[i] = gamma.data()[ch] * h + beta.data()[ch];
        });
        inv_stds.push(inv_std);
    }
    SampleNormOut {
        output: Tensor::new(x.shape().to_vec(), y).expect("same shape"),
        xhat: Tensor::new(x.shape().to_vec(), xhat).expect("same shape"),
        inv_std: inv_stds,
    }
}

fn sample_norm_backward<T: Element>(
    grad_out: &Tensor<T>,
    out: &SampleNormOut<T>,
    gamma: &Tensor<T>,
    idx: &dyn GroupIndex,
) -> AffineNormGrads<T> {
    let c = gamma.numel();
    let gy = grad_out.data();
    let xh = out.xhat.data();
    let mut g_gamma = vec![T::zero(); c];
    let mut g_beta = vec![T::zero(); c];
    let mut gx = vec![T::zero(); gy.len()];
    let m = T::from_f64(idx.group_len() as f64);
    for grp in 0..idx.groups() {
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        idx.for_each(grp, &mut |i, ch| {
            let gh = gy[i] * gamma.data()[ch];
            mean_g += gh;
            mean_gx += gh * xh[i];
            g_gamma[ch] += gy[i] * xh[i];
            g_beta[ch] += gy[i];
        });
        mean_g /= m;
        mean_gx /= m;
        let is = out.inv_std[grp];
        idx.for_each(grp, &mut |i, ch| {
            let gh = gy[i] * gamma.data()[ch];
            gx[i] = is * (gh - mean_g - xh[i] * mean_gx);
        });
    }
    AffineNormGrads {
        input: Tensor::new(grad_out.shape().to_vec(), gx).expect("same shape"),
        gamma: Tensor::new(vec![c], g_gamma).expect("channels"),
        beta: Tensor::new(vec![c], g_beta).expect("channels"),
    }
}

/// Layer norm over the channel axis at every position.
pub fn layernorm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<SampleNormOut<T>> {
    let (outer, c, inner) = channel_layout(x.shape())?;
    check_channels("layernorm", c, &[gamma, beta])?;
    Ok(sample_norm_forward(x, gamma, beta, eps, &LayerGroups { c, inner, outer }))
}

pub fn layernorm_backward<T: Element>(
    grad_out: &Tensor<T>,
    out: &SampleNormOut<T>,
    gamma: &Tensor<T>,
) -> Result<AffineNormGrads<T>> {
    let (outer, c, inner) = channel_layout(grad_out.shape())?;
    Ok(sample_norm_backward(grad_out, out, gamma, &LayerGroups { c, inner, outer }))
}

pub fn groupnorm<T: Element>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<SampleNormOut<T>> {
    if x.rank() != 4 {
        return dim_err("groupnorm", format!("input must be NCHW, got {:?}", x.shape()));
    }
    let (outer, c, inner) = channel_layout(x.shape())?;
    if groups == 0 || c % groups != 0 {
        return Err(crate::error::TensorError::Groups {
            op: "groupnorm",
            channels: c,
            groups,
        });
    }
    check_channels("groupnorm", c, &[gamma, beta])?;
    Ok(sample_norm_forward(
        x,
        gamma,
        beta,
        eps,
        &ChannelGroups {
            c,
            g: groups,
            inner,
            outer,
        },
    ))
}

pub fn groupnorm_backward<T: Element>(
    grad_out: &Tensor<T>,
    out: &SampleNormOut<T>,
    groups: usize,
    gamma: &Tensor<T>,
) -> Result<AffineNormGrads<T>> {
    let (outer, c, inner) = channel_layout(grad_out.shape())?;
    Ok(sample_norm_backward(
        grad_out,
        out,
        gamma,
        &ChannelGroups {
            c,
            g: groups,
            inner,
            outer,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neutral_eval_batchnorm_is_identity() {
        let eps = 1e-5;
        let x = Tensor::<f64>::from_fn(vec![2, 3, 2, 2], |i| i as f64 * 0.3 - 1.0);
        let ones = Tensor::ones(vec![3]);
        let zeros = Tensor::zeros(vec![3]);
        let var = Tensor::full(vec![3], 1.0 - eps);
        let y = batchnorm_eval(&x, &ones, &zeros, &zeros, &var, eps).unwrap();
        assert!(y.output.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn scalar_eval_batchnorm_substitution() {
        // 2·(2−1)/sqrt(4) + 0.5 = 1.5
        let eps = 1e-5;
        let x = Tensor::<f64>::new(vec![1, 1], vec![2.0]).unwrap();
        let y = batchnorm_eval(
            &x,
            &Tensor::full(vec![1], 2.0),
            &Tensor::full(vec![1], 0.5),
            &Tensor::full(vec![1], 1.0),
            &Tensor::full(vec![1], 4.0 - eps),
            eps,
        )
        .unwrap();
        assert!((y.output.data()[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn train_batchnorm_on_zeros_yields_beta() {
        let x = Tensor::<f64>::zeros(vec![4, 2, 3, 3]);
        let beta = Tensor::new(vec![2], vec![0.25, -0.75]).unwrap();
        let y = batchnorm_train(&x, &Tensor::ones(vec![2]), &beta, 1e-5).unwrap();
        for (i, v) in y.output.data().iter().enumerate() {
            let ch = (i / 9) % 2;
            assert_eq!(*v, beta.data()[ch]);
        }
    }

    #[test]
    fn token_layout_uses_last_axis() {
        assert_eq!(channel_layout(&[2, 5, 8]).unwrap(), (10, 8, 1));
        assert_eq!(channel_layout(&[2, 8, 3, 3]).unwrap(), (2, 8, 9));
        assert_eq!(channel_layout(&[4, 8]).unwrap(), (4, 8, 1));
    }

    #[test]
    fn layernorm_triple() {
        let eps = 1e-5;
        // Neutral parameters: output is the per-position standardization.
        let x = Tensor::<f64>::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap();
        let y = layernorm(&x, &Tensor::ones(vec![2]), &Tensor::zeros(vec![2]), eps).unwrap();
        let s = 1.0 / (1.0f64 + eps).sqrt();
        assert!((y.output.data()[0] + s).abs() < 1e-12 && (y.output.data()[1] - s).abs() < 1e-12);
        // Scalar substitution: x=[0,4], mean 2, var 4 → gamma·(±2)/sqrt(4+eps) + beta.
        let x = Tensor::<f64>::new(vec![1, 2], vec![0.0, 4.0]).unwrap();
        let g = Tensor::new(vec![2], vec![2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let y = layernorm(&x, &g, &b, eps).unwrap();
        let d = (4.0f64 + eps).sqrt();
        assert!((y.output.data()[0] - (2.0 * -2.0 / d + 0.5)).abs() < 1e-12);
        assert!((y.output.data()[1] - (3.0 * 2.0 / d - 1.0)).abs() < 1e-12);
        // Constant features collapse to beta.
        let x = Tensor::<f64>::full(vec![3, 2], 7.0);
        let y = layernorm(&x, &g, &b, eps).unwrap();
        for row in y.output.data().chunks(2) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 2, 2]);
        assert!(batchnorm_train(&x, &Tensor::ones(vec![4]), &Tensor::zeros(vec![4]), 1e-5).is_err());
        assert!(layernorm(&x, &Tensor::ones(vec![2]), &Tensor::zeros(vec![2]), 1e-5).is_err());
        assert!(groupnorm(&x, 2, &Tensor::ones(vec![3]), &Tensor::zeros(vec![3]), 1e-5).is_err());
    }
}

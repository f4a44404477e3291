//! Padding, pooling, token reshuffles and per-channel broadcasts.

use super::norm::channel_layout;
use crate::element::Element;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

fn expect_nchw<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return dim_err(op, format!("input must be NCHW, got {:?}", x.shape()));
    }
    Ok((x.dim(0), x.dim(1), x.dim(2), x.dim(3)))
}

/// Constant padding with a per-channel fill value.
pub fn pad2d<T: Element>(x: &Tensor<T>, padding: [usize; 2], fill: &[T]) -> Result<Tensor<T>> {
    let (n, c, h, w) = expect_nchw("pad", x)?;
    if fill.len() != c {
        return dim_err("pad", format!("{} fill values for {c} channels", fill.len()));
    }
    let [ph, pw] = padding;
    let (oh, ow) = (h + 2 * ph, w + 2 * pw);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * oh * ow;
            out[o..o + oh * ow].fill(fill[ch]);
            let i = (b * c + ch) * h * w;
            for y in 0..h {
                let dst = o + (y + ph) * ow + pw;
                out[dst..dst + w].copy_from_slice(&x.data()[i + y * w..i + (y + 1) * w]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Gradient of `pad2d`: crops the interior.
pub fn pad2d_backward<T: Element>(grad_out: &Tensor<T>, padding: [usize; 2]) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = expect_nchw("pad_backward", grad_out)?;
    let [ph, pw] = padding;
    let (h, w) = (oh - 2 * ph, ow - 2 * pw);
    let mut out = vec![T::zero(); n * c * h * w];
    for bc in 0..n * c {
        for y in 0..h {
            let src = bc * oh * ow + (y + ph) * ow + pw;
            out[bc * h * w + y * w..bc * h * w + (y + 1) * w]
                .copy_from_slice(&grad_out.data()[src..src + w]);
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// `[N, C, H, W] → [N, C]`
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = expect_nchw("global_avg_pool", x)?;
    let hw = h * w;
    let inv = T::one() / T::from_f64(hw as f64);
    let out = x.data().chunks(hw).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Element>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let hw: usize = input_shape[2..].iter().product();
    let inv = T::one() / T::from_f64(hw as f64);
    let mut out = Vec::with_capacity(grad_out.numel() * hw);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// `[N, C, H, W] → [N, H·W, C]`
pub fn to_tokens<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = expect_nchw("to_tokens", x)?;
    let t = x.clone().reshape(vec![n, c, h * w])?.transpose_last2()?;
    debug_assert_eq!(t.shape(), &[n, h * w, c]);
    Ok(t)
}

pub fn to_tokens_backward<T: Element>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    grad_out.transpose_last2()?.reshape(input_shape.to_vec())
}

/// Prepends a learned class token and adds learned position embeddings.
/// `x: [N, L, D]`, `cls: [D]`, `pos: [L+1, D]` → `[N, L+1, D]`.
pub fn class_token<T: Element>(x: &Tensor<T>, cls: &Tensor<T>, pos: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return dim_err("class_token", format!("input must be [N, L, D], got {:?}", x.shape()));
    }
    let (n, l, d) = (x.dim(0), x.dim(1), x.dim(2));
    if cls.shape() != [d] || pos.shape() != [l + 1, d] {
        return dim_err(
            "class_token",
            format!("cls {:?} / pos {:?} do not match tokens [{l}, {d}]", cls.shape(), pos.shape()),
        );
    }
    let mut out = Vec::with_capacity(n * (l + 1) * d);
    for b in 0..n {
        out.extend(cls.data().iter().zip(&pos.data()[..d]).map(|(&a, &p)| a + p));
        let xs = &x.data()[b * l * d..(b + 1) * l * d];
        out.extend(xs.iter().zip(&pos.data()[d..]).map(|(&a, &p)| a + p));
    }
    Tensor::new(vec![n, l + 1, d], out)
}

pub struct ClassTokenGrads<T> {
    pub input: Tensor<T>,
    pub cls: Tensor<T>,
    pub pos: Tensor<T>,
}

pub fn class_token_backward<T: Element>(grad_out: &Tensor<T>) -> Result<ClassTokenGrads<T>> {
    let (n, l1, d) = (grad_out.dim(0), grad_out.dim(1), grad_out.dim(2));
    let l = l1 - 1;
    let g = grad_out.data();
    let mut gx = Vec::with_capacity(n * l * d);
    let mut gcls = vec![T::zero(); d];
    let mut gpos = vec![T::zero(); l1 * d];
    for b in 0..n {
        let s = &g[b * l1 * d..(b + 1) * l1 * d];
        for (acc, &v) in gcls.iter_mut().zip(&s[..d]) {
            *acc += v;
        }
        for (acc, &v) in gpos.iter_mut().zip(s) {
            *acc += v;
        }
        gx.extend_from_slice(&s[d..]);
    }
    Ok(ClassTokenGrads {
        input: Tensor::new(vec![n, l, d], gx)?,
        cls: Tensor::new(vec![d], gcls)?,
        pos: Tensor::new(vec![l1, d], gpos)?,
    })
}

/// `[N, L, D] → [N, D]` taking token 0.
pub fn select_first_token<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return dim_err("select_token", format!("input must be [N, L, D], got {:?}", x.shape()));
    }
    let (n, l, d) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Vec::with_capacity(n * d);
    for b in 0..n {
        out.extend_from_slice(&x.data()[b * l * d..b * l * d + d]);
    }
    Tensor::new(vec![n, d], out)
}

pub fn select_first_token_backward<T: Element>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let (n, l, d) = (input_shape[0], input_shape[1], input_shape[2]);
    let mut out = vec![T::zero(); n * l * d];
    for b in 0..n {
        out[b * l * d..b * l * d + d].copy_from_slice(&grad_out.data()[b * d..(b + 1) * d]);
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// Max pooling with implicit `-inf` padding. Returns the output and, per output
/// element, the flat input index of the selected maximum.
pub fn max_pool2d<T: Element>(x: &Tensor<T>, kernel: usize, stride: usize, padding: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = expect_nchw("max_pool", x)?;
    let (Some(oh), Some(ow)) = (
        super::conv::conv_out_extent(h, kernel, stride, padding),
        super::conv::conv_out_extent(w, kernel, stride, padding),
    ) else {
        return dim_err("max_pool", format!("window {kernel} larger than padded input {:?}", x.shape()));
    };
    if padding >= kernel {
        return dim_err("max_pool", "padding must be smaller than the window");
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for bc in 0..n * c {
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn max_pool2d_backward<T: Element>(grad_out: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor<T>> {
    let mut g = vec![T::zero(); input_shape.iter().product()];
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        g[i] += v;
    }
    Tensor::new(input_shape.to_vec(), g)
}

/// Per-channel multiply (layer scale) under the channel layout convention.
pub fn channel_scale<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, inner) = channel_layout(x.shape())?;
    if gamma.shape() != [c] {
        return dim_err("channel_scale", format!("scale shape {:?} != [{c}]", gamma.shape()));
    }
    let mut out = x.data().to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        *v *= gamma.data()[(i / inner) % c];
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Returns `(grad_input, grad_gamma)`.
pub fn channel_scale_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, c, inner) = channel_layout(x.shape())?;
    let mut gx = grad_out.data().to_vec();
    let mut gg = vec![T::zero(); c];
    for (i, v) in gx.iter_mut().enumerate() {
        let ch = (i / inner) % c;
        gg[ch] += *v * x.data()[i];
        *v *= gamma.data()[ch];
    }
    Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(vec![c], gg)?))
}

/// Adds a fixed `[C, H, W]` map to every sample of an NCHW batch.
pub fn add_position_bias<T: Element>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, h, w) = expect_nchw("position_bias", x)?;
    if bias.shape() != [c, h, w] {
        return dim_err("position_bias", format!("map {:?} != [{c}, {h}, {w}]", bias.shape()));
    }
    let per = c * h * w;
    let mut out = x.data().to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        *v += bias.data()[i % per];
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_fills_per_channel_and_crops_back() {
        let x = Tensor::<f64>::from_fn(vec![1, 2, 2, 2], |i| i as f64 + 1.0);
        let p = pad2d(&x, [1, 1], &[-1.0, -2.0]).unwrap();
        assert_eq!(p.shape(), &[1, 2, 4, 4]);
        assert_eq!(p.data()[0], -1.0);
        assert_eq!(p.data()[16], -2.0);
        assert_eq!(p.data()[5], 1.0);
        assert_eq!(pad2d_backward(&p, [1, 1]).unwrap(), x);
    }

    #[test]
    fn tokens_round_trip() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 2, 2], |i| i as f64);
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[2, 4, 3]);
        // token (pixel) 1 of sample 0 holds channels [1, 5, 9]
        assert_eq!(&t.data()[3..6], &[1.0, 5.0, 9.0]);
        assert_eq!(to_tokens_backward(&t, x.shape()).unwrap(), x);
    }

    #[test]
    fn max_pool_picks_window_maxima() {
        let x = Tensor::<f64>::from_fn(vec![1, 1, 4, 4], |i| i as f64);
        let (y, arg) = max_pool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
    }

    #[test]
    fn avg_pool_means_each_channel() {
        let x = Tensor::<f64>::from_fn(vec![1, 2, 2, 2], |i| i as f64);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.data(), &[1.5, 5.5]);
    }
}

//! 2-D convolution over NCHW tensors with OIHW (per-group) weights.
//!
//! `conv2d_reference` is the direct nested-loop definition. `conv2d` uses an
//! im2col + GEMM path for dense convolutions and row-wise loops for grouped
//! ones; all paths are tested against each other.

use super::gemm::{dot, gemm_nn, gemm_nt, gemm_tn};
use crate::element::Element;
use crate::error::{dim_err, Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub groups: usize,
}

impl Default for Conv2dGeom {
    fn default() -> Self {
        Self {
            stride: [1, 1],
            padding: [0, 0],
            groups: 1,
        }
    }
}

impl Conv2dGeom {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride: [stride, stride],
            padding: [padding, padding],
            groups,
        }
    }
}

/// Output extent along one axis, `None` when the kernel does not fit.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn dims<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &Conv2dGeom,
) -> Result<Dims> {
    const OP: &str = "conv2d";
    if input.rank() != 4 {
        return dim_err(OP, format!("input must be NCHW, got shape {:?}", input.shape()));
    }
    if weight.rank() != 4 {
        return dim_err(OP, format!("weight must be OIHW, got shape {:?}", weight.shape()));
    }
    let (n, cin, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (cout, cin_g, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
    if g.groups == 0 || cin % g.groups != 0 {
        return Err(TensorError::Groups {
            op: OP,
            channels: cin,
            groups: g.groups,
        });
    }
    if cout % g.groups != 0 {
        return Err(TensorError::Groups {
            op: OP,
            channels: cout,
            groups: g.groups,
        });
    }
    if cin_g != cin / g.groups {
        return dim_err(
            OP,
            format!(
                "weight input-channel extent {cin_g} != {cin} input channels / {} groups",
                g.groups
            ),
        );
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return dim_err(OP, format!("bias shape {:?} != [{cout}]", b.shape()));
        }
    }
    let oh = conv_out_extent(h, kh, g.stride[0], g.padding[0]);
    let ow = conv_out_extent(w, kw, g.stride[1], g.padding[1]);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return dim_err(
            OP,
            format!("kernel {kh}x{kw} does not fit input {h}x{w} with padding {:?}", g.padding),
        );
    };
    Ok(Dims {
        n,
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g: cout / g.groups,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Range of output indices `o` for which `o*stride + k - pad` lands inside `[0, extent)`.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
    // o*stride + k >= pad  and  o*stride + k < extent + pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Direct-loop convolution; the definition every other path is checked against.
pub fn conv2d_reference<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &Conv2dGeom,
) -> Result<Tensor<T>> {
    let d = dims(input, weight, bias, g)?;
    let [sh, sw] = g.stride;
    let [ph, pw] = g.padding;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![T::zero(); d.n * d.cout * d.oh * d.ow];
    for n in 0..d.n {
        for oc in 0..d.cout {
            let grp = oc / d.cout_g;
            let o_base = (n * d.cout + oc) * d.oh * d.ow;
            if let Some(b) = bias {
                out[o_base..o_base + d.oh * d.ow].fill(b.data()[oc]);
            }
            for icg in 0..d.cin_g {
                let ic = grp * d.cin_g + icg;
                let x_base = (n * d.cin + ic) * d.h * d.w;
                for ky in 0..d.kh {
                    let (oy_lo, oy_hi) = valid_range(ky, sh, ph, d.h, d.oh);
                    for kx in 0..d.kw {
                        let wv = wt[((oc * d.cin_g + icg) * d.kh + ky) * d.kw + kx];
                        let (ox_lo, ox_hi) = valid_range(kx, sw, pw, d.w, d.ow);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * sh + ky - ph;
                            let x_row = x_base + iy * d.w;
                            let o_row = o_base + oy * d.ow;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * sw + kx - pw;
                                out[o_row + ox] += wv * x[x_row + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.n, d.cout, d.oh, d.ow], out)
}

fn is_pointwise(d: &Dims, g: &Conv2dGeom) -> bool {
    d.kh == 1 && d.kw == 1 && g.stride == [1, 1] && g.padding == [0, 0]
}

/// Unfolds one sample `[cin, h, w]` into `[cin*kh*kw, oh*ow]`.
fn im2col<T: Element>(x: &[T], d: &Dims, g: &Conv2dGeom, cols: &mut [T]) {
    let [sh, sw] = g.stride;
    let [ph, pw] = g.padding;
    let p = d.oh * d.ow;
    cols.fill(T::zero());
    for c in 0..d.cin {
        for ky in 0..d.kh {
            let (oy_lo, oy_hi) = valid_range(ky, sh, ph, d.h, d.oh);
            for kx in 0..d.kw {
                let (ox_lo, ox_hi) = valid_range(kx, sw, pw, d.w, d.ow);
                let row = ((c * d.kh + ky) * d.kw + kx) * p;
                for oy in oy_lo..oy_hi {
                    let iy = oy * sh + ky - ph;
                    for ox in ox_lo..ox_hi {
                        let ix = ox * sw + kx - pw;
                        cols[row + oy * d.ow + ox] = x[(c * d.h + iy) * d.w + ix];
                    }
                }
            }
        }
    }
}

/// Folds `[cin*kh*kw, oh*ow]` columns back into a `[cin, h, w]` gradient (accumulating).
fn col2im<T: Element>(cols: &[T], d: &Dims, g: &Conv2dGeom, x: &mut [T]) {
    let [sh, sw] = g.stride;
    let [ph, pw] = g.padding;
    let p = d.oh * d.ow;
    for c in 0..d.cin {
        for ky in 0..d.kh {
            let (oy_lo, oy_hi) = valid_range(ky, sh, ph, d.h, d.oh);
            for kx in 0..d.kw {
                let (ox_lo, ox_hi) = valid_range(kx, sw, pw, d.w, d.ow);
                let row = ((c * d.kh + ky) * d.kw + kx) * p;
                for oy in oy_lo..oy_hi {
                    let iy = oy * sh + ky - ph;
                    for ox in ox_lo..ox_hi {
                        let ix = ox * sw + kx - pw;
                        x[(c * d.h + iy) * d.w + ix] += cols[row + oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

/// im2col + GEMM convolution; dense (`groups == 1`) only.
pub fn conv2d_im2col<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &Conv2dGeom,
) -> Result<Tensor<T>> {
    let d = dims(input, weight, bias, g)?;
    if g.groups != 1 {
        return dim_err("conv2d_im2col", "grouped convolution is not supported on this path");
    }
    let p = d.oh * d.ow;
    let kk = d.cin * d.kh * d.kw;
    let x = input.data();
    let mut out = vec![T::zero(); d.n * d.cout * p];
    let pointwise = is_pointwise(&d, g);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
    for n in 0..d.n {
        let xs = &x[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w];
        let o = &mut out[n * d.cout * p..(n + 1) * d.cout * p];
        if let Some(b) = bias {
            for (oc, chunk) in o.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        if pointwise {
            gemm_nn(weight.data(), xs, o, d.cout, kk, p);
        } else {
            im2col(xs, &d, g, &mut cols);
            gemm_nn(weight.data(), &cols, o, d.cout, kk, p);
        }
    }
    Tensor::new(vec![d.n, d.cout, d.oh, d.ow], out)
}

pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &Conv2dGeom,
) -> Result<Tensor<T>> {
    if g.groups == 1 {
        conv2d_im2col(input, weight, bias, g)
    } else {
        conv2d_grouped(input, weight, bias, g)
    }
}

/// `dst[i] += w * src[i * stride]` over the overlapping prefix.
#[inline]
fn axpy_strided<T: Element>(dst: &mut [T], src: &[T], w: T, stride: usize) {
    if stride == 1 {
        for (o, &v) in dst.iter_mut().zip(src) {
            *o += w * v;
        }
    } else {
        for (o, &v) in dst.iter_mut().zip(src.iter().step_by(stride)) {
            *o += w * v;
        }
    }
}

/// Zero-padded copy of every input plane, `[n*cin, h+2ph, w+2pw]`.
fn pad_planes<T: Element>(x: &[T], d: &Dims, g: &Conv2dGeom) -> Vec<T> {
    let [ph, pw] = g.padding;
    let (hp, wp) = (d.h + 2 * ph, d.w + 2 * pw);
    let mut out = vec![T::zero(); d.n * d.cin * hp * wp];
    for (src, dst) in x.chunks(d.h * d.w).zip(out.chunks_mut(hp * wp)) {
        for y in 0..d.h {
            dst[(y + ph) * wp + pw..][..d.w].copy_from_slice(&src[y * d.w..(y + 1) * d.w]);
        }
    }
    out
}

/// Stride-1 grouped convolution on padded planes. Output rows are computed
/// at the padded width so each tap is one contiguous update; the extra
/// columns are discarded.
fn grouped_unit_stride<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &Conv2dGeom,
    d: &Dims,
) -> Tensor<T> {
    let xp = pad_planes(input.data(), d, g);
    let wp = d.w + 2 * g.padding[1];
    let hw_p = (d.h + 2 * g.padding[0]) * wp;
    let len = (d.oh - 1) * wp + d.ow;
    let wt = weight.data();
    let kk = d.kh * d.kw;
    let p = d.oh * d.ow;
    let mut wide = vec![T::zero(); len];
    let mut out = vec![T::zero(); d.n * d.cout * p];
    for (plane, o) in out.chunks_mut(p).enumerate() {
        let (n, oc) = (plane / d.cout, plane % d.cout);
        let grp = oc / d.cout_g;
        wide.fill(bias.map_or(T::zero(), |b| b.data()[oc]));
        for icg in 0..d.cin_g {
            let ic = grp * d.cin_g + icg;
            let xs = &xp[(n * d.cin + ic) * hw_p..][..hw_p];
            let ws = &wt[(oc * d.cin_g + icg) * kk..][..kk];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    axpy_strided(&mut wide, &xs[ky * wp + kx..][..len], ws[ky * d.kw + kx], 1);
                }
            }
        }
        for oy in 0..d.oh {
            o[oy * d.ow..(oy + 1) * d.ow].copy_from_slice(&wide[oy * wp..oy * wp + d.ow]);
        }
    }
    Tensor::new(vec![d.n, d.cout, d.oh, d.ow], out).expect("shape matches data")
}

fn backward_grouped_unit_stride<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    g: &Conv2dGeom,
    d: &Dims,
    gy: &[T],
) -> (Vec<T>, Vec<T>) {
    let [ph, pw] = g.padding;
    let xp = pad_planes(input.data(), d, g);
    let wp = d.w + 2 * pw;
    let hw_p = (d.h + 2 * ph) * wp;
    let len = (d.oh - 1) * wp + d.ow;
    let wt = weight.data();
    let kk = d.kh * d.kw;
    let p = d.oh * d.ow;
    let mut gxp = vec![T::zero(); xp.len()];
    let mut gw = vec![T::zero(); weight.numel()];
    let mut wide = vec![T::zero(); len];
    for (plane, gys) in gy.chunks(p).enumerate() {
        let (n, oc) = (plane / d.cout, plane % d.cout);
        let grp = oc / d.cout_g;
        for oy in 0..d.oh {
            wide[oy * wp..oy * wp + d.ow].copy_from_slice(&gys[oy * d.ow..(oy + 1) * d.ow]);
        }
        for icg in 0..d.cin_g {
            let ic = grp * d.cin_g + icg;
            let base = (n * d.cin + ic) * hw_p;
            let xs = &xp[base..base + hw_p];
            let gxs = &mut gxp[base..base + hw_p];
            let w_base = (oc * d.cin_g + icg) * kk;
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let off = ky * wp + kx;
                    gw[w_base + ky * d.kw + kx] += dot(&wide, &xs[off..off + len]);
                    axpy_strided(&mut gxs[off..off + len], &wide, wt[w_base + ky * d.kw + kx], 1);
                }
            }
        }
    }
    let mut gx = vec![T::zero(); input.numel()];
    for (src, dst) in gxp.chunks(hw_p).zip(gx.chunks_mut(d.h * d.w)) {
        for y in 0..d.h {
            dst[y * d.w..(y + 1) * d.w].copy_from_slice(&src[(y + ph) * wp + pw..][..d.w]);
        }
    }
    (gx, gw)
}

/// Grouped convolution with contiguous row updates.
fn conv2d_grouped<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &Conv2dGeom,
) -> Result<Tensor<T>> {
    let d = dims(input, weight, bias, g)?;
    if g.stride == [1, 1] {
        return Ok(grouped_unit_stride(input, weight, bias, g, &d));
    }
    let [sh, sw] = g.stride;
    let [ph, pw] = g.padding;
    let x = input.data();
    let wt = weight.data();
    let p = d.oh * d.ow;
    let mut out = vec![T::zero(); d.n * d.cout * p];
    for (plane, o) in out.chunks_mut(p).enumerate() {
        let (n, oc) = (plane / d.cout, plane % d.cout);
        let grp = oc / d.cout_g;
        if let Some(b) = bias {
            o.fill(b.data()[oc]);
        }
        for icg in 0..d.cin_g {
            let ic = grp * d.cin_g + icg;
            let xs = &x[(n * d.cin + ic) * d.h * d.w..][..d.h * d.w];
            let ws = &wt[(oc * d.cin_g + icg) * d.kh * d.kw..][..d.kh * d.kw];
            for ky in 0..d.kh {
                let (oy_lo, oy_hi) = valid_range(ky, sh, ph, d.h, d.oh);
                for kx in 0..d.kw {
                    let wv = ws[ky * d.kw + kx];
                    let (ox_lo, ox_hi) = valid_range(kx, sw, pw, d.w, d.ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix_lo = ox_lo * sw + kx - pw;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * sh + ky - ph;
                        let src = &xs[iy * d.w + ix_lo..(iy + 1) * d.w];
                        axpy_strided(&mut o[oy * d.ow + ox_lo..oy * d.ow + ox_hi], src, wv, sw);
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.n, d.cout, d.oh, d.ow], out)
}

pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    g: &Conv2dGeom,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let d = dims(input, weight, None, g)?;
    if grad_out.shape() != [d.n, d.cout, d.oh, d.ow] {
        return dim_err(
            "conv2d_backward",
            format!("gradient shape {:?} does not match output", grad_out.shape()),
        );
    }
    let p = d.oh * d.ow;
    let gy = grad_out.data();
    let mut gb = vec![T::zero(); d.cout];
    for n in 0..d.n {
        for oc in 0..d.cout {
            let base = (n * d.cout + oc) * p;
            gb[oc] += gy[base..base + p].iter().copied().sum::<T>();
        }
    }
    let (gx, gw) = if g.groups == 1 {
        backward_dense(input, weight, g, &d, gy)
    } else {
        backward_grouped(input, weight, g, &d, gy)
    };
    Ok(Conv2dGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![d.cout], gb)?,
    })
}

fn backward_dense<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    g: &Conv2dGeom,
    d: &Dims,
    gy: &[T],
) -> (Vec<T>, Vec<T>) {
    let p = d.oh * d.ow;
    let kk = d.cin * d.kh * d.kw;
    let sample = d.cin * d.h * d.w;
    let x = input.data();
    let mut gx = vec![T::zero(); input.numel()];
    let mut gw = vec![T::zero(); weight.numel()];
    let pointwise = is_pointwise(d, g);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
    let mut gcols = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
    for n in 0..d.n {
        let xs = &x[n * sample..(n + 1) * sample];
        let gys = &gy[n * d.cout * p..(n + 1) * d.cout * p];
        if pointwise {
            gemm_nt(gys, xs, &mut gw, d.cout, p, kk);
            gemm_tn(weight.data(), gys, &mut gx[n * sample..(n + 1) * sample], kk, d.cout, p);
        } else {
            im2col(xs, d, g, &mut cols);
            gemm_nt(gys, &cols, &mut gw, d.cout, p, kk);
            gcols.fill(T::zero());
            gemm_tn(weight.data(), gys, &mut gcols, kk, d.cout, p);
            col2im(&gcols, d, g, &mut gx[n * sample..(n + 1) * sample]);
        }
    }
    (gx, gw)
}

fn backward_grouped<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    g: &Conv2dGeom,
    d: &Dims,
    gy: &[T],
) -> (Vec<T>, Vec<T>) {
    if g.stride == [1, 1] {
        return backward_grouped_unit_stride(input, weight, g, d, gy);
    }
    let [sh, sw] = g.stride;
    let [ph, pw] = g.padding;
    let x = input.data();
    let wt = weight.data();
    let plane = d.h * d.w;
    let kk = d.kh * d.kw;
    let mut gx = vec![T::zero(); input.numel()];
    let mut gw = vec![T::zero(); weight.numel()];
    for n in 0..d.n {
        for oc in 0..d.cout {
            let grp = oc / d.cout_g;
            let gys = &gy[(n * d.cout + oc) * d.oh * d.ow..][..d.oh * d.ow];
            for icg in 0..d.cin_g {
                let ic = grp * d.cin_g + icg;
                let x_base = (n * d.cin + ic) * plane;
                let xs = &x[x_base..x_base + plane];
                let gxs = &mut gx[x_base..x_base + plane];
                let w_base = (oc * d.cin_g + icg) * kk;
                for ky in 0..d.kh {
                    let (oy_lo, oy_hi) = valid_range(ky, sh, ph, d.h, d.oh);
                    for kx in 0..d.kw {
                        let widx = w_base + ky * d.kw + kx;
                        let wv = wt[widx];
                        let (ox_lo, ox_hi) = valid_range(kx, sw, pw, d.w, d.ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo * sw + kx - pw;
                        let len = ox_hi - ox_lo;
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * sh + ky - ph;
                            let g_row = &gys[oy * d.ow + ox_lo..][..len];
                            let x_off = iy * d.w + ix_lo;
                            if sw == 1 {
                                let x_row = &xs[x_off..][..len];
                                let gx_row = &mut gxs[x_off..][..len];
                                for ((&gv, &xv), gxv) in g_row.iter().zip(x_row).zip(gx_row) {
                                    acc += gv * xv;
                                    *gxv += wv * gv;
                                }
                            } else {
                                for (j, &gv) in g_row.iter().enumerate() {
                                    let ix = x_off + j * sw;
                                    acc += gv * xs[ix];
                                    gxs[ix] += wv * gv;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw)
}

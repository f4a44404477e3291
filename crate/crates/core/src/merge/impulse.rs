//! Kernel extraction by probing a linear map with unit impulses. Used as an
//! independent oracle for the closed-form fusions.

use updp_tensor::{Element, Tensor};

use super::fuse::{FusedConv, FusedLinear};
use crate::error::{Error, Result};

/// Geometry of the conv a probed map is expected to equal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImpulseProbe {
    pub cin: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

/// Recovers the dense kernel and bias of an activation-free map `f` on
/// NCHW tensors. The map is probed once in a batch holding a zero image and
/// one impulse per `(channel, tap)`, each placed so that a chosen output
/// pixel sees it at that tap with its receptive field inside the image.
pub fn extract_kernel_by_impulse<T: Element>(
    f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    probe: ImpulseProbe,
) -> Result<FusedConv<T>> {
    let ImpulseProbe {
        cin,
        kernel: [kh, kw],
        stride: [sy, sx],
        padding: [py, px],
    } = probe;
    if cin == 0 || kh == 0 || kw == 0 || sy == 0 || sx == 0 {
        return Err(Error::merge("impulse", format!("degenerate probe {probe:?}")));
    }
    // Output pixel (oy, ox) reads input rows oy·s − p ..= oy·s − p + k − 1.
    let (oy, ox) = (py.div_ceil(sy), px.div_ceil(sx));
    let (r0, c0) = (oy * sy - py, ox * sx - px);
    let (h, w) = (r0 + kh, c0 + kw);
    let taps = kh * kw;
    let n = 1 + cin * taps;
    let mut x = Tensor::zeros(vec![n, cin, h, w]);
    for c in 0..cin {
        for u in 0..kh {
            for v in 0..kw {
                let sample = 1 + c * taps + u * kw + v;
                x.data_mut()[((sample * cin + c) * h + r0 + u) * w + c0 + v] = T::one();
            }
        }
    }
    let y = f(&x)?;
    if y.rank() != 4 || y.dim(0) != n || y.dim(2) <= oy || y.dim(3) <= ox {
        return Err(Error::merge(
            "impulse",
            format!("probe output {:?} does not contain pixel ({oy}, {ox})", y.shape()),
        ));
    }
    let (cout, yh, yw) = (y.dim(1), y.dim(2), y.dim(3));
    let at = |s: usize, e: usize| y.data()[((s * cout + e) * yh + oy) * yw + ox];
    let bias: Vec<T> = (0..cout).map(|e| at(0, e)).collect();
    let mut weight = vec![T::zero(); cout * cin * taps];
    for e in 0..cout {
        for c in 0..cin {
            for t in 0..taps {
                weight[(e * cin + c) * taps + t] = at(1 + c * taps + t, e) - bias[e];
            }
        }
    }
    FusedConv::new(
        Tensor::new(vec![cout, cin, kh, kw], weight)?,
        Tensor::new(vec![cout], bias)?,
        probe.stride,
        probe.padding,
        1,
    )
}

/// Recovers `W` and `b` of an affine map on `[N, cin]` rows.
pub fn extract_linear_by_impulse<T: Element>(f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>, cin: usize) -> Result<FusedLinear<T>> {
    let x = Tensor::from_fn(vec![1 + cin, cin], |i| if i / cin == 1 + i % cin { T::one() } else { T::zero() });
    let y = f(&x)?;
    if y.rank() != 2 || y.dim(0) != 1 + cin {
        return Err(Error::merge("impulse", format!("probe output {:?} is not [{}, _]", y.shape(), 1 + cin)));
    }
    let cout = y.dim(1);
    let bias = y.data()[..cout].to_vec();
    let mut weight = vec![T::zero(); cout * cin];
    for c in 0..cin {
        for e in 0..cout {
            weight[e * cin + c] = y.data()[(1 + c) * cout + e] - bias[e];
        }
    }
    FusedLinear::new(Tensor::new(vec![cout, cin], weight)?, Tensor::new(vec![cout], bias)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_a_strided_padded_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = FusedConv::<f64>::new(
            Tensor::randn(vec![3, 2, 3, 5], 1.0, &mut rng),
            Tensor::randn(vec![3], 1.0, &mut rng),
            [2, 1],
            [1, 2],
            1,
        )
        .unwrap();
        let probe = ImpulseProbe {
            cin: 2,
            kernel: [3, 5],
            stride: [2, 1],
            padding: [1, 2],
        };
        let got = extract_kernel_by_impulse(|x| conv.forward(x), probe).unwrap();
        assert!(got.weight.max_abs_diff(&conv.weight).unwrap() < 1e-12);
        assert!(got.bias.max_abs_diff(&conv.bias).unwrap() < 1e-12);
    }

    #[test]
    fn recovers_a_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = FusedLinear::<f64>::new(Tensor::randn(vec![4, 3], 1.0, &mut rng), Tensor::randn(vec![4], 1.0, &mut rng)).unwrap();
        let got = extract_linear_by_impulse(|x| l.forward(x), 3).unwrap();
        assert!(got.weight.max_abs_diff(&l.weight).unwrap() < 1e-12);
        assert!(got.bias.max_abs_diff(&l.bias).unwrap() < 1e-12);
    }
}

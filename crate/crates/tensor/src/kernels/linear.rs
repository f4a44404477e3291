use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::element::Element;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Rows and features of an input whose last axis is the feature axis.
fn rows_features<T: Element>(x: &Tensor<T>) -> Result<(usize, usize)> {
    if x.rank() < 2 {
        return dim_err("linear", format!("input must be at least rank 2, got {:?}", x.shape()));
    }
    let f = x.dim(x.rank() - 1);
    Ok((x.numel() / f.max(1), f))
}

/// `y = x·Wᵀ + b` over the last axis. `weight: [out, in]`.
pub fn linear<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, cin) = rows_features(x)?;
    if weight.rank() != 2 || weight.dim(1) != cin {
        return dim_err(
            "linear",
            format!("weight {:?} does not accept {cin} input features", weight.shape()),
        );
    }
    let cout = weight.dim(0);
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return dim_err("linear", format!("bias shape {:?} != [{cout}]", b.shape()));
        }
    }
    let mut out = vec![T::zero(); rows * cout];
    if let Some(b) = bias {
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(b.data());
        }
    }
    gemm_nt(x.data(), weight.data(), &mut out, rows, cin, cout);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 2") = cout;
    Tensor::new(shape, out)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (rows, cin) = rows_features(x)?;
    let cout = weight.dim(0);
    let gy = grad_out.data();
    let mut gx = vec![T::zero(); rows * cin];
    gemm_nn(gy, weight.data(), &mut gx, rows, cout, cin);
    let mut gw = vec![T::zero(); cout * cin];
    gemm_tn(gy, x.data(), &mut gw, cout, rows, cin);
    let mut gb = vec![T::zero(); cout];
    for row in gy.chunks(cout) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(x.shape().to_vec(), gx)?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![cout], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weight_passes_input() {
        let x = Tensor::<f64>::from_fn(vec![3, 4], |i| i as f64 - 5.0);
        let w = Tensor::from_fn(vec![4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let y = linear(&x, &w, Some(&Tensor::zeros(vec![4]))).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn hand_multiplied_example() {
        let x = Tensor::<f64>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let y = linear(&x, &w, Some(&Tensor::zeros(vec![2]))).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(vec![4, 8], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(vec![3, 8], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![3], 1.0, &mut rng);
        let y = linear(&x, &w, Some(&b)).unwrap();
        for i in 0..4 {
            for o in 0..3 {
                let mut acc = b.data()[o];
                for k in 0..8 {
                    acc += x.data()[i * 8 + k] * w.data()[o * 8 + k];
                }
                assert!((y.data()[i * 3 + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inner_dimension_mismatch_errors() {
        let x = Tensor::<f32>::zeros(vec![2, 3]);
        let w = Tensor::<f32>::zeros(vec![4, 5]);
        assert!(linear(&x, &w, None).is_err());
    }
}

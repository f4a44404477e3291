use serde::{Deserialize, Serialize};

use crate::element::{lit, Element};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// ReLU clamped at 6.
    Relu6,
    /// Exact Gaussian-CDF GELU, `x·Φ(x)`.
    Gelu,
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1/sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn gaussian_cdf<T: Element>(x: T) -> T {
    lit::<T>(0.5) * (T::one() + (x * lit(FRAC_1_SQRT_2)).erf())
}

impl Activation {
    #[inline]
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Relu6 => x.max(T::zero()).min(lit(6.0)),
            Activation::Gelu => x * gaussian_cdf(x),
        }
    }

    #[inline]
    pub fn derivative<T: Element>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Relu6 => {
                if x > T::zero() && x < lit(6.0) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let pdf = lit::<T>(INV_SQRT_2PI) * (-(x * x) * lit(0.5)).exp();
                gaussian_cdf(x) + x * pdf
            }
        }
    }

    pub fn is_identity(self) -> bool {
        self == Activation::Identity
    }
}

pub fn activation_forward<T: Element>(x: &Tensor<T>, act: Activation) -> Tensor<T> {
    if act.is_identity() {
        return x.clone();
    }
    x.map(|v| act.apply(v))
}

pub fn activation_backward<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>, act: Activation) -> Tensor<T> {
    if act.is_identity() {
        return grad_out.clone();
    }
    x.zip_map(grad_out, "activation_backward", |v, g| g * act.derivative(v))
        .expect("gradient has the input shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(2.0f64), 2.0);
        assert_eq!(Activation::Relu6.apply(9.0f64), 6.0);
    }

    #[test]
    fn gelu_uses_exact_cdf() {
        assert_eq!(Activation::Gelu.apply(0.0f64), 0.0);
        // Φ(1) = 0.841344746068542948585232545632...
        assert!((Activation::Gelu.apply(1.0f64) - 0.841_344_746_068_543).abs() < 1e-14);
        // tanh approximation gives 0.8411919906; make sure we are not using it
        assert!((Activation::Gelu.apply(1.0f64) - 0.841_191_990_6).abs() > 1e-4);
    }

    #[test]
    fn identity_is_bit_exact() {
        let x = Tensor::<f32>::from_fn(vec![5], |i| (i as f32 - 2.3).exp());
        assert_eq!(activation_forward(&x, Activation::Identity), x);
    }
}

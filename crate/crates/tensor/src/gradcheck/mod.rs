//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator so that near-zero gradients are
/// compared absolutely.
pub const GRAD_GUARD: f64 = 1e-3;

/// Fixed, non-uniform projection weights that turn a tensor output into a scalar.
pub fn projection(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |i| 1.0 + 0.5 * (1.3 * i as f64 + 0.2).sin())
}

/// Compares the tape gradient of `f` at `point` with central differences.
///
/// `f` builds a graph from the input variable; non-scalar outputs are reduced
/// with [`projection`]. The numeric derivative is the Richardson combination
/// `(4·D(h/2) − D(h)) / 3` of central differences `D`, which cancels the
/// `O(h²)` truncation term. Returns `max_i |a_i − n_i| / max(|a_i|, GRAD_GUARD)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |tape: &mut Tape<f64>, x: Var| -> Result<Var> {
        let y = f(tape, x)?;
        if tape.value(y).numel() == 1 {
            return Ok(y);
        }
        let w = projection(tape.value(y).shape());
        tape.dot(y, &w)
    };
    let mut tape = Tape::new();
    let x = tape.input(point.clone());
    let loss = eval(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let zero = Tensor::zeros(point.shape().to_vec());
    let analytic = grads.get(x).unwrap_or(&zero);

    let scalar_at = |p: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let x = t.input(p);
        let y = eval(&mut t, x)?;
        Ok(t.value(y).data()[0])
    };
    let mut worst = 0.0f64;
    let central = |i: usize, h: f64| -> Result<f64> {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        Ok((scalar_at(plus)? - scalar_at(minus)?) / (2.0 * h))
    };
    for i in 0..point.numel() {
        let numeric = (4.0 * central(i, step / 2.0)? - central(i, step)?) / 3.0;
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(GRAD_GUARD));
    }
    Ok(worst)
}

pub mod suite;

use crate::element::Element;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of `[N, C]` logits.
pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return dim_err("softmax", format!("logits must be [N, C], got {:?}", logits.shape()));
    }
    let c = logits.dim(1);
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean cross-entropy. Returns `(loss, softmax probabilities)`.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let probs = softmax_rows(logits)?;
    let (n, c) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return dim_err("cross_entropy", format!("{} labels for {n} rows", labels.len()));
    }
    let mut loss = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return dim_err("cross_entropy", format!("label {y} out of range for {c} classes"));
        }
        let p = probs.data()[i * c + y].max(T::min_positive_value());
        loss -= p.ln();
    }
    Ok((loss / T::from_f64(n as f64), probs))
}

pub fn cross_entropy_backward<T: Element>(probs: &Tensor<T>, labels: &[usize], grad: T) -> Tensor<T> {
    let c = probs.dim(1);
    let scale = grad / T::from_f64(labels.len() as f64);
    let mut g = probs.data().to_vec();
    for (i, &y) in labels.iter().enumerate() {
        g[i * c + y] -= T::one();
    }
    g.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(probs.shape().to_vec(), g).expect("same shape")
}

/// Index of the largest logit in each row; ties resolve to the lowest index.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.dim(logits.rank() - 1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::<f64>::zeros(vec![2, 4]);
        let (loss, _) = cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}

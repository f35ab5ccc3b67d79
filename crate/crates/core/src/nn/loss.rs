use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise softmax of `[B, C]` logits, max-shifted.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut p = logits.clone();
    for i in 0..p.dim(0) {
        softmax_in_place(p.row_mut(i));
    }
    p
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (T, Tensor<T>) {
    let b = logits.dim(0);
    assert_eq!(b, labels.len(), "one label per row");
    let inv = T::one() / T::lit(b as f64);
    let mut grad = softmax(logits);
    let mut loss = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        loss += log_sum_exp(logits.row(i)) - logits.row(i)[y];
        let g = grad.row_mut(i);
        g[y] -= T::one();
        g.iter_mut().for_each(|v| *v *= inv);
    }
    (loss * inv, grad)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.row(*i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Index of the largest value; the first one on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::<f64>::zeros(&[3, 7]);
        let (l, _) = cross_entropy(&logits, &[0, 3, 6]);
        assert!((l - 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data: Vec<f64> = vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.4];
        let logits = Tensor::from_vec(&[2, 3], data.clone()).unwrap();
        let labels = [2, 0];
        let (_, g) = cross_entropy(&logits, &labels);
        for j in 0..6 {
            let mut p = data.clone();
            let mut m = data.clone();
            p[j] += 1e-6;
            m[j] -= 1e-6;
            let lp = cross_entropy(&Tensor::from_vec(&[2, 3], p).unwrap(), &labels).0;
            let lm = cross_entropy(&Tensor::from_vec(&[2, 3], m).unwrap(), &labels).0;
            assert!(((lp - lm) / 2e-6 - g.data()[j]).abs() < 1e-8);
        }
    }
}

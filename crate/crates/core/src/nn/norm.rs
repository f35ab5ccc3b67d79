//! Batch normalization over `[B, C, ...]`, statistics per channel.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and unbiased variance, for the running-statistics update.
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

fn spatial(x: &Tensor<impl Scalar>) -> usize {
    x.shape()[2..].iter().product()
}

/// Training-mode forward: normalizes with batch statistics.
pub fn forward_train<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> (Tensor<T>, BnCache<T>) {
    let (b, c, s) = (x.dim(0), x.dim(1), spatial(x));
    let count = b * s;
    let n = T::lit(count as f64);
    let eps = T::lit(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for i in 0..b {
        let row = x.row(i);
        for ch in 0..c {
            mean[ch] += row[ch * s..(ch + 1) * s].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for i in 0..b {
        let row = x.row(i);
        for ch in 0..c {
            let m = mean[ch];
            var[ch] += row[ch * s..(ch + 1) * s]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum::<T>();
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / n + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for i in 0..b {
        let src = x.row(i);
        let xh = xhat.row_mut(i);
        for ch in 0..c {
            for j in ch * s..(ch + 1) * s {
                xh[j] = (src[j] - mean[ch]) * inv_std[ch];
            }
        }
        let dst = y.row_mut(i);
        let xh = xhat.row(i);
        for ch in 0..c {
            for j in ch * s..(ch + 1) * s {
                dst[j] = gamma[ch] * xh[j] + beta[ch];
            }
        }
    }
    let unbiased = if count > 1 {
        T::lit((count - 1) as f64)
    } else {
        T::one()
    };
    let batch_var = var.iter().map(|&v| v / unbiased).collect();
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var,
        },
    )
}

/// Eval-mode forward with frozen running statistics.
pub fn forward_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Tensor<T> {
    let (b, c, s) = (x.dim(0), x.dim(1), spatial(x));
    let eps = T::lit(BN_EPS);
    let scale: Vec<T> = (0..c)
        .map(|ch| gamma[ch] / (running_var[ch] + eps).sqrt())
        .collect();
    let shift: Vec<T> = (0..c)
        .map(|ch| beta[ch] - running_mean[ch] * scale[ch])
        .collect();
    let mut y = x.clone();
    for i in 0..b {
        let row = y.row_mut(i);
        for ch in 0..c {
            row[ch * s..(ch + 1) * s]
                .iter_mut()
                .for_each(|v| *v = *v * scale[ch] + shift[ch]);
        }
    }
    y
}

/// Reverse pass; accumulates `dgamma`/`dbeta` and returns the input gradient.
pub fn backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let (b, c, s) = (dy.dim(0), dy.dim(1), spatial(dy));
    let n = T::lit((b * s) as f64);
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for i in 0..b {
        let g = dy.row(i);
        let xh = cache.xhat.row(i);
        for ch in 0..c {
            for j in ch * s..(ch + 1) * s {
                sum_dy[ch] += g[j];
                sum_dy_xhat[ch] += g[j] * xh[j];
            }
        }
    }
    for ch in 0..c {
        dgamma[ch] += sum_dy_xhat[ch];
        dbeta[ch] += sum_dy[ch];
    }
    let mut dx = Tensor::zeros(dy.shape());
    for i in 0..b {
        let g = dy.row(i);
        let xh = cache.xhat.row(i);
        let out = dx.row_mut(i);
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / n;
            for j in ch * s..(ch + 1) * s {
                out[j] = k * (n * g[j] - sum_dy[ch] - xh[j] * sum_dy_xhat[ch]);
            }
        }
    }
    dx
}

pub fn update_running<T: Scalar>(running: &mut [T], batch: &[T]) {
    let m = T::lit(BN_MOMENTUM);
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = (T::one() - m) * *r + m * b;
    }
}

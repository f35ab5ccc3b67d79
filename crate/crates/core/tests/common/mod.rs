//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use fewshot::image::Image;
use fewshot::rng;
use fewshot::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn random_image(channels: usize, side: usize, seed: u64) -> Image<f32> {
    let mut r = rng::seeded(seed);
    Image::from_vec(channels, side, side, (0..channels * side * side).map(|_| r.random()).collect()).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, r: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// A weighted multinomial logistic problem written out row by row.
pub struct ProbeOracle {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    pub classes: usize,
    pub l2: f64,
}

impl ProbeOracle {
    fn dim(&self) -> usize {
        self.rows[0].len()
    }

    fn logits(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..self.classes)
            .map(|k| theta[self.classes * d + k] + (0..d).map(|j| theta[k * d + j] * x[j]).sum::<f64>())
            .collect()
    }

    /// Parameters are `W` row-major (`classes × dim`) followed by biases.
    pub fn value(&self, theta: &[f64]) -> f64 {
        let total: f64 = self.weights.iter().sum();
        let mut loss = 0.0;
        for ((x, &y), &w) in self.rows.iter().zip(&self.labels).zip(&self.weights) {
            let z = self.logits(theta, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += w * (lse - z[y]);
        }
        let d = self.dim();
        let reg: f64 = theta[..self.classes * d].iter().map(|v| v * v).sum();
        loss / total + 0.5 * self.l2 * reg
    }

    fn grad_hess(&self, theta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let c = self.classes;
        let n = c * (d + 1);
        let total: f64 = self.weights.iter().sum();
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for ((x, &y), &w) in self.rows.iter().zip(&self.labels).zip(&self.weights) {
            let s = w / total;
            let z = self.logits(theta, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let sum: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|v| v / sum).collect();
            // Jacobian of the logits w.r.t. theta.
            let mut jac = DMatrix::zeros(c, n);
            for k in 0..c {
                for j in 0..d {
                    jac[(k, k * d + j)] = x[j];
                }
                jac[(k, c * d + k)] = 1.0;
            }
            let mut r = DVector::from_vec(p.clone());
            r[y] -= 1.0;
            g += s * jac.transpose() * r;
            let mut hz = DMatrix::from_diagonal(&DVector::from_vec(p.clone()));
            let pv = DVector::from_vec(p);
            hz -= &pv * pv.transpose();
            h += s * jac.transpose() * hz * &jac;
        }
        for i in 0..c * d {
            g[i] += self.l2 * theta[i];
            h[(i, i)] += self.l2;
        }
        (g, h)
    }

    /// Damped Newton from zero until the gradient norm drops below `tol`.
    pub fn minimize(&self, tol: f64) -> (Vec<f64>, f64) {
        let n = self.classes * (self.dim() + 1);
        let mut theta = vec![0.0; n];
        let mut f = self.value(&theta);
        for _ in 0..500 {
            let (g, mut h) = self.grad_hess(&theta);
            if g.norm() < tol {
                break;
            }
            // The common bias shift is a flat direction; a tiny ridge keeps
            // the factorization defined without moving the minimum.
            for i in 0..n {
                h[(i, i)] += 1e-12;
            }
            let step = h.cholesky().expect("positive definite").solve(&(-g.clone()));
            let slope = g.dot(&step);
            let mut t = 1.0;
            loop {
                let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
                let fc = self.value(&cand);
                if fc <= f + 1e-4 * t * slope || t < 1e-12 {
                    theta = cand;
                    f = fc;
                    break;
                }
                t *= 0.5;
            }
        }
        (theta, f)
    }
}

/// NT-Xent from the full `2B × 2B` cosine-similarity matrix.
pub fn ntxent_bruteforce(a: &Tensor<f64>, b: &Tensor<f64>, tau: f64) -> f64 {
    let bsz = a.dim(0);
    let rows: Vec<Vec<f64>> = (0..bsz).map(|i| a.row(i).to_vec()).chain((0..bsz).map(|i| b.row(i).to_vec())).collect();
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let n = 2 * bsz;
    let sim = |i: usize, j: usize| unit[i].iter().zip(&unit[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let pos = (i + bsz) % n;
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| sim(i, k).exp()).sum();
        total += -(sim(i, pos).exp() / denom).ln();
    }
    total / n as f64
}

/// Majority label by explicit tallying, ties to the larger probability sum,
/// then to the smaller index.
pub fn vote_bruteforce(votes: &[usize], prob_sums: &[f64]) -> usize {
    let tally = |c: usize| votes.iter().filter(|&&v| v == c).count();
    let top = (0..prob_sums.len()).map(tally).max().unwrap();
    let tied: Vec<usize> = (0..prob_sums.len()).filter(|&c| tally(c) == top).collect();
    let best_p = tied.iter().map(|&c| prob_sums[c]).fold(f64::NEG_INFINITY, f64::max);
    *tied.iter().find(|&&c| prob_sums[c] == best_p).unwrap()
}

/// All `base^len` sequences over `0..base`.
pub fn all_patterns(base: usize, len: usize) -> Vec<Vec<usize>> {
    let total = base.pow(len as u32);
    (0..total)
        .map(|mut code| {
            (0..len)
                .map(|_| {
                    let d = code % base;
                    code /= base;
                    d
                })
                .collect()
        })
        .collect()
}

use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::scalar::Scalar;

/// SGD with heavy-ball momentum and coupled L2 weight decay:
/// `v ← μv + (g + λp)`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<ParamSet<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) {
        let vel = self.velocity.get_or_insert_with(|| params.zeros_like());
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for i in 0..params.len() {
            let p = params.get_mut(i).data_mut();
            let g = grads.get(i).data();
            let v = vel.get_mut(i).data_mut();
            for j in 0..p.len() {
                v[j] = mu * v[j] + g[j] + wd * p[j];
                p[j] -= lr * v[j];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    t: i32,
    m: Option<ParamSet<T>>,
    v: Option<ParamSet<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: None,
            v: None,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) {
        self.t += 1;
        let m = self.m.get_or_insert_with(|| params.zeros_like());
        let v = self.v.get_or_insert_with(|| params.zeros_like());
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (tb1, tb2, eps) = (T::lit(b1), T::lit(b2), T::lit(self.cfg.eps));
        let step = T::lit(lr / c1);
        let c2 = T::lit(c2);
        for i in 0..params.len() {
            let p = params.get_mut(i).data_mut();
            let g = grads.get(i).data();
            let mi = m.get_mut(i).data_mut();
            let vi = v.get_mut(i).data_mut();
            for j in 0..p.len() {
                mi[j] = tb1 * mi[j] + (T::one() - tb1) * g[j];
                vi[j] = tb2 * vi[j] + (T::one() - tb2) * g[j] * g[j];
                p[j] -= step * mi[j] / ((vi[j] / c2).sqrt() + eps);
            }
        }
    }
}

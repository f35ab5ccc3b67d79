//! ANIL: MAML whose inner loop adapts only the final linear layer φ.
//!
//! The outer gradient is exact. Inner steps on the head have a closed-form
//! Jacobian, so the reverse pass walks back through the stored inner
//! iterates by hand instead of through a general autodiff tape.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{build_backbone, BackboneConfig, FeatureExtractor, Trace};
use crate::data::{sample_episode, ClassPool, DatasetSpec, Episode, Partition, SplitAssignment, DEFAULT_QUERY_PER_CLASS};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::loss::{accuracy, cross_entropy, softmax};
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::ParamSet;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{gemm, MatRef, Tensor};

/// Inner step size: 0.01 for up to 9-way tasks, 0.05 from 10-way on.
pub fn default_alpha(n_way: usize) -> f64 {
    if n_way >= 10 {
        0.05
    } else {
        0.01
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OuterOptimizer {
    /// Plain gradient step with step size β.
    #[serde(rename = "SGD")]
    Sgd,
    #[serde(rename = "ADAM")]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub inner_steps_train: usize,
    pub inner_steps_eval: usize,
    pub task_batch: usize,
    pub epochs: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub episodes_per_epoch: usize,
    pub val_episodes: usize,
    /// Drops the second-order terms; for speed comparisons only.
    pub first_order: bool,
    pub outer_optimizer: OuterOptimizer,
}

impl MetaConfig {
    pub fn new(n_way: usize, k_shot: usize) -> Self {
        Self {
            alpha: default_alpha(n_way),
            beta: 0.001,
            inner_steps_train: 5,
            inner_steps_eval: 10,
            task_batch: 4,
            epochs: 400,
            n_way,
            k_shot,
            q_per_class: DEFAULT_QUERY_PER_CLASS,
            episodes_per_epoch: 400,
            val_episodes: 200,
            first_order: false,
            outer_optimizer: OuterOptimizer::Sgd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("alpha and beta must be positive".into()));
        }
        if self.inner_steps_train == 0 || self.task_batch == 0 || self.n_way < 2 || self.k_shot == 0 {
            return Err(Error::Config("inner_steps_train, task_batch, k_shot ≥ 1 and n_way ≥ 2 required".into()));
        }
        Ok(())
    }

    /// Outer steps per epoch.
    pub fn outer_steps(&self) -> usize {
        self.episodes_per_epoch.div_ceil(self.task_batch)
    }
}

/// The adapted linear layer: `weight` is `[n_way, feature_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Head<T> {
    pub fn zeros(n_way: usize, dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[n_way, dim]),
            bias: Tensor::zeros(&[n_way]),
        }
    }

    pub fn random<R: Rng + ?Sized>(n_way: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let w = (0..n_way * dim).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
        Self {
            weight: Tensor::from_vec(&[n_way, dim], w).expect("sized"),
            bias: Tensor::zeros(&[n_way]),
        }
    }

    pub fn logits(&self, features: &Tensor<T>) -> Tensor<T> {
        crate::nn::linear::forward(features, &self.weight, Some(&self.bias))
    }

    fn axpy(&mut self, alpha: T, other: &Self) {
        self.weight.axpy(alpha, &other.weight);
        self.bias.axpy(alpha, &other.bias);
    }

    fn all_finite(&self) -> bool {
        self.weight.all_finite() && self.bias.all_finite()
    }

    pub fn cast<U: Scalar>(&self) -> Head<U> {
        Head {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    fn as_params(&self) -> ParamSet<T> {
        let mut p = ParamSet::new();
        p.push("phi.weight", self.weight.clone());
        p.push("phi.bias", self.bias.clone());
        p
    }

    fn from_params(mut p: ParamSet<T>) -> Self {
        let bias = std::mem::replace(p.get_mut(1), Tensor::zeros(&[0]));
        let weight = std::mem::replace(p.get_mut(0), Tensor::zeros(&[0]));
        Self { weight, bias }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaState<T> {
    pub theta: FeatureExtractor<T>,
    pub phi: Head<T>,
}

impl<T: Scalar> MetaState<T> {
    pub fn new(theta: FeatureExtractor<T>, n_way: usize, seed: u64) -> Self {
        let d = theta.feature_dim();
        let phi = Head::random(n_way, d, &mut rng::stream(seed, &[0x706869]));
        Self { theta, phi }
    }
}

/// Softmax-cross-entropy gradient `(softmax(Z) − Y)/m` and the softmax.
fn ce_grad<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (Tensor<T>, Tensor<T>) {
    let p = softmax(logits);
    let (_, g) = cross_entropy(logits, labels);
    (g, p)
}

/// Head gradient of the mean support cross-entropy.
fn head_grad<T: Scalar>(f: &Tensor<T>, g: &Tensor<T>) -> Head<T> {
    let (m, d) = (f.dim(0), f.dim(1));
    let n = g.dim(1);
    let mut gw = Tensor::zeros(&[n, d]);
    gemm(T::one(), MatRef::new(g.data(), m, n).t(), MatRef::new(f.data(), m, d), T::zero(), gw.data_mut());
    let mut gb = Tensor::zeros(&[n]);
    for i in 0..m {
        for (acc, &v) in gb.data_mut().iter_mut().zip(g.row(i)) {
            *acc += v;
        }
    }
    Head { weight: gw, bias: gb }
}

fn check_labels(labels: &[usize], rows: usize, n_way: usize) -> Result<()> {
    if labels.len() != rows || labels.iter().any(|&y| y >= n_way) {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {rows} rows, labels must lie in 0..{n_way}",
            labels.len()
        )));
    }
    Ok(())
}

/// Inner iterates kept for the reverse pass: the head before each step and
/// the support softmax at that head.
struct InnerTape<T> {
    heads: Vec<Head<T>>,
    probs: Vec<Tensor<T>>,
}

fn adapt_on_features<T: Scalar>(phi: &Head<T>, fs: &Tensor<T>, ys: &[usize], alpha: f64, steps: usize) -> (Head<T>, InnerTape<T>) {
    let mut head = phi.clone();
    let mut tape = InnerTape {
        heads: Vec::with_capacity(steps),
        probs: Vec::with_capacity(steps),
    };
    for _ in 0..steps {
        let (g, p) = ce_grad(&head.logits(fs), ys);
        let grad = head_grad(fs, &g);
        tape.heads.push(head.clone());
        tape.probs.push(p);
        head.axpy(T::lit(-alpha), &grad);
    }
    (head, tape)
}

/// Adapts φ on support features with `steps` gradient steps, θ frozen.
pub fn inner_adapt_features<T: Scalar>(phi: &Head<T>, features_s: &Tensor<T>, support_y: &[usize], alpha: f64, steps: usize) -> Result<Head<T>> {
    if features_s.ndim() != 2 || features_s.dim(1) != phi.weight.dim(1) {
        return Err(Error::ShapeMismatch(format!(
            "support features {:?} for head {:?}",
            features_s.shape(),
            phi.weight.shape()
        )));
    }
    check_labels(support_y, features_s.dim(0), phi.weight.dim(0))?;
    Ok(adapt_on_features(phi, features_s, support_y, alpha, steps).0)
}

/// φ′ after `steps` head updates on the support set (batch-statistics mode).
pub fn inner_adapt<T: Scalar>(state: &MetaState<T>, support_x: &Tensor<T>, support_y: &[usize], alpha: f64, steps: usize) -> Result<Head<T>> {
    let (fs, _) = state.theta.forward_train(support_x)?;
    inner_adapt_features(&state.phi, &fs, support_y, alpha, steps)
}

/// Reverse pass through the inner loop. Takes the adjoint of φ′ and returns
/// the adjoint of φ together with the adjoint of the support features.
fn reverse_inner<T: Scalar>(
    tape: &InnerTape<T>,
    fs: &Tensor<T>,
    ys: &[usize],
    alpha: f64,
    mut bar: Head<T>,
    first_order: bool,
) -> (Head<T>, Tensor<T>) {
    let (m, d) = (fs.dim(0), fs.dim(1));
    let mut fbar = Tensor::zeros(&[m, d]);
    if first_order {
        return (bar, fbar);
    }
    let inv_m = T::one() / T::lit(m as f64);
    let neg_alpha = T::lit(-alpha);
    for (head, p) in tape.heads.iter().zip(&tape.probs).rev() {
        let n = head.weight.dim(0);
        // A = −α W̄′, a = −α b̄′
        let mut a_w = bar.weight.clone();
        a_w.scale(neg_alpha);
        let mut a_b = bar.bias.clone();
        a_b.scale(neg_alpha);
        // G = (P − Y)/m at this step
        let mut g = p.clone();
        for (i, &y) in ys.iter().enumerate() {
            let row = g.row_mut(i);
            row[y] -= T::one();
            row.iter_mut().for_each(|v| *v *= inv_m);
        }
        // F̄ += G A
        gemm(T::one(), MatRef::new(g.data(), m, n), MatRef::new(a_w.data(), n, d), T::one(), fbar.data_mut());
        // Ḡ = F Aᵀ + 1 aᵀ
        let mut gbar = vec![T::zero(); m * n];
        for i in 0..m {
            gbar[i * n..(i + 1) * n].copy_from_slice(a_b.data());
        }
        gemm(T::one(), MatRef::new(fs.data(), m, d), MatRef::new(a_w.data(), n, d).t(), T::one(), &mut gbar);
        // Z̄ = (1/m) P ⊙ (Ḡ − rowsum(P ⊙ Ḡ))
        let mut zbar = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let pr = p.row(i);
            let gr = &gbar[i * n..(i + 1) * n];
            let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for (j, z) in zbar.row_mut(i).iter_mut().enumerate() {
                *z = inv_m * pr[j] * (gr[j] - dot);
            }
        }
        // W̄ += Z̄ᵀ F, b̄ += colsum Z̄, F̄ += Z̄ W
        let hg = head_grad(fs, &zbar);
        bar.weight.add_assign(&hg.weight);
        bar.bias.add_assign(&hg.bias);
        gemm(T::one(), MatRef::new(zbar.data(), m, n), MatRef::new(head.weight.data(), n, d), T::one(), fbar.data_mut());
    }
    (bar, fbar)
}

/// Gradient of the summed adapted query losses of a task batch.
pub struct MetaGradient<T> {
    pub loss: f64,
    pub accuracy: f64,
    pub theta: ParamSet<T>,
    pub phi: Head<T>,
    traces: Vec<Trace<T>>,
}

pub fn meta_gradient<T: Scalar>(state: &MetaState<T>, episodes: &[Episode<T>], alpha: f64, steps: usize, first_order: bool) -> Result<MetaGradient<T>> {
    let n_way = state.phi.weight.dim(0);
    let mut out = MetaGradient {
        loss: 0.0,
        accuracy: 0.0,
        theta: state.theta.params().zeros_like(),
        phi: Head::zeros(n_way, state.phi.weight.dim(1)),
        traces: Vec::with_capacity(2 * episodes.len()),
    };
    for ep in episodes {
        check_labels(&ep.support_y, ep.support_x.dim(0), n_way)?;
        check_labels(&ep.query_y, ep.query_x.dim(0), n_way)?;
        let (fs, ts) = state.theta.forward_train(&ep.support_x)?;
        let (fq, tq) = state.theta.forward_train(&ep.query_x)?;
        let (adapted, tape) = adapt_on_features(&state.phi, &fs, &ep.support_y, alpha, steps);
        let zq = adapted.logits(&fq);
        let (loss, gq) = cross_entropy(&zq, &ep.query_y);
        out.loss += loss.to_f64_lossy();
        out.accuracy += accuracy(&zq, &ep.query_y);
        // Query adjoints: W̄′ = G_Qᵀ F_Q, b̄′ = colsum G_Q, F̄_Q = G_Q W′
        let bar = head_grad(&fq, &gq);
        let mut fq_bar = Tensor::zeros(fq.shape());
        let (mq, d) = (fq.dim(0), fq.dim(1));
        gemm(T::one(), MatRef::new(gq.data(), mq, n_way), MatRef::new(adapted.weight.data(), n_way, d), T::zero(), fq_bar.data_mut());
        let (phi_bar, fs_bar) = reverse_inner(&tape, &fs, &ep.support_y, alpha, bar, first_order);
        out.phi.axpy(T::one(), &phi_bar);
        state.theta.backward_into(&tq, &fq_bar, &mut out.theta);
        if !first_order {
            state.theta.backward_into(&ts, &fs_bar, &mut out.theta);
        }
        out.traces.push(ts);
        out.traces.push(tq);
    }
    if !episodes.is_empty() {
        out.accuracy /= episodes.len() as f64;
    }
    if !out.theta.all_finite() || !out.phi.all_finite() || !out.loss.is_finite() {
        return Err(Error::NonFiniteGradient("meta outer gradient".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterStats {
    /// Summed query loss over the task batch.
    pub loss: f64,
    /// Mean query accuracy over the task batch.
    pub accuracy: f64,
}

fn commit_traces<T: Scalar>(state: &mut MetaState<T>, traces: &[Trace<T>]) {
    for t in traces {
        state.theta.commit_batch_stats(t);
    }
}

/// θ ← θ − β∇θ Σ L_i, φ ← φ − β∇φ Σ L_i, differentiating through the inner
/// steps.
pub fn meta_outer_step<T: Scalar>(state: &mut MetaState<T>, episodes: &[Episode<T>], config: &MetaConfig) -> Result<OuterStats> {
    if episodes.len() != config.task_batch {
        return Err(Error::Config(format!(
            "task batch of {} episodes, config expects {}",
            episodes.len(),
            config.task_batch
        )));
    }
    let g = meta_gradient(state, episodes, config.alpha, config.inner_steps_train, config.first_order)?;
    let step = T::lit(-config.beta);
    let mut update = g.theta.clone();
    update.scale(step);
    state.theta.params_mut().add_assign(&update);
    state.phi.axpy(step, &g.phi);
    commit_traces(state, &g.traces);
    Ok(OuterStats {
        loss: g.loss,
        accuracy: g.accuracy,
    })
}

/// Query loss and accuracy of φ adapted on one episode, without updating
/// anything.
pub fn evaluate_episode<T: Scalar>(state: &MetaState<T>, ep: &Episode<T>, alpha: f64, steps: usize) -> Result<(f64, f64)> {
    let (fs, _) = state.theta.forward_train(&ep.support_x)?;
    let (fq, _) = state.theta.forward_train(&ep.query_x)?;
    let adapted = inner_adapt_features(&state.phi, &fs, &ep.support_y, alpha, steps)?;
    let z = adapted.logits(&fq);
    Ok((cross_entropy(&z, &ep.query_y).0.to_f64_lossy(), accuracy(&z, &ep.query_y)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub epoch: usize,
    /// Mean per-episode adapted query loss.
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub fn write_meta_log(path: &Path, records: &[MetaRecord]) -> Result<()> {
    let mut out = String::from("epoch,train_query_loss,train_query_acc,val_query_loss,val_query_acc\n");
    for r in records {
        writeln!(out, "{},{:.6},{:.6},{:.6},{:.6}", r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc).expect("string write");
    }
    write_atomic(path, out.as_bytes())
}

#[derive(Debug, Clone)]
pub struct MetaOutcome {
    /// State at the epoch with minimal validation loss (earliest on ties).
    pub best: MetaState<f32>,
    pub best_epoch: usize,
    pub final_state: MetaState<f32>,
    pub records: Vec<MetaRecord>,
}

/// Meta-trains on episodes from `split.inner_train`; validation episodes
/// come from the val partition with a fixed seed.
pub fn meta_train(config: &MetaConfig, spec: &DatasetSpec, split: &SplitAssignment, backbone_cfg: &BackboneConfig, seed: u64) -> Result<MetaOutcome> {
    config.validate()?;
    let train_pool = ClassPool::from_indices(spec, &split.inner_train);
    let val_pool = ClassPool::partitions(spec, &[Partition::Val]);
    let (n, k, q) = (config.n_way, config.k_shot, config.q_per_class);
    let theta = build_backbone::<f32>(backbone_cfg, seed)?;
    let mut state = MetaState::new(theta, n, seed);
    let mut adam = match config.outer_optimizer {
        OuterOptimizer::Adam => Some((Adam::<f32>::new(AdamConfig::default()), Adam::<f32>::new(AdamConfig::default()))),
        OuterOptimizer::Sgd => None,
    };
    let val_eps: Vec<Episode<f32>> = if config.val_episodes > 0 && !val_pool.is_empty() {
        (0..config.val_episodes)
            .map(|e| sample_episode(spec, &val_pool, n, k, q, &split.norm, &mut rng::stream(seed, &[0x76616c, e as u64])))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, MetaState<f32>)> = None;
    for epoch in 0..config.epochs {
        let (mut loss_sum, mut acc_sum, mut count) = (0.0, 0.0, 0usize);
        for step in 0..config.outer_steps() {
            let eps = (0..config.task_batch)
                .map(|t| {
                    let mut r = rng::stream(seed, &[0x6d657461, epoch as u64, (step * config.task_batch + t) as u64]);
                    sample_episode(spec, &train_pool, n, k, q, &split.norm, &mut r)
                })
                .collect::<Result<Vec<Episode<f32>>>>()?;
            let stats = match adam.as_mut() {
                None => meta_outer_step(&mut state, &eps, config)?,
                Some((opt_t, opt_p)) => {
                    let g = meta_gradient(&state, &eps, config.alpha, config.inner_steps_train, config.first_order)?;
                    opt_t.step(state.theta.params_mut(), &g.theta, config.beta);
                    let mut phi = state.phi.as_params();
                    opt_p.step(&mut phi, &g.phi.as_params(), config.beta);
                    state.phi = Head::from_params(phi);
                    commit_traces(&mut state, &g.traces);
                    OuterStats {
                        loss: g.loss,
                        accuracy: g.accuracy,
                    }
                }
            };
            loss_sum += stats.loss;
            acc_sum += stats.accuracy * config.task_batch as f64;
            count += config.task_batch;
        }
        let (mut vl, mut va) = (0.0, 0.0);
        for ep in &val_eps {
            let (l, a) = evaluate_episode(&state, ep, config.alpha, config.inner_steps_eval)?;
            vl += l;
            va += a;
        }
        let nv = val_eps.len().max(1) as f64;
        let record = MetaRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / count.max(1) as f64,
            train_acc: acc_sum / count.max(1) as f64,
            val_loss: if val_eps.is_empty() { loss_sum / count.max(1) as f64 } else { vl / nv },
            val_acc: va / nv,
        };
        if best.as_ref().is_none_or(|(b, _, _)| record.val_loss < *b) {
            best = Some((record.val_loss, epoch + 1, state.clone()));
        }
        records.push(record);
    }
    let (best_state, best_epoch) = match best {
        Some((_, e, s)) => (s, e),
        None => (state.clone(), 0),
    };
    Ok(MetaOutcome {
        best: best_state,
        best_epoch,
        final_state: state,
        records,
    })
}

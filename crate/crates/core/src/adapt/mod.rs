//! Adaptation on frozen features: a multinomial logistic probe, auxiliary
//! base-class rows with their own logits, and transform-copy voting.

pub mod lbfgs;

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::FeatureExtractor;
use crate::data::{eval_view, pipeline_view, to_batch, ClassPool, Normalization, ResolutionMode};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::loss::{argmax, log_sum_exp, softmax_in_place};
use crate::pretext::{location_source, transform_location5, transform_rotation};
use crate::tensor::{gemm, MatRef, Tensor};

pub use lbfgs::{LbfgsOptions, LbfgsResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureNorm {
    #[serde(rename = "NONE")]
    None,
    #[serde(rename = "UNIT_L2")]
    UnitL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Coefficient of `½‖W‖²`; biases are not penalized.
    pub l2_coeff: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub feature_norm: FeatureNorm,
    /// Relative weight of each auxiliary row against a support row.
    pub aux_weight: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2_coeff: 1e-3,
            tol: 1e-6,
            max_iters: 1000,
            feature_norm: FeatureNorm::None,
            aux_weight: 1.0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.l2_coeff < 0.0 || self.aux_weight < 0.0 {
            return Err(Error::Config("probe needs tol > 0, l2_coeff ≥ 0, aux_weight ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuxMode {
    #[serde(rename = "NONE")]
    None,
    #[serde(rename = "RANDOM_TOTAL")]
    RandomTotal,
    #[serde(rename = "PER_CLASS")]
    PerClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxAugmentation {
    pub mode: AuxMode,
    pub total_count: usize,
    pub per_class_count: usize,
    /// Draw one auxiliary set per trial instead of one per episode.
    pub fixed_pool: bool,
}

impl AuxAugmentation {
    pub const NONE: Self = Self {
        mode: AuxMode::None,
        total_count: 0,
        per_class_count: 0,
        fixed_pool: false,
    };

    pub fn random_total(count: usize) -> Self {
        Self {
            mode: AuxMode::RandomTotal,
            total_count: count,
            ..Self::NONE
        }
    }

    pub fn per_class(count: usize) -> Self {
        Self {
            mode: AuxMode::PerClass,
            per_class_count: count,
            ..Self::NONE
        }
    }
}

impl Default for AuxAugmentation {
    fn default() -> Self {
        Self::NONE
    }
}

impl fmt::Display for AuxAugmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            AuxMode::None => f.write_str("none"),
            AuxMode::RandomTotal => write!(f, "random:{}", self.total_count),
            AuxMode::PerClass => write!(f, "per_class:{}", self.per_class_count),
        }
    }
}

impl FromStr for AuxAugmentation {
    type Err = Error;

    /// `none`, `random:<total>`, or `per_class:<count>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "none" {
            return Ok(Self::NONE);
        }
        let (kind, count) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("aux spec {s:?} must look like random:1000 or per_class:5")))?;
        let count: usize = count.parse().map_err(|_| Error::Config(format!("bad aux count in {s:?}")))?;
        match kind {
            "random" | "random_total" => Ok(Self::random_total(count)),
            "per_class" | "perclass" => Ok(Self::per_class(count)),
            _ => Err(Error::Config(format!("unknown aux mode {kind:?}"))),
        }
    }
}

/// Auxiliary rows drawn for one episode.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AuxSample {
    pub indices: Vec<usize>,
    /// Labels already offset by the episode's `n_way`.
    pub labels: Vec<usize>,
    /// Number of extra logits (every base class, drawn or not).
    pub aux_classes: usize,
}

/// Draws auxiliary images from `base`, labeled `n_way + rank(class)`.
pub fn augment_support<R: Rng + ?Sized>(
    aux: &AuxAugmentation,
    base: &ClassPool,
    n_way: usize,
    episode_classes: &[u32],
    rng: &mut R,
) -> Result<AuxSample> {
    let count = match aux.mode {
        AuxMode::None => 0,
        AuxMode::RandomTotal => aux.total_count,
        AuxMode::PerClass => aux.per_class_count,
    };
    if count == 0 {
        return Ok(AuxSample::default());
    }
    let classes = base.classes();
    if let Some(c) = episode_classes.iter().find(|c| classes.contains(c)) {
        return Err(Error::Config(format!("episode class {c} is also an auxiliary class")));
    }
    let rank = |c: u32| classes.binary_search(&c).expect("pool class");
    let mut out = AuxSample {
        aux_classes: classes.len(),
        ..Default::default()
    };
    match aux.mode {
        AuxMode::RandomTotal => {
            let all = base.all_indices();
            if all.len() < count {
                return Err(Error::InsufficientAux(format!("{count} rows requested from a pool of {}", all.len())));
            }
            for i in sample(rng, all.len(), count) {
                out.indices.push(all[i]);
            }
            let lookup: std::collections::HashMap<usize, u32> =
                base.iter().flat_map(|(&c, m)| m.iter().map(move |&i| (i, c))).collect();
            out.labels = out.indices.iter().map(|i| n_way + rank(lookup[i])).collect();
        }
        AuxMode::PerClass => {
            for &c in &classes {
                let members = base.members(c);
                if members.len() < count {
                    return Err(Error::InsufficientAux(format!(
                        "class {c} has {} images, {count} requested",
                        members.len()
                    )));
                }
                for i in sample(rng, members.len(), count) {
                    out.indices.push(members[i]);
                    out.labels.push(n_way + rank(c));
                }
            }
        }
        AuxMode::None => unreachable!(),
    }
    Ok(out)
}

/// Multinomial logistic regression over `task_classes + aux_classes` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// `[task_classes + aux_classes, dim]`.
    pub weights: Tensor<f64>,
    pub biases: Vec<f64>,
    pub task_classes: usize,
    pub aux_classes: usize,
    pub feature_norm: FeatureNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    pub model: ProbeModel,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
}

fn normalized(x: &Tensor<f64>, mode: FeatureNorm) -> Tensor<f64> {
    match mode {
        FeatureNorm::None => x.clone(),
        FeatureNorm::UnitL2 => {
            let mut out = x.clone();
            for i in 0..out.dim(0) {
                let row = out.row_mut(i);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
            out
        }
    }
}

/// Rows, labels, and per-row weights of a probe problem.
#[derive(Debug, Clone)]
pub struct ProbeProblem {
    pub x: Tensor<f64>,
    pub y: Vec<usize>,
    pub w: Vec<f64>,
    pub classes: usize,
    pub l2: f64,
}

impl ProbeProblem {
    pub fn new(
        support: &Tensor<f64>,
        support_y: &[usize],
        n_way: usize,
        aux: Option<(&Tensor<f64>, &[usize], usize)>,
        cfg: &ProbeConfig,
    ) -> Result<Self> {
        if support.ndim() != 2 || support.dim(0) != support_y.len() || support_y.iter().any(|&y| y >= n_way) {
            return Err(Error::ShapeMismatch(format!(
                "support {:?} with {} labels for {n_way} classes",
                support.shape(),
                support_y.len()
            )));
        }
        let d = support.dim(1);
        let mut data = support.data().to_vec();
        let mut y = support_y.to_vec();
        let mut w = vec![1.0; y.len()];
        let mut classes = n_way;
        if let Some((ax, ay, aux_classes)) = aux {
            if ax.dim(0) > 0 {
                if ax.ndim() != 2 || ax.dim(1) != d || ax.dim(0) != ay.len() {
                    return Err(Error::ShapeMismatch(format!("aux features {:?} vs support dim {d}", ax.shape())));
                }
                if ay.iter().any(|&l| l < n_way || l >= n_way + aux_classes) {
                    return Err(Error::ShapeMismatch("aux labels must lie in n..n+aux_classes".into()));
                }
                data.extend_from_slice(ax.data());
                y.extend_from_slice(ay);
                w.extend(std::iter::repeat_n(cfg.aux_weight, ay.len()));
                classes += aux_classes;
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularFeatures("probe input contains non-finite values".into()));
        }
        let x = normalized(&Tensor::from_vec(&[y.len(), d], data)?, cfg.feature_norm);
        Ok(Self {
            x,
            y,
            w,
            classes,
            l2: cfg.l2_coeff,
        })
    }

    pub fn dim(&self) -> usize {
        self.x.dim(1)
    }

    /// Parameter count: `classes × dim` weights then `classes` biases.
    pub fn n_params(&self) -> usize {
        self.classes * (self.dim() + 1)
    }

    /// Weighted mean cross-entropy plus `l2/2 ‖W‖²`; writes the gradient.
    pub fn objective(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (m, d, c) = (self.x.dim(0), self.dim(), self.classes);
        let (wt, bias) = theta.split_at(c * d);
        let mut z = vec![0.0; m * c];
        for i in 0..m {
            z[i * c..(i + 1) * c].copy_from_slice(bias);
        }
        gemm(1.0, MatRef::new(self.x.data(), m, d), MatRef::new(wt, c, d).t(), 1.0, &mut z);
        let wsum: f64 = self.w.iter().sum();
        let inv = if wsum > 0.0 { 1.0 / wsum } else { 0.0 };
        let mut loss = 0.0;
        for i in 0..m {
            let row = &mut z[i * c..(i + 1) * c];
            let y = self.y[i];
            loss += self.w[i] * (log_sum_exp(row) - row[y]);
            softmax_in_place(row);
            row[y] -= 1.0;
            let s = self.w[i] * inv;
            row.iter_mut().for_each(|v| *v *= s);
        }
        let (gw, gb) = grad.split_at_mut(c * d);
        gw.copy_from_slice(wt);
        gw.iter_mut().for_each(|v| *v *= self.l2);
        gemm(1.0, MatRef::new(&z, m, c).t(), MatRef::new(self.x.data(), m, d), 1.0, gw);
        gb.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            for (acc, &v) in gb.iter_mut().zip(&z[i * c..(i + 1) * c]) {
                *acc += v;
            }
        }
        let reg: f64 = wt.iter().map(|v| v * v).sum::<f64>() * 0.5 * self.l2;
        loss * inv + reg
    }
}

/// Fits the probe from zero initialization.
pub fn fit_probe(
    features_s: &Tensor<f64>,
    labels_s: &[usize],
    n_way: usize,
    aux: Option<(&Tensor<f64>, &[usize], usize)>,
    cfg: &ProbeConfig,
) -> Result<ProbeFit> {
    cfg.validate()?;
    let problem = ProbeProblem::new(features_s, labels_s, n_way, aux, cfg)?;
    let opts = LbfgsOptions {
        history: 10,
        tol: cfg.tol,
        max_iters: cfg.max_iters,
    };
    let r = lbfgs::minimize(|t, g| problem.objective(t, g), vec![0.0; problem.n_params()], &opts);
    let (c, d) = (problem.classes, problem.dim());
    let biases = r.x[c * d..].to_vec();
    let weights = Tensor::from_vec(&[c, d], r.x[..c * d].to_vec())?;
    Ok(ProbeFit {
        model: ProbeModel {
            weights,
            biases,
            task_classes: n_way,
            aux_classes: c - n_way,
            feature_norm: cfg.feature_norm,
        },
        objective: r.value,
        grad_norm: r.grad_norm,
        iterations: r.iterations,
        converged: r.converged,
        history: r.history,
    })
}

impl ProbeModel {
    pub fn dim(&self) -> usize {
        self.weights.dim(1)
    }

    /// Logits of the task classes only, `[Q, task_classes]`.
    pub fn task_logits(&self, features: &Tensor<f64>) -> Result<Tensor<f64>> {
        if features.ndim() != 2 || features.dim(1) != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "probe expects [Q, {}], got {:?}",
                self.dim(),
                features.shape()
            )));
        }
        let x = normalized(features, self.feature_norm);
        let (q, d, n) = (x.dim(0), self.dim(), self.task_classes);
        let mut z = Tensor::zeros(&[q, n]);
        for i in 0..q {
            z.row_mut(i).copy_from_slice(&self.biases[..n]);
        }
        gemm(
            1.0,
            MatRef::new(x.data(), q, d),
            MatRef::new(&self.weights.data()[..n * d], n, d).t(),
            1.0,
            z.data_mut(),
        );
        Ok(z)
    }

    /// Softmax over the task-class logits.
    pub fn task_probs(&self, features: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut z = self.task_logits(features)?;
        for i in 0..z.dim(0) {
            softmax_in_place(z.row_mut(i));
        }
        Ok(z)
    }
}

/// Argmax over the first `n` logits; auxiliary logits never compete.
pub fn predict_task(model: &ProbeModel, features_q: &Tensor<f64>) -> Result<Vec<usize>> {
    let z = model.task_logits(features_q)?;
    Ok((0..z.dim(0)).map(|i| argmax(z.row(i))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VoteScheme {
    #[serde(rename = "NONE")]
    None,
    /// The four quarter-turn rotations of the view.
    #[serde(rename = "ROT4")]
    Rot4,
    /// Four corner crops of the 2R source plus the whole image rescaled.
    #[serde(rename = "LOC5")]
    Loc5,
}

impl VoteScheme {
    pub fn copies(self) -> usize {
        match self {
            VoteScheme::None => 1,
            VoteScheme::Rot4 => 4,
            VoteScheme::Loc5 => 5,
        }
    }
}

impl fmt::Display for VoteScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VoteScheme::None => "none",
            VoteScheme::Rot4 => "rot4",
            VoteScheme::Loc5 => "loc5",
        })
    }
}

impl FromStr for VoteScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(VoteScheme::None),
            "rot" | "rot4" => Ok(VoteScheme::Rot4),
            "loc" | "loc5" => Ok(VoteScheme::Loc5),
            other => Err(Error::Config(format!("unknown vote scheme {other:?}"))),
        }
    }
}

/// Whether stored images of `side` pixels can host the scheme's copies at
/// `view_size` without upscaling.
pub fn check_scheme(scheme: VoteScheme, stored_side: usize, view_size: usize) -> Result<()> {
    if scheme == VoteScheme::Loc5 && stored_side < 2 * view_size {
        return Err(Error::IncompatibleScheme(format!(
            "loc5 voting needs {}px sources, images are {stored_side}px",
            2 * view_size
        )));
    }
    Ok(())
}

/// The eval-mode copies a scheme classifies for one stored image.
pub fn vote_copies(scheme: VoteScheme, stored: &Image<u8>, mode: ResolutionMode, view_size: usize) -> Result<Vec<Image<f32>>> {
    match scheme {
        VoteScheme::None => Ok(vec![eval_view(stored, mode, view_size)]),
        VoteScheme::Rot4 => {
            let v = eval_view(stored, mode, view_size);
            (0..4).map(|r| transform_rotation(&v, r)).collect()
        }
        VoteScheme::Loc5 => {
            check_scheme(scheme, stored.height().min(stored.width()), view_size)?;
            let hi = location_source(stored, 2 * view_size);
            (0..5).map(|p| transform_location5(&hi, p)).collect()
        }
    }
}

/// Majority label; ties go to the highest summed probability, then to the
/// lowest class index.
pub fn majority_vote(votes: &[usize], prob_sums: &[f64]) -> usize {
    let mut counts = vec![0usize; prob_sums.len()];
    for &v in votes {
        counts[v] += 1;
    }
    let mut best = 0;
    for c in 1..counts.len() {
        let better = counts[c] > counts[best] || (counts[c] == counts[best] && prob_sums[c] > prob_sums[best]);
        if better {
            best = c;
        }
    }
    best
}

/// Votes over per-copy query features; `copies[j]` holds copy `j` of every
/// query row.
pub fn vote_from_copy_features(model: &ProbeModel, copies: &[Tensor<f64>]) -> Result<Vec<usize>> {
    let Some(first) = copies.first() else {
        return Err(Error::EmptyInput("no vote copies".into()));
    };
    let q = first.dim(0);
    let n = model.task_classes;
    let mut votes = vec![Vec::with_capacity(copies.len()); q];
    let mut sums = vec![vec![0.0; n]; q];
    for c in copies {
        if c.dim(0) != q {
            return Err(Error::ShapeMismatch("vote copies disagree on query count".into()));
        }
        let p = model.task_probs(c)?;
        let z = model.task_logits(c)?;
        for i in 0..q {
            votes[i].push(argmax(z.row(i)));
            for (s, &v) in sums[i].iter_mut().zip(p.row(i)) {
                *s += v;
            }
        }
    }
    Ok(votes.iter().zip(&sums).map(|(v, s)| majority_vote(v, s)).collect())
}

/// Eval-mode features in probe precision.
pub fn extract_f64(backbone: &FeatureExtractor<f32>, views: &[Image<f32>], norm: &Normalization) -> Result<Tensor<f64>> {
    Ok(backbone.extract_features(&to_batch::<f32>(views, norm))?.cast())
}

pub fn predict_vote(
    model: &ProbeModel,
    backbone: &FeatureExtractor<f32>,
    query_images: &[&Image<u8>],
    scheme: VoteScheme,
    mode: ResolutionMode,
    norm: &Normalization,
) -> Result<Vec<usize>> {
    let size = backbone.config().input_size;
    let per_image = query_images
        .iter()
        .map(|img| vote_copies(scheme, img, mode, size))
        .collect::<Result<Vec<_>>>()?;
    let copies = (0..scheme.copies())
        .map(|j| {
            let views: Vec<Image<f32>> = per_image.iter().map(|c| c[j].clone()).collect();
            extract_f64(backbone, &views, norm)
        })
        .collect::<Result<Vec<_>>>()?;
    vote_from_copy_features(model, &copies)
}

/// `copies` train-time augmented views of every support image, with labels
/// repeated to match. Resized-mode pipelines have no train-time randomness,
/// so nothing is produced for them.
pub fn augment_support_views<R: Rng + ?Sized>(
    images: &[&Image<u8>],
    labels: &[usize],
    copies: usize,
    mode: ResolutionMode,
    size: usize,
    rng: &mut R,
) -> (Vec<Image<f32>>, Vec<usize>) {
    if mode == ResolutionMode::Resized {
        return (Vec::new(), Vec::new());
    }
    let mut views = Vec::with_capacity(copies * images.len());
    let mut out_labels = Vec::with_capacity(copies * images.len());
    for _ in 0..copies {
        for (img, &l) in images.iter().zip(labels) {
            views.push(pipeline_view(img, mode, size, true, rng));
            out_labels.push(l);
        }
    }
    (views, out_labels)
}

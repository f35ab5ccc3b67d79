//! Pretext transforms, task heads, and the contrastive objective.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::pipeline::random_resized_rect;
use crate::data::{eval_view, ResolutionMode};
use crate::error::{Error, Result};
use crate::image::{Image, Rect};
use crate::nn::loss::log_sum_exp;
use crate::nn::{linear, relu_backward, relu_forward, ParamSet};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{gemm, MatRef, Tensor};

pub const CONTRAST_DIM: usize = 128;
pub const DEFAULT_TEMPERATURE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "CLS")]
    Cls,
    #[serde(rename = "ROT")]
    Rot,
    #[serde(rename = "LOC4")]
    Loc4,
    #[serde(rename = "LOC5")]
    Loc5,
    #[serde(rename = "CONTRAST")]
    Contrast,
}

impl TaskKind {
    /// Output width of the task's head; `n_cls` is the base-class count.
    pub fn class_count(self, n_cls: usize) -> usize {
        match self {
            TaskKind::Cls => n_cls,
            TaskKind::Rot | TaskKind::Loc4 => 4,
            TaskKind::Loc5 => 5,
            TaskKind::Contrast => CONTRAST_DIM,
        }
    }

    pub fn is_location(self) -> bool {
        matches!(self, TaskKind::Loc4 | TaskKind::Loc5)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Cls => "cls",
            TaskKind::Rot => "rot",
            TaskKind::Loc4 => "loc4",
            TaskKind::Loc5 => "loc5",
            TaskKind::Contrast => "contrast",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cls" | "supervised" => Ok(TaskKind::Cls),
            "rot" => Ok(TaskKind::Rot),
            "loc" | "loc4" => Ok(TaskKind::Loc4),
            "loc5" => Ok(TaskKind::Loc5),
            "contrast" | "simclr" => Ok(TaskKind::Contrast),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// A set of tasks trained jointly, e.g. `cls+rot`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSet(BTreeSet<TaskKind>);

impl TaskSet {
    pub fn new(tasks: impl IntoIterator<Item = TaskKind>) -> Result<Self> {
        let set: BTreeSet<TaskKind> = tasks.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Config("empty task set".into()));
        }
        if set.contains(&TaskKind::Contrast) && set.len() > 1 {
            return Err(Error::IncompatibleTasks("contrastive training cannot be combined with other tasks".into()));
        }
        if set.contains(&TaskKind::Loc4) && set.contains(&TaskKind::Loc5) {
            return Err(Error::IncompatibleTasks("loc4 and loc5 are alternatives".into()));
        }
        Ok(Self(set))
    }

    pub fn single(task: TaskKind) -> Self {
        Self([task].into_iter().collect())
    }

    pub fn contains(&self, t: TaskKind) -> bool {
        self.0.contains(&t)
    }

    pub fn iter(&self) -> impl Iterator<Item = TaskKind> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The location task present, if any.
    pub fn location(&self) -> Option<TaskKind> {
        self.iter().find(|t| t.is_location())
    }

    pub fn needs_high_res(&self) -> bool {
        self.location().is_some()
    }
}

impl fmt::Display for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.iter().map(|t| t.to_string()).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for TaskSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tasks = s.split(['+', ',']).map(str::parse).collect::<Result<Vec<TaskKind>>>()?;
        Self::new(tasks)
    }
}

pub fn transform_rotation<P: Copy + Default>(image: &Image<P>, r: usize) -> Result<Image<P>> {
    if image.height() != image.width() {
        return Err(Error::NonSquareInput {
            h: image.height(),
            w: image.width(),
        });
    }
    Ok(image.rotate_quarter(r % 4))
}

fn check_hi<P: Copy + Default>(image: &Image<P>) -> Result<usize> {
    let (h, w) = (image.height(), image.width());
    if h % 2 == 1 || w % 2 == 1 {
        return Err(Error::OddDimensions { h, w });
    }
    if h != w {
        return Err(Error::NonSquareInput { h, w });
    }
    Ok(h / 2)
}

/// Quadrant `part` (top-left, top-right, lower-left, lower-right) of a
/// `2R × 2R` image.
pub fn transform_location<P: Copy + Default>(image_hi: &Image<P>, part: usize) -> Result<Image<P>> {
    let r = check_hi(image_hi)?;
    assert!(part < 4, "location part {part} out of range");
    Ok(image_hi.crop(Rect {
        top: (part / 2) * r,
        left: (part % 2) * r,
        height: r,
        width: r,
    }))
}

/// Parts 0..3 as [`transform_location`]; part 4 is the whole image
/// downscaled to `R × R`.
pub fn transform_location5(image_hi: &Image<f32>, part: usize) -> Result<Image<f32>> {
    let r = check_hi(image_hi)?;
    match part {
        0..=3 => transform_location(image_hi, part),
        4 => Ok(image_hi.resize(r, r)),
        _ => panic!("location part {part} out of range"),
    }
}

pub fn transform_loc_rot(image_hi: &Image<f32>, part: usize, r: usize) -> Result<Image<f32>> {
    transform_rotation(&transform_location5(image_hi, part)?, r)
}

/// The `side × side` source that location crops are cut from.
pub fn location_source(stored: &Image<u8>, side: usize) -> Image<f32> {
    let unit = stored.to_unit();
    if unit.height() == side && unit.width() == side {
        unit
    } else {
        unit.resize(side, side)
    }
}

/// Random-view pipeline for contrastive training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveAugment {
    pub enabled: bool,
    pub jitter_prob: f64,
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
}

impl Default for ContrastiveAugment {
    fn default() -> Self {
        Self {
            enabled: true,
            jitter_prob: 0.8,
            jitter_strength: 0.5,
            grayscale_prob: 0.2,
        }
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn color_jitter<R: Rng + ?Sized>(img: &mut Image<f32>, s: f64, rng: &mut R) {
    let factor = |rng: &mut R, amount: f64| rng.random_range((1.0 - amount).max(0.0)..=1.0 + amount) as f32;
    let brightness = factor(rng, 0.8 * s);
    let contrast = factor(rng, 0.8 * s);
    let saturation = factor(rng, 0.8 * s);
    let hue = rng.random_range(-0.2 * s..=0.2 * s) as f32 * std::f32::consts::TAU;
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let data = img.data().to_vec();
    let mut px: Vec<[f32; 3]> = (0..plane).map(|i| [data[i], data[plane + i], data[2 * plane + i]]).collect();
    for p in &mut px {
        for c in p.iter_mut() {
            *c *= brightness;
        }
    }
    let mean = px.iter().map(|p| luma(p[0], p[1], p[2])).sum::<f32>() / plane as f32;
    let (cos, sin) = (hue.cos(), hue.sin());
    for p in &mut px {
        for c in p.iter_mut() {
            *c = (*c - mean) * contrast + mean;
        }
        let y = luma(p[0], p[1], p[2]);
        for c in p.iter_mut() {
            *c = (*c - y) * saturation + y;
        }
        // Hue rotation in the chroma plane of YIQ.
        let i = 0.596 * p[0] - 0.274 * p[1] - 0.322 * p[2];
        let q = 0.211 * p[0] - 0.523 * p[1] + 0.312 * p[2];
        let (i2, q2) = (i * cos - q * sin, i * sin + q * cos);
        let y = luma(p[0], p[1], p[2]);
        *p = [
            y + 0.956 * i2 + 0.621 * q2,
            y - 0.272 * i2 - 0.647 * q2,
            y - 1.106 * i2 + 1.703 * q2,
        ];
    }
    for (k, p) in px.iter().enumerate() {
        for c in 0..3 {
            img.set(c, k / w, k % w, p[c].clamp(0.0, 1.0));
        }
    }
}

fn grayscale(img: &mut Image<f32>) {
    for y in 0..img.height() {
        for x in 0..img.width() {
            let v = luma(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            for c in 0..3 {
                img.set(c, y, x, v);
            }
        }
    }
}

fn contrastive_view<R: Rng + ?Sized>(stored: &Image<u8>, size: usize, aug: &ContrastiveAugment, rng: &mut R) -> Image<f32> {
    let rect = random_resized_rect(stored.height(), stored.width(), rng);
    let mut v = stored.to_unit().resample(rect, size, size);
    if rng.random_bool(0.5) {
        v = v.flip_horizontal();
    }
    if v.channels() == 3 {
        if rng.random_bool(aug.jitter_prob) {
            color_jitter(&mut v, aug.jitter_strength, rng);
        }
        if rng.random_bool(aug.grayscale_prob) {
            grayscale(&mut v);
        }
    }
    v
}

/// Two independently augmented views per source image. With augmentation
/// disabled both views are the deterministic center-cropped eval view.
pub fn make_contrastive_views<R: Rng + ?Sized>(
    batch: &[&Image<u8>],
    size: usize,
    aug: &ContrastiveAugment,
    rng: &mut R,
) -> (Vec<Image<f32>>, Vec<Image<f32>>) {
    if !aug.enabled {
        let views: Vec<Image<f32>> = batch
            .iter()
            .map(|img| eval_view(img, ResolutionMode::RandomCrop, size))
            .collect();
        return (views.clone(), views);
    }
    let mut a = Vec::with_capacity(batch.len());
    let mut b = Vec::with_capacity(batch.len());
    for img in batch {
        a.push(contrastive_view(img, size, aug, rng));
        b.push(contrastive_view(img, size, aug, rng));
    }
    (a, b)
}

/// Linear classifier for a task, or the two-layer projection for CONTRAST.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead<T> {
    pub kind: TaskKind,
    params: ParamSet<T>,
}

fn uniform_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()).expect("sized")
}

impl<T: Scalar> TaskHead<T> {
    /// `classes` is the output width for linear heads; ignored for CONTRAST.
    pub fn new(kind: TaskKind, feature_dim: usize, classes: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0x68656164, kind as u64]);
        let mut params = ParamSet::new();
        if kind == TaskKind::Contrast {
            params.push("proj.0.weight", uniform_init(&[feature_dim, feature_dim], feature_dim, &mut r));
            params.push("proj.0.bias", uniform_init(&[feature_dim], feature_dim, &mut r));
            params.push("proj.1.weight", uniform_init(&[CONTRAST_DIM, feature_dim], feature_dim, &mut r));
            params.push("proj.1.bias", uniform_init(&[CONTRAST_DIM], feature_dim, &mut r));
        } else {
            params.push(format!("{kind}.weight"), uniform_init(&[classes, feature_dim], feature_dim, &mut r));
            params.push(format!("{kind}.bias"), uniform_init(&[classes], feature_dim, &mut r));
        }
        Self { kind, params }
    }

    /// A linear head from explicit `[classes, dim]` weights and bias.
    pub fn linear(kind: TaskKind, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.ndim() != 2 || bias.shape() != [weight.dim(0)] {
            return Err(Error::ShapeMismatch(format!(
                "head weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        let mut params = ParamSet::new();
        params.push(format!("{kind}.weight"), weight);
        params.push(format!("{kind}.bias"), bias);
        Ok(Self { kind, params })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.params.get(0).dim(1)
    }

    pub fn output_dim(&self) -> usize {
        self.params.get(self.params.len() - 2).dim(0)
    }

    fn is_mlp(&self) -> bool {
        self.params.len() == 4
    }

    pub fn head_logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        if features.ndim() != 2 || features.dim(1) != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "{} head expects [B, {}], got {:?}",
                self.kind,
                self.input_dim(),
                features.shape()
            )));
        }
        let p = &self.params;
        if self.is_mlp() {
            let mut h = linear::forward(features, p.get(0), Some(p.get(1)));
            relu_forward(&mut h);
            Ok(linear::forward(&h, p.get(2), Some(p.get(3))))
        } else {
            Ok(linear::forward(features, p.get(0), Some(p.get(1))))
        }
    }

    /// Accumulates head gradients into `grads`; returns d(features).
    pub fn backward(&self, features: &Tensor<T>, dlogits: &Tensor<T>, grads: &mut ParamSet<T>) -> Tensor<T> {
        let p = &self.params;
        if self.is_mlp() {
            let mut h = linear::forward(features, p.get(0), Some(p.get(1)));
            let mask = relu_forward(&mut h);
            let (dw, db) = grads.pair_mut(2, 3);
            let mut dh = linear::backward(dlogits, &h, p.get(2), dw, Some(db), true).expect("dx");
            relu_backward(&mut dh, &mask);
            let (dw, db) = grads.pair_mut(0, 1);
            linear::backward(&dh, features, p.get(0), dw, Some(db), true).expect("dx")
        } else {
            let (dw, db) = grads.pair_mut(0, 1);
            linear::backward(dlogits, features, p.get(0), dw, Some(db), true).expect("dx")
        }
    }

    pub fn cast<U: Scalar>(&self) -> TaskHead<U> {
        TaskHead {
            kind: self.kind,
            params: self.params.cast(),
        }
    }
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<usize> {
    if a.ndim() != 2 || a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "contrastive views {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let bsz = a.dim(0);
    if bsz < 2 {
        return Err(Error::DegenerateBatch(bsz));
    }
    Ok(bsz)
}

/// NT-Xent loss over the `2B` views and its gradients w.r.t. both inputs.
pub fn ntxent_loss_grad<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, temperature: f64) -> Result<(T, Tensor<T>, Tensor<T>)> {
    let bsz = check_pair(a, b)?;
    let d = a.dim(1);
    let n = 2 * bsz;
    let tau = T::lit(temperature);
    let mut z = Vec::with_capacity(n * d);
    z.extend_from_slice(a.data());
    z.extend_from_slice(b.data());
    let norms: Vec<T> = z.chunks(d).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::lit(1e-12))).collect();
    let mut u = z.clone();
    for (row, &nr) in u.chunks_mut(d).zip(&norms) {
        row.iter_mut().for_each(|v| *v /= nr);
    }
    let mut s = vec![T::zero(); n * n];
    let um = MatRef::new(&u, n, d);
    gemm(T::one() / tau, um, um.t(), T::zero(), &mut s);

    let inv_n = T::one() / T::lit(n as f64);
    let mut loss = T::zero();
    let mut ds = vec![T::zero(); n * n];
    for i in 0..n {
        let pos = (i + bsz) % n;
        let row = &mut s[i * n..(i + 1) * n];
        row[i] = T::neg_infinity();
        let lse = log_sum_exp(row);
        loss += lse - row[pos];
        let drow = &mut ds[i * n..(i + 1) * n];
        for j in 0..n {
            if j != i {
                drow[j] = (row[j] - lse).exp() * inv_n;
            }
        }
        drow[pos] -= inv_n;
    }
    // dU = (dS + dSᵀ) U / τ
    let mut sym = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            sym[i * n + j] = ds[i * n + j] + ds[j * n + i];
        }
    }
    let mut du = vec![T::zero(); n * d];
    gemm(T::one() / tau, MatRef::new(&sym, n, n), um, T::zero(), &mut du);
    let mut dz = vec![T::zero(); n * d];
    for i in 0..n {
        let ui = &u[i * d..(i + 1) * d];
        let gi = &du[i * d..(i + 1) * d];
        let dot: T = ui.iter().zip(gi).map(|(&x, &y)| x * y).sum();
        for k in 0..d {
            dz[i * d + k] = (gi[k] - ui[k] * dot) / norms[i];
        }
    }
    let db = Tensor::from_vec(&[bsz, d], dz.split_off(bsz * d))?;
    let da = Tensor::from_vec(&[bsz, d], dz)?;
    Ok((loss * inv_n, da, db))
}

pub fn ntxent_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, temperature: f64) -> Result<T> {
    Ok(ntxent_loss_grad(a, b, temperature)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(side: usize, seed: u64) -> Image<f32> {
        let mut r = rng::seeded(seed);
        Image::from_vec(3, side, side, (0..3 * side * side).map(|_| r.random()).collect()).unwrap()
    }

    #[test]
    fn rotation_rejects_non_square() {
        let img = Image::<u8>::new(3, 4, 6);
        assert!(matches!(transform_rotation(&img, 1), Err(Error::NonSquareInput { h: 4, w: 6 })));
    }

    #[test]
    fn location_rejects_odd_sides() {
        let img = Image::<f32>::new(3, 7, 7);
        assert!(matches!(transform_location(&img, 0), Err(Error::OddDimensions { .. })));
        assert!(matches!(transform_location5(&img, 4), Err(Error::OddDimensions { .. })));
    }

    #[test]
    fn location_168_gives_84_crops() {
        let img = noise(168, 1);
        for p in 0..5 {
            let c = transform_location5(&img, p).unwrap();
            assert_eq!((c.height(), c.width()), (84, 84));
        }
    }

    #[test]
    fn loc_rot_part4_r0_is_plain_rescale() {
        let img = noise(16, 2);
        assert_eq!(transform_loc_rot(&img, 4, 0).unwrap(), img.resize(8, 8));
    }

    #[test]
    fn twenty_loc_rot_outputs_are_distinct() {
        let img = noise(16, 3);
        let mut seen = std::collections::HashSet::new();
        for p in 0..5 {
            for r in 0..4 {
                let out = transform_loc_rot(&img, p, r).unwrap();
                let bits: Vec<u32> = out.data().iter().map(|v| v.to_bits()).collect();
                assert!(seen.insert(bits));
            }
        }
        assert_eq!(seen.len(), 20);
    }

    #[test]
    fn head_affine_arithmetic() {
        let head = TaskHead::linear(
            TaskKind::Cls,
            Tensor::from_vec(&[1, 1], vec![2.0f64]).unwrap(),
            Tensor::from_vec(&[1], vec![1.0]).unwrap(),
        )
        .unwrap();
        let out = head.head_logits(&Tensor::from_vec(&[1, 1], vec![3.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[7.0]);
        let bad = Tensor::<f64>::zeros(&[1, 2]);
        assert!(matches!(head.head_logits(&bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn head_widths_follow_task() {
        assert_eq!(TaskHead::<f32>::new(TaskKind::Rot, 10, 4, 0).output_dim(), 4);
        assert_eq!(TaskHead::<f32>::new(TaskKind::Loc5, 10, 5, 0).output_dim(), 5);
        assert_eq!(TaskHead::<f32>::new(TaskKind::Contrast, 10, 0, 0).output_dim(), CONTRAST_DIM);
    }

    #[test]
    fn contrastive_views_disabled_are_center_crops() {
        let mut r = rng::seeded(4);
        let src = Image::from_vec(3, 40, 40, (0..4800).map(|_| r.random()).collect()).unwrap();
        let aug = ContrastiveAugment {
            enabled: false,
            ..Default::default()
        };
        let (a, b) = make_contrastive_views(&[&src, &src], 16, &aug, &mut r);
        assert_eq!(a, b);
        assert_eq!(a[0], eval_view(&src, ResolutionMode::RandomCrop, 16));
    }

    #[test]
    fn contrastive_views_replay_under_fixed_rng() {
        let mut r = rng::seeded(5);
        let src = Image::from_vec(3, 40, 40, (0..4800).map(|_| r.random()).collect()).unwrap();
        let aug = ContrastiveAugment::default();
        let x = make_contrastive_views(&[&src], 16, &aug, &mut rng::seeded(9));
        let y = make_contrastive_views(&[&src], 16, &aug, &mut rng::seeded(9));
        assert_eq!(x, y);
        assert_eq!((x.0[0].height(), x.1[0].width()), (16, 16));
    }

    #[test]
    fn ntxent_gradient_matches_finite_differences() {
        let mut r = rng::seeded(6);
        let mut a = Tensor::from_vec(&[3, 4], (0..12).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::from_vec(&[3, 4], (0..12).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let (_, da, _) = ntxent_loss_grad::<f64>(&a, &b, 0.5).unwrap();
        for j in 0..12 {
            let orig = a.data()[j];
            a.data_mut()[j] = orig + 1e-6;
            let lp = ntxent_loss(&a, &b, 0.5).unwrap();
            a.data_mut()[j] = orig - 1e-6;
            let lm = ntxent_loss(&a, &b, 0.5).unwrap();
            a.data_mut()[j] = orig;
            assert!(((lp - lm) / 2e-6 - da.data()[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn ntxent_rejects_single_pair() {
        let a = Tensor::<f64>::zeros(&[1, 3]);
        assert!(matches!(ntxent_loss(&a, &a, 0.5), Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn task_set_parsing() {
        let s: TaskSet = "cls+rot".parse().unwrap();
        assert_eq!(s.to_string(), "cls+rot");
        assert!(matches!("cls+contrast".parse::<TaskSet>(), Err(Error::IncompatibleTasks(_))));
    }
}

//! Representation pre-training: supervised, pretext, contrastive, and joint
//! multi-task objectives over a shared backbone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{build_backbone, BackboneConfig, FeatureExtractor};
use crate::checkpoint::{checkpoint_filename, save_checkpoint, CheckpointMeta};
use crate::data::{pipeline_view, to_batch, DatasetSpec, Normalization, ResolutionMode, SplitAssignment};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::write_atomic;
use crate::nn::loss::{accuracy, cross_entropy};
use crate::nn::optim::Sgd;
use crate::nn::ParamSet;
use crate::pretext::{
    location_source, make_contrastive_views, ntxent_loss_grad, transform_location5, transform_rotation,
    ContrastiveAugment, TaskHead, TaskKind, TaskSet, DEFAULT_TEMPERATURE,
};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CopyMode {
    /// Every transform copy of each source image.
    #[serde(rename = "ALL_COPIES")]
    AllCopies,
    /// One uniformly drawn copy per source image.
    #[serde(rename = "SAMPLED")]
    Sampled,
}

impl FromStr for CopyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" | "all_copies" => Ok(CopyMode::AllCopies),
            "sampled" => Ok(CopyMode::Sampled),
            other => Err(Error::Config(format!("unknown copy mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub lambda_rot: f64,
    pub lambda_loc: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self {
            lambda_rot: 1.0,
            lambda_loc: 1.0,
        }
    }
}

impl TaskWeights {
    pub fn weight(&self, task: TaskKind) -> f64 {
        match task {
            TaskKind::Rot => self.lambda_rot,
            TaskKind::Loc4 | TaskKind::Loc5 => self.lambda_loc,
            TaskKind::Cls | TaskKind::Contrast => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tasks: TaskSet,
    pub weights: TaskWeights,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub copy_mode: CopyMode,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Side of the image that location crops are cut from; `None` means
    /// twice the view size.
    pub loc_source: Option<usize>,
    pub contrast_batch: usize,
    pub temperature: f64,
    pub contrast_aug: ContrastiveAugment,
    /// When set, every epoch's extractor is written here.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tasks: TaskSet::single(TaskKind::Cls),
            weights: TaskWeights::default(),
            lr: 0.05,
            epochs: 100,
            batch_size: 64,
            decay_epochs: vec![60, 80],
            decay_factor: 0.1,
            copy_mode: CopyMode::AllCopies,
            momentum: 0.9,
            weight_decay: 5e-4,
            loc_source: None,
            contrast_batch: 128,
            temperature: DEFAULT_TEMPERATURE,
            contrast_aug: ContrastiveAugment::default(),
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.contrast_batch < 2 {
            return Err(Error::Config("batch_size ≥ 1 and contrast_batch ≥ 2 required".into()));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("decay_epochs must be strictly increasing".into()));
        }
        if self.decay_epochs.last().is_some_and(|&d| d >= self.epochs) {
            return Err(Error::Config("decay_epochs must be smaller than epochs".into()));
        }
        if !(self.lr > 0.0) || self.weights.lambda_rot < 0.0 || self.weights.lambda_loc < 0.0 {
            return Err(Error::Config("lr must be positive and task weights non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.lr * self.decay_factor.powi(decays as i32)
    }

    pub fn lr_schedule(&self) -> Vec<f64> {
        (0..self.epochs).map(|e| self.lr_at(e)).collect()
    }
}

/// Optimization steps in one pass over `n` images.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// How stored images become network inputs for one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewSpec {
    pub mode: ResolutionMode,
    pub view_size: usize,
    pub loc_source: usize,
    pub train_time: bool,
}

impl ViewSpec {
    pub fn new(spec: &DatasetSpec, loc_source: Option<usize>, train_time: bool) -> Self {
        Self {
            mode: spec.mode,
            view_size: spec.view_size,
            loc_source: loc_source.unwrap_or(2 * spec.view_size),
            train_time,
        }
    }
}

/// Which transform produced a row of a [`TransformedBatch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub source: usize,
    pub part: Option<usize>,
    pub rotation: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TransformedBatch {
    pub images: Vec<Image<f32>>,
    pub cls_labels: Vec<usize>,
    pub rot_labels: Option<Vec<usize>>,
    pub loc_labels: Option<Vec<usize>>,
    pub provenance: Vec<Provenance>,
}

impl TransformedBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self, tasks: &TaskSet) -> BTreeMap<TaskKind, Vec<usize>> {
        let mut out = BTreeMap::new();
        for t in tasks.iter() {
            let l = match t {
                TaskKind::Cls => Some(&self.cls_labels),
                TaskKind::Rot => self.rot_labels.as_ref(),
                TaskKind::Loc4 | TaskKind::Loc5 => self.loc_labels.as_ref(),
                TaskKind::Contrast => None,
            };
            if let Some(l) = l {
                out.insert(t, l.clone());
            }
        }
        out
    }
}

/// Expands source images into the transform copies the active tasks need.
pub fn compose_multitask_batch<R: Rng + ?Sized>(
    images: &[&Image<u8>],
    labels: &[usize],
    tasks: &TaskSet,
    copy_mode: CopyMode,
    view: &ViewSpec,
    rng: &mut R,
) -> Result<TransformedBatch> {
    if tasks.contains(TaskKind::Contrast) {
        return Err(Error::IncompatibleTasks("contrastive batches are built by make_contrastive_views".into()));
    }
    assert_eq!(images.len(), labels.len(), "one label per image");
    let rots: Vec<Option<usize>> = if tasks.contains(TaskKind::Rot) {
        (0..4).map(Some).collect()
    } else {
        vec![None]
    };
    let parts: Vec<Option<usize>> = match tasks.location() {
        Some(TaskKind::Loc4) => (0..4).map(Some).collect(),
        Some(_) => (0..5).map(Some).collect(),
        None => vec![None],
    };
    let combos: Vec<(Option<usize>, Option<usize>)> =
        parts.iter().flat_map(|&p| rots.iter().map(move |&r| (p, r))).collect();

    let mut out = TransformedBatch {
        images: Vec::new(),
        cls_labels: Vec::new(),
        rot_labels: tasks.contains(TaskKind::Rot).then(Vec::new),
        loc_labels: tasks.location().map(|_| Vec::new()),
        provenance: Vec::new(),
    };
    for (i, (img, &label)) in images.iter().zip(labels).enumerate() {
        let chosen: Vec<(Option<usize>, Option<usize>)> = match copy_mode {
            CopyMode::AllCopies => combos.clone(),
            CopyMode::Sampled => vec![combos[rng.random_range(0..combos.len())]],
        };
        let hi = parts[0].is_some().then(|| location_source(img, view.loc_source));
        let plain = parts[0]
            .is_none()
            .then(|| pipeline_view(img, view.mode, view.view_size, view.train_time, rng));
        for (part, rot) in chosen {
            let base = match (&hi, part) {
                (Some(hi), Some(p)) => {
                    let crop = transform_location5(hi, p)?;
                    if crop.height() == view.view_size {
                        crop
                    } else {
                        crop.resize(view.view_size, view.view_size)
                    }
                }
                _ => plain.clone().expect("plain view"),
            };
            let v = match rot {
                Some(r) => transform_rotation(&base, r)?,
                None => base,
            };
            out.images.push(v);
            out.cls_labels.push(label);
            if let (Some(l), Some(r)) = (out.rot_labels.as_mut(), rot) {
                l.push(r);
            }
            if let (Some(l), Some(p)) = (out.loc_labels.as_mut(), part) {
                l.push(p);
            }
            out.provenance.push(Provenance {
                source: i,
                part,
                rotation: rot,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MultiTaskLoss<T> {
    pub total: T,
    /// Unweighted mean cross-entropy of each task.
    pub per_task: BTreeMap<TaskKind, T>,
    /// Gradient of `total` w.r.t. each task's logits.
    pub dlogits: BTreeMap<TaskKind, Tensor<T>>,
}

/// `L_cls + λ_rot·L_rot + λ_loc·L_loc` over whichever tasks have logits.
pub fn multitask_loss<T: Scalar>(
    logits_by_task: &BTreeMap<TaskKind, Tensor<T>>,
    labels_by_task: &BTreeMap<TaskKind, Vec<usize>>,
    weights: &TaskWeights,
) -> Result<MultiTaskLoss<T>> {
    let mut out = MultiTaskLoss {
        total: T::zero(),
        per_task: BTreeMap::new(),
        dlogits: BTreeMap::new(),
    };
    for (&task, logits) in logits_by_task {
        let labels = labels_by_task
            .get(&task)
            .ok_or_else(|| Error::MissingTask(format!("no labels for {task}")))?;
        if logits.ndim() != 2 || logits.dim(0) != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{task}: logits {:?} for {} labels",
                logits.shape(),
                labels.len()
            )));
        }
        let (loss, mut grad) = cross_entropy(logits, labels);
        let w = T::lit(weights.weight(task));
        out.total += w * loss;
        grad.scale(w);
        out.per_task.insert(task, loss);
        out.dlogits.insert(task, grad);
    }
    for task in labels_by_task.keys() {
        if !logits_by_task.contains_key(task) {
            return Err(Error::MissingTask(format!("no logits for {task}")));
        }
    }
    Ok(out)
}

/// Backbone plus one head per task, with their optimizers.
#[derive(Debug, Clone)]
pub struct Learner<T> {
    pub backbone: FeatureExtractor<T>,
    pub heads: Vec<TaskHead<T>>,
    opt_backbone: Sgd<T>,
    opt_heads: Vec<Sgd<T>>,
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub per_task: BTreeMap<TaskKind, f64>,
}

impl<T: Scalar> Learner<T> {
    pub fn new(backbone: FeatureExtractor<T>, tasks: &TaskSet, n_cls: usize, momentum: f64, weight_decay: f64, seed: u64) -> Self {
        let d = backbone.feature_dim();
        let heads: Vec<TaskHead<T>> = tasks.iter().map(|t| TaskHead::new(t, d, t.class_count(n_cls), seed)).collect();
        let opt_heads = heads.iter().map(|_| Sgd::new(momentum, weight_decay)).collect();
        Self {
            backbone,
            heads,
            opt_backbone: Sgd::new(momentum, weight_decay),
            opt_heads,
        }
    }

    pub fn head(&self, task: TaskKind) -> Option<&TaskHead<T>> {
        self.heads.iter().find(|h| h.kind == task)
    }

    /// One SGD step on a composed batch; heads whose task has no labels in
    /// `labels` are left out of the objective.
    pub fn step(
        &mut self,
        x: &Tensor<T>,
        labels: &BTreeMap<TaskKind, Vec<usize>>,
        weights: &TaskWeights,
        lr: f64,
    ) -> Result<StepStats> {
        let (feats, trace) = self.backbone.forward_train(x)?;
        let mut logits = BTreeMap::new();
        for h in &self.heads {
            if labels.contains_key(&h.kind) {
                logits.insert(h.kind, h.head_logits(&feats)?);
            }
        }
        let loss = multitask_loss(&logits, labels, weights)?;
        let total = loss.total.to_f64_lossy();
        if !total.is_finite() {
            return Err(Error::NonFiniteGradient(format!("loss {total}")));
        }
        let mut dfeat = Tensor::zeros_like(&feats);
        let mut head_grads: Vec<ParamSet<T>> = self.heads.iter().map(|h| h.params().zeros_like()).collect();
        for (h, g) in self.heads.iter().zip(head_grads.iter_mut()) {
            if let Some(dl) = loss.dlogits.get(&h.kind) {
                dfeat.add_assign(&h.backward(&feats, dl, g));
            }
        }
        let grads = self.backbone.backward(&trace, &dfeat);
        self.backbone.commit_batch_stats(&trace);
        self.opt_backbone.step(self.backbone.params_mut(), &grads, lr);
        for ((h, g), opt) in self.heads.iter_mut().zip(&head_grads).zip(&mut self.opt_heads) {
            if loss.dlogits.contains_key(&h.kind) {
                opt.step(h.params_mut(), g, lr);
            }
        }
        Ok(StepStats {
            loss: total,
            per_task: loss.per_task.iter().map(|(&k, v)| (k, v.to_f64_lossy())).collect(),
        })
    }

    /// One SGD step of the contrastive objective on paired view batches.
    pub fn contrastive_step(&mut self, a: &Tensor<T>, b: &Tensor<T>, temperature: f64, lr: f64) -> Result<StepStats> {
        let bsz = a.dim(0);
        let joint = Tensor::from_vec(
            &[2 * bsz, a.dim(1), a.dim(2), a.dim(3)],
            a.data().iter().chain(b.data()).copied().collect(),
        )?;
        let (feats, trace) = self.backbone.forward_train(&joint)?;
        let head = &self.heads[0];
        let proj = head.head_logits(&feats)?;
        let top: Vec<usize> = (0..bsz).collect();
        let bottom: Vec<usize> = (bsz..2 * bsz).collect();
        let (loss, da, db) = ntxent_loss_grad(&proj.select_rows(&top), &proj.select_rows(&bottom), temperature)?;
        let total = loss.to_f64_lossy();
        if !total.is_finite() {
            return Err(Error::NonFiniteGradient(format!("loss {total}")));
        }
        let dproj = Tensor::from_vec(proj.shape(), da.data().iter().chain(db.data()).copied().collect())?;
        let mut hg = head.params().zeros_like();
        let dfeat = head.backward(&feats, &dproj, &mut hg);
        let grads = self.backbone.backward(&trace, &dfeat);
        self.backbone.commit_batch_stats(&trace);
        self.opt_backbone.step(self.backbone.params_mut(), &grads, lr);
        self.opt_heads[0].step(self.heads[0].params_mut(), &hg, lr);
        Ok(StepStats {
            loss: total,
            per_task: [(TaskKind::Contrast, total)].into_iter().collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub holdout_acc: BTreeMap<TaskKind, f64>,
    pub file: Option<PathBuf>,
}

/// Minimal validation loss; the earliest epoch wins ties.
pub fn select_checkpoint(records: &[CheckpointRecord]) -> Result<&CheckpointRecord> {
    let mut best: Option<&CheckpointRecord> = None;
    for r in records {
        if best.is_none_or(|b| r.val_loss < b.val_loss) {
            best = Some(r);
        }
    }
    best.ok_or(Error::EmptyHistory)
}

pub fn write_training_log(path: &Path, tasks: &TaskSet, records: &[CheckpointRecord]) -> Result<()> {
    let head_tasks: Vec<TaskKind> = tasks.iter().filter(|&t| t != TaskKind::Contrast).collect();
    let mut out = String::from("epoch,lr,train_loss,val_loss");
    for t in &head_tasks {
        write!(out, ",acc_{t}").expect("string write");
    }
    out.push('\n');
    for r in records {
        write!(out, "{},{},{:.6},{:.6}", r.epoch, r.lr, r.train_loss, r.val_loss).expect("string write");
        for t in &head_tasks {
            write!(out, ",{:.6}", r.holdout_acc.get(t).copied().unwrap_or(f64::NAN)).expect("string write");
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_extractor: FeatureExtractor<f32>,
    /// The extractor of the record chosen by [`select_checkpoint`].
    pub best_extractor: FeatureExtractor<f32>,
    pub heads: Vec<TaskHead<f32>>,
    pub records: Vec<CheckpointRecord>,
}

/// Dense labels `0..C` for the classes present in `indices`, ascending by id.
pub fn class_label_map(spec: &DatasetSpec, indices: &[usize]) -> BTreeMap<u32, usize> {
    let mut ids: Vec<u32> = indices.iter().map(|&i| spec.class_of(i)).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(l, c)| (c, l)).collect()
}

const EVAL_CHUNK: usize = 256;

fn holdout_metrics(
    learner: &Learner<f32>,
    cfg: &TrainConfig,
    images: &[&Image<u8>],
    labels: &[usize],
    view: &ViewSpec,
    norm: &Normalization,
    seed: u64,
) -> Result<(f64, BTreeMap<TaskKind, f64>)> {
    if cfg.tasks.contains(TaskKind::Contrast) {
        let mut r = rng::stream(seed, &[0x76616c]);
        let (a, b) = make_contrastive_views(images, view.view_size, &cfg.contrast_aug, &mut r);
        let fa = learner.backbone.extract_features(&to_batch::<f32>(&a, norm))?;
        let fb = learner.backbone.extract_features(&to_batch::<f32>(&b, norm))?;
        let head = &learner.heads[0];
        let loss = ntxent_loss_grad(&head.head_logits(&fa)?, &head.head_logits(&fb)?, cfg.temperature)?.0;
        return Ok((f64::from(loss), BTreeMap::new()));
    }
    let mut r = rng::stream(seed, &[0x76616c]);
    let batch = compose_multitask_batch(images, labels, &cfg.tasks, CopyMode::AllCopies, view, &mut r)?;
    let all_labels = batch.labels(&cfg.tasks);
    let mut logits: BTreeMap<TaskKind, Vec<f32>> = BTreeMap::new();
    for start in (0..batch.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(batch.len());
        let x = to_batch::<f32>(&batch.images[start..end], norm);
        let f = learner.backbone.extract_features(&x)?;
        for h in &learner.heads {
            logits.entry(h.kind).or_default().extend_from_slice(h.head_logits(&f)?.data());
        }
    }
    let logits: BTreeMap<TaskKind, Tensor<f32>> = logits
        .into_iter()
        .map(|(k, v)| {
            let c = v.len() / batch.len();
            (k, Tensor::from_vec(&[batch.len(), c], v).expect("sized"))
        })
        .collect();
    let loss = multitask_loss(&logits, &all_labels, &cfg.weights)?;
    let acc = logits.iter().map(|(&k, l)| (k, accuracy(l, &all_labels[&k]))).collect();
    Ok((f64::from(loss.total), acc))
}

/// Trains a representation on `split.inner_train`, validating on
/// `split.inner_holdout` after every epoch.
pub fn train_representation(
    cfg: &TrainConfig,
    spec: &DatasetSpec,
    split: &SplitAssignment,
    backbone_cfg: &BackboneConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if backbone_cfg.input_size != spec.view_size {
        return Err(Error::Config(format!(
            "backbone input {} does not match view size {}",
            backbone_cfg.input_size, spec.view_size
        )));
    }
    if cfg.tasks.needs_high_res() && !spec.supports_high_res() {
        return Err(Error::IncompatibleTasks(
            "location tasks need a high-resolution source; upscaling is not supported".into(),
        ));
    }
    if split.inner_train.is_empty() || split.inner_holdout.is_empty() {
        return Err(Error::EmptyPartition("inner split is empty".into()));
    }
    let label_of = class_label_map(spec, &split.inner_train);
    let backbone = build_backbone::<f32>(backbone_cfg, seed)?;
    let mut learner = Learner::new(backbone, &cfg.tasks, label_of.len(), cfg.momentum, cfg.weight_decay, seed);
    let train_view = ViewSpec::new(spec, cfg.loc_source, true);
    let eval_view = ViewSpec::new(spec, cfg.loc_source, false);
    let contrast = cfg.tasks.contains(TaskKind::Contrast);
    let batch_size = if contrast { cfg.contrast_batch } else { cfg.batch_size };

    let load = |idx: &[usize]| -> Result<Vec<std::sync::Arc<Image<u8>>>> { idx.iter().map(|&i| spec.load(i)).collect() };
    let holdout_imgs = load(&split.inner_holdout)?;
    let holdout_refs: Vec<&Image<u8>> = holdout_imgs.iter().map(|a| a.as_ref()).collect();
    let holdout_labels: Vec<usize> = split.inner_holdout.iter().map(|&i| label_of[&spec.class_of(i)]).collect();

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, FeatureExtractor<f32>)> = None;
    let mut order = split.inner_train.clone();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut r = rng::stream(seed, &[0x74726e, epoch as u64]);
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(batch_size) {
            if contrast && chunk.len() < 2 {
                continue;
            }
            let imgs = load(chunk)?;
            let refs: Vec<&Image<u8>> = imgs.iter().map(|a| a.as_ref()).collect();
            let stats = if contrast {
                let (a, b) = make_contrastive_views(&refs, spec.view_size, &cfg.contrast_aug, &mut r);
                learner.contrastive_step(&to_batch(&a, &split.norm), &to_batch(&b, &split.norm), cfg.temperature, lr)
            } else {
                let labels: Vec<usize> = chunk.iter().map(|&i| label_of[&spec.class_of(i)]).collect();
                let batch = compose_multitask_batch(&refs, &labels, &cfg.tasks, cfg.copy_mode, &train_view, &mut r)?;
                learner.step(&to_batch(&batch.images, &split.norm), &batch.labels(&cfg.tasks), &cfg.weights, lr)
            };
            let stats = match stats {
                Ok(s) => s,
                Err(Error::NonFiniteGradient(_)) => {
                    return Err(Error::DivergenceDetected {
                        epoch: epoch + 1,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            loss_sum += stats.loss;
            steps += 1;
        }
        let (val_loss, holdout_acc) = holdout_metrics(
            &learner,
            cfg,
            &holdout_refs,
            &holdout_labels,
            &eval_view,
            &split.norm,
            seed,
        )?;
        if !val_loss.is_finite() {
            return Err(Error::DivergenceDetected {
                epoch: epoch + 1,
                loss: val_loss,
            });
        }
        let mut record = CheckpointRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / steps.max(1) as f64,
            val_loss,
            holdout_acc,
            file: None,
        };
        if let Some(dir) = &cfg.checkpoint_dir {
            let meta = CheckpointMeta {
                tasks: cfg.tasks.to_string(),
                epoch: epoch + 1,
                val_loss,
                norm: split.norm,
                mode: spec.mode,
                view_size: spec.view_size,
            };
            let path = dir.join(checkpoint_filename(backbone_cfg, &meta));
            save_checkpoint(&path, &learner.backbone, &meta)?;
            record.file = Some(path);
        }
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, learner.backbone.clone()));
        }
        records.push(record);
    }
    let best_extractor = best.map_or_else(|| learner.backbone.clone(), |(_, fe)| fe);
    Ok(TrainOutcome {
        final_extractor: learner.backbone,
        best_extractor,
        heads: learner.heads,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_images(n: usize, side: usize, seed: u64) -> Vec<Image<u8>> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| Image::from_vec(3, side, side, (0..3 * side * side).map(|_| r.random()).collect()).unwrap())
            .collect()
    }

    fn view(side: usize) -> ViewSpec {
        ViewSpec {
            mode: ResolutionMode::Resized,
            view_size: side / 2,
            loc_source: side,
            train_time: false,
        }
    }

    #[test]
    fn default_decay_schedule() {
        let cfg = TrainConfig::default();
        let lrs = cfg.lr_schedule();
        assert_eq!(lrs.len(), 100);
        assert!(lrs[..60].iter().all(|&l| l == 0.05));
        assert!(lrs[60..80].iter().all(|&l| (l - 0.005).abs() < 1e-15));
        assert!(lrs[80..].iter().all(|&l| (l - 0.0005).abs() < 1e-15));
    }

    #[test]
    fn ceiling_step_count() {
        assert_eq!(steps_per_epoch(10, 64), 1);
        assert_eq!(steps_per_epoch(128, 64), 2);
        assert_eq!(steps_per_epoch(129, 64), 3);
    }

    #[test]
    fn bad_decay_epochs_are_rejected() {
        let cfg = TrainConfig {
            epochs: 50,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            decay_epochs: vec![80, 60],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn all_copies_rotation_counts() {
        let imgs = noise_images(16, 8, 1);
        let refs: Vec<&Image<u8>> = imgs.iter().collect();
        let labels: Vec<usize> = (0..16).collect();
        let tasks: TaskSet = "cls+rot".parse().unwrap();
        let b = compose_multitask_batch(&refs, &labels, &tasks, CopyMode::AllCopies, &view(8), &mut rng::seeded(0)).unwrap();
        assert_eq!(b.len(), 64);
        let rot = b.rot_labels.unwrap();
        for r in 0..4 {
            assert_eq!(rot.iter().filter(|&&x| x == r).count(), 16);
        }
        let tasks: TaskSet = "cls+rot+loc5".parse().unwrap();
        let b = compose_multitask_batch(&refs, &labels, &tasks, CopyMode::AllCopies, &view(8), &mut rng::seeded(0)).unwrap();
        assert_eq!(b.len(), 320);
    }

    #[test]
    fn cls_only_batch_is_unchanged() {
        let imgs = noise_images(5, 8, 2);
        let refs: Vec<&Image<u8>> = imgs.iter().collect();
        let labels = vec![3, 1, 4, 1, 5];
        for mode in [CopyMode::AllCopies, CopyMode::Sampled] {
            let b = compose_multitask_batch(&refs, &labels, &TaskSet::single(TaskKind::Cls), mode, &view(8), &mut rng::seeded(0)).unwrap();
            assert_eq!(b.cls_labels, labels);
            for (v, img) in b.images.iter().zip(&imgs) {
                assert_eq!(*v, crate::data::eval_view(img, ResolutionMode::Resized, 4));
            }
        }
    }

    #[test]
    fn rotation_labels_match_applied_transform() {
        let imgs = noise_images(3, 8, 3);
        let refs: Vec<&Image<u8>> = imgs.iter().collect();
        let tasks: TaskSet = "cls+rot+loc4".parse().unwrap();
        let b = compose_multitask_batch(&refs, &[0, 1, 2], &tasks, CopyMode::Sampled, &view(8), &mut rng::seeded(4)).unwrap();
        for (row, p) in b.provenance.iter().enumerate() {
            let hi = location_source(&imgs[p.source], 8);
            let expect = transform_rotation(&transform_location5(&hi, p.part.unwrap()).unwrap(), p.rotation.unwrap()).unwrap();
            assert_eq!(b.images[row], expect);
            assert_eq!(b.rot_labels.as_ref().unwrap()[row], p.rotation.unwrap());
            assert_eq!(b.loc_labels.as_ref().unwrap()[row], p.part.unwrap());
        }
    }

    #[test]
    fn contrast_cannot_be_composed() {
        let imgs = noise_images(1, 8, 5);
        let refs: Vec<&Image<u8>> = imgs.iter().collect();
        let r = compose_multitask_batch(&refs, &[0], &TaskSet::single(TaskKind::Contrast), CopyMode::AllCopies, &view(8), &mut rng::seeded(0));
        assert!(matches!(r, Err(Error::IncompatibleTasks(_))));
    }

    fn logits_of(c: usize, rows: usize) -> Tensor<f64> {
        Tensor::zeros(&[rows, c])
    }

    #[test]
    fn multitask_loss_decomposition() {
        let logits: BTreeMap<TaskKind, Tensor<f64>> = [(TaskKind::Cls, logits_of(7, 3)), (TaskKind::Rot, logits_of(4, 3))].into();
        let labels: BTreeMap<TaskKind, Vec<usize>> = [(TaskKind::Cls, vec![0, 1, 2]), (TaskKind::Rot, vec![3, 2, 1])].into();
        let zero = TaskWeights {
            lambda_rot: 0.0,
            lambda_loc: 0.0,
        };
        let two = TaskWeights {
            lambda_rot: 2.0,
            lambda_loc: 0.0,
        };
        let l0 = multitask_loss(&logits, &labels, &zero).unwrap();
        let l2 = multitask_loss(&logits, &labels, &two).unwrap();
        assert_eq!(l0.total, l0.per_task[&TaskKind::Cls]);
        assert!((l0.per_task[&TaskKind::Cls] - 7f64.ln()).abs() < 1e-12);
        assert!((l0.per_task[&TaskKind::Rot] - 4f64.ln()).abs() < 1e-12);
        assert!(((l2.total - l0.total) - 2.0 * l2.per_task[&TaskKind::Rot]).abs() < 1e-12);
    }

    #[test]
    fn multitask_loss_reports_missing_labels() {
        let logits: BTreeMap<TaskKind, Tensor<f64>> = [(TaskKind::Rot, logits_of(4, 2))].into();
        let labels: BTreeMap<TaskKind, Vec<usize>> = [(TaskKind::Cls, vec![0, 1])].into();
        assert!(matches!(multitask_loss(&logits, &labels, &TaskWeights::default()), Err(Error::MissingTask(_))));
    }

    fn record(epoch: usize, val_loss: f64) -> CheckpointRecord {
        CheckpointRecord {
            epoch,
            lr: 0.1,
            train_loss: 0.0,
            val_loss,
            holdout_acc: BTreeMap::new(),
            file: None,
        }
    }

    #[test]
    fn checkpoint_selection_rules() {
        let rs = vec![record(1, 2.0), record(2, 1.5), record(3, 1.7)];
        assert_eq!(select_checkpoint(&rs).unwrap().epoch, 2);
        assert_eq!(select_checkpoint(&rs[..1]).unwrap().epoch, 1);
        assert_eq!(select_checkpoint(&[record(1, 1.5), record(2, 1.5)]).unwrap().epoch, 1);
        assert!(matches!(select_checkpoint(&[]), Err(Error::EmptyHistory)));
    }
}

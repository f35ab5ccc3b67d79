//! Episodic evaluation of frozen representations, holdout cross-evaluation,
//! and result tables.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapt::{
    augment_support, augment_support_views, extract_f64, fit_probe, predict_task, vote_copies, vote_from_copy_features,
    AuxAugmentation, AuxMode, AuxSample, ProbeConfig, VoteScheme,
};
use crate::backbones::FeatureExtractor;
use crate::checkpoint::EmbeddingTable;
use crate::data::{
    eval_view, sample_episode_indices, ClassPool, DatasetSpec, EpisodeIndices, Normalization, SplitAssignment,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::pretext::{TaskKind, TaskSet};
use crate::rng::{self, StreamRng};
use crate::tensor::{pairwise_sum, Tensor};
use crate::trainer::{class_label_map, compose_multitask_batch, CopyMode, ViewSpec};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

const EXTRACT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub episodes_per_trial: usize,
    pub trials: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub aux: AuxAugmentation,
    pub vote: VoteScheme,
    pub seed: u64,
    pub probe: ProbeConfig,
    /// Train-time augmented copies added per support image.
    pub support_copies: usize,
    /// Threads evaluating episodes; results do not depend on it.
    #[serde(skip, default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl EvalProtocol {
    pub fn new(n_way: usize, k_shot: usize) -> Self {
        Self {
            episodes_per_trial: 600,
            trials: 5,
            n_way,
            k_shot,
            q_per_class: 15,
            aux: AuxAugmentation::NONE,
            vote: VoteScheme::None,
            seed: 0,
            probe: ProbeConfig::default(),
            support_copies: 5,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_trial == 0 || self.trials == 0 {
            return Err(Error::Config("episodes_per_trial and trials must be ≥ 1".into()));
        }
        if self.n_way < 2 || self.k_shot == 0 || self.q_per_class == 0 {
            return Err(Error::Config("episodes need n ≥ 2, k ≥ 1, q ≥ 1".into()));
        }
        self.probe.validate()
    }

    /// Column label used in report tables, e.g. `5w1s` or `5w1s+per_class:1+rot4`.
    pub fn column_label(&self) -> String {
        let mut s = format!("{}w{}s", self.n_way, self.k_shot);
        if self.aux.mode != AuxMode::None {
            let _ = write!(s, "+{}", self.aux);
        }
        if self.vote != VoteScheme::None {
            let _ = write!(s, "+{}", self.vote);
        }
        s
    }

    /// The random stream of one episode; any episode replays in isolation.
    pub fn episode_rng(&self, trial: usize, episode: usize) -> StreamRng {
        rng::stream(self.seed, &[trial as u64, episode as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub representation_id: String,
    pub dataset: String,
    pub protocol: EvalProtocol,
    /// Query accuracy of every episode, one list per trial.
    pub per_episode_acc: Vec<Vec<f64>>,
    pub trial_means: Vec<f64>,
    pub reported_acc: f64,
    pub ci_halfwidth: f64,
    /// Trial whose episodes back the interval.
    pub ci_trial: usize,
    /// What the halfwidth means; always `ci95`.
    pub interval: String,
}

/// Exact median; even counts average the two central values.
pub fn aggregate_trials(trial_means: &[f64]) -> Result<f64> {
    if trial_means.is_empty() {
        return Err(Error::EmptyInput("no trial means to aggregate".into()));
    }
    let mut v = trial_means.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Index of the trial at the (lower) median position.
pub fn median_trial(trial_means: &[f64]) -> usize {
    let mut order: Vec<usize> = (0..trial_means.len()).collect();
    order.sort_by(|&a, &b| trial_means[a].total_cmp(&trial_means[b]).then(a.cmp(&b)));
    order[(order.len() - 1) / 2]
}

pub fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// `1.96 · sd / √n` with the population standard deviation.
pub fn ci_halfwidth(accs: &[f64]) -> f64 {
    if accs.is_empty() {
        return 0.0;
    }
    let m = mean(accs);
    let dev: Vec<f64> = accs.iter().map(|a| (a - m) * (a - m)).collect();
    let sd = (pairwise_sum(&dev) / accs.len() as f64).sqrt();
    Z95 * sd / (accs.len() as f64).sqrt()
}

pub fn query_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

fn parallel_map<T: Send, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers);
    std::thread::scope(|s| {
        for (w, slot) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (j, o) in slot.iter_mut().enumerate() {
                    *o = Some(f(w * chunk + j));
                }
            });
        }
    });
    out.into_iter().map(|o| o.expect("filled")).collect()
}

/// Runs the trial/episode loop around `solve`, which receives the sampled
/// episode and its stream and returns one predicted label per query.
pub fn run_episodes<F>(protocol: &EvalProtocol, pool: &ClassPool, solve: F) -> Result<EvalReport>
where
    F: Fn(usize, &EpisodeIndices, &mut StreamRng) -> Result<Vec<usize>> + Sync,
{
    protocol.validate()?;
    let mut per_episode_acc = Vec::with_capacity(protocol.trials);
    let mut trial_means = Vec::with_capacity(protocol.trials);
    for trial in 0..protocol.trials {
        let counts = parallel_map(protocol.episodes_per_trial, protocol.workers, |e| -> Result<(usize, usize)> {
            let mut r = protocol.episode_rng(trial, e);
            let ep = sample_episode_indices(pool, protocol.n_way, protocol.k_shot, protocol.q_per_class, &mut r)?;
            let pred = solve(trial, &ep, &mut r)?;
            if pred.len() != ep.query.len() {
                return Err(Error::ShapeMismatch(format!("{} predictions for {} queries", pred.len(), ep.query.len())));
            }
            let hits = pred.iter().zip(&ep.query).filter(|(p, q)| **p == q.label).count();
            Ok((hits, pred.len()))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        // Every episode has the same query count, so the pooled ratio is the
        // mean of episode accuracies without float summation error.
        let (hits, total) = counts.iter().fold((0, 0), |(h, t), &(a, b)| (h + a, t + b));
        trial_means.push(hits as f64 / total as f64);
        per_episode_acc.push(counts.iter().map(|&(h, t)| h as f64 / t as f64).collect::<Vec<_>>());
    }
    let reported_acc = aggregate_trials(&trial_means)?;
    let ci_trial = median_trial(&trial_means);
    Ok(EvalReport {
        representation_id: String::new(),
        dataset: String::new(),
        protocol: protocol.clone(),
        ci_halfwidth: ci_halfwidth(&per_episode_acc[ci_trial]),
        per_episode_acc,
        trial_means,
        reported_acc,
        ci_trial,
        interval: "ci95".into(),
    })
}

/// Eval-mode features of `indices`, in order, with their class ids.
pub fn embed(
    extractor: &FeatureExtractor<f32>,
    spec: &DatasetSpec,
    indices: &[usize],
    norm: &Normalization,
) -> Result<EmbeddingTable> {
    let size = extractor.config().input_size;
    let mut rows = Vec::with_capacity(indices.len() * extractor.feature_dim());
    for chunk in indices.chunks(EXTRACT_CHUNK) {
        let views = chunk
            .iter()
            .map(|&i| Ok(eval_view(&*spec.load(i)?, spec.mode, size)))
            .collect::<Result<Vec<_>>>()?;
        rows.extend_from_slice(extractor.extract_features(&crate::data::to_batch::<f32>(&views, norm))?.data());
    }
    Ok(EmbeddingTable {
        features: Tensor::from_vec(&[indices.len(), extractor.feature_dim()], rows)?,
        class_ids: indices.iter().map(|&i| spec.class_of(i)).collect(),
    })
}

/// Eval-mode features of a fixed image set, plus per-copy features for a
/// voting scheme.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    row_of: HashMap<usize, usize>,
    plain: Tensor<f64>,
    copies: Vec<Tensor<f64>>,
}

impl FeatureBank {
    pub fn build(
        extractor: &FeatureExtractor<f32>,
        spec: &DatasetSpec,
        indices: &[usize],
        norm: &Normalization,
        vote: VoteScheme,
    ) -> Result<Self> {
        let size = extractor.config().input_size;
        let mut plain_rows = Vec::with_capacity(indices.len() * extractor.feature_dim());
        let n_copies = if vote == VoteScheme::None { 0 } else { vote.copies() };
        let mut copy_rows = vec![Vec::new(); n_copies];
        for chunk in indices.chunks(EXTRACT_CHUNK) {
            let imgs = chunk.iter().map(|&i| spec.load(i)).collect::<Result<Vec<Arc<Image<u8>>>>>()?;
            let views: Vec<Image<f32>> = imgs.iter().map(|im| eval_view(im, spec.mode, size)).collect();
            plain_rows.extend_from_slice(extract_f64(extractor, &views, norm)?.data());
            if n_copies > 0 {
                let per = imgs
                    .iter()
                    .map(|im| vote_copies(vote, im, spec.mode, size))
                    .collect::<Result<Vec<_>>>()?;
                for (j, rows) in copy_rows.iter_mut().enumerate() {
                    let v: Vec<Image<f32>> = per.iter().map(|c| c[j].clone()).collect();
                    rows.extend_from_slice(extract_f64(extractor, &v, norm)?.data());
                }
            }
        }
        let d = extractor.feature_dim();
        Ok(Self {
            row_of: indices.iter().enumerate().map(|(r, &i)| (i, r)).collect(),
            plain: Tensor::from_vec(&[indices.len(), d], plain_rows)?,
            copies: copy_rows
                .into_iter()
                .map(|r| Tensor::from_vec(&[indices.len(), d], r))
                .collect::<Result<_>>()?,
        })
    }

    /// A plain-only bank from a cached table whose rows follow `indices`.
    pub fn from_table(table: &EmbeddingTable, indices: &[usize]) -> Result<Self> {
        if table.features.dim(0) != indices.len() {
            return Err(Error::ShapeMismatch(format!(
                "cache has {} rows for {} images",
                table.features.dim(0),
                indices.len()
            )));
        }
        Ok(Self {
            row_of: indices.iter().enumerate().map(|(r, &i)| (i, r)).collect(),
            plain: table.features.cast(),
            copies: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.plain.dim(1)
    }

    fn lookup(&self, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter()
            .map(|i| {
                self.row_of
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::InsufficientData(format!("image {i} is not in the feature bank")))
            })
            .collect()
    }

    pub fn plain(&self, idx: &[usize]) -> Result<Tensor<f64>> {
        Ok(self.plain.select_rows(&self.lookup(idx)?))
    }

    pub fn copies(&self, idx: &[usize]) -> Result<Vec<Tensor<f64>>> {
        let rows = self.lookup(idx)?;
        Ok(self.copies.iter().map(|c| c.select_rows(&rows)).collect())
    }

    pub fn copy_count(&self) -> usize {
        self.copies.len()
    }
}

/// What an episodic evaluation draws from.
#[derive(Debug, Clone)]
pub struct EvalData<'a> {
    pub spec: &'a DatasetSpec,
    /// Classes episodes are sampled from.
    pub episode_pool: ClassPool,
    /// Base classes auxiliary rows are drawn from.
    pub aux_pool: ClassPool,
    pub norm: Normalization,
}

impl<'a> EvalData<'a> {
    pub fn new(spec: &'a DatasetSpec, episode_pool: ClassPool, split: &SplitAssignment) -> Self {
        Self {
            spec,
            episode_pool,
            aux_pool: ClassPool::from_indices(spec, &split.inner_train),
            norm: split.norm.clone(),
        }
    }
}

/// Feature banks for an evaluation; reusable across protocols that share
/// the voting scheme.
#[derive(Debug, Clone)]
pub struct EvalFeatures {
    pub episodes: FeatureBank,
    pub aux: Option<FeatureBank>,
}

impl EvalFeatures {
    pub fn build(extractor: &FeatureExtractor<f32>, data: &EvalData, vote: VoteScheme, with_aux: bool) -> Result<Self> {
        let episodes = FeatureBank::build(extractor, data.spec, &data.episode_pool.all_indices(), &data.norm, vote)?;
        let aux = with_aux
            .then(|| FeatureBank::build(extractor, data.spec, &data.aux_pool.all_indices(), &data.norm, VoteScheme::None))
            .transpose()?;
        Ok(Self { episodes, aux })
    }
}

/// Probe-on-frozen-features evaluation of `extractor` under `protocol`.
pub fn run_episodic_eval(
    extractor: &FeatureExtractor<f32>,
    protocol: &EvalProtocol,
    data: &EvalData,
    features: Option<&EvalFeatures>,
) -> Result<EvalReport> {
    protocol.validate()?;
    if protocol.vote != VoteScheme::None {
        let side = data.spec.records().iter().find_map(|r| r.pixels().map(|p| p.height().min(p.width())));
        if let Some(side) = side {
            crate::adapt::check_scheme(protocol.vote, side, extractor.config().input_size)?;
        }
    }
    let owned;
    let feats = match features {
        Some(f) if bank_fits(protocol, f) => f,
        _ => {
            owned = EvalFeatures::build(extractor, data, protocol.vote, protocol.aux.mode != AuxMode::None)?;
            &owned
        }
    };
    eval_with(Some(extractor), protocol, data, feats)
}

/// The same evaluation from precomputed features alone; support copies and
/// voting need an extractor and are rejected.
pub fn run_cached_eval(protocol: &EvalProtocol, data: &EvalData, features: &EvalFeatures) -> Result<EvalReport> {
    protocol.validate()?;
    if protocol.support_copies > 0 {
        return Err(Error::Config("support copies need an extractor, not only cached features".into()));
    }
    if !bank_fits(protocol, features) {
        return Err(Error::Config(format!(
            "cached features do not cover {} (voting copies or auxiliary rows missing)",
            protocol.column_label()
        )));
    }
    eval_with(None, protocol, data, features)
}

fn bank_fits(protocol: &EvalProtocol, f: &EvalFeatures) -> bool {
    let copies = if protocol.vote == VoteScheme::None { 0 } else { protocol.vote.copies() };
    f.episodes.copy_count() == copies && (protocol.aux.mode == AuxMode::None || f.aux.is_some())
}

fn eval_with(
    extractor: Option<&FeatureExtractor<f32>>,
    protocol: &EvalProtocol,
    data: &EvalData,
    feats: &EvalFeatures,
) -> Result<EvalReport> {
    let with_aux = protocol.aux.mode != AuxMode::None;
    let fixed_aux: Vec<Option<AuxSample>> = (0..protocol.trials)
        .map(|t| {
            (with_aux && protocol.aux.fixed_pool)
                .then(|| {
                    let mut r = rng::stream(protocol.seed, &[t as u64, u64::MAX]);
                    augment_support(&protocol.aux, &data.aux_pool, protocol.n_way, &[], &mut r)
                })
                .transpose()
        })
        .collect::<Result<_>>()?;

    let mut report = run_episodes(protocol, &data.episode_pool, |trial, ep, r| {
        let s_idx: Vec<usize> = ep.support.iter().map(|l| l.index).collect();
        let q_idx: Vec<usize> = ep.query.iter().map(|l| l.index).collect();
        let mut s_feat = feats.episodes.plain(&s_idx)?;
        let mut s_lab = ep.support_labels();
        if let (true, Some(extractor)) = (protocol.support_copies > 0, extractor) {
            let size = extractor.config().input_size;
            let imgs = s_idx.iter().map(|&i| data.spec.load(i)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Image<u8>> = imgs.iter().map(|a| a.as_ref()).collect();
            let (views, labels) =
                augment_support_views(&refs, &s_lab, protocol.support_copies, data.spec.mode, size, r);
            if !views.is_empty() {
                let extra = extract_f64(extractor, &views, &data.norm)?;
                let mut rows = s_feat.into_data();
                rows.extend_from_slice(extra.data());
                s_lab.extend(labels);
                s_feat = Tensor::from_vec(&[s_lab.len(), feats.episodes.dim()], rows)?;
            }
        }
        let drawn;
        let aux_sample = if !with_aux {
            None
        } else if let Some(a) = &fixed_aux[trial] {
            Some(a)
        } else {
            drawn = augment_support(&protocol.aux, &data.aux_pool, protocol.n_way, &ep.classes, r)?;
            Some(&drawn)
        };
        let aux_feat = match aux_sample {
            Some(a) if !a.indices.is_empty() => Some(feats.aux.as_ref().expect("aux bank").plain(&a.indices)?),
            _ => None,
        };
        let aux_arg = match (aux_sample, &aux_feat) {
            (Some(a), Some(f)) => Some((f, a.labels.as_slice(), a.aux_classes)),
            _ => None,
        };
        let model = fit_probe(&s_feat, &s_lab, protocol.n_way, aux_arg, &protocol.probe)?.model;
        if protocol.vote == VoteScheme::None {
            predict_task(&model, &feats.episodes.plain(&q_idx)?)
        } else {
            vote_from_copy_features(&model, &feats.episodes.copies(&q_idx)?)
        }
    })?;
    report.dataset = data.spec.name.clone();
    Ok(report)
}

/// Holdout accuracy of a fresh probe for `eval_task` on frozen features:
/// fit on `inner_train`, score on `inner_holdout`, transform copies in eval
/// mode.
pub fn cross_eval_holdout(
    extractor: &FeatureExtractor<f32>,
    eval_task: TaskKind,
    spec: &DatasetSpec,
    split: &SplitAssignment,
    probe: &ProbeConfig,
) -> Result<f64> {
    if !matches!(eval_task, TaskKind::Cls | TaskKind::Rot | TaskKind::Loc4) {
        return Err(Error::IncompatibleTasks(format!("cross-evaluation covers cls, rot and loc4, not {eval_task}")));
    }
    if eval_task.is_location() && !spec.supports_high_res() {
        return Err(Error::IncompatibleTasks("location probes need a high-resolution source".into()));
    }
    let tasks = TaskSet::single(eval_task);
    let label_of = class_label_map(spec, &split.inner_train);
    let view = ViewSpec::new(spec, None, false);
    let side = |idx: &[usize]| -> Result<(Tensor<f64>, Vec<usize>)> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for chunk in idx.chunks(EXTRACT_CHUNK / 4) {
            let imgs = chunk.iter().map(|&i| spec.load(i)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Image<u8>> = imgs.iter().map(|a| a.as_ref()).collect();
            let cls: Vec<usize> = chunk.iter().map(|&i| label_of[&spec.class_of(i)]).collect();
            let batch = compose_multitask_batch(&refs, &cls, &tasks, CopyMode::AllCopies, &view, &mut rng::seeded(0))?;
            rows.extend_from_slice(extract_f64(extractor, &batch.images, &split.norm)?.data());
            labels.extend(batch.labels(&tasks).remove(&eval_task).expect("task labels"));
        }
        Ok((Tensor::from_vec(&[labels.len(), extractor.feature_dim()], rows)?, labels))
    };
    let (xt, yt) = side(&split.inner_train)?;
    let (xh, yh) = side(&split.inner_holdout)?;
    let classes = eval_task.class_count(label_of.len());
    let model = fit_probe(&xt, &yt, classes, None, probe)?.model;
    Ok(query_accuracy(&predict_task(&model, &xh)?, &yh))
}

/// Holdout accuracies (percent) of several representations on several tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEvalMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<TaskKind>,
    pub cells: Vec<Vec<f64>>,
}

impl CrossEvalMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("source_task,eval_task,accuracy_pct\n");
        for (r, row) in self.rows.iter().zip(&self.cells) {
            for (c, v) in self.cols.iter().zip(row) {
                let _ = writeln!(s, "{r},{c},{v:.2}");
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(String::len).max().unwrap_or(0).max(6);
        let mut s = format!("{:<w$}", "source");
        for c in &self.cols {
            let _ = write!(s, "  {:>8}", c.to_string());
        }
        s.push('\n');
        for (r, row) in self.rows.iter().zip(&self.cells) {
            let _ = write!(s, "{r:<w$}");
            for v in row {
                let _ = write!(s, "  {v:>8.2}");
            }
            s.push('\n');
        }
        s
    }

    /// Whether row `i`'s cell in the column of the same task is its maximum.
    pub fn diagonal_is_row_max(&self, i: usize, task: TaskKind) -> bool {
        let Some(j) = self.cols.iter().position(|&c| c == task) else {
            return false;
        };
        self.cells[i].iter().all(|&v| v <= self.cells[i][j])
    }
}

/// `acc(ci)` in percent with two decimals, e.g. `61.75(0.79)`.
pub fn format_cell(acc: f64, ci: f64) -> String {
    // Round on the basis-point grid first so binary representation error
    // cannot flip the last printed digit.
    let pct = |x: f64| (x * 1e4).round() / 100.0;
    format!("{:.2}({:.2})", pct(acc), pct(ci))
}

/// One row per representation, one column per protocol, in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<String>>)>,
    csv: String,
}

impl ReportTable {
    pub fn to_text(&self) -> String {
        let first = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("representation".len());
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| {
                self.rows
                    .iter()
                    .filter_map(|r| r.1[j].as_ref().map(String::len))
                    .max()
                    .unwrap_or(0)
                    .max(c.len())
            })
            .collect();
        let mut s = format!("{:<first$}", "representation");
        for (c, w) in self.columns.iter().zip(&widths) {
            let _ = write!(s, "  {c:>w$}");
        }
        s.push('\n');
        for (name, cells) in &self.rows {
            let _ = write!(s, "{name:<first$}");
            for (c, w) in cells.iter().zip(&widths) {
                let _ = write!(s, "  {:>w$}", c.as_deref().unwrap_or("-"));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        self.csv.clone()
    }
}

pub fn report_table(reports: &[EvalReport]) -> ReportTable {
    let mut columns: Vec<String> = Vec::new();
    let mut rows: Vec<(String, Vec<Option<String>>)> = Vec::new();
    let mut csv = String::from(
        "representation_id,dataset,n_way,k_shot,aux_mode,vote_kind,acc_pct,ci95_pct,trials,episodes,seed\n",
    );
    for r in reports {
        let col = r.protocol.column_label();
        let j = columns.iter().position(|c| *c == col).unwrap_or_else(|| {
            columns.push(col);
            rows.iter_mut().for_each(|row| row.1.push(None));
            columns.len() - 1
        });
        let i = rows.iter().position(|row| row.0 == r.representation_id).unwrap_or_else(|| {
            rows.push((r.representation_id.clone(), vec![None; columns.len()]));
            rows.len() - 1
        });
        rows[i].1[j] = Some(format_cell(r.reported_acc, r.ci_halfwidth));
        let p = &r.protocol;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{:.2},{:.2},{},{},{}",
            r.representation_id,
            r.dataset,
            p.n_way,
            p.k_shot,
            p.aux,
            p.vote,
            (r.reported_acc * 1e4).round() / 100.0,
            (r.ci_halfwidth * 1e4).round() / 100.0,
            p.trials,
            p.episodes_per_trial,
            p.seed
        );
    }
    ReportTable { columns, rows, csv }
}

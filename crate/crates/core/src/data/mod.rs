//! Datasets, the inner train/holdout split, episode sampling, and the input
//! resolution pipelines.

mod manifest;
pub mod pipeline;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use manifest::{read_manifest, read_split, write_manifest, write_split, ManifestRecord};
pub use pipeline::{eval_view, pipeline_view, pipeline_view_traced, to_batch, CropTrace};
pub use synthetic::{generate_synthetic, SyntheticShapesConfig, SHAPE_NAMES};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default number of query images per class in an episode.
pub const DEFAULT_QUERY_PER_CLASS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        })
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(Error::Config(format!("unknown partition {other:?}"))),
        }
    }
}

/// How stored images become network inputs.
///
/// `Resized` deterministically resizes the whole image (the pre-resized
/// 84x84 archives); `RandomCrop` takes random resized crops from the original
/// image at train time and a center crop at eval time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResolutionMode {
    #[serde(rename = "RESIZED_84")]
    Resized,
    #[serde(rename = "RANDOM_CROP_84")]
    RandomCrop,
}

impl FromStr for ResolutionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resized" | "resized_84" => Ok(ResolutionMode::Resized),
            "random_crop" | "random_crop_84" => Ok(ResolutionMode::RandomCrop),
            other => Err(Error::Config(format!("unknown resolution mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ImageSource {
    /// Original-resolution image files under a root directory.
    Directory(PathBuf),
    /// Images already downsampled to the view size.
    ResizedArchive(PathBuf),
    /// Rendered in memory by [`generate_synthetic`].
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub path: String,
    pub class_id: u32,
    pub partition: Partition,
    pixels: Option<Arc<Image<u8>>>,
}

impl ImageRecord {
    pub fn on_disk(path: impl Into<String>, class_id: u32, partition: Partition) -> Self {
        Self {
            path: path.into(),
            class_id,
            partition,
            pixels: None,
        }
    }

    pub fn in_memory(path: impl Into<String>, class_id: u32, partition: Partition, img: Image<u8>) -> Self {
        Self {
            path: path.into(),
            class_id,
            partition,
            pixels: Some(Arc::new(img)),
        }
    }

    pub fn pixels(&self) -> Option<&Arc<Image<u8>>> {
        self.pixels.as_ref()
    }
}

/// A labeled image collection with disjoint train/val/test class sets.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub name: String,
    pub source: ImageSource,
    pub mode: ResolutionMode,
    /// Side length of network inputs (84 for the ImageNet derivatives).
    pub view_size: usize,
    records: Vec<ImageRecord>,
}

impl DatasetSpec {
    pub fn new(
        name: impl Into<String>,
        source: ImageSource,
        mode: ResolutionMode,
        view_size: usize,
        records: Vec<ImageRecord>,
    ) -> Result<Self> {
        let mut owner: BTreeMap<u32, Partition> = BTreeMap::new();
        for r in &records {
            match owner.insert(r.class_id, r.partition) {
                Some(p) if p != r.partition => {
                    return Err(Error::Config(format!(
                        "class {} appears in both {p} and {} partitions",
                        r.class_id, r.partition
                    )))
                }
                _ => {}
            }
        }
        if view_size == 0 {
            return Err(Error::Config("view size must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            source,
            mode,
            view_size,
            records,
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn indices_of(&self, partition: Partition) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].partition == partition)
            .collect()
    }

    pub fn classes_of(&self, partition: Partition) -> Vec<u32> {
        self.records
            .iter()
            .filter(|r| r.partition == partition)
            .map(|r| r.class_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn class_of(&self, idx: usize) -> u32 {
        self.records[idx].class_id
    }

    /// Stored pixels of record `idx`, decoding from disk when needed.
    pub fn load(&self, idx: usize) -> Result<Arc<Image<u8>>> {
        let rec = &self.records[idx];
        if let Some(px) = &rec.pixels {
            return Ok(px.clone());
        }
        let root = match &self.source {
            ImageSource::Directory(root) | ImageSource::ResizedArchive(root) => root.clone(),
            ImageSource::Synthetic { .. } => {
                return Err(Error::Decode {
                    path: rec.path.clone(),
                    reason: "synthetic record without pixels".into(),
                })
            }
        };
        Ok(Arc::new(Image::decode_file(&root.join(&rec.path))?))
    }

    /// Decodes every record into memory.
    pub fn preload(&mut self) -> Result<()> {
        for i in 0..self.records.len() {
            if self.records[i].pixels.is_none() {
                let px = self.load(i)?;
                self.records[i].pixels = Some(px);
            }
        }
        Ok(())
    }

    /// Whether stored images carry enough resolution for `2 × view_size`
    /// location crops without upscaling.
    pub fn supports_high_res(&self) -> bool {
        match &self.source {
            ImageSource::ResizedArchive(_) => false,
            ImageSource::Directory(_) => true,
            ImageSource::Synthetic { .. } => self
                .records
                .first()
                .and_then(|r| r.pixels.as_ref())
                .is_some_and(|p| p.height() >= 2 * self.view_size),
        }
    }
}

/// Per-channel normalization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalization {
    /// Maximum number of images sampled when estimating the statistics.
    pub const MAX_IMAGES: usize = 2048;

    pub fn estimate(spec: &DatasetSpec, indices: &[usize], seed: u64) -> Result<Self> {
        let mut idx = indices.to_vec();
        if idx.len() > Self::MAX_IMAGES {
            idx.shuffle(&mut rng::stream(seed, &[0x6e6f726d]));
            idx.truncate(Self::MAX_IMAGES);
            idx.sort_unstable();
        }
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut count = 0f64;
        for &i in &idx {
            let view = eval_view(&*spec.load(i)?, spec.mode, spec.view_size);
            let plane = view.height() * view.width();
            for (c, chunk) in view.data().chunks(plane).enumerate().take(3) {
                for &v in chunk {
                    sum[c] += f64::from(v);
                    sq[c] += f64::from(v) * f64::from(v);
                }
            }
            count += plane as f64;
        }
        if count == 0.0 {
            return Err(Error::EmptyPartition("no images to estimate normalization".into()));
        }
        let mut out = Self::default();
        for c in 0..3 {
            let m = sum[c] / count;
            out.mean[c] = m as f32;
            out.std[c] = ((sq[c] / count - m * m).max(1e-8)).sqrt() as f32;
        }
        Ok(out)
    }

    pub fn write_into<T: Scalar>(&self, view: &Image<f32>, out: &mut [T]) {
        let plane = view.height() * view.width();
        for (c, chunk) in view.data().chunks(plane).enumerate() {
            let (m, s) = (self.mean[c.min(2)], self.std[c.min(2)]);
            for (o, &v) in out[c * plane..(c + 1) * plane].iter_mut().zip(chunk) {
                *o = T::lit(f64::from((v - m) / s));
            }
        }
    }
}

/// Stratified 90/10 division of the train partition.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub seed: u64,
    pub inner_train: Vec<usize>,
    pub inner_holdout: Vec<usize>,
    pub norm: Normalization,
}

/// Number of holdout images for a class with `n` images: 10%, at least one,
/// leaving at least one for training.
pub fn holdout_count(n: usize) -> usize {
    (((n as f64) * 0.1).round() as usize).clamp(1, n - 1)
}

pub fn make_splits(spec: &DatasetSpec, seed: u64) -> Result<SplitAssignment> {
    let pool = ClassPool::from_indices(spec, &spec.indices_of(Partition::Train));
    if pool.is_empty() {
        return Err(Error::EmptyPartition("train partition has no images".into()));
    }
    let mut inner_train = Vec::new();
    let mut inner_holdout = Vec::new();
    for (&class, members) in pool.iter() {
        if members.len() < 2 {
            return Err(Error::EmptyPartition(format!(
                "class {class} has {} image(s); the split needs at least 2",
                members.len()
            )));
        }
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng::stream(seed, &[u64::from(class)]));
        let h = holdout_count(shuffled.len());
        inner_holdout.extend_from_slice(&shuffled[..h]);
        inner_train.extend_from_slice(&shuffled[h..]);
    }
    inner_train.sort_unstable();
    inner_holdout.sort_unstable();
    let norm = Normalization::estimate(spec, &inner_train, seed)?;
    Ok(SplitAssignment {
        seed,
        inner_train,
        inner_holdout,
        norm,
    })
}

/// Record indices grouped by class, classes in ascending id order.
#[derive(Debug, Clone, Default)]
pub struct ClassPool {
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl ClassPool {
    pub fn from_indices(spec: &DatasetSpec, indices: &[usize]) -> Self {
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in indices {
            by_class.entry(spec.class_of(i)).or_default().push(i);
        }
        Self { by_class }
    }

    pub fn partitions(spec: &DatasetSpec, parts: &[Partition]) -> Self {
        let idx: Vec<usize> = parts.iter().flat_map(|&p| spec.indices_of(p)).collect();
        Self::from_indices(spec, &idx)
    }

    pub fn is_empty(&self) -> bool {
        self.by_class.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn classes(&self) -> Vec<u32> {
        self.by_class.keys().copied().collect()
    }

    pub fn members(&self, class: u32) -> &[usize] {
        self.by_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u32, &Vec<usize>)> {
        self.by_class.iter()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.by_class.values().flatten().copied().collect();
        v.sort_unstable();
        v
    }
}

/// An image reference with its episode-local label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Labeled {
    pub index: usize,
    pub label: usize,
}

/// The sampled composition of an episode, before any pixels are touched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeIndices {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    /// `classes[label]` is the dataset class relabeled to `label`.
    pub classes: Vec<u32>,
    pub support: Vec<Labeled>,
    pub query: Vec<Labeled>,
}

impl EpisodeIndices {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.label).collect()
    }
}

/// Draws `n` classes uniformly without replacement, then `k + q` distinct
/// images per class, the first `k` of which form the support set.
pub fn sample_episode_indices<R: Rng + ?Sized>(
    pool: &ClassPool,
    n: usize,
    k: usize,
    q: usize,
    rng: &mut R,
) -> Result<EpisodeIndices> {
    if n == 0 || k == 0 {
        return Err(Error::Config("episodes need n ≥ 1 and k ≥ 1".into()));
    }
    if pool.num_classes() < n {
        return Err(Error::InsufficientData(format!(
            "{n}-way episodes from a pool of {} classes",
            pool.num_classes()
        )));
    }
    if let Some((c, m)) = pool.iter().find(|(_, m)| m.len() < k + q) {
        return Err(Error::InsufficientData(format!(
            "class {c} has {} images, episodes need {}",
            m.len(),
            k + q
        )));
    }
    let classes = pool.classes();
    let picked: Vec<u32> = sample(rng, classes.len(), n)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    let mut support = Vec::with_capacity(n * k);
    let mut query = Vec::with_capacity(n * q);
    for (label, &class) in picked.iter().enumerate() {
        let members = pool.members(class);
        let chosen = sample(rng, members.len(), k + q).into_vec();
        for (j, &m) in chosen.iter().enumerate() {
            let item = Labeled {
                index: members[m],
                label,
            };
            if j < k {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(EpisodeIndices {
        n_way: n,
        k_shot: k,
        q_per_class: q,
        classes: picked,
        support,
        query,
    })
}

/// A materialized n-way k-shot task in network-input space.
#[derive(Debug, Clone)]
pub struct Episode<T> {
    pub n_way: usize,
    pub k_shot: usize,
    pub support_x: Tensor<T>,
    pub support_y: Vec<usize>,
    pub query_x: Tensor<T>,
    pub query_y: Vec<usize>,
    pub indices: EpisodeIndices,
}

/// Samples an episode and renders its eval-mode views.
pub fn sample_episode<T: Scalar, R: Rng + ?Sized>(
    spec: &DatasetSpec,
    pool: &ClassPool,
    n: usize,
    k: usize,
    q: usize,
    norm: &Normalization,
    rng: &mut R,
) -> Result<Episode<T>> {
    let indices = sample_episode_indices(pool, n, k, q, rng)?;
    let render = |items: &[Labeled]| -> Result<Tensor<T>> {
        let views = items
            .iter()
            .map(|it| Ok(eval_view(&*spec.load(it.index)?, spec.mode, spec.view_size)))
            .collect::<Result<Vec<_>>>()?;
        Ok(to_batch(&views, norm))
    };
    Ok(Episode {
        n_way: n,
        k_shot: k,
        support_x: render(&indices.support)?,
        support_y: indices.support_labels(),
        query_x: render(&indices.query)?,
        query_y: indices.query_labels(),
        indices,
    })
}

/// Verifies the episode invariants; used by tests and debug assertions.
pub fn check_episode(ep: &EpisodeIndices, spec: &DatasetSpec) -> Result<()> {
    let s: HashSet<usize> = ep.support.iter().map(|l| l.index).collect();
    if ep.query.iter().any(|l| s.contains(&l.index)) {
        return Err(Error::InsufficientData("support and query overlap".into()));
    }
    let distinct: BTreeSet<u32> = ep.classes.iter().copied().collect();
    if distinct.len() != ep.n_way {
        return Err(Error::InsufficientData("repeated class in episode".into()));
    }
    for (items, per) in [(&ep.support, ep.k_shot), (&ep.query, ep.q_per_class)] {
        let mut count = vec![0usize; ep.n_way];
        for it in items.iter() {
            if spec.class_of(it.index) != ep.classes[it.label] {
                return Err(Error::InsufficientData("label does not match class".into()));
            }
            count[it.label] += 1;
        }
        if count.iter().any(|&c| c != per) {
            return Err(Error::InsufficientData("unbalanced episode".into()));
        }
    }
    Ok(())
}

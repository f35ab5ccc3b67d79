//! Flat `key=value` experiment configuration.
//!
//! One entry per line, `#` starts a comment, keys use dotted sections
//! (`trainer.lr=0.05`). Later sources override earlier ones: file, then
//! `--set` pairs, then dedicated flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use fewshot::adapt::{AuxAugmentation, FeatureNorm, ProbeConfig, VoteScheme};
use fewshot::backbones::{Arch, BackboneConfig};
use fewshot::data::{
    generate_synthetic, read_manifest, DatasetSpec, ImageRecord, ImageSource, Partition, ResolutionMode,
    SyntheticShapesConfig,
};
use fewshot::evaluate::EvalProtocol;
use fewshot::meta::{default_alpha, MetaConfig, OuterOptimizer};
use fewshot::pretext::{TaskKind, TaskSet};
use fewshot::trainer::{CopyMode, TaskWeights, TrainConfig};
use sha2::{Digest, Sha256};

use crate::UsageError;

pub const DATA_ROOT_ENV: &str = "FEWSHOT_DATA_ROOT";

const KEYS: &[&str] = &[
    "seed",
    "output",
    "method",
    "workers",
    "data.kind",
    "data.root",
    "data.manifest",
    "data.name",
    "data.mode",
    "data.view_size",
    "data.n_classes",
    "data.images_per_class",
    "data.image_size",
    "data.seed",
    "data.spurious_prob",
    "backbone.arch",
    "backbone.widths",
    "trainer.lr",
    "trainer.epochs",
    "trainer.batch_size",
    "trainer.decay_epochs",
    "trainer.decay_factor",
    "trainer.copy_mode",
    "trainer.momentum",
    "trainer.weight_decay",
    "trainer.lambda_rot",
    "trainer.lambda_loc",
    "trainer.loc_source",
    "trainer.contrast_batch",
    "trainer.temperature",
    "trainer.save_epochs",
    "meta.alpha",
    "meta.beta",
    "meta.inner_steps_train",
    "meta.inner_steps_eval",
    "meta.task_batch",
    "meta.epochs",
    "meta.n_way",
    "meta.k_shot",
    "meta.q_per_class",
    "meta.episodes_per_epoch",
    "meta.val_episodes",
    "meta.first_order",
    "meta.outer_optimizer",
    "eval.partitions",
    "eval.n_way",
    "eval.k_shot",
    "eval.trials",
    "eval.episodes",
    "eval.q_per_class",
    "eval.aux",
    "eval.vote",
    "eval.support_copies",
    "eval.seed",
    "probe.l2",
    "probe.tol",
    "probe.max_iters",
    "probe.feature_norm",
    "probe.aux_weight",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl FlatConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.set_pair(line).map_err(|e| usage(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies one `key=value` pair.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| usage(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(usage(format!("unknown config key {key:?}")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn set_opt<V: ToString>(&mut self, key: &str, value: Option<V>) -> Result<()> {
        match value {
            Some(v) => self.set(key, v),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| usage(format!("{key}={v}: {e}"))),
        }
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse().map_err(|e| usage(format!("{key}={v}: {e}"))))
            .transpose()
    }

    pub fn list<T: FromStr>(&self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
        T: Clone,
    {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some("") => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|p| p.trim().parse().map_err(|e| usage(format!("{key}={v}: {e}"))))
                .collect(),
        }
    }

    /// Resolved entries as sorted `key=value` lines.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed", 0)
    }

    pub fn output(&self) -> Result<PathBuf> {
        self.get_opt::<PathBuf>("output")?.ok_or_else(|| usage("no output directory (set output= or --output)"))
    }

    pub fn workers(&self) -> Result<usize> {
        let w = self.get("workers", 1usize)?;
        if w == 0 {
            return Err(usage("workers must be at least 1"));
        }
        Ok(w)
    }
}

/// What a pretraining run optimizes.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Tasks(TaskSet),
    Anil,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "anil" => Ok(Method::Anil),
            "supervised" => Ok(Method::Tasks(TaskSet::single(TaskKind::Cls))),
            "multitask" => Err("multitask needs an explicit task set, e.g. cls+rot".into()),
            other => other
                .parse::<TaskSet>()
                .map(Method::Tasks)
                .map_err(|_| format!("unknown method {other:?}")),
        }
    }
}

impl FlatConfig {
    pub fn method(&self) -> Result<Method> {
        let m = self.raw("method").unwrap_or("supervised");
        m.parse().map_err(usage)
    }

    pub fn dataset(&self) -> Result<DatasetSpec> {
        let kind = self.raw("data.kind").unwrap_or("synthetic");
        if kind == "synthetic" {
            let spec = generate_synthetic(&self.synthetic()?)?;
            return Ok(spec);
        }
        let root = match self.get_opt::<PathBuf>("data.root")? {
            Some(r) => r,
            None => std::env::var_os(DATA_ROOT_ENV)
                .map(PathBuf::from)
                .ok_or_else(|| usage(format!("data.root is not set and {DATA_ROOT_ENV} is empty")))?,
        };
        if !root.is_dir() {
            return Err(usage(format!("dataset root {} does not exist", root.display())));
        }
        let manifest = root.join(self.raw("data.manifest").unwrap_or("manifest.tsv"));
        if !manifest.is_file() {
            return Err(usage(format!("dataset manifest {} does not exist", manifest.display())));
        }
        let (source, default_mode) = match kind {
            "directory" => (ImageSource::Directory(root.clone()), ResolutionMode::RandomCrop),
            "resized" => (ImageSource::ResizedArchive(root.clone()), ResolutionMode::Resized),
            other => return Err(usage(format!("data.kind must be synthetic, directory or resized, got {other:?}"))),
        };
        let mode = self.get("data.mode", default_mode)?;
        let view = self.get("data.view_size", 84usize)?;
        let records = read_manifest(&manifest)?
            .into_iter()
            .map(|r| ImageRecord::on_disk(r.path, r.class_id, r.partition))
            .collect();
        let name = self
            .raw("data.name")
            .map(String::from)
            .unwrap_or_else(|| root.file_name().map_or("dataset".into(), |n| n.to_string_lossy().into_owned()));
        let mut spec = DatasetSpec::new(name, source, mode, view, records)?;
        spec.preload().context("loading dataset images")?;
        Ok(spec)
    }

    pub fn synthetic(&self) -> Result<SyntheticShapesConfig> {
        let d = SyntheticShapesConfig::default();
        Ok(SyntheticShapesConfig {
            n_classes: self.get("data.n_classes", d.n_classes)?,
            images_per_class: self.get("data.images_per_class", d.images_per_class)?,
            image_size: self.get("data.image_size", d.image_size)?,
            seed: self.get("data.seed", self.seed()?)?,
            spurious_prob: self.get("data.spurious_prob", d.spurious_prob)?,
        })
    }

    pub fn backbone(&self, input_size: usize) -> Result<BackboneConfig> {
        let arch: Arch = self.get("backbone.arch", Arch::ConvNet4)?;
        let cfg = BackboneConfig::for_arch(arch, input_size);
        let widths: Vec<usize> = self.list("backbone.widths", &[])?;
        Ok(if widths.is_empty() { cfg } else { cfg.with_widths(&widths) })
    }

    pub fn trainer(&self, tasks: TaskSet) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let epochs = self.get("trainer.epochs", d.epochs)?;
        // Default decay points scale with the epoch count (60% and 80%).
        let decay_default: Vec<usize> = if epochs == d.epochs {
            d.decay_epochs.clone()
        } else {
            let mut v = vec![epochs * 6 / 10, epochs * 8 / 10];
            v.dedup();
            v.retain(|&e| e > 0 && e < epochs);
            v
        };
        let cfg = TrainConfig {
            tasks,
            weights: TaskWeights {
                lambda_rot: self.get("trainer.lambda_rot", d.weights.lambda_rot)?,
                lambda_loc: self.get("trainer.lambda_loc", d.weights.lambda_loc)?,
            },
            lr: self.get("trainer.lr", d.lr)?,
            epochs,
            batch_size: self.get("trainer.batch_size", d.batch_size)?,
            decay_epochs: self.list("trainer.decay_epochs", &decay_default)?,
            decay_factor: self.get("trainer.decay_factor", d.decay_factor)?,
            copy_mode: self.get("trainer.copy_mode", CopyMode::AllCopies)?,
            momentum: self.get("trainer.momentum", d.momentum)?,
            weight_decay: self.get("trainer.weight_decay", d.weight_decay)?,
            loc_source: self.get_opt("trainer.loc_source")?,
            contrast_batch: self.get("trainer.contrast_batch", d.contrast_batch)?,
            temperature: self.get("trainer.temperature", d.temperature)?,
            contrast_aug: d.contrast_aug,
            checkpoint_dir: None,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn meta(&self) -> Result<MetaConfig> {
        let n = self.get("meta.n_way", 5usize)?;
        let k = self.get("meta.k_shot", 1usize)?;
        let d = MetaConfig::new(n, k);
        let outer = match self.raw("meta.outer_optimizer").unwrap_or("sgd").to_ascii_lowercase().as_str() {
            "sgd" => OuterOptimizer::Sgd,
            "adam" => OuterOptimizer::Adam,
            other => return Err(usage(format!("meta.outer_optimizer must be sgd or adam, got {other:?}"))),
        };
        let cfg = MetaConfig {
            alpha: self.get("meta.alpha", default_alpha(n))?,
            beta: self.get("meta.beta", d.beta)?,
            inner_steps_train: self.get("meta.inner_steps_train", d.inner_steps_train)?,
            inner_steps_eval: self.get("meta.inner_steps_eval", d.inner_steps_eval)?,
            task_batch: self.get("meta.task_batch", d.task_batch)?,
            epochs: self.get("meta.epochs", d.epochs)?,
            q_per_class: self.get("meta.q_per_class", d.q_per_class)?,
            episodes_per_epoch: self.get("meta.episodes_per_epoch", d.episodes_per_epoch)?,
            val_episodes: self.get("meta.val_episodes", d.val_episodes)?,
            first_order: self.get("meta.first_order", d.first_order)?,
            outer_optimizer: outer,
            ..d
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn probe(&self) -> Result<ProbeConfig> {
        let d = ProbeConfig::default();
        let norm = match self.raw("probe.feature_norm").unwrap_or("none") {
            "none" => FeatureNorm::None,
            "unit_l2" => FeatureNorm::UnitL2,
            other => return Err(usage(format!("probe.feature_norm must be none or unit_l2, got {other:?}"))),
        };
        Ok(ProbeConfig {
            l2_coeff: self.get("probe.l2", d.l2_coeff)?,
            tol: self.get("probe.tol", d.tol)?,
            max_iters: self.get("probe.max_iters", d.max_iters)?,
            feature_norm: norm,
            aux_weight: self.get("probe.aux_weight", d.aux_weight)?,
        })
    }

    pub fn eval_partitions(&self) -> Result<Vec<Partition>> {
        let parts: Vec<Partition> = self.list("eval.partitions", &[Partition::Test])?;
        if parts.is_empty() {
            return Err(usage("eval.partitions is empty"));
        }
        Ok(parts)
    }

    /// One protocol per `(n_way, k_shot)` combination.
    pub fn protocols(&self) -> Result<Vec<EvalProtocol>> {
        let ways: Vec<usize> = self.list("eval.n_way", &[5])?;
        let shots: Vec<usize> = self.list("eval.k_shot", &[1, 5])?;
        let aux: AuxAugmentation = self.get("eval.aux", AuxAugmentation::NONE)?;
        let vote: VoteScheme = self.get("eval.vote", VoteScheme::None)?;
        let probe = self.probe()?;
        let workers = self.workers()?;
        let mut out = Vec::new();
        for &n in &ways {
            for &k in &shots {
                let d = EvalProtocol::new(n, k);
                let p = EvalProtocol {
                    episodes_per_trial: self.get("eval.episodes", d.episodes_per_trial)?,
                    trials: self.get("eval.trials", d.trials)?,
                    q_per_class: self.get("eval.q_per_class", d.q_per_class)?,
                    aux: aux.clone(),
                    vote,
                    seed: self.get("eval.seed", self.seed()?)?,
                    probe,
                    support_copies: self.get("eval.support_copies", d.support_copies)?,
                    workers,
                    ..d
                };
                p.validate().map_err(|e| usage(e.to_string()))?;
                out.push(p);
            }
        }
        if out.is_empty() {
            return Err(usage("no evaluation protocols (eval.n_way or eval.k_shot is empty)"));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_values_win_and_comments_are_ignored() {
        let mut c = FlatConfig::parse("seed=1\n# note\ntrainer.lr = 0.1 # inline\n\nseed=2\n", "t").unwrap();
        c.set_pair("trainer.lr=0.2").unwrap();
        assert_eq!(c.seed().unwrap(), 2);
        assert_eq!(c.get("trainer.lr", 0.0).unwrap(), 0.2);
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_usage_errors() {
        for text in ["trainer.lrr=1", "no equals sign"] {
            let e = FlatConfig::parse(text, "t").unwrap_err();
            assert!(e.downcast_ref::<UsageError>().is_some());
        }
    }

    #[test]
    fn hash_ignores_entry_order() {
        let a = FlatConfig::parse("seed=1\nmethod=rot", "a").unwrap();
        let b = FlatConfig::parse("method=rot\nseed=1", "b").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn alpha_defaults_follow_the_way_count() {
        let five = FlatConfig::parse("meta.n_way=5", "t").unwrap();
        let ten = FlatConfig::parse("meta.n_way=10", "t").unwrap();
        assert_eq!(five.meta().unwrap().alpha, 0.01);
        assert_eq!(ten.meta().unwrap().alpha, 0.05);
    }

    #[test]
    fn methods() {
        assert_eq!("anil".parse::<Method>().unwrap(), Method::Anil);
        assert_eq!(
            "supervised".parse::<Method>().unwrap(),
            Method::Tasks(TaskSet::single(TaskKind::Cls))
        );
        assert!("cls+rot".parse::<Method>().is_ok());
        assert!("rotation".parse::<Method>().is_err());
    }
}

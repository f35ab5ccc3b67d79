use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fewshot::adapt::{AuxMode, VoteScheme};
use fewshot::checkpoint::{checkpoint_filename, load_checkpoint, save_checkpoint, CheckpointMeta, EmbeddingTable};
use fewshot::data::{make_splits, read_split, write_manifest, write_split, ClassPool, DatasetSpec, Partition, SplitAssignment};
use fewshot::evaluate::{
    cross_eval_holdout, embed, report_table, run_cached_eval, run_episodic_eval, CrossEvalMatrix, EvalData,
    EvalFeatures, EvalReport, FeatureBank,
};
use fewshot::io::write_atomic;
use fewshot::meta::{meta_train, write_meta_log};
use fewshot::pretext::TaskKind;
use fewshot::trainer::{select_checkpoint, train_representation, write_training_log};
use fewshot::{Error, Extractor};

use crate::config::{FlatConfig, Method};
use crate::manifest::Run;
use crate::UsageError;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write_text(run: &mut Run, name: &str, text: &str) -> Result<PathBuf> {
    let path = run.dir().join(name);
    write_atomic(&path, text.as_bytes())?;
    run.artifact(&path);
    Ok(path)
}

/// Runs `body` between the initial and final manifest writes.
fn with_run(command: &str, cfg: &FlatConfig, body: impl FnOnce(&mut Run) -> Result<()>) -> Result<()> {
    let mut run = Run::start(command, &cfg.output()?, cfg)?;
    let outcome = body(&mut run);
    run.finish(&outcome)?;
    outcome
}

fn split_for(spec: &DatasetSpec, split_file: Option<&Path>, seed: u64) -> Result<SplitAssignment> {
    match split_file {
        Some(p) => {
            require_file(p, "split file")?;
            Ok(read_split(p, spec)?)
        }
        None => Ok(make_splits(spec, seed)?),
    }
}

fn load_for(path: &Path, spec: &DatasetSpec) -> Result<(Extractor, CheckpointMeta)> {
    require_file(path, "checkpoint")?;
    let (fe, meta) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    if meta.view_size != spec.view_size {
        return Err(Error::Config(format!(
            "checkpoint expects {}px views, dataset provides {}px",
            meta.view_size, spec.view_size
        ))
        .into());
    }
    Ok((fe, meta))
}

pub fn pretrain(cfg: &FlatConfig) -> Result<()> {
    let tasks = match cfg.method()? {
        Method::Tasks(t) => t,
        Method::Anil => return Err(usage("method=anil is trained with meta-train")),
    };
    let tcfg = cfg.trainer(tasks.clone())?;
    let seed = cfg.seed()?;
    let spec = cfg.dataset()?;
    let bcfg = cfg.backbone(spec.view_size)?;
    if tasks.needs_high_res() && !spec.supports_high_res() {
        return Err(Error::IncompatibleTasks(format!("{tasks} needs a high-resolution image source")).into());
    }
    with_run("pretrain", cfg, |run| {
        run.seed("seed", seed);
        run.param("tasks", tasks.to_string())?;
        run.param("lr_schedule", tcfg.lr_schedule())?;
        let split = make_splits(&spec, seed)?;
        let split_path = run.dir().join("split.tsv");
        write_split(&split_path, &spec, &split)?;
        run.artifact(&split_path);
        let mut tcfg = tcfg.clone();
        if cfg.get("trainer.save_epochs", false)? {
            tcfg.checkpoint_dir = Some(run.dir().join("epochs"));
        }
        let out = run.timed("train", || Ok(train_representation(&tcfg, &spec, &split, &bcfg, seed)?))?;
        let best = select_checkpoint(&out.records)?;
        let meta = CheckpointMeta {
            tasks: tasks.to_string(),
            epoch: best.epoch,
            val_loss: best.val_loss,
            norm: split.norm,
            mode: spec.mode,
            view_size: spec.view_size,
        };
        let ckpt = run.dir().join(checkpoint_filename(&bcfg, &meta));
        save_checkpoint(&ckpt, &out.best_extractor, &meta)?;
        run.artifact(&ckpt);
        let log = run.dir().join("train_log.csv");
        write_training_log(&log, &tasks, &out.records)?;
        run.artifact(&log);
        run.param("best_epoch", best.epoch)?;
        println!("{}", ckpt.display());
        Ok(())
    })
}

pub fn meta_train_cmd(cfg: &FlatConfig) -> Result<()> {
    let mc = cfg.meta()?;
    let seed = cfg.seed()?;
    let spec = cfg.dataset()?;
    let bcfg = cfg.backbone(spec.view_size)?;
    with_run("meta-train", cfg, |run| {
        run.seed("seed", seed);
        run.param("alpha", mc.alpha)?;
        run.param("beta", mc.beta)?;
        run.param("n_way", mc.n_way)?;
        run.param("k_shot", mc.k_shot)?;
        run.param("task_batch", mc.task_batch)?;
        let split = make_splits(&spec, seed)?;
        let split_path = run.dir().join("split.tsv");
        write_split(&split_path, &spec, &split)?;
        run.artifact(&split_path);
        let out = run.timed("meta_train", || Ok(meta_train(&mc, &spec, &split, &bcfg, seed)?))?;
        let val_loss = out.records.iter().find(|r| r.epoch == out.best_epoch).map_or(f64::NAN, |r| r.val_loss);
        let meta = CheckpointMeta {
            tasks: "anil".into(),
            epoch: out.best_epoch,
            val_loss,
            norm: split.norm,
            mode: spec.mode,
            view_size: spec.view_size,
        };
        let ckpt = run.dir().join(checkpoint_filename(&bcfg, &meta));
        save_checkpoint(&ckpt, &out.best.theta, &meta)?;
        run.artifact(&ckpt);
        let log = run.dir().join("meta_log.csv");
        write_meta_log(&log, &out.records)?;
        run.artifact(&log);
        run.param("best_epoch", out.best_epoch)?;
        println!("{}", ckpt.display());
        Ok(())
    })
}

fn partition_tag(parts: &[Partition]) -> String {
    parts.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("+")
}

pub fn embed_cmd(cfg: &FlatConfig, checkpoint: &Path) -> Result<()> {
    let spec = cfg.dataset()?;
    let parts = cfg.eval_partitions()?;
    let (fe, meta) = load_for(checkpoint, &spec)?;
    with_run("embed", cfg, |run| {
        run.param("checkpoint", checkpoint)?;
        run.param("partitions", partition_tag(&parts))?;
        let idx = ClassPool::partitions(&spec, &parts).all_indices();
        let table = run.timed("embed", || Ok(embed(&fe, &spec, &idx, &meta.norm)?))?;
        let path = run.dir().join(format!("embeddings_{}.fseb", partition_tag(&parts)));
        table.write(&path)?;
        run.artifact(&path);
        println!("{}", path.display());
        Ok(())
    })
}

fn bank_from_cache(path: &Path, spec: &DatasetSpec, indices: &[usize]) -> Result<FeatureBank> {
    require_file(path, "embedding cache")?;
    let table = EmbeddingTable::read(path)?;
    let ids: Vec<u32> = indices.iter().map(|&i| spec.class_of(i)).collect();
    if table.class_ids != ids {
        return Err(Error::Config(format!("{} was not embedded from these partitions", path.display())).into());
    }
    Ok(FeatureBank::from_table(&table, indices)?)
}

pub struct EvalSources<'a> {
    pub checkpoint: Option<&'a Path>,
    pub cache: Option<&'a Path>,
    pub aux_cache: Option<&'a Path>,
    pub split: Option<&'a Path>,
    pub name: Option<&'a str>,
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "representation".into(), |s| s.to_string_lossy().into_owned())
}

pub fn eval_cmd(cfg: &FlatConfig, src: &EvalSources) -> Result<()> {
    if src.checkpoint.is_none() && src.cache.is_none() {
        return Err(usage("eval needs --checkpoint or --cache"));
    }
    let protocols = cfg.protocols()?;
    let spec = cfg.dataset()?;
    let parts = cfg.eval_partitions()?;
    let seed = cfg.seed()?;
    let mut split = split_for(&spec, src.split, seed)?;
    let loaded = src.checkpoint.map(|p| load_for(p, &spec)).transpose()?;
    if let Some((_, meta)) = &loaded {
        split.norm = meta.norm;
    }
    let name = src
        .name
        .map(String::from)
        .or_else(|| src.checkpoint.or(src.cache).map(stem))
        .unwrap_or_default();
    let pool = ClassPool::partitions(&spec, &parts);
    let data = EvalData::new(&spec, pool, &split);
    let with_aux = protocols[0].aux.mode != AuxMode::None;

    with_run("eval", cfg, |run| {
        run.seed("eval", protocols[0].seed);
        run.param("representation", &name)?;
        run.param("protocols", protocols.iter().map(|p| p.column_label()).collect::<Vec<_>>())?;
        let feats = run.timed("features", || -> Result<EvalFeatures> {
            match (src.cache, &loaded) {
                (Some(cache), _) => {
                    let episodes = bank_from_cache(cache, &spec, &data.episode_pool.all_indices())?;
                    let aux = match (src.aux_cache, &loaded) {
                        (Some(a), _) => {
                            let train = ClassPool::partitions(&spec, &[Partition::Train]).all_indices();
                            Some(bank_from_cache(a, &spec, &train)?)
                        }
                        (None, Some((fe, _))) if with_aux => Some(
                            EvalFeatures::build(fe, &data, VoteScheme::None, true)?
                                .aux
                                .expect("aux bank"),
                        ),
                        _ => None,
                    };
                    Ok(EvalFeatures { episodes, aux })
                }
                (None, Some((fe, _))) => Ok(EvalFeatures::build(fe, &data, protocols[0].vote, with_aux)?),
                (None, None) => unreachable!("checked above"),
            }
        })?;
        let mut reports: Vec<EvalReport> = Vec::new();
        for p in &protocols {
            let mut r = run.timed(&format!("eval_{}", p.column_label()), || match &loaded {
                Some((fe, _)) => Ok(run_episodic_eval(fe, p, &data, Some(&feats))?),
                None => Ok(run_cached_eval(p, &data, &feats)?),
            })?;
            r.representation_id = name.clone();
            reports.push(r);
        }
        let table = report_table(&reports);
        write_text(run, "reports.json", &serde_json::to_string_pretty(&reports)?)?;
        write_text(run, "report.csv", &table.to_csv())?;
        write_text(run, "report.txt", &table.to_text())?;
        print!("{}", table.to_text());
        Ok(())
    })
}

pub fn cross_eval_cmd(cfg: &FlatConfig, checkpoints: &[PathBuf], tasks: &[TaskKind], split_file: Option<&Path>) -> Result<()> {
    if checkpoints.is_empty() {
        return Err(usage("cross-eval needs at least one --checkpoint"));
    }
    let spec = cfg.dataset()?;
    let seed = cfg.seed()?;
    let split = split_for(&spec, split_file, seed)?;
    let probe = cfg.probe()?;
    let loaded = checkpoints.iter().map(|p| load_for(p, &spec)).collect::<Result<Vec<_>>>()?;
    if tasks.iter().any(|t| t.is_location()) && !spec.supports_high_res() {
        return Err(Error::IncompatibleTasks("location probes need a high-resolution source".into()).into());
    }
    with_run("cross-eval", cfg, |run| {
        run.seed("split", split.seed);
        let mut rows = Vec::new();
        let mut cells = Vec::new();
        for ((fe, meta), path) in loaded.iter().zip(checkpoints) {
            let mut s = split.clone();
            s.norm = meta.norm;
            let row = run.timed(&format!("cross_{}", stem(path)), || {
                tasks
                    .iter()
                    .map(|&t| Ok(100.0 * cross_eval_holdout(fe, t, &spec, &s, &probe)?))
                    .collect::<Result<Vec<f64>>>()
            })?;
            let mut label = meta.tasks.clone();
            if rows.contains(&label) {
                label = stem(path);
            }
            rows.push(label);
            cells.push(row);
        }
        let m = CrossEvalMatrix {
            rows,
            cols: tasks.to_vec(),
            cells,
        };
        write_text(run, "cross_eval.csv", &m.to_csv())?;
        write_text(run, "cross_eval.txt", &m.to_text())?;
        print!("{}", m.to_text());
        Ok(())
    })
}

pub fn report_cmd(cfg: &FlatConfig, inputs: &[PathBuf]) -> Result<()> {
    if inputs.is_empty() {
        return Err(usage("report needs at least one --input"));
    }
    let mut reports: Vec<EvalReport> = Vec::new();
    for p in inputs {
        let file = if p.is_dir() { p.join("reports.json") } else { p.clone() };
        require_file(&file, "report")?;
        let text = std::fs::read_to_string(&file)?;
        let parsed: Vec<EvalReport> =
            serde_json::from_str(&text).map_err(|e| usage(format!("{} is not a report file: {e}", file.display())))?;
        reports.extend(parsed);
    }
    with_run("report", cfg, |run| {
        let table = report_table(&reports);
        write_text(run, "table.csv", &table.to_csv())?;
        write_text(run, "table.txt", &table.to_text())?;
        print!("{}", table.to_text());
        Ok(())
    })
}

pub fn synth_data_cmd(cfg: &FlatConfig) -> Result<()> {
    let scfg = cfg.synthetic()?;
    let spec = fewshot::data::generate_synthetic(&scfg)?;
    with_run("synth-data", cfg, |run| {
        run.seed("data", scfg.seed);
        run.param("view_size", spec.view_size)?;
        let root = run.dir().to_path_buf();
        run.timed("render", || {
            for i in 0..spec.len() {
                let path = root.join(&spec.records()[i].path);
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                spec.load(i)?.save_png(&path)?;
            }
            Ok(())
        })?;
        let manifest = run.dir().join("manifest.tsv");
        write_manifest(&manifest, &spec)?;
        run.artifact(&manifest);
        println!("{}", manifest.display());
        Ok(())
    })
}

//! Tab-separated dataset manifests and split files.
//!
//! Manifest line: `<relative_path>\t<class_id>\t<partition>`.
//! Split file: `#seed=<u64>` header, optional `#mean=`/`#std=` lines, then
//! manifest lines with a fourth `inner_train|inner_holdout` column.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{DatasetSpec, Normalization, Partition, SplitAssignment};
use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub class_id: u32,
    pub partition: Partition,
}

pub fn write_manifest(path: &Path, spec: &DatasetSpec) -> Result<()> {
    let mut out = String::new();
    for r in spec.records() {
        writeln!(out, "{}\t{}\t{}", r.path, r.class_id, r.partition).expect("string write");
    }
    write_atomic(path, out.as_bytes())
}

fn parse_fields(path: &Path, lineno: usize, fields: &[&str]) -> Result<ManifestRecord> {
    let bad = |why: &str| Error::format(path, format!("line {}: {why}", lineno + 1));
    let class_id = fields[1].parse::<u32>().map_err(|_| bad("class id is not an integer"))?;
    let partition = fields[2].parse::<Partition>().map_err(|_| bad("unknown partition"))?;
    Ok(ManifestRecord {
        path: fields[0].to_string(),
        class_id,
        partition,
    })
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(path, format!("line {}: expected 3 fields", lineno + 1)));
        }
        out.push(parse_fields(path, lineno, &fields)?);
    }
    Ok(out)
}

fn join_f32(v: &[f32; 3]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn parse_f32x3(path: &Path, s: &str) -> Result<[f32; 3]> {
    let parts: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, "bad normalization constants"))?;
    parts
        .try_into()
        .map_err(|_| Error::format(path, "normalization needs three channels"))
}

pub fn write_split(path: &Path, spec: &DatasetSpec, split: &SplitAssignment) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "#seed={}", split.seed).expect("string write");
    writeln!(out, "#mean={}", join_f32(&split.norm.mean)).expect("string write");
    writeln!(out, "#std={}", join_f32(&split.norm.std)).expect("string write");
    let mut rows: Vec<(usize, &str)> = split
        .inner_train
        .iter()
        .map(|&i| (i, "inner_train"))
        .chain(split.inner_holdout.iter().map(|&i| (i, "inner_holdout")))
        .collect();
    rows.sort_unstable();
    for (i, tag) in rows {
        let r = &spec.records()[i];
        writeln!(out, "{}\t{}\t{}\t{tag}", r.path, r.class_id, r.partition).expect("string write");
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a split file and resolves its paths against `spec`.
pub fn read_split(path: &Path, spec: &DatasetSpec) -> Result<SplitAssignment> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let seed = lines
        .next()
        .and_then(|l| l.strip_prefix("#seed="))
        .and_then(|s| s.parse::<u64>().ok())
        .ok_or_else(|| Error::format(path, "missing #seed=<u64> header"))?;
    let index: std::collections::HashMap<&str, usize> = spec
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| (r.path.as_str(), i))
        .collect();
    let mut norm = Normalization::default();
    let mut split = SplitAssignment {
        seed,
        inner_train: Vec::new(),
        inner_holdout: Vec::new(),
        norm,
    };
    for (lineno, line) in lines.enumerate() {
        if let Some(v) = line.strip_prefix("#mean=") {
            norm.mean = parse_f32x3(path, v)?;
            continue;
        }
        if let Some(v) = line.strip_prefix("#std=") {
            norm.std = parse_f32x3(path, v)?;
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::format(path, format!("line {}: expected 4 fields", lineno + 2)));
        }
        let rec = parse_fields(path, lineno + 1, &fields)?;
        let &i = index
            .get(rec.path.as_str())
            .ok_or_else(|| Error::format(path, format!("unknown image {}", rec.path)))?;
        match fields[3] {
            "inner_train" => split.inner_train.push(i),
            "inner_holdout" => split.inner_holdout.push(i),
            other => return Err(Error::format(path, format!("unknown split tag {other:?}"))),
        }
    }
    split.norm = norm;
    split.inner_train.sort_unstable();
    split.inner_holdout.sort_unstable();
    Ok(split)
}

//! Per-run manifest, written as `run.json` when a run starts and rewritten
//! once when it ends.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Result;
use fewshot::io::write_atomic;
use serde::{Deserialize, Serialize};

use crate::config::FlatConfig;
use crate::UsageError;

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    /// The resolved configuration; replaying it reproduces the run.
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    /// Derived settings worth reading without re-resolving the config.
    pub params: BTreeMap<String, serde_json::Value>,
    pub artifacts: Vec<PathBuf>,
    pub timings_s: BTreeMap<String, f64>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: RunStatus,
    pub error: Option<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Tracks a run and keeps its manifest on disk.
pub struct Run {
    dir: PathBuf,
    pub manifest: RunManifest,
    clock: Instant,
}

impl Run {
    /// Creates `dir` and writes the initial manifest. A directory that holds
    /// a finished run is left untouched.
    pub fn start(command: &str, dir: &Path, cfg: &FlatConfig) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(old) = serde_json::from_slice::<RunManifest>(&bytes) {
                if old.status == RunStatus::Complete {
                    return Err(UsageError(format!("{} already holds a finished run", dir.display())).into());
                }
            }
        }
        std::fs::create_dir_all(dir)?;
        let run = Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                config_hash: cfg.hash(),
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                config: cfg.entries().clone(),
                seeds: BTreeMap::new(),
                params: BTreeMap::new(),
                artifacts: Vec::new(),
                timings_s: BTreeMap::new(),
                started_unix: now(),
                finished_unix: None,
                status: RunStatus::Running,
                error: None,
            },
            clock: Instant::now(),
        };
        run.write()?;
        Ok(run)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write(&self) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(&self.dir.join(MANIFEST_FILE), &json)?;
        Ok(())
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.to_string(), value);
    }

    pub fn param(&mut self, name: &str, value: impl Serialize) -> Result<()> {
        self.manifest.params.insert(name.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Records an output path relative to the run directory when possible.
    pub fn artifact(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.dir).unwrap_or(path).to_path_buf();
        self.manifest.artifacts.push(rel);
    }

    pub fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f();
        self.manifest.timings_s.insert(phase.to_string(), t0.elapsed().as_secs_f64());
        out
    }

    pub fn finish(mut self, outcome: &Result<()>) -> Result<()> {
        self.manifest.timings_s.insert("total".into(), self.clock.elapsed().as_secs_f64());
        self.manifest.finished_unix = Some(now());
        match outcome {
            Ok(()) => self.manifest.status = RunStatus::Complete,
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.error = Some(format!("{e:#}"));
            }
        }
        self.write()
    }
}

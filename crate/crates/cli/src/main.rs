mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use fewshot::pretext::TaskKind;

use crate::commands::EvalSources;
use crate::config::FlatConfig;

/// Bad invocation or configuration; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(
    name = "fewshot",
    version,
    about = "Train representations and evaluate them on few-shot episodes",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set trainer.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run directory for outputs and the run manifest.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Threads used for episodic evaluation.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<FlatConfig> {
        let mut cfg = match &self.config {
            Some(p) => FlatConfig::load(p)?,
            None => FlatConfig::default(),
        };
        for pair in &self.sets {
            cfg.set_pair(pair)?;
        }
        cfg.set_opt("output", self.output.as_ref().map(|p| p.display().to_string()))?;
        cfg.set_opt("seed", self.seed)?;
        cfg.set_opt("workers", self.workers)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Supervised, self-supervised or multi-task pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// supervised, rot, loc4, loc5, contrast, or a task set such as cls+rot.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// ANIL meta-training.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_way: Option<usize>,
        #[arg(long)]
        k_shot: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Writes eval-mode features of whole partitions to an embedding cache.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated partitions.
        #[arg(long)]
        partition: Option<String>,
    },
    /// Episodic linear-probe evaluation.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Embedding cache of the episode partitions.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Embedding cache of the train partition, for auxiliary rows.
        #[arg(long)]
        aux_cache: Option<PathBuf>,
        /// Split file written by pretrain; regenerated from the seed if absent.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Row label in report tables.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        n_way: Option<String>,
        #[arg(long)]
        k_shot: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
        /// none, random:N or per_class:N.
        #[arg(long)]
        aux: Option<String>,
        /// none, rot4 or loc5.
        #[arg(long)]
        vote: Option<String>,
        #[arg(long)]
        support_copies: Option<usize>,
        #[arg(long)]
        partition: Option<String>,
    },
    /// Holdout accuracy of fresh task heads on frozen features.
    CrossEval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, default_value = "cls,rot,loc4", value_delimiter = ',')]
        tasks: Vec<TaskKind>,
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Collects eval reports into one table.
    Report {
        #[command(flatten)]
        common: Common,
        /// reports.json files or eval run directories.
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
    },
    /// Renders the synthetic shapes dataset to PNG files plus a manifest.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, method, epochs } => {
            let mut cfg = common.resolve()?;
            cfg.set_opt("method", method)?;
            cfg.set_opt("trainer.epochs", epochs)?;
            commands::pretrain(&cfg)
        }
        Command::MetaTrain {
            common,
            n_way,
            k_shot,
            epochs,
        } => {
            let mut cfg = common.resolve()?;
            cfg.set_opt("meta.n_way", n_way)?;
            cfg.set_opt("meta.k_shot", k_shot)?;
            cfg.set_opt("meta.epochs", epochs)?;
            commands::meta_train_cmd(&cfg)
        }
        Command::Embed {
            common,
            checkpoint,
            partition,
        } => {
            let mut cfg = common.resolve()?;
            cfg.set_opt("eval.partitions", partition)?;
            commands::embed_cmd(&cfg, &checkpoint)
        }
        Command::Eval {
            common,
            checkpoint,
            cache,
            aux_cache,
            split,
            name,
            n_way,
            k_shot,
            trials,
            episodes,
            queries,
            aux,
            vote,
            support_copies,
            partition,
        } => {
            let mut cfg = common.resolve()?;
            cfg.set_opt("eval.n_way", n_way)?;
            cfg.set_opt("eval.k_shot", k_shot)?;
            cfg.set_opt("eval.trials", trials)?;
            cfg.set_opt("eval.episodes", episodes)?;
            cfg.set_opt("eval.q_per_class", queries)?;
            cfg.set_opt("eval.aux", aux)?;
            cfg.set_opt("eval.vote", vote)?;
            cfg.set_opt("eval.support_copies", support_copies)?;
            cfg.set_opt("eval.partitions", partition)?;
            let src = EvalSources {
                checkpoint: checkpoint.as_deref(),
                cache: cache.as_deref(),
                aux_cache: aux_cache.as_deref(),
                split: split.as_deref(),
                name: name.as_deref(),
            };
            commands::eval_cmd(&cfg, &src)
        }
        Command::CrossEval {
            common,
            checkpoint,
            tasks,
            split,
        } => commands::cross_eval_cmd(&common.resolve()?, &checkpoint, &tasks, split.as_deref()),
        Command::Report { common, input } => commands::report_cmd(&common.resolve()?, &input),
        Command::SynthData { common } => commands::synth_data_cmd(&common.resolve()?),
    }
}

/// 0 success, 2 usage or configuration, 3 incompatible options, 4 runtime.
fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<fewshot::Error>() {
        Some(fewshot::Error::Config(_) | fewshot::Error::UnsupportedArch(_)) => 2,
        Some(fewshot::Error::IncompatibleScheme(_) | fewshot::Error::IncompatibleTasks(_)) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Command-line orchestration of the crashground pipeline.

pub mod config;
pub mod labels;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{PipelineConfig, UsageError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_STAGE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "crashground", version, about = "Crash-grounded adversarial scenario generation pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Pipeline config (JSON); defaults to the bundled config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root; relative paths in the config resolve against it.
    #[arg(long, global = true)]
    pub root: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set perturb.selection.n_knn=8`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker threads for scenario-level parallelism.
    #[arg(long, default_value_t = 1, global = true)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the corpus, fine-tuning and base scenario sets.
    Synth,
    /// Label corpus agents safe / neutral / unsafe.
    Label,
    /// Pre-train the embedding model.
    Train,
    /// Fine-tune a low-rank adapter on the crash-rich set.
    Finetune,
    /// Build the unsafe embedding cache.
    Cache,
    /// Perturb the base scenarios and record the rollouts.
    Perturb(PerturbArgs),
    /// Roll out the unmodified base scenarios.
    Rollout,
    /// Compute the evaluation report and tables.
    Eval,
    /// Write corpus behavior embeddings as CSV.
    ExportEmbeddings,
    /// Run every stage in order.
    Pipeline,
}

/// Shorthands for perturbation overrides.
#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub scenarios: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Adapter file; implies fine-tuning is enabled.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub n_cand: Option<usize>,
    #[arg(long)]
    pub n_int: Option<usize>,
    #[arg(long)]
    pub n_knn: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    /// `openloop` or `reactive`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl PerturbArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let path = |k: &str, p: &Option<PathBuf>, o: &mut Vec<String>| {
            if let Some(p) = p {
                o.push(format!("paths.{k}={}", serde_json::Value::String(p.display().to_string())));
            }
        };
        path("base", &self.scenarios, &mut o);
        path("model", &self.model, &mut o);
        path("adapter", &self.adapter, &mut o);
        path("cache", &self.cache, &mut o);
        path("rollouts", &self.out, &mut o);
        if self.adapter.is_some() {
            o.push("finetune.enabled=true".into());
        }
        for (k, v) in [
            ("n_cand", self.n_cand),
            ("n_int", self.n_int),
            ("n_knn", self.n_knn),
            ("k_max", self.k_max),
        ] {
            if let Some(v) = v {
                o.push(format!("perturb.selection.{k}={v}"));
            }
        }
        if let Some(m) = &self.mode {
            o.push(format!("perturb.mode={}", serde_json::Value::String(m.clone())));
        }
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        o
    }
}

impl Command {
    pub fn stage_name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Label => "label",
            Command::Train => "train",
            Command::Finetune => "finetune",
            Command::Cache => "cache",
            Command::Perturb(_) => "perturb",
            Command::Rollout => "rollout",
            Command::Eval => "eval",
            Command::ExportEmbeddings => "export-embeddings",
            Command::Pipeline => "pipeline",
        }
    }
}

/// Resolves the effective configuration of a parsed command line.
pub fn resolve_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut overrides = cli.common.overrides.clone();
    if let Command::Perturb(p) = &cli.command {
        overrides.extend(p.overrides());
    }
    let mut cfg = PipelineConfig::load(cli.common.config.as_deref(), &overrides)?;
    if let Some(root) = &cli.common.root {
        cfg.paths.root = root.clone();
    }
    Ok(cfg)
}

fn run_parsed(cli: &Cli) -> i32 {
    if cli.common.jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return EXIT_USAGE;
    }
    let cfg = match resolve_config(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return if e.is::<UsageError>() { EXIT_USAGE } else { EXIT_STAGE };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.common.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_STAGE;
        }
    };
    let stages: Vec<&str> = match &cli.command {
        Command::Pipeline => stages::STAGES.to_vec(),
        c => vec![c.stage_name()],
    };
    pool.install(|| {
        for stage in stages {
            if let Err(e) = stages::run_stage(stage, &cfg) {
                eprintln!("error: stage `{stage}` failed: {e:#}");
                return EXIT_STAGE;
            }
        }
        EXIT_OK
    })
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run_parsed(&cli),
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}

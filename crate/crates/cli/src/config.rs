//! Pipeline configuration: one JSON document, dotted-path overrides and the
//! provenance hash stamped into every output.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crashground::embed::{ModelDims, TrainHyper};
use crashground::io::sha256_hex;
use crashground::metrics::{InteractionConfig, ProbeConfig, DEFAULT_N_KM};
use crashground::rollout::{EgoPolicy, PerturbConfig};
use crashground::safety::{AgentSelection, HeuristicConfig};
use crashground::scenario::{Provenance, SynthConfig};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "CRASHGROUND_SEED";

/// The bundled end-to-end configuration.
pub const BUNDLED_PIPELINE: &str = include_str!("../configs/pipeline.json");

/// Output and input locations; relative paths resolve against `root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub root: PathBuf,
    pub corpus: PathBuf,
    pub finetune_corpus: PathBuf,
    pub base: PathBuf,
    pub labels: PathBuf,
    pub finetune_labels: PathBuf,
    pub model: PathBuf,
    pub adapter: PathBuf,
    pub cache: PathBuf,
    pub rollouts: PathBuf,
    pub baseline_rollouts: PathBuf,
    pub report: PathBuf,
    /// Directory receiving the CSV tables of `eval`.
    pub tables: PathBuf,
    pub embeddings: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            root: PathBuf::from("."),
            corpus: "corpus.jsonl".into(),
            finetune_corpus: "finetune_corpus.jsonl".into(),
            base: "base.jsonl".into(),
            labels: "labels.jsonl".into(),
            finetune_labels: "finetune_labels.jsonl".into(),
            model: "model.ckpt".into(),
            adapter: "model.adapter".into(),
            cache: "unsafe.cache".into(),
            rollouts: "rollouts.jsonl".into(),
            baseline_rollouts: "baseline_rollouts.jsonl".into(),
            report: "report.json".into(),
            tables: "tables".into(),
            embeddings: "embeddings.csv".into(),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

/// Scenario sets generated by `synth`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSets {
    /// Labeled pre-training corpus; also the source of the unsafe cache.
    pub corpus: SynthConfig,
    /// Crash-rich set for adapter fine-tuning.
    pub finetune: SynthConfig,
    /// Base scenarios to perturb.
    pub base: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Labeling {
    pub heuristic: HeuristicConfig,
    /// Step from which the passive counterfactual is extrapolated.
    pub t_cf: usize,
    pub agents: AgentSelection,
}

impl Default for Labeling {
    fn default() -> Self {
        Self {
            heuristic: HeuristicConfig::default(),
            t_cf: 20,
            agents: AgentSelection::Adversary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Finetune {
    /// When false, `finetune` is skipped and later stages use the base
    /// projection.
    pub enabled: bool,
    pub rank: usize,
    pub hyper: TrainHyper,
    /// Restart prototypes from the fine-tuning data instead of carrying
    /// them over from pre-training.
    pub reinit_prototypes: bool,
}

impl Default for Finetune {
    fn default() -> Self {
        Self {
            enabled: true,
            rank: 8,
            hyper: TrainHyper {
                lr: crashground::lora::DEFAULT_FINETUNE_LR,
                epochs: 20,
                ..TrainHyper::default()
            },
            reinit_prototypes: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub interaction: InteractionConfig,
    pub probe: ProbeConfig,
    pub n_km: Vec<usize>,
    /// Corpus rows with `index % 10` below this train the probe; the rest test it.
    pub probe_train_tenths: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interaction: InteractionConfig::default(),
            probe: ProbeConfig::default(),
            n_km: DEFAULT_N_KM.to_vec(),
            probe_train_tenths: 7,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthSets,
    pub labeling: Labeling,
    pub model: ModelDims,
    pub train: TrainHyper,
    pub finetune: Finetune,
    pub perturb: PerturbConfig,
    pub ego: EgoPolicy,
    pub eval: EvalConfig,
}

/// Error in the command line or the configuration rather than in a stage.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Parses `value` as JSON, falling back to a plain string.
fn parse_value(value: &str) -> Value {
    serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()))
}

/// Sets `key` (dot-separated) in `doc`. Every segment but the last must
/// already exist.
pub fn apply_override(doc: &mut Value, key: &str, value: &str) -> Result<()> {
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        bail!(UsageError(format!("malformed override key `{key}`")));
    }
    let (last, parents) = segments.split_last().expect("nonempty");
    let mut node = doc;
    for (i, seg) in parents.iter().enumerate() {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(*seg))
            .ok_or_else(|| UsageError(format!("unknown config key `{}`", segments[..=i].join("."))))?;
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| UsageError(format!("config key `{key}` does not name a field")))?;
    obj.insert(last.to_string(), parse_value(value));
    Ok(())
}

impl PipelineConfig {
    /// Reads `path` (or the bundled config), applies `KEY=VALUE` overrides
    /// and the seed environment override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => {
                if !p.exists() {
                    bail!(UsageError(format!("config file not found: {}", p.display())));
                }
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
            }
            None => BUNDLED_PIPELINE.to_string(),
        };
        let parsed: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| UsageError(format!("invalid config: {e}")))?;
        // round-trip through the full document so every field is addressable
        let mut doc = serde_json::to_value(&parsed).expect("config serializes");
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| UsageError(format!("override `{o}` is not KEY=VALUE")))?;
            apply_override(&mut doc, k, v)?;
        }
        let mut cfg: PipelineConfig =
            serde_json::from_value(doc).map_err(|e| UsageError(format!("invalid config after overrides: {e}")))?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .parse()
                .map_err(|_| UsageError(format!("{SEED_ENV} must be an unsigned integer, got `{s}`")))?;
        }
        Ok(cfg)
    }

    /// SHA-256 of the configuration with the output root blanked, so runs
    /// into different directories share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.root = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash(),
            seed: self.seed,
        }
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        self.paths.resolve(p)
    }
}

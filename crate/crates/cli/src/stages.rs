//! Pipeline stages. Each reads its inputs from the configured paths and
//! writes new files atomically; no stage modifies an input.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crashground::adversary::{behavior_vector, build_unsafe_cache, load_cache, save_cache, UnsafeCache};
use crashground::contrastive::PrototypeSet;
use crashground::embed::{save_checkpoint, train, Checkpoint, EmbeddingModel, TrainSample};
use crashground::io::{sha256_hex, write_atomic};
use crashground::lora::{finetune, init_adapter, save_adapter, Adapter, AdapterFile};
use crashground::metrics::{clustering_metrics, evaluate_rollouts, linear_probe, EvalReport};
use crashground::rollout::{
    load_rollouts, perturb_corpus, save_rollouts, simulate, AdvBehavior, RolloutRecord, RolloutResult,
};
use crashground::safety::{label_corpus, LabeledAgent, SafetyLabel};
use crashground::scenario::{load_scenarios, save_scenarios, synth_generate, Scenario};

use crate::config::PipelineConfig;
use crate::labels::{load_labels, save_labels};

/// Stage names in pipeline order.
pub const STAGES: [&str; 9] = [
    "synth",
    "label",
    "train",
    "finetune",
    "cache",
    "perturb",
    "rollout",
    "eval",
    "export-embeddings",
];

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("input file not found: {}", path.display());
    }
    Ok(())
}

fn read_scenarios(path: &Path) -> Result<Vec<Scenario>> {
    require(path)?;
    load_scenarios(path).with_context(|| format!("reading scenarios from {}", path.display()))
}

fn read_labels(path: &Path) -> Result<(Vec<LabeledAgent>, crashground::safety::DeltaCalibration)> {
    require(path)?;
    load_labels(path).with_context(|| format!("reading labels from {}", path.display()))
}

/// Checkpoint and the SHA-256 of its bytes.
fn read_model(path: &Path) -> Result<(Checkpoint, String)> {
    require(path)?;
    let bytes = std::fs::read(path)?;
    let ckpt = Checkpoint::from_bytes(&bytes).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok((ckpt, sha256_hex(&bytes)))
}

/// The fine-tuned adapter when fine-tuning is enabled, verified against
/// the checkpoint it was trained on.
fn read_adapter(cfg: &PipelineConfig, base_sha256: &str) -> Result<Option<Adapter>> {
    if !cfg.finetune.enabled {
        return Ok(None);
    }
    let path = cfg.path(&cfg.paths.adapter);
    require(&path)?;
    let file = crashground::lora::load_adapter(&path).with_context(|| format!("reading adapter {}", path.display()))?;
    if file.base_sha256 != base_sha256 {
        bail!(
            "adapter {} was trained on checkpoint {}, found {base_sha256}",
            path.display(),
            file.base_sha256
        );
    }
    Ok(Some(file.adapter))
}

fn read_cache(path: &Path) -> Result<UnsafeCache> {
    require(path)?;
    load_cache(path).with_context(|| format!("reading cache {}", path.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(())
}

fn samples_for(cfg: &PipelineConfig, scenarios: &[Scenario], labels: &[LabeledAgent]) -> Result<Vec<TrainSample>> {
    labels
        .par_iter()
        .map(|l| {
            let s = scenarios
                .get(l.scenario_index)
                .with_context(|| format!("label refers to missing scenario {}", l.scenario_index))?;
            Ok(TrainSample::new(&cfg.model, s, l.agent, l.label)?)
        })
        .collect()
}

fn provenance_line(cfg: &PipelineConfig) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), cfg.seed)
}

pub fn synth(cfg: &PipelineConfig) -> Result<()> {
    let prov = cfg.provenance();
    let sets = [
        (&cfg.synth.corpus, &cfg.paths.corpus, cfg.seed),
        (&cfg.synth.finetune, &cfg.paths.finetune_corpus, cfg.seed.wrapping_add(1)),
        (&cfg.synth.base, &cfg.paths.base, cfg.seed.wrapping_add(2)),
    ];
    for (sc, path, seed) in sets {
        let path = cfg.path(path);
        create_parent(&path)?;
        let scenarios = synth_generate(sc, seed)?;
        save_scenarios(&path, &scenarios, Some(&prov))?;
    }
    Ok(())
}

/// Labels the corpus with a calibrated threshold and the fine-tuning set
/// with the corpus threshold, so both share one class boundary.
pub fn label(cfg: &PipelineConfig) -> Result<()> {
    let prov = cfg.provenance();
    let l = &cfg.labeling;
    let corpus = read_scenarios(&cfg.path(&cfg.paths.corpus))?;
    let (labels, cal) = label_corpus(&corpus, &l.heuristic, l.t_cf, l.agents)?;
    let out = cfg.path(&cfg.paths.labels);
    create_parent(&out)?;
    save_labels(&out, &labels, &cal, Some(&prov))?;

    if cfg.finetune.enabled {
        let ft = read_scenarios(&cfg.path(&cfg.paths.finetune_corpus))?;
        let (mut ft_labels, _) = label_corpus(&ft, &l.heuristic, l.t_cf, l.agents)?;
        for la in &mut ft_labels {
            la.label = SafetyLabel::from_diff(la.scores.diff, cal.delta);
        }
        save_labels(&cfg.path(&cfg.paths.finetune_labels), &ft_labels, &cal, Some(&prov))?;
    }
    Ok(())
}

pub fn train_stage(cfg: &PipelineConfig) -> Result<()> {
    let corpus = read_scenarios(&cfg.path(&cfg.paths.corpus))?;
    let (labels, _) = read_labels(&cfg.path(&cfg.paths.labels))?;
    let samples = samples_for(cfg, &corpus, &labels)?;
    let mut model = EmbeddingModel::new(cfg.model, cfg.seed)?;
    let hyper = crashground::embed::TrainHyper {
        seed: cfg.seed,
        ..cfg.train
    };
    let mut protos = PrototypeSet::new(cfg.model.d2, hyper.eta);
    train(&mut model, &samples, &mut protos, &hyper)?;
    let out = cfg.path(&cfg.paths.model);
    create_parent(&out)?;
    save_checkpoint(
        &out,
        &Checkpoint {
            model,
            hyper,
            seed: cfg.seed,
            prototypes: Some(protos),
            config_hash: Some(cfg.hash()),
        },
    )?;
    Ok(())
}

pub fn finetune_stage(cfg: &PipelineConfig) -> Result<()> {
    if !cfg.finetune.enabled {
        return Ok(());
    }
    let (ckpt, base_sha256) = read_model(&cfg.path(&cfg.paths.model))?;
    let scenarios = read_scenarios(&cfg.path(&cfg.paths.finetune_corpus))?;
    let (labels, _) = read_labels(&cfg.path(&cfg.paths.finetune_labels))?;
    let samples = samples_for(cfg, &scenarios, &labels)?;
    let d = ckpt.model.dims;
    let mut adapter = init_adapter(d.d1, d.d2, cfg.finetune.rank, cfg.seed)?;
    let hyper = crashground::embed::TrainHyper {
        seed: cfg.seed,
        ..cfg.finetune.hyper
    };
    let mut protos = ckpt.prototypes.clone().unwrap_or_else(|| PrototypeSet::new(d.d2, hyper.eta));
    finetune(
        &ckpt.model,
        &mut adapter,
        &samples,
        &mut protos,
        &hyper,
        cfg.finetune.reinit_prototypes,
    )?;
    let out = cfg.path(&cfg.paths.adapter);
    create_parent(&out)?;
    save_adapter(
        &out,
        &AdapterFile {
            adapter,
            base_sha256,
            prototypes: Some(protos),
            provenance: Some(cfg.provenance()),
        },
    )?;
    Ok(())
}

pub fn cache_stage(cfg: &PipelineConfig) -> Result<()> {
    let (ckpt, sha) = read_model(&cfg.path(&cfg.paths.model))?;
    let adapter = read_adapter(cfg, &sha)?;
    let corpus = read_scenarios(&cfg.path(&cfg.paths.corpus))?;
    let (labels, _) = read_labels(&cfg.path(&cfg.paths.labels))?;
    let cache = build_unsafe_cache(&ckpt.model, adapter.as_ref(), &corpus, &labels)?.with_provenance(cfg.provenance());
    let out = cfg.path(&cfg.paths.cache);
    create_parent(&out)?;
    save_cache(&out, &cache)?;
    Ok(())
}

pub fn perturb(cfg: &PipelineConfig) -> Result<()> {
    let (ckpt, sha) = read_model(&cfg.path(&cfg.paths.model))?;
    let adapter = read_adapter(cfg, &sha)?;
    let cache = read_cache(&cfg.path(&cfg.paths.cache))?;
    let base = read_scenarios(&cfg.path(&cfg.paths.base))?;
    let rounds = perturb_corpus(&base, &ckpt.model, adapter.as_ref(), &cache, &cfg.ego, &cfg.perturb, cfg.seed)?;
    let records: Vec<RolloutRecord> = rounds
        .into_iter()
        .enumerate()
        .flat_map(|(i, rs)| {
            rs.into_iter().map(move |r| RolloutRecord {
                scenario_index: i,
                round: r.round,
                chosen: Some(r.chosen),
                d_adv: r.d_adv,
                result: r.result,
            })
        })
        .collect();
    let out = cfg.path(&cfg.paths.rollouts);
    create_parent(&out)?;
    save_rollouts(&out, &records, Some(&cfg.provenance()))?;
    Ok(())
}

/// Rollouts of the unmodified base scenarios with the logged adversary.
pub fn rollout(cfg: &PipelineConfig) -> Result<()> {
    let base = read_scenarios(&cfg.path(&cfg.paths.base))?;
    let t_h = cfg.perturb.selection.history;
    let records = base
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let adv = AdvBehavior::OpenLoop(s.trajectories[s.adv_id].clone());
            Ok(RolloutRecord {
                scenario_index: i,
                round: 0,
                chosen: None,
                d_adv: None,
                result: simulate(s, &cfg.ego, &adv, t_h)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = cfg.path(&cfg.paths.baseline_rollouts);
    create_parent(&out)?;
    save_rollouts(&out, &records, Some(&cfg.provenance()))?;
    Ok(())
}

/// Evaluation output: rollout metrics of the perturbed and unperturbed
/// runs plus embedding structure on the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub seed: u64,
    pub perturbed: EvalReport,
    pub baseline: EvalReport,
}

/// Corpus embeddings in label order, with the model's adapter if any.
fn corpus_embeddings(cfg: &PipelineConfig) -> Result<(Vec<LabeledAgent>, Vec<Vec<f64>>)> {
    let (ckpt, sha) = read_model(&cfg.path(&cfg.paths.model))?;
    let adapter = read_adapter(cfg, &sha)?;
    let corpus = read_scenarios(&cfg.path(&cfg.paths.corpus))?;
    let (labels, _) = read_labels(&cfg.path(&cfg.paths.labels))?;
    let v = labels
        .par_iter()
        .map(|l| {
            let s = corpus
                .get(l.scenario_index)
                .with_context(|| format!("label refers to missing scenario {}", l.scenario_index))?;
            Ok(behavior_vector(&ckpt.model, adapter.as_ref(), s, l.agent)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((labels, v))
}

fn results_of(path: &Path) -> Result<Vec<RolloutResult>> {
    require(path)?;
    Ok(load_rollouts(path)
        .with_context(|| format!("reading rollouts {}", path.display()))?
        .into_iter()
        .map(|r| r.result)
        .collect())
}

pub fn eval(cfg: &PipelineConfig) -> Result<PipelineReport> {
    let base = read_scenarios(&cfg.path(&cfg.paths.base))?;
    let ic = &cfg.eval.interaction;
    let mut perturbed = evaluate_rollouts(&results_of(&cfg.path(&cfg.paths.rollouts))?, &base, ic)?;
    let baseline = evaluate_rollouts(&results_of(&cfg.path(&cfg.paths.baseline_rollouts))?, &base, ic)?;

    let (labels, v) = corpus_embeddings(cfg)?;
    let y: Vec<SafetyLabel> = labels.iter().map(|l| l.label).collect();
    perturbed.clustering = Some(clustering_metrics(&v, &y, &cfg.eval.n_km)?);
    let split = cfg.eval.probe_train_tenths;
    let (mut tx, mut ty, mut ex, mut ey) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, (vi, yi)) in v.into_iter().zip(y).enumerate() {
        if i % 10 < split {
            tx.push(vi);
            ty.push(yi);
        } else {
            ex.push(vi);
            ey.push(yi);
        }
    }
    perturbed.probe_accuracy = Some(linear_probe(&tx, &ty, &ex, &ey, &cfg.eval.probe)?);

    let report = PipelineReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        perturbed,
        baseline,
    };
    let out = cfg.path(&cfg.paths.report);
    create_parent(&out)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_atomic(&out, json.as_bytes())?;
    write_tables(cfg, &report)?;
    Ok(report)
}

fn write_tables(cfg: &PipelineConfig, r: &PipelineReport) -> Result<()> {
    let dir = cfg.path(&cfg.paths.tables);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let runs = [("perturbed", &r.perturbed), ("baseline", &r.baseline)];
    let head = provenance_line(cfg);

    let mut outcomes = head.clone();
    outcomes.push_str("run,rollouts,success,crash,out_of_road,timeout,yaw_wd,acc_wd\n");
    for (name, e) in runs {
        let _ = writeln!(
            outcomes,
            "{name},{},{},{},{},{},{},{}",
            e.rollouts, e.rates.success, e.rates.crash, e.rates.out_of_road, e.rates.timeout, e.yaw_wd, e.acc_wd
        );
    }
    let mut causality = head.clone();
    causality.push_str("run,class,count\n");
    let mut geometry = head.clone();
    geometry.push_str("run,class,count\n");
    for (name, e) in runs {
        for (k, n) in &e.causality {
            let _ = writeln!(causality, "{name},{k},{n}");
        }
        for (k, n) in &e.geometry {
            let _ = writeln!(geometry, "{name},{k},{n}");
        }
    }
    let mut embedding = head;
    embedding.push_str("silhouette,davies_bouldin,probe_accuracy\n");
    if let (Some(c), Some(p)) = (r.perturbed.clustering, r.perturbed.probe_accuracy) {
        let _ = writeln!(embedding, "{},{},{p}", c.silhouette, c.davies_bouldin);
    }
    for (file, text) in [
        ("outcomes.csv", outcomes),
        ("causality.csv", causality),
        ("geometry.csv", geometry),
        ("embedding.csv", embedding),
    ] {
        write_atomic(&dir.join(file), text.as_bytes())?;
    }
    Ok(())
}

/// Writes one CSV row per labeled corpus agent with its behavior vector.
pub fn export_embeddings(cfg: &PipelineConfig) -> Result<PathBuf> {
    let (labels, v) = corpus_embeddings(cfg)?;
    let mut out = provenance_line(cfg);
    out.push_str("scenario_id,scenario_index,agent,label");
    for k in 0..v.first().map_or(0, Vec::len) {
        let _ = write!(out, ",v{k}");
    }
    out.push('\n');
    for (l, vi) in labels.iter().zip(&v) {
        let _ = write!(out, "{},{},{},{}", l.scenario_id, l.scenario_index, l.agent, l.label);
        for x in vi {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    let path = cfg.path(&cfg.paths.embeddings);
    create_parent(&path)?;
    write_atomic(&path, out.as_bytes())?;
    Ok(path)
}

/// Runs one stage by name.
pub fn run_stage(name: &str, cfg: &PipelineConfig) -> Result<()> {
    match name {
        "synth" => synth(cfg),
        "label" => label(cfg),
        "train" => train_stage(cfg),
        "finetune" => finetune_stage(cfg),
        "cache" => cache_stage(cfg),
        "perturb" => perturb(cfg),
        "rollout" => rollout(cfg),
        "eval" => eval(cfg).map(|_| ()),
        "export-embeddings" => export_embeddings(cfg).map(|_| ()),
        other => bail!("unknown stage `{other}`"),
    }
}

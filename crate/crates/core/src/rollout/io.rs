//! JSON-lines rollout files: a header line, then one record per rollout
//! with the realized scenario in the scenario file schema.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sim::{CollisionInfo, Outcome, RolloutResult};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::scenario::io::{from_wire, to_wire, Provenance, WireScenario};

pub const ROLLOUT_FORMAT: &str = "crashground-rollouts";
const ROLLOUT_VERSION: u32 = 1;

/// A rollout with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    /// Position of the base scenario in its corpus.
    pub scenario_index: usize,
    pub round: usize,
    /// Candidate index chosen for the adversary, if any selection ran.
    pub chosen: Option<usize>,
    pub d_adv: Option<f64>,
    pub result: RolloutResult,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    scenario_index: usize,
    round: usize,
    chosen: Option<usize>,
    d_adv: Option<f64>,
    outcome: Outcome,
    min_ego_adv_distance: f64,
    collision: Option<CollisionInfo>,
    scenario: WireScenario,
}

pub fn rollouts_to_jsonl(records: &[RolloutRecord], provenance: Option<&Provenance>) -> String {
    let header = Header {
        format: ROLLOUT_FORMAT.into(),
        version: ROLLOUT_VERSION,
        config_hash: provenance.map(|p| p.config_hash.clone()),
        seed: provenance.map(|p| p.seed),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in records {
        let wire = WireRecord {
            scenario_index: r.scenario_index,
            round: r.round,
            chosen: r.chosen,
            d_adv: r.d_adv,
            outcome: r.result.outcome,
            min_ego_adv_distance: r.result.min_ego_adv_distance,
            collision: r.result.collision,
            scenario: to_wire(&r.result.realized),
        };
        out.push_str(&serde_json::to_string(&wire).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn rollouts_from_jsonl(text: &str) -> Result<Vec<RolloutRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| Error::Format("empty rollout file".into()))?;
    let header: Header = serde_json::from_str(first).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.format != ROLLOUT_FORMAT || header.version != ROLLOUT_VERSION {
        return Err(Error::Format(format!(
            "unsupported rollout file `{}` version {}",
            header.format, header.version
        )));
    }
    lines
        .map(|(i, l)| {
            let w: WireRecord = serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if w.collision.is_some() != (w.outcome == Outcome::Crash) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "collision info must be present exactly for crashes".into(),
                });
            }
            Ok(RolloutRecord {
                scenario_index: w.scenario_index,
                round: w.round,
                chosen: w.chosen,
                d_adv: w.d_adv,
                result: RolloutResult {
                    realized: from_wire(w.scenario)?,
                    outcome: w.outcome,
                    min_ego_adv_distance: w.min_ego_adv_distance,
                    collision: w.collision,
                },
            })
        })
        .collect()
}

pub fn save_rollouts(path: &Path, records: &[RolloutRecord], provenance: Option<&Provenance>) -> Result<()> {
    write_atomic(path, rollouts_to_jsonl(records, provenance).as_bytes())
}

pub fn load_rollouts(path: &Path) -> Result<Vec<RolloutRecord>> {
    rollouts_from_jsonl(&std::fs::read_to_string(path)?)
}

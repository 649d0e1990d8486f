//! JSON-lines label files: a header with the calibration, then one
//! labeled agent per line.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crashground::io::write_atomic;
use crashground::safety::{DeltaCalibration, LabeledAgent};
use crashground::scenario::Provenance;

pub const LABEL_FORMAT: &str = "crashground-labels";
const LABEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    calibration: DeltaCalibration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

pub fn labels_to_jsonl(labels: &[LabeledAgent], cal: &DeltaCalibration, provenance: Option<&Provenance>) -> String {
    let header = Header {
        format: LABEL_FORMAT.into(),
        version: LABEL_VERSION,
        calibration: *cal,
        config_hash: provenance.map(|p| p.config_hash.clone()),
        seed: provenance.map(|p| p.seed),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for l in labels {
        out.push_str(&serde_json::to_string(l).expect("label serializes"));
        out.push('\n');
    }
    out
}

pub fn labels_from_jsonl(text: &str) -> Result<(Vec<LabeledAgent>, DeltaCalibration)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().context("empty label file")?;
    let header: Header = serde_json::from_str(first).context("label header")?;
    if header.format != LABEL_FORMAT || header.version != LABEL_VERSION {
        bail!("unsupported label file `{}` version {}", header.format, header.version);
    }
    let labels = lines
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("label line {}", i + 1)))
        .collect::<Result<Vec<LabeledAgent>>>()?;
    Ok((labels, header.calibration))
}

pub fn save_labels(
    path: &Path,
    labels: &[LabeledAgent],
    cal: &DeltaCalibration,
    provenance: Option<&Provenance>,
) -> Result<()> {
    Ok(write_atomic(path, labels_to_jsonl(labels, cal, provenance).as_bytes())?)
}

pub fn load_labels(path: &Path) -> Result<(Vec<LabeledAgent>, DeltaCalibration)> {
    labels_from_jsonl(&std::fs::read_to_string(path)?)
}

//! Model checkpoints: one JSON header line followed by the parameters as
//! little-endian f64 in [`Group::ALL`] order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingModel, Group, ModelDims, TrainHyper};
use crate::contrastive::PrototypeSet;
use crate::error::{Error, Result};
use crate::io::{push_f64s, read_f64s, split_header, write_atomic};

pub const CHECKPOINT_FORMAT: &str = "crashground-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EmbeddingModel,
    pub hyper: TrainHyper,
    pub seed: u64,
    pub prototypes: Option<PrototypeSet>,
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct GroupEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dims: ModelDims,
    hyper: TrainHyper,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    groups: Vec<GroupEntry>,
    #[serde(default)]
    prototypes: Option<PrototypeSet>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.model.dims;
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims,
            hyper: self.hyper,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            groups: Group::ALL
                .iter()
                .map(|g| {
                    let (rows, cols) = g.shape(&dims);
                    GroupEntry {
                        name: g.name().into(),
                        rows,
                        cols,
                    }
                })
                .collect(),
            prototypes: self.prototypes.clone(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        push_f64s(&mut out, &self.model.params);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (htext, blob) = split_header(bytes)?;
        let h: Header = serde_json::from_str(htext).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if h.format != CHECKPOINT_FORMAT || h.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint `{}` version {}",
                h.format, h.version
            )));
        }
        let expected: Vec<(String, usize, usize)> = Group::ALL
            .iter()
            .map(|g| {
                let (r, c) = g.shape(&h.dims);
                (g.name().to_string(), r, c)
            })
            .collect();
        let found: Vec<(String, usize, usize)> = h.groups.into_iter().map(|g| (g.name, g.rows, g.cols)).collect();
        if expected != found {
            return Err(Error::Format("checkpoint parameter groups do not match the model layout".into()));
        }
        let model = EmbeddingModel::from_params(h.dims, read_f64s(blob)?)?;
        Ok(Self {
            model,
            hyper: h.hyper,
            seed: h.seed,
            prototypes: h.prototypes,
            config_hash: h.config_hash,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let model = EmbeddingModel::new(ModelDims::default(), 11).unwrap();
        let mut protos = PrototypeSet::new(16, 0.8);
        protos.update(&[vec![0.25; 16]], &[crate::safety::SafetyLabel::Safe], 10.0).unwrap();
        let ck = Checkpoint {
            model,
            hyper: TrainHyper::default(),
            seed: 7,
            prototypes: Some(protos),
            config_hash: Some("abc".into()),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn truncated_blob_rejected() {
        let ck = Checkpoint {
            model: EmbeddingModel::zeros(ModelDims::default()).unwrap(),
            hyper: TrainHyper::default(),
            seed: 0,
            prototypes: None,
            config_hash: None,
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"{}").is_err());
    }
}

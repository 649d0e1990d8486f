//! Low-rank adapter on the projection path: `v = normalize(W_p z + b_p + (zA)B)`
//! with the whole base model frozen.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{protonce_grad, PrototypeSet};
use crate::embed::{check_z, encode_input, normalize_projection, EmbeddingModel, TrainHyper, TrainSample};
use crate::error::{Error, Result};
use crate::io::{push_f64s, read_f64s, sha256_hex, split_header, write_atomic};
use crate::linalg::{dot, norm};
use crate::safety::SafetyLabel;
use crate::scenario::Provenance;

pub const ADAPTER_FORMAT: &str = "crashground-adapter";
const ADAPTER_VERSION: u32 = 1;
pub const DEFAULT_FINETUNE_LR: f64 = 1e-3;

/// Rank used when none is requested.
pub fn default_rank(d2: usize) -> usize {
    d2.min(8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub d1: usize,
    pub d2: usize,
    pub rank: usize,
    /// Row-major d1 × rank down-projection.
    pub a: Vec<f64>,
    /// Row-major rank × d2 up-projection; zero at initialization.
    pub b: Vec<f64>,
}

pub fn init_adapter(d1: usize, d2: usize, rank: usize, seed: u64) -> Result<Adapter> {
    if d1 == 0 || d2 == 0 {
        return Err(Error::Config(format!("adapter dims must be positive, got {d1} × {d2}")));
    }
    if rank < 1 || rank > d1.min(4 * d2) {
        return Err(Error::Config(format!(
            "adapter rank {rank} outside [1, {}]",
            d1.min(4 * d2)
        )));
    }
    let bound = 1.0 / (d1 as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Adapter {
        d1,
        d2,
        rank,
        a: (0..d1 * rank).map(|_| rng.gen_range(-bound..bound)).collect(),
        b: vec![0.0; rank * d2],
    })
}

impl Adapter {
    fn check(&self, m: &EmbeddingModel) -> Result<()> {
        if self.d1 != m.dims.d1 || self.d2 != m.dims.d2 {
            return Err(Error::Shape(format!(
                "adapter is {} × {}, model projection is {} × {}",
                self.d1, self.d2, m.dims.d1, m.dims.d2
            )));
        }
        if self.a.len() != self.d1 * self.rank || self.b.len() != self.rank * self.d2 {
            return Err(Error::Shape("adapter matrices do not match their rank".into()));
        }
        Ok(())
    }

    /// `zA`, length rank.
    fn down(&self, z: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.rank];
        for (zi, row) in z.iter().zip(self.a.chunks_exact(self.rank)) {
            for (hk, a) in h.iter_mut().zip(row) {
                *hk += zi * a;
            }
        }
        h
    }

    /// `(zA)B`, length d2.
    pub fn delta(&self, z: &[f64]) -> Vec<f64> {
        let h = self.down(z);
        let mut out = vec![0.0; self.d2];
        for (hk, row) in h.iter().zip(self.b.chunks_exact(self.d2)) {
            for (o, b) in out.iter_mut().zip(row) {
                *o += hk * b;
            }
        }
        out
    }
}

fn adapted_raw(ad: &Adapter, m: &EmbeddingModel, z: &[f64]) -> Vec<f64> {
    let mut p = m.projection_raw(z);
    for (x, d) in p.iter_mut().zip(ad.delta(z)) {
        *x += d;
    }
    p
}

/// Normalized embedding of `z` through the adapted projection.
pub fn apply_adapter(ad: &Adapter, m: &EmbeddingModel, z: &[f64]) -> Result<Vec<f64>> {
    ad.check(m)?;
    check_z(m, z)?;
    normalize_projection(&adapted_raw(ad, m, z))
}

/// SHA-256 of the base parameters; unchanged by fine-tuning.
pub fn frozen_checksum(m: &EmbeddingModel) -> String {
    let mut bytes = Vec::new();
    push_f64s(&mut bytes, &m.params);
    sha256_hex(&bytes)
}

/// Gradients of the adapter matrices, same layout as [`Adapter`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Batch ProtoNCE loss `(L_inst + L_proto) / B` over precomputed `z` and
/// its gradient with respect to the adapter only.
pub fn adapter_gradient(
    ad: &Adapter,
    m: &EmbeddingModel,
    z: &[Vec<f64>],
    labels: &[SafetyLabel],
    protos: &PrototypeSet,
    tau: f64,
) -> Result<(f64, AdapterGrad)> {
    ad.check(m)?;
    if z.is_empty() || z.len() != labels.len() {
        return Err(Error::Shape(format!("{} inputs but {} labels", z.len(), labels.len())));
    }
    let p: Vec<Vec<f64>> = z.iter().map(|zi| adapted_raw(ad, m, zi)).collect();
    let v: Vec<Vec<f64>> = p.iter().map(|pi| normalize_projection(pi)).collect::<Result<_>>()?;
    let (loss, dv) = protonce_grad(&v, labels, protos, tau)?;
    let bsz = z.len() as f64;
    let total = loss.total() / bsz;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("adapter loss (inst {}, proto {})", loss.inst, loss.proto)));
    }
    let mut g = AdapterGrad {
        a: vec![0.0; ad.a.len()],
        b: vec![0.0; ad.b.len()],
    };
    for ((zi, (pi, vi)), dvi) in z.iter().zip(p.iter().zip(&v)).zip(&dv) {
        let pn = norm(pi);
        let vd = dot(vi, dvi);
        let dp: Vec<f64> = dvi.iter().zip(vi).map(|(gv, x)| (gv - x * vd) / (pn * bsz)).collect();
        let h = ad.down(zi);
        let mut dh = vec![0.0; ad.rank];
        for k in 0..ad.rank {
            let row = &ad.b[k * ad.d2..(k + 1) * ad.d2];
            dh[k] = dot(row, &dp);
            for (gb, d) in g.b[k * ad.d2..(k + 1) * ad.d2].iter_mut().zip(&dp) {
                *gb += h[k] * d;
            }
        }
        for (i, zv) in zi.iter().enumerate() {
            for (ga, d) in g.a[i * ad.rank..(i + 1) * ad.rank].iter_mut().zip(&dh) {
                *ga += zv * d;
            }
        }
    }
    Ok((total, g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub empty_classes: Vec<Vec<SafetyLabel>>,
}

/// Adapted embeddings of precomputed `z`.
pub fn adapted_embeddings(ad: &Adapter, m: &EmbeddingModel, z: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    z.iter().map(|zi| apply_adapter(ad, m, zi)).collect()
}

/// Trains only `ad` with ProtoNCE on `samples`; the model is read-only.
/// Prototypes carry over from pre-training unless `reinit_prototypes`, in
/// which case they restart from the class means of the initial adapted
/// embeddings. Prototypes are refreshed at every epoch end.
pub fn finetune(
    m: &EmbeddingModel,
    ad: &mut Adapter,
    samples: &[TrainSample],
    protos: &mut PrototypeSet,
    h: &TrainHyper,
    reinit_prototypes: bool,
) -> Result<FinetuneReport> {
    h.validate()?;
    ad.check(m)?;
    if samples.is_empty() {
        return Err(Error::InsufficientData("no fine-tuning samples".into()));
    }
    let mut report = FinetuneReport {
        epoch_loss: Vec::new(),
        empty_classes: Vec::new(),
    };
    if h.epochs == 0 {
        return Ok(report);
    }
    // the encoder is frozen, so z is computed once
    let z: Vec<Vec<f64>> = samples.iter().map(|s| encode_input(m, &s.input)).collect();
    let labels: Vec<SafetyLabel> = samples.iter().map(|s| s.label).collect();
    protos.eta = h.eta;
    if reinit_prototypes || !protos.initialized {
        *protos = PrototypeSet::new(m.dims.d2, h.eta);
        protos.update(&adapted_embeddings(ad, m, &z)?, &labels, h.alpha)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..h.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(h.batch_size) {
            let zb: Vec<Vec<f64>> = chunk.iter().map(|&i| z[i].clone()).collect();
            let lb: Vec<SafetyLabel> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, mut g) = adapter_gradient(ad, m, &zb, &lb, protos, h.tau)?;
            let gn = (g.a.iter().chain(&g.b).map(|x| x * x).sum::<f64>()).sqrt();
            if let Some(c) = h.clip_norm {
                if gn > c {
                    g.a.iter_mut().chain(g.b.iter_mut()).for_each(|x| *x *= c / gn);
                }
            }
            for (w, d) in ad.a.iter_mut().zip(&g.a).chain(ad.b.iter_mut().zip(&g.b)) {
                *w -= h.lr * d;
            }
            total += loss;
            steps += 1;
        }
        let upd = protos.update(&adapted_embeddings(ad, m, &z)?, &labels, h.alpha)?;
        report.epoch_loss.push(total / steps as f64);
        report.empty_classes.push(upd.empty_classes);
    }
    Ok(report)
}

#[derive(Serialize, Deserialize)]
struct AdapterHeader {
    format: String,
    version: u32,
    d1: usize,
    d2: usize,
    rank: usize,
    /// SHA-256 of the base checkpoint file bytes.
    base_sha256: String,
    #[serde(default)]
    prototypes: Option<PrototypeSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

/// Adapter sidecar bound to one base checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterFile {
    pub adapter: Adapter,
    pub base_sha256: String,
    pub prototypes: Option<PrototypeSet>,
    pub provenance: Option<Provenance>,
}

impl AdapterFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let ad = &self.adapter;
        let header = AdapterHeader {
            format: ADAPTER_FORMAT.into(),
            version: ADAPTER_VERSION,
            d1: ad.d1,
            d2: ad.d2,
            rank: ad.rank,
            base_sha256: self.base_sha256.clone(),
            prototypes: self.prototypes.clone(),
            config_hash: self.provenance.as_ref().map(|p| p.config_hash.clone()),
            seed: self.provenance.as_ref().map(|p| p.seed),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        push_f64s(&mut out, &ad.a);
        push_f64s(&mut out, &ad.b);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (htext, blob) = split_header(bytes)?;
        let h: AdapterHeader = serde_json::from_str(htext).map_err(|e| Error::Format(format!("adapter header: {e}")))?;
        if h.format != ADAPTER_FORMAT || h.version != ADAPTER_VERSION {
            return Err(Error::Format(format!(
                "unsupported adapter `{}` version {}",
                h.format, h.version
            )));
        }
        let values = read_f64s(blob)?;
        let na = h.d1 * h.rank;
        if values.len() != na + h.rank * h.d2 {
            return Err(Error::Format(format!(
                "adapter blob holds {} values, expected {}",
                values.len(),
                na + h.rank * h.d2
            )));
        }
        Ok(Self {
            adapter: Adapter {
                d1: h.d1,
                d2: h.d2,
                rank: h.rank,
                a: values[..na].to_vec(),
                b: values[na..].to_vec(),
            },
            base_sha256: h.base_sha256,
            prototypes: h.prototypes,
            provenance: h.config_hash.zip(h.seed).map(|(config_hash, seed)| Provenance { config_hash, seed }),
        })
    }

    /// Errors unless `checkpoint_bytes` is the base this adapter was trained on.
    pub fn verify_base(&self, checkpoint_bytes: &[u8]) -> Result<()> {
        let actual = sha256_hex(checkpoint_bytes);
        if actual != self.base_sha256 {
            return Err(Error::Format(format!(
                "adapter expects base checkpoint {}, found {actual}",
                self.base_sha256
            )));
        }
        Ok(())
    }
}

pub fn save_adapter(path: &Path, file: &AdapterFile) -> Result<()> {
    write_atomic(path, &file.to_bytes())
}

pub fn load_adapter(path: &Path) -> Result<AdapterFile> {
    AdapterFile::from_bytes(&std::fs::read(path)?)
}

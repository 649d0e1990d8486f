//! Prototypical contrastive objective over the three safety classes:
//! an instance-level supervised term, a prototype-level term with per-class
//! concentrations, and the momentum update of the prototypes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::safety::SafetyLabel;

/// Lower bound on a class concentration.
pub const PHI_MIN: f64 = 1e-3;
/// Tolerance on ‖v‖ = 1 for loss inputs.
pub const UNIT_TOLERANCE: f64 = 1e-9;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_unit(v: &[Vec<f64>]) -> Result<()> {
    for (row, x) in v.iter().enumerate() {
        let norm = dot(x, x).sqrt();
        if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::NonUnit { row, norm });
        }
    }
    Ok(())
}

fn check_batch(v: &[Vec<f64>], labels: &[SafetyLabel]) -> Result<()> {
    if v.len() != labels.len() {
        return Err(Error::Shape(format!("{} embeddings but {} labels", v.len(), labels.len())));
    }
    if let Some(first) = v.first() {
        if v.iter().any(|x| x.len() != first.len()) {
            return Err(Error::Shape("embedding rows differ in length".into()));
        }
    }
    check_unit(v)
}

/// Instance-level loss summed over the batch.
///
/// Positives of sample i are the other samples sharing its label; the
/// partition function runs over the whole batch including i. Samples with no
/// positive contribute nothing.
pub fn inst_loss(v: &[Vec<f64>], labels: &[SafetyLabel], tau: f64) -> Result<f64> {
    Ok(inst_loss_grad(v, labels, tau)?.0)
}

/// [`inst_loss`] and its gradient with respect to every row of `v`.
pub fn inst_loss_grad(v: &[Vec<f64>], labels: &[SafetyLabel], tau: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    check_batch(v, labels)?;
    Ok(inst_loss_grad_unchecked(v, labels, tau))
}

pub(crate) fn inst_loss_grad_unchecked(v: &[Vec<f64>], labels: &[SafetyLabel], tau: f64) -> (f64, Vec<Vec<f64>>) {
    let b = v.len();
    let dim = v.first().map_or(0, Vec::len);
    let mut grad = vec![vec![0.0; dim]; b];
    let mut total = 0.0;
    let mut s = vec![0.0; b];
    for i in 0..b {
        let n_pos = (0..b).filter(|&p| p != i && labels[p] == labels[i]).count();
        if n_pos == 0 {
            continue;
        }
        for (a, sa) in s.iter_mut().enumerate() {
            *sa = dot(&v[i], &v[a]) / tau;
        }
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - max).exp()).sum();
        let lse = max + z.ln();
        let inv_pos = 1.0 / n_pos as f64;
        let pos_sum: f64 = (0..b)
            .filter(|&p| p != i && labels[p] == labels[i])
            .map(|p| s[p])
            .sum();
        total += lse - inv_pos * pos_sum;
        for a in 0..b {
            let mut g = (s[a] - lse).exp();
            if a != i && labels[a] == labels[i] {
                g -= inv_pos;
            }
            let g = g / tau;
            for k in 0..dim {
                grad[i][k] += g * v[a][k];
                grad[a][k] += g * v[i][k];
            }
        }
    }
    (total, grad)
}

/// Per-class centroids and concentrations with momentum updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    /// Indexed by [`SafetyLabel::index`].
    pub centroids: [Vec<f64>; 3],
    pub phi: [f64; 3],
    /// Class sizes seen at the last update.
    pub counts: [usize; 3],
    pub eta: f64,
    /// Rescale centroids to unit length after momentum mixing.
    pub renormalize: bool,
    pub initialized: bool,
}

/// Outcome of one prototype update.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrototypeUpdate {
    /// Classes absent from the update set; their state was retained.
    pub empty_classes: Vec<SafetyLabel>,
}

impl PrototypeSet {
    pub fn new(dim: usize, eta: f64) -> Self {
        Self {
            centroids: [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]],
            phi: [1.0; 3],
            counts: [0; 3],
            eta,
            renormalize: false,
            initialized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    /// Folds one epoch of embeddings into the prototypes. The first update
    /// takes the class means directly; later ones mix with momentum `eta`.
    pub fn update(&mut self, v_all: &[Vec<f64>], labels: &[SafetyLabel], alpha: f64) -> Result<PrototypeUpdate> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("momentum must lie in [0, 1], got {}", self.eta)));
        }
        if !(alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be non-negative, got {alpha}")));
        }
        if v_all.len() != labels.len() {
            return Err(Error::Shape(format!("{} embeddings but {} labels", v_all.len(), labels.len())));
        }
        let dim = self.dim();
        if v_all.iter().any(|v| v.len() != dim) {
            return Err(Error::Shape(format!("embedding rows must have length {dim}")));
        }
        let mut report = PrototypeUpdate::default();
        for class in SafetyLabel::ALL {
            let j = class.index();
            let members: Vec<&Vec<f64>> = v_all
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == class)
                .map(|(v, _)| v)
                .collect();
            if members.is_empty() {
                report.empty_classes.push(class);
                continue;
            }
            let n = members.len();
            let mut mean = vec![0.0; dim];
            for v in &members {
                for (m, x) in mean.iter_mut().zip(v.iter()) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut c: Vec<f64> = if self.initialized && self.counts[j] > 0 {
                self.centroids[j]
                    .iter()
                    .zip(&mean)
                    .map(|(old, m)| self.eta * old + (1.0 - self.eta) * m)
                    .collect()
            } else {
                mean
            };
            if self.renormalize {
                let norm = dot(&c, &c).sqrt();
                if norm > 0.0 {
                    c.iter_mut().for_each(|x| *x /= norm);
                }
            }
            let spread: f64 = members
                .iter()
                .map(|v| v.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .sum();
            self.phi[j] = concentration(spread, n, alpha);
            self.centroids[j] = c;
            self.counts[j] = n;
        }
        self.initialized = true;
        Ok(report)
    }
}

/// Concentration from the summed member-to-centroid distance of a class of
/// `n` members, clamped below at [`PHI_MIN`].
pub fn concentration(distance_sum: f64, n: usize, alpha: f64) -> f64 {
    let n = n as f64;
    (distance_sum / (n * (n + alpha).ln())).max(PHI_MIN)
}

fn check_protos(protos: &PrototypeSet, dim: usize) -> Result<()> {
    if !protos.initialized {
        return Err(Error::Config("prototypes are not initialized".into()));
    }
    if let Some(j) = protos.phi.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::Config(format!("concentration of class {j} is not positive: {}", protos.phi[j])));
    }
    if protos.dim() != dim {
        return Err(Error::Shape(format!("prototypes have dim {}, embeddings {dim}", protos.dim())));
    }
    Ok(())
}

/// Prototype-level loss summed over the batch.
pub fn proto_loss(v: &[Vec<f64>], labels: &[SafetyLabel], protos: &PrototypeSet) -> Result<f64> {
    Ok(proto_loss_grad(v, labels, protos)?.0)
}

/// [`proto_loss`] and its gradient with respect to every row of `v`.
pub fn proto_loss_grad(v: &[Vec<f64>], labels: &[SafetyLabel], protos: &PrototypeSet) -> Result<(f64, Vec<Vec<f64>>)> {
    check_batch(v, labels)?;
    check_protos(protos, v.first().map_or(protos.dim(), Vec::len))?;
    Ok(proto_loss_grad_unchecked(v, labels, protos))
}

pub(crate) fn proto_loss_grad_unchecked(
    v: &[Vec<f64>],
    labels: &[SafetyLabel],
    protos: &PrototypeSet,
) -> (f64, Vec<Vec<f64>>) {
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(v.len());
    for (x, &label) in v.iter().zip(labels) {
        let logits: [f64; 3] = std::array::from_fn(|j| dot(x, &protos.centroids[j]) / protos.phi[j]);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let y = label.index();
        total += lse - logits[y];
        let mut g = vec![0.0; x.len()];
        for j in 0..3 {
            let w = ((logits[j] - lse).exp() - if j == y { 1.0 } else { 0.0 }) / protos.phi[j];
            for (gk, ck) in g.iter_mut().zip(&protos.centroids[j]) {
                *gk += w * ck;
            }
        }
        grad.push(g);
    }
    (total, grad)
}

/// Instance plus prototype terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtoNceLoss {
    pub inst: f64,
    pub proto: f64,
}

impl ProtoNceLoss {
    pub fn total(&self) -> f64 {
        self.inst + self.proto
    }
}

/// Both contrastive terms and the gradient of their sum.
pub fn protonce_grad(
    v: &[Vec<f64>],
    labels: &[SafetyLabel],
    protos: &PrototypeSet,
    tau: f64,
) -> Result<(ProtoNceLoss, Vec<Vec<f64>>)> {
    let (inst, mut g) = inst_loss_grad(v, labels, tau)?;
    let (proto, gp) = proto_loss_grad(v, labels, protos)?;
    for (a, b) in g.iter_mut().zip(&gp) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
    Ok((ProtoNceLoss { inst, proto }, g))
}

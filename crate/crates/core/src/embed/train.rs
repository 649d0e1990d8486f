use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{normalize_projection, out_to_modes, EmbeddingModel, Group, ModelDims, SampleInput, POS_SCALE};
use crate::contrastive::{protonce_grad, PrototypeSet};
use crate::error::{Error, Result};
use crate::linalg::{add_assign, dot, logsumexp, matvec_t_acc, norm, outer_acc, softmax};
use crate::safety::SafetyLabel;
use crate::scenario::{Scenario, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    /// Weight of the contrastive term.
    pub lambda: f64,
    /// Instance-loss temperature.
    pub tau: f64,
    /// Prototype momentum.
    pub eta: f64,
    /// Concentration smoothing.
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Rescales the gradient to at most this global norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            tau: 0.05,
            eta: 0.8,
            alpha: 10.0,
            lr: 1e-2,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.tau > 0.0) || !(0.0..=1.0).contains(&self.eta) || !(self.alpha >= 0.0) {
            return Err(Error::Config(
                "hyperparameters need lambda >= 0, tau > 0, eta in [0, 1], alpha >= 0".into(),
            ));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder input and safety label of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: SampleInput,
    pub label: SafetyLabel,
}

impl TrainSample {
    pub fn new(dims: &ModelDims, s: &Scenario, agent: usize, label: SafetyLabel) -> Result<Self> {
        Ok(Self {
            input: SampleInput::new(dims, s, agent)?,
            label,
        })
    }
}

/// Reconstruction loss of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconLoss {
    /// Smooth-L1 regression of the chosen mode, averaged over observed steps.
    pub regression: f64,
    /// Cross-entropy of the logits against the chosen mode.
    pub classification: f64,
    /// Mode with the lowest average displacement.
    pub mode: usize,
}

impl ReconLoss {
    pub fn total(&self) -> f64 {
        self.regression + self.classification
    }
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

pub fn recon_loss(modes: &[Vec<[f64; 2]>], logits: &[f64], target: &Trajectory) -> Result<ReconLoss> {
    Ok(recon_loss_grad(modes, logits, target)?.0)
}

/// [`recon_loss`] with its gradient with respect to the chosen mode's
/// positions and to the logits.
pub fn recon_loss_grad(
    modes: &[Vec<[f64; 2]>],
    logits: &[f64],
    target: &Trajectory,
) -> Result<(ReconLoss, Vec<[f64; 2]>, Vec<f64>)> {
    if modes.is_empty() || modes.len() != logits.len() {
        return Err(Error::Shape(format!("{} modes but {} logits", modes.len(), logits.len())));
    }
    if modes.iter().any(|m| m.len() != target.len()) {
        return Err(Error::Shape("mode length differs from target length".into()));
    }
    let n_valid = target.valid_count();
    if n_valid == 0 {
        return Err(Error::InsufficientData("target has no observed step".into()));
    }
    let inv = 1.0 / n_valid as f64;
    let ade = |m: &Vec<[f64; 2]>| -> f64 {
        m.iter()
            .zip(&target.states)
            .filter(|(_, s)| s.valid)
            .map(|(p, s)| (p[0] - s.x).hypot(p[1] - s.y))
            .sum::<f64>()
            * inv
    };
    let mut best = 0;
    let mut best_ade = ade(&modes[0]);
    for (i, m) in modes.iter().enumerate().skip(1) {
        let a = ade(m);
        if a < best_ade {
            best = i;
            best_ade = a;
        }
    }
    let mut regression = 0.0;
    let mut dmode = vec![[0.0; 2]; target.len()];
    for ((p, s), d) in modes[best].iter().zip(&target.states).zip(&mut dmode) {
        if !s.valid {
            continue;
        }
        for (c, y) in [s.x, s.y].into_iter().enumerate() {
            let (l, g) = smooth_l1(p[c] - y);
            regression += l * inv;
            d[c] = g * inv;
        }
    }
    let classification = logsumexp(logits) - logits[best];
    let mut dlogits = softmax(logits);
    dlogits[best] -= 1.0;
    Ok((
        ReconLoss {
            regression,
            classification,
            mode: best,
        },
        dmode,
        dlogits,
    ))
}

/// Batch-averaged loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub recon: f64,
    pub inst: f64,
    pub proto: f64,
    /// `recon + λ·(inst + proto)`.
    pub total: f64,
}

struct SampleForward {
    cache: super::EncoderCache,
    p: Vec<f64>,
    v: Vec<f64>,
    recon: ReconLoss,
    dmode: Vec<[f64; 2]>,
    dlogits: Vec<f64>,
}

fn forward_sample(m: &EmbeddingModel, s: &TrainSample) -> Result<SampleForward> {
    let cache = m.forward_encoder(&s.input);
    let p = m.projection_raw(&cache.z);
    let v = normalize_projection(&p)?;
    let (out, logits) = m.decode_raw(&cache.z);
    let modes = out_to_modes(&out, m.dims.horizon);
    let (recon, dmode, dlogits) = recon_loss_grad(&modes, &logits, &s.input.recon_target)?;
    Ok(SampleForward {
        cache,
        p,
        v,
        recon,
        dmode,
        dlogits,
    })
}

/// Gradient of one sample's contribution; `dv` is the gradient of the
/// contrastive term with respect to `v`, `scale` multiplies the recon term.
fn backward_sample(
    m: &EmbeddingModel,
    s: &TrainSample,
    fw: &SampleForward,
    dv: Option<&[f64]>,
    scale: f64,
) -> Vec<f64> {
    let l = m.layout();
    let mut grads = vec![0.0; l.len()];
    let z = &fw.cache.z;
    let mut dz = vec![0.0; m.dims.d1];

    let t = m.dims.horizon;
    let mode = fw.recon.mode;
    let mut dout = vec![0.0; t * 2];
    for (i, d) in fw.dmode.iter().enumerate() {
        dout[2 * i] = d[0] * POS_SCALE * scale;
        dout[2 * i + 1] = d[1] * POS_SCALE * scale;
    }
    let rows = mode * t * 2..(mode + 1) * t * 2;
    let d1 = m.dims.d1;
    let w_dec = &m.param(Group::WDec)[rows.start * d1..rows.end * d1];
    outer_acc(&mut grads[l.range(Group::WDec)][rows.start * d1..rows.end * d1], &dout, z);
    add_assign(&mut grads[l.range(Group::BDec)][rows], &dout);
    matvec_t_acc(w_dec, &dout, &mut dz);
    let dlogits: Vec<f64> = fw.dlogits.iter().map(|g| g * scale).collect();
    outer_acc(&mut grads[l.range(Group::WMode)], &dlogits, z);
    add_assign(&mut grads[l.range(Group::BMode)], &dlogits);
    matvec_t_acc(m.param(Group::WMode), &dlogits, &mut dz);

    if let Some(dv) = dv {
        let pn = norm(&fw.p);
        let vd = dot(&fw.v, dv);
        let dp: Vec<f64> = dv.iter().zip(&fw.v).map(|(g, v)| (g - v * vd) / pn).collect();
        outer_acc(&mut grads[l.range(Group::WP)], &dp, z);
        add_assign(&mut grads[l.range(Group::BP)], &dp);
        matvec_t_acc(m.param(Group::WP), &dp, &mut dz);
    }
    m.backward_encoder(&s.input, &fw.cache, &dz, &mut grads);
    grads
}

/// Loss and flat gradient of `L = L_recon + λ·L_ProtoNCE` over a batch,
/// averaged over the batch. Also returns the batch embeddings.
pub fn batch_gradient(
    m: &EmbeddingModel,
    batch: &[TrainSample],
    protos: &PrototypeSet,
    h: &TrainHyper,
) -> Result<(StepLoss, Vec<f64>, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let fws: Vec<SampleForward> = batch
        .par_iter()
        .map(|s| forward_sample(m, s))
        .collect::<Result<_>>()?;
    let b = batch.len() as f64;
    let v: Vec<Vec<f64>> = fws.iter().map(|f| f.v.clone()).collect();
    let labels: Vec<SafetyLabel> = batch.iter().map(|s| s.label).collect();
    let recon: f64 = fws.iter().map(|f| f.recon.total()).sum::<f64>() / b;
    let (inst, proto, dv) = if h.lambda > 0.0 {
        let (loss, g) = protonce_grad(&v, &labels, protos, h.tau)?;
        let scaled: Vec<Vec<f64>> = g
            .into_iter()
            .map(|row| row.into_iter().map(|x| x * h.lambda / b).collect())
            .collect();
        (loss.inst / b, loss.proto / b, Some(scaled))
    } else {
        (0.0, 0.0, None)
    };
    let total = recon + h.lambda * (inst + proto);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss (recon {recon}, inst {inst}, proto {proto})"
        )));
    }
    let per_sample: Vec<Vec<f64>> = batch
        .par_iter()
        .zip(&fws)
        .enumerate()
        .map(|(i, (s, fw))| backward_sample(m, s, fw, dv.as_ref().map(|d| d[i].as_slice()), 1.0 / b))
        .collect();
    let mut grads = vec![0.0; m.layout().len()];
    for g in &per_sample {
        add_assign(&mut grads, g);
    }
    Ok((
        StepLoss {
            recon,
            inst,
            proto,
            total,
        },
        grads,
        v,
    ))
}

/// One gradient-descent step; returns the loss before the update and the
/// batch embeddings.
pub fn train_step(
    m: &mut EmbeddingModel,
    batch: &[TrainSample],
    protos: &PrototypeSet,
    h: &TrainHyper,
) -> Result<(StepLoss, Vec<Vec<f64>>)> {
    h.validate()?;
    if h.lambda > 0.0 && !protos.initialized {
        return Err(Error::Config("prototypes must be initialized before training".into()));
    }
    let (loss, mut grads, v) = batch_gradient(m, batch, protos, h)?;
    let gn = norm(&grads);
    if !gn.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm at loss {}", loss.total)));
    }
    if let Some(c) = h.clip_norm {
        if gn > c {
            grads.iter_mut().for_each(|g| *g *= c / gn);
        }
    }
    for (p, g) in m.params.iter_mut().zip(&grads) {
        *p -= h.lr * g;
    }
    Ok((loss, v))
}

/// Normalized embeddings of every sample under the current model.
pub fn embed_samples(m: &EmbeddingModel, samples: &[TrainSample]) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .map(|s| normalize_projection(&m.projection_raw(&m.forward_encoder(&s.input).z)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: StepLoss,
    /// Classes missing from the epoch; their prototypes were retained.
    pub empty_classes: Vec<SafetyLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLoss>,
    pub epochs: Vec<EpochReport>,
}

/// Mini-batch training for `h.epochs` epochs. Uninitialized prototypes are
/// first set from the class means of the initial model; afterwards they are
/// updated once per epoch from the embeddings seen during that epoch.
pub fn train(
    m: &mut EmbeddingModel,
    samples: &[TrainSample],
    protos: &mut PrototypeSet,
    h: &TrainHyper,
) -> Result<TrainReport> {
    h.validate()?;
    if samples.is_empty() {
        return Err(Error::InsufficientData("no training samples".into()));
    }
    if protos.dim() != m.dims.d2 {
        return Err(Error::Shape(format!(
            "prototypes have dim {}, model d2 is {}",
            protos.dim(),
            m.dims.d2
        )));
    }
    protos.eta = h.eta;
    let labels: Vec<SafetyLabel> = samples.iter().map(|s| s.label).collect();
    if !protos.initialized {
        let v = embed_samples(m, samples)?;
        protos.update(&v, &labels, h.alpha)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = TrainReport {
        steps: Vec::new(),
        epochs: Vec::new(),
    };
    for epoch in 0..h.epochs {
        order.shuffle(&mut rng);
        let mut seen_v = Vec::with_capacity(samples.len());
        let mut seen_l = Vec::with_capacity(samples.len());
        let first = report.steps.len();
        for chunk in order.chunks(h.batch_size) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let (loss, v) = train_step(m, &batch, protos, h)?;
            report.steps.push(loss);
            seen_v.extend(v);
            seen_l.extend(chunk.iter().map(|&i| labels[i]));
        }
        let upd = protos.update(&seen_v, &seen_l, h.alpha)?;
        let steps = &report.steps[first..];
        let n = steps.len() as f64;
        let mean = |f: fn(&StepLoss) -> f64| steps.iter().map(f).sum::<f64>() / n;
        report.epochs.push(EpochReport {
            epoch,
            mean_loss: StepLoss {
                recon: mean(|s| s.recon),
                inst: mean(|s| s.inst),
                proto: mean(|s| s.proto),
                total: mean(|s| s.total),
            },
            empty_classes: upd.empty_classes,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::AgentState;

    fn target(points: &[[f64; 2]]) -> Trajectory {
        Trajectory::new(points.iter().map(|p| AgentState::new(p[0], p[1], 0.0, 1.0)).collect(), 0.1)
    }

    #[test]
    fn exact_mode_with_saturated_logit() {
        let t = target(&[[0.0, 0.0], [1.0, 0.5], [2.0, 1.5]]);
        let exact: Vec<[f64; 2]> = t.states.iter().map(|s| [s.x, s.y]).collect();
        let off: Vec<[f64; 2]> = exact.iter().map(|p| [p[0] + 3.0, p[1]]).collect();
        let loss = recon_loss(&[off, exact], &[-800.0, 0.0], &t).unwrap();
        assert_eq!(loss.mode, 1);
        assert_eq!(loss.total(), 0.0);
    }

    #[test]
    fn uniform_logits_give_ln_m() {
        let t = target(&[[0.0, 0.0], [1.0, 0.0]]);
        let modes = vec![vec![[0.0, 0.0]; 2]; 4];
        let loss = recon_loss(&modes, &[0.7; 4], &t).unwrap();
        assert!((loss.classification - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn invalid_steps_are_ignored() {
        let mut t = target(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        t.states[2].valid = false;
        let modes = vec![vec![[0.0, 0.0], [1.0, 0.0], [90.0, 0.0]]];
        assert_eq!(recon_loss(&modes, &[0.0], &t).unwrap().regression, 0.0);
    }

    #[test]
    fn shape_errors() {
        let t = target(&[[0.0, 0.0]]);
        assert!(recon_loss(&[vec![[0.0; 2]]], &[0.0, 1.0], &t).is_err());
        assert!(recon_loss(&[vec![[0.0; 2]; 2]], &[0.0], &t).is_err());
    }

    #[test]
    fn hyper_validation() {
        assert!(TrainHyper::default().validate().is_ok());
        let bad = TrainHyper {
            tau: 0.0,
            ..TrainHyper::default()
        };
        assert!(bad.validate().is_err());
    }
}

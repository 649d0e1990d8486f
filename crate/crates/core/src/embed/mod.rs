//! Behavior embedding model.
//!
//! Every agent's observed steps are embedded per step, pooled over time and
//! mixed across agents by attention with a query taken from the target
//! agent; two such blocks feed the embedding `z`. A linear head maps `z`
//! into the normalized contrastive space `v`, and a multi-modal linear
//! decoder reconstructs the target trajectory from `z`. All gradients are
//! hand-derived.

mod checkpoint;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_assign, dot, matvec, matvec_t_acc, norm, outer_acc, softmax};
use crate::scenario::{to_local_frame, AgentState, Pose, Scenario, Trajectory};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use train::{
    batch_gradient, embed_samples, recon_loss, recon_loss_grad, train, train_step, EpochReport, ReconLoss, StepLoss, TrainHyper,
    TrainReport, TrainSample,
};

/// Width of the per-step input vector.
pub const STEP_FEATURES: usize = 10;
/// Meters per unit of position inputs and decoder outputs.
pub const POS_SCALE: f64 = 10.0;
/// Pre-normalization norms below this are rejected.
pub const MIN_PROJECTION_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    /// Per-step feature width inside the encoder.
    pub d_f: usize,
    /// Length of `z`.
    pub d1: usize,
    /// Length of `v`.
    pub d2: usize,
    pub modes: usize,
    /// Steps per scenario.
    pub horizon: usize,
    /// Step whose target pose defines the local frame.
    pub anchor_t: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_f: 32,
            d1: 64,
            d2: 16,
            modes: 4,
            horizon: 60,
            anchor_t: 20,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_f == 0 || self.d1 == 0 || self.d2 == 0 || self.modes == 0 || self.horizon == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d2 > self.d1 {
            return Err(Error::Config(format!("d2 ({}) must not exceed d1 ({})", self.d2, self.d1)));
        }
        if self.anchor_t >= self.horizon {
            return Err(Error::Config(format!(
                "anchor step {} outside horizon {}",
                self.anchor_t, self.horizon
            )));
        }
        Ok(())
    }
}

/// Named parameter tensors in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    WIn,
    BIn,
    P1,
    WQ1,
    WK1,
    WO1,
    BO1,
    WS2,
    US2,
    BS2,
    P2,
    WQ2,
    WK2,
    WO2,
    BO2,
    WZ,
    BZ,
    WP,
    BP,
    WDec,
    BDec,
    WMode,
    BMode,
}

impl Group {
    pub const ALL: [Group; 23] = [
        Group::WIn,
        Group::BIn,
        Group::P1,
        Group::WQ1,
        Group::WK1,
        Group::WO1,
        Group::BO1,
        Group::WS2,
        Group::US2,
        Group::BS2,
        Group::P2,
        Group::WQ2,
        Group::WK2,
        Group::WO2,
        Group::BO2,
        Group::WZ,
        Group::BZ,
        Group::WP,
        Group::BP,
        Group::WDec,
        Group::BDec,
        Group::WMode,
        Group::BMode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::WIn => "enc.in.weight",
            Group::BIn => "enc.in.bias",
            Group::P1 => "enc.block1.pool",
            Group::WQ1 => "enc.block1.query",
            Group::WK1 => "enc.block1.key",
            Group::WO1 => "enc.block1.out.weight",
            Group::BO1 => "enc.block1.out.bias",
            Group::WS2 => "enc.block2.step.weight",
            Group::US2 => "enc.block2.context.weight",
            Group::BS2 => "enc.block2.step.bias",
            Group::P2 => "enc.block2.pool",
            Group::WQ2 => "enc.block2.query",
            Group::WK2 => "enc.block2.key",
            Group::WO2 => "enc.block2.out.weight",
            Group::BO2 => "enc.block2.out.bias",
            Group::WZ => "enc.z.weight",
            Group::BZ => "enc.z.bias",
            Group::WP => "proj.weight",
            Group::BP => "proj.bias",
            Group::WDec => "dec.offsets.weight",
            Group::BDec => "dec.offsets.bias",
            Group::WMode => "dec.modes.weight",
            Group::BMode => "dec.modes.bias",
        }
    }

    /// `(rows, cols)`; biases have one column.
    pub fn shape(self, d: &ModelDims) -> (usize, usize) {
        let f = d.d_f;
        let out = d.modes * d.horizon * 2;
        match self {
            Group::WIn => (f, STEP_FEATURES),
            Group::P1 | Group::P2 => (1, f),
            Group::WQ1 | Group::WK1 | Group::WS2 | Group::US2 | Group::WQ2 | Group::WK2 => (f, f),
            Group::WO1 | Group::WO2 => (f, 2 * f),
            Group::BIn | Group::BO1 | Group::BS2 | Group::BO2 => (f, 1),
            Group::WZ => (d.d1, 2 * f),
            Group::BZ => (d.d1, 1),
            Group::WP => (d.d2, d.d1),
            Group::BP => (d.d2, 1),
            Group::WDec => (out, d.d1),
            Group::BDec => (out, 1),
            Group::WMode => (d.modes, d.d1),
            Group::BMode => (d.modes, 1),
        }
    }

    pub fn is_bias(self) -> bool {
        matches!(
            self,
            Group::BIn | Group::BO1 | Group::BS2 | Group::BO2 | Group::BZ | Group::BP | Group::BDec | Group::BMode
        )
    }

    /// Biases and step-pooling scores start at zero, so a fresh model pools
    /// every agent's steps uniformly.
    pub fn is_zero_init(self) -> bool {
        self.is_bias() || matches!(self, Group::P1 | Group::P2)
    }

    pub fn is_projection(self) -> bool {
        matches!(self, Group::WP | Group::BP)
    }

    pub fn is_decoder(self) -> bool {
        matches!(self, Group::WDec | Group::BDec | Group::WMode | Group::BMode)
    }
}

/// Offsets of every [`Group`] in the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    offsets: [usize; 24],
}

impl Layout {
    pub fn new(d: &ModelDims) -> Self {
        let mut offsets = [0usize; 24];
        for (i, g) in Group::ALL.iter().enumerate() {
            let (r, c) = g.shape(d);
            offsets[i + 1] = offsets[i] + r * c;
        }
        Self { offsets }
    }

    pub fn range(&self, g: Group) -> std::ops::Range<usize> {
        let i = g as usize;
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn len(&self) -> usize {
        self.offsets[23]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub dims: ModelDims,
    /// Flat parameters in [`Group::ALL`] order.
    pub params: Vec<f64>,
    layout: Layout,
}

/// Embedding of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorEmbedding {
    pub z: Vec<f64>,
    /// Unit length.
    pub v: Vec<f64>,
}

/// Decoder output in the target's local frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// `modes × horizon` positions, meters.
    pub modes: Vec<Vec<[f64; 2]>>,
    pub logits: Vec<f64>,
}

impl Decoded {
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Maps the modes into the world frame of `anchor`.
    pub fn to_world(&self, anchor: Pose) -> Vec<Vec<[f64; 2]>> {
        let (s, c) = anchor.heading.sin_cos();
        self.modes
            .iter()
            .map(|m| {
                m.iter()
                    .map(|[x, y]| [anchor.x + c * x - s * y, anchor.y + s * x + c * y])
                    .collect()
            })
            .collect()
    }
}

/// Encoder input for one (scenario, agent) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInput {
    /// Per agent with at least one observed step: the observed step inputs.
    pub(crate) agents: Vec<Vec<[f64; STEP_FEATURES]>>,
    /// Position of the target in `agents`.
    pub(crate) target: usize,
    /// Target trajectory in its local frame.
    pub recon_target: Trajectory,
}

impl SampleInput {
    pub fn new(dims: &ModelDims, s: &Scenario, agent: usize) -> Result<Self> {
        if s.horizon() != dims.horizon {
            return Err(Error::Shape(format!(
                "scenario `{}` has {} steps, model expects {}",
                s.id,
                s.horizon(),
                dims.horizon
            )));
        }
        let ft = to_local_frame(s, agent, dims.anchor_t)?;
        let t_norm = (dims.horizon.max(2) - 1) as f64;
        let tgt_rows = &ft.rows[agent];
        let mut agents = Vec::new();
        let mut target = 0;
        for (a, rows) in ft.rows.iter().enumerate() {
            let steps: Vec<[f64; STEP_FEATURES]> = rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r[5] > 0.0)
                .map(|(t, r)| {
                    let tr = &tgt_rows[t];
                    let (dx, dy) = if tr[5] > 0.0 { (r[0] - tr[0], r[1] - tr[1]) } else { (0.0, 0.0) };
                    [
                        r[0] / POS_SCALE,
                        r[1] / POS_SCALE,
                        r[2],
                        r[3],
                        r[4] / POS_SCALE,
                        1.0,
                        dx / POS_SCALE,
                        dy / POS_SCALE,
                        dx.hypot(dy) / POS_SCALE,
                        t as f64 / t_norm,
                    ]
                })
                .collect();
            if steps.is_empty() {
                continue;
            }
            if a == agent {
                target = agents.len();
            }
            agents.push(steps);
        }
        let recon_target = Trajectory::new(
            tgt_rows
                .iter()
                .map(|r| {
                    if r[5] > 0.0 {
                        AgentState {
                            x: r[0],
                            y: r[1],
                            heading: r[3].atan2(r[2]),
                            speed: r[4],
                            valid: true,
                        }
                    } else {
                        AgentState::invalid()
                    }
                })
                .collect(),
            s.dt(),
        );
        Ok(Self {
            agents,
            target,
            recon_target,
        })
    }
}

/// Forward state of one attention-pooling block.
#[derive(Debug, Clone)]
pub(crate) struct Attention {
    q: Vec<f64>,
    k: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    cat: Vec<f64>,
    u: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderCache {
    e: Vec<Vec<Vec<f64>>>,
    h1: Vec<Vec<f64>>,
    beta1: Vec<Vec<f64>>,
    att1: Attention,
    f: Vec<Vec<Vec<f64>>>,
    g2: Vec<Vec<f64>>,
    beta2: Vec<Vec<f64>>,
    att2: Attention,
    ucat: Vec<f64>,
    pub(crate) z: Vec<f64>,
}

struct AttentionGroups {
    wq: Group,
    wk: Group,
    wo: Group,
    bo: Group,
}

const BLOCK1: AttentionGroups = AttentionGroups {
    wq: Group::WQ1,
    wk: Group::WK1,
    wo: Group::WO1,
    bo: Group::BO1,
};
const BLOCK2: AttentionGroups = AttentionGroups {
    wq: Group::WQ2,
    wk: Group::WK2,
    wo: Group::WO2,
    bo: Group::BO2,
};

/// Softmax-weighted pooling of `rows` with scores `score · row`; returns the
/// pooled vector and the weights.
fn attn_pool(rows: &[Vec<f64>], score: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let s: Vec<f64> = rows.iter().map(|r| dot(score, r)).collect();
    let beta = softmax(&s);
    let mut m = vec![0.0; score.len()];
    for (b, r) in beta.iter().zip(rows) {
        for (x, v) in m.iter_mut().zip(r) {
            *x += b * v;
        }
    }
    (m, beta)
}

/// Row gradients of [`attn_pool`] given the pooled gradient `dm`;
/// accumulates the score gradient into `dscore`.
fn attn_pool_backward(rows: &[Vec<f64>], beta: &[f64], score: &[f64], dm: &[f64], dscore: &mut [f64]) -> Vec<Vec<f64>> {
    let db: Vec<f64> = rows.iter().map(|r| dot(dm, r)).collect();
    let mean_db: f64 = beta.iter().zip(&db).map(|(b, d)| b * d).sum();
    rows.iter()
        .zip(beta)
        .zip(&db)
        .map(|((r, b), d)| {
            let ds = b * (d - mean_db);
            for (g, v) in dscore.iter_mut().zip(r) {
                *g += ds * v;
            }
            dm.iter().zip(score).map(|(m, w)| b * m + ds * w).collect()
        })
        .collect()
}

impl EmbeddingModel {
    /// Weights uniform in ±1/√fan_in, biases zero.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in Group::ALL {
            let (_, cols) = g.shape(&dims);
            if g.is_zero_init() {
                continue;
            }
            let bound = 1.0 / (cols as f64).sqrt();
            for p in m.param_mut(g) {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(m)
    }

    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let layout = Layout::new(&dims);
        Ok(Self {
            dims,
            params: vec![0.0; layout.len()],
            layout,
        })
    }

    pub fn from_params(dims: ModelDims, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(dims)?;
        if params.len() != m.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                m.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameter".into()));
        }
        m.params = params;
        Ok(m)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param(&self, g: Group) -> &[f64] {
        &self.params[self.layout.range(g)]
    }

    pub fn param_mut(&mut self, g: Group) -> &mut [f64] {
        let r = self.layout.range(g);
        &mut self.params[r]
    }

    pub(crate) fn forward_encoder(&self, input: &SampleInput) -> EncoderCache {
        let d = self.dims.d_f;
        let (w_in, b_in) = (self.param(Group::WIn), self.param(Group::BIn));
        let mut pre = vec![0.0; d];
        let e: Vec<Vec<Vec<f64>>> = input
            .agents
            .iter()
            .map(|steps| {
                steps
                    .iter()
                    .map(|x| {
                        matvec(w_in, x, &mut pre);
                        pre.iter().zip(b_in).map(|(p, b)| (p + b).tanh()).collect()
                    })
                    .collect()
            })
            .collect();
        let (h1, beta1): (Vec<Vec<f64>>, Vec<Vec<f64>>) =
            e.iter().map(|rows| attn_pool(rows, self.param(Group::P1))).unzip();
        let att1 = self.attention_forward(&h1, input.target, &BLOCK1);

        let mut ctx_term = vec![0.0; d];
        matvec(self.param(Group::US2), &att1.u, &mut ctx_term);
        add_assign(&mut ctx_term, self.param(Group::BS2));
        let w_s2 = self.param(Group::WS2);
        let f: Vec<Vec<Vec<f64>>> = e
            .iter()
            .map(|rows| {
                rows.iter()
                    .map(|ev| {
                        matvec(w_s2, ev, &mut pre);
                        pre.iter().zip(&ctx_term).map(|(p, c)| (p + c).tanh()).collect()
                    })
                    .collect()
            })
            .collect();
        let (g2, beta2): (Vec<Vec<f64>>, Vec<Vec<f64>>) =
            f.iter().map(|rows| attn_pool(rows, self.param(Group::P2))).unzip();
        let att2 = self.attention_forward(&g2, input.target, &BLOCK2);

        let ucat: Vec<f64> = att1.u.iter().chain(&att2.u).copied().collect();
        let mut z = vec![0.0; self.dims.d1];
        matvec(self.param(Group::WZ), &ucat, &mut z);
        add_assign(&mut z, self.param(Group::BZ));
        EncoderCache {
            e,
            h1,
            beta1,
            att1,
            f,
            g2,
            beta2,
            att2,
            ucat,
            z,
        }
    }

    fn attention_forward(&self, pooled: &[Vec<f64>], target: usize, g: &AttentionGroups) -> Attention {
        let d = self.dims.d_f;
        let scale = 1.0 / (d as f64).sqrt();
        let mut q = vec![0.0; d];
        matvec(self.param(g.wq), &pooled[target], &mut q);
        let k: Vec<Vec<f64>> = pooled
            .iter()
            .map(|p| {
                let mut k = vec![0.0; d];
                matvec(self.param(g.wk), p, &mut k);
                k
            })
            .collect();
        let scores: Vec<f64> = k.iter().map(|kv| dot(&q, kv) * scale).collect();
        let alpha = softmax(&scores);
        let mut ctx = vec![0.0; d];
        for (a, p) in alpha.iter().zip(pooled) {
            for (c, x) in ctx.iter_mut().zip(p) {
                *c += a * x;
            }
        }
        let cat: Vec<f64> = pooled[target].iter().chain(&ctx).copied().collect();
        let mut u = vec![0.0; d];
        matvec(self.param(g.wo), &cat, &mut u);
        u.iter_mut().zip(self.param(g.bo)).for_each(|(x, b)| *x = (*x + b).tanh());
        Attention { q, k, alpha, cat, u }
    }

    /// Backpropagates `du` through an attention block; returns the gradient
    /// with respect to each pooled vector.
    fn attention_backward(
        &self,
        pooled: &[Vec<f64>],
        target: usize,
        att: &Attention,
        du: &[f64],
        g: &AttentionGroups,
        grads: &mut [f64],
    ) -> Vec<Vec<f64>> {
        let d = self.dims.d_f;
        let scale = 1.0 / (d as f64).sqrt();
        let dpre: Vec<f64> = du.iter().zip(&att.u).map(|(g, u)| g * (1.0 - u * u)).collect();
        outer_acc(&mut grads[self.layout.range(g.wo)], &dpre, &att.cat);
        add_assign(&mut grads[self.layout.range(g.bo)], &dpre);
        let mut dcat = vec![0.0; 2 * d];
        matvec_t_acc(self.param(g.wo), &dpre, &mut dcat);
        let (dself, dctx) = dcat.split_at(d);

        let mut dpooled = vec![vec![0.0; d]; pooled.len()];
        add_assign(&mut dpooled[target], dself);
        let dalpha: Vec<f64> = pooled.iter().map(|p| dot(p, dctx)).collect();
        for (dp, &a) in dpooled.iter_mut().zip(&att.alpha) {
            for (x, c) in dp.iter_mut().zip(dctx) {
                *x += a * c;
            }
        }
        let mean: f64 = att.alpha.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
        let mut dq = vec![0.0; d];
        for (i, p) in pooled.iter().enumerate() {
            let ds = att.alpha[i] * (dalpha[i] - mean) * scale;
            if ds == 0.0 {
                continue;
            }
            for (x, kv) in dq.iter_mut().zip(&att.k[i]) {
                *x += ds * kv;
            }
            let dk: Vec<f64> = att.q.iter().map(|qv| ds * qv).collect();
            outer_acc(&mut grads[self.layout.range(g.wk)], &dk, p);
            matvec_t_acc(self.param(g.wk), &dk, &mut dpooled[i]);
        }
        outer_acc(&mut grads[self.layout.range(g.wq)], &dq, &pooled[target]);
        matvec_t_acc(self.param(g.wq), &dq, &mut dpooled[target]);
        dpooled
    }

    /// Accumulates encoder parameter gradients for `dz` into `grads`.
    pub(crate) fn backward_encoder(&self, input: &SampleInput, c: &EncoderCache, dz: &[f64], grads: &mut [f64]) {
        let d = self.dims.d_f;
        let l = &self.layout;
        outer_acc(&mut grads[l.range(Group::WZ)], dz, &c.ucat);
        add_assign(&mut grads[l.range(Group::BZ)], dz);
        let mut ducat = vec![0.0; 2 * d];
        matvec_t_acc(self.param(Group::WZ), dz, &mut ducat);
        let (du1, du2) = ducat.split_at(d);
        let mut du1 = du1.to_vec();

        let dg2 = self.attention_backward(&c.g2, input.target, &c.att2, du2, &BLOCK2, grads);
        let w_s2 = self.param(Group::WS2);
        let u_s2 = self.param(Group::US2);
        let mut dpre_sum = vec![0.0; d];
        let mut de: Vec<Vec<Vec<f64>>> = Vec::with_capacity(c.e.len());
        let mut dp2 = vec![0.0; d];
        for (a, rows) in c.f.iter().enumerate() {
            let df = attn_pool_backward(rows, &c.beta2[a], self.param(Group::P2), &dg2[a], &mut dp2);
            let mut de_a = Vec::with_capacity(rows.len());
            for (t, fv) in rows.iter().enumerate() {
                let dpre: Vec<f64> = fv.iter().zip(&df[t]).map(|(f, g)| g * (1.0 - f * f)).collect();
                outer_acc(&mut grads[l.range(Group::WS2)], &dpre, &c.e[a][t]);
                add_assign(&mut dpre_sum, &dpre);
                let mut dev = vec![0.0; d];
                matvec_t_acc(w_s2, &dpre, &mut dev);
                de_a.push(dev);
            }
            de.push(de_a);
        }
        add_assign(&mut grads[l.range(Group::P2)], &dp2);
        outer_acc(&mut grads[l.range(Group::US2)], &dpre_sum, &c.att1.u);
        add_assign(&mut grads[l.range(Group::BS2)], &dpre_sum);
        matvec_t_acc(u_s2, &dpre_sum, &mut du1);

        let dh1 = self.attention_backward(&c.h1, input.target, &c.att1, &du1, &BLOCK1, grads);
        let mut dpre_b = vec![0.0; d];
        let mut dp1 = vec![0.0; d];
        for (a, rows) in c.e.iter().enumerate() {
            let dpool = attn_pool_backward(rows, &c.beta1[a], self.param(Group::P1), &dh1[a], &mut dp1);
            for (t, ev) in rows.iter().enumerate() {
                let dpre: Vec<f64> = ev
                    .iter()
                    .zip(&de[a][t])
                    .zip(&dpool[t])
                    .map(|((e, g), h)| (g + h) * (1.0 - e * e))
                    .collect();
                outer_acc(&mut grads[l.range(Group::WIn)], &dpre, &input.agents[a][t]);
                add_assign(&mut dpre_b, &dpre);
            }
        }
        add_assign(&mut grads[l.range(Group::BIn)], &dpre_b);
        add_assign(&mut grads[l.range(Group::P1)], &dp1);
    }

    /// Pre-normalization projection `W_p z + b_p`.
    pub fn projection_raw(&self, z: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.dims.d2];
        matvec(self.param(Group::WP), z, &mut p);
        add_assign(&mut p, self.param(Group::BP));
        p
    }

    pub(crate) fn decode_raw(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let out_len = self.dims.modes * self.dims.horizon * 2;
        let mut out = vec![0.0; out_len];
        matvec(self.param(Group::WDec), z, &mut out);
        add_assign(&mut out, self.param(Group::BDec));
        let mut logits = vec![0.0; self.dims.modes];
        matvec(self.param(Group::WMode), z, &mut logits);
        add_assign(&mut logits, self.param(Group::BMode));
        (out, logits)
    }
}

/// Unit vector along `p`.
pub fn normalize_projection(p: &[f64]) -> Result<Vec<f64>> {
    let n = norm(p);
    if !n.is_finite() {
        return Err(Error::NonFinite("projection".into()));
    }
    if n < MIN_PROJECTION_NORM {
        return Err(Error::DegenerateProjection { norm: n });
    }
    Ok(p.iter().map(|x| x / n).collect())
}

/// Embedding `z` of `agent`, conditioned on every agent's full trajectory.
pub fn encode(m: &EmbeddingModel, s: &Scenario, agent: usize) -> Result<Vec<f64>> {
    let input = SampleInput::new(&m.dims, s, agent)?;
    Ok(encode_input(m, &input))
}

pub fn encode_input(m: &EmbeddingModel, input: &SampleInput) -> Vec<f64> {
    m.forward_encoder(input).z
}

/// Normalized contrastive embedding of `z`.
pub fn project(m: &EmbeddingModel, z: &[f64]) -> Result<Vec<f64>> {
    check_z(m, z)?;
    normalize_projection(&m.projection_raw(z))
}

pub(crate) fn check_z(m: &EmbeddingModel, z: &[f64]) -> Result<()> {
    if z.len() != m.dims.d1 {
        return Err(Error::Shape(format!("z has length {}, model expects {}", z.len(), m.dims.d1)));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("z".into()));
    }
    Ok(())
}

/// Candidate reconstructions of the target trajectory and their logits.
pub fn decode(m: &EmbeddingModel, z: &[f64]) -> Result<Decoded> {
    check_z(m, z)?;
    let (out, logits) = m.decode_raw(z);
    Ok(Decoded {
        modes: out_to_modes(&out, m.dims.horizon),
        logits,
    })
}

pub(crate) fn out_to_modes(out: &[f64], horizon: usize) -> Vec<Vec<[f64; 2]>> {
    out.chunks_exact(horizon * 2)
        .map(|m| m.chunks_exact(2).map(|p| [p[0] * POS_SCALE, p[1] * POS_SCALE]).collect())
        .collect()
}

/// `z` and `v` of `agent`.
pub fn embed(m: &EmbeddingModel, s: &Scenario, agent: usize) -> Result<BehaviorEmbedding> {
    let z = encode(m, s, agent)?;
    let v = project(m, &z)?;
    Ok(BehaviorEmbedding { z, v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::synth::{synth_generate, SynthConfig};

    pub(crate) fn small_dims() -> ModelDims {
        ModelDims {
            d_f: 6,
            d1: 8,
            d2: 4,
            modes: 2,
            horizon: 60,
            anchor_t: 20,
        }
    }

    fn corpus() -> Vec<Scenario> {
        let cfg = SynthConfig::with_counts([("crossing", 2), ("cut_in", 2), ("crash", 2)]);
        synth_generate(&cfg, 3).unwrap()
    }

    #[test]
    fn layout_is_contiguous() {
        let d = ModelDims::default();
        let l = Layout::new(&d);
        let mut end = 0;
        for g in Group::ALL {
            let r = l.range(g);
            assert_eq!(r.start, end);
            let (a, b) = g.shape(&d);
            assert_eq!(r.len(), a * b);
            end = r.end;
        }
        assert_eq!(end, l.len());
    }

    #[test]
    fn zero_encoder_outputs_bias() {
        let mut m = EmbeddingModel::zeros(small_dims()).unwrap();
        let bz: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        m.param_mut(Group::BZ).copy_from_slice(&bz);
        for s in corpus() {
            assert_eq!(encode(&m, &s, 0).unwrap(), bz);
        }
    }

    #[test]
    fn encode_ignores_agent_order() {
        let m = EmbeddingModel::new(small_dims(), 1).unwrap();
        for s in corpus() {
            let z = encode(&m, &s, 1).unwrap();
            let mut p = s.clone();
            p.trajectories.reverse();
            p.agent_dims.reverse();
            let n = p.num_agents();
            let z2 = encode(&m, &p, n - 2).unwrap();
            for (a, b) in z.iter().zip(&z2) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encode_rigid_invariant() {
        let m = EmbeddingModel::new(small_dims(), 2).unwrap();
        let (rot, tx, ty) = (1.1f64, 250.0, -75.0);
        let (sr, cr) = rot.sin_cos();
        for s in corpus() {
            let mut moved = s.clone();
            for traj in &mut moved.trajectories {
                for st in &mut traj.states {
                    if st.valid {
                        *st = AgentState::new(cr * st.x - sr * st.y + tx, sr * st.x + cr * st.y + ty, st.heading + rot, st.speed);
                    }
                }
            }
            let a = encode(&m, &s, 0).unwrap();
            let b = encode(&m, &moved, 0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projection_identity_rows() {
        let mut m = EmbeddingModel::zeros(small_dims()).unwrap();
        let wp = m.param_mut(Group::WP);
        for i in 0..4 {
            wp[i * 8 + i] = 1.0;
        }
        let z = [0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0];
        let v = project(&m, &z).unwrap();
        assert_eq!(v, vec![0.5; 4]);
        let z3: Vec<f64> = z.iter().map(|x| 3.0 * x).collect();
        let v3 = project(&m, &z3).unwrap();
        for (a, b) in v.iter().zip(&v3) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_projection() {
        let m = EmbeddingModel::zeros(small_dims()).unwrap();
        assert!(matches!(project(&m, &[0.0; 8]), Err(Error::DegenerateProjection { .. })));
        assert!(project(&m, &[0.0; 3]).is_err());
    }

    #[test]
    fn random_projection_is_unit() {
        let m = EmbeddingModel::new(ModelDims::default(), 5).unwrap();
        for s in corpus() {
            for a in 0..2 {
                let e = embed(&m, &s, a).unwrap();
                assert!((norm(&e.v) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_decoder() {
        let m = EmbeddingModel::zeros(small_dims()).unwrap();
        let d = decode(&m, &[0.3; 8]).unwrap();
        assert_eq!(d.modes.len(), 2);
        assert!(d.modes.iter().flatten().all(|p| *p == [0.0, 0.0]));
        assert_eq!(d.probabilities(), vec![0.5, 0.5]);
    }

    #[test]
    fn decoded_probabilities_sum_to_one() {
        let m = EmbeddingModel::new(ModelDims::default(), 9).unwrap();
        let z = encode(&m, &corpus()[0], 0).unwrap();
        let p: f64 = decode(&m, &z).unwrap().probabilities().iter().sum();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn horizon_mismatch_rejected() {
        let d = ModelDims {
            horizon: 40,
            ..small_dims()
        };
        let m = EmbeddingModel::zeros(d).unwrap();
        assert!(matches!(encode(&m, &corpus()[0], 0), Err(Error::Shape(_))));
    }
}

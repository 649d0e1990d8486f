//! Crash-grounded adversary selection: sample candidate futures for the
//! adversary, keep the ones that come closest to the historical ego
//! trajectories and pick the one whose behavior embedding lies nearest to
//! the cache of unsafe behaviors.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{encode, project, EmbeddingModel};
use crate::error::{Error, Result};
use crate::io::{push_f64s, read_f64s, split_header, write_atomic};
use crate::linalg::{euclidean, norm};
use crate::lora::{apply_adapter, Adapter};
use crate::safety::{LabeledAgent, SafetyLabel};
use crate::scenario::{AgentState, Provenance, Scenario, Trajectory};

pub const CACHE_FORMAT: &str = "crashground-cache";
const CACHE_VERSION: u32 = 1;
/// Bound on the path curvature of every sampled candidate, 1/m.
pub const MAX_CURVATURE: f64 = 0.3;
/// Bound on the longitudinal acceleration of every sampled candidate, m/s².
pub const MAX_ACCEL: f64 = 6.0;
/// Neighbor count for open-loop adversaries.
pub const N_KNN_OPENLOOP: usize = 15;
const UNIT_TOL: f64 = 1e-9;
/// Goals are kept below this fraction of the curvature bound so the
/// discretized path stays inside it.
const CURVATURE_MARGIN: f64 = 0.9;
const MAX_SPEED: f64 = 25.0;
const PATH_SAMPLES: usize = 200;

/// Where a cached unsafe embedding came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSource {
    pub scenario_id: String,
    pub agent: usize,
}

/// Frozen set of unit embeddings of unsafe behaviors.
#[derive(Debug, Clone, PartialEq)]
pub struct UnsafeCache {
    dim: usize,
    embeddings: Vec<Vec<f64>>,
    sources: Vec<CacheSource>,
    provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
    dim: usize,
    count: usize,
    #[serde(default)]
    sources: Vec<CacheSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

impl UnsafeCache {
    /// Errors unless every embedding has length `dim` and unit norm.
    pub fn new(dim: usize, embeddings: Vec<Vec<f64>>, sources: Vec<CacheSource>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::InsufficientData("unsafe cache is empty".into()));
        }
        if sources.len() != embeddings.len() {
            return Err(Error::Shape(format!(
                "{} embeddings but {} sources",
                embeddings.len(),
                sources.len()
            )));
        }
        for (row, v) in embeddings.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::Shape(format!("cache row {row} has length {}, expected {dim}", v.len())));
            }
            let n = norm(v);
            if !((n - 1.0).abs() <= UNIT_TOL) {
                return Err(Error::NonUnit { row, norm: n });
            }
        }
        Ok(Self {
            dim,
            embeddings,
            sources,
            provenance: None,
        })
    }

    /// Stamps the configuration that produced this cache into its file header.
    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn sources(&self) -> &[CacheSource] {
        &self.sources
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CacheHeader {
            format: CACHE_FORMAT.into(),
            version: CACHE_VERSION,
            dim: self.dim,
            count: self.len(),
            sources: self.sources.clone(),
            config_hash: self.provenance.as_ref().map(|p| p.config_hash.clone()),
            seed: self.provenance.as_ref().map(|p| p.seed),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for v in &self.embeddings {
            push_f64s(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (htext, blob) = split_header(bytes)?;
        let h: CacheHeader = serde_json::from_str(htext).map_err(|e| Error::Format(format!("cache header: {e}")))?;
        if h.format != CACHE_FORMAT || h.version != CACHE_VERSION {
            return Err(Error::Format(format!("unsupported cache `{}` version {}", h.format, h.version)));
        }
        let values = read_f64s(blob)?;
        if h.dim == 0 || values.len() != h.dim * h.count {
            return Err(Error::Format(format!(
                "cache blob holds {} values, expected {} × {}",
                values.len(),
                h.count,
                h.dim
            )));
        }
        let sources = if h.sources.is_empty() {
            (0..h.count)
                .map(|i| CacheSource {
                    scenario_id: format!("#{i}"),
                    agent: 0,
                })
                .collect()
        } else {
            h.sources
        };
        let mut cache = Self::new(h.dim, values.chunks_exact(h.dim).map(<[f64]>::to_vec).collect(), sources)?;
        cache.provenance = h.config_hash.zip(h.seed).map(|(config_hash, seed)| Provenance { config_hash, seed });
        Ok(cache)
    }
}

pub fn save_cache(path: &Path, cache: &UnsafeCache) -> Result<()> {
    write_atomic(path, &cache.to_bytes())
}

pub fn load_cache(path: &Path) -> Result<UnsafeCache> {
    UnsafeCache::from_bytes(&std::fs::read(path)?)
}

/// Unit behavior embedding of `agent`, through the adapter when given.
pub fn behavior_vector(m: &EmbeddingModel, ad: Option<&Adapter>, s: &Scenario, agent: usize) -> Result<Vec<f64>> {
    let z = encode(m, s, agent)?;
    match ad {
        Some(ad) => apply_adapter(ad, m, &z),
        None => project(m, &z),
    }
}

/// Embeds every agent labeled unsafe, in corpus order.
pub fn build_unsafe_cache(
    m: &EmbeddingModel,
    ad: Option<&Adapter>,
    scenarios: &[Scenario],
    labeled: &[LabeledAgent],
) -> Result<UnsafeCache> {
    let unsafe_agents: Vec<&LabeledAgent> = labeled.iter().filter(|l| l.label == SafetyLabel::Unsafe).collect();
    if unsafe_agents.is_empty() {
        return Err(Error::InsufficientData("corpus has no unsafe agents".into()));
    }
    let embeddings = unsafe_agents
        .par_iter()
        .map(|l| {
            let s = scenarios.get(l.scenario_index).ok_or_else(|| {
                Error::Shape(format!("label refers to scenario {} of {}", l.scenario_index, scenarios.len()))
            })?;
            behavior_vector(m, ad, s, l.agent)
        })
        .collect::<Result<Vec<_>>>()?;
    let sources = unsafe_agents
        .iter()
        .map(|l| CacheSource {
            scenario_id: l.scenario_id.clone(),
            agent: l.agent,
        })
        .collect();
    UnsafeCache::new(m.dims.d2, embeddings, sources)
}

/// Mean Euclidean distance from `v` to its `n_knn` nearest cache entries;
/// equal distances are ordered by cache index.
pub fn knn_distance(v: &[f64], cache: &UnsafeCache, n_knn: usize) -> Result<f64> {
    if n_knn == 0 || n_knn > cache.len() {
        return Err(Error::InsufficientData(format!(
            "{n_knn} nearest neighbors requested from a cache of {}",
            cache.len()
        )));
    }
    if v.len() != cache.dim {
        return Err(Error::Shape(format!("embedding has length {}, cache {}", v.len(), cache.dim)));
    }
    let mut d: Vec<(f64, usize)> = cache
        .embeddings
        .iter()
        .enumerate()
        .map(|(i, c)| (euclidean(v, c), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(d[..n_knn].iter().map(|x| x.0).sum::<f64>() / n_knn as f64)
}

/// Cubic-blend path in the adversary's frame at the history boundary:
/// lateral offset `y_goal` reached at longitudinal distance `x_goal` with
/// zero end slope, then straight.
struct BlendPath {
    x_goal: f64,
    y_goal: f64,
    /// Arc length at each of the evenly spaced x samples over [0, x_goal].
    arc: Vec<f64>,
}

impl BlendPath {
    fn new(x_goal: f64, y_goal: f64) -> Self {
        let mut arc = vec![0.0; PATH_SAMPLES + 1];
        let step = x_goal / PATH_SAMPLES as f64;
        for i in 1..=PATH_SAMPLES {
            let (x0, x1) = ((i - 1) as f64 * step, i as f64 * step);
            arc[i] = arc[i - 1] + step.hypot(Self::lateral(x1, x_goal, y_goal) - Self::lateral(x0, x_goal, y_goal));
        }
        Self { x_goal, y_goal, arc }
    }

    fn lateral(x: f64, x_goal: f64, y_goal: f64) -> f64 {
        let u = (x / x_goal).clamp(0.0, 1.0);
        y_goal * u * u * (3.0 - 2.0 * u)
    }

    fn slope(&self, x: f64) -> f64 {
        if x >= self.x_goal {
            return 0.0;
        }
        let u = (x / self.x_goal).max(0.0);
        self.y_goal * 6.0 * u * (1.0 - u) / self.x_goal
    }

    /// Upper bound on the curvature of the blend.
    fn max_curvature(x_goal: f64, y_goal: f64) -> f64 {
        6.0 * y_goal.abs() / (x_goal * x_goal)
    }

    fn length(&self) -> f64 {
        self.arc[PATH_SAMPLES]
    }

    /// Local (x, y, heading) at arc length `s`.
    fn at(&self, s: f64) -> (f64, f64, f64) {
        let total = self.length();
        if s >= total {
            return (self.x_goal + (s - total), self.y_goal, 0.0);
        }
        let i = self.arc.partition_point(|&a| a <= s).clamp(1, PATH_SAMPLES);
        let (a0, a1) = (self.arc[i - 1], self.arc[i]);
        let step = self.x_goal / PATH_SAMPLES as f64;
        let x = ((i - 1) as f64 + (s - a0) / (a1 - a0)) * step;
        (x, Self::lateral(x, self.x_goal, self.y_goal), self.slope(x).atan())
    }
}

/// Constant-acceleration speed profile from `v0` with the speed clamped to
/// [0, MAX_SPEED]; returns speeds and arc lengths per step after `t_h`.
fn speed_profile(v0: f64, accel: f64, steps: usize, dt: f64) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![v0; steps];
    let mut s = vec![0.0; steps];
    for k in 1..steps {
        v[k] = (v[k - 1] + accel * dt).clamp(0.0, MAX_SPEED.max(v0));
        s[k] = s[k - 1] + 0.5 * (v[k - 1] + v[k]) * dt;
    }
    (v, s)
}

/// Samples `n` futures for the adversary from its state at `t_h`. Index 0
/// is the logged future; the others follow a cubic lateral blend toward a
/// goal point with a constant-acceleration speed profile. Half the goals
/// are lane-aligned offsets, half lie on the ego trajectory of `s` near the
/// step the ego passes them. States before and at `t_h` are copied.
pub fn sample_candidates(s: &Scenario, t_h: usize, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let a = s.adv_id;
    s.check_agent(a)?;
    let orig = &s.trajectories[a];
    if !orig.is_valid_at(t_h) {
        return Err(Error::InvalidAgentState { agent: a, step: t_h });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let horizon = s.horizon();
    let dt = s.dt();
    let start = orig.states[t_h];
    let (sh, ch) = start.heading.sin_cos();
    let to_local = |p: [f64; 2]| {
        let (dx, dy) = (p[0] - start.x, p[1] - start.y);
        [dx * ch + dy * sh, -dx * sh + dy * ch]
    };
    let ego = &s.trajectories[s.ego_id];
    let ego_future: Vec<usize> = (t_h + 1..horizon).filter(|&t| ego.is_valid_at(t)).collect();
    let steps = horizon - t_h;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![orig.clone()];
    while out.len() < n {
        let crossing = !ego_future.is_empty() && out.len() % 2 == 1;
        let mut goal = None;
        if crossing {
            for _ in 0..16 {
                let te = ego_future[rng.gen_range(0..ego_future.len())];
                let es = ego.states[te];
                let shift = rng.gen_range(-8.0..8.0);
                let p = to_local([es.x + shift * es.heading.cos(), es.y + shift * es.heading.sin()]);
                if p[0] >= 5.0 && BlendPath::max_curvature(p[0], p[1]) <= CURVATURE_MARGIN * MAX_CURVATURE {
                    let arrival = ((te - t_h) as f64 * dt + rng.gen_range(-1.0..1.0)).max(1.0);
                    goal = Some((p[0], p[1], Some(arrival)));
                    break;
                }
            }
        }
        let (x_goal, y_goal, arrival) = goal.unwrap_or_else(|| {
            let x_goal: f64 = rng.gen_range(15.0..60.0);
            let lane: f64 = [-3.5, 0.0, 3.5][rng.gen_range(0..3)];
            let bound = CURVATURE_MARGIN * MAX_CURVATURE * x_goal * x_goal / 6.0;
            let y_goal = (lane + rng.gen_range(-0.5..0.5f64)).clamp(-bound, bound);
            (x_goal, y_goal, None)
        });
        let path = BlendPath::new(x_goal, y_goal);
        let accel = match arrival {
            Some(t) => 2.0 * (path.length() - start.speed * t) / (t * t),
            None => rng.gen_range(-4.0..3.0),
        }
        .clamp(-(MAX_ACCEL - 0.5), MAX_ACCEL - 0.5);
        let (speeds, arcs) = speed_profile(start.speed, accel, steps, dt);
        let mut states = orig.states.clone();
        for k in 1..steps {
            let (lx, ly, lh) = path.at(arcs[k]);
            states[t_h + k] = AgentState::new(
                start.x + lx * ch - ly * sh,
                start.y + lx * sh + ly * ch,
                start.heading + lh,
                speeds[k],
            );
        }
        out.push(Trajectory::new(states, orig.dt));
    }
    Ok(out)
}

/// Mean over the historical ego trajectories of the smallest
/// center-to-center distance to `cand` over steps from `t_h` on.
pub fn collision_closeness(cand: &Trajectory, ego_history: &[&Trajectory], t_h: usize) -> Result<f64> {
    if ego_history.is_empty() {
        return Err(Error::InsufficientData("collision closeness needs at least one rollout".into()));
    }
    let total: f64 = ego_history
        .iter()
        .map(|ego| {
            (t_h..cand.len().min(ego.len()))
                .filter(|&t| cand.states[t].valid && ego.states[t].valid)
                .map(|t| {
                    let (c, e) = (cand.states[t], ego.states[t]);
                    (c.x - e.x).hypot(c.y - e.y)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(total / ego_history.len() as f64)
}

/// Indices of the `n_int` smallest closeness values, ascending, ties by
/// lower index.
pub fn filter_interactive(closeness: &[f64], n_int: usize) -> Result<Vec<usize>> {
    if n_int == 0 || n_int > closeness.len() {
        return Err(Error::Config(format!(
            "cannot retain {n_int} of {} candidates",
            closeness.len()
        )));
    }
    let mut idx: Vec<usize> = (0..closeness.len()).collect();
    idx.sort_by(|&i, &j| closeness[i].total_cmp(&closeness[j]).then(i.cmp(&j)));
    idx.truncate(n_int);
    Ok(idx)
}

/// Copy of rollout `k` with the adversary replaced by `cand`.
pub fn perturbed_scenario(rollout: &Scenario, cand: &Trajectory) -> Scenario {
    rollout.with_trajectory(rollout.adv_id, cand.clone())
}

/// Mean over the rollouts of the candidate's KNN distance to the cache,
/// embedding the candidate in each rollout's realized ego and background.
pub fn score_candidate(
    m: &EmbeddingModel,
    ad: Option<&Adapter>,
    cache: &UnsafeCache,
    cand: &Trajectory,
    history: &[Scenario],
    n_knn: usize,
) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::InsufficientData("scoring needs at least one rollout".into()));
    }
    let per_k = history
        .par_iter()
        .map(|r| {
            let v = behavior_vector(m, ad, &perturbed_scenario(r, cand), r.adv_id)?;
            knn_distance(&v, cache, n_knn)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_k.iter().sum::<f64>() / per_k.len() as f64)
}

fn default_n_cand() -> usize {
    32
}
fn default_n_int() -> usize {
    6
}
fn default_n_knn() -> usize {
    8
}
fn default_k_max() -> usize {
    5
}
fn default_history() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    #[serde(default = "default_n_cand")]
    pub n_cand: usize,
    #[serde(default = "default_n_int")]
    pub n_int: usize,
    #[serde(default = "default_n_knn")]
    pub n_knn: usize,
    /// Most recent rollouts consulted.
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    /// History boundary t_h.
    #[serde(default = "default_history")]
    pub history: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            n_cand: default_n_cand(),
            n_int: default_n_int(),
            n_knn: default_n_knn(),
            k_max: default_k_max(),
            history: default_history(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_int == 0 || self.n_int > self.n_cand {
            return Err(Error::Config(format!(
                "n_int = {} must lie in [1, n_cand = {}]",
                self.n_int, self.n_cand
            )));
        }
        if self.n_knn == 0 || self.k_max == 0 {
            return Err(Error::Config("n_knn and k_max must be positive".into()));
        }
        Ok(())
    }
}

/// All candidates with their closeness, the retained subset and the
/// scores of retained candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Trajectory>,
    pub closeness: Vec<f64>,
    /// Retained indices in ascending closeness order.
    pub retained: Vec<usize>,
    /// `d_adv` per candidate; `None` for filtered-out candidates and for
    /// random selection.
    pub scores: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub chosen: usize,
    pub set: CandidateSet,
}

impl Selection {
    pub fn trajectory(&self) -> &Trajectory {
        &self.set.candidates[self.chosen]
    }
}

fn recent(history: &[Scenario], k_max: usize) -> Result<&[Scenario]> {
    if history.is_empty() {
        return Err(Error::InsufficientData("selection needs at least one rollout".into()));
    }
    Ok(&history[history.len().saturating_sub(k_max)..])
}

fn filtered(candidates: Vec<Trajectory>, history: &[Scenario], cfg: &SelectionConfig) -> Result<CandidateSet> {
    let egos: Vec<&Trajectory> = history.iter().map(|r| &r.trajectories[r.ego_id]).collect();
    let closeness = candidates
        .par_iter()
        .map(|c| collision_closeness(c, &egos, cfg.history))
        .collect::<Result<Vec<f64>>>()?;
    let retained = filter_interactive(&closeness, cfg.n_int)?;
    let n = candidates.len();
    Ok(CandidateSet {
        candidates,
        closeness,
        retained,
        scores: vec![None; n],
    })
}

/// Filters `candidates` by closeness to the historical egos and returns the
/// retained candidate with the smallest score, ties by lower index.
pub fn select_from_candidates(
    m: &EmbeddingModel,
    ad: Option<&Adapter>,
    cache: &UnsafeCache,
    candidates: Vec<Trajectory>,
    history: &[Scenario],
    cfg: &SelectionConfig,
) -> Result<Selection> {
    cfg.validate()?;
    let history = recent(history, cfg.k_max)?;
    let mut set = filtered(candidates, history, cfg)?;
    let scored = set
        .retained
        .par_iter()
        .map(|&i| score_candidate(m, ad, cache, &set.candidates[i], history, cfg.n_knn).map(|d| (i, d)))
        .collect::<Result<Vec<_>>>()?;
    for &(i, d) in &scored {
        set.scores[i] = Some(d);
    }
    let chosen = scored
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("n_int >= 1")
        .0;
    Ok(Selection { chosen, set })
}

/// Candidates for the next round: sampled around the adversary of `s`, with
/// ego-crossing goals taken from the most recent rollout's ego rather than
/// any future ego plan.
fn round_candidates(s: &Scenario, history: &[Scenario], cfg: &SelectionConfig, seed: u64) -> Result<Vec<Trajectory>> {
    let last = history.last().ok_or_else(|| Error::InsufficientData("no rollouts".into()))?;
    let reference = s.with_trajectory(s.ego_id, last.trajectories[last.ego_id].clone());
    sample_candidates(&reference, cfg.history, cfg.n_cand, seed)
}

/// Samples, filters and scores candidates for the adversary of `s`.
pub fn select_adversary(
    s: &Scenario,
    m: &EmbeddingModel,
    ad: Option<&Adapter>,
    cache: &UnsafeCache,
    history: &[Scenario],
    cfg: &SelectionConfig,
    seed: u64,
) -> Result<Selection> {
    cfg.validate()?;
    let history = recent(history, cfg.k_max)?;
    let candidates = round_candidates(s, history, cfg, seed)?;
    select_from_candidates(m, ad, cache, candidates, history, cfg)
}

/// Baseline: a uniformly random candidate from the same filtered set.
pub fn select_random(s: &Scenario, history: &[Scenario], cfg: &SelectionConfig, seed: u64) -> Result<Selection> {
    cfg.validate()?;
    let history = recent(history, cfg.k_max)?;
    let candidates = round_candidates(s, history, cfg, seed)?;
    let set = filtered(candidates, history, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a4d);
    let chosen = set.retained[rng.gen_range(0..set.retained.len())];
    Ok(Selection { chosen, set })
}

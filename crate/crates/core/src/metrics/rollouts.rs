use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::cluster::ClusteringReport;
use super::distribution::wasserstein_1d;
use crate::error::{Error, Result};
use crate::rollout::{Initiator, Outcome, RolloutResult};
use crate::scenario::synth::NEAR_MISS_THRESHOLD;
use crate::scenario::{wrap_angle, Scenario, Trajectory};

/// Percentage of rollouts ending in each outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRates {
    pub success: f64,
    pub crash: f64,
    pub out_of_road: f64,
    pub timeout: f64,
}

impl OutcomeRates {
    pub fn get(&self, o: Outcome) -> f64 {
        match o {
            Outcome::Success => self.success,
            Outcome::Crash => self.crash,
            Outcome::OutOfRoad => self.out_of_road,
            Outcome::Timeout => self.timeout,
        }
    }
}

pub fn outcome_rates<'a>(results: impl IntoIterator<Item = &'a RolloutResult>) -> Result<OutcomeRates> {
    let mut counts = [0usize; 4];
    for r in results {
        counts[Outcome::ALL.iter().position(|&o| o == r.outcome).expect("listed")] += 1;
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::InsufficientData("no rollouts".into()));
    }
    let pct = |c: usize| 100.0 * c as f64 / n as f64;
    Ok(OutcomeRates {
        success: pct(counts[0]),
        crash: pct(counts[1]),
        out_of_road: pct(counts[2]),
        timeout: pct(counts[3]),
    })
}

/// Yaw rates (rad/s) and accelerations (m/s²) over consecutive valid steps.
pub fn kinematic_samples(traj: &Trajectory) -> (Vec<f64>, Vec<f64>) {
    let mut yaw = Vec::new();
    let mut acc = Vec::new();
    for w in traj.states.windows(2) {
        if w[0].valid && w[1].valid {
            yaw.push(wrap_angle(w[1].heading - w[0].heading) / traj.dt);
            acc.push((w[1].speed - w[0].speed) / traj.dt);
        }
    }
    (yaw, acc)
}

/// Yaw-rate and acceleration samples pooled over the adversaries of `scenarios`.
pub fn adversary_pools<'a>(scenarios: impl IntoIterator<Item = &'a Scenario>) -> (Vec<f64>, Vec<f64>) {
    let mut yaw = Vec::new();
    let mut acc = Vec::new();
    for s in scenarios {
        let (y, a) = kinematic_samples(&s.trajectories[s.adv_id]);
        yaw.extend(y);
        acc.extend(a);
    }
    (yaw, acc)
}

/// Raw 1-Wasserstein distances between the pooled adversary yaw rates and
/// accelerations of `results` and of `reference`.
pub fn realism_wd<'a>(
    results: impl IntoIterator<Item = &'a RolloutResult>,
    reference: &[Scenario],
) -> Result<(f64, f64)> {
    let (ry, ra) = adversary_pools(results.into_iter().map(|r| &r.realized));
    let (gy, ga) = adversary_pools(reference);
    Ok((wasserstein_1d(&ry, &gy)?, wasserstein_1d(&ra, &ga)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Causality {
    AdvInitiated,
    EgoInitiated,
    NearMiss,
    None,
}

impl Causality {
    pub const ALL: [Causality; 4] = [
        Causality::AdvInitiated,
        Causality::EgoInitiated,
        Causality::NearMiss,
        Causality::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Causality::AdvInitiated => "adv_initiated",
            Causality::EgoInitiated => "ego_initiated",
            Causality::NearMiss => "near_miss",
            Causality::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    InLine,
    Glancing,
    TBone,
    Oblique,
    HeadOn,
}

impl Geometry {
    pub const ALL: [Geometry; 5] = [
        Geometry::InLine,
        Geometry::Glancing,
        Geometry::TBone,
        Geometry::Oblique,
        Geometry::HeadOn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Geometry::InLine => "in_line",
            Geometry::Glancing => "glancing",
            Geometry::TBone => "t_bone",
            Geometry::Oblique => "oblique",
            Geometry::HeadOn => "head_on",
        }
    }
}

/// Ascending bin edges (degrees) separating the five geometry classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryBins {
    pub edges_deg: [f64; 4],
}

impl Default for GeometryBins {
    fn default() -> Self {
        Self {
            edges_deg: [30.0, 70.0, 110.0, 150.0],
        }
    }
}

impl GeometryBins {
    /// Class of an impact angle in radians; each bin is closed below.
    pub fn classify(&self, angle: f64) -> Geometry {
        let a = angle.abs();
        let bin = self.edges_deg.iter().take_while(|&&e| a >= e.to_radians()).count();
        Geometry::ALL[bin]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionConfig {
    /// Box gap below which a collision-free rollout is a near miss, meters.
    pub near_miss_threshold: f64,
    pub bins: GeometryBins,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            near_miss_threshold: NEAR_MISS_THRESHOLD,
            bins: GeometryBins::default(),
        }
    }
}

/// Causality and, for collisions, geometry of one rollout. Collisions
/// without a front-contact initiator count as ego-initiated.
pub fn classify_interaction(r: &RolloutResult, cfg: &InteractionConfig) -> (Causality, Option<Geometry>) {
    match r.collision {
        Some(c) => {
            let causality = match c.initiator {
                Initiator::Adv => Causality::AdvInitiated,
                Initiator::Ego | Initiator::None => Causality::EgoInitiated,
            };
            (causality, Some(cfg.bins.classify(c.impact_angle)))
        }
        None if r.min_ego_adv_distance < cfg.near_miss_threshold => (Causality::NearMiss, None),
        None => (Causality::None, None),
    }
}

/// Rollout-level evaluation. Histograms count every rollout; the geometry
/// histogram files collision-free rollouts under "none".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rollouts: usize,
    pub rates: OutcomeRates,
    pub yaw_wd: f64,
    pub acc_wd: f64,
    pub causality: BTreeMap<String, usize>,
    pub geometry: BTreeMap<String, usize>,
    #[serde(default)]
    pub clustering: Option<ClusteringReport>,
    #[serde(default)]
    pub probe_accuracy: Option<f64>,
}

pub fn evaluate_rollouts(results: &[RolloutResult], reference: &[Scenario], cfg: &InteractionConfig) -> Result<EvalReport> {
    let rates = outcome_rates(results)?;
    let (yaw_wd, acc_wd) = realism_wd(results, reference)?;
    let mut causality: BTreeMap<String, usize> = Causality::ALL.iter().map(|c| (c.name().to_string(), 0)).collect();
    let mut geometry: BTreeMap<String, usize> = Geometry::ALL
        .iter()
        .map(|g| g.name())
        .chain(["none"])
        .map(|g| (g.to_string(), 0))
        .collect();
    for r in results {
        let (c, g) = classify_interaction(r, cfg);
        *causality.get_mut(c.name()).expect("listed") += 1;
        *geometry.get_mut(g.map_or("none", Geometry::name)).expect("listed") += 1;
    }
    Ok(EvalReport {
        rollouts: results.len(),
        rates,
        yaw_wd,
        acc_wd,
        causality,
        geometry,
        clustering: None,
        probe_accuracy: None,
    })
}

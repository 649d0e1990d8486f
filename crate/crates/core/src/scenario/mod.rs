//! Scenario data model: agent states, trajectories, map context, local
//! reference frames and the constant-velocity counterfactual.

pub(crate) mod io;
pub mod synth;

pub use io::{load_scenarios, save_scenarios, scenarios_from_jsonl, scenarios_to_jsonl, Provenance};
pub use synth::{synth_generate, synth_generate_with_meta, SynthConfig, SynthMeta, Template};

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Default simulation step in seconds.
pub const DEFAULT_DT: f64 = 0.1;

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Planar pose of an agent center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }
}

/// State of one agent at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    /// Radians in (−π, π].
    pub heading: f64,
    /// Meters per second, never negative.
    pub speed: f64,
    /// Whether an observation is present at this step.
    pub valid: bool,
}

impl AgentState {
    /// A valid state; the heading is wrapped and speed clamped at zero.
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
            speed: speed.max(0.0),
            valid: true,
        }
    }

    pub fn invalid() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            speed: 0.0,
            valid: false,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.heading)
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// Velocity vector implied by heading and speed.
    pub fn velocity(&self) -> [f64; 2] {
        [self.speed * self.heading.cos(), self.speed * self.heading.sin()]
    }
}

/// Fixed-length sequence of states sampled every `dt` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<AgentState>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(states: Vec<AgentState>, dt: f64) -> Self {
        Self { states, dt }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn is_valid_at(&self, t: usize) -> bool {
        self.states.get(t).is_some_and(|s| s.valid)
    }

    pub fn valid_count(&self) -> usize {
        self.states.iter().filter(|s| s.valid).count()
    }
}

/// Lane centerline with a drivable width.
#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub width: f64,
    pub points: Vec<[f64; 2]>,
}

/// A labeled static map point (stop sign, signal location, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct StaticFeature {
    pub label: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MapContext {
    pub lanes: Vec<Lane>,
    pub static_features: Vec<StaticFeature>,
}

/// Bounding box footprint of an agent, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentDims {
    pub length: f64,
    pub width: f64,
}

impl Default for AgentDims {
    fn default() -> Self {
        Self {
            length: 4.5,
            width: 2.0,
        }
    }
}

/// A base scenario: all agent trajectories, the map and the ego/adversary
/// designations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub trajectories: Vec<Trajectory>,
    pub map: MapContext,
    pub ego_id: usize,
    pub adv_id: usize,
    pub agent_dims: Vec<AgentDims>,
}

impl Scenario {
    pub fn num_agents(&self) -> usize {
        self.trajectories.len()
    }

    /// Number of steps T shared by all trajectories.
    pub fn horizon(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::len)
    }

    pub fn dt(&self) -> f64 {
        self.trajectories.first().map_or(DEFAULT_DT, |t| t.dt)
    }

    pub fn check_agent(&self, agent: usize) -> Result<()> {
        if agent >= self.num_agents() {
            return Err(Error::AgentIndex {
                index: agent,
                count: self.num_agents(),
            });
        }
        Ok(())
    }

    /// Copy of this scenario with one agent's trajectory swapped out.
    pub fn with_trajectory(&self, agent: usize, traj: Trajectory) -> Scenario {
        let mut out = self.clone();
        out.trajectories[agent] = traj;
        out
    }

    /// Checks every structural invariant of the data model.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, message: String| Error::Validation {
            id: self.id.clone(),
            field: field.to_string(),
            message,
        };
        let n = self.num_agents();
        if n < 2 {
            return Err(fail("agents", format!("need at least 2 agents, got {n}")));
        }
        if self.ego_id >= n {
            return Err(fail("ego_id", format!("{} out of range for {n} agents", self.ego_id)));
        }
        if self.adv_id >= n {
            return Err(fail("adv_id", format!("{} out of range for {n} agents", self.adv_id)));
        }
        if self.ego_id == self.adv_id {
            return Err(fail("adv_id", format!("equals ego_id {}", self.ego_id)));
        }
        if self.agent_dims.len() != n {
            return Err(fail(
                "dims",
                format!("{} entries for {n} agents", self.agent_dims.len()),
            ));
        }
        for (i, d) in self.agent_dims.iter().enumerate() {
            if !(d.length > 0.0 && d.width > 0.0) {
                return Err(fail("dims", format!("agent {i} has non-positive dims")));
            }
        }
        let horizon = self.horizon();
        let dt = self.dt();
        if horizon == 0 {
            return Err(fail("T", "empty trajectories".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(fail("dt", format!("must be positive, got {dt}")));
        }
        for (i, traj) in self.trajectories.iter().enumerate() {
            if traj.len() != horizon {
                return Err(fail(
                    "T",
                    format!("agent {i} has {} steps, expected {horizon}", traj.len()),
                ));
            }
            if traj.dt != dt {
                return Err(fail("dt", format!("agent {i} has dt {}, expected {dt}", traj.dt)));
            }
            for (t, s) in traj.states.iter().enumerate() {
                if !(s.x.is_finite() && s.y.is_finite() && s.heading.is_finite() && s.speed.is_finite()) {
                    return Err(fail("states", format!("agent {i} step {t} not finite")));
                }
                if !(s.heading > -PI && s.heading <= PI) {
                    return Err(fail(
                        "heading",
                        format!("agent {i} step {t}: {} outside (-pi, pi]", s.heading),
                    ));
                }
                if s.speed < 0.0 {
                    return Err(fail("speed", format!("agent {i} step {t}: negative speed")));
                }
            }
        }
        for (i, lane) in self.map.lanes.iter().enumerate() {
            if lane.points.len() < 2 {
                return Err(fail("map", format!("lane {i} has fewer than 2 points")));
            }
            if !(lane.width > 0.0) {
                return Err(fail("map", format!("lane {i} has non-positive width")));
            }
        }
        Ok(())
    }
}

/// Number of per-step features in a [`FeatureTensor`] row.
pub const FEATURE_WIDTH: usize = 6;

/// All agents' trajectories expressed in the local frame of a target agent
/// at an anchor step.
///
/// Each row is `[x, y, cos(heading), sin(heading), speed, valid]`; rows of
/// unobserved steps are all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub rows: Vec<Vec<[f64; FEATURE_WIDTH]>>,
    pub target: usize,
    pub anchor_t: usize,
}

impl FeatureTensor {
    pub fn num_agents(&self) -> usize {
        self.rows.len()
    }

    pub fn horizon(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

/// Rigidly transforms every agent into `agent`'s pose at `anchor_t`.
pub fn to_local_frame(s: &Scenario, agent: usize, anchor_t: usize) -> Result<FeatureTensor> {
    s.check_agent(agent)?;
    let anchor = s.trajectories[agent]
        .states
        .get(anchor_t)
        .filter(|st| st.valid)
        .ok_or(Error::InvalidAgentState {
            agent,
            step: anchor_t,
        })?;
    let (sin0, cos0) = anchor.heading.sin_cos();
    let (x0, y0, h0) = (anchor.x, anchor.y, anchor.heading);
    let rows = s
        .trajectories
        .iter()
        .map(|traj| {
            traj.states
                .iter()
                .map(|st| {
                    if !st.valid {
                        return [0.0; FEATURE_WIDTH];
                    }
                    let dx = st.x - x0;
                    let dy = st.y - y0;
                    let lx = cos0 * dx + sin0 * dy;
                    let ly = -sin0 * dx + cos0 * dy;
                    let (sh, ch) = wrap_angle(st.heading - h0).sin_cos();
                    [lx, ly, ch, sh, st.speed, 1.0]
                })
                .collect()
        })
        .collect();
    Ok(FeatureTensor {
        rows,
        target: agent,
        anchor_t,
    })
}

/// Replaces the trajectory from `from_t` on with straight-line motion at the
/// displacement observed between `from_t - 1` and `from_t`.
///
/// Heading is held at its value at `from_t`. Steps before `from_t` are
/// copied unchanged.
pub fn constant_velocity_extrapolate(traj: &Trajectory, from_t: usize) -> Result<Trajectory> {
    if from_t == 0 || from_t >= traj.len() {
        return Err(Error::Config(format!(
            "extrapolation step {from_t} must lie in [1, {})",
            traj.len()
        )));
    }
    let prev = traj.states[from_t - 1];
    let cur = traj.states[from_t];
    if !prev.valid {
        return Err(Error::InvalidAgentState {
            agent: 0,
            step: from_t - 1,
        });
    }
    if !cur.valid {
        return Err(Error::InvalidAgentState { agent: 0, step: from_t });
    }
    let dx = cur.x - prev.x;
    let dy = cur.y - prev.y;
    let speed = dx.hypot(dy) / traj.dt;
    let mut states = traj.states.clone();
    for (k, st) in states.iter_mut().enumerate().skip(from_t) {
        let n = (k - from_t) as f64;
        *st = AgentState {
            x: cur.x + n * dx,
            y: cur.y + n * dy,
            heading: cur.heading,
            speed,
            valid: true,
        };
    }
    Ok(Trajectory::new(states, traj.dt))
}

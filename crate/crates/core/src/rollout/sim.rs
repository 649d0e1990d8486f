//! Step-by-step kinematic simulation of the ego against one adversary with
//! replayed background traffic.

use serde::{Deserialize, Serialize};

use super::geometry::{box_gap, front_half, obb_collision, off_road};
use crate::error::{Error, Result};
use crate::safety::pair_ttc;
use crate::scenario::{wrap_angle, AgentDims, AgentState, Scenario, Trajectory};

/// The ego succeeds when its final position lies within this distance of
/// its original final position.
pub const GOAL_RADIUS: f64 = 3.0;
/// Agents farther apart than this are ignored by the reactive ego's TTC check.
const EGO_TTC_GATING: f64 = 50.0;
/// Acceleration the reactive ego uses to regain its desired speed.
const EGO_RESUME_ACCEL: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Crash,
    OutOfRoad,
    Timeout,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [Outcome::Success, Outcome::Crash, Outcome::OutOfRoad, Outcome::Timeout];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Crash => "crash",
            Outcome::OutOfRoad => "out_of_road",
            Outcome::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initiator {
    Ego,
    Adv,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionInfo {
    /// First step with overlapping boxes.
    pub step: usize,
    /// Agent the ego collided with.
    pub other: usize,
    /// Absolute heading difference at contact, radians in [0, π].
    pub impact_angle: f64,
    pub initiator: Initiator,
}

/// One simulated rollout. `collision` is present iff the outcome is a crash.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// The base scenario with every trajectory replaced by its realization;
    /// states after an early termination are invalid.
    pub realized: Scenario,
    pub outcome: Outcome,
    /// Smallest ego–adversary box gap from the history boundary on, meters.
    pub min_ego_adv_distance: f64,
    pub collision: Option<CollisionInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReactiveEgo {
    /// Cruise speed in m/s; the ego's speed at the history boundary if unset.
    #[serde(default)]
    pub desired_speed: Option<f64>,
    #[serde(default = "default_brake_decel")]
    pub brake_decel: f64,
    #[serde(default = "default_ttc_trigger")]
    pub ttc_trigger: f64,
}

fn default_brake_decel() -> f64 {
    6.0
}
fn default_ttc_trigger() -> f64 {
    2.5
}

impl Default for ReactiveEgo {
    fn default() -> Self {
        Self {
            desired_speed: None,
            brake_decel: default_brake_decel(),
            ttc_trigger: default_ttc_trigger(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EgoPolicy {
    /// Follows the logged ego trajectory exactly.
    #[default]
    Replay,
    /// Follows the logged route at a constant speed. Once the time to
    /// collision with some agent drops below the trigger it brakes at a
    /// constant rate until that agent stops closing.
    Reactive(ReactiveEgo),
}

impl EgoPolicy {
    pub fn validate(&self) -> Result<()> {
        if let EgoPolicy::Reactive(p) = self {
            let speed_ok = p.desired_speed.is_none_or(|v| v > 0.0);
            if !(p.brake_decel > 0.0 && p.ttc_trigger > 0.0 && speed_ok) {
                return Err(Error::Config("reactive ego parameters must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PursuitParams {
    /// Steps ahead on the goal trajectory used as the steering target.
    pub lookahead_steps: usize,
    /// Proportional gain on the speed error, 1/s.
    pub speed_gain: f64,
    /// Proportional gain on the along-track position error, 1/s².
    pub position_gain: f64,
    pub max_accel: f64,
    pub max_curvature: f64,
}

impl Default for PursuitParams {
    fn default() -> Self {
        Self {
            lookahead_steps: 5,
            speed_gain: 2.0,
            position_gain: 1.0,
            max_accel: 6.0,
            max_curvature: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvMode {
    #[default]
    Openloop,
    Reactive,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdvBehavior {
    /// Replays the goal trajectory.
    OpenLoop(Trajectory),
    /// Tracks the goal trajectory with pure-pursuit steering and
    /// proportional speed control.
    ReactiveGoal { goal: Trajectory, params: PursuitParams },
}

impl AdvBehavior {
    pub fn new(mode: AdvMode, goal: Trajectory) -> Self {
        match mode {
            AdvMode::Openloop => AdvBehavior::OpenLoop(goal),
            AdvMode::Reactive => AdvBehavior::ReactiveGoal {
                goal,
                params: PursuitParams::default(),
            },
        }
    }

    pub fn goal(&self) -> &Trajectory {
        match self {
            AdvBehavior::OpenLoop(g) => g,
            AdvBehavior::ReactiveGoal { goal, .. } => goal,
        }
    }
}

/// Arc-length parameterized polyline through the valid logged positions.
struct Route {
    points: Vec<[f64; 2]>,
    cum: Vec<f64>,
}

impl Route {
    fn new(traj: &Trajectory) -> Self {
        let points: Vec<[f64; 2]> = traj.states.iter().filter(|s| s.valid).map(|s| s.position()).collect();
        let mut cum = vec![0.0; points.len()];
        for i in 1..points.len() {
            cum[i] = cum[i - 1] + (points[i][0] - points[i - 1][0]).hypot(points[i][1] - points[i - 1][1]);
        }
        Self { points, cum }
    }

    /// Arc length of the point closest to `p`.
    fn project(&self, p: [f64; 2]) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for i in 1..self.points.len() {
            let (a, b) = (self.points[i - 1], self.points[i]);
            let ab = [b[0] - a[0], b[1] - a[1]];
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = if len2 > 0.0 {
                (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            if d < best.0 {
                best = (d, self.cum[i - 1] + t * (self.cum[i] - self.cum[i - 1]));
            }
        }
        best.1
    }

    /// Position and tangent heading at arc length `s`; extrapolates past
    /// the last point along the final segment.
    fn at(&self, s: f64, fallback_heading: f64) -> ([f64; 2], f64) {
        let n = self.points.len();
        if n < 2 {
            return (self.points.first().copied().unwrap_or([0.0, 0.0]), fallback_heading);
        }
        let i = match self.cum.iter().position(|&c| c >= s) {
            Some(0) => 1,
            Some(i) => i,
            None => n - 1,
        };
        // skip zero-length segments when choosing the tangent
        let mut j = i;
        while j > 1 && self.cum[j] == self.cum[j - 1] {
            j -= 1;
        }
        let (a, b) = (self.points[j - 1], self.points[j]);
        let seg = self.cum[j] - self.cum[j - 1];
        if seg == 0.0 {
            return (self.points[i], fallback_heading);
        }
        let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
        let t = (s - self.cum[j - 1]) / seg;
        ([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], heading)
    }
}

fn pursuit_step(cur: AgentState, goal: &Trajectory, t: usize, p: &PursuitParams, dt: f64) -> AgentState {
    let n = goal.len();
    let target = goal.states[(t - 1 + p.lookahead_steps).min(n - 1)];
    let reference = goal.states[t - 1];
    let (dx, dy) = (target.x - cur.x, target.y - cur.y);
    let ld = dx.hypot(dy);
    let curvature = if ld > 1e-6 {
        let alpha = wrap_angle(dy.atan2(dx) - cur.heading);
        (2.0 * alpha.sin() / ld).clamp(-p.max_curvature, p.max_curvature)
    } else {
        0.0
    };
    let (s, c) = cur.heading.sin_cos();
    let along = (reference.x - cur.x) * c + (reference.y - cur.y) * s;
    let accel = (p.speed_gain * (goal.states[t].speed - cur.speed) + p.position_gain * along)
        .clamp(-p.max_accel, p.max_accel);
    let speed = (cur.speed + accel * dt).max(0.0);
    let dist = 0.5 * (cur.speed + speed) * dt;
    let dheading = curvature * dist;
    let mid = cur.heading + 0.5 * dheading;
    AgentState::new(cur.x + dist * mid.cos(), cur.y + dist * mid.sin(), cur.heading + dheading, speed)
}

fn state_vec(s: &AgentState) -> [f64; 4] {
    let v = s.velocity();
    [s.x, s.y, v[0], v[1]]
}

fn initiator(ego: &AgentState, ego_dims: AgentDims, other: &AgentState, other_dims: AgentDims, other_is_adv: bool) -> Initiator {
    let (ef, efd) = front_half(ego.pose(), ego_dims);
    let (of, ofd) = front_half(other.pose(), other_dims);
    let ego_front = obb_collision(ef, efd, other.pose(), other_dims);
    let other_front = obb_collision(of, ofd, ego.pose(), ego_dims);
    match (ego_front, other_front) {
        (true, false) => Initiator::Ego,
        // both fronts in contact counts against the adversary
        (_, true) if other_is_adv => Initiator::Adv,
        _ => Initiator::None,
    }
}

/// Runs the scenario forward from `t_h`. Background agents replay, the ego
/// follows `ego` and the adversary follows `adv`. Stops at the first ego
/// collision or off-road step; later states are marked invalid.
pub fn simulate(s: &Scenario, ego: &EgoPolicy, adv: &AdvBehavior, t_h: usize) -> Result<RolloutResult> {
    ego.validate()?;
    let n = s.horizon();
    let dt = s.dt();
    let (e, a) = (s.ego_id, s.adv_id);
    if t_h >= n {
        return Err(Error::Config(format!("history boundary {t_h} outside horizon {n}")));
    }
    let goal = adv.goal();
    if goal.len() != n {
        return Err(Error::Shape(format!("goal trajectory has {} steps, scenario {n}", goal.len())));
    }
    for (agent, tr) in [(e, &s.trajectories[e]), (a, goal)] {
        if !tr.is_valid_at(t_h) {
            return Err(Error::InvalidAgentState { agent, step: t_h });
        }
    }

    let mut out = s.trajectories.clone();
    out[a].states[t_h..].copy_from_slice(&goal.states[t_h..]);
    let route = Route::new(&s.trajectories[e]);
    let mut ego_s = route.project(out[e].states[t_h].position());
    let desired = match ego {
        EgoPolicy::Reactive(p) => p.desired_speed.unwrap_or(out[e].states[t_h].speed),
        EgoPolicy::Replay => 0.0,
    };
    let check_road = !s.map.lanes.is_empty();
    let dims = &s.agent_dims;

    let mut outcome = None;
    let mut collision = None;
    let mut min_gap = f64::INFINITY;
    let mut last = n - 1;
    let mut braking_for: Option<usize> = None;
    for t in t_h..n {
        if t > t_h {
            if let AdvBehavior::ReactiveGoal { goal, params } = adv {
                out[a].states[t] = pursuit_step(out[a].states[t - 1], goal, t, params, dt);
            }
            if let EgoPolicy::Reactive(p) = ego {
                let cur = out[e].states[t - 1];
                let ttc = |j: usize| {
                    let other = out[j].states[t - 1];
                    other
                        .valid
                        .then(|| pair_ttc(state_vec(&cur), state_vec(&other), EGO_TTC_GATING))
                        .flatten()
                };
                // braking latches until the triggering agent stops closing
                braking_for = braking_for
                    .filter(|&j| ttc(j).is_some())
                    .or_else(|| (0..out.len()).find(|&j| j != e && ttc(j).is_some_and(|v| v < p.ttc_trigger)));
                let speed = if braking_for.is_some() {
                    (cur.speed - p.brake_decel * dt).max(0.0)
                } else if cur.speed < desired {
                    (cur.speed + EGO_RESUME_ACCEL * dt).min(desired)
                } else {
                    desired
                };
                ego_s += 0.5 * (cur.speed + speed) * dt;
                let (pos, heading) = route.at(ego_s, cur.heading);
                out[e].states[t] = AgentState::new(pos[0], pos[1], heading, speed);
            }
        }
        let es = out[e].states[t];
        if !es.valid {
            continue;
        }
        let adv_state = out[a].states[t];
        if adv_state.valid {
            min_gap = min_gap.min(box_gap(es.pose(), dims[e], adv_state.pose(), dims[a]));
        }
        // adversary first, then background by index
        let others = std::iter::once(a).chain((0..out.len()).filter(|&j| j != e && j != a));
        for j in others {
            let os = out[j].states[t];
            if os.valid && obb_collision(es.pose(), dims[e], os.pose(), dims[j]) {
                collision = Some(CollisionInfo {
                    step: t,
                    other: j,
                    impact_angle: wrap_angle(es.heading - os.heading).abs(),
                    initiator: initiator(&es, dims[e], &os, dims[j], j == a),
                });
                break;
            }
        }
        if collision.is_some() {
            outcome = Some(Outcome::Crash);
        } else if check_road && off_road(es.position(), &s.map) {
            outcome = Some(Outcome::OutOfRoad);
        }
        if outcome.is_some() {
            last = t;
            break;
        }
    }
    for tr in out.iter_mut() {
        for st in tr.states[last + 1..].iter_mut() {
            *st = AgentState::invalid();
        }
    }
    let outcome = outcome.unwrap_or_else(|| {
        let original_end = s.trajectories[e].states.iter().rev().find(|st| st.valid);
        let realized_end = out[e].states.iter().rev().find(|st| st.valid);
        match (original_end, realized_end) {
            (Some(o), Some(r)) if (o.x - r.x).hypot(o.y - r.y) <= GOAL_RADIUS => Outcome::Success,
            _ => Outcome::Timeout,
        }
    });
    if collision.is_some_and(|c| c.other == a) {
        min_gap = 0.0;
    }
    let mut realized = s.clone();
    realized.trajectories = out;
    Ok(RolloutResult {
        realized,
        outcome,
        min_ego_adv_distance: min_gap,
        collision,
    })
}

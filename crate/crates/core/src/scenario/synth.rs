//! Synthetic traffic scenarios built from parameterized interaction
//! templates.
//!
//! Every template places the ego on a straight lane along +x through a
//! conflict point at the origin and scripts the adversary (agent 1) relative
//! to it. Contracts that depend on geometry (planted crashes, near misses,
//! collision-free variants) are enforced by rejection sampling against the
//! final noisy trajectories.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AgentDims, AgentState, Lane, MapContext, Scenario, Trajectory};
use crate::error::{Error, Result};
use crate::rollout::geometry::{box_gap, obb_collision};

/// Box gap below which two agents count as a near miss.
pub const NEAR_MISS_THRESHOLD: f64 = 2.0;

/// Impact angles (degrees) planted by the crash template, one per
/// collision-geometry bin.
pub const CRASH_ANGLES_DEG: [f64; 5] = [10.0, 50.0, 90.0, 130.0, 170.0];

const LANE_WIDTH: f64 = 3.5;
const MAX_ATTEMPTS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Crossing,
    Merging,
    CarFollowing,
    CutIn,
    NearMiss,
    Crash,
    BrakeBeforeCrossing,
    AccelerateIntoCrossing,
    AccelerateToClear,
    BrakeIntoCrossing,
    IsolatedBrake,
    IsolatedAccelerate,
}

impl Template {
    pub const ALL: [Template; 12] = [
        Template::Crossing,
        Template::Merging,
        Template::CarFollowing,
        Template::CutIn,
        Template::NearMiss,
        Template::Crash,
        Template::BrakeBeforeCrossing,
        Template::AccelerateIntoCrossing,
        Template::AccelerateToClear,
        Template::BrakeIntoCrossing,
        Template::IsolatedBrake,
        Template::IsolatedAccelerate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::Crossing => "crossing",
            Template::Merging => "merging",
            Template::CarFollowing => "car_following",
            Template::CutIn => "cut_in",
            Template::NearMiss => "near_miss",
            Template::Crash => "crash",
            Template::BrakeBeforeCrossing => "brake_before_crossing",
            Template::AccelerateIntoCrossing => "accelerate_into_crossing",
            Template::AccelerateToClear => "accelerate_to_clear",
            Template::BrakeIntoCrossing => "brake_into_crossing",
            Template::IsolatedBrake => "isolated_brake",
            Template::IsolatedAccelerate => "isolated_accelerate",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown template `{name}`")))
    }

    /// Templates whose adversary never comes close to the ego.
    pub fn is_benign(self) -> bool {
        matches!(
            self,
            Template::Crossing
                | Template::Merging
                | Template::CarFollowing
                | Template::CutIn
                | Template::IsolatedBrake
                | Template::IsolatedAccelerate
        )
    }

    /// Templates whose adversary departs from constant velocity after the
    /// history boundary while on a conflict course with the ego.
    pub fn is_evasive(self) -> bool {
        matches!(self, Template::BrakeBeforeCrossing | Template::AccelerateToClear)
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_horizon() -> usize {
    60
}
fn default_dt() -> f64 {
    super::DEFAULT_DT
}
fn default_history() -> usize {
    20
}
fn default_pos_noise() -> f64 {
    0.01
}
fn default_speed_noise() -> f64 {
    0.05
}
fn default_max_background() -> usize {
    2
}

/// Template counts and noise levels for [`synth_generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Template name → number of scenarios.
    pub counts: BTreeMap<String, usize>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// History boundary t_h; scripted maneuvers start at or after it.
    #[serde(default = "default_history")]
    pub history: usize,
    /// Std-dev of positional noise, meters.
    #[serde(default = "default_pos_noise")]
    pub pos_noise: f64,
    /// Std-dev of speed noise, m/s.
    #[serde(default = "default_speed_noise")]
    pub speed_noise: f64,
    #[serde(default = "default_max_background")]
    pub max_background: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            counts: BTreeMap::new(),
            horizon: default_horizon(),
            dt: default_dt(),
            history: default_history(),
            pos_noise: default_pos_noise(),
            speed_noise: default_speed_noise(),
            max_background: default_max_background(),
        }
    }
}

impl SynthConfig {
    pub fn with_counts<'a>(counts: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        Self {
            counts: counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            ..Self::default()
        }
    }

    fn resolved_counts(&self) -> Result<Vec<(Template, usize)>> {
        let mut by_template = BTreeMap::new();
        for (name, &n) in &self.counts {
            by_template.insert(Template::from_name(name)?, n);
        }
        Ok(Template::ALL
            .into_iter()
            .filter_map(|t| by_template.get(&t).map(|&n| (t, n)))
            .collect())
    }

    fn check(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if self.history < 2 || self.history + 20 > self.horizon {
            return Err(Error::Config(format!(
                "history {} must be >= 2 and leave at least 20 future steps in horizon {}",
                self.history, self.horizon
            )));
        }
        if self.pos_noise < 0.0 || self.speed_noise < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ground truth recorded alongside each generated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthMeta {
    pub template: Template,
    /// Planted heading difference at impact (crash template), radians.
    pub planted_angle: Option<f64>,
    /// First step at which ego and adversary boxes overlap.
    pub impact_step: Option<usize>,
    /// Smallest ego–adversary box gap over the whole scenario.
    pub min_gap: f64,
}

/// Generates scenarios for every configured template, deterministic in `seed`.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<Vec<Scenario>> {
    Ok(synth_generate_with_meta(config, seed)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

/// As [`synth_generate`], also returning per-scenario ground truth.
pub fn synth_generate_with_meta(config: &SynthConfig, seed: u64) -> Result<Vec<(Scenario, SynthMeta)>> {
    config.check()?;
    let counts = config.resolved_counts()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (template, n) in counts {
        for i in 0..n {
            let generated = (0..MAX_ATTEMPTS)
                .find_map(|_| build(template, i, config, &mut rng))
                .ok_or_else(|| {
                    Error::Config(format!("template {template} could not satisfy its contract"))
                })?;
            let (mut scenario, meta) = generated;
            scenario.id = format!("{}-{:04}", template.name(), i);
            out.push((scenario, meta));
        }
    }
    Ok(out)
}

/// Straight path through `anchor` with optional smoothstep lateral shift.
#[derive(Debug, Clone, Copy)]
struct Path {
    anchor: [f64; 2],
    heading: f64,
    /// (offset, start arc length, transition length)
    shift: Option<(f64, f64, f64)>,
}

impl Path {
    fn straight(anchor: [f64; 2], heading: f64) -> Self {
        Self {
            anchor,
            heading,
            shift: None,
        }
    }

    fn lateral(&self, s: f64) -> (f64, f64) {
        match self.shift {
            None => (0.0, 0.0),
            Some((off, s0, len)) => {
                let u = ((s - s0) / len).clamp(0.0, 1.0);
                let val = off * u * u * (3.0 - 2.0 * u);
                let slope = if (0.0..=1.0).contains(&((s - s0) / len)) {
                    off * 6.0 * u * (1.0 - u) / len
                } else {
                    0.0
                };
                (val, slope)
            }
        }
    }

    fn state(&self, s: f64, speed: f64) -> AgentState {
        let (sn, cs) = self.heading.sin_cos();
        let (lat, slope) = self.lateral(s);
        AgentState::new(
            self.anchor[0] + s * cs - lat * sn,
            self.anchor[1] + s * sn + lat * cs,
            self.heading + slope.atan(),
            speed,
        )
    }
}

/// Speed per step: `v0` until `start`, then ramps toward `target` at `accel`.
fn speed_profile(n: usize, dt: f64, v0: f64, start: usize, accel: f64, target: f64) -> Vec<f64> {
    let mut v = v0;
    (0..n)
        .map(|t| {
            if t > start {
                let step = accel.abs() * dt;
                v = if target > v { (v + step).min(target) } else { (v - step).max(target) };
            }
            v.max(0.0)
        })
        .collect()
}

/// Arc length per step such that `s[at] == 0`.
fn arc_lengths(speeds: &[f64], dt: f64, at: usize) -> Vec<f64> {
    let mut s = vec![0.0; speeds.len()];
    for t in 1..speeds.len() {
        s[t] = s[t - 1] + 0.5 * dt * (speeds[t - 1] + speeds[t]);
    }
    let base = s[at.min(speeds.len() - 1)];
    s.iter().map(|v| v - base).collect()
}

/// Arc lengths anchored at a fractional step (linear interpolation).
fn arc_lengths_at(speeds: &[f64], dt: f64, at: f64) -> Vec<f64> {
    let raw = arc_lengths(speeds, dt, 0);
    let i = (at.floor() as usize).min(speeds.len() - 2);
    let frac = at - i as f64;
    let base = raw[i] + frac * (raw[i + 1] - raw[i]);
    raw.iter().map(|v| v - base).collect()
}

fn realize(path: &Path, speeds: &[f64], arcs: &[f64], dt: f64) -> Trajectory {
    Trajectory::new(
        speeds
            .iter()
            .zip(arcs)
            .map(|(&v, &s)| path.state(s, v))
            .collect(),
        dt,
    )
}

fn lane_through(anchor: [f64; 2], heading: f64) -> Lane {
    let (s, c) = heading.sin_cos();
    Lane {
        width: LANE_WIDTH,
        points: vec![
            [anchor[0] - 300.0 * c, anchor[1] - 300.0 * s],
            [anchor[0] + 300.0 * c, anchor[1] + 300.0 * s],
        ],
    }
}

struct Ctx<'a> {
    cfg: &'a SynthConfig,
    n: usize,
    dt: f64,
    th: usize,
}

impl Ctx<'_> {
    /// Ego cruising along +x, reaching the origin at fractional step `at`.
    fn ego(&self, v: f64, at: f64) -> Trajectory {
        let speeds = vec![v; self.n];
        let arcs = arc_lengths_at(&speeds, self.dt, at);
        realize(&Path::straight([0.0, 0.0], 0.0), &speeds, &arcs, self.dt)
    }
}

/// Speed profile shared by the braking or accelerating templates; returns
/// the initial speed and per-step speeds.
fn maneuver(rng: &mut ChaCha8Rng, braking: bool, ctx: &Ctx, start: usize) -> (f64, Vec<f64>) {
    let rate = rng.gen_range(2.0..4.5);
    if braking {
        let v0 = rng.gen_range(8.0..12.0);
        let target = v0 * rng.gen_range(0.3..0.6);
        (v0, speed_profile(ctx.n, ctx.dt, v0, start, rate, target))
    } else {
        let v0 = rng.gen_range(6.0..10.0);
        let target = v0 + rng.gen_range(6.0..8.0);
        (v0, speed_profile(ctx.n, ctx.dt, v0, start, rate, target))
    }
}

fn crossing_heading(rng: &mut ChaCha8Rng, lo_deg: f64, hi_deg: f64) -> f64 {
    let a = rng.gen_range(lo_deg..hi_deg).to_radians();
    if rng.gen_bool(0.5) {
        a
    } else {
        -a
    }
}

fn build(template: Template, index: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Option<(Scenario, SynthMeta)> {
    let ctx = Ctx {
        cfg,
        n: cfg.horizon,
        dt: cfg.dt,
        th: cfg.history,
    };
    let n = ctx.n;
    let th = ctx.th as f64;
    let last = (n - 1) as f64;
    let ego_lane = lane_through([0.0, 0.0], 0.0);
    let mut lanes = vec![ego_lane];
    let mut planted_angle = None;

    let v_e = rng.gen_range(8.0..13.0);
    let (ego, adv) = match template {
        Template::Crossing => {
            let t_ce = rng.gen_range(th + 5.0..last - 5.0);
            let heading = crossing_heading(rng, 60.0, 120.0);
            let v_a = rng.gen_range(7.0..13.0);
            let gap_steps = rng.gen_range(25.0..40.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let speeds = vec![v_a; n];
            let arcs = arc_lengths_at(&speeds, ctx.dt, t_ce + gap_steps);
            lanes.push(lane_through([0.0, 0.0], heading));
            (
                ctx.ego(v_e, t_ce),
                realize(&Path::straight([0.0, 0.0], heading), &speeds, &arcs, ctx.dt),
            )
        }
        Template::Merging => {
            let v_a = v_e + rng.gen_range(-1.0..1.0);
            let lead = rng.gen_range(15.0..30.0);
            let ego = ctx.ego(v_e, 0.0);
            let start_step = rng.gen_range(ctx.th - 5..ctx.th + 15);
            let speeds = vec![v_a; n];
            let arcs = arc_lengths(&speeds, ctx.dt, 0);
            let path = Path {
                anchor: [lead, -4.0],
                heading: 0.0,
                shift: Some((4.0, arcs[start_step], 40.0)),
            };
            lanes.push(lane_through([0.0, -4.0], 0.0));
            (ego, realize(&path, &speeds, &arcs, ctx.dt))
        }
        Template::CarFollowing => {
            let headway = rng.gen_range(1.5..3.0);
            let v0 = v_e + rng.gen_range(-0.5..0.5);
            let start = rng.gen_range(ctx.th - 10..ctx.th + 10);
            let accel = rng.gen_range(0.5..1.5);
            let target = if rng.gen_bool(0.5) { v0 + 3.0 } else { (v0 - 3.0).max(2.0) };
            let speeds = speed_profile(n, ctx.dt, v0, start, accel, target);
            let arcs = arc_lengths(&speeds, ctx.dt, 0);
            (
                ctx.ego(v_e, 0.0),
                realize(&Path::straight([headway * v_e, 0.0], 0.0), &speeds, &arcs, ctx.dt),
            )
        }
        Template::CutIn => {
            let lead = rng.gen_range(14.0..25.0);
            let v_a = v_e - rng.gen_range(0.0..1.5);
            let start_step = rng.gen_range(ctx.th..ctx.th + 10);
            let len = rng.gen_range(25.0..40.0);
            let speeds = vec![v_a; n];
            let arcs = arc_lengths(&speeds, ctx.dt, 0);
            let path = Path {
                anchor: [lead, LANE_WIDTH],
                heading: 0.0,
                shift: Some((-LANE_WIDTH, arcs[start_step], len)),
            };
            lanes.push(lane_through([0.0, LANE_WIDTH], 0.0));
            (ctx.ego(v_e, 0.0), realize(&path, &speeds, &arcs, ctx.dt))
        }
        Template::NearMiss => {
            let t_ce = rng.gen_range(th + 8.0..last - 8.0);
            let heading = crossing_heading(rng, 70.0, 110.0);
            let v_a = rng.gen_range(7.0..12.0);
            let offset = rng.gen_range(3.0..10.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let speeds = vec![v_a; n];
            let arcs = arc_lengths_at(&speeds, ctx.dt, t_ce + offset);
            lanes.push(lane_through([0.0, 0.0], heading));
            (
                ctx.ego(v_e, t_ce),
                realize(&Path::straight([0.0, 0.0], heading), &speeds, &arcs, ctx.dt),
            )
        }
        Template::Crash => {
            let delta_deg = CRASH_ANGLES_DEG[index % CRASH_ANGLES_DEG.len()];
            let delta = delta_deg.to_radians() * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            planted_angle = Some(delta.abs());
            let t_c = rng.gen_range(th + 15.0..last - 5.0);
            let v0 = if delta_deg < 30.0 {
                v_e + rng.gen_range(1.0..3.0)
            } else {
                rng.gen_range(6.0..11.0)
            };
            let speeds = speed_profile(n, ctx.dt, v0, ctx.th, rng.gen_range(1.0..2.5), v0 + 4.0);
            let arcs = arc_lengths_at(&speeds, ctx.dt, t_c);
            lanes.push(lane_through([0.0, 0.0], delta));
            (
                ctx.ego(v_e, t_c),
                realize(&Path::straight([0.0, 0.0], delta), &speeds, &arcs, ctx.dt),
            )
        }
        Template::BrakeBeforeCrossing
        | Template::BrakeIntoCrossing
        | Template::AccelerateToClear
        | Template::AccelerateIntoCrossing => {
            // Paired templates share one maneuver distribution; only the
            // constant-velocity arrival relative to the ego differs, so the
            // label depends on the interaction rather than the kinematics.
            let heading = crossing_heading(rng, 70.0, 110.0);
            let t_m = rng.gen_range(ctx.th..ctx.th + 5);
            let braking = matches!(template, Template::BrakeBeforeCrossing | Template::BrakeIntoCrossing);
            let (v0, speeds) = maneuver(rng, braking, &ctx, t_m);
            let t_ce = t_m as f64 + rng.gen_range(22.0..34.0);
            if t_ce > last - 3.0 {
                return None;
            }
            let arcs = match template {
                // the constant-velocity schedule would meet the ego
                Template::BrakeBeforeCrossing | Template::AccelerateToClear => {
                    on_cv_schedule(&speeds, v0, t_m, t_ce + rng.gen_range(-3.0..3.0), ctx.dt)
                }
                // the maneuver itself arrives just ahead of the ego
                Template::BrakeIntoCrossing => arc_lengths_at(&speeds, ctx.dt, t_ce - rng.gen_range(5.0..9.0)),
                // the maneuver itself arrives just behind the ego
                _ => arc_lengths_at(&speeds, ctx.dt, t_ce + rng.gen_range(5.0..9.0)),
            };
            lanes.push(lane_through([0.0, 0.0], heading));
            (
                ctx.ego(v_e, t_ce),
                realize(&Path::straight([0.0, 0.0], heading), &speeds, &arcs, ctx.dt),
            )
        }
        Template::IsolatedBrake | Template::IsolatedAccelerate => {
            let heading = rng.gen_range(-PI..PI);
            let t_m = rng.gen_range(ctx.th..ctx.th + 5);
            let (_, speeds) = maneuver(rng, template == Template::IsolatedBrake, &ctx, t_m);
            let arcs = arc_lengths(&speeds, ctx.dt, t_m);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let anchor = [rng.gen_range(-30.0..90.0), side * rng.gen_range(70.0..100.0)];
            lanes.push(lane_through(anchor, heading));
            (
                ctx.ego(v_e, rng.gen_range(0.0..last)),
                realize(&Path::straight(anchor, heading), &speeds, &arcs, ctx.dt),
            )
        }
    };

    let mut trajectories = vec![ego, adv];
    add_background(template, &mut trajectories, &mut lanes, v_e, &ctx, rng);
    add_noise(&mut trajectories, cfg, rng);

    let dims = vec![AgentDims::default(); trajectories.len()];
    let (impact_step, min_gap) = contact_profile(&trajectories[0], &trajectories[1], dims[0], dims[1]);

    // template contracts
    let ok = match template {
        Template::Crossing | Template::Merging | Template::CarFollowing | Template::CutIn => {
            impact_step.is_none() && min_gap > 3.0
        }
        Template::IsolatedBrake | Template::IsolatedAccelerate => isolated(&trajectories, ctx.th),
        Template::NearMiss => impact_step.is_none() && min_gap > 0.2 && min_gap < NEAR_MISS_THRESHOLD - 0.2,
        Template::Crash => impact_step.is_some_and(|k| k >= ctx.th + 5 && k + 3 < n),
        Template::BrakeBeforeCrossing | Template::AccelerateToClear => impact_step.is_none() && min_gap > 4.0,
        Template::AccelerateIntoCrossing | Template::BrakeIntoCrossing => impact_step.is_none() && min_gap < 3.0,
    };
    if !ok {
        return None;
    }
    // background agents must stay clear of the ego
    let ego_clear = (2..trajectories.len()).all(|b| {
        contact_profile(&trajectories[0], &trajectories[b], dims[0], dims[b]).1 > 1.0
    });
    if !ego_clear {
        return None;
    }

    let scenario = Scenario {
        id: String::new(),
        trajectories,
        map: MapContext {
            lanes,
            static_features: Vec::new(),
        },
        ego_id: 0,
        adv_id: 1,
        agent_dims: dims,
    };
    Some((
        scenario,
        SynthMeta {
            template,
            planted_angle,
            impact_step,
            min_gap,
        },
    ))
}

/// Arc lengths for `speeds` that coincide with a constant-`v0` schedule
/// through the origin at fractional step `t_cv`, up to step `from`.
fn on_cv_schedule(speeds: &[f64], v0: f64, from: usize, t_cv: f64, dt: f64) -> Vec<f64> {
    let cv = arc_lengths_at(&vec![v0; speeds.len()], dt, t_cv);
    arc_lengths(speeds, dt, from).iter().map(|a| a + cv[from]).collect()
}

/// Minimum center distance keeping every indicator of the adversary
/// unaffected by other agents, observed or extrapolated.
const ISOLATION_RADIUS: f64 = 40.0;

fn isolated(trajectories: &[Trajectory], th: usize) -> bool {
    let adv = &trajectories[1];
    let Ok(cv) = super::constant_velocity_extrapolate(adv, th) else {
        return false;
    };
    trajectories.iter().enumerate().filter(|&(i, _)| i != 1).all(|(_, other)| {
        other.states.iter().enumerate().all(|(t, o)| {
            [&adv.states[t], &cv.states[t]]
                .iter()
                .all(|a| (a.x - o.x).hypot(a.y - o.y) > ISOLATION_RADIUS)
        })
    })
}

fn add_background(
    template: Template,
    trajectories: &mut Vec<Trajectory>,
    lanes: &mut Vec<Lane>,
    v_e: f64,
    ctx: &Ctx<'_>,
    rng: &mut ChaCha8Rng,
) {
    let count = rng.gen_range(0..=ctx.cfg.max_background);
    let ego0 = trajectories[0].states[0];
    for k in 0..count {
        let traj = if k % 2 == 0 {
            // follower behind the ego in its lane
            let back = rng.gen_range(30.0..50.0);
            let v = v_e + rng.gen_range(-0.5..0.3);
            let speeds = vec![v; ctx.n];
            let arcs = arc_lengths(&speeds, ctx.dt, 0);
            realize(&Path::straight([ego0.x - back, 0.0], 0.0), &speeds, &arcs, ctx.dt)
        } else {
            // oncoming traffic in the opposite lane
            let side = if template == Template::CutIn { -LANE_WIDTH } else { LANE_WIDTH };
            let v = rng.gen_range(8.0..12.0);
            let start = rng.gen_range(40.0..90.0);
            let speeds = vec![v; ctx.n];
            let arcs = arc_lengths(&speeds, ctx.dt, 0);
            lanes.push(lane_through([0.0, side], PI));
            realize(&Path::straight([ego0.x + start, side], PI), &speeds, &arcs, ctx.dt)
        };
        trajectories.push(traj);
    }
}

fn add_noise(trajectories: &mut [Trajectory], cfg: &SynthConfig, rng: &mut ChaCha8Rng) {
    let pos = Normal::new(0.0, cfg.pos_noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let spd = Normal::new(0.0, cfg.speed_noise.max(f64::MIN_POSITIVE)).expect("finite std");
    for traj in trajectories.iter_mut() {
        for st in traj.states.iter_mut() {
            if cfg.pos_noise > 0.0 {
                st.x += pos.sample(rng);
                st.y += pos.sample(rng);
            }
            if cfg.speed_noise > 0.0 && st.speed > 0.0 {
                st.speed = (st.speed + spd.sample(rng)).max(0.0);
            }
        }
    }
}

/// First overlapping step and minimum box gap between two trajectories.
fn contact_profile(a: &Trajectory, b: &Trajectory, da: AgentDims, db: AgentDims) -> (Option<usize>, f64) {
    let mut first = None;
    let mut min_gap = f64::INFINITY;
    for (t, (sa, sb)) in a.states.iter().zip(&b.states).enumerate() {
        if !(sa.valid && sb.valid) {
            continue;
        }
        if first.is_none() && obb_collision(sa.pose(), da, sb.pose(), db) {
            first = Some(t);
        }
        min_gap = min_gap.min(box_gap(sa.pose(), da, sb.pose(), db));
    }
    (first, min_gap)
}

//! Surrogate safety indicators (time-to-collision, time headway, trajectory
//! anomaly), their aggregation into a relevance score, and the three-way
//! safe/neutral/unsafe labeling of observed-versus-counterfactual score
//! differences.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{constant_velocity_extrapolate, Scenario, Trajectory};

/// Minimum speed for a headway to be defined, m/s.
const THW_MIN_SPEED: f64 = 0.1;
/// Half-angle of the leader cone, radians.
const THW_CONE: f64 = std::f64::consts::PI / 6.0;

/// Weights, decay scales and gating for the relevance score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeuristicConfig {
    pub w_ttc: f64,
    pub w_thw: f64,
    pub w_anom: f64,
    /// Seconds.
    pub tau_ttc: f64,
    /// Seconds.
    pub tau_thw: f64,
    /// Meters; interactions beyond this range are ignored.
    pub gating_radius: f64,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self {
            w_ttc: 1.0,
            w_thw: 1.0,
            w_anom: 1.0,
            tau_ttc: 3.0,
            tau_thw: 2.0,
            gating_radius: 30.0,
        }
    }
}

impl HeuristicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_ttc < 0.0 || self.w_thw < 0.0 || self.w_anom < 0.0 {
            return Err(Error::Config("heuristic weights must be non-negative".into()));
        }
        if !(self.tau_ttc > 0.0 && self.tau_thw > 0.0 && self.gating_radius > 0.0) {
            return Err(Error::Config("heuristic scales must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SafetyLabel {
    Safe,
    Neutral,
    Unsafe,
}

impl SafetyLabel {
    pub const ALL: [SafetyLabel; 3] = [SafetyLabel::Safe, SafetyLabel::Neutral, SafetyLabel::Unsafe];

    /// Class index used by prototypes and probes.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Thresholds a score difference: safe below −δ, unsafe above δ.
    pub fn from_diff(d: f64, delta: f64) -> Self {
        if d < -delta {
            SafetyLabel::Safe
        } else if d > delta {
            SafetyLabel::Unsafe
        } else {
            SafetyLabel::Neutral
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SafetyLabel::Safe => "safe",
            SafetyLabel::Neutral => "neutral",
            SafetyLabel::Unsafe => "unsafe",
        }
    }
}

impl fmt::Display for SafetyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Observed and counterfactual relevance scores of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScores {
    pub gt: f64,
    pub fe: f64,
    pub diff: f64,
}

impl RelevanceScores {
    pub fn new(gt: f64, fe: f64) -> Self {
        Self { gt, fe, diff: gt - fe }
    }
}

fn check_indicator_agent(s: &Scenario, agent: usize) -> Result<()> {
    s.check_agent(agent)?;
    if s.trajectories[agent].valid_count() < 2 {
        return Err(Error::InsufficientData(format!(
            "agent {agent} of `{}` is valid on fewer than 2 steps",
            s.id
        )));
    }
    Ok(())
}

/// Instantaneous time-to-collision between two states, if closing within
/// the gating radius.
pub fn pair_ttc(a: [f64; 4], b: [f64; 4], gating_radius: f64) -> Option<f64> {
    // [x, y, vx, vy]
    let rx = b[0] - a[0];
    let ry = b[1] - a[1];
    let range = rx.hypot(ry);
    if range >= gating_radius {
        return None;
    }
    if range == 0.0 {
        return Some(0.0);
    }
    let closing = -(rx * (b[2] - a[2]) + ry * (b[3] - a[3])) / range;
    (closing > 0.0).then(|| range / closing)
}

fn kinematic(st: &crate::scenario::AgentState) -> [f64; 4] {
    let [vx, vy] = st.velocity();
    [st.x, st.y, vx, vy]
}

/// Minimum time-to-collision of `agent` against every other agent over all
/// steps, seconds.
pub fn min_ttc(s: &Scenario, agent: usize, cfg: &HeuristicConfig) -> Result<Option<f64>> {
    check_indicator_agent(s, agent)?;
    let me = &s.trajectories[agent];
    let mut best: Option<f64> = None;
    for (t, st) in me.states.iter().enumerate() {
        if !st.valid {
            continue;
        }
        let a = kinematic(st);
        for (o, other) in s.trajectories.iter().enumerate() {
            if o == agent || !other.states[t].valid {
                continue;
            }
            if let Some(ttc) = pair_ttc(a, kinematic(&other.states[t]), cfg.gating_radius) {
                best = Some(best.map_or(ttc, |b| b.min(ttc)));
            }
        }
    }
    Ok(best)
}

/// Minimum time headway to a leader inside the ±30° heading cone, seconds.
pub fn min_thw(s: &Scenario, agent: usize, cfg: &HeuristicConfig) -> Result<Option<f64>> {
    check_indicator_agent(s, agent)?;
    let me = &s.trajectories[agent];
    let mut best: Option<f64> = None;
    for (t, st) in me.states.iter().enumerate() {
        if !st.valid || st.speed < THW_MIN_SPEED {
            continue;
        }
        let (sh, ch) = st.heading.sin_cos();
        let gap = s
            .trajectories
            .iter()
            .enumerate()
            .filter(|&(o, other)| o != agent && other.states[t].valid)
            .filter_map(|(_, other)| {
                let rx = other.states[t].x - st.x;
                let ry = other.states[t].y - st.y;
                let range = rx.hypot(ry);
                if range >= cfg.gating_radius || range == 0.0 {
                    return None;
                }
                let cos_bearing = (rx * ch + ry * sh) / range;
                (cos_bearing >= THW_CONE.cos()).then_some(range)
            })
            .fold(None, |acc: Option<f64>, g| Some(acc.map_or(g, |a| a.min(g))));
        if let Some(gap) = gap {
            let thw = gap / st.speed;
            best = Some(best.map_or(thw, |b| b.min(thw)));
        }
    }
    Ok(best)
}

/// Mean one-step constant-velocity prediction error, normalized by
/// `dt · mean speed + 1`.
pub fn anomaly_score(traj: &Trajectory) -> Result<f64> {
    let st = &traj.states;
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 2..st.len() {
        let (a, b, c) = (&st[t - 2], &st[t - 1], &st[t]);
        if !(a.valid && b.valid && c.valid) {
            continue;
        }
        let px = 2.0 * b.x - a.x;
        let py = 2.0 * b.y - a.y;
        total += (c.x - px).hypot(c.y - py);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InsufficientData(
            "anomaly score needs 3 consecutive valid steps".into(),
        ));
    }
    let (speed_sum, n) = st
        .iter()
        .filter(|s| s.valid)
        .fold((0.0, 0usize), |(acc, n), s| (acc + s.speed, n + 1));
    let mean_speed = speed_sum / n as f64;
    Ok((total / count as f64) / (traj.dt * mean_speed + 1.0))
}

/// Aggregated safety relevance of one agent; absent indicators contribute 0.
pub fn relevance_score(s: &Scenario, agent: usize, cfg: &HeuristicConfig) -> Result<f64> {
    let ttc = min_ttc(s, agent, cfg)?;
    let thw = min_thw(s, agent, cfg)?;
    let anom = anomaly_score(&s.trajectories[agent])?;
    Ok(ttc.map_or(0.0, |v| cfg.w_ttc * (-v / cfg.tau_ttc).exp())
        + thw.map_or(0.0, |v| cfg.w_thw * (-v / cfg.tau_thw).exp())
        + cfg.w_anom * anom)
}

/// Observed and counterfactual scores of `agent`, where the counterfactual
/// continues at constant velocity from `t_cf`.
pub fn score_agent(s: &Scenario, agent: usize, cfg: &HeuristicConfig, t_cf: usize) -> Result<RelevanceScores> {
    s.check_agent(agent)?;
    let gt = relevance_score(s, agent, cfg)?;
    let cf = constant_velocity_extrapolate(&s.trajectories[agent], t_cf).map_err(|e| match e {
        Error::InvalidAgentState { step, .. } => Error::InvalidAgentState { agent, step },
        other => other,
    })?;
    let fe = relevance_score(&s.with_trajectory(agent, cf), agent, cfg)?;
    Ok(RelevanceScores::new(gt, fe))
}

/// Scores `agent` and thresholds the difference at `delta`.
pub fn label_agent(
    s: &Scenario,
    agent: usize,
    delta: f64,
    cfg: &HeuristicConfig,
    t_cf: usize,
) -> Result<(RelevanceScores, SafetyLabel)> {
    if !(delta >= 0.0) {
        return Err(Error::Config(format!("delta must be non-negative, got {delta}")));
    }
    let scores = score_agent(s, agent, cfg, t_cf)?;
    Ok((scores, SafetyLabel::from_diff(scores.diff, delta)))
}

/// Outcome of threshold calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaCalibration {
    pub delta: f64,
    /// Class proportions (safe, neutral, unsafe) at the chosen threshold.
    pub proportions: [f64; 3],
    /// Set when every difference has the same magnitude at zero, leaving a
    /// single neutral class.
    pub degenerate: bool,
}

fn proportions(diffs: &[f64], delta: f64) -> [f64; 3] {
    let mut c = [0usize; 3];
    for &d in diffs {
        c[SafetyLabel::from_diff(d, delta).index()] += 1;
    }
    let n = diffs.len() as f64;
    [c[0] as f64 / n, c[1] as f64 / n, c[2] as f64 / n]
}

/// Picks δ so the three classes are as close to equal thirds as possible.
///
/// Class proportions are piecewise constant in δ with breakpoints at the
/// distinct |d| values; every interval is scored by the worst deviation from
/// 1/3 and the midpoint of the best (lowest) interval is returned.
pub fn calibrate_delta(diffs: &[f64]) -> Result<DeltaCalibration> {
    if diffs.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "delta calibration needs at least 3 differences, got {}",
            diffs.len()
        )));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("score difference".into()));
    }
    let mut mags: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    mags.push(0.0);
    mags.sort_by(f64::total_cmp);
    mags.dedup();

    // counts as δ sweeps the breakpoints
    let mut neg: Vec<f64> = diffs.iter().filter(|&&d| d < 0.0).map(|d| -d).collect();
    let mut pos: Vec<f64> = diffs.iter().filter(|&&d| d > 0.0).copied().collect();
    neg.sort_by(f64::total_cmp);
    pos.sort_by(f64::total_cmp);
    let n = diffs.len() as f64;
    let third = 1.0 / 3.0;
    let (mut i_neg, mut i_pos) = (0usize, 0usize);
    let mut best: Option<(f64, usize)> = None;
    for (k, &lo) in mags.iter().enumerate() {
        while i_neg < neg.len() && neg[i_neg] <= lo {
            i_neg += 1;
        }
        while i_pos < pos.len() && pos[i_pos] <= lo {
            i_pos += 1;
        }
        let safe = (neg.len() - i_neg) as f64 / n;
        let unsafe_ = (pos.len() - i_pos) as f64 / n;
        let neutral = 1.0 - safe - unsafe_;
        let cost = (safe - third)
            .abs()
            .max((neutral - third).abs())
            .max((unsafe_ - third).abs());
        if best.is_none_or(|(c, _)| cost < c - 1e-15) {
            best = Some((cost, k));
        }
    }
    let (_, k) = best.expect("at least one interval");
    let delta = match mags.get(k + 1) {
        Some(hi) => 0.5 * (mags[k] + hi),
        None => mags[k],
    };
    let props = proportions(diffs, delta);
    Ok(DeltaCalibration {
        delta,
        proportions: props,
        degenerate: mags.len() == 1,
    })
}

/// Scores and label of one agent of a corpus scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledAgent {
    pub scenario_id: String,
    /// Position of the scenario in the corpus it was labeled from.
    pub scenario_index: usize,
    pub agent: usize,
    pub scores: RelevanceScores,
    pub label: SafetyLabel,
}

/// Which agents of each scenario [`label_corpus`] scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentSelection {
    #[default]
    All,
    Adversary,
}

/// Labels every selected agent that can be scored at `t_cf`, calibrating δ
/// on the whole corpus.
pub fn label_corpus(
    scenarios: &[Scenario],
    cfg: &HeuristicConfig,
    t_cf: usize,
    selection: AgentSelection,
) -> Result<(Vec<LabeledAgent>, DeltaCalibration)> {
    cfg.validate()?;
    let per_scenario: Vec<Vec<(usize, usize, RelevanceScores)>> = scenarios
        .par_iter()
        .enumerate()
        .map(|(si, s)| {
            (0..s.num_agents())
                .filter(|&a| selection == AgentSelection::All || a == s.adv_id)
                .filter(|&a| {
                    let tr = &s.trajectories[a];
                    t_cf >= 1 && tr.is_valid_at(t_cf) && tr.is_valid_at(t_cf - 1)
                })
                .map(|a| score_agent(s, a, cfg, t_cf).map(|sc| (si, a, sc)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<_> = per_scenario.into_iter().flatten().collect();
    let diffs: Vec<f64> = flat.iter().map(|(_, _, sc)| sc.diff).collect();
    let cal = calibrate_delta(&diffs)?;
    let labeled = flat
        .into_iter()
        .map(|(si, agent, scores)| LabeledAgent {
            scenario_id: scenarios[si].id.clone(),
            scenario_index: si,
            agent,
            scores,
            label: SafetyLabel::from_diff(scores.diff, cal.delta),
        })
        .collect();
    Ok((labeled, cal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{AgentDims, AgentState, MapContext};

    fn line(n: usize, x0: f64, y0: f64, heading: f64, speed: f64) -> Trajectory {
        let (s, c) = heading.sin_cos();
        Trajectory::new(
            (0..n)
                .map(|t| {
                    let d = speed * 0.1 * t as f64;
                    AgentState::new(x0 + d * c, y0 + d * s, heading, speed)
                })
                .collect(),
            0.1,
        )
    }

    fn scen(trajs: Vec<Trajectory>) -> Scenario {
        let n = trajs.len();
        Scenario {
            id: "t".into(),
            trajectories: trajs,
            map: MapContext::default(),
            ego_id: 0,
            adv_id: 1,
            agent_dims: vec![AgentDims::default(); n],
        }
    }

    #[test]
    fn head_on_ttc() {
        // 20 m apart, each at 5 m/s toward the other
        let a = line(2, 0.0, 0.0, 0.0, 5.0);
        let mut b = line(2, 20.0, 0.0, std::f64::consts::PI, 5.0);
        // only the first step matters: freeze the second far away
        b.states[1] = AgentState::new(200.0, 0.0, 0.0, 5.0);
        let s = scen(vec![a, b]);
        let ttc = min_ttc(&s, 0, &HeuristicConfig::default()).unwrap().unwrap();
        assert!((ttc - 2.0).abs() < 1e-12);
    }

    #[test]
    fn diverging_has_no_ttc() {
        let a = line(10, 0.0, 0.0, std::f64::consts::PI, 5.0);
        let b = line(10, 5.0, 0.0, 0.0, 5.0);
        let s = scen(vec![a, b]);
        assert_eq!(min_ttc(&s, 0, &HeuristicConfig::default()).unwrap(), None);
    }

    #[test]
    fn follower_headway() {
        let a = line(5, 0.0, 0.0, 0.0, 10.0);
        let b = line(5, 15.0, 0.0, 0.0, 10.0);
        let s = scen(vec![a, b]);
        let thw = min_thw(&s, 0, &HeuristicConfig::default()).unwrap().unwrap();
        assert!((thw - 1.5).abs() < 1e-12);
        // the leader has nobody ahead
        assert_eq!(min_thw(&s, 1, &HeuristicConfig::default()).unwrap(), None);
    }

    #[test]
    fn headway_cone_excludes_side_agents() {
        let a = line(5, 0.0, 0.0, 0.0, 10.0);
        let b = line(5, 5.0, 5.0, 0.0, 10.0); // 45 degrees off
        let s = scen(vec![a, b]);
        assert_eq!(min_thw(&s, 0, &HeuristicConfig::default()).unwrap(), None);
    }

    #[test]
    fn invalid_agent_index() {
        let s = scen(vec![line(5, 0.0, 0.0, 0.0, 1.0), line(5, 9.0, 0.0, 0.0, 1.0)]);
        assert!(matches!(min_ttc(&s, 4, &HeuristicConfig::default()), Err(Error::AgentIndex { .. })));
        assert!(min_thw(&s, 2, &HeuristicConfig::default()).is_err());
    }

    #[test]
    fn anomaly_straight_is_zero() {
        let t = line(30, 1.0, 2.0, 0.7, 12.0);
        assert!(anomaly_score(&t).unwrap().abs() < 1e-12);
    }

    #[test]
    fn anomaly_swerve_exceeds_straight() {
        let straight = line(40, 0.0, 0.0, 0.0, 10.0);
        let swerve = Trajectory::new(
            (0..40)
                .map(|t| {
                    let x = t as f64;
                    AgentState::new(x, 1.5 * (0.3 * x).sin(), 0.0, 10.0)
                })
                .collect(),
            0.1,
        );
        let a = anomaly_score(&straight).unwrap();
        let b = anomaly_score(&swerve).unwrap();
        assert!(b > a && a >= 0.0);
    }

    #[test]
    fn anomaly_needs_three_steps() {
        let mut t = line(5, 0.0, 0.0, 0.0, 1.0);
        t.states[2].valid = false;
        assert!(anomaly_score(&t).is_err());
    }

    #[test]
    fn isolated_stationary_agent_scores_zero() {
        let a = line(20, 0.0, 0.0, 0.0, 0.0);
        let b = line(20, 500.0, 0.0, 0.0, 0.0);
        let s = scen(vec![a, b]);
        assert_eq!(relevance_score(&s, 0, &HeuristicConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn relevance_with_zero_ttc_only() {
        // agents sharing a position: ttc = 0, no headway (range 0), no anomaly
        let a = line(5, 0.0, 0.0, 0.0, 0.0);
        let b = line(5, 0.0, 0.0, 0.0, 0.0);
        let s = scen(vec![a, b]);
        let cfg = HeuristicConfig {
            w_thw: 0.0,
            w_anom: 0.0,
            ..HeuristicConfig::default()
        };
        assert_eq!(relevance_score(&s, 0, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn from_diff_cases() {
        assert_eq!(SafetyLabel::from_diff(-0.5, 0.1), SafetyLabel::Safe);
        assert_eq!(SafetyLabel::from_diff(0.1, 0.1), SafetyLabel::Neutral);
        assert_eq!(SafetyLabel::from_diff(-0.1, 0.1), SafetyLabel::Neutral);
        assert_eq!(SafetyLabel::from_diff(0.0, 0.0), SafetyLabel::Neutral);
        assert_eq!(SafetyLabel::from_diff(0.2, 0.1), SafetyLabel::Unsafe);
    }

    #[test]
    fn constant_velocity_agent_is_neutral() {
        let a = line(30, 0.0, 0.0, 0.0, 10.0);
        let b = line(30, 10.0, -20.0, std::f64::consts::FRAC_PI_2, 8.0);
        let s = scen(vec![a, b]);
        for delta in [0.0, 0.3] {
            let (sc, label) = label_agent(&s, 0, delta, &HeuristicConfig::default(), 10).unwrap();
            assert_eq!(sc.diff, 0.0);
            assert_eq!(label, SafetyLabel::Neutral);
        }
    }

    #[test]
    fn calibrate_symmetric_triplet() {
        let cal = calibrate_delta(&[-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(cal.delta, 0.5);
        assert_eq!(cal.proportions, [1.0 / 3.0; 3]);
        assert!(!cal.degenerate);
    }

    #[test]
    fn calibrate_all_zero_is_degenerate() {
        let cal = calibrate_delta(&[0.0; 10]).unwrap();
        assert_eq!(cal.delta, 0.0);
        assert_eq!(cal.proportions, [0.0, 1.0, 0.0]);
        assert!(cal.degenerate);
    }

    #[test]
    fn calibrate_rejects_short_input() {
        assert!(calibrate_delta(&[]).is_err());
        assert!(calibrate_delta(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn calibrate_matches_exhaustive_search() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.gen_range(3..40);
            let diffs: Vec<f64> = (0..n).map(|_| (rng.gen_range(-5..6) as f64) * 0.1).collect();
            let cal = calibrate_delta(&diffs).unwrap();
            let cost = |p: [f64; 3]| p.iter().map(|x| (x - 1.0 / 3.0).abs()).fold(0.0, f64::max);
            // dense grid of candidate deltas
            let best = (0..=600)
                .map(|k| cost(proportions(&diffs, k as f64 * 0.001)))
                .fold(f64::INFINITY, f64::min);
            assert!((cost(cal.proportions) - best).abs() < 1e-12);
        }
    }
}

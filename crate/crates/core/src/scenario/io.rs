//! JSON-lines scenario files.
//!
//! The first line is a header `{"format": "crashground-scn", "version": 1}`
//! optionally carrying provenance keys; each following line holds one
//! scenario.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AgentDims, AgentState, Lane, MapContext, Scenario, StaticFeature, Trajectory};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const SCENARIO_FORMAT: &str = "crashground-scn";
pub const SCENARIO_VERSION: u32 = 1;

/// Provenance stamped into output headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct WireAgent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<[f64; 2]>,
    pub states: Vec<(f64, f64, f64, f64, bool)>,
}

#[derive(Serialize, Deserialize)]
struct WireLane {
    width: f64,
    points: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct WireFeature {
    label: String,
    x: f64,
    y: f64,
}

#[derive(Serialize, Deserialize)]
struct WireMap {
    lanes: Vec<WireLane>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    features: Vec<WireFeature>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct WireScenario {
    id: String,
    dt: f64,
    #[serde(rename = "T")]
    horizon: usize,
    ego_id: usize,
    adv_id: usize,
    agents: Vec<WireAgent>,
    map: WireMap,
}

pub(crate) fn agent_to_wire(traj: &Trajectory, dims: AgentDims) -> WireAgent {
    WireAgent {
        dims: Some([dims.length, dims.width]),
        states: traj
            .states
            .iter()
            .map(|s| (s.x, s.y, s.heading, s.speed, s.valid))
            .collect(),
    }
}

pub(crate) fn agent_from_wire(agent: WireAgent, dt: f64) -> (Trajectory, AgentDims) {
    let dims = agent
        .dims
        .map(|[length, width]| AgentDims { length, width })
        .unwrap_or_default();
    let states = agent
        .states
        .into_iter()
        .map(|(x, y, heading, speed, valid)| AgentState {
            x,
            y,
            heading,
            speed,
            valid,
        })
        .collect();
    (Trajectory::new(states, dt), dims)
}

pub(crate) fn to_wire(s: &Scenario) -> WireScenario {
    WireScenario {
        id: s.id.clone(),
        dt: s.dt(),
        horizon: s.horizon(),
        ego_id: s.ego_id,
        adv_id: s.adv_id,
        agents: s
            .trajectories
            .iter()
            .zip(&s.agent_dims)
            .map(|(t, d)| agent_to_wire(t, *d))
            .collect(),
        map: WireMap {
            lanes: s
                .map
                .lanes
                .iter()
                .map(|l| WireLane {
                    width: l.width,
                    points: l.points.clone(),
                })
                .collect(),
            features: s
                .map
                .static_features
                .iter()
                .map(|f| WireFeature {
                    label: f.label.clone(),
                    x: f.x,
                    y: f.y,
                })
                .collect(),
        },
    }
}

pub(crate) fn from_wire(w: WireScenario) -> Result<Scenario> {
    let mut trajectories = Vec::with_capacity(w.agents.len());
    let mut agent_dims = Vec::with_capacity(w.agents.len());
    for (i, agent) in w.agents.into_iter().enumerate() {
        if agent.states.len() != w.horizon {
            return Err(Error::Validation {
                id: w.id.clone(),
                field: "T".into(),
                message: format!("agent {i} has {} states, header says {}", agent.states.len(), w.horizon),
            });
        }
        let (traj, dims) = agent_from_wire(agent, w.dt);
        trajectories.push(traj);
        agent_dims.push(dims);
    }
    let scenario = Scenario {
        id: w.id,
        trajectories,
        map: MapContext {
            lanes: w
                .map
                .lanes
                .into_iter()
                .map(|l| Lane {
                    width: l.width,
                    points: l.points,
                })
                .collect(),
            static_features: w
                .map
                .features
                .into_iter()
                .map(|f| StaticFeature {
                    label: f.label,
                    x: f.x,
                    y: f.y,
                })
                .collect(),
        },
        ego_id: w.ego_id,
        adv_id: w.adv_id,
        agent_dims,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Serializes scenarios to the JSON-lines file format.
pub fn scenarios_to_jsonl(scenarios: &[Scenario], provenance: Option<&Provenance>) -> String {
    let header = Header {
        format: SCENARIO_FORMAT.into(),
        version: SCENARIO_VERSION,
        config_hash: provenance.map(|p| p.config_hash.clone()),
        seed: provenance.map(|p| p.seed),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for s in scenarios {
        out.push_str(&serde_json::to_string(&to_wire(s)).expect("scenario serializes"));
        out.push('\n');
    }
    out
}

/// Parses a JSON-lines scenario document. An empty document yields no
/// scenarios; otherwise the first non-blank line must be the header.
pub fn scenarios_from_jsonl(text: &str) -> Result<Vec<Scenario>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((hline, htext)) = lines.next() else {
        return Ok(Vec::new());
    };
    let header: Header = serde_json::from_str(htext).map_err(|e| Error::Parse {
        line: hline,
        message: format!("bad header: {e}"),
    })?;
    if header.format != SCENARIO_FORMAT {
        return Err(Error::Parse {
            line: hline,
            message: format!("unexpected format `{}`", header.format),
        });
    }
    if header.version != SCENARIO_VERSION {
        return Err(Error::Parse {
            line: hline,
            message: format!("unsupported version {}", header.version),
        });
    }
    lines
        .map(|(line, l)| {
            let wire: WireScenario = serde_json::from_str(l).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            from_wire(wire)
        })
        .collect()
}

pub fn load_scenarios(path: &Path) -> Result<Vec<Scenario>> {
    let text = std::fs::read_to_string(path)?;
    scenarios_from_jsonl(&text)
}

pub fn save_scenarios(path: &Path, scenarios: &[Scenario], provenance: Option<&Provenance>) -> Result<()> {
    write_atomic(path, scenarios_to_jsonl(scenarios, provenance).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Scenario {
        let mk = |y: f64, speed: f64| {
            Trajectory::new(
                (0..5)
                    .map(|t| AgentState::new(0.1 * speed * t as f64, y, 0.123456789, speed))
                    .collect(),
                0.1,
            )
        };
        let mut b = mk(3.5, 7.3);
        b.states[0].valid = false;
        Scenario {
            id: "s-1".into(),
            trajectories: vec![mk(0.0, 10.0), b],
            map: MapContext {
                lanes: vec![Lane {
                    width: 3.5,
                    points: vec![[-50.0, 0.0], [50.0, 0.0]],
                }],
                static_features: vec![],
            },
            ego_id: 0,
            adv_id: 1,
            agent_dims: vec![AgentDims::default(), AgentDims { length: 1.8, width: 0.6 }],
        }
    }

    #[test]
    fn empty_document() {
        assert!(scenarios_from_jsonl("").unwrap().is_empty());
        assert!(scenarios_from_jsonl("\n\n").unwrap().is_empty());
    }

    #[test]
    fn round_trip() {
        let s = vec![sample(), sample()];
        let text = scenarios_to_jsonl(&s, None);
        assert_eq!(scenarios_from_jsonl(&text).unwrap(), s);
    }

    #[test]
    fn header_carries_provenance() {
        let p = Provenance {
            config_hash: "abc".into(),
            seed: 9,
        };
        let text = scenarios_to_jsonl(&[], Some(&p));
        assert!(text.starts_with(r#"{"format":"crashground-scn","version":1,"config_hash":"abc","seed":9}"#));
    }

    #[test]
    fn rejects_ego_equal_adv() {
        let mut s = sample();
        s.adv_id = 0;
        let text = scenarios_to_jsonl(&[s], None);
        assert!(matches!(scenarios_from_jsonl(&text), Err(Error::Validation { .. })));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = scenarios_to_jsonl(&[sample()], None) + "{not json\n";
        match scenarios_from_jsonl(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_dims_default() {
        let text = scenarios_to_jsonl(&[sample()], None).replace(r#""dims":[1.8,0.6],"#, "");
        let s = scenarios_from_jsonl(&text).unwrap();
        assert_eq!(s[0].agent_dims[1], AgentDims::default());
    }
}

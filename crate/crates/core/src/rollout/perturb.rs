//! Iterative perturbation: each round selects an adversary future from all
//! rollouts so far and simulates it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sim::{simulate, AdvBehavior, AdvMode, EgoPolicy, RolloutResult};
use crate::adversary::{select_adversary, select_random, SelectionConfig, UnsafeCache};
use crate::embed::EmbeddingModel;
use crate::error::{Error, Result};
use crate::lora::Adapter;
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    /// Lowest mean KNN distance to the unsafe cache.
    #[default]
    Rcg,
    /// Uniform choice among the retained candidates.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub mode: AdvMode,
    #[serde(default)]
    pub method: SelectionMethod,
    /// Number of perturbation rounds; at most `selection.k_max`.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
}

fn default_rounds() -> usize {
    5
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            selection: SelectionConfig::default(),
            mode: AdvMode::default(),
            method: SelectionMethod::default(),
            rounds: default_rounds(),
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        if self.rounds == 0 || self.rounds > self.selection.k_max {
            return Err(Error::Config(format!(
                "rounds = {} must lie in [1, k_max = {}]",
                self.rounds, self.selection.k_max
            )));
        }
        Ok(())
    }
}

/// One perturbation round.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbRound {
    /// Zero-based round index.
    pub round: usize,
    /// Number of rollouts the selection consulted.
    pub history_len: usize,
    pub chosen: usize,
    /// Score of the chosen candidate; absent for random selection.
    pub d_adv: Option<f64>,
    pub result: RolloutResult,
}

/// Seed for one round of one scenario.
pub fn round_seed(seed: u64, scenario: usize, round: usize) -> u64 {
    seed ^ (scenario as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (round as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

/// Runs `cfg.rounds` rounds on `s`. Round one consults the rollout of the
/// unmodified scenario; every later round consults all rollouts so far.
pub fn perturb_loop(
    s: &Scenario,
    m: &EmbeddingModel,
    ad: Option<&Adapter>,
    cache: &UnsafeCache,
    ego: &EgoPolicy,
    cfg: &PerturbConfig,
    seed: u64,
) -> Result<Vec<PerturbRound>> {
    cfg.validate()?;
    let t_h = cfg.selection.history;
    let original = simulate(s, ego, &AdvBehavior::OpenLoop(s.trajectories[s.adv_id].clone()), t_h)?;
    let mut history = vec![original.realized];
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let rs = round_seed(seed, 0, round);
        let sel = match cfg.method {
            SelectionMethod::Rcg => select_adversary(s, m, ad, cache, &history, &cfg.selection, rs)?,
            SelectionMethod::Random => select_random(s, &history, &cfg.selection, rs)?,
        };
        let behavior = AdvBehavior::new(cfg.mode, sel.trajectory().clone());
        let result = simulate(s, ego, &behavior, t_h)?;
        rounds.push(PerturbRound {
            round,
            history_len: history.len(),
            chosen: sel.chosen,
            d_adv: sel.set.scores[sel.chosen],
            result: result.clone(),
        });
        history.push(result.realized);
    }
    Ok(rounds)
}

/// [`perturb_loop`] over a corpus, scenarios in parallel, each with its own
/// seed derived from `seed` and its index.
pub fn perturb_corpus(
    scenarios: &[Scenario],
    m: &EmbeddingModel,
    ad: Option<&Adapter>,
    cache: &UnsafeCache,
    ego: &EgoPolicy,
    cfg: &PerturbConfig,
    seed: u64,
) -> Result<Vec<Vec<PerturbRound>>> {
    scenarios
        .par_iter()
        .enumerate()
        .map(|(i, s)| perturb_loop(s, m, ad, cache, ego, cfg, round_seed(seed, i + 1, 0)))
        .collect()
}

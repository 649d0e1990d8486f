//! Closed-loop kinematic rollouts and the iterative perturbation loop.

pub mod geometry;
mod io;
mod perturb;
mod sim;

pub use geometry::{box_gap, obb_collision, off_road};
pub use io::{load_rollouts, rollouts_from_jsonl, rollouts_to_jsonl, save_rollouts, RolloutRecord, ROLLOUT_FORMAT};
pub use perturb::{perturb_corpus, perturb_loop, round_seed, PerturbConfig, PerturbRound, SelectionMethod};
pub use sim::{
    simulate, AdvBehavior, AdvMode, CollisionInfo, EgoPolicy, Initiator, Outcome, PursuitParams, ReactiveEgo,
    RolloutResult, GOAL_RADIUS,
};

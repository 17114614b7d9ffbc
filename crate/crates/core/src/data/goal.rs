use serde::{Deserialize, Serialize};

use super::{DatasetMeta, GoalMode, Trajectory};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goal {
    /// Goal-subspace slice of a state.
    Target(Vec<f64>),
    /// Average future reward per remaining step of the maximum horizon.
    ReturnToGo(f64),
}

/// Sum of rewards from step `t` (0-based) onward, divided by the number of
/// steps left in an episode of maximum length `h_max`.
pub fn return_to_go(rewards: &[f64], t: usize, h_max: usize) -> f64 {
    let remaining = h_max.saturating_sub(t).max(1);
    rewards[t..].iter().sum::<f64>() / remaining as f64
}

/// Target mode draws `j` uniformly from the steps after `t`; this fails when
/// `t` is the final step.
pub fn sample_goal(traj: &Trajectory, t: usize, meta: &DatasetMeta, rng: &mut RngStream) -> Result<Goal> {
    let h = traj.len();
    if t >= h {
        return Err(Error::Data(format!("timestep {t} out of range for trajectory of length {h}")));
    }
    match meta.goal_mode {
        GoalMode::TargetState => {
            if t + 1 >= h {
                return Err(Error::Data("no future state after the final step".into()));
            }
            let j = t + 1 + rng.index(h - t - 1);
            Ok(Goal::Target(meta.goal_subspace.iter().map(|&d| traj.states[j][d]).collect()))
        }
        GoalMode::ReturnToGo => {
            let rewards = traj.rewards.as_deref().ok_or_else(|| Error::Data("trajectory has no rewards".into()))?;
            Ok(Goal::ReturnToGo(return_to_go(rewards, t, meta.max_episode_steps)))
        }
    }
}

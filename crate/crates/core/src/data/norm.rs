use serde::{Deserialize, Serialize};

use super::{return_to_go, DatasetMeta, Goal, GoalMode, Trajectory};
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension z-score statistics from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    /// Return-to-go statistics, present for return-conditioned datasets.
    pub rtg_mean: Option<f64>,
    pub rtg_std: Option<f64>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(STD_FLOOR))
}

impl NormStats {
    pub fn compute<'a>(meta: &DatasetMeta, train: impl Iterator<Item = &'a Trajectory> + Clone) -> Result<Self> {
        if train.clone().next().is_none() {
            return Err(Error::Data("cannot compute statistics of an empty training split".into()));
        }
        let mut state_mean = Vec::with_capacity(meta.state_dim);
        let mut state_std = Vec::with_capacity(meta.state_dim);
        for d in 0..meta.state_dim {
            let (m, s) = mean_std(train.clone().flat_map(|t| t.states.iter().map(move |s| s[d])));
            state_mean.push(m);
            state_std.push(s);
        }
        let (rtg_mean, rtg_std) = if meta.goal_mode == GoalMode::ReturnToGo {
            let mut rtgs = Vec::new();
            for t in train {
                let rewards = t.rewards.as_deref().ok_or_else(|| Error::Data("missing rewards".into()))?;
                rtgs.extend((0..t.len()).map(|i| return_to_go(rewards, i, meta.max_episode_steps)));
            }
            let (m, s) = mean_std(rtgs.iter().copied());
            (Some(m), Some(s))
        } else {
            (None, None)
        };
        Ok(NormStats { state_mean, state_std, rtg_mean, rtg_std })
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.state_mean).zip(&self.state_std).map(|((x, m), sd)| (x - m) / sd).collect()
    }

    pub fn denormalize_state(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.state_mean).zip(&self.state_std).map(|((x, m), sd)| x * sd + m).collect()
    }

    /// Normalize the values of selected state dimensions.
    pub fn normalize_dims(&self, values: &[f64], dims: &[usize]) -> Vec<f64> {
        values.iter().zip(dims).map(|(x, &d)| (x - self.state_mean[d]) / self.state_std[d]).collect()
    }

    pub fn denormalize_dims(&self, values: &[f64], dims: &[usize]) -> Vec<f64> {
        values.iter().zip(dims).map(|(x, &d)| x * self.state_std[d] + self.state_mean[d]).collect()
    }

    /// Goal vector as fed to models: target goals use the state statistics of
    /// the goal subspace, return-to-go goals their own statistics.
    pub fn normalize_goal(&self, goal: &Goal, meta: &DatasetMeta) -> Result<Vec<f64>> {
        match goal {
            Goal::Target(v) => {
                if v.len() != meta.goal_subspace.len() {
                    return Err(Error::Incompatible(format!(
                        "goal width {} vs goal subspace {}",
                        v.len(),
                        meta.goal_subspace.len()
                    )));
                }
                Ok(self.normalize_dims(v, &meta.goal_subspace))
            }
            Goal::ReturnToGo(g) => {
                let (m, s) = self
                    .rtg_mean
                    .zip(self.rtg_std)
                    .ok_or_else(|| Error::Incompatible("return-to-go goal without return statistics".into()))?;
                Ok(vec![(g - m) / s])
            }
        }
    }
}

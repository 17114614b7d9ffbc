//! Desk-scale environments and scripted data collectors.

mod collect;
pub mod linerun;
pub mod maze;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetMeta, Goal, GoalMode};
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub use collect::{collect_dataset, reference_scores, AuditSummary, CollectorConfig, Style};
pub use linerun::{LineRunEnv, LineRunState};
pub use maze::{plan_waypoints, MazeEnv, MazeSpec, MazeState};

/// Outcome of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn episode_cap(&self) -> usize;
    fn reset(&mut self, rng: &mut RngStream) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Step;
}

pub const MINIMAZE: &str = "minimaze";
pub const LINERUN: &str = "linerun";

/// Which environment a dataset or run refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum EnvSpec {
    Minimaze { layout: String },
    Linerun,
}

impl EnvSpec {
    pub fn minimaze(layout: &str) -> Result<Self> {
        let spec = MazeSpec::builtin(layout)?;
        Ok(EnvSpec::Minimaze { layout: spec.name })
    }

    pub fn from_meta(meta: &DatasetMeta) -> Result<Self> {
        match meta.env_id.as_str() {
            MINIMAZE => {
                let layout = meta.layout.as_deref().ok_or_else(|| Error::Data("minimaze dataset without layout".into()))?;
                EnvSpec::minimaze(layout)
            }
            LINERUN => Ok(EnvSpec::Linerun),
            other => Err(Error::Data(format!("unknown env_id {other:?}"))),
        }
    }

    pub fn env_id(&self) -> &'static str {
        match self {
            EnvSpec::Minimaze { .. } => MINIMAZE,
            EnvSpec::Linerun => LINERUN,
        }
    }

    pub fn layout(&self) -> Option<&str> {
        match self {
            EnvSpec::Minimaze { layout } => Some(layout),
            EnvSpec::Linerun => None,
        }
    }

    pub fn maze_spec(&self) -> Result<Option<MazeSpec>> {
        match self {
            EnvSpec::Minimaze { layout } => MazeSpec::builtin(layout).map(Some),
            EnvSpec::Linerun => Ok(None),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            EnvSpec::Minimaze { .. } => 4,
            EnvSpec::Linerun => 2,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            EnvSpec::Minimaze { .. } => 2,
            EnvSpec::Linerun => 1,
        }
    }

    pub fn goal_mode(&self) -> GoalMode {
        match self {
            EnvSpec::Minimaze { .. } => GoalMode::TargetState,
            EnvSpec::Linerun => GoalMode::ReturnToGo,
        }
    }

    pub fn goal_subspace(&self) -> Vec<usize> {
        match self {
            EnvSpec::Minimaze { .. } => vec![0, 1],
            EnvSpec::Linerun => vec![],
        }
    }

    pub fn episode_cap(&self) -> Result<usize> {
        Ok(match self.maze_spec()? {
            Some(spec) => spec.episode_cap,
            None => linerun::HORIZON,
        })
    }

    pub fn make(&self) -> Result<Box<dyn Environment>> {
        Ok(match self.maze_spec()? {
            Some(spec) => {
                let goal = spec.eval_goal()?;
                Box::new(MazeEnv::new(spec, goal))
            }
            None => Box::new(LineRunEnv::default()),
        })
    }

    /// Goal at the start of an evaluation episode: the layout's goal cell for
    /// mazes, the per-step share of `target_return` for return conditioning.
    pub fn initial_eval_goal(&self, target_return: Option<f64>) -> Result<Goal> {
        match self.maze_spec()? {
            Some(spec) => Ok(Goal::Target(spec.eval_goal()?.to_vec())),
            None => {
                let r = target_return.ok_or_else(|| Error::Config("return-conditioned evaluation needs a target return".into()))?;
                Ok(Goal::ReturnToGo(r / linerun::HORIZON as f64))
            }
        }
    }

    /// Dataset metadata for data collected in this environment.
    pub fn dataset_meta(&self, split_seed: u64) -> Result<DatasetMeta> {
        Ok(DatasetMeta {
            env_id: self.env_id().to_string(),
            layout: self.layout().map(str::to_string),
            state_dim: self.state_dim(),
            action_dim: self.action_dim(),
            max_episode_steps: self.episode_cap()?,
            goal_mode: self.goal_mode(),
            goal_subspace: self.goal_subspace(),
            reference_scores: None,
            split_seed,
        })
    }
}

//! Trajectory storage, normalization, window and goal sampling, and masking.

mod goal;
mod mask;
mod norm;
mod window;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub use goal::{return_to_go, sample_goal, Goal};
pub use mask::{build_mask, MaskSpec, Objective, MASK_RATIOS};
pub use norm::{NormStats, STD_FLOOR};
pub use window::{sample_window, WindowSample};

/// One episode: per-step states, actions, and optionally rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.as_ref().map_or(0.0, |r| r.iter().sum())
    }

    fn validate(&self, meta: &DatasetMeta, index: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(format!("trajectory {index}: {msg}")));
        let h = self.states.len();
        if h == 0 {
            return bad("empty trajectory".into());
        }
        if self.actions.len() != h {
            return bad(format!("{h} states but {} actions", self.actions.len()));
        }
        if let Some(r) = &self.rewards {
            if r.len() != h {
                return bad(format!("{h} states but {} rewards", r.len()));
            }
            if r.iter().any(|x| !x.is_finite()) {
                return bad("non-finite reward".into());
            }
        } else if meta.goal_mode == GoalMode::ReturnToGo {
            return bad("return-to-go datasets need rewards".into());
        }
        if h > meta.max_episode_steps {
            return bad(format!("length {h} exceeds max_episode_steps {}", meta.max_episode_steps));
        }
        for (t, s) in self.states.iter().enumerate() {
            if s.len() != meta.state_dim {
                return bad(format!("state {t} has width {}, expected {}", s.len(), meta.state_dim));
            }
            if s.iter().any(|x| !x.is_finite()) {
                return bad(format!("state {t} is not finite"));
            }
        }
        for (t, a) in self.actions.iter().enumerate() {
            if a.len() != meta.action_dim {
                return bad(format!("action {t} has width {}, expected {}", a.len(), meta.action_dim));
            }
            if a.iter().any(|x| !x.is_finite()) {
                return bad(format!("action {t} is not finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalMode {
    TargetState,
    ReturnToGo,
}

/// Returns used to normalize evaluation scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub random: f64,
    pub expert: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env_id: String,
    #[serde(default)]
    pub layout: Option<String>,
    pub state_dim: usize,
    pub action_dim: usize,
    pub max_episode_steps: usize,
    pub goal_mode: GoalMode,
    pub goal_subspace: Vec<usize>,
    #[serde(default)]
    pub reference_scores: Option<ReferenceScores>,
    #[serde(default)]
    pub split_seed: u64,
}

impl DatasetMeta {
    /// Width of a goal vector as fed to models.
    pub fn goal_dim(&self) -> usize {
        match self.goal_mode {
            GoalMode::TargetState => self.goal_subspace.len(),
            GoalMode::ReturnToGo => 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::Data("state_dim and action_dim must be positive".into()));
        }
        if let Some(&bad) = self.goal_subspace.iter().find(|&&i| i >= self.state_dim) {
            return Err(Error::Data(format!("goal_subspace index {bad} >= state_dim {}", self.state_dim)));
        }
        if self.goal_mode == GoalMode::TargetState && self.goal_subspace.is_empty() {
            return Err(Error::Data("target-state goals need a nonempty goal_subspace".into()));
        }
        Ok(())
    }
}

/// A validated dataset with its seeded train/validation split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Dataset {
    pub fn new(meta: DatasetMeta, trajectories: Vec<Trajectory>) -> Result<Self> {
        meta.validate()?;
        if trajectories.is_empty() {
            return Err(Error::Data("dataset has no trajectories".into()));
        }
        for (i, t) in trajectories.iter().enumerate() {
            t.validate(&meta, i)?;
        }
        let (train, validation) = split_indices(trajectories.len(), meta.split_seed);
        Ok(Dataset { meta, trajectories, train, validation })
    }

    pub fn train_trajectories(&self) -> impl Iterator<Item = &Trajectory> + Clone {
        self.train.iter().map(|&i| &self.trajectories[i])
    }

    pub fn validation_trajectories(&self) -> impl Iterator<Item = &Trajectory> + Clone {
        self.validation.iter().map(|&i| &self.trajectories[i])
    }
}

/// 90/10 split by trajectory: `n / 10` validation trajectories (at least one
/// when `n ≥ 2`), chosen by a seeded permutation.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = if n >= 2 { (n / 10).max(1) } else { 0 };
    let perm = RngStream::new(seed).split("split").permutation(n);
    let mut validation = perm[..n_val].to_vec();
    let mut train = perm[n_val..].to_vec();
    validation.sort_unstable();
    train.sort_unstable();
    (train, validation)
}

pub const META_FILE: &str = "meta.json";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";

/// Write `meta.json` and `trajectories.jsonl` into `dir`.
pub fn write_dataset(dir: &Path, meta: &DatasetMeta, trajectories: &[Trajectory]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(meta).map_err(|e| Error::json(&meta_path, e))?;
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;
    let traj_path = dir.join(TRAJECTORIES_FILE);
    let file = fs::File::create(&traj_path).map_err(|e| Error::io(&traj_path, e))?;
    let mut out = BufWriter::new(file);
    for t in trajectories {
        serde_json::to_writer(&mut out, t).map_err(|e| Error::json(&traj_path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(&traj_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&traj_path, e))
}

/// Read and validate a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    let traj_path = dir.join(TRAJECTORIES_FILE);
    let file = fs::File::open(&traj_path).map_err(|e| Error::io(&traj_path, e))?;
    let mut trajectories = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&traj_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("trajectory {}: malformed record: {e}", trajectories.len().max(i))))?;
        trajectories.push(t);
    }
    Dataset::new(meta, trajectories)
}

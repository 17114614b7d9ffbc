//! Rollout evaluation, the best-of-last-k protocol and seed aggregation.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetMeta, Goal, GoalMode};
use crate::envs::{EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::policy::{Agent, Observation};
use crate::rng::RngStream;

/// Anything that maps a batch of observations to actions.
pub trait Controller {
    /// Number of states in each observation history.
    fn history_len(&self) -> usize;
    fn act(&self, obs: &[Observation]) -> Result<Vec<Vec<f64>>>;
}

impl Controller for Agent {
    fn history_len(&self) -> usize {
        self.trajnet.as_ref().map_or(1, |t| t.config.k)
    }

    fn act(&self, obs: &[Observation]) -> Result<Vec<Vec<f64>>> {
        Agent::act(self, obs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Episodes per checkpoint; 100 for mazes and 10 for LineRun when unset.
    pub n_episodes: Option<usize>,
    /// Target return for return-conditioned evaluation; the dataset's expert
    /// reference when unset.
    pub target_return: Option<f64>,
    /// Step cap per episode; the environment's cap when unset.
    pub episode_cap: Option<usize>,
    /// Checkpoints considered by the best-of-last-k protocol.
    pub last_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_episodes: None, target_return: None, episode_cap: None, last_k: 5 }
    }
}

impl EvalConfig {
    pub fn episodes_for(&self, env: &EnvSpec) -> usize {
        self.n_episodes.unwrap_or(match env {
            EnvSpec::Minimaze { .. } => 100,
            EnvSpec::Linerun => 10,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_episodes == Some(0) {
            return Err(Error::Config("eval: n_episodes must be at least 1".into()));
        }
        if self.episode_cap == Some(0) || self.last_k == 0 {
            return Err(Error::Config("eval: episode_cap and last_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub total_return: f64,
    pub success: bool,
    pub length: usize,
    /// Visited states, starting with the reset state.
    pub trace: Vec<Vec<f64>>,
    /// Why the episode was aborted, if it was.
    pub failure: Option<String>,
}

/// How the goal fed to the controller evolves during an episode.
#[derive(Debug, Clone, PartialEq)]
pub enum GoalSchedule {
    /// Fixed target for the whole episode.
    Fixed(Goal),
    /// Return-to-go `(target − collected) / (h_max − t)`.
    ReturnToGo { target: f64, h_max: usize },
}

impl GoalSchedule {
    pub fn for_env(env: &EnvSpec, meta: &DatasetMeta, target_return: Option<f64>) -> Result<Self> {
        match meta.goal_mode {
            GoalMode::TargetState => Ok(GoalSchedule::Fixed(env.initial_eval_goal(None)?)),
            GoalMode::ReturnToGo => {
                let target = match target_return {
                    Some(r) => r,
                    None => {
                        meta.reference_scores
                            .as_ref()
                            .ok_or_else(|| Error::Data("return-conditioned evaluation needs reference scores".into()))?
                            .expert
                    }
                };
                Ok(GoalSchedule::ReturnToGo { target, h_max: meta.max_episode_steps })
            }
        }
    }

    pub fn at(&self, t: usize, collected: f64) -> Goal {
        match self {
            GoalSchedule::Fixed(g) => g.clone(),
            GoalSchedule::ReturnToGo { target, h_max } => {
                Goal::ReturnToGo((target - collected) / h_max.saturating_sub(t).max(1) as f64)
            }
        }
    }
}

struct Episode {
    env: Box<dyn Environment>,
    history: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    pads: Vec<bool>,
    result: EpisodeResult,
    active: bool,
}

/// Roll `n` episodes in lockstep, one batched controller call per step.
/// Episode `i` resets from `rng.split_index(i)`. The history holds the last
/// `k` states, filled with the reset state at the start. Actions are clipped
/// to `[-1, 1]`; a non-finite action ends the episode as a failure.
pub fn rollout_episodes(
    env: &EnvSpec,
    controller: &dyn Controller,
    goals: &GoalSchedule,
    normalize_goal: &dyn Fn(&Goal) -> Result<Vec<f64>>,
    n: usize,
    cap: Option<usize>,
    rng: &RngStream,
) -> Result<Vec<EpisodeResult>> {
    let cap = cap.unwrap_or(env.episode_cap()?);
    rollout_with(&|| env.make(), controller, goals, normalize_goal, n, cap, rng)
}

/// [`rollout_episodes`] over environments built by `make`.
pub fn rollout_with(
    make: &dyn Fn() -> Result<Box<dyn Environment>>,
    controller: &dyn Controller,
    goals: &GoalSchedule,
    normalize_goal: &dyn Fn(&Goal) -> Result<Vec<f64>>,
    n: usize,
    cap: usize,
    rng: &RngStream,
) -> Result<Vec<EpisodeResult>> {
    let k = controller.history_len().max(1);
    let mut episodes = Vec::with_capacity(n);
    let mut action_dim = 0;
    for i in 0..n {
        let mut e = make()?;
        action_dim = e.action_dim();
        let s0 = e.reset(&mut rng.split_index(i as u64));
        episodes.push(Episode {
            env: e,
            history: vec![s0.clone(); k],
            actions: vec![vec![0.0; action_dim]; k - 1],
            pads: vec![true; k - 1],
            result: EpisodeResult { total_return: 0.0, success: false, length: 0, trace: vec![s0], failure: None },
            active: true,
        });
    }
    for t in 0..cap {
        let live: Vec<usize> = (0..n).filter(|&i| episodes[i].active).collect();
        if live.is_empty() {
            break;
        }
        let obs = live
            .iter()
            .map(|&i| {
                let ep = &episodes[i];
                Ok(Observation {
                    history: ep.history.clone(),
                    history_actions: (ep.actions.clone(), ep.pads.clone()),
                    goal: normalize_goal(&goals.at(t, ep.result.total_return))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let actions = controller.act(&obs)?;
        for (&i, action) in live.iter().zip(actions) {
            let ep = &mut episodes[i];
            if action.len() != action_dim || action.iter().any(|a| !a.is_finite()) {
                ep.result.failure = Some(format!("invalid action {action:?} at step {t}"));
                ep.active = false;
                continue;
            }
            let action: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
            let step = ep.env.step(&action);
            ep.result.total_return += step.reward;
            ep.result.length += 1;
            ep.result.success |= step.success;
            ep.result.trace.push(step.state.clone());
            if k > 1 {
                ep.actions.remove(0);
                ep.actions.push(action);
                ep.pads.remove(0);
                ep.pads.push(false);
            }
            ep.history.remove(0);
            ep.history.push(step.state);
            if step.done {
                ep.active = false;
            }
        }
    }
    Ok(episodes.into_iter().map(|e| e.result).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub score: f64,
    pub n_episodes: usize,
    pub mean_return: f64,
    pub success_rate: f64,
}

/// Maze: success rate × 100. Return-conditioned: normalized score
/// `100 (R − R_random) / (R_expert − R_random)` of the mean return.
pub fn score_episodes(meta: &DatasetMeta, episodes: &[EpisodeResult]) -> Result<CheckpointScore> {
    if episodes.is_empty() {
        return Err(Error::Config("no episodes to score".into()));
    }
    let n = episodes.len() as f64;
    let mean_return = episodes.iter().map(|e| e.total_return).sum::<f64>() / n;
    let success_rate = episodes.iter().filter(|e| e.success).count() as f64 / n;
    let score = match meta.goal_mode {
        GoalMode::TargetState => 100.0 * success_rate,
        GoalMode::ReturnToGo => {
            let r = meta
                .reference_scores
                .as_ref()
                .ok_or_else(|| Error::Data("normalized score needs reference scores".into()))?;
            normalized_score(mean_return, r.random, r.expert)
        }
    };
    Ok(CheckpointScore { score, n_episodes: episodes.len(), mean_return, success_rate })
}

pub fn normalized_score(total: f64, random: f64, expert: f64) -> f64 {
    100.0 * (total - random) / (expert - random)
}

pub fn evaluate_agent(agent: &Agent, meta: &DatasetMeta, config: &EvalConfig, seed: u64) -> Result<CheckpointScore> {
    config.validate()?;
    let env = EnvSpec::from_meta(meta)?;
    if agent.policy.layout.state_dim != env.state_dim() || agent.policy.layout.action_dim != env.action_dim() {
        return Err(Error::Incompatible(format!(
            "policy layout {:?} does not fit {} (state {}, action {})",
            agent.policy.layout,
            env.env_id(),
            env.state_dim(),
            env.action_dim()
        )));
    }
    let goals = GoalSchedule::for_env(&env, meta, config.target_return)?;
    let normalize = |g: &Goal| agent.stats.normalize_goal(g, meta);
    let rng = RngStream::new(seed).split("eval");
    let episodes =
        rollout_episodes(&env, agent, &goals, &normalize, config.episodes_for(&env), config.episode_cap, &rng)?;
    score_episodes(meta, &episodes)
}

/// Max over the final `min(k, len)` scores.
pub fn best_of_last_k(scores: &[f64], k: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Config("best_of_last_k needs at least one score".into()));
    }
    let start = scores.len().saturating_sub(k.max(1));
    Ok(scores[start..].iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_seeds: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub iqm: f64,
}

/// Mean, sample std (0 for one seed), median, and IQM dropping `⌊n/4⌋`
/// scores from each end.
pub fn aggregate_seeds(scores: &[f64]) -> Result<AggregateReport> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::Config("aggregate_seeds needs at least one score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (sorted.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    let cut = n / 4;
    let middle = &sorted[cut..n - cut];
    let iqm = middle.iter().sum::<f64>() / middle.len() as f64;
    Ok(AggregateReport { n_seeds: n, mean, std, median, iqm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: String,
    pub seed: u64,
    pub epochs: Vec<usize>,
    pub scores: Vec<f64>,
    pub chosen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<RunRecord>,
    pub aggregate: AggregateReport,
}

/// One evaluation event line for `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEvent {
    pub phase: String,
    pub seed: u64,
    pub epoch: usize,
    pub score: f64,
    pub n_episodes: usize,
}

use serde::{Deserialize, Serialize};

use super::linerun::{linerun_dynamics, LineRunState, HORIZON};
use super::maze::{cell_center, maze_reset, maze_step, plan_waypoints, reached, CellIndex, MazeSpec, MazeState};
use super::{EnvSpec, Environment};
use crate::data::{DatasetMeta, ReferenceScores, Trajectory};
use crate::error::{Error, Result};
use crate::rng::RngStream;

const START_JITTER: f64 = 0.2;
const REFERENCE_EPISODES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    /// Random starts and chained nearby subgoals, ignoring the goal region
    /// (maze); bang-bang with random direction flips (linerun).
    Play,
    /// Direct route to a target (maze); full throttle (linerun).
    Expert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectorConfig {
    pub kp: f64,
    pub kd: f64,
    pub noise_std: f64,
    pub switch_radius: f64,
    pub n_trajectories: usize,
    pub style: Style,
    /// Maximum BFS distance of a play subgoal from the current cell.
    pub subgoal_hops: usize,
    /// Play trajectory length; defaults to the episode cap.
    pub play_length: Option<usize>,
    /// Upper bound of the per-trajectory direction-flip probability (linerun play).
    pub max_flip_prob: f64,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        CollectorConfig {
            kp: 1.0,
            kd: 0.6,
            noise_std: 0.2,
            switch_radius: 0.4,
            n_trajectories: 200,
            style: Style::Play,
            subgoal_hops: 4,
            play_length: None,
            max_flip_prob: 0.05,
        }
    }
}

impl CollectorConfig {
    fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if self.n_trajectories == 0 {
            return Err(Error::Config("n_trajectories must be positive".into()));
        }
        if self.subgoal_hops == 0 {
            return Err(Error::Config("subgoal_hops must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.max_flip_prob) {
            return Err(Error::Config("max_flip_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Summary printed after data generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub n_trajectories: usize,
    pub length_min: usize,
    pub length_max: usize,
    pub length_mean: f64,
    pub mean_return: f64,
    /// Fraction of trajectories that reached the environment goal.
    pub success_fraction: f64,
    /// Fraction of maze trajectories that start in the start region and end
    /// within reach of the evaluation goal.
    pub task_fraction: f64,
}

impl AuditSummary {
    pub fn new(env: &EnvSpec, trajectories: &[Trajectory]) -> Result<Self> {
        let n = trajectories.len();
        let lengths: Vec<usize> = trajectories.iter().map(Trajectory::len).collect();
        let maze = env.maze_spec()?;
        let mut successes = 0;
        let mut tasks = 0;
        if let Some(spec) = &maze {
            let goal = spec.eval_goal()?;
            let starts = spec.start_cells();
            for t in trajectories {
                if t.total_reward() > 0.0 {
                    successes += 1;
                }
                let first = &t.states[0];
                let last = &t.states[t.len() - 1];
                let start_ok = spec.cell_at(first[0], first[1]).is_some_and(|c| starts.contains(&c));
                if start_ok && (t.total_reward() > 0.0 || reached([last[0], last[1]], goal)) {
                    tasks += 1;
                }
            }
        }
        Ok(AuditSummary {
            n_trajectories: n,
            length_min: lengths.iter().copied().min().unwrap_or(0),
            length_max: lengths.iter().copied().max().unwrap_or(0),
            length_mean: lengths.iter().sum::<usize>() as f64 / n.max(1) as f64,
            mean_return: trajectories.iter().map(Trajectory::total_reward).sum::<f64>() / n.max(1) as f64,
            success_fraction: successes as f64 / n.max(1) as f64,
            task_fraction: tasks as f64 / n.max(1) as f64,
        })
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn pd_action(cfg: &CollectorConfig, s: MazeState, w: [f64; 2], rng: &mut RngStream) -> [f64; 2] {
    let mut a = [0.0; 2];
    let (p, v) = ([s.x, s.y], [s.vx, s.vy]);
    for i in 0..2 {
        let noise = if cfg.noise_std > 0.0 { cfg.noise_std * rng.normal() } else { 0.0 };
        a[i] = (cfg.kp * (w[i] - p[i]) - cfg.kd * v[i] + noise).clamp(-1.0, 1.0);
    }
    a
}

/// Tracks progress along a waypoint list.
struct Follower {
    waypoints: Vec<[f64; 2]>,
    index: usize,
}

impl Follower {
    fn new(waypoints: Vec<[f64; 2]>) -> Self {
        Follower { waypoints, index: 0 }
    }

    fn target(&mut self, pos: [f64; 2], radius: f64) -> [f64; 2] {
        while self.index + 1 < self.waypoints.len() && dist(pos, self.waypoints[self.index]) <= radius {
            self.index += 1;
        }
        self.waypoints[self.index]
    }

    fn finished(&self, pos: [f64; 2], radius: f64) -> bool {
        self.index + 1 == self.waypoints.len() && dist(pos, self.waypoints[self.index]) <= radius
    }
}

fn current_cell(spec: &MazeSpec, s: MazeState) -> CellIndex {
    spec.cell_at(s.x, s.y).expect("maze states stay inside the grid")
}

fn random_subgoal(spec: &MazeSpec, from: CellIndex, hops: usize, rng: &mut RngStream) -> CellIndex {
    let dist = spec.bfs_distances(from);
    let candidates: Vec<CellIndex> = spec
        .free_cells()
        .into_iter()
        .filter(|&(r, c)| dist[r][c].is_some_and(|d| d >= 1 && d <= hops))
        .collect();
    if candidates.is_empty() {
        from
    } else {
        candidates[rng.index(candidates.len())]
    }
}

struct Recorder {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
}

impl Recorder {
    fn new() -> Self {
        Recorder { states: Vec::new(), actions: Vec::new(), rewards: Vec::new() }
    }

    fn push(&mut self, state: Vec<f64>, action: Vec<f64>, reward: f64) {
        self.states.push(state);
        self.actions.push(action);
        self.rewards.push(reward);
    }

    fn finish(self) -> Trajectory {
        Trajectory { states: self.states, actions: self.actions, rewards: Some(self.rewards) }
    }
}

fn maze_play(spec: &MazeSpec, cfg: &CollectorConfig, rng: &mut RngStream) -> Result<Trajectory> {
    let goal = spec.eval_goal()?;
    let free = spec.free_cells();
    let [cx, cy] = cell_center(free[rng.index(free.len())]);
    let mut s = MazeState::at(
        cx + rng.uniform_range(-START_JITTER, START_JITTER),
        cy + rng.uniform_range(-START_JITTER, START_JITTER),
    );
    let length = cfg.play_length.unwrap_or(spec.episode_cap).min(spec.episode_cap);
    let mut cell = current_cell(spec, s);
    let mut follower = Follower::new(plan_waypoints(spec, cell, random_subgoal(spec, cell, cfg.subgoal_hops, rng))?);
    let mut rec = Recorder::new();
    for t in 0..length {
        if follower.finished(s.position(), cfg.switch_radius) {
            cell = current_cell(spec, s);
            let sub = random_subgoal(spec, cell, cfg.subgoal_hops, rng);
            follower = Follower::new(plan_waypoints(spec, cell, sub)?);
        }
        let w = follower.target(s.position(), cfg.switch_radius);
        let a = pd_action(cfg, s, w, rng);
        let (next, step) = maze_step(spec, goal, s, a, t);
        rec.push(s.to_vec(), a.to_vec(), step.reward);
        s = next;
    }
    Ok(rec.finish())
}

/// Direct route from the start region to a random dead end outside it, or to
/// the goal cell when there is none.
fn maze_expert(spec: &MazeSpec, cfg: &CollectorConfig, rng: &mut RngStream) -> Result<Trajectory> {
    let goal = spec.eval_goal()?;
    let mut s = maze_reset(spec, rng);
    let starts = spec.start_cells();
    let targets: Vec<CellIndex> = spec.dead_ends().into_iter().filter(|c| !starts.contains(c)).collect();
    let target_cell = if targets.is_empty() {
        spec.cell_at(goal[0], goal[1]).expect("goal lies on the grid")
    } else {
        targets[rng.index(targets.len())]
    };
    let target = cell_center(target_cell);
    let mut follower = Follower::new(plan_waypoints(spec, current_cell(spec, s), target_cell)?);
    let mut rec = Recorder::new();
    for t in 0..spec.episode_cap {
        let w = follower.target(s.position(), cfg.switch_radius);
        let a = pd_action(cfg, s, w, rng);
        let (next, step) = maze_step(spec, goal, s, a, t);
        rec.push(s.to_vec(), a.to_vec(), step.reward);
        s = next;
        if step.done || reached(s.position(), target) {
            break;
        }
    }
    Ok(rec.finish())
}

fn linerun_play(cfg: &CollectorConfig, rng: &mut RngStream) -> Trajectory {
    let flip = rng.uniform() * cfg.max_flip_prob;
    let mut direction = 1.0;
    let mut s = LineRunState { x: 0.0, v: 0.0 };
    let mut rec = Recorder::new();
    for _ in 0..HORIZON {
        if rng.bernoulli(flip) {
            direction = -direction;
        }
        let (next, r) = linerun_dynamics(s, direction);
        rec.push(vec![s.x, s.v], vec![direction], r);
        s = next;
    }
    rec.finish()
}

fn linerun_expert() -> Trajectory {
    let mut s = LineRunState { x: 0.0, v: 0.0 };
    let mut rec = Recorder::new();
    for _ in 0..HORIZON {
        let (next, r) = linerun_dynamics(s, 1.0);
        rec.push(vec![s.x, s.v], vec![1.0], r);
        s = next;
    }
    rec.finish()
}

fn collect_one(env: &EnvSpec, maze: Option<&MazeSpec>, cfg: &CollectorConfig, rng: &mut RngStream) -> Result<Trajectory> {
    match (env, maze, cfg.style) {
        (EnvSpec::Minimaze { .. }, Some(spec), Style::Play) => maze_play(spec, cfg, rng),
        (EnvSpec::Minimaze { .. }, Some(spec), Style::Expert) => maze_expert(spec, cfg, rng),
        (EnvSpec::Linerun, _, Style::Play) => Ok(linerun_play(cfg, rng)),
        (EnvSpec::Linerun, _, Style::Expert) => Ok(linerun_expert()),
        _ => Err(Error::Config("maze environment without a layout".into())),
    }
}

fn episode_return(env: &mut dyn Environment, rng: &mut RngStream, mut policy: impl FnMut(&[f64], &mut RngStream) -> Vec<f64>) -> f64 {
    let mut state = env.reset(rng);
    let mut total = 0.0;
    for _ in 0..env.episode_cap() {
        let step = env.step(&policy(&state, rng));
        total += step.reward;
        state = step.state;
        if step.done {
            break;
        }
    }
    total
}

/// Mean returns of a uniform-random policy and of the noise-free scripted
/// expert toward the evaluation goal, over 100 episodes each.
pub fn reference_scores(env: &EnvSpec, cfg: &CollectorConfig, seed: u64) -> Result<ReferenceScores> {
    let root = RngStream::new(seed).split("reference");
    let action_dim = env.action_dim();
    let mut random_total = 0.0;
    let mut expert_total = 0.0;
    let maze = env.maze_spec()?;
    let quiet = CollectorConfig { noise_std: 0.0, ..cfg.clone() };
    for i in 0..REFERENCE_EPISODES {
        let mut rng = root.split("random").split_index(i as u64);
        let mut e = env.make()?;
        random_total += episode_return(e.as_mut(), &mut rng, |_, r| (0..action_dim).map(|_| r.uniform_range(-1.0, 1.0)).collect());
        let mut rng = root.split("expert").split_index(i as u64);
        expert_total += match &maze {
            Some(spec) => {
                let goal = spec.eval_goal()?;
                let goal_cell = spec.cell_at(goal[0], goal[1]).expect("goal lies on the grid");
                let start = maze_reset(spec, &mut rng);
                let mut follower = Follower::new(plan_waypoints(spec, current_cell(spec, start), goal_cell)?);
                let mut s = start;
                let mut total = 0.0;
                for t in 0..spec.episode_cap {
                    let w = follower.target(s.position(), quiet.switch_radius);
                    let (next, step) = maze_step(spec, goal, s, pd_action(&quiet, s, w, &mut rng), t);
                    total += step.reward;
                    s = next;
                    if step.done {
                        break;
                    }
                }
                total
            }
            None => linerun_expert().total_reward(),
        };
    }
    let n = REFERENCE_EPISODES as f64;
    Ok(ReferenceScores { random: random_total / n, expert: expert_total / n })
}

/// Collect `cfg.n_trajectories` trajectories; trajectory `i` depends only on
/// `(seed, i)`.
pub fn collect_dataset(env: &EnvSpec, cfg: &CollectorConfig, seed: u64) -> Result<(DatasetMeta, Vec<Trajectory>)> {
    cfg.validate()?;
    let maze = env.maze_spec()?;
    let root = RngStream::new(seed).split("collect");
    let mut trajectories = Vec::with_capacity(cfg.n_trajectories);
    for i in 0..cfg.n_trajectories {
        let mut rng = root.split_index(i as u64);
        trajectories.push(collect_one(env, maze.as_ref(), cfg, &mut rng)?);
    }
    let mut meta = env.dataset_meta(seed)?;
    meta.reference_scores = Some(reference_scores(env, cfg, seed)?);
    Ok((meta, trajectories))
}

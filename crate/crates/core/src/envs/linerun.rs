use crate::rng::RngStream;

use super::{Environment, Step};

pub const HORIZON: usize = 200;
const DT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineRunState {
    pub x: f64,
    pub v: f64,
}

/// Returns the successor state and its reward (the new velocity).
pub fn linerun_dynamics(s: LineRunState, action: f64) -> (LineRunState, f64) {
    let a = action.clamp(-1.0, 1.0);
    let v = (s.v + DT * a).clamp(-1.0, 1.0);
    (LineRunState { x: s.x + DT * v, v }, v)
}

#[derive(Debug, Clone)]
pub struct LineRunEnv {
    state: LineRunState,
    steps: usize,
}

impl Default for LineRunEnv {
    fn default() -> Self {
        LineRunEnv { state: LineRunState { x: 0.0, v: 0.0 }, steps: 0 }
    }
}

impl LineRunEnv {
    pub fn state(&self) -> LineRunState {
        self.state
    }
}

impl Environment for LineRunEnv {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn episode_cap(&self) -> usize {
        HORIZON
    }

    fn reset(&mut self, _rng: &mut RngStream) -> Vec<f64> {
        *self = LineRunEnv::default();
        vec![0.0, 0.0]
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let (next, reward) = linerun_dynamics(self.state, action[0]);
        self.state = next;
        self.steps += 1;
        Step { state: vec![next.x, next.v], reward, done: self.steps >= HORIZON, success: false }
    }
}

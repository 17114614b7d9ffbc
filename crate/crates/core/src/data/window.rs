use super::Trajectory;
use crate::error::{Error, Result};

/// A (history, future) cut around anchor step `t` (0-based), with endpoint
/// padding. Position `i < k` holds step `t - k + 1 + i`; position `k + j`
/// holds step `t + 1 + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub t: usize,
    pub history: Vec<Vec<f64>>,
    pub future: Vec<Vec<f64>>,
    pub history_actions: Vec<Vec<f64>>,
    pub future_actions: Vec<Vec<f64>>,
    /// One flag per position over `k + p`.
    pub padded: Vec<bool>,
}

impl WindowSample {
    pub fn k(&self) -> usize {
        self.history.len()
    }

    pub fn p(&self) -> usize {
        self.future.len()
    }

    /// History followed by future.
    pub fn states(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.history.iter().chain(&self.future)
    }

    pub fn actions(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.history_actions.iter().chain(&self.future_actions)
    }
}

pub fn sample_window(traj: &Trajectory, t: usize, k: usize, p: usize) -> Result<WindowSample> {
    let h = traj.len();
    if t >= h {
        return Err(Error::Data(format!("timestep {t} out of range for trajectory of length {h}")));
    }
    if k == 0 {
        return Err(Error::Config("history length k must be at least 1".into()));
    }
    let mut padded = Vec::with_capacity(k + p);
    let mut history = Vec::with_capacity(k);
    let mut history_actions = Vec::with_capacity(k);
    for i in 0..k {
        let step = (t + 1 + i) as isize - k as isize;
        let idx = step.max(0) as usize;
        padded.push(step < 0);
        history.push(traj.states[idx].clone());
        history_actions.push(traj.actions[idx].clone());
    }
    let mut future = Vec::with_capacity(p);
    let mut future_actions = Vec::with_capacity(p);
    for j in 0..p {
        let step = t + 1 + j;
        padded.push(step >= h);
        let idx = step.min(h - 1);
        future.push(traj.states[idx].clone());
        future_actions.push(traj.actions[idx].clone());
    }
    Ok(WindowSample { t, history, future, history_actions, future_actions, padded })
}

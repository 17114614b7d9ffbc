//! Decoded-future export: CSV rows and a maze SVG overlay.

use std::fmt::Write as _;

use crate::data::{sample_window, Dataset, Goal, GoalMode, NormStats};
use crate::envs::maze::{Cell, MazeSpec};
use crate::error::{Error, Result};
use crate::policy::decode_explicit_future;
use crate::tensor::Tensor;
use crate::trajnet::{unmasked_input, TrajNet};

const CELL_PX: f64 = 40.0;

/// History and decoded future for one trajectory step.
#[derive(Debug, Clone, PartialEq)]
pub struct FutureView {
    pub t: usize,
    pub history: Vec<Vec<f64>>,
    /// Goal in state units, if the model was given one.
    pub goal: Option<Goal>,
    /// Decoded future `[p, recon_width]` in state units.
    pub future: Tensor<f64>,
    pub recon_dims: Vec<usize>,
}

/// Hindsight goal for a dataset step: the trajectory's final state in the
/// goal subspace, or the return-to-go from `t`.
pub fn hindsight_goal(ds: &Dataset, index: usize, t: usize) -> Result<Goal> {
    let tr = &ds.trajectories[index];
    Ok(match ds.meta.goal_mode {
        GoalMode::TargetState => {
            let last = tr.states.last().ok_or_else(|| Error::Data(format!("trajectory {index} is empty")))?;
            Goal::Target(ds.meta.goal_subspace.iter().map(|&d| last[d]).collect())
        }
        GoalMode::ReturnToGo => {
            let rewards = tr.rewards.as_deref().ok_or_else(|| Error::Data(format!("trajectory {index}: no rewards")))?;
            Goal::ReturnToGo(crate::data::return_to_go(rewards, t, ds.meta.max_episode_steps))
        }
    })
}

/// Encode trajectory `index`'s history at step `t` and decode its future.
/// With `use_goal` false the goal token is left out.
pub fn future_view(
    model: &TrajNet<f64>,
    stats: &NormStats,
    ds: &Dataset,
    index: usize,
    t: usize,
    use_goal: bool,
) -> Result<FutureView> {
    let tr = ds
        .trajectories
        .get(index)
        .ok_or_else(|| Error::Data(format!("index {index} out of range for {} trajectories", ds.trajectories.len())))?;
    if t >= tr.len() {
        return Err(Error::Data(format!("timestep {t} out of range for trajectory {index} of length {}", tr.len())));
    }
    if !model.config.objective.predicts_future() {
        return Err(Error::Incompatible(format!("objective {} does not decode a future", model.config.objective)));
    }
    let k = model.config.k;
    let w = sample_window(tr, t, k, 0)?;
    let goal = hindsight_goal(ds, index, t)?;
    let model = if use_goal && model.config.goal_conditioning { model.clone() } else { model.without_goal() };
    let goals = model.config.goal_conditioning.then(|| stats.normalize_goal(&goal, &ds.meta)).transpose()?;
    let actions = vec![(w.history_actions[..k - 1].to_vec(), w.padded[..k - 1].to_vec())];
    let input = unmasked_input(
        &model.config,
        &model.dims,
        stats,
        std::slice::from_ref(&w.history),
        model.config.include_actions.then_some(actions.as_slice()),
        goals.as_ref().map(std::slice::from_ref),
    )?;
    let b = model.bottleneck(&input)?;
    let future = decode_explicit_future(&model, stats, &b)?;
    let shape = future.shape().to_vec();
    Ok(FutureView {
        t,
        history: w.history,
        goal: model.config.goal_conditioning.then_some(goal),
        future: Tensor::new(shape[1..].to_vec(), future.into_data())?,
        recon_dims: model.dims.recon_dims.clone(),
    })
}

/// `t,dim<i>,...` header, then one row per decoded future step.
pub fn future_csv(view: &FutureView) -> String {
    let mut out = String::from("t");
    for d in &view.recon_dims {
        write!(out, ",dim{d}").expect("write to string");
    }
    out.push('\n');
    let r = view.recon_dims.len();
    for (j, row) in view.future.data().chunks(r).enumerate() {
        write!(out, "{}", view.t + 1 + j).expect("write to string");
        for v in row {
            write!(out, ",{v}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

fn polyline(points: impl Iterator<Item = (f64, f64)>, color: &str) -> String {
    let pts: Vec<String> = points.map(|(x, y)| format!("{:.3},{:.3}", x * CELL_PX, y * CELL_PX)).collect();
    format!("<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n", pts.join(" "))
}

/// Walls (one rect per wall cell), the history and decoded future as
/// polylines, and the goal as a circle. Needs (x, y) among the decoded dims.
pub fn maze_svg(spec: &MazeSpec, view: &FutureView) -> Result<String> {
    let xi = view.recon_dims.iter().position(|&d| d == 0);
    let yi = view.recon_dims.iter().position(|&d| d == 1);
    let (Some(xi), Some(yi)) = (xi, yi) else {
        return Err(Error::Incompatible("maze plot needs x and y among the reconstructed dims".into()));
    };
    let (w, h) = (spec.cols() as f64 * CELL_PX, spec.rows() as f64 * CELL_PX);
    let mut out = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    for r in 0..spec.rows() {
        for c in 0..spec.cols() {
            if spec.cell((r, c)) == Cell::Wall {
                writeln!(
                    out,
                    "<rect class=\"wall\" x=\"{}\" y=\"{}\" width=\"{CELL_PX}\" height=\"{CELL_PX}\" fill=\"#444\"/>",
                    c as f64 * CELL_PX,
                    r as f64 * CELL_PX
                )
                .expect("write to string");
            }
        }
    }
    out.push_str(&polyline(view.history.iter().map(|s| (s[0], s[1])), "#1f77b4"));
    let r = view.recon_dims.len();
    let last = view.history.last().expect("nonempty history");
    let future = std::iter::once((last[0], last[1])).chain(view.future.data().chunks(r).map(|row| (row[xi], row[yi])));
    out.push_str(&polyline(future, "#d62728"));
    if let Some(Goal::Target(g)) = &view.goal {
        writeln!(
            out,
            "<circle class=\"goal\" cx=\"{:.3}\" cy=\"{:.3}\" r=\"{}\" fill=\"#2ca02c\"/>",
            g[0] * CELL_PX,
            g[1] * CELL_PX,
            CELL_PX / 4.0
        )
        .expect("write to string");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

use crate::data::{
    build_mask, sample_goal, sample_window, Dataset, Goal, GoalMode, MaskSpec, NormStats, Trajectory, WindowSample,
};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use super::model::{EncoderInput, ModelDims, Targets, TrajNetConfig};

/// One training example before tensor assembly.
#[derive(Debug, Clone)]
pub struct Sample {
    pub traj: usize,
    pub t: usize,
    pub goal: Goal,
    pub mask: MaskSpec,
}

/// Trajectories usable as anchors: target-state goals need a later state.
pub fn anchor_candidates(ds: &Dataset, indices: &[usize]) -> Vec<usize> {
    let min_len = if ds.meta.goal_mode == GoalMode::TargetState { 2 } else { 1 };
    indices.iter().copied().filter(|&i| ds.trajectories[i].len() >= min_len).collect()
}

/// Anchor step, uniform over the trajectory (excluding the final step when
/// goals are future states).
pub fn sample_anchor(traj: &Trajectory, mode: GoalMode, rng: &mut RngStream) -> usize {
    let span = match mode {
        GoalMode::TargetState => traj.len() - 1,
        GoalMode::ReturnToGo => traj.len(),
    };
    rng.index(span)
}

pub fn draw_sample(ds: &Dataset, traj: usize, config: &TrajNetConfig, rng: &mut RngStream) -> Result<Sample> {
    let tr = &ds.trajectories[traj];
    let t = sample_anchor(tr, ds.meta.goal_mode, rng);
    let goal = sample_goal(tr, t, &ds.meta, rng)?;
    let mask = build_mask(config.objective, config.k, config.p, rng)?;
    Ok(Sample { traj, t, goal, mask })
}

pub fn model_dims(ds: &Dataset, config: &TrajNetConfig, default_recon: &[usize]) -> Result<ModelDims> {
    let recon_dims = if config.include_actions {
        (0..ds.meta.state_dim).collect()
    } else {
        config.reconstruction_subspace.clone().unwrap_or_else(|| default_recon.to_vec())
    };
    if let Some(&bad) = recon_dims.iter().find(|&&d| d >= ds.meta.state_dim) {
        return Err(Error::Config(format!("reconstruction dim {bad} >= state_dim {}", ds.meta.state_dim)));
    }
    Ok(ModelDims {
        state_dim: ds.meta.state_dim,
        action_dim: ds.meta.action_dim,
        goal_dim: ds.meta.goal_dim(),
        recon_dims,
    })
}

/// Assembled tensors for a list of samples.
pub struct Batch {
    pub input: EncoderInput<f64>,
    pub targets: Targets<f64>,
}

pub fn assemble(
    ds: &Dataset,
    stats: &NormStats,
    config: &TrajNetConfig,
    dims: &ModelDims,
    samples: &[Sample],
) -> Result<Batch> {
    let b = samples.len();
    let (k, span) = (config.k, config.span());
    let n_enc = config.encoder_positions();
    let n_act = config.encoder_actions();
    let r = dims.recon_dims.len();
    let a = dims.action_dim;
    let mut states = Vec::with_capacity(b * n_enc * dims.state_dim);
    let mut state_mask = Vec::with_capacity(b * n_enc);
    let mut actions = Vec::with_capacity(b * n_act * a);
    let mut action_mask = Vec::with_capacity(b * n_act);
    let mut goals = Vec::with_capacity(b * dims.goal_dim);
    let mut t_states = Vec::with_capacity(b * span * r);
    let mut s_weights = Vec::with_capacity(b * span * r);
    let mut t_actions = Vec::with_capacity(b * span * a);
    let mut a_weights = Vec::with_capacity(b * span * a);
    for s in samples {
        let w: WindowSample = sample_window(&ds.trajectories[s.traj], s.t, config.k, config.p)?;
        let all_states: Vec<&Vec<f64>> = w.states().collect();
        let all_actions: Vec<&Vec<f64>> = w.actions().collect();
        for (i, st) in all_states.iter().take(n_enc).enumerate() {
            states.extend(stats.normalize_state(st));
            state_mask.push(s.mask.input_mask[i]);
        }
        for (i, act) in all_actions.iter().take(n_act).enumerate() {
            actions.extend_from_slice(act);
            action_mask.push(s.mask.input_mask[i] || w.padded[i]);
        }
        if config.goal_conditioning {
            goals.extend(stats.normalize_goal(&s.goal, &ds.meta)?);
        }
        for i in 0..span {
            let hidden = s.mask.input_mask[i] || i >= n_enc;
            let live = s.mask.target[i] && !w.padded[i] && (!config.loss_masked_only || hidden);
            let z = stats.normalize_dims(
                &dims.recon_dims.iter().map(|&d| all_states[i][d]).collect::<Vec<_>>(),
                &dims.recon_dims,
            );
            t_states.extend(z);
            s_weights.extend(std::iter::repeat_n(if live { 1.0 } else { 0.0 }, r));
            if config.include_actions {
                let action_hidden = hidden || i + 1 >= k;
                let live = s.mask.target[i] && !w.padded[i] && (!config.loss_masked_only || action_hidden);
                t_actions.extend_from_slice(all_actions[i]);
                a_weights.extend(std::iter::repeat_n(if live { 1.0 } else { 0.0 }, a));
            }
        }
    }
    let input = EncoderInput {
        batch: b,
        states: Tensor::new(vec![b, n_enc, dims.state_dim], states)?,
        state_mask,
        actions: if n_act > 0 { Some(Tensor::new(vec![b, n_act, a], actions)?) } else { None },
        action_mask,
        goals: if config.goal_conditioning { Some(Tensor::new(vec![b, dims.goal_dim], goals)?) } else { None },
    };
    let targets = Targets {
        states: Tensor::new(vec![b, span, r], t_states)?,
        state_weights: s_weights,
        actions: if config.include_actions { Some(Tensor::new(vec![b, span, a], t_actions)?) } else { None },
        action_weights: a_weights,
    };
    Ok(Batch { input, targets })
}

/// Encoder input for unmasked histories, as used by the policy and at
/// rollout time. `histories[i]` holds `k` raw states, `history_actions[i]`
/// the `k - 1` raw actions before the current step with their pad flags,
/// and `goals[i]` an already normalized goal. Only the `k` history positions
/// are fed, none of them masked.
pub fn unmasked_input(
    config: &TrajNetConfig,
    dims: &ModelDims,
    stats: &NormStats,
    histories: &[Vec<Vec<f64>>],
    history_actions: Option<&[(Vec<Vec<f64>>, Vec<bool>)]>,
    goals: Option<&[Vec<f64>]>,
) -> Result<EncoderInput<f64>> {
    let b = histories.len();
    let k = config.k;
    let mut states = Vec::with_capacity(b * k * dims.state_dim);
    for h in histories {
        if h.len() != k {
            return Err(Error::Incompatible(format!("history of length {} for k = {k}", h.len())));
        }
        for s in h {
            states.extend(stats.normalize_state(s));
        }
    }
    let n_act = config.encoder_actions();
    let (actions, action_mask) = match (n_act > 0, history_actions) {
        (false, _) => (None, Vec::new()),
        (true, Some(ha)) => {
            let mut data = Vec::with_capacity(b * n_act * dims.action_dim);
            let mut mask = Vec::with_capacity(b * n_act);
            for (acts, pads) in ha {
                if acts.len() != n_act || pads.len() != n_act {
                    return Err(Error::Incompatible(format!("{} history actions for k = {k}", acts.len())));
                }
                for a in acts {
                    data.extend_from_slice(a);
                }
                mask.extend_from_slice(pads);
            }
            (Some(Tensor::new(vec![b, n_act, dims.action_dim], data)?), mask)
        }
        (true, None) => return Err(Error::Incompatible("model needs history actions".into())),
    };
    let goals = match (config.goal_conditioning, goals) {
        (true, Some(g)) => Some(Tensor::new(vec![b, dims.goal_dim], g.concat())?),
        (true, None) => return Err(Error::Incompatible("goal-conditioned model needs goals".into())),
        (false, _) => None,
    };
    Ok(EncoderInput {
        batch: b,
        states: Tensor::new(vec![b, k, dims.state_dim], states)?,
        state_mask: vec![false; b * k],
        actions,
        action_mask,
        goals,
    })
}

//! Stage-2 policy: an MLP on the current state, the goal and a conditioning
//! vector produced by a frozen TrajNet.

use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::{sample_goal, sample_window, Dataset, Goal, NormStats, STD_FLOOR};
use crate::error::{Error, Result, TensorError};
use crate::nn::Mlp;
use crate::params::{BoundParams, ParamSet};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trajnet::{anchor_candidates, sample_anchor, unmasked_input, TrajNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Flattened slot outputs of the encoder.
    Bottleneck,
    /// Decoded future states.
    ExplicitFuture,
    /// State and goal only.
    None,
}

impl Conditioning {
    pub fn needs_trajnet(self) -> bool {
        self != Conditioning::None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training samples drawn per training trajectory per epoch.
    pub windows_per_trajectory: usize,
    pub conditioning: Conditioning,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden_layers: 2,
            hidden_width: 256,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 256,
            windows_per_trajectory: 64,
            conditioning: Conditioning::Bottleneck,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(Error::Config("policy: hidden_width must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("policy: learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.windows_per_trajectory == 0 {
            return Err(Error::Config("policy: epochs, batch_size and windows_per_trajectory must be positive".into()));
        }
        Ok(())
    }
}

/// Widths of the concatenated policy input `[state; goal; conditioning]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyLayout {
    pub state_dim: usize,
    pub goal_dim: usize,
    pub cond_width: usize,
    pub action_dim: usize,
}

impl PolicyLayout {
    pub fn input_width(&self) -> usize {
        self.state_dim + self.goal_dim + self.cond_width
    }

    pub fn for_model<S: Scalar>(
        conditioning: Conditioning,
        trajnet: Option<&TrajNet<S>>,
        state_dim: usize,
        goal_dim: usize,
        action_dim: usize,
    ) -> Result<Self> {
        let cond_width = match (conditioning, trajnet) {
            (Conditioning::None, _) => 0,
            (Conditioning::Bottleneck, Some(t)) => t.config.n_slots * t.config.d_model,
            (Conditioning::ExplicitFuture, Some(t)) => {
                if !t.config.objective.predicts_future() {
                    return Err(Error::Incompatible(format!(
                        "explicit future conditioning needs a future-predicting objective, got {}",
                        t.config.objective
                    )));
                }
                t.config.p * t.dims.recon_dims.len()
            }
            (mode, None) => return Err(Error::Incompatible(format!("{mode:?} conditioning needs a TrajNet"))),
        };
        Ok(PolicyLayout { state_dim, goal_dim, cond_width, action_dim })
    }
}

/// Per-feature z-score of the conditioning vector, fitted on training
/// samples before the first policy step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    /// Statistics of the rows of `x` (`[n, width]`).
    pub fn fit(x: &Tensor<f64>) -> Result<Self> {
        let (n, w) = match x.shape() {
            [n, w] if *n > 0 => (*n, *w),
            s => return Err(Error::Data(format!("cannot fit feature statistics to shape {s:?}"))),
        };
        let mut mean = vec![0.0; w];
        for row in x.data().chunks(w) {
            for (m, &r) in mean.iter_mut().zip(row) {
                *m += r;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; w];
        for row in x.data().chunks(w) {
            for ((v, &r), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (r - m) * (r - m);
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(FeatureNorm { mean, std })
    }

    pub fn apply<'a>(&'a self, row: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        row.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s)
    }
}

#[derive(Debug, Clone)]
pub struct PolicyNet<S> {
    pub config: PolicyConfig,
    pub layout: PolicyLayout,
    pub params: ParamSet<S>,
    /// Applied to the conditioning slice of the input; unset means identity.
    pub cond_norm: Option<FeatureNorm>,
    mlp: Mlp,
}

impl<S: Scalar> PolicyNet<S> {
    pub fn new(config: PolicyConfig, layout: PolicyLayout, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![layout.input_width()];
        widths.extend(std::iter::repeat_n(config.hidden_width, config.hidden_layers));
        widths.push(layout.action_dim);
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "mlp", &widths, rng);
        Ok(PolicyNet { config, layout, params, cond_norm: None, mlp })
    }

    /// Actions `[batch, action_dim]` from inputs `[batch, input_width]`.
    pub fn forward(&self, tape: &mut Tape<S>, p: &BoundParams, x: Var) -> Result<Var, TensorError> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.layout.input_width() {
            return Err(TensorError::ShapeMismatch {
                op: "policy input",
                lhs: shape.to_vec(),
                rhs: vec![0, self.layout.input_width()],
            });
        }
        self.mlp.forward(tape, p, x)
    }

    pub fn act(&self, x: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }
}

pub type PolicyNet64 = PolicyNet<f64>;

/// Decoded future `[batch, p, recon_width]` in state units.
pub fn decode_explicit_future(trajnet: &TrajNet<f64>, stats: &NormStats, bottleneck: &Tensor<f64>) -> Result<Tensor<f64>> {
    let z = trajnet.decode_future(bottleneck)?;
    let dims = &trajnet.dims.recon_dims;
    let data = z.data().chunks(dims.len()).flat_map(|row| stats.denormalize_dims(row, dims)).collect();
    Ok(Tensor::new(z.shape().to_vec(), data)?)
}

/// Raw observations for a batch of decision points.
#[derive(Debug, Clone, Default)]
pub struct Observation {
    /// `k` states ending at the current one.
    pub history: Vec<Vec<f64>>,
    /// `k - 1` actions before the current step with pad flags.
    pub history_actions: (Vec<Vec<f64>>, Vec<bool>),
    /// Normalized goal.
    pub goal: Vec<f64>,
}

/// A frozen TrajNet (when the conditioning needs one), a policy and the
/// normalization that ties them to raw observations.
#[derive(Debug, Clone)]
pub struct Agent {
    pub trajnet: Option<TrajNet<f64>>,
    pub policy: PolicyNet<f64>,
    pub stats: NormStats,
}

impl Agent {
    /// Policy inputs `[batch, input_width]`.
    pub fn features(&self, obs: &[Observation]) -> Result<Tensor<f64>> {
        let x = raw_features(self.trajnet.as_ref(), self.policy.config.conditioning, &self.stats, &self.policy.layout, obs)?;
        Ok(match &self.policy.cond_norm {
            Some(norm) => normalize_conditioning(x, &self.policy.layout, norm),
            None => x,
        })
    }

    pub fn act(&self, obs: &[Observation]) -> Result<Vec<Vec<f64>>> {
        let x = self.features(obs)?;
        let y = self.policy.act(&x)?;
        Ok(y.data().chunks(self.policy.layout.action_dim).map(|c| c.to_vec()).collect())
    }
}

fn normalize_conditioning(mut x: Tensor<f64>, layout: &PolicyLayout, norm: &FeatureNorm) -> Tensor<f64> {
    let w = layout.input_width();
    let start = layout.state_dim + layout.goal_dim;
    for row in x.data_mut().chunks_mut(w) {
        let cond: Vec<f64> = norm.apply(&row[start..]).collect();
        row[start..].copy_from_slice(&cond);
    }
    x
}

fn raw_features(
    trajnet: Option<&TrajNet<f64>>,
    conditioning: Conditioning,
    stats: &NormStats,
    layout: &PolicyLayout,
    obs: &[Observation],
) -> Result<Tensor<f64>> {
    let b = obs.len();
    let cond = match (conditioning, trajnet) {
        (Conditioning::None, _) => None,
        (mode, Some(t)) => {
            let histories: Vec<Vec<Vec<f64>>> = obs.iter().map(|o| o.history.clone()).collect();
            let actions: Vec<(Vec<Vec<f64>>, Vec<bool>)> = obs.iter().map(|o| o.history_actions.clone()).collect();
            let goals: Vec<Vec<f64>> = obs.iter().map(|o| o.goal.clone()).collect();
            let input = unmasked_input(
                &t.config,
                &t.dims,
                stats,
                &histories,
                t.config.include_actions.then_some(actions.as_slice()),
                t.config.goal_conditioning.then_some(goals.as_slice()),
            )?;
            let bottleneck = t.bottleneck(&input)?;
            Some(match mode {
                Conditioning::Bottleneck => bottleneck,
                _ => t.decode_future(&bottleneck)?,
            })
        }
        (mode, None) => return Err(Error::Incompatible(format!("{mode:?} conditioning needs a TrajNet"))),
    };
    let width = layout.input_width();
    let mut data = Vec::with_capacity(b * width);
    for (i, o) in obs.iter().enumerate() {
        let current = o.history.last().ok_or_else(|| Error::Incompatible("empty history".into()))?;
        if current.len() != layout.state_dim || o.goal.len() != layout.goal_dim {
            return Err(Error::Incompatible(format!(
                "observation widths state {} goal {} vs layout {layout:?}",
                current.len(),
                o.goal.len()
            )));
        }
        data.extend(stats.normalize_state(current));
        data.extend_from_slice(&o.goal);
        if let Some(c) = &cond {
            data.extend_from_slice(&c.data()[i * layout.cond_width..(i + 1) * layout.cond_width]);
        }
    }
    Ok(Tensor::new(vec![b, width], data)?)
}

/// One policy training example: the observation at step `t` and the logged
/// action there.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub obs: Observation,
    pub action: Vec<f64>,
}

pub fn draw_policy_sample(
    ds: &Dataset,
    stats: &NormStats,
    traj: usize,
    k: usize,
    rng: &mut RngStream,
) -> Result<PolicySample> {
    let tr = &ds.trajectories[traj];
    let t = sample_anchor(tr, ds.meta.goal_mode, rng);
    let goal: Goal = sample_goal(tr, t, &ds.meta, rng)?;
    let w = sample_window(tr, t, k, 0)?;
    let history_actions = (w.history_actions[..k - 1].to_vec(), w.padded[..k - 1].to_vec());
    Ok(PolicySample {
        obs: Observation { history: w.history, history_actions, goal: stats.normalize_goal(&goal, &ds.meta)? },
        action: tr.actions[t].clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyEpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

pub enum PolicyEvent<'a> {
    Step { epoch: usize, step: usize, loss: f64 },
    Epoch { report: PolicyEpochReport, policy: &'a PolicyNet<f64>, adam: &'a AdamState<f64> },
}

pub struct PolicyOutcome {
    pub agent: Agent,
    pub adam: AdamState<f64>,
    pub history: Vec<PolicyEpochReport>,
}

/// History length the policy observes: the TrajNet's `k`, or a single state
/// without one.
pub fn history_len(trajnet: Option<&TrajNet<f64>>) -> usize {
    trajnet.map_or(1, |t| t.config.k)
}

fn action_targets(samples: &[PolicySample], action_dim: usize) -> Result<Tensor<f64>> {
    let data: Vec<f64> = samples.iter().flat_map(|s| s.action.iter().copied()).collect();
    Ok(Tensor::new(vec![samples.len(), action_dim], data)?)
}

/// Mean action MSE of `agent` over `samples`.
pub fn action_loss(agent: &Agent, samples: &[PolicySample], batch_size: usize) -> Result<f64> {
    let a = agent.policy.layout.action_dim;
    let mut sse = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let obs: Vec<Observation> = chunk.iter().map(|s| s.obs.clone()).collect();
        let pred = agent.policy.act(&agent.features(&obs)?)?;
        let target = action_targets(chunk, a)?;
        sse += pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
    }
    Ok(sse / (samples.len() * a) as f64)
}

/// Conditioning statistics over 8 samples per training trajectory.
fn fit_cond_norm(agent: &Agent, ds: &Dataset, k: usize, seed: u64) -> Result<FeatureNorm> {
    let layout = agent.policy.layout;
    let root = RngStream::new(seed).split("policy-cond-norm");
    let mut obs = Vec::new();
    for traj in anchor_candidates(ds, &ds.train) {
        for w in 0..8u64 {
            obs.push(draw_policy_sample(ds, &agent.stats, traj, k, &mut root.split_index(traj as u64).split_index(w))?.obs);
        }
    }
    let start = layout.state_dim + layout.goal_dim;
    let mut cond = Vec::with_capacity(obs.len() * layout.cond_width);
    for chunk in obs.chunks(256) {
        let x = raw_features(agent.trajnet.as_ref(), agent.policy.config.conditioning, &agent.stats, &layout, chunk)?;
        for row in x.data().chunks(layout.input_width()) {
            cond.extend_from_slice(&row[start..]);
        }
    }
    FeatureNorm::fit(&Tensor::new(vec![obs.len(), layout.cond_width], cond)?)
}

/// Fixed held-out samples for per-epoch validation loss.
pub fn policy_validation_samples(ds: &Dataset, stats: &NormStats, k: usize, seed: u64) -> Result<Vec<PolicySample>> {
    let source = if ds.validation.is_empty() { &ds.train } else { &ds.validation };
    let root = RngStream::new(seed).split("policy-validation");
    let mut out = Vec::new();
    for traj in anchor_candidates(ds, source) {
        for w in 0..8u64 {
            out.push(draw_policy_sample(ds, stats, traj, k, &mut root.split_index(traj as u64).split_index(w))?);
        }
    }
    Ok(out)
}

pub fn init_policy(
    config: &PolicyConfig,
    ds: &Dataset,
    trajnet: Option<&TrajNet<f64>>,
    seed: u64,
) -> Result<PolicyNet<f64>> {
    let layout = PolicyLayout::for_model(
        config.conditioning,
        trajnet,
        ds.meta.state_dim,
        ds.meta.goal_dim(),
        ds.meta.action_dim,
    )?;
    PolicyNet::new(config.clone(), layout, &mut RngStream::new(seed).split("policy-init"))
}

/// Minibatch Adam on the action MSE. The TrajNet is borrowed immutably and
/// evaluated without a tape, so no gradient reaches it.
pub fn train_policy(
    ds: &Dataset,
    stats: &NormStats,
    trajnet: Option<&TrajNet<f64>>,
    config: &PolicyConfig,
    seed: u64,
    mut observe: impl FnMut(PolicyEvent<'_>) -> Result<()>,
) -> Result<PolicyOutcome> {
    config.validate()?;
    if config.conditioning.needs_trajnet() && trajnet.is_none() {
        return Err(Error::Incompatible(format!("{:?} conditioning needs a TrajNet checkpoint", config.conditioning)));
    }
    let trajnet = if config.conditioning.needs_trajnet() { trajnet } else { None };
    let policy = init_policy(config, ds, trajnet, seed)?;
    let mut agent = Agent { trajnet: trajnet.cloned(), policy, stats: stats.clone() };
    let mut adam = AdamState::new(AdamConfig::with_lr(config.learning_rate), &agent.policy.params);
    let k = history_len(trajnet);
    let candidates = anchor_candidates(ds, &ds.train);
    if candidates.is_empty() {
        return Err(Error::Data("no training trajectory long enough for policy samples".into()));
    }
    if agent.policy.layout.cond_width > 0 {
        agent.policy.cond_norm = Some(fit_cond_norm(&agent, ds, k, seed)?);
    }
    let validation = policy_validation_samples(ds, stats, k, seed)?;
    let root = RngStream::new(seed).split("policy-train");
    let a = ds.meta.action_dim;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let epoch_rng = root.split_index(epoch as u64);
        let mut order: Vec<usize> =
            candidates.iter().flat_map(|&c| std::iter::repeat_n(c, config.windows_per_trajectory)).collect();
        epoch_rng.split("order").shuffle(&mut order);
        let sample_rng = epoch_rng.split("sample");
        let (mut loss_sum, mut steps) = (0.0, 0);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let offset = step * config.batch_size;
            let samples = chunk
                .iter()
                .enumerate()
                .map(|(j, &traj)| draw_policy_sample(ds, stats, traj, k, &mut sample_rng.split_index((offset + j) as u64)))
                .collect::<Result<Vec<_>>>()?;
            let obs: Vec<Observation> = samples.iter().map(|s| s.obs.clone()).collect();
            let x = agent.features(&obs)?;
            let target = action_targets(&samples, a)?;
            let mut tape = Tape::new();
            let p = agent.policy.params.bind(&mut tape, true);
            let x = tape.constant(x);
            let y = agent.policy.forward(&mut tape, &p, x)?;
            let loss = tape.mse(y, &target, None)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Numerical(format!("policy loss is {loss_value} at epoch {epoch} step {step}")));
            }
            let mut grads = tape.backward(loss)?;
            let grads = p.collect_grads(&agent.policy.params, &mut grads);
            adam.step(&mut agent.policy.params, &grads)?;
            loss_sum += loss_value;
            steps += 1;
            observe(PolicyEvent::Step { epoch, step, loss: loss_value })?;
        }
        let validation_loss = action_loss(&agent, &validation, config.batch_size)?;
        let report = PolicyEpochReport { epoch, train_loss: loss_sum / steps as f64, validation_loss };
        history.push(report);
        observe(PolicyEvent::Epoch { report, policy: &agent.policy, adam: &adam })?;
    }
    Ok(PolicyOutcome { agent, adam, history })
}

use serde::{Deserialize, Serialize};

use crate::data::Objective;
use crate::error::{Error, Result, TensorError};
use crate::nn::{sinusoidal_pe, LayerNorm, Linear, TransformerBlock, INIT_STD};
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajNetConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub n_slots: usize,
    pub k: usize,
    pub p: usize,
    pub objective: Objective,
    pub dropout: f64,
    pub learning_rate: f64,
    pub goal_conditioning: bool,
    pub include_actions: bool,
    /// State dimensions to reconstruct; the environment default when absent.
    pub reconstruction_subspace: Option<Vec<usize>>,
    pub loss_masked_only: bool,
    pub batch_size: usize,
    pub epochs: usize,
    /// Training windows drawn per training trajectory per epoch.
    pub windows_per_trajectory: usize,
    /// Fixed validation windows per validation trajectory.
    pub validation_windows: usize,
}

impl Default for TrajNetConfig {
    fn default() -> Self {
        TrajNetConfig {
            d_model: 64,
            n_heads: 4,
            encoder_layers: 2,
            decoder_layers: 1,
            n_slots: 4,
            k: 10,
            p: 40,
            objective: Objective::MaeRc,
            dropout: 0.1,
            learning_rate: 1e-3,
            goal_conditioning: true,
            include_actions: false,
            reconstruction_subspace: None,
            loss_masked_only: false,
            batch_size: 256,
            epochs: 20,
            windows_per_trajectory: 16,
            validation_windows: 8,
        }
    }
}

impl TrajNetConfig {
    /// Full-size settings for large datasets: wider model, longer future,
    /// bigger batches and a smaller step size.
    pub fn large() -> Self {
        TrajNetConfig {
            d_model: 256,
            p: 70,
            learning_rate: 1e-4,
            batch_size: 1024,
            epochs: 60,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("trajnet: {msg}")));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_model % 2 != 0 {
            return bad(format!("d_model {} must be even for positional encoding", self.d_model));
        }
        if self.n_slots == 0 {
            return bad("n_slots must be at least 1".into());
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.objective.predicts_future() && self.p == 0 {
            return bad(format!("objective {} needs p >= 1", self.objective));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.windows_per_trajectory == 0 || self.validation_windows == 0 {
            return bad("batch_size, epochs, windows_per_trajectory and validation_windows must be positive".into());
        }
        if self.loss_masked_only && self.objective == Objective::AeH {
            return bad("loss_masked_only with ae-h leaves no positions to reconstruct".into());
        }
        Ok(())
    }

    /// Window span reconstructed by the decoder.
    pub fn span(&self) -> usize {
        self.k + self.p
    }

    /// Window positions fed to the encoder as state tokens.
    pub fn encoder_positions(&self) -> usize {
        if self.objective.encodes_future() {
            self.k + self.p
        } else {
            self.k
        }
    }

    /// History actions before the current step, fed as tokens when actions
    /// are included.
    pub fn encoder_actions(&self) -> usize {
        if self.include_actions {
            self.k - 1
        } else {
            0
        }
    }
}

/// Data-dependent widths of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub state_dim: usize,
    pub action_dim: usize,
    pub goal_dim: usize,
    pub recon_dims: Vec<usize>,
}

/// Batched encoder input in normalized units.
#[derive(Debug, Clone)]
pub struct EncoderInput<S> {
    pub batch: usize,
    /// `[batch, encoder_positions, state_dim]`.
    pub states: Tensor<S>,
    /// One flag per state token, row-major over `[batch, encoder_positions]`.
    pub state_mask: Vec<bool>,
    /// `[batch, encoder_actions, action_dim]` when actions are included.
    pub actions: Option<Tensor<S>>,
    pub action_mask: Vec<bool>,
    /// `[batch, goal_dim]` when goal conditioning is on.
    pub goals: Option<Tensor<S>>,
}

/// Reconstruction targets and per-element loss weights.
#[derive(Debug, Clone)]
pub struct Targets<S> {
    /// `[batch, span, recon_width]`.
    pub states: Tensor<S>,
    pub state_weights: Vec<S>,
    /// `[batch, span, action_dim]` when actions are included.
    pub actions: Option<Tensor<S>>,
    pub action_weights: Vec<S>,
}

/// Decoder outputs.
#[derive(Debug, Clone, Copy)]
pub struct Reconstruction {
    pub states: Var,
    pub actions: Option<Var>,
}

#[derive(Debug, Clone)]
struct Modality {
    embed: Linear,
    head: Linear,
    type_token: Option<ParamId>,
}

/// Masked trajectory encoder/decoder with a slot-token bottleneck.
#[derive(Debug, Clone)]
pub struct TrajNet<S> {
    pub config: TrajNetConfig,
    pub dims: ModelDims,
    pub params: ParamSet<S>,
    slots: ParamId,
    mask_token: ParamId,
    goal_embed: Option<Linear>,
    state: Modality,
    action: Option<Modality>,
    encoder: Vec<TransformerBlock>,
    encoder_norm: LayerNorm,
    decoder: Vec<TransformerBlock>,
    decoder_norm: LayerNorm,
}

/// Parameter name prefixes that belong to the encoder path.
pub const ENCODER_PREFIXES: &[&str] =
    &["slots", "mask_token", "goal_embed.", "state_embed.", "action_embed.", "type.", "encoder."];

impl<S: Scalar> TrajNet<S> {
    pub fn new(config: TrajNetConfig, dims: ModelDims, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        if dims.recon_dims.is_empty() || dims.recon_dims.iter().any(|&d| d >= dims.state_dim) {
            return Err(Error::Config(format!(
                "reconstruction dims {:?} must be a nonempty subset of 0..{}",
                dims.recon_dims, dims.state_dim
            )));
        }
        let d = config.d_model;
        let mut params = ParamSet::new();
        let slots = params.insert_normal("slots", &[config.n_slots, d], INIT_STD, rng);
        let mask_token = params.insert_normal("mask_token", &[d], INIT_STD, rng);
        let goal_embed = config.goal_conditioning.then(|| Linear::new(&mut params, "goal_embed", dims.goal_dim, d, rng));
        let typed = config.include_actions;
        let modality = |params: &mut ParamSet<S>, name: &str, width: usize, out: usize, rng: &mut RngStream| Modality {
            embed: Linear::new(params, &format!("{name}_embed"), width, d, rng),
            type_token: typed.then(|| params.insert_normal(format!("type.{name}"), &[d], INIT_STD, rng)),
            head: Linear::new(params, &format!("{name}_head"), d, out, rng),
        };
        let state = modality(&mut params, "state", dims.state_dim, dims.recon_dims.len(), rng);
        let action = typed.then(|| modality(&mut params, "action", dims.action_dim, dims.action_dim, rng));
        let encoder = (0..config.encoder_layers)
            .map(|i| TransformerBlock::new(&mut params, &format!("encoder.{i}"), d, config.n_heads, config.dropout, rng))
            .collect();
        let encoder_norm = LayerNorm::new(&mut params, "encoder.norm", d);
        let decoder = (0..config.decoder_layers)
            .map(|i| TransformerBlock::new(&mut params, &format!("decoder.{i}"), d, config.n_heads, config.dropout, rng))
            .collect();
        let decoder_norm = LayerNorm::new(&mut params, "decoder.norm", d);
        Ok(TrajNet {
            config,
            dims,
            params,
            slots,
            mask_token,
            goal_embed,
            state,
            action,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
        })
    }

    pub fn is_encoder_param(name: &str) -> bool {
        ENCODER_PREFIXES.iter().any(|p| name.starts_with(p))
    }

    /// The same weights with the goal token dropped from the encoder input.
    pub fn without_goal(&self) -> Self {
        let mut m = self.clone();
        m.config.goal_conditioning = false;
        m.goal_embed = None;
        m
    }

    fn embed_tokens(
        &self,
        tape: &mut Tape<S>,
        p: &BoundParams,
        m: &Modality,
        values: &Tensor<S>,
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let positions = values.shape()[1];
        let x = tape.constant(values.clone());
        let x = m.embed.forward(tape, p, x)?;
        let x = tape.mask_rows(x, p.var(self.mask_token), mask)?;
        let pe = tape.constant(sinusoidal_pe(positions, self.config.d_model)?);
        let x = tape.add(x, pe)?;
        match m.type_token {
            Some(t) => tape.add(x, p.var(t)),
            None => Ok(x),
        }
    }

    fn check_input(&self, input: &EncoderInput<S>) -> Result<(), TensorError> {
        let n = input.states.shape().get(1).copied().unwrap_or(0);
        let n = if n == self.config.k { n } else { self.config.encoder_positions() };
        let want = [input.batch, n, self.dims.state_dim];
        if input.states.shape() != want || input.state_mask.len() != input.batch * n {
            return Err(TensorError::ShapeMismatch { op: "encoder states", lhs: input.states.shape().to_vec(), rhs: want.to_vec() });
        }
        let m = self.config.encoder_actions();
        match (&input.actions, m > 0) {
            (Some(a), true) => {
                let want = [input.batch, m, self.dims.action_dim];
                if a.shape() != want || input.action_mask.len() != input.batch * m {
                    return Err(TensorError::ShapeMismatch { op: "encoder actions", lhs: a.shape().to_vec(), rhs: want.to_vec() });
                }
            }
            (None, false) => {}
            (Some(_), false) => return Err(TensorError::Invalid("model takes no action tokens".into())),
            (None, true) => return Err(TensorError::Invalid("model needs history action tokens".into())),
        }
        match (&input.goals, self.goal_embed.is_some()) {
            (Some(g), true) => {
                let want = [input.batch, self.dims.goal_dim];
                if g.shape() != want {
                    return Err(TensorError::ShapeMismatch { op: "encoder goals", lhs: g.shape().to_vec(), rhs: want.to_vec() });
                }
            }
            (_, false) => {}
            (None, true) => return Err(TensorError::Invalid("goal-conditioned model needs a goal".into())),
        }
        Ok(())
    }

    /// Encoder pass; returns the bottleneck `[batch, n_slots, d_model]`.
    /// State tokens cover either the training layout or just the `k` history
    /// positions. Without goal conditioning any supplied goal is ignored.
    pub fn encode(
        &self,
        tape: &mut Tape<S>,
        p: &BoundParams,
        input: &EncoderInput<S>,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<Var, TensorError> {
        self.check_input(input)?;
        let b = input.batch;
        let d = self.config.d_model;
        let mut parts = vec![tape.expand(p.var(self.slots), b)?];
        if let (Some(embed), Some(goals)) = (&self.goal_embed, &input.goals) {
            let g = tape.constant(goals.clone());
            let g = embed.forward(tape, p, g)?;
            parts.push(tape.reshape(g, &[b, 1, d])?);
        }
        parts.push(self.embed_tokens(tape, p, &self.state, &input.states, &input.state_mask)?);
        if let (Some(m), Some(actions)) = (&self.action, &input.actions) {
            parts.push(self.embed_tokens(tape, p, m, actions, &input.action_mask)?);
        }
        let mut x = tape.concat(&parts, 1)?;
        for block in &self.encoder {
            x = block.forward(tape, p, x, None, rng, training)?;
        }
        let x = self.encoder_norm.forward(tape, p, x)?;
        tape.slice(x, 1, 0, self.config.n_slots)
    }

    fn queries(&self, tape: &mut Tape<S>, p: &BoundParams, m: &Modality, batch: usize) -> Result<Var, TensorError> {
        let pe = tape.constant(sinusoidal_pe(self.config.span(), self.config.d_model)?);
        let mut q = tape.add(pe, p.var(self.mask_token))?;
        if let Some(t) = m.type_token {
            q = tape.add(q, p.var(t))?;
        }
        tape.expand(q, batch)
    }

    /// Decoder pass from a bottleneck `[batch, n_slots, d_model]` to the
    /// reconstructed window.
    pub fn decode(
        &self,
        tape: &mut Tape<S>,
        p: &BoundParams,
        bottleneck: Var,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<Reconstruction, TensorError> {
        let shape = tape.shape(bottleneck).to_vec();
        if shape.len() != 3 || shape[1] != self.config.n_slots || shape[2] != self.config.d_model {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                lhs: shape,
                rhs: vec![0, self.config.n_slots, self.config.d_model],
            });
        }
        let b = shape[0];
        let t = self.config.span();
        let mut parts = vec![bottleneck, self.queries(tape, p, &self.state, b)?];
        if let Some(m) = &self.action {
            parts.push(self.queries(tape, p, m, b)?);
        }
        let mut x = tape.concat(&parts, 1)?;
        for block in &self.decoder {
            x = block.forward(tape, p, x, None, rng, training)?;
        }
        let x = self.decoder_norm.forward(tape, p, x)?;
        let n = self.config.n_slots;
        let sq = tape.slice(x, 1, n, t)?;
        let states = self.state.head.forward(tape, p, sq)?;
        let actions = match &self.action {
            Some(m) => {
                let aq = tape.slice(x, 1, n + t, t)?;
                Some(m.head.forward(tape, p, aq)?)
            }
            None => None,
        };
        Ok(Reconstruction { states, actions })
    }

    /// Weighted MSE over live state elements, plus the same over live action
    /// elements when actions are reconstructed.
    pub fn loss(&self, tape: &mut Tape<S>, recon: &Reconstruction, targets: &Targets<S>) -> Result<Var, TensorError> {
        let mut loss = tape.mse(recon.states, &targets.states, Some(&targets.state_weights))?;
        if let (Some(pred), Some(target)) = (recon.actions, &targets.actions) {
            if targets.action_weights.iter().any(|&w| w > S::zero()) {
                let action_loss = tape.mse(pred, target, Some(&targets.action_weights))?;
                loss = tape.add(loss, action_loss)?;
            }
        }
        Ok(loss)
    }

    /// Bottleneck values in eval mode.
    pub fn bottleneck(&self, input: &EncoderInput<S>) -> Result<Tensor<S>, TensorError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let b = self.encode(&mut tape, &p, input, &mut RngStream::new(0), false)?;
        Ok(tape.value(b).clone())
    }

    /// Decoded window in eval mode: states `[batch, span, recon_width]` and,
    /// when present, actions `[batch, span, action_dim]`.
    pub fn decode_values(&self, bottleneck: &Tensor<S>) -> Result<(Tensor<S>, Option<Tensor<S>>), TensorError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let b = tape.constant(bottleneck.clone());
        let r = self.decode(&mut tape, &p, b, &mut RngStream::new(0), false)?;
        Ok((tape.value(r.states).clone(), r.actions.map(|a| tape.value(a).clone())))
    }
}

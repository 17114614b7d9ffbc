//! Stage-1 masked trajectory model and its training loop.

mod batch;
mod model;
mod train;

pub use batch::{anchor_candidates, assemble, draw_sample, model_dims, sample_anchor, unmasked_input, Batch, Sample};
pub use model::{EncoderInput, ModelDims, Reconstruction, Targets, TrajNet, TrajNetConfig, ENCODER_PREFIXES};
pub use train::{
    init_model, reconstruction_loss, train_trajnet, validation_samples, EpochReport, TrainEvent, TrainOutcome,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type TrajNet64 = TrajNet<f64>;

impl TrajNet<f64> {
    /// Read the decoder's action output at the current step. `input` is an
    /// unmasked history with the current action hidden.
    pub fn zero_shot_actions(&self, input: &EncoderInput<f64>) -> Result<Vec<Vec<f64>>> {
        if !self.config.include_actions {
            return Err(Error::Incompatible("zero-shot actions need a model trained with actions".into()));
        }
        let b = self.bottleneck(input)?;
        let (_, actions) = self.decode_values(&b)?;
        let actions = actions.expect("action head present when actions are included");
        let (span, a) = (self.config.span(), self.dims.action_dim);
        let cur = self.config.k - 1;
        Ok((0..input.batch)
            .map(|i| actions.data()[(i * span + cur) * a..(i * span + cur + 1) * a].to_vec())
            .collect())
    }

    /// Decoded future positions `[batch, p, recon_width]` in normalized units.
    pub fn decode_future(&self, bottleneck: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (states, _) = self.decode_values(bottleneck)?;
        let (b, span, r) = (states.shape()[0], self.config.span(), self.dims.recon_dims.len());
        let (k, p) = (self.config.k, self.config.p);
        let mut out = Vec::with_capacity(b * p * r);
        for i in 0..b {
            out.extend_from_slice(&states.data()[(i * span + k) * r..(i * span + span) * r]);
        }
        Ok(Tensor::new(vec![b, p, r], out)?)
    }
}

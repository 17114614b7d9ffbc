use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tape::Tape;

use super::batch::{anchor_candidates, assemble, draw_sample, Batch, Sample};
use super::model::{ModelDims, TrajNet, TrajNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

pub enum TrainEvent<'a> {
    Step { epoch: usize, step: usize, loss: f64 },
    Epoch { report: EpochReport, model: &'a TrajNet<f64>, adam: &'a AdamState<f64> },
}

pub struct TrainOutcome {
    pub model: TrajNet<f64>,
    pub adam: AdamState<f64>,
    pub history: Vec<EpochReport>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochReport {
        &self.history[self.best_epoch - 1]
    }
}

/// Sum of weighted squared errors and of weights, per modality.
#[derive(Debug, Clone, Copy, Default)]
struct LossTotals {
    state_sse: f64,
    state_weight: f64,
    action_sse: f64,
    action_weight: f64,
}

impl LossTotals {
    fn mean(&self) -> f64 {
        let mut loss = self.state_sse / self.state_weight;
        if self.action_weight > 0.0 {
            loss += self.action_sse / self.action_weight;
        }
        loss
    }
}

fn batch_totals(model: &TrajNet<f64>, batch: &Batch) -> Result<LossTotals> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let mut rng = RngStream::new(0);
    let b = model.encode(&mut tape, &p, &batch.input, &mut rng, false)?;
    let r = model.decode(&mut tape, &p, b, &mut rng, false)?;
    let t = &batch.targets;
    let state_sse = tape.sse(r.states, &t.states, &t.state_weights)?;
    let mut totals = LossTotals {
        state_sse: tape.value(state_sse).item(),
        state_weight: t.state_weights.iter().sum(),
        ..Default::default()
    };
    if let (Some(pred), Some(target)) = (r.actions, &t.actions) {
        let sse = tape.sse(pred, target, &t.action_weights)?;
        totals.action_sse = tape.value(sse).item();
        totals.action_weight = t.action_weights.iter().sum();
    }
    Ok(totals)
}

/// Fixed validation samples: every validation trajectory contributes
/// `validation_windows` windows drawn from a seed-derived stream.
pub fn validation_samples(ds: &Dataset, config: &TrajNetConfig, seed: u64) -> Result<Vec<Sample>> {
    let source = if ds.validation.is_empty() { &ds.train } else { &ds.validation };
    let root = RngStream::new(seed).split("validation");
    let mut out = Vec::new();
    for traj in anchor_candidates(ds, source) {
        for w in 0..config.validation_windows {
            let mut rng = root.split_index(traj as u64).split_index(w as u64);
            out.push(draw_sample(ds, traj, config, &mut rng)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Data("no trajectory long enough for validation windows".into()));
    }
    Ok(out)
}

/// Mean reconstruction loss over `samples`, independent of batching.
pub fn reconstruction_loss(
    model: &TrajNet<f64>,
    ds: &Dataset,
    stats: &NormStats,
    samples: &[Sample],
    batch_size: usize,
) -> Result<f64> {
    let mut totals = LossTotals::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = assemble(ds, stats, &model.config, &model.dims, chunk)?;
        let t = batch_totals(model, &batch)?;
        totals.state_sse += t.state_sse;
        totals.state_weight += t.state_weight;
        totals.action_sse += t.action_sse;
        totals.action_weight += t.action_weight;
    }
    if totals.state_weight == 0.0 {
        return Err(Error::Numerical("validation has no live reconstruction positions".into()));
    }
    Ok(totals.mean())
}

pub fn init_model(config: &TrajNetConfig, dims: ModelDims, seed: u64) -> Result<TrajNet<f64>> {
    TrajNet::new(config.clone(), dims, &mut RngStream::new(seed).split("trajnet-init"))
}

/// Minibatch Adam over freshly sampled windows; one validation pass per
/// epoch. `observe` sees every step and epoch, in order.
pub fn train_trajnet(
    ds: &Dataset,
    stats: &NormStats,
    config: &TrajNetConfig,
    dims: ModelDims,
    seed: u64,
    mut observe: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = init_model(config, dims, seed)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.learning_rate), &model.params);
    let candidates = anchor_candidates(ds, &ds.train);
    if candidates.is_empty() {
        return Err(Error::Data("no training trajectory long enough to sample windows".into()));
    }
    let validation = validation_samples(ds, config, seed)?;
    let root = RngStream::new(seed).split("trajnet-train");
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let epoch_rng = root.split_index(epoch as u64);
        let mut order: Vec<usize> =
            candidates.iter().flat_map(|&c| std::iter::repeat_n(c, config.windows_per_trajectory)).collect();
        epoch_rng.split("order").shuffle(&mut order);
        let sample_rng = epoch_rng.split("sample");
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let offset = step * config.batch_size;
            let samples = chunk
                .iter()
                .enumerate()
                .map(|(j, &traj)| draw_sample(ds, traj, config, &mut sample_rng.split_index((offset + j) as u64)))
                .collect::<Result<Vec<_>>>()?;
            let batch = assemble(ds, stats, config, &model.dims, &samples)?;
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape, true);
            let mut dropout_rng = epoch_rng.split("dropout").split_index(step as u64);
            let b = model.encode(&mut tape, &p, &batch.input, &mut dropout_rng, true)?;
            let r = model.decode(&mut tape, &p, b, &mut dropout_rng, true)?;
            let loss = model.loss(&mut tape, &r, &batch.targets)?;
            let loss_value = tape.value(loss).item();
            let mut grads = tape.backward(loss)?;
            let grads = p.collect_grads(&model.params, &mut grads);
            adam.step(&mut model.params, &grads)?;
            loss_sum += loss_value;
            steps += 1;
            observe(TrainEvent::Step { epoch, step, loss: loss_value })?;
        }
        let validation_loss = reconstruction_loss(&model, ds, stats, &validation, config.batch_size)?;
        if !validation_loss.is_finite() {
            return Err(Error::Numerical(format!("validation loss is {validation_loss} at epoch {epoch}")));
        }
        let report = EpochReport { epoch, train_loss: loss_sum / steps as f64, validation_loss };
        history.push(report);
        observe(TrainEvent::Epoch { report, model: &model, adam: &adam })?;
    }
    let best_epoch = history
        .iter()
        .min_by(|a, b| a.validation_loss.total_cmp(&b.validation_loss))
        .map(|r| r.epoch)
        .unwrap_or(1);
    Ok(TrainOutcome { model, adam, history, best_epoch })
}

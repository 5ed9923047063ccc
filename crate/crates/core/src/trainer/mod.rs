//! Minibatch training of the LSTM and ensemble prediction.

mod loss;
mod optim;

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{apply_normalization, Basin, BasinTensors, DateRange, NormalizationSpec, N_INPUTS};
use crate::error::{Error, Result};
use crate::lstm::{self, Checkpoint, DropoutMasks, LstmDims, LstmWeights};

pub use loss::rmse_loss;
pub use optim::{adadelta_step, AdadeltaConfig, AdadeltaState};

/// Seeds used for an ensemble when none are given.
pub const DEFAULT_SEEDS: [u64; 6] = [123, 1234, 12345, 111, 1111, 11111];

/// How many minibatch draws make up one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum EpochSize {
    /// `ceil(sum over basins of floor(train_len / seq_len) / batch_size)`:
    /// one expected pass over the training days.
    Hydrographs,
    /// `ceil(number of admissible (basin, start) pairs / batch_size)`.
    Windows,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub hidden_size: usize,
    /// Width after the input transform; `None` keeps the raw input width.
    pub input_size: Option<usize>,
    pub dropout_p: f64,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub adadelta: AdadeltaConfig,
    pub epoch_size: EpochSize,
    /// Days fed before an evaluation window and discarded.
    pub warmup_days: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            seq_len: 365,
            hidden_size: 256,
            input_size: None,
            dropout_p: 0.5,
            epochs: 300,
            seeds: DEFAULT_SEEDS.to_vec(),
            adadelta: AdadeltaConfig::default(),
            epoch_size: EpochSize::Hydrographs,
            warmup_days: 365,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("hidden_size", self.hidden_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        if self.input_size == Some(0) {
            return Err(Error::InvalidInput("input_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidInput(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if !(self.adadelta.decay > 0.0 && self.adadelta.decay < 1.0 && self.adadelta.eps > 0.0) {
            return Err(Error::InvalidInput("adadelta decay must be in (0, 1), eps > 0".into()));
        }
        if let EpochSize::Fixed(0) = self.epoch_size {
            return Err(Error::InvalidInput("fixed epoch size must be positive".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> LstmDims {
        LstmDims {
            input_raw: N_INPUTS,
            input: self.input_size.unwrap_or(N_INPUTS),
            hidden: self.hidden_size,
        }
    }
}

/// One training instance: a basin and the first day of its window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub basin: usize,
    pub start: usize,
}

fn admissible_starts(t: &BasinTensors, seq_len: usize) -> usize {
    if t.len() >= seq_len {
        t.len() - seq_len + 1
    } else {
        0
    }
}

/// Draws `batch_size` (basin, start) pairs uniformly with replacement over
/// every admissible pair.
pub fn sample_minibatch<R: Rng + ?Sized>(
    tensors: &[BasinTensors],
    config: &TrainingConfig,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    let counts: Vec<usize> = tensors
        .iter()
        .map(|t| admissible_starts(t, config.seq_len))
        .collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::NoAdmissibleWindow(config.seq_len));
    }
    Ok((0..config.batch_size)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            let mut basin = 0;
            while k >= counts[basin] {
                k -= counts[basin];
                basin += 1;
            }
            Sample { basin, start: k }
        })
        .collect())
}

pub fn iterations_per_epoch(tensors: &[BasinTensors], config: &TrainingConfig) -> usize {
    let instances: usize = match config.epoch_size {
        EpochSize::Fixed(n) => return n,
        EpochSize::Hydrographs => tensors.iter().map(|t| t.len() / config.seq_len).sum(),
        EpochSize::Windows => tensors
            .iter()
            .map(|t| admissible_starts(t, config.seq_len))
            .sum(),
    };
    instances.div_ceil(config.batch_size).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub seed: u64,
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub seed: u64,
    pub weights: LstmWeights,
    pub log: Vec<EpochLog>,
    pub iterations_per_epoch: usize,
}

/// Forward, loss and backward over one batch. Returns the loss and the summed
/// gradient; per-item gradients are reduced in batch order.
fn batch_gradient(
    weights: &LstmWeights,
    tensors: &[BasinTensors],
    batch: &[Sample],
    masks: &[Option<DropoutMasks>],
    seq_len: usize,
) -> Result<(f64, LstmWeights)> {
    let forwards: Vec<Result<(Vec<f64>, lstm::ForwardTrace)>> = batch
        .par_iter()
        .zip(masks.par_iter())
        .map(|(s, m)| {
            let mut x = Vec::new();
            tensors[s.basin].fill_inputs(s.start, seq_len, &mut x);
            lstm::forward(weights, m.as_ref(), &x)
        })
        .collect();
    let forwards = forwards.into_iter().collect::<Result<Vec<_>>>()?;

    let mut preds = Vec::with_capacity(batch.len() * seq_len);
    let mut targets = Vec::with_capacity(batch.len() * seq_len);
    for (s, (y, _)) in batch.iter().zip(&forwards) {
        preds.extend_from_slice(y);
        targets.extend_from_slice(&tensors[s.basin].target[s.start..s.start + seq_len]);
    }
    let (loss, dy) = rmse_loss(&preds, &targets)?;

    let grads: Vec<Result<LstmWeights>> = forwards
        .par_iter()
        .zip(masks.par_iter())
        .enumerate()
        .map(|(k, ((_, trace), m))| {
            lstm::backward(weights, m.as_ref(), trace, &dy[k * seq_len..(k + 1) * seq_len])
        })
        .collect();
    let mut total = LstmWeights::zeros(weights.dims);
    for g in grads {
        total.add_assign(&g?)?;
    }
    Ok((loss, total))
}

/// Trains one model from `init_weights(seed)`.
///
/// `on_epoch` sees every epoch's log entry and the weights after it.
pub fn train_with<F>(
    tensors: &[BasinTensors],
    config: &TrainingConfig,
    seed: u64,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog, &LstmWeights) -> Result<()>,
{
    config.validate()?;
    let dims = config.dims();
    let mut weights = lstm::init_weights(dims, seed);
    let iters = iterations_per_epoch(tensors, config);
    let mut outcome = TrainOutcome {
        seed,
        weights: weights.clone(),
        log: Vec::new(),
        iterations_per_epoch: iters,
    };
    if config.epochs == 0 {
        return Ok(outcome);
    }
    if tensors.iter().all(|t| admissible_starts(t, config.seq_len) == 0) {
        return Err(Error::NoAdmissibleWindow(config.seq_len));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut state = AdadeltaState::new(dims.n_params());
    let started = Instant::now();
    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        let mut n_loss = 0usize;
        for iteration in 0..iters {
            let batch = sample_minibatch(tensors, config, &mut rng)?;
            let masks: Vec<Option<DropoutMasks>> = batch
                .iter()
                .map(|_| {
                    (config.dropout_p > 0.0)
                        .then(|| DropoutMasks::sample(dims, config.dropout_p, &mut rng))
                })
                .collect();
            let (loss, grad) = match batch_gradient(&weights, tensors, &batch, &masks, config.seq_len) {
                Ok(r) => r,
                Err(Error::AllMasked) => {
                    log::warn!("seed {seed} epoch {epoch} iteration {iteration}: batch fully masked, skipped");
                    continue;
                }
                Err(Error::NonFiniteActivation { .. }) => {
                    return Err(Error::Diverged { epoch, iteration })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, iteration });
            }
            match adadelta_step(&mut weights, &grad, &mut state, config.adadelta) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient) => return Err(Error::Diverged { epoch, iteration }),
                Err(e) => return Err(e),
            }
            loss_sum += loss;
            n_loss += 1;
        }
        let entry = EpochLog {
            seed,
            epoch,
            mean_loss: if n_loss > 0 { loss_sum / n_loss as f64 } else { f64::NAN },
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::debug!("seed {seed} epoch {epoch}: loss {:.5}", entry.mean_loss);
        on_epoch(&entry, &weights)?;
        outcome.log.push(entry);
    }
    outcome.weights = weights;
    Ok(outcome)
}

pub fn train(tensors: &[BasinTensors], config: &TrainingConfig, seed: u64) -> Result<TrainOutcome> {
    train_with(tensors, config, seed, |_, _| Ok(()))
}

/// Dropout-free RMSE of `weights` over full basin windows, for monitoring.
pub fn evaluate_loss(weights: &LstmWeights, tensors: &[BasinTensors]) -> Result<f64> {
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for t in tensors {
        let (y, _) = lstm::forward(weights, None, &t.inputs())?;
        preds.extend(y);
        targets.extend_from_slice(&t.target);
    }
    Ok(rmse_loss(&preds, &targets)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub seed: u64,
    pub checkpoint: Checkpoint,
}

/// Members trained with different seeds on the same data, plus the shared
/// normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub normalization: NormalizationSpec,
    pub members: Vec<EnsembleMember>,
}

impl EnsembleModel {
    pub fn new(normalization: NormalizationSpec, members: Vec<(u64, LstmWeights, usize)>) -> Self {
        let members = members
            .into_iter()
            .map(|(seed, w, epoch)| EnsembleMember {
                seed,
                checkpoint: Checkpoint::new(&w, seed, epoch),
            })
            .collect();
        Self {
            normalization,
            members,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::io::read_json(path)
    }
}

/// Order-independent mean: sorted, then offset from the smallest value so
/// identical members reproduce their value exactly.
fn ensemble_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let base = values[0];
    let n = values.len() as f64;
    base + values.iter().map(|v| (v - base) / n).sum::<f64>()
}

/// Ensemble-mean discharge (m³/s) for `basin` over `window`.
///
/// Each member runs without dropout from zero state over `warmup_days`
/// before the window; outputs are converted to discharge before averaging.
pub fn predict_ensemble(
    ensemble: &EnsembleModel,
    basin: &Basin,
    window: &DateRange,
    warmup_days: usize,
) -> Result<Vec<f64>> {
    if ensemble.members.is_empty() {
        return Err(Error::InvalidInput("ensemble has no members".into()));
    }
    let spin_start = window
        .start
        .checked_sub_days(chrono::Days::new(warmup_days as u64))
        .ok_or_else(|| Error::InvalidInput("warmup precedes representable dates".into()))?;
    let full = DateRange::new(spin_start, window.end)?;
    let tensors = apply_normalization(&ensemble.normalization, basin, &full)?;
    let x = tensors.inputs();
    let per_member: Vec<Result<Vec<f64>>> = ensemble
        .members
        .par_iter()
        .map(|m| {
            let w = m.checkpoint.weights()?;
            let (y, _) = lstm::forward(&w, None, &x)?;
            Ok(y[warmup_days..]
                .iter()
                .map(|v| {
                    ensemble
                        .normalization
                        .target_to_discharge(*v, tensors.area, tensors.mean_precip)
                })
                .collect())
        })
        .collect();
    let per_member = per_member.into_iter().collect::<Result<Vec<_>>>()?;
    let n_days = window.len_days();
    let mut buf = vec![0.0; per_member.len()];
    Ok((0..n_days)
        .map(|t| {
            for (b, m) in buf.iter_mut().zip(&per_member) {
                *b = m[t];
            }
            ensemble_mean(&mut buf)
        })
        .collect())
}

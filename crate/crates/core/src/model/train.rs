//! Minibatch training loop with periodic checkpoints.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adafactor::{Adafactor, AdafactorConfig, AdafactorState};
use super::blocks::Blocks;
use super::checkpoint::{Checkpoint, Phase};
use super::transformer::{EncodedExample, Transformer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Save a checkpoint every this many optimizer steps (and at the end).
    pub checkpoint_every: u64,
    pub optimizer: AdafactorConfig,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            checkpoint_every: 200,
            optimizer: AdafactorConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and checkpoint_every must be positive".into(),
            ));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub phase: Phase,
    pub step: u64,
    /// Mean batch loss over the steps since the previous checkpoint.
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub phase: Phase,
    /// Batch loss at every optimizer step of this phase.
    pub step_losses: Vec<f64>,
    pub checkpoints: Vec<CheckpointRecord>,
}

/// Trains on `examples` starting from `start` (or fresh parameters drawn
/// from the model seed). `on_checkpoint` sees every scheduled checkpoint,
/// including the final one, in step order.
pub fn train<F>(
    model: &Transformer,
    start: Option<&Checkpoint>,
    examples: &[EncodedExample],
    phase: Phase,
    config: &TrainConfig,
    config_hash: &str,
    mut on_checkpoint: F,
) -> Result<(Checkpoint, TrainingHistory)>
where
    F: FnMut(&Checkpoint) -> Result<()>,
{
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    let optimizer = Adafactor::new(config.optimizer.clone())?;
    let (mut params, mut state, mut step) = match start {
        Some(ckpt) => {
            if ckpt.config_hash != config_hash {
                return Err(Error::ConfigHashMismatch {
                    expected: config_hash.to_string(),
                    found: ckpt.config_hash.clone(),
                });
            }
            (ckpt.params.clone(), ckpt.optimizer.clone(), ckpt.step)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(model.config().seed);
            let params = model.init_params(&mut rng);
            let state = AdafactorState::new(&params);
            (params, state, 0)
        }
    };
    model.check_params(&params)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = TrainingHistory {
        phase,
        step_losses: Vec::new(),
        checkpoints: Vec::new(),
    };
    let mut grads = Blocks::zeros_like(&params);
    let mut window = (0.0, 0usize);
    let mut last = None;
    let total_steps = config.epochs * examples.len().div_ceil(config.batch_size);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grads.iter_mut().for_each(|b| b.data.fill(0.0));
            let weight = 1.0 / batch.len() as f64;
            let members: Vec<&EncodedExample> = batch.iter().map(|&i| &examples[i]).collect();
            let weights = vec![weight; batch.len()];
            let losses = model.accumulate_batch_grad(&params, &members, &weights, &mut grads)?;
            let loss = weight * losses.iter().sum::<f64>();
            step += 1;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            optimizer.step(&mut params, &mut state, &grads)?;
            history.step_losses.push(loss);
            window.0 += loss;
            window.1 += 1;
            let done = history.step_losses.len() == total_steps;
            if step % config.checkpoint_every == 0 || done {
                let ckpt = Checkpoint {
                    phase,
                    step,
                    train_loss: window.0 / window.1 as f64,
                    config: model.config().clone(),
                    config_hash: config_hash.to_string(),
                    params: params.clone(),
                    optimizer: state.clone(),
                };
                log::info!(
                    "{phase} epoch {} step {step} loss {:.4}",
                    epoch + 1,
                    ckpt.train_loss
                );
                on_checkpoint(&ckpt)?;
                history.checkpoints.push(CheckpointRecord {
                    phase,
                    step,
                    train_loss: ckpt.train_loss,
                });
                window = (0.0, 0);
                last = Some(ckpt);
            }
        }
    }
    let last = last.expect("the final step always checkpoints");
    Ok((last, history))
}

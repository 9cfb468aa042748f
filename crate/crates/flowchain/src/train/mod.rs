//! Training: per-stage negative log-likelihood with stage-independent
//! gradients, mini-batch Adam, validation tracking, and checkpointing.
//!
//! Stage `n`'s loss evaluates the chain density of the step-`n` ground truth
//! by inverting stages `n..1`. Gradients from that loss reach stage `n`'s
//! flow parameters and the shared encoder, but not other stages' flow
//! parameters (their computations stay on the tape so adjoints flow through
//! them); the base std receives its direct gradient from stage 1's loss
//! only, where the Gaussian term is the stage's own base rather than an
//! inherited density.

mod checkpoint;
mod loss;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use loss::{nll_loss, stage_loss_value, LossBatch, StageLosses};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{FlowChainModel, ModelConfig};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::numcore::{AdamState, Gradients, ParamStore};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Seed for shuffling and reparameterization noise.
    pub seed: u64,
    /// Early-stop patience on validation NLL, in epochs. 0 disables.
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 128,
            learning_rate: 1e-4,
            epochs: 50,
            seed: 0,
            patience: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..0.9).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig("validation fraction must lie in [0, 0.9)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub wall_secs: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: FlowChainModel,
    pub log: Vec<EpochLog>,
    /// Validation NLL of the returned (best) parameters.
    pub best_val_nll: f64,
}

/// Writes the training log as `epoch,train_nll,val_nll,wall_secs` CSV.
pub fn write_train_log(log: &[EpochLog], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,train_nll,val_nll,wall_secs")?;
    for e in log {
        writeln!(f, "{},{},{},{}", e.epoch, e.train_nll, e.val_nll, e.wall_secs)?;
    }
    Ok(())
}

/// Divergence guard on the summed per-stage NLL.
const DIVERGENCE_NLL: f64 = 1e6;

/// Trains a fresh model on `dataset`, returning the best-validation
/// parameters. Scenes are normalized internally (anchor to origin, positions
/// divided by the model's data scale).
pub fn train(dataset: &[Scene], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("training dataset is empty".into()));
    }
    let mut model = FlowChainModel::new(cfg.model.clone())?;

    // Normalize once up front.
    let normalized: Vec<Scene> = dataset
        .iter()
        .map(|s| {
            let (norm, _) = s.scaled(cfg.model.data_scale).relative_normalize();
            norm
        })
        .collect();

    // Deterministic validation split.
    let mut order: Vec<usize> = (0..normalized.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    order.shuffle(&mut split_rng);
    let n_val = ((normalized.len() as f64) * cfg.validation_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val.min(normalized.len() - 1));
    let val: Vec<&Scene> = if val_idx.is_empty() {
        train_idx.iter().map(|&i| &normalized[i]).collect()
    } else {
        val_idx.iter().map(|&i| &normalized[i]).collect()
    };
    let train_set: Vec<usize> = train_idx.to_vec();

    let mut adam = AdamState::new(&model.store, cfg.learning_rate);
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<ParamStore> = None;
    let mut since_best = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    let val_tag = mix(cfg.seed, u64::MAX);

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut order = train_set.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_nll = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let scenes: Vec<&Scene> = chunk.iter().map(|&i| &normalized[i]).collect();
            let batch = LossBatch { scenes: &scenes, noise_tag: mix(mix(cfg.seed, epoch as u64), batch_idx as u64) };
            let mut grads = Gradients::zeros(&model.store);
            let losses = nll_loss(&model, &batch, Some(&mut grads))?;
            if !losses.total.is_finite() || losses.total > DIVERGENCE_NLL {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}, batch {batch_idx}: total NLL {} (per stage {:?})",
                    losses.total, losses.per_stage
                )));
            }
            adam.step(&mut model.store, &grads)?;
            epoch_nll += losses.total;
            batches += 1;
        }
        epoch_nll /= batches.max(1) as f64;

        let val_batch = LossBatch { scenes: &val, noise_tag: val_tag };
        let val_nll = nll_loss(&model, &val_batch, None)?.total;
        if val_nll < best_val {
            best_val = val_nll;
            best_params = Some(model.store.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        log.push(EpochLog {
            epoch,
            train_nll: epoch_nll,
            val_nll,
            wall_secs: t0.elapsed().as_secs_f64(),
        });
        if cfg.patience > 0 && since_best >= cfg.patience {
            break;
        }
    }

    if let Some(params) = best_params {
        model.store = params;
    }
    Ok(TrainOutcome { model, log, best_val_nll: best_val })
}

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

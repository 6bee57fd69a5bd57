use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, LstmAutoencoder};
use crate::error::{Error, Result};
use crate::features::DayVector;
use crate::par::Execution;

pub const MIN_TRAINING_WINDOWS: usize = 10;
// Keeps the split/shuffle stream distinct from parameter initialisation.
const SPLIT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            hidden: 64,
            learning_rate: adam.learning_rate,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            validation_fraction: 0.2,
            seed: 42,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden == 0 {
            return bad("hidden size must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation fraction must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and max epochs must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("gradient clip must be positive");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    /// Per-window reconstruction errors on the validation split at the best epoch.
    pub validation_errors: Vec<f64>,
    /// Indices into the input windows.
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

pub fn train<W>(windows: &[W], cfg: &TrainConfig) -> Result<(LstmAutoencoder, TrainReport)>
where
    W: AsRef<[DayVector]> + Sync,
{
    train_with(windows, cfg, Execution::default())
}

/// Adam on a seeded 80/20 split with early stopping; returns the parameters of
/// the best validation epoch.
pub fn train_with<W>(windows: &[W], cfg: &TrainConfig, exec: Execution) -> Result<(LstmAutoencoder, TrainReport)>
where
    W: AsRef<[DayVector]> + Sync,
{
    cfg.validate()?;
    if windows.len() < MIN_TRAINING_WINDOWS {
        return Err(Error::InvalidInput(format!(
            "training needs at least {MIN_TRAINING_WINDOWS} windows, got {}",
            windows.len()
        )));
    }
    let mut model = LstmAutoencoder::init(cfg.hidden, cfg.seed)?;
    // Validates finiteness of every window up front.
    model.score_windows(windows, Execution::Sequential)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SPLIT_STREAM);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((windows.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, windows.len() - 1);
    let validation_indices: Vec<usize> = order[..n_val].to_vec();
    let mut train_indices: Vec<usize> = order[n_val..].to_vec();
    let val_windows: Vec<&[DayVector]> = validation_indices.iter().map(|&i| windows[i].as_ref()).collect();

    let mut adam = Adam::new(cfg.adam(), model.layout().len());
    let mut best_params = model.params().to_vec();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_errors = Vec::new();
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        train_indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch_idx in train_indices.chunks(cfg.batch_size) {
            let batch: Vec<&[DayVector]> = batch_idx.iter().map(|&i| windows[i].as_ref()).collect();
            let (loss, mut grad) = model.batch_grad_unchecked(&batch, exec);
            if let Some(clip) = cfg.grad_clip {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    let s = clip / norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            adam.step(model.params_mut(), &grad);
            epoch_loss += loss * batch.len() as f64;
        }
        let errors = model.errors_unchecked(&val_windows, exec);
        let val_loss = errors.iter().sum::<f64>() / errors.len() as f64;
        if !val_loss.is_finite() {
            return Err(Error::InvalidInput(format!("training diverged at epoch {epoch}")));
        }
        train_curve.push(epoch_loss / train_indices.len() as f64);
        val_curve.push(val_loss);
        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch;
            best_params.copy_from_slice(model.params());
            best_errors = errors;
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    model.params_mut().copy_from_slice(&best_params);
    let report = TrainReport {
        epochs_run: val_curve.len(),
        best_epoch,
        best_validation_loss: best_loss,
        train_loss: train_curve,
        validation_loss: val_curve,
        validation_errors: best_errors,
        train_indices,
        validation_indices,
    };
    Ok((model, report))
}

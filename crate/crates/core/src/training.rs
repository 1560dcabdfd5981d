//! Mini-batch training: seeded shuffles, mean-absolute-error loss,
//! Adam updates, patience-based early stopping, and best-epoch restore.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph};
use crate::features::Dataset;
use crate::models::{batch_targets, Model};
use crate::scalar::Scalar;

const EVAL_BATCH: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-3,
            batch_size: 256,
            patience: 5,
            max_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig(
                "learning rate must be positive and weight decay non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(TrainError::InvalidConfig(
                "batch size, max epochs and patience must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

/// Per-epoch record plus the index of the epoch whose weights were
/// kept (minimum validation error, earliest on ties).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl History {
    pub fn best_val_mae(&self) -> f64 {
        self.epochs[self.best_epoch].val_mae
    }
}

/// Patience rule: an epoch counts as progress only when its validation
/// error is strictly below the best seen; ties do not reset the clock.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1, "patience must be >= 1");
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val: f64) -> StopDecision {
        let improved = val < self.best;
        if improved {
            self.best = val;
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            improved,
            stop: self.since_best >= self.patience,
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Fit `model` on the training split, tracking validation error each
/// epoch; stops after `patience` epochs without strict improvement or
/// at `max_epochs`, and returns the model restored to its best-epoch
/// weights. Bitwise deterministic for a fixed config.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    train_set: &Dataset<T>,
    valid_set: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<(Model<T>, History), TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if valid_set.is_empty() {
        return Err(TrainError::EmptySplit("valid"));
    }

    let adam_cfg = AdamConfig::new(T::from_f64(cfg.lr), T::from_f64(cfg.weight_decay));
    let mut adam = AdamState::new();
    let mut rng = crate::rng::stream(cfg.seed, "train/shuffle");
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_params = model.params.clone();
    let mut history = History {
        epochs: Vec::new(),
        best_epoch: 0,
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&crate::features::Sample<T>> =
                chunk.iter().map(|&i| &train_set.samples[i]).collect();
            let graph = Graph::new();
            let preds = model.forward(&graph, &refs);
            let targets = graph.constant(batch_targets(&refs));
            let loss = preds.sub(&targets).abs().mean();
            let loss_value = loss.value().item().to_f64();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: batches + 1,
                });
            }
            let grads = graph.backprop(&loss, &model.params);
            adam_step(&mut model.params, &grads, &mut adam, &adam_cfg);
            loss_sum += loss_value;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let val_mae = evaluate_split(&model, valid_set)?;
        let seconds = started.elapsed().as_secs_f64();
        eprintln!("{},{train_loss:.6},{val_mae:.6},{seconds:.3}", epoch + 1);

        let decision = stopper.observe(epoch, val_mae);
        if decision.improved {
            best_params = model.params.clone();
        }
        history.epochs.push(EpochStats {
            train_loss,
            val_mae,
            seconds,
        });
        if decision.stop {
            break;
        }
    }

    model.params = best_params;
    history.best_epoch = stopper.best_epoch();
    Ok((model, history))
}

/// Mean absolute prediction error over a split; no updates.
pub fn evaluate_split<T: Scalar>(model: &Model<T>, set: &Dataset<T>) -> Result<f64, TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptySplit("eval"));
    }
    let mut abs_sum = 0.0f64;
    for chunk in set.samples.chunks(EVAL_BATCH) {
        let refs: Vec<&crate::features::Sample<T>> = chunk.iter().collect();
        let preds = model.predict(&refs);
        for (p, s) in preds.iter().copied().zip(chunk) {
            abs_sum += (p.to_f64() - s.target.to_f64()).abs();
        }
    }
    Ok(abs_sum / set.len() as f64)
}

//! Masked-MAE training: Adam with a step-decayed learning rate, per-epoch
//! shuffling, validation-driven early stopping, and best-checkpoint restore.
//!
//! The loss is masked mean absolute error on de-normalized predictions, so
//! training and validation curves share the units of the raw readings.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, WindowSet};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalConfig, MetricsReport};
use crate::model::{Model, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

// ── loss ──

#[derive(Debug, Clone, Copy)]
pub struct MaskedLoss {
    pub loss: Var,
    /// Entries that entered the mean; zero means the whole batch was masked
    /// and `loss` is a constant 0.
    pub unmasked: usize,
}

/// Mean absolute error over entries whose target differs from `null_value`,
/// built on the tape so it can be differentiated.
pub fn masked_mae_loss(tape: &mut Tape, pred: Var, target: &Tensor, null_value: f64) -> Result<MaskedLoss> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked-mae",
            left: tape.shape(pred).to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let mask: Vec<f64> = target
        .data()
        .iter()
        .map(|&y| if y == null_value { 0.0 } else { 1.0 })
        .collect();
    let unmasked = mask.iter().filter(|&&m| m != 0.0).count();
    if unmasked == 0 {
        return Ok(MaskedLoss {
            loss: tape.scalar(0.0),
            unmasked: 0,
        });
    }
    let y = tape.leaf(target, false);
    let m = tape.leaf_from(target.shape().to_vec(), mask, false)?;
    let diff = tape.sub(pred, y)?;
    let absd = tape.abs(diff);
    let kept = tape.mul(absd, m)?;
    let total = tape.sum(kept);
    Ok(MaskedLoss {
        loss: tape.affine(total, 1.0 / unmasked as f64, 0.0),
        unmasked,
    })
}

// ── optimizer ──

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first/second moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        AdamState {
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            step: 0,
        }
    }

    /// One bias-corrected update of every parameter in place.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam: {} gradient arrays for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for p in 0..params.len() {
            let data = params.tensor_mut(p).data_mut();
            if grads[p].len() != data.len() {
                return Err(Error::Contract(format!(
                    "adam: gradient {p} has {} values, parameter has {}",
                    grads[p].len(),
                    data.len()
                )));
            }
            let (m, v) = (&mut self.m[p], &mut self.v[p]);
            for j in 0..data.len() {
                let g = grads[p][j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

// ── schedule and config ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Epochs (1-based) at and after which the rate picks up another factor.
    pub decay_milestones: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub null_value: f64,
    pub mape_epsilon: f64,
    /// Stop as soon as the epoch's training MAE drops this low.
    pub target_train_mae: Option<f64>,
    pub eval_batch_size: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            decay_milestones: vec![20, 30],
            decay_factor: 0.1,
            batch_size: 16,
            max_epochs: 60,
            patience: 30,
            seed: 42,
            null_value: 0.0,
            mape_epsilon: 1.0,
            target_train_mae: None,
            eval_batch_size: 32,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "patience, batch_size, and max_epochs must all be positive".into(),
            ));
        }
        if !self.lr0.is_finite() || self.lr0 < 0.0 || !self.decay_factor.is_finite() || self.decay_factor < 0.0 {
            return Err(Error::Config("learning rate and decay factor must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.decay_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr0 * self.decay_factor.powi(hits as i32)
    }
}

// ── training loop ──

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Patience,
    TargetReached,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "reached max epochs",
            StopReason::Patience => "validation stalled",
            StopReason::TargetReached => "hit train target",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stop: StopReason,
    /// Set when some batch was skipped because every target was masked.
    pub saw_masked_batch: bool,
}

pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_mae,val_rmse,val_mape,lr\n");
    for e in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, e.train_loss, e.val_mae, e.val_rmse, e.val_mape, e.lr
        ));
    }
    out
}

/// Trains in place and leaves the model holding its best-validation
/// parameters. Identical inputs and seed reproduce the run bit for bit.
pub fn train(
    model: &mut Model,
    train_windows: &WindowSet,
    val_windows: &WindowSet,
    norm: &Normalizer,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_windows.len() == 0 || val_windows.len() == 0 {
        return Err(Error::Data(format!(
            "training needs windows in both splits, got {} train / {} validation",
            train_windows.len(),
            val_windows.len()
        )));
    }
    let eval_cfg = EvalConfig {
        null_value: cfg.null_value,
        mape_epsilon: cfg.mape_epsilon,
        batch_size: cfg.eval_batch_size,
        threads: cfg.threads,
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut adam = AdamState::new(&model.params);
    let mut indices: Vec<usize> = (0..train_windows.len()).collect();

    let mut best: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let mut best_epoch = 0usize;
    let mut best_val_mae = f64::INFINITY;
    let mut bad_epochs = 0usize;
    let mut saw_masked_batch = false;
    let mut history = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    let mut tape = Tape::new();
    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        indices.shuffle(&mut shuffle_rng);

        let mut abs_sum = 0.0;
        let mut count = 0usize;
        for (batch_no, group) in indices.chunks(cfg.batch_size).enumerate() {
            let batch = train_windows.batch(group, Some(norm))?;
            let target = Tensor::new(
                vec![batch.size, batch.output_len, batch.nodes, 1],
                batch.y.clone(),
            )?;

            tape.clear();
            let vars = model.bind(&mut tape, true);
            let pred = model.forward(&mut tape, &vars, &batch, true, &mut dropout_rng)?;
            let denorm = tape.affine(pred, norm.std, norm.mean);
            let masked = masked_mae_loss(&mut tape, denorm, &target, cfg.null_value)?;
            if masked.unmasked == 0 {
                saw_masked_batch = true;
                continue;
            }
            let loss_val = tape.value(masked.loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became non-finite at epoch {epoch}, batch {batch_no}"
                )));
            }
            tape.backward(masked.loss)?;
            let grads: Vec<Vec<f64>> = vars
                .iter()
                .zip(model.params.iter())
                .map(|(&v, (_, t))| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
                .collect();
            adam.step(&mut model.params, &grads, lr)?;

            abs_sum += loss_val * masked.unmasked as f64;
            count += masked.unmasked;
        }
        let train_loss = if count == 0 { 0.0 } else { abs_sum / count as f64 };

        let val: MetricsReport = evaluate(model, val_windows, norm, &eval_cfg)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_mae: val.mae,
            val_rmse: val.rmse,
            val_mape: val.mape,
            lr,
        });

        if val.mae < best_val_mae {
            best_val_mae = val.mae;
            best_epoch = epoch;
            bad_epochs = 0;
            for (slot, (_, t)) in best.iter_mut().zip(model.params.iter()) {
                slot.data_mut().copy_from_slice(t.data());
            }
        } else {
            bad_epochs += 1;
        }

        if cfg.target_train_mae.is_some_and(|target| train_loss <= target) {
            stop = StopReason::TargetReached;
            break;
        }
        if bad_epochs >= cfg.patience {
            stop = StopReason::Patience;
            break;
        }
    }

    for (p, snapshot) in best.iter().enumerate() {
        model.params.tensor_mut(p).data_mut().copy_from_slice(snapshot.data());
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_mae,
        stop,
        saw_masked_batch,
    })
}

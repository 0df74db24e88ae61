//! Training loop for the forecaster: decoupled-weight-decay adaptive-moment
//! optimization with a per-epoch cosine learning-rate schedule, global
//! gradient-norm clipping, seeded shuffling, best-checkpoint retention, and
//! patience-based early stopping. Divergence (a non-finite loss or gradient)
//! aborts the loop and returns the last good checkpoint.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::splitmix64;

use super::net::{backward, forward};
use super::windows::{WindowBatch, WindowSample};
use super::{loss, TstError, TstModel};

/// Optimizer and schedule hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptConfig {
    /// Peak learning rate (epoch 0 of the cosine cycle).
    pub lr_max: f64,
    /// Floor learning rate (final scheduled epoch).
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Cosine cycle length; training never exceeds this many epochs.
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping; `None`
    /// disables early stopping.
    pub patience: Option<usize>,
    /// Seed for shuffling and dropout.
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            lr_max: 3.0e-4,
            lr_min: 3.0e-6,
            weight_decay: 1.0e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            max_epochs: 100,
            batch_size: 64,
            patience: Some(15),
            seed: 0,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<(), TstError> {
        let bad = |reason: String| Err(TstError::BadOptConfig { reason });
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return bad(format!(
                "learning rates must satisfy 0 < lr_min ≤ lr_max, got {} / {}",
                self.lr_min, self.lr_max
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} / {}", self.beta1, self.beta2));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight decay must be ≥ 0, got {}", self.weight_decay));
        }
        if self.eps <= 0.0 {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.clip_norm <= 0.0 {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patience == Some(0) {
            return bad("patience must be at least 1 when set".into());
        }
        Ok(())
    }

    /// Single-cycle cosine schedule over the epoch budget: epoch 0 yields
    /// `lr_max`, the final scheduled epoch yields `lr_min`. A one-epoch
    /// budget degenerates to `lr_max`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.max_epochs <= 1 {
            return self.lr_max;
        }
        let t = epoch as f64 / (self.max_epochs - 1) as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Verdict of the early stopper for one validation measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSignal {
    /// New best validation loss (checkpoint-worthy).
    Improved,
    /// No improvement, but patience remains.
    Continue,
    /// Patience exhausted — stop training.
    Stop,
}

/// Patience counter over validation losses; improvement is strict.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    since: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> StopSignal {
        if val_loss < self.best {
            self.best = val_loss;
            self.since = 0;
            StopSignal::Improved
        } else {
            self.since += 1;
            if self.since >= self.patience {
                StopSignal::Stop
            } else {
                StopSignal::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.since
    }
}

/// Mutable optimizer state: step counter, epoch, first/second moments, and
/// the bookkeeping behind checkpoint retention.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub best_val: f64,
    pub epochs_since_improvement: usize,
    pub lr: f64,
}

impl TrainState {
    fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            epoch: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            best_val: f64::INFINITY,
            epochs_since_improvement: 0,
            lr: 0.0,
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Emit the per-epoch history as `epoch,train_loss,val_loss,lr` rows.
pub fn write_history_csv(
    history: &[EpochRecord],
    path: &std::path::Path,
) -> Result<(), TstError> {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for rec in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            rec.epoch, rec.train_loss, rec.val_loss, rec.lr
        ));
    }
    std::fs::write(path, out).map_err(|source| TstError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Result of a training run. `model` carries the best-validation parameters,
/// not the final ones.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TstModel,
    pub history: Vec<EpochRecord>,
    /// Validation loss of the initial parameters, before any update.
    pub pretrain_val_loss: f64,
    pub best_val_loss: f64,
    /// Epoch index of the best checkpoint, if any epoch improved on it.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub diverged: bool,
}

/// Scale the gradient so its global L2 norm does not exceed `clip_norm`.
/// Returns the pre-clip norm.
fn clip_global_norm(grad: &mut [f64], clip_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip_norm {
        let s = clip_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// One decoupled-weight-decay adaptive-moment update, in place. `t` is the
/// 1-based step count; decay applies to every parameter.
fn adamw_step(
    params: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: usize,
    lr: f64,
    opt: &OptConfig,
) {
    let bc1 = 1.0 - opt.beta1.powi(t as i32);
    let bc2 = 1.0 - opt.beta2.powi(t as i32);
    for i in 0..params.len() {
        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * grad[i];
        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * params[i]);
    }
}

/// Mean loss of the model over a window set, evaluated without dropout.
/// Weighted by batch size so the result is the true per-element mean.
pub fn eval_loss(
    model: &TstModel,
    windows: &[WindowSample],
    batch_size: usize,
) -> Result<f64, TstError> {
    if windows.is_empty() {
        return Err(TstError::NoWindows);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(batch_size.max(1)) {
        let batch = WindowBatch::from_samples(chunk)?;
        let pred = forward(model, &batch, false, 0)?;
        total += loss(&pred, &batch.target) * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// Train on `train_windows`, tracking generalization on `val_windows` (which
/// fall back to the training windows when empty). Returns the best-validation
/// checkpoint and the per-epoch history.
pub fn train(
    model: TstModel,
    train_windows: &[WindowSample],
    val_windows: &[WindowSample],
    opt: &OptConfig,
) -> Result<TrainOutcome, TstError> {
    opt.validate()?;
    if train_windows.is_empty() {
        return Err(TstError::NoWindows);
    }
    let val_windows = if val_windows.is_empty() {
        train_windows
    } else {
        val_windows
    };

    let mut model = model;
    let mut state = TrainState::new(model.param_count());
    let mut best_params = model.params.clone();
    let mut best_epoch = None;
    let mut stopper = opt.patience.map(EarlyStopper::new);
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut diverged = false;

    let pretrain_val_loss = eval_loss(&model, val_windows, opt.batch_size)?;

    // One deterministic seed chain drives per-epoch shuffles and per-step
    // dropout; identical (seed, data, config) reproduce the run bitwise.
    let mut seed_chain = opt.seed;
    let mut order: Vec<usize> = (0..train_windows.len()).collect();

    'epochs: for epoch in 0..opt.max_epochs {
        state.epoch = epoch;
        state.lr = opt.lr_at(epoch);

        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(&mut seed_chain));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(opt.batch_size) {
            let samples: Vec<WindowSample> =
                chunk.iter().map(|&i| train_windows[i].clone()).collect();
            let batch = WindowBatch::from_samples(&samples)?;
            let step_seed = splitmix64(&mut seed_chain);
            let out = match backward(&model, &batch, step_seed) {
                Ok(out) if out.loss.is_finite() => out,
                Ok(_) | Err(TstError::NonFinite { .. }) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            epoch_loss += out.loss * chunk.len() as f64;
            seen += chunk.len();

            let mut grad = out.grad;
            clip_global_norm(&mut grad, opt.clip_norm);
            state.step += 1;
            adamw_step(
                &mut model.params,
                &grad,
                &mut state.m,
                &mut state.v,
                state.step,
                state.lr,
                opt,
            );
        }
        let train_loss = epoch_loss / seen as f64;

        let val_loss = eval_loss(&model, val_windows, opt.batch_size)?;
        if !val_loss.is_finite() {
            diverged = true;
            break;
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: state.lr,
        });

        if val_loss < state.best_val {
            state.best_val = val_loss;
            state.epochs_since_improvement = 0;
            best_params.copy_from_slice(&model.params);
            best_epoch = Some(epoch);
        } else {
            state.epochs_since_improvement += 1;
        }
        if let Some(stopper) = stopper.as_mut() {
            if stopper.observe(val_loss) == StopSignal::Stop {
                stopped_early = true;
                break;
            }
        }
    }

    model.params = best_params;
    Ok(TrainOutcome {
        model,
        history,
        pretrain_val_loss,
        best_val_loss: state.best_val,
        best_epoch,
        stopped_early,
        diverged,
    })
}

//! Physics-guided patch-transformer forecaster for the dynamic-voltage
//! residual.
//!
//! The model consumes a two-channel context window (normalized dynamic
//! voltage and current), split into non-overlapping patches that are linearly
//! embedded, tagged with learned positional embeddings, and passed through
//! pre-norm encoder blocks (LayerNorm → multi-head self-attention → residual,
//! LayerNorm → GELU feed-forward → residual). The final LayerNorm's
//! last-patch vector is fused with a projection of the known future current,
//! and a linear head emits the H-step forecast.
//!
//! Everything is plain `f64` with hand-written reverse-mode gradients — no
//! autodiff framework. [`ops`] holds the differentiable primitives, [`net`]
//! the assembled forward/backward pass, [`windows`] the stride-1 window
//! extraction, and [`train`] the decoupled-weight-decay optimizer with cosine
//! schedule, gradient clipping and early stopping.

pub mod net;
pub mod ops;
pub mod train;
pub mod windows;

use crate::checkpoint::{Checkpoint, CheckpointError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::Path;
use thiserror::Error;

pub use net::{backward, forward, BackwardOut};
pub use train::{
    eval_loss, train, write_history_csv, EarlyStopper, EpochRecord, OptConfig, StopSignal,
    TrainOutcome, TrainState,
};
pub use windows::{make_windows, WindowBatch, WindowSample};

/// Input channels are fixed: normalized dynamic voltage and current.
pub const INPUT_CHANNELS: usize = 2;

#[derive(Debug, Error)]
pub enum TstError {
    #[error("invalid config: {reason}")]
    BadConfig { reason: String },
    #[error("shape mismatch: {reason}")]
    ShapeMismatch { reason: String },
    #[error("non-finite values detected in {stage}")]
    NonFinite { stage: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint is not a tst model: {reason}")]
    BadCheckpoint { reason: String },
    #[error("no training windows (sequences shorter than context + horizon?)")]
    NoWindows,
    #[error("optimizer config invalid: {reason}")]
    BadOptConfig { reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TstConfig {
    /// Context length L (timesteps).
    pub context_len: usize,
    /// Forecast horizon H (timesteps).
    pub horizon: usize,
    /// Patch length P; must divide L.
    pub patch_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    /// Dropout rate in [0, 1); 0 disables all masks.
    pub dropout: f64,
}

impl Default for TstConfig {
    /// Desk-scale configuration that trains in minutes on a CPU.
    fn default() -> Self {
        Self {
            context_len: 128,
            horizon: 16,
            patch_len: 8,
            d_model: 32,
            heads: 4,
            layers: 2,
            d_ff: 64,
            dropout: 0.1,
        }
    }
}

impl TstConfig {
    /// Publication-scale configuration (3,348,800 trainable parameters).
    pub fn publication_scale() -> Self {
        Self {
            context_len: 1024,
            horizon: 64,
            patch_len: 16,
            d_model: 256,
            heads: 8,
            layers: 4,
            d_ff: 1024,
            dropout: 0.1,
        }
    }

    /// Number of non-overlapping patches N = L/P.
    pub fn num_patches(&self) -> usize {
        self.context_len / self.patch_len
    }

    pub fn validate(&self) -> Result<(), TstError> {
        let bad = |reason: String| Err(TstError::BadConfig { reason });
        for (name, v) in [
            ("context_len", self.context_len),
            ("horizon", self.horizon),
            ("patch_len", self.patch_len),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("d_ff", self.d_ff),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.context_len % self.patch_len != 0 {
            return bad(format!(
                "patch_len {} must divide context_len {}",
                self.patch_len, self.context_len
            ));
        }
        if self.d_model % self.heads != 0 {
            return bad(format!(
                "heads {} must divide d_model {}",
                self.heads, self.d_model
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// How a parameter tensor is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    /// U(−1/√fan_in, 1/√fan_in) with fan_in = first shape dimension.
    UniformFanIn,
    Zero,
    One,
    /// N(0, 0.02) for positional embeddings.
    NormalSmall,
}

#[derive(Debug, Clone, PartialEq)]
struct LayoutEntry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
    init: InitKind,
}

/// Maps tensor names to slices of the flat parameter vector. Order is fixed
/// by construction, so parameter vectors, gradients and optimizer moments all
/// share one indexing scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl Layout {
    fn from_config(cfg: &TstConfig) -> Layout {
        let (d, f, h_len) = (cfg.d_model, cfg.d_ff, cfg.horizon);
        let n = cfg.num_patches();
        let patch_in = INPUT_CHANNELS * cfg.patch_len;
        let mut entries = Vec::new();
        let mut total = 0usize;
        let mut push = |name: String, shape: Vec<usize>, init: InitKind| {
            let len: usize = shape.iter().product();
            entries.push(LayoutEntry {
                name,
                offset: total,
                shape,
                init,
            });
            total += len;
        };

        push("embed.w".into(), vec![patch_in, d], InitKind::UniformFanIn);
        push("embed.b".into(), vec![d], InitKind::Zero);
        push("pos".into(), vec![n, d], InitKind::NormalSmall);
        for l in 0..cfg.layers {
            push(format!("layer{l}.ln1.g"), vec![d], InitKind::One);
            push(format!("layer{l}.ln1.b"), vec![d], InitKind::Zero);
            for proj in ["wq", "wk", "wv", "wo"] {
                push(
                    format!("layer{l}.attn.{proj}"),
                    vec![d, d],
                    InitKind::UniformFanIn,
                );
                push(
                    format!("layer{l}.attn.b{}", &proj[1..]),
                    vec![d],
                    InitKind::Zero,
                );
            }
            push(format!("layer{l}.ln2.g"), vec![d], InitKind::One);
            push(format!("layer{l}.ln2.b"), vec![d], InitKind::Zero);
            push(format!("layer{l}.ffn.w1"), vec![d, f], InitKind::UniformFanIn);
            push(format!("layer{l}.ffn.b1"), vec![f], InitKind::Zero);
            push(format!("layer{l}.ffn.w2"), vec![f, d], InitKind::UniformFanIn);
            push(format!("layer{l}.ffn.b2"), vec![d], InitKind::Zero);
        }
        push("final_ln.g".into(), vec![d], InitKind::One);
        push("final_ln.b".into(), vec![d], InitKind::Zero);
        push("fut.w".into(), vec![h_len, d], InitKind::UniformFanIn);
        push("fut.b".into(), vec![d], InitKind::Zero);
        push("fuse.w".into(), vec![2 * d, d], InitKind::UniformFanIn);
        push("fuse.b".into(), vec![d], InitKind::Zero);
        push("head.w".into(), vec![d, h_len], InitKind::UniformFanIn);
        push("head.b".into(), vec![h_len], InitKind::Zero);

        Layout { entries, total }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Byte-free view: (offset, length, shape) of a named tensor.
    pub fn entry(&self, name: &str) -> Option<(usize, usize, &[usize])> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| (e.offset, e.shape.iter().product(), e.shape.as_slice()))
    }

    /// Iterate (name, offset, len) over all tensors in order.
    pub fn spans(&self) -> impl Iterator<Item = (&str, usize, usize)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), e.offset, e.shape.iter().product()))
    }
}

/// The forecaster: a config, a layout, and one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TstModel {
    pub cfg: TstConfig,
    pub params: Vec<f64>,
    layout: Layout,
}

impl TstModel {
    /// Construct with seeded initialization: linear weights uniform scaled by
    /// inverse square root of fan-in, biases zero, LayerNorm scales one,
    /// positional embeddings from N(0, 0.02).
    pub fn init(cfg: TstConfig, seed: u64) -> Result<Self, TstError> {
        cfg.validate()?;
        let layout = Layout::from_config(&cfg);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos_dist = Normal::new(0.0, 0.02).expect("valid sigma");
        for e in &layout.entries {
            let len: usize = e.shape.iter().product();
            let slot = &mut params[e.offset..e.offset + len];
            match e.init {
                InitKind::Zero => {}
                InitKind::One => slot.fill(1.0),
                InitKind::UniformFanIn => {
                    let bound = 1.0 / (e.shape[0] as f64).sqrt();
                    for x in slot.iter_mut() {
                        *x = rng.gen_range(-bound..bound);
                    }
                }
                InitKind::NormalSmall => {
                    for x in slot.iter_mut() {
                        *x = pos_dist.sample(&mut rng);
                    }
                }
            }
        }
        Ok(Self {
            cfg,
            params,
            layout,
        })
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Named view into the parameter vector.
    pub fn tensor<'a>(&'a self, name: &str) -> &'a [f64] {
        let (off, len, _) = self
            .layout
            .entry(name)
            .unwrap_or_else(|| panic!("unknown tensor `{name}`"));
        &self.params[off..off + len]
    }

    /// Save as a checkpoint; `extra` rides along in the JSON header (for
    /// normalization stats and provenance the model itself does not own).
    pub fn save(&self, path: &Path, extra: &serde_json::Value) -> Result<(), TstError> {
        let mut ckpt = Checkpoint::new(json!({
            "kind": "tst",
            "config": serde_json::to_value(self.cfg).expect("config serializes"),
            "extra": extra,
        }));
        for e in &self.layout.entries {
            let len: usize = e.shape.iter().product();
            ckpt.insert(
                &e.name,
                e.shape.clone(),
                self.params[e.offset..e.offset + len].to_vec(),
            )?;
        }
        ckpt.write(path)?;
        Ok(())
    }

    /// Load a checkpoint written by [`TstModel::save`]; returns the model and
    /// the stored `extra` header value.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), TstError> {
        let ckpt = Checkpoint::read(path)?;
        if ckpt.header["kind"] != "tst" {
            return Err(TstError::BadCheckpoint {
                reason: format!("kind = {}", ckpt.header["kind"]),
            });
        }
        let cfg: TstConfig = serde_json::from_value(ckpt.header["config"].clone())
            .map_err(|e| TstError::BadCheckpoint {
                reason: format!("config header: {e}"),
            })?;
        cfg.validate()?;
        let layout = Layout::from_config(&cfg);
        let mut params = vec![0.0; layout.total];
        for e in &layout.entries {
            let tensor = ckpt.require(&e.name)?;
            if tensor.shape != e.shape {
                return Err(TstError::BadCheckpoint {
                    reason: format!(
                        "tensor `{}` has shape {:?}, expected {:?}",
                        e.name, tensor.shape, e.shape
                    ),
                });
            }
            let len: usize = e.shape.iter().product();
            params[e.offset..e.offset + len].copy_from_slice(&tensor.data);
        }
        Ok((
            Self {
                cfg,
                params,
                layout,
            },
            ckpt.header["extra"].clone(),
        ))
    }
}

/// Mean squared error over all B·H prediction scalars.
pub fn loss(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "loss shapes must match");
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

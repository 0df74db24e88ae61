//! Sliding-window extraction for forecaster training: a window of total
//! length L+H is moved across a (V_dyn, current) sequence with stride 1, and
//! each offset yields one normalized training sample — L steps of context on
//! both channels, H steps of future current, and H steps of target V_dyn.

use serde::{Deserialize, Serialize};

use crate::dataio::NormStats;

use super::{TstConfig, TstError};

/// One training window at a fixed start offset. All channels are already
/// z-score normalized with the training-set statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    /// Start offset of the context in the source sequence.
    pub start: usize,
    /// Normalized dynamic voltage over the context, length L.
    pub context_v: Vec<f64>,
    /// Normalized current over the context, length L.
    pub context_i: Vec<f64>,
    /// Normalized current over the forecast horizon, length H.
    pub future_i: Vec<f64>,
    /// Normalized dynamic voltage over the horizon, length H.
    pub target_v: Vec<f64>,
}

/// A batch of window samples flattened row-major for the network: context
/// channels are B×L, future current and target are B×H.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub b: usize,
    pub l: usize,
    pub h: usize,
    pub context_v: Vec<f64>,
    pub context_i: Vec<f64>,
    pub future_i: Vec<f64>,
    pub target: Vec<f64>,
    /// Source offsets of the stacked samples, for provenance.
    pub starts: Vec<usize>,
}

impl WindowBatch {
    /// Stack samples into one batch, preserving order. All samples must share
    /// the batch's L/H and contain only finite values.
    pub fn from_samples(samples: &[WindowSample]) -> Result<Self, TstError> {
        let first = samples.first().ok_or(TstError::NoWindows)?;
        let (l, h) = (first.context_v.len(), first.target_v.len());
        let b = samples.len();
        let mut batch = WindowBatch {
            b,
            l,
            h,
            context_v: Vec::with_capacity(b * l),
            context_i: Vec::with_capacity(b * l),
            future_i: Vec::with_capacity(b * h),
            target: Vec::with_capacity(b * h),
            starts: Vec::with_capacity(b),
        };
        for s in samples {
            if s.context_v.len() != l
                || s.context_i.len() != l
                || s.future_i.len() != h
                || s.target_v.len() != h
            {
                return Err(TstError::ShapeMismatch {
                    reason: format!(
                        "window sample at offset {} has lengths (context_v {}, context_i {}, \
                         future_i {}, target_v {}), batch expects context {l} / horizon {h}",
                        s.start,
                        s.context_v.len(),
                        s.context_i.len(),
                        s.future_i.len(),
                        s.target_v.len()
                    ),
                });
            }
            let finite = s
                .context_v
                .iter()
                .chain(&s.context_i)
                .chain(&s.future_i)
                .chain(&s.target_v)
                .all(|v| v.is_finite());
            if !finite {
                return Err(TstError::NonFinite {
                    stage: "window batch assembly".into(),
                });
            }
            batch.context_v.extend_from_slice(&s.context_v);
            batch.context_i.extend_from_slice(&s.context_i);
            batch.future_i.extend_from_slice(&s.future_i);
            batch.target.extend_from_slice(&s.target_v);
            batch.starts.push(s.start);
        }
        Ok(batch)
    }
}

/// Extract every stride-1 window of total length L+H from a normalized view
/// of the sequence. Sequences shorter than L+H yield no windows (logged as a
/// warning rather than an error so multi-file pipelines can skip stubs).
pub fn make_windows(
    vdyn: &[f64],
    i: &[f64],
    stats: &NormStats,
    cfg: &TstConfig,
) -> Vec<WindowSample> {
    assert_eq!(
        vdyn.len(),
        i.len(),
        "voltage and current channels must be the same length"
    );
    let (l, h) = (cfg.context_len, cfg.horizon);
    if vdyn.len() < l + h {
        log::warn!(
            "sequence of length {} is shorter than one window (L+H = {}); yielding no samples",
            vdyn.len(),
            l + h
        );
        return Vec::new();
    }
    let n_windows = vdyn.len() - (l + h) + 1;
    (0..n_windows)
        .map(|s| WindowSample {
            start: s,
            context_v: vdyn[s..s + l].iter().map(|&x| stats.norm_vdyn(x)).collect(),
            context_i: i[s..s + l].iter().map(|&x| stats.norm_i(x)).collect(),
            future_i: i[s + l..s + l + h].iter().map(|&x| stats.norm_i(x)).collect(),
            target_v: vdyn[s + l..s + l + h]
                .iter()
                .map(|&x| stats.norm_vdyn(x))
                .collect(),
        })
        .collect()
}

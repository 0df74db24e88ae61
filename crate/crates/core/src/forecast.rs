//! Chunked autoregressive inference and evaluation.
//!
//! The transformer path reconstructs terminal voltage as OCV(pseudo-SOC) plus
//! a forecast dynamic residual: the first ~15% of a file seeds the residual
//! buffer with measured values, then the forecaster advances in chunks of the
//! horizon length, writing its own predictions back into the buffer so later
//! context windows contain model output, not measurements. The linear path
//! wraps the free-running operator rollout. Both produce a [`RolloutResult`]
//! scored by the same RSS/RMSE evaluator.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{NormStats, SampleSeries};
use crate::dmdc::{self, DmdcError, DmdcModel};
use crate::embed::{input_matrix, EmbedError};
use crate::physics::{pseudo_soc, OcvTable, PhysicsError};
use crate::tst::{forward, TstError, TstModel, WindowBatch, WindowSample};

/// Which model family produced a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Dmdc,
    Tst,
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelTag::Dmdc => write!(f, "dmdc"),
            ModelTag::Tst => write!(f, "tst"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("series `{file_id}` has {len} samples; rollout needs more than {need}")]
    TooShort {
        file_id: String,
        len: usize,
        need: usize,
    },
    #[error("forecaster returned {got} values, expected the horizon {expected}")]
    BadPrediction { expected: usize, got: usize },
    #[error("evaluation inputs misaligned: {reason}")]
    Misaligned { reason: String },
    #[error("cannot aggregate rollouts from different model families")]
    MixedTags,
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Tst(#[from] TstError),
    #[error(transparent)]
    Dmdc(#[from] DmdcError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ForecastError + '_ {
    move |source| ForecastError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// An H-step residual forecaster working in raw (denormalized) units.
///
/// `t` is the source index of the first forecast sample — real models ignore
/// it, but it lets test oracles look up ground truth. Implementations must
/// return exactly `horizon()` values; when the remaining file is shorter than
/// a full chunk only the leading portion is consumed.
pub trait Forecaster {
    fn context_len(&self) -> usize;
    fn horizon(&self) -> usize;
    fn predict(
        &self,
        t: usize,
        context_vdyn: &[f64],
        context_i: &[f64],
        future_i: &[f64],
    ) -> Result<Vec<f64>, ForecastError>;
}

/// Adapter giving a trained model the raw-units [`Forecaster`] interface:
/// inputs are z-scored with the training statistics, outputs mapped back.
pub struct TstForecaster<'a> {
    pub model: &'a TstModel,
    pub stats: NormStats,
}

impl Forecaster for TstForecaster<'_> {
    fn context_len(&self) -> usize {
        self.model.cfg.context_len
    }

    fn horizon(&self) -> usize {
        self.model.cfg.horizon
    }

    fn predict(
        &self,
        _t: usize,
        context_vdyn: &[f64],
        context_i: &[f64],
        future_i: &[f64],
    ) -> Result<Vec<f64>, ForecastError> {
        let sample = WindowSample {
            start: 0,
            context_v: context_vdyn
                .iter()
                .map(|&x| self.stats.norm_vdyn(x))
                .collect(),
            context_i: context_i.iter().map(|&x| self.stats.norm_i(x)).collect(),
            future_i: future_i.iter().map(|&x| self.stats.norm_i(x)).collect(),
            target_v: vec![0.0; self.model.cfg.horizon],
        };
        let batch = WindowBatch::from_samples(std::slice::from_ref(&sample))?;
        let pred = forward(self.model, &batch, false, 0)?;
        Ok(pred.iter().map(|&x| self.stats.denorm_vdyn(x)).collect())
    }
}

/// A reconstructed-voltage trajectory aligned sample-for-sample with its
/// source series. Indices below `eval_start_idx` are the measured context;
/// the rest is model output.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub model_tag: ModelTag,
    pub reconstructed_v: Vec<f64>,
    /// First predicted index; everything before it is measured voltage.
    pub eval_start_idx: usize,
    /// Realized chunk lengths of the autoregressive loop (empty for the
    /// single-pass linear rollout).
    pub chunk_lens: Vec<usize>,
    /// OCV baseline per sample (transformer path only).
    pub v_ocv: Option<Vec<f64>>,
    /// Final residual buffer: measured dynamic voltage before the evaluation
    /// start, predictions after (transformer path only).
    pub v_dyn: Option<Vec<f64>>,
}

impl RolloutResult {
    pub fn n_chunks(&self) -> usize {
        self.chunk_lens.len()
    }

    pub fn eval_region_len(&self) -> usize {
        self.reconstructed_v.len() - self.eval_start_idx
    }
}

/// Evaluation start index: the ceiling of 15% of the file, raised to the
/// context length when the percentage would leave too little history.
fn eval_start(file_id: &str, t_len: usize, context_len: usize) -> usize {
    let s = (3 * t_len).div_ceil(20); // ceil(0.15·T), exactly, in integers
    if s < context_len {
        log::warn!(
            "series `{file_id}`: 15% context ({s} samples) is shorter than the \
             context length {context_len}; evaluation starts at {context_len} instead"
        );
        context_len
    } else {
        s
    }
}

/// Chunked autoregressive inference with a trained forecaster model.
pub fn chunked_rollout(
    series: &SampleSeries,
    ocv: &OcvTable,
    model: &TstModel,
    stats: &NormStats,
) -> Result<RolloutResult, ForecastError> {
    chunked_rollout_with(series, ocv, &TstForecaster { model, stats: *stats })
}

/// Chunked autoregressive inference with any residual forecaster.
///
/// Per chunk the forecaster sees the last L residual-buffer values, the last
/// L currents, and the next ℓ = min(H, T−t) known currents (padded to H by
/// holding the last known value at the truncated final chunk); its first ℓ
/// outputs overwrite the buffer and are added to the OCV baseline.
pub fn chunked_rollout_with(
    series: &SampleSeries,
    ocv: &OcvTable,
    forecaster: &dyn Forecaster,
) -> Result<RolloutResult, ForecastError> {
    let t_len = series.len();
    let (l, h) = (forecaster.context_len(), forecaster.horizon());
    if t_len <= l + h {
        return Err(ForecastError::TooShort {
            file_id: series.file_id.clone(),
            len: t_len,
            need: l + h,
        });
    }
    let s = eval_start(&series.file_id, t_len, l);

    let soc = pseudo_soc(series)?;
    let v_ocv = ocv.eval(&soc);
    let mut buffer: Vec<f64> = series
        .v
        .iter()
        .zip(&v_ocv)
        .map(|(v, o)| v - o)
        .collect();
    let mut recon = series.v.clone();
    let mut chunk_lens = Vec::new();

    let mut t = s;
    while t < t_len {
        let ell = h.min(t_len - t);
        let context_vdyn = &buffer[t - l..t];
        let context_i = &series.i[t - l..t];
        let mut future_i = series.i[t..t + ell].to_vec();
        future_i.resize(h, *future_i.last().expect("ell ≥ 1"));

        let pred = forecaster.predict(t, context_vdyn, context_i, &future_i)?;
        if pred.len() != h {
            return Err(ForecastError::BadPrediction {
                expected: h,
                got: pred.len(),
            });
        }
        for (j, &p) in pred.iter().take(ell).enumerate() {
            buffer[t + j] = p;
            recon[t + j] = v_ocv[t + j] + p;
        }
        chunk_lens.push(ell);
        t += ell;
    }

    Ok(RolloutResult {
        model_tag: ModelTag::Tst,
        reconstructed_v: recon,
        eval_start_idx: s,
        chunk_lens,
        v_ocv: Some(v_ocv),
        v_dyn: Some(buffer),
    })
}

/// Free-running linear rollout over a whole file: the state is seeded with
/// the first m measured voltages, then advances on its own outputs under the
/// measured current. With `train_fraction` set, scoring starts after that
/// leading fraction instead of directly after the seed window (for held-out
/// evaluation on the fitting file itself).
pub fn dmdc_rollout_eval(
    series: &SampleSeries,
    model: &DmdcModel,
    train_fraction: Option<f64>,
) -> Result<RolloutResult, ForecastError> {
    let t_len = series.len();
    let m = model.m;
    if t_len <= m {
        return Err(ForecastError::TooShort {
            file_id: series.file_id.clone(),
            len: t_len,
            need: m,
        });
    }
    let inputs = input_matrix(&series.i, m, model.d_u)?;
    let steps = t_len - m;
    let pred = dmdc::rollout(model, &series.v[..m], &inputs, steps)?;

    let mut recon = series.v.clone();
    recon[m..].copy_from_slice(&pred);

    let eval_start_idx = match train_fraction {
        Some(frac) => {
            let cut = (frac * t_len as f64).ceil() as usize;
            cut.clamp(m, t_len - 1)
        }
        None => m,
    };

    Ok(RolloutResult {
        model_tag: ModelTag::Dmdc,
        reconstructed_v: recon,
        eval_start_idx,
        chunk_lens: Vec::new(),
        v_ocv: None,
        v_dyn: None,
    })
}

/// Residual sum of squares and root mean square error of a prediction.
pub fn rss_rmse(measured: &[f64], predicted: &[f64]) -> (f64, f64) {
    assert_eq!(measured.len(), predicted.len(), "rss_rmse needs aligned slices");
    let rss: f64 = measured
        .iter()
        .zip(predicted)
        .map(|(y, yh)| (y - yh) * (y - yh))
        .sum();
    let rmse = (rss / measured.len() as f64).sqrt();
    (rss, rmse)
}

/// Per-file evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEval {
    pub file_id: String,
    pub cycle_index: u32,
    pub rss: f64,
    pub rmse: f64,
    pub eval_region_len: usize,
}

/// RSS/RMSE per file plus the aggregate over the concatenated evaluation
/// regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_tag: ModelTag,
    pub per_file: Vec<FileEval>,
    pub aggregate_rss: f64,
    pub aggregate_rmse: f64,
    pub aggregate_len: usize,
}

fn evaluate_at(
    results: &[RolloutResult],
    series_list: &[SampleSeries],
    start_of: impl Fn(usize) -> usize,
) -> Result<EvalReport, ForecastError> {
    let first = results.first().ok_or(ForecastError::Empty)?;
    if results.len() != series_list.len() {
        return Err(ForecastError::Misaligned {
            reason: format!(
                "{} rollouts vs {} series",
                results.len(),
                series_list.len()
            ),
        });
    }
    if results.iter().any(|r| r.model_tag != first.model_tag) {
        return Err(ForecastError::MixedTags);
    }
    let mut per_file = Vec::with_capacity(results.len());
    let mut agg_rss = 0.0;
    let mut agg_len = 0usize;
    for (idx, (result, series)) in results.iter().zip(series_list).enumerate() {
        if result.reconstructed_v.len() != series.len() {
            return Err(ForecastError::Misaligned {
                reason: format!(
                    "series `{}` has {} samples but its rollout has {}",
                    series.file_id,
                    series.len(),
                    result.reconstructed_v.len()
                ),
            });
        }
        let s = start_of(idx);
        if s >= series.len() {
            return Err(ForecastError::Misaligned {
                reason: format!(
                    "series `{}`: evaluation start {s} leaves no samples",
                    series.file_id
                ),
            });
        }
        let (rss, rmse) = rss_rmse(&series.v[s..], &result.reconstructed_v[s..]);
        agg_rss += rss;
        agg_len += series.len() - s;
        per_file.push(FileEval {
            file_id: series.file_id.clone(),
            cycle_index: series.cycle_index,
            rss,
            rmse,
            eval_region_len: series.len() - s,
        });
    }
    per_file.sort_by(|a, b| a.file_id.cmp(&b.file_id));
    Ok(EvalReport {
        model_tag: first.model_tag,
        per_file,
        aggregate_rss: agg_rss,
        aggregate_rmse: (agg_rss / agg_len as f64).sqrt(),
        aggregate_len: agg_len,
    })
}

/// Score rollouts against their sources over each rollout's own evaluation
/// region. Rows are ordered by file id; the aggregate treats the evaluation
/// regions as one concatenated sequence.
pub fn evaluate(
    results: &[RolloutResult],
    series_list: &[SampleSeries],
) -> Result<EvalReport, ForecastError> {
    evaluate_at(results, series_list, |idx| results[idx].eval_start_idx)
}

/// Score two model families on the intersection of their evaluation regions
/// (per file, from the later of the two start indices), so their metrics are
/// computed over identical samples.
pub fn evaluate_common(
    a: &[RolloutResult],
    b: &[RolloutResult],
    series_list: &[SampleSeries],
) -> Result<(EvalReport, EvalReport), ForecastError> {
    if a.len() != b.len() {
        return Err(ForecastError::Misaligned {
            reason: format!("{} vs {} rollouts", a.len(), b.len()),
        });
    }
    let start = |idx: usize| a[idx].eval_start_idx.max(b[idx].eval_start_idx);
    Ok((
        evaluate_at(a, series_list, start)?,
        evaluate_at(b, series_list, start)?,
    ))
}

/// Write one rollout as CSV: `time_s,v_measured,v_reconstructed,v_ocv,v_dyn_pred`.
/// The physics columns are blank for model families that do not use them.
pub fn write_rollout_csv(
    series: &SampleSeries,
    result: &RolloutResult,
    path: &Path,
) -> Result<(), ForecastError> {
    let mut out = Vec::new();
    writeln!(out, "time_s,v_measured,v_reconstructed,v_ocv,v_dyn_pred").expect("vec write");
    for k in 0..series.len() {
        let ocv = result.v_ocv.as_ref().map(|v| v[k]);
        let dyn_ = result.v_dyn.as_ref().map(|v| v[k]);
        writeln!(
            out,
            "{},{},{},{},{}",
            series.t[k],
            series.v[k],
            result.reconstructed_v[k],
            ocv.map(|x| x.to_string()).unwrap_or_default(),
            dyn_.map(|x| x.to_string()).unwrap_or_default(),
        )
        .expect("vec write");
    }
    std::fs::write(path, out).map_err(io_err(path))
}

impl EvalReport {
    /// Write per-file rows plus a final `aggregate` row as CSV.
    pub fn write_csv(&self, path: &Path) -> Result<(), ForecastError> {
        let mut out = Vec::new();
        writeln!(out, "file_id,cycle_index,model,rss,rmse,eval_region_len").expect("vec write");
        for row in &self.per_file {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                row.file_id, row.cycle_index, self.model_tag, row.rss, row.rmse,
                row.eval_region_len
            )
            .expect("vec write");
        }
        writeln!(
            out,
            "aggregate,,{},{},{},{}",
            self.model_tag, self.aggregate_rss, self.aggregate_rmse, self.aggregate_len
        )
        .expect("vec write");
        std::fs::write(path, out).map_err(io_err(path))
    }
}

/// Side-by-side text table of one or more evaluation reports: one row per
/// cycle (summing RSS over a model's files within the cycle), one RSS/RMSE
/// column pair per model, and a final aggregate row.
pub fn format_comparison_table(reports: &[&EvalReport]) -> String {
    let mut cycles: Vec<u32> = reports
        .iter()
        .flat_map(|r| r.per_file.iter().map(|f| f.cycle_index))
        .collect();
    cycles.sort_unstable();
    cycles.dedup();

    let mut table = String::new();
    table.push_str(&format!("{:<10}", "cycle"));
    for r in reports {
        table.push_str(&format!(
            "{:>14}{:>14}",
            format!("{} RSS", r.model_tag),
            format!("{} RMSE", r.model_tag)
        ));
    }
    table.push('\n');

    let cell = |table: &mut String, rss: Option<f64>, rmse: Option<f64>| {
        match (rss, rmse) {
            (Some(rss), Some(rmse)) => {
                table.push_str(&format!("{rss:>14.6}{rmse:>14.6}"));
            }
            _ => table.push_str(&format!("{:>14}{:>14}", "-", "-")),
        }
    };

    for cycle in cycles {
        table.push_str(&format!("{cycle:<10}"));
        for r in reports {
            let rows: Vec<&FileEval> = r
                .per_file
                .iter()
                .filter(|f| f.cycle_index == cycle)
                .collect();
            if rows.is_empty() {
                cell(&mut table, None, None);
            } else {
                let rss: f64 = rows.iter().map(|f| f.rss).sum();
                let len: usize = rows.iter().map(|f| f.eval_region_len).sum();
                cell(&mut table, Some(rss), Some((rss / len as f64).sqrt()));
            }
        }
        table.push('\n');
    }

    table.push_str(&format!("{:<10}", "all"));
    for r in reports {
        cell(&mut table, Some(r.aggregate_rss), Some(r.aggregate_rmse));
    }
    table.push('\n');
    table
}

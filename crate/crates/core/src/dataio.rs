//! Corpus I/O: HPPC sample series on disk, file-level split selection, and
//! the normalization statistics shared by the learned model.
//!
//! On-disk layout: each series is a CSV file with the exact header
//! `time_s,current_a,voltage_v` plus a JSON sidecar `<name>.meta.json`
//! carrying `file_id` and `cycle_index`. Stored current is
//! **discharge-positive**: a positive current drains the cell. Files recorded
//! with the opposite convention can be flipped at load time (the CLI exposes
//! this as `--charge-positive`).

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Plausibility window for terminal voltage; violations are load errors, not
/// silent clamps.
pub const VOLTAGE_MIN_V: f64 = 2.0;
pub const VOLTAGE_MAX_V: f64 = 4.5;

/// Required CSV header, byte-exact.
pub const CSV_HEADER: &str = "time_s,current_a,voltage_v";

/// One measured (or synthesized) HPPC record: timestamps in seconds from file
/// start, discharge-positive current in amperes, terminal voltage in volts.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSeries {
    pub file_id: String,
    pub cycle_index: u32,
    pub t: Vec<f64>,
    pub i: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("series `{file_id}`: column lengths differ (t: {t_len}, i: {i_len}, v: {v_len})")]
    LengthMismatch {
        file_id: String,
        t_len: usize,
        i_len: usize,
        v_len: usize,
    },
    #[error("series `{file_id}`: {len} samples, need at least 2")]
    TooShort { file_id: String, len: usize },
    #[error("series `{file_id}`: non-finite {column} at row {row}")]
    NonFinite {
        file_id: String,
        column: &'static str,
        row: usize,
    },
    #[error(
        "series `{file_id}`: non-monotone time at row {row} (t[{}] = {prev} s, t[{row}] = {val} s)",
        row - 1
    )]
    NonMonotoneTime {
        file_id: String,
        row: usize,
        prev: f64,
        val: f64,
    },
    #[error(
        "series `{file_id}`: voltage {val} V at row {row} outside plausible range \
         [{VOLTAGE_MIN_V}, {VOLTAGE_MAX_V}] V"
    )]
    VoltageOutOfRange { file_id: String, row: usize, val: f64 },
}

impl SampleSeries {
    /// Build a validated series. Row indices in errors are 1-based data rows
    /// (matching the CSV convention where row 1 is the first sample).
    pub fn new(
        file_id: impl Into<String>,
        cycle_index: u32,
        t: Vec<f64>,
        i: Vec<f64>,
        v: Vec<f64>,
    ) -> Result<Self, SeriesError> {
        let file_id = file_id.into();
        if t.len() != i.len() || t.len() != v.len() {
            return Err(SeriesError::LengthMismatch {
                file_id,
                t_len: t.len(),
                i_len: i.len(),
                v_len: v.len(),
            });
        }
        if t.len() < 2 {
            return Err(SeriesError::TooShort {
                file_id,
                len: t.len(),
            });
        }
        for (k, &x) in t.iter().enumerate() {
            if !x.is_finite() {
                return Err(SeriesError::NonFinite {
                    file_id,
                    column: "time_s",
                    row: k + 1,
                });
            }
        }
        for (k, &x) in i.iter().enumerate() {
            if !x.is_finite() {
                return Err(SeriesError::NonFinite {
                    file_id,
                    column: "current_a",
                    row: k + 1,
                });
            }
        }
        for (k, &x) in v.iter().enumerate() {
            if !x.is_finite() {
                return Err(SeriesError::NonFinite {
                    file_id,
                    column: "voltage_v",
                    row: k + 1,
                });
            }
            if !(VOLTAGE_MIN_V..=VOLTAGE_MAX_V).contains(&x) {
                return Err(SeriesError::VoltageOutOfRange {
                    file_id,
                    row: k + 1,
                    val: x,
                });
            }
        }
        for k in 1..t.len() {
            if t[k] <= t[k - 1] {
                return Err(SeriesError::NonMonotoneTime {
                    file_id,
                    row: k + 1,
                    prev: t[k - 1],
                    val: t[k],
                });
            }
        }
        Ok(Self {
            file_id,
            cycle_index,
            t,
            i,
            v,
        })
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    /// Flip the stored current sign in place (charge-positive source data).
    pub fn negate_current(&mut self) {
        for x in &mut self.i {
            *x = -*x;
        }
    }
}

/// Sidecar metadata persisted next to each CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub file_id: String,
    pub cycle_index: u32,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: missing header; expected `{CSV_HEADER}`")]
    MissingHeader { path: PathBuf },
    #[error("{path}: bad header `{found}`; expected `{CSV_HEADER}`")]
    BadHeader { path: PathBuf, found: String },
    #[error("{path}: row {row}: expected 3 comma-separated fields, found {fields}")]
    BadFieldCount {
        path: PathBuf,
        row: usize,
        fields: usize,
    },
    #[error("{path}: row {row}: cannot parse `{text}` as a number")]
    BadNumber {
        path: PathBuf,
        row: usize,
        text: String,
    },
    #[error("missing sidecar `{path}` (every series CSV needs a `<name>.meta.json`)")]
    MissingSidecar { path: PathBuf },
    #[error("{path}: invalid sidecar: {source}")]
    BadSidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Invalid(#[from] SeriesError),
}

fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Read and validate one series. Timestamps are rebased to seconds from file
/// start, so `t[0] == 0` after a successful load.
pub fn load_series(path: impl AsRef<Path>) -> Result<SampleSeries, LoadError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| LoadError::MissingHeader {
        path: path.to_path_buf(),
    })?;
    if header.trim() != CSV_HEADER {
        return Err(LoadError::BadHeader {
            path: path.to_path_buf(),
            found: header.to_string(),
        });
    }

    let mut t = Vec::new();
    let mut i = Vec::new();
    let mut v = Vec::new();
    for (k, line) in lines.enumerate() {
        let row = k + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(LoadError::BadFieldCount {
                path: path.to_path_buf(),
                row,
                fields: fields.len(),
            });
        }
        let parse = |text: &str| -> Result<f64, LoadError> {
            text.trim().parse::<f64>().map_err(|_| LoadError::BadNumber {
                path: path.to_path_buf(),
                row,
                text: text.to_string(),
            })
        };
        t.push(parse(fields[0])?);
        i.push(parse(fields[1])?);
        v.push(parse(fields[2])?);
    }

    if let Some(&t0) = t.first() {
        if t0 != 0.0 && t0.is_finite() {
            for x in &mut t {
                *x -= t0;
            }
        }
    }

    let side = sidecar_path(path);
    let meta_text = fs::read_to_string(&side).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            LoadError::MissingSidecar { path: side.clone() }
        } else {
            LoadError::Io {
                path: side.clone(),
                source,
            }
        }
    })?;
    let meta: SeriesMeta =
        serde_json::from_str(&meta_text).map_err(|source| LoadError::BadSidecar {
            path: side,
            source,
        })?;

    Ok(SampleSeries::new(meta.file_id, meta.cycle_index, t, i, v)?)
}

/// Write `<file_id>.csv` and `<file_id>.meta.json` into `dir`. Floats are
/// written with Rust's shortest round-trip formatting, so a load of the
/// written file reproduces every numeric field bit-exactly.
pub fn save_series(series: &SampleSeries, dir: impl AsRef<Path>) -> Result<PathBuf, LoadError> {
    let dir = dir.as_ref();
    let csv_path = dir.join(format!("{}.csv", series.file_id));
    let mut out = String::with_capacity(series.len() * 32);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for k in 0..series.len() {
        // Infallible: writing to a String cannot fail.
        let _ = writeln!(out, "{},{},{}", series.t[k], series.i[k], series.v[k]);
    }
    fs::write(&csv_path, out).map_err(|source| LoadError::Io {
        path: csv_path.clone(),
        source,
    })?;

    let meta = SeriesMeta {
        file_id: series.file_id.clone(),
        cycle_index: series.cycle_index,
    };
    let side = sidecar_path(&csv_path);
    let text = serde_json::to_string_pretty(&meta).expect("sidecar serialization is infallible");
    fs::write(&side, text).map_err(|source| LoadError::Io {
        path: side,
        source,
    })?;
    Ok(csv_path)
}

/// Load every `*.csv` under `dir` (non-recursive), sorted by file_id.
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<SampleSeries>, LoadError> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|source| LoadError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| LoadError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let p = entry.path();
        if p.extension().is_some_and(|e| e == "csv") {
            paths.push(p);
        }
    }
    paths.sort();
    let mut out: Vec<SampleSeries> = paths.iter().map(load_series).collect::<Result<_, _>>()?;
    out.sort_by(|a, b| a.file_id.cmp(&b.file_id));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// File-level split: which file_ids train, validate, and test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_files: Vec<String>,
    pub val_files: Vec<String>,
    pub test_files: Vec<String>,
    pub rng_seed: u64,
}

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("training pool has {len} file(s) at or below cycle threshold {threshold}; need at least 2")]
    PoolTooSmall { len: usize, threshold: u32 },
}

/// splitmix64 step — the documented, portable PRNG used for split selection.
/// One call advances the state and returns one 64-bit output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Partition files at the file level: files with `cycle_index > threshold`
/// are test; exactly one of the remaining (training-pool) files is drawn as
/// validation by splitmix64 over the pool sorted by file_id, making the split
/// independent of input ordering.
pub fn partition(
    files: &[(String, u32)],
    threshold: u32,
    seed: u64,
) -> Result<SplitSpec, SplitError> {
    let mut pool: Vec<&str> = files
        .iter()
        .filter(|(_, c)| *c <= threshold)
        .map(|(id, _)| id.as_str())
        .collect();
    pool.sort_unstable();
    let mut test_files: Vec<String> = files
        .iter()
        .filter(|(_, c)| *c > threshold)
        .map(|(id, _)| id.clone())
        .collect();
    test_files.sort_unstable();

    if pool.len() < 2 {
        return Err(SplitError::PoolTooSmall {
            len: pool.len(),
            threshold,
        });
    }

    let mut state = seed;
    let val_idx = (splitmix64(&mut state) % pool.len() as u64) as usize;
    let val = pool[val_idx].to_string();
    let train_files = pool
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != val_idx)
        .map(|(_, id)| id.to_string())
        .collect();

    Ok(SplitSpec {
        train_files,
        val_files: vec![val],
        test_files,
        rng_seed: seed,
    })
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Global z-score statistics for the dynamic-voltage and current channels,
/// computed from training files only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean_vdyn: f64,
    pub std_vdyn: f64,
    pub mean_i: f64,
    pub std_i: f64,
}

#[derive(Debug, Error)]
pub enum NormError {
    #[error("no training series given")]
    Empty,
    #[error("zero variance on the {channel} channel (constant signal)")]
    ZeroVariance { channel: &'static str },
    #[error(transparent)]
    Physics(#[from] crate::physics::PhysicsError),
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fit z-score stats over the concatenation of all training V_dyn samples and
/// all training current samples. V_dyn is the measured voltage minus the
/// OCV baseline at pseudo-SOC (see [`crate::physics::dynamic_voltage`]).
pub fn fit_norm_stats(
    train: &[SampleSeries],
    ocv: &crate::physics::OcvTable,
) -> Result<NormStats, NormError> {
    if train.is_empty() {
        return Err(NormError::Empty);
    }
    let mut vdyn_all = Vec::new();
    let mut i_all = Vec::new();
    for series in train {
        vdyn_all.extend(crate::physics::dynamic_voltage(series, ocv)?);
        i_all.extend_from_slice(&series.i);
    }
    let (mean_vdyn, std_vdyn) = mean_std(&vdyn_all);
    let (mean_i, std_i) = mean_std(&i_all);
    if std_vdyn <= 0.0 || !std_vdyn.is_finite() {
        return Err(NormError::ZeroVariance { channel: "V_dyn" });
    }
    if std_i <= 0.0 || !std_i.is_finite() {
        return Err(NormError::ZeroVariance { channel: "current" });
    }
    Ok(NormStats {
        mean_vdyn,
        std_vdyn,
        mean_i,
        std_i,
    })
}

impl NormStats {
    pub fn norm_vdyn(&self, x: f64) -> f64 {
        (x - self.mean_vdyn) / self.std_vdyn
    }

    pub fn denorm_vdyn(&self, x: f64) -> f64 {
        x * self.std_vdyn + self.mean_vdyn
    }

    pub fn norm_i(&self, x: f64) -> f64 {
        (x - self.mean_i) / self.std_i
    }
}

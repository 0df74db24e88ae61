//! Linear system identification with control: fit the one-step operators
//! (A, B) by truncated-SVD least squares on snapshot matrices, roll the model
//! forward autoregressively, extract eigenvalue diagnostics, and sweep
//! embedding dimensions.
//!
//! The regression solves `X′ ≈ [A B]·[X; U]` through the pseudoinverse of the
//! stacked matrix Ω = [X; U]: retaining `r` singular triplets gives
//! `G = X′·V_r·Σ_r⁻¹·U_rᵀ` whose leading `m` columns are A and trailing `d_u`
//! columns are B. Rank truncation is the only regularization: on strongly
//! collinear pulse data the trailing singular directions carry noise-scaled
//! near-integrator modes that destabilize long rollouts, so sweeps default to
//! a relative cutoff rather than full rank.

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dataio::SampleSeries;
use crate::embed::{snapshots, EmbedError, SnapshotTriple};
use nalgebra::{Complex, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DmdcError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("snapshot matrices contain non-finite values")]
    NonFinite,
    #[error("stacked data matrix is identically zero; nothing to fit")]
    AllZero,
    #[error("rank policy retained no singular values")]
    ZeroRank,
    #[error("rank policy would retain zero singular values (requested {requested}, only {nonzero} nonzero)")]
    RetainsZeros { requested: usize, nonzero: usize },
    #[error("invalid rank policy: {reason}")]
    BadPolicy { reason: String },
    #[error("eigen decomposition did not converge")]
    EigenFailed,
    #[error("rollout inputs malformed: {reason}")]
    BadRollout { reason: String },
    #[error("sweep over `{what}` produced no finite evaluation")]
    SweepDiverged { what: &'static str },
    #[error("sweep train fraction {got} outside (0, 1)")]
    BadTrainFrac { got: f64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint is not a dmdc model: {reason}")]
    BadCheckpoint { reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How many singular triplets of Ω the regression keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RankPolicy {
    /// Keep σ_i ≥ tol·σ_max.
    RelativeTol(f64),
    /// Keep exactly this many (errors if that would include zeros).
    FixedRank(usize),
    /// Keep the smallest prefix with Σσ² at least this fraction of the total.
    EnergyFraction(f64),
    /// Keep every strictly positive singular value.
    Full,
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy::RelativeTol(1e-10)
    }
}

/// Fitted one-step linear model with its SVD diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct DmdcModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub m: usize,
    pub d_u: usize,
    /// Snapshot columns the fit used.
    pub k: usize,
    /// Singular values of Ω, descending.
    pub singular_values: Vec<f64>,
    pub rank_r: usize,
    /// ‖X′ − AX − BU‖²_F over the training columns.
    pub fit_residual_rss: f64,
}

/// Eigenvalues of A and their magnitudes sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSpectrum {
    pub eigenvalues: Vec<Complex<f64>>,
    pub modal_magnitudes: Vec<f64>,
}

fn select_rank(sv: &[f64], policy: RankPolicy) -> Result<usize, DmdcError> {
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax <= 0.0 {
        return Err(DmdcError::AllZero);
    }
    let nonzero = sv.iter().filter(|&&s| s > 0.0).count();
    let r = match policy {
        RankPolicy::RelativeTol(tol) => {
            if !(0.0..=1.0).contains(&tol) {
                return Err(DmdcError::BadPolicy {
                    reason: format!("relative tolerance {tol} outside [0, 1]"),
                });
            }
            sv.iter().filter(|&&s| s >= tol * smax).count()
        }
        RankPolicy::FixedRank(r) => r,
        RankPolicy::EnergyFraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(DmdcError::BadPolicy {
                    reason: format!("energy fraction {f} outside (0, 1]"),
                });
            }
            let total: f64 = sv.iter().map(|s| s * s).sum();
            let mut cum = 0.0;
            let mut r = sv.len();
            for (idx, s) in sv.iter().enumerate() {
                cum += s * s;
                if cum >= f * total {
                    r = idx + 1;
                    break;
                }
            }
            r
        }
        RankPolicy::Full => nonzero,
    };
    if r == 0 {
        return Err(DmdcError::ZeroRank);
    }
    if r > nonzero {
        return Err(DmdcError::RetainsZeros {
            requested: r,
            nonzero,
        });
    }
    Ok(r)
}

/// Fit (A, B) on a snapshot triple by pseudoinverse of the stacked Ω = [X; U].
pub fn fit(snaps: &SnapshotTriple, policy: RankPolicy) -> Result<DmdcModel, DmdcError> {
    let (m, d_u, k) = (snaps.m, snaps.d_u, snaps.k);
    let mut omega = DMatrix::zeros(m + d_u, k);
    omega.view_mut((0, 0), (m, k)).copy_from(&snaps.x);
    omega.view_mut((m, 0), (d_u, k)).copy_from(&snaps.u);

    if omega.iter().chain(snaps.xp.iter()).any(|x| !x.is_finite()) {
        return Err(DmdcError::NonFinite);
    }
    if omega.iter().all(|&x| x == 0.0) {
        return Err(DmdcError::AllZero);
    }

    let svd = omega.svd(true, true);
    let sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
    debug_assert!(sv.windows(2).all(|w| w[0] >= w[1]), "descending order");
    let r = select_rank(&sv, policy)?;

    let u = svd.u.expect("requested U factor");
    let v_t = svd.v_t.expect("requested V^T factor");
    // G = X′ · V_r · Σ_r⁻¹ · U_rᵀ, evaluated left to right.
    let mut xp_vr = &snaps.xp * v_t.rows(0, r).transpose();
    for j in 0..r {
        xp_vr.column_mut(j).scale_mut(1.0 / sv[j]);
    }
    let g = xp_vr * u.columns(0, r).transpose();
    let a = g.columns(0, m).into_owned();
    let b = g.columns(m, d_u).into_owned();

    let resid = &snaps.xp - &a * &snaps.x - &b * &snaps.u;
    let fit_residual_rss = resid.iter().map(|x| x * x).sum();

    Ok(DmdcModel {
        a,
        b,
        m,
        d_u,
        k,
        singular_values: sv,
        rank_r: r,
        fit_residual_rss,
    })
}

impl DmdcModel {
    /// True when the regression had fewer columns than unknowns per row.
    pub fn underdetermined(&self) -> bool {
        self.k < self.m + self.d_u
    }

    pub fn save(&self, path: &Path) -> Result<(), DmdcError> {
        let mut ckpt = Checkpoint::new(json!({
            "kind": "dmdc",
            "m": self.m,
            "d_u": self.d_u,
            "k": self.k,
            "rank_r": self.rank_r,
            "fit_residual_rss": self.fit_residual_rss,
        }));
        ckpt.insert("A", vec![self.m, self.m], mat_rows(&self.a))?;
        ckpt.insert("B", vec![self.m, self.d_u], mat_rows(&self.b))?;
        ckpt.insert(
            "singular_values",
            vec![self.singular_values.len()],
            self.singular_values.clone(),
        )?;
        ckpt.write(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DmdcError> {
        let ckpt = Checkpoint::read(path)?;
        if ckpt.header["kind"] != "dmdc" {
            return Err(DmdcError::BadCheckpoint {
                reason: format!("kind = {}", ckpt.header["kind"]),
            });
        }
        let field = |name: &str| -> Result<usize, DmdcError> {
            ckpt.header[name]
                .as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| DmdcError::BadCheckpoint {
                    reason: format!("missing integer header field `{name}`"),
                })
        };
        let (m, d_u, k, rank_r) = (field("m")?, field("d_u")?, field("k")?, field("rank_r")?);
        let fit_residual_rss =
            ckpt.header["fit_residual_rss"]
                .as_f64()
                .ok_or(DmdcError::BadCheckpoint {
                    reason: "missing fit_residual_rss".into(),
                })?;
        let a = ckpt.require("A")?;
        let b = ckpt.require("B")?;
        let sv = ckpt.require("singular_values")?;
        if a.shape != [m, m] || b.shape != [m, d_u] {
            return Err(DmdcError::BadCheckpoint {
                reason: "tensor shapes disagree with header".into(),
            });
        }
        Ok(DmdcModel {
            a: DMatrix::from_row_slice(m, m, &a.data),
            b: DMatrix::from_row_slice(m, d_u, &b.data),
            m,
            d_u,
            k,
            singular_values: sv.data.clone(),
            rank_r,
            fit_residual_rss,
        })
    }
}

fn mat_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// Free-running rollout: iterate `x ← A·x + B·u_k` for `steps` steps and emit
/// the newest-time coordinate of each updated state. Predicted values feed
/// back into the state; measured voltages are never re-injected.
pub fn rollout(
    model: &DmdcModel,
    x0: &[f64],
    inputs: &DMatrix<f64>,
    steps: usize,
) -> Result<Vec<f64>, DmdcError> {
    if x0.len() != model.m {
        return Err(DmdcError::BadRollout {
            reason: format!("x0 has {} entries, model expects m = {}", x0.len(), model.m),
        });
    }
    if inputs.nrows() != model.d_u {
        return Err(DmdcError::BadRollout {
            reason: format!(
                "inputs have {} rows, model expects d_u = {}",
                inputs.nrows(),
                model.d_u
            ),
        });
    }
    if steps > inputs.ncols() {
        return Err(DmdcError::BadRollout {
            reason: format!("{steps} steps requested but only {} input columns", inputs.ncols()),
        });
    }
    let mut x = DVector::from_column_slice(x0);
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        x = &model.a * x + &model.b * inputs.column(k);
        out.push(x[model.m - 1]);
    }
    Ok(out)
}

/// Eigenvalues of A with magnitudes sorted descending.
pub fn modes(model: &DmdcModel) -> Result<ModeSpectrum, DmdcError> {
    let schur = nalgebra::linalg::Schur::try_new(model.a.clone(), 1e-14, 100_000)
        .ok_or(DmdcError::EigenFailed)?;
    let eigenvalues: Vec<Complex<f64>> = schur.complex_eigenvalues().iter().cloned().collect();
    let mut modal_magnitudes: Vec<f64> = eigenvalues.iter().map(|z| z.norm()).collect();
    modal_magnitudes.sort_by(|a, b| b.partial_cmp(a).expect("finite magnitudes"));
    Ok(ModeSpectrum {
        eigenvalues,
        modal_magnitudes,
    })
}

/// Shared sweep settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Leading fraction of samples used for fitting; must lie in (0, 1).
    pub train_frac: f64,
    pub rank_policy: RankPolicy,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            train_frac: 0.6,
            rank_policy: RankPolicy::default(),
        }
    }
}

/// JSON cannot represent non-finite floats (serde_json emits `null`, which
/// does not read back), yet diverged grid points legitimately carry infinite
/// residuals. Encode non-finite values as the strings "inf"/"-inf"/"nan".
mod portable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(x),
            Raw::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!(
                    "bad float string `{other}`"
                ))),
            },
        }
    }
}

/// One sweep grid point. Holdout metrics cover predicted samples at or past
/// the training boundary; full metrics cover every predicted sample,
/// including the training region (both are reported since published residual
/// figures rarely say which convention they use).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: usize,
    #[serde(with = "portable_f64")]
    pub rss_holdout: f64,
    #[serde(with = "portable_f64")]
    pub rmse_holdout: f64,
    #[serde(with = "portable_f64")]
    pub rss_full: f64,
    #[serde(with = "portable_f64")]
    pub rmse_full: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Smallest parameter among those within 1e-12 of the best holdout RSS.
    pub best_param: usize,
}

impl SweepResult {
    /// Emit `param,rss,rmse` rows (holdout metrics, the ones selection uses).
    pub fn write_csv(&self, path: &Path) -> Result<(), DmdcError> {
        let mut out = String::from("param,rss,rmse\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{}\n",
                p.param, p.rss_holdout, p.rmse_holdout
            ));
        }
        std::fs::write(path, out).map_err(|source| DmdcError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Fit on the leading fraction, roll out across the entire file, and score.
pub fn evaluate_embedding(
    series: &SampleSeries,
    m: usize,
    d_u: usize,
    cfg: &SweepConfig,
) -> Result<SweepPoint, DmdcError> {
    if !(cfg.train_frac > 0.0 && cfg.train_frac < 1.0) {
        return Err(DmdcError::BadTrainFrac {
            got: cfg.train_frac,
        });
    }
    let n = series.len();
    let full = snapshots(series, m, d_u)?;
    let n_train = ((cfg.train_frac * n as f64).floor() as usize).max(m + 1).min(n);
    let k_train = n_train - m;
    let model = fit(&full.first_columns(k_train), cfg.rank_policy)?;

    let preds = rollout(&model, &series.v[0..m], &full.u, full.k)?;
    let sq_err = |j: usize| {
        let e = preds[j] - series.v[m + j];
        e * e
    };
    let finite = preds.iter().all(|p| p.is_finite());
    let holdout_start = n_train.saturating_sub(m);
    let (mut rss_full, mut rss_holdout) = (0.0, 0.0);
    for j in 0..full.k {
        let e = sq_err(j);
        rss_full += e;
        if j >= holdout_start {
            rss_holdout += e;
        }
    }
    let holdout_len = full.k - holdout_start;
    let point = if finite && holdout_len > 0 {
        SweepPoint {
            param: 0,
            rss_holdout,
            rmse_holdout: (rss_holdout / holdout_len as f64).sqrt(),
            rss_full,
            rmse_full: (rss_full / full.k as f64).sqrt(),
        }
    } else {
        SweepPoint {
            param: 0,
            rss_holdout: f64::INFINITY,
            rmse_holdout: f64::INFINITY,
            rss_full: f64::INFINITY,
            rmse_full: f64::INFINITY,
        }
    };
    Ok(point)
}

fn run_sweep(
    what: &'static str,
    params: &[usize],
    eval: impl Fn(usize) -> Result<SweepPoint, DmdcError> + Sync,
) -> Result<SweepResult, DmdcError> {
    let points: Vec<SweepPoint> = params
        .par_iter()
        .map(|&p| eval(p).map(|mut pt| {
            pt.param = p;
            pt
        }))
        .collect::<Result<_, _>>()?;
    let min_rss = points
        .iter()
        .map(|p| p.rss_holdout)
        .fold(f64::INFINITY, f64::min);
    if !min_rss.is_finite() {
        return Err(DmdcError::SweepDiverged { what });
    }
    let best_param = points
        .iter()
        .filter(|p| p.rss_holdout <= min_rss + 1e-12)
        .map(|p| p.param)
        .min()
        .expect("at least one finite point");
    Ok(SweepResult { points, best_param })
}

/// Sweep the output embedding dimension m at fixed input depth.
pub fn sweep_output_embedding(
    series: &SampleSeries,
    m_range: impl IntoIterator<Item = usize>,
    d_u: usize,
    cfg: &SweepConfig,
) -> Result<SweepResult, DmdcError> {
    let params: Vec<usize> = m_range.into_iter().collect();
    run_sweep("m", &params, |m| evaluate_embedding(series, m, d_u, cfg))
}

/// Sweep the input embedding depth d_u at fixed output dimension.
pub fn sweep_input_delay(
    series: &SampleSeries,
    m: usize,
    d_u_range: impl IntoIterator<Item = usize>,
    cfg: &SweepConfig,
) -> Result<SweepResult, DmdcError> {
    let params: Vec<usize> = d_u_range.into_iter().collect();
    run_sweep("d_u", &params, |d_u| evaluate_embedding(series, m, d_u, cfg))
}

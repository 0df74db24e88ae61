//! Batch pipeline driver: synthesize pulse-test data, fit the OCV table and
//! both model families, roll them forward, and score the results — one
//! subcommand per stage. Every run is deterministic given (inputs, seed) and
//! records its resolved configuration as `run_config.json` next to its
//! artifacts, so any artifact can be regenerated from the directory alone.
//!
//! Stages connect through files: `synth` → data CSVs, `fit-ocv` → `ocv.csv`,
//! `fit-dmdc`/`train-tst` → checkpoints, `rollout` → per-file CSV + JSON
//! sidecars, `eval` → per-model reports, `report` → comparison table.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use pulse_sysid::checkpoint::Checkpoint;
use pulse_sysid::dataio::{
    self, partition, splitmix64, NormStats, SampleSeries,
};
use pulse_sysid::dmdc::{
    self, sweep_input_delay, sweep_output_embedding, DmdcModel, RankPolicy, SweepConfig,
};
use pulse_sysid::ecmsim::{
    degrade, simulate_labeled, DegradationSchedule, EcmParams, OcvCurve, ProtocolSpec,
};
use pulse_sysid::embed::snapshots;
use pulse_sysid::forecast::{
    chunked_rollout, dmdc_rollout_eval, evaluate, format_comparison_table, write_rollout_csv,
    EvalReport, ModelTag, RolloutResult,
};
use pulse_sysid::physics::{dynamic_voltage, fit_ocv_table, OcvTable};
use pulse_sysid::tst::{
    make_windows, train, write_history_csv, OptConfig, TstConfig, TstModel, WindowSample,
};

#[derive(Parser)]
#[command(
    name = "pulse-sysid",
    version,
    about = "System identification and voltage forecasting for pulse-excited cells"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate pulse-test cycles of an aging cell; one CSV + sidecar per cycle.
    Synth(SynthArgs),
    /// Fit the open-circuit-voltage table from rest segments of data files.
    FitOcv(FitOcvArgs),
    /// Fit a linear one-step model (delay-embedded, rank-truncated) per file.
    FitDmdc(FitDmdcArgs),
    /// Sweep an embedding dimension and emit holdout residuals per grid point.
    Sweep(SweepArgs),
    /// Extract eigenvalue spectra from fitted linear models, one row per mode.
    Modes(ModesArgs),
    /// Train the patch transformer on dynamic-voltage windows.
    TrainTst(TrainTstArgs),
    /// Roll a fitted model forward over data files, writing one CSV per file.
    Rollout(RolloutArgs),
    /// Score rollout artifacts against their source files, grouped per model.
    Eval(EvalArgs),
    /// Render a side-by-side comparison table from evaluation reports.
    Report(ReportArgs),
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
struct Common {
    /// JSON file holding this subcommand's configuration; explicit flags
    /// override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory artifacts are written to (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Seed for the stochastic steps (simulation noise, split draw, training).
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    init_thread_pool()?;
    match Cli::parse().command {
        Command::Synth(args) => cmd_synth(args),
        Command::FitOcv(args) => cmd_fit_ocv(args),
        Command::FitDmdc(args) => cmd_fit_dmdc(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Modes(args) => cmd_modes(args),
        Command::TrainTst(args) => cmd_train_tst(args),
        Command::Rollout(args) => cmd_rollout(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    }
}

/// `PULSE_SYSID_THREADS` caps the global worker pool; unset means one worker
/// per core.
fn init_thread_pool() -> Result<()> {
    if let Ok(raw) = std::env::var("PULSE_SYSID_THREADS") {
        let n: usize = raw
            .trim()
            .parse()
            .context("PULSE_SYSID_THREADS must be a positive integer")?;
        ensure!(n >= 1, "PULSE_SYSID_THREADS must be at least 1, got {n}");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing the worker pool")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Configuration plumbing
// ---------------------------------------------------------------------------

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(p) = path else {
        return Ok(T::default());
    };
    let text =
        fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
    // A recorded `run_config.json` wraps the settings under "config"; accept
    // it directly so a run can be reproduced by pointing at its own record.
    if let Some(inner) = doc.get_mut("config").filter(|_| doc.get("subcommand").is_some()) {
        doc = inner.take();
    }
    serde_json::from_value(doc).with_context(|| format!("parsing config {}", p.display()))
}

/// Record the fully resolved configuration so the run can be reproduced from
/// the output directory alone.
fn write_run_config<T: Serialize>(out: &Path, subcommand: &str, config: &T) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let doc = json!({
        "subcommand": subcommand,
        "out": out.display().to_string(),
        "config": config,
    });
    let path = out.join("run_config.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&doc).expect("config serializes"),
    )
    .with_context(|| format!("writing {}", path.display()))
}

fn set_if<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn required<'a>(opt: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    opt.as_deref()
        .with_context(|| format!("missing required input: pass --{flag} or set it in --config"))
}

/// Load every data CSV under `dir`, optionally flipping to the
/// discharge-positive sign convention and restricting to given file ids.
fn load_data(dir: &Path, charge_positive: bool, file_ids: &[String]) -> Result<Vec<SampleSeries>> {
    let mut all = dataio::load_dir(dir)
        .with_context(|| format!("loading data files from {}", dir.display()))?;
    ensure!(!all.is_empty(), "no data CSV files under {}", dir.display());
    if charge_positive {
        for series in &mut all {
            series.negate_current();
        }
    }
    if !file_ids.is_empty() {
        for want in file_ids {
            ensure!(
                all.iter().any(|s| &s.file_id == want),
                "file id `{want}` not found under {}",
                dir.display()
            );
        }
        all.retain(|s| file_ids.contains(&s.file_id));
    }
    Ok(all)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SynthConfig {
    params: EcmParams,
    protocol: ProtocolSpec,
    degradation: DegradationSchedule,
    /// Cycle indices to synthesize, one output file each.
    cycles: Vec<u32>,
    seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            params: EcmParams::default(),
            protocol: ProtocolSpec::default(),
            degradation: DegradationSchedule {
                r_growth_per_cycle: 0.0,
                capacity_fade_per_cycle: 0.0,
                c_shrink_per_cycle: 0.0,
            },
            cycles: vec![0],
            seed: 0,
        }
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Cycle indices to synthesize (comma separated, e.g. 0,20,40).
    #[arg(long, value_delimiter = ',')]
    cycles: Option<Vec<u32>>,

    // Cell parameters.
    #[arg(long)]
    r0: Option<f64>,
    #[arg(long)]
    r1: Option<f64>,
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long)]
    r2: Option<f64>,
    #[arg(long)]
    c2: Option<f64>,
    #[arg(long)]
    capacity_ah: Option<f64>,
    /// Replace the OCV curve with an affine ramp: voltage at SOC 0.
    #[arg(long, requires = "ocv_v_full")]
    ocv_v_empty: Option<f64>,
    /// Replace the OCV curve with an affine ramp: voltage at SOC 1.
    #[arg(long, requires = "ocv_v_empty")]
    ocv_v_full: Option<f64>,

    // Protocol fields.
    #[arg(long)]
    pulse_discharge_a: Option<f64>,
    #[arg(long)]
    pulse_discharge_s: Option<f64>,
    #[arg(long)]
    rest1_s: Option<f64>,
    #[arg(long)]
    pulse_charge_a: Option<f64>,
    #[arg(long)]
    pulse_charge_s: Option<f64>,
    #[arg(long)]
    rest2_s: Option<f64>,
    #[arg(long)]
    deep_discharge_a: Option<f64>,
    #[arg(long)]
    deep_discharge_s: Option<f64>,
    #[arg(long)]
    deep_cutoff_v: Option<f64>,
    #[arg(long)]
    long_rest_s: Option<f64>,
    #[arg(long)]
    repeats: Option<u32>,
    #[arg(long)]
    dt_s: Option<f64>,
    #[arg(long)]
    noise_std_v: Option<f64>,

    // Aging schedule.
    #[arg(long)]
    r_growth_per_cycle: Option<f64>,
    #[arg(long)]
    capacity_fade_per_cycle: Option<f64>,
    #[arg(long)]
    c_shrink_per_cycle: Option<f64>,
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = load_config(args.common.config.as_deref())?;
    set_if(&mut cfg.cycles, args.cycles);
    set_if(&mut cfg.seed, args.common.seed);
    set_if(&mut cfg.params.r0, args.r0);
    set_if(&mut cfg.params.r1, args.r1);
    set_if(&mut cfg.params.c1, args.c1);
    set_if(&mut cfg.params.r2, args.r2);
    set_if(&mut cfg.params.c2, args.c2);
    set_if(&mut cfg.params.capacity_ah, args.capacity_ah);
    if let (Some(v_empty), Some(v_full)) = (args.ocv_v_empty, args.ocv_v_full) {
        cfg.params.ocv = OcvCurve::affine(v_empty, v_full);
    }
    set_if(&mut cfg.protocol.pulse_discharge_a, args.pulse_discharge_a);
    set_if(&mut cfg.protocol.pulse_discharge_s, args.pulse_discharge_s);
    set_if(&mut cfg.protocol.rest1_s, args.rest1_s);
    set_if(&mut cfg.protocol.pulse_charge_a, args.pulse_charge_a);
    set_if(&mut cfg.protocol.pulse_charge_s, args.pulse_charge_s);
    set_if(&mut cfg.protocol.rest2_s, args.rest2_s);
    set_if(&mut cfg.protocol.deep_discharge_a, args.deep_discharge_a);
    set_if(&mut cfg.protocol.deep_discharge_s, args.deep_discharge_s);
    set_if(&mut cfg.protocol.deep_cutoff_v, args.deep_cutoff_v);
    set_if(&mut cfg.protocol.long_rest_s, args.long_rest_s);
    set_if(&mut cfg.protocol.repeats, args.repeats);
    set_if(&mut cfg.protocol.dt_s, args.dt_s);
    set_if(&mut cfg.protocol.noise_std_v, args.noise_std_v);
    set_if(&mut cfg.degradation.r_growth_per_cycle, args.r_growth_per_cycle);
    set_if(
        &mut cfg.degradation.capacity_fade_per_cycle,
        args.capacity_fade_per_cycle,
    );
    set_if(&mut cfg.degradation.c_shrink_per_cycle, args.c_shrink_per_cycle);
    ensure!(!cfg.cycles.is_empty(), "no cycles requested");

    write_run_config(&args.common.out, "synth", &cfg)?;
    for &cycle in &cfg.cycles {
        let aged = degrade(&cfg.params, &cfg.degradation, cycle)?;
        // Per-file seed hashed from (master seed, cycle) so the set of output
        // files does not depend on the order cycles are listed in.
        let mut state = cfg.seed.wrapping_add(u64::from(cycle));
        let file_seed = splitmix64(&mut state);
        let file_id = format!("cycle_{cycle:03}");
        let (series, _truth) =
            simulate_labeled(&aged, &cfg.protocol, file_seed, file_id.as_str(), cycle)?;
        let path = dataio::save_series(&series, &args.common.out)?;
        log::info!("cycle {cycle}: {} samples -> {}", series.len(), path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fit-ocv
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct FitOcvConfig {
    data_dir: Option<PathBuf>,
    /// Empty means every file under `data_dir`.
    file_ids: Vec<String>,
    charge_positive: bool,
}

#[derive(Debug, Args)]
struct FitOcvArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of data CSVs.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Restrict to these file ids (repeatable).
    #[arg(long = "file-id")]
    file_ids: Vec<String>,
    /// Input files use the charge-positive sign convention; negate on load.
    #[arg(long)]
    charge_positive: bool,
}

fn cmd_fit_ocv(args: FitOcvArgs) -> Result<()> {
    let mut cfg: FitOcvConfig = load_config(args.common.config.as_deref())?;
    if args.data.is_some() {
        cfg.data_dir = args.data;
    }
    if !args.file_ids.is_empty() {
        cfg.file_ids = args.file_ids;
    }
    cfg.charge_positive |= args.charge_positive;

    let dir = required(&cfg.data_dir, "data")?.to_path_buf();
    let files = load_data(&dir, cfg.charge_positive, &cfg.file_ids)?;
    write_run_config(&args.common.out, "fit-ocv", &cfg)?;

    let table = fit_ocv_table(&files)?;
    let path = args.common.out.join("ocv.csv");
    table.write_csv(&path)?;
    let populated = table.provenance.iter().filter(|&&c| c > 0).count();
    log::info!(
        "{populated} of {} bins observed from rest segments -> {}",
        table.grid.len(),
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit-dmdc
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct FitDmdcConfig {
    data_dir: Option<PathBuf>,
    file_ids: Vec<String>,
    /// Delay-embedding depth of the voltage state.
    m: usize,
    /// Current-history depth.
    d_u: usize,
    rank_policy: RankPolicy,
    /// Leading fraction of each file used for fitting; None fits on the
    /// whole file.
    train_frac: Option<f64>,
    charge_positive: bool,
}

impl Default for FitDmdcConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            file_ids: Vec::new(),
            m: 16,
            d_u: 8,
            rank_policy: RankPolicy::default(),
            train_frac: Some(0.6),
            charge_positive: false,
        }
    }
}

#[derive(Debug, Args)]
struct FitDmdcArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of data CSVs.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Restrict to these file ids (repeatable).
    #[arg(long = "file-id")]
    file_ids: Vec<String>,
    /// Delay-embedding depth of the voltage state.
    #[arg(long)]
    m: Option<usize>,
    /// Current-history depth.
    #[arg(long)]
    d_u: Option<usize>,
    /// Keep exactly this many singular values.
    #[arg(long, group = "rank")]
    rank_fixed: Option<usize>,
    /// Keep singular values at or above this fraction of the largest.
    #[arg(long, group = "rank")]
    rank_rel_tol: Option<f64>,
    /// Keep the smallest prefix holding this fraction of squared energy.
    #[arg(long, group = "rank")]
    rank_energy: Option<f64>,
    /// Keep every strictly positive singular value.
    #[arg(long, group = "rank")]
    rank_full: bool,
    /// Leading fraction of each file used for fitting.
    #[arg(long, group = "fitspan")]
    train_frac: Option<f64>,
    /// Fit on every snapshot column of the file.
    #[arg(long, group = "fitspan")]
    fit_full_file: bool,
    /// Input files use the charge-positive sign convention; negate on load.
    #[arg(long)]
    charge_positive: bool,
}

fn rank_override(
    fixed: Option<usize>,
    rel_tol: Option<f64>,
    energy: Option<f64>,
    full: bool,
) -> Option<RankPolicy> {
    if let Some(r) = fixed {
        Some(RankPolicy::FixedRank(r))
    } else if let Some(tol) = rel_tol {
        Some(RankPolicy::RelativeTol(tol))
    } else if let Some(f) = energy {
        Some(RankPolicy::EnergyFraction(f))
    } else if full {
        Some(RankPolicy::Full)
    } else {
        None
    }
}

/// Snapshot columns covered by the leading `train_frac` of an `n`-sample file
/// (at least one column, never more than the file holds).
fn fit_columns(n: usize, m: usize, train_frac: Option<f64>, k_total: usize) -> Result<usize> {
    match train_frac {
        Some(frac) => {
            ensure!(
                frac > 0.0 && frac < 1.0,
                "train fraction {frac} outside (0, 1)"
            );
            let n_train = ((frac * n as f64).floor() as usize).max(m + 1).min(n);
            Ok((n_train - m).min(k_total))
        }
        None => Ok(k_total),
    }
}

fn cmd_fit_dmdc(args: FitDmdcArgs) -> Result<()> {
    let mut cfg: FitDmdcConfig = load_config(args.common.config.as_deref())?;
    if args.data.is_some() {
        cfg.data_dir = args.data;
    }
    if !args.file_ids.is_empty() {
        cfg.file_ids = args.file_ids;
    }
    set_if(&mut cfg.m, args.m);
    set_if(&mut cfg.d_u, args.d_u);
    if let Some(policy) =
        rank_override(args.rank_fixed, args.rank_rel_tol, args.rank_energy, args.rank_full)
    {
        cfg.rank_policy = policy;
    }
    if args.fit_full_file {
        cfg.train_frac = None;
    } else if args.train_frac.is_some() {
        cfg.train_frac = args.train_frac;
    }
    cfg.charge_positive |= args.charge_positive;

    let dir = required(&cfg.data_dir, "data")?.to_path_buf();
    let files = load_data(&dir, cfg.charge_positive, &cfg.file_ids)?;
    write_run_config(&args.common.out, "fit-dmdc", &cfg)?;

    for series in &files {
        let full = snapshots(series, cfg.m, cfg.d_u)?;
        let k_fit = fit_columns(series.len(), cfg.m, cfg.train_frac, full.k)?;
        let model = dmdc::fit(&full.first_columns(k_fit), cfg.rank_policy)?;
        let path = args.common.out.join(format!("dmdc_{}.ckpt", series.file_id));
        model.save(&path)?;
        log::info!(
            "{}: fit {} columns, rank {} of {} singular values, residual {:.3e} -> {}",
            series.file_id,
            k_fit,
            model.rank_r,
            model.singular_values.len(),
            model.fit_residual_rss,
            path.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
enum SweepOver {
    /// Voltage delay-embedding depth m.
    M,
    /// Current-history depth d_u.
    #[value(name = "d-u")]
    DU,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SweepCmdConfig {
    data_dir: Option<PathBuf>,
    /// File to sweep on; may be omitted when the directory holds one file.
    file_id: Option<String>,
    over: SweepOver,
    lo: usize,
    hi: usize,
    /// Fixed m while sweeping d_u.
    m: usize,
    /// Fixed d_u while sweeping m.
    d_u: usize,
    train_frac: f64,
    rank_policy: RankPolicy,
    charge_positive: bool,
}

impl Default for SweepCmdConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            file_id: None,
            over: SweepOver::DU,
            lo: 1,
            hi: 12,
            m: 16,
            d_u: 1,
            train_frac: 0.6,
            rank_policy: RankPolicy::default(),
            charge_positive: false,
        }
    }
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of data CSVs.
    #[arg(long)]
    data: Option<PathBuf>,
    /// File to sweep on.
    #[arg(long)]
    file_id: Option<String>,
    /// Which embedding dimension to sweep.
    #[arg(long, value_enum)]
    over: Option<SweepOver>,
    /// First grid value.
    #[arg(long)]
    lo: Option<usize>,
    /// Last grid value (inclusive).
    #[arg(long)]
    hi: Option<usize>,
    /// Fixed m while sweeping d_u.
    #[arg(long)]
    m: Option<usize>,
    /// Fixed d_u while sweeping m.
    #[arg(long)]
    d_u: Option<usize>,
    /// Leading fraction of the file used for fitting.
    #[arg(long)]
    train_frac: Option<f64>,
    /// Keep exactly this many singular values.
    #[arg(long, group = "rank")]
    rank_fixed: Option<usize>,
    /// Keep singular values at or above this fraction of the largest.
    #[arg(long, group = "rank")]
    rank_rel_tol: Option<f64>,
    /// Keep the smallest prefix holding this fraction of squared energy.
    #[arg(long, group = "rank")]
    rank_energy: Option<f64>,
    /// Keep every strictly positive singular value.
    #[arg(long, group = "rank")]
    rank_full: bool,
    /// Input files use the charge-positive sign convention; negate on load.
    #[arg(long)]
    charge_positive: bool,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut cfg: SweepCmdConfig = load_config(args.common.config.as_deref())?;
    if args.data.is_some() {
        cfg.data_dir = args.data;
    }
    if args.file_id.is_some() {
        cfg.file_id = args.file_id;
    }
    set_if(&mut cfg.over, args.over);
    set_if(&mut cfg.lo, args.lo);
    set_if(&mut cfg.hi, args.hi);
    set_if(&mut cfg.m, args.m);
    set_if(&mut cfg.d_u, args.d_u);
    set_if(&mut cfg.train_frac, args.train_frac);
    if let Some(policy) =
        rank_override(args.rank_fixed, args.rank_rel_tol, args.rank_energy, args.rank_full)
    {
        cfg.rank_policy = policy;
    }
    cfg.charge_positive |= args.charge_positive;
    ensure!(
        cfg.lo >= 1 && cfg.lo <= cfg.hi,
        "sweep range [{}, {}] is empty or starts below 1",
        cfg.lo,
        cfg.hi
    );

    let dir = required(&cfg.data_dir, "data")?.to_path_buf();
    let files = load_data(&dir, cfg.charge_positive, &[])?;
    let series = match &cfg.file_id {
        Some(id) => files
            .iter()
            .find(|s| &s.file_id == id)
            .with_context(|| format!("file id `{id}` not found under {}", dir.display()))?,
        None => {
            ensure!(
                files.len() == 1,
                "{} holds {} files; pass --file-id to pick one",
                dir.display(),
                files.len()
            );
            &files[0]
        }
    };
    write_run_config(&args.common.out, "sweep", &cfg)?;

    let sweep_cfg = SweepConfig {
        train_frac: cfg.train_frac,
        rank_policy: cfg.rank_policy,
    };
    let (label, result) = match cfg.over {
        SweepOver::M => (
            "m",
            sweep_output_embedding(series, cfg.lo..=cfg.hi, cfg.d_u, &sweep_cfg)?,
        ),
        SweepOver::DU => (
            "d_u",
            sweep_input_delay(series, cfg.m, cfg.lo..=cfg.hi, &sweep_cfg)?,
        ),
    };
    let csv_path = args.common.out.join("sweep.csv");
    result.write_csv(&csv_path)?;
    fs::write(
        args.common.out.join("sweep.json"),
        serde_json::to_string_pretty(&result).expect("sweep serializes"),
    )
    .context("writing sweep.json")?;
    log::info!(
        "swept {label} over {}..={} on `{}`: best {label} = {} -> {}",
        cfg.lo,
        cfg.hi,
        series.file_id,
        result.best_param,
        csv_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// modes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct ModesConfig {
    models: Vec<PathBuf>,
    /// Cycle label per model; defaults to 0, 1, … when empty.
    cycles: Vec<u32>,
}

#[derive(Debug, Args)]
struct ModesArgs {
    #[command(flatten)]
    common: Common,
    /// Fitted linear model checkpoint (repeatable, in cycle order).
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    /// Cycle label for each --model (repeatable, same order).
    #[arg(long = "cycle")]
    cycles: Vec<u32>,
}

fn cmd_modes(args: ModesArgs) -> Result<()> {
    let mut cfg: ModesConfig = load_config(args.common.config.as_deref())?;
    if !args.models.is_empty() {
        cfg.models = args.models;
    }
    if !args.cycles.is_empty() {
        cfg.cycles = args.cycles;
    }
    ensure!(!cfg.models.is_empty(), "pass at least one --model checkpoint");
    if cfg.cycles.is_empty() {
        cfg.cycles = (0..cfg.models.len() as u32).collect();
    }
    ensure!(
        cfg.cycles.len() == cfg.models.len(),
        "{} cycle labels for {} models",
        cfg.cycles.len(),
        cfg.models.len()
    );
    write_run_config(&args.common.out, "modes", &cfg)?;

    let mut out = String::from("cycle,mode_index,magnitude,eig_re,eig_im\n");
    for (path, &cycle) in cfg.models.iter().zip(&cfg.cycles) {
        let model = DmdcModel::load(path)
            .with_context(|| format!("loading model {}", path.display()))?;
        let spectrum = dmdc::modes(&model)?;
        let mut eigs = spectrum.eigenvalues.clone();
        eigs.sort_by(|a, b| b.norm().partial_cmp(&a.norm()).expect("finite magnitudes"));
        for (idx, z) in eigs.iter().enumerate() {
            out.push_str(&format!("{cycle},{idx},{},{},{}\n", z.norm(), z.re, z.im));
        }
        let top: Vec<String> = eigs.iter().take(3).map(|z| format!("{:.6}", z.norm())).collect();
        log::info!("cycle {cycle}: {} modes, top magnitudes [{}]", eigs.len(), top.join(", "));
    }
    let path = args.common.out.join("modes.csv");
    fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?;
    log::info!("mode spectra -> {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-tst
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainTstConfig {
    data_dir: Option<PathBuf>,
    ocv_path: Option<PathBuf>,
    model: TstConfig,
    opt: OptConfig,
    /// Files with cycle_index above this threshold are held out as test files.
    test_cycle_threshold: u32,
    charge_positive: bool,
}

impl Default for TrainTstConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            ocv_path: None,
            model: TstConfig::default(),
            opt: OptConfig::default(),
            test_cycle_threshold: 100,
            charge_positive: false,
        }
    }
}

#[derive(Debug, Args)]
struct TrainTstArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of data CSVs.
    #[arg(long)]
    data: Option<PathBuf>,
    /// OCV table CSV from `fit-ocv`.
    #[arg(long)]
    ocv: Option<PathBuf>,
    /// Start from the publication-scale architecture instead of the desk-scale
    /// default, then apply per-field overrides.
    #[arg(long)]
    publication_scale: bool,

    // Architecture fields.
    #[arg(long)]
    context_len: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    patch_len: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,

    // Optimizer fields.
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stop after this many epochs without validation improvement.
    #[arg(long, group = "stop")]
    patience: Option<usize>,
    /// Disable early stopping; always run the full epoch schedule.
    #[arg(long, group = "stop")]
    no_early_stop: bool,

    /// Files with cycle_index above this threshold are held out as test files.
    #[arg(long)]
    test_cycle_threshold: Option<u32>,
    /// Input files use the charge-positive sign convention; negate on load.
    #[arg(long)]
    charge_positive: bool,
}

fn cmd_train_tst(args: TrainTstArgs) -> Result<()> {
    let mut cfg: TrainTstConfig = load_config(args.common.config.as_deref())?;
    if args.data.is_some() {
        cfg.data_dir = args.data;
    }
    if args.ocv.is_some() {
        cfg.ocv_path = args.ocv;
    }
    if args.publication_scale {
        cfg.model = TstConfig::publication_scale();
    }
    set_if(&mut cfg.model.context_len, args.context_len);
    set_if(&mut cfg.model.horizon, args.horizon);
    set_if(&mut cfg.model.patch_len, args.patch_len);
    set_if(&mut cfg.model.d_model, args.d_model);
    set_if(&mut cfg.model.heads, args.heads);
    set_if(&mut cfg.model.layers, args.layers);
    set_if(&mut cfg.model.d_ff, args.d_ff);
    set_if(&mut cfg.model.dropout, args.dropout);
    set_if(&mut cfg.opt.lr_max, args.lr_max);
    set_if(&mut cfg.opt.lr_min, args.lr_min);
    set_if(&mut cfg.opt.weight_decay, args.weight_decay);
    set_if(&mut cfg.opt.clip_norm, args.clip_norm);
    set_if(&mut cfg.opt.max_epochs, args.max_epochs);
    set_if(&mut cfg.opt.batch_size, args.batch_size);
    if args.no_early_stop {
        cfg.opt.patience = None;
    } else if args.patience.is_some() {
        cfg.opt.patience = args.patience;
    }
    set_if(&mut cfg.opt.seed, args.common.seed);
    set_if(&mut cfg.test_cycle_threshold, args.test_cycle_threshold);
    cfg.charge_positive |= args.charge_positive;

    let dir = required(&cfg.data_dir, "data")?.to_path_buf();
    let ocv_path = required(&cfg.ocv_path, "ocv")?.to_path_buf();
    let files = load_data(&dir, cfg.charge_positive, &[])?;
    let ocv = OcvTable::read_csv(&ocv_path)
        .with_context(|| format!("reading OCV table {}", ocv_path.display()))?;
    write_run_config(&args.common.out, "train-tst", &cfg)?;

    let metas: Vec<(String, u32)> = files
        .iter()
        .map(|s| (s.file_id.clone(), s.cycle_index))
        .collect();
    let split = partition(&metas, cfg.test_cycle_threshold, cfg.opt.seed)?;
    fs::write(
        args.common.out.join("split.json"),
        serde_json::to_string_pretty(&split).expect("split serializes"),
    )
    .context("writing split.json")?;
    log::info!(
        "split: {} train, {} val, {} test files",
        split.train_files.len(),
        split.val_files.len(),
        split.test_files.len()
    );

    let pick = |ids: &[String]| -> Vec<SampleSeries> {
        files
            .iter()
            .filter(|s| ids.contains(&s.file_id))
            .cloned()
            .collect()
    };
    let train_series = pick(&split.train_files);
    let val_series = pick(&split.val_files);
    let stats = dataio::fit_norm_stats(&train_series, &ocv)?;

    let collect_windows = |series_list: &[SampleSeries]| -> Result<Vec<WindowSample>> {
        let mut windows = Vec::new();
        for series in series_list {
            let vdyn = dynamic_voltage(series, &ocv)?;
            windows.extend(make_windows(&vdyn, &series.i, &stats, &cfg.model));
        }
        Ok(windows)
    };
    let train_windows = collect_windows(&train_series)?;
    let val_windows = collect_windows(&val_series)?;
    log::info!(
        "{} training and {} validation windows",
        train_windows.len(),
        val_windows.len()
    );

    let model = TstModel::init(cfg.model, cfg.opt.seed)?;
    log::info!("model has {} parameters", model.param_count());
    let outcome = train(model, &train_windows, &val_windows, &cfg.opt)?;

    write_history_csv(&outcome.history, &args.common.out.join("history.csv"))?;
    let extra = json!({
        "norm_stats": stats,
        "split": split,
        "test_cycle_threshold": cfg.test_cycle_threshold,
        "pretrain_val_loss": outcome.pretrain_val_loss,
        "best_val_loss": outcome.best_val_loss,
        "best_epoch": outcome.best_epoch,
        "stopped_early": outcome.stopped_early,
        "diverged": outcome.diverged,
    });
    let ckpt_path = args.common.out.join("tst.ckpt");
    outcome.model.save(&ckpt_path, &extra)?;
    if outcome.diverged {
        log::warn!("training diverged; checkpoint holds the best parameters seen before that");
    }
    log::info!(
        "{} epochs, val loss {:.6e} -> {:.6e} (best at epoch {:?}){} -> {}",
        outcome.history.len(),
        outcome.pretrain_val_loss,
        outcome.best_val_loss,
        outcome.best_epoch,
        if outcome.stopped_early { ", stopped early" } else { "" },
        ckpt_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// rollout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct RolloutCmdConfig {
    model_path: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    file_ids: Vec<String>,
    /// OCV table; required for transformer checkpoints.
    ocv_path: Option<PathBuf>,
    /// Linear models only: score after this leading fraction instead of right
    /// after the seed window.
    train_frac: Option<f64>,
    charge_positive: bool,
}

/// Sidecar pairing a rollout CSV with what `eval` needs to score it.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RolloutMeta {
    file_id: String,
    cycle_index: u32,
    model_tag: ModelTag,
    eval_start_idx: usize,
    chunk_lens: Vec<usize>,
}

#[derive(Debug, Args)]
struct RolloutArgs {
    #[command(flatten)]
    common: Common,
    /// Fitted model checkpoint (linear or transformer; detected from the file).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Directory of data CSVs.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Restrict to these file ids (repeatable).
    #[arg(long = "file-id")]
    file_ids: Vec<String>,
    /// OCV table CSV from `fit-ocv` (transformer checkpoints only).
    #[arg(long)]
    ocv: Option<PathBuf>,
    /// Linear models only: score after this leading fraction of each file.
    #[arg(long)]
    train_frac: Option<f64>,
    /// Input files use the charge-positive sign convention; negate on load.
    #[arg(long)]
    charge_positive: bool,
}

fn cmd_rollout(args: RolloutArgs) -> Result<()> {
    let mut cfg: RolloutCmdConfig = load_config(args.common.config.as_deref())?;
    if args.model.is_some() {
        cfg.model_path = args.model;
    }
    if args.data.is_some() {
        cfg.data_dir = args.data;
    }
    if !args.file_ids.is_empty() {
        cfg.file_ids = args.file_ids;
    }
    if args.ocv.is_some() {
        cfg.ocv_path = args.ocv;
    }
    if args.train_frac.is_some() {
        cfg.train_frac = args.train_frac;
    }
    cfg.charge_positive |= args.charge_positive;

    let model_path = required(&cfg.model_path, "model")?.to_path_buf();
    let dir = required(&cfg.data_dir, "data")?.to_path_buf();
    let files = load_data(&dir, cfg.charge_positive, &cfg.file_ids)?;
    write_run_config(&args.common.out, "rollout", &cfg)?;

    let header = Checkpoint::read(&model_path)
        .with_context(|| format!("reading checkpoint {}", model_path.display()))?
        .header;
    let kind = header["kind"].as_str().unwrap_or("").to_string();
    match kind.as_str() {
        "dmdc" => {
            let model = DmdcModel::load(&model_path)?;
            for series in &files {
                let result = dmdc_rollout_eval(series, &model, cfg.train_frac)?;
                write_rollout_artifacts(&args.common.out, series, &result)?;
            }
        }
        "tst" => {
            let (model, extra) = TstModel::load(&model_path)?;
            let stats: NormStats = serde_json::from_value(extra["norm_stats"].clone())
                .context("checkpoint lacks normalization stats in its header")?;
            let ocv_path = required(&cfg.ocv_path, "ocv")?.to_path_buf();
            let ocv = OcvTable::read_csv(&ocv_path)
                .with_context(|| format!("reading OCV table {}", ocv_path.display()))?;
            for series in &files {
                let result = chunked_rollout(series, &ocv, &model, &stats)?;
                write_rollout_artifacts(&args.common.out, series, &result)?;
            }
        }
        other => bail!(
            "{}: unrecognized checkpoint kind `{other}`",
            model_path.display()
        ),
    }
    Ok(())
}

fn write_rollout_artifacts(
    out: &Path,
    series: &SampleSeries,
    result: &RolloutResult,
) -> Result<()> {
    // The model tag is part of the name so both families can roll out the
    // same file into one directory without clobbering each other.
    let csv_path = out.join(format!("{}.{}.rollout.csv", series.file_id, result.model_tag));
    write_rollout_csv(series, result, &csv_path)?;
    let meta = RolloutMeta {
        file_id: series.file_id.clone(),
        cycle_index: series.cycle_index,
        model_tag: result.model_tag,
        eval_start_idx: result.eval_start_idx,
        chunk_lens: result.chunk_lens.clone(),
    };
    let meta_path = out.join(format!("{}.{}.rollout.json", series.file_id, result.model_tag));
    fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )
    .with_context(|| format!("writing {}", meta_path.display()))?;
    log::info!(
        "{}: {} of {} samples predicted -> {}",
        series.file_id,
        result.eval_region_len(),
        series.len(),
        csv_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct EvalCmdConfig {
    /// Directory holding `*.rollout.csv` + `*.rollout.json` pairs.
    rollouts_dir: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    charge_positive: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding rollout artifacts.
    #[arg(long)]
    rollouts: Option<PathBuf>,
    /// Directory of the source data CSVs.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Input files use the charge-positive sign convention; negate on load.
    #[arg(long)]
    charge_positive: bool,
}

const ROLLOUT_CSV_HEADER: &str = "time_s,v_measured,v_reconstructed,v_ocv,v_dyn_pred";

/// Rebuild a rollout from its CSV + JSON sidecar pair.
fn read_rollout(dir: &Path, meta: &RolloutMeta) -> Result<RolloutResult> {
    let csv_path = dir.join(format!("{}.{}.rollout.csv", meta.file_id, meta.model_tag));
    let text = fs::read_to_string(&csv_path)
        .with_context(|| format!("reading {}", csv_path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    ensure!(
        header == ROLLOUT_CSV_HEADER,
        "{}: bad header `{header}`",
        csv_path.display()
    );
    let mut reconstructed_v = Vec::new();
    let mut v_ocv: Vec<f64> = Vec::new();
    let mut v_dyn: Vec<f64> = Vec::new();
    let mut has_physics = true;
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        ensure!(
            fields.len() == 5,
            "{}: row {}: expected 5 fields, found {}",
            csv_path.display(),
            row + 2,
            fields.len()
        );
        let parse = |field: &str, name: &str| -> Result<f64> {
            field.parse::<f64>().with_context(|| {
                format!("{}: row {}: bad {name} `{field}`", csv_path.display(), row + 2)
            })
        };
        reconstructed_v.push(parse(fields[2], "v_reconstructed")?);
        if fields[3].is_empty() || fields[4].is_empty() {
            has_physics = false;
        } else if has_physics {
            v_ocv.push(parse(fields[3], "v_ocv")?);
            v_dyn.push(parse(fields[4], "v_dyn_pred")?);
        }
    }
    Ok(RolloutResult {
        model_tag: meta.model_tag,
        reconstructed_v,
        eval_start_idx: meta.eval_start_idx,
        chunk_lens: meta.chunk_lens.clone(),
        v_ocv: has_physics.then_some(v_ocv),
        v_dyn: has_physics.then_some(v_dyn),
    })
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg: EvalCmdConfig = load_config(args.common.config.as_deref())?;
    if args.rollouts.is_some() {
        cfg.rollouts_dir = args.rollouts;
    }
    if args.data.is_some() {
        cfg.data_dir = args.data;
    }
    cfg.charge_positive |= args.charge_positive;

    let rollouts_dir = required(&cfg.rollouts_dir, "rollouts")?.to_path_buf();
    let data_dir = required(&cfg.data_dir, "data")?.to_path_buf();
    let files = load_data(&data_dir, cfg.charge_positive, &[])?;
    write_run_config(&args.common.out, "eval", &cfg)?;

    let mut meta_paths: Vec<PathBuf> = fs::read_dir(&rollouts_dir)
        .with_context(|| format!("reading {}", rollouts_dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".rollout.json"))
        })
        .collect();
    meta_paths.sort();
    ensure!(
        !meta_paths.is_empty(),
        "no *.rollout.json artifacts under {}",
        rollouts_dir.display()
    );

    // Group (rollout, source series) pairs per model family, keeping the two
    // vectors index-aligned as the scorer requires.
    let mut groups: std::collections::BTreeMap<String, (Vec<RolloutResult>, Vec<SampleSeries>)> =
        std::collections::BTreeMap::new();
    for meta_path in &meta_paths {
        let text = fs::read_to_string(meta_path)
            .with_context(|| format!("reading {}", meta_path.display()))?;
        let meta: RolloutMeta = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", meta_path.display()))?;
        let series = files
            .iter()
            .find(|s| s.file_id == meta.file_id)
            .with_context(|| {
                format!(
                    "rollout `{}` has no matching data file under {}",
                    meta.file_id,
                    data_dir.display()
                )
            })?;
        let result = read_rollout(&rollouts_dir, &meta)?;
        let slot = groups.entry(meta.model_tag.to_string()).or_default();
        slot.0.push(result);
        slot.1.push(series.clone());
    }

    for (tag, (results, series_list)) in &groups {
        let report = evaluate(results, series_list)?;
        let csv_path = args.common.out.join(format!("eval_{tag}.csv"));
        report.write_csv(&csv_path)?;
        fs::write(
            args.common.out.join(format!("eval_{tag}.json")),
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )
        .context("writing evaluation report")?;
        log::info!(
            "{tag}: aggregate RMSE {:.6e} V over {} samples in {} file(s) -> {}",
            report.aggregate_rmse,
            report.aggregate_len,
            report.per_file.len(),
            csv_path.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct ReportConfig {
    /// Evaluation report JSON files, in column order.
    eval_paths: Vec<PathBuf>,
    /// Scanned for `eval_*.json` when `eval_paths` is empty.
    evals_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Evaluation report JSON (repeatable, in column order).
    #[arg(long = "eval")]
    evals: Vec<PathBuf>,
    /// Directory scanned for eval_*.json instead of explicit --eval flags.
    #[arg(long)]
    evals_dir: Option<PathBuf>,
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut cfg: ReportConfig = load_config(args.common.config.as_deref())?;
    if !args.evals.is_empty() {
        cfg.eval_paths = args.evals;
    }
    if args.evals_dir.is_some() {
        cfg.evals_dir = args.evals_dir;
    }
    if cfg.eval_paths.is_empty() {
        let dir = required(&cfg.evals_dir, "evals-dir")?;
        let mut found: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("eval_") && n.ends_with(".json"))
            })
            .collect();
        found.sort();
        cfg.eval_paths = found;
    }
    ensure!(
        !cfg.eval_paths.is_empty(),
        "no evaluation reports given (pass --eval or --evals-dir)"
    );
    write_run_config(&args.common.out, "report", &cfg)?;

    let mut reports = Vec::new();
    for path in &cfg.eval_paths {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report: EvalReport =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        reports.push(report);
    }
    let refs: Vec<&EvalReport> = reports.iter().collect();
    let table = format_comparison_table(&refs);
    print!("{table}");
    let path = args.common.out.join("report.txt");
    fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    log::info!("comparison table -> {}", path.display());
    Ok(())
}

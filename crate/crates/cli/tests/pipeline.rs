//! End-to-end tests of the command-line pipeline: every stage is exercised as
//! a real subprocess against a fresh temporary directory, exactly the way a
//! user would chain the subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use pulse_sysid::dmdc::SweepResult;
use pulse_sysid::forecast::EvalReport;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pulse-sysid"));
    cmd.env("RUST_BACKTRACE", "0");
    cmd
}

/// Run to completion, assert exit code 0, return combined output.
fn run_ok(cmd: &mut Command) -> String {
    let output = cmd.output().expect("spawning the pipeline binary");
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(
        output.status.success(),
        "command {:?} failed:\n{text}",
        cmd.get_args().collect::<Vec<_>>()
    );
    text
}

/// Run to completion, assert a nonzero exit, return stderr.
fn run_err(cmd: &mut Command) -> String {
    let output = cmd.output().expect("spawning the pipeline binary");
    assert!(
        !output.status.success(),
        "command {:?} unexpectedly succeeded",
        cmd.get_args().collect::<Vec<_>>()
    );
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn path_arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Noiseless affine-OCV synthesis rig: deterministic, physically tame, and
/// fast (two pulse repeats per file).
fn synth_rig(out: &Path, cycles: &str, seed: u64) {
    run_ok(bin().args([
        "synth",
        "--out",
        path_arg(out),
        "--seed",
        &seed.to_string(),
        "--cycles",
        cycles,
        "--repeats",
        "2",
        "--noise-std-v",
        "0",
        "--ocv-v-empty",
        "3.0",
        "--ocv-v-full",
        "4.2",
        "--deep-cutoff-v",
        "3.0",
        "--r-growth-per-cycle",
        "0.001",
        "--capacity-fade-per-cycle",
        "0.0005",
    ]));
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

fn parse_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&read(path)).unwrap_or_else(|e| panic!("parsing {}: {e}", path.display()))
}

#[test]
fn full_pipeline_runs_from_an_empty_directory() {
    let root = tempfile::tempdir().unwrap();
    let dir = |name: &str| -> PathBuf { root.path().join(name) };
    let data = dir("data");
    let ocv_dir = dir("ocv");
    let dmdc_dir = dir("dmdc");
    let sweep_dir = dir("sweep");
    let modes_dir = dir("modes");
    let tst_dir = dir("tst");
    let roll_dir = dir("rollouts");
    let eval_dir = dir("eval");
    let report_dir = dir("report");

    // synth: three cycles, one file each, plus the resolved run config.
    synth_rig(&data, "0,20,120", 7);
    for cycle in ["000", "020", "120"] {
        assert!(data.join(format!("cycle_{cycle}.csv")).is_file());
        assert!(data.join(format!("cycle_{cycle}.meta.json")).is_file());
    }
    let run_cfg = parse_json(&data.join("run_config.json"));
    assert_eq!(run_cfg["subcommand"], "synth");
    assert_eq!(run_cfg["config"]["cycles"], serde_json::json!([0, 20, 120]));

    // fit-ocv: 128-bin table.
    run_ok(bin().args([
        "fit-ocv",
        "--data",
        path_arg(&data),
        "--out",
        path_arg(&ocv_dir),
    ]));
    let ocv_csv = ocv_dir.join("ocv.csv");
    let ocv_lines: Vec<String> = read(&ocv_csv).lines().map(String::from).collect();
    assert_eq!(ocv_lines[0], "soc,ocv_v,sample_count");
    assert_eq!(ocv_lines.len(), 1 + 128);

    // fit-dmdc on the aged test file.
    run_ok(bin().args([
        "fit-dmdc",
        "--data",
        path_arg(&data),
        "--file-id",
        "cycle_120",
        "--m",
        "16",
        "--d-u",
        "8",
        "--rank-fixed",
        "14",
        "--train-frac",
        "0.6",
        "--out",
        path_arg(&dmdc_dir),
    ]));
    let dmdc_ckpt = dmdc_dir.join("dmdc_cycle_120.ckpt");
    assert!(dmdc_ckpt.is_file());

    // sweep d_u over a small grid.
    run_ok(bin().args([
        "sweep",
        "--data",
        path_arg(&data),
        "--file-id",
        "cycle_000",
        "--over",
        "d-u",
        "--lo",
        "1",
        "--hi",
        "4",
        "--m",
        "12",
        "--rank-rel-tol",
        "1e-6",
        "--out",
        path_arg(&sweep_dir),
    ]));
    let sweep_lines: Vec<String> = read(&sweep_dir.join("sweep.csv"))
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(sweep_lines[0], "param,rss,rmse");
    assert_eq!(sweep_lines.len(), 1 + 4);
    let sweep: SweepResult =
        serde_json::from_str(&read(&sweep_dir.join("sweep.json"))).expect("sweep.json parses");
    assert!((1..=4).contains(&sweep.best_param));

    // modes: one row per eigenvalue, labeled with the given cycle.
    run_ok(bin().args([
        "modes",
        "--model",
        path_arg(&dmdc_ckpt),
        "--cycle",
        "120",
        "--out",
        path_arg(&modes_dir),
    ]));
    let modes_lines: Vec<String> = read(&modes_dir.join("modes.csv"))
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(modes_lines[0], "cycle,mode_index,magnitude,eig_re,eig_im");
    assert_eq!(modes_lines.len(), 1 + 16, "16 eigenvalues for m = 16");
    let magnitudes: Vec<f64> = modes_lines[1..]
        .iter()
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[0], "120");
            fields[2].parse::<f64>().expect("finite magnitude")
        })
        .collect();
    assert!(
        magnitudes.windows(2).all(|w| w[0] >= w[1]),
        "magnitudes sorted descending: {magnitudes:?}"
    );

    // train-tst at a tiny scale; cycle 120 is held out as the test file.
    run_ok(bin().args([
        "train-tst",
        "--data",
        path_arg(&data),
        "--ocv",
        path_arg(&ocv_csv),
        "--seed",
        "1",
        "--context-len",
        "32",
        "--horizon",
        "8",
        "--patch-len",
        "8",
        "--d-model",
        "8",
        "--heads",
        "2",
        "--layers",
        "1",
        "--d-ff",
        "16",
        "--dropout",
        "0.0",
        "--max-epochs",
        "2",
        "--batch-size",
        "256",
        "--test-cycle-threshold",
        "100",
        "--out",
        path_arg(&tst_dir),
    ]));
    let tst_ckpt = tst_dir.join("tst.ckpt");
    assert!(tst_ckpt.is_file());
    let history: Vec<String> = read(&tst_dir.join("history.csv"))
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(history[0], "epoch,train_loss,val_loss,lr");
    assert_eq!(history.len(), 1 + 2, "one row per epoch");
    let split = parse_json(&tst_dir.join("split.json"));
    assert_eq!(split["test_files"], serde_json::json!(["cycle_120"]));

    // rollout: both model families on the held-out file, same directory.
    run_ok(bin().args([
        "rollout",
        "--model",
        path_arg(&tst_ckpt),
        "--data",
        path_arg(&data),
        "--file-id",
        "cycle_120",
        "--ocv",
        path_arg(&ocv_csv),
        "--out",
        path_arg(&roll_dir),
    ]));
    run_ok(bin().args([
        "rollout",
        "--model",
        path_arg(&dmdc_ckpt),
        "--data",
        path_arg(&data),
        "--file-id",
        "cycle_120",
        "--train-frac",
        "0.6",
        "--out",
        path_arg(&roll_dir),
    ]));
    let tst_meta = parse_json(&roll_dir.join("cycle_120.tst.rollout.json"));
    let chunk_sum: u64 = tst_meta["chunk_lens"]
        .as_array()
        .expect("chunk lengths recorded")
        .iter()
        .map(|v| v.as_u64().unwrap())
        .sum();
    let eval_start = tst_meta["eval_start_idx"].as_u64().unwrap();
    let n_rows = read(&roll_dir.join("cycle_120.tst.rollout.csv")).lines().count() as u64 - 1;
    assert_eq!(chunk_sum + eval_start, n_rows, "chunks tile the evaluation region");
    assert!(roll_dir.join("cycle_120.dmdc.rollout.csv").is_file());

    // eval: one report per model family.
    run_ok(bin().args([
        "eval",
        "--rollouts",
        path_arg(&roll_dir),
        "--data",
        path_arg(&data),
        "--out",
        path_arg(&eval_dir),
    ]));
    for tag in ["dmdc", "tst"] {
        let report: EvalReport =
            serde_json::from_str(&read(&eval_dir.join(format!("eval_{tag}.json"))))
                .expect("evaluation report parses");
        assert_eq!(report.per_file.len(), 1);
        assert_eq!(report.per_file[0].file_id, "cycle_120");
        let row = &report.per_file[0];
        let expect_rss = row.rmse * row.rmse * row.eval_region_len as f64;
        assert!(
            (expect_rss - row.rss).abs() <= 1e-10 * row.rss.max(1.0),
            "rmse²·N = rss on every row"
        );
        let csv = read(&eval_dir.join(format!("eval_{tag}.csv")));
        assert!(csv.starts_with("file_id,cycle_index,model,rss,rmse,eval_region_len"));
    }

    // report: one RSS/RMSE column pair per model, one row per cycle.
    let stdout = run_ok(bin().args([
        "report",
        "--evals-dir",
        path_arg(&eval_dir),
        "--out",
        path_arg(&report_dir),
    ]));
    let table = read(&report_dir.join("report.txt"));
    for needle in ["dmdc RSS", "dmdc RMSE", "tst RSS", "tst RMSE"] {
        assert!(table.contains(needle), "table lacks `{needle}`:\n{table}");
    }
    assert!(table.lines().any(|l| l.starts_with("120")));
    assert!(table.lines().any(|l| l.starts_with("all")));
    assert!(stdout.contains("dmdc RSS"), "table printed to stdout");
}

#[test]
fn synth_rerun_is_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    synth_rig(&a, "0,20", 11);
    synth_rig(&b, "0,20", 11);
    for name in ["cycle_000.csv", "cycle_020.csv", "cycle_000.meta.json"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn noiseless_synthesis_is_seed_independent() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    synth_rig(&a, "0", 1);
    synth_rig(&b, "0", 2);
    assert_eq!(
        fs::read(a.join("cycle_000.csv")).unwrap(),
        fs::read(b.join("cycle_000.csv")).unwrap(),
        "zero noise must make the seed irrelevant"
    );
}

#[test]
fn repeats_control_the_number_of_pulse_groups() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    // Distinct deep-discharge current so 10 A onsets mark exactly the
    // discharge pulses, one per repeat.
    run_ok(bin().args([
        "synth",
        "--out",
        path_arg(&data),
        "--cycles",
        "0",
        "--repeats",
        "10",
        "--noise-std-v",
        "0",
        "--deep-discharge-a",
        "8",
        "--ocv-v-empty",
        "3.0",
        "--ocv-v-full",
        "4.2",
        "--deep-cutoff-v",
        "3.0",
    ]));
    let text = read(&data.join("cycle_000.csv"));
    let currents: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let onsets = usize::from(currents[0] == 10.0)
        + currents
            .windows(2)
            .filter(|w| w[0] != 10.0 && w[1] == 10.0)
            .count();
    assert_eq!(onsets, 10, "one discharge-pulse onset per repeat");
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let root = tempfile::tempdir().unwrap();
    let cfg_path = root.path().join("synth.json");
    fs::write(&cfg_path, r#"{ "cycles": [5], "seed": 9 }"#).unwrap();
    let data = root.path().join("data");
    run_ok(bin().args([
        "synth",
        "--config",
        path_arg(&cfg_path),
        "--out",
        path_arg(&data),
        "--repeats",
        "1",
        "--noise-std-v",
        "0",
    ]));
    assert!(data.join("cycle_005.csv").is_file(), "cycle list from config file");
    let run_cfg = parse_json(&data.join("run_config.json"));
    assert_eq!(run_cfg["config"]["cycles"], serde_json::json!([5]));
    assert_eq!(run_cfg["config"]["seed"], serde_json::json!(9));
    assert_eq!(
        run_cfg["config"]["protocol"]["repeats"],
        serde_json::json!(1),
        "flag overrides the protocol default"
    );
}

#[test]
fn charge_positive_flag_flips_the_sign_convention() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth_rig(&data, "0", 3);

    // Re-write the file under the opposite sign convention.
    let flipped_dir = root.path().join("flipped");
    fs::create_dir_all(&flipped_dir).unwrap();
    let mut flipped = String::from("time_s,current_a,voltage_v\n");
    for line in read(&data.join("cycle_000.csv")).lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let current: f64 = fields[1].parse().unwrap();
        let negated = if current == 0.0 {
            fields[1].to_string()
        } else if let Some(stripped) = fields[1].strip_prefix('-') {
            stripped.to_string()
        } else {
            format!("-{}", fields[1])
        };
        flipped.push_str(&format!("{},{},{}\n", fields[0], negated, fields[2]));
    }
    fs::write(flipped_dir.join("cycle_000.csv"), flipped).unwrap();
    fs::copy(
        data.join("cycle_000.meta.json"),
        flipped_dir.join("cycle_000.meta.json"),
    )
    .unwrap();

    let ocv_a = root.path().join("ocv_a");
    let ocv_b = root.path().join("ocv_b");
    run_ok(bin().args([
        "fit-ocv",
        "--data",
        path_arg(&data),
        "--out",
        path_arg(&ocv_a),
    ]));
    run_ok(bin().args([
        "fit-ocv",
        "--data",
        path_arg(&flipped_dir),
        "--charge-positive",
        "--out",
        path_arg(&ocv_b),
    ]));
    assert_eq!(
        read(&ocv_a.join("ocv.csv")),
        read(&ocv_b.join("ocv.csv")),
        "negating a charge-positive file recovers the same table"
    );
}

#[test]
fn thread_cap_env_var_is_honored_and_validated() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let mut cmd = bin();
    cmd.env("PULSE_SYSID_THREADS", "2");
    run_ok(cmd.args([
        "synth",
        "--out",
        path_arg(&data),
        "--cycles",
        "0",
        "--repeats",
        "1",
        "--noise-std-v",
        "0",
        "--ocv-v-empty",
        "3.0",
        "--ocv-v-full",
        "4.2",
        "--deep-cutoff-v",
        "3.0",
    ]));

    let mut bad = bin();
    bad.env("PULSE_SYSID_THREADS", "zero");
    let stderr = run_err(bad.args(["report", "--out", path_arg(root.path())]));
    assert!(
        stderr.contains("PULSE_SYSID_THREADS"),
        "bad thread cap must be named in the error: {stderr}"
    );
}

#[test]
fn missing_inputs_exit_nonzero_with_a_message() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("out");

    let stderr = run_err(bin().args([
        "fit-ocv",
        "--data",
        path_arg(&root.path().join("no_such_dir")),
        "--out",
        path_arg(&out),
    ]));
    assert!(stderr.contains("no_such_dir"), "stderr: {stderr}");

    let stderr = run_err(bin().args(["fit-dmdc", "--out", path_arg(&out)]));
    assert!(stderr.contains("--data"), "stderr: {stderr}");

    let stderr = run_err(bin().args([
        "rollout",
        "--model",
        path_arg(&root.path().join("absent.ckpt")),
        "--data",
        path_arg(&root.path().join("also_absent")),
        "--out",
        path_arg(&out),
    ]));
    assert!(stderr.contains("absent"), "stderr: {stderr}");

    let empty = root.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let stderr = run_err(bin().args([
        "eval",
        "--rollouts",
        path_arg(&empty),
        "--data",
        path_arg(&empty),
        "--out",
        path_arg(&out),
    ]));
    assert!(!stderr.is_empty());
}

#[test]
fn tiny_training_runs_are_bitwise_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth_rig(&data, "0,20", 5);
    let ocv_dir = root.path().join("ocv");
    run_ok(bin().args([
        "fit-ocv",
        "--data",
        path_arg(&data),
        "--out",
        path_arg(&ocv_dir),
    ]));
    let ocv_csv = ocv_dir.join("ocv.csv");

    let train = |out: &Path| {
        run_ok(bin().args([
            "train-tst",
            "--data",
            path_arg(&data),
            "--ocv",
            path_arg(&ocv_csv),
            "--seed",
            "4",
            "--context-len",
            "16",
            "--horizon",
            "8",
            "--patch-len",
            "8",
            "--d-model",
            "8",
            "--heads",
            "2",
            "--layers",
            "1",
            "--d-ff",
            "16",
            "--dropout",
            "0.1",
            "--max-epochs",
            "2",
            "--batch-size",
            "512",
            "--test-cycle-threshold",
            "100",
            "--out",
            path_arg(out),
        ]));
    };
    let a = root.path().join("run_a");
    let b = root.path().join("run_b");
    train(&a);
    train(&b);
    assert_eq!(
        fs::read(a.join("history.csv")).unwrap(),
        fs::read(b.join("history.csv")).unwrap(),
        "training history must be bitwise reproducible"
    );
    assert_eq!(
        fs::read(a.join("tst.ckpt")).unwrap(),
        fs::read(b.join("tst.ckpt")).unwrap(),
        "checkpoints must be bitwise reproducible"
    );
}

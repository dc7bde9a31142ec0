//! End-to-end tests that drive the compiled binary the way a user would:
//! every assertion is on observable outputs (exit codes, files, stdout).

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cliffnet")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel))
        .unwrap_or_else(|e| panic!("reading {rel}: {e}"))
}

fn json(dir: &Path, rel: &str) -> Value {
    serde_json::from_str(&read(dir, rel)).unwrap_or_else(|e| panic!("parsing {rel}: {e}"))
}

fn jsonl(dir: &Path, rel: &str) -> Vec<Value> {
    read(dir, rel).lines().map(|l| serde_json::from_str(l).expect("jsonl row")).collect()
}

/// Loss-relevant fields of a metrics trace; wall-clock is excluded on
/// purpose since only it may differ between identical runs.
fn loss_trace(rows: &[Value]) -> Vec<(u64, u64, String, String)> {
    rows.iter()
        .map(|m| {
            (
                m["epoch"].as_u64().unwrap(),
                m["step"].as_u64().unwrap(),
                m["train_mse"].to_string(),
                m["test_mse"].to_string(),
            )
        })
        .collect()
}

fn gen_regression(dir: &Path, out: &str, seed: &str, n_train: &str, n_test: &str) {
    let args = [
        "gen", "--task", "regression", "--n-train", n_train, "--n-test", n_test, "--seed", seed,
        "--dim", "3", "--out-dir", out,
    ];
    assert_ok(&run_in(dir, &args));
}

fn write_cfg(dir: &Path, name: &str, body: &str) {
    std::fs::write(dir.join(name), body).unwrap();
}

const BASE_CFG: &str = "task = regression\n\
    signature = 3,0,0\n\
    train_csv = data/train.csv\n\
    test_csv = data/test.csv\n\
    epochs = 3\n\
    batch_size = 16\n\
    channels = 4\n\
    depth = 1\n\
    seed = 3\n";

/// Stdout of a train run includes `run_dir = <path>`.
fn run_dir_from(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout);
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("run_dir = "))
        .unwrap_or_else(|| panic!("no run_dir line in {stdout}"))
        .to_string()
}

#[test]
fn gen_is_deterministic_across_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    gen_regression(tmp.path(), "a", "9", "24", "12");
    gen_regression(tmp.path(), "b", "9", "24", "12");
    for f in ["train.csv", "test.csv", "manifest.txt"] {
        assert_eq!(read(tmp.path(), &format!("a/{f}")), read(tmp.path(), &format!("b/{f}")));
    }
    gen_regression(tmp.path(), "c", "10", "24", "12");
    assert_ne!(read(tmp.path(), "a/train.csv"), read(tmp.path(), "c/train.csv"));
}

#[test]
fn gen_manifest_records_the_volume_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let exact = [
        "gen", "--task", "hull", "--n-train", "8", "--n-test", "4", "--dim", "3", "--k", "5",
        "--out-dir", "exact",
    ];
    assert_ok(&run_in(tmp.path(), &exact));
    let manifest = read(tmp.path(), "exact/manifest.txt");
    assert!(manifest.contains("oracle = exact-incremental-hull"), "{manifest}");
    assert!(manifest.contains("label_noise_std_max = 0\n"), "{manifest}");

    let mc = [
        "gen", "--task", "hull", "--n-train", "6", "--n-test", "3", "--dim", "4", "--k", "6",
        "--n-mc", "1000", "--out-dir", "mc",
    ];
    assert_ok(&run_in(tmp.path(), &mc));
    let manifest = read(tmp.path(), "mc/manifest.txt");
    assert!(manifest.contains("oracle = monte-carlo(n_mc=1000)"), "{manifest}");
    assert!(manifest.contains("n_mc = 1000"), "{manifest}");
    let noise = manifest
        .lines()
        .find_map(|l| l.strip_prefix("label_noise_std_max = "))
        .unwrap()
        .parse::<f64>()
        .unwrap();
    assert!(noise > 0.0);
}

#[test]
fn train_writes_a_complete_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    gen_regression(tmp.path(), "data", "7", "48", "24");
    write_cfg(tmp.path(), "run.cfg", BASE_CFG);
    let out = run_in(tmp.path(), &["train", "--config", "run.cfg"]);
    assert_ok(&out);
    let rd = run_dir_from(&out);

    let metrics = jsonl(tmp.path(), &format!("{rd}/metrics.jsonl"));
    assert_eq!(metrics.len(), 4, "epoch 0 echo plus one row per epoch");
    assert_eq!(metrics[0]["epoch"], 0);
    assert_eq!(metrics[3]["epoch"], 3);

    let summary = json(tmp.path(), &format!("{rd}/summary.json"));
    let layer_sum: u64 =
        summary["layers"].as_array().unwrap().iter().map(|l| l["params"].as_u64().unwrap()).sum();
    assert_eq!(summary["param_total"].as_u64().unwrap(), layer_sum);
    assert_eq!(summary["in_channels"], 2);
    assert_eq!(summary["epochs_run"], 3);

    let ckpt = json(tmp.path(), &format!("{rd}/checkpoint.json"));
    assert_eq!(ckpt["format"], 1);
    assert_eq!(ckpt["signature"], "3,0,0");
    assert_eq!(ckpt["epoch"], 3);
    assert!(!ckpt["tensors"].as_array().unwrap().is_empty());

    let manifest = read(tmp.path(), &format!("{rd}/manifest.txt"));
    assert!(manifest.contains("command = train"), "{manifest}");
    assert!(manifest.contains("epochs = 3"), "{manifest}");
}

#[test]
fn identical_config_and_seed_reproduce_the_loss_trace() {
    let tmp = tempfile::tempdir().unwrap();
    gen_regression(tmp.path(), "data", "7", "48", "24");
    write_cfg(tmp.path(), "a.cfg", &format!("{BASE_CFG}out_dir = runs_a\n"));
    write_cfg(tmp.path(), "b.cfg", &format!("{BASE_CFG}out_dir = runs_b\n"));
    let a = run_in(tmp.path(), &["train", "--config", "a.cfg"]);
    let b = run_in(tmp.path(), &["train", "--config", "b.cfg"]);
    assert_ok(&a);
    assert_ok(&b);
    let ta = loss_trace(&jsonl(tmp.path(), &format!("{}/metrics.jsonl", run_dir_from(&a))));
    let tb = loss_trace(&jsonl(tmp.path(), &format!("{}/metrics.jsonl", run_dir_from(&b))));
    assert_eq!(ta, tb);
}

#[test]
fn resume_continues_the_trace_without_discontinuity() {
    let tmp = tempfile::tempdir().unwrap();
    gen_regression(tmp.path(), "data", "7", "48", "24");
    write_cfg(tmp.path(), "short.cfg", BASE_CFG);
    let short = run_in(tmp.path(), &["train", "--config", "short.cfg"]);
    assert_ok(&short);
    let ckpt = format!("{}/checkpoint.json", run_dir_from(&short));

    let long_cfg = BASE_CFG.replace("epochs = 3", "epochs = 6");
    write_cfg(tmp.path(), "direct.cfg", &format!("{long_cfg}out_dir = runs_direct\n"));
    write_cfg(tmp.path(), "resumed.cfg", &format!("{long_cfg}out_dir = runs_resumed\n"));
    let direct = run_in(tmp.path(), &["train", "--config", "direct.cfg"]);
    let resumed = run_in(tmp.path(), &["train", "--config", "resumed.cfg", "--resume", &ckpt]);
    assert_ok(&direct);
    assert_ok(&resumed);

    let td = loss_trace(&jsonl(tmp.path(), &format!("{}/metrics.jsonl", run_dir_from(&direct))));
    let tr = loss_trace(&jsonl(tmp.path(), &format!("{}/metrics.jsonl", run_dir_from(&resumed))));
    assert_eq!(tr.first().unwrap().0, 3, "echo entry for the checkpoint epoch");
    assert_eq!(tr.last().unwrap().0, 6);
    // The resumed trace must equal the uninterrupted run on every shared
    // epoch, which bounds any metric discontinuity at exactly zero.
    for row in &tr {
        let twin = td.iter().find(|d| d.0 == row.0).expect("epoch present in direct run");
        assert_eq!(row, twin);
    }
}

#[test]
fn resume_rejects_a_mismatched_architecture() {
    let tmp = tempfile::tempdir().unwrap();
    gen_regression(tmp.path(), "data", "7", "48", "24");
    write_cfg(tmp.path(), "run.cfg", BASE_CFG);
    let out = run_in(tmp.path(), &["train", "--config", "run.cfg"]);
    assert_ok(&out);
    let ckpt = format!("{}/checkpoint.json", run_dir_from(&out));

    let wide = BASE_CFG.replace("channels = 4", "channels = 8");
    write_cfg(tmp.path(), "wide.cfg", &wide);
    let bad = run_in(tmp.path(), &["train", "--config", "wide.cfg", "--resume", &ckpt]);
    assert_eq!(exit_code(&bad), 1);
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(stderr.contains("channels"), "{stderr}");
}

#[test]
fn audit_passes_a_trained_checkpoint_and_writes_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    gen_regression(tmp.path(), "data", "7", "48", "24");
    write_cfg(tmp.path(), "run.cfg", BASE_CFG);
    let out = run_in(tmp.path(), &["train", "--config", "run.cfg"]);
    assert_ok(&out);
    let rd = run_dir_from(&out);
    let ckpt = format!("{rd}/checkpoint.json");

    let audit = run_in(tmp.path(), &["audit", "--checkpoint", &ckpt, "--n-trials", "5"]);
    assert_ok(&audit);
    let report = json(tmp.path(), &format!("{rd}/audit_report.json"));
    assert_eq!(report["ok"], true);
    assert_eq!(report["audit"]["passed"], true);
    assert_eq!(report["group"]["ok"], true);
    assert!(report["audit"]["versor_max_rel"].as_f64().unwrap() < 1e-8);
}

#[test]
fn audit_flags_and_localizes_an_injected_violation() {
    let tmp = tempfile::tempdir().unwrap();
    gen_regression(tmp.path(), "data", "7", "48", "24");
    write_cfg(tmp.path(), "run.cfg", BASE_CFG);
    let out = run_in(tmp.path(), &["train", "--config", "run.cfg"]);
    assert_ok(&out);
    let ckpt = format!("{}/checkpoint.json", run_dir_from(&out));

    let audit = run_in(
        tmp.path(),
        &["audit", "--checkpoint", &ckpt, "--n-trials", "5", "--break-layer", "1", "--out", "broken.json"],
    );
    assert_eq!(exit_code(&audit), 3);
    let report = json(tmp.path(), "broken.json");
    assert_eq!(report["ok"], false);
    let per_layer = report["audit"]["per_layer_max_rel"].as_array().unwrap();
    assert!(per_layer[0].as_f64().unwrap() < 1e-8, "clean before the break");
    assert!(per_layer[1].as_f64().unwrap() > 1e-3, "dirty after the break");
}

#[test]
fn lift_factors_identity_rotation_and_shear() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("eye.csv"), "1,0,0\n0,1,0\n0,0,1\n").unwrap();
    let out = run_in(tmp.path(), &["lift", "--matrix", "eye.csv", "--signature", "3,0,0", "--out", "eye.json"]);
    assert_ok(&out);
    let r = json(tmp.path(), "eye.json");
    assert_eq!(r["n_factors"], 0);
    assert_eq!(r["round_trip_residual"].as_f64().unwrap(), 0.0);

    std::fs::write(tmp.path().join("rot.csv"), "0,-1,0\n1,0,0\n0,0,1\n").unwrap();
    let out = run_in(tmp.path(), &["lift", "--matrix", "rot.csv", "--signature", "3,0,0", "--out", "rot.json"]);
    assert_ok(&out);
    let r = json(tmp.path(), "rot.json");
    let kinds: Vec<&str> =
        r["factors"].as_array().unwrap().iter().map(|f| f["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["vector", "vector"], "a plane rotation is two reflections");
    assert!(r["round_trip_residual"].as_f64().unwrap() < 1e-12);

    std::fs::write(tmp.path().join("shear.csv"), "1,0,0\n0,1,0\n0.5,-0.25,1\n").unwrap();
    let out = run_in(tmp.path(), &["lift", "--matrix", "shear.csv", "--signature", "2,0,1", "--out", "shear.json"]);
    assert_ok(&out);
    let r = json(tmp.path(), "shear.json");
    let kinds: Vec<&str> =
        r["factors"].as_array().unwrap().iter().map(|f| f["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["radical-shear", "radical-shear"]);
    assert!(r["round_trip_residual"].as_f64().unwrap() < 1e-12);
}

#[test]
fn lift_rejects_a_metric_violating_matrix_with_the_worst_entry() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.csv"), "1,0.1,0\n0,1,0\n0,0,1\n").unwrap();
    let out = run_in(tmp.path(), &["lift", "--matrix", "bad.csv", "--signature", "3,0,0"]);
    assert_eq!(exit_code(&out), 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("max metric violation"), "{stderr}");
    assert!(stderr.contains("(0, 1)"), "{stderr}");
}

#[test]
fn invalid_config_keys_exit_with_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    write_cfg(tmp.path(), "bad.cfg", &format!("{BASE_CFG}typo_key = 1\n"));
    let out = run_in(tmp.path(), &["train", "--config", "bad.cfg"]);
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("typo_key"));
}

#[test]
fn usage_errors_exit_with_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["train", "--no-such-flag"]);
    assert_eq!(exit_code(&out), 1);
    let help = run_in(tmp.path(), &["--help"]);
    assert_eq!(exit_code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for key in ["bench-params", "audit", "lift"] {
        assert!(text.contains(key), "{text}");
    }
    let train_help = run_in(tmp.path(), &["train", "--help"]);
    assert_eq!(exit_code(&train_help), 0);
}

#[test]
fn config_keys_are_documented_in_long_help() {
    let tmp = tempfile::tempdir().unwrap();
    let help = run_in(tmp.path(), &["--help"]);
    let text = String::from_utf8_lossy(&help.stdout);
    for key in [
        "task", "signature", "train_csv", "test_csv", "seed", "epochs", "batch_size", "lr",
        "channels", "depth", "scalar_gate_hidden", "stop_at_test_mse", "baseline_hidden",
        "out_dir",
    ] {
        assert!(text.contains(key), "missing config key {key} in --help");
    }
}

#[test]
fn diverging_training_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    gen_regression(tmp.path(), "data", "7", "48", "24");
    write_cfg(tmp.path(), "diverge.cfg", &format!("{BASE_CFG}lr = 1e300\n"));
    let out = run_in(tmp.path(), &["train", "--config", "diverge.cfg"]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("finite"));
}

#[test]
fn hull_training_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = [
        "gen", "--task", "hull", "--n-train", "24", "--n-test", "8", "--dim", "3", "--k", "5",
        "--out-dir", "data",
    ];
    assert_ok(&run_in(tmp.path(), &gen));
    let cfg = "task = hull\n\
        signature = 3,0,0\n\
        train_csv = data/train.csv\n\
        test_csv = data/test.csv\n\
        epochs = 2\n\
        batch_size = 12\n\
        channels = 4\n\
        depth = 1\n";
    write_cfg(tmp.path(), "hull.cfg", cfg);
    let out = run_in(tmp.path(), &["train", "--config", "hull.cfg"]);
    assert_ok(&out);
    let summary = json(tmp.path(), &format!("{}/summary.json", run_dir_from(&out)));
    assert_eq!(summary["in_channels"], 5, "one channel per hull point");
    assert_eq!(summary["task"], "hull");
}

#[test]
fn bench_params_reports_the_grade_wise_overhead() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["bench-params", "--signature", "5,0,0"]);
    assert_ok(&out);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let qt = r["type_grouped"]["total"].as_u64().unwrap();
    let gr = r["grade_wise"]["total"].as_u64().unwrap();
    assert!(qt < gr, "type-grouped {qt} should undercut grade-wise {gr}");
    assert!(r["grade_over_type_ratio"].as_f64().unwrap() > 1.0);
}

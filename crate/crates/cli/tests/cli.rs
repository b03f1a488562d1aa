use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use metroflow::network::NetworkSpec;

fn metroflow(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metroflow"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = metroflow(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SHORT: [&str; 6] = ["--burn-in", "20", "--samples", "15", "--chains", "2"];

fn simulate_and_fit(dir: &Path) {
    ok(&["simulate", "--scale", "desk", "--seed", "7", "--out", "sim"], dir);
    let mut args = vec![
        "fit",
        "--network",
        "sim/network.json",
        "--trips",
        "sim/trips.csv",
        "--config",
        "sim/fit.toml",
        "--out",
        "store",
    ];
    args.extend(SHORT);
    ok(&args, dir);
}

#[test]
fn desk_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate_and_fit(dir);
    for f in ["network.json", "trips.csv", "truth.json", "fit.toml"] {
        assert!(dir.join("sim").join(f).exists(), "missing {f}");
    }
    let mut args = vec![
        "evaluate",
        "--network",
        "sim/network.json",
        "--trips",
        "sim/trips.csv",
        "--config",
        "sim/fit.toml",
        "--truth",
        "sim/truth.json",
        "--max-draws",
        "10",
        "--replicates",
        "5",
        "--out",
        "eval",
    ];
    args.extend(SHORT);
    let stdout = ok(&args, dir);
    assert!(stdout.contains("RMSE"), "{stdout}");
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("eval/metrics.json")).unwrap()).unwrap();
    assert!(metrics["rmse"].as_f64().unwrap() >= metrics["mae"].as_f64().unwrap());
    assert!(dir.join("eval/store/manifest.json").exists());
    assert!(dir.join("eval/recovery.csv").exists());
    assert!(dir.join("eval/theta_error.csv").exists());

    ok(&["assign", "--network", "sim/network.json", "--store", "store", "--prior", "--out", "assign"], dir);
    for f in ["paths.csv", "links.csv", "prior_paths.csv", "prior_links.csv"] {
        assert!(dir.join("assign").join(f).exists(), "missing {f}");
    }
    ok(&["summary", "--network", "sim/network.json", "--store", "store", "--out", "summary.csv"], dir);
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("block,name,mean,sd,lower,upper\n"));
    assert!(summary.lines().any(|l| l.starts_with("q,q1,")));
}

#[test]
fn diagnose_flags_short_chains() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate_and_fit(dir);
    let stdout = ok(&["diagnose", "--network", "sim/network.json", "--store", "store", "--out", "diag"], dir);
    assert!(stdout.contains("flagged: q1"), "{stdout}");
    let ess = fs::read_to_string(dir.join("diag/ess.csv")).unwrap();
    assert!(ess.starts_with("parameter,pooled_ess,chain0_ess,chain1_ess,flagged\n"));
    assert_eq!(ess.lines().count(), 1 + 26);
    assert!(dir.join("diag/trace.csv").exists());
    assert!(dir.join("diag/agreement.csv").exists());
}

#[test]
fn repeated_fit_gives_identical_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate_and_fit(dir);
    let mut args = vec![
        "fit",
        "--network",
        "sim/network.json",
        "--trips",
        "sim/trips.csv",
        "--config",
        "sim/fit.toml",
        "--out",
        "again",
    ];
    args.extend(SHORT);
    ok(&args, dir);
    assert_eq!(
        fs::read(dir.join("store/manifest.json")).unwrap(),
        fs::read(dir.join("again/manifest.json")).unwrap()
    );
}

#[test]
fn evaluate_refuses_store_from_other_network() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate_and_fit(dir);
    let mut spec = NetworkSpec::load(dir.join("sim/network.json")).unwrap();
    let entry = spec.paths.iter_mut().find(|p| p.paths.len() > 1).unwrap();
    entry.paths.truncate(1);
    spec.save(dir.join("other.json")).unwrap();
    let out = metroflow(
        &[
            "evaluate",
            "--network",
            "other.json",
            "--trips",
            "sim/trips.csv",
            "--config",
            "sim/fit.toml",
            "--store",
            "store",
            "--out",
            "eval",
        ],
        dir,
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different network"));
}

#[test]
fn usage_and_input_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(metroflow(&["frobnicate"], dir).status.code(), Some(2));
    assert_eq!(metroflow(&["fit", "--bogus"], dir).status.code(), Some(2));

    ok(&["simulate", "--out", "sim"], dir);
    fs::write(dir.join("bad.csv"), "origin_id,destination_id,interval,travel_time_s\nS0,S1,1,-5\n").unwrap();
    let out = metroflow(&["fit", "--network", "sim/network.json", "--trips", "bad.csv", "--out", "s"], dir);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));

    fs::write(dir.join("future.csv"), "# trips-schema: 99\norigin_id,destination_id,interval,travel_time_s\n").unwrap();
    let out = metroflow(&["fit", "--network", "sim/network.json", "--trips", "future.csv", "--out", "s"], dir);
    assert_eq!(out.status.code(), Some(3));
}

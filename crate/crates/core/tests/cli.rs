//! End-to-end runs of the `nsstab` binary on a small grid.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nsstab::artifacts::{hash_file, Report};

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let text = format!(
        "Lx = 1.0\nLy = 1.0\nnx = 10\nny = 10\nomega = [0.6, 0.9, 0.1, 0.4]\nM = 8\noutput = {:?}\n{extra}",
        dir.join("out").display().to_string()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run(cmd: &str, config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsstab"))
        .args([cmd, "--config"])
        .arg(config)
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

#[test]
fn eigen_twice_hits_cache_with_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let first = run("eigen", &cfg);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let cache = dir.path().join("out/basis.nsstab");
    let bytes = fs::read(&cache).unwrap();
    let second = run("eigen", &cfg);
    assert!(second.status.success());
    assert!(String::from_utf8_lossy(&second.stderr).contains("basis cache hit"));
    assert!(String::from_utf8_lossy(&second.stdout).starts_with("cache Hit"));
    assert_eq!(fs::read(&cache).unwrap(), bytes);
}

#[test]
fn report_cites_the_trajectory_it_consumed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "dt = 0.0009765625\nmode = \"practical\"\n[practical]\nC1 = 0.1\nC2 = 1.0\nQ = 3.0\n[simulate]\nt_end = 0.0625\n",
    );
    let sim = run("simulate", &cfg);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let traj = dir.path().join("out/simulate/trajectory.csv");
    let hash = hash_file(&traj).unwrap();
    let produced = Report::read(&dir.path().join("out/simulate/report.json")).unwrap();
    assert!(produced.outputs.iter().any(|o| o.sha256 == hash));
    assert_eq!(produced.constants.as_ref().unwrap().provenance.c0, "sampled lower bound");
    assert_eq!(produced.seeds["initial_state"], 7);

    let rep = run("report", &cfg);
    assert!(rep.status.success(), "{}", String::from_utf8_lossy(&rep.stderr));
    let consumed = Report::read(&dir.path().join("out/report/report.json")).unwrap();
    assert_eq!(consumed.inputs[0].sha256, hash);
    assert_eq!(consumed.results["trajectory_sha256"], hash.as_str());
    assert!(fs::read_to_string(dir.path().join("out/report/summary.txt")).unwrap().contains(&hash));
    let plot = fs::read_to_string(dir.path().join("out/report/plot.csv")).unwrap();
    assert!(plot.starts_with("t,log10_norm_H,log10_V,log10_norm_f\n"));
}

#[test]
fn certified_null_control_reports_basin_below_precision() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mode = \"certified\"\n[c0_estimate]\nsamples = 200\n");
    let out = run("nullcontrol", &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("basin below float precision"));
    let rep = Report::read(&dir.path().join("out/nullcontrol/report.json")).unwrap();
    assert_eq!(rep.results["status"], "basin_below_float_precision");
}

#[test]
fn errors_are_json_on_stderr_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "typo = 1\n");
    let out = run("eigen", &cfg);
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr).lines().last().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["error"], "config");
    assert!(v["message"].as_str().unwrap().contains("typo"));

    let out = run("plot", &cfg);
    assert!(!out.status.success());
    let v: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(v["error"], "invalid_argument");
}

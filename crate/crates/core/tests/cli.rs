use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crl_lab::cli::manifest::RunManifest;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crl-lab"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("CRL_LAB_THREADS").output().unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn unknown_subcommand_prints_usage() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn malformed_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "schema_version = 1\nn_mc = \"many\"\n").unwrap();
    let out = run(&["ima-eval", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(&cfg, "schema_version = 1\nno_such_key = 3\n").unwrap();
    let out = run(&["ima-eval", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(&cfg, "schema_version = 99\n").unwrap();
    let out = run(&["ima-eval", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn polar_ima_eval_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = configs().join("ima-eval-polar.toml");
    let res = run(&["ima-eval", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "2"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = csv_rows(&out.join("contrast.csv"));
    let est: f64 = rows[0][2].parse().unwrap();
    let se: f64 = rows[0][3].parse().unwrap();
    assert!(est.abs() <= 3.0 * se.max(1e-12));
    let m = RunManifest::load(&out).unwrap();
    assert_eq!(m.command, "ima-eval");
    assert_eq!(m.threads, 2);
    assert_eq!(m.config_hash.len(), 64);
    for a in &m.artifacts {
        assert!(out.join(a).exists(), "{a}");
    }
    for want in ["config.toml", "contrast.csv", "manifest.json"] {
        assert!(m.artifacts.iter().any(|a| a == want), "{want}");
    }
}

#[test]
fn report_on_sweep_marks_quarter_turns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    std::fs::write(
        &cfg,
        "schema_version = 1\nseed = 5\nn_mc = 20000\nn_angles = 8\n[mixing]\nkind = \"moebius-random\"\nn = 2\n",
    )
    .unwrap();
    let run_dir = dir.path().join("sweep");
    let res = run(&["ima-sweep", "--config", cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let res = run(&["report", run_dir.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let report = run_dir.join("report");
    let rows = csv_rows(&report.join("report.csv"));
    assert_eq!(rows.len(), 8);
    for r in &rows {
        // zero, multiple_of_half_pi
        assert_eq!(&r[5], &r[6], "{r:?}");
    }
    let summary = std::fs::read_to_string(report.join("summary.csv")).unwrap();
    assert!(summary.contains("true"), "{summary}");
    assert_eq!(RunManifest::load(&report).unwrap().command, "report");
}

#[test]
fn report_on_unknown_run_fails() {
    let dir = tempfile::tempdir().unwrap();
    let res = run(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn deterministic_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mss.toml");
    std::fs::write(&cfg, "schema_version = 1\nseed = 3\nn_runs = 2\n[problem]\nsamples_per_env = 300\n").unwrap();
    let read = |name: &str| {
        let out = dir.path().join(name);
        let res = run(&["mss", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--deterministic"]);
        assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
        let m = RunManifest::load(&out).unwrap();
        assert!(m.deterministic && m.threads == 1);
        (std::fs::read(out.join("mss.csv")).unwrap(), m.config_hash)
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn seed_override_changes_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let go = |seed: &str| {
        let out = dir.path().join(seed);
        let res = run(&["influence", "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
        RunManifest::load(&out).unwrap()
    };
    let (a, b) = (go("1"), go("2"));
    assert_eq!((a.seed, b.seed), (1, 2));
    assert_ne!(a.config_hash, b.config_hash);
}

#[test]
fn zero_threads_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let res = run(&["influence", "--threads", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn bundled_configs_parse() {
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(configs()).unwrap() {
        let p = entry.unwrap().path();
        let text = std::fs::read_to_string(&p).unwrap();
        let value: toml::Value = toml::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(value["schema_version"].as_integer(), Some(1), "{}", p.display());
    }
    // gen-data is cheap enough to execute end to end.
    let out = dir.path().join("gen");
    let cfg = configs().join("gen-data-crl.toml");
    let res = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let m = RunManifest::load(&out).unwrap();
    assert!(m.artifacts.iter().any(|a| a == "data.csv.meta.json"), "{:?}", m.artifacts);
}

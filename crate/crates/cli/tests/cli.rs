use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn bdk(args: &[&str], data: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bdk"));
    c.args(args);
    if let Some(d) = data {
        c.env("BDK_DATA_DIR", d);
    }
    c.output().expect("spawn bdk")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn sha(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap();
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

const SMALL_TOY2D: &str = "\
[experiment]
name = toy2d
method = sgld
source = test fixture
seed = 3

[chain]
eta = 0.01
iterations = 3000
burn_in = 1000
thin = 50
batch_size = 5
prior_precision = 1

[grid]
resolution = 20
reference = none
";

#[test]
fn unknown_experiment_exits_2_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.conf", "[experiment]\nname = toy3d\nmethod = sgd\nsource = x\n");
    let o = bdk(&["run", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("toy3d"), "{err}");
    assert!(err.contains("usage:"), "{err}");
}

#[test]
fn missing_data_exits_2() {
    let empty = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = bdk(
        &[
            "run",
            "--config",
            configs().join("boston_sgd.conf").to_str().unwrap(),
            "--out",
            out.path().to_str().unwrap(),
        ],
        Some(empty.path()),
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("boston.csv"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.conf", SMALL_TOY2D);
    let o = bdk(&["run", "--config", cfg.to_str().unwrap(), "--set", "chain.etta=1"], None);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("chain.etta"));
}

#[test]
fn rerun_gives_identical_metrics_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.conf", SMALL_TOY2D);
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = bdk(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        for f in ["metrics.csv", "trials.csv", "config.resolved.txt", "meta.txt"] {
            assert!(out.join(f).exists(), "{f}");
        }
        let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("metric,value,standard_error,n_trials\n"));
        assert!(metrics.contains("\nmisclass_rate,"));
        hashes.push((sha(&out.join("metrics.csv")), sha(&out.join("grid.csv"))));
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.conf", SMALL_TOY2D);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&bdk(&["run", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()], None)), 0);
    let resolved = a.join("config.resolved.txt");
    assert_eq!(code(&bdk(&["run", "--config", resolved.to_str().unwrap(), "--out", b.to_str().unwrap()], None)), 0);
    assert_eq!(sha(&a.join("metrics.csv")), sha(&b.join("metrics.csv")));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.conf", SMALL_TOY2D);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&bdk(&["run", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()], None)), 0);
    let o = bdk(&["run", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "4"], None);
    assert_eq!(code(&o), 0);
    assert_ne!(sha(&a.join("grid.csv")), sha(&b.join("grid.csv")));
    let resolved = std::fs::read_to_string(b.join("config.resolved.txt")).unwrap();
    assert!(resolved.contains("seed = 4"));
}

#[test]
fn emit_grid_two_by_two_and_reemit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.conf", SMALL_TOY2D);
    let run = dir.path().join("run");
    let sgd = dir.path().join("sgd");
    assert_eq!(code(&bdk(&["run", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()], None)), 0);
    let o = bdk(&["run", "--config", cfg.to_str().unwrap(), "--out", sgd.to_str().unwrap(), "--set", "experiment.method=sgd"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for ckpt in [sgd.join("params.bdk"), run.join("ensemble.bdk")] {
        let mut files = Vec::new();
        for name in ["g1.csv", "g2.csv"] {
            let out = dir.path().join(name);
            let o = bdk(
                &[
                    "emit-grid",
                    "--checkpoint",
                    ckpt.to_str().unwrap(),
                    "--out",
                    out.to_str().unwrap(),
                    "--resolution",
                    "2",
                ],
                None,
            );
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            let text = std::fs::read_to_string(&out).unwrap();
            assert_eq!(text.lines().count(), 1 + 4, "{text}");
            assert!(dir.path().join(format!("{name}.meta")).exists());
            files.push(text);
        }
        assert_eq!(files[0], files[1]);
    }
}

#[test]
fn emit_grid_rejects_non_2d_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.conf",
        "[experiment]\nname = toy1d\nmethod = sgd\nsource = x\n[model]\nnoise_precision = 1\n[chain]\neta = 1e-3\niterations = 100\nbatch_size = 20\n",
    );
    let run = dir.path().join("run");
    assert_eq!(code(&bdk(&["run", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()], None)), 0);
    let o = bdk(
        &[
            "emit-grid",
            "--checkpoint",
            run.join("params.bdk").to_str().unwrap(),
            "--out",
            dir.path().join("g.csv").to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn compare_identical_files_and_assertions() {
    let dir = tempfile::tempdir().unwrap();
    let header = "metric,value,standard_error,n_trials\n";
    let a = write(dir.path(), "a.csv", &format!("{header}x,1,0,1\ny,2.5,0.1,5\n"));
    let b = write(dir.path(), "b.csv", &format!("{header}x,0,0,1\n"));
    let csv = dir.path().join("cmp.csv");

    let o = bdk(&["compare", &format!("a={}", a.display()), &format!("c={}", a.display()), "--csv", csv.to_str().unwrap()], None);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), "metric,a,c,c-a\nx,1,1,0\ny,2.5,2.5,0\n");

    let pair = [format!("a={}", a.display()), format!("b={}", b.display())];
    let with = |expr: &str| {
        code(&bdk(&["compare", &pair[0], &pair[1], "--assert", expr], None))
    };
    assert_eq!(with("a.x > b.x"), 0);
    assert_eq!(with("a.x < b.x"), 1);
    assert_eq!(with("a.nope > b.x"), 2);
}

#[test]
fn compare_disjoint_metrics_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let header = "metric,value,standard_error,n_trials\n";
    let a = write(dir.path(), "a.csv", &format!("{header}x,1,0,1\n"));
    let b = write(dir.path(), "b.csv", &format!("{header}y,1,0,1\n"));
    let o = bdk(&["compare", &format!("a={}", a.display()), &format!("b={}", b.display())], None);
    assert_eq!(code(&o), 2);
}

#[test]
fn check_runs_property_suites() {
    let o = bdk(&["check", "--filter", "simplex"], None);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("PASS simplex_normalization"));
    assert_eq!(code(&bdk(&["check", "--filter", "no-such-suite"], None)), 2);
}

/// Grid of the canonical toy2d SGD config, reference sampler skipped.
/// The digest was taken from the first verified run.
#[test]
fn canonical_toy2d_sgd_grid_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let o = bdk(
        &[
            "run",
            "--config",
            configs().join("toy2d_sgd.conf").to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "--set",
            "grid.reference=none",
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(sha(&dir.path().join("grid.csv")), CANONICAL_SGD_GRID_SHA256);
}

const CANONICAL_SGD_GRID_SHA256: &str = "2e25bea56de1caa1cbe87e3260eeec646f9de62dcda35f72147925717c5e4f84";

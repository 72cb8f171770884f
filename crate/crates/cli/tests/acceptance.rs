//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! `cargo test -p bdk-cli --test acceptance` runs everything (tens of
//! minutes on one core). Pass criterion numbers after `--` to run a subset:
//! `cargo test -p bdk-cli --test acceptance -- 1 2 7`.
//!
//! A failing criterion is reported but does not fail the test binary unless
//! `BDK_ACCEPTANCE_STRICT=1` is set.

use std::path::{Path, PathBuf};
use std::time::Instant;

use bdk_cli::compare::{check_assertion, Run};
use bdk_cli::config::ExperimentConfig;
use bdk_cli::experiment::run_experiment;
use bdk_cli::suites::{run_suite, SuiteResult, ORACLES, SUITES};
use bdk_cli::CliError;

struct Outcome {
    passed: bool,
    lines: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Self { passed: true, lines: Vec::new() }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.passed &= ok;
        self.lines.push(format!("{} {line}", if ok { "ok  " } else { "FAIL" }));
    }

    fn assert(&mut self, expr: &str, runs: &[Run]) {
        match check_assertion(expr, runs) {
            Ok(d) => self.check(true, d),
            Err(CliError::Assertion(d)) => self.check(false, d),
            Err(e) => self.check(false, format!("{expr}: {e}")),
        }
    }

    fn error(&mut self, e: CliError) {
        self.check(false, format!("error: {e}"));
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn data_dir() -> PathBuf {
    std::env::var_os("BDK_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| root().join("data"))
}

fn run(config: &str, label: &str) -> Result<Run, CliError> {
    let path = root().join("configs").join(config);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let cfg = ExperimentConfig::from_text(&text, &[])?;
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(label);
    let s = run_experiment(&cfg, &out, &data_dir())?;
    eprintln!("  [{label}] {config} finished in {:.1}s", s.seconds);
    Ok(Run { label: label.to_string(), metrics: s.metrics })
}

fn runs(specs: &[(&str, &str)]) -> Result<Vec<Run>, CliError> {
    specs.iter().map(|(c, l)| run(c, l)).collect()
}

fn suites(list: &[(&'static str, fn() -> bdk_cli::suites::Outcome)]) -> Outcome {
    let mut o = Outcome::new();
    for &(name, f) in list {
        let r: SuiteResult = run_suite(name, f);
        o.check(r.passed, format!("{} ({:.1}s) {}", r.name, r.seconds, r.detail));
    }
    o
}

fn toy2d() -> Outcome {
    let mut o = Outcome::new();
    match runs(&[
        ("toy2d_sgd.conf", "sgd"),
        ("toy2d_sgld.conf", "sgld"),
        ("toy2d_distill_2-10-10-2.conf", "d2-10-10-2"),
        ("toy2d_distill_2-10-2.conf", "d2-10-2"),
    ]) {
        Ok(r) => {
            o.assert("sgd.kl_grid >= 10 * sgld.kl_grid", &r);
            o.assert("d2-10-10-2.kl_grid <= 3 * sgld.kl_grid", &r);
            o.assert("d2-10-2.kl_grid > d2-10-10-2.kl_grid", &r);
        }
        Err(e) => o.error(e),
    }
    o
}

fn toy1d() -> Outcome {
    let mut o = Outcome::new();
    match runs(&[("toy1d_sgd.conf", "sgd"), ("toy1d_sgld.conf", "sgld"), ("toy1d_distill.conf", "distill")]) {
        Ok(r) => {
            for m in ["sgld", "distill"] {
                o.assert(&format!("{m}.std_at_neg6 >= 2 * {m}.std_at_0"), &r);
                o.assert(&format!("{m}.std_at_pos6 >= 2 * {m}.std_at_0"), &r);
            }
            let path = root().join("configs/toy1d_sgd.conf");
            let lambda = std::fs::read_to_string(&path)
                .ok()
                .and_then(|t| ExperimentConfig::from_text(&t, &[]).ok())
                .and_then(|c| c.noise_precision);
            match lambda {
                Some(l) => {
                    let want = (1.0 / l).sqrt();
                    let get = |n: &str| r[0].metrics.iter().find(|m| m.name == n).map_or(f64::NAN, |m| m.value);
                    let (lo, hi) = (get("band_std_min"), get("band_std_max"));
                    o.check(
                        lo == want && hi == want && get("std_at_0") == want,
                        format!("sgd band std in [{lo}, {hi}], sqrt(1/lambda) = {want}"),
                    );
                }
                None => o.check(false, "toy1d_sgd.conf has no noise precision".into()),
            }
        }
        Err(e) => o.error(e),
    }
    o
}

fn boston() -> Outcome {
    let mut o = Outcome::new();
    match runs(&[("boston_sgd.conf", "sgd"), ("boston_sgld.conf", "sgld"), ("boston_distill.conf", "distill")]) {
        Ok(r) => {
            o.assert("sgld.test_loglik > sgd.test_loglik", &r);
            o.assert("abs(distill.test_loglik - sgld.test_loglik) <= 0.15", &r);
        }
        Err(e) => o.error(e),
    }
    o
}

fn mnist() -> Outcome {
    let mut o = Outcome::new();
    match runs(&[("mnist_sgd.conf", "sgd"), ("mnist_sgld.conf", "sgld"), ("mnist_distill.conf", "distill")]) {
        Ok(r) => {
            o.assert("sgld.test_error_pct <= sgd.test_error_pct + 0.2", &r);
            o.assert("sgld.test_loglik >= sgd.test_loglik", &r);
            o.assert("distill.test_error_pct <= sgld.test_error_pct + 0.5", &r);
        }
        Err(e) => o.error(e),
    }
    o
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget_s: f64,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "gradient oracles", budget_s: 60.0, run: || suites(&ORACLES[..2]) },
    Criterion { id: 2, name: "sampler oracles", budget_s: 60.0, run: || suites(&ORACLES[2..]) },
    Criterion { id: 3, name: "toy 2-D grid KL ordering", budget_s: 900.0, run: toy2d },
    Criterion { id: 4, name: "toy 1-D uncertainty shape", budget_s: 300.0, run: toy1d },
    Criterion { id: 5, name: "Boston desk scale", budget_s: 1800.0, run: boston },
    Criterion { id: 6, name: "MNIST desk scale", budget_s: 3600.0, run: mnist },
    Criterion { id: 7, name: "property suites", budget_s: 120.0, run: || suites(SUITES) },
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("BDK_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut summary = Vec::new();
    for c in CRITERIA.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        eprintln!("criterion {}: {} ...", c.id, c.name);
        let start = Instant::now();
        let mut o = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        o.check(secs <= c.budget_s, format!("runtime {secs:.1}s within {:.0}s", c.budget_s));
        for l in &o.lines {
            println!("    {l}");
        }
        let line = format!("{} criterion {} {} ({secs:.1}s)", if o.passed { "PASS" } else { "FAIL" }, c.id, c.name);
        println!("{line}");
        summary.push((o.passed, line));
    }
    println!();
    for (_, l) in &summary {
        println!("{l}");
    }
    if strict && summary.iter().any(|(p, _)| !p) {
        std::process::exit(1);
    }
}

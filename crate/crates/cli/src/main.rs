use std::path::PathBuf;
use std::process::ExitCode;

use bdk_cli::compare::{check_assertion, comparison, Run};
use bdk_cli::config::ExperimentConfig;
use bdk_cli::experiment::run_experiment;
use bdk_cli::output::{read_metrics, OutDir};
use bdk_cli::{data_dir, suites, CliError};
use bdk_core::checkpoint::{decode_ensemble, decode_params};
use bdk_core::eval::{predictive_grid, write_grid_csv, write_grid_meta, GridGeometry, Predictor};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bdk", version, about = "SGLD, HMC and distilled-SGLD experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Master seed (overrides experiment.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides experiment.out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a config value, e.g. `--set chain.eta=1e-4`. Repeatable.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a 2-D grid and write CSV plus a `.meta` sidecar.
    EmitGrid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "-10,10", allow_hyphen_values = true)]
        x_range: String,
        #[arg(long, default_value = "-10,10", allow_hyphen_values = true)]
        y_range: String,
        #[arg(long, default_value_t = 100)]
        resolution: usize,
        /// Noise precision for regression checkpoints.
        #[arg(long)]
        noise_precision: Option<f64>,
    },
    /// Tabulate shared metrics across runs and check assertions.
    Compare {
        /// `label=path` pairs; path is a metrics.csv or a run directory.
        #[arg(required = true, num_args = 2..)]
        runs: Vec<String>,
        /// Assertion such as `sgld.test_loglik > sgd.test_loglik`. Repeatable.
        #[arg(long = "assert")]
        asserts: Vec<String>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the property suites (no data files needed).
    Check {
        /// Only suites whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
}

fn range(s: &str, what: &str) -> Result<(f64, f64), CliError> {
    let bad = || CliError::Config(format!("{what}: expected lo,hi, got `{s}`"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    let lo: f64 = a.trim().parse().map_err(|_| bad())?;
    let hi: f64 = b.trim().parse().map_err(|_| bad())?;
    Ok((lo, hi))
}

fn cmd_run(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>, mut overrides: Vec<String>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&config).map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
    if let Some(s) = seed {
        overrides.push(format!("experiment.seed={s}"));
    }
    let cfg = ExperimentConfig::from_text(&text, &overrides)?;
    let out = out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", cfg.experiment, cfg.method)));
    let summary = run_experiment(&cfg, &out, &data_dir())?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    println!("{} {} -> {} ({:.1}s)", cfg.experiment, cfg.method, summary.out.display(), summary.seconds);
    for m in &summary.metrics {
        if m.n_trials > 1 {
            println!("  {:<28} {:>14.6} +- {:.6}", m.name, m.value, m.standard_error);
        } else {
            println!("  {:<28} {:>14.6}", m.name, m.value);
        }
    }
    Ok(())
}

fn cmd_emit_grid(
    checkpoint: PathBuf,
    out: PathBuf,
    x_range: (f64, f64),
    y_range: (f64, f64),
    resolution: usize,
    noise_precision: Option<f64>,
) -> Result<(), CliError> {
    let bytes = std::fs::read(&checkpoint).map_err(|e| CliError::io(&checkpoint, e))?;
    let geometry = GridGeometry { x_range, y_range, nx: resolution, ny: resolution };
    geometry.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let noise = noise_precision.map(bdk_core::NoiseModel::new).transpose()?;
    let (grid, model) = if bytes.starts_with(b"BDKE") {
        let ens = decode_ensemble(&bytes)?;
        let g = predictive_grid(Predictor::Ensemble(&ens), geometry, noise)?;
        (g, format!("ensemble of {} x {}", ens.len(), ens.spec))
    } else {
        let (spec, params) = decode_params(&bytes)?;
        let g = predictive_grid(Predictor::single(&spec, &params), geometry, noise)?;
        (g, format!("single {spec}"))
    };
    let mut csv = Vec::new();
    write_grid_csv(&grid, &mut csv).map_err(|e| CliError::io(&out, e))?;
    let mut meta = Vec::new();
    write_grid_meta(&grid, &model, &mut meta).map_err(|e| CliError::io(&out, e))?;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(std::path::Path::new("."));
    let name = out.file_name().ok_or_else(|| CliError::Config("--out must name a file".into()))?.to_string_lossy();
    let dir = OutDir::create(parent)?;
    dir.write(&name, &csv)?;
    dir.write(&format!("{name}.meta"), &meta)?;
    println!("wrote {} ({} cells)", out.display(), grid.cells.len());
    Ok(())
}

fn cmd_compare(specs: Vec<String>, asserts: Vec<String>, csv_out: Option<PathBuf>) -> Result<(), CliError> {
    let mut runs = Vec::new();
    for s in &specs {
        let (label, path) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("run `{s}` is not label=path")))?;
        runs.push(Run { label: label.to_string(), metrics: read_metrics(path.as_ref())? });
    }
    let (text, csv) = comparison(&runs)?;
    print!("{text}");
    if let Some(p) = csv_out {
        std::fs::write(&p, csv).map_err(|e| CliError::io(&p, e))?;
    }
    let mut failed = Vec::new();
    for a in &asserts {
        match check_assertion(a, &runs) {
            Ok(detail) => println!("PASS {detail}"),
            Err(CliError::Assertion(detail)) => {
                println!("FAIL {detail}");
                failed.push(detail);
            }
            Err(e) => return Err(e),
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Assertion(format!("{} of {} assertions failed", failed.len(), asserts.len())))
    }
}

fn cmd_check(filter: Option<String>) -> Result<(), CliError> {
    let results = suites::run_all(filter.as_deref());
    if results.is_empty() {
        return Err(CliError::Config("no suite matches the filter".into()));
    }
    let mut failed = 0;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag} {:<34} {:>6.2}s  {}", r.name, r.seconds, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Assertion(format!("{failed} suite(s) failed")))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run { config, seed, out, overrides } => cmd_run(config, seed, out, overrides),
        Cmd::EmitGrid { checkpoint, out, x_range, y_range, resolution, noise_precision } => {
            range(&x_range, "--x-range").and_then(|x| {
                range(&y_range, "--y-range").and_then(|y| cmd_emit_grid(checkpoint, out, x, y, resolution, noise_precision))
            })
        }
        Cmd::Compare { runs, asserts, csv } => cmd_compare(runs, asserts, csv),
        Cmd::Check { filter } => cmd_check(filter),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Config(_)) {
                eprintln!("usage: bdk run --config <file> [--seed N] [--out DIR] [--set section.key=value]");
                eprintln!("experiments: toy2d, toy1d, boston, mnist, conjugate-check; methods: sgd, sgld, hmc, distill");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

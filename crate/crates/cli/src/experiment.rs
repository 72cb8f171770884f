//! Runs one configured experiment: trials, metrics and artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use bdk_core::checkpoint::{encode_ensemble, encode_params};
use bdk_core::data::{
    gen_toy1d, gen_toy2d, load_mnist_idx, parse_csv, split_regression_table, ColumnRef, Dataset, MnistSplit,
    SplitSpec, Table, Targets, CANONICAL_TOY_SEED,
};
use bdk_core::distill::{run_distilled_sgld, run_distilled_sgld_with_sink, write_history_csv, DistillConfig, HistoryRow};
use bdk_core::eval::{
    class_probs_batch, error_rate_from_probs, kl_grid, loglik_from_probs, misclass_rate, predict_reg_batch,
    predictive_grid, test_loglik_class, test_loglik_reg, test_rmse_reg, write_grid_csv, write_grid_meta, Grid2D,
    MetricsReport, OnlineClassPredictive, Predictor,
};
use bdk_core::nn::{init_params, HeadKind};
use bdk_core::rng::{self, Stream};
use bdk_core::samplers::{
    hmc_sample, run_chain, run_chain_with_sink, ChainConfig, ChainKind, MlpPosterior, NullSink,
};
use bdk_core::{par, Matrix, MlpSpec, NoiseModel, ParamVector, PosteriorEnsemble};

use crate::config::{Experiment, ExperimentConfig, Method};
use crate::output::{fmt_f64, render_metrics, OutDir};
use crate::CliError;

/// What a finished run reports back to the caller.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out: PathBuf,
    pub metrics: Vec<MetricsReport>,
    pub warnings: Vec<String>,
    pub seconds: f64,
}

#[derive(Default)]
struct Trial {
    metrics: Vec<(String, f64)>,
    artifacts: Vec<(String, Vec<u8>)>,
    fit_seconds: f64,
    iterations: usize,
}

impl Trial {
    fn metric(&mut self, name: &str, v: f64) {
        self.metrics.push((name.to_string(), v));
    }

    fn artifact(&mut self, name: &str, bytes: Vec<u8>) {
        self.artifacts.push((name.to_string(), bytes));
    }
}

/// Data and references shared by every trial.
enum Shared {
    Toy { train: Dataset, test: Dataset, reference: Option<Grid2D> },
    Boston { table: Table, target: ColumnRef },
    Mnist { train: Dataset, valid: Dataset },
    Conjugate { data: Dataset, ys: Vec<f64> },
}

/// A fitted model for the small experiments, where ensembles fit in memory.
enum Fitted {
    Plugin(ParamVector),
    Ensemble { ens: PosteriorEnsemble, acceptance: Option<f64> },
    Distilled { student: ParamVector, teacher: PosteriorEnsemble, history: Vec<HistoryRow> },
}

pub fn trial_seed(master: u64, trial: usize) -> u64 {
    rng::derive_seed(master, Stream::Trial, trial as u64)
}

fn head_kinds(cfg: &ExperimentConfig) -> (HeadKind, HeadKind) {
    match cfg.experiment {
        Experiment::Toy2d | Experiment::Mnist => (HeadKind::Classifier, HeadKind::Classifier),
        _ => (HeadKind::MeanOnly, HeadKind::MeanLogVar),
    }
}

fn resolve(data_dir: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        data_dir.join(p)
    }
}

fn require(path: &Path, hint: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingData {
            path: path.to_path_buf(),
            hint: hint.to_string(),
        })
    }
}

fn noise_of(cfg: &ExperimentConfig) -> Result<Option<NoiseModel>, CliError> {
    Ok(match cfg.noise_precision {
        Some(l) => Some(NoiseModel::new(l)?),
        None => None,
    })
}

fn chain_for(cfg: &ExperimentConfig, seed: u64) -> ChainConfig {
    ChainConfig {
        seed,
        ..cfg.chain.clone()
    }
}

fn distill_config(cfg: &ExperimentConfig, train: &Dataset, seed: u64) -> DistillConfig {
    DistillConfig {
        teacher: chain_for(cfg, seed),
        student: cfg.student.clone(),
        gen: cfg.generator.build(train.inputs()),
        iterations: cfg.chain.iterations,
        seed,
        log_every: cfg.chain.log_every,
    }
}

/// Independent HMC chains from prior draws, run in parallel and merged in
/// chain order.
fn hmc_ensemble(
    cfg: &ExperimentConfig,
    spec: &MlpSpec,
    data: &Dataset,
    noise: Option<NoiseModel>,
    seed: u64,
) -> Result<(PosteriorEnsemble, f64), CliError> {
    let target = MlpPosterior {
        spec,
        data,
        prior_precision: cfg.chain.prior_precision,
        noise,
    };
    let outs = par::map_indexed(cfg.hmc.chains, |c| {
        let mut r = rng::stream(seed, Stream::Hmc, c as u64);
        let init = init_params(spec, &mut r, cfg.init_scale)?;
        hmc_sample(&target, init.as_slice(), &cfg.hmc.config, &mut r)
    });
    let mut ens = PosteriorEnsemble::new(spec.clone(), format!("hmc x{}", cfg.hmc.chains));
    let mut acc = 0.0;
    for o in outs {
        let o = o?;
        acc += o.acceptance_rate;
        ens.merge(o.into_ensemble(spec, "hmc")?)?;
    }
    Ok((ens, acc / cfg.hmc.chains as f64))
}

fn fit_small(
    cfg: &ExperimentConfig,
    teacher: &MlpSpec,
    student: &MlpSpec,
    train: &Dataset,
    noise: Option<NoiseModel>,
    seed: u64,
) -> Result<Fitted, CliError> {
    let chain = chain_for(cfg, seed);
    Ok(match cfg.method {
        Method::Sgd => Fitted::Plugin(run_chain(ChainKind::Sgd, teacher, train, &chain, noise)?.last),
        Method::Sgld => Fitted::Ensemble {
            ens: run_chain(ChainKind::SGLD, teacher, train, &chain, noise)?.ensemble,
            acceptance: None,
        },
        Method::Hmc => {
            let (ens, acc) = hmc_ensemble(cfg, teacher, train, noise, seed)?;
            Fitted::Ensemble {
                ens,
                acceptance: Some(acc),
            }
        }
        Method::Distill => {
            let out = run_distilled_sgld(teacher, student, train, &distill_config(cfg, train, seed), noise)?;
            Fitted::Distilled {
                student: out.student,
                teacher: out.teacher_ensemble,
                history: out.history,
            }
        }
    })
}

impl Fitted {
    fn predictor<'a>(&'a self, teacher: &'a MlpSpec, student: &'a MlpSpec) -> Predictor<'a> {
        match self {
            Fitted::Plugin(p) => Predictor::single(teacher, p),
            Fitted::Ensemble { ens, .. } => Predictor::Ensemble(ens),
            Fitted::Distilled { student: w, .. } => Predictor::single(student, w),
        }
    }

    fn common_metrics(&self, t: &mut Trial) {
        match self {
            Fitted::Plugin(_) => {}
            Fitted::Ensemble { ens, acceptance } => {
                t.metric("n_samples", ens.len() as f64);
                if let Some(a) = acceptance {
                    t.metric("hmc_acceptance", *a);
                }
            }
            Fitted::Distilled { teacher, .. } => t.metric("n_samples", teacher.len() as f64),
        }
    }

    fn artifacts(&self, teacher: &MlpSpec, student: &MlpSpec, t: &mut Trial) -> Result<(), CliError> {
        match self {
            Fitted::Plugin(p) => t.artifact("params.bdk", encode_params(teacher, p)?),
            Fitted::Ensemble { ens, .. } => t.artifact("ensemble.bdk", encode_ensemble(ens)?),
            Fitted::Distilled { student: w, teacher: ens, history } => {
                t.artifact("student.bdk", encode_params(student, w)?);
                t.artifact("teacher_ensemble.bdk", encode_ensemble(ens)?);
                let mut csv = Vec::new();
                write_history_csv(history, &mut csv).expect("in-memory write");
                t.artifact("history.csv", csv);
            }
        }
        Ok(())
    }
}

fn grid_files(t: &mut Trial, name: &str, grid: &Grid2D, model: &str) {
    let mut csv = Vec::new();
    write_grid_csv(grid, &mut csv).expect("in-memory write");
    let mut meta = Vec::new();
    write_grid_meta(grid, model, &mut meta).expect("in-memory write");
    t.artifact(name, csv);
    t.artifact(&format!("{name}.meta"), meta);
}

fn toy_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.data.seed.unwrap_or(CANONICAL_TOY_SEED)
}

fn prepare(cfg: &ExperimentConfig, data_dir: &Path) -> Result<Shared, CliError> {
    Ok(match cfg.experiment {
        Experiment::Toy2d => {
            let seed = toy_seed(cfg);
            let train = gen_toy2d(seed);
            let test = gen_toy2d(rng::derive_seed(seed, Stream::Data, 1));
            let reference = if cfg.reference {
                let spec = MlpSpec::parse(&cfg.arch, HeadKind::Classifier)?;
                // the reference depends on the data only, so every method shares it
                let (ens, _) = hmc_ensemble(cfg, &spec, &train, None, rng::derive_seed(seed, Stream::Hmc, 1))?;
                Some(predictive_grid(Predictor::Ensemble(&ens), cfg.grid, None)?)
            } else {
                None
            };
            Shared::Toy { train, test, reference }
        }
        Experiment::Toy1d => {
            let seed = toy_seed(cfg);
            Shared::Toy {
                train: gen_toy1d(seed),
                test: gen_toy1d(rng::derive_seed(seed, Stream::Data, 1)),
                reference: None,
            }
        }
        Experiment::Boston => {
            let path = resolve(data_dir, &cfg.data.path);
            require(&path, "run scripts/prepare_data.py or set BDK_DATA_DIR")?;
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let target: ColumnRef = cfg
                .data
                .target
                .parse()
                .map_err(|e| CliError::Config(format!("data.target: {e}")))?;
            Shared::Boston {
                table: parse_csv(&text)?,
                target,
            }
        }
        Experiment::Mnist => {
            let images = resolve(data_dir, &cfg.data.images);
            let labels = resolve(data_dir, &cfg.data.labels);
            require(&images, "run scripts/prepare_data.py or set BDK_DATA_DIR")?;
            require(&labels, "run scripts/prepare_data.py or set BDK_DATA_DIR")?;
            let split = MnistSplit {
                train_n: cfg.data.train_n,
                valid_n: cfg.data.test_n,
                seed: cfg.data.seed.unwrap_or(1),
            };
            let d = load_mnist_idx(&images, &labels, cfg.data.subset, split)?;
            Shared::Mnist {
                train: d.train,
                valid: d.valid,
            }
        }
        Experiment::ConjugateCheck => {
            let n = cfg.data.train_n;
            if n == 0 {
                return Err(CliError::Config("data.train_n must be >= 1".into()));
            }
            let lambda_n = cfg.noise_precision.unwrap_or(1.0);
            let mut r = rng::stream(cfg.data.seed.unwrap_or(1), Stream::Data, 0);
            let dist = rand_distr::Normal::new(1.0, (1.0 / lambda_n).sqrt()).expect("positive sd");
            let ys: Vec<f64> = (0..n).map(|_| rand_distr::Distribution::sample(&dist, &mut r)).collect();
            let data = Dataset::new(Matrix::zeros(n, 1), Targets::Real(ys.clone()))?;
            Shared::Conjugate { data, ys }
        }
    })
}

fn run_trial(cfg: &ExperimentConfig, shared: &Shared, index: usize) -> Result<Trial, CliError> {
    let seed = trial_seed(cfg.seed, index);
    let (tk, sk) = head_kinds(cfg);
    let teacher = MlpSpec::parse(&cfg.arch, tk)?;
    let student = MlpSpec::parse(&cfg.student_arch, sk)?;
    let noise = noise_of(cfg)?;
    let keep_artifacts = index == 0;
    let mut t = Trial {
        iterations: match cfg.method {
            Method::Hmc => cfg.hmc.chains * (cfg.hmc.config.burn_in + cfg.hmc.config.n_samples * cfg.hmc.config.thin),
            _ => cfg.chain.iterations,
        },
        ..Trial::default()
    };

    match (cfg.experiment, shared) {
        (Experiment::Toy2d, Shared::Toy { train, test, reference }) => {
            let start = Instant::now();
            let fitted = fit_small(cfg, &teacher, &student, train, None, seed)?;
            t.fit_seconds = start.elapsed().as_secs_f64();
            let pred = fitted.predictor(&teacher, &student);
            t.metric("misclass_rate", misclass_rate(pred, test)?.value);
            t.metric("test_loglik", test_loglik_class(pred, test)?.value);
            let grid = predictive_grid(pred, cfg.grid, None)?;
            if let Some(r) = reference {
                t.metric("kl_grid", kl_grid(r, &grid)?);
            }
            if let Fitted::Distilled { teacher: ens, .. } = &fitted {
                let tg = predictive_grid(Predictor::Ensemble(ens), cfg.grid, None)?;
                if let Some(r) = reference {
                    t.metric("kl_grid_teacher", kl_grid(r, &tg)?);
                }
                if keep_artifacts {
                    grid_files(&mut t, "teacher_grid.csv", &tg, "sgld teacher ensemble");
                }
            }
            fitted.common_metrics(&mut t);
            if keep_artifacts {
                grid_files(&mut t, "grid.csv", &grid, &format!("{} {}", cfg.method, model_arch(cfg)));
                if let Some(r) = reference {
                    grid_files(&mut t, "reference_grid.csv", r, "hmc reference");
                }
                fitted.artifacts(&teacher, &student, &mut t)?;
            }
        }
        (Experiment::Toy1d, Shared::Toy { train, test, .. }) => {
            let start = Instant::now();
            let fitted = fit_small(cfg, &teacher, &student, train, noise, seed)?;
            t.fit_seconds = start.elapsed().as_secs_f64();
            let pred = fitted.predictor(&teacher, &student);
            let probe = Matrix::from_vec(3, 1, vec![-6.0, 0.0, 6.0])?;
            let sd = predict_reg_batch(pred, &probe, noise)?;
            t.metric("std_at_neg6", sd[0].1);
            t.metric("std_at_0", sd[1].1);
            t.metric("std_at_pos6", sd[2].1);
            t.metric("edge_to_centre_std_ratio", sd[0].1.min(sd[2].1) / sd[1].1);
            let (lo, hi, n) = cfg.band;
            let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
            let band = predict_reg_batch(pred, &Matrix::from_vec(n, 1, xs.clone())?, noise)?;
            t.metric("band_std_min", band.iter().map(|b| b.1).fold(f64::INFINITY, f64::min));
            t.metric("band_std_max", band.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max));
            t.metric("test_loglik", test_loglik_reg(pred, test, noise)?.value);
            t.metric("test_rmse", test_rmse_reg(pred, test, noise)?.value);
            fitted.common_metrics(&mut t);
            if keep_artifacts {
                let mut csv = String::from("x,mu,std\n");
                for (x, (m, s)) in xs.iter().zip(&band) {
                    csv.push_str(&format!("{},{},{}\n", fmt_f64(*x), fmt_f64(*m), fmt_f64(*s)));
                }
                t.artifact("band.csv", csv.into_bytes());
                t.artifact(
                    "band.csv.meta",
                    format!("model = {} {}\nrange = {lo},{hi}\npoints = {n}\nstd = predictive standard deviation including observation noise\n", cfg.method, model_arch(cfg)).into_bytes(),
                );
                fitted.artifacts(&teacher, &student, &mut t)?;
            }
        }
        (Experiment::Boston, Shared::Boston { table, target }) => {
            let split = SplitSpec {
                train_n: cfg.data.train_n,
                test_n: cfg.data.test_n,
                seed,
            };
            let (train, test) = split_regression_table(table, target, split, cfg.data.standardize_targets)?;
            let start = Instant::now();
            let fitted = fit_small(cfg, &teacher, &student, &train, noise, seed)?;
            t.fit_seconds = start.elapsed().as_secs_f64();
            let pred = fitted.predictor(&teacher, &student);
            t.metric("test_loglik", test_loglik_reg(pred, &test, noise)?.value);
            t.metric("test_rmse", test_rmse_reg(pred, &test, noise)?.value);
            fitted.common_metrics(&mut t);
            if keep_artifacts {
                fitted.artifacts(&teacher, &student, &mut t)?;
            }
        }
        (Experiment::Mnist, Shared::Mnist { train, valid }) => mnist_trial(cfg, &teacher, &student, train, valid, seed, keep_artifacts, &mut t)?,
        (Experiment::ConjugateCheck, Shared::Conjugate { data, ys }) => {
            let start = Instant::now();
            let fitted = fit_small(cfg, &teacher, &student, data, noise, seed)?;
            t.fit_seconds = start.elapsed().as_secs_f64();
            conjugate_metrics(cfg, &teacher, &fitted, ys, &mut t)?;
            if keep_artifacts {
                fitted.artifacts(&teacher, &student, &mut t)?;
            }
        }
        _ => unreachable!("shared data always matches the experiment"),
    }
    Ok(t)
}

fn model_arch(cfg: &ExperimentConfig) -> String {
    match cfg.method {
        Method::Distill => format!("student {} teacher {}", cfg.student_arch, cfg.arch),
        _ => cfg.arch.clone(),
    }
}

#[allow(clippy::too_many_arguments)]
fn mnist_trial(
    cfg: &ExperimentConfig,
    teacher: &MlpSpec,
    student: &MlpSpec,
    train: &Dataset,
    valid: &Dataset,
    seed: u64,
    keep_artifacts: bool,
    t: &mut Trial,
) -> Result<(), CliError> {
    let Targets::Classes { labels, .. } = valid.targets() else {
        unreachable!("mnist targets are classes")
    };
    let chain = chain_for(cfg, seed);
    let start = Instant::now();
    let report = |t: &mut Trial, prefix: &str, probs: &Matrix| {
        t.metric(&format!("{prefix}test_error_pct"), 100.0 * error_rate_from_probs(probs, labels));
        t.metric(&format!("{prefix}test_loglik"), loglik_from_probs(probs, labels));
    };
    match cfg.method {
        Method::Sgd => {
            let (last, _) = run_chain_with_sink(ChainKind::Sgd, teacher, train, &chain, None, &mut NullSink)?;
            t.fit_seconds = start.elapsed().as_secs_f64();
            report(t, "", &class_probs_batch(Predictor::single(teacher, &last), valid.inputs())?);
            if keep_artifacts {
                t.artifact("params.bdk", encode_params(teacher, &last)?);
            }
        }
        Method::Sgld => {
            let mut sink = OnlineClassPredictive::new(teacher, valid.inputs().clone())?;
            run_chain_with_sink(ChainKind::SGLD, teacher, train, &chain, None, &mut sink)?;
            t.fit_seconds = start.elapsed().as_secs_f64();
            report(t, "", &sink.probs()?);
            t.metric("n_samples", sink.count() as f64);
        }
        Method::Distill => {
            let mut sink = OnlineClassPredictive::new(teacher, valid.inputs().clone())?;
            let dc = distill_config(cfg, train, seed);
            let out = run_distilled_sgld_with_sink(teacher, student, train, &dc, None, &mut sink)?;
            t.fit_seconds = start.elapsed().as_secs_f64();
            report(t, "", &class_probs_batch(Predictor::single(student, &out.student), valid.inputs())?);
            report(t, "teacher_", &sink.probs()?);
            t.metric("n_samples", sink.count() as f64);
            if keep_artifacts {
                t.artifact("student.bdk", encode_params(student, &out.student)?);
                let mut csv = Vec::new();
                write_history_csv(&out.history, &mut csv).expect("in-memory write");
                t.artifact("history.csv", csv);
            }
        }
        Method::Hmc => unreachable!("rejected at config time"),
    }
    Ok(())
}

/// Mean and batch-means standard error of a correlated chain.
fn batch_means(xs: &[f64], batches: usize) -> (f64, f64) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let b = batches.min(n).max(2);
    let size = n / b;
    if size == 0 {
        return (mean, f64::NAN);
    }
    let means: Vec<f64> = (0..b).map(|i| xs[i * size..(i + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let mm = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - mm).powi(2)).sum::<f64>() / (b - 1) as f64;
    (mean, (var / b as f64).sqrt())
}

fn conjugate_metrics(cfg: &ExperimentConfig, spec: &MlpSpec, fitted: &Fitted, ys: &[f64], t: &mut Trial) -> Result<(), CliError> {
    if spec.widths() != [1, 1] {
        return Err(CliError::Config("conjugate-check needs model.arch = 1-1".into()));
    }
    let lambda = cfg.chain.prior_precision;
    let lambda_n = cfg.noise_precision.unwrap_or(1.0);
    let post_prec = lambda + ys.len() as f64 * lambda_n;
    let m_star = lambda_n * ys.iter().sum::<f64>() / post_prec;
    let v_star = 1.0 / post_prec;
    t.metric("truth_mean", m_star);
    t.metric("truth_var", v_star);
    // parameter layout is [w, b]; the input is zero so only b sees the data
    match fitted {
        Fitted::Plugin(p) => {
            t.metric("mode", p[1]);
            t.metric("mode_abs_error", (p[1] - m_star).abs());
        }
        Fitted::Ensemble { ens, .. } | Fitted::Distilled { teacher: ens, .. } => {
            let b: Vec<f64> = ens.samples.iter().map(|s| s[1]).collect();
            let (mean, se) = batch_means(&b, 50);
            let var = b.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b.len() as f64 - 1.0);
            t.metric("sample_mean", mean);
            t.metric("sample_mean_se", se);
            t.metric("mean_z", (mean - m_star).abs() / se);
            t.metric("sample_var", var);
            t.metric("var_ratio", var / v_star);
        }
    }
    fitted.common_metrics(t);
    Ok(())
}

fn meta(cfg: &ExperimentConfig, warnings: &[String]) -> String {
    let mut s = String::new();
    s.push_str(&format!("experiment = {}\nmethod = {}\n", cfg.experiment, cfg.method));
    s.push_str(&format!("source = {}\n", cfg.source));
    s.push_str(&format!("scale = {}\n", cfg.scale));
    s.push_str(&format!("master_seed = {}\nn_trials = {}\n", cfg.seed, cfg.n_trials));
    s.push_str("trial_seed = derive(master_seed, trial index)\n");
    s.push_str("metric_aggregate = mean over trials; standard_error = sample sd / sqrt(n_trials)\n");
    match cfg.experiment {
        Experiment::Toy2d => {
            s.push_str("kl_direction = KL(hmc reference || method), mean over grid cells\n");
            s.push_str("test_set = 20 fresh points from the same generator\n");
        }
        Experiment::Boston => {
            s.push_str("inputs = standardized with training-split statistics\n");
            if cfg.data.standardize_targets {
                s.push_str("targets = standardized for training; log-likelihoods reported in original units\n");
                s.push_str("noise_precision = in standardized target units\n");
            }
            s.push_str("split_seed = trial seed\n");
        }
        Experiment::Mnist => {
            s.push_str("pixels = divided by 126\n");
            s.push_str("test_set = held-out validation split\n");
        }
        _ => {}
    }
    for w in warnings {
        s.push_str(&format!("warning = {w}\n"));
    }
    s
}

fn trials_csv(cfg: &ExperimentConfig, trials: &[Trial]) -> String {
    let mut s = String::from("trial,seed,metric,value\n");
    for (i, t) in trials.iter().enumerate() {
        for (k, v) in &t.metrics {
            s.push_str(&format!("{i},{},{k},{}\n", trial_seed(cfg.seed, i), fmt_f64(*v)));
        }
    }
    s
}

fn timing_csv(trials: &[Trial]) -> String {
    let mut s = String::from("trial,fit_seconds,iterations,ms_per_iteration\n");
    for (i, t) in trials.iter().enumerate() {
        let per = if t.iterations > 0 { 1e3 * t.fit_seconds / t.iterations as f64 } else { f64::NAN };
        s.push_str(&format!("{i},{:.3},{},{:.4}\n", t.fit_seconds, t.iterations, per));
    }
    s
}

fn aggregate(trials: &[Trial]) -> Result<Vec<MetricsReport>, CliError> {
    let names: Vec<&String> = trials[0].metrics.iter().map(|(k, _)| k).collect();
    names
        .iter()
        .map(|name| {
            let vals: Vec<f64> = trials
                .iter()
                .map(|t| t.metrics.iter().find(|(k, _)| k == *name).map(|(_, v)| *v).unwrap_or(f64::NAN))
                .collect();
            Ok(MetricsReport::aggregate(name.as_str(), &vals)?)
        })
        .collect()
}

/// Runs every trial and writes the output directory.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, data_dir: &Path) -> Result<RunSummary, CliError> {
    let start = Instant::now();
    let mut warnings = Vec::new();
    if cfg.method == Method::Distill {
        let probe = DistillConfig {
            teacher: cfg.chain.clone(),
            student: cfg.student.clone(),
            gen: bdk_core::distill::StudentDataGen::uniform_square(0.0, 1.0, 1),
            iterations: cfg.chain.iterations,
            seed: 0,
            log_every: 0,
        };
        warnings.extend(probe.warnings());
    }
    let shared = prepare(cfg, data_dir)?;
    let results = par::map_indexed(cfg.n_trials, |i| run_trial(cfg, &shared, i));
    let mut trials = Vec::with_capacity(results.len());
    for r in results {
        trials.push(r?);
    }
    let metrics = aggregate(&trials)?;

    let dir = OutDir::create(out)?;
    dir.write("config.resolved.txt", cfg.render().as_bytes())?;
    dir.write("meta.txt", meta(cfg, &warnings).as_bytes())?;
    dir.write("trials.csv", trials_csv(cfg, &trials).as_bytes())?;
    dir.write("timing.csv", timing_csv(&trials).as_bytes())?;
    if cfg.checkpoint {
        for (name, bytes) in &trials[0].artifacts {
            dir.write(name, bytes)?;
        }
    } else {
        for (name, bytes) in trials[0].artifacts.iter().filter(|(n, _)| !n.ends_with(".bdk")) {
            dir.write(name, bytes)?;
        }
    }
    // written last so its presence marks a complete run
    dir.write("metrics.csv", render_metrics(&metrics).as_bytes())?;
    Ok(RunSummary {
        out: out.to_path_buf(),
        metrics,
        warnings,
        seconds: start.elapsed().as_secs_f64(),
    })
}

//! Property suites that run without any data files (`bdk check`).

use std::time::Instant;

use bdk_core::data::{gen_toy1d, gen_toy2d, Dataset};
use bdk_core::distill::{run_distilled_sgld, DistillConfig, StudentConfig, StudentDataGen};
use bdk_core::eval::{
    class_probs_batch_with, ensemble_outputs, kl_grid, predict_reg_batch, predictive_grid, Grid2D, GridGeometry,
    Predictor,
};
use bdk_core::distill::student_gradient;
use bdk_core::nn::{self, init_params, Head};
use bdk_core::objectives::{
    distill_loss_classification, distill_loss_regression, log_softmax, log_softmax_backward, posterior_grad_estimate,
};
use bdk_core::samplers::{hmc_sample, HmcConfig, LogDensity};
use bdk_core::par::Exec;
use bdk_core::rng::{self, Stream};
use bdk_core::samplers::{run_chain, ChainConfig, ChainKind, StepSchedule};
use bdk_core::{Matrix, MlpSpec, NoiseModel, ParamVector, PosteriorEnsemble, Predictive};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub type Outcome = Result<String, String>;

/// Gradient and sampler oracles against independent references.
pub const ORACLES: &[(&str, fn() -> Outcome)] = &[
    ("gradient_finite_differences", gradient_oracle),
    ("closed_form_distill_gradients", closed_form_oracle),
    ("sgld_conjugate_gaussian", sgld_conjugate_oracle),
    ("hmc_correlated_gaussian", hmc_gaussian_oracle),
    ("noiseless_sgld_is_sgd", noiseless_sgld_oracle),
];

/// Structural properties of the predictive and sampling code.
pub const SUITES: &[(&str, fn() -> Outcome)] = &[
    ("kl_nonnegative_and_zero_on_equal", kl_suite),
    ("simplex_normalization", simplex_suite),
    ("mixture_variance_lower_bound", mixture_variance_suite),
    ("minibatch_enumeration_unbiased", minibatch_suite),
    ("retained_sample_count", retention_suite),
    ("bit_exact_determinism", determinism_suite),
];

pub fn run_suite(name: &'static str, f: fn() -> Outcome) -> SuiteResult {
    let start = Instant::now();
    let r = f();
    let seconds = start.elapsed().as_secs_f64();
    let (passed, detail) = match r {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    SuiteResult { name, passed, detail, seconds }
}

/// Runs oracles and property suites, or those whose name contains `filter`.
pub fn run_all(filter: Option<&str>) -> Vec<SuiteResult> {
    ORACLES
        .iter()
        .chain(SUITES)
        .filter(|(n, _)| filter.is_none_or(|f| n.contains(f)))
        .map(|(n, f)| run_suite(n, *f))
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_grid(r: &mut impl Rng, geometry: GridGeometry, k: usize) -> Grid2D {
    let cells = (0..geometry.nx * geometry.ny)
        .map(|_| {
            // occasionally very peaked cells to exercise the clamp
            let scale = if r.random_bool(0.2) { 40.0 } else { 2.0 };
            let logits: Vec<f64> = (0..k).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect();
            Predictive::categorical(log_softmax(&logits)).expect("finite logits")
        })
        .collect();
    Grid2D { geometry, cells }
}

fn kl_suite() -> Outcome {
    let mut r = rng::stream(1, Stream::Data, 100);
    let geometry = GridGeometry { x_range: (-1.0, 1.0), y_range: (-1.0, 1.0), nx: 6, ny: 5 };
    let mut min_kl = f64::INFINITY;
    for case in 0..300 {
        let k = 2 + case % 5;
        let a = random_grid(&mut r, geometry, k);
        let b = random_grid(&mut r, geometry, k);
        let self_kl = kl_grid(&a, &a).map_err(|e| e.to_string())?;
        ensure(self_kl == 0.0, || format!("case {case}: KL(a, a) = {self_kl}"))?;
        let kl = kl_grid(&a, &b).map_err(|e| e.to_string())?;
        ensure(kl >= 0.0 && kl.is_finite(), || format!("case {case}: KL(a, b) = {kl}"))?;
        min_kl = min_kl.min(kl);
    }
    Ok(format!("300 random grid pairs, min KL(a, b) = {min_kl:.3e}, KL(a, a) = 0"))
}

fn random_ensemble(spec: &MlpSpec, s: usize, seed: u64, scale: f64) -> PosteriorEnsemble {
    let samples = (0..s)
        .map(|i| init_params(spec, &mut rng::stream(seed, Stream::TeacherInit, i as u64), scale).expect("valid spec"))
        .collect();
    PosteriorEnsemble::from_samples(spec.clone(), samples, "random").expect("matching lengths")
}

fn random_inputs(seed: u64, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut r = rng::stream(seed, Stream::StudentData, 0);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect())
        .expect("shape")
}

fn simplex_suite() -> Outcome {
    let mut worst = 0.0f64;
    for (case, widths) in [vec![2, 10, 2], vec![3, 8, 8, 5], vec![5, 20, 10]].into_iter().enumerate() {
        let spec = MlpSpec::classifier(widths).map_err(|e| e.to_string())?;
        let ens = random_ensemble(&spec, 9, case as u64, 3.0);
        let x = random_inputs(case as u64, 500, spec.input_dim(), 5.0);
        for pred in [Predictor::Ensemble(&ens), Predictor::single(&spec, &ens.samples[0])] {
            let p = class_probs_batch_with(Exec::Parallel, pred, &x).map_err(|e| e.to_string())?;
            for row in p.iter_rows() {
                ensure(row.iter().all(|v| (0.0..=1.0).contains(v)), || format!("probability out of [0, 1]: {row:?}"))?;
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure(worst <= 1e-12, || format!("row sums deviate from 1 by {worst:e}"))?;
    Ok(format!("3000 predictive rows, max |sum - 1| = {worst:.2e}"))
}

fn mixture_variance_suite() -> Outcome {
    let spec = MlpSpec::new(vec![1, 10, 1], Head::RegressionMeanOnly).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for (case, lambda_n) in [0.1, 1.0, 1.25, 50.0].into_iter().enumerate() {
        let noise = NoiseModel::new(lambda_n).map_err(|e| e.to_string())?;
        let ens = random_ensemble(&spec, 25, 10 + case as u64, 1.5);
        let x = random_inputs(case as u64, 200, 1, 6.0);
        let f = ensemble_outputs(&ens, &x).map_err(|e| e.to_string())?;
        let moments = predict_reg_batch(Predictor::Ensemble(&ens), &x, Some(noise)).map_err(|e| e.to_string())?;
        for (row, (_, sd)) in f.iter_rows().zip(moments) {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let spread = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / row.len() as f64;
            let var = sd * sd;
            let tol = 1e-9 * var.max(1.0);
            ensure(var + tol >= noise.variance(), || format!("variance {var} below noise variance {}", noise.variance()))?;
            ensure(var + tol >= spread, || format!("variance {var} below ensemble spread {spread}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} mixtures: predictive variance >= max(noise, spread)"))
}

fn minibatch_suite() -> Outcome {
    let mut report = Vec::new();
    let cases: Vec<(MlpSpec, Dataset, Option<NoiseModel>)> = vec![
        (MlpSpec::classifier(vec![2, 5, 2]).map_err(|e| e.to_string())?, gen_toy2d(3).gather(&[0, 4, 11, 17]), None),
        (
            MlpSpec::new(vec![1, 6, 1], Head::RegressionMeanOnly).map_err(|e| e.to_string())?,
            gen_toy1d(4).gather(&[1, 2, 3, 5, 8]),
            Some(NoiseModel::new(1.0 / 9.0).map_err(|e| e.to_string())?),
        ),
    ];
    for (case, (spec, data, noise)) in cases.into_iter().enumerate() {
        let theta = init_params(&spec, &mut rng::stream(case as u64, Stream::TeacherInit, 0), 1.0).map_err(|e| e.to_string())?;
        let n = data.len();
        let full = posterior_grad_estimate(&spec, &theta, &data, n, 1.0, noise).map_err(|e| e.to_string())?;
        // every ordered pair: minibatches are drawn with replacement
        let mut mean = vec![0.0; theta.len()];
        for i in 0..n {
            for j in 0..n {
                let est = posterior_grad_estimate(&spec, &theta, &data.gather(&[i, j]), n, 1.0, noise).map_err(|e| e.to_string())?;
                for (m, g) in mean.iter_mut().zip(est.grad.iter()) {
                    *m += g / (n * n) as f64;
                }
            }
        }
        let err = mean
            .iter()
            .zip(full.grad.iter())
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max);
        ensure(err <= 1e-10, || format!("case {case}: enumerated mean differs from full gradient by {err:e}"))?;
        report.push(format!("N={n} M=2 err {err:.1e}"));
    }
    Ok(report.join("; "))
}

fn retention_suite() -> Outcome {
    let mut r = rng::stream(2, Stream::Data, 200);
    for _ in 0..2000 {
        let t = r.random_range(1..5000usize);
        let b = r.random_range(0..t);
        let tau = r.random_range(1..200usize);
        let cfg = ChainConfig { iterations: t, burn_in: b, thin: tau, ..ChainConfig::default() };
        let counted = (1..=t).filter(|&i| cfg.retains(i)).count();
        ensure(counted == (t - b) / tau && cfg.retained_count() == counted, || {
            format!("T={t} B={b} tau={tau}: counted {counted}, formula {}", (t - b) / tau)
        })?;
    }
    let data = gen_toy2d(5);
    let spec = MlpSpec::classifier(vec![2, 4, 2]).map_err(|e| e.to_string())?;
    for (t, b, tau) in [(1000, 100, 10), (1000, 105, 10), (777, 0, 7), (50, 49, 3)] {
        let cfg = ChainConfig {
            eta: StepSchedule::Constant(1e-3),
            iterations: t,
            burn_in: b,
            thin: tau,
            batch_size: 5,
            seed: 9,
            ..ChainConfig::default()
        };
        let n = run_chain(ChainKind::SGLD, &spec, &data, &cfg, None).map_err(|e| e.to_string())?.ensemble.len();
        ensure(n == (t - b) / tau, || format!("chain T={t} B={b} tau={tau} kept {n}"))?;
    }
    Ok("2000 random (T, B, tau) triples and 4 real chains keep floor((T - B) / tau)".into())
}

fn bits(p: &ParamVector) -> Vec<u64> {
    p.iter().map(|v| v.to_bits()).collect()
}

fn determinism_suite() -> Outcome {
    let data = gen_toy2d(6);
    let teacher = MlpSpec::classifier(vec![2, 10, 2]).map_err(|e| e.to_string())?;
    let student = MlpSpec::classifier(vec![2, 10, 10, 2]).map_err(|e| e.to_string())?;
    let cfg = ChainConfig {
        eta: StepSchedule::Constant(5e-3),
        iterations: 2000,
        burn_in: 500,
        thin: 50,
        batch_size: 5,
        seed: 11,
        ..ChainConfig::default()
    };
    let a = run_chain(ChainKind::SGLD, &teacher, &data, &cfg, None).map_err(|e| e.to_string())?;
    let b = run_chain(ChainKind::SGLD, &teacher, &data, &cfg, None).map_err(|e| e.to_string())?;
    ensure(bits(&a.last) == bits(&b.last), || "SGLD reruns differ".into())?;
    ensure(a.ensemble.samples.iter().zip(&b.ensemble.samples).all(|(x, y)| bits(x) == bits(y)), || {
        "SGLD ensembles differ".into()
    })?;

    let dc = DistillConfig {
        teacher: cfg.clone(),
        student: StudentConfig { batch_size: 20, ..StudentConfig::default() },
        gen: StudentDataGen::uniform_square(-10.0, 10.0, 2),
        iterations: 2000,
        seed: 12,
        log_every: 0,
    };
    let d1 = run_distilled_sgld(&teacher, &student, &data, &dc, None).map_err(|e| e.to_string())?;
    let d2 = run_distilled_sgld(&teacher, &student, &data, &dc, None).map_err(|e| e.to_string())?;
    ensure(bits(&d1.student) == bits(&d2.student), || "distilled student reruns differ".into())?;

    let geometry = GridGeometry { nx: 40, ny: 40, ..GridGeometry::default() };
    let centres = geometry.centres();
    let ens = Predictor::Ensemble(&a.ensemble);
    let par = class_probs_batch_with(Exec::Parallel, ens, &centres).map_err(|e| e.to_string())?;
    let seq = class_probs_batch_with(Exec::Sequential, ens, &centres).map_err(|e| e.to_string())?;
    ensure(par.as_slice().iter().zip(seq.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()), || {
        "parallel and sequential grid evaluation differ".into()
    })?;
    let g1 = predictive_grid(ens, geometry, None).map_err(|e| e.to_string())?;
    let g2 = predictive_grid(ens, geometry, None).map_err(|e| e.to_string())?;
    ensure(g1.cells == g2.cells, || "grid reruns differ".into())?;
    Ok(format!(
        "SGLD ({} samples), distilled student and {}-cell grid reproduce bit for bit",
        a.ensemble.len(),
        geometry.nx * geometry.ny
    ))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn uniform_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-2.0..2.0)).collect()).expect("shape")
}

fn random_spec(r: &mut impl Rng, head: usize) -> MlpSpec {
    let mut widths = vec![r.random_range(1..5)];
    for _ in 0..r.random_range(0..3) {
        widths.push(r.random_range(1..7));
    }
    let h = match head {
        0 => {
            let k = r.random_range(2..5);
            widths.push(k);
            Head::SoftmaxClassifier(k)
        }
        1 => {
            widths.push(1);
            Head::RegressionMeanOnly
        }
        _ => {
            widths.push(2);
            Head::RegressionMeanLogVar
        }
    };
    MlpSpec::new(widths, h).expect("valid widths")
}

/// Smallest |pre-activation| of any hidden unit; differences across a ReLU
/// kink are meaningless, so such draws are redrawn.
fn kink_margin(spec: &MlpSpec, p: &ParamVector, x: &Matrix) -> f64 {
    let (_, trace) = nn::forward(spec, p, x).expect("shapes");
    let n = trace.pre_activations.len();
    trace.pre_activations[..n - 1]
        .iter()
        .flat_map(|z| z.as_slice().iter().copied())
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn central_diff(p: &ParamVector, h: f64, f: impl Fn(&ParamVector) -> f64) -> Vec<f64> {
    (0..p.len())
        .map(|i| {
            let mut a = p.clone();
            let mut b = p.clone();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

fn gradient_oracle() -> Outcome {
    let mut r = rng::stream(11, Stream::Data, 300);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 50 {
        let spec = random_spec(&mut r, done % 3);
        let p = init_params(&spec, &mut r, 1.5).map_err(|e| e.to_string())?;
        let rows = r.random_range(1..4);
        let x = uniform_matrix(&mut r, rows, spec.input_dim());
        if kink_margin(&spec, &p, &x) < 1e-3 {
            continue;
        }
        let g_out = uniform_matrix(&mut r, rows, spec.output_dim());
        let (_, trace) = nn::forward(&spec, &p, &x).map_err(|e| e.to_string())?;
        let g = nn::backward(&spec, &p, &trace, &g_out).map_err(|e| e.to_string())?;
        let fd = central_diff(&p, h, |q| {
            let y = nn::predict(&spec, q, &x).expect("shapes");
            y.as_slice().iter().zip(g_out.as_slice()).map(|(a, b)| a * b).sum()
        });
        worst = g.iter().zip(&fd).fold(worst, |w, (a, b)| w.max(rel_err(*a, *b)));
        done += 1;
    }
    // the student objective end to end, both tasks
    let noise = Some(NoiseModel::new(2.0).map_err(|e| e.to_string())?);
    let pairs = [
        (MlpSpec::classifier(vec![2, 4, 3]), MlpSpec::classifier(vec![2, 5, 3])),
        (MlpSpec::new(vec![1, 4, 1], Head::RegressionMeanOnly), MlpSpec::new(vec![1, 5, 2], Head::RegressionMeanLogVar)),
    ];
    let mut students = 0;
    for (t, s) in pairs {
        let (teacher, student) = (t.map_err(|e| e.to_string())?, s.map_err(|e| e.to_string())?);
        let theta = init_params(&teacher, &mut r, 1.0).map_err(|e| e.to_string())?;
        loop {
            let w = init_params(&student, &mut r, 1.0).map_err(|e| e.to_string())?;
            let x = uniform_matrix(&mut r, 5, student.input_dim());
            if kink_margin(&student, &w, &x) < 1e-3 {
                continue;
            }
            let (_, g) = student_gradient(&student, &w, &theta, &teacher, &x, noise).map_err(|e| e.to_string())?;
            let fd = central_diff(&w, h, |q| student_gradient(&student, q, &theta, &teacher, &x, noise).expect("valid").0);
            worst = g.iter().zip(&fd).fold(worst, |m, (a, b)| m.max(rel_err(*a, *b)));
            students += 1;
            break;
        }
    }
    ensure(worst <= 1e-6, || format!("worst relative error {worst:e} > 1e-6"))?;
    Ok(format!("50 backprop triples + {students} student objectives, worst relative error {worst:.2e}"))
}

fn closed_form_oracle() -> Outcome {
    let mut r = rng::stream(12, Stream::Data, 300);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let f = r.random_range(-3.0..3.0);
        let mu = r.random_range(-3.0..3.0);
        let alpha = r.random_range(-2.0..2.0);
        let noise = NoiseModel::new(r.random_range(0.2..5.0)).map_err(|e| e.to_string())?;
        let (_, dmu, dalpha) = distill_loss_regression(f, mu, alpha, noise);
        let l = |m: f64, a: f64| distill_loss_regression(f, m, a, noise).0;
        worst = worst.max(rel_err(dmu, (l(mu + h, alpha) - l(mu - h, alpha)) / (2.0 * h)));
        worst = worst.max(rel_err(dalpha, (l(mu, alpha + h) - l(mu, alpha - h)) / (2.0 * h)));

        let k = r.random_range(2..6);
        let t: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..2.0)).collect();
        let p: Vec<f64> = log_softmax(&t).iter().map(|v| v.exp()).collect();
        let loss_z = |z: &[f64]| distill_loss_classification(&p, &log_softmax(z)).expect("valid").0;
        let z: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..2.0)).collect();
        let lz = log_softmax(&z);
        let (_, gb) = distill_loss_classification(&p, &lz).map_err(|e| e.to_string())?;
        let gz = log_softmax_backward(&lz, &gb);
        for j in 0..k {
            // dL/dbeta_k = -p_k
            worst = worst.max(rel_err(gb[j], -p[j]));
            let mut a = z.clone();
            let mut b = z.clone();
            a[j] += h;
            b[j] -= h;
            worst = worst.max(rel_err(gz[j], (loss_z(&a) - loss_z(&b)) / (2.0 * h)));
        }
    }
    ensure(worst <= 1e-8, || format!("worst relative error {worst:e} > 1e-8"))?;
    Ok(format!("50 regression and 50 classification cases, worst relative error {worst:.2e}"))
}

fn sgld_conjugate_oracle() -> Outcome {
    let ys = [0.3, -1.2, 2.0, 0.7, 1.1, -0.4, 0.9, 1.6, 0.2, 0.8];
    let spec = MlpSpec::new(vec![1, 1], Head::RegressionMeanOnly).map_err(|e| e.to_string())?;
    let data = Dataset::new(Matrix::zeros(ys.len(), 1), bdk_core::data::Targets::Real(ys.to_vec())).map_err(|e| e.to_string())?;
    let post_prec = 1.0 + ys.len() as f64;
    let m_star = ys.iter().sum::<f64>() / post_prec;
    let v_star = 1.0 / post_prec;
    let cfg = ChainConfig {
        eta: StepSchedule::Constant(2e-3),
        iterations: 201_000,
        burn_in: 1_000,
        thin: 10,
        batch_size: ys.len(),
        prior_precision: 1.0,
        init_scale: 1.0,
        log_every: 0,
        seed: 42,
    };
    let noise = Some(NoiseModel::new(1.0).map_err(|e| e.to_string())?);
    let out = run_chain(ChainKind::SGLD, &spec, &data, &cfg, noise).map_err(|e| e.to_string())?;
    let b: Vec<f64> = out.ensemble.samples.iter().map(|s| s[1]).collect();
    let (mean, se) = batch_means(&b, 50);
    let var = b.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b.len() as f64 - 1.0);
    let z = (mean - m_star).abs() / se;
    let ratio = var / v_star;
    ensure(z <= 3.0, || format!("mean {mean:.4} vs {m_star:.4}: {z:.2} standard errors"))?;
    ensure((0.8..=1.3).contains(&ratio), || format!("variance ratio {ratio:.3} outside [0.8, 1.3]"))?;
    Ok(format!("{} samples: mean off by {z:.2} SE, variance ratio {ratio:.3}", b.len()))
}

/// Mean and batch-means standard error.
fn batch_means(xs: &[f64], batches: usize) -> (f64, f64) {
    let n = xs.len();
    let size = n / batches;
    let mean = xs.iter().sum::<f64>() / n as f64;
    let means: Vec<f64> = (0..batches).map(|i| xs[i * size..(i + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let mm = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - mm).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (mean, (var / batches as f64).sqrt())
}

struct Corr2 {
    rho: f64,
}

impl LogDensity for Corr2 {
    fn dim(&self) -> usize {
        2
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = 1.0 - self.rho * self.rho;
        let px = (x[0] - self.rho * x[1]) / d;
        let py = (x[1] - self.rho * x[0]) / d;
        grad[0] = -px;
        grad[1] = -py;
        -0.5 * (x[0] * px + x[1] * py)
    }
}

fn hmc_gaussian_oracle() -> Outcome {
    let rho = 0.5;
    let mut cfg = HmcConfig::new(0.25, 8, 20_000, 500);
    cfg.jitter = 0.2;
    let out = hmc_sample(&Corr2 { rho }, &[0.0, 0.0], &cfg, &mut rng::stream(8, Stream::Hmc, 0)).map_err(|e| e.to_string())?;
    let n = out.samples.len() as f64;
    let mx = out.samples.iter().map(|s| s[0]).sum::<f64>() / n;
    let my = out.samples.iter().map(|s| s[1]).sum::<f64>() / n;
    let vx = out.samples.iter().map(|s| (s[0] - mx).powi(2)).sum::<f64>() / (n - 1.0);
    let vy = out.samples.iter().map(|s| (s[1] - my).powi(2)).sum::<f64>() / (n - 1.0);
    let cxy = out.samples.iter().map(|s| (s[0] - mx) * (s[1] - my)).sum::<f64>() / (n - 1.0);
    // 5% of the unit marginal scale for means, relative 5% for second moments
    ensure(mx.abs() <= 0.05 && my.abs() <= 0.05, || format!("means ({mx:.3}, {my:.3})"))?;
    ensure((vx - 1.0).abs() <= 0.05 && (vy - 1.0).abs() <= 0.05, || format!("variances ({vx:.3}, {vy:.3})"))?;
    ensure((cxy - rho).abs() <= 0.05 * rho, || format!("covariance {cxy:.3} vs {rho}"))?;
    Ok(format!(
        "mean ({mx:.3}, {my:.3}), var ({vx:.3}, {vy:.3}), cov {cxy:.3}, acceptance {:.2}",
        out.acceptance_rate
    ))
}

fn noiseless_sgld_oracle() -> Outcome {
    let data = gen_toy2d(5);
    let spec = MlpSpec::classifier(vec![2, 10, 2]).map_err(|e| e.to_string())?;
    let mut cfg = ChainConfig {
        eta: StepSchedule::Constant(0.01),
        iterations: 2_000,
        batch_size: 5,
        seed: 17,
        ..ChainConfig::default()
    };
    let sgld = run_chain(ChainKind::Sgld { inject_noise: false }, &spec, &data, &cfg, None).map_err(|e| e.to_string())?;
    cfg.eta = StepSchedule::Constant(0.005);
    let sgd = run_chain(ChainKind::Sgd, &spec, &data, &cfg, None).map_err(|e| e.to_string())?;
    ensure(bits(&sgld.last) == bits(&sgd.last), || "parameters differ".into())?;
    Ok(format!("{} parameters bit-identical after {} steps", sgd.last.len(), cfg.iterations))
}

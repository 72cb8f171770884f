use std::f64::consts::PI;

use bdk_core::data::{Dataset, Targets};
use bdk_core::eval::{
    class_probs_batch, class_probs_batch_with, ensemble_predict_class, ensemble_predict_reg, kl_grid, misclass_rate,
    predictive_grid, reg_log_density, test_loglik_class, test_loglik_reg, write_grid_csv, write_grid_meta,
    GridGeometry, OnlineClassPredictive, Predictor,
};
use bdk_core::nn::{self, init_params, Head, MlpSpec, ParamVector};
use bdk_core::objectives::{log_softmax, nll_data_regression, NoiseModel, Predictive};
use bdk_core::par::Exec;
use bdk_core::samplers::SampleSink;
use bdk_core::{Error, Matrix, PosteriorEnsemble};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Single linear layer `in -> out` with zero weights and the given bias.
fn constant_net(input: usize, bias: &[f64], head: Head) -> (MlpSpec, ParamVector) {
    let spec = MlpSpec::new(vec![input, bias.len()], head).unwrap();
    let mut p = vec![0.0; input * bias.len()];
    p.extend_from_slice(bias);
    (spec, ParamVector::from_vec(p))
}

fn classes(x: Matrix, labels: Vec<usize>, k: usize) -> Dataset {
    Dataset::new(x, Targets::Classes { labels, classes: k }).unwrap()
}

fn random_ensemble(spec: &MlpSpec, s: usize, seed: u64) -> PosteriorEnsemble {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..s).map(|_| init_params(spec, &mut rng, 1.5).unwrap()).collect();
    PosteriorEnsemble::from_samples(spec.clone(), samples, "test").unwrap()
}

#[test]
fn single_sample_ensemble_is_the_model() {
    let spec = MlpSpec::classifier(vec![2, 5, 3]).unwrap();
    let e = random_ensemble(&spec, 1, 1);
    let x = [0.4, -1.3];
    let Predictive::Categorical { log_probs } = ensemble_predict_class(&e, &x).unwrap() else { panic!() };
    let out = nn::predict(&spec, &e.samples[0], &Matrix::from_vec(1, 2, x.to_vec()).unwrap()).unwrap();
    for (a, b) in log_probs.iter().zip(log_softmax(out.row(0))) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn opposite_one_hot_models_average_to_half() {
    let (spec, a) = constant_net(2, &[1000.0, 0.0], Head::SoftmaxClassifier(2));
    let (_, b) = constant_net(2, &[0.0, 1000.0], Head::SoftmaxClassifier(2));
    let e = PosteriorEnsemble::from_samples(spec, vec![a, b], "").unwrap();
    let p = ensemble_predict_class(&e, &[3.0, 4.0]).unwrap().probs().unwrap();
    assert_eq!(p, vec![0.5, 0.5]);
}

#[test]
fn ensemble_matches_brute_force_average() {
    let spec = MlpSpec::classifier(vec![2, 4, 3]).unwrap();
    let e = random_ensemble(&spec, 3, 2);
    let x = Matrix::from_rows(&[[0.1, 0.2], [-1.0, 2.0], [3.0, -0.5]]).unwrap();
    let p = class_probs_batch(Predictor::Ensemble(&e), &x).unwrap();
    for i in 0..3 {
        let mut want = [0.0; 3];
        for s in &e.samples {
            let out = nn::predict(&spec, s, &x.select_rows(&[i])).unwrap();
            for (w, l) in want.iter_mut().zip(log_softmax(out.row(0))) {
                *w += l.exp() / 3.0;
            }
        }
        for k in 0..3 {
            assert!((p.get(i, k) - want[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn regression_mixture_moments() {
    let noise = NoiseModel::new(4.0).unwrap();
    let spec = MlpSpec::new(vec![1, 3, 1], Head::RegressionMeanOnly).unwrap();
    let e = random_ensemble(&spec, 1, 3);
    let (_, sd) = ensemble_predict_reg(&e, &[0.5], noise).unwrap();
    assert!((sd - 0.5).abs() < 1e-15);

    let (spec, a) = constant_net(1, &[-1.0], Head::RegressionMeanOnly);
    let (_, b) = constant_net(1, &[1.0], Head::RegressionMeanOnly);
    let e = PosteriorEnsemble::from_samples(spec, vec![a, b], "").unwrap();
    let (m, sd) = ensemble_predict_reg(&e, &[0.0], NoiseModel::new(1e12).unwrap()).unwrap();
    assert_eq!(m, 0.0);
    assert!((sd - 1.0).abs() < 1e-9);
}

#[test]
fn regression_mixture_matches_monte_carlo() {
    let noise = NoiseModel::new(2.0).unwrap();
    let spec = MlpSpec::new(vec![1, 6, 1], Head::RegressionMeanOnly).unwrap();
    let e = random_ensemble(&spec, 7, 4);
    let x = [0.8];
    let (m, sd) = ensemble_predict_reg(&e, &x, noise).unwrap();
    let xm = Matrix::from_vec(1, 1, x.to_vec()).unwrap();
    let fs: Vec<f64> = e.samples.iter().map(|s| nn::predict(&spec, s, &xm).unwrap().get(0, 0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 1_000_000;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let f = fs[rng.random_range(0..fs.len())];
        let z: f64 = rng.sample(StandardNormal);
        let y = f + z * noise.variance().sqrt();
        s1 += y;
        s2 += y * y;
    }
    let mc_mean = s1 / n as f64;
    let mc_sd = (s2 / n as f64 - mc_mean * mc_mean).sqrt();
    let se_mean = sd / (n as f64).sqrt();
    // sd of a sample sd is about sd / sqrt(2n) for near-normal data; be generous for mixtures
    let se_sd = 2.0 * sd / (2.0 * n as f64).sqrt();
    assert!((mc_mean - m).abs() <= 3.0 * se_mean, "{mc_mean} vs {m}");
    assert!((mc_sd - sd).abs() <= 3.0 * se_sd, "{mc_sd} vs {sd}");
}

#[test]
fn classification_loglik_examples() {
    let x = Matrix::zeros(4, 1);
    let (spec, perfect0) = constant_net(1, &[1000.0, 0.0], Head::SoftmaxClassifier(2));
    let all0 = classes(x.clone(), vec![0; 4], 2);
    let r = test_loglik_class(Predictor::single(&spec, &perfect0), &all0).unwrap();
    assert_eq!(r.value, 0.0);
    assert_eq!((r.n_trials, r.standard_error), (1, 0.0));

    let (spec10, uniform) = constant_net(1, &[0.0; 10], Head::SoftmaxClassifier(10));
    let d = classes(Matrix::zeros(3, 1), vec![0, 5, 9], 10);
    let r = test_loglik_class(Predictor::single(&spec10, &uniform), &d).unwrap();
    assert!((r.value + 10f64.ln()).abs() < 1e-12);

    // probs (0.8, 0.2) everywhere, labels 0, 1, 0
    let (spec, p) = constant_net(1, &[(0.8f64 / 0.2).ln(), 0.0], Head::SoftmaxClassifier(2));
    let d = classes(Matrix::zeros(3, 1), vec![0, 1, 0], 2);
    let r = test_loglik_class(Predictor::single(&spec, &p), &d).unwrap();
    let want = (0.8f64.ln() + 0.2f64.ln() + 0.8f64.ln()) / 3.0;
    assert!((r.value - want).abs() < 1e-12);
}

#[test]
fn misclassification_examples() {
    let (spec, p0) = constant_net(1, &[1.0, 0.0], Head::SoftmaxClassifier(2));
    let pred = Predictor::single(&spec, &p0);
    assert_eq!(misclass_rate(pred, &classes(Matrix::zeros(3, 1), vec![0; 3], 2)).unwrap().value, 0.0);
    assert_eq!(misclass_rate(pred, &classes(Matrix::zeros(4, 1), vec![0, 1, 0, 1], 2)).unwrap().value, 0.5);
    assert_eq!(misclass_rate(pred, &classes(Matrix::zeros(4, 1), vec![0, 0, 1, 0], 2)).unwrap().value, 0.25);
    // a tie predicts the lowest class
    let (spec, tie) = constant_net(1, &[0.0, 0.0], Head::SoftmaxClassifier(2));
    let r = misclass_rate(Predictor::single(&spec, &tie), &classes(Matrix::zeros(2, 1), vec![0, 0], 2)).unwrap();
    assert_eq!(r.value, 0.0);
}

#[test]
fn regression_loglik_examples() {
    let noise = NoiseModel::new(1.25).unwrap();
    let (spec, a) = constant_net(1, &[0.3], Head::RegressionMeanOnly);
    let y = vec![1.0, -0.5];
    let test = Dataset::new(Matrix::zeros(2, 1), Targets::Real(y.clone())).unwrap();
    let e1 = PosteriorEnsemble::from_samples(spec.clone(), vec![a.clone()], "").unwrap();
    let r = test_loglik_reg(Predictor::Ensemble(&e1), &test, Some(noise)).unwrap();
    let want = -(nll_data_regression(0.3, 1.0, noise) + nll_data_regression(0.3, -0.5, noise)) / 2.0;
    assert!((r.value - want).abs() < 1e-12);

    // replicated model: logsumexp of identical terms minus ln S is exact
    let e5 = PosteriorEnsemble::from_samples(spec.clone(), vec![a.clone(); 5], "").unwrap();
    let r5 = test_loglik_reg(Predictor::Ensemble(&e5), &test, Some(noise)).unwrap();
    assert!((r5.value - r.value).abs() < 1e-13);

    // far-apart components, y on one of them
    let (_, far) = constant_net(1, &[100.0], Head::RegressionMeanOnly);
    let e2 = PosteriorEnsemble::from_samples(spec.clone(), vec![a.clone(), far], "").unwrap();
    let t = Dataset::new(Matrix::zeros(1, 1), Targets::Real(vec![0.3])).unwrap();
    let r = test_loglik_reg(Predictor::Ensemble(&e2), &t, Some(noise)).unwrap();
    let comp = -nll_data_regression(0.3, 0.3, noise);
    assert!((r.value - (comp - 2f64.ln())).abs() < 1e-12);

    // student with mu = y and alpha = 0
    let (sspec, s) = constant_net(1, &[0.3, 0.0], Head::RegressionMeanLogVar);
    let r = test_loglik_reg(Predictor::single(&sspec, &s), &t, None).unwrap();
    assert!((r.value + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);

    // standardized targets are reported in original units
    let mut t2 = t.clone();
    t2.target_stats = Some((22.5, 9.2));
    let r2 = test_loglik_reg(Predictor::single(&sspec, &s), &t2, None).unwrap();
    assert!((r2.value - (r.value - 9.2f64.ln())).abs() < 1e-15);
}

#[test]
fn mixture_density_matches_pointwise_logsumexp() {
    let noise = NoiseModel::new(3.0).unwrap();
    let spec = MlpSpec::new(vec![2, 5, 1], Head::RegressionMeanOnly).unwrap();
    let e = random_ensemble(&spec, 4, 6);
    let x = Matrix::from_rows(&[[0.0, 1.0], [1.0, -1.0]]).unwrap();
    let y = [0.2, -0.7];
    let ld = reg_log_density(Predictor::Ensemble(&e), &x, &y, Some(noise)).unwrap();
    for i in 0..2 {
        let dens: f64 = e
            .samples
            .iter()
            .map(|s| {
                let f = nn::predict(&spec, s, &x.select_rows(&[i])).unwrap().get(0, 0);
                (-nll_data_regression(f, y[i], noise)).exp()
            })
            .sum::<f64>()
            / 4.0;
        assert!((ld[i] - dens.ln()).abs() < 1e-12);
    }
}

#[test]
fn grids() {
    let g = GridGeometry { x_range: (-1.0, 1.0), y_range: (-1.0, 1.0), nx: 2, ny: 2 };
    let (spec, p) = constant_net(2, &[0.3, -0.1], Head::SoftmaxClassifier(2));
    let grid = predictive_grid(Predictor::single(&spec, &p), g, None).unwrap();
    assert!(grid.cells.iter().all(|c| *c == grid.cells[0]));
    assert_eq!(kl_grid(&grid, &grid).unwrap(), 0.0);

    let mut csv = Vec::new();
    write_grid_csv(&grid, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x,y,p_class0,p_class1");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("-0.5,-0.5,"));

    let mut meta = Vec::new();
    write_grid_meta(&grid, "test", &mut meta).unwrap();
    assert!(String::from_utf8(meta).unwrap().contains("kl_direction"));

    let (spec1, p1) = constant_net(1, &[0.0, 0.0], Head::SoftmaxClassifier(2));
    assert!(predictive_grid(Predictor::single(&spec1, &p1), g, None).is_err());
}

#[test]
fn ensemble_grid_is_per_cell_prediction() {
    let spec = MlpSpec::classifier(vec![2, 6, 2]).unwrap();
    let e = random_ensemble(&spec, 5, 7);
    let g = GridGeometry { x_range: (-3.0, 3.0), y_range: (-2.0, 2.0), nx: 7, ny: 4 };
    let grid = predictive_grid(Predictor::Ensemble(&e), g, None).unwrap();
    let centres = g.centres();
    for (c, cell) in centres.iter_rows().zip(&grid.cells) {
        let want = ensemble_predict_class(&e, c).unwrap().probs().unwrap();
        let got = cell.probs().unwrap();
        for (a, b) in want.iter().zip(&got) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn parallel_and_sequential_evaluation_agree_bitwise() {
    let spec = MlpSpec::classifier(vec![2, 20, 3]).unwrap();
    let e = random_ensemble(&spec, 9, 8);
    let x = GridGeometry::default().centres();
    let a = class_probs_batch_with(Exec::Parallel, Predictor::Ensemble(&e), &x).unwrap();
    let b = class_probs_batch_with(Exec::Sequential, Predictor::Ensemble(&e), &x).unwrap();
    assert!(a.as_slice().iter().zip(b.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn online_accumulator_matches_stored_ensemble() {
    let spec = MlpSpec::classifier(vec![2, 6, 3]).unwrap();
    let e = random_ensemble(&spec, 6, 9);
    let x = Matrix::from_rows(&[[0.5, 0.5], [-2.0, 1.0], [0.0, 3.0]]).unwrap();
    let mut acc = OnlineClassPredictive::new(&spec, x.clone()).unwrap();
    assert!(matches!(acc.probs(), Err(Error::EmptyEnsemble)));
    for (t, s) in e.samples.iter().enumerate() {
        acc.accept(t, s).unwrap();
    }
    let a = acc.probs().unwrap();
    let b = class_probs_batch(Predictor::Ensemble(&e), &x).unwrap();
    for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((p - q).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn ensemble_predictive_is_in_simplex(seed in 0u64..1000, s in 1usize..6, x0 in -10.0f64..10.0, x1 in -10.0f64..10.0) {
        let spec = MlpSpec::classifier(vec![2, 5, 4]).unwrap();
        let e = random_ensemble(&spec, s, seed);
        let p = ensemble_predict_class(&e, &[x0, x1]).unwrap().probs().unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn mixture_variance_is_at_least_noise(seed in 0u64..1000, s in 1usize..6, x in -5.0f64..5.0, lambda in 0.01f64..100.0) {
        let spec = MlpSpec::new(vec![1, 4, 1], Head::RegressionMeanOnly).unwrap();
        let e = random_ensemble(&spec, s, seed);
        let noise = NoiseModel::new(lambda).unwrap();
        let (_, sd) = ensemble_predict_reg(&e, &[x], noise).unwrap();
        prop_assert!(sd * sd >= noise.variance() * (1.0 - 1e-12));
    }

    #[test]
    fn grid_kl_is_nonnegative(sa in 0u64..500, sb in 0u64..500) {
        let spec = MlpSpec::classifier(vec![2, 5, 3]).unwrap();
        let g = GridGeometry { x_range: (-5.0, 5.0), y_range: (-5.0, 5.0), nx: 6, ny: 5 };
        let a = predictive_grid(Predictor::Ensemble(&random_ensemble(&spec, 2, sa)), g, None).unwrap();
        let b = predictive_grid(Predictor::Ensemble(&random_ensemble(&spec, 2, sb)), g, None).unwrap();
        prop_assert!(kl_grid(&a, &b).unwrap() >= 0.0);
        prop_assert_eq!(kl_grid(&a, &a).unwrap(), 0.0);
    }
}

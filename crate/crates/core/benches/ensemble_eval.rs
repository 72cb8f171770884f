use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bdk_core::eval::{class_probs_batch_with, ensemble_outputs_with, GridGeometry, Predictor};
use bdk_core::nn::{init_params, Head, MlpSpec};
use bdk_core::par::Exec;
use bdk_core::PosteriorEnsemble;

fn ensemble(spec: &MlpSpec, n: usize) -> PosteriorEnsemble {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let samples = (0..n).map(|_| init_params(spec, &mut rng, 1.0).unwrap()).collect();
    PosteriorEnsemble::from_samples(spec.clone(), samples, "bench").unwrap()
}

fn grid_classification(c: &mut Criterion) {
    let spec = MlpSpec::classifier(vec![2, 100, 2]).unwrap();
    let x = GridGeometry::default().centres();
    let mut group = c.benchmark_group("grid_class_probs");
    group.sample_size(10);
    for &s in &[10usize, 100] {
        let e = ensemble(&spec, s);
        for (label, exec) in [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)] {
            group.bench_with_input(BenchmarkId::new(label, s), &e, |b, e| {
                b.iter(|| class_probs_batch_with(exec, Predictor::Ensemble(e), &x).unwrap())
            });
        }
    }
    group.finish();
}

fn band_regression(c: &mut Criterion) {
    let spec = MlpSpec::new(vec![1, 100, 1], Head::RegressionMeanOnly).unwrap();
    let x = bdk_core::Matrix::from_vec(2000, 1, (0..2000).map(|i| -6.0 + 12.0 * i as f64 / 1999.0).collect()).unwrap();
    let e = ensemble(&spec, 200);
    let mut group = c.benchmark_group("band_outputs");
    group.sample_size(10);
    for (label, exec) in [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)] {
        group.bench_function(label, |b| b.iter(|| ensemble_outputs_with(exec, &e, &x).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, grid_classification, band_regression);
criterion_main!(benches);

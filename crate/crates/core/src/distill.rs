//! Online distillation of a Monte Carlo posterior predictive into a single
//! student network.
//!
//! Each joint iteration takes one SGLD step on the teacher, draws a fresh batch
//! of unlabeled student inputs, and takes one SGD step on the student against
//! the teacher's newest sample. Teacher and student never share random
//! streams, so the teacher trajectory is identical to a standalone SGLD run
//! with the same teacher seed.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{self, Head, MlpSpec, ParamVector};
use crate::objectives::{
    distill_loss_classification, distill_loss_regression, log_softmax, log_softmax_backward, NoiseModel,
};
use crate::rng::{self, Stream, StreamRng};
use crate::samplers::{
    ChainConfig, ChainKind, PosteriorEnsemble, SampleSink, StepSchedule, TeacherChain,
};

/// Source of unlabeled student inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum StudentDataGen {
    /// Independent uniform draws inside an axis-aligned box.
    UniformBox { lower: Vec<f64>, upper: Vec<f64> },
    /// Training rows picked with replacement plus per-feature Gaussian noise.
    PerturbTrain { source: Matrix, sigma: Vec<f64> },
}

impl StudentDataGen {
    pub fn uniform_square(lo: f64, hi: f64, dim: usize) -> Self {
        StudentDataGen::UniformBox {
            lower: vec![lo; dim],
            upper: vec![hi; dim],
        }
    }

    /// Perturbation with the same `sigma` on every feature.
    pub fn perturb(source: &Matrix, sigma: f64) -> Self {
        StudentDataGen::PerturbTrain {
            source: source.clone(),
            sigma: vec![sigma; source.cols()],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            StudentDataGen::UniformBox { lower, .. } => lower.len(),
            StudentDataGen::PerturbTrain { source, .. } => source.cols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StudentDataGen::UniformBox { lower, upper } => {
                if lower.len() != upper.len() || lower.is_empty() {
                    return Err(Error::shape("box bounds", lower.len(), upper.len()));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
                    return Err(Error::pre("uniform box needs lower < upper in every dimension"));
                }
            }
            StudentDataGen::PerturbTrain { source, sigma } => {
                if source.rows() == 0 {
                    return Err(Error::pre("perturbation generator has no source rows"));
                }
                if sigma.len() != source.cols() {
                    return Err(Error::shape("perturbation sigma", source.cols(), sigma.len()));
                }
                if sigma.iter().any(|s| !(*s >= 0.0)) {
                    return Err(Error::pre("perturbation sigma must be >= 0"));
                }
            }
        }
        Ok(())
    }
}

/// Draws `m` student inputs.
pub fn gen_student_batch<R: Rng + ?Sized>(gen: &StudentDataGen, m: usize, rng: &mut R) -> Result<Matrix> {
    if m == 0 {
        return Err(Error::pre("student batch size must be >= 1"));
    }
    gen.validate()?;
    let d = gen.dim();
    let mut out = Matrix::zeros(m, d);
    match gen {
        StudentDataGen::UniformBox { lower, upper } => {
            for i in 0..m {
                for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                    *v = rng.random_range(lower[j]..upper[j]);
                }
            }
        }
        StudentDataGen::PerturbTrain { source, sigma } => {
            for i in 0..m {
                let r = rng.random_range(0..source.rows());
                let src = source.row(r);
                for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                    let z: f64 = if sigma[j] > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                    *v = src[j] + sigma[j] * z;
                }
            }
        }
    }
    Ok(out)
}

/// Student-side hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentConfig {
    /// Learning-rate schedule `rho_t`.
    pub rho: StepSchedule,
    /// Student prior precision (weight decay) `gamma`.
    pub gamma: f64,
    pub batch_size: usize,
    pub init_scale: f64,
    /// Regression students only: SGD runs in coordinates where the mean
    /// output is `s * mu~` and the log-variance output is `alpha~ + 2 ln s`.
    /// The network and loss are unchanged; the mean column of the last layer
    /// gets its gradient multiplied by `s^2` and the log-variance bias starts
    /// at `2 ln s`; weight decay still acts on the original parameters.
    /// Targets far larger than one otherwise make the variance head inflate
    /// before the mean can fit. `1` is plain SGD.
    pub output_scale: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            rho: StepSchedule::Constant(1e-2),
            gamma: 1e-3,
            batch_size: 100,
            init_scale: std::f64::consts::SQRT_2,
            output_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    /// Teacher chain; its `iterations` field is ignored in favour of
    /// `iterations` below, while burn-in and thinning decide which teacher
    /// samples are retained for evaluation.
    pub teacher: ChainConfig,
    pub student: StudentConfig,
    pub gen: StudentDataGen,
    /// Joint iterations `T`.
    pub iterations: usize,
    /// Seeds the student init and student-data streams.
    pub seed: u64,
    /// History cadence (0 disables).
    pub log_every: usize,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate_step_params()?;
        self.student.rho.validate("student schedule")?;
        if !(self.student.gamma >= 0.0) {
            return Err(Error::pre("student prior precision must be >= 0"));
        }
        if self.student.batch_size == 0 {
            return Err(Error::pre("student batch size must be >= 1"));
        }
        if !(self.student.output_scale > 0.0 && self.student.output_scale.is_finite()) {
            return Err(Error::pre("student output scale must be positive and finite"));
        }
        self.gen.validate()
    }

    /// Non-fatal configuration concerns.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.teacher.prior_precision < self.student.gamma {
            w.push(format!(
                "teacher prior precision {} is below student prior precision {}; usually the teacher prior is much stronger",
                self.teacher.prior_precision, self.student.gamma
            ));
        }
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Task {
    Classification,
    Regression,
}

fn task_for(teacher: &MlpSpec, student: &MlpSpec, noise: Option<NoiseModel>) -> Result<Task> {
    if teacher.input_dim() != student.input_dim() {
        return Err(Error::HeadMismatch(format!(
            "teacher input {} vs student input {}",
            teacher.input_dim(),
            student.input_dim()
        )));
    }
    match (teacher.head(), student.head()) {
        (Head::SoftmaxClassifier(a), Head::SoftmaxClassifier(b)) if a == b => Ok(Task::Classification),
        (Head::RegressionMeanOnly, Head::RegressionMeanLogVar) => {
            if noise.is_none() {
                return Err(Error::pre("regression distillation needs a noise model"));
            }
            Ok(Task::Regression)
        }
        (t, s) => Err(Error::HeadMismatch(format!("teacher head {t:?} cannot teach student head {s:?}"))),
    }
}

/// Batch-mean distillation loss and its gradient with respect to the student
/// parameters (without the weight-decay term).
pub fn student_gradient(
    student_spec: &MlpSpec,
    w: &ParamVector,
    theta: &ParamVector,
    teacher_spec: &MlpSpec,
    batch: &Matrix,
    noise: Option<NoiseModel>,
) -> Result<(f64, ParamVector)> {
    let task = task_for(teacher_spec, student_spec, noise)?;
    let m = batch.rows();
    if m == 0 {
        return Err(Error::pre("empty student batch"));
    }
    let teacher_out = nn::predict(teacher_spec, theta, batch)?;
    let (student_out, trace) = nn::forward(student_spec, w, batch)?;
    let mut out_grad = Matrix::zeros(m, student_out.cols());
    let inv_m = 1.0 / m as f64;
    let mut loss = 0.0;
    for i in 0..m {
        match task {
            Task::Classification => {
                let tp: Vec<f64> = log_softmax(teacher_out.row(i)).iter().map(|v| v.exp()).collect();
                let beta = log_softmax(student_out.row(i));
                let (l, gb) = distill_loss_classification(&tp, &beta)?;
                let gz = log_softmax_backward(&beta, &gb);
                loss += l;
                for (o, g) in out_grad.row_mut(i).iter_mut().zip(gz) {
                    *o = g * inv_m;
                }
            }
            Task::Regression => {
                let f = teacher_out.get(i, 0);
                let (mu, alpha) = (student_out.get(i, 0), student_out.get(i, 1));
                let (l, dmu, dalpha) = distill_loss_regression(f, mu, alpha, noise.unwrap());
                loss += l;
                out_grad.set(i, 0, dmu * inv_m);
                out_grad.set(i, 1, dalpha * inv_m);
            }
        }
    }
    let grad = nn::backward(student_spec, w, &trace, &out_grad)?;
    Ok((loss * inv_m, grad))
}

/// `w := w - rho * (mean_batch grad L(w, theta | x') + gamma * w)`; returns
/// the batch-mean loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn student_step(
    student_spec: &MlpSpec,
    w: &mut ParamVector,
    theta: &ParamVector,
    teacher_spec: &MlpSpec,
    batch: &Matrix,
    rho: f64,
    gamma: f64,
    noise: Option<NoiseModel>,
) -> Result<f64> {
    let (loss, grad) = student_gradient(student_spec, w, theta, teacher_spec, batch, noise)?;
    for (wi, g) in w.iter_mut().zip(grad.iter()) {
        *wi -= rho * (g + gamma * *wi);
    }
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub teacher_nll: f64,
    pub student_loss: f64,
}

pub fn write_history_csv<W: Write>(rows: &[HistoryRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iteration,teacher_nll,student_loss")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.iteration, r.teacher_nll, r.student_loss)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DistillOutput {
    pub student: ParamVector,
    pub teacher_ensemble: PosteriorEnsemble,
    pub teacher_last: ParamVector,
    pub history: Vec<HistoryRow>,
}

struct StudentState {
    w: ParamVector,
    data_rng: StreamRng,
    /// Parameter indices of the mean column of the last layer, when the
    /// output scale is active.
    mean_column: Vec<usize>,
    s2: f64,
}

impl StudentState {
    fn new(spec: &MlpSpec, config: &DistillConfig) -> Result<Self> {
        let mut w = nn::init_params(spec, &mut rng::stream(config.seed, Stream::StudentInit, 0), config.student.init_scale)?;
        let s = config.student.output_scale;
        let mut mean_column = Vec::new();
        if s != 1.0 && matches!(spec.head(), Head::RegressionMeanLogVar) {
            let last = *spec.layers().last().expect("a spec has at least one layer");
            mean_column = (0..last.fan_in).map(|i| last.weight_offset + i * last.fan_out).collect();
            mean_column.push(last.bias_offset);
            w.as_mut_slice()[last.bias_offset + 1] += 2.0 * s.ln();
        }
        Ok(Self {
            w,
            data_rng: rng::stream(config.seed, Stream::StudentData, 0),
            mean_column,
            s2: s * s,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        t: usize,
        student_spec: &MlpSpec,
        theta: &ParamVector,
        teacher_spec: &MlpSpec,
        config: &DistillConfig,
        noise: Option<NoiseModel>,
    ) -> Result<f64> {
        let batch = gen_student_batch(&config.gen, config.student.batch_size, &mut self.data_rng)?;
        let rho = config.student.rho.at(t - 1);
        let loss = if self.mean_column.is_empty() {
            student_step(student_spec, &mut self.w, theta, teacher_spec, &batch, rho, config.student.gamma, noise)?
        } else {
            let (loss, mut grad) = student_gradient(student_spec, &self.w, theta, teacher_spec, &batch, noise)?;
            let g = grad.as_mut_slice();
            for &i in &self.mean_column {
                g[i] *= self.s2;
            }
            let gamma = config.student.gamma;
            for (wi, gi) in self.w.iter_mut().zip(grad.iter()) {
                *wi -= rho * (gi + gamma * *wi);
            }
            loss
        };
        if !self.w.is_finite() {
            return Err(Error::Diverged {
                which: "student",
                iteration: t,
            });
        }
        Ok(loss)
    }
}

/// Joint teacher SGLD / student SGD loop.
pub fn run_distilled_sgld(
    teacher_spec: &MlpSpec,
    student_spec: &MlpSpec,
    data: &Dataset,
    config: &DistillConfig,
    noise: Option<NoiseModel>,
) -> Result<DistillOutput> {
    let mut ens = PosteriorEnsemble::new(teacher_spec.clone(), config.teacher.summary());
    let mut out = run_distilled_sgld_with_sink(teacher_spec, student_spec, data, config, noise, &mut ens)?;
    out.teacher_ensemble = ens;
    Ok(out)
}

/// [`run_distilled_sgld`] handing retained teacher samples to `sink`; the
/// returned ensemble is empty.
pub fn run_distilled_sgld_with_sink(
    teacher_spec: &MlpSpec,
    student_spec: &MlpSpec,
    data: &Dataset,
    config: &DistillConfig,
    noise: Option<NoiseModel>,
    sink: &mut dyn SampleSink,
) -> Result<DistillOutput> {
    config.validate()?;
    task_for(teacher_spec, student_spec, noise)?;
    if config.gen.dim() != student_spec.input_dim() {
        return Err(Error::shape("student generator dimension", student_spec.input_dim(), config.gen.dim()));
    }
    let mut teacher_cfg = config.teacher.clone();
    teacher_cfg.iterations = config.iterations;
    let mut chain = TeacherChain::new(ChainKind::SGLD, teacher_spec, data, &teacher_cfg, noise)?;
    let mut student = StudentState::new(student_spec, config)?;
    let mut history = Vec::new();

    for _ in 0..config.iterations {
        chain.step()?;
        let t = chain.iteration();
        if chain.should_retain() {
            sink.accept(t, chain.theta())?;
        }
        let loss = student.step(t, student_spec, chain.theta(), teacher_spec, config, noise)?;
        if config.log_every > 0 && t % config.log_every == 0 {
            history.push(HistoryRow {
                iteration: t,
                teacher_nll: chain.last_minibatch_nll(),
                student_loss: loss,
            });
        }
    }
    Ok(DistillOutput {
        student: student.w,
        teacher_ensemble: PosteriorEnsemble::new(teacher_spec.clone(), teacher_cfg.summary()),
        teacher_last: chain.into_theta(),
        history,
    })
}

/// Distills a finished ensemble: each iteration draws one stored sample
/// uniformly at random as the teacher. The teacher chain settings in
/// `config` are unused.
pub fn distill_from_ensemble(
    ensemble: &PosteriorEnsemble,
    student_spec: &MlpSpec,
    config: &DistillConfig,
    noise: Option<NoiseModel>,
) -> Result<(ParamVector, Vec<HistoryRow>)> {
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    config.student.rho.validate("student schedule")?;
    config.gen.validate()?;
    task_for(&ensemble.spec, student_spec, noise)?;
    let mut student = StudentState::new(student_spec, config)?;
    let mut pick = rng::stream(config.seed, Stream::TeacherNoise, 1);
    let mut history = Vec::new();
    for t in 1..=config.iterations {
        let theta = &ensemble.samples[pick.random_range(0..ensemble.len())];
        let loss = student.step(t, student_spec, theta, &ensemble.spec, config, noise)?;
        if config.log_every > 0 && t % config.log_every == 0 {
            history.push(HistoryRow {
                iteration: t,
                teacher_nll: f64::NAN,
                student_loss: loss,
            });
        }
    }
    Ok((student.w, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_toy2d;
    use rand::SeedableRng;

    #[test]
    fn generator_validation() {
        assert!(StudentDataGen::UniformBox { lower: vec![1.0], upper: vec![1.0] }.validate().is_err());
        assert!(StudentDataGen::UniformBox { lower: vec![0.0], upper: vec![1.0, 2.0] }.validate().is_err());
        let empty = StudentDataGen::PerturbTrain { source: Matrix::zeros(0, 2), sigma: vec![0.1; 2] };
        let mut r = StreamRng::seed_from_u64(1);
        assert!(gen_student_batch(&empty, 4, &mut r).is_err());
        let neg = StudentDataGen::PerturbTrain { source: Matrix::zeros(3, 1), sigma: vec![-1.0] };
        assert!(neg.validate().is_err());
        assert!(gen_student_batch(&StudentDataGen::uniform_square(0.0, 1.0, 2), 0, &mut r).is_err());
    }

    #[test]
    fn head_pairing() {
        let c2 = MlpSpec::classifier(vec![2, 4, 2]).unwrap();
        let c3 = MlpSpec::classifier(vec![2, 4, 3]).unwrap();
        let mean = MlpSpec::new(vec![2, 4, 1], Head::RegressionMeanOnly).unwrap();
        let het = MlpSpec::new(vec![2, 4, 2], Head::RegressionMeanLogVar).unwrap();
        let n = NoiseModel::new(1.0).ok();
        assert_eq!(task_for(&c2, &c2, None).unwrap(), Task::Classification);
        assert!(task_for(&c2, &c3, None).is_err());
        assert_eq!(task_for(&mean, &het, n).unwrap(), Task::Regression);
        assert!(task_for(&mean, &het, None).is_err());
        assert!(matches!(task_for(&mean, &c2, n), Err(Error::HeadMismatch(_))));
        assert!(task_for(&het, &het, n).is_err());
    }

    #[test]
    fn zero_iterations_leave_student_at_init() {
        let data = gen_toy2d(3);
        let spec = MlpSpec::classifier(vec![2, 5, 2]).unwrap();
        let cfg = DistillConfig {
            teacher: ChainConfig { batch_size: 5, ..Default::default() },
            student: StudentConfig { batch_size: 8, ..Default::default() },
            gen: StudentDataGen::uniform_square(-10.0, 10.0, 2),
            iterations: 0,
            seed: 9,
            log_every: 0,
        };
        let out = run_distilled_sgld(&spec, &spec, &data, &cfg, None).unwrap();
        let init = nn::init_params(&spec, &mut rng::stream(9, Stream::StudentInit, 0), cfg.student.init_scale).unwrap();
        assert_eq!(out.student, init);
        assert!(out.teacher_ensemble.is_empty());
    }

    #[test]
    fn warns_when_student_prior_dominates() {
        let cfg = DistillConfig {
            teacher: ChainConfig { prior_precision: 1e-4, ..Default::default() },
            student: StudentConfig { gamma: 1.0, ..Default::default() },
            gen: StudentDataGen::uniform_square(0.0, 1.0, 1),
            iterations: 1,
            seed: 0,
            log_every: 0,
        };
        assert_eq!(cfg.warnings().len(), 1);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn output_scale_is_sgd_in_scaled_coordinates() {
        let teacher = MlpSpec::new(vec![1, 3, 1], Head::RegressionMeanOnly).unwrap();
        let student = MlpSpec::new(vec![1, 4, 2], Head::RegressionMeanLogVar).unwrap();
        let theta = nn::init_params(&teacher, &mut StreamRng::seed_from_u64(4), 3.0).unwrap();
        let (s, lambda) = (20.0f64, 0.5);
        let cfg = |scale: f64| DistillConfig {
            teacher: ChainConfig::default(),
            student: StudentConfig { gamma: 0.0, batch_size: 6, output_scale: scale, ..Default::default() },
            gen: StudentDataGen::UniformBox { lower: vec![-3.0], upper: vec![3.0] },
            iterations: 1,
            seed: 2,
            log_every: 0,
        };
        let last = *student.layers().last().unwrap();
        let plain = StudentState::new(&student, &cfg(1.0)).unwrap();
        let mut scaled = StudentState::new(&student, &cfg(s)).unwrap();
        let shift = scaled.w[last.bias_offset + 1] - plain.w[last.bias_offset + 1];
        assert!((shift - 2.0 * s.ln()).abs() < 1e-12);

        // the same problem with targets divided by s and noise precision times s^2
        let mut theta_s = theta.clone();
        let tl = *teacher.layers().last().unwrap();
        theta_s.as_mut_slice()[tl.weight_offset..tl.end()].iter_mut().for_each(|v| *v /= s);
        let mut tilde = StudentState::new(&student, &cfg(1.0)).unwrap();
        tilde.w = scaled.w.clone();
        for &i in &scaled.mean_column {
            tilde.w.as_mut_slice()[i] /= s;
        }
        tilde.w.as_mut_slice()[last.bias_offset + 1] -= 2.0 * s.ln();

        for t in 1..=5 {
            scaled.step(t, &student, &theta, &teacher, &cfg(s), NoiseModel::new(lambda).ok()).unwrap();
            tilde.step(t, &student, &theta_s, &teacher, &cfg(1.0), NoiseModel::new(lambda * s * s).ok()).unwrap();
        }
        let mut back = tilde.w.clone();
        for &i in &scaled.mean_column {
            back.as_mut_slice()[i] *= s;
        }
        back.as_mut_slice()[last.bias_offset + 1] += 2.0 * s.ln();
        for (a, b) in scaled.w.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn history_csv_layout() {
        let mut buf = Vec::new();
        write_history_csv(
            &[HistoryRow { iteration: 10, teacher_nll: 0.5, student_loss: 0.25 }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,teacher_nll,student_loss\n10,0.5,0.25\n");
    }
}

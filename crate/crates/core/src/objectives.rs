//! Likelihoods, Gaussian priors, and the distillation losses with their
//! closed-form output gradients.

use std::f64::consts::PI;

use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{self, Head, MlpSpec, ParamVector};

/// Tolerance on `logsumexp(log_probs) = 0` for a categorical predictive.
pub const SIMPLEX_TOL: f64 = 1e-10;

/// A predictive distribution over `y` for one input.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictive {
    Categorical { log_probs: Vec<f64> },
    /// `N(mu, exp(log_var))`.
    Gaussian { mu: f64, log_var: f64 },
}

impl Predictive {
    pub fn categorical(log_probs: Vec<f64>) -> Result<Self> {
        let z = logsumexp(&log_probs);
        if !(z.abs() <= SIMPLEX_TOL) {
            return Err(Error::pre(format!("log-probabilities normalize to {z}, not 0")));
        }
        Ok(Predictive::Categorical { log_probs })
    }

    pub fn gaussian(mu: f64, log_var: f64) -> Result<Self> {
        if !mu.is_finite() || !log_var.is_finite() {
            return Err(Error::pre("gaussian predictive needs finite mu and log-variance"));
        }
        Ok(Predictive::Gaussian { mu, log_var })
    }

    /// Class probabilities; `None` for a Gaussian.
    pub fn probs(&self) -> Option<Vec<f64>> {
        match self {
            Predictive::Categorical { log_probs } => Some(log_probs.iter().map(|l| l.exp()).collect()),
            Predictive::Gaussian { .. } => None,
        }
    }
}

/// Observation noise precision `lambda_n` for regression.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    lambda_n: f64,
}

impl NoiseModel {
    pub fn new(lambda_n: f64) -> Result<Self> {
        if !(lambda_n > 0.0 && lambda_n.is_finite()) {
            return Err(Error::pre(format!("noise precision must be positive, got {lambda_n}")));
        }
        Ok(Self { lambda_n })
    }

    pub fn precision(&self) -> f64 {
        self.lambda_n
    }

    pub fn variance(&self) -> f64 {
        1.0 / self.lambda_n
    }
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-probabilities from logits, with max subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let z = logsumexp(logits);
    logits.iter().map(|l| l - z).collect()
}

/// Maps a gradient with respect to log-probabilities `beta` back to the
/// logits that produced them.
pub fn log_softmax_backward(log_probs: &[f64], grad_beta: &[f64]) -> Vec<f64> {
    let total: f64 = grad_beta.iter().sum();
    grad_beta
        .iter()
        .zip(log_probs)
        .map(|(g, lp)| g - lp.exp() * total)
        .collect()
}

pub fn nll_data_classification(log_probs: &[f64], label: usize) -> Result<f64> {
    log_probs
        .get(label)
        .map(|lp| -lp)
        .ok_or(Error::LabelOutOfRange {
            label,
            classes: log_probs.len(),
        })
}

/// Full normalized Gaussian negative log-likelihood of `y` under `N(f, 1/lambda_n)`.
pub fn nll_data_regression(f: f64, y: f64, noise: NoiseModel) -> f64 {
    let r = y - f;
    0.5 * noise.lambda_n * r * r - 0.5 * noise.lambda_n.ln() + 0.5 * (2.0 * PI).ln()
}

/// Log of an isotropic Gaussian prior (up to its normalizer) and its gradient.
pub fn log_prior_grad(params: &ParamVector, precision: f64) -> Result<(f64, ParamVector)> {
    if !(precision >= 0.0) {
        return Err(Error::pre(format!("prior precision must be >= 0, got {precision}")));
    }
    let logp = -0.5 * precision * params.norm_sq();
    let grad = ParamVector::from_vec(params.iter().map(|p| -precision * p).collect());
    Ok((logp, grad))
}

/// Stochastic estimate of the log-posterior gradient from one minibatch.
#[derive(Clone, Debug)]
pub struct GradEstimate {
    pub grad: ParamVector,
    /// `log prior + (N/M) * sum of minibatch log-likelihoods`.
    pub log_posterior: f64,
    /// Mean negative log-likelihood over the minibatch.
    pub minibatch_nll: f64,
}

/// Per-row log-likelihoods and their gradients with respect to raw outputs.
fn loglik_and_output_grad(
    spec: &MlpSpec,
    outputs: &Matrix,
    targets: &Targets,
    noise: Option<NoiseModel>,
) -> Result<(f64, Matrix)> {
    let mut g = Matrix::zeros(outputs.rows(), outputs.cols());
    let mut total = 0.0;
    match (spec.head(), targets) {
        (Head::SoftmaxClassifier(k), Targets::Classes { labels, classes }) => {
            if *classes != k {
                return Err(Error::HeadMismatch(format!("{k}-way head, {classes}-class data")));
            }
            for (i, &y) in labels.iter().enumerate() {
                let lp = log_softmax(outputs.row(i));
                total -= nll_data_classification(&lp, y)?;
                let row = g.row_mut(i);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = -lp[j].exp();
                }
                row[y] += 1.0;
            }
        }
        (Head::RegressionMeanOnly, Targets::Real(ys)) => {
            let noise = noise.ok_or_else(|| Error::pre("regression likelihood needs a noise model"))?;
            for (i, &y) in ys.iter().enumerate() {
                let f = outputs.get(i, 0);
                total -= nll_data_regression(f, y, noise);
                g.set(i, 0, noise.lambda_n * (y - f));
            }
        }
        (head, _) => {
            return Err(Error::HeadMismatch(format!(
                "likelihood undefined for head {head:?} with these targets"
            )))
        }
    }
    Ok((total, g))
}

/// `grad log p(theta) + (N/M) * sum_i grad log p(y_i | x_i, theta)` over the
/// minibatch.
pub fn posterior_grad_estimate(
    spec: &MlpSpec,
    params: &ParamVector,
    minibatch: &Dataset,
    n_total: usize,
    prior_precision: f64,
    noise: Option<NoiseModel>,
) -> Result<GradEstimate> {
    let m = minibatch.len();
    if m == 0 {
        return Err(Error::pre("empty minibatch"));
    }
    if n_total < m {
        return Err(Error::pre(format!("N = {n_total} smaller than minibatch {m}")));
    }
    let (out, trace) = nn::forward(spec, params, minibatch.inputs())?;
    let (loglik, out_grad) = loglik_and_output_grad(spec, &out, minibatch.targets(), noise)?;
    let mut grad = nn::backward(spec, params, &trace, &out_grad)?;
    let scale = n_total as f64 / m as f64;
    let (log_prior, prior_grad) = log_prior_grad(params, prior_precision)?;
    for (g, p) in grad.iter_mut().zip(prior_grad.iter()) {
        *g = p + scale * *g;
    }
    Ok(GradEstimate {
        grad,
        log_posterior: log_prior + scale * loglik,
        minibatch_nll: -loglik / m as f64,
    })
}

/// Cross-entropy of the student's log-probabilities `beta` against the
/// teacher's class probabilities, and its gradient with respect to `beta`.
pub fn distill_loss_classification(
    teacher_probs: &[f64],
    student_log_probs: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if teacher_probs.len() != student_log_probs.len() {
        return Err(Error::shape("class count", teacher_probs.len(), student_log_probs.len()));
    }
    let sum: f64 = teacher_probs.iter().sum();
    if (sum - 1.0).abs() > 1e-8 || teacher_probs.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::pre(format!("teacher probabilities are not on the simplex (sum {sum})")));
    }
    let loss = -teacher_probs
        .iter()
        .zip(student_log_probs)
        .map(|(p, b)| if *p == 0.0 { 0.0 } else { p * b })
        .sum::<f64>();
    let grad = teacher_probs.iter().map(|p| -p).collect();
    Ok((loss, grad))
}

/// `L = 0.5 * [alpha + exp(-alpha) * ((f - mu)^2 + 1/lambda_n)]` and its
/// partial derivatives `(dL/dmu, dL/dalpha)`.
pub fn distill_loss_regression(f_teacher: f64, mu: f64, alpha: f64, noise: NoiseModel) -> (f64, f64, f64) {
    let r = f_teacher - mu;
    let spread = r * r + 1.0 / noise.lambda_n;
    let inv_var = (-alpha).exp();
    let loss = 0.5 * (alpha + inv_var * spread);
    let dmu = inv_var * (mu - f_teacher);
    let dalpha = 0.5 * (1.0 - inv_var * spread);
    (loss, dmu, dalpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn log_softmax_cases() {
        let lp = log_softmax(&[0.0, 0.0]);
        assert_relative_eq!(lp[0], 0.5f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(lp[1], 0.5f64.ln(), epsilon = 1e-15);
        let lp = log_softmax(&[1000.0, 0.0]);
        assert!(lp[0].abs() < 1e-12);
        assert_relative_eq!(lp[1], -1000.0, epsilon = 1e-9);
        assert!(lp.iter().all(|v| v.is_finite()));
        let lp = log_softmax(&[0.3, -1.2, 2.5, 0.0, -0.7]);
        let s: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn classification_nll() {
        let uni = vec![(0.1f64).ln(); 10];
        assert_relative_eq!(nll_data_classification(&uni, 7).unwrap(), 10f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(10f64.ln(), 2.302585, epsilon = 1e-6);
        assert_eq!(nll_data_classification(&[0.0, f64::NEG_INFINITY], 0).unwrap(), 0.0);
        let lp = [(0.8f64).ln(), (0.2f64).ln()];
        assert_relative_eq!(nll_data_classification(&lp, 1).unwrap(), -(0.2f64).ln());
        assert!(matches!(
            nll_data_classification(&lp, 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn regression_nll_values() {
        let one = NoiseModel::new(1.0).unwrap();
        assert_relative_eq!(nll_data_regression(2.0, 2.0, one), 0.918939, epsilon = 1e-6);
        let toy = NoiseModel::new(1.0 / 9.0).unwrap();
        let want = 0.5 * (1.0 / 9.0) * 9.0 - 0.5 * (1.0f64 / 9.0).ln() + 0.5 * (2.0 * PI).ln();
        assert_relative_eq!(nll_data_regression(0.0, 3.0, toy), want, epsilon = 1e-14);
        assert_relative_eq!(want, 2.5176, epsilon = 1e-4);
        let boston = NoiseModel::new(1.25).unwrap();
        assert_relative_eq!(nll_data_regression(1.0, 1.0, boston), 0.8074, epsilon = 1e-4);
        assert!(NoiseModel::new(0.0).is_err());
    }

    #[test]
    fn prior_cases() {
        let p = ParamVector::from_vec(vec![1.0, 1.0]);
        let (l, g) = log_prior_grad(&p, 2.0).unwrap();
        assert_eq!(l, -2.0);
        assert_eq!(g.as_slice(), &[-2.0, -2.0]);
        let (l, g) = log_prior_grad(&p, 0.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(log_prior_grad(&p, -1.0).is_err());
    }

    #[test]
    fn distill_classification_cases() {
        let (l, g) = distill_loss_classification(&[0.3, 0.7], &[0.5f64.ln(), 0.5f64.ln()]).unwrap();
        assert_relative_eq!(l, 2f64.ln(), epsilon = 1e-15);
        assert_eq!(g, vec![-0.3, -0.7]);

        let beta = log_softmax(&[0.4, -1.0, 2.0]);
        let (l, g) = distill_loss_classification(&[0.0, 1.0, 0.0], &beta).unwrap();
        assert_eq!(l, -beta[1]);
        assert_eq!(g, vec![-0.0, -1.0, -0.0]);

        let p = [0.2, 0.5, 0.3];
        let logp: Vec<f64> = p.iter().map(|v: &f64| v.ln()).collect();
        let (l, _) = distill_loss_classification(&p, &logp).unwrap();
        let entropy = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert_relative_eq!(l, entropy, epsilon = 1e-15);

        assert!(distill_loss_classification(&[0.5, 0.6], &logp[..2]).is_err());
    }

    #[test]
    fn distill_regression_cases() {
        let n = NoiseModel::new(1.0).unwrap();
        let (l, dmu, da) = distill_loss_regression(1.0, 0.0, 0.0, n);
        assert_eq!((l, dmu, da), (1.0, -1.0, -0.5));
        let n = NoiseModel::new(4.0).unwrap();
        let (_, dmu, da) = distill_loss_regression(0.7, 0.7, (0.25f64).ln(), n);
        assert_eq!(dmu, 0.0);
        assert!(da.abs() < 1e-15);
    }

    #[test]
    fn logit_gradient_is_softmax_minus_teacher() {
        let beta = log_softmax(&[0.1, 1.3, -0.4]);
        let p = [0.5, 0.25, 0.25];
        let (_, gb) = distill_loss_classification(&p, &beta).unwrap();
        let gz = log_softmax_backward(&beta, &gb);
        for j in 0..3 {
            assert_relative_eq!(gz[j], beta[j].exp() - p[j], epsilon = 1e-15);
        }
    }

    #[test]
    fn predictive_validation() {
        assert!(Predictive::categorical(vec![0.5f64.ln(), 0.5f64.ln()]).is_ok());
        assert!(Predictive::categorical(vec![0.0, 0.0]).is_err());
        assert!(Predictive::gaussian(0.0, f64::INFINITY).is_err());
    }
}

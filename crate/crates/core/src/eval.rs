//! Posterior-predictive evaluation: ensemble averaging, test log-likelihood,
//! misclassification rate, predictive grids and grid KL.
//!
//! Batch evaluation is split into fixed row chunks that are processed in
//! parallel; within a chunk ensemble members are accumulated in sample order,
//! so results do not depend on the thread count.

use std::f64::consts::PI;
use std::io::Write;

use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{self, Head, MlpSpec, ParamVector};
use crate::objectives::{log_softmax, logsumexp, NoiseModel, Predictive};
use crate::par::{self, Exec};
use crate::samplers::{PosteriorEnsemble, SampleSink};

/// Probabilities below this are clamped when computing grid KL.
pub const KL_EPS: f64 = 1e-12;
/// Row chunk used for batch evaluation.
pub const EVAL_CHUNK: usize = 256;

/// Anything that produces a predictive distribution for an input.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    /// One network: SGD plug-in estimate or distilled student.
    Single { spec: &'a MlpSpec, params: &'a ParamVector },
    /// Equal-weight Monte Carlo average over posterior samples.
    Ensemble(&'a PosteriorEnsemble),
}

impl<'a> Predictor<'a> {
    pub fn single(spec: &'a MlpSpec, params: &'a ParamVector) -> Self {
        Predictor::Single { spec, params }
    }

    pub fn spec(&self) -> &'a MlpSpec {
        match self {
            Predictor::Single { spec, .. } => spec,
            Predictor::Ensemble(e) => &e.spec,
        }
    }

    fn check(&self) -> Result<()> {
        if let Predictor::Ensemble(e) = self {
            if e.is_empty() {
                return Err(Error::EmptyEnsemble);
            }
        }
        Ok(())
    }
}

fn chunked<F>(exec: Exec, x: &Matrix, f: F) -> Result<Vec<Matrix>>
where
    F: Fn(&Matrix) -> Result<Matrix> + Sync + Send,
{
    let ranges = par::chunk_ranges(x.rows(), EVAL_CHUNK);
    par::map_indexed_with(exec, ranges.len(), |i| {
        let (a, b) = ranges[i];
        f(&x.slice_rows(a, b))
    })
    .into_iter()
    .collect()
}

fn stack(parts: Vec<Matrix>, cols: usize) -> Matrix {
    let rows = parts.iter().map(|m| m.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend(p.into_vec());
    }
    Matrix::from_vec(rows, cols, data).expect("consistent chunk widths")
}

fn softmax_rows(logits: &mut Matrix) {
    for i in 0..logits.rows() {
        let lp = log_softmax(logits.row(i));
        for (v, l) in logits.row_mut(i).iter_mut().zip(lp) {
            *v = l.exp();
        }
    }
}

/// Class probabilities (`N x K`) for a batch of inputs.
pub fn class_probs_batch(pred: Predictor<'_>, x: &Matrix) -> Result<Matrix> {
    class_probs_batch_with(Exec::default(), pred, x)
}

pub fn class_probs_batch_with(exec: Exec, pred: Predictor<'_>, x: &Matrix) -> Result<Matrix> {
    pred.check()?;
    let spec = pred.spec();
    let Head::SoftmaxClassifier(k) = spec.head() else {
        return Err(Error::HeadMismatch("class probabilities need a softmax head".into()));
    };
    let parts = chunked(exec, x, |xc| match pred {
        Predictor::Single { spec, params } => {
            let mut out = nn::predict(spec, params, xc)?;
            softmax_rows(&mut out);
            Ok(out)
        }
        Predictor::Ensemble(e) => {
            let mut acc = Matrix::zeros(xc.rows(), k);
            for theta in &e.samples {
                let mut out = nn::predict(&e.spec, theta, xc)?;
                softmax_rows(&mut out);
                for (a, o) in acc.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    *a += o;
                }
            }
            let inv = 1.0 / e.len() as f64;
            acc.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
            Ok(acc)
        }
    })?;
    Ok(stack(parts, k))
}

/// Mixture `(1/S) sum_s softmax(f(x | theta_s))` as a categorical predictive.
pub fn ensemble_predict_class(ensemble: &PosteriorEnsemble, x: &[f64]) -> Result<Predictive> {
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let p = class_probs_batch(Predictor::Ensemble(ensemble), &xm)?;
    Ok(Predictive::Categorical {
        log_probs: p.row(0).iter().map(|v| v.ln()).collect(),
    })
}

/// Teacher outputs `f_s(x_i)` for every sample, as an `N x S` matrix.
pub fn ensemble_outputs(ensemble: &PosteriorEnsemble, x: &Matrix) -> Result<Matrix> {
    ensemble_outputs_with(Exec::default(), ensemble, x)
}

pub fn ensemble_outputs_with(exec: Exec, ensemble: &PosteriorEnsemble, x: &Matrix) -> Result<Matrix> {
    if ensemble.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if ensemble.spec.head() != Head::RegressionMeanOnly {
        return Err(Error::HeadMismatch("ensemble regression needs a mean-only head".into()));
    }
    let s = ensemble.len();
    let parts = chunked(exec, x, |xc| {
        let mut out = Matrix::zeros(xc.rows(), s);
        for (j, theta) in ensemble.samples.iter().enumerate() {
            let f = nn::predict(&ensemble.spec, theta, xc)?;
            for i in 0..xc.rows() {
                out.set(i, j, f.get(i, 0));
            }
        }
        Ok(out)
    })?;
    Ok(stack(parts, s))
}

/// Mean and standard deviation of the Gaussian mixture
/// `(1/S) sum_s N(f_s, 1/lambda_n)`.
fn mixture_moments(fs: &[f64], noise: NoiseModel) -> (f64, f64) {
    let s = fs.len() as f64;
    let mean = fs.iter().sum::<f64>() / s;
    let var = fs.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / s;
    (mean, (var + noise.variance()).sqrt())
}

pub fn ensemble_predict_reg(ensemble: &PosteriorEnsemble, x: &[f64], noise: NoiseModel) -> Result<(f64, f64)> {
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let f = ensemble_outputs(ensemble, &xm)?;
    Ok(mixture_moments(f.row(0), noise))
}

/// Predictive mean and standard deviation for each row of `x`.
pub fn predict_reg_batch(pred: Predictor<'_>, x: &Matrix, noise: Option<NoiseModel>) -> Result<Vec<(f64, f64)>> {
    pred.check()?;
    match pred {
        Predictor::Ensemble(e) => {
            let noise = noise.ok_or_else(|| Error::pre("ensemble regression needs a noise model"))?;
            let f = ensemble_outputs(e, x)?;
            Ok(f.iter_rows().map(|r| mixture_moments(r, noise)).collect())
        }
        Predictor::Single { spec, params } => {
            let out = nn::predict(spec, params, x)?;
            match spec.head() {
                Head::RegressionMeanOnly => {
                    let noise = noise.ok_or_else(|| Error::pre("plug-in regression needs a noise model"))?;
                    let sd = noise.variance().sqrt();
                    Ok(out.iter_rows().map(|r| (r[0], sd)).collect())
                }
                Head::RegressionMeanLogVar => Ok(out.iter_rows().map(|r| (r[0], (0.5 * r[1]).exp())).collect()),
                Head::SoftmaxClassifier(_) => Err(Error::HeadMismatch("regression prediction from a classifier".into())),
            }
        }
    }
}

fn gauss_logpdf(y: f64, mu: f64, log_var: f64) -> f64 {
    let r = y - mu;
    -0.5 * (2.0 * PI).ln() - 0.5 * log_var - 0.5 * r * r * (-log_var).exp()
}

/// Per-example predictive log density of real targets (standardized units).
/// Ensembles use the exact mixture density via log-sum-exp.
pub fn reg_log_density(pred: Predictor<'_>, x: &Matrix, y: &[f64], noise: Option<NoiseModel>) -> Result<Vec<f64>> {
    pred.check()?;
    if y.len() != x.rows() {
        return Err(Error::shape("targets", x.rows(), y.len()));
    }
    match pred {
        Predictor::Ensemble(e) => {
            let noise = noise.ok_or_else(|| Error::pre("ensemble regression needs a noise model"))?;
            let f = ensemble_outputs(e, x)?;
            let lv = -noise.precision().ln();
            let ln_s = (e.len() as f64).ln();
            Ok(f.iter_rows()
                .zip(y)
                .map(|(row, &yi)| {
                    let terms: Vec<f64> = row.iter().map(|&fs| gauss_logpdf(yi, fs, lv)).collect();
                    logsumexp(&terms) - ln_s
                })
                .collect())
        }
        Predictor::Single { spec, params } => {
            let out = nn::predict(spec, params, x)?;
            match spec.head() {
                Head::RegressionMeanOnly => {
                    let noise = noise.ok_or_else(|| Error::pre("plug-in regression needs a noise model"))?;
                    let lv = -noise.precision().ln();
                    Ok(out.iter_rows().zip(y).map(|(r, &yi)| gauss_logpdf(yi, r[0], lv)).collect())
                }
                Head::RegressionMeanLogVar => Ok(out.iter_rows().zip(y).map(|(r, &yi)| gauss_logpdf(yi, r[0], r[1])).collect()),
                Head::SoftmaxClassifier(_) => Err(Error::HeadMismatch("regression density from a classifier".into())),
            }
        }
    }
}

/// A metric with its spread over trials.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub name: String,
    pub value: f64,
    pub standard_error: f64,
    pub n_trials: usize,
}

impl MetricsReport {
    pub fn single(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
            standard_error: 0.0,
            n_trials: 1,
        }
    }

    /// Mean and standard error (sample standard deviation over `sqrt(n)`).
    pub fn aggregate(name: impl Into<String>, values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::pre("aggregate over zero trials"));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            name: name.into(),
            value: mean,
            standard_error: se,
            n_trials: n,
        })
    }
}

fn labels_of(test: &Dataset) -> Result<&[usize]> {
    match test.targets() {
        Targets::Classes { labels, .. } => Ok(labels),
        Targets::Real(_) => Err(Error::HeadMismatch("classification metric on real targets".into())),
    }
}

fn nonempty(test: &Dataset) -> Result<()> {
    if test.is_empty() {
        return Err(Error::pre("empty test set"));
    }
    Ok(())
}

/// Mean log predictive probability of the true class.
pub fn test_loglik_class(pred: Predictor<'_>, test: &Dataset) -> Result<MetricsReport> {
    nonempty(test)?;
    let p = class_probs_batch(pred, test.inputs())?;
    Ok(MetricsReport::single("test_loglik", loglik_from_probs(&p, labels_of(test)?)))
}

pub fn loglik_from_probs(probs: &Matrix, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| probs.get(i, y).ln())
        .sum::<f64>()
        / labels.len() as f64
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn error_rate_from_probs(probs: &Matrix, labels: &[usize]) -> f64 {
    let wrong = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(probs.row(*i)) != y)
        .count();
    wrong as f64 / labels.len() as f64
}

/// Fraction of examples whose most probable class differs from the label.
pub fn misclass_rate(pred: Predictor<'_>, test: &Dataset) -> Result<MetricsReport> {
    nonempty(test)?;
    let p = class_probs_batch(pred, test.inputs())?;
    Ok(MetricsReport::single("misclass_rate", error_rate_from_probs(&p, labels_of(test)?)))
}

fn real_targets(test: &Dataset) -> Result<&[f64]> {
    match test.targets() {
        Targets::Real(y) => Ok(y),
        Targets::Classes { .. } => Err(Error::HeadMismatch("regression metric on class labels".into())),
    }
}

/// Mean predictive log density of the test targets. When the targets were
/// standardized, `ln(std_y)` is subtracted so the value is in original units.
pub fn test_loglik_reg(pred: Predictor<'_>, test: &Dataset, noise: Option<NoiseModel>) -> Result<MetricsReport> {
    nonempty(test)?;
    let ld = reg_log_density(pred, test.inputs(), real_targets(test)?, noise)?;
    let shift = test.target_stats.map_or(0.0, |(_, sd)| sd.ln());
    let mean = ld.iter().sum::<f64>() / ld.len() as f64 - shift;
    Ok(MetricsReport::single("test_loglik", mean))
}

/// Root mean squared error of the predictive mean, in original target units.
pub fn test_rmse_reg(pred: Predictor<'_>, test: &Dataset, noise: Option<NoiseModel>) -> Result<MetricsReport> {
    nonempty(test)?;
    let y = real_targets(test)?;
    let mv = predict_reg_batch(pred, test.inputs(), noise)?;
    let scale = test.target_stats.map_or(1.0, |(_, sd)| sd);
    let mse = mv.iter().zip(y).map(|((m, _), t)| (m - t) * (m - t)).sum::<f64>() / y.len() as f64;
    Ok(MetricsReport::single("test_rmse", mse.sqrt() * scale))
}

/// Accumulates ensemble class probabilities on a fixed input set as samples
/// arrive, so a chain never has to store its samples.
pub struct OnlineClassPredictive {
    spec: MlpSpec,
    inputs: Matrix,
    sum: Matrix,
    count: usize,
}

impl OnlineClassPredictive {
    pub fn new(spec: &MlpSpec, inputs: Matrix) -> Result<Self> {
        let Head::SoftmaxClassifier(k) = spec.head() else {
            return Err(Error::HeadMismatch("online class predictive needs a softmax head".into()));
        };
        Ok(Self {
            spec: spec.clone(),
            sum: Matrix::zeros(inputs.rows(), k),
            inputs,
            count: 0,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Current averaged probabilities.
    pub fn probs(&self) -> Result<Matrix> {
        if self.count == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let mut p = self.sum.clone();
        let inv = 1.0 / self.count as f64;
        p.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
        Ok(p)
    }
}

impl SampleSink for OnlineClassPredictive {
    fn accept(&mut self, _iteration: usize, theta: &ParamVector) -> Result<()> {
        let p = class_probs_batch(Predictor::single(&self.spec, theta), &self.inputs)?;
        for (a, b) in self.sum.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *a += b;
        }
        self.count += 1;
        Ok(())
    }
}

/// Axis ranges and resolution of a 2-D evaluation grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl Default for GridGeometry {
    fn default() -> Self {
        Self {
            x_range: (-10.0, 10.0),
            y_range: (-10.0, 10.0),
            nx: 100,
            ny: 100,
        }
    }
}

impl GridGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::GeometryMismatch("resolution must be >= 2 per axis".into()));
        }
        if !(self.x_range.0 < self.x_range.1 && self.y_range.0 < self.y_range.1) {
            return Err(Error::GeometryMismatch("empty axis range".into()));
        }
        Ok(())
    }

    /// Cell centres in row-major order (x varies fastest).
    pub fn centres(&self) -> Matrix {
        let dx = (self.x_range.1 - self.x_range.0) / self.nx as f64;
        let dy = (self.y_range.1 - self.y_range.0) / self.ny as f64;
        let mut m = Matrix::zeros(self.nx * self.ny, 2);
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let r = m.row_mut(iy * self.nx + ix);
                r[0] = self.x_range.0 + (ix as f64 + 0.5) * dx;
                r[1] = self.y_range.0 + (iy as f64 + 0.5) * dy;
            }
        }
        m
    }
}

/// Predictive evaluated at every cell centre.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2D {
    pub geometry: GridGeometry,
    pub cells: Vec<Predictive>,
}

/// Evaluates `pred` at the cell centres. Regression ensembles are summarized
/// by their mixture mean and variance.
pub fn predictive_grid(pred: Predictor<'_>, geometry: GridGeometry, noise: Option<NoiseModel>) -> Result<Grid2D> {
    geometry.validate()?;
    if pred.spec().input_dim() != 2 {
        return Err(Error::shape("grid model input dimension", 2, pred.spec().input_dim()));
    }
    let x = geometry.centres();
    let cells = match pred.spec().head() {
        Head::SoftmaxClassifier(_) => {
            let p = class_probs_batch(pred, &x)?;
            p.iter_rows()
                .map(|r| Predictive::Categorical {
                    log_probs: r.iter().map(|v| v.ln()).collect(),
                })
                .collect()
        }
        _ => predict_reg_batch(pred, &x, noise)?
            .into_iter()
            .map(|(m, sd)| Predictive::Gaussian {
                mu: m,
                log_var: 2.0 * sd.ln(),
            })
            .collect(),
    };
    Ok(Grid2D { geometry, cells })
}

/// `KL(p || q)` with `q` clamped below at [`KL_EPS`] (or at `p` itself when
/// `p` is smaller, so identical inputs give exactly zero). Rounding below zero
/// is floored.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(KL_EPS.min(*pi)).ln()))
        .sum();
    kl.max(0.0)
}

/// Mean over cells of `KL(reference_cell || approx_cell)`.
pub fn kl_grid(reference: &Grid2D, approx: &Grid2D) -> Result<f64> {
    if reference.geometry != approx.geometry || reference.cells.len() != approx.cells.len() {
        return Err(Error::GeometryMismatch(format!(
            "{:?} vs {:?}",
            reference.geometry, approx.geometry
        )));
    }
    let mut total = 0.0;
    for (a, b) in reference.cells.iter().zip(&approx.cells) {
        let (Some(p), Some(q)) = (a.probs(), b.probs()) else {
            return Err(Error::GeometryMismatch("grid KL needs categorical cells".into()));
        };
        if p.len() != q.len() {
            return Err(Error::GeometryMismatch("class counts differ".into()));
        }
        total += kl_categorical(&p, &q);
    }
    Ok(total / reference.cells.len() as f64)
}

/// Writes `x,y,p_class0..` (or `x,y,mu,std`) rows.
pub fn write_grid_csv<W: Write>(grid: &Grid2D, mut out: W) -> std::io::Result<()> {
    let centres = grid.geometry.centres();
    match grid.cells.first() {
        Some(Predictive::Categorical { log_probs }) => {
            let cols: Vec<String> = (0..log_probs.len()).map(|k| format!("p_class{k}")).collect();
            writeln!(out, "x,y,{}", cols.join(","))?;
        }
        _ => writeln!(out, "x,y,mu,std")?,
    }
    for (c, cell) in centres.iter_rows().zip(&grid.cells) {
        write!(out, "{},{}", c[0], c[1])?;
        match cell {
            Predictive::Categorical { log_probs } => {
                for lp in log_probs {
                    write!(out, ",{}", lp.exp())?;
                }
            }
            Predictive::Gaussian { mu, log_var } => write!(out, ",{},{}", mu, (0.5 * log_var).exp())?,
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Sidecar describing grid geometry and the KL convention.
pub fn write_grid_meta<W: Write>(grid: &Grid2D, model: &str, mut out: W) -> std::io::Result<()> {
    let g = grid.geometry;
    writeln!(out, "model = {model}")?;
    writeln!(out, "x_range = {},{}", g.x_range.0, g.x_range.1)?;
    writeln!(out, "y_range = {},{}", g.y_range.0, g.y_range.1)?;
    writeln!(out, "resolution = {}x{}", g.nx, g.ny)?;
    writeln!(out, "layout = row-major, x fastest, cell centres")?;
    writeln!(out, "kl_direction = KL(reference || approx), mean over cells")?;
    writeln!(out, "kl_epsilon = {KL_EPS:e}")?;
    Ok(())
}

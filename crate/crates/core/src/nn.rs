//! Dense ReLU networks over a flat parameter vector, with exact reverse-mode
//! gradients.
//!
//! Parameters are stored layer by layer: the `fan_in x fan_out` weight matrix
//! (row-major, so `W[i][j]` connects input `i` to output `j`) followed by the
//! `fan_out` bias vector. A batch of inputs is a row-major `B x D` matrix and
//! each layer computes `Z = A W + b`.

use std::fmt;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef, Matrix, Trans};

/// How the final layer's raw outputs are interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    /// `K` logits fed through softmax.
    SoftmaxClassifier(usize),
    /// Single regression output `f(x)`; noise precision is external.
    RegressionMeanOnly,
    /// Two outputs `(mu, alpha)` with predictive variance `exp(alpha)`.
    RegressionMeanLogVar,
}

impl Head {
    pub(crate) fn tag(self) -> u32 {
        match self {
            Head::SoftmaxClassifier(_) => 0,
            Head::RegressionMeanOnly => 1,
            Head::RegressionMeanLogVar => 2,
        }
    }

    pub(crate) fn from_tag(tag: u32, out_width: usize) -> Result<Self> {
        match tag {
            0 => Ok(Head::SoftmaxClassifier(out_width)),
            1 => Ok(Head::RegressionMeanOnly),
            2 => Ok(Head::RegressionMeanLogVar),
            t => Err(Error::Format(format!("unknown head tag {t}"))),
        }
    }

    pub fn is_classifier(self) -> bool {
        matches!(self, Head::SoftmaxClassifier(_))
    }
}

/// Offsets of one layer inside a [`ParamVector`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerLayout {
    pub fn end(&self) -> usize {
        self.bias_offset + self.fan_out
    }
}

/// Architecture of a feed-forward network with ReLU hidden layers.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MlpSpec {
    widths: Vec<usize>,
    head: Head,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, head: Head) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidSpec(format!("zero width in {widths:?}")));
        }
        let out = *widths.last().unwrap();
        let ok = match head {
            Head::SoftmaxClassifier(k) => k == out && k >= 1,
            Head::RegressionMeanOnly => out == 1,
            Head::RegressionMeanLogVar => out == 2,
        };
        if !ok {
            return Err(Error::InvalidSpec(format!(
                "head {head:?} incompatible with output width {out}"
            )));
        }
        Ok(Self { widths, head })
    }

    /// Softmax classifier whose class count is the last width.
    pub fn classifier(widths: Vec<usize>) -> Result<Self> {
        let k = widths.last().copied().unwrap_or(0);
        Self::new(widths, Head::SoftmaxClassifier(k))
    }

    /// Parses an architecture string such as `2-10-10-2`.
    pub fn parse(arch: &str, head: HeadKind) -> Result<Self> {
        let widths = arch
            .split('-')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidSpec(format!("bad width {s:?} in {arch:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let head = match head {
            HeadKind::Classifier => Head::SoftmaxClassifier(widths.last().copied().unwrap_or(0)),
            HeadKind::MeanOnly => Head::RegressionMeanOnly,
            HeadKind::MeanLogVar => Head::RegressionMeanLogVar,
        };
        Self::new(widths, head)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let l = LayerLayout {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: off,
                    bias_offset: off + w[0] * w[1],
                };
                off = l.end();
                l
            })
            .collect()
    }

    /// Total parameter count, biases included.
    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Weight-only count (biases excluded).
    pub fn num_weights(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1]).sum()
    }

    /// The same hidden architecture with a different head.
    pub fn with_head(&self, head: Head) -> Result<Self> {
        let mut widths = self.widths.clone();
        *widths.last_mut().unwrap() = match head {
            Head::SoftmaxClassifier(k) => k,
            Head::RegressionMeanOnly => 1,
            Head::RegressionMeanLogVar => 2,
        };
        Self::new(widths, head)
    }
}

impl fmt::Display for MlpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join("-"))
    }
}

/// Head selector used when parsing architecture strings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Classifier,
    MeanOnly,
    MeanLogVar,
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier" | "softmax" => Ok(HeadKind::Classifier),
            "mean" | "mean-only" => Ok(HeadKind::MeanOnly),
            "mean-logvar" | "heteroscedastic" => Ok(HeadKind::MeanLogVar),
            _ => Err(Error::InvalidSpec(format!("unknown head {s:?}"))),
        }
    }
}

pub fn num_params(spec: &MlpSpec) -> usize {
    spec.num_params()
}

/// Flat parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn zeros_for(spec: &MlpSpec) -> Self {
        Self::zeros(spec.num_params())
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(v)
    }

    /// Concatenates per-layer `(weights, bias)` pairs in layout order.
    pub fn from_layers(spec: &MlpSpec, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let layout = spec.layers();
        if layers.len() != layout.len() {
            return Err(Error::shape("layer count", layout.len(), layers.len()));
        }
        let mut v = Vec::with_capacity(spec.num_params());
        for (l, (w, b)) in layout.iter().zip(layers) {
            if w.len() != l.fan_in * l.fan_out || b.len() != l.fan_out {
                return Err(Error::shape(
                    "layer parameters",
                    format!("{}+{}", l.fan_in * l.fan_out, l.fan_out),
                    format!("{}+{}", w.len(), b.len()),
                ));
            }
            v.extend_from_slice(w);
            v.extend_from_slice(b);
        }
        Ok(Self(v))
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    /// Weight and bias slices of layer `l`.
    pub fn layer<'a>(&'a self, layout: &LayerLayout) -> (&'a [f64], &'a [f64]) {
        (
            &self.0[layout.weight_offset..layout.bias_offset],
            &self.0[layout.bias_offset..layout.end()],
        )
    }

    pub fn check_len(&self, spec: &MlpSpec) -> Result<()> {
        if self.0.len() != spec.num_params() {
            return Err(Error::shape("parameter vector", spec.num_params(), self.0.len()));
        }
        Ok(())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// He-style initialization: weights `N(0, scale^2 / fan_in)`, zero biases.
pub fn init_params<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R, scale: f64) -> Result<ParamVector> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::pre(format!("init scale must be positive, got {scale}")));
    }
    let mut p = ParamVector::zeros_for(spec);
    for l in spec.layers() {
        let sd = scale / (l.fan_in as f64).sqrt();
        for w in &mut p[l.weight_offset..l.bias_offset] {
            let z: f64 = rng.sample(StandardNormal);
            *w = sd * z;
        }
    }
    Ok(p)
}

/// Per-layer values recorded by [`forward`] for use in [`backward`].
///
/// `activations[0]` is the input batch; `activations[l]` is the input to
/// layer `l`. `pre_activations[l]` is `Z_l = A_l W_l + b_l`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub activations: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }
}

fn check_input(spec: &MlpSpec, params: &ParamVector, x: &Matrix) -> Result<()> {
    params.check_len(spec)?;
    if x.cols() != spec.input_dim() {
        return Err(Error::shape("input columns", spec.input_dim(), x.cols()));
    }
    Ok(())
}

fn affine(a: &Matrix, w: &[f64], b: &[f64], l: &LayerLayout) -> Matrix {
    let mut z = Matrix::zeros(a.rows(), l.fan_out);
    for row in 0..a.rows() {
        z.row_mut(row).copy_from_slice(b);
    }
    gemm(
        1.0,
        a.into(),
        Trans::No,
        MatRef::new(w, l.fan_in, l.fan_out),
        Trans::No,
        1.0,
        z.as_mut_slice(),
        l.fan_out,
    );
    z
}

fn relu(z: &Matrix) -> Matrix {
    let mut a = z.clone();
    for v in a.as_mut_slice() {
        // subgradient at 0 is 0, so 0 maps to 0 either way
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
    a
}

/// Raw final-layer outputs plus the trace needed by [`backward`].
pub fn forward(spec: &MlpSpec, params: &ParamVector, x: &Matrix) -> Result<(Matrix, ForwardTrace)> {
    check_input(spec, params, x)?;
    let layers = spec.layers();
    let mut activations = Vec::with_capacity(layers.len());
    let mut pre_activations = Vec::with_capacity(layers.len());
    activations.push(x.clone());
    for (i, l) in layers.iter().enumerate() {
        let (w, b) = params.layer(l);
        let z = affine(activations.last().unwrap(), w, b, l);
        if i + 1 < layers.len() {
            activations.push(relu(&z));
        }
        pre_activations.push(z);
    }
    let out = pre_activations.last().unwrap().clone();
    Ok((
        out,
        ForwardTrace {
            activations,
            pre_activations,
        },
    ))
}

/// Forward pass without keeping a trace.
pub fn predict(spec: &MlpSpec, params: &ParamVector, x: &Matrix) -> Result<Matrix> {
    check_input(spec, params, x)?;
    let layers = spec.layers();
    let mut a: Option<Matrix> = None;
    for (i, l) in layers.iter().enumerate() {
        let (w, b) = params.layer(l);
        let mut z = affine(a.as_ref().unwrap_or(x), w, b, l);
        if i + 1 < layers.len() {
            for v in z.as_mut_slice() {
                if *v <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        a = Some(z);
    }
    Ok(a.unwrap())
}

/// Gradient of the batch-summed loss with respect to all parameters, given
/// the loss gradient with respect to the raw outputs.
pub fn backward(
    spec: &MlpSpec,
    params: &ParamVector,
    trace: &ForwardTrace,
    output_grad: &Matrix,
) -> Result<ParamVector> {
    params.check_len(spec)?;
    let layers = spec.layers();
    let batch = trace.batch_size();
    if trace.pre_activations.len() != layers.len() || trace.activations.len() != layers.len() {
        return Err(Error::shape("forward trace depth", layers.len(), trace.pre_activations.len()));
    }
    if output_grad.rows() != batch || output_grad.cols() != spec.output_dim() {
        return Err(Error::shape(
            "output gradient",
            format!("{}x{}", batch, spec.output_dim()),
            format!("{}x{}", output_grad.rows(), output_grad.cols()),
        ));
    }

    let mut grad = ParamVector::zeros_for(spec);
    let mut delta = output_grad.clone();
    for (i, l) in layers.iter().enumerate().rev() {
        let a = &trace.activations[i];
        {
            let gw = &mut grad[l.weight_offset..l.bias_offset];
            gemm(1.0, a.into(), Trans::Yes, (&delta).into(), Trans::No, 0.0, gw, l.fan_out);
        }
        {
            let gb = &mut grad[l.bias_offset..l.end()];
            for row in delta.iter_rows() {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        if i > 0 {
            let (w, _) = params.layer(l);
            let mut da = Matrix::zeros(batch, l.fan_in);
            gemm(
                1.0,
                (&delta).into(),
                Trans::No,
                MatRef::new(w, l.fan_in, l.fan_out),
                Trans::Yes,
                0.0,
                da.as_mut_slice(),
                l.fan_in,
            );
            let z_prev = &trace.pre_activations[i - 1];
            for (d, z) in da.as_mut_slice().iter_mut().zip(z_prev.as_slice()) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
            delta = da;
        }
    }
    Ok(grad)
}

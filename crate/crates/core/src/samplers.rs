//! Parameter-space samplers: plug-in SGD, SGLD with burn-in and thinning,
//! and full-batch HMC.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, MlpSpec, ParamVector};
use crate::objectives::{posterior_grad_estimate, NoiseModel};
use crate::par;
use crate::rng::{self, Stream, StreamRng};

/// Step-size schedule indexed by zero-based iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    /// `initial * factor^(t / every)`.
    StepDecay { initial: f64, factor: f64, every: usize },
}

impl StepSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Constant(eta) => eta,
            StepSchedule::StepDecay { initial, factor, every } => {
                initial * factor.powi((t / every) as i32)
            }
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant(eta) => eta > 0.0 && eta.is_finite(),
            StepSchedule::StepDecay { initial, factor, every } => {
                initial > 0.0 && initial.is_finite() && factor > 0.0 && factor.is_finite() && every >= 1
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::pre(format!("{what}: step sizes must be positive, got {self:?}")))
        }
    }
}

/// Hyperparameters of one SGD or SGLD chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainConfig {
    pub eta: StepSchedule,
    /// Total iterations `T`.
    pub iterations: usize,
    /// Burn-in iterations `B`.
    pub burn_in: usize,
    /// Thinning interval `tau`.
    pub thin: usize,
    /// Minibatch size `M`.
    pub batch_size: usize,
    /// Gaussian prior precision `lambda`.
    pub prior_precision: f64,
    pub init_scale: f64,
    /// Record the minibatch NLL every this many iterations (0 disables).
    pub log_every: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            eta: StepSchedule::Constant(1e-3),
            iterations: 1000,
            burn_in: 0,
            thin: 1,
            batch_size: 1,
            prior_precision: 1.0,
            init_scale: std::f64::consts::SQRT_2,
            log_every: 0,
            seed: 0,
        }
    }
}

impl ChainConfig {
    /// Checks everything except the iteration count.
    pub fn validate_step_params(&self) -> Result<()> {
        self.eta.validate("teacher schedule")?;
        if self.thin == 0 {
            return Err(Error::pre("thinning interval must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::pre("minibatch size must be >= 1"));
        }
        if !(self.prior_precision >= 0.0) {
            return Err(Error::pre("prior precision must be >= 0"));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::pre("init scale must be > 0"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_step_params()?;
        if self.iterations <= self.burn_in {
            return Err(Error::pre(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations, self.burn_in
            )));
        }
        Ok(())
    }

    /// Number of samples an SGLD run keeps: `floor((T - B) / tau)`.
    pub fn retained_count(&self) -> usize {
        self.iterations.saturating_sub(self.burn_in) / self.thin
    }

    /// Whether the iterate produced by update `t` (1-based) is kept.
    pub fn retains(&self, t: usize) -> bool {
        t > self.burn_in && (t - self.burn_in) % self.thin == 0
    }

    pub fn summary(&self) -> String {
        format!(
            "eta={:?} T={} B={} tau={} M={} lambda={} seed={}",
            self.eta, self.iterations, self.burn_in, self.thin, self.batch_size, self.prior_precision, self.seed
        )
    }
}

/// Set of retained posterior samples for one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorEnsemble {
    pub spec: MlpSpec,
    pub samples: Vec<ParamVector>,
    pub provenance: String,
}

impl PosteriorEnsemble {
    pub fn new(spec: MlpSpec, provenance: impl Into<String>) -> Self {
        Self {
            spec,
            samples: Vec::new(),
            provenance: provenance.into(),
        }
    }

    pub fn from_samples(spec: MlpSpec, samples: Vec<ParamVector>, provenance: impl Into<String>) -> Result<Self> {
        for s in &samples {
            s.check_len(&spec)?;
        }
        Ok(Self {
            spec,
            samples,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Concatenates another ensemble of the same architecture.
    pub fn merge(&mut self, other: PosteriorEnsemble) -> Result<()> {
        if other.spec != self.spec {
            return Err(Error::HeadMismatch(format!("merge {} into {}", other.spec, self.spec)));
        }
        self.samples.extend(other.samples);
        Ok(())
    }
}

/// Receives retained chain iterates.
pub trait SampleSink {
    fn accept(&mut self, iteration: usize, theta: &ParamVector) -> Result<()>;
}

impl SampleSink for PosteriorEnsemble {
    fn accept(&mut self, _iteration: usize, theta: &ParamVector) -> Result<()> {
        self.samples.push(theta.clone());
        Ok(())
    }
}

impl<A: SampleSink, B: SampleSink> SampleSink for (A, B) {
    fn accept(&mut self, iteration: usize, theta: &ParamVector) -> Result<()> {
        self.0.accept(iteration, theta)?;
        self.1.accept(iteration, theta)
    }
}

/// Discards everything.
pub struct NullSink;

impl SampleSink for NullSink {
    fn accept(&mut self, _: usize, _: &ParamVector) -> Result<()> {
        Ok(())
    }
}

/// Gradient ascent on the log posterior: `params += eta * grad`.
pub fn sgd_step(params: &mut ParamVector, grad: &ParamVector, eta: f64) {
    debug_assert!(eta > 0.0);
    for (p, g) in params.iter_mut().zip(grad.iter()) {
        *p += eta * g;
    }
}

/// Langevin update `params += (eta/2) * grad + z` with `z` drawn from `noise`
/// (which must yield `N(0, eta)` draws for a proper SGLD step).
pub fn sgld_step_with_noise(
    params: &mut ParamVector,
    grad: &ParamVector,
    eta: f64,
    mut noise: impl FnMut() -> f64,
) {
    debug_assert!(eta > 0.0);
    let half = eta / 2.0;
    for (p, g) in params.iter_mut().zip(grad.iter()) {
        *p += half * g + noise();
    }
}

/// One SGLD step with `z ~ N(0, eta I)`.
pub fn sgld_step<R: Rng + ?Sized>(params: &mut ParamVector, grad: &ParamVector, eta: f64, rng: &mut R) {
    let sd = eta.sqrt();
    sgld_step_with_noise(params, grad, eta, || {
        let z: f64 = rng.sample(StandardNormal);
        sd * z
    });
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainKind {
    Sgd,
    /// `inject_noise = false` keeps the Langevin drift but drops `z_t`.
    Sgld { inject_noise: bool },
}

impl ChainKind {
    pub const SGLD: ChainKind = ChainKind::Sgld { inject_noise: true };
}

/// Stateful SGD/SGLD chain over one dataset.
///
/// Parameter init, Langevin noise and minibatch indices come from three
/// separate streams derived from `config.seed`.
pub struct TeacherChain<'a> {
    spec: &'a MlpSpec,
    data: &'a Dataset,
    config: &'a ChainConfig,
    noise: Option<NoiseModel>,
    kind: ChainKind,
    theta: ParamVector,
    t: usize,
    noise_rng: StreamRng,
    batch_rng: StreamRng,
    last_nll: f64,
    idx: Vec<usize>,
}

impl<'a> TeacherChain<'a> {
    pub fn new(
        kind: ChainKind,
        spec: &'a MlpSpec,
        data: &'a Dataset,
        config: &'a ChainConfig,
        noise: Option<NoiseModel>,
    ) -> Result<Self> {
        config.validate_step_params()?;
        if data.is_empty() {
            return Err(Error::pre("empty dataset"));
        }
        if config.batch_size > data.len() {
            return Err(Error::pre(format!(
                "minibatch size {} exceeds dataset size {}",
                config.batch_size,
                data.len()
            )));
        }
        let theta = nn::init_params(spec, &mut rng::stream(config.seed, Stream::TeacherInit, 0), config.init_scale)?;
        Self::with_init(kind, spec, data, config, noise, theta)
    }

    pub fn with_init(
        kind: ChainKind,
        spec: &'a MlpSpec,
        data: &'a Dataset,
        config: &'a ChainConfig,
        noise: Option<NoiseModel>,
        theta: ParamVector,
    ) -> Result<Self> {
        theta.check_len(spec)?;
        Ok(Self {
            spec,
            data,
            config,
            noise,
            kind,
            theta,
            t: 0,
            noise_rng: rng::stream(config.seed, Stream::TeacherNoise, 0),
            batch_rng: rng::stream(config.seed, Stream::Minibatch, 0),
            last_nll: f64::NAN,
            idx: vec![0; config.batch_size],
        })
    }

    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    pub fn into_theta(self) -> ParamVector {
        self.theta
    }

    /// Number of updates applied so far.
    pub fn iteration(&self) -> usize {
        self.t
    }

    pub fn last_minibatch_nll(&self) -> f64 {
        self.last_nll
    }

    /// Applies update `t + 1`; minibatch indices are drawn uniformly with
    /// replacement.
    pub fn step(&mut self) -> Result<()> {
        let eta = self.config.eta.at(self.t);
        self.t += 1;
        let n = self.data.len();
        for i in self.idx.iter_mut() {
            *i = self.batch_rng.random_range(0..n);
        }
        let batch = self.data.gather(&self.idx);
        let est = posterior_grad_estimate(
            self.spec,
            &self.theta,
            &batch,
            n,
            self.config.prior_precision,
            self.noise,
        )?;
        self.last_nll = est.minibatch_nll;
        match self.kind {
            ChainKind::Sgd => sgd_step(&mut self.theta, &est.grad, eta),
            ChainKind::Sgld { inject_noise: true } => sgld_step(&mut self.theta, &est.grad, eta, &mut self.noise_rng),
            ChainKind::Sgld { inject_noise: false } => sgd_step(&mut self.theta, &est.grad, eta / 2.0),
        }
        if !self.theta.is_finite() {
            return Err(Error::Diverged {
                which: "teacher",
                iteration: self.t,
            });
        }
        Ok(())
    }

    /// Whether the current iterate falls on the retention grid.
    pub fn should_retain(&self) -> bool {
        matches!(self.kind, ChainKind::Sgld { .. }) && self.config.retains(self.t)
    }
}

/// Result of [`run_chain`].
#[derive(Clone, Debug)]
pub struct ChainOutput {
    /// Last iterate (the plug-in estimate for SGD).
    pub last: ParamVector,
    /// Retained SGLD samples; empty for SGD.
    pub ensemble: PosteriorEnsemble,
    /// `(iteration, minibatch NLL)` pairs at the logging cadence.
    pub history: Vec<(usize, f64)>,
}

pub fn run_chain(
    kind: ChainKind,
    spec: &MlpSpec,
    data: &Dataset,
    config: &ChainConfig,
    noise: Option<NoiseModel>,
) -> Result<ChainOutput> {
    let mut ens = PosteriorEnsemble::new(spec.clone(), config.summary());
    let (last, history) = run_chain_with_sink(kind, spec, data, config, noise, &mut ens)?;
    Ok(ChainOutput {
        last,
        ensemble: ens,
        history,
    })
}

/// Like [`run_chain`] but hands retained iterates to `sink` instead of storing
/// them.
pub fn run_chain_with_sink(
    kind: ChainKind,
    spec: &MlpSpec,
    data: &Dataset,
    config: &ChainConfig,
    noise: Option<NoiseModel>,
    sink: &mut dyn SampleSink,
) -> Result<(ParamVector, Vec<(usize, f64)>)> {
    config.validate()?;
    let mut chain = TeacherChain::new(kind, spec, data, config, noise)?;
    let mut history = Vec::new();
    for _ in 0..config.iterations {
        chain.step()?;
        let t = chain.iteration();
        if config.log_every > 0 && t % config.log_every == 0 {
            history.push((t, chain.last_minibatch_nll()));
        }
        if chain.should_retain() {
            sink.accept(t, chain.theta())?;
        }
    }
    Ok((chain.into_theta(), history))
}

/// Runs `n_chains` independent SGLD chains (seeds derived from
/// `(config.seed, chain index)`) and concatenates their ensembles in chain
/// order.
pub fn run_chains(
    spec: &MlpSpec,
    data: &Dataset,
    config: &ChainConfig,
    noise: Option<NoiseModel>,
    n_chains: usize,
) -> Result<PosteriorEnsemble> {
    let outputs = par::map_indexed(n_chains, |i| {
        let mut c = config.clone();
        c.seed = rng::derive_seed(config.seed, Stream::Trial, i as u64);
        run_chain(ChainKind::SGLD, spec, data, &c, noise).map(|o| o.ensemble)
    });
    let mut merged = PosteriorEnsemble::new(spec.clone(), format!("{} chains x {}", n_chains, config.summary()));
    for o in outputs {
        merged.merge(o?)?;
    }
    Ok(merged)
}

/// Differentiable unnormalized log density for HMC.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Returns `log p(x)` and writes its gradient into `grad`.
    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// Full-batch log posterior of an MLP.
pub struct MlpPosterior<'a> {
    pub spec: &'a MlpSpec,
    pub data: &'a Dataset,
    pub prior_precision: f64,
    pub noise: Option<NoiseModel>,
}

impl LogDensity for MlpPosterior<'_> {
    fn dim(&self) -> usize {
        self.spec.num_params()
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let theta = ParamVector::from_vec(x.to_vec());
        match posterior_grad_estimate(self.spec, &theta, self.data, self.data.len(), self.prior_precision, self.noise) {
            Ok(est) => {
                grad.copy_from_slice(&est.grad);
                est.log_posterior
            }
            Err(_) => f64::NAN,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    /// Samples returned after burn-in and thinning.
    pub n_samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Each trajectory uses `step_size * U(1 - jitter, 1 + jitter)`.
    pub jitter: f64,
}

impl HmcConfig {
    pub fn new(step_size: f64, leapfrog_steps: usize, n_samples: usize, burn_in: usize) -> Self {
        Self {
            step_size,
            leapfrog_steps,
            n_samples,
            burn_in,
            thin: 1,
            jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HmcOutput {
    pub samples: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    pub proposals: usize,
}

impl HmcOutput {
    pub fn into_ensemble(self, spec: &MlpSpec, provenance: impl Into<String>) -> Result<PosteriorEnsemble> {
        PosteriorEnsemble::from_samples(
            spec.clone(),
            self.samples.into_iter().map(ParamVector::from_vec).collect(),
            provenance,
        )
    }
}

/// `L` leapfrog steps from `(x, p)` in place; returns the final log density
/// and leaves its gradient in `grad` (which must hold the gradient at the
/// starting `x` on entry).
pub fn leapfrog(
    target: &dyn LogDensity,
    x: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    eps: f64,
    steps: usize,
) -> f64 {
    let mut logp = f64::NAN;
    for _ in 0..steps {
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi += 0.5 * eps * gi;
        }
        for (xi, pi) in x.iter_mut().zip(p.iter()) {
            *xi += eps * pi;
        }
        logp = target.log_density_and_grad(x, grad);
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi += 0.5 * eps * gi;
        }
    }
    logp
}

/// Hamiltonian for unit-mass momentum.
pub fn hamiltonian(logp: f64, p: &[f64]) -> f64 {
    -logp + 0.5 * p.iter().map(|v| v * v).sum::<f64>()
}

/// Standard HMC with identity mass matrix and Metropolis correction.
/// Proposals with a non-finite Hamiltonian are rejected.
pub fn hmc_sample<R: Rng + ?Sized>(
    target: &dyn LogDensity,
    init: &[f64],
    config: &HmcConfig,
    rng: &mut R,
) -> Result<HmcOutput> {
    if !(config.step_size > 0.0) || config.leapfrog_steps == 0 || config.thin == 0 {
        return Err(Error::pre("HMC needs step size > 0, L >= 1 and thin >= 1"));
    }
    if !(0.0..1.0).contains(&config.jitter) {
        return Err(Error::pre("HMC jitter must be in [0, 1)"));
    }
    let d = target.dim();
    if init.len() != d {
        return Err(Error::shape("HMC init", d, init.len()));
    }
    let mut x = init.to_vec();
    let mut grad = vec![0.0; d];
    let mut logp = target.log_density_and_grad(&x, &mut grad);
    if !logp.is_finite() {
        return Err(Error::pre("HMC initial point has non-finite log density"));
    }

    let total = config.burn_in + config.n_samples * config.thin;
    let mut samples = Vec::with_capacity(config.n_samples);
    let mut accepted = 0usize;
    let mut xp = vec![0.0; d];
    let mut p = vec![0.0; d];
    let mut gp = vec![0.0; d];
    for it in 0..total {
        for v in p.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let h0 = hamiltonian(logp, &p);
        let eps = if config.jitter > 0.0 {
            config.step_size * rng.random_range(1.0 - config.jitter..1.0 + config.jitter)
        } else {
            config.step_size
        };
        xp.copy_from_slice(&x);
        gp.copy_from_slice(&grad);
        let logp_new = leapfrog(target, &mut xp, &mut p, &mut gp, eps, config.leapfrog_steps);
        let h1 = hamiltonian(logp_new, &p);
        let u: f64 = rng.random();
        if h1.is_finite() && u.ln() < h0 - h1 {
            std::mem::swap(&mut x, &mut xp);
            std::mem::swap(&mut grad, &mut gp);
            logp = logp_new;
            accepted += 1;
        }
        if it >= config.burn_in && (it - config.burn_in + 1) % config.thin == 0 {
            samples.push(x.clone());
        }
    }
    Ok(HmcOutput {
        samples,
        acceptance_rate: accepted as f64 / total.max(1) as f64,
        proposals: total,
    })
}

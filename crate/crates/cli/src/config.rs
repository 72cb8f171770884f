//! Flat `key = value` configuration with `[section]` headers.
//!
//! ```text
//! # comment
//! [chain]
//! eta = 1e-5        # trailing comments are allowed
//! iterations = 500000
//! ```
//!
//! Keys are addressed as `section.key`. Command-line overrides use the same
//! dotted form. Every key must be consumed by the experiment schema; leftovers
//! are reported as errors so typos do not pass silently.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use bdk_core::distill::{StudentConfig, StudentDataGen};
use bdk_core::eval::GridGeometry;
use bdk_core::samplers::{ChainConfig, HmcConfig, StepSchedule};

use crate::CliError;

#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut raw = RawConfig::default();
        let mut section = String::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = strip_comment(line).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::Config(format!("line {lineno}: unterminated section header")))?;
                section = name.trim().to_string();
                if section.is_empty() || !section.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(CliError::Config(format!("line {lineno}: bad section name `{name}`")));
                }
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {lineno}: expected `key = value`")))?;
            let k = k.trim();
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(CliError::Config(format!("line {lineno}: bad key `{k}`")));
            }
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            let v = v.trim();
            let v = match v.strip_prefix('"').and_then(|x| x.strip_suffix('"')) {
                Some(inner) => inner,
                None => v,
            }
            .to_string();
            if raw.entries.insert(key.clone(), (v, lineno)).is_some() {
                return Err(CliError::Config(format!("line {lineno}: duplicate key `{key}`")));
            }
        }
        Ok(raw)
    }

    /// Applies a `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
        self.entries.insert(k.trim().to_string(), (v.trim().to_string(), 0));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }
}

fn strip_comment(line: &str) -> &str {
    let t = line.trim_start();
    if t.starts_with('#') || t.starts_with(';') {
        return "";
    }
    match line.find(" #") {
        Some(i) => &line[..i],
        None => line,
    }
}

/// Typed access that records which keys were read.
struct Reader<'a> {
    raw: &'a RawConfig,
    used: RefCell<BTreeSet<String>>,
}

impl<'a> Reader<'a> {
    fn new(raw: &'a RawConfig) -> Self {
        Self {
            raw,
            used: RefCell::new(BTreeSet::new()),
        }
    }

    fn str(&self, key: &str) -> Option<&'a str> {
        self.used.borrow_mut().insert(key.to_string());
        self.raw.get(key)
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        match self.str(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|e| CliError::Config(format!("{key}: cannot parse `{s}`: {e}"))),
        }
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn pair(&self, key: &str, default: (f64, f64)) -> Result<(f64, f64), CliError> {
        match self.str(key) {
            None => Ok(default),
            Some(s) => {
                let parts: Vec<&str> = s.split(',').map(str::trim).collect();
                let bad = || CliError::Config(format!("{key}: expected `lo,hi`, got `{s}`"));
                if parts.len() != 2 {
                    return Err(bad());
                }
                let lo: f64 = parts[0].parse().map_err(|_| bad())?;
                let hi: f64 = parts[1].parse().map_err(|_| bad())?;
                if !(lo < hi) {
                    return Err(CliError::Config(format!("{key}: lower bound must be below upper bound")));
                }
                Ok((lo, hi))
            }
        }
    }

    fn unused(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.raw.entries.keys().filter(|k| !used.contains(*k)).cloned().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Toy2d,
    Toy1d,
    Boston,
    Mnist,
    ConjugateCheck,
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "toy2d" => Ok(Experiment::Toy2d),
            "toy1d" => Ok(Experiment::Toy1d),
            "boston" => Ok(Experiment::Boston),
            "mnist" => Ok(Experiment::Mnist),
            "conjugate-check" => Ok(Experiment::ConjugateCheck),
            _ => Err(format!(
                "unknown experiment `{s}` (expected toy2d, toy1d, boston, mnist or conjugate-check)"
            )),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::Toy2d => "toy2d",
            Experiment::Toy1d => "toy1d",
            Experiment::Boston => "boston",
            Experiment::Mnist => "mnist",
            Experiment::ConjugateCheck => "conjugate-check",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Sgd,
    Sgld,
    Hmc,
    Distill,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(Method::Sgd),
            "sgld" => Ok(Method::Sgld),
            "hmc" => Ok(Method::Hmc),
            "distill" => Ok(Method::Distill),
            _ => Err(format!("unknown method `{s}` (expected sgd, sgld, hmc or distill)")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Sgd => "sgd",
            Method::Sgld => "sgld",
            Method::Hmc => "hmc",
            Method::Distill => "distill",
        })
    }
}

/// Student input generator, resolved against the training data at run time.
#[derive(Clone, Debug, PartialEq)]
pub enum GenSpec {
    Box { lo: f64, hi: f64 },
    Perturb { sigma: f64 },
}

impl GenSpec {
    pub fn build(&self, train_inputs: &bdk_core::Matrix) -> StudentDataGen {
        match *self {
            GenSpec::Box { lo, hi } => StudentDataGen::uniform_square(lo, hi, train_inputs.cols()),
            GenSpec::Perturb { sigma } => StudentDataGen::perturb(train_inputs, sigma),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmcSettings {
    pub config: HmcConfig,
    /// Independent chains, each initialized from its own prior draw.
    pub chains: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub path: String,
    pub target: String,
    pub train_n: usize,
    pub test_n: usize,
    pub standardize_targets: bool,
    pub images: String,
    pub labels: String,
    pub subset: Option<usize>,
    /// Seed for the dataset itself (toy generators, MNIST split); Boston
    /// splits are re-drawn per trial.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub method: Method,
    /// Human-readable description of the recipe this file reproduces.
    pub source: String,
    pub scale: String,
    pub seed: u64,
    pub n_trials: usize,
    pub out: Option<PathBuf>,
    pub checkpoint: bool,

    pub arch: String,
    pub student_arch: String,
    pub init_scale: f64,
    pub noise_precision: Option<f64>,

    pub chain: ChainConfig,
    pub student: StudentConfig,
    pub generator: GenSpec,
    pub hmc: HmcSettings,
    pub grid: GridGeometry,
    /// Compute an HMC reference grid and report `kl_grid` (toy2d only).
    pub reference: bool,
    pub band: (f64, f64, usize),
    pub data: DataSettings,
}

fn schedule(r: &Reader<'_>, prefix: &str, default: f64) -> Result<StepSchedule, CliError> {
    let initial = r.or(&format!("{prefix}"), default)?;
    let factor = r.or(&format!("{prefix}_decay"), 1.0)?;
    let every = r.or(&format!("{prefix}_every"), 0usize)?;
    let s = if every == 0 || factor == 1.0 {
        StepSchedule::Constant(initial)
    } else {
        StepSchedule::StepDecay { initial, factor, every }
    };
    s.validate(prefix).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(s)
}

fn write_schedule(out: &mut String, key: &str, s: &StepSchedule) {
    match *s {
        StepSchedule::Constant(v) => out.push_str(&format!("{key} = {v:e}\n")),
        StepSchedule::StepDecay { initial, factor, every } => {
            out.push_str(&format!("{key} = {initial:e}\n{key}_decay = {factor}\n{key}_every = {every}\n"))
        }
    }
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, CliError> {
        let r = Reader::new(raw);
        let experiment: Experiment = r
            .parse("experiment.name")?
            .ok_or_else(|| CliError::Config("experiment.name is required".into()))?;
        let method: Method = r
            .parse("experiment.method")?
            .ok_or_else(|| CliError::Config("experiment.method is required".into()))?;
        if method == Method::Hmc && matches!(experiment, Experiment::Boston | Experiment::Mnist) {
            return Err(CliError::Config(format!(
                "experiment.method: hmc is only available for toy2d, toy1d and conjugate-check, not {experiment}"
            )));
        }
        let n_trials = r.or("experiment.n_trials", 1usize)?;
        if n_trials == 0 {
            return Err(CliError::Config("experiment.n_trials must be >= 1".into()));
        }
        let source = r.str("experiment.source").unwrap_or("").to_string();
        if source.is_empty() {
            return Err(CliError::Config("experiment.source must name the recipe being reproduced".into()));
        }

        let default_arch = match experiment {
            Experiment::Toy2d => "2-10-2",
            Experiment::Toy1d => "1-10-1",
            Experiment::Boston => "13-50-1",
            Experiment::Mnist => "784-100-100-10",
            Experiment::ConjugateCheck => "1-1",
        };
        let arch = r.str("model.arch").unwrap_or(default_arch).to_string();
        let regression = matches!(experiment, Experiment::Toy1d | Experiment::Boston | Experiment::ConjugateCheck);
        // a regression student carries (mu, log variance) outputs
        let student_arch = match r.str("model.student_arch") {
            Some(a) => a.to_string(),
            None if regression => match arch.rsplit_once('-') {
                Some((body, _)) => format!("{body}-2"),
                None => arch.clone(),
            },
            None => arch.clone(),
        };
        let init_scale = r.or("model.init_scale", std::f64::consts::SQRT_2)?;
        let noise_precision: Option<f64> = r.parse("model.noise_precision")?;
        if regression && noise_precision.is_none() {
            return Err(CliError::Config(format!("model.noise_precision is required for {experiment}")));
        }
        if let Some(l) = noise_precision {
            if !(l > 0.0) {
                return Err(CliError::Config("model.noise_precision must be > 0".into()));
            }
        }

        let chain = ChainConfig {
            eta: schedule(&r, "chain.eta", 1e-3)?,
            iterations: r.or("chain.iterations", 10_000usize)?,
            burn_in: r.or("chain.burn_in", 0usize)?,
            thin: r.or("chain.thin", 1usize)?,
            batch_size: r.or("chain.batch_size", 1usize)?,
            prior_precision: r.or("chain.prior_precision", 1.0)?,
            init_scale,
            log_every: r.or("chain.log_every", 0usize)?,
            seed: 0,
        };
        if method != Method::Hmc {
            if method == Method::Sgd {
                chain.validate_step_params()
            } else {
                chain.validate()
            }
            .map_err(|e| CliError::Config(format!("chain: {e}")))?;
        }

        let student = StudentConfig {
            rho: schedule(&r, "student.rho", 1e-2)?,
            gamma: r.or("student.gamma", 1e-3)?,
            batch_size: r.or("student.batch_size", 100usize)?,
            init_scale: r.or("student.init_scale", init_scale)?,
            output_scale: r.or("student.output_scale", 1.0)?,
        };
        let generator = match r.str("student.generator").unwrap_or("box") {
            "box" => {
                let (lo, hi) = r.pair("student.box", (-10.0, 10.0))?;
                GenSpec::Box { lo, hi }
            }
            "perturb" => GenSpec::Perturb {
                sigma: r.or("student.sigma", 0.0)?,
            },
            other => {
                return Err(CliError::Config(format!(
                    "student.generator: expected box or perturb, got `{other}`"
                )))
            }
        };

        let mut hcfg = HmcConfig::new(
            r.or("hmc.step_size", 0.05)?,
            r.or("hmc.leapfrog_steps", 20usize)?,
            r.or("hmc.samples", 1000usize)?,
            r.or("hmc.burn_in", 200usize)?,
        );
        hcfg.thin = r.or("hmc.thin", 1usize)?;
        hcfg.jitter = r.or("hmc.jitter", 0.0)?;
        let hmc = HmcSettings {
            config: hcfg,
            chains: r.or("hmc.chains", 1usize)?.max(1),
        };

        let (x0, x1) = r.pair("grid.x_range", (-10.0, 10.0))?;
        let (y0, y1) = r.pair("grid.y_range", (-10.0, 10.0))?;
        let res = r.or("grid.resolution", 100usize)?;
        let grid = GridGeometry {
            x_range: (x0, x1),
            y_range: (y0, y1),
            nx: res,
            ny: res,
        };
        grid.validate().map_err(|e| CliError::Config(format!("grid: {e}")))?;
        let reference = match r.str("grid.reference").unwrap_or("hmc") {
            "hmc" => true,
            "none" => false,
            other => return Err(CliError::Config(format!("grid.reference: expected hmc or none, got `{other}`"))),
        };
        let (b0, b1) = r.pair("band.range", (-6.0, 6.0))?;
        let band = (b0, b1, r.or("band.points", 121usize)?.max(2));

        let default_n = match experiment {
            Experiment::Boston => (456, 50),
            Experiment::Mnist => (8_000, 2_000),
            Experiment::ConjugateCheck => (10, 0),
            Experiment::Toy2d | Experiment::Toy1d => (20, 20),
        };
        let data = DataSettings {
            path: r.str("data.path").unwrap_or("boston.csv").to_string(),
            target: r.str("data.target").unwrap_or("medv").to_string(),
            train_n: r.or("data.train_n", default_n.0)?,
            test_n: r.or("data.test_n", default_n.1)?,
            standardize_targets: r.or("data.standardize_targets", true)?,
            images: r.str("data.images").unwrap_or("mnist/mnist10k-images-idx3-ubyte").to_string(),
            labels: r.str("data.labels").unwrap_or("mnist/mnist10k-labels-idx1-ubyte").to_string(),
            subset: r.parse("data.subset")?,
            seed: r.parse("data.seed")?,
        };

        let cfg = ExperimentConfig {
            experiment,
            method,
            source,
            scale: r.str("experiment.scale").unwrap_or("desk").to_string(),
            seed: r.or("experiment.seed", 1u64)?,
            n_trials,
            out: r.str("experiment.out").map(PathBuf::from),
            checkpoint: r.or("experiment.checkpoint", true)?,
            arch,
            student_arch,
            init_scale,
            noise_precision,
            chain,
            student,
            generator,
            hmc,
            grid,
            reference,
            band,
            data,
        };
        let unused = r.unused();
        if !unused.is_empty() {
            return Err(CliError::Config(format!("unknown config keys: {}", unused.join(", "))));
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut raw = RawConfig::parse(text)?;
        for o in overrides {
            raw.set(o)?;
        }
        Self::from_raw(&raw)
    }

    /// Fully resolved configuration in the same grammar it was read from.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str("[experiment]\n");
        s.push_str(&format!("name = {}\nmethod = {}\n", self.experiment, self.method));
        s.push_str(&format!("source = {}\nscale = {}\n", self.source, self.scale));
        s.push_str(&format!("seed = {}\nn_trials = {}\ncheckpoint = {}\n", self.seed, self.n_trials, self.checkpoint));
        s.push_str("\n[model]\n");
        s.push_str(&format!("arch = {}\nstudent_arch = {}\ninit_scale = {}\n", self.arch, self.student_arch, self.init_scale));
        if let Some(l) = self.noise_precision {
            s.push_str(&format!("noise_precision = {l}\n"));
        }
        let c = &self.chain;
        s.push_str("\n[chain]\n");
        write_schedule(&mut s, "eta", &c.eta);
        s.push_str(&format!(
            "iterations = {}\nburn_in = {}\nthin = {}\nbatch_size = {}\nprior_precision = {}\nlog_every = {}\n",
            c.iterations, c.burn_in, c.thin, c.batch_size, c.prior_precision, c.log_every
        ));
        let st = &self.student;
        s.push_str("\n[student]\n");
        write_schedule(&mut s, "rho", &st.rho);
        s.push_str(&format!("gamma = {}\nbatch_size = {}\ninit_scale = {}\n", st.gamma, st.batch_size, st.init_scale));
        s.push_str(&format!("output_scale = {}\n", st.output_scale));
        match self.generator {
            GenSpec::Box { lo, hi } => s.push_str(&format!("generator = box\nbox = {lo},{hi}\n")),
            GenSpec::Perturb { sigma } => s.push_str(&format!("generator = perturb\nsigma = {sigma}\n")),
        }
        let h = &self.hmc.config;
        s.push_str("\n[hmc]\n");
        s.push_str(&format!(
            "step_size = {}\nleapfrog_steps = {}\nsamples = {}\nburn_in = {}\nthin = {}\njitter = {}\nchains = {}\n",
            h.step_size, h.leapfrog_steps, h.n_samples, h.burn_in, h.thin, h.jitter, self.hmc.chains
        ));
        let g = &self.grid;
        s.push_str("\n[grid]\n");
        s.push_str(&format!(
            "x_range = {},{}\ny_range = {},{}\nresolution = {}\nreference = {}\n",
            g.x_range.0,
            g.x_range.1,
            g.y_range.0,
            g.y_range.1,
            g.nx,
            if self.reference { "hmc" } else { "none" }
        ));
        s.push_str(&format!("\n[band]\nrange = {},{}\npoints = {}\n", self.band.0, self.band.1, self.band.2));
        let d = &self.data;
        s.push_str("\n[data]\n");
        s.push_str(&format!(
            "path = {}\ntarget = {}\ntrain_n = {}\ntest_n = {}\nstandardize_targets = {}\nimages = {}\nlabels = {}\n",
            d.path, d.target, d.train_n, d.test_n, d.standardize_targets, d.images, d.labels
        ));
        if let Some(n) = d.subset {
            s.push_str(&format!("subset = {n}\n"));
        }
        if let Some(n) = d.seed {
            s.push_str(&format!("seed = {n}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[experiment]\nname = toy2d\nmethod = sgd\nsource = unit test\n";

    #[test]
    fn parses_sections_and_comments() {
        let raw = RawConfig::parse("# top\n[a]\nx = 1  # note\n; other\n[b]\ny = \"two\"\n").unwrap();
        assert_eq!(raw.get("a.x"), Some("1"));
        assert_eq!(raw.get("b.y"), Some("two"));
        assert!(RawConfig::parse("[a]\nx = 1\nx = 2\n").is_err());
        assert!(RawConfig::parse("[a\n").is_err());
        assert!(RawConfig::parse("novalue\n").is_err());
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = ExperimentConfig::from_text(MINIMAL, &["chain.eta=0.5".into(), "experiment.seed=9".into()]).unwrap();
        assert_eq!(c.chain.eta, StepSchedule::Constant(0.5));
        assert_eq!(c.seed, 9);
        let err = ExperimentConfig::from_text(MINIMAL, &["chain.etta=0.5".into()]).unwrap_err();
        assert!(err.to_string().contains("chain.etta"));
    }

    #[test]
    fn render_round_trips() {
        let text = format!("{MINIMAL}[chain]\neta = 1e-5\neta_decay = 0.5\neta_every = 80000\n[data]\nsubset = 100\n");
        let c = ExperimentConfig::from_text(&text, &[]).unwrap();
        let again = ExperimentConfig::from_text(&c.render(), &[]).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn rejects_bad_combinations() {
        let bad = "[experiment]\nname = boston\nmethod = hmc\nsource = x\n[model]\nnoise_precision = 1\n";
        assert!(matches!(ExperimentConfig::from_text(bad, &[]), Err(CliError::Config(_))));
        let unknown = "[experiment]\nname = cifar\nmethod = sgd\nsource = x\n";
        assert!(ExperimentConfig::from_text(unknown, &[]).is_err());
        let no_noise = "[experiment]\nname = toy1d\nmethod = sgd\nsource = x\n";
        assert!(ExperimentConfig::from_text(no_noise, &[]).is_err());
        let no_source = "[experiment]\nname = toy2d\nmethod = sgd\n";
        assert!(ExperimentConfig::from_text(no_source, &[]).is_err());
    }
}

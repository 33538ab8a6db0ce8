//! Run configuration file.

use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};

use bml_fbsde::optim::{OptimizerKind, TrainConfig};
use bml_fbsde::problems::{CoupledFbsde, Hjb, ToyBsde};
use bml_fbsde::{EstimatorKind, FbsdeProblem, MlpInit};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub trial: TrialConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub error_paths: ErrorPathsConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemName {
    Toy,
    Coupled,
    Hjb,
}

/// Initial state: a named default or one value for every coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum X0Mode {
    Named(String),
    Constant(f64),
}

impl Default for X0Mode {
    fn default() -> Self {
        X0Mode::Named("default".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub name: ProblemName,
    /// `d` for the toy and coupled problems, `n` for HJB.
    pub dim: Option<usize>,
    pub horizon: Option<f64>,
    pub amplitude: Option<f64>,
    pub sigma0: Option<f64>,
    pub rate: Option<f64>,
    pub lambda: Option<f64>,
    #[serde(default)]
    pub x0: X0Mode,
}

/// One of the built-in problems, built from a [`ProblemConfig`].
#[derive(Debug, Clone)]
pub enum Problem {
    Toy(ToyBsde),
    Coupled(CoupledFbsde),
    Hjb(Hjb),
}

impl Problem {
    pub fn as_dyn(&self) -> &dyn FbsdeProblem {
        match self {
            Problem::Toy(p) => p,
            Problem::Coupled(p) => p,
            Problem::Hjb(p) => p,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.as_dyn().horizon()
    }
}

impl ProblemConfig {
    pub fn build(&self) -> Result<Problem, CliError> {
        let reject = |field: &str, value: bool| -> Result<(), CliError> {
            match value {
                true => Err(CliError::Config(format!(
                    "problem.{field} does not apply to the {:?} problem",
                    self.name
                ))),
                false => Ok(()),
            }
        };
        if let Some(0) = self.dim {
            return Err(CliError::Config("problem.dim must be positive".into()));
        }
        if let Some(t) = self.horizon {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CliError::Config("problem.horizon must be positive".into()));
            }
        }
        match self.name {
            ProblemName::Toy => {
                reject("amplitude", self.amplitude.is_some())?;
                reject("sigma0", self.sigma0.is_some())?;
                reject("rate", self.rate.is_some())?;
                reject("lambda", self.lambda.is_some())?;
                match &self.x0 {
                    X0Mode::Named(s) if s == "default" || s == "zero" => {}
                    X0Mode::Constant(v) if *v == 0.0 => {}
                    _ => return Err(CliError::Config("the toy problem starts at x0 = 0".into())),
                }
                Ok(Problem::Toy(ToyBsde::new(
                    self.dim.unwrap_or(3),
                    self.horizon.unwrap_or(1.0),
                )))
            }
            ProblemName::Coupled => {
                reject("lambda", self.lambda.is_some())?;
                let mut p = CoupledFbsde::new(self.dim.unwrap_or(3), self.horizon.unwrap_or(1.0));
                if let Some(a) = self.amplitude {
                    p.amplitude = a;
                }
                if let Some(s) = self.sigma0 {
                    p.sigma0 = s;
                }
                if let Some(r) = self.rate {
                    p.rate = r;
                }
                p.x0 = self.x0_values(p.dim, FRAC_PI_2)?;
                Ok(Problem::Coupled(p))
            }
            ProblemName::Hjb => {
                reject("amplitude", self.amplitude.is_some())?;
                reject("sigma0", self.sigma0.is_some())?;
                reject("rate", self.rate.is_some())?;
                let mut p = Hjb::new(self.dim.unwrap_or(100));
                if let Some(t) = self.horizon {
                    p.horizon = t;
                }
                if let Some(l) = self.lambda {
                    if !(l > 0.0 && l.is_finite()) {
                        return Err(CliError::Config("problem.lambda must be positive".into()));
                    }
                    p.lambda = l;
                }
                p.x0 = self.x0_values(p.dim, 0.0)?;
                Ok(Problem::Hjb(p))
            }
        }
    }

    fn x0_values(&self, dim: usize, default: f64) -> Result<Vec<f64>, CliError> {
        let v = match &self.x0 {
            X0Mode::Named(s) => match s.as_str() {
                "default" => default,
                "zero" => 0.0,
                "half-pi" => FRAC_PI_2,
                other => return Err(CliError::Config(format!("unknown x0 mode {other:?}"))),
            },
            X0Mode::Constant(v) if v.is_finite() => *v,
            X0Mode::Constant(_) => return Err(CliError::Config("problem.x0 must be finite".into())),
        };
        Ok(vec![v; dim])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrialKind {
    #[default]
    LinearScheme1,
    LinearScheme2,
    CoupledReference,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub kind: TrialKind,
    /// Starting θ of linear trials.
    pub theta1: f64,
    pub theta2: f64,
    /// Weight initialization of network trials.
    pub init: MlpInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub steps: usize,
    pub samples: usize,
    pub intervals: usize,
    pub learning_rates: Vec<f64>,
    pub optimizer: OptimizerKind,
    pub estimator: EstimatorKind,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub repeats: usize,
    pub norm_beta: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            samples: t.samples,
            intervals: t.intervals,
            learning_rates: t.learning_rates,
            optimizer: t.optimizer,
            estimator: t.estimator,
            eval_every: t.eval_every,
            eval_samples: t.eval_samples,
            repeats: t.repeats,
            norm_beta: t.norm_beta,
        }
    }
}

impl OptimConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            samples: self.samples,
            intervals: self.intervals,
            learning_rates: self.learning_rates.clone(),
            optimizer: self.optimizer,
            estimator: self.estimator,
            seed,
            eval_every: self.eval_every,
            eval_samples: self.eval_samples,
            repeats: self.repeats,
            norm_beta: self.norm_beta,
        }
    }
}

/// Values of one sweep axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Axis {
    Fixed(f64),
    List(Vec<f64>),
    Range { start: f64, stop: f64, count: usize },
}

impl Default for Axis {
    fn default() -> Self {
        Axis::Fixed(0.0)
    }
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Axis::Fixed(v) => vec![*v],
            Axis::List(v) => v.clone(),
            Axis::Range { start, stop, count } => bml_fbsde::experiments::linspace(*start, *stop, *count),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub theta1: Axis,
    pub theta2: Axis,
    pub samples: usize,
    pub intervals: usize,
    pub estimator: EstimatorKind,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            theta1: Axis::default(),
            theta2: Axis::default(),
            samples: 100_000,
            intervals: 1000,
            estimator: EstimatorKind::FullGrid,
        }
    }
}

/// Which `θ2` the coupled reference solution uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Theta2Choice {
    Named(String),
    Value(f64),
}

impl Default for Theta2Choice {
    fn default() -> Self {
        Theta2Choice::Named("candidate-a".into())
    }
}

impl Theta2Choice {
    pub fn resolve(&self, p: &CoupledFbsde) -> Result<f64, CliError> {
        match self {
            Theta2Choice::Named(s) if s == "candidate-a" => Ok(p.theta2_candidate_a()),
            Theta2Choice::Named(s) if s == "candidate-b" => Ok(p.theta2_candidate_b()),
            Theta2Choice::Named(s) => Err(CliError::Config(format!("unknown oracle.theta2 {s:?}"))),
            Theta2Choice::Value(v) => Ok(*v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Monte Carlo samples for the HJB reference value.
    pub samples: usize,
    /// Skips the Monte Carlo run and uses this value instead.
    pub y0: Option<f64>,
    /// Replaces the HJB terminal function by a constant.
    pub constant_g: Option<f64>,
    pub theta2: Theta2Choice,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            samples: 1_000_000,
            y0: None,
            constant_g: None,
            theta2: Theta2Choice::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorPathsConfig {
    /// A train summary whose final parameters are averaged instead of
    /// training afresh.
    pub from: Option<PathBuf>,
    pub intervals: usize,
    pub samples: usize,
}

impl Default for ErrorPathsConfig {
    fn default() -> Self {
        Self {
            from: None,
            intervals: 1000,
            samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub repeats: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
        if let Some(r) = o.repeats {
            self.optim.repeats = r;
        }
    }

    /// The fully resolved configuration as TOML.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.resolved().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let c = RunConfig::parse("[problem]\nname = \"toy\"\n").unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.optim.steps, 2000);
        assert_eq!(c.trial.kind, TrialKind::LinearScheme1);
        assert!(matches!(c.problem.build().unwrap(), Problem::Toy(_)));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[problem]\nname = \"toy\"\nwidth = 3\n").is_err());
        assert!(RunConfig::parse("bogus = 1\n[problem]\nname = \"toy\"\n").is_err());
        assert!(RunConfig::parse("[problem]\nname = \"toy\"\n[optim]\nstep = 3\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let text = "seed = 7\n[problem]\nname = \"coupled\"\nx0 = 0.5\n[sweep]\ntheta1 = { start = 0.0, stop = 2.0, count = 5 }\ntheta2 = [0.1, 0.3]\n";
        let c = RunConfig::parse(text).unwrap();
        let back = RunConfig::parse(&c.resolved()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.sha256(), back.sha256());
        assert_eq!(back.sweep.theta1.values().len(), 5);
        assert_eq!(back.sweep.theta2.values(), vec![0.1, 0.3]);
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::parse("seed = 1\n[problem]\nname = \"hjb\"\ndim = 5\n").unwrap();
        let h = c.sha256();
        c.apply(&Overrides {
            seed: Some(9),
            out: Some("elsewhere".into()),
            repeats: Some(4),
        });
        assert_eq!((c.seed, c.optim.repeats), (9, 4));
        assert_eq!(c.output.dir, PathBuf::from("elsewhere"));
        assert_ne!(h, c.sha256());
    }

    #[test]
    fn misplaced_parameters_are_config_errors() {
        let c = RunConfig::parse("[problem]\nname = \"toy\"\nlambda = 2.0\n").unwrap();
        assert!(c.problem.build().is_err());
        let c = RunConfig::parse("[problem]\nname = \"coupled\"\nx0 = \"sideways\"\n").unwrap();
        assert!(c.problem.build().is_err());
    }
}

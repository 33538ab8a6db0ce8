//! Optimizers and the training loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::grad::{loss_and_grad, loss_and_grad_linear, route_for, Route};
use crate::grid::{make_grid, TimeGrid};
use crate::loss::{estimate_bml, EstimatorKind, LossEstimate};
use crate::norms::{NormAccumulator, NormKind, ProcessPair};
use crate::problem::FbsdeProblem;
use crate::rng::SeedSpec;
use crate::sim::{for_each_batch, simulate_range};
use crate::stats::RunningStats;
use crate::trial::TrialSolution;

/// Paths per sub-batch when evaluating metrics.
pub const EVAL_CHUNK: usize = 256;

/// Trials with at most this many parameters have θ logged on every row.
pub const THETA_LOG_LIMIT: usize = 16;

const STEP_TAG: u64 = 1;
const EVAL_TAG: u64 = 2;
const INIT_TAG: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Adam moments and hyperparameters. `lr` holds one rate per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(lr: Vec<f64>) -> Self {
        let n = lr.len();
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn uniform(len: usize, lr: f64) -> Self {
        Self::new(vec![lr; len])
    }
}

fn check_grad(theta: &[f64], grad: &[f64]) -> Result<()> {
    if theta.len() != grad.len() {
        return Err(Error::Config(format!(
            "gradient has {} entries, θ has {}",
            grad.len(),
            theta.len()
        )));
    }
    match grad.iter().position(|g| !g.is_finite()) {
        Some(index) => Err(Error::NonFiniteGradient { index }),
        None => Ok(()),
    }
}

/// One bias-corrected Adam update of `theta`.
pub fn adam_step(state: &mut AdamState, theta: &mut [f64], grad: &[f64]) -> Result<()> {
    check_grad(theta, grad)?;
    if state.m.len() != theta.len() {
        return Err(Error::Config(format!(
            "optimizer state has {} entries, θ has {}",
            state.m.len(),
            theta.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for k in 0..theta.len() {
        let g = grad[k];
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        theta[k] -= state.lr[k] * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Plain gradient descent with per-parameter rates.
pub fn sgd_step(lr: &[f64], theta: &mut [f64], grad: &[f64]) -> Result<()> {
    check_grad(theta, grad)?;
    for ((t, g), a) in theta.iter_mut().zip(grad).zip(lr) {
        *t -= a * g;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Paths per gradient step.
    pub samples: usize,
    pub intervals: usize,
    /// One rate per parameter group, or a single rate for all of them.
    pub learning_rates: Vec<f64>,
    pub optimizer: OptimizerKind,
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub eval_every: usize,
    /// Paths in the held-out evaluation batch.
    pub eval_samples: usize,
    pub repeats: usize,
    /// Weight of the β-norm error.
    pub norm_beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            samples: 1000,
            intervals: 1000,
            learning_rates: vec![1e-3],
            optimizer: OptimizerKind::Adam,
            estimator: EstimatorKind::Particle,
            seed: 0,
            eval_every: 100,
            eval_samples: 1000,
            repeats: 1,
            norm_beta: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("samples", self.samples),
            ("intervals", self.intervals),
            ("eval_every", self.eval_every),
            ("eval_samples", self.eval_samples),
            ("repeats", self.repeats),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::Config("learning rates must be positive and finite".into()));
        }
        if self.estimator == EstimatorKind::Martingale {
            return Err(Error::Config("the martingale loss cannot be trained on".into()));
        }
        if !(self.norm_beta >= 0.0 && self.norm_beta.is_finite()) {
            return Err(Error::Config("norm_beta must be non-negative".into()));
        }
        Ok(())
    }

    /// Expands the group rates to one rate per parameter of `trial`.
    pub fn per_parameter_rates(&self, trial: &dyn TrialSolution) -> Result<Vec<f64>> {
        let groups = trial.group_count();
        let rates = &self.learning_rates;
        if rates.len() != 1 && rates.len() != groups {
            return Err(Error::Config(format!(
                "{} learning rates given for {groups} parameter groups",
                rates.len()
            )));
        }
        Ok(trial
            .group_of_each()
            .into_iter()
            .map(|g| if rates.len() == 1 { rates[0] } else { rates[g] })
            .collect())
    }
}

/// Known truth used for error metrics.
pub enum Oracle {
    /// A trial reproducing the true solution, simulated on the evaluation
    /// increments.
    Trial(Box<dyn TrialSolution>),
    /// The true initial value `Y_0`.
    Y0(f64),
}

/// Squared norms of the difference between trial and true solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormErrors {
    pub standard: f64,
    pub sup: f64,
    pub beta: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run: usize,
    pub step: usize,
    /// Full-grid estimate of `(1/T)·BML` on the evaluation batch.
    pub loss: f64,
    pub loss_stderr: f64,
    /// Empty for trials with more than [`THETA_LOG_LIMIT`] parameters.
    pub theta: Vec<f64>,
    pub errors: Option<NormErrors>,
    /// `ỹ(0, x0)`, first component.
    pub y0_pred: f64,
    /// Seconds since the start of the run.
    pub elapsed: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: SeedSpec,
    pub failure: Option<String>,
    pub final_theta: Vec<f64>,
    /// Last successful evaluation row.
    pub last: Option<MetricRow>,
    pub elapsed: f64,
}

impl RunSummary {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
    pub runs: Vec<RunSummary>,
}

impl MetricLog {
    pub fn completed(&self) -> impl Iterator<Item = &RunSummary> {
        self.runs.iter().filter(|r| r.completed())
    }

    pub fn excluded(&self) -> usize {
        self.runs.len() - self.completed().count()
    }

    /// Mean and standard error across completed runs of a final-row value.
    pub fn final_stats(&self, f: impl Fn(&MetricRow) -> f64) -> RunningStats {
        let mut s = RunningStats::new();
        for r in self.completed() {
            if let Some(row) = &r.last {
                s.push(f(row));
            }
        }
        s
    }

    /// Mean and standard error across completed runs of a final θ entry.
    pub fn final_theta_stats(&self, k: usize) -> RunningStats {
        let mut s = RunningStats::new();
        for r in self.completed() {
            s.push(r.final_theta[k]);
        }
        s
    }
}

/// Seed namespace of run `run`.
pub fn run_seed(master_seed: u64, run: usize) -> SeedSpec {
    SeedSpec::new(master_seed, 0).child(run as u64)
}

/// Seed of the gradient batch at `step` of a run.
pub fn step_seed(run: SeedSpec, step: usize) -> SeedSpec {
    run.child(STEP_TAG).child(step as u64)
}

/// Seed of a run's held-out evaluation batch.
pub fn eval_seed(run: SeedSpec) -> SeedSpec {
    run.child(EVAL_TAG)
}

/// Seed for randomly initialized trials of a run.
pub fn init_seed(run: SeedSpec) -> SeedSpec {
    run.child(INIT_TAG)
}

/// Metrics of one trial on an evaluation batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: LossEstimate,
    pub errors: Option<NormErrors>,
    pub y0_pred: f64,
}

/// Evaluates the full-grid loss and, with a trial oracle, the squared norm
/// errors on the same increments.
pub fn evaluate(
    p: &dyn FbsdeProblem,
    trial: &dyn TrialSolution,
    grid: &TimeGrid,
    samples: usize,
    seed: SeedSpec,
    oracle: Option<&Oracle>,
    norm_beta: f64,
) -> Result<Evaluation> {
    let loss = match route_for(p, trial) {
        Route::Linear => {
            let lin = trial.as_linear().expect("linear route needs a linear trial");
            loss_and_grad_linear(p, lin, grid, samples, seed, EstimatorKind::FullGrid)?.loss
        }
        Route::Tape => estimate_bml(p, trial, grid, samples, seed, EstimatorKind::FullGrid, EVAL_CHUNK)?,
    };
    let errors = match oracle {
        Some(Oracle::Trial(truth)) => Some(norm_errors(p, trial, truth.as_ref(), grid, samples, seed, norm_beta)?),
        _ => None,
    };
    let y0_pred = trial.eval_y(0.0, p.x0())[0];
    Ok(Evaluation { loss, errors, y0_pred })
}

/// Squared norm errors between two trials simulated on common increments.
pub fn norm_errors(
    p: &dyn FbsdeProblem,
    trial: &dyn TrialSolution,
    truth: &dyn TrialSolution,
    grid: &TimeGrid,
    samples: usize,
    seed: SeedSpec,
    norm_beta: f64,
) -> Result<NormErrors> {
    let parts = for_each_batch(p, trial, grid, samples, seed, EVAL_CHUNK, |a| {
        let range = a.first_path()..a.first_path() + a.samples();
        let b = simulate_range(p, truth, grid, range, seed)?;
        let mut acc = NormAccumulator::new(grid.clone(), norm_beta);
        acc.push_pair(&ProcessPair::difference(a, &b)?);
        Ok(acc)
    })?;
    let mut acc = NormAccumulator::new(grid.clone(), norm_beta);
    for part in &parts {
        acc.merge(part);
    }
    Ok(NormErrors {
        standard: acc.squared(NormKind::Standard),
        sup: acc.squared(NormKind::Sup),
        beta: acc.squared(NormKind::Beta),
        mu: acc.squared(NormKind::Mu),
    })
}

/// Trains copies of `trial`, one per repeat, all starting from its θ.
pub fn train(
    p: &dyn FbsdeProblem,
    trial: &dyn TrialSolution,
    cfg: &TrainConfig,
    oracle: Option<&Oracle>,
) -> Result<MetricLog> {
    train_with_init(p, cfg, oracle, &|_, _| trial.boxed_clone())
}

/// Trains `cfg.repeats` runs; `init(run, seed)` builds the starting trial of
/// each run from its init seed.
pub fn train_with_init(
    p: &dyn FbsdeProblem,
    cfg: &TrainConfig,
    oracle: Option<&Oracle>,
    init: &(dyn Fn(usize, SeedSpec) -> Box<dyn TrialSolution> + Sync),
) -> Result<MetricLog> {
    cfg.validate()?;
    crate::problem::validate_problem(p)?;
    let grid = make_grid(p.horizon(), cfg.intervals)?;
    let runs = exec::map_items((0..cfg.repeats).collect(), |run| {
        let seed = run_seed(cfg.seed, run);
        let trial = init(run, init_seed(seed));
        train_run(p, trial, &grid, cfg, oracle, run, seed)
    });
    let mut log = MetricLog::default();
    for r in runs {
        let (rows, summary) = r?;
        log.rows.extend(rows);
        log.runs.push(summary);
    }
    Ok(log)
}

fn train_run(
    p: &dyn FbsdeProblem,
    mut trial: Box<dyn TrialSolution>,
    grid: &TimeGrid,
    cfg: &TrainConfig,
    oracle: Option<&Oracle>,
    run: usize,
    seed: SeedSpec,
) -> Result<(Vec<MetricRow>, RunSummary)> {
    if p.dims() != trial.dims() {
        return Err(Error::Config(format!(
            "trial dimensions {:?} do not match problem dimensions {:?}",
            trial.dims(),
            p.dims()
        )));
    }
    let rates = cfg.per_parameter_rates(trial.as_ref())?;
    let mut adam = AdamState::new(rates.clone());
    let log_theta = trial.theta().len() <= THETA_LOG_LIMIT;
    let eval = eval_seed(seed);
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut last = None;

    let fail = |rows: &mut Vec<MetricRow>, step: usize, err: Error, theta: &[f64], last: Option<MetricRow>| {
        let msg = err.to_string();
        rows.push(MetricRow {
            run,
            step,
            loss: f64::NAN,
            loss_stderr: f64::NAN,
            theta: if log_theta { theta.to_vec() } else { Vec::new() },
            errors: None,
            y0_pred: f64::NAN,
            elapsed: start.elapsed().as_secs_f64(),
            failure: Some(msg.clone()),
        });
        RunSummary {
            run,
            seed,
            failure: Some(msg),
            final_theta: theta.to_vec(),
            last,
            elapsed: start.elapsed().as_secs_f64(),
        }
    };

    for step in 0..=cfg.steps {
        if step % cfg.eval_every == 0 || step == cfg.steps {
            match evaluate(p, trial.as_ref(), grid, cfg.eval_samples, eval, oracle, cfg.norm_beta) {
                Ok(e) => {
                    let row = MetricRow {
                        run,
                        step,
                        loss: e.loss.value,
                        loss_stderr: e.loss.std_error,
                        theta: if log_theta { trial.theta().to_vec() } else { Vec::new() },
                        errors: e.errors,
                        y0_pred: e.y0_pred,
                        elapsed: start.elapsed().as_secs_f64(),
                        failure: None,
                    };
                    last = Some(row.clone());
                    rows.push(row);
                }
                Err(err) if err.is_numerical() => {
                    let summary = fail(&mut rows, step, err, trial.theta(), last);
                    return Ok((rows, summary));
                }
                Err(err) => return Err(err),
            }
        }
        if step == cfg.steps {
            break;
        }
        let lg = match loss_and_grad(
            p,
            trial.as_ref(),
            grid,
            cfg.samples,
            step_seed(seed, step),
            cfg.estimator,
        ) {
            Ok(lg) => lg,
            Err(err) if err.is_numerical() => {
                let summary = fail(&mut rows, step, err, trial.theta(), last);
                return Ok((rows, summary));
            }
            Err(err) => return Err(err),
        };
        let theta = trial.theta_mut();
        let updated = match cfg.optimizer {
            OptimizerKind::Adam => adam_step(&mut adam, theta, &lg.grad),
            OptimizerKind::Sgd => sgd_step(&rates, theta, &lg.grad),
        };
        let updated = updated.and_then(|_| match trial.theta().iter().all(|v| v.is_finite()) {
            true => Ok(()),
            false => Err(Error::Diverged { step }),
        });
        if let Err(err) = updated {
            let summary = fail(&mut rows, step, err, trial.theta(), last);
            return Ok((rows, summary));
        }
    }
    let summary = RunSummary {
        run,
        seed,
        failure: None,
        final_theta: trial.theta().to_vec(),
        last,
        elapsed: start.elapsed().as_secs_f64(),
    };
    Ok((rows, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{toy_bml_closed_form_scheme1, ToyBsde};
    use crate::trial::{LinearFeatures, LinearTrial};

    #[test]
    fn zero_gradient_leaves_theta() {
        let mut s = AdamState::uniform(2, 0.1);
        let mut theta = [1.0, -2.0];
        adam_step(&mut s, &mut theta, &[0.0, 0.0]).unwrap();
        assert_eq!(theta, [1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // m̂ = 1 and v̂ = 1 after one step, so the move is lr / (1 + ε)
        let mut s = AdamState::uniform(1, 0.1);
        let mut theta = [0.0];
        adam_step(&mut s, &mut theta, &[1.0]).unwrap();
        assert!((theta[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((theta[0] + 0.0999999999).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut s = AdamState::uniform(1, 0.1);
        let mut theta = [0.0];
        assert_eq!(
            adam_step(&mut s, &mut theta, &[f64::NAN]),
            Err(Error::NonFiniteGradient { index: 0 })
        );
        assert!(adam_step(&mut s, &mut theta, &[1.0, 2.0]).is_err());
        assert_eq!(s.step, 0);
    }

    #[test]
    fn group_rates_are_independent() {
        let trial = LinearTrial::new(LinearFeatures::Quadratic, 3, 0.0, 0.0);
        let cfg = TrainConfig {
            learning_rates: vec![1e-3, 3e-3],
            ..TrainConfig::default()
        };
        let rates = cfg.per_parameter_rates(&trial).unwrap();
        assert_eq!(rates, vec![1e-3, 3e-3]);
        let mut s = AdamState::new(rates);
        let mut theta = [0.0, 0.0];
        adam_step(&mut s, &mut theta, &[1.0, 1.0]).unwrap();
        assert!((theta[0] / theta[1] - 1.0 / 3.0).abs() < 1e-12);

        let bad = TrainConfig {
            learning_rates: vec![1e-3, 1e-3, 1e-3],
            ..TrainConfig::default()
        };
        assert!(bad.per_parameter_rates(&trial).is_err());
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            steps: 30,
            samples: 64,
            intervals: 20,
            learning_rates: vec![0.05],
            eval_every: 10,
            eval_samples: 64,
            repeats: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_logs_initial_row_only() {
        let p = ToyBsde::new(3, 1.0);
        let trial = LinearTrial::new(LinearFeatures::Quadratic, 3, 0.0, 0.0);
        let cfg = TrainConfig {
            steps: 0,
            repeats: 1,
            ..small_config()
        };
        let log = train(&p, &trial, &cfg, None).unwrap();
        assert_eq!(log.rows.len(), 1);
        assert_eq!(log.rows[0].step, 0);
        assert_eq!(log.runs[0].final_theta, vec![0.0, 0.0]);
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let p = ToyBsde::new(3, 1.0);
        let trial = LinearTrial::new(LinearFeatures::Quadratic, 3, 0.0, 0.0);
        let oracle = Oracle::Trial(Box::new(p.true_solution()));
        let cfg = small_config();
        let strip = |mut log: MetricLog| {
            for r in &mut log.rows {
                r.elapsed = 0.0;
            }
            for r in &mut log.runs {
                r.elapsed = 0.0;
                if let Some(row) = &mut r.last {
                    row.elapsed = 0.0;
                }
            }
            log
        };
        let a = strip(train(&p, &trial, &cfg, Some(&oracle)).unwrap());
        let b = strip(train(&p, &trial, &cfg, Some(&oracle)).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 2 * 4);
        assert_ne!(a.runs[0].final_theta, a.runs[1].final_theta);
        for run in &a.runs {
            let th = &run.final_theta;
            let start = toy_bml_closed_form_scheme1(0.0, 0.0, 3, 1.0);
            assert!(toy_bml_closed_form_scheme1(th[0], th[1], 3, 1.0) < start);
            assert!(run.last.as_ref().unwrap().errors.is_some());
        }
    }

    #[test]
    fn blowups_are_recorded_and_excluded() {
        let p = ToyBsde::new(3, 1.0);
        let trial = LinearTrial::new(LinearFeatures::Quadratic, 3, 0.0, 0.0);
        let cfg = TrainConfig {
            learning_rates: vec![1e300],
            optimizer: OptimizerKind::Sgd,
            repeats: 1,
            ..small_config()
        };
        let log = train(&p, &trial, &cfg, None).unwrap();
        assert_eq!(log.excluded(), 1);
        assert!(log.rows.last().unwrap().failure.is_some());
        assert_eq!(log.final_stats(|r| r.loss).count(), 0);
    }

    #[test]
    fn rejects_invalid_configs() {
        let p = ToyBsde::new(3, 1.0);
        let trial = LinearTrial::new(LinearFeatures::Quadratic, 3, 0.0, 0.0);
        for cfg in [
            TrainConfig {
                samples: 0,
                ..small_config()
            },
            TrainConfig {
                learning_rates: vec![],
                ..small_config()
            },
            TrainConfig {
                learning_rates: vec![-1.0],
                ..small_config()
            },
            TrainConfig {
                estimator: EstimatorKind::Martingale,
                ..small_config()
            },
        ] {
            assert!(matches!(train(&p, &trial, &cfg, None), Err(Error::Config(_))));
        }
    }
}

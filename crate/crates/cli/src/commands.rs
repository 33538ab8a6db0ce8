//! Subcommand implementations.

use std::path::PathBuf;

use bml_fbsde::checks::{self, CheckOutcome, NormSet};
use bml_fbsde::experiments::{error_paths, sweep, MeanTrial};
use bml_fbsde::optim::{train, train_with_init, MetricLog, Oracle, THETA_LOG_LIMIT};
use bml_fbsde::problems::{
    coupled_reference_trial, hopf_cole_y0, hopf_cole_y0_with, toy_bml_closed_form_scheme1, toy_bml_closed_form_scheme2,
};
use bml_fbsde::{init_mlp_with, make_grid, Error, LinearFeatures, LinearTrial, MlpTrial, SeedSpec, TrialSolution};
use serde::{Deserialize, Serialize};

use crate::config::{Problem, RunConfig, TrialKind};
use crate::output::{float, opt_float, Artifacts, Band};
use crate::CliError;

const ORACLE_STREAM: u64 = 1;
const SWEEP_STREAM: u64 = 2;
const ERROR_PATH_STREAM: u64 = 3;

fn numerical_or_config(e: Error) -> CliError {
    if e.is_numerical() {
        CliError::Numerical(e.to_string())
    } else {
        CliError::Config(e.to_string())
    }
}

fn linear_trial(cfg: &RunConfig, p: &Problem, theta1: f64, theta2: f64) -> Result<Box<dyn TrialSolution>, CliError> {
    let dim = p.as_dyn().dims().n;
    match (cfg.trial.kind, p) {
        (TrialKind::LinearScheme1, _) => Ok(Box::new(LinearTrial::new(
            LinearFeatures::Quadratic,
            dim,
            theta1,
            theta2,
        ))),
        (TrialKind::LinearScheme2, _) => Ok(Box::new(LinearTrial::new(LinearFeatures::Quartic, dim, theta1, theta2))),
        (TrialKind::CoupledReference, Problem::Coupled(c)) => Ok(Box::new(coupled_reference_trial(c, theta1, theta2))),
        (TrialKind::CoupledReference, _) => Err(CliError::Config(
            "the coupled-reference trial needs the coupled problem".into(),
        )),
        (TrialKind::Mlp, _) => Err(CliError::Config("this command needs a linear trial".into())),
    }
}

/// Rebuilds a trial of the configured kind from a flat parameter vector.
fn trial_from_theta(cfg: &RunConfig, p: &Problem, theta: &[f64]) -> Result<Box<dyn TrialSolution>, CliError> {
    match cfg.trial.kind {
        TrialKind::Mlp => MlpTrial::from_theta(p.as_dyn().dims(), theta.to_vec())
            .map(|t| Box::new(t) as Box<dyn TrialSolution>)
            .map_err(|e| CliError::Config(e.to_string())),
        _ => match theta {
            [a, b] => linear_trial(cfg, p, *a, *b),
            _ => Err(CliError::Config(format!(
                "linear trials have 2 parameters, got {}",
                theta.len()
            ))),
        },
    }
}

fn closed_form(cfg: &RunConfig, p: &Problem) -> Option<Box<dyn Fn(f64, f64) -> f64>> {
    let Problem::Toy(toy) = p else { return None };
    let (d, t) = (toy.dim, toy.horizon);
    match cfg.trial.kind {
        TrialKind::LinearScheme1 => Some(Box::new(move |a, b| toy_bml_closed_form_scheme1(a, b, d, t))),
        TrialKind::LinearScheme2 => Some(Box::new(move |a, b| toy_bml_closed_form_scheme2(a, b, d, t))),
        _ => None,
    }
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let p = cfg.problem.build()?;
    let s = &cfg.sweep;
    if s.samples == 0 {
        return Err(CliError::Config("sweep.samples must be positive".into()));
    }
    let grid = make_grid(p.horizon(), s.intervals).map_err(numerical_or_config)?;
    linear_trial(cfg, &p, 0.0, 0.0)?;
    let mut points = Vec::new();
    for a in s.theta1.values() {
        for b in s.theta2.values() {
            points.push((a, b));
        }
    }
    if points.is_empty() {
        return Err(CliError::Config("the sweep grid is empty".into()));
    }
    let cf = closed_form(cfg, &p);
    let make = |a: f64, b: f64| linear_trial(cfg, &p, a, b).expect("trial kind checked above");
    let rows = sweep(
        p.as_dyn(),
        &make,
        &points,
        &grid,
        s.samples,
        SeedSpec::new(cfg.seed, SWEEP_STREAM),
        s.estimator,
        cf.as_deref(),
    )
    .map_err(numerical_or_config)?;

    let out = Artifacts::create(cfg)?;
    let header: Vec<String> = [
        "theta1",
        "theta2",
        "bml_empirical",
        "bml_stderr",
        "bml_closed_form",
        "samples",
        "H",
        "seed",
        "status",
    ]
    .map(String::from)
    .to_vec();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                float(r.theta1),
                float(r.theta2),
                opt_float(r.bml.map(|e| e.value)),
                opt_float(r.bml.map(|e| e.std_error)),
                opt_float(r.closed_form),
                s.samples.to_string(),
                s.intervals.to_string(),
                cfg.seed.to_string(),
                match &r.failure {
                    None => "ok".into(),
                    Some(_) => "blowup".into(),
                },
            ]
        })
        .collect();
    out.write_csv("sweep.csv", &header, &body)
}

/// Reference `Y_0` for HJB problems, with its standard error.
fn hjb_y0_star(cfg: &RunConfig, p: &Problem) -> Result<(f64, f64), CliError> {
    let Problem::Hjb(h) = p else {
        return Err(CliError::Config("the Y0 oracle needs the hjb problem".into()));
    };
    if let Some(v) = cfg.oracle.y0 {
        return Ok((v, 0.0));
    }
    if cfg.oracle.samples == 0 {
        return Err(CliError::Config("oracle.samples must be positive".into()));
    }
    let seed = SeedSpec::new(cfg.seed, ORACLE_STREAM);
    Ok(match cfg.oracle.constant_g {
        Some(c) => hopf_cole_y0_with(h, cfg.oracle.samples, seed, |_| c),
        None => hopf_cole_y0(h, cfg.oracle.samples, seed),
    })
}

fn oracle_for(cfg: &RunConfig, p: &Problem) -> Result<(Oracle, Option<(f64, f64)>), CliError> {
    Ok(match p {
        Problem::Toy(t) => (Oracle::Trial(Box::new(t.true_solution())), None),
        Problem::Coupled(c) => {
            let theta2 = cfg.oracle.theta2.resolve(c)?;
            (
                Oracle::Trial(Box::new(coupled_reference_trial(c, c.amplitude, theta2))),
                None,
            )
        }
        Problem::Hjb(_) => {
            let y = hjb_y0_star(cfg, p)?;
            (Oracle::Y0(y.0), Some(y))
        }
    })
}

fn run_training(cfg: &RunConfig, p: &Problem, oracle: &Oracle) -> Result<MetricLog, CliError> {
    let tc = cfg.optim.train_config(cfg.seed);
    let log = match cfg.trial.kind {
        TrialKind::Mlp => {
            let dims = p.as_dyn().dims();
            let init = cfg.trial.init;
            train_with_init(p.as_dyn(), &tc, Some(oracle), &|_, s| {
                Box::new(init_mlp_with(dims, s, init))
            })
        }
        _ => {
            let trial = linear_trial(cfg, p, cfg.trial.theta1, cfg.trial.theta2)?;
            train(p.as_dyn(), trial.as_ref(), &tc, Some(oracle))
        }
    };
    log.map_err(numerical_or_config)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub status: String,
    pub failure: Option<String>,
    pub final_loss: Option<f64>,
    pub final_bml: Option<f64>,
    pub y0_pred: Option<f64>,
    pub final_theta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorBands {
    pub err_standard_sq: Band,
    pub err_sup_sq: Band,
    pub err_beta_sq: Band,
    pub err_mu_sq: Band,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub problem: String,
    pub trial: String,
    pub runs: Vec<RunRecord>,
    pub completed: usize,
    pub excluded: usize,
    /// `T` times the final loss, averaged over completed runs.
    pub final_bml: f64,
    pub bml: Band,
    pub loss: Band,
    pub theta: Vec<Band>,
    pub errors: Option<ErrorBands>,
    pub y0_pred: f64,
    pub y0_pred_band: Band,
    pub y0_star: Option<f64>,
    pub y0_star_std_error: Option<f64>,
    /// `|mean ỹ0 − Y*0| / Y*0`.
    pub rel_error: Option<f64>,
    /// Mean over runs of `|ỹ0 − Y*0| / Y*0`.
    pub mean_rel_error: Option<f64>,
}

fn summarize(cfg: &RunConfig, p: &Problem, log: &MetricLog, y0: Option<(f64, f64)>) -> TrainSummary {
    let horizon = p.horizon();
    let runs = log
        .runs
        .iter()
        .map(|r| RunRecord {
            run: r.run,
            status: if r.completed() { "ok" } else { "failed" }.into(),
            failure: r.failure.clone(),
            final_loss: r.last.as_ref().map(|l| l.loss),
            final_bml: r.last.as_ref().map(|l| l.loss * horizon),
            y0_pred: r.last.as_ref().map(|l| l.y0_pred),
            final_theta: r.final_theta.clone(),
        })
        .collect();
    let loss = log.final_stats(|row| row.loss);
    let bml = log.final_stats(|row| row.loss * horizon);
    let y0_pred = log.final_stats(|row| row.y0_pred);
    let theta_len = log.runs.first().map_or(0, |r| r.final_theta.len());
    let theta = if theta_len <= THETA_LOG_LIMIT {
        (0..theta_len).map(|k| Band::new(&log.final_theta_stats(k))).collect()
    } else {
        Vec::new()
    };
    let has_errors = log
        .completed()
        .any(|r| r.last.as_ref().is_some_and(|l| l.errors.is_some()));
    let errors = has_errors.then(|| {
        let band = |f: fn(&bml_fbsde::optim::NormErrors) -> f64| {
            Band::new(&log.final_stats(|row| row.errors.as_ref().map_or(f64::NAN, f)))
        };
        ErrorBands {
            err_standard_sq: band(|e| e.standard),
            err_sup_sq: band(|e| e.sup),
            err_beta_sq: band(|e| e.beta),
            err_mu_sq: band(|e| e.mu),
        }
    });
    let (y0_star, y0_star_se) = match y0 {
        Some((v, se)) => (Some(v), Some(se)),
        None => (None, None),
    };
    let rel_error = y0_star.map(|s| (y0_pred.mean() - s).abs() / s.abs());
    let mean_rel_error = y0_star.map(|s| log.final_stats(|row| (row.y0_pred - s).abs() / s.abs()).mean());
    TrainSummary {
        problem: format!("{:?}", cfg.problem.name).to_lowercase(),
        trial: serde_json::to_value(cfg.trial.kind)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default(),
        runs,
        completed: log.completed().count(),
        excluded: log.excluded(),
        final_bml: bml.mean(),
        bml: Band::new(&bml),
        loss: Band::new(&loss),
        theta,
        errors,
        y0_pred: y0_pred.mean(),
        y0_pred_band: Band::new(&y0_pred),
        y0_star,
        y0_star_std_error: y0_star_se,
        rel_error,
        mean_rel_error,
    }
}

fn train_csv(out: &Artifacts, log: &MetricLog, with_errors: bool, with_y0: bool) -> Result<PathBuf, CliError> {
    let theta_len = log.rows.iter().map(|r| r.theta.len()).max().unwrap_or(0);
    let mut header: Vec<String> = ["run", "step", "loss", "loss_stderr"].map(String::from).to_vec();
    header.extend((1..=theta_len).map(|k| format!("theta_{k}")));
    if with_errors {
        header.extend(["err_standard_sq", "err_sup_sq", "err_beta_sq", "err_mu_sq"].map(String::from));
    }
    if with_y0 {
        header.push("y0_prediction".into());
    }
    header.push("status".into());
    let body: Vec<Vec<String>> = log
        .rows
        .iter()
        .map(|r| {
            let mut cells = vec![
                r.run.to_string(),
                r.step.to_string(),
                float(r.loss),
                float(r.loss_stderr),
            ];
            cells.extend((0..theta_len).map(|k| opt_float(r.theta.get(k).copied())));
            if with_errors {
                let e = r.errors.as_ref();
                cells.extend([
                    opt_float(e.map(|e| e.standard)),
                    opt_float(e.map(|e| e.sup)),
                    opt_float(e.map(|e| e.beta)),
                    opt_float(e.map(|e| e.mu)),
                ]);
            }
            if with_y0 {
                cells.push(float(r.y0_pred));
            }
            cells.push(if r.failure.is_some() { "failed" } else { "ok" }.into());
            cells
        })
        .collect();
    out.write_csv("train.csv", &header, &body)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let p = cfg.problem.build()?;
    let (oracle, y0) = oracle_for(cfg, &p)?;
    let log = run_training(cfg, &p, &oracle)?;
    let out = Artifacts::create(cfg)?;
    let with_errors = matches!(oracle, Oracle::Trial(_));
    train_csv(&out, &log, with_errors, matches!(p, Problem::Hjb(_)))?;
    let summary = summarize(cfg, &p, &log, y0);
    out.write_json("train_summary.json", &summary)?;
    if summary.completed == 0 {
        return Err(CliError::Numerical("every run failed".into()));
    }
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSummary {
    pub value: f64,
    pub std_error: f64,
    #[serde(rename = "M")]
    pub samples: usize,
    pub dim: usize,
}

pub fn cmd_oracle_y0(cfg: &RunConfig) -> Result<OracleSummary, CliError> {
    let p = cfg.problem.build()?;
    let (value, std_error) = hjb_y0_star(cfg, &p)?;
    let summary = OracleSummary {
        value,
        std_error,
        samples: if cfg.oracle.y0.is_some() { 0 } else { cfg.oracle.samples },
        dim: p.as_dyn().dims().n,
    };
    Artifacts::create(cfg)?.write_json("oracle_y0.json", &summary)?;
    Ok(summary)
}

/// Which norm, if any, to break on purpose before running the checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    MuWeight,
}

pub fn cmd_checks(seed: u64, fault: Option<Fault>) -> Vec<CheckOutcome> {
    let norms = match fault {
        Some(Fault::MuWeight) => NormSet::with_broken_mu(),
        None => NormSet::default(),
    };
    checks::run_all(&norms, SeedSpec::new(seed, 0))
}

#[derive(Debug, Clone, Deserialize)]
struct StoredSummary {
    runs: Vec<RunRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorPathSummary {
    pub runs_averaged: usize,
    pub excluded: usize,
    pub mse_y_initial: f64,
    pub mse_y_terminal: f64,
}

pub fn cmd_error_paths(cfg: &RunConfig) -> Result<ErrorPathSummary, CliError> {
    let p = cfg.problem.build()?;
    let Problem::Coupled(c) = &p else {
        return Err(CliError::Config("error paths need the coupled problem".into()));
    };
    let e = &cfg.error_paths;
    if e.samples == 0 {
        return Err(CliError::Config("error_paths.samples must be positive".into()));
    }
    let (oracle, _) = oracle_for(cfg, &p)?;
    let (thetas, excluded) = match &e.from {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|err| CliError::Config(format!("cannot read {}: {err}", path.display())))?;
            let stored: StoredSummary =
                serde_json::from_str(&text).map_err(|err| CliError::Config(format!("{}: {err}", path.display())))?;
            let ok: Vec<Vec<f64>> = stored
                .runs
                .iter()
                .filter(|r| r.status == "ok")
                .map(|r| r.final_theta.clone())
                .collect();
            let excluded = stored.runs.len() - ok.len();
            (ok, excluded)
        }
        None => {
            let log = run_training(cfg, &p, &oracle)?;
            let ok = log.completed().map(|r| r.final_theta.clone()).collect();
            (ok, log.excluded())
        }
    };
    if thetas.is_empty() {
        return Err(CliError::Numerical("no completed runs to average".into()));
    }
    let members = thetas
        .iter()
        .map(|t| trial_from_theta(cfg, &p, t))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = MeanTrial::new(members).map_err(numerical_or_config)?;
    let theta2 = cfg.oracle.theta2.resolve(c)?;
    let truth = coupled_reference_trial(c, c.amplitude, theta2);
    let grid = make_grid(p.horizon(), e.intervals).map_err(numerical_or_config)?;
    let rows = error_paths(
        p.as_dyn(),
        &mean,
        &truth,
        &grid,
        e.samples,
        SeedSpec::new(cfg.seed, ERROR_PATH_STREAM),
    )
    .map_err(numerical_or_config)?;

    let out = Artifacts::create(cfg)?;
    let header = ["t", "mse_y", "mse_z"].map(String::from).to_vec();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![float(r.t), float(r.mse_y), float(r.mse_z)])
        .collect();
    out.write_csv("error_paths.csv", &header, &body)?;
    let summary = ErrorPathSummary {
        runs_averaged: mean.members(),
        excluded,
        mse_y_initial: rows[0].mse_y,
        mse_y_terminal: rows[rows.len() - 1].mse_y,
    };
    out.write_json("error_paths_summary.json", &summary)?;
    Ok(summary)
}

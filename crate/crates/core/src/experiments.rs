//! Experiment drivers shared by the command line and the acceptance suite.

use crate::error::{Error, Result};
use crate::grad::{loss_and_grad_linear, route_for, Route};
use crate::grid::TimeGrid;
use crate::loss::{estimate_bml, EstimatorKind, LossEstimate};
use crate::problem::{Dims, FbsdeProblem};
use crate::rng::SeedSpec;
use crate::sim::{for_each_batch, simulate_range};
use crate::tape::{Tape, Var};
use crate::trial::TrialSolution;

/// Paths per simulated sub-batch in sweeps and error paths.
pub const EXPERIMENT_CHUNK: usize = 1000;

/// Estimates the loss of `trial`, streaming through the affine route when it
/// applies.
pub fn estimate_loss(
    p: &dyn FbsdeProblem,
    trial: &dyn TrialSolution,
    grid: &TimeGrid,
    samples: usize,
    seed: SeedSpec,
    kind: EstimatorKind,
) -> Result<LossEstimate> {
    match (route_for(p, trial), kind) {
        (Route::Linear, EstimatorKind::Particle | EstimatorKind::FullGrid | EstimatorKind::Terminal) => {
            let lin = trial.as_linear().expect("linear route needs a linear trial");
            Ok(loss_and_grad_linear(p, lin, grid, samples, seed, kind)?.loss)
        }
        _ => estimate_bml(p, trial, grid, samples, seed, kind, EXPERIMENT_CHUNK),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub theta1: f64,
    pub theta2: f64,
    /// Estimate of `BML = T · (1/T)·BML`.
    pub bml: Option<LossEstimate>,
    pub closed_form: Option<f64>,
    /// Set when the simulation blew up at this point.
    pub failure: Option<String>,
}

/// Evaluates the BML at each `(θ1, θ2)` on common paths. Numerical failures
/// are recorded per point; other errors abort.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    p: &dyn FbsdeProblem,
    make_trial: &dyn Fn(f64, f64) -> Box<dyn TrialSolution>,
    points: &[(f64, f64)],
    grid: &TimeGrid,
    samples: usize,
    seed: SeedSpec,
    kind: EstimatorKind,
    closed_form: Option<&dyn Fn(f64, f64) -> f64>,
) -> Result<Vec<SweepPoint>> {
    let horizon = grid.horizon();
    points
        .iter()
        .map(|&(theta1, theta2)| {
            let trial = make_trial(theta1, theta2);
            let closed_form = closed_form.map(|f| f(theta1, theta2));
            match estimate_loss(p, trial.as_ref(), grid, samples, seed, kind) {
                Ok(est) => Ok(SweepPoint {
                    theta1,
                    theta2,
                    bml: Some(est.scaled(horizon)),
                    closed_form,
                    failure: None,
                }),
                Err(e) if e.is_numerical() => Ok(SweepPoint {
                    theta1,
                    theta2,
                    bml: None,
                    closed_form,
                    failure: Some(e.to_string()),
                }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// `count` evenly spaced values from `start` to `stop` inclusive.
pub fn linspace(start: f64, stop: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..count)
            .map(|k| start + (stop - start) * k as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// The pointwise mean of several trials with equal dimensions. Its
/// parameters are the members' parameters laid end to end.
#[derive(Clone)]
pub struct MeanTrial {
    members: Vec<Box<dyn TrialSolution>>,
    theta: Vec<f64>,
}

impl MeanTrial {
    pub fn new(members: Vec<Box<dyn TrialSolution>>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("cannot average zero trials".into()))?;
        let dims = first.dims();
        if members.iter().any(|m| m.dims() != dims) {
            return Err(Error::Config("averaged trials must share dimensions".into()));
        }
        let theta = members.iter().flat_map(|m| m.theta().iter().copied()).collect();
        Ok(Self { members, theta })
    }

    pub fn members(&self) -> usize {
        self.members.len()
    }
}

impl TrialSolution for MeanTrial {
    fn dims(&self) -> Dims {
        self.members[0].dims()
    }

    fn theta(&self) -> &[f64] {
        &self.theta
    }

    fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.members.iter().flat_map(|m| m.param_shapes()).collect()
    }

    fn param_groups(&self) -> Vec<usize> {
        self.members.iter().flat_map(|m| m.param_groups()).collect()
    }

    fn forward(&self, tape: &mut Tape, params: &[Var], t: f64, x: Var) -> (Var, Var) {
        let k = self.members.len() as f64;
        let mut at = 0;
        let mut sum: Option<(Var, Var)> = None;
        for m in &self.members {
            let count = m.param_shapes().len();
            let (y, z) = m.forward(tape, &params[at..at + count], t, x);
            at += count;
            sum = Some(match sum {
                None => (y, z),
                Some((sy, sz)) => (tape.add(sy, y), tape.add(sz, z)),
            });
        }
        let (y, z) = sum.expect("at least one member");
        (tape.scale(y, 1.0 / k), tape.scale(z, 1.0 / k))
    }

    fn boxed_clone(&self) -> Box<dyn TrialSolution> {
        let mut members: Vec<Box<dyn TrialSolution>> = self.members.iter().map(|m| m.boxed_clone()).collect();
        let mut at = 0;
        for m in &mut members {
            let len = m.theta().len();
            m.theta_mut().copy_from_slice(&self.theta[at..at + len]);
            at += len;
        }
        Box::new(MeanTrial {
            members,
            theta: self.theta.clone(),
        })
    }
}

/// Mean squared errors of `y` and `z` at one grid node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorPathRow {
    pub t: f64,
    pub mse_y: f64,
    pub mse_z: f64,
}

/// Per-node mean squared distance between `trial` and `truth`, each
/// simulated with its own forward path on common increments.
pub fn error_paths(
    p: &dyn FbsdeProblem,
    trial: &dyn TrialSolution,
    truth: &dyn TrialSolution,
    grid: &TimeGrid,
    samples: usize,
    seed: SeedSpec,
) -> Result<Vec<ErrorPathRow>> {
    let h = grid.intervals();
    let parts = for_each_batch(p, trial, grid, samples, seed, EXPERIMENT_CHUNK, |a| {
        let range = a.first_path()..a.first_path() + a.samples();
        let b = simulate_range(p, truth, grid, range, seed)?;
        let mut sy = vec![0.0; h + 1];
        let mut sz = vec![0.0; h + 1];
        let (ya, yb) = (a.y().expect("simulated"), b.y().expect("simulated"));
        let (za, zb) = (a.z().expect("simulated"), b.z().expect("simulated"));
        for j in 0..a.samples() {
            for i in 0..=h {
                sy[i] += ya
                    .slice(ndarray::s![j, i, ..])
                    .iter()
                    .zip(yb.slice(ndarray::s![j, i, ..]))
                    .map(|(u, v)| (u - v).powi(2))
                    .sum::<f64>();
                sz[i] += za
                    .slice(ndarray::s![j, i, ..])
                    .iter()
                    .zip(zb.slice(ndarray::s![j, i, ..]))
                    .map(|(u, v)| (u - v).powi(2))
                    .sum::<f64>();
            }
        }
        Ok((sy, sz))
    })?;
    let mut sy = vec![0.0; h + 1];
    let mut sz = vec![0.0; h + 1];
    for (a, b) in parts {
        for i in 0..=h {
            sy[i] += a[i];
            sz[i] += b[i];
        }
    }
    let m = samples as f64;
    Ok((0..=h)
        .map(|i| ErrorPathRow {
            t: grid.t(i),
            mse_y: sy[i] / m,
            mse_z: sz[i] / m,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::problems::{coupled_reference_trial, toy_bml_closed_form_scheme1, CoupledFbsde, ToyBsde};
    use crate::trial::{init_mlp, LinearFeatures, LinearTrial};

    #[test]
    fn linspace_endpoints() {
        assert_eq!(linspace(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
        assert_eq!(linspace(2.0, 5.0, 1), vec![2.0]);
        assert!(linspace(0.0, 1.0, 0).is_empty());
    }

    #[test]
    fn single_point_sweep() {
        let p = ToyBsde::new(3, 1.0);
        let grid = make_grid(1.0, 50).unwrap();
        let cf = |a: f64, b: f64| toy_bml_closed_form_scheme1(a, b, 3, 1.0);
        let pts = sweep(
            &p,
            &|a, b| Box::new(LinearTrial::new(LinearFeatures::Quadratic, 3, a, b)),
            &[(4.0 / 3.0, 2.0 / 3.0)],
            &grid,
            4000,
            SeedSpec::new(1, 0),
            EstimatorKind::FullGrid,
            Some(&cf),
        )
        .unwrap();
        assert_eq!(pts.len(), 1);
        let est = pts[0].bml.unwrap();
        assert!((est.value - 5.0).abs() < 4.0 * est.std_error + 0.3, "{est:?}");
        assert_eq!(pts[0].closed_form, Some(5.0));
    }

    #[test]
    fn mean_of_identical_trials_is_the_trial() {
        let dims = Dims::new(2, 1, 2);
        let a = init_mlp(dims, SeedSpec::new(1, 0));
        let mean = MeanTrial::new(vec![Box::new(a.clone()), Box::new(a.clone())]).unwrap();
        let (y1, z1) = a.eval(0.3, &[0.1, -0.2]);
        let (y2, z2) = mean.eval(0.3, &[0.1, -0.2]);
        assert!((y1[0] - y2[0]).abs() < 1e-14);
        for (u, v) in z1.iter().zip(&z2) {
            assert!((u - v).abs() < 1e-14);
        }
        assert_eq!(mean.theta().len(), 2 * a.theta().len());
    }

    #[test]
    fn exact_trial_has_small_error_paths() {
        let p = CoupledFbsde::default();
        let grid = make_grid(1.0, 50).unwrap();
        let truth = coupled_reference_trial(&p, 1.0, p.theta2_candidate_a());
        let rows = error_paths(&p, &truth, &truth, &grid, 20, SeedSpec::new(2, 0)).unwrap();
        assert_eq!(rows.len(), 51);
        assert!(rows.iter().all(|r| r.mse_y == 0.0 && r.mse_z == 0.0));
        let off = coupled_reference_trial(&p, 1.2, 0.3);
        let rows = error_paths(&p, &off, &truth, &grid, 20, SeedSpec::new(2, 0)).unwrap();
        assert!(rows[0].mse_y > 0.0);
    }
}

//! Loss gradients with respect to trial parameters.
//!
//! The tape route records the whole discretized objective per chunk of
//! paths: trial evaluations, the Euler-Maruyama recursion (which depends on
//! θ for coupled problems), the backward residual sums and the estimator.
//! Brownian increments enter as constants.
//!
//! When the trial is linear in θ, the forward process ignores the trial and
//! the driver ignores `(y, z)`, every residual is affine in θ:
//! `R_i = θ1 a_i + θ2 b_i - c_i`. The linear route evaluates that form
//! directly, which is much cheaper for long grids.

use crate::error::{Error, Result};
use crate::exec;
use crate::grid::TimeGrid;
use crate::loss::{EstimatorKind, LossEstimate};
use crate::paths::{PathBatch, DEFAULT_ENTRY_CAP};
use crate::problem::FbsdeProblem;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::{particle_index, PathRng, SeedSpec};
use crate::sim::{check_finite, node_block, record_transition, sample_brownian_range};
use crate::stats::{merge_all, RunningStats};
use crate::tape::{Tape, Var};
use crate::trial::{LinearTrial, TrialSolution};

/// Paths per gradient chunk.
pub const GRAD_CHUNK: usize = 128;

/// Paths per chunk of the linear route.
pub const LINEAR_CHUNK: usize = 1024;

/// Estimator value and its gradient `∂value/∂θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: LossEstimate,
    pub grad: Vec<f64>,
}

/// Which implementation [`loss_and_grad`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Tape,
    Linear,
}

/// The cheapest route valid for this problem and trial.
pub fn route_for(p: &dyn FbsdeProblem, trial: &dyn TrialSolution) -> Route {
    if trial.as_linear().is_some() && p.is_decoupled() && p.driver_is_trial_free() {
        Route::Linear
    } else {
        Route::Tape
    }
}

/// Samples `samples` paths from `seed` on `grid`, evaluates the estimator
/// and differentiates it with respect to the trial parameters.
pub fn loss_and_grad(
    p: &dyn FbsdeProblem,
    trial: &dyn TrialSolution,
    grid: &TimeGrid,
    samples: usize,
    seed: SeedSpec,
    kind: EstimatorKind,
) -> Result<LossGrad> {
    match route_for(p, trial) {
        Route::Linear => loss_and_grad_linear(
            p,
            trial.as_linear().expect("linear route needs a linear trial"),
            grid,
            samples,
            seed,
            kind,
        ),
        Route::Tape => loss_and_grad_tape(p, trial, grid, samples, seed, kind, GRAD_CHUNK),
    }
}

fn check_inputs(p: &dyn FbsdeProblem, trial: &dyn TrialSolution, samples: usize, kind: EstimatorKind) -> Result<()> {
    if kind == EstimatorKind::Martingale {
        return Err(Error::Unsupported(
            "gradients are available for the particle, full-grid and terminal estimators".into(),
        ));
    }
    if samples == 0 {
        return Err(Error::Config("need at least one sample path".into()));
    }
    if p.dims() != trial.dims() {
        return Err(Error::Config(format!(
            "trial dimensions {:?} do not match problem dimensions {:?}",
            trial.dims(),
            p.dims()
        )));
    }
    if let Some(k) = trial.theta().iter().position(|v| !v.is_finite()) {
        return Err(Error::Config(format!("parameter {k} is not finite")));
    }
    Ok(())
}

fn finish(parts: Vec<(RunningStats, Vec<f64>)>, kind: EstimatorKind, len: usize) -> Result<LossGrad> {
    let stats: Vec<RunningStats> = parts.iter().map(|(s, _)| *s).collect();
    let total = merge_all(&stats);
    let m = total.count() as f64;
    let mut grad = vec![0.0; len];
    for (_, g) in &parts {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    for (k, g) in grad.iter_mut().enumerate() {
        *g /= m;
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { index: k });
        }
    }
    Ok(LossGrad {
        loss: LossEstimate::from_stats(&total, kind),
        grad,
    })
}

/// Records the estimator's per-path contributions (`B × 1`) for one batch.
pub(crate) fn record_objective(
    tape: &mut Tape,
    p: &dyn FbsdeProblem,
    trial: &dyn TrialSolution,
    params: &[Var],
    batch: &PathBatch,
    kind: EstimatorKind,
) -> Result<Var> {
    let dims = p.dims();
    let grid = &batch.grid;
    let h = grid.intervals();
    let dt = grid.dt();
    let b = batch.samples();
    let first = batch.first_path;
    let all = 0..b;

    let x0: Vec<f64> = (0..b).flat_map(|_| p.x0().iter().copied()).collect();
    let mut x = tape.constant(b, dims.n, &x0);
    let mut xs = Vec::with_capacity(h + 1);
    let mut ys = Vec::with_capacity(h + 1);
    let mut zs = Vec::with_capacity(h + 1);
    let mut dws = Vec::with_capacity(h);
    for i in 0..=h {
        let t = grid.t(i);
        let (y, z) = trial.forward(tape, params, t, x);
        check_finite(tape.value(y), dims.m, first, i, "y")?;
        check_finite(tape.value(z), dims.z_width(), first, i, "z")?;
        xs.push(x);
        ys.push(y);
        zs.push(z);
        if i < h {
            let dw = tape.constant(b, dims.d, &node_block(&batch.dw, all.clone(), i));
            x = record_transition(tape, p, t, dt, x, y, z, dw);
            check_finite(tape.value(x), dims.n, first, i + 1, "X")?;
            dws.push(dw);
        }
    }

    let g = p.terminal(tape, xs[h]);
    check_finite(tape.value(g), dims.m, first, h, "g")?;
    if kind == EstimatorKind::Terminal {
        let diff = tape.sub(ys[h], g);
        return Ok(tape.row_square_norm(diff));
    }

    // S_i = g + Σ_{k≥i} f_k dt - Σ_{k≥i} z_k dW_k and R_i = y_i - S_i
    let mut s = g;
    let mut residuals = vec![ys[h]; h];
    for i in (0..h).rev() {
        let f = p.driver(tape, grid.t(i), xs[i], ys[i], zs[i]);
        check_finite(tape.value(f), dims.m, first, i, "f")?;
        let fdt = tape.scale(f, dt);
        let zdw = tape.row_matvec(zs[i], dws[i]);
        let step = tape.sub(fdt, zdw);
        s = tape.add(s, step);
        residuals[i] = tape.sub(ys[i], s);
    }
    match kind {
        EstimatorKind::FullGrid => {
            let mut acc = tape.row_square_norm(residuals[0]);
            for &r in &residuals[1..] {
                let sq = tape.row_square_norm(r);
                acc = tape.add(acc, sq);
            }
            Ok(tape.scale(acc, 1.0 / h as f64))
        }
        EstimatorKind::Particle => {
            let picks: Vec<usize> = (0..b).map(|j| particle_index(&batch.seed, first + j, h)).collect();
            let chosen = tape.gather(&residuals, &picks);
            Ok(tape.row_square_norm(chosen))
        }
        EstimatorKind::Terminal | EstimatorKind::Martingale => unreachable!(),
    }
}

/// Gradient through a full tape per chunk of `chunk` paths.
pub fn loss_and_grad_tape(
    p: &dyn FbsdeProblem,
    trial: &dyn TrialSolution,
    grid: &TimeGrid,
    samples: usize,
    seed: SeedSpec,
    kind: EstimatorKind,
    chunk: usize,
) -> Result<LossGrad> {
    check_inputs(p, trial, samples, kind)?;
    let d = p.dims().d;
    let parts = exec::map_chunks(samples, chunk, |range| -> Result<_> {
        let batch = sample_brownian_range(grid, range.start, range.len(), d, seed, DEFAULT_ENTRY_CAP)?;
        let mut tape = Tape::new();
        let params = trial.register(&mut tape, true);
        let contrib = record_objective(&mut tape, p, trial, &params, &batch, kind)?;
        let stats = RunningStats::from_slice(tape.value(contrib));
        let total = tape.sum(contrib);
        tape.backward(total);
        let grad: Vec<f64> = params.iter().flat_map(|&v| tape.grad(v).to_vec()).collect();
        Ok((stats, grad))
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    finish(parts, kind, trial.theta().len())
}

/// ReLU sign pattern of the whole objective on `samples` paths. Finite
/// differences are only meaningful between parameters with equal signatures.
pub fn objective_signature(
    p: &dyn FbsdeProblem,
    trial: &dyn TrialSolution,
    grid: &TimeGrid,
    samples: usize,
    seed: SeedSpec,
    kind: EstimatorKind,
) -> Result<u64> {
    check_inputs(p, trial, samples, kind)?;
    let batch = sample_brownian_range(grid, 0, samples, p.dims().d, seed, DEFAULT_ENTRY_CAP)?;
    let mut tape = Tape::new();
    let params = trial.register(&mut tape, false);
    record_objective(&mut tape, p, trial, &params, &batch, kind)?;
    Ok(tape.relu_signature())
}

/// Running sums of one path for the linear route. With `u_i = θ1 a_i -
/// θ2 P_i + Q_i`, where `P_i = Σ_{k<i} φ_z(t_k)·dW_k` and `Q_i = Σ_{k<i} f_k
/// dt`, every residual is `R_i = u_i + K` with the path constant
/// `K = θ2 P_H - g - Q_H`.
#[derive(Debug, Clone, Copy, Default)]
struct AffineSums {
    p: f64,
    q: f64,
    /// Σ u_i, Σ u_i², Σ a_i, Σ u_i a_i, Σ P_i, Σ u_i P_i over i < H.
    su: f64,
    suu: f64,
    sa: f64,
    sua: f64,
    sp: f64,
    sup: f64,
    /// `(a, P, Q)` at the particle node.
    pick: (f64, f64, f64),
    a_end: f64,
}

impl AffineSums {
    fn finish(&self, theta: &[f64], g: f64, h: usize, kind: EstimatorKind) -> (f64, [f64; 2]) {
        let k = theta[1] * self.p - g - self.q;
        match kind {
            EstimatorKind::Terminal => {
                let r = theta[0] * self.a_end - g;
                (r * r, [2.0 * r * self.a_end, 0.0])
            }
            EstimatorKind::Particle => {
                let (a, p, q) = self.pick;
                let r = theta[0] * a - theta[1] * p + q + k;
                (r * r, [2.0 * r * a, 2.0 * r * (self.p - p)])
            }
            EstimatorKind::FullGrid | EstimatorKind::Martingale => {
                let hf = h as f64;
                let v = self.suu + 2.0 * k * self.su + hf * k * k;
                let g1 = 2.0 * (self.sua + k * self.sa);
                let g2 = 2.0 * (self.p * (self.su + hf * k) - self.sup - k * self.sp);
                (v / hf, [g1 / hf, g2 / hf])
            }
        }
    }
}

/// Per-path contributions and their θ-gradients for global paths `range`,
/// drawing increments in the same order as [`sample_brownian_range`].
fn linear_chunk(
    p: &dyn FbsdeProblem,
    trial: &LinearTrial,
    grid: &TimeGrid,
    range: std::ops::Range<usize>,
    seed: SeedSpec,
    kind: EstimatorKind,
) -> Result<(RunningStats, Vec<f64>)> {
    let dims = p.dims();
    let (n, d) = (dims.n, dims.d);
    let h = grid.intervals();
    let dt = grid.dt();
    let sd = dt.sqrt();
    let rows = range.len();
    let first = range.start;
    let theta = trial.theta();
    let features = trial.features();

    let mut rngs: Vec<PathRng> = range.clone().map(|j| seed.rng_for(j as u64)).collect();
    let picks: Vec<usize> = match kind {
        EstimatorKind::Particle => range.clone().map(|j| particle_index(&seed, j, h)).collect(),
        _ => vec![usize::MAX; rows],
    };
    let mut sums = vec![AffineSums::default(); rows];
    let mut x_vals: Vec<f64> = (0..rows).flat_map(|_| p.x0().iter().copied()).collect();
    let mut dw_block = vec![0.0; rows * d];
    let mut fz = vec![0.0; d];
    let mut tape = Tape::new();
    let mut g = Vec::new();

    for i in 0..=h {
        let t = grid.t(i);
        for r in 0..rows {
            let a = features.eval(t, &x_vals[r * n..(r + 1) * n], &mut fz);
            let s = &mut sums[r];
            if i == h {
                s.a_end = a;
                continue;
            }
            let u = theta[0] * a - theta[1] * s.p + s.q;
            s.su += u;
            s.suu += u * u;
            s.sa += a;
            s.sua += u * a;
            s.sp += s.p;
            s.sup += u * s.p;
            if picks[r] == i {
                s.pick = (a, s.p, s.q);
            }
            let dw = &mut dw_block[r * d..(r + 1) * d];
            let rng = &mut rngs[r];
            for v in dw.iter_mut() {
                let xi: f64 = rng.sample(StandardNormal);
                *v = sd * xi;
            }
            s.p += fz.iter().zip(dw.iter()).map(|(u, v)| u * v).sum::<f64>();
        }

        // X, f and g do not depend on the trial, so they are recorded with zero y and z
        tape.clear();
        let x = tape.constant(rows, n, &x_vals);
        if i == h {
            let gv = p.terminal(&mut tape, x);
            check_finite(tape.value(gv), 1, first, h, "g")?;
            g = tape.value(gv).to_vec();
            break;
        }
        let y = tape.filled(rows, 1, 0.0);
        let z = tape.filled(rows, d, 0.0);
        let fv = p.driver(&mut tape, t, x, y, z);
        check_finite(tape.value(fv), 1, first, i, "f")?;
        for (s, f) in sums.iter_mut().zip(tape.value(fv)) {
            s.q += f * dt;
        }
        let dw = tape.constant(rows, d, &dw_block);
        let next = record_transition(&mut tape, p, t, dt, x, y, z, dw);
        check_finite(tape.value(next), n, first, i + 1, "X")?;
        x_vals.copy_from_slice(tape.value(next));
    }

    let mut stats = RunningStats::new();
    let mut grad = vec![0.0; 2];
    for (s, gr) in sums.iter().zip(&g) {
        let (v, dv) = s.finish(theta, *gr, h, kind);
        stats.push(v);
        grad[0] += dv[0];
        grad[1] += dv[1];
    }
    Ok((stats, grad))
}

/// Gradient through the affine residual form; see the module notes.
pub fn loss_and_grad_linear(
    p: &dyn FbsdeProblem,
    trial: &LinearTrial,
    grid: &TimeGrid,
    samples: usize,
    seed: SeedSpec,
    kind: EstimatorKind,
) -> Result<LossGrad> {
    check_inputs(p, trial, samples, kind)?;
    if !(p.is_decoupled() && p.driver_is_trial_free()) {
        return Err(Error::Unsupported(format!(
            "{} is not affine in linear trial parameters",
            p.name()
        )));
    }
    let parts = exec::map_chunks(samples, LINEAR_CHUNK, |range| {
        linear_chunk(p, trial, grid, range, seed, kind)
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    finish(parts, kind, 2)
}

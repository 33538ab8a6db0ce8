//! Monte Carlo estimators of the backward measurability loss.
//!
//! `Particle` and `FullGrid` estimate `(1/T)·BML`; multiply by `T` for the
//! loss itself. `Terminal` is the deep-BSDE objective `E|y_T - g(X_T)|²` and
//! `Martingale` the martingale loss, which equals `(T/2)·FullGrid` on
//! simple BSDEs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::grid::TimeGrid;
use crate::paths::PathBatch;
use crate::problem::FbsdeProblem;
use crate::rng::{particle_index, SeedSpec};
use crate::sim::{driver_and_terminal, for_each_batch, SIM_CHUNK};
use crate::stats::{merge_all, RunningStats};
use crate::trial::TrialSolution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Particle,
    FullGrid,
    Terminal,
    Martingale,
}

impl EstimatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Particle => "particle",
            EstimatorKind::FullGrid => "full-grid",
            EstimatorKind::Terminal => "terminal",
            EstimatorKind::Martingale => "martingale",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "particle" => Ok(EstimatorKind::Particle),
            "full-grid" => Ok(EstimatorKind::FullGrid),
            "terminal" => Ok(EstimatorKind::Terminal),
            "martingale" => Ok(EstimatorKind::Martingale),
            other => Err(Error::Config(format!("unknown estimator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples_used: usize,
    pub kind: EstimatorKind,
}

impl LossEstimate {
    pub fn from_stats(stats: &RunningStats, kind: EstimatorKind) -> Self {
        Self {
            value: stats.mean(),
            std_error: stats.std_error(),
            samples_used: stats.count(),
            kind,
        }
    }

    pub fn from_contributions(c: &[f64], kind: EstimatorKind) -> Self {
        Self::from_stats(&RunningStats::from_slice(c), kind)
    }

    /// `value ± k·std_error`.
    pub fn interval(&self, k: f64) -> (f64, f64) {
        (self.value - k * self.std_error, self.value + k * self.std_error)
    }

    /// The estimate multiplied by `c`, e.g. the horizon.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            value: self.value * c,
            std_error: self.std_error * c.abs(),
            ..*self
        }
    }
}

fn residuals(batch: &PathBatch) -> Result<&ndarray::Array3<f64>> {
    PathBatch::require(&batch.r, "residual")
}

fn sq_norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum()
}

/// `|R_{t_{i_j}}|²` per path with `i_j` uniform on `{0, ..., H-1}`.
pub fn particle_contributions(batch: &PathBatch, seed: &SeedSpec) -> Result<Vec<f64>> {
    let r = residuals(batch)?;
    let h = batch.grid.intervals();
    Ok((0..batch.samples())
        .map(|j| {
            let i = particle_index(seed, batch.first_path + j, h);
            sq_norm(r.slice(ndarray::s![j, i, ..]).iter().copied())
        })
        .collect())
}

/// `(1/H) Σ_{i<H} |R_{t_i}|²` per path.
pub fn fullgrid_contributions(batch: &PathBatch) -> Result<Vec<f64>> {
    let r = residuals(batch)?;
    let h = batch.grid.intervals();
    Ok((0..batch.samples())
        .map(|j| sq_norm(r.slice(ndarray::s![j, ..h, ..]).iter().copied()) / h as f64)
        .collect())
}

/// `|y_T - g(X_T)|²` per path.
pub fn terminal_contributions(batch: &PathBatch, p: &dyn FbsdeProblem) -> Result<Vec<f64>> {
    let y = PathBatch::require(&batch.y, "y")?;
    let h = batch.grid.intervals();
    let m = p.dims().m;
    let g = crate::sim::terminal_values(p, batch)?;
    Ok((0..batch.samples())
        .map(|j| sq_norm((0..m).map(|l| y[[j, h, l]] - g[j * m + l])))
        .collect())
}

/// `(1/2) Σ_{i<H} |g(X_T) + Σ_{k≥i} f_k dt - y_i|² dt` per path.
pub fn martingale_contributions(batch: &PathBatch, p: &dyn FbsdeProblem) -> Result<Vec<f64>> {
    if !p.driver_is_trial_free() {
        return Err(Error::Unsupported(format!(
            "martingale loss needs a driver independent of y and z, {} has none",
            p.name()
        )));
    }
    let z = PathBatch::require(&batch.z, "z")?;
    if z.iter().any(|&v| v != 0.0) {
        return Err(Error::Unsupported(
            "martingale loss needs a trial with z identically zero".into(),
        ));
    }
    let y = PathBatch::require(&batch.y, "y")?;
    let m = p.dims().m;
    let h = batch.grid.intervals();
    let dt = batch.grid.dt();
    let parts = exec::map_chunks(batch.samples(), SIM_CHUNK, |range| -> Result<Vec<f64>> {
        let (f, g) = driver_and_terminal(p, batch, range.clone())?;
        Ok(range
            .enumerate()
            .map(|(r, j)| {
                let mut target: Vec<f64> = g[r * m..(r + 1) * m].to_vec();
                let mut acc = 0.0;
                for i in (0..h).rev() {
                    for (l, tl) in target.iter_mut().enumerate() {
                        *tl += f[(r * h + i) * m + l] * dt;
                    }
                    acc += sq_norm((0..m).map(|l| target[l] - y[[j, i, l]])) * dt;
                }
                0.5 * acc
            })
            .collect())
    });
    let mut out = Vec::with_capacity(batch.samples());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn bml_particle(batch: &PathBatch, seed: &SeedSpec) -> Result<LossEstimate> {
    Ok(LossEstimate::from_contributions(
        &particle_contributions(batch, seed)?,
        EstimatorKind::Particle,
    ))
}

pub fn bml_fullgrid(batch: &PathBatch) -> Result<LossEstimate> {
    Ok(LossEstimate::from_contributions(
        &fullgrid_contributions(batch)?,
        EstimatorKind::FullGrid,
    ))
}

pub fn deep_bsde_loss(batch: &PathBatch, p: &dyn FbsdeProblem) -> Result<LossEstimate> {
    Ok(LossEstimate::from_contributions(
        &terminal_contributions(batch, p)?,
        EstimatorKind::Terminal,
    ))
}

pub fn martingale_loss(batch: &PathBatch, p: &dyn FbsdeProblem) -> Result<LossEstimate> {
    Ok(LossEstimate::from_contributions(
        &martingale_contributions(batch, p)?,
        EstimatorKind::Martingale,
    ))
}

/// Per-path contributions of any estimator. Particle indices are drawn
/// from the batch seed.
pub fn contributions(kind: EstimatorKind, batch: &PathBatch, p: &dyn FbsdeProblem) -> Result<Vec<f64>> {
    match kind {
        EstimatorKind::Particle => particle_contributions(batch, &batch.seed),
        EstimatorKind::FullGrid => fullgrid_contributions(batch),
        EstimatorKind::Terminal => terminal_contributions(batch, p),
        EstimatorKind::Martingale => martingale_contributions(batch, p),
    }
}

/// Streams `samples` paths in sub-batches of `chunk` and estimates the loss.
pub fn estimate_bml(
    p: &dyn FbsdeProblem,
    trial: &dyn TrialSolution,
    grid: &TimeGrid,
    samples: usize,
    seed: SeedSpec,
    kind: EstimatorKind,
    chunk: usize,
) -> Result<LossEstimate> {
    let parts = for_each_batch(p, trial, grid, samples, seed, chunk, |b| {
        Ok(RunningStats::from_slice(&contributions(kind, b, p)?))
    })?;
    Ok(LossEstimate::from_stats(&merge_all(&parts), kind))
}

/// Estimates `loss(a) - loss(b)` on common paths; the paired standard error
/// is usually far below that of either loss.
#[allow(clippy::too_many_arguments)]
pub fn estimate_difference(
    p: &dyn FbsdeProblem,
    a: &dyn TrialSolution,
    b: &dyn TrialSolution,
    grid: &TimeGrid,
    samples: usize,
    seed: SeedSpec,
    kind: EstimatorKind,
    chunk: usize,
) -> Result<LossEstimate> {
    let parts = for_each_batch(p, a, grid, samples, seed, chunk, |batch_a| {
        let ca = contributions(kind, batch_a, p)?;
        let range = batch_a.first_path..batch_a.first_path + batch_a.samples();
        let batch_b = crate::sim::simulate_range(p, b, grid, range, seed)?;
        let cb = contributions(kind, &batch_b, p)?;
        let diff: Vec<f64> = ca.iter().zip(&cb).map(|(x, y)| x - y).collect();
        Ok(RunningStats::from_slice(&diff))
    })?;
    Ok(LossEstimate::from_stats(&merge_all(&parts), kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::problems::ToyBsde;
    use crate::sim::{compute_residuals, sample_brownian, simulate_forward};
    use crate::trial::{LinearFeatures, LinearTrial};
    use ndarray::Array3;

    fn batch_with_residual(r: Array3<f64>) -> PathBatch {
        let (m, h1, _) = r.dim();
        let grid = make_grid(1.0, h1 - 1).unwrap();
        let mut b = sample_brownian(&grid, m, 1, SeedSpec::new(0, 0)).unwrap();
        b.r = Some(r);
        b
    }

    #[test]
    fn zero_residual_gives_zero() {
        let b = batch_with_residual(Array3::zeros((5, 4, 1)));
        let e = bml_particle(&b, &SeedSpec::new(1, 1)).unwrap();
        assert_eq!((e.value, e.std_error), (0.0, 0.0));
        assert_eq!(e.samples_used, 5);
    }

    #[test]
    fn constant_residual() {
        let b = batch_with_residual(Array3::from_elem((6, 5, 1), 1.5));
        let e = bml_fullgrid(&b).unwrap();
        assert!((e.value - 2.25).abs() < 1e-15);
        assert_eq!(e.std_error, 0.0);
    }

    #[test]
    fn zero_trial_on_constant_terminal() {
        // y = 0 and a zero-feature trial: the terminal loss is |g(X_T)|²
        let grid = make_grid(1.0, 4).unwrap();
        let p = ToyBsde::new(2, 1.0);
        let trial = LinearTrial::new(LinearFeatures::Quadratic, 2, 0.0, 0.0);
        let b = sample_brownian(&grid, 20, 2, SeedSpec::new(3, 0)).unwrap();
        let b = simulate_forward(&p, &trial, b).unwrap();
        let b = compute_residuals(&p, b).unwrap();
        let c = terminal_contributions(&b, &p).unwrap();
        for (j, cj) in c.iter().enumerate() {
            let w2: f64 = (0..2).map(|k| b.w()[[j, 4, k]].powi(2)).sum();
            assert!((cj - (w2 / 2.0).powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn martingale_rejects_z() {
        let grid = make_grid(1.0, 4).unwrap();
        let p = ToyBsde::new(2, 1.0);
        let trial = LinearTrial::new(LinearFeatures::Quadratic, 2, 0.3, 0.2);
        let b = sample_brownian(&grid, 3, 2, SeedSpec::new(3, 0)).unwrap();
        let b = simulate_forward(&p, &trial, b).unwrap();
        assert!(matches!(martingale_loss(&b, &p), Err(Error::Unsupported(_))));
    }

    #[test]
    fn estimator_names_round_trip() {
        for k in [
            EstimatorKind::Particle,
            EstimatorKind::FullGrid,
            EstimatorKind::Terminal,
            EstimatorKind::Martingale,
        ] {
            assert_eq!(k.as_str().parse::<EstimatorKind>().unwrap(), k);
        }
        assert!("bogus".parse::<EstimatorKind>().is_err());
    }
}

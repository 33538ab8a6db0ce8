//! Discretized norms on pairs of processes `(Y, Z)`.
//!
//! All time integrals use left-endpoint quadrature over `t_0, ..., t_{H-1}`,
//! so `Z` at `t_H` is never read. Norms that are means of per-path
//! quantities also report a standard error for their squared value.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::paths::PathBatch;
use crate::stats::RunningStats;

/// Sampled processes on a common grid: `y` is `[M, H+1, m]`, `z` is
/// `[M, H+1, m·d]`.
#[derive(Debug, Clone)]
pub struct ProcessPair {
    pub grid: TimeGrid,
    pub y: Array3<f64>,
    pub z: Array3<f64>,
}

impl ProcessPair {
    pub fn new(grid: TimeGrid, y: Array3<f64>, z: Array3<f64>) -> Result<Self> {
        let (my, hy, _) = y.dim();
        let (mz, hz, _) = z.dim();
        if my != mz || hy != grid.intervals() + 1 || hz != hy {
            return Err(Error::Config(format!(
                "process pair shapes {:?} and {:?} do not fit a grid with {} intervals",
                y.dim(),
                z.dim(),
                grid.intervals()
            )));
        }
        Ok(Self { grid, y, z })
    }

    /// `(y_a - y_b, z_a - z_b)` of two simulated batches.
    pub fn difference(a: &PathBatch, b: &PathBatch) -> Result<Self> {
        let ya = PathBatch::require(&a.y, "y")?;
        let yb = PathBatch::require(&b.y, "y")?;
        let za = PathBatch::require(&a.z, "z")?;
        let zb = PathBatch::require(&b.z, "z")?;
        if ya.dim() != yb.dim() || za.dim() != zb.dim() {
            return Err(Error::Config("batches have different shapes".into()));
        }
        Self::new(a.grid.clone(), ya - yb, za - zb)
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            y: &self.y * a,
            z: &self.z * a,
        }
    }

    pub fn samples(&self) -> usize {
        self.y.dim().0
    }

    fn path(&self, j: usize) -> (&[f64], &[f64]) {
        let (_, h1, m) = self.y.dim();
        let mz = self.z.dim().2;
        let y = self.y.as_slice().expect("standard layout");
        let z = self.z.as_slice().expect("standard layout");
        (&y[j * h1 * m..(j + 1) * h1 * m], &z[j * h1 * mz..(j + 1) * h1 * mz])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    Standard,
    Sup,
    Beta,
    Mu,
    MuFubini,
    MuBeta,
}

/// Squared node norms `|Y_i|²` and `|Z_i|²` of one path.
fn node_squares(y: &[f64], z: &[f64], nodes: usize) -> (Vec<f64>, Vec<f64>) {
    let m = y.len() / nodes;
    let mz = z.len() / nodes;
    let sq = |v: &[f64], k: usize| -> Vec<f64> {
        v.chunks_exact(k.max(1))
            .map(|c| c.iter().map(|x| x * x).sum())
            .collect()
    };
    (sq(y, m), sq(z, mz))
}

/// `max_i |Y_i|² + Σ_{i<H} |Z_i|² dt`.
fn standard_path(y2: &[f64], z2: &[f64], grid: &TimeGrid) -> f64 {
    let h = grid.intervals();
    let sup = y2.iter().copied().fold(0.0, f64::max);
    sup + z2[..h].iter().sum::<f64>() * grid.dt()
}

/// `Σ_{i<H} e^{2βt_i} (|Y_i|² + |Z_i|²) dt`.
fn beta_path(y2: &[f64], z2: &[f64], grid: &TimeGrid, beta: f64) -> f64 {
    (0..grid.intervals())
        .map(|i| (2.0 * beta * grid.t(i)).exp() * (y2[i] + z2[i]))
        .sum::<f64>()
        * grid.dt()
}

/// `Σ_{i<H} e^{2βt_i} (|Y_i|² + t_i |Z_i|²) dt`.
fn mu_beta_path(y2: &[f64], z2: &[f64], grid: &TimeGrid, beta: f64) -> f64 {
    (0..grid.intervals())
        .map(|i| {
            let t = grid.t(i);
            (2.0 * beta * t).exp() * (y2[i] + t * z2[i])
        })
        .sum::<f64>()
        * grid.dt()
}

/// `Σ_{i<H} (|Y_i|² + t_i |Z_i|²) dt`.
fn mu_path(y2: &[f64], z2: &[f64], grid: &TimeGrid) -> f64 {
    (0..grid.intervals()).map(|i| y2[i] + grid.t(i) * z2[i]).sum::<f64>() * grid.dt()
}

/// `Σ_{i<H} (|Y_i|² + Σ_{k=i}^{H-1} |Z_k|² dt) dt`, the double integral
/// before exchanging the order of integration.
fn mu_fubini_path(y2: &[f64], z2: &[f64], grid: &TimeGrid) -> f64 {
    let h = grid.intervals();
    let dt = grid.dt();
    let mut total = 0.0;
    for i in 0..h {
        let mut inner = 0.0;
        for zk in &z2[i..h] {
            inner += zk * dt;
        }
        total += (y2[i] + inner) * dt;
    }
    total
}

/// Streaming accumulator for all norms over batches of paths.
#[derive(Debug, Clone)]
pub struct NormAccumulator {
    grid: TimeGrid,
    beta: f64,
    standard: RunningStats,
    beta_stats: RunningStats,
    mu: RunningStats,
    mu_fubini: RunningStats,
    mu_beta: RunningStats,
    /// Per-node sums of `|Y_i|² + Σ_{k≥i, k<H} |Z_k|² dt`.
    sup_nodes: Vec<f64>,
}

impl NormAccumulator {
    /// `beta` is the weight used by [`NormKind::Beta`] and [`NormKind::MuBeta`].
    pub fn new(grid: TimeGrid, beta: f64) -> Self {
        let nodes = grid.intervals() + 1;
        Self {
            grid,
            beta,
            standard: RunningStats::new(),
            beta_stats: RunningStats::new(),
            mu: RunningStats::new(),
            mu_fubini: RunningStats::new(),
            mu_beta: RunningStats::new(),
            sup_nodes: vec![0.0; nodes],
        }
    }

    /// Adds one path: `y` holds `(H+1)·m` values, `z` holds `(H+1)·m·d`.
    pub fn push_path(&mut self, y: &[f64], z: &[f64]) {
        let g = &self.grid;
        let h = g.intervals();
        let (y2, z2) = node_squares(y, z, h + 1);
        self.standard.push(standard_path(&y2, &z2, g));
        self.beta_stats.push(beta_path(&y2, &z2, g, self.beta));
        self.mu.push(mu_path(&y2, &z2, g));
        self.mu_fubini.push(mu_fubini_path(&y2, &z2, g));
        self.mu_beta.push(mu_beta_path(&y2, &z2, g, self.beta));
        let mut tail = 0.0;
        for i in (0..=h).rev() {
            if i < h {
                tail += z2[i] * g.dt();
            }
            self.sup_nodes[i] += y2[i] + tail;
        }
    }

    pub fn push_pair(&mut self, pp: &ProcessPair) {
        for j in 0..pp.samples() {
            let (y, z) = pp.path(j);
            self.push_path(y, z);
        }
    }

    pub fn merge(&mut self, other: &NormAccumulator) {
        self.standard.merge(&other.standard);
        self.beta_stats.merge(&other.beta_stats);
        self.mu.merge(&other.mu);
        self.mu_fubini.merge(&other.mu_fubini);
        self.mu_beta.merge(&other.mu_beta);
        for (a, b) in self.sup_nodes.iter_mut().zip(&other.sup_nodes) {
            *a += b;
        }
    }

    pub fn samples(&self) -> usize {
        self.mu.count()
    }

    /// Per-path statistics of a squared norm; `None` for the sup norm, which
    /// is not a mean of per-path quantities.
    pub fn stats(&self, kind: NormKind) -> Option<&RunningStats> {
        match kind {
            NormKind::Standard => Some(&self.standard),
            NormKind::Sup => None,
            NormKind::Beta => Some(&self.beta_stats),
            NormKind::Mu => Some(&self.mu),
            NormKind::MuFubini => Some(&self.mu_fubini),
            NormKind::MuBeta => Some(&self.mu_beta),
        }
    }

    /// Squared norm.
    pub fn squared(&self, kind: NormKind) -> f64 {
        match self.stats(kind) {
            Some(s) => s.mean(),
            None => {
                let m = self.samples().max(1) as f64;
                self.sup_nodes.iter().map(|s| s / m).fold(0.0, f64::max)
            }
        }
    }

    pub fn norm(&self, kind: NormKind) -> f64 {
        self.squared(kind).sqrt()
    }
}

fn norm_of(pp: &ProcessPair, beta: f64, kind: NormKind) -> f64 {
    let mut acc = NormAccumulator::new(pp.grid.clone(), beta);
    acc.push_pair(pp);
    acc.norm(kind)
}

/// `sqrt(E max_i |Y_i|² + E Σ_{i<H} |Z_i|² dt)`.
pub fn norm_standard(pp: &ProcessPair) -> f64 {
    norm_of(pp, 0.0, NormKind::Standard)
}

/// `sqrt(max_i {E|Y_i|² + E Σ_{k≥i, k<H} |Z_k|² dt})`.
pub fn norm_sup(pp: &ProcessPair) -> f64 {
    norm_of(pp, 0.0, NormKind::Sup)
}

pub fn norm_beta(pp: &ProcessPair, beta: f64) -> f64 {
    norm_of(pp, beta, NormKind::Beta)
}

pub fn norm_mu(pp: &ProcessPair) -> f64 {
    norm_of(pp, 0.0, NormKind::Mu)
}

pub fn norm_mu_fubini(pp: &ProcessPair) -> f64 {
    norm_of(pp, 0.0, NormKind::MuFubini)
}

pub fn norm_mu_beta(pp: &ProcessPair, beta: f64) -> f64 {
    norm_of(pp, beta, NormKind::MuBeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;

    fn constant_pair(h: usize, y: f64, z: f64) -> ProcessPair {
        let grid = make_grid(1.0, h).unwrap();
        ProcessPair::new(
            grid,
            Array3::from_elem((3, h + 1, 1), y),
            Array3::from_elem((3, h + 1, 1), z),
        )
        .unwrap()
    }

    #[test]
    fn zero_pair() {
        let pp = constant_pair(8, 0.0, 0.0);
        assert_eq!(norm_standard(&pp), 0.0);
        assert_eq!(norm_sup(&pp), 0.0);
        assert_eq!(norm_beta(&pp, 0.7), 0.0);
        assert_eq!(norm_mu(&pp), 0.0);
        assert_eq!(norm_mu_fubini(&pp), 0.0);
        assert_eq!(norm_mu_beta(&pp, 0.7), 0.0);
    }

    #[test]
    fn unit_y() {
        let pp = constant_pair(1000, 1.0, 0.0);
        assert!((norm_standard(&pp) - 1.0).abs() < 1e-12);
        assert!((norm_sup(&pp) - 1.0).abs() < 1e-12);
        assert!((norm_beta(&pp, 0.0) - 1.0).abs() < 1e-12);
        assert!((norm_mu(&pp) - 1.0).abs() < 1e-12);
        let e1 = (std::f64::consts::E - 1.0).sqrt();
        assert!((norm_beta(&pp, 0.5) - e1).abs() < 1e-3);
        assert!((norm_mu_beta(&pp, 0.5) - e1).abs() < 1e-3);
    }

    #[test]
    fn unit_z() {
        let pp = constant_pair(1000, 0.0, 1.0);
        assert!((norm_standard(&pp) - 1.0).abs() < 1e-12);
        assert!((norm_sup(&pp) - 1.0).abs() < 1e-12);
        assert!((norm_mu(&pp) - 0.5f64.sqrt()).abs() < 1e-3);
        assert!((norm_mu_fubini(&pp) - 0.5f64.sqrt()).abs() < 1e-3);
        // the last node never enters the quadrature
        let mut pp = pp;
        pp.z.slice_mut(ndarray::s![.., 1000, ..]).fill(1e6);
        assert!((norm_standard(&pp) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mu_beta_at_zero_is_mu() {
        let grid = make_grid(1.0, 5).unwrap();
        let y = Array3::from_shape_fn((2, 6, 1), |(j, i, _)| (j + i) as f64 * 0.3 - 1.0);
        let z = Array3::from_shape_fn((2, 6, 2), |(j, i, k)| (j * 7 + i * 3 + k) as f64 * 0.1);
        let pp = ProcessPair::new(grid, y, z).unwrap();
        assert!((norm_mu_beta(&pp, 0.0) - norm_mu(&pp)).abs() < 1e-12);
    }

    #[test]
    fn chunked_accumulation_matches() {
        let grid = make_grid(1.0, 4).unwrap();
        let y = Array3::from_shape_fn((4, 5, 1), |(j, i, _)| ((j * 5 + i) as f64).sin());
        let z = Array3::from_shape_fn((4, 5, 1), |(j, i, _)| ((j * 5 + i) as f64).cos());
        let pp = ProcessPair::new(grid.clone(), y.clone(), z.clone()).unwrap();
        let mut a = NormAccumulator::new(grid.clone(), 0.5);
        let mut b = NormAccumulator::new(grid.clone(), 0.5);
        let half = |arr: &Array3<f64>, r: std::ops::Range<usize>| arr.slice(ndarray::s![r, .., ..]).to_owned();
        a.push_pair(&ProcessPair::new(grid.clone(), half(&y, 0..2), half(&z, 0..2)).unwrap());
        b.push_pair(&ProcessPair::new(grid.clone(), half(&y, 2..4), half(&z, 2..4)).unwrap());
        a.merge(&b);
        assert!((a.norm(NormKind::Sup) - norm_sup(&pp)).abs() < 1e-12);
        assert!((a.norm(NormKind::Mu) - norm_mu(&pp)).abs() < 1e-12);
    }
}

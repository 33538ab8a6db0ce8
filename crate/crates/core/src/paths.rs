//! Path storage.

use ndarray::{Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::rng::SeedSpec;

/// Default cap on the number of `f64` entries in one path array.
pub const DEFAULT_ENTRY_CAP: usize = 1 << 26;

/// Brownian paths on a grid, plus the arrays derived from them.
///
/// Arrays are path-major: `dw[[j, i, k]]` is component `k` of the increment
/// over `[t_i, t_{i+1}]` on path `j`. Path `j` of the batch is global path
/// `first_path + j` of its seed.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub(crate) grid: TimeGrid,
    pub(crate) seed: SeedSpec,
    pub(crate) first_path: usize,
    pub(crate) dw: Array3<f64>,
    pub(crate) x: Option<Array3<f64>>,
    pub(crate) y: Option<Array3<f64>>,
    pub(crate) z: Option<Array3<f64>>,
    pub(crate) r: Option<Array3<f64>>,
}

impl PathBatch {
    /// Builds a batch from explicit increments.
    pub fn from_increments(grid: TimeGrid, seed: SeedSpec, dw: Array3<f64>) -> Result<Self> {
        let h = dw.dim().1;
        if h != grid.intervals() {
            return Err(Error::Config(format!(
                "increments cover {h} intervals, grid has {}",
                grid.intervals()
            )));
        }
        let dw = dw.as_standard_layout().into_owned();
        Ok(Self {
            grid,
            seed,
            first_path: 0,
            dw,
            x: None,
            y: None,
            z: None,
            r: None,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> SeedSpec {
        self.seed
    }

    pub fn samples(&self) -> usize {
        self.dw.dim().0
    }

    pub fn first_path(&self) -> usize {
        self.first_path
    }

    pub fn brownian_dim(&self) -> usize {
        self.dw.dim().2
    }

    pub fn dw(&self) -> &Array3<f64> {
        &self.dw
    }

    /// Brownian paths `W`, the prefix sums of the increments with `W_0 = 0`.
    pub fn w(&self) -> Array3<f64> {
        let (m, h, d) = self.dw.dim();
        let mut w = Array3::zeros((m, h + 1, d));
        for j in 0..m {
            for i in 0..h {
                for k in 0..d {
                    w[[j, i + 1, k]] = w[[j, i, k]] + self.dw[[j, i, k]];
                }
            }
        }
        w
    }

    pub fn x(&self) -> Option<&Array3<f64>> {
        self.x.as_ref()
    }

    pub fn y(&self) -> Option<&Array3<f64>> {
        self.y.as_ref()
    }

    pub fn z(&self) -> Option<&Array3<f64>> {
        self.z.as_ref()
    }

    pub fn r(&self) -> Option<&Array3<f64>> {
        self.r.as_ref()
    }

    /// Increments of path `j`, `H × d`.
    pub fn dw_path(&self, j: usize) -> ArrayView2<'_, f64> {
        self.dw.index_axis(ndarray::Axis(0), j)
    }

    pub(crate) fn require<'a>(arr: &'a Option<Array3<f64>>, what: &str) -> Result<&'a Array3<f64>> {
        arr.as_ref()
            .ok_or_else(|| Error::Config(format!("path batch has no {what} paths yet")))
    }

    /// Replaces the trial-dependent arrays, e.g. with paths produced by a
    /// different scheme on the same increments.
    pub fn with_states(mut self, x: Array3<f64>, y: Array3<f64>, z: Array3<f64>) -> Result<Self> {
        let (m, h1) = (self.samples(), self.grid.intervals() + 1);
        for (name, a) in [("x", &x), ("y", &y), ("z", &z)] {
            if a.dim().0 != m || a.dim().1 != h1 {
                return Err(Error::Config(format!(
                    "{name} paths have shape {:?}, expected [{m}, {h1}, _]",
                    a.dim()
                )));
            }
        }
        self.x = Some(x);
        self.y = Some(y);
        self.z = Some(z);
        self.r = None;
        Ok(self)
    }
}

/// Fails with a resource error when an array of `entries` values would
/// exceed `cap`.
pub fn check_entries(entries: usize, cap: usize, what: &str) -> Result<()> {
    if entries > cap {
        Err(Error::Resource(format!(
            "{what} needs {entries} entries, above the cap of {cap}; use streaming estimation or fewer samples"
        )))
    } else {
        Ok(())
    }
}

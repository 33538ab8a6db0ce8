//! Uniform time grids.

use crate::error::{Error, Result};

/// Uniform partition `0 = t_0 < t_1 < ... < t_H = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    intervals: usize,
    dt: f64,
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of intervals `H`.
    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Time of node `i`.
    pub fn t(&self, i: usize) -> f64 {
        self.nodes[i]
    }
}

/// Builds the uniform grid with `intervals` steps on `[0, horizon]`.
///
/// Node `i` is computed as `i * T / H` rather than by accumulating `dt`, so
/// the last node equals `T` exactly.
pub fn make_grid(horizon: f64, intervals: usize) -> Result<TimeGrid> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::Config(format!(
            "time horizon must be positive and finite, got {horizon}"
        )));
    }
    if intervals == 0 {
        return Err(Error::Config("number of time intervals must be at least 1".into()));
    }
    let h = intervals as f64;
    let mut nodes: Vec<f64> = (0..=intervals).map(|i| i as f64 * horizon / h).collect();
    nodes[intervals] = horizon;
    Ok(TimeGrid {
        horizon,
        intervals,
        dt: horizon / h,
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_grid() {
        let g = make_grid(1.0, 4).unwrap();
        assert_eq!(g.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn fine_grid_spacing() {
        let g = make_grid(1.0, 1000).unwrap();
        assert_eq!(g.nodes().len(), 1001);
        assert_eq!(g.dt(), 0.001);
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.t(1000), 1.0);
        for w in g.nodes().windows(2) {
            assert!(w[1] > w[0]);
            assert!((w[1] - w[0] - g.dt()).abs() <= 2.0 * f64::EPSILON);
        }
    }

    #[test]
    fn twenty_intervals() {
        let g = make_grid(1.0, 20).unwrap();
        assert_eq!(g.dt(), 0.05);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(make_grid(0.0, 4), Err(Error::Config(_))));
        assert!(matches!(make_grid(-1.0, 4), Err(Error::Config(_))));
        assert!(matches!(make_grid(f64::NAN, 4), Err(Error::Config(_))));
        assert!(matches!(make_grid(1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn reproducible() {
        let a = make_grid(0.7, 333).unwrap();
        let b = make_grid(0.7, 333).unwrap();
        let bits = |g: &TimeGrid| g.nodes().iter().map(|t| t.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

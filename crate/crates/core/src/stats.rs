//! Streaming mean / variance with deterministic merging.

use serde::{Deserialize, Serialize};

/// Welford accumulator; `merge` uses the pairwise update of Chan et al.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    count: usize,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut s = Self::new();
        for &x in xs {
            s.push(x);
        }
        s
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance (0 for fewer than two samples).
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.std_dev() / (self.count as f64).sqrt()
        }
    }
}

/// Merges a sequence of partial statistics in order.
pub fn merge_all<'a>(parts: impl IntoIterator<Item = &'a RunningStats>) -> RunningStats {
    let mut total = RunningStats::new();
    for p in parts {
        total.merge(p);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matches_two_pass() {
        let xs: Vec<f64> = (0..101).map(|i| ((i * 37) % 17) as f64 * 0.3 - 1.0).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let s = RunningStats::from_slice(&xs);
        assert_relative_eq!(s.mean(), mean, epsilon = 1e-12);
        assert_relative_eq!(s.variance(), var, epsilon = 1e-12);

        let mut merged = RunningStats::from_slice(&xs[..40]);
        merged.merge(&RunningStats::from_slice(&xs[40..]));
        assert_relative_eq!(merged.mean(), mean, epsilon = 1e-12);
        assert_relative_eq!(merged.variance(), var, epsilon = 1e-12);
        assert_eq!(merged.count(), 101);
    }

    #[test]
    fn constant_has_zero_error() {
        let s = RunningStats::from_slice(&[2.5; 10]);
        assert_eq!(s.std_error(), 0.0);
    }
}

use std::f64::consts::{LN_2, SQRT_2};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::exec;

use crate::problem::{rows, Dims, FbsdeProblem};
use crate::rng::SeedSpec;
use crate::tape::{Tape, Var};

/// `dX = √2 dW`, driver `-(λ/2)|z|²`, terminal `ln((1 + |x|²) / 2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hjb {
    pub dim: usize,
    pub horizon: f64,
    pub lambda: f64,
    pub x0: Vec<f64>,
}

impl Hjb {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            horizon: 1.0,
            lambda: 1.0,
            x0: vec![0.0; dim],
        }
    }

    pub fn terminal_value(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        (0.5 * (1.0 + r2)).ln()
    }
}

impl FbsdeProblem for Hjb {
    fn name(&self) -> &str {
        "hjb"
    }

    fn dims(&self) -> Dims {
        Dims::new(self.dim, 1, self.dim)
    }

    fn x0(&self) -> &[f64] {
        &self.x0
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn drift(&self, _: &mut Tape, _: f64, _: Var, _: Var, _: Var) -> Option<Var> {
        None
    }

    fn diffusion(&self, tape: &mut Tape, _: f64, x: Var, _: Var, _: Var) -> Var {
        let d = self.dim;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = SQRT_2;
        }
        let eye = tape.constant(1, d * d, &eye);
        let ones = tape.filled(rows(tape, x), 1, 1.0);
        tape.mul(ones, eye)
    }

    fn diffusion_times(&self, tape: &mut Tape, _: f64, _: Var, _: Var, _: Var, dw: Var) -> Var {
        tape.scale(dw, SQRT_2)
    }

    fn driver(&self, tape: &mut Tape, _: f64, _: Var, _: Var, z: Var) -> Var {
        let z2 = tape.row_square_norm(z);
        tape.scale(z2, -0.5 * self.lambda)
    }

    fn terminal(&self, tape: &mut Tape, x: Var) -> Var {
        let r2 = tape.row_square_norm(x);
        let r2 = tape.shift(r2, 1.0);
        let l = tape.ln(r2);
        tape.shift(l, -LN_2)
    }

    fn is_decoupled(&self) -> bool {
        true
    }

    fn driver_is_trial_free(&self) -> bool {
        false
    }
}

/// Hopf-Cole estimate `-(1/λ) ln E exp(-λ g(x0 + √2 W_T))` with its
/// delta-method standard error.
pub fn hopf_cole_y0(spec: &Hjb, samples: usize, seed: SeedSpec) -> (f64, f64) {
    hopf_cole_y0_with(spec, samples, seed, |x| spec.terminal_value(x))
}

/// [`hopf_cole_y0`] with a replacement terminal function.
pub fn hopf_cole_y0_with<G>(spec: &Hjb, samples: usize, seed: SeedSpec, g: G) -> (f64, f64)
where
    G: Fn(&[f64]) -> f64 + Sync,
{
    assert!(samples >= 1, "hopf_cole_y0 needs at least one sample");
    let n = spec.dim;
    let scale = SQRT_2 * spec.horizon.sqrt();
    let lambda = spec.lambda;
    let parts = exec::map_chunks(samples, 1 << 14, |range| {
        let mut x = vec![0.0; n];
        let exponents: Vec<f64> = range
            .map(|j| {
                let mut rng = seed.rng_for(j as u64);
                for (xi, x0) in x.iter_mut().zip(&spec.x0) {
                    let xi_n: f64 = rng.sample(StandardNormal);
                    *xi = x0 + scale * xi_n;
                }
                -lambda * g(&x)
            })
            .collect();
        ShiftedSums::from_exponents(&exponents)
    });
    let total = parts
        .into_iter()
        .reduce(ShiftedSums::merge)
        .expect("at least one chunk");
    let m = samples as f64;
    let mean = total.sum / m;
    let value = -(total.shift + mean.ln()) / lambda;
    let var = if samples > 1 {
        ((total.sum_sq - m * mean * mean) / (m - 1.0)).max(0.0)
    } else {
        0.0
    };
    let std_error = (var / m).sqrt() / (mean * lambda);
    (value, std_error)
}

/// Sums of `exp(a - shift)` and its square.
#[derive(Debug, Clone, Copy)]
struct ShiftedSums {
    shift: f64,
    sum: f64,
    sum_sq: f64,
}

impl ShiftedSums {
    fn from_exponents(a: &[f64]) -> Self {
        let shift = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for &v in a {
            let e = (v - shift).exp();
            sum += e;
            sum_sq += e * e;
        }
        Self { shift, sum, sum_sq }
    }

    fn merge(self, other: Self) -> Self {
        let shift = self.shift.max(other.shift);
        let rescale = |s: Self| {
            let f = (s.shift - shift).exp();
            (s.sum * f, s.sum_sq * f * f)
        };
        let (a, a2) = rescale(self);
        let (b, b2) = rescale(other);
        Self {
            shift,
            sum: a + b,
            sum_sq: a2 + b2,
        }
    }
}

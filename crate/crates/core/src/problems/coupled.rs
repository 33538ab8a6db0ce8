use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::problem::{rows, Dims, FbsdeProblem};
use crate::tape::{Tape, Var};
use crate::trial::{LinearFeatures, LinearTrial};

/// `dX_j = σ0 Y dW_j`, driver `-rY + (σ0²/2) e^{-3r(T-t)} (A Σ sin x)³`,
/// terminal `A Σ sin x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledFbsde {
    pub dim: usize,
    pub horizon: f64,
    pub amplitude: f64,
    pub sigma0: f64,
    pub rate: f64,
    pub x0: Vec<f64>,
}

impl Default for CoupledFbsde {
    fn default() -> Self {
        Self::new(3, 1.0)
    }
}

impl CoupledFbsde {
    pub fn new(dim: usize, horizon: f64) -> Self {
        Self {
            dim,
            horizon,
            amplitude: 1.0,
            sigma0: 0.3,
            rate: 0.1,
            x0: vec![FRAC_PI_2; dim],
        }
    }

    /// `σ0 A²`.
    pub fn theta2_candidate_a(&self) -> f64 {
        self.sigma0 * self.amplitude * self.amplitude
    }

    /// `σ0² A`.
    pub fn theta2_candidate_b(&self) -> f64 {
        self.sigma0 * self.sigma0 * self.amplitude
    }
}

/// The discounted-sine trial `y = θ1 e^{-r(T-t)} Σ sin x`,
/// `z_j = θ2 e^{-2r(T-t)} (Σ sin x) cos x_j`.
pub fn coupled_reference_trial(spec: &CoupledFbsde, theta1: f64, theta2: f64) -> LinearTrial {
    LinearTrial::new(
        LinearFeatures::DiscountedSine {
            rate: spec.rate,
            horizon: spec.horizon,
        },
        spec.dim,
        theta1,
        theta2,
    )
}

impl FbsdeProblem for CoupledFbsde {
    fn name(&self) -> &str {
        "coupled-fbsde"
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

    fn diffusion(&self, tape: &mut Tape, _: f64, _: Var, y: Var, _: Var) -> Var {
        let d = self.dim;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = self.sigma0;
        }
        let eye = tape.constant(1, d * d, &eye);
        tape.mul(y, eye)
    }

    fn diffusion_times(&self, tape: &mut Tape, _: f64, _: Var, y: Var, _: Var, dw: Var) -> Var {
        let sy = tape.scale(y, self.sigma0);
        tape.mul(dw, sy)
    }

    fn driver(&self, tape: &mut Tape, t: f64, x: Var, y: Var, _: Var) -> Var {
        let sin = tape.sin(x);
        let s = tape.row_sum(sin);
        let s3 = tape.powi(s, 3);
        let c =
            0.5 * self.sigma0 * self.sigma0 * (-3.0 * self.rate * (self.horizon - t)).exp() * self.amplitude.powi(3);
        let forcing = tape.scale(s3, c);
        let decay = tape.scale(y, -self.rate);
        debug_assert_eq!(rows(tape, decay), rows(tape, forcing));
        tape.add(decay, forcing)
    }

    fn terminal(&self, tape: &mut Tape, x: Var) -> Var {
        let sin = tape.sin(x);
        let s = tape.row_sum(sin);
        tape.scale(s, self.amplitude)
    }

    fn is_decoupled(&self) -> bool {
        false
    }

    fn driver_is_trial_free(&self) -> bool {
        false
    }
}

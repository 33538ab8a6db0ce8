use crate::problem::{rows, Dims, FbsdeProblem};
use crate::tape::{Tape, Var};
use crate::trial::{LinearFeatures, LinearTrial};

/// `dY = dt + Z dW`, `Y_T = |W_T|² / d`, with `X = W`.
///
/// The solution is `Y_t = |W_t|² / d`, `Z_t = 2 W_t / d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBsde {
    pub dim: usize,
    pub horizon: f64,
    x0: Vec<f64>,
}

impl ToyBsde {
    pub fn new(dim: usize, horizon: f64) -> Self {
        Self {
            dim,
            horizon,
            x0: vec![0.0; dim],
        }
    }

    /// The true solution written as a quadratic linear trial.
    pub fn true_solution(&self) -> LinearTrial {
        let d = self.dim as f64;
        LinearTrial::new(LinearFeatures::Quadratic, self.dim, 1.0 / d, 2.0 / d)
    }

    /// `Y*_0` at `x0 = 0`.
    pub fn y0(&self) -> f64 {
        0.0
    }
}

impl FbsdeProblem for ToyBsde {
    fn name(&self) -> &str {
        "toy-bsde"
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
            eye[i * d + i] = 1.0;
        }
        let eye = tape.constant(1, d * d, &eye);
        let ones = tape.filled(rows(tape, x), 1, 1.0);
        tape.mul(ones, eye)
    }

    fn diffusion_times(&self, _: &mut Tape, _: f64, _: Var, _: Var, _: Var, dw: Var) -> Var {
        dw
    }

    fn driver(&self, tape: &mut Tape, _: f64, x: Var, _: Var, _: Var) -> Var {
        tape.filled(rows(tape, x), 1, -1.0)
    }

    fn terminal(&self, tape: &mut Tape, x: Var) -> Var {
        let r2 = tape.row_square_norm(x);
        tape.scale(r2, 1.0 / self.dim as f64)
    }

    fn is_decoupled(&self) -> bool {
        true
    }

    fn driver_is_trial_free(&self) -> bool {
        true
    }
}

//! Coefficient bundles for forward-backward SDEs.
//!
//! Coefficients are written against the batched [`Tape`], so the same
//! definition serves plain simulation and gradient computation. Every
//! argument carries one row per sample path: `x` is `B × n`, `y` is `B × m`
//! and `z` is `B × (m·d)` with the `m × d` matrix stored row-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Dimensions of the forward state, backward state and Brownian motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub d: usize,
}

impl Dims {
    pub const fn new(n: usize, m: usize, d: usize) -> Self {
        Self { n, m, d }
    }

    /// Width of a flattened `z` row.
    pub const fn z_width(&self) -> usize {
        self.m * self.d
    }
}

pub trait FbsdeProblem: Send + Sync {
    fn name(&self) -> &str;

    fn dims(&self) -> Dims;

    fn x0(&self) -> &[f64];

    fn horizon(&self) -> f64;

    /// Drift `b`, `B × n`. `None` stands for the zero drift.
    fn drift(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var) -> Option<Var>;

    /// Diffusion `σ`, `B × (n·d)` with each `n × d` matrix row-major.
    fn diffusion(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var) -> Var;

    /// `σ · dW`, `B × n`.
    fn diffusion_times(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var, dw: Var) -> Var {
        let s = self.diffusion(tape, t, x, y, z);
        tape.row_matvec(s, dw)
    }

    /// Driver `f`, `B × m`.
    fn driver(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var) -> Var;

    /// Terminal condition `g`, `B × m`.
    fn terminal(&self, tape: &mut Tape, x: Var) -> Var;

    /// True when `b` and `σ` ignore `y` and `z`.
    fn is_decoupled(&self) -> bool;

    /// True when `f` ignores `y` and `z`.
    fn driver_is_trial_free(&self) -> bool;
}

/// Evaluates every coefficient once at `(0, x0, 0, 0)` and checks shapes.
pub fn validate_problem(p: &dyn FbsdeProblem) -> Result<()> {
    let dims = p.dims();
    if dims.n == 0 || dims.m == 0 || dims.d == 0 {
        return Err(Error::Config(format!(
            "dimensions must be positive, got n={} m={} d={}",
            dims.n, dims.m, dims.d
        )));
    }
    if !(p.horizon() > 0.0 && p.horizon().is_finite()) {
        return Err(Error::Config(format!("horizon must be positive, got {}", p.horizon())));
    }
    if p.x0().len() != dims.n {
        return Err(shape_error("x0", (1, dims.n), (1, p.x0().len())));
    }
    let mut tape = Tape::new();
    let x = tape.constant(1, dims.n, p.x0());
    let y = tape.filled(1, dims.m, 0.0);
    let z = tape.filled(1, dims.z_width(), 0.0);
    let dw = tape.filled(1, dims.d, 0.0);

    if let Some(b) = p.drift(&mut tape, 0.0, x, y, z) {
        expect_shape(&tape, b, "b", (1, dims.n))?;
    }
    let s = p.diffusion(&mut tape, 0.0, x, y, z);
    expect_shape(&tape, s, "σ", (1, dims.n * dims.d))?;
    let sdw = p.diffusion_times(&mut tape, 0.0, x, y, z, dw);
    expect_shape(&tape, sdw, "σ", (1, dims.n))?;
    let f = p.driver(&mut tape, 0.0, x, y, z);
    expect_shape(&tape, f, "f", (1, dims.m))?;
    let g = p.terminal(&mut tape, x);
    expect_shape(&tape, g, "g", (1, dims.m))?;
    Ok(())
}

fn expect_shape(tape: &Tape, v: Var, name: &str, want: (usize, usize)) -> Result<()> {
    let got = tape.shape(v);
    if got == want {
        Ok(())
    } else {
        Err(shape_error(name, want, got))
    }
}

fn shape_error(name: &str, want: (usize, usize), got: (usize, usize)) -> Error {
    Error::Shape {
        coefficient: name.to_string(),
        expected: format!("{}x{}", want.0, want.1),
        actual: format!("{}x{}", got.0, got.1),
    }
}

/// Number of rows of a batched node.
pub(crate) fn rows(tape: &Tape, v: Var) -> usize {
    tape.shape(v).0
}

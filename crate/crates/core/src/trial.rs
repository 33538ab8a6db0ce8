//! Parameterized trial solutions `(y(t, x; θ), z(t, x; θ))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::Dims;
use crate::rng::SeedSpec;
use crate::tape::{Tape, Var};

pub trait TrialSolution: Send + Sync {
    fn dims(&self) -> Dims;

    /// Flat parameter vector; its length never changes.
    fn theta(&self) -> &[f64];

    fn theta_mut(&mut self) -> &mut [f64];

    /// Parameter blocks `(rows, cols)` in the order they appear in `theta`.
    fn param_shapes(&self) -> Vec<(usize, usize)>;

    /// Learning-rate group of each parameter block.
    fn param_groups(&self) -> Vec<usize>;

    /// Records `y` (`B × m`) and `z` (`B × m·d`) at time `t` for states `x`.
    fn forward(&self, tape: &mut Tape, params: &[Var], t: f64, x: Var) -> (Var, Var);

    fn boxed_clone(&self) -> Box<dyn TrialSolution>;

    /// Set when the trial is linear in θ with fixed features.
    fn as_linear(&self) -> Option<&LinearTrial> {
        None
    }

    fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        let dst = self.theta_mut();
        if dst.len() != theta.len() {
            return Err(Error::Config(format!(
                "trial expects {} parameters, got {}",
                dst.len(),
                theta.len()
            )));
        }
        dst.copy_from_slice(theta);
        Ok(())
    }

    fn group_count(&self) -> usize {
        self.param_groups().iter().max().map_or(0, |g| g + 1)
    }

    /// Group of every scalar entry of `theta`.
    fn group_of_each(&self) -> Vec<usize> {
        self.param_shapes()
            .iter()
            .zip(self.param_groups())
            .flat_map(|(&(r, c), g)| std::iter::repeat_n(g, r * c))
            .collect()
    }

    /// Pushes the parameter blocks onto `tape`, as differentiable leaves when
    /// `grad` is set and as constants otherwise.
    fn register(&self, tape: &mut Tape, grad: bool) -> Vec<Var> {
        let theta = self.theta();
        let mut at = 0;
        self.param_shapes()
            .into_iter()
            .map(|(r, c)| {
                let block = &theta[at..at + r * c];
                at += r * c;
                if grad {
                    tape.parameter(r, c, block)
                } else {
                    tape.constant(r, c, block)
                }
            })
            .collect()
    }

    fn eval_y(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.eval(t, x).0
    }

    fn eval_z(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.eval(t, x).1
    }

    /// Single-point evaluation returning `(y, z)`.
    fn eval(&self, t: f64, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let xv = tape.constant(1, x.len(), x);
        let (y, z) = self.forward(&mut tape, &params, t, xv);
        (tape.value(y).to_vec(), tape.value(z).to_vec())
    }
}

impl Clone for Box<dyn TrialSolution> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

/// Feature maps of the linear trial families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LinearFeatures {
    /// `y = θ1 |x|²`, `z = θ2 x`.
    Quadratic,
    /// `y = θ1 |x|⁴`, `z = θ2 |x|² x`.
    Quartic,
    /// `y = θ1 e^{-r(T-t)} Σ sin x_j`,
    /// `z_j = θ2 e^{-2r(T-t)} (Σ sin x) cos x_j`.
    DiscountedSine { rate: f64, horizon: f64 },
}

impl LinearFeatures {
    /// Writes the `z` feature into `fz` and returns the `y` feature.
    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], fz: &mut [f64]) -> f64 {
        match *self {
            LinearFeatures::Quadratic => {
                fz.copy_from_slice(x);
                x.iter().map(|v| v * v).sum()
            }
            LinearFeatures::Quartic => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                for (o, v) in fz.iter_mut().zip(x) {
                    *o = r2 * v;
                }
                r2 * r2
            }
            LinearFeatures::DiscountedSine { rate, horizon } => {
                let s: f64 = x.iter().map(|v| v.sin()).sum();
                let ey = (-rate * (horizon - t)).exp();
                let ez = (-2.0 * rate * (horizon - t)).exp();
                for (o, v) in fz.iter_mut().zip(x) {
                    *o = ez * s * v.cos();
                }
                ey * s
            }
        }
    }

    /// Records the features of a batch: `(B × 1, B × n)`.
    pub fn record(&self, tape: &mut Tape, t: f64, x: Var) -> (Var, Var) {
        match *self {
            LinearFeatures::Quadratic => (tape.row_square_norm(x), x),
            LinearFeatures::Quartic => {
                let r2 = tape.row_square_norm(x);
                (tape.square(r2), tape.mul(x, r2))
            }
            LinearFeatures::DiscountedSine { rate, horizon } => {
                let sin = tape.sin(x);
                let s = tape.row_sum(sin);
                let fy = tape.scale(s, (-rate * (horizon - t)).exp());
                let cos = tape.cos(x);
                let sc = tape.mul(cos, s);
                let fz = tape.scale(sc, (-2.0 * rate * (horizon - t)).exp());
                (fy, fz)
            }
        }
    }
}

/// `y = θ1 · φ_y(t, x)`, `z = θ2 · φ_z(t, x)` with `m = 1` and `n = d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTrial {
    features: LinearFeatures,
    dim: usize,
    theta: [f64; 2],
}

impl LinearTrial {
    pub fn new(features: LinearFeatures, dim: usize, theta1: f64, theta2: f64) -> Self {
        Self {
            features,
            dim,
            theta: [theta1, theta2],
        }
    }

    pub fn features(&self) -> LinearFeatures {
        self.features
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl TrialSolution for LinearTrial {
    fn dims(&self) -> Dims {
        Dims::new(self.dim, 1, self.dim)
    }

    fn theta(&self) -> &[f64] {
        &self.theta
    }

    fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        vec![(1, 1), (1, 1)]
    }

    fn param_groups(&self) -> Vec<usize> {
        vec![0, 1]
    }

    fn forward(&self, tape: &mut Tape, params: &[Var], t: f64, x: Var) -> (Var, Var) {
        let (fy, fz) = self.features.record(tape, t, x);
        (tape.mul(fy, params[0]), tape.mul(fz, params[1]))
    }

    fn boxed_clone(&self) -> Box<dyn TrialSolution> {
        Box::new(self.clone())
    }

    fn as_linear(&self) -> Option<&LinearTrial> {
        Some(self)
    }
}

/// Width of the time embedding.
pub const TIME_EMBEDDING: usize = 4;
const TIME_HIDDEN: usize = 4;
const HIDDEN: usize = 32;

/// `y(t, x) = φ_y(φ_t(t), x)`, `z(t, x) = φ_z(φ_t(t), x)`, each `φ` a
/// one-hidden-layer ReLU network with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrial {
    dims: Dims,
    theta: Vec<f64>,
}

impl MlpTrial {
    pub fn layers(dims: Dims) -> [(usize, usize); 6] {
        let input = TIME_EMBEDDING + dims.n;
        [
            (1, TIME_HIDDEN),
            (TIME_HIDDEN, TIME_EMBEDDING),
            (input, HIDDEN),
            (HIDDEN, dims.m),
            (input, HIDDEN),
            (HIDDEN, dims.z_width()),
        ]
    }

    /// Wraps an explicit parameter vector.
    pub fn from_theta(dims: Dims, theta: Vec<f64>) -> Result<Self> {
        let want = Self::param_count(dims);
        if theta.len() != want {
            return Err(Error::Config(format!(
                "MLP with n={} m={} d={} has {want} parameters, got {}",
                dims.n,
                dims.m,
                dims.d,
                theta.len()
            )));
        }
        Ok(Self { dims, theta })
    }

    pub fn param_count(dims: Dims) -> usize {
        Self::layers(dims).iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Initial weight distribution of [`MlpTrial`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MlpInit {
    /// Weights `U(±sqrt(6 / fan_in))`, zero biases.
    #[default]
    KaimingUniform,
    /// Weights and biases `U(±1 / sqrt(fan_in))`.
    FanInUniform,
}

/// Kaiming-uniform weights `U(±sqrt(6 / fan_in))` and zero biases.
pub fn init_mlp(dims: Dims, seed: SeedSpec) -> MlpTrial {
    init_mlp_with(dims, seed, MlpInit::KaimingUniform)
}

pub fn init_mlp_with(dims: Dims, seed: SeedSpec, init: MlpInit) -> MlpTrial {
    let mut rng = seed.rng_for(0);
    let mut theta = Vec::with_capacity(MlpTrial::param_count(dims));
    for (fan_in, fan_out) in MlpTrial::layers(dims) {
        let fan_in = fan_in as f64;
        match init {
            MlpInit::KaimingUniform => {
                let bound = (6.0 / fan_in).sqrt();
                theta.extend((0..fan_in as usize * fan_out).map(|_| rng.random_range(-bound..=bound)));
                theta.extend(std::iter::repeat_n(0.0, fan_out));
            }
            MlpInit::FanInUniform => {
                let bound = 1.0 / fan_in.sqrt();
                let count = (fan_in as usize + 1) * fan_out;
                theta.extend((0..count).map(|_| rng.random_range(-bound..=bound)));
            }
        }
    }
    MlpTrial { dims, theta }
}

impl TrialSolution for MlpTrial {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn theta(&self) -> &[f64] {
        &self.theta
    }

    fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        Self::layers(self.dims)
            .iter()
            .flat_map(|&(i, o)| [(i, o), (1, o)])
            .collect()
    }

    fn param_groups(&self) -> Vec<usize> {
        vec![0; 12]
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], t: f64, x: Var) -> (Var, Var) {
        let tv = tape.constant_scalar(t);
        let h = dense(tape, tv, p[0], p[1]);
        let h = tape.relu(h);
        let emb = dense(tape, h, p[2], p[3]);
        let input = tape.concat(emb, x);
        let hy = dense(tape, input, p[4], p[5]);
        let hy = tape.relu(hy);
        let y = dense(tape, hy, p[6], p[7]);
        let hz = dense(tape, input, p[8], p[9]);
        let hz = tape.relu(hz);
        let z = dense(tape, hz, p[10], p[11]);
        (y, z)
    }

    fn boxed_clone(&self) -> Box<dyn TrialSolution> {
        Box::new(self.clone())
    }
}

fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let xw = tape.matmul(x, w);
    tape.add(xw, b)
}

//! Property suites that can be run outside the test harness, e.g. from the
//! command line. Each suite returns a [`CheckOutcome`].

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::grad::{loss_and_grad_linear, loss_and_grad_tape, objective_signature, LossGrad};
use crate::grid::{make_grid, TimeGrid};
use crate::loss::{bml_fullgrid, deep_bsde_loss, estimate_bml, martingale_loss, EstimatorKind};
use crate::norms::{self, NormAccumulator, NormKind, ProcessPair};
use crate::problem::FbsdeProblem;
use crate::problems::{
    brownian_moment, coupled_reference_trial, deep_bsde_scheme_simulate, CoupledFbsde, Hjb, ToyBsde,
};
use crate::rng::{PathRng, SeedSpec};
use crate::sim::{compute_residuals, sample_brownian, simulate_forward, simulate_range};
use crate::stats::RunningStats;
use crate::tape::Tape;
use crate::trial::{init_mlp, init_mlp_with, LinearFeatures, LinearTrial, MlpInit, TrialSolution};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    fn error(name: &str, err: crate::Error) -> Self {
        Self::new(name, false, format!("error: {err}"))
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// The norm functions under test. Replacing one lets a caller confirm that
/// the suites catch a broken implementation.
#[derive(Clone, Copy)]
pub struct NormSet {
    pub standard: fn(&ProcessPair) -> f64,
    pub sup: fn(&ProcessPair) -> f64,
    pub beta: fn(&ProcessPair, f64) -> f64,
    pub mu: fn(&ProcessPair) -> f64,
    pub mu_fubini: fn(&ProcessPair) -> f64,
    pub mu_beta: fn(&ProcessPair, f64) -> f64,
}

impl Default for NormSet {
    fn default() -> Self {
        Self {
            standard: norms::norm_standard,
            sup: norms::norm_sup,
            beta: norms::norm_beta,
            mu: norms::norm_mu,
            mu_fubini: norms::norm_mu_fubini,
            mu_beta: norms::norm_mu_beta,
        }
    }
}

/// `norm_mu` with the quadrature weight `dt` left out.
pub fn norm_mu_without_weight(pp: &ProcessPair) -> f64 {
    norms::norm_mu(pp) / pp.grid.dt().sqrt()
}

impl NormSet {
    /// A set whose μ-norm drops its quadrature weight.
    pub fn with_broken_mu() -> Self {
        Self {
            mu: norm_mu_without_weight,
            ..Self::default()
        }
    }

    fn all(&self, pp: &ProcessPair, beta: f64) -> [f64; 6] {
        [
            (self.standard)(pp),
            (self.sup)(pp),
            (self.beta)(pp, beta),
            (self.mu)(pp),
            (self.mu_fubini)(pp),
            (self.mu_beta)(pp, beta),
        ]
    }
}

/// A random pair with piecewise-constant paths on `[0, T]`: each node keeps
/// the previous value with probability 0.8.
pub fn random_process_pair(rng: &mut PathRng, max_samples: usize, max_intervals: usize, horizon: f64) -> ProcessPair {
    let samples = rng.random_range(1..=max_samples);
    let h = rng.random_range(1..=max_intervals);
    let m = rng.random_range(1..=2);
    let d = rng.random_range(1..=3);
    let scale = 10f64.powf(rng.random_range(-1.0..1.0));
    let mut piecewise = |width: usize| {
        let mut a = Array3::zeros((samples, h + 1, width));
        for j in 0..samples {
            for k in 0..width {
                let mut v: f64 = scale * rng.sample::<f64, _>(StandardNormal);
                for i in 0..=h {
                    if i > 0 && rng.random_bool(0.2) {
                        v = scale * rng.sample::<f64, _>(StandardNormal);
                    }
                    a[[j, i, k]] = v;
                }
            }
        }
        a
    };
    let y = piecewise(m);
    let z = piecewise(m * d);
    ProcessPair::new(make_grid(horizon, h).expect("valid grid"), y, z).expect("consistent shapes")
}

/// Sum of two pairs on the same grid and shapes.
fn add_pairs(a: &ProcessPair, b: &ProcessPair) -> ProcessPair {
    ProcessPair::new(a.grid.clone(), &a.y + &b.y, &a.z + &b.z).expect("same shapes")
}

/// Random pair with the shapes of `like`.
fn random_like(rng: &mut PathRng, like: &ProcessPair) -> ProcessPair {
    let mut fill = |a: &Array3<f64>| a.mapv(|_| rng.sample::<f64, _>(StandardNormal));
    let y = fill(&like.y);
    let z = fill(&like.z);
    ProcessPair::new(like.grid.clone(), y, z).expect("same shapes")
}

/// Ordering chain `μ ≤ β(1/2)`, `β(0) ≤ sqrt(T+1)·sup`, `sup ≤ standard`.
pub fn norm_ordering(norms: &NormSet, pairs: usize, seed: SeedSpec) -> CheckOutcome {
    let mut rng = seed.rng_for(0);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..pairs {
        let pp = random_process_pair(&mut rng, 64, 64, 1.0);
        let t = pp.grid.horizon();
        let gaps = [
            (norms.mu)(&pp) - (norms.beta)(&pp, 0.5),
            (norms.beta)(&pp, 0.0) - (t + 1.0).sqrt() * (norms.sup)(&pp),
            (norms.sup)(&pp) - (norms.standard)(&pp),
        ];
        worst = gaps.iter().copied().fold(worst, f64::max);
    }
    CheckOutcome::new(
        "norm-ordering",
        worst <= 1e-9,
        format!("largest violation {worst:.3e} over {pairs} pairs"),
    )
}

/// Scaling a pair by `a` scales every norm by `|a|`.
pub fn norm_homogeneity(norms: &NormSet, pairs: usize, seed: SeedSpec) -> CheckOutcome {
    let mut rng = seed.rng_for(1);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let pp = random_process_pair(&mut rng, 16, 32, 1.0);
        let base = norms.all(&pp, 0.5);
        for a in [-2.0, 0.5, 3.0] {
            let scaled = norms.all(&pp.scaled(a), 0.5);
            for (s, b) in scaled.iter().zip(&base) {
                worst = worst.max((s - a.abs() * b).abs() / (1.0 + b.abs()));
            }
        }
    }
    CheckOutcome::new(
        "norm-homogeneity",
        worst <= 1e-12,
        format!("largest relative deviation {worst:.3e}"),
    )
}

/// `‖A + B‖ ≤ ‖A‖ + ‖B‖` for every norm.
pub fn norm_triangle(norms: &NormSet, pairs: usize, seed: SeedSpec) -> CheckOutcome {
    let mut rng = seed.rng_for(2);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..pairs {
        let a = random_process_pair(&mut rng, 16, 32, 1.0);
        let b = random_like(&mut rng, &a);
        let sum = norms.all(&add_pairs(&a, &b), 0.5);
        let na = norms.all(&a, 0.5);
        let nb = norms.all(&b, 0.5);
        for k in 0..6 {
            worst = worst.max(sum[k] - na[k] - nb[k]);
        }
    }
    CheckOutcome::new(
        "norm-triangle",
        worst <= 1e-12,
        format!("largest violation {worst:.3e}"),
    )
}

/// `e^{-|β|T} β(0) ≤ β(β) ≤ e^{|β|T} β(0)`.
pub fn beta_equivalence(norms: &NormSet, pairs: usize, seed: SeedSpec) -> CheckOutcome {
    let mut rng = seed.rng_for(3);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..pairs {
        let pp = random_process_pair(&mut rng, 16, 32, 1.0);
        let t = pp.grid.horizon();
        let base = (norms.beta)(&pp, 0.0);
        let beta: f64 = rng.random_range(-2.0..2.0);
        let v = (norms.beta)(&pp, beta);
        let f = (beta.abs() * t).exp();
        worst = worst.max(base / f - v).max(v - base * f);
    }
    CheckOutcome::new(
        "beta-equivalence",
        worst <= 1e-12,
        format!("largest violation {worst:.3e}"),
    )
}

/// The double-integral form of the μ-norm exceeds the single-integral form
/// by exactly `dt · E Σ_{i<H} |Z_i|² dt` on the grid, and both agree as
/// `dt → 0`.
pub fn fubini_identity(norms: &NormSet, pairs: usize, seed: SeedSpec) -> CheckOutcome {
    let mut rng = seed.rng_for(4);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let pp = random_process_pair(&mut rng, 16, 16, 1.0);
        let (samples, h1, _) = pp.y.dim();
        let h = h1 - 1;
        let dt = pp.grid.dt();
        let mut z_part = 0.0;
        for j in 0..samples {
            for i in 0..h {
                z_part += pp.z.slice(ndarray::s![j, i, ..]).iter().map(|v| v * v).sum::<f64>() * dt;
            }
        }
        z_part /= samples as f64;
        let fub = (norms.mu_fubini)(&pp).powi(2);
        let mu = (norms.mu)(&pp).powi(2);
        worst = worst.max((fub - mu - dt * z_part).abs() / (1.0 + fub));
    }
    CheckOutcome::new(
        "fubini-identity",
        worst <= 1e-12,
        format!("largest relative deviation {worst:.3e}"),
    )
}

/// The weighted μ-norm at `β = 0` is the μ-norm.
pub fn mu_beta_at_zero(norms: &NormSet, pairs: usize, seed: SeedSpec) -> CheckOutcome {
    let mut rng = seed.rng_for(5);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let pp = random_process_pair(&mut rng, 16, 32, 1.0);
        let mu = (norms.mu)(&pp);
        worst = worst.max(((norms.mu_beta)(&pp, 0.0) - mu).abs() / (1.0 + mu));
    }
    CheckOutcome::new(
        "mu-beta-at-zero",
        worst <= 1e-12,
        format!("largest relative deviation {worst:.3e}"),
    )
}

/// All norm suites on `pairs` random pairs each.
pub fn norm_suite(norms: &NormSet, pairs: usize, seed: SeedSpec) -> Vec<CheckOutcome> {
    vec![
        norm_ordering(norms, pairs, seed),
        norm_homogeneity(norms, pairs, seed),
        norm_triangle(norms, pairs, seed),
        beta_equivalence(norms, pairs, seed),
        fubini_identity(norms, pairs, seed),
        mu_beta_at_zero(norms, pairs, seed),
    ]
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because `θ ± h` crosses a ReLU kink.
    pub skipped: usize,
}

/// Relative error with a floor that keeps near-zero derivatives from
/// dominating: `|a - b| / max(|a|, |b|, 1e-6 (1 + |v|))`.
pub fn relative_error(a: f64, b: f64, value: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6 * (1.0 + value.abs()))
}

/// Compares `grad` against central differences of the non-differentiated
/// estimator with common random numbers, over the coordinates `coords`.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    p: &dyn FbsdeProblem,
    trial: &dyn TrialSolution,
    lg: &LossGrad,
    grid: &TimeGrid,
    samples: usize,
    seed: SeedSpec,
    kind: EstimatorKind,
    coords: &[usize],
    h: f64,
) -> Result<GradCheck> {
    let value =
        |t: &dyn TrialSolution| -> Result<f64> { Ok(estimate_bml(p, t, grid, samples, seed, kind, samples)?.value) };
    let base_sig = objective_signature(p, trial, grid, samples, seed, kind)?;
    let mut out = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for &k in coords {
        let mut plus = trial.boxed_clone();
        plus.theta_mut()[k] += h;
        let mut minus = trial.boxed_clone();
        minus.theta_mut()[k] -= h;
        let sig_p = objective_signature(p, plus.as_ref(), grid, samples, seed, kind)?;
        let sig_m = objective_signature(p, minus.as_ref(), grid, samples, seed, kind)?;
        if sig_p != base_sig || sig_m != base_sig {
            out.skipped += 1;
            continue;
        }
        let fd = (value(plus.as_ref())? - value(minus.as_ref())?) / (2.0 * h);
        out.max_rel_error = out.max_rel_error.max(relative_error(fd, lg.grad[k], lg.loss.value));
        out.checked += 1;
    }
    Ok(out)
}

/// One gradient case of the suite.
pub struct GradCase {
    pub label: String,
    pub problem: Box<dyn FbsdeProblem>,
    pub trial: Box<dyn TrialSolution>,
}

/// Linear and network trials on every built-in problem.
pub fn gradient_cases(seed: SeedSpec) -> Vec<GradCase> {
    let toy = ToyBsde::new(3, 1.0);
    let coupled = CoupledFbsde::default();
    let hjb = Hjb::new(5);
    let mut cases = vec![
        GradCase {
            label: "toy/linear".into(),
            trial: Box::new(LinearTrial::new(LinearFeatures::Quartic, 3, 0.2, -0.4)),
            problem: Box::new(toy.clone()),
        },
        GradCase {
            label: "coupled/linear".into(),
            trial: Box::new(coupled_reference_trial(&coupled, 0.8, 0.25)),
            problem: Box::new(coupled.clone()),
        },
        GradCase {
            label: "hjb/linear".into(),
            trial: Box::new(LinearTrial::new(LinearFeatures::Quadratic, 5, 0.3, 0.1)),
            problem: Box::new(hjb.clone()),
        },
    ];
    for (j, init) in [MlpInit::KaimingUniform, MlpInit::FanInUniform].into_iter().enumerate() {
        let problems: [(&str, Box<dyn FbsdeProblem>); 3] = [
            ("toy", Box::new(toy.clone())),
            ("coupled", Box::new(coupled.clone())),
            ("hjb", Box::new(hjb.clone())),
        ];
        for (k, (label, problem)) in problems.into_iter().enumerate() {
            let trial = init_mlp_with(problem.dims(), seed.child((3 * j + k) as u64), init);
            cases.push(GradCase {
                label: format!("{label}/mlp-{}", ["kaiming", "fan-in"][j]),
                trial: Box::new(trial),
                problem,
            });
        }
    }
    cases
}

/// Finite-difference check of the tape gradient, and of the affine route
/// where it applies, for every case and estimator. Networks are checked on
/// `coords_per_case` random coordinates.
pub fn gradient_suite(intervals: usize, samples: usize, coords_per_case: usize, seed: SeedSpec) -> CheckOutcome {
    let name = "gradient";
    let grid = match make_grid(1.0, intervals) {
        Ok(g) => g,
        Err(e) => return CheckOutcome::error(name, e),
    };
    let mut worst = 0.0f64;
    let mut worst_label = String::new();
    let (mut checked, mut skipped) = (0, 0);
    let mut rng = seed.rng_for(6);
    for case in gradient_cases(seed) {
        let p = case.problem.as_ref();
        let trial = case.trial.as_ref();
        let len = trial.theta().len();
        let coords: Vec<usize> = if len <= coords_per_case {
            (0..len).collect()
        } else {
            (0..coords_per_case).map(|_| rng.random_range(0..len)).collect()
        };
        for kind in [
            EstimatorKind::Particle,
            EstimatorKind::FullGrid,
            EstimatorKind::Terminal,
        ] {
            let step_seed = seed.child(7).child(checked as u64);
            let mut routes = vec![(
                "tape",
                loss_and_grad_tape(p, trial, &grid, samples, step_seed, kind, samples),
            )];
            if let (Some(lin), true) = (trial.as_linear(), p.is_decoupled() && p.driver_is_trial_free()) {
                routes.push(("affine", loss_and_grad_linear(p, lin, &grid, samples, step_seed, kind)));
            }
            for (route, lg) in routes {
                let res = lg.and_then(|lg| {
                    finite_difference_check(p, trial, &lg, &grid, samples, step_seed, kind, &coords, 1e-5)
                });
                match res {
                    Ok(gc) => {
                        checked += gc.checked;
                        skipped += gc.skipped;
                        if gc.max_rel_error > worst || worst_label.is_empty() {
                            worst = worst.max(gc.max_rel_error);
                            worst_label = format!("{} {} {}", case.label, kind.as_str(), route);
                        }
                    }
                    Err(e) => return CheckOutcome::error(name, e),
                }
            }
        }
    }
    CheckOutcome::new(
        name,
        worst <= 1e-4 && checked > 0,
        format!(
            "max relative error {worst:.3e} ({worst_label}); {checked} coordinates checked, {skipped} skipped at kinks"
        ),
    )
}

/// Builds one random problem for the recovery and identity suites.
fn random_problem(rng: &mut PathRng) -> Box<dyn FbsdeProblem> {
    let d = rng.random_range(1..=4);
    let horizon = rng.random_range(0.25..2.0);
    match rng.random_range(0..3) {
        0 => Box::new(ToyBsde::new(d, horizon)),
        1 => {
            let mut c = CoupledFbsde::new(d, horizon);
            c.amplitude = rng.random_range(0.5..1.5);
            c.sigma0 = rng.random_range(0.05..0.5);
            c.rate = rng.random_range(0.0..0.3);
            Box::new(c)
        }
        _ => {
            let mut h = Hjb::new(d);
            h.horizon = horizon;
            h.lambda = rng.random_range(0.2..2.0);
            Box::new(h)
        }
    }
}

/// Deep-BSDE style simulation leaves the residual constant in time, and its
/// terminal loss equals the full-grid loss.
pub fn deep_bsde_recovery(configs: usize, seed: SeedSpec) -> CheckOutcome {
    let name = "deep-bsde-recovery";
    let mut rng = seed.rng_for(8);
    let mut worst_r: f64 = 0.0;
    let mut worst_loss: f64 = 0.0;
    for c in 0..configs {
        let p = random_problem(&mut rng);
        let dims = p.dims();
        let h = rng.random_range(1..=40);
        let samples = rng.random_range(1..=32);
        let y0: Vec<f64> = (0..dims.m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a: f64 = rng.random_range(-1.0..1.0);
        let b: f64 = rng.random_range(-1.0..1.0);
        let control = move |i: usize, t: f64, x: &[f64], z: &mut [f64]| {
            for (k, v) in z.iter_mut().enumerate() {
                *v = a * x[k % x.len()].sin() + b * t + 0.01 * i as f64;
            }
        };
        let res = make_grid(p.horizon(), h)
            .and_then(|grid| sample_brownian(&grid, samples, dims.d, seed.child(9).child(c as u64)))
            .and_then(|batch| deep_bsde_scheme_simulate(p.as_ref(), &y0, &control, batch))
            .and_then(|out| {
                let r = out.r().expect("residuals filled");
                for j in 0..samples {
                    for i in 0..=h {
                        for l in 0..dims.m {
                            worst_r = worst_r.max((r[[j, i, l]] - r[[j, 0, l]]).abs());
                        }
                    }
                }
                let terminal = deep_bsde_loss(&out, p.as_ref())?.value;
                let full = bml_fullgrid(&out)?.value;
                worst_loss = worst_loss.max((terminal - full).abs() / terminal.abs().max(1.0));
                Ok(())
            });
        if let Err(e) = res {
            return CheckOutcome::error(name, e);
        }
    }
    CheckOutcome::new(
        name,
        worst_r <= 1e-10 && worst_loss <= 1e-10,
        format!(
            "max |R_i - R_0| {worst_r:.3e}, terminal vs full-grid loss {worst_loss:.3e} over {configs} configurations"
        ),
    )
}

/// On BSDEs whose driver ignores `y` and `z`, with `z̃ ≡ 0`, the martingale
/// loss is `T/2` times the full-grid loss.
pub fn martingale_factor(instances: usize, seed: SeedSpec) -> CheckOutcome {
    let name = "martingale-factor";
    let mut rng = seed.rng_for(10);
    let mut worst: f64 = 0.0;
    for c in 0..instances {
        let d = rng.random_range(1..=4);
        let horizon = rng.random_range(0.25..3.0);
        let p = ToyBsde::new(d, horizon);
        let features = if rng.random_bool(0.5) {
            LinearFeatures::Quadratic
        } else {
            LinearFeatures::Quartic
        };
        let trial = LinearTrial::new(features, d, rng.random_range(-1.0..1.0), 0.0);
        let h = rng.random_range(1..=50);
        let res = make_grid(horizon, h)
            .and_then(|grid| sample_brownian(&grid, 16, d, seed.child(11).child(c as u64)))
            .and_then(|batch| simulate_forward(&p, &trial, batch))
            .and_then(|batch| compute_residuals(&p, batch))
            .and_then(|batch| {
                let mart = martingale_loss(&batch, &p)?.value;
                let full = bml_fullgrid(&batch)?.value;
                worst = worst.max((mart - 0.5 * horizon * full).abs() / mart.abs().max(1.0));
                Ok(())
            });
        if let Err(e) = res {
            return CheckOutcome::error(name, e);
        }
    }
    CheckOutcome::new(
        name,
        worst <= 1e-12,
        format!("largest relative deviation {worst:.3e} over {instances} instances"),
    )
}

/// Outcome of the BML versus μ-norm comparison at one θ.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardPoint {
    pub theta: [f64; 2],
    pub bml: RunningStats,
    pub mu_sq: RunningStats,
}

impl PicardPoint {
    /// `|T·BML - ‖·‖²_μ| ≤ 3·combined SE + rel·value`.
    pub fn passes(&self, horizon: f64, rel: f64) -> bool {
        let bml = horizon * self.bml.mean();
        let mu = self.mu_sq.mean();
        let se = (horizon * horizon * self.bml.std_error().powi(2) + self.mu_sq.std_error().powi(2)).sqrt();
        (bml - mu).abs() <= 3.0 * se + rel * bml.abs().max(mu.abs())
    }
}

/// Full-grid BML of a toy trial against the squared μ-distance to the true
/// solution, both on the same paths.
pub fn picard_point(
    p: &ToyBsde,
    features: LinearFeatures,
    theta: [f64; 2],
    grid: &TimeGrid,
    samples: usize,
    seed: SeedSpec,
    chunk: usize,
) -> Result<PicardPoint> {
    let trial = LinearTrial::new(features, p.dim, theta[0], theta[1]);
    let truth = p.true_solution();
    let mut bml = RunningStats::new();
    let mut acc = NormAccumulator::new(grid.clone(), 0.0);
    for range in crate::exec::chunk_ranges(samples, chunk) {
        let a = simulate_range(p, &trial, grid, range.clone(), seed)?;
        let b = simulate_range(p, &truth, grid, range, seed)?;
        bml.merge(&RunningStats::from_slice(&crate::loss::fullgrid_contributions(&a)?));
        acc.push_pair(&ProcessPair::difference(&a, &b)?);
    }
    Ok(PicardPoint {
        theta,
        bml,
        mu_sq: *acc.stats(NormKind::Mu).expect("μ keeps per-path stats"),
    })
}

/// Picard identity at `points` random θ near the minimizer.
pub fn picard_identity(points: usize, intervals: usize, samples: usize, seed: SeedSpec) -> CheckOutcome {
    let name = "picard-identity";
    let p = ToyBsde::new(3, 1.0);
    let grid = match make_grid(1.0, intervals) {
        Ok(g) => g,
        Err(e) => return CheckOutcome::error(name, e),
    };
    let mut rng = seed.rng_for(12);
    let mut failures = 0;
    let mut worst_gap: f64 = 0.0;
    for k in 0..points {
        let theta = [
            1.0 / 3.0 + rng.random_range(-1.0..1.0),
            2.0 / 3.0 + rng.random_range(-1.0..1.0),
        ];
        match picard_point(
            &p,
            LinearFeatures::Quadratic,
            theta,
            &grid,
            samples,
            seed.child(13).child(k as u64),
            2000,
        ) {
            Ok(pt) => {
                let gap = (pt.bml.mean() - pt.mu_sq.mean()).abs() / pt.mu_sq.mean().max(1e-12);
                worst_gap = worst_gap.max(gap);
                if !pt.passes(1.0, 0.03) {
                    failures += 1;
                }
            }
            Err(e) => return CheckOutcome::error(name, e),
        }
    }
    CheckOutcome::new(
        name,
        failures == 0,
        format!("{failures} of {points} points outside 3 SE + 3%; largest relative gap {worst_gap:.3e}"),
    )
}

/// Empirical `E|W_t|^{2k}` for `k = 1..=4` at the end of a one-step grid,
/// with standard errors.
pub fn brownian_moment_stats(d: usize, t: f64, samples: usize, seed: SeedSpec) -> Result<Vec<RunningStats>> {
    let grid = make_grid(t, 1)?;
    let mut stats = vec![RunningStats::new(); 4];
    for range in crate::exec::chunk_ranges(samples, 1 << 15) {
        let batch = crate::sim::sample_brownian_range(
            &grid,
            range.start,
            range.len(),
            d,
            seed,
            crate::paths::DEFAULT_ENTRY_CAP,
        )?;
        let w = batch.w();
        for j in 0..range.len() {
            let r2: f64 = (0..d).map(|k| w[[j, 1, k]].powi(2)).sum();
            for (k, s) in stats.iter_mut().enumerate() {
                s.push(r2.powi(k as i32 + 1));
            }
        }
    }
    Ok(stats)
}

/// Largest z-score of the empirical Brownian moments against the exact
/// products `d(d+2)⋯(d+2k-2)t^k`.
pub fn brownian_moments(d: usize, t: f64, samples: usize, seed: SeedSpec) -> CheckOutcome {
    let name = "brownian-moments";
    match brownian_moment_stats(d, t, samples, seed) {
        Ok(stats) => {
            let z = stats
                .iter()
                .enumerate()
                .map(|(k, s)| (s.mean() - brownian_moment(d, k as u32 + 1, t)).abs() / s.std_error())
                .fold(0.0, f64::max);
            CheckOutcome::new(name, z <= 5.0, format!("largest z-score {z:.2} for k ≤ 4"))
        }
        Err(e) => CheckOutcome::error(name, e),
    }
}

/// Residuals from the backward pass against the defining double sum.
pub fn backward_sum(instances: usize, seed: SeedSpec) -> CheckOutcome {
    let name = "backward-sum";
    let mut rng = seed.rng_for(14);
    let mut worst: f64 = 0.0;
    for c in 0..instances {
        let p = random_problem(&mut rng);
        let dims = p.dims();
        let trial = init_mlp(dims, seed.child(15).child(c as u64));
        let h = rng.random_range(1..=8);
        let samples = rng.random_range(1..=4);
        let res = make_grid(p.horizon(), h)
            .and_then(|grid| sample_brownian(&grid, samples, dims.d, seed.child(16).child(c as u64)))
            .and_then(|batch| simulate_forward(p.as_ref(), &trial, batch))
            .and_then(|batch| compute_residuals(p.as_ref(), batch))
            .map(|batch| {
                let direct = direct_residuals(p.as_ref(), &batch);
                let r = batch.r().expect("residuals filled");
                for (a, b) in r.iter().zip(direct.iter()) {
                    worst = worst.max((a - b).abs() / (1.0 + b.abs()));
                }
            });
        if let Err(e) = res {
            return CheckOutcome::error(name, e);
        }
    }
    CheckOutcome::new(
        name,
        worst <= 1e-12,
        format!("largest deviation {worst:.3e} over {instances} instances"),
    )
}

/// `R_i = y_i - g - Σ_{k=i}^{H-1} f_k dt + Σ_{k=i}^{H-1} z_k·dW_k`, with the
/// inner sums recomputed for every `i` and coefficients evaluated one path
/// at a time.
fn direct_residuals(p: &dyn FbsdeProblem, batch: &crate::PathBatch) -> Array3<f64> {
    let dims = p.dims();
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let grid = batch.grid();
    let h = grid.intervals();
    let (x, y, z, dw) = (batch.x().unwrap(), batch.y().unwrap(), batch.z().unwrap(), batch.dw());
    let mut out = Array3::zeros((batch.samples(), h + 1, m));
    for j in 0..batch.samples() {
        let eval = |tape: &mut Tape, i: usize| {
            let xs: Vec<f64> = (0..n).map(|k| x[[j, i, k]]).collect();
            let ys: Vec<f64> = (0..m).map(|k| y[[j, i, k]]).collect();
            let zs: Vec<f64> = (0..m * d).map(|k| z[[j, i, k]]).collect();
            let xv = tape.constant(1, n, &xs);
            let yv = tape.constant(1, m, &ys);
            let zv = tape.constant(1, m * d, &zs);
            (xv, yv, zv)
        };
        let mut tape = Tape::new();
        let (xh, _, _) = eval(&mut tape, h);
        let gv = p.terminal(&mut tape, xh);
        let g = tape.value(gv).to_vec();
        let mut f = Vec::with_capacity(h);
        for i in 0..h {
            let mut tape = Tape::new();
            let (xv, yv, zv) = eval(&mut tape, i);
            let fv = p.driver(&mut tape, grid.t(i), xv, yv, zv);
            f.push(tape.value(fv).to_vec());
        }
        for i in 0..=h {
            for l in 0..m {
                let mut s = g[l];
                for k in i..h {
                    s += f[k][l] * grid.dt();
                    for c in 0..d {
                        s -= z[[j, k, l * d + c]] * dw[[j, k, c]];
                    }
                }
                out[[j, i, l]] = y[[j, i, l]] - s;
            }
        }
    }
    out
}

/// Every suite at a scale that finishes in seconds.
pub fn run_all(norms: &NormSet, seed: SeedSpec) -> Vec<CheckOutcome> {
    let mut out = norm_suite(norms, 100, seed);
    out.push(gradient_suite(10, 8, 20, seed));
    out.push(deep_bsde_recovery(100, seed));
    out.push(martingale_factor(50, seed));
    out.push(backward_sum(50, seed));
    out.push(picard_identity(3, 100, 20_000, seed));
    out.push(brownian_moments(3, 1.0, 100_000, seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_suites_pass() {
        for outcome in norm_suite(&NormSet::default(), 30, SeedSpec::new(1, 0)) {
            assert!(outcome.passed, "{outcome}");
        }
    }

    #[test]
    fn broken_mu_is_caught() {
        let out = norm_suite(&NormSet::with_broken_mu(), 30, SeedSpec::new(1, 0));
        let ordering = out.iter().find(|o| o.name == "norm-ordering").unwrap();
        assert!(!ordering.passed, "{ordering}");
    }

    #[test]
    fn identities_hold() {
        let seed = SeedSpec::new(2, 0);
        for outcome in [
            deep_bsde_recovery(10, seed),
            martingale_factor(10, seed),
            backward_sum(10, seed),
        ] {
            assert!(outcome.passed, "{outcome}");
        }
    }

    #[test]
    fn gradients_match_differences() {
        let outcome = gradient_suite(6, 4, 6, SeedSpec::new(3, 0));
        assert!(outcome.passed, "{outcome}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1.0), 0.0);
        assert!((relative_error(1.0, 1.1, 0.0) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-10, 0.0, 0.0) - 1e-4).abs() < 1e-12);
    }
}

use bml_fbsde::loss::{bml_fullgrid, bml_particle, estimate_bml};
use bml_fbsde::norms::{norm_beta, norm_mu, norm_mu_beta, norm_standard, norm_sup, ProcessPair};
use bml_fbsde::problems::{coupled_reference_trial, CoupledFbsde, Hjb, ToyBsde};
use bml_fbsde::sim::{compute_residuals, sample_brownian, simulate_forward};
use bml_fbsde::stats::RunningStats;
use bml_fbsde::{
    init_mlp_with, make_grid, EstimatorKind, FbsdeProblem, LinearFeatures, LinearTrial, MlpInit, SeedSpec, Tape,
    TrialSolution,
};
use ndarray::Array3;
use proptest::prelude::*;

fn simulate(p: &dyn FbsdeProblem, trial: &dyn TrialSolution, h: usize, m: usize, seed: u64) -> bml_fbsde::PathBatch {
    let grid = make_grid(p.horizon(), h).unwrap();
    let batch = sample_brownian(&grid, m, p.dims().d, SeedSpec::new(seed, 0)).unwrap();
    compute_residuals(p, simulate_forward(p, trial, batch).unwrap()).unwrap()
}

/// `R_i = y_i - (g + Σ_{k≥i} f_k dt - Σ_{k≥i} z_k·dW_k)` from per-path
/// driver and terminal closures.
fn direct(
    batch: &bml_fbsde::PathBatch,
    f: impl Fn(f64, &[f64], f64, &[f64]) -> f64,
    g: impl Fn(&[f64]) -> f64,
) -> Array3<f64> {
    let (x, y, z, dw) = (batch.x().unwrap(), batch.y().unwrap(), batch.z().unwrap(), batch.dw());
    let grid = batch.grid();
    let (h, dt) = (grid.intervals(), grid.dt());
    let (samples, _, n) = x.dim();
    let d = dw.dim().2;
    let mut out = Array3::zeros((samples, h + 1, 1));
    for j in 0..samples {
        let row = |a: &Array3<f64>, i: usize, w: usize| (0..w).map(|k| a[[j, i, k]]).collect::<Vec<f64>>();
        for i in 0..=h {
            let mut s = g(&row(x, h, n));
            for k in i..h {
                s += f(grid.t(k), &row(x, k, n), y[[j, k, 0]], &row(z, k, d)) * dt;
                s -= (0..d).map(|c| z[[j, k, c]] * dw[[j, k, c]]).sum::<f64>();
            }
            out[[j, i, 0]] = y[[j, i, 0]] - s;
        }
    }
    out
}

fn assert_close(a: &Array3<f64>, b: &Array3<f64>, tol: f64) {
    assert_eq!(a.dim(), b.dim());
    for (u, v) in a.iter().zip(b.iter()) {
        assert!((u - v).abs() <= tol * (1.0 + v.abs()), "{u} vs {v}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grid_is_a_pure_function(t in 0.01f64..10.0, h in 1usize..500) {
        let a = make_grid(t, h).unwrap();
        let b = make_grid(t, h).unwrap();
        prop_assert_eq!(a.nodes(), b.nodes());
        prop_assert_eq!(a.nodes().len(), h + 1);
        prop_assert_eq!(a.nodes()[h], t);
    }

    #[test]
    fn prefix_sums_reproduce_w(d in 1usize..5, m in 1usize..20, h in 1usize..60, seed in any::<u64>()) {
        let grid = make_grid(1.0, h).unwrap();
        let batch = sample_brownian(&grid, m, d, SeedSpec::new(seed, 3)).unwrap();
        let (w, dw) = (batch.w(), batch.dw());
        for j in 0..m {
            for k in 0..d {
                let mut acc = 0.0;
                prop_assert_eq!(w[[j, 0, k]], 0.0);
                for i in 0..h {
                    acc += dw[[j, i, k]];
                    prop_assert!((w[[j, i + 1, k]] - acc).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn toy_residuals_match_the_defining_sum(
        d in 1usize..4, h in 1usize..=8, m in 1usize..=4, t1 in -1.0f64..1.0, t2 in -1.0f64..1.0, seed in any::<u64>(),
    ) {
        let p = ToyBsde::new(d, 1.5);
        let trial = LinearTrial::new(LinearFeatures::Quartic, d, t1, t2);
        let batch = simulate(&p, &trial, h, m, seed);
        let df = d as f64;
        let oracle = direct(&batch, |_, _, _, _| -1.0, |x| x.iter().map(|v| v * v).sum::<f64>() / df);
        assert_close(batch.r().unwrap(), &oracle, 1e-12);
    }

    #[test]
    fn hjb_residuals_match_the_defining_sum(
        n in 1usize..4, h in 1usize..=8, m in 1usize..=4, seed in any::<u64>(),
    ) {
        let p = Hjb::new(n);
        let trial = init_mlp_with(p.dims(), SeedSpec::new(seed, 1), MlpInit::FanInUniform);
        let batch = simulate(&p, &trial, h, m, seed);
        let oracle = direct(
            &batch,
            |_, _, _, z| -0.5 * z.iter().map(|v| v * v).sum::<f64>(),
            |x| (0.5 * (1.0 + x.iter().map(|v| v * v).sum::<f64>())).ln(),
        );
        assert_close(batch.r().unwrap(), &oracle, 1e-12);
    }

    #[test]
    fn coupled_residuals_and_forward_path_match_by_hand(
        d in 1usize..4, h in 1usize..=8, m in 1usize..=4, t1 in 0.0f64..2.0, t2 in -1.0f64..1.0, seed in any::<u64>(),
    ) {
        let p = CoupledFbsde::new(d, 1.0);
        let (a, s0, r, t) = (p.amplitude, p.sigma0, p.rate, p.horizon);
        let trial = coupled_reference_trial(&p, t1, t2);
        let batch = simulate(&p, &trial, h, m, seed);
        let oracle = direct(
            &batch,
            |tk, x, y, _| {
                let s: f64 = x.iter().map(|v| v.sin()).sum();
                -r * y + 0.5 * s0 * s0 * (-3.0 * r * (t - tk)).exp() * (a * s).powi(3)
            },
            |x| a * x.iter().map(|v| v.sin()).sum::<f64>(),
        );
        assert_close(batch.r().unwrap(), &oracle, 1e-12);
        let (x, y, dw) = (batch.x().unwrap(), batch.y().unwrap(), batch.dw());
        for j in 0..m {
            for i in 0..h {
                for k in 0..d {
                    let next = x[[j, i, k]] + s0 * y[[j, i, 0]] * dw[[j, i, k]];
                    prop_assert!((x[[j, i + 1, k]] - next).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn estimates_are_deterministic_and_nonnegative(
        t1 in -2.0f64..2.0, t2 in -2.0f64..2.0, seed in any::<u64>(), kind_ix in 0usize..3,
    ) {
        let kind = [EstimatorKind::Particle, EstimatorKind::FullGrid, EstimatorKind::Terminal][kind_ix];
        let p = CoupledFbsde::default();
        let trial = coupled_reference_trial(&p, t1, t2);
        let grid = make_grid(1.0, 12).unwrap();
        let s = SeedSpec::new(seed, 0);
        let a = estimate_bml(&p, &trial, &grid, 40, s, kind, 16).unwrap();
        let b = estimate_bml(&p, &trial, &grid, 40, s, kind, 16).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a.value >= 0.0 && a.std_error >= 0.0);
    }

    #[test]
    fn zero_estimate_means_zero_residuals(seed in any::<u64>(), d in 1usize..4) {
        // constant terminal, zero trial: every residual is exactly zero
        let p = ToyBsde::new(d, 1.0);
        let trial = LinearTrial::new(LinearFeatures::Quadratic, d, 0.0, 0.0);
        let batch = simulate(&p, &trial, 6, 5, seed);
        let full = bml_fullgrid(&batch).unwrap();
        let any_nonzero = batch.r().unwrap().iter().any(|&v| v != 0.0);
        prop_assert!(full.value > 0.0 || !any_nonzero);
        prop_assert!(bml_particle(&batch, &SeedSpec::new(seed, 9)).unwrap().value >= 0.0);
    }
}

fn random_pair(rng: &mut impl rand::Rng, m: usize, h: usize, mz: usize) -> ProcessPair {
    let grid = make_grid(1.0, h).unwrap();
    let y = Array3::from_shape_fn((m, h + 1, 1), |_| rng.random_range(-3.0..3.0));
    let z = Array3::from_shape_fn((m, h + 1, mz), |_| rng.random_range(-3.0..3.0));
    ProcessPair::new(grid, y, z).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn norm_ordering_chain(m in 1usize..=64, h in 1usize..=64, mz in 1usize..4, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let pp = random_pair(&mut rng, m, h, mz);
        let slack = 1e-9;
        prop_assert!(norm_mu(&pp) <= norm_beta(&pp, 0.5) + slack);
        prop_assert!(norm_beta(&pp, 0.0) <= 2f64.sqrt() * norm_sup(&pp) + slack);
        prop_assert!(norm_sup(&pp) <= norm_standard(&pp) + slack);
    }

    #[test]
    fn norms_are_homogeneous_and_subadditive(m in 1usize..=16, h in 1usize..=32, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let a = random_pair(&mut rng, m, h, 2);
        let b = random_pair(&mut rng, m, h, 2);
        let sum = ProcessPair::new(a.grid.clone(), &a.y + &b.y, &a.z + &b.z).unwrap();
        let norms: [fn(&ProcessPair) -> f64; 6] = [
            norm_standard,
            norm_sup,
            |p| norm_beta(p, 0.7),
            norm_mu,
            |p| norm_mu_beta(p, 0.7),
            |p| norm_beta(p, -0.4),
        ];
        for f in norms {
            for c in [-2.0, 0.5, 3.0] {
                let scaled = f(&a.scaled(c));
                prop_assert!((scaled - c.abs() * f(&a)).abs() <= 1e-12 * (1.0 + scaled));
            }
            prop_assert!(f(&sum) <= f(&a) + f(&b) + 1e-12);
        }
    }

    #[test]
    fn beta_norms_are_equivalent(beta in -3.0f64..3.0, m in 1usize..=16, h in 1usize..=32, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let pp = random_pair(&mut rng, m, h, 1);
        let (b0, b) = (norm_beta(&pp, 0.0), norm_beta(&pp, beta));
        let c = (beta.abs()).exp();
        prop_assert!(b0 / c <= b * (1.0 + 1e-12) && b <= c * b0 * (1.0 + 1e-12));
    }
}

#[test]
fn tape_replay_gives_identical_gradients() {
    let p = Hjb::new(3);
    let trial = init_mlp_with(p.dims(), SeedSpec::new(5, 0), MlpInit::FanInUniform);
    let mut tape = Tape::new();
    let params = trial.register(&mut tape, true);
    let x = tape.constant(4, 3, &[0.1, -0.3, 0.5, 1.0, 0.2, -0.7, 0.0, 0.4, 0.9, -1.1, 0.3, 0.6]);
    let (y, z) = trial.forward(&mut tape, &params, 0.4, x);
    let yz = tape.row_square_norm(z);
    let both = tape.add(y, yz);
    let root = tape.sum(both);
    tape.backward(root);
    let first: Vec<Vec<f64>> = params.iter().map(|&v| tape.grad(v).to_vec()).collect();
    tape.backward(root);
    let second: Vec<Vec<f64>> = params.iter().map(|&v| tape.grad(v).to_vec()).collect();
    assert_eq!(first, second);
    assert!(first.iter().flatten().any(|g| *g != 0.0));
}

#[test]
fn coupled_forward_path_depends_on_theta1() {
    let p = CoupledFbsde::default();
    let grid = make_grid(1.0, 20).unwrap();
    let xt = |t1: f64| {
        let batch = sample_brownian(&grid, 8, 3, SeedSpec::new(6, 0)).unwrap();
        let batch = simulate_forward(&p, &coupled_reference_trial(&p, t1, 0.3), batch).unwrap();
        batch.x().unwrap().slice(ndarray::s![.., 20, ..]).to_owned()
    };
    let h = 1e-5;
    let fd = (xt(1.0 + h) - xt(1.0 - h)) / (2.0 * h);
    assert!(fd.iter().any(|v| v.abs() > 1e-3), "{fd:?}");
}

#[test]
fn particle_and_full_grid_agree_on_average() {
    let p = ToyBsde::new(3, 1.0);
    let trial = LinearTrial::new(LinearFeatures::Quadratic, 3, 0.6, 0.2);
    let grid = make_grid(1.0, 50).unwrap();
    let mut part = RunningStats::new();
    let mut full = RunningStats::new();
    for b in 0..50 {
        let batch = sample_brownian(&grid, 200, 3, SeedSpec::new(7, b)).unwrap();
        let batch = compute_residuals(&p, simulate_forward(&p, &trial, batch).unwrap()).unwrap();
        part.push(bml_particle(&batch, &SeedSpec::new(8, b)).unwrap().value);
        full.push(bml_fullgrid(&batch).unwrap().value);
    }
    let se = (part.std_error().powi(2) + full.std_error().powi(2)).sqrt();
    assert!(
        (part.mean() - full.mean()).abs() <= 4.0 * se,
        "{} vs {}",
        part.mean(),
        full.mean()
    );
}

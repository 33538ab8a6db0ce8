use bml_fbsde::loss::estimate_bml;
use bml_fbsde::optim::{train, MetricLog, OptimizerKind, Oracle, TrainConfig};
use bml_fbsde::problems::{coupled_reference_trial, toy_bml_closed_form_scheme1, CoupledFbsde, ToyBsde};
use bml_fbsde::{make_grid, EstimatorKind, FbsdeProblem, LinearFeatures, LinearTrial, SeedSpec, TrialSolution};

fn toy_run(seed: u64) -> MetricLog {
    let p = ToyBsde::new(3, 1.0);
    let trial = LinearTrial::new(LinearFeatures::Quadratic, 3, 0.0, 0.0);
    let cfg = TrainConfig {
        steps: 1000,
        samples: 1000,
        intervals: 1000,
        learning_rates: vec![1e-3],
        optimizer: OptimizerKind::Adam,
        estimator: EstimatorKind::Particle,
        seed,
        eval_every: 100,
        eval_samples: 2000,
        repeats: 1,
        norm_beta: 0.5,
    };
    let oracle = Oracle::Trial(Box::new(p.true_solution()));
    train(&p, &trial, &cfg, Some(&oracle)).unwrap()
}

#[test]
fn closed_form_loss_decreases_along_training() {
    let log = toy_run(4);
    let cf: Vec<(usize, f64)> = log
        .rows
        .iter()
        .map(|r| (r.step, toy_bml_closed_form_scheme1(r.theta[0], r.theta[1], 3, 1.0)))
        .collect();
    for w in cf.windows(2).filter(|w| w[0].0 >= 200) {
        assert!(w[1].1 <= w[0].1, "closed-form BML rose from {:?} to {:?}", w[0], w[1]);
    }
}

#[test]
fn mu_error_tracks_the_loss() {
    let log = toy_run(5);
    for r in log.rows.iter().filter(|r| r.step >= 200) {
        let mu = r.errors.unwrap().mu;
        let ratio = mu / r.loss;
        assert!((0.1..=10.0).contains(&ratio), "step {}: ratio {ratio}", r.step);
    }
    let last = log.rows.last().unwrap();
    assert!(last.loss < 0.01 && last.errors.unwrap().mu < 0.01, "{last:?}");
}

#[test]
fn identical_configs_give_identical_logs() {
    let strip = |mut log: MetricLog| {
        log.rows.iter_mut().for_each(|r| r.elapsed = 0.0);
        log.runs.iter_mut().for_each(|r| {
            r.elapsed = 0.0;
            if let Some(l) = r.last.as_mut() {
                l.elapsed = 0.0;
            }
        });
        log
    };
    assert_eq!(strip(toy_run(6)), strip(toy_run(6)));
    assert_ne!(strip(toy_run(6)).rows, strip(toy_run(7)).rows);
}

fn fullgrid(p: &dyn FbsdeProblem, trial: &dyn TrialSolution, h: usize) -> f64 {
    let grid = make_grid(p.horizon(), h).unwrap();
    estimate_bml(
        p,
        trial,
        &grid,
        100_000,
        SeedSpec::new(17, h as u64),
        EstimatorKind::FullGrid,
        1024,
    )
    .unwrap()
    .value
}

// Residuals of the exact solution vanish at the first-order rate: the value
// at H = 1000 stays within 10x of the H = 4000 value scaled back by 4.
fn assert_ito_rate(p: &dyn FbsdeProblem, trial: &dyn TrialSolution) {
    let coarse = fullgrid(p, trial, 1000);
    let fine = fullgrid(p, trial, 4000);
    assert!(coarse <= 0.01 && fine <= 0.01, "{coarse} {fine}");
    assert!(coarse <= 10.0 * 4.0 * fine, "{coarse} vs {fine}");
    assert!(fine < coarse, "{coarse} vs {fine}");
}

#[test]
fn toy_exact_solution_has_vanishing_residuals() {
    let p = ToyBsde::new(3, 1.0);
    assert_ito_rate(&p, &p.true_solution());
}

#[test]
fn coupled_exact_solution_has_vanishing_residuals() {
    let p = CoupledFbsde::default();
    let trial = coupled_reference_trial(&p, p.amplitude, p.theta2_candidate_a());
    assert_ito_rate(&p, &trial);
}

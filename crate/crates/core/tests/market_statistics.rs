//! Statistical properties of the simulated market and the value estimator.

use smplab_core::stats::mean_and_std_error;
use smplab_core::{
    estimate_value, generate_brownian, simulate_gbm_exact, simulate_sde, ExampleModel, McConfig,
    ModelSpec, PathSimulator, StartState, TimeGrid, TwapCapped,
};

const TWAP: TwapCapped = TwapCapped {
    horizon: 1.0,
    c_plus: 2.0,
};

#[test]
fn exact_gbm_is_a_martingale_at_every_time() {
    let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
    let batch = generate_brownian(grid, 50_000, 21).unwrap();
    let market = simulate_gbm_exact(&grid, 1.0, &batch).unwrap();
    for k in 0..grid.n_points() {
        let xs: Vec<f64> = (0..market.n_paths).map(|i| market.path(i)[k]).collect();
        let (mean, se) = mean_and_std_error(&xs);
        assert!(
            (mean - 1.0).abs() <= 4.0 * se.max(1e-15),
            "step {k}: {mean} ± {se}"
        );
    }
}

#[test]
fn brownian_increments_have_the_step_variance() {
    let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
    let batch = generate_brownian(grid, 100_000, 3).unwrap();
    let dw = batch.increments();
    let n = dw.len() as f64;
    let var = dw.iter().map(|d| d * d).sum::<f64>() / n;
    // For Gaussian increments the sample second moment has variance 2 dt^2 / n.
    let se = (2.0 / n).sqrt() * grid.dt();
    assert!(
        (var - grid.dt()).abs() <= 4.0 * se,
        "{var} vs {}",
        grid.dt()
    );
    let mean = dw.iter().sum::<f64>() / n;
    assert!(mean.abs() <= 4.0 * (grid.dt() / n).sqrt());
}

#[test]
fn euler_converges_strongly_to_the_exact_solution() {
    let gbm = ModelSpec::zero().with_dynamics(|_, _| 0.0, |_, x| x);
    let mut errors = Vec::new();
    for n in [16, 64, 256] {
        let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
        let batch = generate_brownian(grid, 20_000, 8).unwrap();
        let euler = simulate_sde(&gbm, &grid, 1.0, &batch).unwrap();
        let exact = simulate_gbm_exact(&grid, 1.0, &batch).unwrap();
        let err: f64 = (0..batch.n_paths)
            .map(|i| (euler.path(i)[n] - exact.path(i)[n]).abs())
            .sum::<f64>()
            / batch.n_paths as f64;
        errors.push(err);
    }
    // Strong order 1/2: quartering the step should roughly halve the error.
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!(ratio > 1.6 && ratio < 2.6, "{errors:?}");
    }
}

#[test]
fn standard_error_shrinks_with_the_square_root_of_the_path_count() {
    let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
    let start = StartState {
        t: 0.0,
        x: 1.0,
        q: 0.5,
    };
    let small =
        estimate_value(&ExampleModel, &TWAP, start, &grid, &McConfig::new(5_000, 1)).unwrap();
    let large = estimate_value(
        &ExampleModel,
        &TWAP,
        start,
        &grid,
        &McConfig::new(80_000, 2),
    )
    .unwrap();
    let ratio = small.std_error / large.std_error;
    assert!((ratio - 4.0).abs() < 0.4, "{ratio}");
}

/// `Var[sum_k c X_k dt]` for TWAP at rate 1/2 and exact GBM from 1, with
/// `E[X_j X_k] = exp(min(t_j, t_k))` and the last step cut at `tau = 1`.
fn twap_payoff_variance(grid: &TimeGrid) -> f64 {
    let n = grid.n_steps();
    let w = 0.5 * grid.dt();
    let mut second = 0.0;
    for j in 0..n {
        for k in 0..n {
            second += w * w * grid.time(j.min(k)).exp();
        }
    }
    second - 0.25
}

#[test]
fn payoff_sample_variance_matches_the_exact_variance() {
    let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
    let start = StartState {
        t: 0.0,
        x: 1.0,
        q: 0.5,
    };
    let n = 100_000;
    let sim = PathSimulator::new(&ExampleModel, &TWAP, grid, start, &McConfig::new(n, 17)).unwrap();
    let payoffs: Vec<f64> = sim
        .map(n, |_, p| {
            let p = p.unwrap();
            Ok((0..grid.n_steps())
                .map(|k| p.base.rates[k] * p.xs[k] * grid.dt())
                .sum())
        })
        .unwrap();
    let (mean, _) = mean_and_std_error(&payoffs);
    let centred: Vec<f64> = payoffs.iter().map(|v| (v - mean).powi(2)).collect();
    // Sample variance and its own standard error from the fourth moment.
    let (var, var_se) = mean_and_std_error(&centred);
    let exact = twap_payoff_variance(&grid);
    assert!(
        (var - exact).abs() <= 4.0 * var_se,
        "{var} ± {var_se} vs {exact}"
    );
}

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use smplab_core::{
    estimate_value, evaluate_policy, generate_brownian, perturb_control, simulate_gbm_exact,
    solve_adjoint, solve_example_hjb, Basis, ConstantRate, ExampleModel, LinearDriverModel,
    McConfig, PerturbationSpec, PriceProportional, StartState, TimeGrid, TwapCapped,
};

const TWAP: TwapCapped = TwapCapped {
    horizon: 1.0,
    c_plus: 2.0,
};

fn market(c: &mut Criterion) {
    let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
    let mut group = c.benchmark_group("market");
    group.sample_size(20);
    group.bench_function("brownian_1k_paths_1k_steps", |b| {
        b.iter(|| generate_brownian(grid, 1000, 1).unwrap())
    });
    let batch = generate_brownian(grid, 1000, 1).unwrap();
    group.bench_function("gbm_exact_1k_paths_1k_steps", |b| {
        b.iter(|| simulate_gbm_exact(&grid, 1.0, &batch).unwrap())
    });
    group.finish();
}

fn control_and_perturbation(c: &mut Criterion) {
    let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
    let batch = generate_brownian(grid, 1000, 2).unwrap();
    let market = simulate_gbm_exact(&grid, 1.0, &batch).unwrap();
    let policy = PriceProportional {
        kappa: 1.0,
        cap: 2.0,
    };
    let mut group = c.benchmark_group("control");
    group.sample_size(20);
    group.bench_function("evaluate_policy_1k_paths", |b| {
        b.iter(|| evaluate_policy(&policy, &market, 0.5).unwrap())
    });
    let (control, inv) = evaluate_policy(&policy, &market, 0.5).unwrap();
    for c_bar in [0.0, 2.0] {
        let spec = PerturbationSpec {
            t: 0.0,
            c_bar,
            theta: 0.05,
        };
        group.bench_with_input(
            BenchmarkId::new("perturb_and_materialize_1k_paths", c_bar),
            &spec,
            |b, spec| b.iter(|| perturb_control(spec, &control, &inv, Some(2.0), None).unwrap()),
        );
    }
    group.finish();
}

fn estimators(c: &mut Criterion) {
    let mut group = c.benchmark_group("estimators");
    group.sample_size(10);
    let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
    let start = StartState {
        t: 0.0,
        x: 1.0,
        q: 0.5,
    };
    group.bench_function("value_10k_paths", |b| {
        b.iter(|| {
            estimate_value(
                &ExampleModel,
                &TWAP,
                start,
                &grid,
                &McConfig::new(10_000, 3),
            )
            .unwrap()
        })
    });

    let coarse = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let batch = generate_brownian(coarse, 10_000, 4).unwrap();
    let market = simulate_gbm_exact(&coarse, 1.0, &batch).unwrap();
    let slow = ConstantRate {
        rate: 0.1,
        cap: None,
    };
    let (control, inv) = evaluate_policy(&slow, &market, 1.0).unwrap();
    let model = LinearDriverModel { a: 0.3, b: 0.7 };
    group.bench_function("adjoint_regression_10k_paths_50_steps", |b| {
        b.iter(|| solve_adjoint(&model, &market, &inv, &control, Basis::default()).unwrap())
    });

    for n in [101, 401] {
        group.bench_with_input(BenchmarkId::new("hjb", n), &n, |b, &n| {
            b.iter(|| solve_example_hjb(1.0, 2.0, 4.0, n, n).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, market, control_and_perturbation, estimators);
criterion_main!(benches);

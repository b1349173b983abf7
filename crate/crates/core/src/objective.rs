//! Monte Carlo estimation of the liquidation objective and of the gain
//! quotient of a spike variation.
//!
//! Paths are simulated one at a time from their own random stream and reduced
//! in path order, so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{evaluate_path, ControlPolicy, ControlledPath};
use crate::error::{invalid, Result, SmpError};
use crate::grid::TimeGrid;
use crate::market::{model_path, BrownianSource};
use crate::model::Model;
use crate::perturbation::{perturb_path, PathPerturbation, PerturbationOutcome, PerturbationSpec};
use crate::stats::mean_and_std_error;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub antithetic: bool,
}

impl McConfig {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self {
            n_paths,
            seed,
            antithetic: false,
        }
    }
}

/// Initial time, factor value and inventory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartState {
    pub t: f64,
    pub x: f64,
    pub q: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub n_excluded: usize,
    pub seed: u64,
}

impl MonteCarloEstimate {
    /// Aggregates per-path samples; `None` marks an excluded path.
    pub fn from_samples(samples: &[Option<f64>], seed: u64) -> Result<Self> {
        let kept: Vec<f64> = samples.iter().flatten().copied().collect();
        if kept.is_empty() {
            return Err(SmpError::AllPathsExcluded {
                n_paths: samples.len(),
            });
        }
        let (mean, std_error) = mean_and_std_error(&kept);
        Ok(Self {
            mean,
            std_error,
            n_paths: samples.len(),
            n_excluded: samples.len() - kept.len(),
            seed,
        })
    }

    /// Whether `target` lies within `k` standard errors of the mean.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error
    }

    pub fn to_json(&self, config_hash: &str) -> serde_json::Value {
        serde_json::json!({
            "mean": self.mean,
            "std_error": self.std_error,
            "n_paths": self.n_paths,
            "n_excluded": self.n_excluded,
            "seed": self.seed,
            "config_hash": config_hash,
        })
    }
}

/// A simulated factor path with the base control evaluated on it.
#[derive(Clone, Debug)]
pub struct SimulatedPath {
    pub xs: Vec<f64>,
    pub base: ControlledPath,
}

/// Simulates factor paths and evaluates a base policy on them.
pub struct PathSimulator<'a> {
    pub model: &'a dyn Model,
    pub policy: &'a dyn ControlPolicy,
    pub grid: TimeGrid,
    pub source: BrownianSource,
    pub start: StartState,
}

impl<'a> PathSimulator<'a> {
    pub fn new(
        model: &'a dyn Model,
        policy: &'a dyn ControlPolicy,
        grid: TimeGrid,
        start: StartState,
        mc: &McConfig,
    ) -> Result<Self> {
        if (grid.t0() - start.t).abs() > 1e-12 {
            return Err(SmpError::GridMismatch(format!(
                "grid starts at {} but the start state is at {}",
                grid.t0(),
                start.t
            )));
        }
        if !(start.q > 0.0) {
            return Err(invalid("q", "initial inventory must be positive"));
        }
        if mc.n_paths == 0 {
            return Err(invalid("n_paths", "at least one path is required"));
        }
        Ok(Self {
            model,
            policy,
            grid,
            source: BrownianSource::new(grid, mc.seed).with_antithetic(mc.antithetic),
            start,
        })
    }

    /// Path `i`, or `None` if its factor diverged.
    pub fn path(&self, i: usize, dw: &mut Vec<f64>) -> Result<Option<SimulatedPath>> {
        dw.resize(self.grid.n_steps(), 0.0);
        self.source.fill_increments(i, dw);
        let mut xs = vec![0.0; self.grid.n_points()];
        if model_path(self.model, &self.grid, self.start.x, dw, &mut xs).is_some() {
            return Ok(None);
        }
        let base = evaluate_path(self.policy, &self.grid, &xs, self.start.q, i)?;
        Ok(Some(SimulatedPath { xs, base }))
    }

    /// Maps `f` over all paths in parallel, preserving path order.
    pub fn map<T: Send>(
        &self,
        n_paths: usize,
        f: impl Fn(usize, Option<&SimulatedPath>) -> Result<T> + Sync + Send,
    ) -> Result<Vec<T>> {
        (0..n_paths)
            .into_par_iter()
            .map_init(Vec::new, |dw, i| {
                let p = self.path(i, dw)?;
                f(i, p.as_ref())
            })
            .collect()
    }
}

/// Objective of one path: running payoff by left-endpoint quadrature up to the
/// stop (partial last step) plus the terminal payoff at the interpolated stop.
#[allow(clippy::needless_range_loop)] // three parallel per-step arrays
pub fn path_payoff(model: &dyn Model, grid: &TimeGrid, xs: &[f64], p: &ControlledPath) -> f64 {
    let dt = grid.dt();
    let mut running = 0.0;
    for k in 0..grid.n_steps() {
        let t_k = grid.time(k);
        if t_k >= p.tau {
            break;
        }
        let h = (p.tau - t_k).min(dt);
        running += model.running_payoff(t_k, p.rates[k], xs[k], p.q[k]) * h;
    }
    running + model.terminal_payoff(grid.interpolate(xs, p.tau), p.q_at_tau())
}

/// Integral of `f(r, rate(r), X, q(r))` over `[a, b]`, split at grid points
/// and at `cuts`; each piece uses its left end for time, inventory and the
/// factor (the factor at the left grid point of the piece's step) and its
/// midpoint for the piecewise-constant rate.
#[allow(clippy::too_many_arguments)]
pub fn running_integral(
    model: &dyn Model,
    grid: &TimeGrid,
    xs: &[f64],
    a: f64,
    b: f64,
    cuts: &[f64],
    rate: impl Fn(f64) -> f64,
    q: impl Fn(f64) -> f64,
) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut edges = vec![a];
    let mut k = grid.step_containing(a) + 1;
    while k <= grid.n_steps() && grid.time(k) < b {
        if grid.time(k) > a {
            edges.push(grid.time(k));
        }
        k += 1;
    }
    edges.extend(cuts.iter().copied().filter(|&c| c > a && c < b));
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    edges.push(b);
    edges
        .windows(2)
        .map(|w| {
            let (s0, s1) = (w[0], w[1]);
            let x = xs[grid.step_containing(0.5 * (s0 + s1))];
            model.running_payoff(s0, rate(0.5 * (s0 + s1)), x, q(s0)) * (s1 - s0)
        })
        .sum()
}

/// Payoff difference (varied minus base) divided by theta on one path.
///
/// Both payoffs are integrated over the same pieces from the spike time on;
/// before it the controls coincide and the contributions cancel exactly.
pub fn path_gain_quotient(
    model: &dyn Model,
    grid: &TimeGrid,
    xs: &[f64],
    base: &ControlledPath,
    o: &PerturbationOutcome,
) -> f64 {
    let a = o.spec.t;
    let b = o.tau_max;
    let cuts = o.breakpoints();
    let base_run = running_integral(
        model,
        grid,
        xs,
        a,
        b,
        &cuts,
        |r| base.rate_at(grid, r),
        |r| base.q_at(grid, r),
    );
    let pert_run = running_integral(
        model,
        grid,
        xs,
        a,
        b,
        &cuts,
        |r| o.rate_theta_at(base, grid, r),
        |r| o.q_theta_at(base, grid, r),
    );
    let base_term = model.terminal_payoff(grid.interpolate(xs, o.tau), o.q_tau);
    let pert_term = model.terminal_payoff(grid.interpolate(xs, o.tau_theta), o.q_theta_terminal);
    ((pert_run + pert_term) - (base_run + base_term)) / o.spec.theta
}

pub fn estimate_value(
    model: &dyn Model,
    policy: &dyn ControlPolicy,
    start: StartState,
    grid: &TimeGrid,
    mc: &McConfig,
) -> Result<MonteCarloEstimate> {
    let sim = PathSimulator::new(model, policy, *grid, start, mc)?;
    let samples = sim.map(mc.n_paths, |_, p| {
        Ok(p.map(|p| path_payoff(model, grid, &p.xs, &p.base)))
    })?;
    MonteCarloEstimate::from_samples(&samples, mc.seed)
}

/// Common-random-number estimate of `(J(c^theta) - J(c)) / theta`.
///
/// Paths outside the variation's window are excluded and counted.
pub fn gain_quotient(
    model: &dyn Model,
    policy: &dyn ControlPolicy,
    start: StartState,
    spec: &PerturbationSpec,
    grid: &TimeGrid,
    mc: &McConfig,
) -> Result<MonteCarloEstimate> {
    spec.validate(grid, policy.cap())?;
    let sim = PathSimulator::new(model, policy, *grid, start, mc)?;
    let tol = 2.0 * grid.dt();
    let samples = sim.map(mc.n_paths, |_, p| {
        let Some(p) = p else { return Ok(None) };
        Ok(match perturb_path(spec, &p.base, grid, tol)? {
            PathPerturbation::Valid(o) => Some(path_gain_quotient(model, grid, &p.xs, &p.base, &o)),
            PathPerturbation::Skipped(_) => None,
        })
    })?;
    MonteCarloEstimate::from_samples(&samples, mc.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{ConstantRate, TwapCapped};
    use crate::model::{ExampleModel, ModelSpec};

    const START: StartState = StartState {
        t: 0.0,
        x: 1.0,
        q: 0.5,
    };

    #[test]
    fn null_payoff_is_exactly_zero() {
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let spec = ModelSpec::zero().with_dynamics(|_, _| 0.0, |_, x| x);
        let policy = TwapCapped {
            horizon: 1.0,
            c_plus: 2.0,
        };
        let e = estimate_value(&spec, &policy, START, &g, &McConfig::new(200, 1)).unwrap();
        assert_eq!((e.mean, e.std_error, e.n_excluded), (0.0, 0.0, 0));
    }

    #[test]
    fn deterministic_factor_value_is_exact() {
        let g = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let spec = ModelSpec::zero().with_running(|_, p, x, _| p * x, |_, _, _, _| 0.0);
        let policy = ConstantRate {
            rate: 1.3,
            cap: None,
        };
        let e = estimate_value(&spec, &policy, START, &g, &McConfig::new(4, 1)).unwrap();
        assert!((e.mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn example_value_small_sample() {
        let g = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let policy = TwapCapped {
            horizon: 1.0,
            c_plus: 2.0,
        };
        let e = estimate_value(&ExampleModel, &policy, START, &g, &McConfig::new(4000, 3)).unwrap();
        assert!(e.within(0.5, 3.0), "{e:?}");
        let deep = StartState { q: 3.0, ..START };
        let e = estimate_value(&ExampleModel, &policy, deep, &g, &McConfig::new(4000, 3)).unwrap();
        assert!(e.within(2.0, 3.0), "{e:?}");
    }

    #[test]
    fn identity_variation_has_zero_gain() {
        let g = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let policy = ConstantRate {
            rate: 0.5,
            cap: Some(2.0),
        };
        let spec = PerturbationSpec {
            t: 0.2,
            c_bar: 0.5,
            theta: 0.05,
        };
        let e = gain_quotient(
            &ExampleModel,
            &policy,
            START,
            &spec,
            &g,
            &McConfig::new(300, 9),
        )
        .unwrap();
        assert_eq!(e.mean, 0.0);
        assert_eq!(e.std_error, 0.0);
    }

    #[test]
    fn start_must_match_grid() {
        let g = TimeGrid::new(0.1, 1.0, 10).unwrap();
        let policy = ConstantRate {
            rate: 0.5,
            cap: None,
        };
        assert!(estimate_value(&ExampleModel, &policy, START, &g, &McConfig::new(1, 1)).is_err());
    }

    #[test]
    fn json_report_fields() {
        let e = MonteCarloEstimate {
            mean: 1.0,
            std_error: 0.1,
            n_paths: 10,
            n_excluded: 1,
            seed: 5,
        };
        let v = e.to_json("abc");
        assert_eq!(v["config_hash"], "abc");
        assert_eq!(v["n_excluded"], 1);
    }

    #[test]
    fn all_excluded_is_an_error() {
        assert!(MonteCarloEstimate::from_samples(&[None, None], 1).is_err());
    }
}

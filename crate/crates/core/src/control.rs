//! Liquidation policies, inventory integration and stopping-time detection.
//!
//! Rates are held constant over each grid step, so the inventory between grid
//! points is exactly linear. The stopping time is located inside the crossing
//! step from that linear piece rather than snapped to the grid.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_form::example_control;
use crate::error::{invalid, Result, SmpError};
use crate::grid::TimeGrid;
use crate::market::MarketPath;

/// A feedback liquidation rate `pi(t, x, q) >= 0`.
pub trait ControlPolicy: Send + Sync {
    fn rate(&self, t: f64, x: f64, q: f64) -> f64;

    /// Upper bound of the admissible rates, when one is imposed.
    fn cap(&self) -> Option<f64> {
        None
    }

    /// Rate applied over the step `[t0, t1)` given the state at `t0`.
    ///
    /// Defaults to the left-endpoint value. Schedules that depend on time
    /// only may return their exact average so the inventory is exact.
    fn step_rate(&self, t0: f64, _t1: f64, x: f64, q: f64) -> f64 {
        self.rate(t0, x, q)
    }
}

/// The capped TWAP policy: `q / (T - t)` when feasible, `c_plus` otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwapCapped {
    pub horizon: f64,
    pub c_plus: f64,
}

impl ControlPolicy for TwapCapped {
    fn rate(&self, t: f64, _x: f64, q: f64) -> f64 {
        example_control(t, q, self.horizon, self.c_plus)
    }
    fn cap(&self) -> Option<f64> {
        Some(self.c_plus)
    }
}

pub fn twap_capped_policy(horizon: f64, c_plus: f64) -> Result<TwapCapped> {
    if !(c_plus > 0.0) || !c_plus.is_finite() {
        return Err(invalid(
            "c_plus",
            format!("{c_plus} must be positive and finite"),
        ));
    }
    Ok(TwapCapped { horizon, c_plus })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantRate {
    pub rate: f64,
    pub cap: Option<f64>,
}

impl ControlPolicy for ConstantRate {
    fn rate(&self, _t: f64, _x: f64, _q: f64) -> f64 {
        self.rate
    }
    fn cap(&self) -> Option<f64> {
        self.cap
    }
}

/// Deterministic schedule `max(0, level + slope * t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub level: f64,
    pub slope: f64,
    pub cap: Option<f64>,
}

impl LinearSchedule {
    /// The schedule `T - t`.
    pub fn time_to_horizon(horizon: f64) -> Self {
        Self {
            level: horizon,
            slope: -1.0,
            cap: None,
        }
    }
}

impl ControlPolicy for LinearSchedule {
    fn rate(&self, t: f64, _x: f64, _q: f64) -> f64 {
        (self.level + self.slope * t).max(0.0)
    }
    fn cap(&self) -> Option<f64> {
        self.cap
    }
    fn step_rate(&self, t0: f64, t1: f64, _x: f64, _q: f64) -> f64 {
        // Average of the positive part of a linear function over [t0, t1].
        let f0 = self.level + self.slope * t0;
        let f1 = self.level + self.slope * t1;
        let integral = if f0 >= 0.0 && f1 >= 0.0 {
            0.5 * (f0 + f1) * (t1 - t0)
        } else if f0 <= 0.0 && f1 <= 0.0 {
            0.0
        } else {
            let root = -self.level / self.slope;
            if f0 > 0.0 {
                0.5 * f0 * (root - t0)
            } else {
                0.5 * f1 * (t1 - root)
            }
        };
        integral / (t1 - t0)
    }
}

/// Price-sensitive policy `min(kappa * x, cap)`, floored at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceProportional {
    pub kappa: f64,
    pub cap: f64,
}

impl ControlPolicy for PriceProportional {
    fn rate(&self, _t: f64, x: f64, _q: f64) -> f64 {
        (self.kappa * x).clamp(0.0, self.cap)
    }
    fn cap(&self) -> Option<f64> {
        Some(self.cap)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Depleted,
    Horizon,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Depleted => "depleted",
            StopReason::Horizon => "horizon",
        }
    }
}

/// One controlled path: step rates, inventory at grid points and the stop.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlledPath {
    /// Rate held on `[t_k, t_{k+1})`; zero on steps after the stop.
    pub rates: Vec<f64>,
    /// Inventory at grid points, clamped to zero after the stop.
    pub q: Vec<f64>,
    pub tau: f64,
    /// Last grid index at or before `tau`.
    pub stop_index: usize,
    pub stop_reason: StopReason,
}

impl ControlledPath {
    pub fn q0(&self) -> f64 {
        self.q[0]
    }

    /// Exact inventory at time `r` (linear within each step up to the stop).
    pub fn q_at(&self, grid: &TimeGrid, r: f64) -> f64 {
        if r <= grid.t0() {
            return self.q[0];
        }
        if r >= self.tau {
            return self.q_at_tau();
        }
        let k = grid.step_containing(r);
        (self.q[k] - self.rates[k] * (r - grid.time(k))).max(0.0)
    }

    /// Inventory at the stopping time: zero if depleted, `Q_T` otherwise.
    pub fn q_at_tau(&self) -> f64 {
        match self.stop_reason {
            StopReason::Depleted => 0.0,
            StopReason::Horizon => *self.q.last().unwrap(),
        }
    }

    /// Rate in force at time `r` (zero from the stop onwards).
    pub fn rate_at(&self, grid: &TimeGrid, r: f64) -> f64 {
        if r >= self.tau || r < grid.t0() {
            return 0.0;
        }
        self.rates[grid.step_containing(r)]
    }

    /// Liquidated volume over `[a, b]`, integrated exactly.
    pub fn volume(&self, grid: &TimeGrid, a: f64, b: f64) -> f64 {
        self.q_at(grid, a) - self.q_at(grid, b)
    }

    /// First time `r >= from` at which the inventory is at or below `level`
    /// (`level >= 0`), or `None` if that does not happen by the stop.
    pub fn hitting_time(&self, grid: &TimeGrid, level: f64, from: f64) -> Option<f64> {
        if self.q_at(grid, from) <= level {
            return Some(from);
        }
        if self.q_at_tau() > level {
            return None;
        }
        // The inventory is nonincreasing, so the first grid point at or below
        // the level closes the crossing step.
        let k0 = grid.step_containing(from);
        let hi = (self.stop_index + 1).min(grid.n_steps());
        let j = k0 + 1 + self.q[k0 + 1..=hi].partition_point(|&v| v > level);
        let step = (j - 1).min(grid.n_steps() - 1);
        let (ta, qa) = if step == k0 {
            (from, self.q_at(grid, from))
        } else {
            (grid.time(step), self.q[step])
        };
        let rate = self.rates[step];
        let hit = if rate > 0.0 {
            ta + (qa - level) / rate
        } else {
            ta
        };
        Some(hit.clamp(from, self.tau))
    }
}

fn check_rate(rate: f64, cap: Option<f64>, path: usize, step: usize) -> Result<()> {
    let over_cap = cap.is_some_and(|c| rate > c * (1.0 + 1e-12));
    if !rate.is_finite() || rate < 0.0 || over_cap {
        return Err(SmpError::InvalidRate { path, step, rate });
    }
    Ok(())
}

/// Integrates the inventory of one path under `policy` from `q0`.
pub fn evaluate_path(
    policy: &dyn ControlPolicy,
    grid: &TimeGrid,
    xs: &[f64],
    q0: f64,
    path: usize,
) -> Result<ControlledPath> {
    let cap = policy.cap();
    integrate_rates(grid, q0, |k, q| {
        let c = policy.step_rate(grid.time(k), grid.time(k + 1), xs[k], q);
        check_rate(c, cap, path, k)?;
        Ok(c)
    })
}

/// Left-endpoint inventory integration with sub-step stop location.
///
/// `rate(k, q_k)` supplies the rate held on step `k` given the (clamped)
/// inventory at its left end; it is not called after the stop.
pub fn integrate_rates(
    grid: &TimeGrid,
    q0: f64,
    rate: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<ControlledPath> {
    integrate_rates_with_tolerance(grid, q0, 0.0, rate)
}

/// As [`integrate_rates`], treating an inventory at or below `depleted_below`
/// at the end of a step as exhausted within that step.
pub fn integrate_rates_with_tolerance(
    grid: &TimeGrid,
    q0: f64,
    depleted_below: f64,
    mut rate: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<ControlledPath> {
    if !(q0 > 0.0) || !q0.is_finite() {
        return Err(invalid("q0", format!("{q0} must be positive")));
    }
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut rates = vec![0.0; n];
    let mut q = vec![0.0; n + 1];
    q[0] = q0;
    let horizon_stop = |rates, q| ControlledPath {
        rates,
        q,
        tau: grid.horizon(),
        stop_index: n,
        stop_reason: StopReason::Horizon,
    };
    for k in 0..n {
        let c = rate(k, q[k])?;
        rates[k] = c;
        let next = q[k] - c * dt;
        if next > depleted_below {
            q[k + 1] = next;
            continue;
        }
        let (tau, stop_index) = if next == 0.0 || c <= 0.0 {
            (grid.time(k + 1), k + 1)
        } else {
            ((grid.time(k) + q[k] / c).min(grid.time(k + 1)), k)
        };
        if tau >= grid.horizon() - grid.snap_tolerance() {
            return Ok(horizon_stop(rates, q));
        }
        return Ok(ControlledPath {
            rates,
            q,
            tau,
            stop_index,
            stop_reason: StopReason::Depleted,
        });
    }
    Ok(horizon_stop(rates, q))
}

/// Realised rates of a batch of paths, zero after each path's stop.
#[derive(Clone, Debug)]
pub struct ControlTrajectory {
    pub grid: TimeGrid,
    pub n_paths: usize,
    rates: Vec<f64>,
}

impl ControlTrajectory {
    pub fn path(&self, i: usize) -> &[f64] {
        let n = self.grid.n_steps();
        &self.rates[i * n..(i + 1) * n]
    }
}

/// Inventories, stopping times and stop reasons of a batch of paths.
#[derive(Clone, Debug)]
pub struct InventoryTrajectory {
    pub grid: TimeGrid,
    pub q0: f64,
    pub n_paths: usize,
    q: Vec<f64>,
    pub tau: Vec<f64>,
    pub stop_index: Vec<usize>,
    pub stop_reason: Vec<StopReason>,
}

impl InventoryTrajectory {
    pub fn path(&self, i: usize) -> &[f64] {
        let n = self.grid.n_points();
        &self.q[i * n..(i + 1) * n]
    }
}

/// Reassembles the per-path view of path `i`.
pub fn controlled_path(
    control: &ControlTrajectory,
    inv: &InventoryTrajectory,
    i: usize,
) -> ControlledPath {
    ControlledPath {
        rates: control.path(i).to_vec(),
        q: inv.path(i).to_vec(),
        tau: inv.tau[i],
        stop_index: inv.stop_index[i],
        stop_reason: inv.stop_reason[i],
    }
}

/// Evaluates `policy` on every path of `market`.
///
/// Diverged market paths are rejected: their inventory is undefined.
pub fn evaluate_policy(
    policy: &dyn ControlPolicy,
    market: &MarketPath,
    q0: f64,
) -> Result<(ControlTrajectory, InventoryTrajectory)> {
    if let Some(i) = (0..market.n_paths).find(|&i| market.is_diverged(i)) {
        return Err(SmpError::DivergedPath {
            path: i,
            step: market.diverged[i].unwrap(),
        });
    }
    let grid = market.grid;
    let paths: Vec<ControlledPath> = (0..market.n_paths)
        .into_par_iter()
        .map(|i| evaluate_path(policy, &grid, market.path(i), q0, i))
        .collect::<Result<_>>()?;
    Ok(assemble(grid, q0, paths))
}

pub(crate) fn assemble(
    grid: TimeGrid,
    q0: f64,
    paths: Vec<ControlledPath>,
) -> (ControlTrajectory, InventoryTrajectory) {
    let n_paths = paths.len();
    let mut rates = Vec::with_capacity(n_paths * grid.n_steps());
    let mut q = Vec::with_capacity(n_paths * grid.n_points());
    let mut tau = Vec::with_capacity(n_paths);
    let mut stop_index = Vec::with_capacity(n_paths);
    let mut stop_reason = Vec::with_capacity(n_paths);
    for p in paths {
        rates.extend_from_slice(&p.rates);
        q.extend_from_slice(&p.q);
        tau.push(p.tau);
        stop_index.push(p.stop_index);
        stop_reason.push(p.stop_reason);
    }
    (
        ControlTrajectory {
            grid,
            n_paths,
            rates,
        },
        InventoryTrajectory {
            grid,
            q0,
            n_paths,
            q,
            tau,
            stop_index,
            stop_reason,
        },
    )
}

/// Writes `path_id, step, t, rate, q, tau, stop_reason`; the rate column is
/// the rate held from that grid point (zero at the final point).
pub fn write_trajectories_csv<W: Write>(
    control: &ControlTrajectory,
    inv: &InventoryTrajectory,
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "path_id,step,t,rate,q,tau,stop_reason")?;
    let n = control.grid.n_steps();
    for i in 0..inv.n_paths {
        let rates = control.path(i);
        let q = inv.path(i);
        for k in 0..=n {
            let rate = if k < n { rates[k] } else { 0.0 };
            writeln!(
                out,
                "{i},{k},{},{rate},{},{},{}",
                control.grid.time(k),
                q[k],
                inv.tau[i],
                inv.stop_reason[i].as_str()
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn constant_rate_depletes_at_half_horizon() {
        let g = grid(1000);
        let xs = vec![1.0; 1001];
        let p = evaluate_path(
            &ConstantRate {
                rate: 2.0,
                cap: None,
            },
            &g,
            &xs,
            1.0,
            0,
        )
        .unwrap();
        assert_eq!(p.stop_reason, StopReason::Depleted);
        assert!((p.tau - 0.5).abs() < 1e-12);
        assert!(p.rates[p.stop_index + 1..].iter().all(|&r| r == 0.0));
        assert!(p.q[p.stop_index + 1..].iter().all(|&q| q == 0.0));
        assert_eq!(p.q_at(&g, p.tau), 0.0);
    }

    #[test]
    fn crossing_inside_a_step_is_interpolated() {
        let g = grid(10);
        let xs = vec![1.0; 11];
        let p = evaluate_path(
            &ConstantRate {
                rate: 1.0,
                cap: None,
            },
            &g,
            &xs,
            0.55,
            0,
        )
        .unwrap();
        assert!((p.tau - 0.55).abs() < 1e-12);
        assert_eq!(p.stop_index, 5);
        assert_eq!(p.q[6], 0.0);
        assert!((p.q_at(&g, 0.52) - 0.03).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_runs_to_horizon() {
        let g = grid(100);
        let xs = vec![1.0; 101];
        let p = evaluate_path(
            &ConstantRate {
                rate: 0.0,
                cap: None,
            },
            &g,
            &xs,
            0.7,
            0,
        )
        .unwrap();
        assert_eq!(p.stop_reason, StopReason::Horizon);
        assert_eq!(p.tau, 1.0);
        assert!(p.q.iter().all(|&q| q == 0.7));
    }

    #[test]
    fn twap_inventory_is_linear() {
        let g = grid(1000);
        let xs = vec![1.0; 1001];
        let policy = twap_capped_policy(1.0, 2.0).unwrap();
        let p = evaluate_path(&policy, &g, &xs, 0.5, 0).unwrap();
        assert_eq!(p.tau, 1.0);
        assert_eq!(p.stop_reason, StopReason::Horizon);
        for (k, q) in p.q.iter().enumerate() {
            let exact = 0.5 * (1.0 - g.time(k));
            assert!((q - exact).abs() <= 10.0 * f64::EPSILON * 0.5, "k={k}");
        }
        assert!(p.q_at_tau().abs() < 1e-3 * 0.5);
    }

    #[test]
    fn twap_matches_scalar_core() {
        let policy = twap_capped_policy(1.0, 2.0).unwrap();
        for (t, q) in [(0.0, 0.5), (0.0, 3.0), (0.5, 1.0), (0.9, 0.2), (0.99, 0.7)] {
            assert_eq!(
                policy.rate(t, 1.0, q).to_bits(),
                example_control(t, q, 1.0, 2.0).to_bits()
            );
        }
        assert_eq!(policy.rate(0.0, 1.0, 0.5), 0.5);
        assert_eq!(policy.rate(0.0, 1.0, 3.0), 2.0);
        assert_eq!(policy.rate(0.5, 1.0, 1.0), 2.0);
        assert!(twap_capped_policy(1.0, 0.0).is_err());
    }

    #[test]
    fn exact_zero_at_grid_point_counts_as_depleted() {
        let g = grid(4);
        let xs = vec![1.0; 5];
        let p = evaluate_path(
            &ConstantRate {
                rate: 2.0,
                cap: None,
            },
            &g,
            &xs,
            1.0,
            0,
        )
        .unwrap();
        assert_eq!(p.stop_reason, StopReason::Depleted);
        assert_eq!(p.tau, 0.5);
        assert_eq!(p.stop_index, 2);
    }

    #[test]
    fn bad_rates_are_hard_errors() {
        let g = grid(4);
        let xs = vec![1.0; 5];
        let err = evaluate_path(
            &ConstantRate {
                rate: -1.0,
                cap: None,
            },
            &g,
            &xs,
            1.0,
            7,
        )
        .unwrap_err();
        assert_eq!(
            err,
            SmpError::InvalidRate {
                path: 7,
                step: 0,
                rate: -1.0
            }
        );
        let nan = evaluate_path(
            &ConstantRate {
                rate: f64::NAN,
                cap: None,
            },
            &g,
            &xs,
            1.0,
            0,
        );
        assert!(nan.is_err());
        let over = evaluate_path(
            &ConstantRate {
                rate: 3.0,
                cap: Some(2.0),
            },
            &g,
            &xs,
            1.0,
            0,
        );
        assert!(over.is_err());
    }

    #[test]
    fn linear_schedule_step_average_is_exact() {
        let s = LinearSchedule::time_to_horizon(1.0);
        let g = grid(7);
        let xs = vec![1.0; 8];
        let p = evaluate_path(&s, &g, &xs, 0.5, 0).unwrap();
        for (k, q) in p.q.iter().enumerate() {
            let t = g.time(k);
            assert!((q - 0.5 * (1.0 - t) * (1.0 - t)).abs() < 1e-14, "k={k}");
        }
        let up = LinearSchedule {
            level: -0.5,
            slope: 1.0,
            cap: None,
        };
        assert!((up.step_rate(0.0, 1.0, 1.0, 1.0) - 0.125).abs() < 1e-15);
        assert!((up.step_rate(0.5, 1.0, 1.0, 1.0) - 0.25).abs() < 1e-15);
        assert_eq!(up.step_rate(0.0, 0.5, 1.0, 1.0), 0.0);
    }

    #[test]
    fn hitting_time_inverts_inventory() {
        let g = grid(100);
        let xs = vec![1.0; 101];
        let p = evaluate_path(&LinearSchedule::time_to_horizon(1.0), &g, &xs, 0.5, 0).unwrap();
        for level in [0.4, 0.2, 0.1, 0.01] {
            let r = p.hitting_time(&g, level, 0.0).unwrap();
            assert!((p.q_at(&g, r) - level).abs() < 1e-12);
            assert!(p.q_at(&g, r - 1e-6) > level);
        }
        assert_eq!(p.hitting_time(&g, 0.6, 0.3), Some(0.3));
        let flat = evaluate_path(
            &ConstantRate {
                rate: 0.1,
                cap: None,
            },
            &g,
            &xs,
            0.5,
            0,
        )
        .unwrap();
        assert_eq!(flat.hitting_time(&g, 0.3, 0.0), None);
    }

    #[test]
    fn batch_evaluation_and_csv() {
        use crate::market::{generate_brownian, simulate_gbm_exact};
        let g = grid(20);
        let b = generate_brownian(g, 3, 1).unwrap();
        let m = simulate_gbm_exact(&g, 1.0, &b).unwrap();
        let policy = PriceProportional {
            kappa: 1.0,
            cap: 2.0,
        };
        let (c, inv) = evaluate_policy(&policy, &m, 0.4).unwrap();
        assert_eq!(inv.path(2)[0], 0.4);
        let again = evaluate_path(&policy, &g, m.path(1), 0.4, 1).unwrap();
        assert_eq!(controlled_path(&c, &inv, 1), again);
        let mut buf = Vec::new();
        write_trajectories_csv(&c, &inv, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 21);
    }
}

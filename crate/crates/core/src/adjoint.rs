//! Backward regression solver for the adjoint equation
//!
//! `-dY = ∂_q f(r, c_r, X_r, Q_r) dr - Z dW`, `Y_tau = ∂_q g(X_tau, Q_tau)`,
//!
//! on the random interval `[t0, tau]`, plus the auxiliary process `xi` of a
//! spike variation and the optional-stopping identity that links the two.
//!
//! Conditional expectations are least-squares projections onto a polynomial
//! basis in `(x, q)`, fitted across the paths still alive at each step.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ControlTrajectory, InventoryTrajectory, StopReason};
use crate::error::{invalid, Result, SmpError};
use crate::grid::TimeGrid;
use crate::market::MarketPath;
use crate::model::Model;
use crate::objective::MonteCarloEstimate;
use crate::perturbation::PerturbationSpec;
use crate::stats::mean_and_std_error;

/// Regression basis for the conditional expectations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Basis {
    /// All monomials `x^a q^b` with `a + b <= degree` in standardised inputs.
    Polynomial { degree: usize },
}

impl Default for Basis {
    fn default() -> Self {
        Basis::Polynomial { degree: 2 }
    }
}

impl Basis {
    pub fn size(&self) -> usize {
        match *self {
            Basis::Polynomial { degree } => (degree + 1) * (degree + 2) / 2,
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Basis::Polynomial { degree } => {
                format!(
                    "polynomial in (x, q) up to degree {degree}, {} functions",
                    self.size()
                )
            }
        }
    }

    fn eval(&self, x: f64, q: f64, out: &mut [f64]) {
        match *self {
            Basis::Polynomial { degree } => {
                let mut idx = 0;
                for total in 0..=degree {
                    for a in (0..=total).rev() {
                        out[idx] = x.powi(a as i32) * q.powi((total - a) as i32);
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Minimum number of alive paths for a regression step.
pub const MIN_ALIVE: usize = 10;

/// Relative pivot below which a basis column is dropped.
pub const PIVOT_TOL: f64 = 1e-10;

const CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub alive: usize,
    pub basis_used: usize,
    /// Step advanced by the driver alone for lack of alive paths.
    pub driver_only: bool,
    pub residual_mean: f64,
    pub residual_rms: f64,
}

#[derive(Clone, Debug)]
pub struct AdjointSolution {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub basis: Basis,
    /// Grid index at which each path's terminal condition is imposed.
    pub stop_step: Vec<usize>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub warnings: Vec<String>,
    y: Vec<f64>,
    z: Vec<f64>,
}

impl AdjointSolution {
    pub fn y(&self, i: usize) -> &[f64] {
        let n = self.grid.n_points();
        &self.y[i * n..(i + 1) * n]
    }

    /// `Z` on each step, zero from the stop step on.
    pub fn z(&self, i: usize) -> &[f64] {
        let n = self.grid.n_steps();
        &self.z[i * n..(i + 1) * n]
    }

    /// Mean of `Y` at grid index `k` over all paths.
    pub fn mean_y(&self, k: usize) -> f64 {
        mean_and_std_error(&(0..self.n_paths).map(|i| self.y(i)[k]).collect::<Vec<_>>()).0
    }

    pub fn max_abs_y(&self) -> f64 {
        self.y.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_z(&self) -> f64 {
        self.z.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Writes `path_id, step, t, alive, y, z` (`z` empty at the last point).
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "path_id,step,t,alive,y,z")?;
        let n = self.grid.n_steps();
        for i in 0..self.n_paths {
            let (y, z) = (self.y(i), self.z(i));
            for k in 0..=n {
                let alive = u8::from(k < self.stop_step[i]);
                let t = self.grid.time(k);
                if k < n {
                    writeln!(out, "{i},{k},{t},{alive},{},{}", y[k], z[k])?;
                } else {
                    writeln!(out, "{i},{k},{t},{alive},{},", y[k])?;
                }
            }
        }
        Ok(())
    }
}

/// Least-squares fit with greedy column dropping on small Cholesky pivots.
/// Returns coefficients (zero for dropped columns) and the kept count.
fn fit(gram: &[f64], rhs: &[f64], p: usize) -> (Vec<f64>, usize) {
    let mut l = vec![0.0; p * p];
    let mut kept = Vec::with_capacity(p);
    for j in 0..p {
        let scale = gram[j * p + j];
        let mut d = scale;
        let mut row = vec![0.0; p];
        for (a, &ka) in kept.iter().enumerate() {
            let mut s = gram[j * p + ka];
            for b in 0..a {
                s -= row[kept[b]] * l[ka * p + kept[b]];
            }
            row[ka] = s / l[ka * p + ka];
            d -= row[ka] * row[ka];
        }
        if scale > 0.0 && d > PIVOT_TOL * scale {
            for &ka in &kept {
                l[j * p + ka] = row[ka];
            }
            l[j * p + j] = d.sqrt();
            kept.push(j);
        }
    }
    // Forward then backward substitution on the kept columns.
    let mut u = vec![0.0; p];
    for (a, &ja) in kept.iter().enumerate() {
        let mut s = rhs[ja];
        for &jb in &kept[..a] {
            s -= l[ja * p + jb] * u[jb];
        }
        u[ja] = s / l[ja * p + ja];
    }
    let mut beta = vec![0.0; p];
    for a in (0..kept.len()).rev() {
        let ja = kept[a];
        let mut s = u[ja];
        for &jb in &kept[a + 1..] {
            s -= l[jb * p + ja] * beta[jb];
        }
        beta[ja] = s / l[ja * p + ja];
    }
    (beta, kept.len())
}

/// Sums `f(path)` elementwise over fixed-size chunks, in chunk order, so the
/// result does not depend on the number of worker threads.
fn chunked_sum(paths: &[usize], width: usize, f: impl Fn(usize, &mut [f64]) + Sync) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = paths
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; width];
            let mut buf = vec![0.0; width];
            for &i in chunk {
                f(i, &mut buf);
                for (a, b) in acc.iter_mut().zip(&buf) {
                    *a += b;
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for part in partials {
        for (a, b) in total.iter_mut().zip(part) {
            *a += b;
        }
    }
    total
}

pub fn solve_adjoint(
    model: &dyn Model,
    market: &MarketPath,
    inv: &InventoryTrajectory,
    control: &ControlTrajectory,
    basis: Basis,
) -> Result<AdjointSolution> {
    let grid = market.grid;
    if inv.grid != grid || control.grid != grid {
        return Err(SmpError::GridMismatch(
            "market, inventory and control must share one grid".into(),
        ));
    }
    if inv.n_paths != market.n_paths || control.n_paths != market.n_paths {
        return Err(invalid(
            "n_paths",
            "market and trajectories differ in path count",
        ));
    }
    if basis.size() == 0 {
        return Err(invalid("basis", "at least one function is required"));
    }
    if market.n_diverged() > 0 {
        return Err(invalid(
            "market",
            "diverged paths must be removed before solving",
        ));
    }
    let n = grid.n_steps();
    let np = grid.n_points();
    let n_paths = market.n_paths;
    let dt = grid.dt();
    let p = basis.size();

    let stop_step: Vec<usize> = (0..n_paths)
        .map(|i| match inv.stop_reason[i] {
            StopReason::Horizon => n,
            StopReason::Depleted => inv.stop_index[i],
        })
        .collect();

    let mut y = vec![0.0; n_paths * np];
    let mut z = vec![0.0; n_paths * n];
    // Terminal values, frozen from each stop step to the end of the grid.
    y.par_chunks_mut(np).enumerate().for_each(|(i, yi)| {
        let x_tau = grid.interpolate(market.path(i), inv.tau[i]);
        let q_tau = match inv.stop_reason[i] {
            StopReason::Depleted => 0.0,
            StopReason::Horizon => inv.path(i)[n],
        };
        let terminal = model.terminal_payoff_dq(x_tau, q_tau);
        yi[stop_step[i]..].fill(terminal);
    });

    let mut diagnostics = Vec::with_capacity(n);
    let mut truncated_steps = 0usize;
    let mut driver_steps = 0usize;
    let mut alive: Vec<usize> = (0..n_paths).collect();
    for k in (0..n).rev() {
        alive.retain(|&i| k < stop_step[i]);
        let driver = |i: usize| {
            model.running_payoff_dq(
                grid.time(k),
                control.path(i)[k],
                market.path(i)[k],
                inv.path(i)[k],
            )
        };
        if alive.len() < MIN_ALIVE {
            for &i in &alive {
                y[i * np + k] = y[i * np + k + 1] + driver(i) * dt;
            }
            if !alive.is_empty() {
                driver_steps += 1;
            }
            diagnostics.push(StepDiagnostics {
                step: k,
                alive: alive.len(),
                basis_used: 0,
                driver_only: true,
                residual_mean: 0.0,
                residual_rms: 0.0,
            });
            continue;
        }

        // Standardise the regressors over the alive paths.
        let moments = chunked_sum(&alive, 4, |i, out| {
            let (x, q) = (market.path(i)[k], inv.path(i)[k]);
            out.copy_from_slice(&[x, x * x, q, q * q]);
        });
        let m = alive.len() as f64;
        let (mx, mq) = (moments[0] / m, moments[2] / m);
        let sx = (moments[1] / m - mx * mx).max(0.0).sqrt();
        let sq = (moments[3] / m - mq * mq).max(0.0).sqrt();
        let sx = if sx > 1e-12 * (1.0 + mx.abs()) {
            sx
        } else {
            1.0
        };
        let sq = if sq > 1e-12 * (1.0 + mq.abs()) {
            sq
        } else {
            1.0
        };
        let features = |i: usize, phi: &mut [f64]| {
            let x = (market.path(i)[k] - mx) / sx;
            let q = (inv.path(i)[k] - mq) / sq;
            basis.eval(x, q, phi);
        };
        let dw = |i: usize| market.increments(i)[k];
        let y_next = |i: usize, y: &[f64]| y[i * np + k + 1];

        let yref = &y;
        // Y_k: project Y_{k+1} on the basis.
        let sums = chunked_sum(&alive, p * p + p, |i, out| {
            let mut phi = [0.0; 64];
            let phi = &mut phi[..p];
            features(i, phi);
            let target = y_next(i, yref);
            for a in 0..p {
                for b in 0..p {
                    out[a * p + b] = phi[a] * phi[b];
                }
                out[p * p + a] = phi[a] * target;
            }
        });
        let gram = &sums[..p * p];
        let (beta_y, used) = fit(gram, &sums[p * p..], p);
        if used < p {
            truncated_steps += 1;
        }
        let cond = |i: usize| {
            let mut phi = [0.0; 64];
            let phi = &mut phi[..p];
            features(i, phi);
            phi.iter().zip(&beta_y).map(|(a, b)| a * b).sum::<f64>()
        };
        // Z_k: project the martingale increment times dW / dt; using the
        // residual rather than Y_{k+1} itself removes the conditional mean,
        // which contributes nothing in expectation but adds noise.
        let zrhs = chunked_sum(&alive, p, |i, out| {
            let mut phi = [0.0; 64];
            let phi = &mut phi[..p];
            features(i, phi);
            let ztarget = (y_next(i, yref) - cond(i)) * dw(i) / dt;
            for a in 0..p {
                out[a] = phi[a] * ztarget;
            }
        });
        let (beta_z, _) = fit(gram, &zrhs, p);

        let updates: Vec<(f64, f64, f64)> = alive
            .par_iter()
            .map(|&i| {
                let mut phi = [0.0; 64];
                let phi = &mut phi[..p];
                features(i, phi);
                let c = phi.iter().zip(&beta_y).map(|(a, b)| a * b).sum::<f64>();
                let zval = phi.iter().zip(&beta_z).map(|(a, b)| a * b).sum::<f64>();
                let resid = y_next(i, yref) - c;
                (c + driver(i) * dt, zval, resid)
            })
            .collect();
        let mut rsum = 0.0;
        let mut rsq = 0.0;
        for (&i, &(yk, zk, r)) in alive.iter().zip(&updates) {
            y[i * np + k] = yk;
            z[i * n + k] = zk;
            rsum += r;
            rsq += r * r;
        }
        diagnostics.push(StepDiagnostics {
            step: k,
            alive: alive.len(),
            basis_used: used,
            driver_only: false,
            residual_mean: rsum / m,
            residual_rms: (rsq / m).sqrt(),
        });
    }
    diagnostics.reverse();

    let mut warnings = Vec::new();
    if truncated_steps > 0 {
        warnings.push(format!(
            "basis truncated for rank deficiency on {truncated_steps} of {n} steps"
        ));
    }
    if driver_steps > 0 {
        warnings.push(format!(
            "{driver_steps} steps had fewer than {MIN_ALIVE} alive paths and used the driver only"
        ));
    }
    Ok(AdjointSolution {
        grid,
        n_paths,
        basis,
        stop_step,
        diagnostics,
        warnings,
        y,
        z,
    })
}

/// `xi` of a spike variation on grid points from the spike time on.
#[derive(Clone, Debug)]
pub struct XiTrajectory {
    pub spec: PerturbationSpec,
    /// Grid index of the spike time (which must be a grid point).
    pub start_step: usize,
    /// Base rate at the spike time on each path.
    pub c_t: Vec<f64>,
    /// Values at grid points `start_step..=n`, per path.
    values: Vec<Vec<f64>>,
    /// Value at each path's stopping time.
    pub at_tau: Vec<f64>,
}

impl XiTrajectory {
    pub fn path(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn initial(&self, i: usize) -> f64 {
        self.values[i][0]
    }
}

fn spike_step(grid: &TimeGrid, t: f64) -> Result<usize> {
    let k = ((t - grid.t0()) / grid.dt()).round() as usize;
    if k > grid.n_steps() || (grid.time(k) - t).abs() > 1e-9 * grid.dt().max(1.0) {
        return Err(invalid("t", format!("{t} is not a grid point")));
    }
    Ok(k)
}

/// `xi_r = f(t, c_bar, X_t, Q_t) - f(t, c_t, X_t, Q_t) - (c_bar - c_t) ∫_t^r ∂_q f ds`
/// with a left-endpoint quadrature; beyond the stop the integrand is zero.
pub fn xi_process(
    model: &dyn Model,
    spec: &PerturbationSpec,
    market: &MarketPath,
    inv: &InventoryTrajectory,
    control: &ControlTrajectory,
) -> Result<XiTrajectory> {
    let grid = market.grid;
    let k0 = spike_step(&grid, spec.t)?;
    let n = grid.n_steps();
    let dt = grid.dt();
    let per_path: Vec<(f64, Vec<f64>, f64)> = (0..market.n_paths)
        .into_par_iter()
        .map(|i| {
            let xs = market.path(i);
            let qs = inv.path(i);
            let rates = control.path(i);
            let tau = inv.tau[i];
            let c_t = if k0 < n && grid.time(k0) < tau {
                rates[k0]
            } else {
                0.0
            };
            let (x_t, q_t) = (xs[k0], qs[k0]);
            let xi0 = model.running_payoff(spec.t, spec.c_bar, x_t, q_t)
                - model.running_payoff(spec.t, c_t, x_t, q_t);
            let mut vals = Vec::with_capacity(n - k0 + 1);
            vals.push(xi0);
            let mut acc = xi0;
            let mut at_tau = if tau <= spec.t { xi0 } else { f64::NAN };
            for k in k0..n {
                let t_k = grid.time(k);
                let h = if t_k >= tau { 0.0 } else { (tau - t_k).min(dt) };
                let slope =
                    (spec.c_bar - c_t) * model.running_payoff_dq(t_k, rates[k], xs[k], qs[k]);
                if h > 0.0 && h < dt {
                    at_tau = acc - slope * h;
                }
                acc -= slope * h;
                vals.push(acc);
            }
            if at_tau.is_nan() {
                at_tau = acc;
            }
            (c_t, vals, at_tau)
        })
        .collect();
    let mut c_t = Vec::with_capacity(per_path.len());
    let mut values = Vec::with_capacity(per_path.len());
    let mut at_tau = Vec::with_capacity(per_path.len());
    for (c, v, a) in per_path {
        c_t.push(c);
        values.push(v);
        at_tau.push(a);
    }
    Ok(XiTrajectory {
        spec: *spec,
        start_step: k0,
        c_t,
        values,
        at_tau,
    })
}

/// Monte Carlo estimate of
/// `E[-(c_bar - c_t) ∂_q g(X_tau, Q_tau) + xi_tau] - E[-(c_bar - c_t) Y_t + xi_t]`.
pub fn verify_adjoint_identity(
    model: &dyn Model,
    solution: &AdjointSolution,
    xi: &XiTrajectory,
    market: &MarketPath,
    inv: &InventoryTrajectory,
) -> Result<MonteCarloEstimate> {
    let grid = solution.grid;
    let n = grid.n_steps();
    let c_bar = xi.spec.c_bar;
    let k0 = xi.start_step;
    let samples: Vec<Option<f64>> = (0..solution.n_paths)
        .map(|i| {
            let x_tau = grid.interpolate(market.path(i), inv.tau[i]);
            let q_tau = match inv.stop_reason[i] {
                StopReason::Depleted => 0.0,
                StopReason::Horizon => inv.path(i)[n],
            };
            let dc = c_bar - xi.c_t[i];
            let lhs = -dc * model.terminal_payoff_dq(x_tau, q_tau) + xi.at_tau[i];
            let rhs = -dc * solution.y(i)[k0] + xi.initial(i);
            Some(lhs - rhs)
        })
        .collect();
    MonteCarloEstimate::from_samples(&samples, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{evaluate_policy, ConstantRate, TwapCapped};
    use crate::market::{generate_brownian, simulate_gbm_exact};
    use crate::model::{ExampleModel, LinearDriverModel, MarkToMarketModel};

    fn setup(
        policy: &dyn crate::control::ControlPolicy,
        q0: f64,
        paths: usize,
    ) -> (MarketPath, ControlTrajectory, InventoryTrajectory) {
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let b = generate_brownian(g, paths, 11).unwrap();
        let m = simulate_gbm_exact(&g, 1.0, &b).unwrap();
        let (c, inv) = evaluate_policy(policy, &m, q0).unwrap();
        (m, c, inv)
    }

    #[test]
    fn basis_sizes() {
        assert_eq!(Basis::default().size(), 6);
        assert_eq!(Basis::Polynomial { degree: 0 }.size(), 1);
        let mut out = [0.0; 6];
        Basis::default().eval(2.0, 3.0, &mut out);
        assert_eq!(out, [1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn fit_drops_collinear_columns() {
        // Columns: 1, x, 2x (collinear).
        let data = [(0.0, 1.0), (1.0, 3.0), (2.0, 5.0), (3.0, 7.0)];
        let p = 3;
        let mut gram = vec![0.0; 9];
        let mut rhs = vec![0.0; 3];
        for &(x, y) in &data {
            let phi = [1.0, x, 2.0 * x];
            for a in 0..p {
                for b in 0..p {
                    gram[a * p + b] += phi[a] * phi[b];
                }
                rhs[a] += phi[a] * y;
            }
        }
        let (beta, used) = fit(&gram, &rhs, p);
        assert_eq!(used, 2);
        assert!((beta[0] - 1.0).abs() < 1e-12 && (beta[1] - 2.0).abs() < 1e-12);
        assert_eq!(beta[2], 0.0);
    }

    #[test]
    fn example_model_adjoint_vanishes() {
        let policy = TwapCapped {
            horizon: 1.0,
            c_plus: 2.0,
        };
        let (m, c, inv) = setup(&policy, 0.5, 500);
        let s = solve_adjoint(&ExampleModel, &m, &inv, &c, Basis::default()).unwrap();
        assert_eq!(s.max_abs_y(), 0.0);
        assert_eq!(s.max_abs_z(), 0.0);
    }

    #[test]
    fn linear_driver_adjoint_is_affine_in_time() {
        let policy = ConstantRate {
            rate: 0.1,
            cap: None,
        };
        let (m, c, inv) = setup(&policy, 1.0, 500);
        let model = LinearDriverModel { a: 0.3, b: 0.7 };
        let s = solve_adjoint(&model, &m, &inv, &c, Basis::default()).unwrap();
        for i in 0..500 {
            for (k, y) in s.y(i).iter().enumerate() {
                let exact = 0.7 + 0.3 * (1.0 - m.grid.time(k));
                assert!((y - exact).abs() < 1e-9);
            }
        }
        assert!(s.max_abs_z() < 1e-9);
    }

    #[test]
    fn martingale_terminal_gives_factor() {
        let policy = ConstantRate {
            rate: 0.1,
            cap: None,
        };
        let (m, c, inv) = setup(&policy, 1.0, 4000);
        let s = solve_adjoint(&MarkToMarketModel, &m, &inv, &c, Basis::default()).unwrap();
        // At the start every path shares X_0 = 1, so Y_0 is a sample mean of
        // the terminal factor.
        let terminal: Vec<f64> = (0..4000).map(|i| m.path(i)[20]).collect();
        let (_, se) = mean_and_std_error(&terminal);
        assert!(
            (s.y(0)[0] - 1.0).abs() < 3.0 * se,
            "{} vs 1 +- {se}",
            s.y(0)[0]
        );
        let rms = |s: &AdjointSolution, k: usize| {
            let acc: f64 = (0..4000).map(|i| (s.y(i)[k] - m.path(i)[k]).powi(2)).sum();
            (acc / 4000.0).sqrt()
        };
        assert!(rms(&s, 10) < 0.1);
        // With a basis that contains the exact projection the error shrinks.
        let linear = solve_adjoint(
            &MarkToMarketModel,
            &m,
            &inv,
            &c,
            Basis::Polynomial { degree: 1 },
        )
        .unwrap();
        assert!(rms(&linear, 10) < rms(&s, 10));
        // Terminal pinning.
        for i in 0..10 {
            assert_eq!(s.y(i)[20], m.path(i)[20]);
        }
    }

    #[test]
    fn depleting_paths_freeze_and_alive_counts_fall() {
        let policy = crate::control::PriceProportional {
            kappa: 1.0,
            cap: 2.0,
        };
        let (m, c, inv) = setup(&policy, 0.5, 2000);
        let model = LinearDriverModel { a: 0.3, b: 0.7 };
        let s = solve_adjoint(&model, &m, &inv, &c, Basis::default()).unwrap();
        for w in s.diagnostics.windows(2) {
            assert!(w[0].alive >= w[1].alive);
        }
        for i in 0..2000 {
            let k = s.stop_step[i];
            assert!(s.y(i)[k..].iter().all(|&v| v == 0.7));
            assert!(s.z(i)[k.min(20)..].iter().all(|&v| v == 0.0));
        }
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("path_id,step,t,alive,y,z\n"));
    }

    #[test]
    fn xi_closed_forms() {
        let policy = ConstantRate {
            rate: 0.1,
            cap: None,
        };
        let (m, c, inv) = setup(&policy, 1.0, 5);
        let spec = PerturbationSpec {
            t: 0.0,
            c_bar: 0.1,
            theta: 0.1,
        };
        let xi = xi_process(&ExampleModel, &spec, &m, &inv, &c).unwrap();
        assert!(xi.path(0).iter().all(|&v| v == 0.0));
        let spec = PerturbationSpec {
            t: 0.2,
            c_bar: 0.6,
            theta: 0.1,
        };
        let model = LinearDriverModel { a: 0.3, b: 0.7 };
        let xi = xi_process(&model, &spec, &m, &inv, &c).unwrap();
        let xi0 = 0.5 * m.path(1)[4];
        assert!((xi.initial(1) - xi0).abs() < 1e-12);
        for (j, v) in xi.path(1).iter().enumerate() {
            let r = 0.2 + j as f64 * 0.05;
            assert!((v - (xi0 - 0.5 * 0.3 * (r - 0.2))).abs() < 1e-12);
        }
        let flat = xi_process(&ExampleModel, &spec, &m, &inv, &c).unwrap();
        assert!(flat.path(2).iter().all(|&v| v == flat.initial(2)));
        let off_grid = PerturbationSpec { t: 0.21, ..spec };
        assert!(xi_process(&model, &off_grid, &m, &inv, &c).is_err());
    }

    #[test]
    fn identity_residuals() {
        let policy = ConstantRate {
            rate: 0.1,
            cap: None,
        };
        let (m, c, inv) = setup(&policy, 1.0, 2000);
        let spec = PerturbationSpec {
            t: 0.0,
            c_bar: 0.6,
            theta: 0.1,
        };
        for model in [
            &LinearDriverModel { a: 0.3, b: 0.7 } as &dyn Model,
            &ExampleModel,
            &MarkToMarketModel,
        ] {
            let s = solve_adjoint(model, &m, &inv, &c, Basis::default()).unwrap();
            let xi = xi_process(model, &spec, &m, &inv, &c).unwrap();
            let r = verify_adjoint_identity(model, &s, &xi, &m, &inv).unwrap();
            assert!(r.mean.abs() <= (3.0 * r.std_error).max(1e-9), "{r:?}");
        }
    }
}

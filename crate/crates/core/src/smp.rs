//! The maximum-principle check with its stopping-time correction.
//!
//! For a base control `c` the check compares, at a start state `(t, x, q)`
//! and a competing rate `c_bar`,
//!
//! `H(t, c_bar, x, q, Y_t) - H(t, c_t, x, q, Y_t) + G <= 0`,
//!
//! where `H(t, pi, x, q, y) = -pi y + f(t, pi, x, q)` and
//! `G = (c_bar - c_t) E[∂_q g(X_tau, Q_tau) 1_Lambda] - gbar - fbar`.
//! `gbar` and `fbar` are limits as the spike length goes to zero; they are
//! estimated on a halving ladder of spike lengths with common random numbers
//! and extrapolated to first order. The standard check omits `G`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_adjoint, Basis};
use crate::control::{evaluate_policy, ControlPolicy, ControlledPath, StopReason};
use crate::error::{invalid, Result};
use crate::grid::TimeGrid;
use crate::market::{generate_from, simulate_model, BrownianSource};
use crate::model::Model;
use crate::objective::{running_integral, McConfig, MonteCarloEstimate, PathSimulator, StartState};
use crate::perturbation::{perturb_path, PathPerturbation, PerturbationOutcome, PerturbationSpec};
use crate::stats::mean_and_std_error;

pub fn hamiltonian(model: &dyn Model, t: f64, pi: f64, x: f64, q: f64, y: f64) -> f64 {
    -pi * y + model.running_payoff(t, pi, x, q)
}

/// Spike lengths `theta0 * 2^-k`, `k = 0..levels`, with `theta0 = fraction * (T - t)`.
pub fn theta_ladder(t: f64, horizon: f64, fraction: f64, levels: usize) -> Vec<f64> {
    let theta0 = fraction * (horizon - t);
    (0..levels)
        .map(|k| theta0 * 0.5f64.powi(k as i32))
        .collect()
}

/// Largest fraction of excluded paths for which a limit is still reported reliable.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.2;

/// Relative tolerance for membership of `{Q_T = 0}`.
pub const TERMINAL_ZERO_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitEstimate {
    pub theta_sequence: Vec<f64>,
    pub raw_estimates: Vec<MonteCarloEstimate>,
    /// `2 F(theta_min) - F(2 theta_min)`, formed path by path.
    pub extrapolated: f64,
    pub extrapolated_se: f64,
    pub extrapolation_order: u32,
    /// The last two raw estimates agree within three combined standard errors.
    pub convergence_flag: bool,
    /// No level excluded more than [`MAX_EXCLUDED_FRACTION`] of the paths.
    pub reliable: bool,
}

impl LimitEstimate {
    /// Builds the estimate from per-level, per-path samples (`None` = excluded).
    pub fn from_samples(thetas: &[f64], samples: &[Vec<Option<f64>>], seed: u64) -> Result<Self> {
        if thetas.len() < 2 || samples.len() != thetas.len() {
            return Err(invalid(
                "theta_sequence",
                "need at least two levels with samples",
            ));
        }
        for w in thetas.windows(2) {
            if !((w[1] - 0.5 * w[0]).abs() <= 1e-12 * w[0]) {
                return Err(invalid("theta_sequence", "levels must halve"));
            }
        }
        let n_paths = samples[0].len();
        let mut raw = Vec::with_capacity(thetas.len());
        let mut reliable = true;
        for level in samples {
            let excluded = level.iter().filter(|s| s.is_none()).count();
            if excluded as f64 > MAX_EXCLUDED_FRACTION * n_paths as f64 {
                reliable = false;
            }
            match MonteCarloEstimate::from_samples(level, seed) {
                Ok(e) => raw.push(e),
                Err(_) => {
                    raw.push(MonteCarloEstimate {
                        mean: f64::NAN,
                        std_error: f64::NAN,
                        n_paths,
                        n_excluded: n_paths,
                        seed,
                    });
                    reliable = false;
                }
            }
        }
        let last = samples.len() - 1;
        let paired: Vec<f64> = samples[last]
            .iter()
            .zip(&samples[last - 1])
            .filter_map(|(fine, coarse)| Some(2.0 * (*fine)? - (*coarse)?))
            .collect();
        let (extrapolated, extrapolated_se) = if paired.is_empty() {
            reliable = false;
            (f64::NAN, f64::NAN)
        } else {
            mean_and_std_error(&paired)
        };
        let (a, b) = (&raw[last], &raw[last - 1]);
        let combined = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        let convergence_flag = (a.mean - b.mean).abs() <= 3.0 * combined + 1e-12;
        Ok(Self {
            theta_sequence: thetas.to_vec(),
            raw_estimates: raw,
            extrapolated,
            extrapolated_se,
            extrapolation_order: 1,
            convergence_flag,
            reliable,
        })
    }

    fn paired_samples(samples: &[Vec<Option<f64>>]) -> Vec<Option<f64>> {
        let last = samples.len() - 1;
        samples[last]
            .iter()
            .zip(&samples[last - 1])
            .map(|(fine, coarse)| Some(2.0 * (*fine)? - (*coarse)?))
            .collect()
    }
}

/// `(g(X_tau, Q^theta_{tau^theta}) - g(X_{tau^theta}, Q^theta_{tau^theta})) / theta`.
pub fn path_gbar(model: &dyn Model, grid: &TimeGrid, xs: &[f64], o: &PerturbationOutcome) -> f64 {
    let q = o.q_theta_terminal;
    let x_tau = grid.interpolate(xs, o.tau);
    let x_theta = grid.interpolate(xs, o.tau_theta);
    (model.terminal_payoff(x_tau, q) - model.terminal_payoff(x_theta, q)) / o.spec.theta
}

/// `sign(tau - tau^theta) / theta * ∫_{tau_min}^{tau_max} f(r, c_hat, X, Q_hat) dr`.
pub fn path_fbar(
    model: &dyn Model,
    grid: &TimeGrid,
    xs: &[f64],
    base: &ControlledPath,
    o: &PerturbationOutcome,
) -> f64 {
    if o.tau_max <= o.tau_min {
        return 0.0;
    }
    let integral = running_integral(
        model,
        grid,
        xs,
        o.tau_min,
        o.tau_max,
        &o.breakpoints(),
        |r| o.hat_rate_at(base, grid, r),
        |r| o.hat_q_at(base, grid, r),
    );
    (o.tau - o.tau_theta).signum() * integral / o.spec.theta
}

/// `1_Lambda` for a base path, given the base rate `c_t` at the spike time.
pub fn in_lambda(base: &ControlledPath, c_bar: f64, c_t: f64) -> bool {
    let depleted_by_horizon = base.q_at_tau() <= TERMINAL_ZERO_TOL * base.q0();
    let stopped_early = base.stop_reason == StopReason::Depleted;
    (depleted_by_horizon && c_bar >= c_t) || (stopped_early && c_bar < c_t)
}

/// Monte Carlo and limit settings shared by the estimators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmpConfig {
    pub horizon: f64,
    /// Grid step for the limit estimators (kept at most `theta_min / 50`).
    pub max_dt: f64,
    pub mc: McConfig,
    pub theta_fraction: f64,
    pub theta_levels: usize,
    /// Paths and steps of the regression that supplies `Y_t` when the model
    /// has no closed form.
    pub adjoint_paths: usize,
    pub adjoint_steps: usize,
    pub basis: Basis,
}

impl SmpConfig {
    pub fn new(horizon: f64, mc: McConfig) -> Self {
        Self {
            horizon,
            max_dt: f64::INFINITY,
            mc,
            theta_fraction: 0.1,
            theta_levels: 5,
            adjoint_paths: 10_000,
            adjoint_steps: 50,
            basis: Basis::default(),
        }
    }

    pub fn thetas(&self, t: f64) -> Vec<f64> {
        theta_ladder(t, self.horizon, self.theta_fraction, self.theta_levels)
    }

    /// Grid from `t` fine enough to resolve the smallest spike.
    pub fn grid(&self, t: f64) -> Result<TimeGrid> {
        let thetas = self.thetas(t);
        let theta_min = thetas.last().copied().unwrap_or(self.horizon - t);
        TimeGrid::with_max_step(t, self.horizon, self.max_dt.min(theta_min / 50.0))
    }
}

/// Per-path samples for one competing rate.
#[derive(Clone, Debug)]
pub struct CellSamples {
    pub c_bar: f64,
    /// `(c_bar - c_t) ∂_q g(X_tau, Q_tau) 1_Lambda` per path.
    pub indicator: Vec<Option<f64>>,
    /// `[level][path]`.
    pub gbar: Vec<Vec<Option<f64>>>,
    pub fbar: Vec<Vec<Option<f64>>>,
}

/// Simulates each path once and evaluates every `(c_bar, theta)` cell on it.
pub fn sweep(
    model: &dyn Model,
    policy: &dyn ControlPolicy,
    start: StartState,
    c_bars: &[f64],
    thetas: &[f64],
    grid: &TimeGrid,
    mc: &McConfig,
) -> Result<Vec<CellSamples>> {
    for &c_bar in c_bars {
        for &theta in thetas {
            PerturbationSpec {
                t: start.t,
                c_bar,
                theta,
            }
            .validate(grid, policy.cap())?;
        }
    }
    let sim = PathSimulator::new(model, policy, *grid, start, mc)?;
    let tol = 2.0 * grid.dt();
    type Cell = (Option<f64>, Vec<Option<(f64, f64)>>);
    let per_path: Vec<Vec<Cell>> = sim.map(mc.n_paths, |_, p| {
        let Some(p) = p else {
            return Ok(vec![(None, vec![None; thetas.len()]); c_bars.len()]);
        };
        let x_tau = grid.interpolate(&p.xs, p.base.tau);
        let dq_g = model.terminal_payoff_dq(x_tau, p.base.q_at_tau());
        let c_t = p.base.rate_at(grid, start.t);
        c_bars
            .iter()
            .map(|&c_bar| {
                let ind = if in_lambda(&p.base, c_bar, c_t) {
                    (c_bar - c_t) * dq_g
                } else {
                    0.0
                };
                let levels = thetas
                    .iter()
                    .map(|&theta| {
                        let spec = PerturbationSpec {
                            t: start.t,
                            c_bar,
                            theta,
                        };
                        Ok(match perturb_path(&spec, &p.base, grid, tol)? {
                            PathPerturbation::Valid(o) => Some((
                                path_gbar(model, grid, &p.xs, &o),
                                path_fbar(model, grid, &p.xs, &p.base, &o),
                            )),
                            PathPerturbation::Skipped(_) => None,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((Some(ind), levels))
            })
            .collect()
    })?;
    Ok(c_bars
        .iter()
        .enumerate()
        .map(|(ci, &c_bar)| CellSamples {
            c_bar,
            indicator: per_path.iter().map(|p| p[ci].0).collect(),
            gbar: (0..thetas.len())
                .map(|l| per_path.iter().map(|p| p[ci].1[l].map(|v| v.0)).collect())
                .collect(),
            fbar: (0..thetas.len())
                .map(|l| per_path.iter().map(|p| p[ci].1[l].map(|v| v.1)).collect())
                .collect(),
        })
        .collect())
}

fn single_cell(
    model: &dyn Model,
    policy: &dyn ControlPolicy,
    start: StartState,
    c_bar: f64,
    thetas: &[f64],
    grid: &TimeGrid,
    mc: &McConfig,
) -> Result<CellSamples> {
    Ok(sweep(model, policy, start, &[c_bar], thetas, grid, mc)?.remove(0))
}

pub fn estimate_gbar(
    model: &dyn Model,
    policy: &dyn ControlPolicy,
    start: StartState,
    c_bar: f64,
    thetas: &[f64],
    grid: &TimeGrid,
    mc: &McConfig,
) -> Result<LimitEstimate> {
    let cell = single_cell(model, policy, start, c_bar, thetas, grid, mc)?;
    LimitEstimate::from_samples(thetas, &cell.gbar, mc.seed)
}

pub fn estimate_fbar(
    model: &dyn Model,
    policy: &dyn ControlPolicy,
    start: StartState,
    c_bar: f64,
    thetas: &[f64],
    grid: &TimeGrid,
    mc: &McConfig,
) -> Result<LimitEstimate> {
    let cell = single_cell(model, policy, start, c_bar, thetas, grid, mc)?;
    LimitEstimate::from_samples(thetas, &cell.fbar, mc.seed)
}

/// `(c_bar - c_t) E[∂_q g(X_tau, Q_tau) 1_Lambda]` over base paths from `start`.
pub fn estimate_indicator_term(
    model: &dyn Model,
    policy: &dyn ControlPolicy,
    start: StartState,
    c_bar: f64,
    grid: &TimeGrid,
    mc: &McConfig,
) -> Result<MonteCarloEstimate> {
    let sim = PathSimulator::new(model, policy, *grid, start, mc)?;
    let samples = sim.map(mc.n_paths, |_, p| {
        Ok(p.map(|p| {
            let c_t = p.base.rate_at(grid, start.t);
            if in_lambda(&p.base, c_bar, c_t) {
                let x_tau = grid.interpolate(&p.xs, p.base.tau);
                (c_bar - c_t) * model.terminal_payoff_dq(x_tau, p.base.q_at_tau())
            } else {
                0.0
            }
        }))
    })?;
    MonteCarloEstimate::from_samples(&samples, mc.seed)
}

/// `Y_t` at a deterministic start, from the model's closed form when it has
/// one and from the regression solver otherwise.
pub fn adjoint_at_start(
    model: &dyn Model,
    policy: &dyn ControlPolicy,
    start: StartState,
    config: &SmpConfig,
) -> Result<f64> {
    if let Some(y) = model.closed_form_adjoint(start.t, start.x, start.q) {
        return Ok(y);
    }
    let grid = TimeGrid::new(start.t, config.horizon, config.adjoint_steps)?;
    let source = BrownianSource::new(grid, config.mc.seed).with_antithetic(config.mc.antithetic);
    let batch = generate_from(&source, config.adjoint_paths)?;
    let market = simulate_model(model, &grid, start.x, &batch)?;
    let (control, inv) = evaluate_policy(policy, &market, start.q)?;
    let sol = solve_adjoint(model, &market, &inv, &control, config.basis)?;
    Ok(sol.mean_y(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmpStatus {
    Pass,
    Fail,
    /// A limit estimate excluded too many paths to be trusted.
    Inconclusive,
}

impl SmpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SmpStatus::Pass => "pass",
            SmpStatus::Fail => "fail",
            SmpStatus::Inconclusive => "inconclusive",
        }
    }
}

/// Absolute slack added to `3 * margin_se` when judging a margin.
pub const MARGIN_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmpReport {
    pub t: f64,
    pub c_bar: f64,
    pub c_t: f64,
    pub x: f64,
    pub q: f64,
    pub y: f64,
    pub hamiltonian_diff: f64,
    pub indicator_term: MonteCarloEstimate,
    pub gbar: LimitEstimate,
    pub fbar: LimitEstimate,
    #[serde(rename = "G")]
    pub g_term: f64,
    pub margin: f64,
    pub margin_se: f64,
    pub status: SmpStatus,
}

impl SmpReport {
    pub fn passes(&self) -> bool {
        self.status == SmpStatus::Pass
    }
}

/// Standard-principle comparison (no stopping-time correction).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardReport {
    pub t: f64,
    pub c_bar: f64,
    pub c_t: f64,
    pub x: f64,
    pub q: f64,
    pub y: f64,
    pub margin: f64,
    pub margin_se: f64,
    pub status: SmpStatus,
}

fn judge(margin: f64, se: f64) -> SmpStatus {
    if margin <= 3.0 * se + MARGIN_FLOOR {
        SmpStatus::Pass
    } else {
        SmpStatus::Fail
    }
}

fn start_rate(policy: &dyn ControlPolicy, start: &StartState, grid: &TimeGrid) -> f64 {
    policy.step_rate(start.t, grid.time(1), start.x, start.q)
}

/// Runs the corrected check at each `(t, c_bar)`, starting afresh from
/// `(t, x, q)` for every `t`. Reports are ordered by `t`, then `c_bar`.
pub fn smp_check(
    model: &dyn Model,
    policy: &dyn ControlPolicy,
    x: f64,
    q: f64,
    t_grid: &[f64],
    c_bar_grid: &[f64],
    config: &SmpConfig,
) -> Result<Vec<SmpReport>> {
    if t_grid.is_empty() || c_bar_grid.is_empty() {
        return Err(invalid("grids", "t and c_bar grids must be non-empty"));
    }
    let mut reports = Vec::with_capacity(t_grid.len() * c_bar_grid.len());
    for &t in t_grid {
        let start = StartState { t, x, q };
        let grid = config.grid(t)?;
        let thetas = config.thetas(t);
        let y = adjoint_at_start(model, policy, start, config)?;
        let c_t = start_rate(policy, &start, &grid);
        let h_base = hamiltonian(model, t, c_t, x, q, y);
        let cells = sweep(model, policy, start, c_bar_grid, &thetas, &grid, &config.mc)?;
        for cell in cells {
            let seed = config.mc.seed;
            let indicator = MonteCarloEstimate::from_samples(&cell.indicator, seed)?;
            let gbar = LimitEstimate::from_samples(&thetas, &cell.gbar, seed)?;
            let fbar = LimitEstimate::from_samples(&thetas, &cell.fbar, seed)?;
            let h_diff = hamiltonian(model, t, cell.c_bar, x, q, y) - h_base;
            let g_term = indicator.mean - gbar.extrapolated - fbar.extrapolated;
            let margin = h_diff + g_term;
            let margin_se = combined_se(&cell);
            let status = if !gbar.reliable || !fbar.reliable {
                SmpStatus::Inconclusive
            } else {
                judge(margin, margin_se)
            };
            reports.push(SmpReport {
                t,
                c_bar: cell.c_bar,
                c_t,
                x,
                q,
                y,
                hamiltonian_diff: h_diff,
                indicator_term: indicator,
                gbar,
                fbar,
                g_term,
                margin,
                margin_se,
                status,
            });
        }
    }
    Ok(reports)
}

/// Standard error of the path-wise sum of the three random components of `G`,
/// over the paths on which all are defined.
fn combined_se(cell: &CellSamples) -> f64 {
    let g = LimitEstimate::paired_samples(&cell.gbar);
    let f = LimitEstimate::paired_samples(&cell.fbar);
    let joint: Vec<f64> = cell
        .indicator
        .iter()
        .zip(g.iter().zip(&f))
        .filter_map(|(i, (g, f))| Some((*i)? - (*g)? - (*f)?))
        .collect();
    if joint.len() < 2 {
        return f64::NAN;
    }
    mean_and_std_error(&joint).1
}

/// The uncorrected comparison `H(c_bar) - H(c_t) <= 0`.
pub fn standard_smp_check(
    model: &dyn Model,
    policy: &dyn ControlPolicy,
    x: f64,
    q: f64,
    t_grid: &[f64],
    c_bar_grid: &[f64],
    config: &SmpConfig,
) -> Result<Vec<StandardReport>> {
    if t_grid.is_empty() || c_bar_grid.is_empty() {
        return Err(invalid("grids", "t and c_bar grids must be non-empty"));
    }
    let mut reports = Vec::new();
    for &t in t_grid {
        let start = StartState { t, x, q };
        let grid = TimeGrid::new(t, config.horizon, config.adjoint_steps)?;
        let y = adjoint_at_start(model, policy, start, config)?;
        let c_t = start_rate(policy, &start, &grid);
        for &c_bar in c_bar_grid {
            let margin =
                hamiltonian(model, t, c_bar, x, q, y) - hamiltonian(model, t, c_t, x, q, y);
            reports.push(StandardReport {
                t,
                c_bar,
                c_t,
                x,
                q,
                y,
                margin,
                margin_se: 0.0,
                status: judge(margin, 0.0),
            });
        }
    }
    Ok(reports)
}

/// Writes `t, c_bar, c_t, h_diff, indicator, gbar, fbar, G, margin, margin_se, status`.
pub fn write_smp_csv<W: Write>(reports: &[SmpReport], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "t,c_bar,c_t,h_diff,indicator,gbar,fbar,G,margin,margin_se,status"
    )?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.c_bar,
            r.c_t,
            r.hamiltonian_diff,
            r.indicator_term.mean,
            r.gbar.extrapolated,
            r.fbar.extrapolated,
            r.g_term,
            r.margin,
            r.margin_se,
            r.status.as_str()
        )?;
    }
    Ok(())
}

/// Plot data: corrected and standard margins against `c_bar`, one block per `t`.
pub fn write_plot_data<W: Write>(
    reports: &[SmpReport],
    standard: &[StandardReport],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "t,c_bar,margin,margin_se,standard_margin")?;
    for r in reports {
        let std_margin = standard
            .iter()
            .find(|s| s.t == r.t && s.c_bar == r.c_bar)
            .map_or(f64::NAN, |s| s.margin);
        writeln!(
            out,
            "{},{},{},{},{}",
            r.t, r.c_bar, r.margin, r.margin_se, std_margin
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::TwapCapped;
    use crate::model::{ExampleModel, ModelSpec};

    const POLICY: TwapCapped = TwapCapped {
        horizon: 1.0,
        c_plus: 2.0,
    };

    #[test]
    fn hamiltonian_examples() {
        assert_eq!(hamiltonian(&ExampleModel, 0.0, 0.0, 2.0, 1.0, 5.0), 0.0);
        assert_eq!(hamiltonian(&ExampleModel, 0.0, 1.0, 2.0, 1.0, 0.0), 2.0);
        let pi = 1.5;
        let y = ExampleModel.running_payoff(0.0, pi, 2.0, 1.0) / pi;
        assert_eq!(hamiltonian(&ExampleModel, 0.0, pi, 2.0, 1.0, y), 0.0);
    }

    #[test]
    fn ladder_halves() {
        let l = theta_ladder(0.0, 1.0, 0.1, 5);
        assert_eq!(l, vec![0.1, 0.05, 0.025, 0.0125, 0.00625]);
    }

    #[test]
    fn limit_estimate_richardson_and_flags() {
        let thetas = [0.2, 0.1];
        // F(theta) = 1 + theta exactly: extrapolation recovers 1.
        let s = vec![vec![Some(1.2); 4], vec![Some(1.1); 4]];
        let e = LimitEstimate::from_samples(&thetas, &s, 0).unwrap();
        assert!((e.extrapolated - 1.0).abs() < 1e-12);
        assert!(e.reliable);
        assert!(!e.convergence_flag);
        let s = vec![vec![Some(1.0), None, None, Some(1.0)], vec![Some(1.0); 4]];
        let e = LimitEstimate::from_samples(&thetas, &s, 0).unwrap();
        assert!(!e.reliable);
        assert!(e.convergence_flag);
        assert!(LimitEstimate::from_samples(&[0.2, 0.15], &s, 0).is_err());
    }

    fn small_grid() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 2000).unwrap()
    }

    #[test]
    fn gbar_vanishes_without_terminal_payoff() {
        let start = StartState {
            t: 0.0,
            x: 1.0,
            q: 0.5,
        };
        let thetas = theta_ladder(0.0, 1.0, 0.1, 3);
        let e = estimate_gbar(
            &ExampleModel,
            &POLICY,
            start,
            1.5,
            &thetas,
            &small_grid(),
            &McConfig::new(200, 1),
        )
        .unwrap();
        assert_eq!(e.extrapolated, 0.0);
    }

    #[test]
    fn gbar_vanishes_for_price_free_terminal() {
        let spec = ModelSpec::zero().with_terminal(|_, q| q, |_, _| 1.0);
        let start = StartState {
            t: 0.0,
            x: 1.0,
            q: 0.5,
        };
        let thetas = theta_ladder(0.0, 1.0, 0.1, 3);
        let e = estimate_gbar(
            &spec,
            &POLICY,
            start,
            0.25,
            &thetas,
            &small_grid(),
            &McConfig::new(20, 1),
        )
        .unwrap();
        assert_eq!(e.extrapolated, 0.0);
        assert!(e.raw_estimates.iter().all(|r| r.mean == 0.0));
    }

    #[test]
    fn fbar_cases_on_small_sample() {
        let thetas = theta_ladder(0.0, 1.0, 0.1, 3);
        let mc = McConfig::new(2000, 5);
        let start = StartState {
            t: 0.0,
            x: 1.0,
            q: 0.5,
        };
        let up = estimate_fbar(
            &ExampleModel,
            &POLICY,
            start,
            1.5,
            &thetas,
            &small_grid(),
            &mc,
        )
        .unwrap();
        assert!(
            (up.extrapolated - 1.0).abs() < 4.0 * up.extrapolated_se + 0.02,
            "{up:?}"
        );
        let down = estimate_fbar(
            &ExampleModel,
            &POLICY,
            start,
            0.25,
            &thetas,
            &small_grid(),
            &mc,
        )
        .unwrap();
        assert_eq!(down.extrapolated, 0.0);
        let deep = StartState { q: 3.0, ..start };
        let capped = estimate_fbar(
            &ExampleModel,
            &POLICY,
            deep,
            1.0,
            &thetas,
            &small_grid(),
            &mc,
        )
        .unwrap();
        assert_eq!(capped.extrapolated, 0.0);
    }

    #[test]
    fn indicator_term_cases() {
        let start = StartState {
            t: 0.0,
            x: 1.0,
            q: 0.5,
        };
        let g = small_grid();
        let mc = McConfig::new(50, 2);
        let zero = estimate_indicator_term(&ExampleModel, &POLICY, start, 1.5, &g, &mc).unwrap();
        assert_eq!(zero.mean, 0.0);
        let unit = ModelSpec::zero()
            .with_dynamics(|_, _| 0.0, |_, x| x)
            .with_terminal(|_, q| q, |_, _| 1.0);
        let same = estimate_indicator_term(&unit, &POLICY, start, 0.5, &g, &mc).unwrap();
        assert_eq!(same.mean, 0.0);
        // A base that always runs out early, competing rate below it.
        let fast = crate::control::ConstantRate {
            rate: 2.0,
            cap: Some(2.0),
        };
        let e = estimate_indicator_term(&unit, &fast, start, 1.0, &g, &mc).unwrap();
        assert_eq!(e.mean, -1.0);
    }

    #[test]
    fn report_examples() {
        let mut cfg = SmpConfig::new(1.0, McConfig::new(2000, 3));
        cfg.theta_levels = 3;
        cfg.max_dt = 5e-4;
        let reports = smp_check(
            &ExampleModel,
            &POLICY,
            1.0,
            0.5,
            &[0.0],
            &[0.25, 0.5, 1.5],
            &cfg,
        )
        .unwrap();
        assert!((reports[0].margin + 0.25).abs() < 1e-12);
        assert_eq!(reports[1].margin, 0.0);
        assert!(reports[2].margin.abs() < 4.0 * reports[2].margin_se + 0.02);
        assert!(reports.iter().all(|r| r.passes()));
        let deep = smp_check(&ExampleModel, &POLICY, 1.0, 3.0, &[0.0], &[1.0], &cfg).unwrap();
        assert!((deep[0].margin + 1.0).abs() < 1e-12);
        let standard =
            standard_smp_check(&ExampleModel, &POLICY, 1.0, 0.5, &[0.0], &[0.5, 2.0], &cfg)
                .unwrap();
        assert_eq!(standard[0].margin, 0.0);
        assert_eq!(standard[1].margin, 1.5);
        assert_eq!(standard[1].status, SmpStatus::Fail);
        let mut buf = Vec::new();
        write_smp_csv(&reports, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }
}

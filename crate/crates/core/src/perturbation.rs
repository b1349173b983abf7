//! Spike variations of a realised control and their effect on the stop.
//!
//! Given a base path with step-constant rates, the variation trades at
//! `c_bar` on `[t, (t + theta) ∧ tau)`, returns to the base rate until `tau`
//! and, if it sold less than the base, sells the shortfall `-gamma_end` at
//! rate `-gamma_end / theta` from `tau` on. Because the base inventory is
//! piecewise linear, every quantity of the variation (its inventory, its
//! stopping time, the running maxima) has a closed form in terms of the base
//! path, which is what [`PerturbationOutcome`] evaluates.
//!
//! [`PerturbationOutcome::materialize`] instead re-integrates the varied
//! rates on the grid with the same rule as the base inventory, giving an
//! independent measurement of the perturbed stopping time.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::control::controlled_path;
use crate::control::{
    integrate_rates_with_tolerance, ControlTrajectory, ControlledPath, InventoryTrajectory,
};
use crate::error::{invalid, Result, SmpError};
use crate::grid::TimeGrid;

/// Spike of height `c_bar` and length `theta` starting at `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub t: f64,
    pub c_bar: f64,
    pub theta: f64,
}

impl PerturbationSpec {
    /// Checks the path-independent part of the admissibility window.
    pub fn validate(&self, grid: &TimeGrid, cap: Option<f64>) -> Result<()> {
        if !(self.t >= grid.t0() && self.t < grid.horizon()) {
            return Err(invalid("t", format!("{} must lie in [t0, T)", self.t)));
        }
        if !(self.c_bar >= 0.0) || !self.c_bar.is_finite() {
            return Err(invalid(
                "c_bar",
                format!("{} must be nonnegative", self.c_bar),
            ));
        }
        if let Some(c) = cap {
            if self.c_bar > c {
                return Err(invalid(
                    "c_bar",
                    format!("{} exceeds the cap {c}", self.c_bar),
                ));
            }
        }
        if !(self.theta > 0.0 && self.theta < grid.horizon() - self.t) {
            return Err(invalid(
                "theta",
                format!(
                    "{} must lie in (0, T - t = {})",
                    self.theta,
                    grid.horizon() - self.t
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Event {
    /// The variation stops strictly earlier than the base.
    E1,
    /// The variation stops strictly later than the base.
    E2,
    /// Both stop at the same time (within tolerance).
    E3,
}

impl Event {
    pub fn as_str(&self) -> &'static str {
        match self {
            Event::E1 => "E1",
            Event::E2 => "E2",
            Event::E3 => "E3",
        }
    }
}

pub fn classify_event(tau: f64, tau_theta: f64, tol: f64) -> Event {
    if (tau - tau_theta).abs() <= tol {
        Event::E3
    } else if tau_theta < tau {
        Event::E1
    } else {
        Event::E2
    }
}

/// Why a path was left out of a perturbation experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkipReason {
    /// The base path had already stopped at the spike time.
    AlreadyStopped,
    /// `theta >= q_t / c_bar`: the spike alone would exhaust the inventory.
    WindowTooLong,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PathPerturbation {
    Valid(PerturbationOutcome),
    Skipped(SkipReason),
}

impl PathPerturbation {
    pub fn valid(&self) -> Option<&PerturbationOutcome> {
        match self {
            PathPerturbation::Valid(o) => Some(o),
            PathPerturbation::Skipped(_) => None,
        }
    }
}

/// Closed-form description of the variation on one path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationOutcome {
    pub spec: PerturbationSpec,
    /// Base rate in force at `t`.
    pub c_t: f64,
    /// Base inventory at `t`.
    pub q_t: f64,
    /// End of the spike, `(t + theta) ∧ tau`.
    pub spike_end: f64,
    pub gamma_end: f64,
    /// Supremum of `|gamma|` over `[t, t + theta]`.
    pub gamma_sup: f64,
    pub tau: f64,
    /// Base inventory at the base stop.
    pub q_tau: f64,
    pub tau_theta: f64,
    /// Varied inventory at the varied stop.
    pub q_theta_terminal: f64,
    /// Rate applied from `tau` on (zero unless the spike undersold).
    pub makeup_rate: f64,
    pub event: Event,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl PerturbationOutcome {
    /// Varied inventory at time `r`.
    pub fn q_theta_at(&self, base: &ControlledPath, grid: &TimeGrid, r: f64) -> f64 {
        let t = self.spec.t;
        if r <= t {
            return base.q_at(grid, r);
        }
        if r >= self.tau_theta {
            return self.q_theta_terminal;
        }
        let q = if r <= self.spike_end {
            self.q_t - self.spec.c_bar * (r - t)
        } else if r < self.tau {
            base.q_at(grid, r) - self.gamma_end
        } else {
            self.q_tau - self.gamma_end - self.makeup_rate * (r - self.tau)
        };
        q.max(0.0)
    }

    /// Varied rate in force at time `r`, before accounting for its own stop.
    pub fn raw_rate_theta_at(&self, base: &ControlledPath, grid: &TimeGrid, r: f64) -> f64 {
        if r < self.spec.t {
            base.rate_at(grid, r)
        } else if r < self.spike_end {
            self.spec.c_bar
        } else if r < self.tau {
            base.rate_at(grid, r)
        } else {
            self.makeup_rate
        }
    }

    /// Varied rate in force at time `r` (zero from the varied stop on).
    pub fn rate_theta_at(&self, base: &ControlledPath, grid: &TimeGrid, r: f64) -> f64 {
        if r >= self.tau_theta {
            0.0
        } else {
            self.raw_rate_theta_at(base, grid, r)
        }
    }

    /// `max(Q_r, Q^theta_r)`.
    pub fn hat_q_at(&self, base: &ControlledPath, grid: &TimeGrid, r: f64) -> f64 {
        base.q_at(grid, r).max(self.q_theta_at(base, grid, r))
    }

    /// `max(c_r, c^theta_r)`.
    pub fn hat_rate_at(&self, base: &ControlledPath, grid: &TimeGrid, r: f64) -> f64 {
        base.rate_at(grid, r).max(self.rate_theta_at(base, grid, r))
    }

    /// Times at which either control may jump, besides the grid points.
    pub fn breakpoints(&self) -> [f64; 4] {
        [self.spec.t, self.spike_end, self.tau, self.tau_theta]
    }

    /// Step-averaged varied rates integrated on the grid by the base rule.
    ///
    /// The rates are not cut at the closed-form stop: the grid integration
    /// detects depletion on its own, treating roundoff-sized remainders as
    /// exhausted.
    pub fn materialize(&self, base: &ControlledPath, grid: &TimeGrid) -> Result<ControlledPath> {
        let cuts = [self.spec.t, self.spike_end, self.tau];
        let dust = GAMMA_ROUNDOFF * base.q0();
        integrate_rates_with_tolerance(grid, base.q0(), dust, |k, _q| {
            let (a, b) = (grid.time(k), grid.time(k + 1));
            let mut edges = [a, b, b, b, b];
            let mut len = 1;
            for c in cuts {
                if c > a && c < b {
                    edges[len] = c;
                    len += 1;
                }
            }
            edges[1..len].sort_by(f64::total_cmp);
            edges[len] = b;
            let volume: f64 = edges[..=len]
                .windows(2)
                .map(|w| self.raw_rate_theta_at(base, grid, 0.5 * (w[0] + w[1])) * (w[1] - w[0]))
                .sum();
            Ok((volume / (b - a)).max(0.0))
        })
    }
}

/// Relative size (to the initial inventory) below which `gamma_end` is zero.
pub const GAMMA_ROUNDOFF: f64 = 1e-12;

/// Builds the variation on one base path.
///
/// Path-independent validity (`theta < T - t`, cap) is checked by
/// [`PerturbationSpec::validate`]; here only the per-path window is checked.
pub fn perturb_path(
    spec: &PerturbationSpec,
    base: &ControlledPath,
    grid: &TimeGrid,
    tol: f64,
) -> Result<PathPerturbation> {
    let t = spec.t;
    if t >= base.tau {
        return Ok(PathPerturbation::Skipped(SkipReason::AlreadyStopped));
    }
    let q_t = base.q_at(grid, t);
    if spec.c_bar > 0.0 && spec.theta >= q_t / spec.c_bar {
        return Ok(PathPerturbation::Skipped(SkipReason::WindowTooLong));
    }
    let c_t = base.rate_at(grid, t);
    let tau = base.tau;
    let horizon = grid.horizon();
    let spike_end = (t + spec.theta).min(tau);
    let gamma_end = spec.c_bar * (spike_end - t) - base.volume(grid, t, spike_end);
    // A shortfall of any size delays the stop by a full theta, so volume
    // differences at roundoff level must count as no difference at all.
    let gamma_end = if gamma_end.abs() <= GAMMA_ROUNDOFF * base.q0() {
        0.0
    } else {
        gamma_end
    };
    let gamma_sup = gamma_sup(spec, base, grid, spike_end, gamma_end);
    let q_tau = base.q_at_tau();

    let (tau_theta, makeup_rate) = if gamma_end > 0.0 {
        let hit = base
            .hitting_time(grid, gamma_end, spike_end)
            .map_or(horizon, |r| {
                if r >= horizon - grid.snap_tolerance() {
                    horizon
                } else {
                    r
                }
            });
        if hit > tau {
            return Err(SmpError::Inconsistent(format!(
                "oversold spike stops after the base ({hit} > {tau})"
            )));
        }
        (hit, 0.0)
    } else if gamma_end < 0.0 {
        let makeup = -gamma_end / spec.theta;
        if tau < horizon {
            let end = tau + (q_tau - gamma_end) / makeup;
            let end = if end >= horizon - grid.snap_tolerance() {
                horizon
            } else {
                end
            };
            (end, makeup)
        } else {
            (horizon, makeup)
        }
    } else {
        (tau, 0.0)
    };
    if makeup_rate < 0.0 {
        return Err(SmpError::Inconsistent("negative makeup rate".into()));
    }

    let mut outcome = PerturbationOutcome {
        spec: *spec,
        c_t,
        q_t,
        spike_end,
        gamma_end,
        gamma_sup,
        tau,
        q_tau,
        tau_theta,
        q_theta_terminal: 0.0,
        makeup_rate,
        event: classify_event(tau, tau_theta, tol),
        tau_min: tau.min(tau_theta),
        tau_max: tau.max(tau_theta),
    };
    // Evaluate the varied inventory just before its stop, then take the limit.
    outcome.q_theta_terminal = {
        let mut probe = outcome;
        probe.tau_theta = f64::INFINITY;
        if tau_theta < horizon
            || (tau_theta == horizon && probe.q_theta_at(base, grid, horizon) <= 0.0)
        {
            0.0
        } else {
            probe.q_theta_at(base, grid, horizon)
        }
    };
    Ok(PathPerturbation::Valid(outcome))
}

fn gamma_sup(
    spec: &PerturbationSpec,
    base: &ControlledPath,
    grid: &TimeGrid,
    spike_end: f64,
    gamma_end: f64,
) -> f64 {
    // gamma is linear between grid points, so its extremes sit at grid
    // points or at the ends of the window.
    let gamma = |r: f64| spec.c_bar * (r - spec.t) - base.volume(grid, spec.t, r);
    let mut sup = gamma_end.abs();
    let mut k = grid.step_containing(spec.t) + 1;
    while k <= grid.n_steps() && grid.time(k) < spike_end {
        sup = sup.max(gamma(grid.time(k)).abs());
        k += 1;
    }
    sup
}

/// Samples of `gamma_r = ∫_t^{r ∧ tau} (c_bar - c_s) ds` for `r` in `[t, t + theta]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl GammaPath {
    pub fn gamma_end(&self) -> f64 {
        *self.values.last().unwrap()
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Evaluates `gamma` at `t`, every grid point inside the window and
/// `t + theta`, by direct summation of the rate differences.
pub fn gamma_process(
    spec: &PerturbationSpec,
    rates: &[f64],
    grid: &TimeGrid,
    tau: f64,
) -> GammaPath {
    let t = spec.t;
    let end = t + spec.theta;
    let mut times = vec![t];
    let mut k = grid.step_containing(t) + 1;
    while k <= grid.n_steps() && grid.time(k) < end {
        times.push(grid.time(k));
        k += 1;
    }
    times.push(end);
    let mut values = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    values.push(0.0);
    for w in times.windows(2) {
        let (a, b) = (w[0], w[1].min(tau));
        if b > a {
            let rate = if a < tau {
                rates[grid.step_containing(a)]
            } else {
                0.0
            };
            acc += (spec.c_bar - rate) * (b - a);
        }
        values.push(acc);
    }
    GammaPath { times, values }
}

/// Running maxima `Q_hat` at both stops and `c_hat` on `[tau_min, tau_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HatQuantities {
    pub q_hat_at_tau: f64,
    pub q_hat_at_tau_theta: f64,
    /// `(segment start, segment end, c_hat on the segment)`.
    pub c_hat: Vec<(f64, f64, f64)>,
}

pub fn hat_quantities(
    base: &ControlledPath,
    outcome: &PerturbationOutcome,
    grid: &TimeGrid,
) -> HatQuantities {
    let (lo, hi) = (outcome.tau_min, outcome.tau_max);
    let mut c_hat = Vec::new();
    if hi > lo {
        let mut edges = vec![lo];
        let mut k = grid.step_containing(lo) + 1;
        while k <= grid.n_steps() && grid.time(k) < hi {
            edges.push(grid.time(k));
            k += 1;
        }
        edges.extend(
            outcome
                .breakpoints()
                .iter()
                .copied()
                .filter(|&b| b > lo && b < hi),
        );
        edges.sort_by(f64::total_cmp);
        edges.dedup();
        edges.push(hi);
        for w in edges.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            c_hat.push((w[0], w[1], outcome.hat_rate_at(base, grid, mid)));
        }
    }
    HatQuantities {
        q_hat_at_tau: outcome.hat_q_at(base, grid, outcome.tau),
        q_hat_at_tau_theta: outcome.hat_q_at(base, grid, outcome.tau_theta),
        c_hat,
    }
}

/// Variations of every path in a batch plus their grid re-integration.
#[derive(Clone, Debug)]
pub struct PerturbationSet {
    pub spec: PerturbationSpec,
    pub tolerance: f64,
    pub paths: Vec<PathPerturbation>,
    /// Grid re-integration of each valid variation.
    pub materialized: Vec<Option<ControlledPath>>,
}

impl PerturbationSet {
    pub fn n_skipped(&self) -> usize {
        self.paths.iter().filter(|p| p.valid().is_none()).count()
    }

    pub fn count(&self, event: Event) -> usize {
        self.paths
            .iter()
            .filter_map(|p| p.valid())
            .filter(|o| o.event == event)
            .count()
    }

    /// Writes `path_id, event, gamma_end, tau, tau_theta, q_theta_terminal`;
    /// skipped paths carry the reason in the event column.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "path_id,event,gamma_end,tau,tau_theta,q_theta_terminal"
        )?;
        for (i, p) in self.paths.iter().enumerate() {
            match p {
                PathPerturbation::Valid(o) => writeln!(
                    out,
                    "{i},{},{},{},{},{}",
                    o.event.as_str(),
                    o.gamma_end,
                    o.tau,
                    o.tau_theta,
                    o.q_theta_terminal
                )?,
                PathPerturbation::Skipped(r) => writeln!(out, "{i},skipped:{r:?},,,,")?,
            }
        }
        Ok(())
    }
}

/// Applies the variation to every path of an evaluated batch.
///
/// `tol` defaults to twice the grid step when `None`.
pub fn perturb_control(
    spec: &PerturbationSpec,
    control: &ControlTrajectory,
    inv: &InventoryTrajectory,
    cap: Option<f64>,
    tol: Option<f64>,
) -> Result<PerturbationSet> {
    let grid = inv.grid;
    spec.validate(&grid, cap)?;
    let tol = tol.unwrap_or(2.0 * grid.dt());
    let mut paths = Vec::with_capacity(inv.n_paths);
    let mut materialized = Vec::with_capacity(inv.n_paths);
    for i in 0..inv.n_paths {
        let base = controlled_path(control, inv, i);
        let p = perturb_path(spec, &base, &grid, tol)?;
        materialized.push(match p.valid() {
            Some(o) => Some(o.materialize(&base, &grid)?),
            None => None,
        });
        paths.push(p);
    }
    Ok(PerturbationSet {
        spec: *spec,
        tolerance: tol,
        paths,
        materialized,
    })
}

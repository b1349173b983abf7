//! The acceptance suite: ten end-to-end checks against closed-form oracles
//! and structural properties, each reported as a single pass/fail outcome.
//!
//! Shared by the `acceptance` test target and the command-line `all` run.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_adjoint, verify_adjoint_identity, xi_process, Basis};
use crate::closed_form::{example_tau_theta, remark_counterexample};
use crate::control::{
    evaluate_path, evaluate_policy, ConstantRate, ControlPolicy, LinearSchedule, PriceProportional,
    TwapCapped,
};
use crate::error::Result;
use crate::grid::TimeGrid;
use crate::hjb::{solve_example_hjb, solve_example_hjb_with, HjbScheme};
use crate::market::{generate_brownian, simulate_gbm_exact};
use crate::model::{ExampleModel, LinearDriverModel, MarkToMarketModel, Model};
use crate::objective::{estimate_value, McConfig, PathSimulator, StartState};
use crate::perturbation::{gamma_process, perturb_path, Event, PathPerturbation, PerturbationSpec};
use crate::smp::{estimate_fbar, smp_check, standard_smp_check, theta_ladder, SmpConfig};
use crate::stats::mean_and_std_error;

const HORIZON: f64 = 1.0;
const C_PLUS: f64 = 2.0;
const TWAP: TwapCapped = TwapCapped {
    horizon: HORIZON,
    c_plus: C_PLUS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionOutcome {
    /// One-line summary, e.g. `[PASS] 3 stopping-time formulas: ...`.
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!(
            "[{tag}] {} {}: {} ({:.1}s)",
            self.id, self.name, self.detail, self.seconds
        )
    }
}

type Check = fn(u64) -> Result<(bool, String)>;

/// `(id, name, check)` for every criterion, in order.
pub fn criteria() -> Vec<(u32, &'static str, Check)> {
    vec![
        (1, "value function reproduction", value_function as Check),
        (2, "fbar limit", fbar_limit),
        (3, "stopping-time formulas", stopping_time_formulas),
        (4, "E2 identity", e2_identity),
        (5, "quotient divergence", quotient_divergence),
        (6, "corrected vs standard principle", smp_table),
        (7, "adjoint oracles", adjoint_oracles),
        (8, "adjoint identity", adjoint_identity),
        (9, "HJB oracle", hjb_oracle),
        (10, "perturbation properties", perturbation_properties),
    ]
}

/// Runs one criterion; configuration errors count as failures.
pub fn run(id: u32, seed: u64) -> Option<CriterionOutcome> {
    let (id, name, check) = criteria().into_iter().find(|c| c.0 == id)?;
    let clock = Instant::now();
    let (passed, detail) = match check(seed.wrapping_add(id as u64)) {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Some(CriterionOutcome {
        id,
        name: name.to_string(),
        passed,
        detail,
        seconds: clock.elapsed().as_secs_f64(),
    })
}

pub fn run_all(seed: u64) -> Vec<CriterionOutcome> {
    criteria().iter().filter_map(|c| run(c.0, seed)).collect()
}

fn value_function(seed: u64) -> Result<(bool, String)> {
    let grid = TimeGrid::new(0.0, HORIZON, 1000)?;
    let mc = McConfig::new(100_000, seed);
    let mut ok = true;
    let mut parts = Vec::new();
    for (q, target) in [(0.5, 0.5), (3.0, 2.0)] {
        let start = StartState { t: 0.0, x: 1.0, q };
        let e = estimate_value(&ExampleModel, &TWAP, start, &grid, &mc)?;
        ok &= e.within(target, 3.0);
        parts.push(format!(
            "q={q}: {:.5} ± {:.5} (exact {target})",
            e.mean, e.std_error
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn fbar_limit(seed: u64) -> Result<(bool, String)> {
    let thetas = theta_ladder(0.0, HORIZON, 0.1, 5);
    let grid = TimeGrid::with_max_step(0.0, HORIZON, thetas[4] / 50.0)?;
    let start = StartState {
        t: 0.0,
        x: 1.0,
        q: 0.5,
    };
    let main = estimate_fbar(
        &ExampleModel,
        &TWAP,
        start,
        1.5,
        &thetas,
        &grid,
        &McConfig::new(100_000, seed),
    )?;
    let rel = (main.extrapolated - 1.0).abs();
    let mut ok = rel <= 0.05 && main.reliable;
    let mut detail = format!(
        "c_bar=1.5: {:.4} ± {:.4} (5% band), dt={:.3e}",
        main.extrapolated,
        main.extrapolated_se,
        grid.dt()
    );
    let small = McConfig::new(10_000, seed);
    for (c_bar, q) in [(0.25, 0.5), (1.5, 3.0)] {
        let e = estimate_fbar(
            &ExampleModel,
            &TWAP,
            StartState { q, ..start },
            c_bar,
            &thetas,
            &grid,
            &small,
        )?;
        ok &= e.extrapolated.abs() <= 3.0 * e.extrapolated_se && e.reliable;
        detail.push_str(&format!(
            "; c_bar={c_bar}, q={q}: {:.2e} ± {:.2e}",
            e.extrapolated, e.extrapolated_se
        ));
    }
    Ok((ok, detail))
}

fn stopping_time_formulas(seed: u64) -> Result<(bool, String)> {
    let grid = TimeGrid::new(0.0, HORIZON, 1000)?;
    let dt = grid.dt();
    let theta = 0.1;
    let q0 = 0.5;
    let sim = PathSimulator::new(
        &ExampleModel,
        &TWAP,
        grid,
        StartState {
            t: 0.0,
            x: 1.0,
            q: q0,
        },
        &McConfig::new(10_000, seed),
    )?;
    let c_bars = [0.0, 0.25, 0.5, 1.0, 1.5, 2.0];
    let hits: Vec<Vec<bool>> = sim.map(10_000, |_, p| {
        let Some(p) = p else {
            return Ok(vec![false; c_bars.len()]);
        };
        c_bars
            .iter()
            .map(|&c_bar| {
                let spec = PerturbationSpec {
                    t: 0.0,
                    c_bar,
                    theta,
                };
                let expected = example_tau_theta(theta, c_bar, 0.0, q0, HORIZON, C_PLUS);
                Ok(match perturb_path(&spec, &p.base, &grid, 2.0 * dt)? {
                    PathPerturbation::Valid(o) => {
                        let measured = o.materialize(&p.base, &grid)?.tau;
                        (measured - expected).abs() <= 2.0 * dt
                    }
                    PathPerturbation::Skipped(_) => false,
                })
            })
            .collect()
    })?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (j, &c_bar) in c_bars.iter().enumerate() {
        let frac = hits.iter().filter(|h| h[j]).count() as f64 / hits.len() as f64;
        ok &= frac >= 0.99;
        parts.push(format!("c_bar={c_bar}: {:.2}%", 100.0 * frac));
    }
    Ok((
        ok,
        format!("paths within 2dt of the formula: {}", parts.join(", ")),
    ))
}

fn e2_identity(seed: u64) -> Result<(bool, String)> {
    let grid = TimeGrid::new(0.0, HORIZON, 1000)?;
    let dt = grid.dt();
    let policy = PriceProportional {
        kappa: 1.0,
        cap: C_PLUS,
    };
    let sim = PathSimulator::new(
        &ExampleModel,
        &policy,
        grid,
        StartState {
            t: 0.0,
            x: 1.0,
            q: 0.4,
        },
        &McConfig::new(10_000, seed),
    )?;
    let cells = [(0.0, 0.05), (0.0, 0.1), (0.5, 0.1), (0.2, 0.02)];
    let per_path: Vec<(usize, f64)> = sim.map(10_000, |_, p| {
        let Some(p) = p else { return Ok((0, 0.0)) };
        let mut count = 0;
        let mut worst = 0.0f64;
        for &(c_bar, theta) in &cells {
            let spec = PerturbationSpec {
                t: 0.0,
                c_bar,
                theta,
            };
            if let PathPerturbation::Valid(o) = perturb_path(&spec, &p.base, &grid, 2.0 * dt)? {
                let measured = o.materialize(&p.base, &grid)?;
                if o.event == Event::E2 && measured.tau < HORIZON {
                    count += 1;
                    worst = worst.max((measured.tau - (p.base.tau + theta)).abs());
                }
            }
        }
        Ok((count, worst))
    })?;
    let count: usize = per_path.iter().map(|p| p.0).sum();
    let worst = per_path.iter().fold(0.0f64, |m, p| m.max(p.1));
    let ok = count > 0 && worst <= 2.0 * dt;
    Ok((ok, format!("{count} E2 paths stopping before T; max |tau_theta - (tau + theta)| = {worst:.3e} (2dt = {:.1e})", 2.0 * dt)))
}

fn quotient_divergence(_seed: u64) -> Result<(bool, String)> {
    let c_bar = 2.0;
    let thetas = [0.04, 0.01, 0.0025];
    let grid = TimeGrid::with_max_step(0.0, HORIZON, thetas[2] / 50.0)?;
    let dt = grid.dt();
    let q0 = HORIZON * HORIZON / 2.0;
    let xs = vec![1.0; grid.n_points()];
    let base = evaluate_path(&LinearSchedule::time_to_horizon(HORIZON), &grid, &xs, q0, 0)?;
    let mut ok = true;
    let mut quotients = Vec::new();
    let mut parts = Vec::new();
    for theta in thetas {
        let (tau_exact, q_exact) = remark_counterexample(theta, c_bar, HORIZON)?;
        let spec = PerturbationSpec {
            t: 0.0,
            c_bar,
            theta,
        };
        let o = match perturb_path(&spec, &base, &grid, 2.0 * dt)? {
            PathPerturbation::Valid(o) => o,
            PathPerturbation::Skipped(r) => {
                return Ok((false, format!("theta={theta} skipped: {r:?}")))
            }
        };
        let tau_theta = o.materialize(&base, &grid)?.tau;
        let quotient = (tau_theta - base.tau) / theta;
        ok &= (tau_theta - tau_exact).abs() <= 2.0 * dt;
        ok &= ((quotient - q_exact) / q_exact).abs() <= 0.01;
        quotients.push(quotient);
        parts.push(format!("theta={theta}: tau_theta={tau_theta:.6} (exact {tau_exact:.6}), quotient={quotient:.4} (exact {q_exact:.4})"));
    }
    ok &= quotients.windows(2).all(|w| w[1] < w[0]);
    Ok((ok, parts.join("; ")))
}

fn smp_table(seed: u64) -> Result<(bool, String)> {
    let mut cfg = SmpConfig::new(HORIZON, McConfig::new(20_000, seed));
    cfg.max_dt = 1e-3;
    let c_bars: Vec<f64> = (0..=10).map(|k| k as f64 / 5.0).collect();
    let reports = smp_check(&ExampleModel, &TWAP, 1.0, 0.5, &[0.0], &c_bars, &cfg)?;
    let standard = standard_smp_check(&ExampleModel, &TWAP, 1.0, 0.5, &[0.0], &[C_PLUS], &cfg)?;
    let corrected_ok = reports.iter().all(|r| r.passes());
    let worst = reports
        .iter()
        .map(|r| r.margin - 3.0 * r.margin_se)
        .fold(f64::NEG_INFINITY, f64::max);
    let s = &standard[0];
    let standard_violated = (s.margin - 1.5).abs() <= 3.0 * s.margin_se + 1e-12 && s.margin > 0.0;
    let at_cap = reports.last().unwrap();
    Ok((
        corrected_ok && standard_violated,
        format!(
            "corrected: {} of {} pass (max margin - 3se = {worst:.3e}; at c_bar=2 margin {:.4} ± {:.4}); standard margin at c_bar=2: {:.4}",
            reports.iter().filter(|r| r.passes()).count(),
            reports.len(),
            at_cap.margin,
            at_cap.margin_se,
            s.margin
        ),
    ))
}

fn adjoint_oracles(seed: u64) -> Result<(bool, String)> {
    let grid = TimeGrid::new(0.0, HORIZON, 50)?;
    let batch = generate_brownian(grid, 100_000, seed)?;
    let market = simulate_gbm_exact(&grid, 1.0, &batch)?;

    let (c, inv) = evaluate_policy(&TWAP, &market, 0.5)?;
    let example = solve_adjoint(&ExampleModel, &market, &inv, &c, Basis::default())?;
    let max_y = example.max_abs_y();

    let slow = ConstantRate {
        rate: 0.1,
        cap: None,
    };
    let (c, inv) = evaluate_policy(&slow, &market, 1.0)?;
    let linear = LinearDriverModel { a: 0.3, b: 0.7 };
    let sol = solve_adjoint(&linear, &market, &inv, &c, Basis::default())?;
    let mut err = 0.0f64;
    for i in 0..sol.n_paths {
        for (k, y) in sol.y(i).iter().enumerate() {
            err = err.max((y - (linear.b + linear.a * (HORIZON - grid.time(k)))).abs());
        }
    }
    Ok((
        max_y == 0.0 && err < 1e-3,
        format!(
            "example max|Y| = {max_y:e}; linear driver max error = {err:.3e} (1e5 paths, 50 steps)"
        ),
    ))
}

fn adjoint_identity(seed: u64) -> Result<(bool, String)> {
    let grid = TimeGrid::new(0.0, HORIZON, 50)?;
    let batch = generate_brownian(grid, 20_000, seed)?;
    let market = simulate_gbm_exact(&grid, 1.0, &batch)?;
    let mut ok = true;
    let mut parts = Vec::new();
    let slow = ConstantRate {
        rate: 0.1,
        cap: None,
    };
    let cases: [(&str, &dyn Model, &dyn ControlPolicy, f64); 3] = [
        ("example", &ExampleModel, &TWAP, 0.5),
        (
            "linear driver",
            &LinearDriverModel { a: 0.3, b: 0.7 },
            &slow,
            1.0,
        ),
        ("mark-to-market", &MarkToMarketModel, &slow, 1.0),
    ];
    for (name, model, policy, q0) in cases {
        let (c, inv) = evaluate_policy(policy, &market, q0)?;
        let sol = solve_adjoint(model, &market, &inv, &c, Basis::default())?;
        for c_bar in [0.0, 1.5] {
            let spec = PerturbationSpec {
                t: 0.0,
                c_bar,
                theta: 0.1,
            };
            let xi = xi_process(model, &spec, &market, &inv, &c)?;
            let r = verify_adjoint_identity(model, &sol, &xi, &market, &inv)?;
            ok &= r.mean.abs() <= (3.0 * r.std_error).max(1e-9);
            parts.push(format!(
                "{name}, c_bar={c_bar}: {:.2e} ± {:.2e}",
                r.mean, r.std_error
            ));
        }
    }
    Ok((ok, parts.join("; ")))
}

/// Roundoff level under which a finer grid counts as exact for the
/// convergence-factor requirement.
pub const HJB_EXACT_FLOOR: f64 = 1e-12;

fn hjb_oracle(_seed: u64) -> Result<(bool, String)> {
    let coarse = solve_example_hjb(HORIZON, C_PLUS, 4.0, 401, 401)?.max_error();
    let fine = solve_example_hjb(HORIZON, C_PLUS, 4.0, 801, 801)?.max_error();
    let factor_ok = fine <= HJB_EXACT_FLOOR || coarse / fine >= 1.5;
    let ok = coarse < 1e-2 && fine < 6.7e-3 && factor_ok;
    let aligned = |n| -> Result<f64> {
        Ok(
            solve_example_hjb_with(HORIZON, C_PLUS, 4.0, n, n, HjbScheme::OutputAligned)?
                .max_error(),
        )
    };
    Ok((
        ok,
        format!(
            "max error {coarse:.2e} at 401, {fine:.2e} at 801 (output-aligned stepping: {:.2e}, {:.2e})",
            aligned(401)?,
            aligned(801)?
        ),
    ))
}

#[derive(Default)]
struct PropertyTally {
    gamma_violations: usize,
    gap_violations: usize,
    negative_rates: usize,
    events: [usize; 3],
    abs_gap: Vec<f64>,
    samples: usize,
}

fn perturbation_properties(seed: u64) -> Result<(bool, String)> {
    let thetas = theta_ladder(0.0, HORIZON, 0.1, 4);
    let grid = TimeGrid::with_max_step(0.0, HORIZON, thetas[3] / 50.0)?;
    let policy = PriceProportional {
        kappa: 1.0,
        cap: C_PLUS,
    };
    let c_bars = [0.0, 2.0];
    let start = StartState {
        t: 0.0,
        x: 1.0,
        q: 0.5,
    };
    let n_paths = 10_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for s in 0..3u64 {
        let sim = PathSimulator::new(
            &ExampleModel,
            &policy,
            grid,
            start,
            &McConfig::new(n_paths, seed + 1000 * s),
        )?;
        let per_path: Vec<PropertyTally> = sim.map(n_paths, |_, p| {
            let mut t = PropertyTally {
                abs_gap: vec![0.0; c_bars.len() * thetas.len()],
                ..Default::default()
            };
            let Some(p) = p else { return Ok(t) };
            t.samples = 1;
            let sup_rate = p.base.rates.iter().fold(0.0f64, |m, &r| m.max(r));
            for (ci, &c_bar) in c_bars.iter().enumerate() {
                for (li, &theta) in thetas.iter().enumerate() {
                    let spec = PerturbationSpec {
                        t: 0.0,
                        c_bar,
                        theta,
                    };
                    let PathPerturbation::Valid(o) =
                        perturb_path(&spec, &p.base, &grid, 2.0 * grid.dt())?
                    else {
                        continue;
                    };
                    let gamma = gamma_process(&spec, &p.base.rates, &grid, p.base.tau);
                    let sup = gamma.sup_abs();
                    if sup > theta * (c_bar + sup_rate) + 1e-12 {
                        t.gamma_violations += 1;
                    }
                    let m = o.materialize(&p.base, &grid)?;
                    let slack = 1e-12 * start.q;
                    for k in 0..grid.n_points() {
                        let r = grid.time(k);
                        let grid_gap = (m.q[k] - p.base.q[k]).abs();
                        let exact_gap =
                            (o.q_theta_at(&p.base, &grid, r) - p.base.q_at(&grid, r)).abs();
                        if grid_gap > sup + slack || exact_gap > sup + slack {
                            t.gap_violations += 1;
                            break;
                        }
                    }
                    let analytic_ok = o.makeup_rate >= 0.0 && c_bar >= 0.0;
                    if !analytic_ok || m.rates.iter().any(|&r| r < 0.0) {
                        t.negative_rates += 1;
                    }
                    t.events[o.event as usize] += 1;
                    t.abs_gap[ci * thetas.len() + li] = (m.tau - p.base.tau).abs();
                }
            }
            Ok(t)
        })?;
        let mut total = PropertyTally::default();
        let mut l1 = vec![Vec::with_capacity(n_paths); c_bars.len() * thetas.len()];
        for t in &per_path {
            total.gamma_violations += t.gamma_violations;
            total.gap_violations += t.gap_violations;
            total.negative_rates += t.negative_rates;
            for e in 0..3 {
                total.events[e] += t.events[e];
            }
            if t.samples == 1 {
                for (j, v) in t.abs_gap.iter().enumerate() {
                    l1[j].push(*v);
                }
            }
        }
        let means: Vec<f64> = l1.iter().map(|v| mean_and_std_error(v).0).collect();
        let monotone = (0..c_bars.len()).all(|ci| {
            means[ci * thetas.len()..(ci + 1) * thetas.len()]
                .windows(2)
                .all(|w| w[1] < w[0])
        });
        let all_classes = total.events.iter().all(|&n| n > 0);
        let seed_ok = total.gamma_violations == 0
            && total.gap_violations == 0
            && total.negative_rates == 0
            && monotone
            && all_classes;
        ok &= seed_ok;
        parts.push(format!(
            "seed {}: events E1/E2/E3 = {}/{}/{}, violations gamma/gap/sign = {}/{}/{}, L1 |tau_theta - tau| c_bar=0: [{}], c_bar=2: [{}]",
            seed + 1000 * s,
            total.events[0],
            total.events[1],
            total.events[2],
            total.gamma_violations,
            total.gap_violations,
            total.negative_rates,
            means[..thetas.len()].iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(", "),
            means[thetas.len()..].iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(", "),
        ));
    }
    Ok((ok, parts.join("; ")))
}

pub fn summary(outcomes: &[CriterionOutcome]) -> String {
    let passed = outcomes.iter().filter(|o| o.passed).count();
    format!("{passed}/{} criteria passed", outcomes.len())
}

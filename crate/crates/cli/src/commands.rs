//! The experiment behind each subcommand. Cells are computed in key order
//! and each draws its own seed from [`cell_seed`], so outputs are identical
//! regardless of thread count or which cells are run.

use serde::Serialize;
use smplab_core::acceptance;
use smplab_core::closed_form::{example_control, example_w};
use smplab_core::control::write_trajectories_csv;
use smplab_core::smp::{write_plot_data, write_smp_csv};
use smplab_core::{
    estimate_value, evaluate_path, evaluate_policy, example_fbar, example_tau_theta, example_value,
    generate_brownian, perturb_control, remark_counterexample, simulate_model, smp_check,
    solve_example_hjb_with, standard_smp_check, Event, HjbScheme, LinearSchedule, McConfig,
    PathPerturbation, PerturbationSpec, SmpConfig, SmpStatus, StartState, TimeGrid,
};

use crate::config::{cell_seed, Format, ModelChoice, PolicyChoice, RunConfig};
use crate::output::{opt, Output};
use crate::CliError;

fn closed_form_applies(c: &RunConfig) -> bool {
    c.model == ModelChoice::Example && c.policy == PolicyChoice::Twap
}

pub fn plan(command: &str, c: &RunConfig) -> Vec<String> {
    let mut lines = vec![format!("config hash {}", c.hash())];
    match command {
        "value" => {
            for &t in &c.t {
                for &q in &c.q {
                    lines.push(format!(
                        "value at t={t}, q={q}: {} paths x {} steps",
                        c.paths, c.steps
                    ));
                }
            }
        }
        "perturb" => {
            for &t in &c.t {
                for &q in &c.q {
                    lines.push(format!(
                        "perturbation census at t={t}, q={q}, theta={}, c_bar in {:?}: {} paths",
                        c.theta_fraction * (c.horizon - t),
                        c.c_bar,
                        c.paths
                    ));
                }
            }
            lines.push(format!(
                "divergence table at theta in {DIVERGENCE_THETAS:?}, c_bar={DIVERGENCE_C_BAR}"
            ));
        }
        "smp" => {
            for &t in &c.t {
                lines.push(format!(
                    "corrected and standard comparison at t={t}, x={}, q={}, {} rates, {} theta levels, {} paths",
                    c.x,
                    c.q[0],
                    c.c_bar.len(),
                    c.theta_levels,
                    c.paths
                ));
            }
        }
        "hjb" => lines.push(format!(
            "finite-difference solution on {} x {} nodes, q_max={}, both schemes",
            c.nt, c.nq, c.q_max
        )),
        "all" => {
            for (id, name, _) in acceptance::criteria() {
                lines.push(format!("criterion {id}: {name}"));
            }
        }
        _ => {}
    }
    lines
}

#[derive(Serialize)]
struct ValueRow {
    t: f64,
    q: f64,
    reference: Option<f64>,
    within_3se: Option<bool>,
    estimate: serde_json::Value,
}

pub fn value(c: &RunConfig, out: &mut Output) -> Result<bool, CliError> {
    let model = c.model();
    let policy = c.policy();
    let mut rows = Vec::new();
    for (i, &t) in c.t.iter().enumerate() {
        for (j, &q) in c.q.iter().enumerate() {
            let grid = TimeGrid::new(t, c.horizon, c.steps)?;
            let mc = McConfig::new(c.paths, cell_seed(c.seed, "value", &[i, j]));
            let start = StartState { t, x: c.x, q };
            let e = estimate_value(model.as_ref(), policy.as_ref(), start, &grid, &mc)?;
            let reference =
                closed_form_applies(c).then(|| example_value(t, c.x, q, c.horizon, c.c_plus));
            rows.push(ValueRow {
                t,
                q,
                reference,
                within_3se: reference.map(|r| e.within(r, 3.0)),
                estimate: e.to_json(out.hash()),
            });
        }
    }
    match out.format {
        Format::Json => out.json("value", &rows)?,
        Format::Csv => out.csv("value", |w| {
            writeln!(
                w,
                "t,q,mean,std_error,n_paths,n_excluded,seed,reference,within_3se"
            )?;
            for r in &rows {
                let e = &r.estimate;
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{}",
                    r.t,
                    r.q,
                    e["mean"],
                    e["std_error"],
                    e["n_paths"],
                    e["n_excluded"],
                    e["seed"],
                    opt(r.reference),
                    r.within_3se.map_or_else(String::new, |b| b.to_string())
                )?;
            }
            Ok(())
        })?,
    }
    for r in &rows {
        println!(
            "value t={} q={}: {} ± {}{}",
            r.t,
            r.q,
            r.estimate["mean"],
            r.estimate["std_error"],
            r.reference
                .map_or_else(String::new, |v| format!(" (closed form {v})"))
        );
    }
    Ok(rows.iter().all(|r| r.within_3se != Some(false)))
}

const DIVERGENCE_THETAS: [f64; 3] = [0.04, 0.01, 0.0025];
const DIVERGENCE_C_BAR: f64 = 2.0;

#[derive(Serialize)]
struct CensusRow {
    t: f64,
    q: f64,
    c_bar: f64,
    theta: f64,
    n_paths: usize,
    skipped: usize,
    e1: usize,
    e2: usize,
    e3: usize,
    /// Largest `|tau_theta - (tau + theta)|` over E2 paths stopping before the horizon.
    e2_max_deviation: Option<f64>,
    /// Share of valid paths whose grid stop matches the closed form within 2 dt.
    formula_agreement: Option<f64>,
}

#[derive(Serialize)]
struct DivergenceRow {
    theta: f64,
    tau_theta: f64,
    tau_theta_exact: f64,
    quotient: f64,
    quotient_exact: f64,
}

pub fn perturb(c: &RunConfig, out: &mut Output) -> Result<bool, CliError> {
    let model = c.model();
    let policy = c.policy();
    let mut census = Vec::new();
    let mut passed = true;
    for (i, &t) in c.t.iter().enumerate() {
        for (j, &q) in c.q.iter().enumerate() {
            let grid = TimeGrid::new(t, c.horizon, c.steps)?;
            let dt = grid.dt();
            let batch = generate_brownian(grid, c.paths, cell_seed(c.seed, "perturb", &[i, j]))?;
            let market = simulate_model(model.as_ref(), &grid, c.x, &batch)?;
            let (control, inv) = evaluate_policy(policy.as_ref(), &market, q)?;
            if c.export_paths {
                out.csv(&format!("market_{i}_{j}"), |w| market.write_csv(w))?;
                out.csv(&format!("trajectories_{i}_{j}"), |w| {
                    write_trajectories_csv(&control, &inv, w)
                })?;
            }
            let theta = c.theta_fraction * (c.horizon - t);
            for (k, &c_bar) in c.c_bar.iter().enumerate() {
                let spec = PerturbationSpec { t, c_bar, theta };
                let set = perturb_control(&spec, &control, &inv, policy.cap(), None)?;
                let mut e2_dev: Option<f64> = None;
                let mut agree = 0usize;
                let mut valid = 0usize;
                let exact = example_tau_theta(theta, c_bar, t, q, c.horizon, c.c_plus);
                for (p, m) in set.paths.iter().zip(&set.materialized) {
                    let (PathPerturbation::Valid(o), Some(m)) = (p, m) else {
                        continue;
                    };
                    valid += 1;
                    if o.event == Event::E2 && m.tau < c.horizon {
                        let d = (m.tau - (o.tau + theta)).abs();
                        e2_dev = Some(e2_dev.map_or(d, |v| v.max(d)));
                    }
                    if (m.tau - exact).abs() <= 2.0 * dt {
                        agree += 1;
                    }
                }
                let formula_agreement =
                    (closed_form_applies(c) && valid > 0).then(|| agree as f64 / valid as f64);
                passed &= e2_dev.is_none_or(|d| d <= 2.0 * dt);
                passed &= formula_agreement.is_none_or(|a| a >= 0.99);
                if c.export_paths {
                    out.csv(&format!("perturbation_{i}_{j}_{k}"), |w| set.write_csv(w))?;
                }
                census.push(CensusRow {
                    t,
                    q,
                    c_bar,
                    theta,
                    n_paths: c.paths,
                    skipped: set.n_skipped(),
                    e1: set.count(Event::E1),
                    e2: set.count(Event::E2),
                    e3: set.count(Event::E3),
                    e2_max_deviation: e2_dev,
                    formula_agreement,
                });
            }
        }
    }

    let divergence = divergence_table(c.horizon)?;
    for (r, prev) in divergence
        .iter()
        .zip(std::iter::once(None).chain(divergence.iter().map(Some)))
    {
        let dt = DIVERGENCE_THETAS[2] / 50.0;
        passed &= (r.tau_theta - r.tau_theta_exact).abs() <= 2.0 * dt;
        passed &= ((r.quotient - r.quotient_exact) / r.quotient_exact).abs() <= 0.01;
        passed &= prev.is_none_or(|p| r.quotient < p.quotient);
    }

    match out.format {
        Format::Json => {
            out.json("perturb_census", &census)?;
            out.json("perturb_divergence", &divergence)?;
        }
        Format::Csv => {
            out.csv("perturb_census", |w| {
                writeln!(
                    w,
                    "t,q,c_bar,theta,n_paths,skipped,e1,e2,e3,e2_max_deviation,formula_agreement"
                )?;
                for r in &census {
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{},{},{},{},{}",
                        r.t,
                        r.q,
                        r.c_bar,
                        r.theta,
                        r.n_paths,
                        r.skipped,
                        r.e1,
                        r.e2,
                        r.e3,
                        opt(r.e2_max_deviation),
                        opt(r.formula_agreement)
                    )?;
                }
                Ok(())
            })?;
            out.csv("perturb_divergence", |w| {
                writeln!(w, "theta,tau_theta,tau_theta_exact,quotient,quotient_exact")?;
                for r in &divergence {
                    writeln!(
                        w,
                        "{},{},{},{},{}",
                        r.theta, r.tau_theta, r.tau_theta_exact, r.quotient, r.quotient_exact
                    )?;
                }
                Ok(())
            })?;
        }
    }
    for r in &census {
        println!(
            "t={} q={} c_bar={}: E1/E2/E3/skipped = {}/{}/{}/{}",
            r.t, r.q, r.c_bar, r.e1, r.e2, r.e3, r.skipped
        );
    }
    for r in &divergence {
        println!(
            "theta={}: quotient {:.4} (closed form {:.4})",
            r.theta, r.quotient, r.quotient_exact
        );
    }
    Ok(passed)
}

/// Stopping-time quotients of the deterministic `T - t` schedule from
/// `T^2 / 2`, simulated on a grid fine enough for the smallest spike.
fn divergence_table(horizon: f64) -> Result<Vec<DivergenceRow>, CliError> {
    let grid = TimeGrid::with_max_step(0.0, horizon, DIVERGENCE_THETAS[2] / 50.0)?;
    let xs = vec![1.0; grid.n_points()];
    let policy = LinearSchedule::time_to_horizon(horizon);
    let base = evaluate_path(&policy, &grid, &xs, 0.5 * horizon * horizon, 0)?;
    let mut rows = Vec::new();
    for theta in DIVERGENCE_THETAS {
        let spec = PerturbationSpec {
            t: 0.0,
            c_bar: DIVERGENCE_C_BAR,
            theta,
        };
        let (tau_theta_exact, quotient_exact) =
            remark_counterexample(theta, DIVERGENCE_C_BAR, horizon)?;
        let o = match smplab_core::perturb_path(&spec, &base, &grid, 2.0 * grid.dt())? {
            PathPerturbation::Valid(o) => o,
            PathPerturbation::Skipped(r) => {
                return Err(CliError::Config(format!(
                    "divergence spike at theta={theta} skipped: {r:?}"
                )))
            }
        };
        let tau_theta = o.materialize(&base, &grid)?.tau;
        rows.push(DivergenceRow {
            theta,
            tau_theta,
            tau_theta_exact,
            quotient: (tau_theta - base.tau) / theta,
            quotient_exact,
        });
    }
    Ok(rows)
}

pub fn smp(c: &RunConfig, out: &mut Output) -> Result<bool, CliError> {
    let model = c.model();
    let policy = c.policy();
    let q = c.q[0];
    let mut corrected = Vec::new();
    let mut standard = Vec::new();
    for (i, &t) in c.t.iter().enumerate() {
        let mut cfg = SmpConfig::new(
            c.horizon,
            McConfig::new(c.paths, cell_seed(c.seed, "smp", &[i])),
        );
        cfg.max_dt = (c.horizon - t) / c.steps as f64;
        cfg.theta_fraction = c.theta_fraction;
        cfg.theta_levels = c.theta_levels;
        cfg.adjoint_paths = c.adjoint_paths;
        cfg.adjoint_steps = c.adjoint_steps;
        corrected.extend(smp_check(
            model.as_ref(),
            policy.as_ref(),
            c.x,
            q,
            &[t],
            &c.c_bar,
            &cfg,
        )?);
        standard.extend(standard_smp_check(
            model.as_ref(),
            policy.as_ref(),
            c.x,
            q,
            &[t],
            &c.c_bar,
            &cfg,
        )?);
    }
    match out.format {
        Format::Json => out.json(
            "smp",
            &serde_json::json!({ "corrected": corrected, "standard": standard }),
        )?,
        Format::Csv => {
            out.csv("smp", |w| write_smp_csv(&corrected, w))?;
            out.csv("smp_standard", |w| {
                writeln!(w, "t,c_bar,c_t,y,margin,status")?;
                for s in &standard {
                    writeln!(
                        w,
                        "{},{},{},{},{},{}",
                        s.t,
                        s.c_bar,
                        s.c_t,
                        s.y,
                        s.margin,
                        s.status.as_str()
                    )?;
                }
                Ok(())
            })?;
        }
    }
    out.csv("smp_plot", |w| write_plot_data(&corrected, &standard, w))?;
    for (r, s) in corrected.iter().zip(&standard) {
        println!(
            "t={} c_bar={}: margin {:.4e} ± {:.4e} [{}]; standard margin {:.4} [{}]",
            r.t,
            r.c_bar,
            r.margin,
            r.margin_se,
            r.status.as_str(),
            s.margin,
            s.status.as_str()
        );
    }
    Ok(corrected.iter().all(|r| r.status != SmpStatus::Fail))
}

#[derive(Serialize)]
struct HjbRow {
    scheme: &'static str,
    n_t: usize,
    n_q: usize,
    updates: Option<usize>,
    max_error: Option<f64>,
    note: Option<String>,
}

pub fn hjb(c: &RunConfig, out: &mut Output) -> Result<bool, CliError> {
    let mut rows = Vec::new();
    let mut passed = false;
    for (scheme, name) in [
        (HjbScheme::CflLimited, "cfl-limited"),
        (HjbScheme::OutputAligned, "output-aligned"),
    ] {
        match solve_example_hjb_with(c.horizon, c.c_plus, c.q_max, c.nt, c.nq, scheme) {
            Ok(sol) => {
                if scheme == HjbScheme::CflLimited {
                    passed = sol.max_error() < 1e-2;
                    if out.format == Format::Csv {
                        out.csv("hjb", |w| sol.write_csv(w))?;
                    }
                }
                rows.push(HjbRow {
                    scheme: name,
                    n_t: c.nt,
                    n_q: c.nq,
                    updates: Some(sol.updates),
                    max_error: Some(sol.max_error()),
                    note: None,
                });
            }
            Err(e) if scheme == HjbScheme::OutputAligned => rows.push(HjbRow {
                scheme: name,
                n_t: c.nt,
                n_q: c.nq,
                updates: None,
                max_error: None,
                note: Some(e.to_string()),
            }),
            Err(e) => return Err(e.into()),
        }
    }
    match out.format {
        Format::Json => out.json("hjb_errors", &rows)?,
        Format::Csv => out.csv("hjb_errors", |w| {
            writeln!(w, "scheme,n_t,n_q,updates,max_error")?;
            for r in &rows {
                let updates = r.updates.map_or_else(String::new, |u| u.to_string());
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    r.scheme,
                    r.n_t,
                    r.n_q,
                    updates,
                    opt(r.max_error)
                )?;
            }
            Ok(())
        })?,
    }
    for r in &rows {
        match (r.max_error, &r.note) {
            (Some(e), _) => println!("{}: max error {e:.3e}", r.scheme),
            (None, Some(n)) => println!("{}: not run ({n})", r.scheme),
            _ => {}
        }
    }
    Ok(passed)
}

pub fn all(c: &RunConfig, out: &mut Output) -> Result<bool, CliError> {
    let mut outcomes = Vec::new();
    for (id, _, _) in acceptance::criteria() {
        let o = acceptance::run(id, c.seed).expect("id from the criteria list");
        println!("{}", o.line());
        outcomes.push(o);
    }
    println!("{}", acceptance::summary(&outcomes));
    // Timings are wall-clock and belong with the metadata, not the results.
    let results: Vec<_> = outcomes
        .iter()
        .map(|o| serde_json::json!({ "id": o.id, "name": o.name, "passed": o.passed, "detail": o.detail }))
        .collect();
    match out.format {
        Format::Json => out.json("acceptance", &results)?,
        Format::Csv => out.csv("acceptance", |w| {
            writeln!(w, "id,name,passed,detail")?;
            for o in &outcomes {
                writeln!(
                    w,
                    "{},{},{},\"{}\"",
                    o.id,
                    o.name,
                    o.passed,
                    o.detail.replace('"', "'")
                )?;
            }
            Ok(())
        })?,
    }
    let failures: Vec<_> = results
        .iter()
        .filter(|r| r["passed"] == false)
        .cloned()
        .collect();
    if !failures.is_empty() {
        out.json("acceptance_failures", &failures)?;
    }
    Ok(failures.is_empty())
}

/// Closed-form quantities of the capped-TWAP example at given arguments.
pub fn oracle(name: &str, args: &[f64], c: &RunConfig) -> Result<serde_json::Value, CliError> {
    let (horizon, c_plus) = (c.horizon, c.c_plus);
    let want = |n: usize, names: &str| {
        if args.len() == n {
            Ok(())
        } else {
            Err(CliError::Config(format!(
                "`{name}` takes {n} arguments: {names}"
            )))
        }
    };
    let value = match name {
        "value" => {
            want(3, "t x q")?;
            serde_json::json!(example_value(args[0], args[1], args[2], horizon, c_plus))
        }
        "control" => {
            want(2, "t q")?;
            serde_json::json!(example_control(args[0], args[1], horizon, c_plus))
        }
        "w" => {
            want(2, "t q")?;
            let w = example_w(args[0], args[1], horizon, c_plus);
            serde_json::json!({ "w": w.value, "dt": w.dt, "dq": w.dq })
        }
        "fbar" => {
            want(4, "t c_bar x q")?;
            serde_json::json!(example_fbar(
                args[0], args[1], args[2], args[3], horizon, c_plus
            ))
        }
        "tau-theta" => {
            want(4, "theta c_bar t q")?;
            serde_json::json!(example_tau_theta(
                args[0], args[1], args[2], args[3], horizon, c_plus
            ))
        }
        "divergence" => {
            want(2, "theta c_bar")?;
            let (tau_theta, quotient) = remark_counterexample(args[0], args[1], horizon)?;
            serde_json::json!({ "tau_theta": tau_theta, "quotient": quotient })
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown formula `{other}` (value, control, w, fbar, tau-theta, divergence)"
            )))
        }
    };
    Ok(serde_json::json!({
        "formula": name,
        "args": args,
        "horizon": horizon,
        "c_plus": c_plus,
        "result": value,
    }))
}

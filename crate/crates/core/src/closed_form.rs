//! Exact formulas for the capped TWAP liquidation example and for the
//! deterministic counterexample in which the stopping-time quotient diverges.
//!
//! Nothing here simulates; these functions are the oracles the Monte Carlo
//! and finite-difference code is checked against. On the kink
//! `q = c_plus (T - t)` the first (`q <= ...`) branch is used.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Evaluation point of the example problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleConfig {
    pub horizon: f64,
    pub c_plus: f64,
    pub t: f64,
    pub x: f64,
    pub q: f64,
}

impl ExampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_plus > 0.0) {
            return Err(invalid("c_plus", "must be positive"));
        }
        if !(self.x > 0.0) {
            return Err(invalid("x", "must be positive"));
        }
        if !(self.q > 0.0) {
            return Err(invalid("q", "must be positive"));
        }
        if !(self.t >= 0.0 && self.t < self.horizon) {
            return Err(invalid("t", "must lie in [0, horizon)"));
        }
        Ok(())
    }
}

#[inline]
fn first_branch(t: f64, q: f64, horizon: f64, c_plus: f64) -> bool {
    q <= c_plus * (horizon - t)
}

/// Optimal feedback rate: `q / (T - t)` when the position can be cleared by
/// the horizon, the cap otherwise, and zero once the horizon is reached.
#[inline]
pub fn example_control(t: f64, q: f64, horizon: f64, c_plus: f64) -> f64 {
    if t >= horizon {
        return 0.0;
    }
    if first_branch(t, q, horizon, c_plus) {
        q / (horizon - t)
    } else {
        c_plus
    }
}

pub fn example_value(t: f64, x: f64, q: f64, horizon: f64, c_plus: f64) -> f64 {
    x * example_w(t, q, horizon, c_plus).value
}

/// `w` together with its partial derivatives (first-branch one-sided on the kink).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WValue {
    pub value: f64,
    pub dt: f64,
    pub dq: f64,
}

pub fn example_w(t: f64, q: f64, horizon: f64, c_plus: f64) -> WValue {
    if t >= horizon {
        return WValue {
            value: 0.0,
            dt: 0.0,
            dq: 0.0,
        };
    }
    if first_branch(t, q, horizon, c_plus) {
        WValue {
            value: q,
            dt: 0.0,
            dq: 1.0,
        }
    } else {
        WValue {
            value: c_plus * (horizon - t),
            dt: -c_plus,
            dq: 0.0,
        }
    }
}

/// Residual of `w_t + sup_{pi in [0, c_plus]} (pi - pi w_q)` for given partials.
pub fn hjb_residual(w: &WValue, c_plus: f64) -> f64 {
    w.dt + c_plus * (1.0 - w.dq).max(0.0)
}

pub fn example_fbar(t: f64, c_bar: f64, x: f64, q: f64, horizon: f64, c_plus: f64) -> f64 {
    if !first_branch(t, q, horizon, c_plus) {
        return 0.0;
    }
    let c_t = example_control(t, q, horizon, c_plus);
    if c_bar >= c_t {
        (c_bar - c_t) * x
    } else {
        0.0
    }
}

pub fn example_tau_theta(theta: f64, c_bar: f64, t: f64, q: f64, horizon: f64, c_plus: f64) -> f64 {
    if !first_branch(t, q, horizon, c_plus) {
        return horizon;
    }
    let c_t = example_control(t, q, horizon, c_plus);
    if c_bar > c_t {
        horizon - theta * (c_bar / c_t - 1.0)
    } else {
        horizon
    }
}

/// Perturbed stopping time and quotient `(tau_theta - T) / theta` for the
/// base `c_r = T - r`, `q0 = T^2 / 2`, spike `c_bar > T` at time zero.
pub fn remark_counterexample(theta: f64, c_bar: f64, horizon: f64) -> Result<(f64, f64)> {
    if !(c_bar > horizon) {
        return Err(invalid(
            "c_bar",
            format!("{c_bar} must exceed the horizon {horizon}"),
        ));
    }
    let limit = horizon * horizon / (2.0 * c_bar);
    if !(theta > 0.0 && theta < limit) {
        return Err(invalid(
            "theta",
            format!("{theta} must lie in (0, {limit})"),
        ));
    }
    let tau_theta = horizon - (theta * theta - 2.0 * horizon * theta + 2.0 * c_bar * theta).sqrt();
    let quotient = -(1.0 + 2.0 * (c_bar - horizon) / theta).sqrt();
    Ok((tau_theta, quotient))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_branches() {
        assert_eq!(example_control(0.0, 0.5, 1.0, 2.0), 0.5);
        assert_eq!(example_control(0.0, 3.0, 1.0, 2.0), 2.0);
        assert_eq!(example_control(0.5, 1.0, 1.0, 2.0), 2.0);
        assert!((example_control(0.9, 0.2, 1.0, 2.0) - 2.0).abs() < 1e-12);
        assert_eq!(example_control(1.0, 0.2, 1.0, 2.0), 0.0);
    }

    #[test]
    fn value_and_w() {
        assert_eq!(example_value(0.0, 1.0, 0.5, 1.0, 2.0), 0.5);
        assert_eq!(example_value(0.0, 1.0, 3.0, 1.0, 2.0), 2.0);
        assert_eq!(example_value(1.0, 1.0, 3.0, 1.0, 2.0), 0.0);
        assert!(example_value(1.0 - 1e-12, 1.0, 3.0, 1.0, 2.0) < 1e-11);
        let w = example_w(0.0, 0.5, 1.0, 2.0);
        assert_eq!((w.value, w.dq, w.dt), (0.5, 1.0, 0.0));
        let w = example_w(0.0, 3.0, 1.0, 2.0);
        assert_eq!((w.value, w.dq, w.dt), (2.0, 0.0, -2.0));
        assert_eq!(example_w(0.3, 0.0, 1.0, 2.0).value, 0.0);
    }

    #[test]
    fn hjb_residual_vanishes_off_kink() {
        for i in 0..50 {
            for j in 1..80 {
                let t = i as f64 * 0.02;
                let q = j as f64 * 0.05;
                if (q - 2.0 * (1.0 - t)).abs() < 1e-9 {
                    continue;
                }
                let r = hjb_residual(&example_w(t, q, 1.0, 2.0), 2.0);
                assert!(r.abs() < 1e-12, "t={t} q={q} r={r}");
            }
        }
    }

    #[test]
    fn fbar_cases() {
        assert_eq!(example_fbar(0.0, 1.5, 1.0, 0.5, 1.0, 2.0), 1.0);
        assert_eq!(example_fbar(0.0, 0.25, 1.0, 0.5, 1.0, 2.0), 0.0);
        assert_eq!(example_fbar(0.0, 1.0, 1.0, 3.0, 1.0, 2.0), 0.0);
    }

    #[test]
    fn tau_theta_cases() {
        assert!((example_tau_theta(0.1, 1.5, 0.0, 0.5, 1.0, 2.0) - 0.8).abs() < 1e-12);
        assert_eq!(example_tau_theta(0.1, 0.25, 0.0, 0.5, 1.0, 2.0), 1.0);
        assert_eq!(example_tau_theta(0.1, 1.0, 0.0, 3.0, 1.0, 2.0), 1.0);
    }

    #[test]
    fn counterexample_values() {
        let (tau, quot) = remark_counterexample(0.01, 2.0, 1.0).unwrap();
        assert!((tau - (1.0 - 0.0201f64.sqrt())).abs() < 1e-12);
        assert!((tau - 0.85823).abs() < 1e-5);
        assert!((quot + 14.177).abs() < 1e-3);
        let (_, q2) = remark_counterexample(0.0025, 2.0, 1.0).unwrap();
        assert!((q2 + 28.3).abs() < 0.01);
        // tau_theta and the quotient agree with each other.
        assert!(((tau - 1.0) / 0.01 - quot).abs() < 1e-9);
    }

    #[test]
    fn counterexample_rejects_bad_window() {
        assert!(remark_counterexample(0.25, 2.0, 1.0).is_err());
        assert!(remark_counterexample(0.0, 2.0, 1.0).is_err());
        assert!(remark_counterexample(0.1, 0.5, 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = ExampleConfig {
            horizon: 1.0,
            c_plus: 2.0,
            t: 0.0,
            x: 1.0,
            q: 0.5,
        };
        assert!(ok.validate().is_ok());
        assert!(ExampleConfig { t: 1.0, ..ok }.validate().is_err());
        assert!(ExampleConfig { c_plus: 0.0, ..ok }.validate().is_err());
    }
}

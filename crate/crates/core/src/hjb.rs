//! Explicit upwind finite differences for the example's HJB equation
//!
//! `w_t + sup_{pi in [0, c_plus]} (pi - pi w_q) = 0`, `w(T, q) = 0`, `w(t, 0) = 0`,
//!
//! solved backward in time on `[0, T] x [0, q_max]`. Since selling moves the
//! inventory towards zero, `w_q` is the backward difference.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::closed_form::example_w;
use crate::error::{invalid, Result, SmpError};

/// How the backward march is organised between output time levels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum HjbScheme {
    /// March at Courant number one (`c_plus * dt = dq`), where the upwind
    /// update is exact transport, and reach each output level with a single
    /// fractional step from the nearest march level below it.
    #[default]
    CflLimited,
    /// March between consecutive output levels, each split into the fewest
    /// equal sub-steps that satisfy the CFL condition.
    OutputAligned,
}

/// Sub-steps per output interval beyond which [`HjbScheme::OutputAligned`] gives up.
pub const MAX_SUBSTEPS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HjbSolution {
    pub horizon: f64,
    pub c_plus: f64,
    pub q_max: f64,
    pub n_t: usize,
    pub n_q: usize,
    /// Spacing of the output time levels.
    pub dt_pde: f64,
    pub dq: f64,
    pub scheme: HjbScheme,
    /// Total explicit updates performed.
    pub updates: usize,
    /// `w[i * n_q + j]` at time level `i` (ascending) and inventory node `j`.
    w: Vec<f64>,
}

impl HjbSolution {
    pub fn t(&self, i: usize) -> f64 {
        if i + 1 == self.n_t {
            self.horizon
        } else {
            i as f64 * self.dt_pde
        }
    }

    pub fn q(&self, j: usize) -> f64 {
        j as f64 * self.dq
    }

    pub fn w(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n_q + j]
    }

    pub fn level(&self, i: usize) -> &[f64] {
        &self.w[i * self.n_q..(i + 1) * self.n_q]
    }

    /// Largest nodal deviation from the closed-form `w`.
    pub fn max_error(&self) -> f64 {
        let mut err = 0.0f64;
        for i in 0..self.n_t {
            for j in 0..self.n_q {
                let exact = example_w(self.t(i), self.q(j), self.horizon, self.c_plus).value;
                err = err.max((self.w(i, j) - exact).abs());
            }
        }
        err
    }

    /// Writes `t, q, w, optimizer`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,q,w,optimizer")?;
        let opt = hjb_verify_control(self);
        for i in 0..self.n_t {
            for j in 0..self.n_q {
                writeln!(
                    out,
                    "{},{},{},{}",
                    self.t(i),
                    self.q(j),
                    self.w(i, j),
                    opt[i * self.n_q + j].as_str()
                )?;
            }
        }
        Ok(())
    }
}

/// One explicit upwind step of length `h` (requires `c_plus * h <= dq`).
fn upwind_step(w: &[f64], next: &mut [f64], c_plus: f64, h: f64, dq: f64) {
    next[0] = 0.0;
    for j in 1..w.len() {
        let grad = (w[j] - w[j - 1]) / dq;
        next[j] = w[j] + h * c_plus * (1.0 - grad).max(0.0);
    }
}

pub fn solve_example_hjb(
    horizon: f64,
    c_plus: f64,
    q_max: f64,
    n_t: usize,
    n_q: usize,
) -> Result<HjbSolution> {
    solve_example_hjb_with(horizon, c_plus, q_max, n_t, n_q, HjbScheme::default())
}

pub fn solve_example_hjb_with(
    horizon: f64,
    c_plus: f64,
    q_max: f64,
    n_t: usize,
    n_q: usize,
    scheme: HjbScheme,
) -> Result<HjbSolution> {
    if n_t < 2 || n_q < 2 {
        return Err(invalid(
            "n_t/n_q",
            "at least two nodes per axis are required",
        ));
    }
    if !(horizon > 0.0) || !(c_plus > 0.0) {
        return Err(invalid("horizon/c_plus", "must be positive"));
    }
    if !(q_max > c_plus * horizon) {
        return Err(invalid(
            "q_max",
            format!("{q_max} must exceed c_plus * T = {}", c_plus * horizon),
        ));
    }
    let dt_pde = horizon / (n_t - 1) as f64;
    let dq = q_max / (n_q - 1) as f64;
    let mut w = vec![0.0; n_t * n_q];
    let mut scratch = vec![0.0; n_q];
    let mut updates = 0;

    match scheme {
        HjbScheme::CflLimited => {
            // Backward time s = T - t; march levels at s = m * dq / c_plus.
            let ds = dq / c_plus;
            let mut march = vec![0.0; n_q];
            let mut march_level = 0usize;
            for i in (0..n_t - 1).rev() {
                let s = horizon - i as f64 * dt_pde;
                let target = (s / ds * (1.0 + 1e-14)).floor() as usize;
                while march_level < target {
                    // At Courant number one the update is max(w_j, w_{j-1} + dq).
                    upwind_step(&march, &mut scratch, c_plus, ds, dq);
                    std::mem::swap(&mut march, &mut scratch);
                    march_level += 1;
                    updates += 1;
                }
                let frac = (s - march_level as f64 * ds).max(0.0);
                let row = &mut w[i * n_q..(i + 1) * n_q];
                if frac > 0.0 {
                    upwind_step(&march, row, c_plus, frac, dq);
                    updates += 1;
                } else {
                    row.copy_from_slice(&march);
                }
            }
        }
        HjbScheme::OutputAligned => {
            let m = (c_plus * dt_pde / dq * (1.0 - 1e-12)).ceil().max(1.0) as usize;
            if m > MAX_SUBSTEPS {
                return Err(SmpError::Cfl(format!(
                    "{m} sub-steps per level needed (c_plus dt / dq = {})",
                    c_plus * dt_pde / dq
                )));
            }
            let h = dt_pde / m as f64;
            let mut cur = vec![0.0; n_q];
            for i in (0..n_t - 1).rev() {
                for _ in 0..m {
                    upwind_step(&cur, &mut scratch, c_plus, h, dq);
                    std::mem::swap(&mut cur, &mut scratch);
                    updates += 1;
                }
                w[i * n_q..(i + 1) * n_q].copy_from_slice(&cur);
            }
        }
    }

    Ok(HjbSolution {
        horizon,
        c_plus,
        q_max,
        n_t,
        n_q,
        dt_pde,
        dq,
        scheme,
        updates,
        w,
    })
}

/// Maximiser of `pi (1 - w_q)` over `[0, c_plus]` at a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeOptimizer {
    /// `1 - w_q > 0`: sell at the cap.
    Cap,
    /// `1 - w_q < 0` (or nothing left to sell): do not trade.
    Zero,
    /// `w_q = 1`: every admissible rate attains the supremum.
    Any,
}

impl NodeOptimizer {
    pub fn as_str(&self) -> &'static str {
        match self {
            NodeOptimizer::Cap => "cap",
            NodeOptimizer::Zero => "zero",
            NodeOptimizer::Any => "any",
        }
    }

    /// The rate used when a single value is needed; ties resolve to zero.
    pub fn rate(&self, c_plus: f64) -> f64 {
        match self {
            NodeOptimizer::Cap => c_plus,
            NodeOptimizer::Zero | NodeOptimizer::Any => 0.0,
        }
    }
}

/// Tolerance on `|1 - w_q|` under which the supremum is degenerate.
pub const DEGENERATE_TOL: f64 = 1e-8;

/// Optimiser at every node, laid out like the solution values.
pub fn hjb_verify_control(sol: &HjbSolution) -> Vec<NodeOptimizer> {
    let mut out = Vec::with_capacity(sol.n_t * sol.n_q);
    for i in 0..sol.n_t {
        let row = sol.level(i);
        out.push(NodeOptimizer::Zero);
        for j in 1..sol.n_q {
            let slack = 1.0 - (row[j] - row[j - 1]) / sol.dq;
            out.push(if slack.abs() <= DEGENERATE_TOL {
                NodeOptimizer::Any
            } else if slack > 0.0 {
                NodeOptimizer::Cap
            } else {
                NodeOptimizer::Zero
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_and_terminal_conditions() {
        let s = solve_example_hjb(1.0, 2.0, 4.0, 41, 41).unwrap();
        assert!(s.level(40).iter().all(|&w| w == 0.0));
        assert!((0..41).all(|i| s.w(i, 0) == 0.0));
    }

    #[test]
    fn cfl_limited_is_exact_on_example() {
        for n in [21, 101, 401] {
            let s = solve_example_hjb(1.0, 2.0, 4.0, n, n).unwrap();
            assert!(s.max_error() < 1e-12, "n={n}: {}", s.max_error());
        }
    }

    #[test]
    fn output_aligned_converges_slowly() {
        let coarse = solve_example_hjb_with(1.0, 2.0, 4.0, 101, 101, HjbScheme::OutputAligned)
            .unwrap()
            .max_error();
        let fine = solve_example_hjb_with(1.0, 2.0, 4.0, 201, 201, HjbScheme::OutputAligned)
            .unwrap()
            .max_error();
        assert!(fine < coarse && coarse < 0.2);
    }

    #[test]
    fn monotone_and_nonnegative() {
        for scheme in [HjbScheme::CflLimited, HjbScheme::OutputAligned] {
            let s = solve_example_hjb_with(1.0, 2.0, 4.0, 61, 81, scheme).unwrap();
            for i in 0..s.n_t {
                let row = s.level(i);
                assert!(row.iter().all(|&w| w >= 0.0));
                assert!(row.windows(2).all(|p| p[1] >= p[0] - 1e-15));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(solve_example_hjb(1.0, 2.0, 1.5, 11, 11).is_err());
        assert!(solve_example_hjb(1.0, 2.0, 4.0, 1, 11).is_err());
        let err = solve_example_hjb_with(1.0, 2.0, 4.0, 2, 1_000_000, HjbScheme::OutputAligned);
        assert!(matches!(err, Err(SmpError::Cfl(_))));
    }

    #[test]
    fn optimizer_map_matches_branches() {
        let s = solve_example_hjb(1.0, 2.0, 4.0, 101, 101).unwrap();
        let opt = hjb_verify_control(&s);
        for i in 0..s.n_t {
            let kink = 2.0 * (1.0 - s.t(i));
            for j in 1..s.n_q {
                let q = s.q(j);
                let o = opt[i * s.n_q + j];
                if i + 1 == s.n_t {
                    assert_eq!(o, NodeOptimizer::Cap);
                } else if q > kink + 2.0 * s.dq {
                    assert_eq!(o, NodeOptimizer::Cap, "t={} q={q}", s.t(i));
                } else if q < kink - 2.0 * s.dq {
                    assert_eq!(o, NodeOptimizer::Any, "t={} q={q}", s.t(i));
                }
            }
        }
        assert_eq!(NodeOptimizer::Any.rate(2.0), 0.0);
    }
}

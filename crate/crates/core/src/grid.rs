//! Uniform time discretisation shared by every simulator in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmpError};

/// Uniform grid on `[t0, horizon]` with `n_steps` intervals.
///
/// Grid point `k` sits at `t0 + k * dt`; the last point agrees with the
/// horizon up to floating roundoff. Stopping times that reach the horizon are
/// reported as the horizon itself, never as the rounded grid value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, n_steps: usize) -> Result<Self> {
        if !t0.is_finite() || !horizon.is_finite() {
            return Err(SmpError::InvalidGrid(format!(
                "non-finite bounds [{t0}, {horizon}]"
            )));
        }
        if n_steps == 0 {
            return Err(SmpError::InvalidGrid("n_steps must be at least 1".into()));
        }
        if horizon <= t0 {
            return Err(SmpError::InvalidGrid(format!(
                "horizon {horizon} must exceed start {t0}"
            )));
        }
        Ok(Self {
            t0,
            horizon,
            n_steps,
        })
    }

    /// Smallest uniform grid on `[t0, horizon]` whose step does not exceed `max_dt`.
    pub fn with_max_step(t0: f64, horizon: f64, max_dt: f64) -> Result<Self> {
        if !(max_dt > 0.0) {
            return Err(SmpError::InvalidGrid(format!(
                "max step {max_dt} must be positive"
            )));
        }
        let n = ((horizon - t0) / max_dt * (1.0 - 1e-12)).ceil().max(1.0);
        Self::new(t0, horizon, n as usize)
    }

    #[inline]
    pub fn t0(&self) -> f64 {
        self.t0
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    #[inline]
    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.n_steps as f64
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt()
    }

    /// Index of the step `[t_k, t_{k+1})` containing `r`, clamped to the grid.
    ///
    /// Consistent with [`TimeGrid::time`]: `time(k) <= r < time(k + 1)` holds
    /// for the returned `k` whenever `r` lies inside the grid, even where the
    /// division rounds across a grid point.
    #[inline]
    pub fn step_containing(&self, r: f64) -> usize {
        let k = ((r - self.t0) / self.dt()).floor();
        let mut k = if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.n_steps - 1)
        };
        if k + 1 < self.n_steps && self.time(k + 1) <= r {
            k += 1;
        } else if k > 0 && self.time(k) > r {
            k -= 1;
        }
        k
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |k| self.time(k))
    }

    /// Tolerance under which a time is treated as equal to the horizon.
    #[inline]
    pub(crate) fn snap_tolerance(&self) -> f64 {
        1e-9 * self.dt()
    }

    /// Linear interpolation of grid values `values[0..=n]` at time `r`.
    pub fn interpolate(&self, values: &[f64], r: f64) -> f64 {
        debug_assert_eq!(values.len(), self.n_points());
        if r >= self.horizon {
            return values[self.n_steps];
        }
        if r <= self.t0 {
            return values[0];
        }
        let k = self.step_containing(r);
        let w = (r - self.time(k)) / self.dt();
        if w <= 0.0 {
            values[k]
        } else {
            values[k] + w * (values[k + 1] - values[k])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_containing_agrees_with_time_at_grid_points() {
        for n in [7, 200, 999] {
            let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
            for k in 0..n {
                assert_eq!(grid.step_containing(grid.time(k)), k, "n={n}, k={k}");
            }
        }
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(1.0, 1.0, 10).is_err());
        assert!(TimeGrid::new(0.0, f64::NAN, 10).is_err());
    }

    #[test]
    fn last_point_matches_horizon() {
        for n in [1, 3, 7, 10, 1000, 8000] {
            let g = TimeGrid::new(0.3, 1.7, n).unwrap();
            assert_eq!(g.time(0), 0.3);
            assert!((g.time(n) - 1.7).abs() <= f64::EPSILON * 1.7);
            assert!(g.dt() > 0.0);
        }
    }

    #[test]
    fn max_step_grid() {
        let g = TimeGrid::with_max_step(0.0, 1.0, 0.00625 / 50.0).unwrap();
        assert_eq!(g.n_steps(), 8000);
        assert!(g.dt() <= 0.00625 / 50.0 * (1.0 + 1e-12));
        let g = TimeGrid::with_max_step(0.0, 1.0, 0.3).unwrap();
        assert_eq!(g.n_steps(), 4);
    }

    #[test]
    fn step_lookup_and_interpolation() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        assert_eq!(g.step_containing(-1.0), 0);
        assert_eq!(g.step_containing(0.3), 1);
        assert_eq!(g.step_containing(1.0), 3);
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert!((g.interpolate(&v, 0.375) - 1.5).abs() < 1e-15);
        assert_eq!(g.interpolate(&v, 1.0), 4.0);
    }
}

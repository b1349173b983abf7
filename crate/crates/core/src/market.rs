//! Brownian drivers and simulated market factor paths.
//!
//! Every path owns an independent ChaCha stream selected by its index, so a
//! path is reproducible regardless of how many other paths are drawn or how
//! the work is split across threads.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;

use crate::error::{invalid, Result, SmpError};
use crate::grid::TimeGrid;
use crate::model::{MarketSampler, Model};
use crate::stats::normal_quantile;

/// Counter-based source of Brownian increments keyed by `(seed, path)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BrownianSource {
    pub grid: TimeGrid,
    pub seed: u64,
    /// Pair path `2i + 1` with the negated increments of path `2i`.
    pub antithetic: bool,
}

impl BrownianSource {
    pub fn new(grid: TimeGrid, seed: u64) -> Self {
        Self {
            grid,
            seed,
            antithetic: false,
        }
    }

    pub fn with_antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    /// Writes the `n_steps` increments of `path` into `out`.
    pub fn fill_increments(&self, path: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.grid.n_steps());
        let (stream, sign) = if self.antithetic {
            (path / 2, if path % 2 == 1 { -1.0 } else { 1.0 })
        } else {
            (path, 1.0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream as u64);
        let sd = self.grid.dt().sqrt() * sign;
        for dw in out.iter_mut() {
            // Open-interval uniform from the top 53 bits.
            let u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
            *dw = sd * normal_quantile(u);
        }
    }
}

/// Increments of `n_paths` Brownian paths, stored path-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianBatch {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub seed: u64,
    increments: Vec<f64>,
}

impl BrownianBatch {
    pub fn path(&self, i: usize) -> &[f64] {
        let n = self.grid.n_steps();
        &self.increments[i * n..(i + 1) * n]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }
}

pub fn generate_brownian(grid: TimeGrid, n_paths: usize, seed: u64) -> Result<BrownianBatch> {
    generate_from(&BrownianSource::new(grid, seed), n_paths)
}

pub fn generate_from(source: &BrownianSource, n_paths: usize) -> Result<BrownianBatch> {
    if n_paths == 0 {
        return Err(invalid("n_paths", "at least one path is required"));
    }
    let n = source.grid.n_steps();
    let mut increments = vec![0.0; n * n_paths];
    increments
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, chunk)| source.fill_increments(i, chunk));
    Ok(BrownianBatch {
        grid: source.grid,
        n_paths,
        seed: source.seed,
        increments,
    })
}

/// Euler-Maruyama path of `model` from `x0`; returns the first step whose
/// value is non-finite, if any. Values after a divergence are left NaN.
pub fn euler_path(
    model: &dyn Model,
    grid: &TimeGrid,
    x0: f64,
    increments: &[f64],
    values: &mut [f64],
) -> Option<usize> {
    let dt = grid.dt();
    values[0] = x0;
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        let x = values[k];
        let next = x + model.drift(t, x) * dt + model.diffusion(t, x) * increments[k];
        if !next.is_finite() {
            values[k + 1..].fill(f64::NAN);
            return Some(k + 1);
        }
        values[k + 1] = next;
    }
    None
}

/// Exact solution `x0 * exp(W - (t - t0) / 2)` of `dX = X dW`.
pub fn gbm_exact_path(grid: &TimeGrid, x0: f64, increments: &[f64], values: &mut [f64]) {
    values[0] = x0;
    let mut w = 0.0;
    for k in 0..grid.n_steps() {
        w += increments[k];
        let elapsed = (k + 1) as f64 * grid.dt();
        values[k + 1] = x0 * (w - 0.5 * elapsed).exp();
    }
}

/// Simulates one path with the sampler the model asks for.
pub fn model_path(
    model: &dyn Model,
    grid: &TimeGrid,
    x0: f64,
    increments: &[f64],
    values: &mut [f64],
) -> Option<usize> {
    match model.sampler() {
        MarketSampler::Euler => euler_path(model, grid, x0, increments, values),
        MarketSampler::ExactGbm => {
            gbm_exact_path(grid, x0, increments, values);
            None
        }
    }
}

/// Simulated factor paths together with the increments that drove them.
#[derive(Clone, Debug)]
pub struct MarketPath {
    pub grid: TimeGrid,
    pub x0: f64,
    pub n_paths: usize,
    values: Vec<f64>,
    increments: Vec<f64>,
    /// First non-finite step of each diverged path.
    pub diverged: Vec<Option<usize>>,
}

impl MarketPath {
    pub fn path(&self, i: usize) -> &[f64] {
        let n = self.grid.n_points();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn increments(&self, i: usize) -> &[f64] {
        let n = self.grid.n_steps();
        &self.increments[i * n..(i + 1) * n]
    }

    pub fn is_diverged(&self, i: usize) -> bool {
        self.diverged[i].is_some()
    }

    pub fn n_diverged(&self) -> usize {
        self.diverged.iter().filter(|d| d.is_some()).count()
    }

    /// Writes `path_id, step, t, w_increment, x`; the increment column holds
    /// the draw of the step ending at the row's time and is empty at step 0.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "path_id,step,t,w_increment,x")?;
        for i in 0..self.n_paths {
            let xs = self.path(i);
            let dw = self.increments(i);
            for (k, x) in xs.iter().enumerate() {
                let t = self.grid.time(k);
                if k == 0 {
                    writeln!(out, "{i},{k},{t},,{x}")?;
                } else {
                    writeln!(out, "{i},{k},{t},{},{x}", dw[k - 1])?;
                }
            }
        }
        Ok(())
    }
}

fn check_batch(grid: &TimeGrid, batch: &BrownianBatch) -> Result<()> {
    if batch.grid != *grid {
        return Err(SmpError::GridMismatch(
            "Brownian batch was generated on a different grid".into(),
        ));
    }
    Ok(())
}

/// Euler-Maruyama simulation; diverged paths are flagged, not dropped.
pub fn simulate_sde(
    model: &dyn Model,
    grid: &TimeGrid,
    x0: f64,
    batch: &BrownianBatch,
) -> Result<MarketPath> {
    check_batch(grid, batch)?;
    let np = grid.n_points();
    let mut values = vec![0.0; np * batch.n_paths];
    let diverged = values
        .par_chunks_mut(np)
        .enumerate()
        .map(|(i, chunk)| euler_path(model, grid, x0, batch.path(i), chunk))
        .collect();
    Ok(MarketPath {
        grid: *grid,
        x0,
        n_paths: batch.n_paths,
        values,
        increments: batch.increments.clone(),
        diverged,
    })
}

pub fn simulate_gbm_exact(grid: &TimeGrid, x0: f64, batch: &BrownianBatch) -> Result<MarketPath> {
    check_batch(grid, batch)?;
    if !(x0 > 0.0) || !x0.is_finite() {
        return Err(invalid("x0", format!("{x0} must be positive")));
    }
    let np = grid.n_points();
    let mut values = vec![0.0; np * batch.n_paths];
    values
        .par_chunks_mut(np)
        .enumerate()
        .for_each(|(i, chunk)| gbm_exact_path(grid, x0, batch.path(i), chunk));
    Ok(MarketPath {
        grid: *grid,
        x0,
        n_paths: batch.n_paths,
        values,
        increments: batch.increments.clone(),
        diverged: vec![None; batch.n_paths],
    })
}

/// Simulates with whichever sampler the model registers.
pub fn simulate_model(
    model: &dyn Model,
    grid: &TimeGrid,
    x0: f64,
    batch: &BrownianBatch,
) -> Result<MarketPath> {
    match model.sampler() {
        MarketSampler::Euler => simulate_sde(model, grid, x0, batch),
        MarketSampler::ExactGbm => simulate_gbm_exact(grid, x0, batch),
    }
}

//! Market dynamics and payoff functions of a liquidation problem.
//!
//! A [`Model`] bundles the factor dynamics `dX = mu(t, X) dt + sigma(t, X) dW`,
//! the terminal payoff `g(x, q)`, the running payoff `f(t, pi, x, q)` and the
//! inventory partials that drive the adjoint equation.

use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// How market paths are generated from Brownian increments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarketSampler {
    /// Explicit Euler-Maruyama on the model's drift and diffusion.
    Euler,
    /// Exact solution of `dX = X dW` (drift and diffusion are then ignored).
    ExactGbm,
}

pub trait Model: Send + Sync {
    fn drift(&self, t: f64, x: f64) -> f64;
    fn diffusion(&self, t: f64, x: f64) -> f64;
    fn terminal_payoff(&self, x: f64, q: f64) -> f64;
    fn running_payoff(&self, t: f64, rate: f64, x: f64, q: f64) -> f64;
    fn terminal_payoff_dq(&self, x: f64, q: f64) -> f64;
    fn running_payoff_dq(&self, t: f64, rate: f64, x: f64, q: f64) -> f64;

    /// Constant `K` of the growth and Lipschitz bounds, when known.
    fn lipschitz_constant(&self) -> Option<f64> {
        None
    }

    fn sampler(&self) -> MarketSampler {
        MarketSampler::Euler
    }

    /// Adjoint value `Y_t` at `(t, x, q)` when it is known in closed form.
    fn closed_form_adjoint(&self, _t: f64, _x: f64, _q: f64) -> Option<f64> {
        None
    }

    fn name(&self) -> &str {
        "custom"
    }
}

/// Liquidation without impact: `g = 0`, `f = pi * x`, `dX = X dW`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleModel;

impl Model for ExampleModel {
    fn drift(&self, _t: f64, _x: f64) -> f64 {
        0.0
    }
    fn diffusion(&self, _t: f64, x: f64) -> f64 {
        x
    }
    fn terminal_payoff(&self, _x: f64, _q: f64) -> f64 {
        0.0
    }
    fn running_payoff(&self, _t: f64, rate: f64, x: f64, _q: f64) -> f64 {
        rate * x
    }
    fn terminal_payoff_dq(&self, _x: f64, _q: f64) -> f64 {
        0.0
    }
    fn running_payoff_dq(&self, _t: f64, _rate: f64, _x: f64, _q: f64) -> f64 {
        0.0
    }
    fn lipschitz_constant(&self) -> Option<f64> {
        Some(1.0)
    }
    fn sampler(&self) -> MarketSampler {
        MarketSampler::ExactGbm
    }
    fn closed_form_adjoint(&self, _t: f64, _x: f64, _q: f64) -> Option<f64> {
        Some(0.0)
    }
    fn name(&self) -> &str {
        "example"
    }
}

/// Model with constant inventory partials: `f = pi * x + a * q`, `g = b * q`,
/// driftless geometric factor. The adjoint is `b + a (T - t)` while the
/// inventory is never depleted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearDriverModel {
    pub a: f64,
    pub b: f64,
}

impl Model for LinearDriverModel {
    fn drift(&self, _t: f64, _x: f64) -> f64 {
        0.0
    }
    fn diffusion(&self, _t: f64, x: f64) -> f64 {
        x
    }
    fn terminal_payoff(&self, _x: f64, q: f64) -> f64 {
        self.b * q
    }
    fn running_payoff(&self, _t: f64, rate: f64, x: f64, q: f64) -> f64 {
        rate * x + self.a * q
    }
    fn terminal_payoff_dq(&self, _x: f64, _q: f64) -> f64 {
        self.b
    }
    fn running_payoff_dq(&self, _t: f64, _rate: f64, _x: f64, _q: f64) -> f64 {
        self.a
    }
    fn sampler(&self) -> MarketSampler {
        MarketSampler::ExactGbm
    }
    fn name(&self) -> &str {
        "linear-oracle"
    }
}

/// Residual inventory marked to the factor at the stop: `g = x * q`, `f = pi * x`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MarkToMarketModel;

impl Model for MarkToMarketModel {
    fn drift(&self, _t: f64, _x: f64) -> f64 {
        0.0
    }
    fn diffusion(&self, _t: f64, x: f64) -> f64 {
        x
    }
    fn terminal_payoff(&self, x: f64, q: f64) -> f64 {
        x * q
    }
    fn running_payoff(&self, _t: f64, rate: f64, x: f64, _q: f64) -> f64 {
        rate * x
    }
    fn terminal_payoff_dq(&self, x: f64, _q: f64) -> f64 {
        x
    }
    fn running_payoff_dq(&self, _t: f64, _rate: f64, _x: f64, _q: f64) -> f64 {
        0.0
    }
    fn name(&self) -> &str {
        "mark-to-market"
    }
}

type Fn2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type Fn4 = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;

/// Model assembled from user closures.
#[derive(Clone)]
pub struct ModelSpec {
    pub drift: Fn2,
    pub diffusion: Fn2,
    pub terminal_payoff: Fn2,
    pub running_payoff: Fn4,
    pub terminal_payoff_dq: Fn2,
    pub running_payoff_dq: Fn4,
    pub lipschitz_constant: Option<f64>,
    pub sampler: MarketSampler,
}

impl ModelSpec {
    /// A model with zero dynamics and zero payoffs; override fields as needed.
    pub fn zero() -> Self {
        Self {
            drift: Arc::new(|_, _| 0.0),
            diffusion: Arc::new(|_, _| 0.0),
            terminal_payoff: Arc::new(|_, _| 0.0),
            running_payoff: Arc::new(|_, _, _, _| 0.0),
            terminal_payoff_dq: Arc::new(|_, _| 0.0),
            running_payoff_dq: Arc::new(|_, _, _, _| 0.0),
            lipschitz_constant: None,
            sampler: MarketSampler::Euler,
        }
    }

    pub fn with_dynamics(
        mut self,
        drift: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        diffusion: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.drift = Arc::new(drift);
        self.diffusion = Arc::new(diffusion);
        self
    }

    pub fn with_terminal(
        mut self,
        g: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        dq_g: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.terminal_payoff = Arc::new(g);
        self.terminal_payoff_dq = Arc::new(dq_g);
        self
    }

    pub fn with_running(
        mut self,
        f: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        dq_f: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.running_payoff = Arc::new(f);
        self.running_payoff_dq = Arc::new(dq_f);
        self
    }
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("lipschitz_constant", &self.lipschitz_constant)
            .field("sampler", &self.sampler)
            .finish_non_exhaustive()
    }
}

impl Model for ModelSpec {
    fn drift(&self, t: f64, x: f64) -> f64 {
        (self.drift)(t, x)
    }
    fn diffusion(&self, t: f64, x: f64) -> f64 {
        (self.diffusion)(t, x)
    }
    fn terminal_payoff(&self, x: f64, q: f64) -> f64 {
        (self.terminal_payoff)(x, q)
    }
    fn running_payoff(&self, t: f64, rate: f64, x: f64, q: f64) -> f64 {
        (self.running_payoff)(t, rate, x, q)
    }
    fn terminal_payoff_dq(&self, x: f64, q: f64) -> f64 {
        (self.terminal_payoff_dq)(x, q)
    }
    fn running_payoff_dq(&self, t: f64, rate: f64, x: f64, q: f64) -> f64 {
        (self.running_payoff_dq)(t, rate, x, q)
    }
    fn lipschitz_constant(&self) -> Option<f64> {
        self.lipschitz_constant
    }
    fn sampler(&self) -> MarketSampler {
        self.sampler
    }
}

/// Box from which argument pairs are drawn by [`audit_assumptions`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AuditDomain {
    pub horizon: f64,
    pub x_range: (f64, f64),
    pub q_max: f64,
    pub rate_max: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AuditReport {
    pub samples: usize,
    /// `(bound name, left side, right side)` for each violated inequality.
    pub violations: Vec<(String, f64, f64)>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Randomised spot check of the growth and Lipschitz bounds with constant `K`.
///
/// Returns `None` when the model does not declare a constant. This is an
/// audit on sampled argument pairs, not a proof.
pub fn audit_assumptions(
    model: &dyn Model,
    domain: &AuditDomain,
    samples: usize,
    seed: u64,
) -> Option<AuditReport> {
    let k = model.lipschitz_constant()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let slack = 1e-9;
    let mut report = AuditReport {
        samples,
        violations: Vec::new(),
    };
    let check = |name: &str, lhs: f64, rhs: f64, report: &mut AuditReport| {
        if lhs > rhs * (1.0 + slack) + slack {
            report.violations.push((name.to_string(), lhs, rhs));
        }
    };
    for _ in 0..samples {
        let (xlo, xhi) = domain.x_range;
        let t = unit() * domain.horizon;
        let t2 = unit() * domain.horizon;
        let x = xlo + unit() * (xhi - xlo);
        let x2 = xlo + unit() * (xhi - xlo);
        let q = unit() * domain.q_max;
        let q2 = unit() * domain.q_max;
        let p = unit() * domain.rate_max;
        let p2 = unit() * domain.rate_max;

        let lhs = (model.drift(t, x) - model.drift(t, x2)).abs()
            + (model.diffusion(t, x) - model.diffusion(t, x2)).abs();
        check(
            "coefficients lipschitz in x",
            lhs,
            k * (x - x2).abs(),
            &mut report,
        );

        let lhs = model.drift(t, x).abs() + model.diffusion(t, x).abs();
        check(
            "coefficients linear growth",
            lhs,
            k * (x.abs() + 1.0),
            &mut report,
        );

        let lhs = (model.terminal_payoff(x, q) - model.terminal_payoff(x, q2)).abs();
        check(
            "terminal payoff lipschitz in q",
            lhs,
            k * (1.0 + x.abs()) * (q - q2).abs(),
            &mut report,
        );

        let lhs = (model.running_payoff(t, p, x, q) - model.running_payoff(t2, p, x, q2)).abs();
        check(
            "running payoff lipschitz in (t, q)",
            lhs,
            k * ((q - q2).abs() + (t - t2).abs()),
            &mut report,
        );

        let lhs = (model.running_payoff(t, p, x, q) - model.running_payoff(t, p2, x2, q)).abs();
        let rhs =
            k * ((x - x2).abs() + (p - p2).abs()) * (1.0 + x.abs() + x2.abs() + p.abs() + p2.abs());
        check(
            "running payoff locally lipschitz in (pi, x)",
            lhs,
            rhs,
            &mut report,
        );

        let lhs = (model.running_payoff_dq(t, p, x, q) - model.running_payoff_dq(t, p, x, q2))
            .abs()
            + (model.terminal_payoff_dq(x, q) - model.terminal_payoff_dq(x, q2)).abs();
        check(
            "inventory partials lipschitz in q",
            lhs,
            k * (q - q2).abs(),
            &mut report,
        );
    }
    Some(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain() -> AuditDomain {
        AuditDomain {
            horizon: 1.0,
            x_range: (0.0, 5.0),
            q_max: 3.0,
            rate_max: 2.0,
        }
    }

    #[test]
    fn example_model_passes_audit() {
        let report = audit_assumptions(&ExampleModel, &domain(), 2000, 1).unwrap();
        assert!(report.passed(), "{:?}", report.violations);
    }

    #[test]
    fn audit_is_skipped_without_constant() {
        assert!(audit_assumptions(&MarkToMarketModel, &domain(), 10, 1).is_none());
    }

    #[test]
    fn audit_flags_superlinear_payoff() {
        let mut spec = ModelSpec::zero().with_terminal(|_, q| q * q * q, |_, q| 3.0 * q * q);
        spec.lipschitz_constant = Some(1.0);
        let report = audit_assumptions(&spec, &domain(), 500, 3).unwrap();
        assert!(!report.passed());
        assert!(report
            .violations
            .iter()
            .any(|(name, _, _)| name.contains("terminal payoff")));
    }

    #[test]
    fn example_model_partials() {
        let m = ExampleModel;
        assert_eq!(m.running_payoff(0.0, 1.0, 2.0, 0.3), 2.0);
        assert_eq!(m.terminal_payoff_dq(1.0, 1.0), 0.0);
        assert_eq!(m.closed_form_adjoint(0.0, 1.0, 1.0), Some(0.0));
        let lin = LinearDriverModel { a: 0.3, b: 0.7 };
        assert_eq!(lin.running_payoff_dq(0.0, 1.0, 2.0, 0.5), 0.3);
        assert_eq!(lin.terminal_payoff_dq(2.0, 0.5), 0.7);
    }
}

//! Numerical laboratory for optimal liquidation with a control-dependent
//! stopping time.
//!
//! The crate simulates a market factor and a controlled inventory, stops
//! each path when the inventory is exhausted or the horizon is reached, and
//! builds spike variations of the control to study how the stopping time
//! responds. On top of that it solves the adjoint equation on the random
//! horizon, estimates the correction term of the maximum principle for this
//! setting, and checks it on a capped-TWAP example for which every quantity
//! is known in closed form, including an independent finite-difference
//! solution of the example's HJB equation.
//!
//! ```
//! use smplab_core::{estimate_value, ExampleModel, McConfig, StartState, TimeGrid, TwapCapped};
//!
//! let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
//! let policy = TwapCapped { horizon: 1.0, c_plus: 2.0 };
//! let start = StartState { t: 0.0, x: 1.0, q: 0.5 };
//! let value = estimate_value(&ExampleModel, &policy, start, &grid, &McConfig::new(1000, 7)).unwrap();
//! assert!((value.mean - 0.5).abs() < 4.0 * value.std_error);
//! ```

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod adjoint;
pub mod closed_form;
pub mod control;
pub mod error;
pub mod grid;
pub mod hjb;
pub mod market;
pub mod model;
pub mod objective;
pub mod perturbation;
pub mod smp;
pub mod stats;

pub use adjoint::{
    solve_adjoint, verify_adjoint_identity, xi_process, AdjointSolution, Basis, XiTrajectory,
};
pub use closed_form::{
    example_control, example_fbar, example_tau_theta, example_value, example_w,
    remark_counterexample, ExampleConfig, WValue,
};
pub use control::{
    evaluate_path, evaluate_policy, twap_capped_policy, ConstantRate, ControlPolicy,
    ControlTrajectory, ControlledPath, InventoryTrajectory, LinearSchedule, PriceProportional,
    StopReason, TwapCapped,
};
pub use error::{Result, SmpError};
pub use grid::TimeGrid;
pub use hjb::{
    hjb_verify_control, solve_example_hjb, solve_example_hjb_with, HjbScheme, HjbSolution,
    NodeOptimizer,
};
pub use market::{
    generate_brownian, simulate_gbm_exact, simulate_model, simulate_sde, BrownianBatch,
    BrownianSource, MarketPath,
};
pub use model::{
    ExampleModel, LinearDriverModel, MarkToMarketModel, MarketSampler, Model, ModelSpec,
};
pub use objective::{
    estimate_value, gain_quotient, McConfig, MonteCarloEstimate, PathSimulator, StartState,
};
pub use perturbation::{
    classify_event, gamma_process, hat_quantities, perturb_control, perturb_path, Event,
    PathPerturbation, PerturbationOutcome, PerturbationSpec,
};
pub use smp::{
    estimate_fbar, estimate_gbar, estimate_indicator_term, hamiltonian, smp_check,
    standard_smp_check, LimitEstimate, SmpConfig, SmpReport, SmpStatus, StandardReport,
};

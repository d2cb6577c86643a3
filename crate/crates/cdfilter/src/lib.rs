//! Simulation and control toolkit for a continuous-disc (CD) vacuum filter.
//!
//! The plant couples five states — disc speed, vacuum-receiver pressure, vat
//! solids concentration, cake thickness, and filtrate flow — driven by six
//! inputs. This crate provides:
//!
//! * [`plant`] — the nonlinear dynamic model and filtration-efficiency formula,
//! * [`equilibrium`] — closed-form steady-state operating points with residual
//!   verification,
//! * [`linearize`] — the deviation-variable state-space model, a
//!   finite-difference Jacobian oracle, and ZOH/Euler discretization,
//! * [`pi`] — a decentralized PI architecture (speed, concentration, and a
//!   filtrate-flow/vacuum cascade) with anti-windup,
//! * [`mpc`] — centralized linear MPC backed by a dense active-set QP solver
//!   ([`qp`]),
//! * [`simulate`] — a fixed-step RK4 closed-loop engine,
//! * [`analyze`] — ISE / overshoot / settling-time / error-σ metrics and the
//!   filtration-efficiency surface,
//! * [`scenario`] + [`csvio`] — TOML scenario files and CSV artifacts for the
//!   `cdfilter` command-line tool.

pub mod analyze;
pub mod csvio;
pub mod equilibrium;
pub mod linearize;
pub mod mpc;
pub mod pi;
pub mod plant;
pub mod qp;
pub mod scenario;
pub mod simulate;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

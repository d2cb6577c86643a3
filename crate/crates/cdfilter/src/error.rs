use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Total filtration resistance evaluated to a non-positive value.
    #[error("non-positive total filtration resistance: {0} Pa·s/m³")]
    NonPositiveResistance(f64),

    /// Filtration efficiency is undefined when no solids enter the vat.
    #[error("zero inflow solids: f_in·c_in = {0} must be positive")]
    ZeroInflowSolids(f64),

    /// Steady-state vacuum pressure at or above atmospheric leaves no driving
    /// pressure for filtration.
    #[error("invalid vacuum: p_v_ss = {p_v_ss} Pa >= p_atm = {p_atm} Pa (zero driving pressure)")]
    InvalidVacuum { p_v_ss: f64, p_atm: f64 },

    /// The analytic state-space structure assumes a constant total resistance.
    #[error("unsupported resistance mode: linearization requires constant_total")]
    UnsupportedResistanceMode,

    /// A PI loop cannot be tuned because its extracted local gain is zero.
    #[error("degenerate loop `{0}`: extracted local gain is zero")]
    DegenerateLoop(&'static str),

    /// Reference mapping requires a nonzero steady flow.
    #[error("zero steady flow: {0}")]
    ZeroSteadyFlow(&'static str),

    /// The QP has no feasible point.
    #[error("infeasible QP{}", at_time(*.at))]
    QpInfeasible { at: Option<f64> },

    /// The QP solver hit its iteration cap.
    #[error("QP iteration limit reached{}", at_time(*.at))]
    QpIterationLimit { at: Option<f64> },

    /// A state magnitude exceeded the blow-up guard during integration.
    #[error("numerical blow-up at t = {t} s: |{state}| = {value:e} exceeds 1e12")]
    NumericalBlowup {
        t: f64,
        state: &'static str,
        value: f64,
    },

    /// A step/settling metric needs distinct initial and final references.
    #[error("degenerate step: initial and final references are equal ({0})")]
    DegenerateStep(f64),

    /// Scenario or parameter validation failure.
    #[error("invalid configuration: {0}")]
    Invalid(String),

    /// Scenario file could not be parsed.
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn at_time(at: Option<f64>) -> String {
    match at {
        Some(t) => format!(" at t = {t} s"),
        None => String::new(),
    }
}

impl Error {
    /// Shorthand for validation failures.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

//! Closed-form steady-state operating points.
//!
//! Setting all five time derivatives to zero yields an algebraic system in
//! the unknowns `[T_m, q_air_in, f_in, H, q_f]` given the process-specified
//! quantities (speed, vacuum, concentrations, outflow). The system solves in
//! closed form; every candidate operating point is verifiable through its raw
//! balance residuals.

use serde::{Deserialize, Serialize};

use crate::plant::{self, PlantInput, PlantParams, PlantState, ResistanceMode};
use crate::{Error, Result};

const EPS: f64 = 1e-12;

/// Steady-state quantities assumed known from process specifications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteadyKnowns {
    /// Disc speed [rad/s]; must be positive.
    pub omega_ss: f64,
    /// Vacuum-receiver absolute pressure [Pa]; must satisfy `0 ≤ p_v < p_atm`.
    pub p_v_ss: f64,
    /// Vat solids concentration [kg/m³].
    pub c_r_ss: f64,
    /// Inflow solids concentration [kg/m³]; must be positive.
    pub c_in_ss: f64,
    /// Slurry outflow [m³/s].
    pub f_out_ss: f64,
    /// Vacuum-pump extraction flow [m³/s].
    pub q_air_out_ss: f64,
}

impl SteadyKnowns {
    pub fn validate(&self, params: &PlantParams) -> Result<()> {
        if !(self.omega_ss > 0.0) {
            return Err(Error::invalid(format!(
                "omega_ss must be > 0, got {}",
                self.omega_ss
            )));
        }
        if !(self.c_in_ss > 0.0) {
            return Err(Error::invalid(format!(
                "c_in_ss must be > 0, got {}",
                self.c_in_ss
            )));
        }
        if !(self.p_v_ss >= 0.0) || self.p_v_ss >= params.p_atm {
            if self.p_v_ss >= params.p_atm {
                return Err(Error::InvalidVacuum {
                    p_v_ss: self.p_v_ss,
                    p_atm: params.p_atm,
                });
            }
            return Err(Error::invalid(format!(
                "p_v_ss must be >= 0, got {}",
                self.p_v_ss
            )));
        }
        if !(self.c_r_ss >= 0.0) || !(self.f_out_ss >= 0.0) || !(self.q_air_out_ss >= 0.0) {
            return Err(Error::invalid(
                "c_r_ss, f_out_ss, q_air_out_ss must be >= 0".to_string(),
            ));
        }
        Ok(())
    }
}

/// A state/input pair at which all five time derivatives vanish.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub x_ss: PlantState,
    pub u_ss: PlantInput,
}

/// Solve the steady-state system for the given knowns.
///
/// With constant total resistance the solution is direct:
/// `q_f = (P_atm − P_v)/R_tot`, `H = C_R·q_f/(ρ_c·A·ω)`,
/// `T_m = k_d·ω + k_c·H`, `f_in = f_out·C_R/C_in`, `q_air_in = q_air_out`.
/// In `LinearInCake` mode the cake/flow pair couples through the resistance;
/// it reduces to the positive root of a quadratic in `H` and stays closed
/// form.
pub fn solve_steady_state(params: &PlantParams, known: &SteadyKnowns) -> Result<OperatingPoint> {
    params.validate()?;
    known.validate(params)?;
    if known.p_v_ss >= params.p_atm {
        return Err(Error::InvalidVacuum {
            p_v_ss: known.p_v_ss,
            p_atm: params.p_atm,
        });
    }

    let dp = params.p_atm - known.p_v_ss;
    let removal = params.rho_c * params.area * known.omega_ss;

    let (h_ss, q_f_ss) = match params.resistance_mode {
        ResistanceMode::ConstantTotal => {
            let r_tot = plant::total_resistance(params, 0.0)?;
            let q_f = dp / r_tot;
            (known.c_r_ss * q_f / removal, q_f)
        }
        ResistanceMode::LinearInCake => {
            // H·(r_m + r_c·H)·ρ_c·A·ω = C_R·ΔP, positive root in H.
            let r_c = params.r_cake_specific;
            let r_m = params.r_medium;
            let h = if r_c == 0.0 {
                known.c_r_ss * dp / (r_m * removal)
            } else {
                let disc = r_m * r_m + 4.0 * r_c * known.c_r_ss * dp / removal;
                (-r_m + disc.sqrt()) / (2.0 * r_c)
            };
            let q_f = dp / plant::total_resistance(params, h)?;
            (h, q_f)
        }
    };

    let op = OperatingPoint {
        x_ss: PlantState {
            omega: known.omega_ss,
            p_v: known.p_v_ss,
            c_r: known.c_r_ss,
            h_cake: h_ss,
            q_f: q_f_ss,
        },
        u_ss: PlantInput {
            t_m: params.k_d * known.omega_ss + params.k_c * h_ss,
            q_air_in: known.q_air_out_ss,
            q_air_out: known.q_air_out_ss,
            f_in: known.f_out_ss * known.c_r_ss / known.c_in_ss,
            c_in: known.c_in_ss,
            f_out: known.f_out_ss,
        },
    };
    Ok(op)
}

/// The five raw steady-state balances evaluated at `op`.
///
/// These are the plant derivatives with the constant factors `1/J`,
/// `R_g·T/V_g`, `1/V_vat`, and `1/τ_q` stripped:
/// torque, gas flow, solids flow, cake, and Darcy balances.
pub fn residual(params: &PlantParams, op: &OperatingPoint) -> Result<[f64; 5]> {
    let x = &op.x_ss;
    let u = &op.u_ss;
    let r_tot = plant::total_resistance(params, x.h_cake)?;
    Ok([
        u.t_m - params.k_d * x.omega - params.k_c * x.h_cake,
        u.q_air_in - u.q_air_out,
        u.f_in * u.c_in - u.f_out * x.c_r,
        x.c_r * x.q_f / (params.rho_c * params.area) - x.omega * x.h_cake,
        (params.p_atm - x.p_v) / r_tot - x.q_f,
    ])
}

/// Characteristic magnitude of each balance, used to make the residual norm
/// meaningful across disparate units.
fn balance_scales(params: &PlantParams, op: &OperatingPoint) -> Result<[f64; 5]> {
    let x = &op.x_ss;
    let u = &op.u_ss;
    let r_tot = plant::total_resistance(params, x.h_cake)?;
    Ok([
        (params.k_d * x.omega.abs()).max(u.t_m.abs()) + EPS,
        u.q_air_out.abs().max(u.q_air_in.abs()) + EPS,
        (u.f_out * x.c_r).abs().max((u.f_in * u.c_in).abs()) + EPS,
        (x.omega * x.h_cake)
            .abs()
            .max((x.c_r * x.q_f / (params.rho_c * params.area)).abs())
            + EPS,
        x.q_f.abs().max((params.p_atm - x.p_v).abs() / r_tot) + EPS,
    ])
}

/// Infinity norm of the residual with each component normalized by its
/// characteristic magnitude.
pub fn scaled_residual_norm(params: &PlantParams, op: &OperatingPoint) -> Result<f64> {
    let res = residual(params, op)?;
    let scales = balance_scales(params, op)?;
    Ok(res
        .iter()
        .zip(scales.iter())
        .map(|(r, s)| (r / s).abs())
        .fold(0.0, f64::max))
}

/// Infinity norm of the plant derivative at `op`, normalized per state by the
/// characteristic rate of its balance.
pub fn scaled_derivative_norm(params: &PlantParams, op: &OperatingPoint) -> Result<f64> {
    let d = plant::derivative(params, &op.x_ss, &op.u_ss)?.to_vector();
    let s = balance_scales(params, op)?;
    let rate_scales = [
        s[0] / params.j_inertia,
        s[1] * params.gas_gain(),
        s[2] / params.v_vat,
        s[3],
        s[4] / params.tau_q,
    ];
    Ok(d
        .iter()
        .zip(rate_scales.iter())
        .map(|(v, s)| (v / s).abs())
        .fold(0.0, f64::max))
}

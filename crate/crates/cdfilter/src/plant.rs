//! Nonlinear dynamic model of the CD-filter plant.
//!
//! Five coupled states: disc angular speed, vacuum-receiver absolute pressure,
//! vat solids concentration, cake thickness, and filtrate flow. All quantities
//! are strict SI (Pa, m³/s, kg/m³, rad/s). The right-hand side is a pure
//! function of parameters, state, and input, safe to evaluate concurrently.

use nalgebra::{SVector, Vector5, Vector6};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How total filtration resistance depends on cake thickness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResistanceMode {
    /// `r_medium` carries the whole (constant) total resistance.
    #[default]
    ConstantTotal,
    /// Total resistance grows linearly with cake thickness:
    /// `r_medium + r_cake_specific · h_cake`.
    LinearInCake,
}

/// Physical constants of the plant plus the resistance-model switch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantParams {
    /// Atmospheric pressure [Pa].
    pub p_atm: f64,
    /// Total shaft rotational inertia [kg·m²].
    pub j_inertia: f64,
    /// Viscous damping coefficient [N·m·s/rad].
    pub k_d: f64,
    /// Cake resistance coefficient [N·m/m].
    pub k_c: f64,
    /// Filtrate-flow response time constant [s].
    pub tau_q: f64,
    /// Universal gas constant [J/(mol·K)].
    pub r_gas: f64,
    /// Absolute temperature [K].
    pub temp: f64,
    /// Free gas volume in the vacuum receiver [m³].
    pub v_gas: f64,
    /// Feed vat volume [m³].
    pub v_vat: f64,
    /// Dry cake bulk density [kg/m³].
    pub rho_c: f64,
    /// Filtration area [m²].
    pub area: f64,
    /// Medium resistance [Pa·s/m³]; carries the whole total resistance in
    /// `ConstantTotal` mode.
    pub r_medium: f64,
    /// Per-thickness cake resistance [Pa·s/m⁴]; 0 in `ConstantTotal` mode.
    pub r_cake_specific: f64,
    /// Resistance model selector.
    pub resistance_mode: ResistanceMode,
}

impl Default for PlantParams {
    /// Reference parameter set of the modeled industrial unit.
    ///
    /// The published total resistance of 125,000 kPa·s is read as
    /// 1.25e8 Pa·s/m³ so that Darcy flow `ΔP / R_tot` yields m³/s.
    fn default() -> Self {
        PlantParams {
            p_atm: 101_300.0,
            j_inertia: 3.5,
            k_d: 17.5,
            k_c: 1_000.0,
            tau_q: 3.0,
            r_gas: 8.314,
            temp: 313.0,
            v_gas: 0.055,
            v_vat: 3.0,
            rho_c: 1_050.0,
            area: 40.0,
            r_medium: 1.25e8,
            r_cake_specific: 0.0,
            resistance_mode: ResistanceMode::ConstantTotal,
        }
    }
}

impl PlantParams {
    /// Check the structural invariants (strict positivity of inertias,
    /// volumes, densities, areas; non-negativity of friction coefficients).
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("j_inertia", self.j_inertia),
            ("tau_q", self.tau_q),
            ("v_gas", self.v_gas),
            ("v_vat", self.v_vat),
            ("rho_c", self.rho_c),
            ("area", self.area),
            ("p_atm", self.p_atm),
            ("r_gas", self.r_gas),
            ("temp", self.temp),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        let non_negative = [
            ("k_d", self.k_d),
            ("k_c", self.k_c),
            ("r_medium", self.r_medium),
            ("r_cake_specific", self.r_cake_specific),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Lumped gas-balance gain `r_gas · temp / v_gas` [Pa/m³·(m³/s)⁻¹-ish];
    /// implemented exactly as the pressure balance states it.
    pub fn gas_gain(&self) -> f64 {
        self.r_gas * self.temp / self.v_gas
    }
}

/// The five plant states.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    /// Disc angular speed [rad/s].
    pub omega: f64,
    /// Vacuum-receiver absolute pressure [Pa].
    pub p_v: f64,
    /// Vat solids concentration [kg/m³].
    pub c_r: f64,
    /// Cake thickness [m].
    pub h_cake: f64,
    /// Filtrate flow [m³/s].
    pub q_f: f64,
}

impl PlantState {
    pub const ZERO: PlantState = PlantState {
        omega: 0.0,
        p_v: 0.0,
        c_r: 0.0,
        h_cake: 0.0,
        q_f: 0.0,
    };

    pub fn to_vector(self) -> Vector5<f64> {
        SVector::from([self.omega, self.p_v, self.c_r, self.h_cake, self.q_f])
    }

    pub fn from_vector(v: &Vector5<f64>) -> Self {
        PlantState {
            omega: v[0],
            p_v: v[1],
            c_r: v[2],
            h_cake: v[3],
            q_f: v[4],
        }
    }

    /// Names of the state components, in vector order.
    pub const NAMES: [&'static str; 5] = ["omega", "p_v", "c_r", "h_cake", "q_f"];
}

/// The six plant inputs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantInput {
    /// Motor torque [N·m].
    pub t_m: f64,
    /// Air/vapor inflow into the receiver [m³/s].
    pub q_air_in: f64,
    /// Air/vapor extraction by the vacuum pump [m³/s].
    pub q_air_out: f64,
    /// Slurry inflow [m³/s].
    pub f_in: f64,
    /// Inflow solids concentration [kg/m³].
    pub c_in: f64,
    /// Slurry outflow [m³/s].
    pub f_out: f64,
}

impl PlantInput {
    pub const ZERO: PlantInput = PlantInput {
        t_m: 0.0,
        q_air_in: 0.0,
        q_air_out: 0.0,
        f_in: 0.0,
        c_in: 0.0,
        f_out: 0.0,
    };

    pub fn to_vector(self) -> Vector6<f64> {
        SVector::from([
            self.t_m,
            self.q_air_in,
            self.q_air_out,
            self.f_in,
            self.c_in,
            self.f_out,
        ])
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        PlantInput {
            t_m: v[0],
            q_air_in: v[1],
            q_air_out: v[2],
            f_in: v[3],
            c_in: v[4],
            f_out: v[5],
        }
    }

    /// Names of the input components, in vector order.
    pub const NAMES: [&'static str; 6] = ["t_m", "q_air_in", "q_air_out", "f_in", "c_in", "f_out"];
}

/// Time derivative of [`PlantState`], same field order, per-second units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateDerivative {
    pub d_omega: f64,
    pub d_p_v: f64,
    pub d_c_r: f64,
    pub d_h_cake: f64,
    pub d_q_f: f64,
}

impl StateDerivative {
    pub fn to_vector(self) -> Vector5<f64> {
        SVector::from([
            self.d_omega,
            self.d_p_v,
            self.d_c_r,
            self.d_h_cake,
            self.d_q_f,
        ])
    }
}

/// Resistive torque opposing disc rotation: `k_d·ω + k_c·H`.
pub fn resistive_torque(params: &PlantParams, omega: f64, h_cake: f64) -> f64 {
    params.k_d * omega + params.k_c * h_cake
}

/// Total filtration resistance at the given cake thickness [Pa·s/m³].
///
/// `ConstantTotal` ignores the cake; `LinearInCake` adds
/// `r_cake_specific · h_cake` on top of the medium resistance.
pub fn total_resistance(params: &PlantParams, h_cake: f64) -> Result<f64> {
    let r = match params.resistance_mode {
        ResistanceMode::ConstantTotal => params.r_medium,
        ResistanceMode::LinearInCake => params.r_medium + params.r_cake_specific * h_cake,
    };
    if r > 0.0 {
        Ok(r)
    } else {
        Err(Error::NonPositiveResistance(r))
    }
}

/// Right-hand side of the five plant ODEs.
///
/// * torque balance: `dω/dt = (T_m − k_d·ω − k_c·H) / J`
/// * receiver pressure: `dP_v/dt = (R_g·T/V_g)·(q_air_in − q_air_out)`
/// * vat solids: `dC_R/dt = (f_in·C_in − f_out·C_R) / V_vat`
/// * cake growth: `dH/dt = C_R·q_f/(ρ_c·A) − ω·H`
/// * Darcy flow lag: `dq_f/dt = ((P_atm − P_v)/R_tot − q_f) / τ_q`
pub fn derivative(params: &PlantParams, x: &PlantState, u: &PlantInput) -> Result<StateDerivative> {
    let r_tot = total_resistance(params, x.h_cake)?;
    Ok(StateDerivative {
        d_omega: (u.t_m - resistive_torque(params, x.omega, x.h_cake)) / params.j_inertia,
        d_p_v: params.gas_gain() * (u.q_air_in - u.q_air_out),
        d_c_r: (u.f_in * u.c_in - u.f_out * x.c_r) / params.v_vat,
        d_h_cake: x.c_r * x.q_f / (params.rho_c * params.area) - x.omega * x.h_cake,
        d_q_f: ((params.p_atm - x.p_v) / r_tot - x.q_f) / params.tau_q,
    })
}

/// Filtration efficiency [%]: share of incoming solids retained on the disc.
///
/// `η = 100·(1 − q_f·c_r / (f_in·c_in))`. May be negative; never exceeds 100
/// for non-negative arguments.
pub fn efficiency(q_f: f64, c_r: f64, f_in: f64, c_in: f64) -> Result<f64> {
    let inflow_solids = f_in * c_in;
    if inflow_solids <= 0.0 {
        return Err(Error::ZeroInflowSolids(inflow_solids));
    }
    Ok(100.0 * (1.0 - q_f * c_r / inflow_solids))
}

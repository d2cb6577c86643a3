//! Decentralized PI architecture.
//!
//! Three loops act in deviation coordinates around a declared operating
//! point: disc speed via motor torque, vat concentration via inflow
//! concentration, and a filtrate-flow/vacuum cascade where the outer loop
//! sets a vacuum-pressure setpoint served by an inner air-inflow loop. The
//! outer cascade loop is reverse-acting — raising the vacuum setpoint lowers
//! flow — so its gains carry a negative sign.

use serde::{Deserialize, Serialize};

use crate::equilibrium::OperatingPoint;
use crate::linearize::LinearModel;
use crate::{Error, Result};

/// Gains and output limits of one PI compensator.
///
/// For reverse-acting loops `kp` and `ki` are both negative; they must share
/// a sign for the integral action to stabilize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiGains {
    pub kp: f64,
    /// Integral gain [1/s].
    pub ki: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Anti-windup back-calculation gain [1/s].
    pub kaw: f64,
}

impl PiGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.u_min < self.u_max) {
            return Err(Error::invalid(format!(
                "PI output limits must satisfy u_min < u_max, got [{}, {}]",
                self.u_min, self.u_max
            )));
        }
        if !(self.kaw >= 0.0) {
            return Err(Error::invalid(format!("kaw must be >= 0, got {}", self.kaw)));
        }
        if self.kp * self.ki < 0.0 {
            return Err(Error::invalid(
                "kp and ki must not have opposite signs".to_string(),
            ));
        }
        Ok(())
    }
}

/// Integrator state of one PI compensator (controller-output units).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PiState {
    pub integral: f64,
}

/// One explicit-Euler PI step with back-calculation anti-windup.
///
/// The integral is advanced first, the raw output `kp·e + integral` clamped,
/// and the clamping excess fed back at rate `kaw`.
pub fn pi_step(gains: &PiGains, state: PiState, error: f64, dt: f64) -> (f64, PiState) {
    debug_assert!(dt > 0.0);
    let advanced = state.integral + gains.ki * error * dt;
    let raw = gains.kp * error + advanced;
    let output = raw.clamp(gains.u_min, gains.u_max);
    let integral = advanced + gains.kaw * (output - raw) * dt;
    (output, PiState { integral })
}

/// Direction of the static inflow-to-speed reference map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefMapDirection {
    /// `ω* = (ω_ss / f_in_ss) · f_in*` — dimensionally consistent.
    #[default]
    Consistent,
    /// `ω* = (f_in_ss / ω_ss) · f_in*` — as the source text prints it; kept
    /// for fidelity experiments.
    PaperLiteral,
}

/// Static gain mapping an inflow reference to an equivalent speed reference.
pub fn map_fin_ref_to_omega_ref(
    op: &OperatingPoint,
    fin_ref: f64,
    direction: RefMapDirection,
) -> Result<f64> {
    match direction {
        RefMapDirection::Consistent => {
            if op.u_ss.f_in <= 0.0 {
                return Err(Error::ZeroSteadyFlow("f_in_ss must be positive"));
            }
            Ok(op.x_ss.omega / op.u_ss.f_in * fin_ref)
        }
        RefMapDirection::PaperLiteral => {
            if op.x_ss.omega <= 0.0 {
                return Err(Error::ZeroSteadyFlow("omega_ss must be positive"));
            }
            Ok(op.u_ss.f_in / op.x_ss.omega * fin_ref)
        }
    }
}

/// A PI compensator with its integrator state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiLoop {
    pub gains: PiGains,
    pub state: PiState,
}

impl PiLoop {
    pub fn new(gains: PiGains) -> Self {
        PiLoop {
            gains,
            state: PiState::default(),
        }
    }
}

/// Deviation-coordinate references consumed by the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PiRefs {
    /// Inflow reference deviation [m³/s]; mapped statically to a speed
    /// reference.
    pub f_in: f64,
    /// Vat concentration reference deviation [kg/m³].
    pub c_r: f64,
    /// Filtrate flow reference deviation [m³/s].
    pub q_f: f64,
}

/// Deviation-coordinate state feedback consumed by the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PiFeedback {
    pub omega: f64,
    pub p_v: f64,
    pub c_r: f64,
    pub q_f: f64,
}

/// Actuator commands, as deviations from the operating-point inputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PiCommand {
    pub t_m: f64,
    pub c_in: f64,
    pub q_air_in: f64,
}

/// The three-loop decentralized architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct PiArchitecture {
    /// Speed loop (ω via T_m).
    pub loop_omega: PiLoop,
    /// Concentration loop (C_R via C_in).
    pub loop_concentration: PiLoop,
    /// Cascade outer loop (q_f → P_v setpoint); reverse-acting.
    pub loop_qf_outer: PiLoop,
    /// Cascade inner loop (P_v via q_air_in).
    pub loop_pv_inner: PiLoop,
    /// Static gain from inflow reference to speed reference.
    pub ref_gain: f64,
}

impl PiArchitecture {
    pub fn validate(&self) -> Result<()> {
        self.loop_omega.gains.validate()?;
        self.loop_concentration.gains.validate()?;
        self.loop_qf_outer.gains.validate()?;
        self.loop_pv_inner.gains.validate()
    }

    /// Advance all loops by one controller period.
    ///
    /// Loop 1 tracks the mapped speed reference with torque, loop 2 tracks
    /// vat concentration with inflow concentration, and the cascade tracks
    /// filtrate flow: a positive flow error commands a vacuum setpoint below
    /// the operating pressure (deeper vacuum raises the driving pressure),
    /// and the inner loop adds air inflow when the pressure sits below its
    /// setpoint.
    pub fn step(&mut self, x: &PiFeedback, refs: &PiRefs, dt: f64) -> PiCommand {
        let omega_ref = self.ref_gain * refs.f_in;
        let (t_m, s1) = pi_step(&self.loop_omega.gains, self.loop_omega.state, omega_ref - x.omega, dt);
        self.loop_omega.state = s1;

        let (c_in, s2) = pi_step(
            &self.loop_concentration.gains,
            self.loop_concentration.state,
            refs.c_r - x.c_r,
            dt,
        );
        self.loop_concentration.state = s2;

        let (p_v_ref, s3) = pi_step(
            &self.loop_qf_outer.gains,
            self.loop_qf_outer.state,
            refs.q_f - x.q_f,
            dt,
        );
        self.loop_qf_outer.state = s3;

        let (q_air_in, s4) = pi_step(
            &self.loop_pv_inner.gains,
            self.loop_pv_inner.state,
            p_v_ref - x.p_v,
            dt,
        );
        self.loop_pv_inner.state = s4;

        PiCommand {
            t_m,
            c_in,
            q_air_in,
        }
    }

    /// Reset all integrator states.
    pub fn reset(&mut self) {
        self.loop_omega.state = PiState::default();
        self.loop_concentration.state = PiState::default();
        self.loop_qf_outer.state = PiState::default();
        self.loop_pv_inner.state = PiState::default();
    }
}

/// Per-loop closed-loop time constants [s] for [`tune_default_gains`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopClosures {
    pub omega: f64,
    pub concentration: f64,
    pub qf_outer: f64,
    pub pv_inner: f64,
}

impl Default for LoopClosures {
    fn default() -> Self {
        LoopClosures {
            omega: 0.5,
            concentration: 10.0,
            qf_outer: 1.2,
            pv_inner: 0.3,
        }
    }
}

/// Deviation-coordinate saturation limits per actuator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiActuatorBounds {
    pub t_m: (f64, f64),
    pub c_in: (f64, f64),
    pub q_air_in: (f64, f64),
    /// Limits on the cascade's internal vacuum setpoint.
    pub p_v_setpoint: (f64, f64),
}

impl PiActuatorBounds {
    /// Wide-open bounds; numerically safe placeholders.
    pub fn unbounded() -> Self {
        let wide = (-1e30, 1e30);
        PiActuatorBounds {
            t_m: wide,
            c_in: wide,
            q_air_in: wide,
            p_v_setpoint: wide,
        }
    }
}

const DEFAULT_KAW: f64 = 1.0;

/// SIMC-style rules on first-order loop approximations read off the linear
/// model.
///
/// For a loop with local gain `K` and time constant `τ`:
/// `kp = τ / (K·τ_cl)`, `ki = kp / min(τ, 4·τ_cl)`. The vacuum inner loop is
/// a pure integrator with slope `K`; there `kp = 1/(K·τ_cl)` and
/// `ki = kp/(4·τ_cl)`. The cascade outer loop has negative gain `−k15/k25`,
/// yielding negative `kp`/`ki`.
pub fn tune_default_gains(
    m: &LinearModel,
    closures: &LoopClosures,
    bounds: &PiActuatorBounds,
) -> Result<PiArchitecture> {
    for (name, tau) in [
        ("omega", closures.omega),
        ("concentration", closures.concentration),
        ("qf_outer", closures.qf_outer),
        ("pv_inner", closures.pv_inner),
    ] {
        if !(tau > 0.0) {
            return Err(Error::invalid(format!(
                "closure time constant `{name}` must be > 0, got {tau}"
            )));
        }
    }

    let first_order = |name: &'static str,
                       gain: f64,
                       tau: f64,
                       tau_cl: f64,
                       limits: (f64, f64)|
     -> Result<PiGains> {
        if gain == 0.0 {
            return Err(Error::DegenerateLoop(name));
        }
        let kp = tau / (gain * tau_cl);
        let ki = kp / tau.min(4.0 * tau_cl);
        Ok(PiGains {
            kp,
            ki,
            u_min: limits.0,
            u_max: limits.1,
            kaw: DEFAULT_KAW,
        })
    };

    // Speed loop: dω = −k21·ω + k11·T_m.
    let k21 = -m.a[(0, 0)];
    let k11 = m.b[(0, 0)];
    if k21 <= 0.0 {
        return Err(Error::DegenerateLoop("omega"));
    }
    let loop_omega = first_order("omega", k11 / k21, 1.0 / k21, closures.omega, bounds.t_m)?;

    // Concentration loop: dC_R = −k43·C_R + k23·C_in.
    let k43 = -m.a[(2, 2)];
    let k23 = m.b[(2, 4)];
    if k43 <= 0.0 {
        return Err(Error::DegenerateLoop("concentration"));
    }
    let loop_concentration = first_order(
        "concentration",
        k23 / k43,
        1.0 / k43,
        closures.concentration,
        bounds.c_in,
    )?;

    // Vacuum inner loop: dP_v = k12·q_air_in — a pure integrator.
    let k12 = m.b[(1, 1)];
    if k12 == 0.0 {
        return Err(Error::DegenerateLoop("pv_inner"));
    }
    let kp_inner = 1.0 / (k12 * closures.pv_inner);
    let loop_pv_inner = PiGains {
        kp: kp_inner,
        ki: kp_inner / (4.0 * closures.pv_inner),
        u_min: bounds.q_air_in.0,
        u_max: bounds.q_air_in.1,
        kaw: DEFAULT_KAW,
    };

    // Cascade outer loop: dq_f = −k15·P_v − k25·q_f, driven through the
    // inner loop's pressure setpoint.
    let k15 = -m.a[(4, 1)];
    let k25 = -m.a[(4, 4)];
    if k25 <= 0.0 || k15 == 0.0 {
        return Err(Error::DegenerateLoop("qf_outer"));
    }
    let loop_qf_outer = first_order(
        "qf_outer",
        -k15 / k25,
        1.0 / k25,
        closures.qf_outer,
        bounds.p_v_setpoint,
    )?;

    let ref_gain = if m.op.u_ss.f_in > 0.0 {
        m.op.x_ss.omega / m.op.u_ss.f_in
    } else {
        return Err(Error::ZeroSteadyFlow("f_in_ss must be positive"));
    };

    let arch = PiArchitecture {
        loop_omega: PiLoop::new(loop_omega),
        loop_concentration: PiLoop::new(loop_concentration),
        loop_qf_outer: PiLoop::new(loop_qf_outer),
        loop_pv_inner: PiLoop::new(loop_pv_inner),
        ref_gain,
    };
    arch.validate()?;
    Ok(arch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{solve_steady_state, SteadyKnowns};
    use crate::linearize::build_continuous;
    use crate::plant::PlantParams;
    use approx::assert_relative_eq;

    fn wide(kp: f64, ki: f64) -> PiGains {
        PiGains {
            kp,
            ki,
            u_min: -1e30,
            u_max: 1e30,
            kaw: 1.0,
        }
    }

    fn table_model() -> LinearModel {
        let params = PlantParams::default();
        let op = solve_steady_state(
            &params,
            &SteadyKnowns {
                omega_ss: 0.1047,
                p_v_ss: 61_300.0,
                c_r_ss: 25.0,
                c_in_ss: 100.0,
                f_out_ss: 0.05,
                q_air_out_ss: 0.2,
            },
        )
        .unwrap();
        build_continuous(&params, &op).unwrap()
    }

    #[test]
    fn pure_proportional() {
        let (out, state) = pi_step(&wide(2.0, 0.0), PiState::default(), 1.0, 0.05);
        assert_eq!(out, 2.0);
        assert_eq!(state.integral, 0.0);
    }

    #[test]
    fn single_integral_step() {
        let (out, state) = pi_step(&wide(0.0, 1.0), PiState::default(), 1.0, 0.1);
        assert_relative_eq!(out, 0.1, max_relative = 1e-14);
        assert_relative_eq!(state.integral, 0.1, max_relative = 1e-14);
    }

    #[test]
    fn saturation_back_calculation() {
        let gains = PiGains {
            kp: 10.0,
            ki: 0.0,
            u_min: -5.0,
            u_max: 5.0,
            kaw: 1.0,
        };
        let dt = 0.1;
        let (out, state) = pi_step(&gains, PiState::default(), 1.0, dt);
        assert_eq!(out, 5.0);
        // raw = 10, clamped to 5: integral absorbs (5 − 10)·kaw·dt.
        assert_relative_eq!(state.integral, -5.0 * dt, max_relative = 1e-14);

        let no_aw = PiGains { kaw: 0.0, ..gains };
        let (_, state) = pi_step(&no_aw, PiState::default(), 1.0, dt);
        assert_eq!(state.integral, 0.0);
    }

    #[test]
    fn anti_windup_bounds_integral() {
        let gains = PiGains {
            kp: 1.0,
            ki: 2.0,
            u_min: -1.0,
            u_max: 1.0,
            kaw: 5.0,
        };
        let mut state = PiState::default();
        let dt = 0.1;
        for _ in 0..10_000 {
            let (_, next) = pi_step(&gains, state, 10.0, dt);
            state = next;
            assert!(state.integral.abs() < (gains.u_max - gains.u_min) / (gains.ki * dt));
        }
    }

    #[test]
    fn reference_map_directions() {
        let model = table_model();
        let op = &model.op;
        let fixed = map_fin_ref_to_omega_ref(op, op.u_ss.f_in, RefMapDirection::Consistent).unwrap();
        assert_relative_eq!(fixed, op.x_ss.omega, max_relative = 1e-12);
        assert_eq!(
            map_fin_ref_to_omega_ref(op, 0.0, RefMapDirection::Consistent).unwrap(),
            0.0
        );
        assert_eq!(
            map_fin_ref_to_omega_ref(op, 0.0, RefMapDirection::PaperLiteral).unwrap(),
            0.0
        );
        let mapped = map_fin_ref_to_omega_ref(op, 0.025, RefMapDirection::Consistent).unwrap();
        assert_relative_eq!(mapped, 0.1047 / 0.0125 * 0.025, max_relative = 1e-9);
    }

    #[test]
    fn zero_flow_rejected() {
        let mut model = table_model();
        model.op.u_ss.f_in = 0.0;
        assert!(matches!(
            map_fin_ref_to_omega_ref(&model.op, 0.1, RefMapDirection::Consistent),
            Err(Error::ZeroSteadyFlow(_))
        ));
    }

    #[test]
    fn simc_loop1_reference_numbers() {
        let model = table_model();
        let closures = LoopClosures {
            omega: 0.5,
            ..LoopClosures::default()
        };
        let arch = tune_default_gains(&model, &closures, &PiActuatorBounds::unbounded()).unwrap();
        // K = 1/17.5, τ = 0.2 s, τ_cl = 0.5 s → kp = 0.2·17.5/0.5 = 7.0.
        assert_relative_eq!(arch.loop_omega.gains.kp, 7.0, max_relative = 1e-12);
        // Integral time = min(τ, 4·τ_cl) = 0.2.
        assert_relative_eq!(arch.loop_omega.gains.ki, 7.0 / 0.2, max_relative = 1e-12);

        // Doubling τ_cl halves kp.
        let slower = tune_default_gains(
            &model,
            &LoopClosures {
                omega: 1.0,
                ..closures
            },
            &PiActuatorBounds::unbounded(),
        )
        .unwrap();
        assert_relative_eq!(
            slower.loop_omega.gains.kp,
            arch.loop_omega.gains.kp / 2.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn outer_loop_is_reverse_acting() {
        let model = table_model();
        let mut arch = tune_default_gains(
            &model,
            &LoopClosures::default(),
            &PiActuatorBounds::unbounded(),
        )
        .unwrap();
        assert!(arch.loop_qf_outer.gains.kp < 0.0);
        assert!(arch.loop_qf_outer.gains.ki < 0.0);

        // A positive flow error must command a vacuum setpoint below the
        // operating pressure. Probe through one architecture step.
        let cmd_refs = PiRefs {
            q_f: 1e-5,
            ..PiRefs::default()
        };
        let before = arch.loop_qf_outer.state;
        let (p_v_ref, _) = pi_step(&arch.loop_qf_outer.gains, before, cmd_refs.q_f, 0.1);
        assert!(p_v_ref < 0.0);
        // And the inner loop injects air when pressure is below setpoint.
        assert!(arch.loop_pv_inner.gains.kp > 0.0);
    }

    #[test]
    fn equilibrium_hold_is_bumpless() {
        let model = table_model();
        let mut arch = tune_default_gains(
            &model,
            &LoopClosures::default(),
            &PiActuatorBounds::unbounded(),
        )
        .unwrap();
        for _ in 0..100 {
            let cmd = arch.step(&PiFeedback::default(), &PiRefs::default(), 0.1);
            assert_eq!(cmd, PiCommand::default());
        }
    }

    #[test]
    fn proportional_pass_through() {
        let model = table_model();
        let mut arch = tune_default_gains(
            &model,
            &LoopClosures::default(),
            &PiActuatorBounds::unbounded(),
        )
        .unwrap();
        arch.loop_omega.gains = wide(2.0, 0.0);
        arch.ref_gain = 1.0;
        let cmd = arch.step(
            &PiFeedback {
                omega: -1.0,
                ..PiFeedback::default()
            },
            &PiRefs::default(),
            0.1,
        );
        assert_eq!(cmd.t_m, 2.0);
    }

    #[test]
    fn determinism_across_replays() {
        let model = table_model();
        let run = || {
            let mut arch = tune_default_gains(
                &model,
                &LoopClosures::default(),
                &PiActuatorBounds::unbounded(),
            )
            .unwrap();
            let mut outputs = Vec::new();
            for k in 0..200 {
                let x = PiFeedback {
                    omega: (k as f64 * 0.01).sin() * 1e-3,
                    p_v: (k as f64 * 0.03).cos() * 10.0,
                    c_r: (k as f64 * 0.02).sin(),
                    q_f: (k as f64 * 0.05).cos() * 1e-5,
                };
                let refs = PiRefs {
                    f_in: 0.0,
                    c_r: 1.0,
                    q_f: 1e-5,
                };
                outputs.push(arch.step(&x, &refs, 0.1));
            }
            outputs
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_steady_state_error_on_linear_plant() {
        // Step both tracked references on the deviation-form linear plant;
        // after ten closure time constants every tracked error is below
        // 0.5% of its step.
        let model = table_model();
        let mut arch = tune_default_gains(
            &model,
            &LoopClosures::default(),
            &PiActuatorBounds::unbounded(),
        )
        .unwrap();

        let ts = 0.1;
        let h = 0.01;
        let duration = 10.0 * LoopClosures::default().concentration + 50.0;
        let q_f_step = 3.2e-5;
        let c_r_step = 5.0;

        let mut x = nalgebra::Vector5::<f64>::zeros();
        let mut t = 0.0;
        while t < duration {
            let feedback = PiFeedback {
                omega: x[0],
                p_v: x[1],
                c_r: x[2],
                q_f: x[4],
            };
            let refs = PiRefs {
                f_in: 0.0,
                c_r: c_r_step,
                q_f: q_f_step,
            };
            let cmd = arch.step(&feedback, &refs, ts);
            let mut u = nalgebra::Vector6::<f64>::zeros();
            u[0] = cmd.t_m;
            u[1] = cmd.q_air_in;
            u[4] = cmd.c_in;
            for _ in 0..10 {
                let f = |x: &nalgebra::Vector5<f64>| model.a * x + model.b * u;
                let k1 = f(&x);
                let k2 = f(&(x + k1 * (h / 2.0)));
                let k3 = f(&(x + k2 * (h / 2.0)));
                let k4 = f(&(x + k3 * h));
                x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
            t += ts;
        }
        assert!(
            (q_f_step - x[4]).abs() < 0.005 * q_f_step,
            "q_f error {} vs step {q_f_step}",
            q_f_step - x[4]
        );
        assert!(
            (c_r_step - x[2]).abs() < 0.005 * c_r_step,
            "c_r error {} vs step {c_r_step}",
            c_r_step - x[2]
        );
    }

    #[test]
    fn mismatched_gain_signs_rejected() {
        let bad = PiGains {
            kp: 1.0,
            ki: -1.0,
            u_min: -1.0,
            u_max: 1.0,
            kaw: 0.0,
        };
        assert!(bad.validate().is_err());
    }
}

//! Fixed-step closed-loop simulation engine.
//!
//! The nonlinear plant integrates with classical RK4 at step `h`; the
//! controller runs every `ts` (an integer multiple of `h`) on the freshly
//! sampled state, and its commands are zero-order held across the `ts/h`
//! sub-steps. Reference and disturbance signals are piecewise
//! constant/step/ramp schedules. Everything is deterministic: the same
//! scenario always produces the bit-identical trajectory.

use nalgebra::Vector5;
use serde::{Deserialize, Serialize};

use crate::equilibrium::OperatingPoint;
use crate::mpc::{MpcController, MpcRefs};
use crate::pi::{self, PiArchitecture, PiFeedback, PiRefs, RefMapDirection};
use crate::plant::{self, PlantInput, PlantParams, PlantState};
use crate::{Error, Result};

/// Bit flags recorded per sample in `Record::flags` (and the trajectory
/// CSV's `diag_flags` column).
pub mod flags {
    /// Disc speed went negative.
    pub const NEGATIVE_OMEGA: u32 = 1;
    /// Receiver pressure went negative.
    pub const NEGATIVE_PV: u32 = 1 << 1;
    /// Vat concentration went negative.
    pub const NEGATIVE_CR: u32 = 1 << 2;
    /// Cake thickness went negative.
    pub const NEGATIVE_HCAKE: u32 = 1 << 3;
    /// The QP solver hit its iteration cap; best feasible move applied.
    pub const QP_ITERATION_LIMIT: u32 = 1 << 4;
    /// Output constraints were softened with slacks this sample.
    pub const QP_SOFTENED: u32 = 1 << 5;
}

/// Segment shape of a piecewise signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    /// Hold `value` from the segment start.
    Constant,
    /// Jump to `value` at the segment start (right-continuous).
    StepTo,
    /// Ramp linearly from the previous value to `value`, arriving exactly
    /// when the next segment starts.
    RampTo,
}

/// One signal segment starting at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    /// Start time [s].
    pub t: f64,
    pub kind: SegmentKind,
    pub value: f64,
}

/// Piecewise reference/disturbance schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Signal {
    pub segments: Vec<Segment>,
}

impl Signal {
    pub fn constant(value: f64) -> Signal {
        Signal {
            segments: vec![Segment {
                t: 0.0,
                kind: SegmentKind::Constant,
                value,
            }],
        }
    }

    /// A constant baseline with a step at `step_time`.
    pub fn step(baseline: f64, step_time: f64, target: f64) -> Signal {
        Signal {
            segments: vec![
                Segment {
                    t: 0.0,
                    kind: SegmentKind::Constant,
                    value: baseline,
                },
                Segment {
                    t: step_time,
                    kind: SegmentKind::StepTo,
                    value: target,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::invalid("signal needs at least one segment"));
        }
        if self.segments[0].t != 0.0 {
            return Err(Error::invalid(format!(
                "first segment must start at t = 0, got {}",
                self.segments[0].t
            )));
        }
        for w in self.segments.windows(2) {
            if !(w[0].t < w[1].t) {
                return Err(Error::invalid(format!(
                    "segment start times must be strictly increasing ({} then {})",
                    w[0].t, w[1].t
                )));
            }
        }
        if matches!(self.segments.last().unwrap().kind, SegmentKind::RampTo) {
            return Err(Error::invalid(
                "a ramp_to segment needs a following segment to define its end time",
            ));
        }
        Ok(())
    }

    /// Value a segment holds at its end boundary (where the next one starts).
    fn end_value(&self, idx: usize) -> f64 {
        self.segments[idx].value
    }

    /// Piecewise evaluation at `t ≥ 0`; steps are right-continuous and ramps
    /// interpolate linearly from the previous segment's final value.
    pub fn sample(&self, t: f64) -> f64 {
        let idx = match self
            .segments
            .iter()
            .rposition(|s| s.t <= t)
        {
            Some(i) => i,
            None => return self.segments[0].value,
        };
        let seg = &self.segments[idx];
        match seg.kind {
            SegmentKind::Constant | SegmentKind::StepTo => seg.value,
            SegmentKind::RampTo => {
                let from = if idx == 0 { 0.0 } else { self.end_value(idx - 1) };
                // Validation guarantees a following segment.
                let end = self.segments[idx + 1].t;
                let frac = ((t - seg.t) / (end - seg.t)).clamp(0.0, 1.0);
                from + (seg.value - from) * frac
            }
        }
    }
}

/// Initial plant state of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// Start settled at the operating point.
    #[default]
    OperatingPoint,
    /// Null initial conditions.
    Zero,
}

/// Controller attached to a scenario.
#[derive(Debug, Clone)]
pub enum Controller {
    OpenLoop,
    Pi(PiArchitecture),
    Mpc(Box<MpcController>),
}

/// Reference schedules (absolute units) for the tracked variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSignals {
    pub f_in: Signal,
    pub c_r: Signal,
    pub q_f: Signal,
}

impl ReferenceSignals {
    pub fn hold(op: &OperatingPoint) -> Self {
        ReferenceSignals {
            f_in: Signal::constant(op.u_ss.f_in),
            c_r: Signal::constant(op.x_ss.c_r),
            q_f: Signal::constant(op.x_ss.q_f),
        }
    }
}

/// Input schedules (absolute units); controller-overridden entries are
/// ignored while that controller runs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSignals {
    pub t_m: Signal,
    pub q_air_in: Signal,
    pub q_air_out: Signal,
    pub f_in: Signal,
    pub c_in: Signal,
    pub f_out: Signal,
}

impl InputSignals {
    pub fn hold(op: &OperatingPoint) -> Self {
        InputSignals {
            t_m: Signal::constant(op.u_ss.t_m),
            q_air_in: Signal::constant(op.u_ss.q_air_in),
            q_air_out: Signal::constant(op.u_ss.q_air_out),
            f_in: Signal::constant(op.u_ss.f_in),
            c_in: Signal::constant(op.u_ss.c_in),
            f_out: Signal::constant(op.u_ss.f_out),
        }
    }
}

/// A complete closed-loop experiment description.
#[derive(Debug, Clone)]
pub struct Scenario {
    /// Total simulated time [s].
    pub duration: f64,
    /// Integrator step [s].
    pub h: f64,
    /// Controller period [s]; integer multiple of `h`.
    pub ts: f64,
    pub op: OperatingPoint,
    pub controller: Controller,
    pub references: ReferenceSignals,
    pub inputs: InputSignals,
    /// Treat the `f_out` schedule as mud flow and add the live filtrate flow.
    pub fout_tracks_qf: bool,
    pub initial_state: InitialState,
    /// Direction of the inflow-to-speed reference map for MPC runs.
    pub ref_map: RefMapDirection,
    /// Reserved for future stochastic disturbance models; the engine is
    /// deterministic and ignores it.
    pub seed: u64,
}

impl Scenario {
    /// Open-loop hold at the operating point for `duration` seconds.
    pub fn hold(op: OperatingPoint, duration: f64) -> Scenario {
        Scenario {
            duration,
            h: 0.01,
            ts: 0.1,
            op,
            controller: Controller::OpenLoop,
            references: ReferenceSignals::hold(&op),
            inputs: InputSignals::hold(&op),
            fout_tracks_qf: false,
            initial_state: InitialState::OperatingPoint,
            ref_map: RefMapDirection::Consistent,
            seed: 0,
        }
    }

    fn multiple_of(big: f64, small: f64) -> Option<usize> {
        if !(small > 0.0) || !(big > 0.0) {
            return None;
        }
        let n = (big / small).round();
        if n >= 1.0 && ((big - n * small).abs() <= 1e-9 * big) {
            Some(n as usize)
        } else {
            None
        }
    }

    /// Number of RK4 sub-steps per controller period.
    pub fn substeps(&self) -> Result<usize> {
        Self::multiple_of(self.ts, self.h).ok_or_else(|| {
            Error::invalid(format!(
                "ts = {} must be a positive integer multiple of h = {}",
                self.ts, self.h
            ))
        })
    }

    /// Number of controller samples (= trajectory records).
    pub fn record_count(&self) -> Result<usize> {
        Self::multiple_of(self.duration, self.ts).ok_or_else(|| {
            Error::invalid(format!(
                "duration = {} must be a positive integer multiple of ts = {}",
                self.duration, self.ts
            ))
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.substeps()?;
        self.record_count()?;
        for s in [
            &self.references.f_in,
            &self.references.c_r,
            &self.references.q_f,
            &self.inputs.t_m,
            &self.inputs.q_air_in,
            &self.inputs.q_air_out,
            &self.inputs.f_in,
            &self.inputs.c_in,
            &self.inputs.f_out,
        ] {
            s.validate()?;
        }
        if let Controller::Mpc(ctrl) = &self.controller {
            let cfg_ts = ctrl.config().ts;
            if (cfg_ts - self.ts).abs() > 1e-12 {
                return Err(Error::invalid(format!(
                    "MPC sample period {cfg_ts} differs from scenario ts {}",
                    self.ts
                )));
            }
        }
        Ok(())
    }
}

/// Per-sample MPC solver diagnostics carried in the trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcSample {
    pub iterations: usize,
    pub active_count: usize,
    pub cost: f64,
    pub softened: bool,
    pub iteration_limited: bool,
    pub input_bound_active: [bool; 3],
}

/// One controller-rate snapshot: the state at `t` and the input applied over
/// `[t, t + ts)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub t: f64,
    pub state: PlantState,
    pub input: PlantInput,
    pub ref_q_f: f64,
    pub ref_c_r: f64,
    pub ref_f_in: f64,
    /// Instantaneous filtration efficiency [%]; NaN when no solids flow in.
    pub eta: f64,
    pub flags: u32,
    pub mpc: Option<MpcSample>,
}

/// Uniformly sampled closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<Record>,
    pub ts: f64,
    /// State after the final integration window (at `t = duration`).
    pub final_state: PlantState,
    /// `∫ (f_in·C_in − f_out·C_R) dt` accumulated on the RK4 grid.
    pub solids_flow_integral: f64,
}

impl Trajectory {
    /// Relative vat mass-balance defect over the whole run:
    /// `|V_vat·ΔC_R − ∫(f_in·C_in − f_out·C_R)dt| / max(V_vat·C_R_ss, ε)`.
    pub fn vat_mass_balance_error(&self, params: &PlantParams, op: &OperatingPoint) -> f64 {
        let c0 = self.records.first().map(|r| r.state.c_r).unwrap_or(0.0);
        let accumulated = params.v_vat * (self.final_state.c_r - c0);
        let scale = (params.v_vat * op.x_ss.c_r).max(1e-12);
        (accumulated - self.solids_flow_integral).abs() / scale
    }
}

const BLOWUP_LIMIT: f64 = 1e12;

fn solids_flow(x: &PlantState, u: &PlantInput) -> f64 {
    u.f_in * u.c_in - u.f_out * x.c_r
}

fn add_scaled(x: &Vector5<f64>, d: &Vector5<f64>, s: f64) -> PlantState {
    PlantState::from_vector(&(x + d * s))
}

/// One classical RK4 step with the input held constant, also returning the
/// RK4-quadrature increment of the vat solids-flow integral.
fn rk4_step_aux(
    params: &PlantParams,
    x: &PlantState,
    u: &PlantInput,
    h: f64,
) -> Result<(PlantState, f64)> {
    let xv = x.to_vector();
    let k1 = plant::derivative(params, x, u)?.to_vector();
    let s1 = add_scaled(&xv, &k1, h / 2.0);
    let k2 = plant::derivative(params, &s1, u)?.to_vector();
    let s2 = add_scaled(&xv, &k2, h / 2.0);
    let k3 = plant::derivative(params, &s2, u)?.to_vector();
    let s3 = add_scaled(&xv, &k3, h);
    let k4 = plant::derivative(params, &s3, u)?.to_vector();

    let next = PlantState::from_vector(&(xv + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)));
    let aux = (solids_flow(x, u)
        + 2.0 * solids_flow(&s1, u)
        + 2.0 * solids_flow(&s2, u)
        + solids_flow(&s3, u))
        * (h / 6.0);
    Ok((next, aux))
}

fn check_blowup(x: &PlantState, t: f64) -> Result<()> {
    let v = x.to_vector();
    for (i, &value) in v.iter().enumerate() {
        if !value.is_finite() || value.abs() > BLOWUP_LIMIT {
            return Err(Error::NumericalBlowup {
                t,
                state: PlantState::NAMES[i],
                value,
            });
        }
    }
    Ok(())
}

/// One RK4 step of the plant with `u` held constant over `h`.
pub fn rk4_step(params: &PlantParams, x: &PlantState, u: &PlantInput, h: f64) -> Result<PlantState> {
    assert!(h > 0.0, "step size must be positive");
    let (next, _) = rk4_step_aux(params, x, u, h)?;
    check_blowup(&next, f64::NAN)?;
    Ok(next)
}

fn validity_flags(x: &PlantState) -> u32 {
    let mut f = 0;
    if x.omega < 0.0 {
        f |= flags::NEGATIVE_OMEGA;
    }
    if x.p_v < 0.0 {
        f |= flags::NEGATIVE_PV;
    }
    if x.c_r < 0.0 {
        f |= flags::NEGATIVE_CR;
    }
    if x.h_cake < 0.0 {
        f |= flags::NEGATIVE_HCAKE;
    }
    f
}

fn with_timestamp(err: Error, t: f64) -> Error {
    match err {
        Error::QpInfeasible { .. } => Error::QpInfeasible { at: Some(t) },
        Error::QpIterationLimit { .. } => Error::QpIterationLimit { at: Some(t) },
        other => other,
    }
}

/// Run the closed loop and record one snapshot per controller period.
///
/// At each sample the controller sees the state in deviation coordinates and
/// returns actuator deviations; absolute commands are reconstructed by adding
/// the operating-point inputs. Non-overridden inputs follow their scenario
/// schedules. Negative states are never clamped — they raise validity flags
/// in the record instead.
pub fn run_closed_loop(params: &PlantParams, sc: &Scenario) -> Result<Trajectory> {
    params.validate()?;
    sc.validate()?;
    let n_records = sc.record_count()?;
    let n_sub = sc.substeps()?;

    let mut controller = sc.controller.clone();
    let x_ss = sc.op.x_ss;
    let u_ss = sc.op.u_ss;
    let mut x = match sc.initial_state {
        InitialState::OperatingPoint => x_ss,
        InitialState::Zero => PlantState::ZERO,
    };

    let mut records = Vec::with_capacity(n_records);
    let mut solids_integral = 0.0;

    for k in 0..n_records {
        let t = k as f64 * sc.ts;
        let ref_f_in = sc.references.f_in.sample(t);
        let ref_c_r = sc.references.c_r.sample(t);
        let ref_q_f = sc.references.q_f.sample(t);

        let mut u = PlantInput {
            t_m: sc.inputs.t_m.sample(t),
            q_air_in: sc.inputs.q_air_in.sample(t),
            q_air_out: sc.inputs.q_air_out.sample(t),
            f_in: sc.inputs.f_in.sample(t),
            c_in: sc.inputs.c_in.sample(t),
            f_out: sc.inputs.f_out.sample(t),
        };
        let mut sample_flags = validity_flags(&x);
        let mut mpc_sample = None;

        match &mut controller {
            Controller::OpenLoop => {}
            Controller::Pi(arch) => {
                let feedback = PiFeedback {
                    omega: x.omega - x_ss.omega,
                    p_v: x.p_v - x_ss.p_v,
                    c_r: x.c_r - x_ss.c_r,
                    q_f: x.q_f - x_ss.q_f,
                };
                let refs = PiRefs {
                    f_in: ref_f_in - u_ss.f_in,
                    c_r: ref_c_r - x_ss.c_r,
                    q_f: ref_q_f - x_ss.q_f,
                };
                let cmd = arch.step(&feedback, &refs, sc.ts);
                u.t_m = u_ss.t_m + cmd.t_m;
                u.c_in = u_ss.c_in + cmd.c_in;
                u.q_air_in = u_ss.q_air_in + cmd.q_air_in;
            }
            Controller::Mpc(ctrl) => {
                let x_dev = x.to_vector() - x_ss.to_vector();
                let omega_ref =
                    pi::map_fin_ref_to_omega_ref(&sc.op, ref_f_in - u_ss.f_in, sc.ref_map)
                        .map_err(|e| with_timestamp(e, t))?;
                let refs = MpcRefs {
                    omega: omega_ref,
                    c_r: ref_c_r - x_ss.c_r,
                    q_f: ref_q_f - x_ss.q_f,
                };
                let (cmd, info) = ctrl.step(&x_dev, &refs).map_err(|e| with_timestamp(e, t))?;
                u.t_m = u_ss.t_m + cmd.t_m;
                u.q_air_in = u_ss.q_air_in + cmd.q_air_in;
                u.c_in = u_ss.c_in + cmd.c_in;
                if info.iteration_limited {
                    sample_flags |= flags::QP_ITERATION_LIMIT;
                }
                if info.softened {
                    sample_flags |= flags::QP_SOFTENED;
                }
                mpc_sample = Some(MpcSample {
                    iterations: info.iterations,
                    active_count: info.active.len(),
                    cost: info.cost,
                    softened: info.softened,
                    iteration_limited: info.iteration_limited,
                    input_bound_active: info.input_bound_active,
                });
            }
        }

        if sc.fout_tracks_qf {
            // Schedule reinterpreted as mud withdrawal on top of live
            // filtrate flow.
            u.f_out = x.q_f + sc.inputs.f_out.sample(t);
        }

        let eta = plant::efficiency(x.q_f, x.c_r, u.f_in, u.c_in).unwrap_or(f64::NAN);
        records.push(Record {
            t,
            state: x,
            input: u,
            ref_q_f,
            ref_c_r,
            ref_f_in,
            eta,
            flags: sample_flags,
            mpc: mpc_sample,
        });

        for s in 0..n_sub {
            let (next, aux) = rk4_step_aux(params, &x, &u, sc.h)?;
            check_blowup(&next, t + (s + 1) as f64 * sc.h)?;
            x = next;
            solids_integral += aux;
        }
    }

    Ok(Trajectory {
        records,
        ts: sc.ts,
        final_state: x,
        solids_flow_integral: solids_integral,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{solve_steady_state, SteadyKnowns};
    use approx::assert_relative_eq;

    fn table_op() -> (PlantParams, OperatingPoint) {
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
        (params, op)
    }

    #[test]
    fn signal_examples() {
        let c = Signal::constant(5.0);
        assert_eq!(c.sample(0.0), 5.0);
        assert_eq!(c.sample(1234.5), 5.0);

        let s = Signal::step(0.0, 200.0, 1.0);
        assert_eq!(s.sample(199.95), 0.0);
        assert_eq!(s.sample(200.0), 1.0);
        assert_eq!(s.sample(500.0), 1.0);

        let r = Signal {
            segments: vec![
                Segment {
                    t: 0.0,
                    kind: SegmentKind::RampTo,
                    value: 2.0,
                },
                Segment {
                    t: 10.0,
                    kind: SegmentKind::Constant,
                    value: 2.0,
                },
            ],
        };
        r.validate().unwrap();
        assert_relative_eq!(r.sample(5.0), 1.0, max_relative = 1e-14);
        assert_eq!(r.sample(10.0), 2.0);
    }

    #[test]
    fn signal_validation_rejects_bad_shapes() {
        assert!(Signal { segments: vec![] }.validate().is_err());
        assert!(Signal {
            segments: vec![Segment {
                t: 1.0,
                kind: SegmentKind::Constant,
                value: 0.0
            }]
        }
        .validate()
        .is_err());
        assert!(Signal {
            segments: vec![Segment {
                t: 0.0,
                kind: SegmentKind::RampTo,
                value: 1.0
            }]
        }
        .validate()
        .is_err());
    }

    #[test]
    fn rk4_holds_equilibrium_over_one_step() {
        let (params, op) = table_op();
        let next = rk4_step(&params, &op.x_ss, &op.u_ss, 0.01).unwrap();
        let dev = (next.to_vector() - op.x_ss.to_vector()).amax();
        assert!(dev < 1e-15 * op.x_ss.to_vector().amax().max(1.0));
    }

    /// Pure speed decay: with zero torque, zero cake, and zero solids the
    /// speed equation reduces to dω/dt = −(k_d/J)·ω = −5ω.
    fn decay_state(omega: f64) -> PlantState {
        PlantState {
            omega,
            ..PlantState::ZERO
        }
    }

    #[test]
    fn rk4_single_step_accuracy() {
        let (params, _) = table_op();
        let next = rk4_step(&params, &decay_state(1.0), &PlantInput::ZERO, 0.01).unwrap();
        // Exact RK4 polynomial for z = −0.05.
        let z: f64 = -0.05;
        let rk4_exact = 1.0 + z + z * z / 2.0 + z * z * z / 6.0 + z * z * z * z / 24.0;
        assert_relative_eq!(next.omega, rk4_exact, epsilon = 1e-14);
        // One-step truncation error versus the true exponential is z⁵/5!,
        // about 2.6e-9 here.
        assert!((next.omega - (-0.05f64).exp()).abs() < 5e-9);
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        let (params, _) = table_op();
        let error_at = |h: f64| {
            let steps = (1.0 / h).round() as usize;
            let mut x = decay_state(1.0);
            for _ in 0..steps {
                x = rk4_step(&params, &x, &PlantInput::ZERO, h).unwrap();
            }
            (x.omega - (-5.0f64).exp()).abs()
        };
        let e1 = error_at(0.02);
        let e2 = error_at(0.01);
        let order = (e1 / e2).log2();
        assert!(order > 3.9, "observed order {order}");
        // Halving h cuts the global error by roughly 16.
        let ratio = e1 / e2;
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn equilibrium_hold_short() {
        let (params, op) = table_op();
        let sc = Scenario::hold(op, 20.0);
        let traj = run_closed_loop(&params, &sc).unwrap();
        assert_eq!(traj.records.len(), 200);
        assert_eq!(traj.records[0].t, 0.0);
        assert_eq!(traj.records[0].state, op.x_ss);
        let scale = op.x_ss.to_vector().amax();
        for r in &traj.records {
            let dev = (r.state.to_vector() - op.x_ss.to_vector()).amax();
            assert!(dev < 1e-9 * scale, "drift {dev} at t = {}", r.t);
            assert_eq!(r.flags, 0);
        }
    }

    #[test]
    fn record_schedule_is_exact() {
        let (params, op) = table_op();
        let mut sc = Scenario::hold(op, 5.0);
        sc.ts = 0.5;
        sc.h = 0.1;
        let traj = run_closed_loop(&params, &sc).unwrap();
        assert_eq!(traj.records.len(), 10);
        for (k, r) in traj.records.iter().enumerate() {
            assert_relative_eq!(r.t, k as f64 * 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn non_multiple_steps_rejected() {
        let (params, op) = table_op();
        let mut sc = Scenario::hold(op, 5.0);
        sc.ts = 0.25;
        sc.h = 0.1;
        assert!(matches!(run_closed_loop(&params, &sc), Err(Error::Invalid(_))));
    }

    #[test]
    fn determinism_bit_identical() {
        let (params, op) = table_op();
        let mut sc = Scenario::hold(op, 10.0);
        sc.inputs.c_in = Signal::step(op.u_ss.c_in, 3.0, op.u_ss.c_in * 1.3);
        let a = run_closed_loop(&params, &sc).unwrap();
        let b = run_closed_loop(&params, &sc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mass_balance_audit() {
        let (params, op) = table_op();
        let mut sc = Scenario::hold(op, 50.0);
        sc.inputs.c_in = Signal::step(op.u_ss.c_in, 10.0, op.u_ss.c_in * 1.5);
        sc.inputs.f_in = Signal::step(op.u_ss.f_in, 25.0, op.u_ss.f_in * 0.7);
        let traj = run_closed_loop(&params, &sc).unwrap();
        assert!(traj.vat_mass_balance_error(&params, &op) < 1e-5);
    }

    #[test]
    fn blowup_is_reported_with_timestamp() {
        let (params, op) = table_op();
        let mut sc = Scenario::hold(op, 10.0);
        // Destabilize the vat balance: huge negative outflow acts like an
        // exponential source.
        sc.inputs.f_out = Signal::constant(-1e10);
        match run_closed_loop(&params, &sc) {
            Err(Error::NumericalBlowup { t, state, .. }) => {
                assert!(t > 0.0);
                assert_eq!(state, "c_r");
            }
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn open_loop_replay_reproduces_pi_run() {
        // Controller-agnostic plant: replaying a PI run's recorded inputs
        // through the open-loop path yields the bit-identical state path.
        let (params, op) = table_op();
        let model = crate::linearize::build_continuous(&params, &op).unwrap();
        let arch = crate::pi::tune_default_gains(
            &model,
            &crate::pi::LoopClosures::default(),
            &crate::pi::PiActuatorBounds::unbounded(),
        )
        .unwrap();
        let mut sc = Scenario::hold(op, 10.0);
        sc.controller = Controller::Pi(arch);
        sc.references.q_f = Signal::step(op.x_ss.q_f, 2.0, op.x_ss.q_f * 1.1);
        let pi_traj = run_closed_loop(&params, &sc).unwrap();

        let mut replay = Scenario::hold(op, 10.0);
        let as_signal = |values: Vec<(f64, f64)>| Signal {
            segments: values
                .into_iter()
                .enumerate()
                .map(|(k, (t, v))| Segment {
                    t,
                    kind: if k == 0 {
                        SegmentKind::Constant
                    } else {
                        SegmentKind::StepTo
                    },
                    value: v,
                })
                .collect(),
        };
        replay.inputs.t_m = as_signal(pi_traj.records.iter().map(|r| (r.t, r.input.t_m)).collect());
        replay.inputs.q_air_in =
            as_signal(pi_traj.records.iter().map(|r| (r.t, r.input.q_air_in)).collect());
        replay.inputs.c_in =
            as_signal(pi_traj.records.iter().map(|r| (r.t, r.input.c_in)).collect());
        let open_traj = run_closed_loop(&params, &replay).unwrap();

        for (a, b) in pi_traj.records.iter().zip(open_traj.records.iter()) {
            assert_eq!(a.state, b.state, "diverged at t = {}", a.t);
            assert_eq!(a.input, b.input);
        }
        assert_eq!(pi_traj.final_state, open_traj.final_state);
    }
}

//! TOML scenario files.
//!
//! One strict, human-editable format drives every subcommand. All keys are
//! SI-unit absolute quantities; unknown keys are rejected so a mistyped
//! parameter can never silently fall back to a default. The shipped default
//! reproduces the reference transient: a +10% filtrate-flow reference step
//! at 200 s and a +20% vat-concentration step at 300 s.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_steady_state, OperatingPoint, SteadyKnowns};
use crate::linearize::build_continuous;
use crate::mpc::{MpcConfig, MpcController};
use crate::pi::{
    tune_default_gains, LoopClosures, PiActuatorBounds, PiGains, RefMapDirection,
};
use crate::plant::PlantParams;
use crate::simulate::{
    Controller, InitialState, InputSignals, ReferenceSignals, Scenario, Signal,
};
use crate::{Error, Result};

/// Root of the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub params: PlantParams,
    pub operating_point: SteadyKnowns,
    pub controller: ControllerSection,
    #[serde(default)]
    pub signals: SignalsSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    OpenLoop,
    Pi,
    Mpc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    #[serde(rename = "type")]
    pub kind: ControllerKind,
    #[serde(default)]
    pub pi: PiSection,
    #[serde(default)]
    pub mpc: MpcSection,
}

/// PI configuration: tuning time constants plus optional explicit gains.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiSection {
    pub closures: LoopClosures,
    pub bounds: PiBoundsSection,
    pub ref_map: RefMapDirection,
    pub gains: GainOverrides,
}

/// Absolute actuator saturation limits for the PI loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiBoundsSection {
    pub t_m: [f64; 2],
    pub c_in: [f64; 2],
    pub q_air_in: [f64; 2],
    pub p_v_setpoint: [f64; 2],
}

impl Default for PiBoundsSection {
    fn default() -> Self {
        PiBoundsSection {
            t_m: [0.0, 50.0],
            c_in: [0.0, 500.0],
            q_air_in: [0.0, 1.0],
            p_v_setpoint: [0.0, 101_300.0],
        }
    }
}

/// Optional per-loop gain overrides; saturation still comes from `bounds`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<LoopGainsSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concentration: Option<LoopGainsSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qf_outer: Option<LoopGainsSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pv_inner: Option<LoopGainsSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopGainsSpec {
    pub kp: f64,
    pub ki: f64,
    #[serde(default = "default_kaw")]
    pub kaw: f64,
}

fn default_kaw() -> f64 {
    1.0
}

/// MPC configuration (sample period comes from `[run].ts`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    pub np: usize,
    pub nc: usize,
    pub q_weights: OutputWeights,
    pub r_weights: InputWeights,
    pub u_bounds: InputBoundsSection,
    pub y_min: OutputBoundsSection,
    pub y_max: OutputBoundsSection,
    pub penalize_moves: bool,
}

impl Default for MpcSection {
    /// Shipped tunings: move penalties (no steady offset on the slow vat
    /// loop) with a heavier air-inflow weight that keeps the vacuum
    /// transient overshoot-free.
    fn default() -> Self {
        MpcSection {
            np: 50,
            nc: 10,
            q_weights: OutputWeights::default(),
            r_weights: InputWeights {
                t_m: 1e-3,
                q_air_in: 1e-2,
                c_in: 1e-3,
            },
            u_bounds: InputBoundsSection::default(),
            y_min: OutputBoundsSection::default(),
            y_max: OutputBoundsSection {
                c_r: Some(60.0),
                ..OutputBoundsSection::default()
            },
            penalize_moves: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputWeights {
    pub omega: f64,
    pub p_v: f64,
    pub c_r: f64,
    pub h_cake: f64,
    pub q_f: f64,
}

impl Default for OutputWeights {
    fn default() -> Self {
        OutputWeights {
            omega: 0.0,
            p_v: 0.0,
            c_r: 1.0,
            h_cake: 0.0,
            q_f: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputWeights {
    pub t_m: f64,
    pub q_air_in: f64,
    pub c_in: f64,
}

impl Default for InputWeights {
    fn default() -> Self {
        InputWeights {
            t_m: 1e-3,
            q_air_in: 1e-3,
            c_in: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputBoundsSection {
    pub t_m: [f64; 2],
    pub q_air_in: [f64; 2],
    pub c_in: [f64; 2],
}

impl Default for InputBoundsSection {
    fn default() -> Self {
        InputBoundsSection {
            t_m: [0.0, 50.0],
            q_air_in: [0.0, 1.0],
            c_in: [0.0, 500.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBoundsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_cake: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_f: Option<f64>,
}

impl OutputBoundsSection {
    fn to_array(self) -> [Option<f64>; 5] {
        [self.omega, self.p_v, self.c_r, self.h_cake, self.q_f]
    }
}

/// Named reference and disturbance schedules; absent entries hold their
/// operating-point values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ref_q_f: Option<Signal>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ref_c_r: Option<Signal>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ref_f_in: Option<Signal>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_m: Option<Signal>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_air_in: Option<Signal>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_air_out: Option<Signal>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_in: Option<Signal>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_in: Option<Signal>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_out: Option<Signal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub duration: f64,
    pub h: f64,
    pub ts: f64,
    pub trajectory_csv: String,
    pub metrics_csv: String,
    pub fout_tracks_qf: bool,
    pub initial_state: InitialState,
    pub seed: u64,
    /// Settling band [% of step size] used by metric reports.
    pub band_pct: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            duration: 500.0,
            h: 0.01,
            ts: 0.1,
            trajectory_csv: "trajectory.csv".to_string(),
            metrics_csv: "metrics.csv".to_string(),
            fout_tracks_qf: false,
            initial_state: InitialState::OperatingPoint,
            seed: 0,
            band_pct: 2.0,
        }
    }
}

/// Reference operating conditions used by the shipped scenarios.
pub fn default_knowns() -> SteadyKnowns {
    SteadyKnowns {
        omega_ss: 0.1047,
        p_v_ss: 61_300.0,
        c_r_ss: 25.0,
        c_in_ss: 100.0,
        f_out_ss: 0.05,
        q_air_out_ss: 0.2,
    }
}

/// The canonical default scenario: PI control of the reference transient
/// (+10% q_f step at 200 s, +20% C_R step at 300 s).
pub fn default_file() -> ScenarioFile {
    ScenarioFile {
        params: PlantParams::default(),
        operating_point: default_knowns(),
        controller: ControllerSection {
            kind: ControllerKind::Pi,
            pi: PiSection::default(),
            mpc: MpcSection::default(),
        },
        signals: SignalsSection {
            ref_q_f: Some(Signal::step(3.2e-4, 200.0, 3.52e-4)),
            ref_c_r: Some(Signal::step(25.0, 300.0, 30.0)),
            ..SignalsSection::default()
        },
        run: RunSection::default(),
    }
}

pub fn to_toml(file: &ScenarioFile) -> String {
    toml::to_string_pretty(file).expect("scenario serialization cannot fail")
}

/// Strict parse; the error message carries the offending line/column.
pub fn parse_str(content: &str, origin: &str) -> Result<ScenarioFile> {
    toml::from_str(content).map_err(|e| Error::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })
}

pub fn load(path: &Path) -> Result<ScenarioFile> {
    let content = std::fs::read_to_string(path)?;
    parse_str(&content, &path.display().to_string())
}

/// Everything a subcommand needs after resolving a scenario file.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub params: PlantParams,
    pub knowns: SteadyKnowns,
    pub op: OperatingPoint,
    pub scenario: Scenario,
    pub run: RunSection,
    pub kind: ControllerKind,
}

/// Resolve a parsed file into a runnable scenario.
///
/// Solves the operating point, fills absent signals with operating-point
/// holds, tunes the PI architecture (or applies explicit gains), and builds
/// the MPC controller at the run's sample period.
pub fn build(file: &ScenarioFile) -> Result<LoadedScenario> {
    build_with_controller(file, file.controller.kind)
}

/// Same as [`build`] but forcing the controller type (used by `--compare`).
pub fn build_with_controller(file: &ScenarioFile, kind: ControllerKind) -> Result<LoadedScenario> {
    file.params.validate()?;
    let op = solve_steady_state(&file.params, &file.operating_point)?;

    let mut references = ReferenceSignals::hold(&op);
    let mut inputs = InputSignals::hold(&op);
    let s = &file.signals;
    if let Some(sig) = &s.ref_q_f {
        references.q_f = sig.clone();
    }
    if let Some(sig) = &s.ref_c_r {
        references.c_r = sig.clone();
    }
    if let Some(sig) = &s.ref_f_in {
        references.f_in = sig.clone();
    }
    if let Some(sig) = &s.t_m {
        inputs.t_m = sig.clone();
    }
    if let Some(sig) = &s.q_air_in {
        inputs.q_air_in = sig.clone();
    }
    if let Some(sig) = &s.q_air_out {
        inputs.q_air_out = sig.clone();
    }
    if let Some(sig) = &s.f_in {
        inputs.f_in = sig.clone();
    }
    if let Some(sig) = &s.c_in {
        inputs.c_in = sig.clone();
    }
    if let Some(sig) = &s.f_out {
        inputs.f_out = sig.clone();
    } else if file.run.fout_tracks_qf {
        // Schedule is mud flow in tracking mode; default keeps the
        // operating point balanced.
        inputs.f_out = Signal::constant(op.u_ss.f_out - op.x_ss.q_f);
    }

    let pi_section = &file.controller.pi;
    let controller = match kind {
        ControllerKind::OpenLoop => Controller::OpenLoop,
        ControllerKind::Pi => Controller::Pi(build_pi(file, &op)?),
        ControllerKind::Mpc => {
            let model = build_continuous(&file.params, &op)?;
            let cfg = mpc_config(&file.controller.mpc, file.run.ts);
            Controller::Mpc(Box::new(MpcController::new(cfg, &model)?))
        }
    };

    let scenario = Scenario {
        duration: file.run.duration,
        h: file.run.h,
        ts: file.run.ts,
        op,
        controller,
        references,
        inputs,
        fout_tracks_qf: file.run.fout_tracks_qf,
        initial_state: file.run.initial_state,
        ref_map: pi_section.ref_map,
        seed: file.run.seed,
    };
    scenario.validate()?;

    Ok(LoadedScenario {
        params: file.params,
        knowns: file.operating_point,
        op,
        scenario,
        run: file.run.clone(),
        kind,
    })
}

fn mpc_config(section: &MpcSection, ts: f64) -> MpcConfig {
    let q = section.q_weights;
    let r = section.r_weights;
    let b = section.u_bounds;
    MpcConfig {
        np: section.np,
        nc: section.nc,
        q_weights: [q.omega, q.p_v, q.c_r, q.h_cake, q.q_f],
        r_weights: [r.t_m, r.q_air_in, r.c_in],
        u_bounds: [
            (b.t_m[0], b.t_m[1]),
            (b.q_air_in[0], b.q_air_in[1]),
            (b.c_in[0], b.c_in[1]),
        ],
        y_min: section.y_min.to_array(),
        y_max: section.y_max.to_array(),
        ts,
        penalize_moves: section.penalize_moves,
    }
}

fn deviation_bounds(section: &PiBoundsSection, op: &OperatingPoint) -> PiActuatorBounds {
    PiActuatorBounds {
        t_m: (section.t_m[0] - op.u_ss.t_m, section.t_m[1] - op.u_ss.t_m),
        c_in: (
            section.c_in[0] - op.u_ss.c_in,
            section.c_in[1] - op.u_ss.c_in,
        ),
        q_air_in: (
            section.q_air_in[0] - op.u_ss.q_air_in,
            section.q_air_in[1] - op.u_ss.q_air_in,
        ),
        p_v_setpoint: (
            section.p_v_setpoint[0] - op.x_ss.p_v,
            section.p_v_setpoint[1] - op.x_ss.p_v,
        ),
    }
}

fn build_pi(file: &ScenarioFile, op: &OperatingPoint) -> Result<crate::pi::PiArchitecture> {
    let section = &file.controller.pi;
    let bounds = deviation_bounds(&section.bounds, op);
    let model = build_continuous(&file.params, op)?;
    let mut arch = tune_default_gains(&model, &section.closures, &bounds)?;

    let apply = |target: &mut PiGains, spec: &LoopGainsSpec| {
        target.kp = spec.kp;
        target.ki = spec.ki;
        target.kaw = spec.kaw;
    };
    if let Some(g) = &section.gains.omega {
        apply(&mut arch.loop_omega.gains, g);
    }
    if let Some(g) = &section.gains.concentration {
        apply(&mut arch.loop_concentration.gains, g);
    }
    if let Some(g) = &section.gains.qf_outer {
        apply(&mut arch.loop_qf_outer.gains, g);
    }
    if let Some(g) = &section.gains.pv_inner {
        apply(&mut arch.loop_pv_inner.gains, g);
    }
    arch.validate()?;

    if section.ref_map == RefMapDirection::PaperLiteral {
        arch.ref_gain = op.u_ss.f_in / op.x_ss.omega;
    }
    Ok(arch)
}

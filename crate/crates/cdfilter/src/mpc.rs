//! Centralized linear MPC.
//!
//! At every sample the controller stacks the discrete model into batch
//! prediction matrices, assembles a dense QP over the manipulated inputs
//! (torque, air inflow, feed concentration) with tracking and effort terms,
//! enforces hard input bounds and optional output bounds, solves it with the
//! active-set solver, and applies the first move. Non-manipulated inputs
//! pass through as measured disturbances.

use nalgebra::{DMatrix, DVector, SMatrix, Vector5};
use serde::{Deserialize, Serialize};

use crate::equilibrium::OperatingPoint;
use crate::linearize::{discretize, DiscreteLinearModel, DiscretizeMethod, LinearModel};
use crate::qp::{self, QpError, QpProblem, QpSolution};
use crate::{Error, Result};

/// Input-vector indices of the manipulated variables: torque, air inflow,
/// and feed concentration.
pub const MANIPULATED: [usize; 3] = [0, 1, 4];

/// Penalty weight on the L1 output-constraint slacks used when a sample's
/// hard output constraints are infeasible.
const SOFT_PENALTY: f64 = 1e6;

/// Tuning and constraint configuration.
///
/// Weights are dimensionless priorities; the controller scales them by the
/// squared operating-point magnitudes so outputs in Pa and m³/s compete
/// fairly. Bounds are absolute (same units as the plant inputs/outputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    /// Prediction horizon [steps].
    pub np: usize,
    /// Control horizon [steps]; inputs are held after it.
    pub nc: usize,
    /// Per-output tracking weights: ω, P_v, C_R, H, q_f.
    pub q_weights: [f64; 5],
    /// Per-input effort weights: T_m, q_air_in, C_in.
    pub r_weights: [f64; 3],
    /// Absolute input bounds (min, max) per manipulated input.
    pub u_bounds: [(f64, f64); 3],
    /// Optional absolute lower output bounds.
    pub y_min: [Option<f64>; 5],
    /// Optional absolute upper output bounds (the vat concentration cap
    /// lives here).
    pub y_max: [Option<f64>; 5],
    /// Sample period [s].
    pub ts: f64,
    /// Penalize input moves `Δu` instead of absolute deviation inputs.
    pub penalize_moves: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            np: 50,
            nc: 10,
            q_weights: [0.0, 0.0, 1.0, 0.0, 1.0],
            r_weights: [1e-3, 1e-3, 1e-3],
            u_bounds: [(0.0, 50.0), (0.0, 1.0), (0.0, 500.0)],
            y_min: [None; 5],
            y_max: [None, None, Some(60.0), None, None],
            ts: 0.1,
            penalize_moves: false,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nc < 1 || self.nc > self.np {
            return Err(Error::invalid(format!(
                "horizons must satisfy 1 <= nc <= np, got nc = {}, np = {}",
                self.nc, self.np
            )));
        }
        if !(self.ts > 0.0) {
            return Err(Error::invalid(format!("ts must be > 0, got {}", self.ts)));
        }
        if self.q_weights.iter().chain(self.r_weights.iter()).any(|&w| !(w >= 0.0)) {
            return Err(Error::invalid("weights must be >= 0".to_string()));
        }
        if self.q_weights.iter().all(|&w| w == 0.0) {
            return Err(Error::invalid(
                "at least one output tracking weight must be positive".to_string(),
            ));
        }
        for (k, (lo, hi)) in self.u_bounds.iter().enumerate() {
            if !(lo < hi) {
                return Err(Error::invalid(format!(
                    "input bound {k} must have min < max, got [{lo}, {hi}]"
                )));
            }
        }
        for o in 0..5 {
            if let (Some(lo), Some(hi)) = (self.y_min[o], self.y_max[o]) {
                if !(lo < hi) {
                    return Err(Error::invalid(format!(
                        "output bound {o} must have min < max, got [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Stacked free/forced response maps over the horizons.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrices {
    /// Free response `F`: (5·np)×5; block `i` is `A_d^i`.
    pub free: DMatrix<f64>,
    /// Forced response `Φ`: (5·np)×(m·nc); inputs held after `nc` fold the
    /// tail powers into the last block column.
    pub forced: DMatrix<f64>,
    pub np: usize,
    pub nc: usize,
    pub n_inputs: usize,
}

/// Build the batch prediction maps for the manipulated input subset.
pub fn build_prediction_matrices(
    dm: &DiscreteLinearModel,
    manipulated: &[usize],
    np: usize,
    nc: usize,
) -> PredictionMatrices {
    assert!(nc >= 1 && nc <= np, "1 <= nc <= np required");
    let m = manipulated.len();
    let mut b_m = DMatrix::<f64>::zeros(5, m);
    for (k, &j) in manipulated.iter().enumerate() {
        for i in 0..5 {
            b_m[(i, k)] = dm.b_d[(i, j)];
        }
    }
    let a: DMatrix<f64> = DMatrix::from_column_slice(5, 5, dm.a_d.as_slice());

    // Powers A^0..A^np and their running sums times B.
    let mut powers = Vec::with_capacity(np + 1);
    powers.push(DMatrix::<f64>::identity(5, 5));
    for i in 1..=np {
        let next = &powers[i - 1] * &a;
        powers.push(next);
    }
    let mut power_sums_b = Vec::with_capacity(np + 1);
    power_sums_b.push(b_m.clone());
    for i in 1..=np {
        let next = &power_sums_b[i - 1] + &powers[i] * &b_m;
        power_sums_b.push(next);
    }

    let mut free = DMatrix::<f64>::zeros(5 * np, 5);
    let mut forced = DMatrix::<f64>::zeros(5 * np, m * nc);
    for i in 1..=np {
        free.view_mut((5 * (i - 1), 0), (5, 5)).copy_from(&powers[i]);
        for j in 1..=i.min(nc) {
            let block = if j < nc {
                powers[i - j].clone() * &b_m
            } else {
                power_sums_b[i - j].clone()
            };
            forced
                .view_mut((5 * (i - 1), m * (j - 1)), (5, m))
                .copy_from(&block);
        }
    }

    PredictionMatrices {
        free,
        forced,
        np,
        nc,
        n_inputs: m,
    }
}

/// Already unit-scaled cost terms in deviation space.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledCost {
    pub q_diag: [f64; 5],
    /// One weight per manipulated input.
    pub r_diag: Vec<f64>,
    pub penalize_moves: bool,
}

/// Deviation-space constraint set.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationBounds {
    pub u_lower: Vec<Option<f64>>,
    pub u_upper: Vec<Option<f64>>,
    pub y_min: [Option<f64>; 5],
    pub y_max: [Option<f64>; 5],
}

impl DeviationBounds {
    pub fn unconstrained(n_inputs: usize) -> Self {
        DeviationBounds {
            u_lower: vec![None; n_inputs],
            u_upper: vec![None; n_inputs],
            y_min: [None; 5],
            y_max: [None; 5],
        }
    }
}

/// What a QP constraint row encodes; parallel to the row order of
/// [`assemble_qp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// `u[step·m + input] ≤ upper`.
    UpperInput { step: usize, input: usize },
    /// `−u[step·m + input] ≤ −lower`.
    LowerInput { step: usize, input: usize },
    /// Predicted output `o` at step `i` capped above.
    UpperOutput { step: usize, output: usize },
    /// Predicted output `o` at step `i` capped below.
    LowerOutput { step: usize, output: usize },
}

/// Assemble the tracking QP for one sample.
///
/// `hessian = ΦᵀQ̄Φ + R̄` (or `ΦᵀQ̄Φ + DᵀR̄D` in move-penalty form) and
/// `linear = ΦᵀQ̄(F·x0 − ref)` (plus the previous-move coupling term in
/// move-penalty form). Input bounds become identity rows per step; output
/// bounds become Φ rows with the free response folded into the rhs.
pub fn assemble_qp(
    pred: &PredictionMatrices,
    x0: &Vector5<f64>,
    ref_traj: &DVector<f64>,
    cost: &ScaledCost,
    bounds: &DeviationBounds,
    u_prev: &DVector<f64>,
) -> (QpProblem, Vec<RowKind>) {
    let m = pred.n_inputs;
    let nv = m * pred.nc;
    let ny = 5 * pred.np;
    assert_eq!(ref_traj.len(), ny, "reference trajectory length");
    assert_eq!(cost.r_diag.len(), m);
    assert_eq!(u_prev.len(), m);

    // Q̄·Φ with Q̄ block-diagonal from the per-output weights.
    let mut q_phi = pred.forced.clone();
    let mut q_free_err = &pred.free * x0 - ref_traj;
    for i in 0..pred.np {
        for o in 0..5 {
            let w = cost.q_diag[o];
            let r = 5 * i + o;
            q_free_err[r] *= w;
            for c in 0..nv {
                q_phi[(r, c)] *= w;
            }
        }
    }
    let mut hessian = pred.forced.transpose() * &q_phi;
    let mut linear = pred.forced.transpose() * q_free_err;

    if cost.penalize_moves {
        // D maps stacked inputs to moves; Δu₀ couples to the previous move.
        let mut d = DMatrix::<f64>::identity(nv, nv);
        for j in 1..pred.nc {
            for k in 0..m {
                d[(j * m + k, (j - 1) * m + k)] = -1.0;
            }
        }
        let mut r_d = d.clone();
        for j in 0..pred.nc {
            for k in 0..m {
                let row = j * m + k;
                let w = cost.r_diag[k];
                for c in 0..nv {
                    r_d[(row, c)] *= w;
                }
            }
        }
        hessian += d.transpose() * &r_d;
        // −Dᵀ·R̄·E·u_prev with E selecting the first block.
        for k in 0..m {
            linear[k] -= cost.r_diag[k] * u_prev[k];
        }
    } else {
        for j in 0..pred.nc {
            for k in 0..m {
                hessian[(j * m + k, j * m + k)] += cost.r_diag[k];
            }
        }
    }

    // Constraint rows: input bounds per step, then output bounds per
    // prediction step.
    let mut rows: Vec<(Vec<f64>, f64, RowKind)> = Vec::new();
    for j in 0..pred.nc {
        for k in 0..m {
            if let Some(hi) = bounds.u_upper[k] {
                let mut row = vec![0.0; nv];
                row[j * m + k] = 1.0;
                rows.push((row, hi, RowKind::UpperInput { step: j, input: k }));
            }
            if let Some(lo) = bounds.u_lower[k] {
                let mut row = vec![0.0; nv];
                row[j * m + k] = -1.0;
                rows.push((row, -lo, RowKind::LowerInput { step: j, input: k }));
            }
        }
    }
    let free_x = &pred.free * x0;
    for i in 0..pred.np {
        for o in 0..5 {
            let r = 5 * i + o;
            if let Some(hi) = bounds.y_max[o] {
                let row: Vec<f64> = (0..nv).map(|c| pred.forced[(r, c)]).collect();
                rows.push((row, hi - free_x[r], RowKind::UpperOutput { step: i, output: o }));
            }
            if let Some(lo) = bounds.y_min[o] {
                let row: Vec<f64> = (0..nv).map(|c| -pred.forced[(r, c)]).collect();
                rows.push((row, free_x[r] - lo, RowKind::LowerOutput { step: i, output: o }));
            }
        }
    }

    let n_rows = rows.len();
    let mut ineq_matrix = DMatrix::<f64>::zeros(n_rows, nv);
    let mut ineq_rhs = DVector::<f64>::zeros(n_rows);
    let mut kinds = Vec::with_capacity(n_rows);
    for (r, (row, rhs, kind)) in rows.into_iter().enumerate() {
        for (c, v) in row.into_iter().enumerate() {
            ineq_matrix[(r, c)] = v;
        }
        ineq_rhs[r] = rhs;
        kinds.push(kind);
    }

    (
        QpProblem {
            hessian,
            linear,
            ineq_matrix,
            ineq_rhs,
        },
        kinds,
    )
}

/// Deviation references for the tracked outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MpcRefs {
    /// Speed reference deviation (from the mapped inflow reference).
    pub omega: f64,
    pub c_r: f64,
    pub q_f: f64,
}

/// First-move actuator commands, as deviations from the operating point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MpcCommand {
    pub t_m: f64,
    pub q_air_in: f64,
    pub c_in: f64,
}

/// Per-sample solver diagnostics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MpcStepInfo {
    pub iterations: usize,
    pub cost: f64,
    /// Active QP rows at the solution (indices into the assembled rows).
    pub active: Vec<usize>,
    /// Which manipulated inputs had a bound active (any step, either side).
    pub input_bound_active: [bool; 3],
    /// Output constraints were softened with L1 slacks this sample.
    pub softened: bool,
    /// The solver hit its iteration cap; the best feasible move was applied.
    pub iteration_limited: bool,
}

/// Receding-horizon controller bound to one operating point.
#[derive(Debug, Clone)]
pub struct MpcController {
    cfg: MpcConfig,
    pred: PredictionMatrices,
    cost: ScaledCost,
    bounds: DeviationBounds,
    op: OperatingPoint,
    u_prev: DVector<f64>,
    warm_u: Option<DVector<f64>>,
    warm_active: Vec<usize>,
    kkt_tol: f64,
    max_iter: usize,
}

impl MpcController {
    /// Discretize the model at the configured rate and prepare the horizon
    /// matrices, scaled weights, and deviation bounds.
    pub fn new(cfg: MpcConfig, model: &LinearModel) -> Result<Self> {
        cfg.validate()?;
        let dm = discretize(model, cfg.ts, DiscretizeMethod::ZeroOrderHold);
        Self::from_discrete(cfg, &dm, &model.op)
    }

    /// Same as [`MpcController::new`] but from an existing discrete model.
    pub fn from_discrete(
        cfg: MpcConfig,
        dm: &DiscreteLinearModel,
        op: &OperatingPoint,
    ) -> Result<Self> {
        cfg.validate()?;
        let pred = build_prediction_matrices(dm, &MANIPULATED, cfg.np, cfg.nc);

        let x_ss = op.x_ss.to_vector();
        let u_ss = op.u_ss.to_vector();
        let mut q_diag = [0.0; 5];
        for o in 0..5 {
            let scale = x_ss[o].abs().max(1e-9);
            q_diag[o] = cfg.q_weights[o] / (scale * scale);
        }
        let mut r_diag = Vec::with_capacity(3);
        let mut u_lower = Vec::with_capacity(3);
        let mut u_upper = Vec::with_capacity(3);
        for (k, &j) in MANIPULATED.iter().enumerate() {
            let scale = u_ss[j].abs().max(1e-9);
            r_diag.push(cfg.r_weights[k] / (scale * scale));
            u_lower.push(Some(cfg.u_bounds[k].0 - u_ss[j]));
            u_upper.push(Some(cfg.u_bounds[k].1 - u_ss[j]));
        }
        let mut y_min = [None; 5];
        let mut y_max = [None; 5];
        for o in 0..5 {
            y_min[o] = cfg.y_min[o].map(|v| v - x_ss[o]);
            y_max[o] = cfg.y_max[o].map(|v| v - x_ss[o]);
        }

        Ok(MpcController {
            cost: ScaledCost {
                q_diag,
                r_diag,
                penalize_moves: cfg.penalize_moves,
            },
            bounds: DeviationBounds {
                u_lower,
                u_upper,
                y_min,
                y_max,
            },
            pred,
            op: *op,
            u_prev: DVector::zeros(3),
            warm_u: None,
            warm_active: Vec::new(),
            kkt_tol: 1e-8,
            max_iter: 200,
            cfg,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn operating_point(&self) -> &OperatingPoint {
        &self.op
    }

    /// Constant reference held over the whole horizon.
    fn tile_refs(&self, refs: &MpcRefs) -> DVector<f64> {
        let per_step = [refs.omega, 0.0, refs.c_r, 0.0, refs.q_f];
        let mut out = DVector::zeros(5 * self.pred.np);
        for i in 0..self.pred.np {
            for o in 0..5 {
                out[5 * i + o] = per_step[o];
            }
        }
        out
    }

    /// Solve the receding-horizon QP and return the first move.
    pub fn step(&mut self, x_dev: &Vector5<f64>, refs: &MpcRefs) -> Result<(MpcCommand, MpcStepInfo)> {
        let ref_traj = self.tile_refs(refs);
        let (problem, kinds) = assemble_qp(
            &self.pred,
            x_dev,
            &ref_traj,
            &self.cost,
            &self.bounds,
            &self.u_prev,
        );

        let mut softened = false;
        let mut iteration_limited = false;

        let attempt = match &self.warm_u {
            Some(w) => qp::solve_qp_with_start(&problem, w, &self.warm_active, self.kkt_tol, self.max_iter),
            None => qp::solve_qp(&problem, self.kkt_tol, self.max_iter),
        };

        let solution = match attempt {
            Ok(s) => s,
            Err(QpError::IterationLimit(best)) => {
                iteration_limited = true;
                *best
            }
            Err(QpError::Infeasible) => {
                let has_output_rows = kinds
                    .iter()
                    .any(|k| matches!(k, RowKind::UpperOutput { .. } | RowKind::LowerOutput { .. }));
                if !has_output_rows {
                    return Err(Error::QpInfeasible { at: None });
                }
                softened = true;
                self.warm_u = None;
                self.warm_active.clear();
                match solve_softened(&problem, &kinds, self.kkt_tol, self.max_iter) {
                    Ok(s) => s,
                    Err(QpError::IterationLimit(best)) => {
                        iteration_limited = true;
                        *best
                    }
                    Err(QpError::Infeasible) => return Err(Error::QpInfeasible { at: None }),
                    Err(e) => return Err(Error::invalid(e.to_string())),
                }
            }
            Err(e) => return Err(Error::invalid(e.to_string())),
        };

        let mut input_bound_active = [false; 3];
        for &row in &solution.active {
            if let Some(kind) = kinds.get(row) {
                match kind {
                    RowKind::UpperInput { input, .. } | RowKind::LowerInput { input, .. } => {
                        input_bound_active[*input] = true;
                    }
                    _ => {}
                }
            }
        }

        // First move, clamped into the deviation box against rounding.
        let mut first = [0.0; 3];
        for k in 0..3 {
            let mut v = solution.u[k];
            if let Some(lo) = self.bounds.u_lower[k] {
                v = v.max(lo);
            }
            if let Some(hi) = self.bounds.u_upper[k] {
                v = v.min(hi);
            }
            first[k] = v;
        }

        let info = MpcStepInfo {
            iterations: solution.iterations,
            cost: solution.cost,
            active: solution.active.clone(),
            input_bound_active,
            softened,
            iteration_limited,
        };

        if !softened {
            self.warm_active = solution.active.clone();
            self.warm_u = Some(solution.u.clone());
        }
        self.u_prev = DVector::from_row_slice(&first);

        Ok((
            MpcCommand {
                t_m: first[0],
                q_air_in: first[1],
                c_in: first[2],
            },
            info,
        ))
    }

    /// Forget warm-start and previous-move state.
    pub fn reset(&mut self) {
        self.u_prev = DVector::zeros(3);
        self.warm_u = None;
        self.warm_active.clear();
    }
}

/// Re-solve with L1 slacks on the output rows after a hard infeasibility.
///
/// Variables become `(u, s)` with `s ≥ 0`, output rows relaxed to
/// `Φ·u − s ≤ rhs`, and cost `SOFT_PENALTY·Σs` plus a small quadratic term
/// to keep the Hessian positive definite.
fn solve_softened(
    problem: &QpProblem,
    kinds: &[RowKind],
    tol: f64,
    max_iter: usize,
) -> std::result::Result<QpSolution, QpError> {
    let n = problem.linear.len();
    let out_rows: Vec<usize> = kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| matches!(k, RowKind::UpperOutput { .. } | RowKind::LowerOutput { .. }))
        .map(|(i, _)| i)
        .collect();
    let ns = out_rows.len();
    let m = problem.ineq_matrix.nrows();

    let mut hessian = DMatrix::<f64>::zeros(n + ns, n + ns);
    hessian.view_mut((0, 0), (n, n)).copy_from(&problem.hessian);
    for k in 0..ns {
        hessian[(n + k, n + k)] = 1e-6;
    }
    let mut linear = DVector::<f64>::zeros(n + ns);
    linear.rows_mut(0, n).copy_from(&problem.linear);
    for k in 0..ns {
        linear[n + k] = SOFT_PENALTY;
    }

    let mut a = DMatrix::<f64>::zeros(m + ns, n + ns);
    a.view_mut((0, 0), (m, n)).copy_from(&problem.ineq_matrix);
    let mut b = DVector::<f64>::zeros(m + ns);
    b.rows_mut(0, m).copy_from(&problem.ineq_rhs);
    for (k, &row) in out_rows.iter().enumerate() {
        a[(row, n + k)] = -1.0;
        // s ≥ 0.
        a[(m + k, n + k)] = -1.0;
    }

    let aux = QpProblem {
        hessian,
        linear,
        ineq_matrix: a,
        ineq_rhs: b,
    };
    let sol = qp::solve_qp(&aux, tol, max_iter.max(4 * (n + ns) + 50))?;

    // Report in the original variable space; active set indices of the
    // original rows are preserved by construction.
    let u = sol.u.rows(0, n).into_owned();
    let active: Vec<usize> = sol.active.iter().copied().filter(|&i| i < m).collect();
    let cost = problem.cost(&u);
    Ok(QpSolution {
        u,
        multipliers: sol.multipliers.rows(0, m).into_owned(),
        active,
        iterations: sol.iterations,
        cost,
        cost_trace: sol.cost_trace,
        kkt: sol.kkt,
    })
}

/// Embed a scalar (a, b) pair as a 5-state discrete model on the first
/// state; used by tests and the analytic examples.
pub fn scalar_discrete(a: f64, b: f64, ts: f64) -> DiscreteLinearModel {
    let mut a_d = SMatrix::<f64, 5, 5>::zeros();
    a_d[(0, 0)] = a;
    let mut b_d = SMatrix::<f64, 5, 6>::zeros();
    b_d[(0, 0)] = b;
    DiscreteLinearModel {
        a_d,
        b_d,
        ts,
        method: DiscretizeMethod::ZeroOrderHold,
    }
}

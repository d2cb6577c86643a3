//! Deviation-variable state-space model around an operating point.
//!
//! The continuous model `dx = A·x + B·u`, `y = C·x + D·u` is built
//! analytically from the plant Jacobians (C = I₅, D = 0). A central
//! finite-difference Jacobian serves as the independent oracle for the
//! analytic matrices, and the model discretizes by zero-order hold (via the
//! augmented matrix exponential) or forward Euler for the sampled
//! controllers.

use nalgebra::{DMatrix, SMatrix};
use serde::{Deserialize, Serialize};

use crate::equilibrium::OperatingPoint;
use crate::plant::{self, PlantInput, PlantParams, PlantState, ResistanceMode};
use crate::{Error, Result};

pub type StateMatrix = SMatrix<f64, 5, 5>;
pub type InputMatrix = SMatrix<f64, 5, 6>;

/// The linearization constants, grouped by the balance they come from.
///
/// `k34` and `k44` store the analytic cake-balance partials (`H_ss` and
/// `ω_ss`); `k15 = 1/(τ_q·R_tot)` and `k25 = 1/τ_q` are the Darcy-row
/// partials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KSet {
    pub k11: f64,
    pub k21: f64,
    pub k31: f64,
    pub k12: f64,
    pub k13: f64,
    pub k23: f64,
    pub k33: f64,
    pub k43: f64,
    pub k14: f64,
    pub k24: f64,
    pub k34: f64,
    pub k44: f64,
    pub k15: f64,
    pub k25: f64,
}

/// Continuous-time deviation model anchored at an operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: StateMatrix,
    pub b: InputMatrix,
    /// Identity: all states are measured directly.
    pub c: StateMatrix,
    /// Zero: no direct feedthrough.
    pub d: InputMatrix,
    /// Anchor point of the deviation variables.
    pub op: OperatingPoint,
}

/// Discretization method for [`discretize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscretizeMethod {
    /// Exact for piecewise-constant inputs: `A_d = exp(A·ts)`,
    /// `B_d = (∫₀^ts exp(Aσ)dσ)·B`.
    #[default]
    ZeroOrderHold,
    /// `A_d = I + A·ts`, `B_d = B·ts`.
    ForwardEuler,
}

/// Sampled form of [`LinearModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLinearModel {
    pub a_d: StateMatrix,
    pub b_d: InputMatrix,
    pub ts: f64,
    pub method: DiscretizeMethod,
}

/// Evaluate all fourteen linearization constants at `op`.
pub fn k_constants(params: &PlantParams, op: &OperatingPoint) -> KSet {
    let rho_a = params.rho_c * params.area;
    let r_tot = match params.resistance_mode {
        ResistanceMode::ConstantTotal => params.r_medium,
        ResistanceMode::LinearInCake => {
            params.r_medium + params.r_cake_specific * op.x_ss.h_cake
        }
    };
    KSet {
        k11: 1.0 / params.j_inertia,
        k21: params.k_d / params.j_inertia,
        k31: params.k_c / params.j_inertia,
        k12: params.gas_gain(),
        k13: op.u_ss.c_in / params.v_vat,
        k23: op.u_ss.f_in / params.v_vat,
        k33: op.x_ss.c_r / params.v_vat,
        k43: op.u_ss.f_out / params.v_vat,
        k14: op.x_ss.q_f / rho_a,
        k24: op.x_ss.c_r / rho_a,
        k34: op.x_ss.h_cake,
        k44: op.x_ss.omega,
        k15: 1.0 / (params.tau_q * r_tot),
        k25: 1.0 / params.tau_q,
    }
}

/// Build the analytic continuous-time deviation model.
///
/// Valid only with constant total resistance; the Darcy row has no cake
/// dependence in that regime. Row 2 of `A` is zero (the receiver pressure is
/// a pure integrator of the air flows) and rows 4–5 of `B` are zero.
pub fn build_continuous(params: &PlantParams, op: &OperatingPoint) -> Result<LinearModel> {
    if params.resistance_mode != ResistanceMode::ConstantTotal {
        return Err(Error::UnsupportedResistanceMode);
    }
    let k = k_constants(params, op);

    let mut a = StateMatrix::zeros();
    // Torque balance row.
    a[(0, 0)] = -k.k21;
    a[(0, 3)] = -k.k31;
    // Vat solids row.
    a[(2, 2)] = -k.k43;
    // Cake balance row: deposition minus speed-proportional removal.
    a[(3, 0)] = -k.k34;
    a[(3, 2)] = k.k14;
    a[(3, 3)] = -k.k44;
    a[(3, 4)] = k.k24;
    // Darcy row.
    a[(4, 1)] = -k.k15;
    a[(4, 4)] = -k.k25;

    let mut b = InputMatrix::zeros();
    b[(0, 0)] = k.k11;
    b[(1, 1)] = k.k12;
    b[(1, 2)] = -k.k12;
    b[(2, 3)] = k.k13;
    b[(2, 4)] = k.k23;
    b[(2, 5)] = -k.k33;

    Ok(LinearModel {
        a,
        b,
        c: StateMatrix::identity(),
        d: InputMatrix::zeros(),
        op: *op,
    })
}

/// Central-difference Jacobians of the plant derivative around `op`.
///
/// Each state/input component is perturbed by `rel_step·(1 + |value|)`.
/// This is the independent oracle for [`build_continuous`].
pub fn finite_difference_jacobian(
    params: &PlantParams,
    op: &OperatingPoint,
    rel_step: f64,
) -> Result<(StateMatrix, InputMatrix)> {
    let mut a = StateMatrix::zeros();
    let mut b = InputMatrix::zeros();

    let x0 = op.x_ss.to_vector();
    let u0 = op.u_ss.to_vector();

    for j in 0..5 {
        let h = rel_step * (1.0 + x0[j].abs());
        let mut xp = x0;
        let mut xm = x0;
        xp[j] += h;
        xm[j] -= h;
        let fp = plant::derivative(params, &PlantState::from_vector(&xp), &op.u_ss)?.to_vector();
        let fm = plant::derivative(params, &PlantState::from_vector(&xm), &op.u_ss)?.to_vector();
        let col = (fp - fm) / (2.0 * h);
        a.set_column(j, &col);
    }
    for j in 0..6 {
        let h = rel_step * (1.0 + u0[j].abs());
        let mut up = u0;
        let mut um = u0;
        up[j] += h;
        um[j] -= h;
        let fp = plant::derivative(params, &op.x_ss, &PlantInput::from_vector(&up))?.to_vector();
        let fm = plant::derivative(params, &op.x_ss, &PlantInput::from_vector(&um))?.to_vector();
        let col = (fp - fm) / (2.0 * h);
        b.set_column(j, &col);
    }
    Ok((a, b))
}

/// Sample the continuous model at period `ts`.
pub fn discretize(m: &LinearModel, ts: f64, method: DiscretizeMethod) -> DiscreteLinearModel {
    assert!(ts > 0.0, "sample period must be positive");
    let (a_d, b_d) = match method {
        DiscretizeMethod::ForwardEuler => (StateMatrix::identity() + m.a * ts, m.b * ts),
        DiscretizeMethod::ZeroOrderHold => {
            // Augmented exponential: exp([A B; 0 0]·ts) = [A_d B_d; 0 I].
            let mut aug = DMatrix::<f64>::zeros(11, 11);
            aug.view_mut((0, 0), (5, 5)).copy_from(&(m.a * ts));
            aug.view_mut((0, 5), (5, 6)).copy_from(&(m.b * ts));
            let e = expm(&aug);
            let mut a_d = StateMatrix::zeros();
            let mut b_d = InputMatrix::zeros();
            for i in 0..5 {
                for j in 0..5 {
                    a_d[(i, j)] = e[(i, j)];
                }
                for j in 0..6 {
                    b_d[(i, j)] = e[(i, 5 + j)];
                }
            }
            (a_d, b_d)
        }
    };
    DiscreteLinearModel {
        a_d,
        b_d,
        ts,
        method,
    }
}

/// Largest elementwise relative discrepancy between two equally sized
/// matrices. Entries compare against their own magnitude, floored at 1e-9 of
/// the reference's largest entry so structural zeros only need to agree in
/// absolute terms.
pub fn max_relative_error(reference: &DMatrix<f64>, candidate: &DMatrix<f64>) -> f64 {
    assert_eq!(reference.shape(), candidate.shape());
    let scale = reference.iter().map(|v| v.abs()).fold(0.0, f64::max);
    reference
        .iter()
        .zip(candidate.iter())
        .map(|(r, c)| (r - c).abs() / (r.abs().max(1e-9 * scale) + 1e-300))
        .fold(0.0, f64::max)
}

/// Analytic-vs-finite-difference agreement check; the worst relative entry
/// error across both Jacobians.
pub fn fd_agreement(params: &PlantParams, op: &OperatingPoint) -> Result<f64> {
    let m = build_continuous(params, op)?;
    let (a_fd, b_fd) = finite_difference_jacobian(params, op, 1e-6)?;
    let a_err = max_relative_error(
        &DMatrix::from_column_slice(5, 5, m.a.as_slice()),
        &DMatrix::from_column_slice(5, 5, a_fd.as_slice()),
    );
    let b_err = max_relative_error(
        &DMatrix::from_column_slice(5, 6, m.b.as_slice()),
        &DMatrix::from_column_slice(5, 6, b_fd.as_slice()),
    );
    Ok(a_err.max(b_err))
}

/// Matrix exponential by scaling-and-squaring with a truncated Taylor series.
///
/// The argument is scaled by 2^-s until its 1-norm is below 0.5, the series
/// is summed to order 12, and the result squared s times. Adequate for the
/// small, well-scaled matrices produced here.
fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    const TAYLOR_ORDER: usize = 12;
    let n = m.nrows();
    let norm = m
        .column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = m / 2f64.powi(s as i32);

    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=TAYLOR_ORDER {
        term = (&term * &scaled) / k as f64;
        result += &term;
    }
    for _ in 0..s {
        result = &result * &result;
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{solve_steady_state, SteadyKnowns};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn table_op() -> (PlantParams, OperatingPoint) {
        let params = PlantParams::default();
        let knowns = SteadyKnowns {
            omega_ss: 0.1047,
            p_v_ss: 61_300.0,
            c_r_ss: 25.0,
            c_in_ss: 100.0,
            f_out_ss: 0.05,
            q_air_out_ss: 0.2,
        };
        let op = solve_steady_state(&params, &knowns).unwrap();
        (params, op)
    }

    #[test]
    fn k_constant_values() {
        let (params, op) = table_op();
        let k = k_constants(&params, &op);
        assert_relative_eq!(k.k21, 5.0, max_relative = 1e-14);
        assert_relative_eq!(k.k11, 1.0 / 3.5, max_relative = 1e-14);
        assert_relative_eq!(k.k12, 8.314 * 313.0 / 0.055, max_relative = 1e-14);
        assert_relative_eq!(k.k25, 1.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(k.k15, 1.0 / (3.0 * 1.25e8), max_relative = 1e-14);
    }

    #[test]
    fn structural_zeros() {
        let (params, op) = table_op();
        let m = build_continuous(&params, &op).unwrap();
        // Receiver pressure is driven by inputs only.
        assert!(m.a.row(1).iter().all(|&v| v == 0.0));
        // Cake and Darcy rows take no direct input.
        assert!(m.b.row(3).iter().all(|&v| v == 0.0));
        assert!(m.b.row(4).iter().all(|&v| v == 0.0));
        assert_eq!(m.c, StateMatrix::identity());
        assert_eq!(m.d, InputMatrix::zeros());

        let k = k_constants(&params, &op);
        assert_eq!(m.b[(0, 0)], k.k11);
        assert_eq!(m.b[(1, 1)], k.k12);
        assert_eq!(m.b[(1, 2)], -k.k12);
    }

    #[test]
    fn degenerate_op_cake_row() {
        // Zero speed and zero cake leave only deposition terms in row 4.
        let (params, mut op) = table_op();
        op.x_ss.omega = 0.0;
        op.x_ss.h_cake = 0.0;
        let m = build_continuous(&params, &op).unwrap();
        let k = k_constants(&params, &op);
        let row: Vec<f64> = m.a.row(3).iter().copied().collect();
        assert_eq!(row, vec![0.0, 0.0, k.k14, 0.0, k.k24]);
    }

    #[test]
    fn linear_in_cake_is_rejected() {
        let (params, op) = table_op();
        let params = PlantParams {
            resistance_mode: ResistanceMode::LinearInCake,
            ..params
        };
        assert!(matches!(
            build_continuous(&params, &op),
            Err(Error::UnsupportedResistanceMode)
        ));
    }

    #[test]
    fn finite_difference_agrees_with_analytic() {
        let (params, op) = table_op();
        let err = fd_agreement(&params, &op).unwrap();
        assert!(err < 1e-6, "FD mismatch {err}");

        // Affine rows differentiate exactly.
        let (a_fd, _) = finite_difference_jacobian(&params, &op, 1e-6).unwrap();
        let k = k_constants(&params, &op);
        assert_relative_eq!(a_fd[(4, 1)], -k.k15, max_relative = 1e-9);
        assert_relative_eq!(a_fd[(4, 4)], -k.k25, max_relative = 1e-9);
        assert_relative_eq!(a_fd[(0, 0)], -k.k21, max_relative = 1e-9);
        assert_relative_eq!(a_fd[(0, 3)], -k.k31, max_relative = 1e-9);
    }

    #[test]
    fn zero_a_discretizes_to_identity() {
        let (_, op) = table_op();
        let m = LinearModel {
            a: StateMatrix::zeros(),
            b: InputMatrix::from_fn(|i, j| (i + j) as f64 / 7.0),
            c: StateMatrix::identity(),
            d: InputMatrix::zeros(),
            op,
        };
        for method in [DiscretizeMethod::ZeroOrderHold, DiscretizeMethod::ForwardEuler] {
            let dm = discretize(&m, 0.1, method);
            assert_relative_eq!(dm.a_d, StateMatrix::identity(), epsilon = 1e-14);
            assert_relative_eq!(dm.b_d, m.b * 0.1, epsilon = 1e-14);
        }
    }

    #[test]
    fn zoh_matches_scalar_exponential() {
        // The Darcy diagonal is a plain first-order lag: a_d = e^{-ts/τ_q}.
        let (params, op) = table_op();
        let m = build_continuous(&params, &op).unwrap();
        let dm = discretize(&m, 0.1, DiscretizeMethod::ZeroOrderHold);
        assert_relative_eq!(dm.a_d[(4, 4)], (-0.1f64 / 3.0).exp(), epsilon = 1e-12);
        assert_relative_eq!(dm.a_d[(2, 2)], (-0.1f64 * 0.05 / 3.0).exp(), epsilon = 1e-12);
        // Forward-Euler error shrinks as O(ts²).
        let gap = |ts: f64| {
            let zoh = discretize(&m, ts, DiscretizeMethod::ZeroOrderHold);
            let eul = discretize(&m, ts, DiscretizeMethod::ForwardEuler);
            (zoh.a_d - eul.a_d).norm()
        };
        let ratio = gap(0.1) / gap(0.05);
        assert!((ratio - 4.0).abs() < 0.5, "O(ts²) ratio was {ratio}");
    }

    #[test]
    fn expm_against_closed_form_2x2() {
        // Nilpotent block: exp([[0,1],[0,0]]·t) = [[1,t],[0,1]].
        let t = 0.7;
        let m = DMatrix::from_row_slice(2, 2, &[0.0, t, 0.0, 0.0]);
        let e = expm(&m);
        assert_relative_eq!(e[(0, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(e[(0, 1)], t, epsilon = 1e-14);
        assert_relative_eq!(e[(1, 1)], 1.0, epsilon = 1e-14);
        // Diagonal: exp(diag(a,b)).
        let m = DMatrix::from_row_slice(2, 2, &[-2.0, 0.0, 0.0, 3.0]);
        let e = expm(&m);
        assert_relative_eq!(e[(0, 0)], (-2f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(e[(1, 1)], 3f64.exp(), max_relative = 1e-12);
    }

    #[test]
    fn eigenvalue_structure_at_reference_point() {
        let (params, op) = table_op();
        let m = build_continuous(&params, &op).unwrap();
        let eigs = DMatrix::from_column_slice(5, 5, m.a.as_slice()).complex_eigenvalues();
        let near_zero = eigs.iter().filter(|e| e.re.abs() < 1e-12).count();
        assert_eq!(near_zero, 1, "expected exactly one integrator eigenvalue");
        assert!(eigs.iter().all(|e| e.re <= 1e-12));
    }

    #[test]
    fn linear_model_tracks_nonlinear_for_small_perturbations() {
        // 0.1% perturbation of every state; linear and nonlinear deviation
        // trajectories agree within 2% of the deviation swing over 50 s.
        let (params, op) = table_op();
        let model = build_continuous(&params, &op).unwrap();
        let h = 0.01;
        let steps = 5_000;

        let x_ss = op.x_ss.to_vector();
        let mut x_nl = op.x_ss;
        let mut dev_lin = nalgebra::Vector5::from_fn(|i, _| 1e-3 * x_ss[i]);
        {
            let perturbed = x_ss + dev_lin;
            x_nl = crate::plant::PlantState::from_vector(&perturbed);
        }

        let mut max_gap = nalgebra::Vector5::<f64>::zeros();
        let mut max_swing = nalgebra::Vector5::<f64>::zeros();
        for _ in 0..steps {
            // RK4 on the homogeneous linear system.
            let k1 = model.a * dev_lin;
            let k2 = model.a * (dev_lin + k1 * (h / 2.0));
            let k3 = model.a * (dev_lin + k2 * (h / 2.0));
            let k4 = model.a * (dev_lin + k3 * h);
            dev_lin += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);

            x_nl = crate::simulate::rk4_step(&params, &x_nl, &op.u_ss, h).unwrap();
            let dev_nl = x_nl.to_vector() - x_ss;
            for i in 0..5 {
                max_swing[i] = max_swing[i].max(dev_nl[i].abs());
                max_gap[i] = max_gap[i].max((dev_nl[i] - dev_lin[i]).abs());
            }
        }
        for i in 0..5 {
            assert!(
                max_gap[i] <= 0.02 * max_swing[i] + 1e-15,
                "state {i}: gap {} vs swing {}",
                max_gap[i],
                max_swing[i]
            );
        }
    }

    proptest! {
        // Analytic vs finite-difference agreement across operating points.
        #[test]
        fn fd_oracle_property(
            omega in 0.05..0.5f64,
            p_v in 20_000.0..95_000.0f64,
            c_r in 5.0..100.0f64,
            c_in in 50.0..300.0f64,
            f_out in 0.01..0.2f64,
        ) {
            let params = PlantParams::default();
            let knowns = SteadyKnowns {
                omega_ss: omega,
                p_v_ss: p_v,
                c_r_ss: c_r,
                c_in_ss: c_in,
                f_out_ss: f_out,
                q_air_out_ss: 0.2,
            };
            let op = solve_steady_state(&params, &knowns).unwrap();
            prop_assert!(fd_agreement(&params, &op).unwrap() < 1e-6);

            // Stability structure: no eigenvalue in the right half plane;
            // the receiver-pressure integrator contributes exactly one on
            // the imaginary axis.
            let m = build_continuous(&params, &op).unwrap();
            let eigs = DMatrix::from_column_slice(5, 5, m.a.as_slice()).complex_eigenvalues();
            prop_assert!(eigs.iter().all(|e| e.re <= 1e-12));
            prop_assert_eq!(eigs.iter().filter(|e| e.re.abs() < 1e-12).count(), 1);
        }
    }
}

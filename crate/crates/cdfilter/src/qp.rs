//! Dense convex QP solver: primal active-set with KKT certification.
//!
//! Solves `min ½·uᵀHu + fᵀu  s.t.  A·u ≤ b` for strictly convex `H`
//! (regularized by a small diagonal shift when needed). Every accepted
//! solution carries its four KKT residuals — stationarity, primal
//! feasibility, complementary slackness, and dual feasibility — so callers
//! can certify optimality rather than trust the iteration count.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// A dense inequality-constrained QP.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// Symmetric positive semidefinite cost curvature (n×n).
    pub hessian: DMatrix<f64>,
    /// Linear cost term (n).
    pub linear: DVector<f64>,
    /// Constraint rows (m×n); constraints read `ineq_matrix·u ≤ ineq_rhs`.
    pub ineq_matrix: DMatrix<f64>,
    /// Constraint right-hand sides (m).
    pub ineq_rhs: DVector<f64>,
}

impl QpProblem {
    /// Dimension and symmetry checks (symmetry to 1e-12, relative).
    pub fn validate(&self) -> Result<(), String> {
        let n = self.linear.len();
        if self.hessian.nrows() != n || self.hessian.ncols() != n {
            return Err(format!(
                "hessian is {}x{}, expected {n}x{n}",
                self.hessian.nrows(),
                self.hessian.ncols()
            ));
        }
        if self.ineq_matrix.ncols() != n && self.ineq_matrix.nrows() != 0 {
            return Err(format!(
                "constraint matrix has {} columns, expected {n}",
                self.ineq_matrix.ncols()
            ));
        }
        if self.ineq_matrix.nrows() != self.ineq_rhs.len() {
            return Err("constraint matrix and rhs row counts differ".to_string());
        }
        let scale = self.hessian.iter().map(|v| v.abs()).fold(1.0, f64::max);
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.hessian[(i, j)] - self.hessian[(j, i)]).abs() > 1e-12 * scale {
                    return Err(format!("hessian not symmetric at ({i},{j})"));
                }
            }
        }
        Ok(())
    }

    /// `½·uᵀHu + fᵀu`.
    pub fn cost(&self, u: &DVector<f64>) -> f64 {
        0.5 * (u.transpose() * &self.hessian * u)[(0, 0)] + self.linear.dot(u)
    }
}

/// The four KKT residuals of a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    /// `‖H·u + f + Aᵀλ‖∞`.
    pub stationarity: f64,
    /// `max(0, maxᵢ (A·u − b)ᵢ)`.
    pub primal: f64,
    /// `maxᵢ |λᵢ·(A·u − b)ᵢ|`.
    pub complementarity: f64,
    /// `max(0, −minᵢ λᵢ)`.
    pub dual: f64,
}

impl KktResiduals {
    pub fn worst(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.complementarity)
            .max(self.dual)
    }

    pub fn all_below(&self, tol: f64) -> bool {
        self.worst() < tol
    }
}

/// A certified QP solution with its active-set report.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    /// Lagrange multipliers, one per constraint row (zero when inactive).
    pub multipliers: DVector<f64>,
    /// Indices of the rows active at the solution, ascending.
    pub active: Vec<usize>,
    pub iterations: usize,
    pub cost: f64,
    /// Objective value after each iterate; non-increasing.
    pub cost_trace: Vec<f64>,
    pub kkt: KktResiduals,
}

/// Solver failures.
#[derive(Debug, Clone, PartialEq)]
pub enum QpError {
    /// Phase-1 found no feasible point.
    Infeasible,
    /// Iteration cap reached; carries the best feasible iterate seen.
    IterationLimit(Box<QpSolution>),
    /// Hessian not positive definite even after regularization.
    NotPositiveDefinite,
    /// Structural problem (dimensions, symmetry).
    Malformed(String),
}

impl std::fmt::Display for QpError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QpError::Infeasible => write!(f, "no feasible point exists"),
            QpError::IterationLimit(_) => write!(f, "iteration limit reached"),
            QpError::NotPositiveDefinite => write!(f, "hessian not positive definite"),
            QpError::Malformed(msg) => write!(f, "malformed QP: {msg}"),
        }
    }
}

impl std::error::Error for QpError {}

const REG_EPS: f64 = 1e-10;
const FEAS_TOL: f64 = 1e-9;

/// Solve the QP from an automatically determined feasible start.
///
/// Starts from the origin when feasible, otherwise runs a phase-1 slack
/// problem to find a feasible point (and reports `Infeasible` when none
/// exists).
pub fn solve_qp(p: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    p.validate().map_err(QpError::Malformed)?;
    let n = p.linear.len();
    let zero = DVector::zeros(n);
    let start = if is_feasible(p, &zero) {
        zero
    } else {
        phase_one(p, max_iter)?
    };
    active_set(p, start, &[], tol, max_iter)
}

/// Solve the QP from a caller-supplied start (used for warm starting).
///
/// Falls back to [`solve_qp`]'s start-finding when `x0` is infeasible.
/// `warm_active` suggests an initial working set; rows that are not active
/// at the start or would make the working set degenerate are dropped.
pub fn solve_qp_with_start(
    p: &QpProblem,
    x0: &DVector<f64>,
    warm_active: &[usize],
    tol: f64,
    max_iter: usize,
) -> Result<QpSolution, QpError> {
    p.validate().map_err(QpError::Malformed)?;
    if is_feasible(p, x0) {
        active_set(p, x0.clone(), warm_active, tol, max_iter)
    } else {
        solve_qp(p, tol, max_iter)
    }
}

fn is_feasible(p: &QpProblem, x: &DVector<f64>) -> bool {
    if p.ineq_matrix.nrows() == 0 {
        return true;
    }
    let slack = &p.ineq_rhs - &p.ineq_matrix * x;
    slack.iter().all(|&s| s >= -FEAS_TOL)
}

/// Cholesky factorization with an escalating diagonal shift.
fn factor(h: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, QpError> {
    if let Some(c) = h.clone().cholesky() {
        return Ok(c);
    }
    let mut reg = REG_EPS;
    for _ in 0..4 {
        let mut shifted = h.clone();
        for i in 0..h.nrows() {
            shifted[(i, i)] += reg;
        }
        if let Some(c) = shifted.cholesky() {
            return Ok(c);
        }
        reg *= 100.0;
    }
    Err(QpError::NotPositiveDefinite)
}

/// Phase-1: minimize a single slack `t` bounding all constraint violations.
///
/// Variables `(x, t)` with constraints `A·x − t ≤ b`, `−t ≤ 0`, a tiny
/// quadratic cost for strict convexity, and unit linear cost on `t`. The
/// start `(0, max(0, max −b) + 1)` is always feasible. A feasible region
/// forces the optimum to `t = 0` (the `t ≥ 0` bound goes active); a residual
/// `t* > 1e-7` certifies infeasibility.
fn phase_one(p: &QpProblem, max_iter: usize) -> Result<DVector<f64>, QpError> {
    let n = p.linear.len();
    let m = p.ineq_matrix.nrows();

    let mut hessian = DMatrix::zeros(n + 1, n + 1);
    for i in 0..=n {
        hessian[(i, i)] = 1e-8;
    }
    let mut linear = DVector::zeros(n + 1);
    linear[n] = 1.0;

    let mut a = DMatrix::zeros(m + 1, n + 1);
    a.view_mut((0, 0), (m, n)).copy_from(&p.ineq_matrix);
    for i in 0..m {
        a[(i, n)] = -1.0;
    }
    a[(m, n)] = -1.0;
    let mut b = DVector::zeros(m + 1);
    b.rows_mut(0, m).copy_from(&p.ineq_rhs);

    let aux = QpProblem {
        hessian,
        linear,
        ineq_matrix: a,
        ineq_rhs: b,
    };

    let mut start = DVector::zeros(n + 1);
    let worst = p.ineq_rhs.iter().fold(0.0f64, |acc, &bi| acc.max(-bi));
    start[n] = worst + 1.0;

    let sol = match active_set(&aux, start, &[], 1e-9, (max_iter).max(4 * (n + m) + 50)) {
        Ok(s) => s,
        Err(QpError::IterationLimit(best)) => *best,
        Err(e) => return Err(e),
    };
    let t = sol.u[n];
    if t > 1e-7 {
        return Err(QpError::Infeasible);
    }
    Ok(sol.u.rows(0, n).into_owned())
}

/// Primal active-set iteration from a feasible point.
///
/// Each pass solves the equality-constrained subproblem on the working set
/// via the Schur complement `A_W·H⁻¹·A_Wᵀ`, steps to the nearest blocking
/// constraint, and at a stationary point drops the constraint with the most
/// negative multiplier. A blocking row is always independent of the working
/// set (it moves along the step direction), so the Schur complement stays
/// positive definite.
fn active_set(
    p: &QpProblem,
    mut x: DVector<f64>,
    warm_active: &[usize],
    tol: f64,
    max_iter: usize,
) -> Result<QpSolution, QpError> {
    let _n = p.linear.len();
    let m = p.ineq_matrix.nrows();
    let chol = factor(&p.hessian)?;

    // Seed the working set from the warm-start hint: only rows that are
    // genuinely active at x and keep the working set nondegenerate.
    let mut working: Vec<usize> = Vec::new();
    for &i in warm_active {
        if i >= m {
            continue;
        }
        let slack = p.ineq_rhs[i] - p.ineq_matrix.row(i).transpose().dot(&x);
        if slack.abs() <= 1e-8 * (1.0 + p.ineq_rhs[i].abs()) {
            working.push(i);
            if schur(&chol, p, &working).is_none() {
                working.pop();
            }
        }
    }

    let mut cost_trace = vec![p.cost(&x)];
    let mut lambda_w: Vec<f64> = vec![0.0; working.len()];

    for iter in 1..=max_iter {
        let g = &p.hessian * &x + &p.linear;

        // Equality-constrained subproblem on the working set.
        let step: DVector<f64>;
        if working.is_empty() {
            step = -chol.solve(&g);
            lambda_w.clear();
        } else {
            let s = schur(&chol, p, &working).ok_or(QpError::NotPositiveDefinite)?;
            let h_inv_g = chol.solve(&g);
            let a_w = rows(&p.ineq_matrix, &working);
            let rhs = -(&a_w * &h_inv_g);
            let lam = s.solve(&rhs);
            lambda_w = lam.iter().copied().collect();
            step = -chol.solve(&(g + a_w.transpose() * lam));
        }

        let step_norm = step.amax();
        let stationary = step_norm <= 1e-11 * (1.0 + x.amax());

        if stationary {
            if working.is_empty() {
                return Ok(finish(p, x, &working, &lambda_w, iter, cost_trace));
            }
            let (worst_idx, worst_lambda) = lambda_w
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, &l)| (i, l))
                .unwrap();
            if worst_lambda >= -tol {
                return Ok(finish(p, x, &working, &lambda_w, iter, cost_trace));
            }
            working.remove(worst_idx);
            cost_trace.push(p.cost(&x));
            continue;
        }

        // Ratio test against the inactive rows.
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..m {
            if working.contains(&i) {
                continue;
            }
            let row = p.ineq_matrix.row(i);
            let direction = row.transpose().dot(&step);
            if direction > 1e-13 * (1.0 + step_norm) {
                let slack = p.ineq_rhs[i] - row.transpose().dot(&x);
                let ratio = (slack / direction).max(0.0);
                if ratio < alpha {
                    alpha = ratio;
                    blocking = Some(i);
                }
            }
        }

        x += alpha * &step;
        cost_trace.push(p.cost(&x));
        if let Some(i) = blocking {
            working.push(i);
        }
    }

    // Cap reached: report the best feasible iterate with its residuals.
    let best = finish(p, x, &working, &lambda_w, max_iter, cost_trace);
    Err(QpError::IterationLimit(Box::new(best)))
}

/// Schur complement `A_W·H⁻¹·A_Wᵀ` factorization; `None` when the working
/// set is degenerate.
fn schur(
    chol: &Cholesky<f64, Dyn>,
    p: &QpProblem,
    working: &[usize],
) -> Option<Cholesky<f64, Dyn>> {
    let a_w = rows(&p.ineq_matrix, working);
    let h_inv_at = chol.solve(&a_w.transpose());
    (&a_w * h_inv_at).cholesky()
}

fn rows(a: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(idx.len(), a.ncols());
    for (k, &i) in idx.iter().enumerate() {
        out.row_mut(k).copy_from(&a.row(i));
    }
    out
}

fn finish(
    p: &QpProblem,
    x: DVector<f64>,
    working: &[usize],
    lambda_w: &[f64],
    iterations: usize,
    cost_trace: Vec<f64>,
) -> QpSolution {
    let m = p.ineq_matrix.nrows();
    let mut multipliers = DVector::zeros(m);
    for (k, &i) in working.iter().enumerate() {
        // Clip the tiny negatives tolerated at optimality detection.
        multipliers[i] = lambda_w[k].max(0.0);
    }
    let mut active: Vec<usize> = working.to_vec();
    active.sort_unstable();

    let kkt = kkt_residuals(p, &x, &multipliers);
    let cost = p.cost(&x);
    QpSolution {
        u: x,
        multipliers,
        active,
        iterations,
        cost,
        cost_trace,
        kkt,
    }
}

/// Evaluate all four KKT residuals for a candidate `(u, λ)` pair.
pub fn kkt_residuals(p: &QpProblem, u: &DVector<f64>, multipliers: &DVector<f64>) -> KktResiduals {
    let stationarity = (&p.hessian * u + &p.linear + p.ineq_matrix.transpose() * multipliers).amax();
    let mut primal = 0.0f64;
    let mut complementarity = 0.0f64;
    let mut dual = 0.0f64;
    if p.ineq_matrix.nrows() > 0 {
        let violation = &p.ineq_matrix * u - &p.ineq_rhs;
        for (i, &v) in violation.iter().enumerate() {
            primal = primal.max(v);
            complementarity = complementarity.max((multipliers[i] * v).abs());
            dual = dual.max(-multipliers[i]);
        }
    }
    KktResiduals {
        stationarity,
        primal: primal.max(0.0),
        complementarity,
        dual: dual.max(0.0),
    }
}

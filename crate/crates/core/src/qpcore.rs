//! Standard-form convex QP/LP contract and the reference solving routine.
//!
//! Every optimisation problem in this crate is compiled to
//!
//! ```text
//! min  0.5 x' H x + g' x + c
//! s.t. A_in x <= b_in,   A_eq x = b_eq
//! ```
//!
//! with `H` symmetric positive semidefinite. The solving routine is backed by
//! an interior-point conic solver; the contract is the KKT post-condition
//! checked by [`check_kkt`], not the algorithm.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, ZeroConeT,
};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Default feasibility tolerance used when classifying solutions.
pub const DEFAULT_FEAS_TOL: f64 = 1e-8;
/// Default optimality (stationarity) tolerance.
pub const DEFAULT_OPT_TOL: f64 = 1e-8;
/// Infeasibility is only declared when the Farkas certificate residual is
/// below this threshold; otherwise the solve reports `MaxIterations`.
pub const INFEAS_CERT_TOL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cost matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("cost matrix has eigenvalue {0:.3e} below -1e-8")]
    NotPositiveSemidefinite(f64),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
}

/// Solver outcome classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
}

/// Standard-form convex quadratic program.
#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    /// Constant objective offset. Carries fixed terms such as `x0' Q x0` when
    /// a problem is assembled around a parameter.
    pub c: f64,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

impl QuadraticProgram {
    pub fn new(
        h: DMatrix<f64>,
        g: DVector<f64>,
        c: f64,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = g.len();
        if h.nrows() != n || h.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "H is {}x{}, expected {}x{}",
                h.nrows(),
                h.ncols(),
                n,
                n
            )));
        }
        if a_in.ncols() != n || a_in.nrows() != b_in.len() {
            return Err(QpError::DimensionMismatch(format!(
                "A_in is {}x{} with b_in of length {}",
                a_in.nrows(),
                a_in.ncols(),
                b_in.len()
            )));
        }
        if a_eq.ncols() != n || a_eq.nrows() != b_eq.len() {
            return Err(QpError::DimensionMismatch(format!(
                "A_eq is {}x{} with b_eq of length {}",
                a_eq.nrows(),
                a_eq.ncols(),
                b_eq.len()
            )));
        }
        let mut asym = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                asym = asym.max((h[(i, j)] - h[(j, i)]).abs());
            }
        }
        if asym > 1e-10 {
            return Err(QpError::NotSymmetric(asym));
        }
        // PSD check: a Cholesky of H + 1e-8 I certifies no eigenvalue below
        // -1e-8 without an O(n^3) eigendecomposition on large assemblies.
        let shifted = {
            let mut s = h.clone();
            for i in 0..n {
                s[(i, i)] += 1e-8;
            }
            s
        };
        if n > 0 && nalgebra::Cholesky::new(shifted).is_none() {
            let min_eig = h
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            return Err(QpError::NotPositiveSemidefinite(min_eig));
        }
        Ok(Self {
            h,
            g,
            c,
            a_in,
            b_in,
            a_eq,
            b_eq,
        })
    }

    /// Linear program `min g'x` over the same constraint structure.
    pub fn lp(
        g: DVector<f64>,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = g.len();
        Self::new(DMatrix::zeros(n, n), g, 0.0, a_in, b_in, a_eq, b_eq)
    }

    pub fn num_vars(&self) -> usize {
        self.g.len()
    }

    pub fn num_ineq(&self) -> usize {
        self.b_in.len()
    }

    pub fn num_eq(&self) -> usize {
        self.b_eq.len()
    }

    /// Objective value `0.5 x'Hx + g'x + c` at a point.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.h * x)[(0, 0)] + self.g.dot(x) + self.c
    }

    pub fn solve(&self, tol: f64) -> Result<QpSolution, QpError> {
        solve_qp(self, tol)
    }
}

/// Solver outcome with residual report.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub point: DVector<f64>,
    pub objective: f64,
    /// Worst constraint violation at `point` (inequality overshoot and
    /// equality mismatch, infinity norm).
    pub primal_residual: f64,
    /// Stationarity residual `||Hx + g + A_in' l + A_eq' n||_inf` with the
    /// solver multipliers.
    pub dual_residual: f64,
    /// Inequality multipliers (nonnegative at optimality).
    pub dual_ineq: DVector<f64>,
    /// Equality multipliers (sign-free).
    pub dual_eq: DVector<f64>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

fn to_csc_upper(h: &DMatrix<f64>) -> CscMatrix<f64> {
    let n = h.nrows();
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for j in 0..n {
        for i in 0..=j {
            let v = h[(i, j)];
            if v != 0.0 {
                rowval.push(i);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(n, n, colptr, rowval, nzval)
}

/// Stack `a_eq` on top of `a_in` in CSC order (zero cone first, then
/// nonnegative cone), as the conic backend expects.
fn to_csc_stacked(a_eq: &DMatrix<f64>, a_in: &DMatrix<f64>) -> CscMatrix<f64> {
    let (me, mi, n) = (a_eq.nrows(), a_in.nrows(), a_in.ncols());
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for j in 0..n {
        for i in 0..me {
            let v = a_eq[(i, j)];
            if v != 0.0 {
                rowval.push(i);
                nzval.push(v);
            }
        }
        for i in 0..mi {
            let v = a_in[(i, j)];
            if v != 0.0 {
                rowval.push(me + i);
                nzval.push(v);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(me + mi, n, colptr, rowval, nzval)
}

fn residuals(
    problem: &QpParts<'_>,
    x: &DVector<f64>,
    lam: &DVector<f64>,
    nu: &DVector<f64>,
) -> (f64, f64) {
    let mut primal = 0.0f64;
    if problem.a_in.nrows() > 0 {
        let s = problem.a_in * x - problem.b_in;
        primal = s.iter().cloned().fold(0.0, f64::max);
    }
    if problem.a_eq.nrows() > 0 {
        let e = problem.a_eq * x - problem.b_eq;
        primal = primal.max(e.amax());
    }
    let mut grad = match problem.h {
        Some(h) => h * x + problem.g,
        None => problem.g.clone(),
    };
    if problem.a_in.nrows() > 0 {
        grad += problem.a_in.transpose() * lam;
    }
    if problem.a_eq.nrows() > 0 {
        grad += problem.a_eq.transpose() * nu;
    }
    let dual = if grad.is_empty() { 0.0 } else { grad.amax() };
    (primal, dual)
}

/// Borrowed view of a QP, used by callers that re-solve a fixed structure
/// with varying right-hand sides without cloning the big matrices.
#[derive(Clone, Copy)]
pub struct QpParts<'a> {
    /// `None` means an LP (`H = 0`).
    pub h: Option<&'a DMatrix<f64>>,
    pub g: &'a DVector<f64>,
    pub c: f64,
    pub a_in: &'a DMatrix<f64>,
    pub b_in: &'a DVector<f64>,
    pub a_eq: &'a DMatrix<f64>,
    pub b_eq: &'a DVector<f64>,
}

impl<'a> From<&'a QuadraticProgram> for QpParts<'a> {
    fn from(p: &'a QuadraticProgram) -> Self {
        QpParts {
            h: Some(&p.h),
            g: &p.g,
            c: p.c,
            a_in: &p.a_in,
            b_in: &p.b_in,
            a_eq: &p.a_eq,
            b_eq: &p.b_eq,
        }
    }
}

/// Solve a QP given by parts. See [`solve_qp`] for the contract.
pub fn solve_parts(problem: &QpParts<'_>, tol: f64) -> Result<QpSolution, QpError> {
    if tol <= 0.0 {
        return Err(QpError::BadTolerance(tol));
    }
    let n = problem.g.len();
    if problem.a_in.ncols() != n && problem.a_in.nrows() > 0 {
        return Err(QpError::DimensionMismatch(format!(
            "A_in has {} columns for {} variables",
            problem.a_in.ncols(),
            n
        )));
    }
    if problem.a_eq.ncols() != n && problem.a_eq.nrows() > 0 {
        return Err(QpError::DimensionMismatch(format!(
            "A_eq has {} columns for {} variables",
            problem.a_eq.ncols(),
            n
        )));
    }
    if problem.a_in.nrows() != problem.b_in.len() || problem.a_eq.nrows() != problem.b_eq.len() {
        return Err(QpError::DimensionMismatch(
            "right-hand side length differs from row count".into(),
        ));
    }

    let me = problem.a_eq.nrows();
    let mi = problem.a_in.nrows();
    let p_csc = match problem.h {
        Some(h) => to_csc_upper(h),
        None => CscMatrix::zeros((n, n)),
    };
    let a_csc = to_csc_stacked(problem.a_eq, problem.a_in);
    let q: Vec<f64> = problem.g.iter().cloned().collect();
    let mut b: Vec<f64> = Vec::with_capacity(me + mi);
    b.extend(problem.b_eq.iter());
    b.extend(problem.b_in.iter());
    let cones = [ZeroConeT(me), NonnegativeConeT(mi)];

    let feas_tol = (0.1 * tol).clamp(1e-12, 1e-9);
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(200)
        .tol_feas(feas_tol)
        .tol_gap_abs(feas_tol)
        .tol_gap_rel(1e-10)
        .build()
        .expect("settings");
    let mut solver = DefaultSolver::new(&p_csc, &q, &a_csc, &b, &cones, settings);
    solver.solve();
    let sol = &solver.solution;

    let x = DVector::from_column_slice(&sol.x);
    let z = DVector::from_column_slice(&sol.z);
    let nu = z.rows(0, me).into_owned();
    let lam = z.rows(me, mi).into_owned();

    let make = |status: QpStatus, x: DVector<f64>, lam: DVector<f64>, nu: DVector<f64>| {
        let (primal, dual) = residuals(problem, &x, &lam, &nu);
        let objective = match problem.h {
            Some(h) => 0.5 * (x.transpose() * h * &x)[(0, 0)] + problem.g.dot(&x) + problem.c,
            None => problem.g.dot(&x) + problem.c,
        };
        QpSolution {
            status,
            point: x,
            objective,
            primal_residual: primal,
            dual_residual: dual,
            dual_ineq: lam,
            dual_eq: nu,
        }
    };

    let solution = match sol.status {
        SolverStatus::Solved => make(QpStatus::Optimal, x, lam, nu),
        SolverStatus::PrimalInfeasible => {
            // Verify the Farkas certificate: y >= 0 on the inequality block,
            // A' y ~ 0 and b' y < 0. Declared infeasible only when the
            // certificate residual is below INFEAS_CERT_TOL.
            let scale = z.amax().max(1.0);
            let mut at_y = DVector::zeros(n);
            if me > 0 {
                at_y += problem.a_eq.transpose() * &nu;
            }
            if mi > 0 {
                at_y += problem.a_in.transpose() * &lam;
            }
            let cert_res = if n > 0 { at_y.amax() / scale } else { 0.0 };
            let gap = (problem.b_eq.dot(&nu) + problem.b_in.dot(&lam)) / scale;
            let lam_neg = lam.iter().cloned().fold(0.0f64, |a, v| a.min(v));
            if cert_res <= INFEAS_CERT_TOL && gap < -1e-10 && lam_neg >= -1e-9 * scale {
                make(QpStatus::Infeasible, x, lam, nu)
            } else {
                make(QpStatus::MaxIterations, x, lam, nu)
            }
        }
        SolverStatus::DualInfeasible => make(QpStatus::Unbounded, x, lam, nu),
        SolverStatus::AlmostSolved => {
            // Accept only if the residuals meet the caller's tolerance.
            let candidate = make(QpStatus::Optimal, x.clone(), lam.clone(), nu.clone());
            if candidate.primal_residual <= tol && candidate.dual_residual <= tol {
                candidate
            } else {
                make(QpStatus::MaxIterations, x, lam, nu)
            }
        }
        _ => make(QpStatus::MaxIterations, x, lam, nu),
    };

    // The Optimal classification carries the residual post-condition.
    if solution.status == QpStatus::Optimal
        && (solution.primal_residual > tol || solution.dual_residual > tol)
    {
        let mut downgraded = solution;
        downgraded.status = QpStatus::MaxIterations;
        return Ok(downgraded);
    }
    Ok(solution)
}

/// Solve a standard-form convex QP.
///
/// When the result is `Optimal`, the point satisfies all constraints within
/// `tol` and the KKT stationarity residual is at most `tol`. Numerical
/// breakdown is reported as `MaxIterations`, never as a silent wrong answer.
pub fn solve_qp(problem: &QuadraticProgram, tol: f64) -> Result<QpSolution, QpError> {
    solve_parts(&QpParts::from(problem), tol)
}

/// Solve a linear program `min c'x` subject to `A_in x <= b_in`,
/// `A_eq x = b_eq`. Unbounded problems are detected and reported.
pub fn solve_lp(
    c: &DVector<f64>,
    a_in: &DMatrix<f64>,
    b_in: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
) -> Result<QpSolution, QpError> {
    solve_parts(
        &QpParts {
            h: None,
            g: c,
            c: 0.0,
            a_in,
            b_in,
            a_eq,
            b_eq,
        },
        DEFAULT_OPT_TOL,
    )
}

/// Three-valued feasibility verdict for a constraint system.
#[derive(Debug, Clone)]
pub enum Feasibility {
    /// A point satisfying all rows within the membership tolerance.
    Feasible(DVector<f64>),
    /// The minimal uniform inequality relaxation needed is this positive amount.
    Infeasible(f64),
    /// The solver could not certify either way.
    Indeterminate,
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible(_))
    }
}

/// Robust feasibility probe via a phase-1 LP:
/// `min t  s.t.  A_in x <= b_in + t 1,  A_eq x = b_eq,  t >= -1`.
///
/// The phase-1 problem is always feasible and bounded, so the probe resolves
/// to a clean threshold test on the optimal `t` instead of relying on the
/// solver's infeasibility detection near constraint boundaries.
pub fn feasibility(
    a_in: &DMatrix<f64>,
    b_in: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    tol: f64,
) -> Result<Feasibility, QpError> {
    let n = a_in.ncols().max(a_eq.ncols());
    let mi = a_in.nrows();
    let me = a_eq.nrows();
    // variables (x, t)
    let mut ain = DMatrix::zeros(mi + 1, n + 1);
    let mut bin = DVector::zeros(mi + 1);
    ain.view_mut((0, 0), (mi, n)).copy_from(a_in);
    for i in 0..mi {
        ain[(i, n)] = -1.0;
        bin[i] = b_in[i];
    }
    ain[(mi, n)] = -1.0;
    bin[mi] = 1.0; // t >= -1
    let mut aeq = DMatrix::zeros(me, n + 1);
    aeq.view_mut((0, 0), (me, n)).copy_from(a_eq);
    let mut g = DVector::zeros(n + 1);
    g[n] = 1.0;
    let sol = solve_parts(
        &QpParts {
            h: None,
            g: &g,
            c: 0.0,
            a_in: &ain,
            b_in: &bin,
            a_eq: &aeq,
            b_eq,
        },
        DEFAULT_OPT_TOL,
    )?;
    match sol.status {
        QpStatus::Optimal => {
            let t = sol.point[n];
            if t <= tol {
                Ok(Feasibility::Feasible(sol.point.rows(0, n).into_owned()))
            } else {
                Ok(Feasibility::Infeasible(t))
            }
        }
        _ => Ok(Feasibility::Indeterminate),
    }
}

/// Residual report produced by [`check_kkt`].
#[derive(Debug, Clone)]
pub struct KktReport {
    pub passed: bool,
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
    /// Most negative inequality multiplier found by the least-squares fit
    /// (zero when the fit is dual-feasible).
    pub dual_sign: f64,
}

/// Verify the KKT conditions at `point` by fitting multipliers on the active
/// constraints with least squares.
///
/// Returns `passed = true` iff stationarity, feasibility and complementarity
/// residuals are all at most `tol`.
pub fn check_kkt(problem: &QuadraticProgram, point: &DVector<f64>, tol: f64) -> KktReport {
    let n = problem.num_vars();
    assert_eq!(point.len(), n, "point has wrong dimension");
    let grad0 = &problem.h * point + &problem.g;

    let mut primal = 0.0f64;
    let slack = &problem.b_in - &problem.a_in * point;
    for s in slack.iter() {
        primal = primal.max(-s);
    }
    if problem.num_eq() > 0 {
        primal = primal.max((&problem.a_eq * point - &problem.b_eq).amax());
    }

    // Active set at a scale-aware threshold; multipliers for inactive rows
    // are fixed at zero.
    let act_tol = (10.0 * tol).max(1e-9);
    let mut active: Vec<usize> = (0..problem.num_ineq())
        .filter(|&i| slack[i] <= act_tol * (1.0 + problem.b_in[i].abs()))
        .collect();

    // Least-squares fit with a crude nonnegativity loop: drop rows whose
    // fitted multiplier comes out negative and refit.
    let me = problem.num_eq();
    let mut lam_full = DVector::zeros(problem.num_ineq());
    let mut nu = DVector::zeros(me);
    for _ in 0..(problem.num_ineq() + 1) {
        let cols = active.len() + me;
        let (lam_act, nu_fit) = if cols == 0 {
            (DVector::zeros(0), DVector::zeros(me))
        } else {
            let mut m = DMatrix::zeros(n, cols);
            for (j, &i) in active.iter().enumerate() {
                m.column_mut(j)
                    .copy_from(&problem.a_in.row(i).transpose());
            }
            for j in 0..me {
                m.column_mut(active.len() + j)
                    .copy_from(&problem.a_eq.row(j).transpose());
            }
            let rhs = -&grad0;
            let mult = m
                .clone()
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .unwrap_or_else(|_| DVector::zeros(cols));
            (
                mult.rows(0, active.len()).into_owned(),
                mult.rows(active.len(), me).into_owned(),
            )
        };
        let worst = lam_act
            .iter()
            .cloned()
            .enumerate()
            .filter(|(_, v)| *v < -act_tol)
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        nu = nu_fit;
        lam_full.fill(0.0);
        for (j, &i) in active.iter().enumerate() {
            lam_full[i] = lam_act[j].max(0.0);
        }
        match worst {
            Some((j, _)) => {
                active.remove(j);
            }
            None => break,
        }
    }

    let mut grad = grad0;
    if problem.num_ineq() > 0 {
        grad += problem.a_in.transpose() * &lam_full;
    }
    if me > 0 {
        grad += problem.a_eq.transpose() * &nu;
    }
    let stationarity = if n > 0 { grad.amax() } else { 0.0 };
    let mut complementarity = 0.0f64;
    for i in 0..problem.num_ineq() {
        complementarity = complementarity.max((lam_full[i] * slack[i]).abs());
    }
    let dual_sign = lam_full.iter().cloned().fold(0.0f64, |a, v| a.min(v));

    // Residuals are scale-normalised against the gradient magnitude so the
    // verdict is meaningful for badly scaled problems.
    let scale = 1.0 + (&problem.h * point + &problem.g).amax();
    KktReport {
        passed: stationarity <= tol * scale && primal <= tol && complementarity <= tol * scale,
        stationarity,
        primal,
        complementarity,
        dual_sign,
    }
}

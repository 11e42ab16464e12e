//! Assembly of the full MPC quadratic program, closed-loop simulation, the
//! long-horizon reference and the suboptimality metric.
//!
//! The assembly is sparse in structure (states stay as variables): with
//! horizon `N`, the proposed scheme has `N (nx + nu) + 2f + v nu` variables
//! and `N (n_U + n_X) + f (1 + 2v) + 2e + 2v (n_U + n_X)` inequality rows,
//! plus `N nx` dynamics equalities. Only the equality right-hand side and
//! the linear/constant cost terms depend on the measured state, so one
//! assembled structure serves every solve.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::polytope::HPolytope;
use crate::qpcore::{self, Feasibility, QpParts, QpStatus, QuadraticProgram};
use crate::regulator::StageCost;
use crate::terminal::{
    add_terminal_objective, append_fx_rows_var, append_s_rows, append_ylqr_rows,
    MembershipCertificate, RowAccum, TerminalDesign,
};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("structural error: {0}")]
    Structural(String),
    #[error("initial state has dimension {got}, expected {expected}")]
    BadInitialState { got: usize, expected: usize },
    #[error("closed loop lost feasibility at step {step} (violates recursive feasibility)")]
    LostFeasibility { step: usize },
    #[error("suboptimality reference requires x0 != 0")]
    DegenerateReference,
    #[error("solver returned an indeterminate verdict")]
    Indeterminate,
    #[error("solver failure: {0}")]
    Solver(#[from] qpcore::QpError),
}

/// Plant data `(A, B)` with polytopic state and input constraint sets.
#[derive(Debug, Clone)]
pub struct PlantSpec {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub x_set: HPolytope,
    pub u_set: HPolytope,
}

impl PlantSpec {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        x_set: HPolytope,
        u_set: HPolytope,
    ) -> Result<Self, MpcError> {
        let nx = a.nrows();
        let nu = b.ncols();
        if a.ncols() != nx || b.nrows() != nx || x_set.dim() != nx || u_set.dim() != nu {
            return Err(MpcError::Structural(format!(
                "A {}x{}, B {}x{}, X dim {}, U dim {}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                x_set.dim(),
                u_set.dim()
            )));
        }
        let origin_x = DVector::zeros(nx);
        let origin_u = DVector::zeros(nu);
        if !x_set.contains(&origin_x, 1e-12) || !u_set.contains(&origin_u, 1e-12) {
            return Err(MpcError::Structural(
                "constraint sets must contain the origin".into(),
            ));
        }
        Ok(Self { a, b, x_set, u_set })
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }
}

/// Terminal treatment of the finite-horizon problem.
#[derive(Debug, Clone)]
pub enum MpcMode {
    /// Terminal set `T(beta)` with the piecewise-quadratic terminal cost.
    Proposed(TerminalDesign),
    /// Fixed terminal polytope with quadratic cost `x'Px`.
    NominalLqr { terminal: HPolytope, p: DMatrix<f64> },
    /// Online-optimised LQR-invariant cc-polytope, cost `x'Px`.
    LqrOpt(TerminalDesign),
}

#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub plant: PlantSpec,
    pub cost: StageCost,
    pub horizon: usize,
    pub mode: MpcMode,
}

impl MpcProblem {
    pub fn new(
        plant: PlantSpec,
        cost: StageCost,
        horizon: usize,
        mode: MpcMode,
    ) -> Result<Self, MpcError> {
        if horizon == 0 {
            return Err(MpcError::Structural("horizon must be positive".into()));
        }
        if cost.nx() != plant.nx() || cost.nu() != plant.nu() {
            return Err(MpcError::Structural(format!(
                "stage cost is ({}, {}) for a ({}, {}) plant",
                cost.nx(),
                cost.nu(),
                plant.nx(),
                plant.nu()
            )));
        }
        match &mode {
            MpcMode::Proposed(d) | MpcMode::LqrOpt(d) => {
                if d.nx() != plant.nx() || d.nu() != plant.nu() {
                    return Err(MpcError::Structural(
                        "terminal design dimensions differ from the plant".into(),
                    ));
                }
            }
            MpcMode::NominalLqr { terminal, p } => {
                if terminal.dim() != plant.nx() || p.nrows() != plant.nx() || p.ncols() != plant.nx()
                {
                    return Err(MpcError::Structural(
                        "terminal set dimensions differ from the plant".into(),
                    ));
                }
            }
        }
        Ok(Self {
            plant,
            cost,
            horizon,
            mode,
        })
    }

    /// Number of decision variables of the assembled problem.
    pub fn variable_count(&self) -> usize {
        let base = self.horizon * (self.plant.nx() + self.plant.nu());
        match &self.mode {
            MpcMode::Proposed(d) => base + 2 * d.nf() + d.nv() * d.nu(),
            MpcMode::NominalLqr { .. } => base,
            MpcMode::LqrOpt(d) => base + d.nf(),
        }
    }

    /// Number of inequality rows of the assembled problem.
    pub fn inequality_count(&self) -> usize {
        let n_x = self.plant.x_set.num_rows();
        let n_u = self.plant.u_set.num_rows();
        let base = self.horizon * (n_x + n_u);
        match &self.mode {
            MpcMode::Proposed(d) => {
                let (f, v, e) = (d.nf(), d.nv(), d.template.num_edges());
                base + f * (1 + 2 * v) + 2 * e + 2 * v * (n_x + n_u)
            }
            MpcMode::NominalLqr { terminal, .. } => base + terminal.num_rows(),
            MpcMode::LqrOpt(d) => {
                let (f, v, e) = (d.nf(), d.nv(), d.template.num_edges());
                base + f + e + f * v + v * (n_x + n_u)
            }
        }
    }

    /// Assemble the QP for a concrete initial state.
    pub fn assemble(&self, x0: &DVector<f64>) -> Result<QuadraticProgram, MpcError> {
        let assembled = AssembledMpc::new(self)?;
        Ok(assembled.qp_for(x0))
    }
}

/// Assembled constraint/cost structure; the initial state only enters the
/// equality right-hand side and the linear/constant cost terms.
pub struct AssembledMpc {
    nx: usize,
    nu: usize,
    horizon: usize,
    nz: usize,
    h: DMatrix<f64>,
    a_in: DMatrix<f64>,
    b_in: DVector<f64>,
    a_eq: DMatrix<f64>,
    /// `b_eq = b_eq_x0 * x0` (only the first dynamics block is nonzero).
    b_eq_x0: DMatrix<f64>,
    /// `g = g_x0 * x0` (cross-term coupling of `u_0` with the parameter).
    g_x0: DMatrix<f64>,
    /// constant term `x0' Q x0`
    q: DMatrix<f64>,
    terminal_kind: TerminalKind,
}

enum TerminalKind {
    Proposed { nf: usize, nv: usize },
    Nominal,
    LqrOpt { nf: usize },
}

impl AssembledMpc {
    pub fn new(problem: &MpcProblem) -> Result<Self, MpcError> {
        let nx = problem.plant.nx();
        let nu = problem.plant.nu();
        let n = problem.horizon;
        let nz = problem.variable_count();
        let off_x = |k: usize| (k - 1) * nx; // k in 1..=N
        let off_u = |k: usize| n * nx + k * nu; // k in 0..N
        let off_extra = n * (nx + nu);

        // dynamics equalities
        let mut a_eq = DMatrix::zeros(n * nx, nz);
        let mut b_eq_x0 = DMatrix::zeros(n * nx, nx);
        for k in 0..n {
            for r in 0..nx {
                a_eq[(k * nx + r, off_x(k + 1) + r)] = 1.0;
            }
            for r in 0..nx {
                for c in 0..nu {
                    a_eq[(k * nx + r, off_u(k) + c)] = -problem.plant.b[(r, c)];
                }
            }
            if k == 0 {
                b_eq_x0
                    .view_mut((0, 0), (nx, nx))
                    .copy_from(&problem.plant.a);
            } else {
                for r in 0..nx {
                    for c in 0..nx {
                        a_eq[(k * nx + r, off_x(k) + c)] = -problem.plant.a[(r, c)];
                    }
                }
            }
        }

        // inequalities
        let mut acc = RowAccum::new(nz);
        let zero_like = |m: &HPolytope| m.y.clone();
        for k in 1..=n {
            let mut blocks = DMatrix::zeros(problem.plant.x_set.num_rows(), nx);
            blocks.copy_from(&problem.plant.x_set.f);
            acc.add_rows(&[(off_x(k), &blocks)], &zero_like(&problem.plant.x_set));
        }
        for k in 0..n {
            let mut blocks = DMatrix::zeros(problem.plant.u_set.num_rows(), nu);
            blocks.copy_from(&problem.plant.u_set.f);
            acc.add_rows(&[(off_u(k), &blocks)], &zero_like(&problem.plant.u_set));
        }
        let terminal_kind = match &problem.mode {
            MpcMode::Proposed(d) => {
                let nf = d.nf();
                let off_y = off_extra;
                let off_ys = off_extra + nf;
                let off_v = off_extra + 2 * nf;
                append_fx_rows_var(&mut acc, d, off_x(n), off_y);
                append_s_rows(&mut acc, d, off_y, off_v, off_ys);
                append_ylqr_rows(&mut acc, d, off_ys);
                TerminalKind::Proposed { nf, nv: d.nv() }
            }
            MpcMode::NominalLqr { terminal, .. } => {
                acc.add_rows(&[(off_x(n), &terminal.f)], &terminal.y);
                TerminalKind::Nominal
            }
            MpcMode::LqrOpt(d) => {
                let nf = d.nf();
                let off_ys = off_extra;
                // F x_N <= ys
                let neg_eye = -DMatrix::identity(nf, nf);
                acc.add_rows(
                    &[(off_x(n), &d.template.f), (off_ys, &neg_eye)],
                    &DVector::zeros(nf),
                );
                append_ylqr_rows(&mut acc, d, off_ys);
                TerminalKind::LqrOpt { nf }
            }
        };
        let (a_in, b_in) = acc.to_matrices();
        debug_assert_eq!(a_in.nrows(), problem.inequality_count());

        // objective
        let mut h = DMatrix::zeros(nz, nz);
        for k in 1..n {
            for r in 0..nx {
                for c in 0..nx {
                    h[(off_x(k) + r, off_x(k) + c)] += 2.0 * problem.cost.q[(r, c)];
                }
            }
        }
        for k in 0..n {
            for r in 0..nu {
                for c in 0..nu {
                    h[(off_u(k) + r, off_u(k) + c)] += 2.0 * problem.cost.r[(r, c)];
                }
            }
        }
        // cross terms 2 x_k' S u_k for k = 1..N-1 (k = 0 couples to the
        // parameter through the linear term)
        for k in 1..n {
            for r in 0..nx {
                for c in 0..nu {
                    h[(off_x(k) + r, off_u(k) + c)] += 2.0 * problem.cost.s[(r, c)];
                    h[(off_u(k) + c, off_x(k) + r)] += 2.0 * problem.cost.s[(r, c)];
                }
            }
        }
        match &problem.mode {
            MpcMode::Proposed(d) => {
                let nf = d.nf();
                add_terminal_objective(
                    &mut h,
                    d,
                    Some(off_x(n)),
                    off_extra,
                    off_extra + 2 * nf,
                    off_extra + nf,
                );
            }
            MpcMode::NominalLqr { p, .. } | MpcMode::LqrOpt(TerminalDesign { p, .. }) => {
                for r in 0..nx {
                    for c in 0..nx {
                        h[(off_x(n) + r, off_x(n) + c)] += 2.0 * p[(r, c)];
                    }
                }
            }
        }
        let mut g_x0 = DMatrix::zeros(nz, nx);
        for r in 0..nu {
            for c in 0..nx {
                // 2 x0' S u_0 -> g_{u_0} = 2 S' x0
                g_x0[(off_u(0) + r, c)] = 2.0 * problem.cost.s[(c, r)];
            }
        }

        Ok(Self {
            nx,
            nu,
            horizon: n,
            nz,
            h,
            a_in,
            b_in,
            a_eq,
            b_eq_x0,
            g_x0,
            q: problem.cost.q.clone(),
            terminal_kind,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.nz
    }

    pub fn num_ineq(&self) -> usize {
        self.b_in.len()
    }

    fn rhs(&self, x0: &DVector<f64>) -> (DVector<f64>, DVector<f64>, f64) {
        let b_eq = &self.b_eq_x0 * x0;
        let g = &self.g_x0 * x0;
        let c = (x0.transpose() * &self.q * x0)[(0, 0)];
        (b_eq, g, c)
    }

    /// Materialise the standard-form QP for one initial state.
    pub fn qp_for(&self, x0: &DVector<f64>) -> QuadraticProgram {
        let (b_eq, g, c) = self.rhs(x0);
        QuadraticProgram {
            h: self.h.clone(),
            g,
            c,
            a_in: self.a_in.clone(),
            b_in: self.b_in.clone(),
            a_eq: self.a_eq.clone(),
            b_eq,
        }
    }

    /// Fast feasibility probe (phase-1 LP on the constraint structure).
    pub fn is_feasible(&self, x0: &DVector<f64>) -> Result<bool, MpcError> {
        let b_eq = &self.b_eq_x0 * x0;
        match qpcore::feasibility(&self.a_in, &self.b_in, &self.a_eq, &b_eq, 1e-7)? {
            Feasibility::Feasible(_) => Ok(true),
            Feasibility::Infeasible(_) => Ok(false),
            Feasibility::Indeterminate => Err(MpcError::Indeterminate),
        }
    }

    /// Solve for one initial state.
    pub fn solve(&self, x0: &DVector<f64>, tol: f64) -> Result<SolveOutcome, MpcError> {
        if x0.len() != self.nx {
            return Err(MpcError::BadInitialState {
                got: x0.len(),
                expected: self.nx,
            });
        }
        let (b_eq, g, c) = self.rhs(x0);
        let sol = qpcore::solve_parts(
            &QpParts {
                h: Some(&self.h),
                g: &g,
                c,
                a_in: &self.a_in,
                b_in: &self.b_in,
                a_eq: &self.a_eq,
                b_eq: &b_eq,
            },
            tol,
        )?;
        match sol.status {
            QpStatus::Optimal => {
                let z = &sol.point;
                let n = self.horizon;
                let states = (1..=n)
                    .map(|k| z.rows((k - 1) * self.nx, self.nx).into_owned())
                    .collect();
                let inputs: Vec<DVector<f64>> = (0..n)
                    .map(|k| z.rows(n * self.nx + k * self.nu, self.nu).into_owned())
                    .collect();
                let off_extra = n * (self.nx + self.nu);
                let terminal = match &self.terminal_kind {
                    TerminalKind::Proposed { nf, nv } => Some(MembershipCertificate {
                        y: z.rows(off_extra, *nf).into_owned(),
                        ys: z.rows(off_extra + nf, *nf).into_owned(),
                        v: (0..*nv)
                            .map(|i| {
                                z.rows(off_extra + 2 * nf + i * self.nu, self.nu).into_owned()
                            })
                            .collect(),
                    }),
                    TerminalKind::Nominal => None,
                    TerminalKind::LqrOpt { nf } => {
                        let ys = z.rows(off_extra, *nf).into_owned();
                        Some(MembershipCertificate {
                            y: ys.clone(),
                            v: Vec::new(),
                            ys,
                        })
                    }
                };
                Ok(SolveOutcome::Solved(MpcSolution {
                    u0: inputs[0].clone(),
                    value: sol.objective,
                    states,
                    inputs,
                    terminal,
                }))
            }
            QpStatus::Infeasible => Ok(SolveOutcome::Infeasible),
            _ => Err(MpcError::Indeterminate),
        }
    }
}

/// Either a solution or the verdict that `x0` lies outside the admissible
/// region.
#[derive(Debug, Clone)]
pub enum SolveOutcome {
    Solved(MpcSolution),
    Infeasible,
}

impl SolveOutcome {
    pub fn solution(&self) -> Option<&MpcSolution> {
        match self {
            SolveOutcome::Solved(s) => Some(s),
            SolveOutcome::Infeasible => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    pub u0: DVector<f64>,
    /// Optimal value `V_N(x0)` including the `x0' Q x0` stage term.
    pub value: f64,
    /// Predicted states `x_1 .. x_N`.
    pub states: Vec<DVector<f64>>,
    /// Inputs `u_0 .. u_{N-1}`.
    pub inputs: Vec<DVector<f64>>,
    /// Terminal certificate `(y*, v*, ys*)` when the mode has one.
    pub terminal: Option<MembershipCertificate>,
}

/// Closed-loop record of `steps + 1` solves (`t = 0..=steps`).
#[derive(Debug, Clone)]
pub struct ClosedLoopTrace {
    /// Visited states `x_0 .. x_{steps+1}` (one past the last input).
    pub states: Vec<DVector<f64>>,
    /// Applied inputs `u_0 .. u_{steps}`.
    pub inputs: Vec<DVector<f64>>,
    /// Stage costs `l(x_t, u_t)`.
    pub stage_costs: Vec<f64>,
    /// Optimal values `V_N(x_t)`.
    pub values: Vec<f64>,
    /// Per-solve wall time in seconds.
    pub solve_times: Vec<f64>,
}

impl ClosedLoopTrace {
    pub fn total_stage_cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }
}

/// Simulate the closed loop `x_{t+1} = A x_t + B mu_N(x_t)` for
/// `steps + 1` controller evaluations.
///
/// Mid-trajectory infeasibility is a hard error: it falsifies the
/// recursive-feasibility guarantee and must surface with the offending step.
pub fn simulate(
    problem: &MpcProblem,
    x0: &DVector<f64>,
    steps: usize,
) -> Result<ClosedLoopTrace, MpcError> {
    let assembled = AssembledMpc::new(problem)?;
    simulate_assembled(problem, &assembled, x0, steps)
}

/// Simulation against a pre-assembled structure (shared across calls).
pub fn simulate_assembled(
    problem: &MpcProblem,
    assembled: &AssembledMpc,
    x0: &DVector<f64>,
    steps: usize,
) -> Result<ClosedLoopTrace, MpcError> {
    let mut states = vec![x0.clone()];
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut stage_costs = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity(steps + 1);
    let mut solve_times = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    for t in 0..=steps {
        let t0 = Instant::now();
        let outcome = assembled.solve(&x, 1e-8)?;
        solve_times.push(t0.elapsed().as_secs_f64());
        let sol = match outcome {
            SolveOutcome::Solved(s) => s,
            SolveOutcome::Infeasible => return Err(MpcError::LostFeasibility { step: t }),
        };
        let u = sol.u0.clone();
        stage_costs.push(problem.cost.eval(&x, &u));
        values.push(sol.value);
        let x_next = &problem.plant.a * &x + &problem.plant.b * &u;
        inputs.push(u);
        states.push(x_next.clone());
        x = x_next;
    }
    Ok(ClosedLoopTrace {
        states,
        inputs,
        stage_costs,
        values,
        solve_times,
    })
}

/// Long-horizon reference: the optimal value of the `N = horizon` problem
/// with terminal equality `x_N = 0` and no terminal cost, a stand-in for
/// the infinite-horizon optimum.
pub fn infinite_horizon_reference(
    plant: &PlantSpec,
    cost: &StageCost,
    x0: &DVector<f64>,
    horizon: usize,
) -> Result<Option<f64>, MpcError> {
    let nx = plant.nx();
    let nu = plant.nu();
    if x0.len() != nx {
        return Err(MpcError::BadInitialState {
            got: x0.len(),
            expected: nx,
        });
    }
    let n = horizon;
    let nz = n * (nx + nu);
    let off_x = |k: usize| (k - 1) * nx;
    let off_u = |k: usize| n * nx + k * nu;
    let mut a_eq = DMatrix::zeros(n * nx + nx, nz);
    let mut b_eq = DVector::zeros(n * nx + nx);
    for k in 0..n {
        for r in 0..nx {
            a_eq[(k * nx + r, off_x(k + 1) + r)] = 1.0;
        }
        for r in 0..nx {
            for c in 0..nu {
                a_eq[(k * nx + r, off_u(k) + c)] = -plant.b[(r, c)];
            }
        }
        if k == 0 {
            let bx = &plant.a * x0;
            for r in 0..nx {
                b_eq[r] = bx[r];
            }
        } else {
            for r in 0..nx {
                for c in 0..nx {
                    a_eq[(k * nx + r, off_x(k) + c)] = -plant.a[(r, c)];
                }
            }
        }
    }
    // terminal equality x_N = 0
    for r in 0..nx {
        a_eq[(n * nx + r, off_x(n) + r)] = 1.0;
    }

    let mx = plant.x_set.num_rows();
    let mu = plant.u_set.num_rows();
    let mut a_in = DMatrix::zeros(n * (mx + mu), nz);
    let mut b_in = DVector::zeros(n * (mx + mu));
    for k in 1..=n {
        let r0 = (k - 1) * mx;
        a_in.view_mut((r0, off_x(k)), (mx, nx))
            .copy_from(&plant.x_set.f);
        b_in.rows_mut(r0, mx).copy_from(&plant.x_set.y);
    }
    for k in 0..n {
        let r0 = n * mx + k * mu;
        a_in.view_mut((r0, off_u(k)), (mu, nu))
            .copy_from(&plant.u_set.f);
        b_in.rows_mut(r0, mu).copy_from(&plant.u_set.y);
    }

    let mut h = DMatrix::zeros(nz, nz);
    for k in 1..n {
        for r in 0..nx {
            for c in 0..nx {
                h[(off_x(k) + r, off_x(k) + c)] += 2.0 * cost.q[(r, c)];
            }
        }
        for r in 0..nx {
            for c in 0..nu {
                h[(off_x(k) + r, off_u(k) + c)] += 2.0 * cost.s[(r, c)];
                h[(off_u(k) + c, off_x(k) + r)] += 2.0 * cost.s[(r, c)];
            }
        }
    }
    for k in 0..n {
        for r in 0..nu {
            for c in 0..nu {
                h[(off_u(k) + r, off_u(k) + c)] += 2.0 * cost.r[(r, c)];
            }
        }
    }
    let mut g = DVector::zeros(nz);
    for r in 0..nu {
        let mut gval = 0.0;
        for c in 0..nx {
            gval += 2.0 * cost.s[(c, r)] * x0[c];
        }
        g[off_u(0) + r] = gval;
    }
    let c0 = (x0.transpose() * &cost.q * x0)[(0, 0)];

    let sol = qpcore::solve_parts(
        &QpParts {
            h: Some(&h),
            g: &g,
            c: c0,
            a_in: &a_in,
            b_in: &b_in,
            a_eq: &a_eq,
            b_eq: &b_eq,
        },
        1e-8,
    )?;
    match sol.status {
        QpStatus::Optimal => Ok(Some(sol.objective)),
        QpStatus::Infeasible => Ok(None),
        _ => Err(MpcError::Indeterminate),
    }
}

/// Horizon used by the long-horizon reference in the experiment protocol.
pub const REFERENCE_HORIZON: usize = 500;

/// Closed-loop suboptimality
/// `s_N(x0) = (sum_{t=0}^{M} l(x_t, mu_N(x_t)) - V_inf(x0)) / V_inf(x0)`,
/// with the sum running over `t = 0..=M` inclusive.
pub fn suboptimality(
    problem: &MpcProblem,
    x0: &DVector<f64>,
    steps: usize,
) -> Result<Option<f64>, MpcError> {
    if x0.amax() == 0.0 {
        return Err(MpcError::DegenerateReference);
    }
    let v_inf = match infinite_horizon_reference(&problem.plant, &problem.cost, x0, REFERENCE_HORIZON)?
    {
        Some(v) => v,
        None => return Ok(None),
    };
    let trace = simulate(problem, x0, steps)?;
    Ok(Some((trace.total_stage_cost() - v_inf) / v_inf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polytope::build_template;
    use crate::regulator::{solve_dare, theta_min};
    use approx::assert_abs_diff_eq;

    fn dm(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            rows.len(),
            rows.first().map_or(0, |r| r.len()),
            &rows.concat(),
        )
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    /// Scalar proposed-mode problem built around the 1-D paper template.
    fn scalar_problem(a: f64, u_bar: f64, beta: f64, horizon: usize) -> MpcProblem {
        let template = build_template(dm(&[&[1.0], &[-1.0]]), &dv(&[1.0, 1.0])).unwrap();
        let am = dm(&[&[a]]);
        let bm = dm(&[&[1.0]]);
        let cost = StageCost::diagonal(dm(&[&[1.0]]), dm(&[&[1.0]])).unwrap();
        let sol = solve_dare(&am, &bm, &cost, 1e-13, 200_000).unwrap();
        let theta = theta_min(&sol.p, &cost.r, &bm, beta).unwrap();
        let x_set = HPolytope::symmetric_box(&[50.0]);
        let u_set = HPolytope::symmetric_box(&[u_bar]);
        let design = TerminalDesign::new(
            template,
            beta,
            DMatrix::identity(2, 2),
            theta,
            sol.k.clone(),
            sol.p.clone(),
            am.clone(),
            bm.clone(),
            x_set.clone(),
            u_set.clone(),
        )
        .unwrap();
        let plant = PlantSpec::new(am, bm, x_set, u_set).unwrap();
        MpcProblem::new(plant, cost, horizon, MpcMode::Proposed(design)).unwrap()
    }

    #[test]
    fn variable_and_row_counts_match_formulas() {
        let p = scalar_problem(1.1, 1.0, 0.95, 5);
        // N (nx + nu) + 2f + v nu = 5*2 + 4 + 2 = 16
        assert_eq!(p.variable_count(), 16);
        // N (nX + nU) + f(1+2v) + 2e + 2v(nX + nU) = 5*4 + 2*5 + 2 + 4*4 = 48
        assert_eq!(p.inequality_count(), 48);
        let assembled = AssembledMpc::new(&p).unwrap();
        assert_eq!(assembled.num_vars(), p.variable_count());
        assert_eq!(assembled.num_ineq(), p.inequality_count());
    }

    #[test]
    fn origin_solves_to_zero() {
        let p = scalar_problem(1.1, 1.0, 0.95, 5);
        let assembled = AssembledMpc::new(&p).unwrap();
        let out = assembled.solve(&dv(&[0.0]), 1e-8).unwrap();
        let sol = out.solution().expect("origin must be admissible");
        assert_abs_diff_eq!(sol.u0[0], 0.0, epsilon = 1e-6);
        assert!(sol.value.abs() <= 1e-6);
    }

    #[test]
    fn far_state_is_infeasible_verdict() {
        let p = scalar_problem(1.1, 1.0, 0.95, 3);
        let assembled = AssembledMpc::new(&p).unwrap();
        let out = assembled.solve(&dv(&[200.0]), 1e-8).unwrap();
        assert!(out.solution().is_none());
        assert!(!assembled.is_feasible(&dv(&[200.0])).unwrap());
    }

    #[test]
    fn closed_loop_regulates_and_descends() {
        let p = scalar_problem(1.1, 1.0, 0.95, 5);
        let x0 = dv(&[3.0]);
        let trace = simulate(&p, &x0, 40).unwrap();
        // dynamics replay
        for t in 0..trace.inputs.len() {
            let lhs = &trace.states[t + 1];
            let rhs = &p.plant.a * &trace.states[t] + &p.plant.b * &trace.inputs[t];
            assert!((lhs - rhs).amax() <= 1e-10);
            assert!(p.plant.u_set.contains(&trace.inputs[t], 1e-7));
            assert!(p.plant.x_set.contains(&trace.states[t + 1], 1e-7));
        }
        // Lyapunov decrease of the optimal values
        for t in 1..trace.values.len() {
            assert!(
                trace.values[t] <= trace.values[t - 1] + 1e-6,
                "V_N increased at t = {t}"
            );
        }
        assert!(trace.states.last().unwrap().amax() <= 1e-3 * x0.amax());
    }

    #[test]
    fn reference_value_zero_at_origin() {
        let p = scalar_problem(1.1, 1.0, 0.95, 5);
        let v = infinite_horizon_reference(&p.plant, &p.cost, &dv(&[0.0]), 100)
            .unwrap()
            .unwrap();
        assert!(v.abs() <= 1e-8);
    }

    #[test]
    fn reference_matches_lqr_value_for_tiny_states() {
        // with constraints slack the long-horizon value equals x0' P x0
        let p = scalar_problem(1.1, 1.0, 0.95, 5);
        let am = dm(&[&[1.1]]);
        let bm = dm(&[&[1.0]]);
        let sol = solve_dare(&am, &bm, &p.cost, 1e-13, 200_000).unwrap();
        for &x in &[1e-3, -2e-3, 5e-4] {
            let x0 = dv(&[x]);
            let expected = (x0.transpose() * &sol.p * &x0)[(0, 0)];
            let v = infinite_horizon_reference(&p.plant, &p.cost, &x0, 200)
                .unwrap()
                .unwrap();
            assert!(
                (v - expected).abs() <= 1e-5 * (1.0 + expected),
                "V_ref = {v}, x'Px = {expected}"
            );
        }
    }

    #[test]
    fn suboptimality_rejects_origin() {
        let p = scalar_problem(1.1, 1.0, 0.95, 5);
        assert!(matches!(
            suboptimality(&p, &dv(&[0.0]), 10).unwrap_err(),
            MpcError::DegenerateReference
        ));
    }

    #[test]
    fn suboptimality_near_zero_deep_inside() {
        // deep inside the LQR region the closed loop is the unconstrained
        // optimum, so the truncated sum matches the reference
        let p = scalar_problem(1.1, 1.0, 0.95, 5);
        let s = suboptimality(&p, &dv(&[0.05]), 60).unwrap().unwrap();
        assert!(s.abs() <= 1e-4, "s = {s}");
    }

    #[test]
    fn nominal_mode_assembles_with_terminal_rows() {
        let am = dm(&[&[0.5]]);
        let bm = dm(&[&[1.0]]);
        let cost = StageCost::diagonal(dm(&[&[1.0]]), dm(&[&[1.0]])).unwrap();
        let sol = solve_dare(&am, &bm, &cost, 1e-13, 100_000).unwrap();
        let x_set = HPolytope::symmetric_box(&[10.0]);
        let u_set = HPolytope::symmetric_box(&[1.0]);
        let terminal = HPolytope::symmetric_box(&[1.5]);
        let plant = PlantSpec::new(am, bm, x_set, u_set).unwrap();
        let p = MpcProblem::new(
            plant,
            cost,
            4,
            MpcMode::NominalLqr {
                terminal,
                p: sol.p.clone(),
            },
        )
        .unwrap();
        assert_eq!(p.variable_count(), 8);
        assert_eq!(p.inequality_count(), 4 * 4 + 2);
        let assembled = AssembledMpc::new(&p).unwrap();
        let out = assembled.solve(&dv(&[4.0]), 1e-8).unwrap();
        let sol = out.solution().expect("feasible");
        // terminal constraint honoured by the prediction
        assert!(sol.states.last().unwrap().amax() <= 1.5 + 1e-7);
    }

    #[test]
    fn lqr_opt_mode_value_is_lqr_cost_inside() {
        let p = scalar_problem(1.1, 1.0, 0.95, 5);
        let design = match &p.mode {
            MpcMode::Proposed(d) => d.clone(),
            _ => unreachable!(),
        };
        let lqr_problem = MpcProblem::new(
            p.plant.clone(),
            p.cost.clone(),
            5,
            MpcMode::LqrOpt(design),
        )
        .unwrap();
        assert_eq!(lqr_problem.variable_count(), 12);
        let assembled = AssembledMpc::new(&lqr_problem).unwrap();
        let out = assembled.solve(&dv(&[0.5]), 1e-8).unwrap();
        assert!(out.solution().is_some());
    }
}

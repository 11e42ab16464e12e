//! The control-invariant terminal set `T(beta)`, the piecewise-quadratic
//! terminal cost `m(x)` and the descent-certificate machinery.
//!
//! Everything here is parameterised by a cc-template `(F, E, V)` and an LQR
//! pair `(K, P)`. The key constraint blocks are
//!
//! - the set `S`: for each vertex map, `F (A V_i y + B v_i) <= y_plus`
//!   together with `Ey <= 0`, `V_i y in X`, `v_i in U`;
//! - the LQR-invariant offsets `Y_LQR`: `F (A + BK) V_i ys <= ys`,
//!   `E ys <= 0`, `V_i ys in X`, `K V_i ys in U`;
//! - membership of `x` in `T(beta)`: `Fx <= y`, `ys in Y_LQR`, and
//!   `(y, v, ys + beta (y - ys)) in S`.
//!
//! The terminal cost minimises
//! `|x|_P^2 + |y - ys|_Gamma^2 + sum_i |v_i - K V_i y|_Theta^2`
//! over that same constraint system.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::polytope::{CcTemplate, HPolytope, PolytopeError};
use crate::qpcore::{self, QpParts, QpStatus};

#[derive(Debug, Error)]
pub enum TerminalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{0} weight is not positive semidefinite (eigenvalue {1:.3e})")]
    IndefiniteWeight(&'static str, f64),
    #[error("beta = {0} outside [0, 1]")]
    BadBeta(f64),
    #[error("point is outside the polytope P(y) (reconstruction infeasible)")]
    NotInPolytope,
    #[error("terminal evaluation is infinite at this point")]
    InfiniteCost,
    #[error("solver returned an indeterminate verdict")]
    Indeterminate,
    #[error("solver failure: {0}")]
    Solver(#[from] qpcore::QpError),
    #[error("polytope failure: {0}")]
    Polytope(#[from] PolytopeError),
}

/// Three-valued membership verdict. Boundary probes at LP tolerance must not
/// flip tests, so solver failures surface as `Indeterminate` rather than a
/// false boolean.
#[derive(Debug, Clone)]
pub enum Verdict {
    In(MembershipCertificate),
    Out,
    Indeterminate,
}

impl Verdict {
    pub fn is_in(&self) -> bool {
        matches!(self, Verdict::In(_))
    }

    pub fn is_out(&self) -> bool {
        matches!(self, Verdict::Out)
    }
}

/// Feasible point of the `T(beta)` system backing a positive verdict.
#[derive(Debug, Clone)]
pub struct MembershipCertificate {
    pub y: DVector<f64>,
    pub v: Vec<DVector<f64>>,
    pub ys: DVector<f64>,
}

/// Terminal ingredients: template, contraction rate, weights and the LQR
/// pair, plus the plant data the constraint blocks are built from.
#[derive(Debug, Clone)]
pub struct TerminalDesign {
    pub template: CcTemplate,
    pub beta: f64,
    pub gamma: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub x_set: HPolytope,
    pub u_set: HPolytope,
}

impl TerminalDesign {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        template: CcTemplate,
        beta: f64,
        gamma: DMatrix<f64>,
        theta: DMatrix<f64>,
        k: DMatrix<f64>,
        p: DMatrix<f64>,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        x_set: HPolytope,
        u_set: HPolytope,
    ) -> Result<Self, TerminalError> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(TerminalError::BadBeta(beta));
        }
        let nx = template.dim();
        let nf = template.num_facets();
        let nu = b.ncols();
        if a.nrows() != nx
            || a.ncols() != nx
            || b.nrows() != nx
            || k.nrows() != nu
            || k.ncols() != nx
            || p.nrows() != nx
            || p.ncols() != nx
            || gamma.nrows() != nf
            || gamma.ncols() != nf
            || theta.nrows() != nu
            || theta.ncols() != nu
            || x_set.dim() != nx
            || u_set.dim() != nu
        {
            return Err(TerminalError::DimensionMismatch(format!(
                "template ({nx}, {nf}), A {}x{}, B {}x{}, K {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                k.nrows(),
                k.ncols()
            )));
        }
        for (name, m) in [("Gamma", &gamma), ("Theta", &theta)] {
            let sym = (m + m.transpose()) * 0.5;
            let min_eig = sym
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            if min_eig < -1e-9 {
                return Err(TerminalError::IndefiniteWeight(name, min_eig));
            }
        }
        Ok(Self {
            template,
            beta,
            gamma,
            theta,
            k,
            p,
            a,
            b,
            x_set,
            u_set,
        })
    }

    pub fn nx(&self) -> usize {
        self.template.dim()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn nf(&self) -> usize {
        self.template.num_facets()
    }

    pub fn nv(&self) -> usize {
        self.template.num_vertices()
    }
}

/// Sparse row accumulator for assembling inequality blocks over a shared
/// variable layout.
#[derive(Debug, Clone)]
pub(crate) struct RowAccum {
    ncols: usize,
    rows: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
}

impl RowAccum {
    pub fn new(ncols: usize) -> Self {
        Self {
            ncols,
            rows: Vec::new(),
            rhs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    /// Append rows `sum_k blocks[k].1 * z[segment at blocks[k].0] <= rhs`.
    pub fn add_rows(&mut self, blocks: &[(usize, &DMatrix<f64>)], rhs: &DVector<f64>) {
        let m = rhs.len();
        for (off, mat) in blocks {
            assert_eq!(mat.nrows(), m, "block row count mismatch");
            assert!(off + mat.ncols() <= self.ncols, "block out of range");
        }
        for r in 0..m {
            let mut row: Vec<(usize, f64)> = Vec::new();
            for (off, mat) in blocks {
                for c in 0..mat.ncols() {
                    let v = mat[(r, c)];
                    if v != 0.0 {
                        row.push((off + c, v));
                    }
                }
            }
            self.rows.push(row);
            self.rhs.push(rhs[r]);
        }
    }

    pub fn to_matrices(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut a = DMatrix::zeros(self.rows.len(), self.ncols);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                a[(r, c)] += v;
            }
        }
        (a, DVector::from_vec(self.rhs.clone()))
    }
}

/// Append the `ys in Y_LQR` rows at column offset `off_ys`.
pub(crate) fn append_ylqr_rows(acc: &mut RowAccum, d: &TerminalDesign, off_ys: usize) {
    let nf = d.nf();
    let a_cl = &d.a + &d.b * &d.k;
    let eye = DMatrix::identity(nf, nf);
    // E ys <= 0
    acc.add_rows(
        &[(off_ys, &d.template.e)],
        &DVector::zeros(d.template.num_edges()),
    );
    for vi in &d.template.v {
        // F (A + BK) V_i ys <= ys
        let block = &d.template.f * &a_cl * vi - &eye;
        acc.add_rows(&[(off_ys, &block)], &DVector::zeros(nf));
        // V_i ys in X
        let bx = &d.x_set.f * vi;
        acc.add_rows(&[(off_ys, &bx)], &d.x_set.y);
        // K V_i ys in U
        let bu = &d.u_set.f * &d.k * vi;
        acc.add_rows(&[(off_ys, &bu)], &d.u_set.y);
    }
}

/// Append the rows of `(y, v, ys + beta (y - ys)) in S`, with `v_i` stored
/// consecutively from `off_v`.
pub(crate) fn append_s_rows(
    acc: &mut RowAccum,
    d: &TerminalDesign,
    off_y: usize,
    off_v: usize,
    off_ys: usize,
) {
    let nf = d.nf();
    let nu = d.nu();
    let beta = d.beta;
    let eye = DMatrix::identity(nf, nf);
    // E y <= 0
    acc.add_rows(
        &[(off_y, &d.template.e)],
        &DVector::zeros(d.template.num_edges()),
    );
    let fb = &d.template.f * &d.b;
    for (i, vi) in d.template.v.iter().enumerate() {
        // F A V_i y + F B v_i <= beta y + (1 - beta) ys
        let by = &d.template.f * &d.a * vi - &eye * beta;
        let bys = &eye * (-(1.0 - beta));
        acc.add_rows(
            &[(off_y, &by), (off_v + i * nu, &fb), (off_ys, &bys)],
            &DVector::zeros(nf),
        );
    }
    for (i, vi) in d.template.v.iter().enumerate() {
        // V_i y in X
        let bx = &d.x_set.f * vi;
        acc.add_rows(&[(off_y, &bx)], &d.x_set.y);
        // v_i in U
        acc.add_rows(&[(off_v + i * nu, &d.u_set.f)], &d.u_set.y);
    }
}

/// Append `F x - y <= 0` where `x` is a variable segment.
pub(crate) fn append_fx_rows_var(acc: &mut RowAccum, d: &TerminalDesign, off_x: usize, off_y: usize) {
    let nf = d.nf();
    let neg_eye = -DMatrix::identity(nf, nf);
    acc.add_rows(
        &[(off_x, &d.template.f), (off_y, &neg_eye)],
        &DVector::zeros(nf),
    );
}

/// Append `-y <= -F x0` for a fixed point `x0`.
fn append_fx_rows_const(acc: &mut RowAccum, d: &TerminalDesign, x0: &DVector<f64>, off_y: usize) {
    let nf = d.nf();
    let neg_eye = -DMatrix::identity(nf, nf);
    acc.add_rows(&[(off_y, &neg_eye)], &(-(&d.template.f * x0)));
}

/// Add the terminal objective blocks to a dense Hessian at the given
/// offsets: `|y - ys|_Gamma^2 + sum_i |v_i - K V_i y|_Theta^2`, plus
/// `|x|_P^2` when `off_x` names a variable segment.
pub(crate) fn add_terminal_objective(
    h: &mut DMatrix<f64>,
    d: &TerminalDesign,
    off_x: Option<usize>,
    off_y: usize,
    off_v: usize,
    off_ys: usize,
) {
    let nf = d.nf();
    let nu = d.nu();
    if let Some(ox) = off_x {
        let nx = d.nx();
        for r in 0..nx {
            for c in 0..nx {
                h[(ox + r, ox + c)] += 2.0 * d.p[(r, c)];
            }
        }
    }
    for r in 0..nf {
        for c in 0..nf {
            let g = 2.0 * d.gamma[(r, c)];
            h[(off_y + r, off_y + c)] += g;
            h[(off_ys + r, off_ys + c)] += g;
            h[(off_y + r, off_ys + c)] -= g;
            h[(off_ys + r, off_y + c)] -= g;
        }
    }
    for (i, vi) in d.template.v.iter().enumerate() {
        let di = &d.k * vi; // nu x nf
        let dtd = di.transpose() * &d.theta * &di;
        let td = &d.theta * &di;
        let ov = off_v + i * nu;
        for r in 0..nu {
            for c in 0..nu {
                h[(ov + r, ov + c)] += 2.0 * d.theta[(r, c)];
            }
        }
        for r in 0..nf {
            for c in 0..nf {
                h[(off_y + r, off_y + c)] += 2.0 * dtd[(r, c)];
            }
        }
        for r in 0..nu {
            for c in 0..nf {
                h[(ov + r, off_y + c)] -= 2.0 * td[(r, c)];
                h[(off_y + c, ov + r)] -= 2.0 * td[(r, c)];
            }
        }
    }
}

/// Variable layout of the terminal system `(y, v, ys)`.
struct Layout {
    off_y: usize,
    off_v: usize,
    off_ys: usize,
    total: usize,
}

fn layout(d: &TerminalDesign) -> Layout {
    let nf = d.nf();
    let nv = d.nv();
    let nu = d.nu();
    Layout {
        off_y: 0,
        off_v: nf,
        off_ys: nf + nv * nu,
        total: 2 * nf + nv * nu,
    }
}

fn terminal_rows(d: &TerminalDesign, x: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let lay = layout(d);
    let mut acc = RowAccum::new(lay.total);
    append_fx_rows_const(&mut acc, d, x, lay.off_y);
    append_ylqr_rows(&mut acc, d, lay.off_ys);
    append_s_rows(&mut acc, d, lay.off_y, lay.off_v, lay.off_ys);
    acc.to_matrices()
}

fn split_certificate(d: &TerminalDesign, z: &DVector<f64>) -> MembershipCertificate {
    let lay = layout(d);
    let nu = d.nu();
    MembershipCertificate {
        y: z.rows(lay.off_y, d.nf()).into_owned(),
        v: (0..d.nv())
            .map(|i| z.rows(lay.off_v + i * nu, nu).into_owned())
            .collect(),
        ys: z.rows(lay.off_ys, d.nf()).into_owned(),
    }
}

/// Does `ys` belong to `Y_LQR`? A direct arithmetic check of all rows
/// within `1e-8`.
pub fn ylqr_feasibility(d: &TerminalDesign, ys: &DVector<f64>) -> bool {
    assert_eq!(ys.len(), d.nf(), "offset dimension mismatch");
    let mut acc = RowAccum::new(d.nf());
    append_ylqr_rows(&mut acc, d, 0);
    let (a, b) = acc.to_matrices();
    let r = &a * ys - &b;
    let scale = 1.0 + ys.amax();
    r.iter().all(|&v| v <= 1e-8 * scale)
}

/// Membership of `x` in `T(beta)`: LP feasibility of the full constraint
/// system, probed through a phase-1 reformulation.
pub fn membership_t_beta(d: &TerminalDesign, x: &DVector<f64>) -> Result<Verdict, TerminalError> {
    let (a, b) = terminal_rows(d, x);
    let aeq = DMatrix::zeros(0, a.ncols());
    let beq = DVector::zeros(0);
    match qpcore::feasibility(&a, &b, &aeq, &beq, 1e-7)? {
        qpcore::Feasibility::Feasible(z) => Ok(Verdict::In(split_certificate(d, &z))),
        qpcore::Feasibility::Infeasible(_) => Ok(Verdict::Out),
        qpcore::Feasibility::Indeterminate => Ok(Verdict::Indeterminate),
    }
}

/// Membership of `x` in the union of LQR-invariant cc-polytopes:
/// `exists ys in Y_LQR` with `F x <= ys`.
pub fn membership_hat_t_lqr(d: &TerminalDesign, x: &DVector<f64>) -> Result<Verdict, TerminalError> {
    let nf = d.nf();
    let mut acc = RowAccum::new(nf);
    // -ys <= -Fx
    let neg_eye = -DMatrix::identity(nf, nf);
    acc.add_rows(&[(0, &neg_eye)], &(-(&d.template.f * x)));
    append_ylqr_rows(&mut acc, d, 0);
    let (a, b) = acc.to_matrices();
    let aeq = DMatrix::zeros(0, nf);
    let beq = DVector::zeros(0);
    match qpcore::feasibility(&a, &b, &aeq, &beq, 1e-7)? {
        qpcore::Feasibility::Feasible(ys) => Ok(Verdict::In(MembershipCertificate {
            y: ys.clone(),
            v: (0..d.nv()).map(|i| &d.k * (&d.template.v[i] * &ys)).collect(),
            ys,
        })),
        qpcore::Feasibility::Infeasible(_) => Ok(Verdict::Out),
        qpcore::Feasibility::Indeterminate => Ok(Verdict::Indeterminate),
    }
}

/// Terminal cost value together with its optimisers.
#[derive(Debug, Clone)]
pub enum TerminalValue {
    Finite(f64),
    Infinite,
}

impl TerminalValue {
    pub fn finite(&self) -> Option<f64> {
        match self {
            TerminalValue::Finite(v) => Some(*v),
            TerminalValue::Infinite => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TerminalEvaluation {
    pub value: TerminalValue,
    pub y_star: DVector<f64>,
    pub v_star: Vec<DVector<f64>>,
    pub ys_star: DVector<f64>,
}

/// Evaluate the terminal cost
/// `m(x) = min |x|_P^2 + |y - ys|_Gamma^2 + sum_i |v_i - K V_i y|_Theta^2`
/// over the `T(beta)` constraint system. Finite exactly when `x` is a
/// member of `T(beta)`.
pub fn eval_terminal_cost(
    d: &TerminalDesign,
    x: &DVector<f64>,
) -> Result<TerminalEvaluation, TerminalError> {
    let lay = layout(d);
    let (a, b) = terminal_rows(d, x);
    let mut h = DMatrix::zeros(lay.total, lay.total);
    add_terminal_objective(&mut h, d, None, lay.off_y, lay.off_v, lay.off_ys);
    let g = DVector::zeros(lay.total);
    let c = (x.transpose() * &d.p * x)[(0, 0)];
    let aeq = DMatrix::zeros(0, lay.total);
    let beq = DVector::zeros(0);
    let sol = qpcore::solve_parts(
        &QpParts {
            h: Some(&h),
            g: &g,
            c,
            a_in: &a,
            b_in: &b,
            a_eq: &aeq,
            b_eq: &beq,
        },
        1e-8,
    )?;
    match sol.status {
        QpStatus::Optimal => {
            let cert = split_certificate(d, &sol.point);
            Ok(TerminalEvaluation {
                value: TerminalValue::Finite(sol.objective),
                y_star: cert.y,
                v_star: cert.v,
                ys_star: cert.ys,
            })
        }
        QpStatus::Infeasible => Ok(TerminalEvaluation {
            value: TerminalValue::Infinite,
            y_star: DVector::zeros(d.nf()),
            v_star: vec![DVector::zeros(d.nu()); d.nv()],
            ys_star: DVector::zeros(d.nf()),
        }),
        _ => Err(TerminalError::Indeterminate),
    }
}

/// The feasibility-gated LQR-optimal terminal cost: `x'Px` whenever `x` lies
/// in the union of LQR-invariant cc-polytopes, infinite otherwise. The
/// objective does not depend on the offset, so no optimisation is needed
/// beyond the membership LP.
pub fn eval_lqr_opt_cost(d: &TerminalDesign, x: &DVector<f64>) -> Result<TerminalValue, TerminalError> {
    match membership_hat_t_lqr(d, x)? {
        Verdict::In(_) => Ok(TerminalValue::Finite((x.transpose() * &d.p * x)[(0, 0)])),
        Verdict::Out => Ok(TerminalValue::Infinite),
        Verdict::Indeterminate => Err(TerminalError::Indeterminate),
    }
}

/// Barycentric weights reconstructing `x` from the vertex images of `P(y)`,
/// together with the interpolated input.
#[derive(Debug, Clone)]
pub struct VertexWeighting {
    pub lambda: DVector<f64>,
    pub u: DVector<f64>,
}

/// Among all nonnegative weights with `sum lambda_i = 1` and
/// `sum lambda_i V_i y = x`, return the one minimising `sum lambda_i^2`
/// (unique by strict convexity) and the interpolated input
/// `u = sum lambda_i v_i`.
pub fn extract_vertex_control(
    d: &TerminalDesign,
    x: &DVector<f64>,
    y: &DVector<f64>,
    v: &[DVector<f64>],
) -> Result<VertexWeighting, TerminalError> {
    let nv = d.nv();
    let nx = d.nx();
    assert_eq!(v.len(), nv, "vertex input count mismatch");
    let scale = 1.0 + y.amax();
    let fx = &d.template.f * x - y;
    if fx.iter().any(|&r| r > 1e-7 * scale) || !d.template.satisfies_configuration(y, 1e-7 * scale)
    {
        return Err(TerminalError::NotInPolytope);
    }
    // min |lambda|^2 s.t. [V_1 y ... V_v y] lambda = x, 1'lambda = 1, lambda >= 0
    let mut a_eq = DMatrix::zeros(nx + 1, nv);
    for (i, vi) in d.template.v.iter().enumerate() {
        let img = vi * y;
        for r in 0..nx {
            a_eq[(r, i)] = img[r];
        }
        a_eq[(nx, i)] = 1.0;
    }
    let mut b_eq = DVector::zeros(nx + 1);
    b_eq.rows_mut(0, nx).copy_from(x);
    b_eq[nx] = 1.0;
    let a_in = -DMatrix::identity(nv, nv);
    let b_in = DVector::zeros(nv);
    let h = DMatrix::identity(nv, nv) * 2.0;
    let g = DVector::zeros(nv);
    let sol = qpcore::solve_parts(
        &QpParts {
            h: Some(&h),
            g: &g,
            c: 0.0,
            a_in: &a_in,
            b_in: &b_in,
            a_eq: &a_eq,
            b_eq: &b_eq,
        },
        1e-9,
    )?;
    match sol.status {
        QpStatus::Optimal => {
            let lambda = sol.point.map(|l| l.max(0.0));
            let mut u = DVector::zeros(d.nu());
            for (i, vi) in v.iter().enumerate() {
                u += vi * lambda[i];
            }
            Ok(VertexWeighting { lambda, u })
        }
        QpStatus::Infeasible => Err(TerminalError::NotInPolytope),
        _ => Err(TerminalError::Indeterminate),
    }
}

/// Certificate data for one descent step, following the tube recursion
/// `y+ = ys + beta (y - ys)` and `v+ = (1 - beta) v + beta v_s`.
#[derive(Debug, Clone)]
pub struct DescentCertificate {
    pub y_plus: DVector<f64>,
    pub v_plus: Vec<DVector<f64>>,
    /// Deviations `e_i = v_i - K V_i y` of the vertex controls from LQR.
    pub e: Vec<DVector<f64>>,
    /// Aggregated deviation `w = sum lambda_i e_i`, so `u = Kx + w`.
    pub w: DVector<f64>,
}

/// Take one certified closed-loop step from a finite terminal evaluation:
/// extracts the vertex control, advances the state and builds the successor
/// certificate `(y+, v+, ys)`, replaying its feasibility.
pub fn descent_step(
    d: &TerminalDesign,
    x: &DVector<f64>,
    eval: &TerminalEvaluation,
) -> Result<(DVector<f64>, DVector<f64>, DescentCertificate), TerminalError> {
    if eval.value.finite().is_none() {
        return Err(TerminalError::InfiniteCost);
    }
    let beta = d.beta;
    let y = &eval.y_star;
    let ys = &eval.ys_star;
    let weighting = extract_vertex_control(d, x, y, &eval.v_star)?;
    let u = weighting.u.clone();
    let x_plus = &d.a * x + &d.b * &u;
    let y_plus = ys + (y - ys) * beta;
    let v_s: Vec<DVector<f64>> = d.template.v.iter().map(|vi| &d.k * (vi * ys)).collect();
    let v_plus: Vec<DVector<f64>> = eval
        .v_star
        .iter()
        .zip(&v_s)
        .map(|(vi, vsi)| vi * (1.0 - beta) + vsi * beta)
        .collect();
    let e: Vec<DVector<f64>> = eval
        .v_star
        .iter()
        .zip(&d.template.v)
        .map(|(vi, vmat)| vi - &d.k * (vmat * y))
        .collect();
    let mut w = DVector::zeros(d.nu());
    for (i, ei) in e.iter().enumerate() {
        w += ei * weighting.lambda[i];
    }

    // Replay: (y+, v+, ys) must be feasible for the terminal system at x+.
    let lay = layout(d);
    let (a_rows, b_rows) = terminal_rows(d, &x_plus);
    let mut z = DVector::zeros(lay.total);
    z.rows_mut(lay.off_y, d.nf()).copy_from(&y_plus);
    for (i, vp) in v_plus.iter().enumerate() {
        z.rows_mut(lay.off_v + i * d.nu(), d.nu()).copy_from(vp);
    }
    z.rows_mut(lay.off_ys, d.nf()).copy_from(ys);
    let replay = &a_rows * &z - &b_rows;
    let scale = 1.0 + z.amax();
    if replay.iter().any(|&r| r > 1e-7 * scale) {
        return Err(TerminalError::Indeterminate);
    }

    Ok((
        u,
        x_plus,
        DescentCertificate {
            y_plus,
            v_plus,
            e,
            w,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polytope::build_template;
    use crate::regulator::{scalar_oracles, solve_dare, theta_min, ScalarPlant, StageCost};
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

    /// Scalar design around the 1-D paper template, no state constraints.
    fn scalar_design(a: f64, u_bar: f64, beta: f64) -> TerminalDesign {
        let template = build_template(dm(&[&[1.0], &[-1.0]]), &dv(&[1.0, 1.0])).unwrap();
        let am = dm(&[&[a]]);
        let bm = dm(&[&[1.0]]);
        let cost = StageCost::diagonal(dm(&[&[1.0]]), dm(&[&[1.0]])).unwrap();
        let sol = solve_dare(&am, &bm, &cost, 1e-13, 200_000).unwrap();
        let theta = if beta < 1.0 {
            theta_min(&sol.p, &cost.r, &bm, beta).unwrap()
        } else {
            dm(&[&[1.0]])
        };
        let x_set = HPolytope {
            f: DMatrix::zeros(0, 1),
            y: DVector::zeros(0),
        };
        let u_set = HPolytope::symmetric_box(&[u_bar]);
        TerminalDesign::new(
            template,
            beta,
            DMatrix::identity(2, 2),
            theta,
            sol.k.clone(),
            sol.p.clone(),
            am,
            bm,
            x_set,
            u_set,
        )
        .unwrap()
    }

    #[test]
    fn origin_is_always_a_member() {
        let d = scalar_design(1.1, 1.0, 0.95);
        assert!(ylqr_feasibility(&d, &dv(&[0.0, 0.0])));
        assert!(membership_t_beta(&d, &dv(&[0.0])).unwrap().is_in());
        assert!(membership_hat_t_lqr(&d, &dv(&[0.0])).unwrap().is_in());
    }

    #[test]
    fn oversized_offset_leaves_ylqr() {
        // scale ys so P(ys) exceeds the positive-invariant radius
        let d = scalar_design(1.1, 1.0, 0.95);
        let b = scalar_oracles(ScalarPlant::new(1.1, 1.0).unwrap(), 0.95).b;
        let ys = dv(&[2.0 * b, 2.0 * b]);
        assert!(!ylqr_feasibility(&d, &ys));
        let ys_ok = dv(&[0.5 * b, 0.5 * b]);
        assert!(ylqr_feasibility(&d, &ys_ok));
    }

    #[test]
    fn scalar_hat_t_lqr_matches_b_radius() {
        // with F = [1; -1] the union of LQR-invariant cc-polytopes is the
        // maximal positive-invariant interval [-b, b]
        let d = scalar_design(1.1, 1.0, 0.95);
        let b = scalar_oracles(ScalarPlant::new(1.1, 1.0).unwrap(), 0.95).b;
        assert!(membership_hat_t_lqr(&d, &dv(&[0.999 * b])).unwrap().is_in());
        assert!(membership_hat_t_lqr(&d, &dv(&[1.01 * b])).unwrap().is_out());
        assert!(membership_hat_t_lqr(&d, &dv(&[-0.999 * b])).unwrap().is_in());
    }

    #[test]
    fn t_beta_reaches_between_b_and_m() {
        // beta above the threshold: points between b(a) and m(a) belong to
        // T(beta) but not to the positive-invariant interval
        let (a, ub, beta) = (1.1, 1.0, 0.95);
        let d = scalar_design(a, ub, beta);
        let o = scalar_oracles(ScalarPlant::new(a, ub).unwrap(), beta);
        let b = o.b;
        let m = o.m.radius().unwrap();
        assert!(beta > o.beta_threshold);
        let mid = 0.5 * (b + m);
        assert!(membership_t_beta(&d, &dv(&[mid])).unwrap().is_in());
        assert!(membership_t_beta(&d, &dv(&[-mid])).unwrap().is_in());
        assert!(membership_hat_t_lqr(&d, &dv(&[mid])).unwrap().is_out());
    }

    #[test]
    fn t_beta_bounded_by_contractive_radius() {
        let (a, ub, beta) = (1.1, 1.0, 0.95);
        let d = scalar_design(a, ub, beta);
        let m = scalar_oracles(ScalarPlant::new(a, ub).unwrap(), beta)
            .m
            .radius()
            .unwrap();
        assert!(membership_t_beta(&d, &dv(&[1.1 * m])).unwrap().is_out());
        assert!(membership_t_beta(&d, &dv(&[-1.1 * m])).unwrap().is_out());
    }

    #[test]
    fn terminal_cost_zero_at_origin() {
        let d = scalar_design(1.1, 1.0, 0.95);
        let eval = eval_terminal_cost(&d, &dv(&[0.0])).unwrap();
        let v = eval.value.finite().unwrap();
        assert!(v.abs() <= 1e-7, "m(0) = {v}");
    }

    #[test]
    fn terminal_cost_equals_lqr_value_inside_hat_t_lqr() {
        let d = scalar_design(1.1, 1.0, 0.95);
        let b = scalar_oracles(ScalarPlant::new(1.1, 1.0).unwrap(), 0.95).b;
        for &frac in &[0.1, 0.35, 0.6, 0.85, 0.999, -0.2, -0.7, -0.95] {
            let x = dv(&[frac * b]);
            let expected = (x.transpose() * &d.p * &x)[(0, 0)];
            let m = eval_terminal_cost(&d, &x).unwrap().value.finite().unwrap();
            assert!(
                (m - expected).abs() <= 1e-6 * (1.0 + expected),
                "m({x}) = {m}, x'Px = {expected}"
            );
        }
    }

    #[test]
    fn terminal_cost_dominates_lqr_term() {
        let d = scalar_design(1.1, 1.0, 0.95);
        let o = scalar_oracles(ScalarPlant::new(1.1, 1.0).unwrap(), 0.95);
        let x = dv(&[0.5 * (o.b + o.m.radius().unwrap())]);
        let m = eval_terminal_cost(&d, &x).unwrap().value.finite().unwrap();
        let xpx = (x.transpose() * &d.p * &x)[(0, 0)];
        assert!(m >= xpx - 1e-7);
    }

    #[test]
    fn finiteness_matches_membership() {
        let d = scalar_design(1.1, 1.0, 0.95);
        let m = scalar_oracles(ScalarPlant::new(1.1, 1.0).unwrap(), 0.95)
            .m
            .radius()
            .unwrap();
        for &x in &[0.0, 0.5 * m, 0.99 * m, 1.02 * m, 1.5 * m, -0.8 * m, -1.2 * m] {
            let xv = dv(&[x]);
            let member = membership_t_beta(&d, &xv).unwrap().is_in();
            let finite = eval_terminal_cost(&d, &xv)
                .unwrap()
                .value
                .finite()
                .is_some();
            assert_eq!(member, finite, "mismatch at x = {x}");
        }
    }

    #[test]
    fn lqr_opt_cost_is_feasibility_gated() {
        let d = scalar_design(1.1, 1.0, 0.95);
        let b = scalar_oracles(ScalarPlant::new(1.1, 1.0).unwrap(), 0.95).b;
        let x_in = dv(&[0.7 * b]);
        match eval_lqr_opt_cost(&d, &x_in).unwrap() {
            TerminalValue::Finite(v) => {
                assert_abs_diff_eq!(v, (x_in.transpose() * &d.p * &x_in)[(0, 0)], epsilon = 1e-10);
            }
            TerminalValue::Infinite => panic!("expected finite"),
        }
        assert!(matches!(
            eval_lqr_opt_cost(&d, &dv(&[1.5 * b])).unwrap(),
            TerminalValue::Infinite
        ));
        assert!(matches!(
            eval_lqr_opt_cost(&d, &dv(&[0.0])).unwrap(),
            TerminalValue::Finite(v) if v.abs() < 1e-12
        ));
    }

    #[test]
    fn vertex_weights_recover_vertex_and_midpoint() {
        let d = scalar_design(1.1, 1.0, 0.95);
        let y = dv(&[1.0, 1.0]); // P(y) = [-1, 1]
        let v = vec![dv(&[0.3]), dv(&[-0.4])];
        // x at a vertex: weight concentrates there
        let vert = &d.template.v[0] * &y;
        let w = extract_vertex_control(&d, &vert, &y, &v).unwrap();
        let idx = if (vert[0] - 1.0).abs() < 1e-9 { 0 } else { 1 };
        assert_abs_diff_eq!(w.lambda[idx], 1.0, epsilon = 1e-6);
        // x = 0 with the min-norm tie-break: lambda = (1/2, 1/2)
        let w0 = extract_vertex_control(&d, &dv(&[0.0]), &y, &v).unwrap();
        assert_abs_diff_eq!(w0.lambda[0], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(w0.lambda[1], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(w0.u[0], (0.3 - 0.4) / 2.0, epsilon = 1e-6);
        // reconstruction identity
        let recon = w0.lambda[0] * (&d.template.v[0] * &y) + w0.lambda[1] * (&d.template.v[1] * &y);
        assert_abs_diff_eq!(recon[0], 0.0, epsilon = 1e-7);
    }

    #[test]
    fn vertex_weights_reject_outside_point() {
        let d = scalar_design(1.1, 1.0, 0.95);
        let y = dv(&[1.0, 1.0]);
        let v = vec![dv(&[0.0]), dv(&[0.0])];
        assert!(matches!(
            extract_vertex_control(&d, &dv(&[2.0]), &y, &v).unwrap_err(),
            TerminalError::NotInPolytope
        ));
    }

    #[test]
    fn descent_step_at_origin_is_stationary() {
        let d = scalar_design(1.1, 1.0, 0.95);
        let x = dv(&[0.0]);
        let eval = eval_terminal_cost(&d, &x).unwrap();
        let (u, x_plus, _cert) = descent_step(&d, &x, &eval).unwrap();
        assert_abs_diff_eq!(u[0], 0.0, epsilon = 1e-6);
        assert!(x_plus.amax() <= 1e-6);
    }

    #[test]
    fn descent_inequality_along_scalar_members() {
        // m(x+) + l(x, u) <= m(x) + 1e-6 with Theta = theta_min
        let (a, ub, beta) = (1.1, 1.0, 0.95);
        let d = scalar_design(a, ub, beta);
        let cost = StageCost::diagonal(dm(&[&[1.0]]), dm(&[&[1.0]])).unwrap();
        let m = scalar_oracles(ScalarPlant::new(a, ub).unwrap(), beta)
            .m
            .radius()
            .unwrap();
        for k in 0..21 {
            let xv = dv(&[-0.98 * m + (1.96 * m) * (k as f64) / 20.0]);
            let eval = eval_terminal_cost(&d, &xv).unwrap();
            let mx = match eval.value.finite() {
                Some(v) => v,
                None => continue,
            };
            let (u, x_plus, cert) = descent_step(&d, &xv, &eval).unwrap();
            assert!(d.u_set.contains(&u, 1e-9));
            let m_plus = eval_terminal_cost(&d, &x_plus)
                .unwrap()
                .value
                .finite()
                .expect("successor must stay in T(beta)");
            let l = cost.eval(&xv, &u);
            assert!(
                m_plus + l <= mx + 1e-6,
                "descent violated at x = {}: {} + {} > {}",
                xv[0],
                m_plus,
                l,
                mx
            );
            // strengthened inequality with the Gamma slack
            let y_ys = &eval.y_star - &eval.ys_star;
            let gam = (y_ys.transpose() * &d.gamma * &y_ys)[(0, 0)];
            assert!(m_plus + l <= mx - (1.0 - beta * beta) * gam + 1e-6);
            // tube deviation contraction e+ = beta e
            for (ei, vpi) in cert.e.iter().zip(&cert.v_plus) {
                let e_plus = vpi - &d.k * (&d.template.v[cert.e.iter().position(|x| std::ptr::eq(x, ei)).unwrap()] * &cert.y_plus);
                assert_abs_diff_eq!(e_plus[0], beta * ei[0], epsilon = 1e-9 * (1.0 + ei[0].abs()));
            }
        }
    }

    #[test]
    fn tube_recursion_contracts_geometrically() {
        let d = scalar_design(1.1, 1.0, 0.95);
        let o = scalar_oracles(ScalarPlant::new(1.1, 1.0).unwrap(), 0.95);
        let x = dv(&[0.5 * (o.b + o.m.radius().unwrap())]);
        let eval = eval_terminal_cost(&d, &x).unwrap();
        let ys = eval.ys_star.clone();
        let y0 = eval.y_star.clone();
        let d0 = (&y0 - &ys).norm();
        let mut y = y0;
        for k in 1..=12 {
            y = &ys + (&y - &ys) * d.beta;
            let dk = (&y - &ys).norm();
            let expected = d.beta.powi(k) * d0;
            assert!(
                (dk - expected).abs() <= 1e-9 * (1.0 + expected),
                "tube ratio broken at k = {k}"
            );
        }
    }
}

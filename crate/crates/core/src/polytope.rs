//! Polytope representations, configuration-constrained templates, polyhedral
//! projection and the invariant-set algorithms.
//!
//! A cc-template is a triple `(F, E, V)` such that the parametric polytope
//! `P(y) = {x : Fx <= y}` equals the convex hull of the vertex images
//! `{V_1 y, ..., V_v y}` exactly when `Ey <= 0`. Templates are built from a
//! simple witness polytope by inverting the active facet rows at each vertex.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::qpcore::{self, Feasibility, QpStatus};

/// Tolerance for merging duplicate vertices.
pub const VERTEX_MERGE_TOL: f64 = 1e-9;
/// Tolerance used by set-inclusion termination tests.
pub const INCLUSION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PolytopeError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("facet row {0} is all-zero")]
    ZeroRow(usize),
    #[error("witness polytope has a degenerate vertex with {found} active facets (expected {expected})")]
    DegenerateTemplate { found: usize, expected: usize },
    #[error("witness polytope is unbounded or P(0) != {{0}}")]
    UnboundedTemplate,
    #[error("offset violates the configuration constraint (row {row}, value {value:.3e})")]
    ConfigurationViolated { row: usize, value: f64 },
    #[error("set iteration hit the limit of {limit} iterations")]
    IterationLimit { limit: usize, last: Box<HPolytope> },
    #[error("closed-loop matrix has spectral radius {0:.6} >= 1")]
    NotContractiveMap(f64),
    #[error("hausdorff arguments are not nested (violation {0:.3e})")]
    NotNested(f64),
    #[error("polytope is empty")]
    EmptySet,
    #[error("vertex enumeration budget exceeded ({0} facet subsets)")]
    EnumerationBudget(u128),
    #[error("solver failure: {0}")]
    Solver(#[from] qpcore::QpError),
    #[error("solver returned an indeterminate verdict")]
    Indeterminate,
}

/// Halfspace representation `{x : Fx <= y}`. Emptiness is a queryable state,
/// not an error.
#[derive(Debug, Clone)]
pub struct HPolytope {
    pub f: DMatrix<f64>,
    pub y: DVector<f64>,
}

/// Outcome of a support-function evaluation.
#[derive(Debug, Clone)]
pub enum Support {
    Value { value: f64, maximizer: DVector<f64> },
    Unbounded,
}

impl Support {
    pub fn value(&self) -> Option<f64> {
        match self {
            Support::Value { value, .. } => Some(*value),
            Support::Unbounded => None,
        }
    }
}

impl HPolytope {
    pub fn new(f: DMatrix<f64>, y: DVector<f64>) -> Result<Self, PolytopeError> {
        if f.nrows() != y.len() {
            return Err(PolytopeError::DimensionMismatch(format!(
                "{} facet rows with {} offsets",
                f.nrows(),
                y.len()
            )));
        }
        for i in 0..f.nrows() {
            if f.row(i).amax() == 0.0 {
                return Err(PolytopeError::ZeroRow(i));
            }
        }
        Ok(Self { f, y })
    }

    /// Axis-aligned box `{x : |x_i| <= radius_i}`.
    pub fn symmetric_box(radii: &[f64]) -> Self {
        let n = radii.len();
        let mut f = DMatrix::zeros(2 * n, n);
        let mut y = DVector::zeros(2 * n);
        for i in 0..n {
            f[(i, i)] = 1.0;
            f[(n + i, i)] = -1.0;
            y[i] = radii[i];
            y[n + i] = radii[i];
        }
        Self { f, y }
    }

    /// Box `{x : lo_i <= x_i <= hi_i}`.
    pub fn box_bounds(lo: &[f64], hi: &[f64]) -> Self {
        let n = lo.len();
        let mut f = DMatrix::zeros(2 * n, n);
        let mut y = DVector::zeros(2 * n);
        for i in 0..n {
            f[(i, i)] = 1.0;
            f[(n + i, i)] = -1.0;
            y[i] = hi[i];
            y[n + i] = -lo[i];
        }
        Self { f, y }
    }

    pub fn dim(&self) -> usize {
        self.f.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.f.nrows()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let r = &self.f * x - &self.y;
        r.iter().all(|&v| v <= tol)
    }

    /// Scale the set by a nonnegative factor: `{x : Fx <= a y}`.
    pub fn scaled(&self, a: f64) -> Self {
        Self {
            f: self.f.clone(),
            y: &self.y * a,
        }
    }

    pub fn is_empty(&self) -> Result<bool, PolytopeError> {
        let aeq = DMatrix::zeros(0, self.dim());
        let beq = DVector::zeros(0);
        match qpcore::feasibility(&self.f, &self.y, &aeq, &beq, 1e-9)? {
            Feasibility::Feasible(_) => Ok(false),
            Feasibility::Infeasible(_) => Ok(true),
            Feasibility::Indeterminate => Err(PolytopeError::Indeterminate),
        }
    }

    /// Support function `max d'x` over the set.
    pub fn support(&self, d: &DVector<f64>) -> Result<Support, PolytopeError> {
        let aeq = DMatrix::zeros(0, self.dim());
        let beq = DVector::zeros(0);
        let sol = qpcore::solve_lp(&(-d), &self.f, &self.y, &aeq, &beq)?;
        match sol.status {
            QpStatus::Optimal => Ok(Support::Value {
                value: -sol.objective,
                maximizer: sol.point,
            }),
            QpStatus::Unbounded => Ok(Support::Unbounded),
            QpStatus::Infeasible => Err(PolytopeError::EmptySet),
            QpStatus::MaxIterations => Err(PolytopeError::Indeterminate),
        }
    }

    /// Intersection by stacking rows.
    pub fn intersect(&self, other: &HPolytope) -> Self {
        let mut f = DMatrix::zeros(self.num_rows() + other.num_rows(), self.dim());
        f.view_mut((0, 0), (self.num_rows(), self.dim()))
            .copy_from(&self.f);
        f.view_mut((self.num_rows(), 0), (other.num_rows(), self.dim()))
            .copy_from(&other.f);
        let mut y = DVector::zeros(self.num_rows() + other.num_rows());
        y.rows_mut(0, self.num_rows()).copy_from(&self.y);
        y.rows_mut(self.num_rows(), other.num_rows())
            .copy_from(&other.y);
        Self { f, y }
    }

    /// Does `self` contain `other`? Tested by support comparison on every
    /// facet of `self`.
    pub fn includes(&self, other: &HPolytope, tol: f64) -> Result<bool, PolytopeError> {
        for i in 0..self.num_rows() {
            let d = self.f.row(i).transpose();
            match other.support(&d)? {
                Support::Value { value, .. } => {
                    if value > self.y[i] + tol * self.f.row(i).norm().max(1.0) {
                        return Ok(false);
                    }
                }
                Support::Unbounded => return Ok(false),
            }
        }
        Ok(true)
    }

    /// Minimal representation: drops trivial and redundant rows (per-row LP).
    /// Rows are normalised to unit Euclidean norm first so the redundancy
    /// test is scale-free.
    pub fn reduced(&self, tol: f64) -> Result<Self, PolytopeError> {
        let (f, y) = reduce_rows(&self.f, &self.y, tol)?;
        Ok(Self { f, y })
    }
}

fn normalize_rows(f: &DMatrix<f64>, y: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mut fs = f.clone();
    let mut ys = y.clone();
    for i in 0..f.nrows() {
        let nrm = f.row(i).norm();
        if nrm > 0.0 {
            for j in 0..f.ncols() {
                fs[(i, j)] /= nrm;
            }
            ys[i] /= nrm;
        }
    }
    (fs, ys)
}

/// Drop all-zero rows; they are trivially true for nonnegative offsets. A
/// zero row with a negative offset makes the set empty and is kept so
/// emptiness stays detectable.
fn drop_trivial(f: &DMatrix<f64>, y: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let keep: Vec<usize> = (0..f.nrows())
        .filter(|&i| f.row(i).amax() > 1e-13 || y[i] < -1e-13)
        .collect();
    select_rows(f, y, &keep)
}

fn select_rows(f: &DMatrix<f64>, y: &DVector<f64>, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let mut fo = DMatrix::zeros(idx.len(), f.ncols());
    let mut yo = DVector::zeros(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        fo.row_mut(r).copy_from(&f.row(i));
        yo[r] = y[i];
    }
    (fo, yo)
}

/// Deduplicate rows that are positive multiples of each other, keeping the
/// tightest offset per direction.
fn dedup_rows(f: &DMatrix<f64>, y: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let (fn_, yn) = normalize_rows(f, y);
    let mut keep: Vec<usize> = Vec::new();
    for i in 0..fn_.nrows() {
        if !keep
            .iter()
            .any(|&k| (fn_.row(i) - fn_.row(k)).amax() <= 1e-12)
        {
            keep.push(i);
        }
    }
    let (fo, mut yo) = select_rows(&fn_, &yn, &keep);
    for (r, &i) in keep.iter().enumerate() {
        let mut best = yn[i];
        for j in 0..fn_.nrows() {
            if (fn_.row(i) - fn_.row(j)).amax() <= 1e-12 {
                best = best.min(yn[j]);
            }
        }
        yo[r] = best;
    }
    (fo, yo)
}

/// Remove redundant rows. A row is redundant when maximising it over the
/// remaining rows cannot exceed its offset by more than `tol`.
fn reduce_rows(
    f: &DMatrix<f64>,
    y: &DVector<f64>,
    tol: f64,
) -> Result<(DMatrix<f64>, DVector<f64>), PolytopeError> {
    let (f, y) = drop_trivial(f, y);
    let (f, y) = dedup_rows(&f, &y);
    let m = f.nrows();
    if m <= 1 {
        return Ok((f, y));
    }
    let aeq = DMatrix::zeros(0, f.ncols());
    let beq = DVector::zeros(0);
    let mut keep: Vec<usize> = Vec::new();
    for i in 0..m {
        let others: Vec<usize> = (0..m)
            .filter(|&j| j != i && (keep.contains(&j) || j > i))
            .collect();
        if others.is_empty() {
            keep.push(i);
            continue;
        }
        let (fo, yo) = select_rows(&f, &y, &others);
        let d = f.row(i).transpose();
        let sol = qpcore::solve_lp(&(-&d), &fo, &yo, &aeq, &beq)?;
        let redundant = match sol.status {
            QpStatus::Optimal => -sol.objective <= y[i] + tol,
            QpStatus::Unbounded => false,
            QpStatus::Infeasible => true,
            QpStatus::MaxIterations => false, // keep the row when in doubt
        };
        if !redundant {
            keep.push(i);
        }
    }
    Ok(select_rows(&f, &y, &keep))
}

/// Vertex representation: convex hull of a point list.
#[derive(Debug, Clone)]
pub struct VPolytope {
    pub vertices: Vec<DVector<f64>>,
}

impl VPolytope {
    /// Builds from a list, merging duplicates within [`VERTEX_MERGE_TOL`].
    pub fn new(points: Vec<DVector<f64>>) -> Result<Self, PolytopeError> {
        if points.is_empty() {
            return Err(PolytopeError::EmptySet);
        }
        let mut vertices: Vec<DVector<f64>> = Vec::new();
        for p in points {
            if !vertices.iter().any(|q| (&p - q).amax() <= VERTEX_MERGE_TOL) {
                vertices.push(p);
            }
        }
        Ok(Self { vertices })
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }

    /// Support `max d'x` over the hull (maximum over vertices).
    pub fn support(&self, d: &DVector<f64>) -> f64 {
        self.vertices
            .iter()
            .map(|v| d.dot(v))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Infinity-norm distance from a point to the hull, via an LP over
    /// convex-combination weights.
    pub fn distance_inf(&self, z: &DVector<f64>) -> Result<f64, PolytopeError> {
        let k = self.vertices.len();
        let n = self.dim();
        // variables (lambda_1..k, eps)
        let mut a_in = DMatrix::zeros(2 * n + k, k + 1);
        let mut b_in = DVector::zeros(2 * n + k);
        for j in 0..n {
            for (i, v) in self.vertices.iter().enumerate() {
                a_in[(j, i)] = v[j];
                a_in[(n + j, i)] = -v[j];
            }
            a_in[(j, k)] = -1.0;
            a_in[(n + j, k)] = -1.0;
            b_in[j] = z[j];
            b_in[n + j] = -z[j];
        }
        for i in 0..k {
            a_in[(2 * n + i, i)] = -1.0; // lambda >= 0
        }
        let mut a_eq = DMatrix::zeros(1, k + 1);
        for i in 0..k {
            a_eq[(0, i)] = 1.0;
        }
        let b_eq = DVector::from_element(1, 1.0);
        let mut g = DVector::zeros(k + 1);
        g[k] = 1.0;
        let sol = qpcore::solve_lp(&g, &a_in, &b_in, &a_eq, &b_eq)?;
        match sol.status {
            QpStatus::Optimal => Ok(sol.objective.max(0.0)),
            _ => Err(PolytopeError::Indeterminate),
        }
    }
}

/// Enumerate the vertices of a (bounded) H-polytope exactly by intersecting
/// facet subsets and filtering for feasibility.
///
/// Exact and intended for low dimension or small facet counts; the subset
/// count is guarded by a budget.
pub fn enumerate_vertices(p: &HPolytope, tol: f64) -> Result<Vec<DVector<f64>>, PolytopeError> {
    let n = p.dim();
    let m = p.num_rows();
    if m < n {
        return Err(PolytopeError::UnboundedTemplate);
    }
    let mut budget: u128 = 1;
    for i in 0..n {
        budget = budget.saturating_mul((m - i) as u128) / (i as u128 + 1);
    }
    if budget > 2_000_000 {
        return Err(PolytopeError::EnumerationBudget(budget));
    }
    let mut verts: Vec<DVector<f64>> = Vec::new();
    let mut subset: Vec<usize> = (0..n).collect();
    loop {
        let mut fa = DMatrix::zeros(n, n);
        let mut ya = DVector::zeros(n);
        for (r, &i) in subset.iter().enumerate() {
            fa.row_mut(r).copy_from(&p.f.row(i));
            ya[r] = p.y[i];
        }
        if let Some(inv) = fa.lu().try_inverse() {
            let x = inv * ya;
            let scale = 1.0 + x.amax();
            if p.contains(&x, tol * scale)
                && !verts.iter().any(|v| (&x - v).amax() <= VERTEX_MERGE_TOL)
            {
                verts.push(x);
            }
        }
        // next lexicographic n-subset of {0..m}
        let mut i = n;
        let advanced = loop {
            if i == 0 {
                break false;
            }
            i -= 1;
            if subset[i] != i + m - n {
                subset[i] += 1;
                for j in (i + 1)..n {
                    subset[j] = subset[j - 1] + 1;
                }
                break true;
            }
        };
        if !advanced {
            break;
        }
    }
    if verts.is_empty() {
        Err(PolytopeError::EmptySet)
    } else {
        Ok(verts)
    }
}

/// Configuration-constrained polytope template `(F, E, V)`.
#[derive(Debug, Clone)]
pub struct CcTemplate {
    pub f: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub v: Vec<DMatrix<f64>>,
    /// For each vertex map, the indices of the facet rows active at that
    /// vertex of the witness polytope.
    pub active_sets: Vec<Vec<usize>>,
}

impl CcTemplate {
    pub fn dim(&self) -> usize {
        self.f.ncols()
    }

    /// Number of facets `f`.
    pub fn num_facets(&self) -> usize {
        self.f.nrows()
    }

    /// Number of vertex maps `v`.
    pub fn num_vertices(&self) -> usize {
        self.v.len()
    }

    /// Number of configuration rows `e`.
    pub fn num_edges(&self) -> usize {
        self.e.nrows()
    }

    pub fn satisfies_configuration(&self, y: &DVector<f64>, tol: f64) -> bool {
        let r = &self.e * y;
        r.iter().all(|&v| v <= tol)
    }

    /// The parametric polytope `P(y)`.
    pub fn polytope(&self, y: &DVector<f64>) -> HPolytope {
        HPolytope {
            f: self.f.clone(),
            y: y.clone(),
        }
    }
}

/// Build a cc-template from a facet matrix and a witness offset for which
/// `P(y0)` is a bounded, nonempty, simple polytope with `P(0) = {0}`.
///
/// The vertex maps invert the active facet rows at each witness vertex; the
/// configuration matrix stacks, for every vertex `i` and non-active facet
/// `j`, the row `F_j V_i - e_j'` (so `Ey <= 0` says every vertex image lands
/// inside all facets), then reduces to a minimal description of the cone.
pub fn build_template(f: DMatrix<f64>, y0: &DVector<f64>) -> Result<CcTemplate, PolytopeError> {
    let n = f.ncols();
    let nf = f.nrows();
    let witness = HPolytope::new(f.clone(), y0.clone())?;
    // P(0) = {0}: the recession cone {Fx <= 0} must be trivial, which also
    // certifies boundedness of every P(y).
    let zero = HPolytope {
        f: f.clone(),
        y: DVector::zeros(nf),
    };
    for j in 0..n {
        for sgn in [1.0, -1.0] {
            let mut d = DVector::zeros(n);
            d[j] = sgn;
            match zero.support(&d)? {
                Support::Value { value, .. } => {
                    if value > 1e-9 {
                        return Err(PolytopeError::UnboundedTemplate);
                    }
                }
                Support::Unbounded => return Err(PolytopeError::UnboundedTemplate),
            }
        }
    }

    let verts = enumerate_vertices(&witness, 1e-7)?;
    let mut v_mats = Vec::with_capacity(verts.len());
    let mut active_sets = Vec::with_capacity(verts.len());
    for x in &verts {
        let scale = 1.0 + x.amax();
        let active: Vec<usize> = (0..nf)
            .filter(|&j| ((f.row(j) * x)[(0, 0)] - y0[j]).abs() <= 1e-7 * scale)
            .collect();
        if active.len() != n {
            return Err(PolytopeError::DegenerateTemplate {
                found: active.len(),
                expected: n,
            });
        }
        let mut fa = DMatrix::zeros(n, n);
        for (r, &j) in active.iter().enumerate() {
            fa.row_mut(r).copy_from(&f.row(j));
        }
        let inv = fa
            .lu()
            .try_inverse()
            .ok_or(PolytopeError::DegenerateTemplate {
                found: n,
                expected: n,
            })?;
        let mut vi = DMatrix::zeros(n, nf);
        for (c, &j) in active.iter().enumerate() {
            vi.column_mut(j).copy_from(&inv.column(c));
        }
        v_mats.push(vi);
        active_sets.push(active);
    }

    // Raw configuration rows: F_j V_i - e_j' for every non-active facet.
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for (vi, act) in v_mats.iter().zip(&active_sets) {
        for j in 0..nf {
            if act.contains(&j) {
                continue;
            }
            let mut r = (f.row(j) * vi).transpose();
            r[j] -= 1.0;
            rows.push(r);
        }
    }
    let e = minimal_cone_rows(rows, nf)?;

    // The witness offset must satisfy its own configuration constraint.
    let viol = &e * y0;
    for (row, &v) in viol.iter().enumerate() {
        if v > 1e-8 {
            return Err(PolytopeError::ConfigurationViolated { row, value: v });
        }
    }

    Ok(CcTemplate {
        f,
        e,
        v: v_mats,
        active_sets,
    })
}

/// Minimal representation of the cone `{y : R y <= 0}`: rows normalised to
/// unit max-abs, deduplicated up to positive scaling, then pruned by an LP
/// over the box-truncated cone.
fn minimal_cone_rows(rows: Vec<DVector<f64>>, nf: usize) -> Result<DMatrix<f64>, PolytopeError> {
    let mut uniq: Vec<DVector<f64>> = Vec::new();
    for r in rows {
        let nrm = r.amax();
        if nrm <= 1e-13 {
            continue;
        }
        let rn = &r / nrm;
        if !uniq.iter().any(|q| (&rn - q).amax() <= 1e-9) {
            uniq.push(rn);
        }
    }
    let m = uniq.len();
    let aeq = DMatrix::zeros(0, nf);
    let beq = DVector::zeros(0);
    let mut keep: Vec<usize> = Vec::new();
    for i in 0..m {
        let others: Vec<usize> = (0..m)
            .filter(|&j| j != i && (keep.contains(&j) || j > i))
            .collect();
        let mut redundant = false;
        if !others.is_empty() {
            // max r_i y subject to the other rows <= 0 within a unit box;
            // the row is implied iff the maximum stays at 0.
            let mut a = DMatrix::zeros(others.len() + 2 * nf, nf);
            let mut b = DVector::zeros(others.len() + 2 * nf);
            for (r, &j) in others.iter().enumerate() {
                a.row_mut(r).copy_from(&uniq[j].transpose());
            }
            for j in 0..nf {
                a[(others.len() + j, j)] = 1.0;
                b[others.len() + j] = 1.0;
                a[(others.len() + nf + j, j)] = -1.0;
                b[others.len() + nf + j] = 1.0;
            }
            let sol = qpcore::solve_lp(&(-&uniq[i]), &a, &b, &aeq, &beq)?;
            redundant = sol.status == QpStatus::Optimal && -sol.objective <= 1e-9;
        }
        if !redundant {
            keep.push(i);
        }
    }
    let mut e = DMatrix::zeros(keep.len(), nf);
    for (r, &i) in keep.iter().enumerate() {
        e.row_mut(r).copy_from(&uniq[i].transpose());
    }
    Ok(e)
}

/// Check the cc-relation at an offset: every vertex image must satisfy all
/// facets, and every independently enumerated vertex of `P(y)` must coincide
/// with some image `V_i y`.
pub fn verify_cc_relation(template: &CcTemplate, y: &DVector<f64>) -> Result<bool, PolytopeError> {
    if !template.satisfies_configuration(y, 1e-9) {
        return Err(PolytopeError::ConfigurationViolated {
            row: 0,
            value: (&template.e * y).amax(),
        });
    }
    let scale = 1.0 + y.amax();
    for vi in &template.v {
        let img = vi * y;
        let r = &template.f * &img - y;
        if r.iter().any(|&v| v > 1e-8 * scale) {
            return Ok(false);
        }
    }
    let verts = enumerate_vertices(&template.polytope(y), 1e-7)?;
    for x in verts {
        let hit = template
            .v
            .iter()
            .any(|vi| (vi * y - &x).amax() <= 1e-7 * scale);
        if !hit {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Vertex list `{V_i y}` of a configuration-compliant offset.
pub fn vertices_of(template: &CcTemplate, y: &DVector<f64>) -> Result<VPolytope, PolytopeError> {
    if !template.satisfies_configuration(y, 1e-9) {
        return Err(PolytopeError::ConfigurationViolated {
            row: 0,
            value: (&template.e * y).amax(),
        });
    }
    VPolytope::new(template.v.iter().map(|vi| vi * y).collect())
}

/// Exact Fourier-Motzkin projection dropping the contiguous variable block
/// `[drop_start, drop_start + drop_len)`, with redundancy removal after each
/// eliminated variable.
pub fn fm_project(
    p: &HPolytope,
    drop_start: usize,
    drop_len: usize,
) -> Result<HPolytope, PolytopeError> {
    let n = p.dim();
    assert!(drop_start + drop_len <= n, "drop range out of bounds");
    let mut f = p.f.clone();
    let mut y = p.y.clone();
    // Eliminate from the last dropped column backwards so earlier indices
    // stay valid.
    for col in (drop_start..drop_start + drop_len).rev() {
        let (fe, ye) = fm_eliminate(&f, &y, col);
        let (fr, yr) = reduce_rows(&fe, &ye, 1e-9)?;
        f = fr;
        y = yr;
    }
    if f.nrows() == 0 {
        // Projection is the whole space; return a vacuous box so the
        // H-form stays well-formed.
        return Ok(HPolytope::symmetric_box(&vec![f64::MAX; n - drop_len]));
    }
    Ok(HPolytope { f, y })
}

fn fm_eliminate(f: &DMatrix<f64>, y: &DVector<f64>, col: usize) -> (DMatrix<f64>, DVector<f64>) {
    let m = f.nrows();
    let tol = 1e-11;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut zer = Vec::new();
    for i in 0..m {
        let v = f[(i, col)];
        if v > tol {
            pos.push(i);
        } else if v < -tol {
            neg.push(i);
        } else {
            zer.push(i);
        }
    }
    let ncols = f.ncols() - 1;
    let strip = |row: usize| -> DVector<f64> {
        let mut r = DVector::zeros(ncols);
        let mut c = 0;
        for j in 0..f.ncols() {
            if j == col {
                continue;
            }
            r[c] = f[(row, j)];
            c += 1;
        }
        r
    };
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for &i in &zer {
        rows.push(strip(i));
        rhs.push(y[i]);
    }
    for &i in &pos {
        for &j in &neg {
            let a = f[(i, col)];
            let b = f[(j, col)];
            rows.push(strip(i) / a - strip(j) / b);
            rhs.push(y[i] / a - y[j] / b);
        }
    }
    let mut fo = DMatrix::zeros(rows.len(), ncols);
    let mut yo = DVector::zeros(rows.len());
    for (r, row) in rows.iter().enumerate() {
        fo.row_mut(r).copy_from(&row.transpose());
        yo[r] = rhs[r];
    }
    (fo, yo)
}

/// One-step backward reachable set `{x : exists u in U, Ax + Bu in X}`.
pub fn pre_set(
    x_set: &HPolytope,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    u_set: &HPolytope,
) -> Result<HPolytope, PolytopeError> {
    pre_set_scaled(x_set, a, b, u_set, 1.0)
}

fn pre_set_scaled(
    x_set: &HPolytope,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    u_set: &HPolytope,
    lambda: f64,
) -> Result<HPolytope, PolytopeError> {
    let nx = a.ncols();
    let nu = b.ncols();
    let mx = x_set.num_rows();
    let mu = u_set.num_rows();
    let mut f = DMatrix::zeros(mx + mu, nx + nu);
    let mut y = DVector::zeros(mx + mu);
    f.view_mut((0, 0), (mx, nx)).copy_from(&(&x_set.f * a));
    f.view_mut((0, nx), (mx, nu)).copy_from(&(&x_set.f * b));
    y.rows_mut(0, mx).copy_from(&(&x_set.y * lambda));
    f.view_mut((mx, nx), (mu, nu)).copy_from(&u_set.f);
    y.rows_mut(mx, mu).copy_from(&u_set.y);
    let lifted = HPolytope { f, y };
    fm_project(&lifted, nx, nu)
}

/// Maximal positive invariant set of `x+ = A_cl x` inside `X_c`.
///
/// The returned representation keeps the base rows of `X_c` and appends only
/// the image rows `F A_cl^k x <= y` that actually cut; the set itself is the
/// exact fixed point.
pub fn max_positive_invariant(
    a_cl: &DMatrix<f64>,
    x_c: &HPolytope,
    max_iter: usize,
) -> Result<HPolytope, PolytopeError> {
    let rho = spectral_radius(a_cl);
    if rho >= 1.0 {
        return Err(PolytopeError::NotContractiveMap(rho));
    }
    let mut f = x_c.f.clone();
    let mut y = x_c.y.clone();
    // Rows of the newest generation; their images are the next candidates.
    let mut gen_f = x_c.f.clone();
    let mut gen_y = x_c.y.clone();
    let aeq = DMatrix::zeros(0, x_c.dim());
    let beq = DVector::zeros(0);
    for _ in 0..max_iter {
        let cand_f = &gen_f * a_cl;
        let cand_y = gen_y.clone();
        let mut new_rows: Vec<usize> = Vec::new();
        for i in 0..cand_f.nrows() {
            if cand_f.row(i).amax() <= 1e-13 {
                continue;
            }
            let d = cand_f.row(i).transpose();
            let sol = qpcore::solve_lp(&(-&d), &f, &y, &aeq, &beq)?;
            let cuts = match sol.status {
                QpStatus::Optimal => -sol.objective > cand_y[i] + INCLUSION_TOL,
                _ => true, // keep when in doubt
            };
            if cuts {
                new_rows.push(i);
            }
        }
        if new_rows.is_empty() {
            return Ok(HPolytope { f, y });
        }
        let (nf, ny) = select_rows(&cand_f, &cand_y, &new_rows);
        let mut merged_f = DMatrix::zeros(f.nrows() + nf.nrows(), f.ncols());
        merged_f.view_mut((0, 0), (f.nrows(), f.ncols())).copy_from(&f);
        merged_f
            .view_mut((f.nrows(), 0), (nf.nrows(), f.ncols()))
            .copy_from(&nf);
        let mut merged_y = DVector::zeros(y.len() + ny.len());
        merged_y.rows_mut(0, y.len()).copy_from(&y);
        merged_y.rows_mut(y.len(), ny.len()).copy_from(&ny);
        f = merged_f;
        y = merged_y;
        gen_f = nf;
        gen_y = ny;
    }
    Err(PolytopeError::IterationLimit {
        limit: max_iter,
        last: Box::new(HPolytope { f, y }),
    })
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Maximal control invariant set inside `X`: fixed point of
/// `X_{k+1} = X_k ∩ Pre(X_k)`.
pub fn max_control_invariant(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x_set: &HPolytope,
    u_set: &HPolytope,
    tol: f64,
    max_iter: usize,
) -> Result<HPolytope, PolytopeError> {
    contractive_iteration(a, b, x_set, u_set, 1.0, tol, max_iter)
}

/// Maximal lambda-contractive set inside `X` for `lambda` in `(0, 1]`.
pub fn max_contractive(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x_set: &HPolytope,
    u_set: &HPolytope,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<HPolytope, PolytopeError> {
    assert!(
        lambda > 0.0 && lambda <= 1.0,
        "lambda must lie in (0, 1], got {lambda}"
    );
    contractive_iteration(a, b, x_set, u_set, lambda, tol, max_iter)
}

fn contractive_iteration(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x_set: &HPolytope,
    u_set: &HPolytope,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<HPolytope, PolytopeError> {
    let mut current = x_set.reduced(1e-9)?;
    for _ in 0..max_iter {
        let pre = pre_set_scaled(&current, a, b, u_set, lambda)?;
        let next = current.intersect(&pre).reduced(1e-9)?;
        // Iterates only shrink, so set equality reduces to current ⊆ next.
        if next.includes(&current, tol)? {
            return Ok(next);
        }
        current = next;
    }
    Err(PolytopeError::IterationLimit {
        limit: max_iter,
        last: Box::new(current),
    })
}

/// One-sided Hausdorff distance with the infinity-norm ball:
/// `d(Z1; Z2) = min{eps >= 0 : Z2 ⊆ Z1 ⊕ eps B_inf}`, requiring `Z1 ⊆ Z2`.
///
/// Computed as the maximum over the vertices of `Z2` of the point-to-set
/// distance to `Z1`, each an LP.
pub fn hausdorff(z1: &HPolytope, z2: &HPolytope) -> Result<f64, PolytopeError> {
    // Nesting check by support comparison on the facets of Z2.
    for i in 0..z2.num_rows() {
        let d = z2.f.row(i).transpose();
        match z1.support(&d)? {
            Support::Value { value, .. } => {
                let nrm = z2.f.row(i).norm().max(1.0);
                if value > z2.y[i] + 1e-8 * nrm {
                    return Err(PolytopeError::NotNested(value - z2.y[i]));
                }
            }
            Support::Unbounded => return Err(PolytopeError::NotNested(f64::INFINITY)),
        }
    }
    let verts = enumerate_vertices(z2, 1e-7)?;
    let mut worst = 0.0f64;
    for z in verts {
        worst = worst.max(point_to_set_inf(z1, &z)?);
    }
    Ok(worst)
}

/// `min_{x in P} ||z - x||_inf` via an LP in `(x, eps)`.
pub fn point_to_set_inf(p: &HPolytope, z: &DVector<f64>) -> Result<f64, PolytopeError> {
    let n = p.dim();
    let m = p.num_rows();
    let mut a_in = DMatrix::zeros(m + 2 * n, n + 1);
    let mut b_in = DVector::zeros(m + 2 * n);
    a_in.view_mut((0, 0), (m, n)).copy_from(&p.f);
    b_in.rows_mut(0, m).copy_from(&p.y);
    for j in 0..n {
        a_in[(m + j, j)] = 1.0;
        a_in[(m + j, n)] = -1.0;
        b_in[m + j] = z[j];
        a_in[(m + n + j, j)] = -1.0;
        a_in[(m + n + j, n)] = -1.0;
        b_in[m + n + j] = -z[j];
    }
    let mut g = DVector::zeros(n + 1);
    g[n] = 1.0;
    let aeq = DMatrix::zeros(0, n + 1);
    let beq = DVector::zeros(0);
    let sol = qpcore::solve_lp(&g, &a_in, &b_in, &aeq, &beq)?;
    match sol.status {
        QpStatus::Optimal => Ok(sol.objective.max(0.0)),
        QpStatus::Infeasible => Err(PolytopeError::EmptySet),
        _ => Err(PolytopeError::Indeterminate),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
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

    /// 1-D template with F = [1; -1]: v = 2, V1 = [1 0], V2 = [0 -1],
    /// E = [-1 -1].
    #[test]
    fn one_dimensional_template() {
        let f = dm(&[&[1.0], &[-1.0]]);
        let t = build_template(f, &dv(&[1.0, 1.0])).unwrap();
        assert_eq!(t.num_facets(), 2);
        assert_eq!(t.num_vertices(), 2);
        assert_eq!(t.num_edges(), 1);
        let er = t.e.row(0);
        assert_abs_diff_eq!(er[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(er[1], -1.0, epsilon = 1e-12);
        let mut maps: Vec<Vec<f64>> = t.v.iter().map(|m| m.as_slice().to_vec()).collect();
        maps.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(maps[0], vec![1.0, 0.0]);
        assert_eq!(maps[1], vec![0.0, -1.0]);
    }

    /// Unit box in 2-D: v = 4, each vertex map inverts two axis rows.
    #[test]
    fn unit_box_template() {
        let f = dm(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0], &[0.0, -1.0]]);
        let t = build_template(f, &dv(&[1.0; 4])).unwrap();
        assert_eq!(t.num_vertices(), 4);
        let y = dv(&[1.0; 4]);
        let verts = vertices_of(&t, &y).unwrap();
        assert_eq!(verts.vertices.len(), 4);
        for v in &verts.vertices {
            assert_abs_diff_eq!(v[0].abs(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(v[1].abs(), 1.0, epsilon = 1e-12);
        }
        assert!(verify_cc_relation(&t, &y).unwrap());
    }

    #[test]
    fn configuration_violation_rejected() {
        let f = dm(&[&[1.0], &[-1.0]]);
        let t = build_template(f, &dv(&[1.0, 1.0])).unwrap();
        // y = (1, -2) violates Ey <= 0
        let err = vertices_of(&t, &dv(&[1.0, -2.0])).unwrap_err();
        assert!(matches!(err, PolytopeError::ConfigurationViolated { .. }));
    }

    #[test]
    fn degenerate_vertex_is_an_error() {
        // square plus a diagonal facet through the corner (1,1)
        let f = dm(&[
            &[1.0, 0.0],
            &[0.0, 1.0],
            &[-1.0, 0.0],
            &[0.0, -1.0],
            &[0.5, 0.5],
        ]);
        let err = build_template(f, &dv(&[1.0, 1.0, 1.0, 1.0, 1.0])).unwrap_err();
        assert!(matches!(err, PolytopeError::DegenerateTemplate { .. }));
    }

    #[test]
    fn unbounded_witness_is_an_error() {
        // half-plane: P(0) is a full ray
        let f = dm(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0]]);
        let err = build_template(f, &dv(&[1.0, 1.0, 1.0])).unwrap_err();
        assert!(matches!(err, PolytopeError::UnboundedTemplate));
    }

    #[test]
    fn fm_project_hand_case() {
        // {(x,u): x + u <= 1, -u <= 0, u <= 1} projected to x gives {x <= 1}
        let p = HPolytope::new(
            dm(&[&[1.0, 1.0], &[0.0, -1.0], &[0.0, 1.0]]),
            dv(&[1.0, 0.0, 1.0]),
        )
        .unwrap();
        let q = fm_project(&p, 1, 1).unwrap();
        assert_eq!(q.num_rows(), 1);
        // row normalised: x <= 1
        assert_abs_diff_eq!(q.y[0] / q.f[(0, 0)], 1.0, epsilon = 1e-12);
        assert!(q.f[(0, 0)] > 0.0);
    }

    #[test]
    fn fm_project_unit_square() {
        let p = HPolytope::symmetric_box(&[1.0, 1.0]);
        let q = fm_project(&p, 1, 1).unwrap();
        assert_eq!(q.num_rows(), 2);
        assert!(q.contains(&dv(&[0.999]), 1e-9));
        assert!(!q.contains(&dv(&[1.001]), 1e-9));
    }

    #[test]
    fn pre_set_scalar_interval() {
        // x+ = a x + u, X = [-c, c], U = [-ub, ub]:
        // Pre = [-(c+ub)/a, (c+ub)/a]
        let a = dm(&[&[1.25]]);
        let b = dm(&[&[1.0]]);
        let x = HPolytope::symmetric_box(&[2.0]);
        let u = HPolytope::symmetric_box(&[0.5]);
        let pre = pre_set(&x, &a, &b, &u).unwrap();
        let r = (2.0 + 0.5) / 1.25;
        assert!(pre.contains(&dv(&[r - 1e-9]), 1e-9));
        assert!(!pre.contains(&dv(&[r + 1e-6]), 1e-9));
        assert!(pre.contains(&dv(&[-r + 1e-9]), 1e-9));
    }

    #[test]
    fn pre_set_ignores_state_when_a_zero() {
        let a = dm(&[&[0.0]]);
        let b = dm(&[&[1.0]]);
        let x = HPolytope::symmetric_box(&[1.0]);
        let u = HPolytope::symmetric_box(&[0.5]);
        let pre = pre_set(&x, &a, &b, &u).unwrap();
        assert!(pre.contains(&dv(&[1e6]), 1e-9));
        assert!(pre.contains(&dv(&[-1e6]), 1e-9));
    }

    #[test]
    fn max_positive_invariant_one_step_case() {
        // A_cl = 0 converges immediately: the invariant set is X_c itself.
        let a_cl = dm(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let xc = HPolytope::symmetric_box(&[1.0, 1.0]);
        let inv = max_positive_invariant(&a_cl, &xc, 50).unwrap();
        assert!(inv.includes(&xc, 1e-9).unwrap());
        assert!(xc.includes(&inv, 1e-9).unwrap());
    }

    #[test]
    fn max_positive_invariant_requires_stability() {
        let a_cl = dm(&[&[1.05]]);
        let xc = HPolytope::symmetric_box(&[1.0]);
        let err = max_positive_invariant(&a_cl, &xc, 50).unwrap_err();
        assert!(matches!(err, PolytopeError::NotContractiveMap(_)));
    }

    #[test]
    fn max_control_invariant_identity_for_a_zero() {
        let a = dm(&[&[0.0]]);
        let b = dm(&[&[1.0]]);
        let x = HPolytope::symmetric_box(&[3.0]);
        let u = HPolytope::symmetric_box(&[1.0]);
        let mci = max_control_invariant(&a, &b, &x, &u, 1e-9, 50).unwrap();
        assert!(mci.includes(&x, 1e-8).unwrap());
        assert!(x.includes(&mci, 1e-8).unwrap());
    }

    #[test]
    fn scalar_max_control_invariant_clipped_interval() {
        // a = 1.1, ub = 1: the maximal CI interval [-10, 10] clips to X.
        let a = dm(&[&[1.1]]);
        let b = dm(&[&[1.0]]);
        let x = HPolytope::symmetric_box(&[8.0]);
        let u = HPolytope::symmetric_box(&[1.0]);
        let mci = max_control_invariant(&a, &b, &x, &u, 1e-9, 100).unwrap();
        let sup = mci.support(&dv(&[1.0])).unwrap().value().unwrap();
        let inf = -mci.support(&dv(&[-1.0])).unwrap().value().unwrap();
        assert_abs_diff_eq!(sup, 8.0, epsilon = 1e-7);
        assert_abs_diff_eq!(inf, -8.0, epsilon = 1e-7);
    }

    #[test]
    fn scalar_max_contractive_closed_form() {
        // [-ub/(a-beta), ub/(a-beta)] for beta < min(a, 1)
        let (a, ub, beta) = (1.1, 1.0, 0.95);
        let am = dm(&[&[a]]);
        let bm = dm(&[&[1.0]]);
        let x = HPolytope::symmetric_box(&[100.0]);
        let u = HPolytope::symmetric_box(&[ub]);
        let c = max_contractive(&am, &bm, &x, &u, beta, 1e-9, 400).unwrap();
        let r = ub / (a - beta);
        let sup = c.support(&dv(&[1.0])).unwrap().value().unwrap();
        let inf = -c.support(&dv(&[-1.0])).unwrap().value().unwrap();
        assert_abs_diff_eq!(sup, r, epsilon = 1e-6);
        assert_abs_diff_eq!(inf, -r, epsilon = 1e-6);
    }

    #[test]
    fn contractive_at_lambda_one_matches_mci_scalar() {
        let am = dm(&[&[1.1]]);
        let bm = dm(&[&[1.0]]);
        let x = HPolytope::symmetric_box(&[8.0]);
        let u = HPolytope::symmetric_box(&[1.0]);
        let c1 = max_contractive(&am, &bm, &x, &u, 1.0, 1e-9, 200).unwrap();
        let mci = max_control_invariant(&am, &bm, &x, &u, 1e-9, 200).unwrap();
        assert!(c1.includes(&mci, 1e-7).unwrap());
        assert!(mci.includes(&c1, 1e-7).unwrap());
    }

    #[test]
    fn hausdorff_identical_sets_is_zero() {
        let z = HPolytope::symmetric_box(&[1.0, 1.0]);
        assert_abs_diff_eq!(hausdorff(&z, &z).unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn hausdorff_nested_intervals() {
        let z1 = HPolytope::symmetric_box(&[1.0]);
        let z2 = HPolytope::symmetric_box(&[3.0]);
        assert_abs_diff_eq!(hausdorff(&z1, &z2).unwrap(), 2.0, epsilon = 1e-7);
    }

    #[test]
    fn hausdorff_boxes_2d() {
        let z1 = HPolytope::symmetric_box(&[1.0, 1.0]);
        let z2 = HPolytope::symmetric_box(&[2.0, 2.0]);
        assert_abs_diff_eq!(hausdorff(&z1, &z2).unwrap(), 1.0, epsilon = 1e-7);
    }

    #[test]
    fn hausdorff_rejects_non_nested() {
        let z1 = HPolytope::symmetric_box(&[3.0]);
        let z2 = HPolytope::symmetric_box(&[1.0]);
        assert!(matches!(
            hausdorff(&z1, &z2).unwrap_err(),
            PolytopeError::NotNested(_)
        ));
    }

    #[test]
    fn support_unit_box() {
        let p = HPolytope::symmetric_box(&[1.0, 1.0]);
        let s = p.support(&dv(&[1.0, 0.0])).unwrap().value().unwrap();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn support_interval_lower_end() {
        let p = HPolytope::symmetric_box(&[2.5]);
        let s = p.support(&dv(&[-1.0])).unwrap().value().unwrap();
        assert_abs_diff_eq!(s, 2.5, epsilon = 1e-8);
    }

    #[test]
    fn reduced_removes_redundant_row() {
        // x <= 1, x <= 2 (redundant), -x <= 1
        let p = HPolytope::new(dm(&[&[1.0], &[1.0], &[-1.0]]), dv(&[1.0, 2.0, 1.0])).unwrap();
        let r = p.reduced(1e-9).unwrap();
        assert_eq!(r.num_rows(), 2);
    }
}

//! Discrete algebraic Riccati machinery and the closed-form scalar oracles
//! used as analytic ground truth.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::polytope::spectral_radius;

#[derive(Debug, Error)]
pub enum RegulatorError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("stage cost weights are not admissible: {0}")]
    BadWeights(String),
    #[error("no stabilising Riccati solution found ({0})")]
    NotStabilizable(String),
    #[error("beta = {0} is not admissible here")]
    DegenerateBeta(f64),
    #[error("scalar plant requires a > 0 and u_bar > 0")]
    BadScalarPlant,
}

/// Quadratic stage cost `l(x,u) = x'Qx + 2x'Su + u'Ru`.
#[derive(Debug, Clone)]
pub struct StageCost {
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl StageCost {
    pub fn new(q: DMatrix<f64>, s: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self, RegulatorError> {
        let nx = q.nrows();
        let nu = r.nrows();
        if q.ncols() != nx || r.ncols() != nu || s.nrows() != nx || s.ncols() != nu {
            return Err(RegulatorError::DimensionMismatch(format!(
                "Q {}x{}, S {}x{}, R {}x{}",
                q.nrows(),
                q.ncols(),
                s.nrows(),
                s.ncols(),
                r.nrows(),
                r.ncols()
            )));
        }
        // block matrix [[Q, S], [S', R]] must be PSD, R positive definite
        let mut block = DMatrix::zeros(nx + nu, nx + nu);
        block.view_mut((0, 0), (nx, nx)).copy_from(&q);
        block.view_mut((0, nx), (nx, nu)).copy_from(&s);
        block.view_mut((nx, 0), (nu, nx)).copy_from(&s.transpose());
        block.view_mut((nx, nx), (nu, nu)).copy_from(&r);
        let sym = (&block + block.transpose()) * 0.5;
        let min_eig = sym
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-9 {
            return Err(RegulatorError::BadWeights(format!(
                "cost block has eigenvalue {min_eig:.3e}"
            )));
        }
        let r_min = ((&r + r.transpose()) * 0.5)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if r_min <= 0.0 {
            return Err(RegulatorError::BadWeights(format!(
                "R has eigenvalue {r_min:.3e}, must be positive definite"
            )));
        }
        Ok(Self { q, s, r })
    }

    /// Pure state/input weighting without cross terms.
    pub fn diagonal(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self, RegulatorError> {
        let s = DMatrix::zeros(q.nrows(), r.nrows());
        Self::new(q, s, r)
    }

    pub fn nx(&self) -> usize {
        self.q.nrows()
    }

    pub fn nu(&self) -> usize {
        self.r.nrows()
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (x.transpose() * &self.q * x)[(0, 0)]
            + 2.0 * (x.transpose() * &self.s * u)[(0, 0)]
            + (u.transpose() * &self.r * u)[(0, 0)]
    }

    /// Rank test on the observability matrix of `(A, Q^{1/2})`. The result
    /// is advisory: the Riccati solve warns on failure instead of erroring,
    /// since a stabilising solution is what the downstream algorithms need.
    pub fn is_observable(&self, a: &DMatrix<f64>) -> bool {
        let nx = self.nx();
        let eig = ((&self.q + self.q.transpose()) * 0.5).symmetric_eigen();
        let mut c = DMatrix::zeros(nx, nx);
        for (i, &lam) in eig.eigenvalues.iter().enumerate() {
            let col = eig.eigenvectors.column(i);
            let scale = lam.max(0.0).sqrt();
            for r in 0..nx {
                for cc in 0..nx {
                    c[(r, cc)] += scale * col[r] * col[cc];
                }
            }
        }
        let mut obs = DMatrix::zeros(nx * nx, nx);
        let mut power = DMatrix::identity(nx, nx);
        for k in 0..nx {
            obs.view_mut((k * nx, 0), (nx, nx)).copy_from(&(&c * &power));
            power = &power * a;
        }
        let svd = obs.svd(false, false);
        let smax = svd.singular_values.max();
        svd.rank(1e-10 * smax.max(1.0)) == nx
    }
}

/// Stabilising Riccati solution `(P, K)` with
/// `(R + B'PB) K + (A'PB + S)' = 0` and `rho(A + BK) < 1`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub residual: f64,
}

impl RiccatiSolution {
    pub fn closed_loop(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        a + b * &self.k
    }
}

fn riccati_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cost: &StageCost,
    p: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let m = b.transpose() * p * b + &cost.r;
    let w = a.transpose() * p * b + &cost.s;
    let m_inv = m.try_inverse()?;
    let next = a.transpose() * p * a + &cost.q - &w * m_inv * w.transpose();
    // Symmetrise: rounding in the unstable A'PA term otherwise grows a skew
    // component like rho(A)^2k and can overflow long iterations.
    Some((&next + next.transpose()) * 0.5)
}

fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cost: &StageCost,
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> f64 {
    let m = b.transpose() * p * b + &cost.r;
    let w = a.transpose() * p * b + &cost.s;
    let eq = p - a.transpose() * p * a - &cost.q
        + &w * m.clone().try_inverse().unwrap_or_else(|| DMatrix::identity(m.nrows(), m.ncols()))
            * w.transpose();
    let gain = &m * k + w.transpose();
    let scale = 1.0 + p.amax();
    (eq.amax() / scale).max(gain.amax() / scale)
}

/// Structure-preserving doubling fallback. Operates on the cross-term-free
/// reduction and converges quadratically when the fixed point iteration is
/// too slow or diverges.
fn solve_dare_doubling(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cost: &StageCost,
    tol: f64,
    max_iter: usize,
) -> Option<DMatrix<f64>> {
    let r_inv = cost.r.clone().try_inverse()?;
    let a_hat = a - b * &r_inv * cost.s.transpose();
    let q_hat = &cost.q - &cost.s * &r_inv * cost.s.transpose();
    let n = a.nrows();
    let mut ak = a_hat;
    let mut gk = b * &r_inv * b.transpose();
    let mut hk = (&q_hat + q_hat.transpose()) * 0.5;
    for _ in 0..max_iter {
        let w = DMatrix::identity(n, n) + &gk * &hk;
        let w_inv = w.try_inverse()?;
        let a_next = &ak * &w_inv * &ak;
        let g_next = &gk + &ak * &w_inv * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w_inv * &ak;
        let h_next = (&h_next + h_next.transpose()) * 0.5;
        let delta = (&h_next - &hk).amax();
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if delta <= tol * (1.0 + hk.amax()) {
            return Some(hk);
        }
    }
    None
}

/// Solve the discrete algebraic Riccati equation by fixed-point iteration on
/// `P`, with a doubling fallback guarded by divergence detection.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cost: &StageCost,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution, RegulatorError> {
    let nx = a.nrows();
    if a.ncols() != nx || b.nrows() != nx || cost.nx() != nx || cost.nu() != b.ncols() {
        return Err(RegulatorError::DimensionMismatch(format!(
            "A {}x{}, B {}x{}, cost ({}, {})",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            cost.nx(),
            cost.nu()
        )));
    }
    if !cost.is_observable(a) {
        log::warn!("(A, Q) observability rank test failed; continuing since only a stabilising solution is required");
    }

    let diverged = |p: &DMatrix<f64>| !p.iter().all(|v| v.is_finite()) || p.amax() > 1e14;
    let mut p = cost.q.clone();
    let mut converged = false;
    for _ in 0..max_iter {
        let next = match riccati_step(a, b, cost, &p) {
            Some(m) => m,
            None => break,
        };
        if diverged(&next) {
            break;
        }
        let delta = (&next - &p).amax();
        p = next;
        if delta <= tol * (1.0 + p.amax()) {
            converged = true;
            break;
        }
    }
    if !converged || diverged(&p) {
        p = solve_dare_doubling(a, b, cost, tol, max_iter)
            .ok_or_else(|| RegulatorError::NotStabilizable("doubling fallback failed".into()))?;
    }

    let m = b.transpose() * &p * b + &cost.r;
    let w = a.transpose() * &p * b + &cost.s;
    let m_inv = m
        .try_inverse()
        .ok_or_else(|| RegulatorError::NotStabilizable("R + B'PB singular".into()))?;
    let k = -(m_inv * w.transpose());
    let residual = dare_residual(a, b, cost, &p, &k);
    if residual > tol.max(1e-8) {
        return Err(RegulatorError::NotStabilizable(format!(
            "DARE residual {residual:.3e} above tolerance"
        )));
    }
    if nalgebra::Cholesky::new(p.clone()).is_none() {
        return Err(RegulatorError::NotStabilizable(
            "P is not positive definite".into(),
        ));
    }
    let rho = spectral_radius(&(a + b * &k));
    if rho >= 1.0 {
        return Err(RegulatorError::NotStabilizable(format!(
            "closed loop spectral radius {rho:.6}"
        )));
    }
    Ok(RiccatiSolution { p, k, residual })
}

/// Minimal admissible terminal input weight `(B'PB + R) / (1 - beta^2)`.
pub fn theta_min(
    p: &DMatrix<f64>,
    r: &DMatrix<f64>,
    b: &DMatrix<f64>,
    beta: f64,
) -> Result<DMatrix<f64>, RegulatorError> {
    if !(0.0..1.0).contains(&beta) {
        return Err(RegulatorError::DegenerateBeta(beta));
    }
    let m = (b.transpose() * p * b + r) / (1.0 - beta * beta);
    Ok((&m + m.transpose()) * 0.5)
}

/// Scalar plant `x+ = a x + u` with symmetric input bound and stage cost
/// `x^2 + u^2`.
#[derive(Debug, Clone, Copy)]
pub struct ScalarPlant {
    pub a: f64,
    pub u_bar: f64,
}

impl ScalarPlant {
    pub fn new(a: f64, u_bar: f64) -> Result<Self, RegulatorError> {
        if a <= 0.0 || u_bar <= 0.0 {
            return Err(RegulatorError::BadScalarPlant);
        }
        Ok(Self { a, u_bar })
    }
}

/// Scalar set outcomes: a symmetric interval radius or the whole line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarSet {
    Radius(f64),
    WholeLine,
}

impl ScalarSet {
    pub fn radius(&self) -> Option<f64> {
        match self {
            ScalarSet::Radius(r) => Some(*r),
            ScalarSet::WholeLine => None,
        }
    }
}

/// Closed-form quantities for the scalar plant.
#[derive(Debug, Clone, Copy)]
pub struct ScalarOracles {
    plant: ScalarPlant,
    /// LQR gain `K(a) = -a (a^2 + sqrt(a^4+4)) / (2 + a^2 + sqrt(a^4+4))`.
    pub k: f64,
    /// Maximal positive invariant radius
    /// `b(a) = u_bar (2 + a^2 + sqrt(a^4+4)) / (a (a^2 + sqrt(a^4+4)))`.
    pub b: f64,
    /// Maximal beta-contractive radius `m(a) = u_bar / (a - beta)`;
    /// the whole line when `beta >= min(a, 1)`.
    pub m: ScalarSet,
    /// Smallest beta guaranteeing `b(a) < m(a)`:
    /// `2a / (2 + a^2 + sqrt(a^4+4))`.
    pub beta_threshold: f64,
}

/// Evaluate the closed forms at a plant and contraction rate.
pub fn scalar_oracles(plant: ScalarPlant, beta: f64) -> ScalarOracles {
    let a = plant.a;
    let root = (a.powi(4) + 4.0).sqrt();
    let k = -a * (a * a + root) / (2.0 + a * a + root);
    let b = plant.u_bar * (2.0 + a * a + root) / (a * (a * a + root));
    let m = if beta < a.min(1.0) {
        ScalarSet::Radius(plant.u_bar / (a - beta))
    } else {
        ScalarSet::WholeLine
    };
    let beta_threshold = 2.0 * a / (2.0 + a * a + root);
    ScalarOracles {
        plant,
        k,
        b,
        m,
        beta_threshold,
    }
}

impl ScalarOracles {
    /// Admissible-interval radius of the N-step scheme with the positive
    /// invariant terminal set: `c_N(a) = (b(a) + sum_{i<N} a^i u_bar) / a^N`.
    pub fn c_n(&self, n: u32) -> f64 {
        let a = self.plant.a;
        let mut geom = 0.0;
        let mut pw = 1.0;
        for _ in 0..n {
            geom += pw * self.plant.u_bar;
            pw *= a;
        }
        (self.b + geom) / a.powi(n as i32)
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

    fn example1() -> (DMatrix<f64>, DMatrix<f64>, StageCost) {
        let a = dm(&[&[1.1, 2.0], &[0.0, 0.95]]);
        let b = dm(&[&[0.0], &[0.0787]]);
        let cost = StageCost::diagonal(DMatrix::identity(2, 2) * 100.0, dm(&[&[1.0]])).unwrap();
        (a, b, cost)
    }

    #[test]
    fn example1_gain_matches_reported_value() {
        let (a, b, cost) = example1();
        let sol = solve_dare(&a, &b, &cost, 1e-12, 100_000).unwrap();
        assert_abs_diff_eq!(sol.k[(0, 0)], -4.6128, epsilon = 1e-3);
        assert_abs_diff_eq!(sol.k[(0, 1)], -18.8646, epsilon = 1e-3);
        assert!(sol.residual <= 1e-8);
        assert!(spectral_radius(&sol.closed_loop(&a, &b)) < 1.0);
    }

    #[test]
    fn deadbeat_when_a_is_zero() {
        let a = DMatrix::zeros(2, 2);
        let b = dm(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let cost = StageCost::diagonal(DMatrix::identity(2, 2) * 3.0, DMatrix::identity(2, 2))
            .unwrap();
        let sol = solve_dare(&a, &b, &cost, 1e-12, 10_000).unwrap();
        assert_abs_diff_eq!((&sol.p - &cost.q).amax(), 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.k.amax(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn scalar_gain_matches_closed_form() {
        // a = 1: K = -(1 + sqrt 5) / (3 + sqrt 5)
        let a = dm(&[&[1.0]]);
        let b = dm(&[&[1.0]]);
        let cost = StageCost::diagonal(dm(&[&[1.0]]), dm(&[&[1.0]])).unwrap();
        let sol = solve_dare(&a, &b, &cost, 1e-13, 100_000).unwrap();
        let expected = -(1.0 + 5.0f64.sqrt()) / (3.0 + 5.0f64.sqrt());
        assert_abs_diff_eq!(sol.k[(0, 0)], expected, epsilon = 1e-9);
    }

    #[test]
    fn scalar_gain_cross_validation_grid() {
        for &a in &[0.5, 0.9, 1.0, 1.1, 1.5, 2.0] {
            let am = dm(&[&[a]]);
            let bm = dm(&[&[1.0]]);
            let cost = StageCost::diagonal(dm(&[&[1.0]]), dm(&[&[1.0]])).unwrap();
            let sol = solve_dare(&am, &bm, &cost, 1e-13, 200_000).unwrap();
            let oracle = scalar_oracles(ScalarPlant::new(a, 1.0).unwrap(), 0.5);
            assert_abs_diff_eq!(sol.k[(0, 0)], oracle.k, epsilon = 1e-9);
        }
    }

    #[test]
    fn unconstrained_value_identity() {
        // simulate x+ = (A+BK)x and accumulate the stage cost: the total
        // must equal x0' P x0
        let (a, b, cost) = example1();
        let sol = solve_dare(&a, &b, &cost, 1e-13, 100_000).unwrap();
        let a_cl = sol.closed_loop(&a, &b);
        let seeds = [
            [0.013, -0.007],
            [-0.011, 0.004],
            [0.006, 0.009],
            [0.01, 0.01],
        ];
        for s in seeds {
            let x0 = DVector::from_column_slice(&s);
            let expected = (x0.transpose() * &sol.p * &x0)[(0, 0)];
            let mut x = x0.clone();
            let mut total = 0.0;
            for _ in 0..500 {
                let u = &sol.k * &x;
                total += cost.eval(&x, &u);
                x = &a_cl * &x;
            }
            assert!(
                (total - expected).abs() <= 1e-6 * (1.0 + expected),
                "value identity violated: {total} vs {expected}"
            );
        }
    }

    #[test]
    fn theta_min_is_definitional() {
        let (a, b, cost) = example1();
        let sol = solve_dare(&a, &b, &cost, 1e-12, 100_000).unwrap();
        let beta = 0.95;
        let theta = theta_min(&sol.p, &cost.r, &b, beta).unwrap();
        let direct = (b.transpose() * &sol.p * &b + &cost.r) / (1.0 - beta * beta);
        assert_abs_diff_eq!((&theta - &direct).amax(), 0.0, epsilon = 1e-12);
        // beta = 0 denominator is one
        let t0 = theta_min(&sol.p, &cost.r, &b, 0.0).unwrap();
        let base = b.transpose() * &sol.p * &b + &cost.r;
        assert_abs_diff_eq!((&t0 - &base).amax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn theta_min_rejects_beta_one() {
        let (a, b, cost) = example1();
        let sol = solve_dare(&a, &b, &cost, 1e-12, 100_000).unwrap();
        assert!(matches!(
            theta_min(&sol.p, &cost.r, &b, 1.0).unwrap_err(),
            RegulatorError::DegenerateBeta(_)
        ));
    }

    #[test]
    fn scalar_oracles_whole_line_marker() {
        // a < 1 and beta in [a, 1): the contractive set is the whole line
        let plant = ScalarPlant::new(0.8, 1.0).unwrap();
        let o = scalar_oracles(plant, 0.9);
        assert_eq!(o.m, ScalarSet::WholeLine);
        let o2 = scalar_oracles(plant, 0.5);
        assert_abs_diff_eq!(o2.m.radius().unwrap(), 1.0 / 0.3, epsilon = 1e-12);
    }

    #[test]
    fn beta_threshold_peaks_at_sqrt_two() {
        // maximum of 2a/(2 + a^2 + sqrt(a^4+4)) is 1/(1+sqrt 2) at a = sqrt 2
        let peak = scalar_oracles(ScalarPlant::new(2f64.sqrt(), 1.0).unwrap(), 0.5).beta_threshold;
        assert_abs_diff_eq!(peak, 1.0 / (1.0 + 2f64.sqrt()), epsilon = 1e-9);
        for &a in &[0.3, 0.7, 1.0, 1.2, 1.6, 2.0, 5.0] {
            let th = scalar_oracles(ScalarPlant::new(a, 1.0).unwrap(), 0.5).beta_threshold;
            assert!(th <= peak + 1e-12);
        }
    }

    #[test]
    fn c_n_strictly_increasing() {
        // c_{N+1} - c_N = (u_bar - (a-1) b(a)) / a^{N+1} > 0
        for &a in &[1.05, 1.1, 1.5] {
            let o = scalar_oracles(ScalarPlant::new(a, 1.0).unwrap(), 0.5);
            for n in 0..8 {
                let diff = o.c_n(n + 1) - o.c_n(n);
                let expected = (1.0 - (a - 1.0) * o.b) / a.powi(n as i32 + 1);
                assert!(diff > 0.0);
                assert_abs_diff_eq!(diff, expected, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn stage_cost_rejects_indefinite_r() {
        let q = DMatrix::identity(1, 1);
        let r = dm(&[&[0.0]]);
        assert!(matches!(
            StageCost::diagonal(q, r).unwrap_err(),
            RegulatorError::BadWeights(_)
        ));
    }
}

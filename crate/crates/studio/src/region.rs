//! Admissible-region estimation by per-direction feasibility bisection, and
//! the Hausdorff-style gap metrics used to compare regions against target
//! sets.

use nalgebra::DVector;
use rayon::prelude::*;
use thiserror::Error;

use ccmpc_core::mpc::{AssembledMpc, MpcError};
use ccmpc_core::polytope::{enumerate_vertices, HPolytope, PolytopeError, Support, VPolytope};

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("mpc failure: {0}")]
    Mpc(#[from] MpcError),
    #[error("polytope failure: {0}")]
    Polytope(#[from] PolytopeError),
    #[error("origin is not admissible")]
    OriginInfeasible,
}

/// Inner approximation of the admissible region by ray endpoints.
#[derive(Debug, Clone)]
pub struct RegionEstimate {
    pub directions: Vec<DVector<f64>>,
    pub radii: Vec<f64>,
    /// Hull of the ray endpoints.
    pub polytope: VPolytope,
    /// Bisection tolerance the radii are bracketed to.
    pub tol: f64,
}

/// Per-direction bisection on the scaling of `x0 = t d`: the returned radius
/// `t` is admissible while `t + 2 tol` is not (bracketing invariant).
pub fn estimate_region(
    assembled: &AssembledMpc,
    directions: &[DVector<f64>],
    tol: f64,
) -> Result<RegionEstimate, RegionError> {
    let origin = DVector::zeros(directions[0].len());
    if !assembled.is_feasible(&origin)? {
        return Err(RegionError::OriginInfeasible);
    }
    let radii: Result<Vec<f64>, RegionError> = directions
        .par_iter()
        .map(|d| {
            let feasible_at = |t: f64| -> Result<bool, RegionError> {
                Ok(assembled.is_feasible(&(d * t))?)
            };
            let mut lo = 0.0f64;
            let mut hi = 1.0f64;
            while feasible_at(hi)? {
                lo = hi;
                hi *= 2.0;
                if hi > 1e6 {
                    return Ok(f64::INFINITY);
                }
            }
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                if feasible_at(mid)? {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(lo)
        })
        .collect();
    let radii = radii?;
    let endpoints: Vec<DVector<f64>> = directions
        .iter()
        .zip(&radii)
        .filter(|(_, &r)| r.is_finite())
        .map(|(d, &r)| d * r)
        .collect();
    let polytope = VPolytope::new(endpoints).map_err(RegionError::Polytope)?;
    Ok(RegionEstimate {
        directions: directions.to_vec(),
        radii,
        polytope,
        tol,
    })
}

/// Hausdorff-style distance from a target polytope to the region estimate:
/// the worst infinity-norm distance from any vertex of `target` to the hull
/// of the region endpoints. Intended for 2-D targets with exact vertex
/// enumeration.
pub fn hausdorff_to_region(
    region: &RegionEstimate,
    target: &HPolytope,
) -> Result<f64, RegionError> {
    let verts = enumerate_vertices(target, 1e-7)?;
    let worst = verts
        .par_iter()
        .map(|z| region.polytope.distance_inf(z))
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))?;
    Ok(worst)
}

/// Radial gap metric for higher dimensions: the worst gap between the
/// support radius of the target along each direction and the admissible
/// radius along the same ray.
pub fn radial_gap(region: &RegionEstimate, target: &HPolytope) -> Result<f64, RegionError> {
    let mut worst = 0.0f64;
    for (d, &r) in region.directions.iter().zip(&region.radii) {
        let target_radius = ray_radius(target, d)?;
        if target_radius.is_finite() {
            worst = worst.max(target_radius - r);
        }
    }
    Ok(worst)
}

/// Largest `t` with `t d` inside a polytope: `min_i y_i / (f_i d)` over rows
/// with positive alignment.
pub fn ray_radius(p: &HPolytope, d: &DVector<f64>) -> Result<f64, RegionError> {
    let fd = &p.f * d;
    let mut best = f64::INFINITY;
    for (i, &v) in fd.iter().enumerate() {
        if v > 1e-14 {
            best = best.min(p.y[i] / v);
        }
    }
    Ok(best)
}

/// Support-based check that a polytope is bounded along every direction of
/// a list (used to guard radial comparisons).
pub fn all_bounded(p: &HPolytope, directions: &[DVector<f64>]) -> Result<bool, RegionError> {
    for d in directions {
        if matches!(p.support(d)?, Support::Unbounded) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Evenly spaced unit directions on the plane.
pub fn planar_directions(count: usize) -> Vec<DVector<f64>> {
    (0..count)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * (i as f64) / (count as f64);
            DVector::from_column_slice(&[angle.cos(), angle.sin()])
        })
        .collect()
}

/// Deterministic low-discrepancy directions on the unit sphere in `dim`
/// dimensions: an additive Kronecker sequence pushed through the inverse
/// normal CDF and normalised. Component scaling stretches the rays to match
/// anisotropic constraint boxes.
pub fn sphere_directions(dim: usize, count: usize, scale: &[f64]) -> Vec<DVector<f64>> {
    assert_eq!(scale.len(), dim);
    // generalised golden ratio for the additive recurrence
    let mut phi = 2.0f64;
    for _ in 0..32 {
        phi = (1.0 + phi).powf(1.0 / (dim as f64 + 1.0));
    }
    let alphas: Vec<f64> = (1..=dim).map(|k| (1.0 / phi.powi(k as i32)).fract()).collect();
    let mut dirs = Vec::with_capacity(count);
    let mut state = vec![0.5f64; dim];
    for _ in 0..count {
        for (s, a) in state.iter_mut().zip(&alphas) {
            *s = (*s + a).fract();
        }
        let mut d = DVector::zeros(dim);
        for j in 0..dim {
            d[j] = inverse_normal_cdf(state[j].clamp(1e-9, 1.0 - 1e-9)) * scale[j];
        }
        let nrm = d.norm();
        if nrm > 1e-12 {
            dirs.push(d / nrm);
        }
    }
    dirs
}

/// Acklam-style rational approximation, accurate to ~1e-9 which is far below
/// the angular resolution the direction sets need.
fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -inverse_normal_cdf(1.0 - p)
    }
}

//! Seeded sampling of polytope members, used to drive the certificate
//! suites (invariance, descent, membership implications).

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use ccmpc_core::polytope::{HPolytope, PolytopeError, Support};

/// Draw members of a bounded polytope as random convex combinations of
/// support points along random directions. Deterministic for a fixed seed.
pub fn sample_members(
    p: &HPolytope,
    count: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>, PolytopeError> {
    let n = p.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // support points spanning the set
    let mut anchors: Vec<DVector<f64>> = Vec::new();
    let anchor_count = (2 * n + 6).max(8);
    for _ in 0..anchor_count {
        let d = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        if d.norm() < 1e-9 {
            continue;
        }
        match p.support(&d)? {
            Support::Value { maximizer, .. } => anchors.push(maximizer),
            Support::Unbounded => return Err(PolytopeError::UnboundedTemplate),
        }
    }
    if anchors.is_empty() {
        return Err(PolytopeError::EmptySet);
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut weights: Vec<f64> = (0..anchors.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        let mut x = DVector::zeros(n);
        for (w, a) in weights.iter().zip(&anchors) {
            x += a * *w;
        }
        // shrink slightly toward the interior so membership probes are not
        // boundary-ambiguous
        out.push(x * rng.gen_range(0.2..0.999));
    }
    Ok(out)
}

/// Scalars for ray scaling drawn uniformly from `(lo, hi)`.
pub fn sample_scalars(count: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.gen_range(lo..hi)).collect()
}

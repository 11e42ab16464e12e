//! Template construction from the maximal contractive set of a 2-D plant.
//!
//! The recipe fans the contractive polygon into origin triangles, scores
//! each vertex by the area of its two adjacent triangles, keeps the `k`
//! best-scoring vertices and normalises the hull of those vertices so the
//! unit offset reproduces it. On the 2-D case study this yields a template
//! with `f = v = e = k`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use ccmpc_core::mpc::PlantSpec;
use ccmpc_core::polytope::{
    build_template, enumerate_vertices, max_contractive, CcTemplate, PolytopeError,
};

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("template recipe needs a 2-D plant, got {0} states")]
    NotPlanar(usize),
    #[error("contractive set has {found} vertices, fewer than the requested {requested} facets")]
    TooFewVertices { found: usize, requested: usize },
    #[error("polytope computation failed: {0}")]
    Polytope(#[from] PolytopeError),
}

/// Build the `k`-facet template seeded by the maximal `lambda`-contractive
/// set of the plant.
pub fn contractive_fan_template(
    plant: &PlantSpec,
    lambda: f64,
    k: usize,
) -> Result<CcTemplate, RecipeError> {
    if plant.nx() != 2 {
        return Err(RecipeError::NotPlanar(plant.nx()));
    }
    let contractive = max_contractive(
        &plant.a,
        &plant.b,
        &plant.x_set,
        &plant.u_set,
        lambda,
        1e-9,
        400,
    )?;
    let mut verts = enumerate_vertices(&contractive, 1e-7)?;
    if verts.len() < k {
        return Err(RecipeError::TooFewVertices {
            found: verts.len(),
            requested: k,
        });
    }
    // cyclic order around the origin
    verts.sort_by(|p, q| {
        p[1].atan2(p[0])
            .partial_cmp(&q[1].atan2(q[0]))
            .expect("finite angles")
    });
    let nv = verts.len();
    let fan_area = |i: usize| {
        let a = &verts[i];
        let b = &verts[(i + 1) % nv];
        0.5 * (a[0] * b[1] - a[1] * b[0]).abs()
    };
    // score a vertex by its two adjacent fan triangles
    let mut scored: Vec<(f64, usize)> = (0..nv)
        .map(|i| (fan_area((i + nv - 1) % nv) + fan_area(i), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite areas"));
    let mut chosen: Vec<usize> = scored.iter().take(k).map(|&(_, i)| i).collect();
    chosen.sort_unstable();
    let points: Vec<&DVector<f64>> = chosen.iter().map(|&i| &verts[i]).collect();

    // facet rows of the hull, normalised so the offset is one
    let hull = convex_hull_2d(&points);
    let mut rows = Vec::with_capacity(hull.len());
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let mut normal = DVector::from_column_slice(&[b[1] - a[1], a[0] - b[0]]);
        let c = normal.dot(a);
        if c < 0.0 {
            normal = -normal;
        }
        rows.push(normal / c.abs());
    }
    let mut f = DMatrix::zeros(rows.len(), 2);
    for (r, row) in rows.iter().enumerate() {
        f.row_mut(r).copy_from(&row.transpose());
    }
    let ones = DVector::from_element(f.nrows(), 1.0);
    Ok(build_template(f, &ones)?)
}

/// Monotone-chain convex hull, counter-clockwise without repetition.
fn convex_hull_2d<'a>(points: &[&'a DVector<f64>]) -> Vec<&'a DVector<f64>> {
    let mut pts: Vec<&DVector<f64>> = points.to_vec();
    pts.sort_by(|p, q| {
        (p[0], p[1])
            .partial_cmp(&(q[0], q[1]))
            .expect("finite coordinates")
    });
    let cross = |o: &DVector<f64>, a: &DVector<f64>, b: &DVector<f64>| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<&DVector<f64>> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 1e-12
        {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<&DVector<f64>> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 1e-12
        {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

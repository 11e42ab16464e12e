//! Problem-file schema: a single JSON object describing the plant, the
//! stage cost, the template source, the terminal weights and the experiment
//! parameters. Matrices are row-major lists of lists; all numbers are
//! finite decimals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use ccmpc_core::mpc::PlantSpec;
use ccmpc_core::polytope::{build_template, CcTemplate, HPolytope};
use ccmpc_core::regulator::{solve_dare, theta_min, RiccatiSolution, StageCost};
use ccmpc_core::terminal::TerminalDesign;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("field `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Build(String),
}

fn invalid(field: &'static str, message: impl Into<String>) -> ProblemError {
    ProblemError::Invalid {
        field,
        message: message.into(),
    }
}

/// Halfspace polytope as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolytopeFile {
    #[serde(rename = "F")]
    pub f: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

/// Template source: an explicit facet matrix, or the contractive-set recipe.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum TemplateSpec {
    Explicit {
        #[serde(rename = "F")]
        f: Vec<Vec<f64>>,
    },
    Recipe { lambda: f64, facets: usize },
}

/// Either an explicit matrix or a named default.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum WeightSpec {
    Named(String),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentSpec {
    /// Closed-loop horizon `M` (the suboptimality sum runs `t = 0..=M`).
    #[serde(rename = "M", default = "default_m")]
    pub m: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_directions")]
    pub directions: usize,
    #[serde(default)]
    pub seed: u64,
    /// Region bisection tolerance as a fraction of the constraint-box radius.
    #[serde(default = "default_bisect_tol")]
    pub bisect_tol: f64,
}

fn default_m() -> usize {
    50
}
fn default_samples() -> usize {
    500
}
fn default_directions() -> usize {
    360
}
fn default_bisect_tol() -> f64 {
    1e-4
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            m: default_m(),
            samples: default_samples(),
            directions: default_directions(),
            seed: 0,
            bisect_tol: default_bisect_tol(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProblemFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "X")]
    pub x: PolytopeFile,
    #[serde(rename = "U")]
    pub u: PolytopeFile,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "S", default)]
    pub s: Option<Vec<Vec<f64>>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    pub template: TemplateSpec,
    pub beta: f64,
    #[serde(default = "default_identity")]
    pub gamma: WeightSpec,
    #[serde(default = "default_theta_min")]
    pub theta: WeightSpec,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(default)]
    pub experiment: Option<ExperimentSpec>,
}

fn default_identity() -> WeightSpec {
    WeightSpec::Named("identity".into())
}

fn default_theta_min() -> WeightSpec {
    WeightSpec::Named("theta_min".into())
}

pub fn matrix_from_rows(field: &'static str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ProblemError> {
    if rows.is_empty() {
        return Ok(DMatrix::zeros(0, 0));
    }
    let ncols = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(invalid(field, format!("row {i} has {} entries, expected {ncols}", r.len())));
        }
        for &v in r {
            if !v.is_finite() {
                return Err(invalid(field, "matrix entries must be finite"));
            }
        }
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

pub fn rows_from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

fn polytope_from_file(field: &'static str, p: &PolytopeFile) -> Result<HPolytope, ProblemError> {
    let f = matrix_from_rows(field, &p.f)?;
    if p.y.len() != f.nrows() {
        return Err(invalid(
            field,
            format!("{} offsets for {} facet rows", p.y.len(), f.nrows()),
        ));
    }
    HPolytope::new(f, DVector::from_column_slice(&p.y))
        .map_err(|e| invalid(field, e.to_string()))
}

pub fn polytope_to_file(p: &HPolytope) -> PolytopeFile {
    PolytopeFile {
        f: rows_from_matrix(&p.f),
        y: p.y.iter().cloned().collect(),
    }
}

/// Everything a runner needs, decoded and cross-validated.
pub struct LoadedProblem {
    pub plant: PlantSpec,
    pub cost: StageCost,
    pub riccati: RiccatiSolution,
    pub template: CcTemplate,
    pub design: TerminalDesign,
    pub horizon: usize,
    pub experiment: ExperimentSpec,
    /// The canonical problem file (re-serialised for provenance).
    pub file: ProblemFile,
}

impl ProblemFile {
    pub fn from_path(path: &std::path::Path) -> Result<Self, ProblemError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load(
        &self,
        recipe: impl FnOnce(&PlantSpec, f64, usize) -> Result<CcTemplate, ProblemError>,
    ) -> Result<LoadedProblem, ProblemError> {
        let a = matrix_from_rows("A", &self.a)?;
        let b = matrix_from_rows("B", &self.b)?;
        let nx = a.nrows();
        if a.ncols() != nx {
            return Err(invalid("A", "must be square"));
        }
        if b.nrows() != nx {
            return Err(invalid("B", format!("has {} rows for {} states", b.nrows(), nx)));
        }
        let nu = b.ncols();
        let x_set = polytope_from_file("X", &self.x)?;
        let u_set = polytope_from_file("U", &self.u)?;
        if x_set.dim() != nx {
            return Err(invalid("X", format!("dimension {} vs {} states", x_set.dim(), nx)));
        }
        if u_set.dim() != nu {
            return Err(invalid("U", format!("dimension {} vs {} inputs", u_set.dim(), nu)));
        }
        let q = matrix_from_rows("Q", &self.q)?;
        let r = matrix_from_rows("R", &self.r)?;
        let s = match &self.s {
            Some(rows) => matrix_from_rows("S", rows)?,
            None => DMatrix::zeros(nx, nu),
        };
        if q.nrows() != nx || q.ncols() != nx {
            return Err(invalid("Q", format!("is {}x{}, expected {nx}x{nx}", q.nrows(), q.ncols())));
        }
        if r.nrows() != nu || r.ncols() != nu {
            return Err(invalid("R", format!("is {}x{}, expected {nu}x{nu}", r.nrows(), r.ncols())));
        }
        if s.nrows() != nx || s.ncols() != nu {
            return Err(invalid("S", format!("is {}x{}, expected {nx}x{nu}", s.nrows(), s.ncols())));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid("beta", format!("{} outside [0, 1]", self.beta)));
        }
        if self.n == 0 {
            return Err(invalid("N", "horizon must be positive"));
        }
        let cost = StageCost::new(q, s, r).map_err(|e| invalid("Q", e.to_string()))?;
        let plant = PlantSpec::new(a.clone(), b.clone(), x_set.clone(), u_set.clone())
            .map_err(|e| invalid("A", e.to_string()))?;
        let riccati =
            solve_dare(&a, &b, &cost, 1e-12, 200_000).map_err(|e| ProblemError::Build(e.to_string()))?;

        let template = match &self.template {
            TemplateSpec::Explicit { f } => {
                let fmat = matrix_from_rows("template.F", f)?;
                if fmat.ncols() != nx {
                    return Err(invalid("template.F", format!("{} columns for {nx} states", fmat.ncols())));
                }
                let ones = DVector::from_element(fmat.nrows(), 1.0);
                build_template(fmat, &ones).map_err(|e| ProblemError::Build(e.to_string()))?
            }
            TemplateSpec::Recipe { lambda, facets } => {
                if !(0.0 < *lambda && *lambda <= 1.0) {
                    return Err(invalid("template.lambda", format!("{lambda} outside (0, 1]")));
                }
                recipe(&plant, *lambda, *facets)?
            }
        };

        let gamma = match &self.gamma {
            WeightSpec::Named(name) if name == "identity" => {
                DMatrix::identity(template.num_facets(), template.num_facets())
            }
            WeightSpec::Named(other) => {
                return Err(invalid("gamma", format!("unknown name `{other}`")))
            }
            WeightSpec::Matrix(rows) => matrix_from_rows("gamma", rows)?,
        };
        let theta = match &self.theta {
            WeightSpec::Named(name) if name == "theta_min" => {
                theta_min(&riccati.p, &cost.r, &b, self.beta)
                    .map_err(|e| invalid("theta", e.to_string()))?
            }
            WeightSpec::Named(other) => {
                return Err(invalid("theta", format!("unknown name `{other}`")))
            }
            WeightSpec::Matrix(rows) => matrix_from_rows("theta", rows)?,
        };

        let design = TerminalDesign::new(
            template.clone(),
            self.beta,
            gamma,
            theta,
            riccati.k.clone(),
            riccati.p.clone(),
            a,
            b,
            x_set,
            u_set,
        )
        .map_err(|e| ProblemError::Build(e.to_string()))?;

        Ok(LoadedProblem {
            plant,
            cost,
            riccati,
            template,
            design,
            horizon: self.n,
            experiment: self.experiment.clone().unwrap_or_default(),
            file: self.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json() -> String {
        r#"{
            "A": [[1.1, 2.0], [0.0, 0.95]],
            "B": [[0.0], [0.0787]],
            "X": {"F": [[1,0],[0,1],[-1,0],[0,-1]], "y": [8,8,8,8]},
            "U": {"F": [[1],[-1]], "y": [1,1]},
            "Q": [[100,0],[0,100]],
            "R": [[1]],
            "template": {"lambda": 0.95, "facets": 6},
            "beta": 0.95,
            "gamma": "identity",
            "theta": "theta_min",
            "N": 5,
            "experiment": {"M": 50, "seed": 42}
        }"#
        .into()
    }

    #[test]
    fn round_trip_is_stable() {
        let parsed: ProblemFile = serde_json::from_str(&sample_json()).unwrap();
        let text = serde_json::to_string_pretty(&parsed).unwrap();
        let reparsed: ProblemFile = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, reparsed);
        let text2 = serde_json::to_string_pretty(&reparsed).unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn validation_names_offending_field() {
        let mut parsed: ProblemFile = serde_json::from_str(&sample_json()).unwrap();
        parsed.q = vec![vec![1.0, 0.0]];
        let err = parsed
            .load(|_, _, _| unreachable!("template recipe not needed"))
            .unwrap_err();
        match err {
            ProblemError::Invalid { field, .. } => assert_eq!(field, "Q"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn explicit_template_bypasses_recipe() {
        let mut parsed: ProblemFile = serde_json::from_str(&sample_json()).unwrap();
        parsed.template = TemplateSpec::Explicit {
            f: vec![
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![-1.0, 0.0],
                vec![0.0, -1.0],
            ],
        };
        let loaded = parsed
            .load(|_, _, _| panic!("recipe must not run for explicit templates"))
            .unwrap();
        assert_eq!(loaded.template.num_facets(), 4);
        assert_eq!(loaded.template.num_vertices(), 4);
    }
}

//! Textual problem description (TOML) and its conversion to a
//! [`SweepingProblem`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{HalfspaceRow, MovingPolyhedron};
use crate::sweeping::SweepingProblem;

/// Text of the bundled benchmark problem.
pub const EXAMPLE_SPEC: &str = include_str!("../specs/example61.spec");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("polyhedron row {row}: normal has zero length")]
    ZeroNormal { row: usize },
    #[error("invalid problem: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub n: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyhedronSection {
    pub rows: Vec<HalfspaceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dynamics {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    /// Optional Lipschitz bound used by the velocity-cap check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Controls {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cost {
    #[serde(rename = "wT")]
    pub w_t: f64,
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    pub xref: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    #[serde(rename = "E")]
    pub e_matrix: Vec<Vec<f64>>,
    pub e: Vec<f64>,
    #[serde(rename = "T_interval", with = "bounds")]
    pub t_interval: [f64; 2],
}

/// Interval bounds that may be infinite. JSON has no infinity, so infinite
/// bounds are written as `"inf"` / `"-inf"`; numbers and those strings are
/// both accepted on input.
mod bounds {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Bound {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64; 2], s: S) -> Result<S::Ok, S::Error> {
        let out = v.map(|x| match x {
            f64::INFINITY => Bound::Text("inf".into()),
            f64::NEG_INFINITY => Bound::Text("-inf".into()),
            x => Bound::Number(x),
        });
        out.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 2], D::Error> {
        let [a, b] = <[Bound; 2]>::deserialize(d)?;
        let num = |x: Bound| match x {
            Bound::Number(v) => Ok(v),
            Bound::Text(t) => match t.trim() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
                other => Err(D::Error::custom(format!(
                    "expected a number or \"inf\", got {other:?}"
                ))),
            },
        };
        Ok([num(a)?, num(b)?])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Init {
    pub x0: Vec<f64>,
}

/// The document as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpecFile {
    pub meta: Meta,
    pub dims: Dims,
    pub polyhedron: PolyhedronSection,
    pub dynamics: Dynamics,
    pub controls: Controls,
    pub cost: Cost,
    pub endpoint: Endpoint,
    pub init: Init,
}

/// A parsed spec with its problem and any warnings raised while loading.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSpec {
    pub file: ProblemSpecFile,
    pub problem: SweepingProblem,
    pub warnings: Vec<String>,
}

impl LoadedSpec {
    /// Overwrite the first tracking target, as the benchmark's `α`.
    pub fn set_alpha(&mut self, alpha: f64) {
        self.problem.phi_xref[0] = alpha;
        self.file.cost.xref[0] = alpha;
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

fn matrix(
    rows: &[Vec<f64>],
    nrows: usize,
    ncols: usize,
    what: &str,
) -> Result<DMatrix<f64>, SpecError> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(SpecError::Invalid(format!(
            "{what} must be {nrows}x{ncols}"
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn vector(v: &[f64], len: usize, what: &str) -> Result<DVector<f64>, SpecError> {
    if v.len() != len {
        return Err(SpecError::Invalid(format!("{what} must have length {len}")));
    }
    Ok(DVector::from_column_slice(v))
}

/// Parse and validate a spec document.
pub fn parse_spec(text: &str) -> Result<LoadedSpec, SpecError> {
    let file: ProblemSpecFile = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_column(text, s.start));
        SpecError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    let (problem, warnings) = build_problem(&file)?;
    Ok(LoadedSpec {
        file,
        problem,
        warnings,
    })
}

/// Read and parse a spec file.
pub fn load_spec(path: &std::path::Path) -> Result<LoadedSpec, SpecError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SpecError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    parse_spec(&text)
}

/// The bundled benchmark problem.
pub fn example_spec() -> LoadedSpec {
    parse_spec(EXAMPLE_SPEC).expect("bundled spec parses")
}

fn build_problem(f: &ProblemSpecFile) -> Result<(SweepingProblem, Vec<String>), SpecError> {
    let (n, d) = (f.dims.n, f.dims.d);
    if n == 0 || d == 0 {
        return Err(SpecError::Invalid(
            "dims.n and dims.d must be positive".into(),
        ));
    }
    let mut warnings = Vec::new();
    for (j, row) in f.polyhedron.rows.iter().enumerate() {
        if row.normal.len() != n {
            return Err(SpecError::Invalid(format!(
                "polyhedron row {}: normal must have length {n}",
                j + 1
            )));
        }
        let norm = row.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(SpecError::ZeroNormal { row: j + 1 });
        }
        if (norm - 1.0).abs() > 1e-9 {
            warnings.push(format!(
                "polyhedron row {}: normal of length {norm} rescaled to unit length",
                j + 1
            ));
        }
    }
    // Rows already unit within rounding are kept bit-for-bit so that emitted
    // specs load back unchanged.
    let rows = f
        .polyhedron
        .rows
        .iter()
        .map(|row| {
            let norm = row.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() <= 1e-12 {
                row.clone()
            } else {
                HalfspaceRow {
                    normal: row.normal.iter().map(|v| v / norm).collect(),
                    offset0: row.offset0 / norm,
                    offset_slope: row.offset_slope / norm,
                }
            }
        })
        .collect();
    let polyhedron =
        MovingPolyhedron::new(n, rows).map_err(|e| SpecError::Invalid(e.to_string()))?;
    let r = f.endpoint.e_matrix.len();
    let [t_lo, t_hi] = f.endpoint.t_interval;
    let problem = SweepingProblem {
        polyhedron,
        g_a: matrix(&f.dynamics.a, n, n, "dynamics.A")?,
        g_b: matrix(&f.dynamics.b, n, d, "dynamics.B")?,
        g_c: vector(&f.dynamics.c, n, "dynamics.c")?,
        u_lo: vector(&f.controls.lo, d, "controls.lo")?,
        u_hi: vector(&f.controls.hi, d, "controls.hi")?,
        x0: vector(&f.init.x0, n, "init.x0")?,
        phi_wt: f.cost.w_t,
        phi_w: vector(&f.cost.w, n, "cost.W")?,
        phi_xref: vector(&f.cost.xref, n, "cost.xref")?,
        omega_x_e: matrix(&f.endpoint.e_matrix, r, n, "endpoint.E")?,
        omega_x_rhs: vector(&f.endpoint.e, r, "endpoint.e")?,
        omega_t: (t_lo, t_hi),
        lipschitz: f.dynamics.lipschitz,
    };
    problem
        .validate()
        .map_err(|e| SpecError::Invalid(e.to_string()))?;
    Ok((problem, warnings))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Document describing `p`.
pub fn spec_from_problem(name: &str, p: &SweepingProblem) -> ProblemSpecFile {
    ProblemSpecFile {
        meta: Meta {
            name: name.to_string(),
        },
        dims: Dims { n: p.n(), d: p.d() },
        polyhedron: PolyhedronSection {
            rows: p.polyhedron.rows().to_vec(),
        },
        dynamics: Dynamics {
            a: rows_of(&p.g_a),
            b: rows_of(&p.g_b),
            c: p.g_c.iter().copied().collect(),
            lipschitz: p.lipschitz,
        },
        controls: Controls {
            lo: p.u_lo.iter().copied().collect(),
            hi: p.u_hi.iter().copied().collect(),
        },
        cost: Cost {
            w_t: p.phi_wt,
            w: p.phi_w.iter().copied().collect(),
            xref: p.phi_xref.iter().copied().collect(),
        },
        endpoint: Endpoint {
            e_matrix: rows_of(&p.omega_x_e),
            e: p.omega_x_rhs.iter().copied().collect(),
            t_interval: [p.omega_t.0, p.omega_t.1],
        },
        init: Init {
            x0: p.x0.iter().copied().collect(),
        },
    }
}

/// Serialize a spec document.
pub fn emit_spec(file: &ProblemSpecFile) -> String {
    toml::to_string(file).expect("spec documents serialize")
}

//! Moving polyhedra `C(t) = {x : ⟨a_j, x⟩ ≤ c_j(t)}` with constant unit normals
//! and affine offsets, plus the cone operations the integrator and the
//! certificate checker need.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::qp::{project_polyhedron, QpFailure};

/// Errors raised by geometric operations. Row indices are zero-based.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("point violates row {row} by {violation:e}")]
    InfeasiblePoint { row: usize, violation: f64 },
    #[error("constraint system is empty at t = {t}")]
    EmptySet { t: f64 },
    #[error("no strictly interior point (best margin {margin:e})")]
    NotFound { margin: f64 },
    #[error("projection failed to converge at t = {t}")]
    NoConvergence { t: f64 },
    #[error("invalid polyhedron: {0}")]
    Invalid(String),
}

/// One constraint row `⟨normal, x⟩ ≤ offset0 + offset_slope·t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfspaceRow {
    pub normal: Vec<f64>,
    pub offset0: f64,
    pub offset_slope: f64,
}

impl HalfspaceRow {
    pub fn offset(&self, t: f64) -> f64 {
        self.offset0 + self.offset_slope * t
    }
}

/// Polyhedron with time-independent unit normals and affine offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingPolyhedron {
    dim: usize,
    rows: Vec<HalfspaceRow>,
    normals: DMatrix<f64>,
}

/// Sorted zero-based indices of active rows together with the tolerance used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveIndexSet {
    pub indices: Vec<usize>,
    pub tolerance: f64,
}

impl ActiveIndexSet {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
    pub fn len(&self) -> usize {
        self.indices.len()
    }
    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }
}

/// Nonnegative coefficients on all rows (zero off the active set) and the
/// distance from the target vector to the active normal cone.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalDecomposition {
    pub coefficients: DVector<f64>,
    pub residual: f64,
}

/// A strictly interior point and its smallest slack.
#[derive(Debug, Clone, PartialEq)]
pub struct SlaterPoint {
    pub point: DVector<f64>,
    pub margin: f64,
}

/// Default activity tolerance `1e-8·(1+‖x‖)`.
pub fn default_tolerance(x: &DVector<f64>) -> f64 {
    1e-8 * (1.0 + x.norm())
}

impl MovingPolyhedron {
    /// Build from rows whose normals already have unit length (within 1e-12).
    pub fn new(dim: usize, rows: Vec<HalfspaceRow>) -> Result<Self, GeometryError> {
        if dim == 0 {
            return Err(GeometryError::Invalid("dimension must be positive".into()));
        }
        if rows.is_empty() {
            return Err(GeometryError::Invalid(
                "at least one row is required".into(),
            ));
        }
        let mut normals = DMatrix::zeros(rows.len(), dim);
        for (j, row) in rows.iter().enumerate() {
            if row.normal.len() != dim {
                return Err(GeometryError::DimensionMismatch {
                    expected: dim,
                    got: row.normal.len(),
                });
            }
            if !row.normal.iter().all(|v| v.is_finite())
                || !row.offset0.is_finite()
                || !row.offset_slope.is_finite()
            {
                return Err(GeometryError::Invalid(format!(
                    "row {j} has non-finite data"
                )));
            }
            let norm = row.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(GeometryError::Invalid(format!(
                    "row {j} normal has norm {norm}, expected 1"
                )));
            }
            for (c, v) in row.normal.iter().enumerate() {
                normals[(j, c)] = *v;
            }
        }
        Ok(Self { dim, rows, normals })
    }

    /// Rescale every normal (and its offsets) to unit length before building.
    /// Returns the polyhedron and, per row, the original normal length.
    pub fn normalized(
        dim: usize,
        rows: Vec<HalfspaceRow>,
    ) -> Result<(Self, Vec<f64>), GeometryError> {
        let mut lengths = Vec::with_capacity(rows.len());
        let mut scaled = Vec::with_capacity(rows.len());
        for (j, row) in rows.into_iter().enumerate() {
            let norm = row.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(GeometryError::Invalid(format!(
                    "row {j} normal has zero or non-finite length"
                )));
            }
            lengths.push(norm);
            scaled.push(HalfspaceRow {
                normal: row.normal.iter().map(|v| v / norm).collect(),
                offset0: row.offset0 / norm,
                offset_slope: row.offset_slope / norm,
            });
        }
        Ok((Self::new(dim, scaled)?, lengths))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[HalfspaceRow] {
        &self.rows
    }

    /// Normals stacked as rows (`s × n`).
    pub fn normal_matrix(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn normal(&self, j: usize) -> DVector<f64> {
        self.normals.row(j).transpose()
    }

    pub fn offsets(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.offset(t)))
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<(), GeometryError> {
        if x.len() != self.dim {
            return Err(GeometryError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `r_j = ⟨a_j, x⟩ − c_j(t)`.
    pub fn eval_constraints(
        &self,
        t: f64,
        x: &DVector<f64>,
    ) -> Result<DVector<f64>, GeometryError> {
        self.check_dim(x)?;
        Ok(&self.normals * x - self.offsets(t))
    }

    /// Rows with `|r_j| ≤ tol`. Fails if some `r_j > tol`.
    pub fn active_set(
        &self,
        t: f64,
        x: &DVector<f64>,
        tol: f64,
    ) -> Result<ActiveIndexSet, GeometryError> {
        let r = self.eval_constraints(t, x)?;
        let mut indices = Vec::new();
        for (j, &rj) in r.iter().enumerate() {
            if rj > tol {
                return Err(GeometryError::InfeasiblePoint {
                    row: j,
                    violation: rj,
                });
            }
            if rj.abs() <= tol {
                indices.push(j);
            }
        }
        Ok(ActiveIndexSet {
            indices,
            tolerance: tol,
        })
    }

    /// Active set with the default tolerance.
    pub fn active_set_default(
        &self,
        t: f64,
        x: &DVector<f64>,
    ) -> Result<ActiveIndexSet, GeometryError> {
        self.active_set(t, x, default_tolerance(x))
    }

    /// Nearest point of `C(t)` to `z`.
    pub fn project(&self, t: f64, z: &DVector<f64>) -> Result<DVector<f64>, GeometryError> {
        self.check_dim(z)?;
        let b = self.offsets(t);
        // Cheap exit for points already inside, the common case when integrating.
        let r = &self.normals * z - &b;
        if r.iter().all(|&v| v <= 0.0) {
            return Ok(z.clone());
        }
        // One violated row whose halfspace projection lands inside C(t) is
        // the answer, since C(t) lies in that halfspace.
        let mut violated = (0..r.len()).filter(|&j| r[j] > 0.0);
        if let (Some(j), None) = (violated.next(), violated.next()) {
            let x = z - self.normals.row(j).transpose() * r[j];
            let rx = &self.normals * &x - &b;
            if rx.iter().enumerate().all(|(i, &v)| i == j || v <= 0.0) {
                return Ok(x);
            }
        }
        match project_polyhedron(&self.normals, &b, z) {
            Ok(p) => Ok(p.x),
            Err(QpFailure::Infeasible) => Err(GeometryError::EmptySet { t }),
            Err(QpFailure::NoConvergence) => Err(GeometryError::NoConvergence { t }),
        }
    }

    fn active_rows(&self, active: &ActiveIndexSet) -> DMatrix<f64> {
        self.normals.select_rows(&active.indices)
    }

    /// Projection of `v` onto the tangent cone `T(x; C(t))`.
    pub fn tangent_project(
        &self,
        t: f64,
        x: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>, GeometryError> {
        self.check_dim(v)?;
        let active = self.active_set_default(t, x)?;
        if active.is_empty() {
            return Ok(v.clone());
        }
        let a = self.active_rows(&active);
        let b = DVector::zeros(a.nrows());
        match project_polyhedron(&a, &b, v) {
            Ok(p) => Ok(p.x),
            Err(_) => Err(GeometryError::NoConvergence { t }),
        }
    }

    /// Write `w` as a nonnegative combination of the normals active at `(t, x)`.
    pub fn normal_decompose(
        &self,
        t: f64,
        x: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<NormalDecomposition, GeometryError> {
        let active = self.active_set_default(t, x)?;
        self.normal_decompose_on(&active, w)
    }

    /// Same as [`Self::normal_decompose`] with a precomputed active set.
    pub fn normal_decompose_on(
        &self,
        active: &ActiveIndexSet,
        w: &DVector<f64>,
    ) -> Result<NormalDecomposition, GeometryError> {
        self.check_dim(w)?;
        let mut coefficients = DVector::zeros(self.num_rows());
        if active.is_empty() {
            return Ok(NormalDecomposition {
                coefficients,
                residual: w.norm(),
            });
        }
        let gens = self.active_rows(active).transpose();
        let sol = linalg::nnls(&gens, w);
        for (c, &j) in active.indices.iter().enumerate() {
            coefficients[j] = sol.x[c];
        }
        Ok(NormalDecomposition {
            coefficients,
            residual: sol.residual,
        })
    }

    /// Positive linear independence of the active normals.
    pub fn check_plicq(&self, t: f64, x: &DVector<f64>) -> Result<bool, GeometryError> {
        let active = self.active_set_default(t, x)?;
        if active.is_empty() {
            return Ok(true);
        }
        // min over λ ≥ 0 of ‖Aᵀλ‖² + (Σλ − 1)² vanishes iff a positive
        // combination of the active normals is zero.
        let q = active.len();
        let mut m = DMatrix::zeros(self.dim + 1, q);
        for (c, &j) in active.indices.iter().enumerate() {
            for r in 0..self.dim {
                m[(r, c)] = self.normals[(j, r)];
            }
            m[(self.dim, c)] = 1.0;
        }
        let mut rhs = DVector::zeros(self.dim + 1);
        rhs[self.dim] = 1.0;
        Ok(linalg::nnls(&m, &rhs).residual > 1e-9)
    }

    /// Linear independence of the active normals.
    pub fn check_licq(&self, t: f64, x: &DVector<f64>) -> Result<bool, GeometryError> {
        let active = self.active_set_default(t, x)?;
        Ok(self.licq_on(&active))
    }

    pub(crate) fn licq_on(&self, active: &ActiveIndexSet) -> bool {
        active.is_empty() || linalg::rank(&self.active_rows(active)) == active.len()
    }

    /// Smallest slack `min_j (c_j(t) − ⟨a_j, x⟩)`.
    pub fn margin(&self, t: f64, x: &DVector<f64>) -> f64 {
        (self.offsets(t) - &self.normals * x).min()
    }

    /// A point with every constraint strictly slack.
    ///
    /// With at most `n` linearly independent rows the point
    /// `Aᵀ(AAᵀ)⁻¹(c − 1)` has every slack equal to one. Otherwise a max-margin
    /// linear program decides.
    pub fn slater_point(&self, t: f64) -> Result<SlaterPoint, GeometryError> {
        let s = self.num_rows();
        let c = self.offsets(t);
        if s <= self.dim && linalg::rank(&self.normals) == s {
            let gram = &self.normals * self.normals.transpose();
            let shifted = c.map(|v| v - 1.0);
            if let Some(ch) = gram.cholesky() {
                let point = self.normals.transpose() * ch.solve(&shifted);
                let margin = self.margin(t, &point);
                return Ok(SlaterPoint { point, margin });
            }
        }
        self.slater_lp(t)
    }

    fn slater_lp(&self, t: f64) -> Result<SlaterPoint, GeometryError> {
        use minilp::{ComparisonOp, OptimizationDirection, Problem};
        let c = self.offsets(t);
        let mut lp = Problem::new(OptimizationDirection::Maximize);
        let xs: Vec<_> = (0..self.dim)
            .map(|_| lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY)))
            .collect();
        let m = lp.add_var(1.0, (f64::NEG_INFINITY, 1.0));
        for j in 0..self.num_rows() {
            let mut expr: Vec<(minilp::Variable, f64)> = xs
                .iter()
                .enumerate()
                .map(|(r, &v)| (v, self.normals[(j, r)]))
                .collect();
            expr.push((m, 1.0));
            lp.add_constraint(expr.as_slice(), ComparisonOp::Le, c[j]);
        }
        match lp.solve() {
            Ok(sol) => {
                let point = DVector::from_iterator(self.dim, xs.iter().map(|&v| sol[v]));
                let margin = self.margin(t, &point);
                if margin > 1e-12 {
                    Ok(SlaterPoint { point, margin })
                } else {
                    Err(GeometryError::NotFound { margin })
                }
            }
            Err(minilp::Error::Infeasible) => Err(GeometryError::NotFound {
                margin: f64::NEG_INFINITY,
            }),
            Err(minilp::Error::Unbounded) => Err(GeometryError::Invalid(
                "max-margin program unbounded".into(),
            )),
        }
    }
}

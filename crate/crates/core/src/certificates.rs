//! Discrete dual variables for a candidate trajectory and a checker for the
//! necessary optimality conditions they must satisfy.
//!
//! The adjoint follows the catching-up scheme actually used by the
//! integrator: the normal-cone multiplier `η_i` of cell `i` lives at the right
//! node `x_{i+1}`, so the adjoint is projected onto the tangent subspace of
//! the rows carrying `η_i` when it crosses that node. The projection at the
//! final node is kept separately as `atom`. Everything is affine in the
//! endpoint multipliers, which are chosen as the minimal-norm vector
//! satisfying the free-time condition and the control maximization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, MovingPolyhedron};
use crate::linalg;
use crate::problem::{
    merged_pieces, phi_gradient, reference_values, DiscretizationConfig, ProblemError,
};
use crate::qp::project_polyhedron;
use crate::sweeping::{lenient_active, DiscreteTrajectory, SweepError, SweepingProblem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CertificateError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("active normals at step {step} are linearly dependent")]
    SingularAdjointStep { step: usize },
    #[error("active normals are linearly dependent; domain check unavailable")]
    LicqViolated,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Sweep(#[from] SweepError),
}

/// Dual variables attached to a discrete trajectory with `k` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierBundle {
    pub mu0: f64,
    /// Adjoint `p_0..p_k`; `p_k` is the value before the final-node jump.
    pub p: Vec<DVector<f64>>,
    /// Per-step constraint multipliers `γ_i`, one entry per row.
    pub gamma: Vec<DVector<f64>>,
    /// Jump of the adjoint at the final node, `p_k⁻ = p_k − Σ atom_j a_j`.
    pub atom: DVector<f64>,
    pub psi: Vec<DVector<f64>>,
    /// Endpoint multipliers on the rows of `C(T)`.
    pub eta_t: DVector<f64>,
    /// Coefficients on the rows of `E x = e`.
    pub lambda_t: DVector<f64>,
    /// Normal to the horizon set at `T`.
    pub nu_t: f64,
    pub q: Vec<DVector<f64>>,
    pub hbar: f64,
    pub rho_k: f64,
    /// Reference horizon `T̄` (the candidate horizon when self-referenced).
    pub t_ref: f64,
    pub xi_u: Vec<DVector<f64>>,
    pub xi_y: Vec<DVector<f64>>,
}

impl MultiplierBundle {
    /// The trivial bundle shaped for `traj`.
    pub fn zeros(p: &SweepingProblem, traj: &DiscreteTrajectory) -> Self {
        let (n, d, s, k) = (p.n(), p.d(), p.s(), traj.k());
        Self {
            mu0: 0.0,
            p: vec![DVector::zeros(n); k + 1],
            gamma: vec![DVector::zeros(s); k],
            atom: DVector::zeros(s),
            psi: vec![DVector::zeros(d); k],
            eta_t: DVector::zeros(s),
            lambda_t: DVector::zeros(p.omega_x_e.nrows()),
            nu_t: 0.0,
            q: vec![DVector::zeros(n); k + 1],
            hbar: 0.0,
            rho_k: 0.0,
            t_ref: traj.horizon,
            xi_u: vec![DVector::zeros(d); k],
            xi_y: vec![DVector::zeros(n); k],
        }
    }

    /// `p_k` after the final-node jump.
    pub fn p_final_minus(&self, c: &MovingPolyhedron) -> DVector<f64> {
        self.p.last().unwrap() - c.normal_matrix().tr_mul(&self.atom)
    }

    /// `p_{i+1}` as seen from step `i`: the jumped value on the last step.
    fn p_after(&self, c: &MovingPolyhedron, i: usize) -> DVector<f64> {
        if i + 1 == self.p.len() - 1 {
            self.p_final_minus(c)
        } else {
            self.p[i + 1].clone()
        }
    }

    /// `Λ_i = p_{i+1} − 2μ0 ξ_{iy}/h`, the direction paired with step `i`.
    pub fn lambda(&self, c: &MovingPolyhedron, i: usize, h: f64) -> DVector<f64> {
        self.p_after(c, i) - &self.xi_y[i] * (2.0 * self.mu0 / h)
    }

    fn check_shape(
        &self,
        p: &SweepingProblem,
        traj: &DiscreteTrajectory,
    ) -> Result<(), CertificateError> {
        let (n, d, s, k) = (p.n(), p.d(), p.s(), traj.k());
        let ok = self.p.len() == k + 1
            && self.q.len() == k + 1
            && self.gamma.len() == k
            && self.psi.len() == k
            && self.xi_u.len() == k
            && self.xi_y.len() == k
            && self
                .p
                .iter()
                .chain(&self.q)
                .chain(&self.xi_y)
                .all(|v| v.len() == n)
            && self.gamma.iter().all(|v| v.len() == s)
            && self.psi.iter().chain(&self.xi_u).all(|v| v.len() == d)
            && self.atom.len() == s
            && self.eta_t.len() == s
            && self.lambda_t.len() == p.omega_x_e.nrows();
        if ok {
            Ok(())
        } else {
            Err(CertificateError::Shape(format!(
                "bundle does not match a trajectory with k = {k}, n = {n}, d = {d}, s = {s}"
            )))
        }
    }
}

/// Residuals and verdicts of every optimality condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    /// Adjoint equation and control slot, worst step.
    pub stationarity_resid: f64,
    /// Normal-cone decomposition of each step, worst step.
    pub dynamics_resid: f64,
    /// Endpoint condition on `p_k`.
    pub transversality_resid: f64,
    pub complementarity_ok: bool,
    pub sign_ok: bool,
    /// Largest duality gap of the control maximization, per unit time.
    pub maximization_resid: f64,
    /// `μ0 + ‖η_T‖ + Σ_{i<k} ‖p_i‖ + ‖ψ‖`.
    pub nontriviality_norm: f64,
    /// `μ0 + ‖η_T‖ + ‖p_0‖ + ‖ψ‖`.
    pub enhanced_nontriviality_norm: f64,
    pub support_ok: bool,
    /// Distance of the free-time condition from the normal cone of the horizon set.
    pub hbar_minus_mu: f64,
    pub tolerance: f64,
    /// Names of the failed conditions, empty when certified.
    pub violations: Vec<String>,
}

impl CertificateReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Outcome of testing a vector against the coderivative upper estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct CoderivativeCheck {
    /// Distance of the state slot from the span/cone of the active normals.
    pub x_residual: f64,
    /// Norm of the control-slot mismatch; the estimate requires it to vanish.
    pub u_residual: f64,
    /// Domain membership of `y`, when requested.
    pub domain_ok: Option<bool>,
}

fn direction_tolerance(y: &DVector<f64>) -> f64 {
    1e-8 * (1.0 + y.norm())
}

/// Threshold below which a multiplier entry counts as zero.
fn support_tolerance(v: &DVector<f64>) -> f64 {
    1e-8 * (1.0 + v.amax())
}

/// Active rows at `(t, x)` split by the sign of `⟨a_j, y⟩`: zero or positive.
pub fn index_sets(
    c: &MovingPolyhedron,
    t: f64,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(Vec<usize>, Vec<usize>), GeometryError> {
    let active = c.active_set_default(t, x)?;
    if y.len() != c.dim() {
        return Err(GeometryError::DimensionMismatch {
            expected: c.dim(),
            got: y.len(),
        });
    }
    let tol = direction_tolerance(y);
    let (mut zero, mut positive) = (Vec::new(), Vec::new());
    for &j in &active.indices {
        let v = c.normal(j).dot(y);
        if v.abs() <= tol {
            zero.push(j);
        } else if v > tol {
            positive.push(j);
        }
    }
    Ok((zero, positive))
}

/// Test `z = (z_x, z_u)` against the coderivative estimate of the map
/// `(x, u) ↦ N(x; C(t)) − g(x, u)` at `(x, u, w)` in direction `y`.
#[allow(clippy::too_many_arguments)]
pub fn coderivative_membership(
    p: &SweepingProblem,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
    check_domain: bool,
) -> Result<CoderivativeCheck, CertificateError> {
    let (n, d) = (p.n(), p.d());
    if z.len() != n + d || u.len() != d || w.len() != n {
        return Err(CertificateError::Shape(
            "coderivative arguments do not match the problem".into(),
        ));
    }
    let c = &p.polyhedron;
    let (zero, positive) = index_sets(c, t, x, y)?;
    let zx = z.rows(0, n).into_owned() + p.g_a.tr_mul(y);
    let zu = z.rows(n, d).into_owned() + p.g_b.tr_mul(y);
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for &j in &zero {
        cols.push(c.normal(j));
        cols.push(-c.normal(j));
    }
    for &j in &positive {
        cols.push(c.normal(j));
    }
    let x_residual = if cols.is_empty() {
        zx.norm()
    } else {
        let refs: Vec<&DVector<f64>> = cols.iter().collect();
        linalg::nnls(&linalg::columns(&refs, n), &zx).residual
    };
    let domain_ok = if check_domain {
        let active = c.active_set_default(t, x)?;
        if !c.licq_on(&active) {
            return Err(CertificateError::LicqViolated);
        }
        let v = w + p.dynamics(x, u);
        let dec = c.normal_decompose_on(&active, &v)?;
        let lam_tol = support_tolerance(&dec.coefficients);
        let tol = direction_tolerance(y);
        let pattern = active.indices.iter().all(|&j| {
            let ay = c.normal(j).dot(y);
            if dec.coefficients[j] > lam_tol {
                ay.abs() <= tol
            } else {
                ay >= -tol
            }
        });
        Some(pattern && dec.residual <= 1e-8 * (1.0 + v.norm()))
    } else {
        None
    };
    Ok(CoderivativeCheck {
        x_residual,
        u_residual: zu.norm(),
        domain_ok,
    })
}

/// `(1/k) Σ ⟨p_{i+1}, (x_{i+1} − x_i)/h⟩`.
pub fn compute_hbar(traj: &DiscreteTrajectory, p: &[DVector<f64>]) -> f64 {
    let k = traj.k();
    (0..k).map(|i| p[i + 1].dot(&traj.velocity(i))).sum::<f64>() / k as f64
}

/// Reference cell at `t`; `left` selects the left limit. `None` past `T̄`.
fn reference_cell(reference: &DiscreteTrajectory, t: f64, left: bool) -> Option<usize> {
    let mut r = t / reference.h();
    if (r - r.round()).abs() < 1e-9 {
        r = r.round();
    }
    let j = if left {
        (r.ceil() - 1.0).max(0.0)
    } else {
        r.floor()
    };
    (j < reference.k() as f64).then_some(j as usize)
}

/// Reference-deviation integrals per step and the horizon correction `ϱ_k`.
pub struct ReferenceTerms {
    pub xi_u: Vec<DVector<f64>>,
    pub xi_y: Vec<DVector<f64>>,
    pub rho: f64,
    pub t_ref: f64,
}

pub fn reference_terms(
    traj: &DiscreteTrajectory,
    reference: Option<&DiscreteTrajectory>,
) -> Result<ReferenceTerms, CertificateError> {
    let (k, n, d) = (traj.k(), traj.states[0].len(), traj.controls[0].len());
    let mut xi_u = vec![DVector::zeros(d); k];
    let mut xi_y = vec![DVector::zeros(n); k];
    let Some(reference) = reference else {
        return Ok(ReferenceTerms {
            xi_u,
            xi_y,
            rho: 0.0,
            t_ref: traj.horizon,
        });
    };
    if reference.k() == 0 || reference.states[0].len() != n || reference.controls[0].len() != d {
        return Err(ProblemError::IncompatibleReference("dimensions differ".into()).into());
    }
    for piece in merged_pieces(traj, reference) {
        let (yr, ur) = reference_values(reference, piece.ref_cell);
        xi_y[piece.cell] += (traj.velocity(piece.cell) - yr) * piece.len;
        xi_u[piece.cell] += (&traj.controls[piece.cell] - ur) * piece.len;
    }
    let deviation = |i: usize, cell: Option<usize>| {
        let (yr, ur) = reference_values(reference, cell);
        (traj.velocity(i) - yr).norm_squared() + (&traj.controls[i] - ur).norm_squared()
    };
    let mut rho = 0.0;
    for i in 0..k {
        let start = deviation(i, reference_cell(reference, traj.time(i), false));
        let end = deviation(i, reference_cell(reference, traj.time(i + 1), true));
        rho += i as f64 / k as f64 * start - (i + 1) as f64 / k as f64 * end;
    }
    Ok(ReferenceTerms {
        xi_u,
        xi_y,
        rho,
        t_ref: reference.horizon,
    })
}

/// Orthogonal projection data for the rows carrying a step's multiplier.
struct Projector {
    rows: Vec<usize>,
    a: DMatrix<f64>,
    gram: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Projector {
    /// Coefficients `θ` with `v − A_Jᵀθ ⟂ a_j` for `j ∈ J`.
    fn coefficients(&self, v: &DVector<f64>) -> DVector<f64> {
        self.gram.solve(&(&self.a * v))
    }

    fn scatter(&self, theta: &DVector<f64>, s: usize, scale: f64) -> DVector<f64> {
        let mut out = DVector::zeros(s);
        for (r, &j) in self.rows.iter().enumerate() {
            out[j] = theta[r] * scale;
        }
        out
    }
}

/// Precomputed per-step data of the backward sweep.
struct Sweep<'a> {
    p: &'a SweepingProblem,
    k: usize,
    h: f64,
    velocities: Vec<DVector<f64>>,
    /// Projector for the rows with positive `η_i`, indexed by step.
    projectors: Vec<Option<Projector>>,
}

/// Adjoint quantities produced by one backward pass. Linear in the terminal
/// value and the reference shifts, so passes can be superposed.
#[derive(Clone)]
struct Pass {
    p: Vec<DVector<f64>>,
    gamma: Vec<DVector<f64>>,
    atom: DVector<f64>,
    psi: Vec<DVector<f64>>,
    hbar: f64,
}

impl Pass {
    fn add_scaled(&mut self, a: f64, other: &Pass) {
        for (x, y) in self.p.iter_mut().zip(&other.p) {
            x.axpy(a, y, 1.0);
        }
        for (x, y) in self.gamma.iter_mut().zip(&other.gamma) {
            x.axpy(a, y, 1.0);
        }
        for (x, y) in self.psi.iter_mut().zip(&other.psi) {
            x.axpy(a, y, 1.0);
        }
        self.atom.axpy(a, &other.atom, 1.0);
        self.hbar += a * other.hbar;
    }

    fn scale(&mut self, a: f64) {
        let zero = self.clone();
        self.add_scaled(a - 1.0, &zero);
    }
}

impl<'a> Sweep<'a> {
    fn new(p: &'a SweepingProblem, traj: &DiscreteTrajectory) -> Result<Self, CertificateError> {
        let (k, h) = (traj.k(), traj.h());
        let c = &p.polyhedron;
        let mut projectors = Vec::with_capacity(k);
        for (i, eta) in traj.etas.iter().enumerate() {
            let tol = support_tolerance(eta);
            let rows: Vec<usize> = (0..eta.len()).filter(|&j| eta[j] > tol).collect();
            if rows.is_empty() {
                projectors.push(None);
                continue;
            }
            let mut a = DMatrix::zeros(rows.len(), p.n());
            for (r, &j) in rows.iter().enumerate() {
                a.set_row(r, &c.normal_matrix().row(j));
            }
            if linalg::rank(&a) < rows.len() {
                return Err(CertificateError::SingularAdjointStep { step: i });
            }
            let gram = (&a * a.transpose())
                .cholesky()
                .ok_or(CertificateError::SingularAdjointStep { step: i })?;
            projectors.push(Some(Projector { rows, a, gram }));
        }
        let velocities = (0..k).map(|i| traj.velocity(i)).collect();
        Ok(Self {
            p,
            k,
            h,
            velocities,
            projectors,
        })
    }

    /// Backward pass from the terminal value `pk`. `shift[i]` is the
    /// reference shift `2μ0ξ_{iy}/h`; `psi_offset[i]` is `−2μ0ξ_{iu}`.
    fn run(
        &self,
        pk: &DVector<f64>,
        shift: Option<&[DVector<f64>]>,
        psi_offset: Option<&[DVector<f64>]>,
    ) -> Pass {
        let (k, h, n, s) = (self.k, self.h, self.p.n(), self.p.s());
        let zero = DVector::zeros(n);
        let c = |i: usize| shift.map_or(&zero, |v| &v[i]);
        let mut atom = DVector::zeros(s);
        let mut next = pk.clone();
        if let Some(pr) = &self.projectors[k - 1] {
            let theta = pr.coefficients(&(pk - c(k - 1)));
            next = pk - pr.a.tr_mul(&theta);
            atom = pr.scatter(&theta, s, 1.0);
        }
        let mut p = vec![DVector::zeros(n); k + 1];
        let mut gamma = vec![DVector::zeros(s); k];
        let mut psi = Vec::with_capacity(k);
        p[k] = pk.clone();
        let mut hbar = 0.0;
        for i in (0..k).rev() {
            let lam = &next - c(i);
            hbar += next.dot(&self.velocities[i]);
            let mut psi_i = self.p.g_b.tr_mul(&lam) * h;
            if let Some(off) = psi_offset {
                psi_i += &off[i];
            }
            psi.push(psi_i);
            let b = &next + self.p.g_a.tr_mul(&lam) * h;
            let pi = match (i >= 1).then(|| self.projectors[i - 1].as_ref()).flatten() {
                Some(pr) => {
                    let theta = pr.coefficients(&(&b - c(i - 1)));
                    gamma[i] = pr.scatter(&theta, s, 1.0 / h);
                    &b - pr.a.tr_mul(&theta)
                }
                None => b,
            };
            p[i] = pi.clone();
            next = pi;
        }
        psi.reverse();
        Pass {
            p,
            gamma,
            atom,
            psi,
            hbar: hbar / k as f64,
        }
    }
}

/// Which sign a free endpoint variable may take.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Sign {
    Free,
    NonNegative,
    NonPositive,
}

/// One endpoint unknown: its sign and the terminal-adjoint direction it moves.
struct Unknown {
    sign: Sign,
    /// Contribution to `p_k` per unit.
    pk: DVector<f64>,
    /// Contribution to the free-time equation besides `H̄`.
    direct: f64,
}

/// Normal cone of `[lo, hi]` at `t`: which signs are admissible.
fn horizon_normal_sign(omega: (f64, f64), t: f64) -> Option<Sign> {
    let tol = 1e-9 * (1.0 + t.abs());
    let at_lo = (t - omega.0).abs() <= tol;
    let at_hi = omega.1.is_finite() && (t - omega.1).abs() <= tol;
    match (at_lo, at_hi) {
        (true, true) => Some(Sign::Free),
        (true, false) => Some(Sign::NonPositive),
        (false, true) => Some(Sign::NonNegative),
        (false, false) => None,
    }
}

/// Bundle construction and its acceptance test.
struct Assembly<'a> {
    p: &'a SweepingProblem,
    traj: &'a DiscreteTrajectory,
    sweep: Sweep<'a>,
    unknowns: Vec<Unknown>,
    passes: Vec<Pass>,
    terms: ReferenceTerms,
    /// Rows of `C(T)` carrying the endpoint multipliers, by unknown index.
    eta_rows: Vec<(usize, usize)>,
    lambda_count: usize,
    nu_index: Option<usize>,
}

impl<'a> Assembly<'a> {
    fn base(&self, mu0: f64) -> Pass {
        let pk = -phi_gradient(self.p, self.traj.final_state()) * mu0;
        let h = self.sweep.h;
        let shift: Vec<DVector<f64>> = self
            .terms
            .xi_y
            .iter()
            .map(|v| v * (2.0 * mu0 / h))
            .collect();
        let offset: Vec<DVector<f64>> = self.terms.xi_u.iter().map(|v| v * (-2.0 * mu0)).collect();
        self.sweep.run(&pk, Some(&shift), Some(&offset))
    }

    /// Constant part of the free-time equation `H̄ + rest = 0`.
    fn time_constant(&self, mu0: f64) -> f64 {
        mu0 * (2.0 * (self.terms.t_ref - self.traj.horizon) + self.terms.rho - self.p.phi_wt)
    }

    /// Minimal-norm endpoint unknowns for the given `μ0`. `normalize` adds
    /// `±z_j ≥ 1` for the abnormal case.
    fn solve(
        &self,
        mu0: f64,
        with_max: bool,
        normalize: Option<(usize, f64)>,
    ) -> Option<DVector<f64>> {
        let base = self.base(mu0);
        let dim = self.unknowns.len();
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        // Free-time equation as a pair of inequalities.
        let coeff = DVector::from_iterator(
            dim,
            (0..dim).map(|j| self.passes[j].hbar + self.unknowns[j].direct),
        );
        let constant = base.hbar + self.time_constant(mu0);
        rows.push((coeff.clone(), -constant));
        rows.push((-coeff, constant));
        for (j, u) in self.unknowns.iter().enumerate() {
            let mut e = DVector::zeros(dim);
            match u.sign {
                Sign::NonNegative => e[j] = -1.0,
                Sign::NonPositive => e[j] = 1.0,
                Sign::Free => continue,
            }
            rows.push((e, 0.0));
        }
        if let Some((j, sign)) = normalize {
            let mut e = DVector::zeros(dim);
            e[j] = -sign;
            rows.push((e, -1.0));
        }
        if with_max {
            let h = self.sweep.h;
            let tol = 10.0 * h;
            for (i, u) in self.traj.controls.iter().enumerate() {
                for c in 0..u.len() {
                    let (lo, hi) = (self.p.u_lo[c], self.p.u_hi[c]);
                    let row =
                        DVector::from_iterator(dim, (0..dim).map(|j| self.passes[j].psi[i][c] / h));
                    let v0 = base.psi[i][c] / h;
                    let at_hi = u[c] >= hi - 1e-12 * (1.0 + hi.abs());
                    let at_lo = u[c] <= lo + 1e-12 * (1.0 + lo.abs());
                    if !at_lo {
                        // ψ/h ≥ −tol
                        rows.push((-row.clone(), tol + v0));
                    }
                    if !at_hi {
                        // ψ/h ≤ tol
                        rows.push((row, tol - v0));
                    }
                }
            }
        }
        let a = DMatrix::from_fn(rows.len(), dim, |r, c| rows[r].0[c]);
        let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
        project_polyhedron(&a, &b, &DVector::zeros(dim))
            .ok()
            .map(|sol| sol.x)
    }

    fn bundle(&self, mu0: f64, z: &DVector<f64>) -> MultiplierBundle {
        let mut pass = self.base(mu0);
        for (j, pj) in self.passes.iter().enumerate() {
            pass.add_scaled(z[j], pj);
        }
        self.finish(mu0, z, pass)
    }

    fn finish(&self, mu0: f64, z: &DVector<f64>, pass: Pass) -> MultiplierBundle {
        let (p, traj) = (self.p, self.traj);
        let mut eta_t = DVector::zeros(p.s());
        for &(j, row) in &self.eta_rows {
            eta_t[row] = z[j];
        }
        let lambda_t =
            DVector::from_iterator(self.lambda_count, (0..self.lambda_count).map(|j| z[j]));
        let nu_t = self.nu_index.map_or(0.0, |j| z[j]);
        let q = reconstruct_q(&p.polyhedron, traj.h(), &pass.p, &pass.gamma, &pass.atom);
        MultiplierBundle {
            mu0,
            p: pass.p,
            gamma: pass.gamma,
            atom: pass.atom,
            psi: pass.psi,
            eta_t,
            lambda_t,
            nu_t,
            q,
            hbar: pass.hbar,
            rho_k: self.terms.rho,
            t_ref: self.terms.t_ref,
            xi_u: self.terms.xi_u.clone(),
            xi_y: self.terms.xi_y.clone(),
        }
    }
}

/// `q_k = p_k`, `q_i = p_i + Σ_{ℓ≥i} h Σ_j γ_{ℓj} a_j + Σ_j atom_j a_j` for `i < k`.
pub fn reconstruct_q(
    c: &MovingPolyhedron,
    h: f64,
    p: &[DVector<f64>],
    gamma: &[DVector<f64>],
    atom: &DVector<f64>,
) -> Vec<DVector<f64>> {
    let k = gamma.len();
    let a = c.normal_matrix();
    let mut q = vec![DVector::zeros(c.dim()); k + 1];
    q[k] = p[k].clone();
    let mut acc = a.tr_mul(atom);
    for i in (0..k).rev() {
        acc += a.tr_mul(&gamma[i]) * h;
        q[i] = &p[i] + &acc;
    }
    q
}

/// Construct multipliers for `traj`, preferring the normal form `μ0 = 1`.
pub fn solve_multipliers(
    p: &SweepingProblem,
    traj: &DiscreteTrajectory,
    cfg: &DiscretizationConfig,
) -> Result<MultiplierBundle, CertificateError> {
    p.validate()?;
    traj.check_shape(p.n(), p.d(), p.s())?;
    let sweep = Sweep::new(p, traj)?;
    let terms = reference_terms(traj, cfg.reference.as_ref())?;
    let c = &p.polyhedron;
    let xk = traj.final_state();

    let mut unknowns = Vec::new();
    let e = &p.omega_x_e;
    for r in 0..e.nrows() {
        unknowns.push(Unknown {
            sign: Sign::Free,
            pk: -e.row(r).transpose(),
            direct: 0.0,
        });
    }
    let lambda_count = e.nrows();
    let mut eta_rows = Vec::new();
    for j in lenient_active(c, traj.horizon, xk).indices {
        eta_rows.push((unknowns.len(), j));
        unknowns.push(Unknown {
            sign: Sign::NonNegative,
            pk: -c.normal(j),
            direct: 0.0,
        });
    }
    let nu_index = horizon_normal_sign(p.omega_t, traj.horizon).map(|sign| {
        unknowns.push(Unknown {
            sign,
            pk: DVector::zeros(p.n()),
            direct: -1.0,
        });
        unknowns.len() - 1
    });
    let passes = unknowns
        .iter()
        .map(|u| sweep.run(&u.pk, None, None))
        .collect();
    let asm = Assembly {
        p,
        traj,
        sweep,
        unknowns,
        passes,
        terms,
        eta_rows,
        lambda_count,
        nu_index,
    };

    let accept = |b: &MultiplierBundle| {
        check_certificate(p, traj, b, None).ok().is_some_and(|r| {
            let t = r.tolerance;
            r.stationarity_resid <= t
                && r.transversality_resid <= t
                && r.hbar_minus_mu <= t
                && r.maximization_resid <= t
        })
    };
    let mut fallback = None;
    for with_max in [true, false] {
        if let Some(z) = asm.solve(1.0, with_max, None) {
            let b = asm.bundle(1.0, &z);
            if accept(&b) {
                return Ok(b);
            }
            fallback.get_or_insert(b);
        }
    }
    for with_max in [true, false] {
        for j in 0..asm.unknowns.len() {
            for sign in [1.0, -1.0] {
                let allowed = match asm.unknowns[j].sign {
                    Sign::Free => true,
                    Sign::NonNegative => sign > 0.0,
                    Sign::NonPositive => sign < 0.0,
                };
                if !allowed {
                    continue;
                }
                let Some(z) = asm.solve(0.0, with_max, Some((j, sign))) else {
                    continue;
                };
                let mut b = asm.bundle(0.0, &z);
                let norm = enhanced_norm(&b);
                if norm > 0.0 {
                    b = normalize_abnormal(&asm, &z, 1.0 / norm);
                }
                if accept(&b) {
                    return Ok(b);
                }
            }
        }
    }
    if let Some(b) = fallback {
        return Ok(b);
    }
    // Nothing satisfies the free-time equation; report the normal form with
    // every endpoint multiplier at zero.
    Ok(asm.bundle(1.0, &DVector::zeros(asm.unknowns.len())))
}

fn normalize_abnormal(asm: &Assembly, z: &DVector<f64>, scale: f64) -> MultiplierBundle {
    let mut pass = asm.base(0.0);
    for (j, pj) in asm.passes.iter().enumerate() {
        pass.add_scaled(z[j], pj);
    }
    pass.scale(scale);
    asm.finish(0.0, &(z * scale), pass)
}

fn psi_norm(b: &MultiplierBundle) -> f64 {
    b.psi.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt()
}

fn enhanced_norm(b: &MultiplierBundle) -> f64 {
    b.mu0 + b.eta_t.norm() + b.p[0].norm() + psi_norm(b)
}

/// Default certificate tolerance `10·h·(1 + ‖p‖∞)`.
pub fn default_certificate_tolerance(traj: &DiscreteTrajectory, bundle: &MultiplierBundle) -> f64 {
    let pmax = bundle.p.iter().map(|v| v.amax()).fold(0.0, f64::max);
    10.0 * traj.h() * (1.0 + pmax)
}

/// Evaluate every condition for `bundle` along `traj`.
pub fn check_certificate(
    p: &SweepingProblem,
    traj: &DiscreteTrajectory,
    bundle: &MultiplierBundle,
    tol: Option<f64>,
) -> Result<CertificateReport, CertificateError> {
    traj.check_shape(p.n(), p.d(), p.s())?;
    bundle.check_shape(p, traj)?;
    let c = &p.polyhedron;
    let (k, h, s) = (traj.k(), traj.h(), p.s());
    let tol = tol.unwrap_or_else(|| default_certificate_tolerance(traj, bundle));
    let mu0 = bundle.mu0;
    let active: Vec<Vec<bool>> = (0..=k)
        .map(|i| {
            let set = lenient_active(c, traj.time(i), &traj.states[i]);
            (0..s).map(|j| set.contains(j)).collect()
        })
        .collect();
    let lambdas: Vec<DVector<f64>> = (0..k).map(|i| bundle.lambda(c, i, h)).collect();

    let mut stationarity: f64 = 0.0;
    let mut dynamics: f64 = 0.0;
    let mut maximization: f64 = 0.0;
    let mut complementarity = mu0 >= 0.0 && bundle.eta_t.iter().all(|&v| v >= 0.0);
    let mut sign = true;
    for i in 0..k {
        let lam = &lambdas[i];
        let x_slot = (bundle.p_after(c, i) - &bundle.p[i]) / h + p.g_a.tr_mul(lam)
            - c.normal_matrix().tr_mul(&bundle.gamma[i]);
        let u_slot = &bundle.psi[i] / h + &bundle.xi_u[i] * (2.0 * mu0 / h) - p.g_b.tr_mul(lam);
        stationarity = stationarity.max(x_slot.norm()).max(u_slot.norm());

        let eta = &traj.etas[i];
        let w = p.dynamics(&traj.states[i], &traj.controls[i])
            - traj.velocity(i)
            - c.normal_matrix().tr_mul(eta);
        dynamics = dynamics.max(w.norm());

        let eta_tol = support_tolerance(eta);
        let gamma_tol = support_tolerance(&bundle.gamma[i]);
        let lam_tol = tol * (1.0 + lam.norm());
        for j in 0..s {
            if eta[j] < 0.0 || (eta[j] > eta_tol && !active[i + 1][j]) {
                complementarity = false;
            }
            if eta[j] > eta_tol && c.normal(j).dot(lam).abs() > lam_tol {
                complementarity = false;
            }
            let g = bundle.gamma[i][j];
            if g.abs() > gamma_tol {
                if !active[i][j] {
                    complementarity = false;
                }
                let al = c.normal(j).dot(lam);
                if al < -tol || (al > tol && g < 0.0) {
                    sign = false;
                }
            }
        }

        let u = &traj.controls[i];
        let gap: f64 = (0..u.len())
            .map(|cc| {
                let v = bundle.psi[i][cc] / h;
                if v > 0.0 {
                    v * (p.u_hi[cc] - u[cc])
                } else {
                    v * (p.u_lo[cc] - u[cc])
                }
            })
            .sum();
        maximization = maximization.max(gap);
    }
    for j in 0..s {
        if (bundle.eta_t[j] > 0.0 || bundle.atom[j].abs() > support_tolerance(&bundle.atom))
            && !active[k][j]
        {
            complementarity = false;
        }
    }

    let xk = traj.final_state();
    let v =
        -bundle.p[k].clone() - c.normal_matrix().tr_mul(&bundle.eta_t) - phi_gradient(p, xk) * mu0;
    let transversality = if p.omega_x_e.nrows() == 0 {
        v.norm()
    } else {
        let et = p.omega_x_e.transpose();
        (&v - &et * linalg::lstsq(&et, &v)).norm()
    };

    let mut p_eff = bundle.p.clone();
    p_eff[k] = bundle.p_final_minus(c);
    let hbar = compute_hbar(traj, &p_eff);
    let time_value = hbar + mu0 * (2.0 * (bundle.t_ref - traj.horizon) + bundle.rho_k - p.phi_wt);
    let hbar_minus_mu = match horizon_normal_sign(p.omega_t, traj.horizon) {
        None => time_value.abs(),
        Some(Sign::Free) => 0.0,
        Some(Sign::NonNegative) => (-time_value).max(0.0),
        Some(Sign::NonPositive) => time_value.max(0.0),
    };

    let psi = psi_norm(bundle);
    let nontriviality_norm =
        mu0 + bundle.eta_t.norm() + bundle.p[..k].iter().map(|v| v.norm()).sum::<f64>() + psi;
    let enhanced_nontriviality_norm = enhanced_norm(bundle);
    let support_ok = support_condition(c, traj, bundle, &active, &lambdas, tol);

    let mut violations = Vec::new();
    let mut flag = |bad: bool, name: &str| {
        if bad {
            violations.push(name.to_string());
        }
    };
    flag(!(stationarity <= tol), "stationarity");
    flag(!(dynamics <= tol), "dynamics");
    flag(!(transversality <= tol), "transversality");
    flag(!complementarity, "complementarity");
    flag(!sign, "sign");
    flag(!(maximization <= tol), "maximization");
    flag(!(nontriviality_norm > 1e-12), "nontriviality");
    flag(!support_ok, "support");
    flag(!(hbar_minus_mu <= tol), "free-time");
    Ok(CertificateReport {
        stationarity_resid: stationarity,
        dynamics_resid: dynamics,
        transversality_resid: transversality,
        complementarity_ok: complementarity,
        sign_ok: sign,
        maximization_resid: maximization,
        nontriviality_norm,
        enhanced_nontriviality_norm,
        support_ok,
        hbar_minus_mu,
        tolerance: tol,
        violations,
    })
}

/// Positive `γ` on rows with `⟨a_j, Λ_i⟩ > 0` must vanish strictly inside
/// runs of nodes where every active row carries a positive `η`.
fn support_condition(
    c: &MovingPolyhedron,
    traj: &DiscreteTrajectory,
    bundle: &MultiplierBundle,
    active: &[Vec<bool>],
    lambdas: &[DVector<f64>],
    tol: f64,
) -> bool {
    let k = traj.k();
    // Node i belongs to the set when its active rows are nonempty and all
    // carry positive multipliers from the step ending there.
    let in_set: Vec<bool> = (0..=k)
        .map(|i| {
            if i == 0 {
                return false;
            }
            let eta = &traj.etas[i - 1];
            let t = support_tolerance(eta);
            let mut rows = (0..eta.len()).filter(|&j| active[i][j]).peekable();
            rows.peek().is_some() && rows.all(|j| eta[j] > t)
        })
        .collect();
    (1..k)
        .filter(|&i| in_set[i - 1] && in_set[i] && in_set[i + 1])
        .all(|i| {
            let g = &bundle.gamma[i];
            let gt = support_tolerance(g);
            (0..g.len()).all(|j| !(g[j] > gt && c.normal(j).dot(&lambdas[i]) > tol))
        })
}

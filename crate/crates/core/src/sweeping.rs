//! Catching-up time stepping for `ẋ ∈ −N(x; C(t)) + g(x, u)` and recovery of
//! the normal-cone multipliers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{default_tolerance, ActiveIndexSet, GeometryError, MovingPolyhedron};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SweepError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid control law: {0}")]
    InvalidLaw(String),
    #[error("step {step}: {source}")]
    Step { step: usize, source: GeometryError },
    #[error(
        "step {step}: normal-cone decomposition residual {residual:e} exceeds bound {bound:e}"
    )]
    DecompositionFailed {
        step: usize,
        residual: f64,
        bound: f64,
    },
    #[error("inconsistent trajectory: {0}")]
    InvalidTrajectory(String),
}

/// Problem data: moving set, affine dynamics `g(x,u) = A x + B u + c`, control
/// box, initial state, Mayer cost and endpoint constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepingProblem {
    pub polyhedron: MovingPolyhedron,
    pub g_a: DMatrix<f64>,
    pub g_b: DMatrix<f64>,
    pub g_c: DVector<f64>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
    pub x0: DVector<f64>,
    /// Weight on the final time.
    pub phi_wt: f64,
    /// Diagonal weights of the terminal tracking term.
    pub phi_w: DVector<f64>,
    pub phi_xref: DVector<f64>,
    /// Endpoint rows `E x(T) = e`.
    pub omega_x_e: DMatrix<f64>,
    pub omega_x_rhs: DVector<f64>,
    /// Closed interval for the horizon.
    pub omega_t: (f64, f64),
    /// Optional Lipschitz constant used for the velocity cap `L + 1`.
    pub lipschitz: Option<f64>,
}

impl SweepingProblem {
    pub fn n(&self) -> usize {
        self.polyhedron.dim()
    }

    pub fn d(&self) -> usize {
        self.g_b.ncols()
    }

    pub fn s(&self) -> usize {
        self.polyhedron.num_rows()
    }

    /// Check dimensions and the standing assumptions on the data.
    pub fn validate(&self) -> Result<(), SweepError> {
        let n = self.n();
        let d = self.d();
        let bad = |m: String| Err(SweepError::InvalidProblem(m));
        if self.g_a.shape() != (n, n) {
            return bad(format!("A must be {n}x{n}"));
        }
        if self.g_b.nrows() != n || d == 0 {
            return bad(format!("B must be {n}xd with d >= 1"));
        }
        if self.g_c.len() != n
            || self.x0.len() != n
            || self.phi_w.len() != n
            || self.phi_xref.len() != n
        {
            return bad(format!("c, x0, W and xref must have length {n}"));
        }
        if self.u_lo.len() != d || self.u_hi.len() != d {
            return bad(format!("control bounds must have length {d}"));
        }
        if self
            .u_lo
            .iter()
            .zip(self.u_hi.iter())
            .any(|(l, h)| !(l <= h))
        {
            return bad("control box has lo > hi".into());
        }
        if self.phi_w.iter().any(|&w| !(w >= 0.0)) {
            return bad("cost weights W must be nonnegative".into());
        }
        if self.omega_x_e.ncols() != n || self.omega_x_e.nrows() != self.omega_x_rhs.len() {
            return bad("endpoint rows E must be m x n with e of length m".into());
        }
        let (lo, hi) = self.omega_t;
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return bad("time interval is empty".into());
        }
        let r = self
            .polyhedron
            .eval_constraints(0.0, &self.x0)
            .map_err(|e| SweepError::InvalidProblem(e.to_string()))?;
        let tol = default_tolerance(&self.x0);
        if let Some((j, v)) = r.iter().enumerate().find(|(_, &v)| v > tol) {
            return bad(format!("x0 violates row {j} of C(0) by {v:e}"));
        }
        Ok(())
    }

    /// `g(x, u) = A x + B u + c`.
    pub fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.g_a * x + &self.g_b * u + &self.g_c
    }

    pub fn control_in_box(&self, u: &DVector<f64>) -> bool {
        u.len() == self.d()
            && u.iter()
                .zip(self.u_lo.iter().zip(self.u_hi.iter()))
                .all(|(v, (l, h))| l <= v && v <= h)
    }
}

/// Piecewise-constant control on `0 = s_0 < s_1 < … < s_m = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlLaw {
    breakpoints: Vec<f64>,
    levels: Vec<DVector<f64>>,
}

impl ControlLaw {
    pub fn new(breakpoints: Vec<f64>, levels: Vec<DVector<f64>>) -> Result<Self, SweepError> {
        if levels.is_empty() || breakpoints.len() != levels.len() + 1 {
            return Err(SweepError::InvalidLaw(
                "need m >= 1 levels and m + 1 breakpoints".into(),
            ));
        }
        if breakpoints[0] != 0.0 {
            return Err(SweepError::InvalidLaw("first breakpoint must be 0".into()));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1]))
            || !breakpoints.iter().all(|b| b.is_finite())
        {
            return Err(SweepError::InvalidLaw(
                "breakpoints must be finite and strictly increasing".into(),
            ));
        }
        let d = levels[0].len();
        if levels.iter().any(|l| l.len() != d) {
            return Err(SweepError::InvalidLaw(
                "levels must share one dimension".into(),
            ));
        }
        Ok(Self {
            breakpoints,
            levels,
        })
    }

    pub fn constant(u: DVector<f64>, horizon: f64) -> Result<Self, SweepError> {
        Self::new(vec![0.0, horizon], vec![u])
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn levels(&self) -> &[DVector<f64>] {
        &self.levels
    }

    pub fn segments(&self) -> usize {
        self.levels.len()
    }

    /// Level active at `t` (right-continuous, last level from `T` on).
    pub fn sample(&self, t: f64) -> &DVector<f64> {
        let m = self.levels.len();
        let idx = self.breakpoints[1..m].partition_point(|&b| b <= t);
        &self.levels[idx]
    }

    /// Interior breakpoint with the largest jump in level, if any.
    pub fn dominant_switch(&self) -> Option<f64> {
        let mut best: Option<(f64, f64)> = None;
        for i in 1..self.levels.len() {
            let jump = (&self.levels[i] - &self.levels[i - 1]).norm();
            if best.is_none_or(|(bj, _)| jump > bj) {
                best = Some((jump, self.breakpoints[i]));
            }
        }
        best.map(|(_, t)| t)
    }
}

/// Output of the integrator on the uniform grid `t_i = i·T/k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTrajectory {
    pub horizon: f64,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub etas: Vec<DVector<f64>>,
}

impl DiscreteTrajectory {
    pub fn k(&self) -> usize {
        self.controls.len()
    }

    pub fn h(&self) -> f64 {
        self.horizon / self.k() as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        grid_time(self.horizon, self.k(), i)
    }

    /// Finite-difference velocity `(x_{i+1} − x_i)/h`.
    pub fn velocity(&self, i: usize) -> DVector<f64> {
        (&self.states[i + 1] - &self.states[i]) / self.h()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().unwrap()
    }

    /// Structural consistency of the arrays.
    pub fn check_shape(&self, n: usize, d: usize, s: usize) -> Result<(), SweepError> {
        let k = self.k();
        let bad = |m: String| Err(SweepError::InvalidTrajectory(m));
        if k == 0 || !(self.horizon > 0.0) {
            return bad("need k >= 1 and T > 0".into());
        }
        if self.states.len() != k + 1 {
            return bad(format!(
                "expected {} states, found {}",
                k + 1,
                self.states.len()
            ));
        }
        if self.etas.len() != k {
            return bad(format!(
                "expected {k} eta vectors, found {}",
                self.etas.len()
            ));
        }
        if self.states.iter().any(|x| x.len() != n)
            || self.controls.iter().any(|u| u.len() != d)
            || self.etas.iter().any(|e| e.len() != s)
        {
            return bad("vector lengths do not match the problem".into());
        }
        Ok(())
    }
}

pub(crate) fn grid_time(horizon: f64, k: usize, i: usize) -> f64 {
    if i == k {
        horizon
    } else {
        i as f64 * horizon / k as f64
    }
}

/// Explicit predictor `x + h·g(x,u)` followed by the projection onto
/// `C(t_next)`, written into `out`. Shared by every integration entry point so
/// they agree bit for bit.
fn advance_into(
    p: &SweepingProblem,
    t_next: f64,
    h: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    out: &mut DVector<f64>,
) -> Result<(), GeometryError> {
    let n = x.len();
    for r in 0..n {
        let mut g = p.g_c[r];
        for c in 0..n {
            g += p.g_a[(r, c)] * x[c];
        }
        for c in 0..u.len() {
            g += p.g_b[(r, c)] * u[c];
        }
        out[r] = x[r] + h * g;
    }
    let a = p.polyhedron.normal_matrix();
    let inside = p.polyhedron.rows().iter().enumerate().all(|(j, row)| {
        let mut dot = 0.0;
        for c in 0..n {
            dot += a[(j, c)] * out[c];
        }
        dot <= row.offset(t_next)
    });
    if !inside {
        *out = p.polyhedron.project(t_next, out)?;
    }
    Ok(())
}

fn step_to(
    p: &SweepingProblem,
    t_next: f64,
    h: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>, GeometryError> {
    let mut out = DVector::zeros(x.len());
    advance_into(p, t_next, h, x, u, &mut out)?;
    Ok(out)
}

/// One implicit step `x⁺ = proj_{C(t+h)}(x + h·g(x,u))`.
pub fn catchup_step(
    p: &SweepingProblem,
    t: f64,
    h: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>, GeometryError> {
    if !(h > 0.0) {
        return Err(GeometryError::Invalid("step size must be positive".into()));
    }
    step_to(p, t + h, h, x, u)
}

fn check_law(p: &SweepingProblem, law: &ControlLaw, k: usize) -> Result<(), SweepError> {
    if k == 0 {
        return Err(SweepError::InvalidLaw("k must be at least 1".into()));
    }
    if !(law.horizon() > 0.0) {
        return Err(SweepError::InvalidLaw("horizon must be positive".into()));
    }
    if let Some(bad) = law.levels().iter().position(|u| !p.control_in_box(u)) {
        return Err(SweepError::InvalidLaw(format!(
            "level {bad} lies outside the control box"
        )));
    }
    Ok(())
}

/// Run the catching-up scheme and only keep the last state.
pub fn final_state(
    p: &SweepingProblem,
    law: &ControlLaw,
    k: usize,
) -> Result<DVector<f64>, SweepError> {
    check_law(p, law, k)?;
    let horizon = law.horizon();
    let h = horizon / k as f64;
    let mut x = p.x0.clone();
    let mut next = x.clone();
    for i in 0..k {
        let u = law.sample(grid_time(horizon, k, i));
        advance_into(p, grid_time(horizon, k, i + 1), h, &x, u, &mut next)
            .map_err(|source| SweepError::Step { step: i, source })?;
        std::mem::swap(&mut x, &mut next);
    }
    Ok(x)
}

/// Integrate on the uniform grid and recover the multipliers.
pub fn integrate(
    p: &SweepingProblem,
    law: &ControlLaw,
    k: usize,
) -> Result<DiscreteTrajectory, SweepError> {
    check_law(p, law, k)?;
    let horizon = law.horizon();
    let h = horizon / k as f64;
    let mut states = Vec::with_capacity(k + 1);
    let mut controls = Vec::with_capacity(k);
    states.push(p.x0.clone());
    for i in 0..k {
        let u = law.sample(grid_time(horizon, k, i)).clone();
        let next = step_to(p, grid_time(horizon, k, i + 1), h, &states[i], &u)
            .map_err(|source| SweepError::Step { step: i, source })?;
        states.push(next);
        controls.push(u);
    }
    let mut traj = DiscreteTrajectory {
        horizon,
        states,
        controls,
        etas: Vec::new(),
    };
    traj.etas = recover_eta(p, &traj)?;
    Ok(traj)
}

/// Rows with `r_j ≥ −tol`, counting violated rows as active.
pub(crate) fn lenient_active(c: &MovingPolyhedron, t: f64, x: &DVector<f64>) -> ActiveIndexSet {
    let tol = default_tolerance(x);
    let r = c
        .eval_constraints(t, x)
        .expect("dimension checked by caller");
    ActiveIndexSet {
        indices: (0..r.len()).filter(|&j| r[j] >= -tol).collect(),
        tolerance: tol,
    }
}

/// `g(x_i,u_i) − (x_{i+1} − x_i)/h`, the normal-cone element of step `i`.
pub fn normal_part(p: &SweepingProblem, traj: &DiscreteTrajectory, i: usize) -> DVector<f64> {
    p.dynamics(&traj.states[i], &traj.controls[i]) - traj.velocity(i)
}

/// Per-step `η_i`, the decomposition of the normal part on the rows active at
/// `(t_{i+1}, x_{i+1})`.
pub fn recover_eta(
    p: &SweepingProblem,
    traj: &DiscreteTrajectory,
) -> Result<Vec<DVector<f64>>, SweepError> {
    let k = traj.k();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let w = normal_part(p, traj, i);
        let x_next = &traj.states[i + 1];
        let active = p
            .polyhedron
            .active_set_default(traj.time(i + 1), x_next)
            .map_err(|source| SweepError::Step {
                step: i + 1,
                source,
            })?;
        let dec = p
            .polyhedron
            .normal_decompose_on(&active, &w)
            .map_err(|source| SweepError::Step { step: i, source })?;
        let g = p.dynamics(&traj.states[i], &traj.controls[i]);
        let bound = 1e-8 * (1.0 + g.norm());
        if dec.residual > bound {
            return Err(SweepError::DecompositionFailed {
                step: i,
                residual: dec.residual,
                bound,
            });
        }
        out.push(dec.coefficients);
    }
    Ok(out)
}

/// Largest distance from the step's normal part to the normal cone at the
/// right endpoint.
pub fn inclusion_residual(p: &SweepingProblem, traj: &DiscreteTrajectory) -> f64 {
    (0..traj.k())
        .map(|i| {
            let active = lenient_active(&p.polyhedron, traj.time(i + 1), &traj.states[i + 1]);
            p.polyhedron
                .normal_decompose_on(&active, &normal_part(p, traj, i))
                .map(|d| d.residual)
                .unwrap_or(f64::INFINITY)
        })
        .fold(0.0, f64::max)
}

/// Explicit-form residual: distance to the cone at the left endpoint `x_i`,
/// less the relaxation radius `tau[i]` (zero when `tau` is `None`).
pub fn explicit_inclusion_residual(
    p: &SweepingProblem,
    traj: &DiscreteTrajectory,
    tau: Option<&[f64]>,
) -> f64 {
    (0..traj.k())
        .map(|i| {
            let active = lenient_active(&p.polyhedron, traj.time(i), &traj.states[i]);
            let dist = p
                .polyhedron
                .normal_decompose_on(&active, &normal_part(p, traj, i))
                .map(|d| d.residual)
                .unwrap_or(f64::INFINITY);
            (dist - tau.map_or(0.0, |t| t[i])).max(0.0)
        })
        .fold(0.0, f64::max)
}

/// Largest finite-difference speed and whether it respects `L + 1`.
pub fn velocity_cap(traj: &DiscreteTrajectory, lipschitz: f64) -> (bool, f64) {
    let vmax = (0..traj.k())
        .map(|i| traj.velocity(i).norm())
        .fold(0.0, f64::max);
    (vmax <= lipschitz + 1.0, vmax)
}

/// First grid time at which some row is active.
pub fn first_activity_time(p: &SweepingProblem, traj: &DiscreteTrajectory) -> Option<f64> {
    (0..=traj.k()).find_map(|i| {
        let active = lenient_active(&p.polyhedron, traj.time(i), &traj.states[i]);
        (!active.is_empty()).then(|| traj.time(i))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example;
    use std::f64::consts::FRAC_1_SQRT_2 as S;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    #[test]
    fn interior_step_is_plain_euler() {
        let p = example::problem(-3.0);
        let x = catchup_step(&p, 0.0, 0.01, &v(&[0.0, 0.0]), &v(&[2.0])).unwrap();
        assert!((x[0]).abs() < 1e-15 && (x[1] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn boundary_velocity_converges() {
        let p = example::problem(-3.0);
        for &h in &[1e-2, 1e-3, 1e-4] {
            let t = 0.5;
            let x = v(&[-0.25, 0.75]);
            assert!(p.polyhedron.eval_constraints(t, &x).unwrap()[0].abs() < 1e-12);
            let x1 = catchup_step(&p, t, h, &x, &v(&[2.0])).unwrap();
            let vel = (x1 - &x) / h;
            assert!((vel[0] + 1.5).abs() < 1e-9 && (vel[1] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn fixed_point_when_nothing_moves() {
        let mut p = example::problem(-3.0);
        p.polyhedron = MovingPolyhedron::new(
            2,
            vec![crate::geometry::HalfspaceRow {
                normal: vec![S, S],
                offset0: S,
                offset_slope: 0.0,
            }],
        )
        .unwrap();
        let x = v(&[0.5, 0.5]);
        let x1 = catchup_step(&p, 0.0, 0.1, &x, &v(&[0.0])).unwrap();
        assert_eq!(x1, x);
    }

    #[test]
    fn first_contact_near_one_third() {
        let p = example::problem(-3.0);
        let law = ControlLaw::constant(v(&[2.0]), 1.0).unwrap();
        let traj = integrate(&p, &law, 3000).unwrap();
        let th = first_activity_time(&p, &traj).unwrap();
        assert!((th - 1.0 / 3.0).abs() <= 2.0 * traj.h());
        assert!((traj.final_state()[1] - 1.0).abs() <= 5.0 * traj.h());
    }

    #[test]
    fn eta_on_arc_and_zero_inside() {
        let p = example::problem(-3.0);
        let law = ControlLaw::constant(v(&[2.0]), 1.0).unwrap();
        let traj = integrate(&p, &law, 300).unwrap();
        assert_eq!(traj.etas[10][0], 0.0);
        assert!((traj.etas[250][0] - 3.0 * S).abs() < 1e-9);
        assert!(inclusion_residual(&p, &traj) <= 1e-8);
    }

    #[test]
    fn sliding_has_no_normal_action() {
        let p = example::problem(-3.0);
        let law = ControlLaw::new(vec![0.0, 1.0, 1.5], vec![v(&[2.0]), v(&[-1.0])]).unwrap();
        let traj = integrate(&p, &law, 400).unwrap();
        for i in 300..400 {
            assert!(
                traj.etas[i][0].abs() < 1e-9,
                "step {i}: {}",
                traj.etas[i][0]
            );
        }
    }

    #[test]
    fn static_problem_keeps_state() {
        let mut p = example::problem(-3.0);
        p.g_b = DMatrix::zeros(2, 1);
        p.polyhedron = MovingPolyhedron::new(
            2,
            vec![crate::geometry::HalfspaceRow {
                normal: vec![S, S],
                offset0: S,
                offset_slope: 0.0,
            }],
        )
        .unwrap();
        let law = ControlLaw::constant(v(&[1.0]), 2.0).unwrap();
        let traj = integrate(&p, &law, 50).unwrap();
        assert!(traj.states.iter().all(|x| x == &p.x0));
        assert_eq!(inclusion_residual(&p, &traj), 0.0);
    }

    #[test]
    fn perturbed_state_shows_in_residual() {
        let p = example::problem(-3.0);
        let law = ControlLaw::constant(v(&[2.0]), 1.0).unwrap();
        let mut traj = integrate(&p, &law, 200).unwrap();
        let i = 150;
        traj.states[i + 1] -= p.polyhedron.normal(0) * 1e-3;
        let r = inclusion_residual(&p, &traj);
        // The moved state is interior, so the full normal part becomes residual.
        assert!(r > 1.0, "{r}");
    }

    #[test]
    fn law_sampling_is_right_continuous() {
        let law = ControlLaw::new(vec![0.0, 1.0, 2.0], vec![v(&[1.0]), v(&[-1.0])]).unwrap();
        assert_eq!(law.sample(0.5)[0], 1.0);
        assert_eq!(law.sample(1.0)[0], -1.0);
        assert_eq!(law.sample(5.0)[0], -1.0);
        assert_eq!(law.dominant_switch(), Some(1.0));
        assert!(ControlLaw::new(vec![0.0, 1.0, 1.0], vec![v(&[1.0]), v(&[1.0])]).is_err());
    }

    #[test]
    fn step_errors_carry_index() {
        let mut p = example::problem(-3.0);
        // Offsets collapse to an empty slab after t = 0.5.
        p.polyhedron = MovingPolyhedron::new(
            1,
            vec![
                crate::geometry::HalfspaceRow {
                    normal: vec![1.0],
                    offset0: 1.0,
                    offset_slope: -2.0,
                },
                crate::geometry::HalfspaceRow {
                    normal: vec![-1.0],
                    offset0: 0.0,
                    offset_slope: 0.0,
                },
            ],
        )
        .unwrap();
        p.g_a = DMatrix::zeros(1, 1);
        p.g_b = DMatrix::zeros(1, 1);
        p.g_c = v(&[0.0]);
        p.x0 = v(&[0.0]);
        let law = ControlLaw::constant(v(&[0.0]), 1.0).unwrap();
        match integrate(&p, &law, 10) {
            Err(SweepError::Step {
                step,
                source: GeometryError::EmptySet { .. },
            }) => assert_eq!(step, 5),
            other => panic!("{other:?}"),
        }
    }
}

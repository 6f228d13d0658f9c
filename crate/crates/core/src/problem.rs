//! Costs and feasibility bookkeeping for the discretized problem.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::default_tolerance;
use crate::sweeping::{DiscreteTrajectory, SweepingProblem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("reference trajectory incompatible: {0}")]
    IncompatibleReference(String),
}

/// Discretization settings, optionally with a reference `(x̄, ū, T̄)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizationConfig {
    pub k: usize,
    /// Radius of the locality checks.
    pub eps_locality: f64,
    /// Inflation of the endpoint sets.
    pub delta_endpoint: f64,
    pub reference: Option<DiscreteTrajectory>,
    /// Feasibility tolerance; defaults to the activity tolerance of each state.
    pub tolerance: Option<f64>,
}

impl DiscretizationConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            eps_locality: 1.0,
            delta_endpoint: 0.0,
            reference: None,
            tolerance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub state_feasible: bool,
    /// First grid index whose state leaves `C(t_i)`.
    pub first_infeasible_step: Option<usize>,
    pub endpoint_x_ok: bool,
    pub endpoint_t_ok: bool,
    pub locality_ok: bool,
    pub velocity_cap_ok: bool,
    pub max_violation: f64,
}

impl FeasibilityReport {
    pub fn ok(&self) -> bool {
        self.state_feasible
            && self.endpoint_x_ok
            && self.endpoint_t_ok
            && self.locality_ok
            && self.velocity_cap_ok
    }
}

/// `φ(x, T) = w_T·T + ½ Σ W_i (x_i − xref_i)²`.
pub fn phi(p: &SweepingProblem, x: &DVector<f64>, horizon: f64) -> f64 {
    let tracking: f64 = x
        .iter()
        .zip(p.phi_xref.iter())
        .zip(p.phi_w.iter())
        .map(|((xi, ri), wi)| wi * (xi - ri).powi(2))
        .sum();
    p.phi_wt * horizon + 0.5 * tracking
}

/// `∇_x φ`.
pub fn phi_gradient(p: &SweepingProblem, x: &DVector<f64>) -> DVector<f64> {
    (x - &p.phi_xref).component_mul(&p.phi_w)
}

/// Mayer cost `φ(x_k, T)`.
pub fn mayer_cost(p: &SweepingProblem, traj: &DiscreteTrajectory) -> f64 {
    phi(p, traj.final_state(), traj.horizon)
}

/// A subinterval on which both the candidate and the reference are constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Piece {
    pub cell: usize,
    /// Reference cell, or `None` past the reference horizon.
    pub ref_cell: Option<usize>,
    pub len: f64,
}

/// Common refinement of the candidate grid and the reference grid over
/// `[0, T]`. The reference is extended past `T̄` with zero velocity and its
/// last control.
pub(crate) fn merged_pieces(
    traj: &DiscreteTrajectory,
    reference: &DiscreteTrajectory,
) -> Vec<Piece> {
    let k = traj.k();
    let kr = reference.k();
    let mut out = Vec::with_capacity(k + kr);
    let mut j = 0;
    for i in 0..k {
        let (a, b) = (traj.time(i), traj.time(i + 1));
        let mut lo = a;
        while lo < b {
            while j < kr && reference.time(j + 1) <= lo {
                j += 1;
            }
            let (hi, ref_cell) = if j < kr {
                (reference.time(j + 1).min(b), Some(j))
            } else {
                (b, None)
            };
            if hi > lo {
                out.push(Piece {
                    cell: i,
                    ref_cell,
                    len: hi - lo,
                });
            }
            lo = hi;
        }
    }
    out
}

/// Reference velocity and control on a piece.
pub(crate) fn reference_values(
    reference: &DiscreteTrajectory,
    ref_cell: Option<usize>,
) -> (DVector<f64>, DVector<f64>) {
    match ref_cell {
        Some(j) => (reference.velocity(j), reference.controls[j].clone()),
        None => (
            DVector::zeros(reference.states[0].len()),
            reference.controls.last().unwrap().clone(),
        ),
    }
}

fn check_reference(
    traj: &DiscreteTrajectory,
    reference: &DiscreteTrajectory,
) -> Result<(), ProblemError> {
    if reference.k() == 0 || !(reference.horizon > 0.0) {
        return Err(ProblemError::IncompatibleReference(
            "reference needs k >= 1 and T > 0".into(),
        ));
    }
    if reference.states[0].len() != traj.states[0].len()
        || reference.controls[0].len() != traj.controls[0].len()
    {
        return Err(ProblemError::IncompatibleReference(
            "dimensions differ".into(),
        ));
    }
    Ok(())
}

/// `Σ_i ∫_cell ‖(y_i − ẋ̄, u_i − ū)‖² dt`, integrated exactly on the merged grid.
pub fn proximity_integral(
    traj: &DiscreteTrajectory,
    reference: &DiscreteTrajectory,
) -> Result<f64, ProblemError> {
    check_reference(traj, reference)?;
    let mut total = 0.0;
    let mut cache: Option<(usize, DVector<f64>)> = None;
    for piece in merged_pieces(traj, reference) {
        let y = match &cache {
            Some((c, y)) if *c == piece.cell => y.clone(),
            _ => {
                let y = traj.velocity(piece.cell);
                cache = Some((piece.cell, y.clone()));
                y
            }
        };
        let (yr, ur) = reference_values(reference, piece.ref_cell);
        total += piece.len
            * ((y - yr).norm_squared() + (&traj.controls[piece.cell] - ur).norm_squared());
    }
    Ok(total)
}

/// Proximity-augmented cost `φ + (T − T̄)² + ∫‖·‖²`; with no reference the
/// candidate is its own reference and the extra terms vanish.
pub fn pk_cost(
    p: &SweepingProblem,
    traj: &DiscreteTrajectory,
    cfg: &DiscretizationConfig,
) -> Result<f64, ProblemError> {
    let base = mayer_cost(p, traj);
    match &cfg.reference {
        None => Ok(base),
        Some(r) => Ok(base + (traj.horizon - r.horizon).powi(2) + proximity_integral(traj, r)?),
    }
}

/// Linear interpolation of the reference state at `t` (held constant past `T̄`).
fn reference_state(reference: &DiscreteTrajectory, t: f64) -> DVector<f64> {
    let k = reference.k();
    if t >= reference.horizon {
        return reference.final_state().clone();
    }
    let h = reference.h();
    let j = ((t / h).floor() as usize).min(k - 1);
    let s = (t - reference.time(j)) / h;
    &reference.states[j] * (1.0 - s) + &reference.states[j + 1] * s
}

/// Distance from `E x = e` in the Euclidean norm.
pub fn endpoint_distance(p: &SweepingProblem, x: &DVector<f64>) -> f64 {
    let e = &p.omega_x_e;
    if e.nrows() == 0 {
        return 0.0;
    }
    let r = e * x - &p.omega_x_rhs;
    // ‖Eᵀ(EEᵀ)⁺ r‖ is the distance to the affine set.
    let gram = e * e.transpose();
    let coeff = crate::linalg::lstsq(&gram, &r);
    (e.transpose() * coeff).norm()
}

/// Distance from `T` to `Ω_T`.
pub fn horizon_distance(p: &SweepingProblem, horizon: f64) -> f64 {
    let (lo, hi) = p.omega_t;
    (lo - horizon).max(horizon - hi).max(0.0)
}

/// Evaluate every constraint group of the discretized problem.
pub fn feasibility(
    p: &SweepingProblem,
    traj: &DiscreteTrajectory,
    cfg: &DiscretizationConfig,
) -> FeasibilityReport {
    let mut max_violation: f64 = 0.0;
    let mut first_infeasible_step = None;
    for (i, x) in traj.states.iter().enumerate() {
        let tol = cfg.tolerance.unwrap_or_else(|| default_tolerance(x));
        let worst = match p.polyhedron.eval_constraints(traj.time(i), x) {
            Ok(r) => r.max(),
            Err(_) => f64::INFINITY,
        };
        if worst > tol {
            max_violation = max_violation.max(worst);
            first_infeasible_step.get_or_insert(i);
        }
    }

    let xk = traj.final_state();
    let tol = cfg.tolerance.unwrap_or_else(|| default_tolerance(xk));
    let slack = cfg.delta_endpoint;
    let dx = endpoint_distance(p, xk);
    let endpoint_x_ok = dx <= tol + slack;
    if !endpoint_x_ok {
        max_violation = max_violation.max(dx - slack);
    }
    let dt = horizon_distance(p, traj.horizon);
    let endpoint_t_ok = dt <= tol + slack;
    if !endpoint_t_ok {
        max_violation = max_violation.max(dt - slack);
    }

    let mut locality_ok = true;
    if let Some(r) = &cfg.reference {
        let eps = cfg.eps_locality;
        let l2 = proximity_integral(traj, r).unwrap_or(f64::INFINITY);
        let mut sup: f64 = 0.0;
        for i in 0..traj.k() {
            let t = traj.time(i);
            let dxs = (&traj.states[i] - reference_state(r, t)).norm_squared();
            let uref = r.controls[((t / r.h()).floor() as usize).min(r.k() - 1)].clone();
            let dus = (&traj.controls[i] - uref).norm_squared();
            sup = sup.max((dxs + dus).sqrt());
        }
        let dtime = (traj.horizon - r.horizon).abs();
        let excess = (l2 - eps).max(sup - eps).max(dtime - eps);
        if excess > 0.0 {
            locality_ok = false;
            max_violation = max_violation.max(excess);
        }
    }

    let mut velocity_cap_ok = true;
    if let Some(l) = p.lipschitz {
        let (ok, vmax) = crate::sweeping::velocity_cap(traj, l);
        if !ok {
            velocity_cap_ok = false;
            max_violation = max_violation.max(vmax - l - 1.0);
        }
    }

    FeasibilityReport {
        state_feasible: first_infeasible_step.is_none(),
        first_infeasible_step,
        endpoint_x_ok,
        endpoint_t_ok,
        locality_ok,
        velocity_cap_ok,
        max_violation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example::{self, StrategyKind};
    use crate::sweeping::{integrate, ControlLaw};

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    fn case2() -> (SweepingProblem, DiscreteTrajectory) {
        let p = example::problem(-3.0);
        let law = ControlLaw::constant(v(&[2.0]), 1.0).unwrap();
        let t = integrate(&p, &law, 1000).unwrap();
        (p, t)
    }

    #[test]
    fn mayer_examples() {
        let p = example::problem(-3.0);
        assert!((phi(&p, &v(&[-1.0, 1.0]), 1.0) - 3.0).abs() < 1e-15);
        assert!((phi(&p, &v(&[-13.0 / 6.0, 1.0]), 71.0 / 36.0) - 167.0 / 72.0).abs() < 1e-14);
        let mut q = p.clone();
        q.phi_wt = 0.0;
        q.phi_w = v(&[0.0, 0.0]);
        let (_, t) = case2();
        assert_eq!(mayer_cost(&q, &t), 0.0);
    }

    #[test]
    fn self_reference_has_no_proximity() {
        let (p, t) = case2();
        let mut cfg = DiscretizationConfig::new(t.k());
        cfg.reference = Some(t.clone());
        assert_eq!(pk_cost(&p, &t, &cfg).unwrap(), mayer_cost(&p, &t));
    }

    #[test]
    fn one_cell_velocity_offset() {
        let (p, t) = case2();
        let mut shifted = t.clone();
        let off = v(&[0.3, -0.4]);
        let h = t.h();
        // Shift every state after step 10 so only cell 10 changes velocity.
        for x in shifted.states.iter_mut().skip(11) {
            *x += &off * h;
        }
        let mut cfg = DiscretizationConfig::new(t.k());
        cfg.reference = Some(t.clone());
        let extra = pk_cost(&p, &shifted, &cfg).unwrap() - mayer_cost(&p, &shifted);
        assert!((extra - h * off.norm_squared()).abs() < 1e-12, "{extra}");
    }

    #[test]
    fn optimal_beats_case_two_self_referenced() {
        let p = example::problem(-3.0);
        let cfg = DiscretizationConfig::new(2000);
        let best = example::strategy(StrategyKind::C3, -3.0).unwrap();
        let t3 = integrate(&p, &best.law, 2000).unwrap();
        let (_, t2) = case2();
        assert!(pk_cost(&p, &t3, &cfg).unwrap() < pk_cost(&p, &t2, &cfg).unwrap());
    }

    #[test]
    fn endpoint_checks() {
        let (p, t) = case2();
        let cfg = DiscretizationConfig::new(t.k());
        let rep = feasibility(&p, &t, &cfg);
        assert!(rep.state_feasible && rep.endpoint_t_ok);
        assert!((t.final_state()[1] - 1.0).abs() <= 5.0 * t.h());

        let short = ControlLaw::constant(v(&[2.0]), 0.25).unwrap();
        let t = integrate(&p, &short, 100).unwrap();
        assert!((t.final_state()[1] - 0.5).abs() < 1e-12);
        let rep = feasibility(&p, &t, &cfg);
        assert!(!rep.endpoint_x_ok);
        assert!((rep.max_violation - 0.5).abs() < 1e-12);
        let mut loose = cfg.clone();
        loose.delta_endpoint = 0.6;
        let rep = feasibility(&p, &t, &loose);
        assert!(rep.endpoint_x_ok && rep.ok());
    }

    #[test]
    fn infeasible_state_is_located() {
        let (p, mut t) = case2();
        t.states[700][0] += 0.1;
        let rep = feasibility(&p, &t, &DiscretizationConfig::new(t.k()));
        assert_eq!(rep.first_infeasible_step, Some(700));
        assert!(!rep.ok());
    }

    #[test]
    fn locality_against_a_distant_reference() {
        let p = example::problem(-3.0);
        let (_, t) = case2();
        let other = integrate(
            &p,
            &example::strategy(StrategyKind::C3, -3.0).unwrap().law,
            1000,
        )
        .unwrap();
        let mut cfg = DiscretizationConfig::new(1000);
        cfg.reference = Some(other);
        cfg.eps_locality = 0.1;
        assert!(!feasibility(&p, &t, &cfg).locality_ok);
        cfg.eps_locality = 100.0;
        assert!(feasibility(&p, &t, &cfg).locality_ok);
    }

    #[test]
    fn mismatched_reference_is_rejected() {
        let (_, t) = case2();
        let mut r = t.clone();
        r.controls = vec![v(&[1.0, 2.0]); r.k()];
        assert!(proximity_integral(&t, &r).is_err());
    }
}

//! The planar benchmark: a half-plane `x₁ + x₂ ≤ 1 − t` sweeping a state driven
//! by `ẋ = (0, u)`, `u ∈ [−2, 2]`, from the origin to the line `x₂ = 1` while
//! minimizing `T + ½(x₁(T) − α)²`.
//!
//! Four families of controls have closed-form costs; they are provided with
//! their switching times so simulations can be compared against them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::geometry::{HalfspaceRow, MovingPolyhedron};
use crate::sweeping::{ControlLaw, SweepingProblem};

/// Benchmark problem with tracking target `α` for `x₁(T)`.
pub fn problem(alpha: f64) -> SweepingProblem {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let polyhedron = MovingPolyhedron::new(
        2,
        vec![HalfspaceRow {
            normal: vec![s, s],
            offset0: s,
            offset_slope: -s,
        }],
    )
    .expect("benchmark polyhedron");
    SweepingProblem {
        polyhedron,
        g_a: DMatrix::zeros(2, 2),
        g_b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        g_c: DVector::zeros(2),
        u_lo: DVector::from_element(1, -2.0),
        u_hi: DVector::from_element(1, 2.0),
        x0: DVector::zeros(2),
        phi_wt: 1.0,
        phi_w: DVector::from_row_slice(&[1.0, 0.0]),
        phi_xref: DVector::from_row_slice(&[alpha, 0.0]),
        omega_x_e: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        omega_x_rhs: DVector::from_element(1, 1.0),
        omega_t: (0.0, f64::INFINITY),
        lipschitz: None,
    }
}

/// The four control families compared on the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    /// `u ≡ 2`, reach the line at `T = 1` with `x₁ = −1`.
    C1,
    /// Constant `u = 1 + 1/T` hitting the line at `x₁(T) = −T`.
    C644b,
    /// `u = 2` up to `τ`, then slide with `u = −1`.
    C2,
    /// `u = 2` up to `τ̄`, then leave the facet with `u = −2`.
    C3,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::C1,
        StrategyKind::C644b,
        StrategyKind::C2,
        StrategyKind::C3,
    ];

    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::C1 => "C1",
            StrategyKind::C644b => "6.44b",
            StrategyKind::C2 => "C2",
            StrategyKind::C3 => "C3",
        }
    }
}

/// A closed-form strategy at a given `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub law: ControlLaw,
    pub horizon: f64,
    /// Switching time for the two-phase families.
    pub switch: Option<f64>,
    pub cost: f64,
}

fn level(u: f64) -> DVector<f64> {
    DVector::from_element(1, u)
}

/// Closed-form strategy, or `None` where the family is not admissible.
pub fn strategy(kind: StrategyKind, alpha: f64) -> Option<Strategy> {
    match kind {
        StrategyKind::C1 => Some(Strategy {
            kind,
            law: ControlLaw::constant(level(2.0), 1.0).ok()?,
            horizon: 1.0,
            switch: None,
            cost: 1.0 + 0.5 * (-1.0 - alpha).powi(2),
        }),
        StrategyKind::C644b => {
            // x₁(T) = −T, optimal T = −α − 3/2, needs T ≥ 1 so that u ≤ 2.
            let t = -alpha - 1.5;
            if !(t >= 1.0) {
                return None;
            }
            Some(Strategy {
                kind,
                law: ControlLaw::constant(level(1.0 + 1.0 / t), t).ok()?,
                horizon: t,
                switch: None,
                cost: -alpha - 3.0 / 8.0,
            })
        }
        StrategyKind::C2 => {
            let tau = -1.0 / 3.0 - 2.0 * alpha / 3.0;
            let t = 1.5 * tau - 0.5;
            if !(tau > 1.0) {
                return None;
            }
            Some(Strategy {
                kind,
                law: ControlLaw::new(vec![0.0, tau, t], vec![level(2.0), level(-1.0)]).ok()?,
                horizon: t,
                switch: Some(tau),
                cost: -0.5 - alpha,
            })
        }
        StrategyKind::C3 => {
            let tau = -2.0 / 9.0 - 2.0 * alpha / 3.0;
            let t = 1.25 * tau - 0.25;
            if !(tau > 1.0) {
                return None;
            }
            Some(Strategy {
                kind,
                law: ControlLaw::new(vec![0.0, tau, t], vec![level(2.0), level(-2.0)]).ok()?,
                horizon: t,
                switch: Some(tau),
                cost: -13.0 / 72.0 - 5.0 * alpha / 6.0,
            })
        }
    }
}

/// Every admissible strategy at `α`, in the order C1, 6.44b, C2, C3.
pub fn strategies(alpha: f64) -> Vec<Strategy> {
    StrategyKind::ALL
        .iter()
        .filter_map(|&k| strategy(k, alpha))
        .collect()
}

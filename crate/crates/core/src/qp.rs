//! Euclidean projection onto `{x : A x ≤ b}` by a dual active-set method.
//!
//! The solver starts from the unconstrained minimizer `z` and adds violated
//! rows one at a time (lowest index first), dropping rows whose multiplier
//! would turn negative. Every iterate is dual feasible, so no interior starting
//! point is needed and an inconsistent system is detected along the way.

use nalgebra::{DMatrix, DVector};

/// Outcome of a projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// The nearest feasible point.
    pub x: DVector<f64>,
    /// Rows in the final working set, in insertion order.
    pub working_set: Vec<usize>,
    /// Multipliers matching `working_set`; `z − x = Σ u_j a_j`.
    pub multipliers: Vec<f64>,
}

/// Failure modes of [`project_polyhedron`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpFailure {
    /// The inequality system has no solution.
    Infeasible,
    /// Iteration cap reached.
    NoConvergence,
}

fn violation_tol(a_norm: f64, b: f64, x_norm: f64) -> f64 {
    1e-12 * (1.0 + b.abs() + a_norm * x_norm)
}

/// Project `z` onto `{x : a_j·x ≤ b_j}` where `a_j` are the rows of `a`.
pub fn project_polyhedron(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<Projection, QpFailure> {
    let s = a.nrows();
    let n = a.ncols();
    let row_norms: Vec<f64> = (0..s).map(|j| a.row(j).norm()).collect();
    let mut x = z.clone();
    let mut working: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let max_iter = 50 * (s + 1) * (n + 1) + 100;
    let mut iter = 0;

    loop {
        let x_norm = x.norm();
        let mut enter = None;
        for j in 0..s {
            if working.contains(&j) {
                continue;
            }
            let r = a.row(j).dot(&x.transpose()) - b[j];
            if r > violation_tol(row_norms[j], b[j], x_norm) {
                enter = Some(j);
                break;
            }
        }
        let Some(p) = enter else {
            return Ok(Projection {
                x,
                working_set: working,
                multipliers: u,
            });
        };
        let ap: DVector<f64> = a.row(p).transpose();
        let mut up = 0.0;

        loop {
            iter += 1;
            if iter > max_iter {
                return Err(QpFailure::NoConvergence);
            }
            let q = working.len();
            let (r, d) = if q == 0 {
                (DVector::zeros(0), ap.clone())
            } else {
                let mut nmat = DMatrix::zeros(n, q);
                for (c, &j) in working.iter().enumerate() {
                    nmat.set_column(c, &a.row(j).transpose());
                }
                let gram = nmat.transpose() * &nmat;
                let rhs = nmat.transpose() * &ap;
                let r = match gram.clone().cholesky() {
                    Some(ch) => ch.solve(&rhs),
                    None => crate::linalg::lstsq(&gram, &rhs),
                };
                let d = &ap - &nmat * &r;
                (r, d)
            };

            let dd = d.norm_squared();
            let full = if dd > 1e-14 * row_norms[p] * row_norms[p] {
                let viol = ap.dot(&x) - b[p];
                Some(viol.max(0.0) / dd)
            } else {
                None
            };

            let mut partial: Option<(f64, usize)> = None;
            for (c, &rc) in r.iter().enumerate() {
                if rc > 0.0 {
                    let step = u[c] / rc;
                    match partial {
                        Some((best, _)) if step >= best => {}
                        _ => partial = Some((step, c)),
                    }
                }
            }

            match (full, partial) {
                (None, None) => return Err(QpFailure::Infeasible),
                (Some(t), pc) if pc.is_none_or(|(tp, _)| t <= tp) => {
                    x -= &d * t;
                    for (c, rc) in r.iter().enumerate() {
                        u[c] -= t * rc;
                    }
                    up += t;
                    working.push(p);
                    u.push(up);
                    break;
                }
                (_, Some((t, c_out))) => {
                    x -= &d * t;
                    for (c, rc) in r.iter().enumerate() {
                        u[c] -= t * rc;
                    }
                    up += t;
                    working.remove(c_out);
                    u.remove(c_out);
                }
                (Some(_), None) => unreachable!(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halfspace_projection() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let a = DMatrix::from_row_slice(1, 2, &[s, s]);
        let b = DVector::from_vec(vec![s]);
        let z = DVector::from_vec(vec![0.0, 2.0]);
        let p = project_polyhedron(&a, &b, &z).unwrap();
        assert!((p.x[0] + 0.5).abs() < 1e-12);
        assert!((p.x[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn corner_projection() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let z = DVector::from_vec(vec![3.0, 2.0]);
        let p = project_polyhedron(&a, &b, &z).unwrap();
        assert!((p.x[0] - 1.0).abs() < 1e-12 && (p.x[1] - 1.0).abs() < 1e-12);
        let mut ws = p.working_set.clone();
        ws.sort();
        assert_eq!(ws, vec![0, 1]);
    }

    #[test]
    fn drops_row_when_multiplier_turns_negative() {
        // Wedge x2 ≤ 0, x1 + x2 ≤ 0; point far right only needs the second row.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![0.0, 0.0]);
        let z = DVector::from_vec(vec![2.0, 0.5]);
        let p = project_polyhedron(&a, &b, &z).unwrap();
        assert!((a.row(0).dot(&p.x.transpose())) <= 1e-12);
        assert!((a.row(1).dot(&p.x.transpose())) <= 1e-12);
        assert!(p.multipliers.iter().all(|&m| m >= -1e-12));
    }

    #[test]
    fn detects_empty_slab() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![0.0, -1.0]);
        let z = DVector::from_vec(vec![5.0]);
        assert_eq!(project_polyhedron(&a, &b, &z), Err(QpFailure::Infeasible));
    }
}

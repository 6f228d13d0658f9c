//! Randomized invariants of the geometry, integrator, costs, certificates and
//! spec files.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use sweepopt::certificates::{check_certificate, solve_multipliers};
use sweepopt::geometry::{HalfspaceRow, MovingPolyhedron};
use sweepopt::problem::{feasibility, mayer_cost, pk_cost, DiscretizationConfig};
use sweepopt::specfile::{emit_spec, parse_spec, spec_from_problem};
use sweepopt::sweeping::{integrate, ControlLaw, SweepingProblem};

/// Polyhedron with `s` rows in `R^n` that contains `center + t·drift` with
/// the given slacks (zero slack puts the point on the row).
#[derive(Debug, Clone)]
struct Poly {
    c: MovingPolyhedron,
    center: DVector<f64>,
    drift: DVector<f64>,
}

fn unit(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.2).then(|| v.iter().map(|x| x / n).collect())
}

fn poly_strategy(max_n: usize, max_s: usize) -> impl Strategy<Value = Poly> {
    (1..=max_n, 1..=max_s).prop_flat_map(|(n, s)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0..1.0f64, n), s),
            prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64], s),
            prop::collection::vec(-1.0..1.0f64, n),
            prop::collection::vec(-0.5..0.5f64, n),
        )
            .prop_filter_map(
                "degenerate normal",
                move |(normals, slacks, center, drift)| {
                    let normals: Option<Vec<Vec<f64>>> = normals.into_iter().map(unit).collect();
                    let normals = normals?;
                    let center = DVector::from_vec(center);
                    let drift = DVector::from_vec(drift);
                    let rows = normals
                        .iter()
                        .zip(&slacks)
                        .map(|(a, sl)| {
                            let av = DVector::from_column_slice(a);
                            HalfspaceRow {
                                normal: a.clone(),
                                offset0: av.dot(&center) + sl,
                                offset_slope: av.dot(&drift),
                            }
                        })
                        .collect();
                    let c = MovingPolyhedron::new(n, rows).ok()?;
                    Some(Poly { c, center, drift })
                },
            )
    })
}

/// Nearest point by trying every subset of rows as the active set.
fn projection_oracle(c: &MovingPolyhedron, t: f64, z: &DVector<f64>) -> DVector<f64> {
    let s = c.num_rows();
    let a = c.normal_matrix();
    let b = c.offsets(t);
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << s) {
        let rows: Vec<usize> = (0..s).filter(|j| mask & (1 << j) != 0).collect();
        let x = if rows.is_empty() {
            z.clone()
        } else {
            let aj = DMatrix::from_fn(rows.len(), c.dim(), |r, col| a[(rows[r], col)]);
            let gram = &aj * aj.transpose();
            if gram.determinant().abs() < 1e-10 {
                continue;
            }
            let bj = DVector::from_iterator(rows.len(), rows.iter().map(|&j| b[j]));
            let mu = gram.lu().solve(&(&aj * z - bj)).unwrap();
            if mu.iter().any(|&m| m < -1e-10) {
                continue;
            }
            z - aj.transpose() * mu
        };
        if (a * &x - &b).iter().all(|&r| r <= 1e-9) {
            let d = (&x - z).norm();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, x));
            }
        }
    }
    best.expect("a feasible polyhedron has a projection").1
}

fn point(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_matches_enumeration((poly, z, t) in poly_strategy(3, 4).prop_flat_map(|p| {
        let n = p.c.dim();
        (Just(p), point(n), 0.0..2.0f64)
    })) {
        let z = DVector::from_vec(z);
        let x = poly.c.project(t, &z).unwrap();
        let oracle = projection_oracle(&poly.c, t, &z);
        prop_assert!((&x - &oracle).norm() <= 1e-9, "solver {x} oracle {oracle}");
    }

    #[test]
    fn projection_is_idempotent_and_nonexpansive((poly, z1, z2, t) in poly_strategy(3, 4).prop_flat_map(|p| {
        let n = p.c.dim();
        (Just(p), point(n), point(n), 0.0..2.0f64)
    })) {
        let (z1, z2) = (DVector::from_vec(z1), DVector::from_vec(z2));
        let x1 = poly.c.project(t, &z1).unwrap();
        let x2 = poly.c.project(t, &z2).unwrap();
        prop_assert!((poly.c.project(t, &x1).unwrap() - &x1).norm() <= 1e-12);
        prop_assert!((&x1 - &x2).norm() <= (&z1 - &z2).norm() + 1e-9);
    }

    #[test]
    fn normal_cone_elements_are_polar((poly, z, w, ys, t) in poly_strategy(3, 4).prop_flat_map(|p| {
        let n = p.c.dim();
        (Just(p), point(n), point(n), prop::collection::vec(point(n), 20), 0.0..2.0f64)
    })) {
        let x = poly.c.project(t, &DVector::from_vec(z)).unwrap();
        let w = DVector::from_vec(w);
        let dec = poly.c.normal_decompose(t, &x, &w).unwrap();
        // Keep only the part of w that lies in the cone.
        let cone_part = poly.c.normal_matrix().tr_mul(&dec.coefficients);
        let center = &poly.center + &poly.drift * t;
        for y in ys {
            let y = poly.c.project(t, &(&center + DVector::from_vec(y))).unwrap();
            prop_assert!(cone_part.dot(&(&y - &x)) <= 1e-8);
        }
    }

    #[test]
    fn tangent_and_normal_parts_split_a_vector((poly, z, v, t) in poly_strategy(3, 4).prop_flat_map(|p| {
        let n = p.c.dim();
        (Just(p), point(n), point(n), 0.0..2.0f64)
    })) {
        let x = poly.c.project(t, &DVector::from_vec(z)).unwrap();
        let v = DVector::from_vec(v);
        let tangent = poly.c.tangent_project(t, &x, &v).unwrap();
        let normal = &v - &tangent;
        let dec = poly.c.normal_decompose(t, &x, &normal).unwrap();
        prop_assert!(dec.residual <= 1e-8 * (1.0 + v.norm()));
        prop_assert!(tangent.dot(&normal).abs() <= 1e-8 * (1.0 + v.norm_squared()));
    }
}

/// Random affine sweeping problem whose moving set always contains
/// `center + t·drift`; the initial state is that point.
fn problem_strategy() -> impl Strategy<Value = SweepingProblem> {
    (poly_strategy(3, 3), 1usize..=2).prop_flat_map(|(poly, d)| {
        let n = poly.c.dim();
        (
            Just(poly),
            prop::collection::vec(-0.5..0.5f64, n * n),
            prop::collection::vec(-1.0..1.0f64, n * d),
            prop::collection::vec(-1.0..1.0f64, n),
            prop::collection::vec(0.2..2.0f64, d),
            prop::collection::vec(0.0..1.0f64, n),
            prop::collection::vec(-1.0..1.0f64, n),
        )
            .prop_map(move |(poly, a, b, c, width, w, xref)| SweepingProblem {
                polyhedron: poly.c.clone(),
                g_a: DMatrix::from_row_slice(n, n, &a),
                g_b: DMatrix::from_row_slice(n, d, &b),
                g_c: DVector::from_vec(c),
                u_lo: DVector::from_iterator(d, width.iter().map(|w| -w)),
                u_hi: DVector::from_vec(width),
                x0: poly.center.clone(),
                phi_wt: 1.0,
                phi_w: DVector::from_vec(w),
                phi_xref: DVector::from_vec(xref),
                omega_x_e: DMatrix::zeros(0, n),
                omega_x_rhs: DVector::zeros(0),
                omega_t: (0.0, f64::INFINITY),
                lipschitz: None,
            })
    })
}

fn law_strategy(d: usize) -> impl Strategy<Value = (ControlLaw, Vec<f64>)> {
    (
        0.2..2.0f64,
        0.1..0.9f64,
        prop::collection::vec(-1.0..1.0f64, 2 * d),
    )
        .prop_map(move |(t, f, raw)| {
            let levels = vec![
                DVector::from_column_slice(&raw[..d]),
                DVector::from_column_slice(&raw[d..]),
            ];
            (ControlLaw::new(vec![0.0, f * t, t], levels).unwrap(), raw)
        })
}

/// Scale unit-box levels into the problem's box.
fn fit_law(p: &SweepingProblem, law: &ControlLaw) -> ControlLaw {
    let levels = law
        .levels()
        .iter()
        .map(|l| DVector::from_iterator(l.len(), (0..l.len()).map(|c| l[c] * p.u_hi[c])))
        .collect();
    ControlLaw::new(law.breakpoints().to_vec(), levels).unwrap()
}

fn problem_and_law() -> impl Strategy<Value = (SweepingProblem, ControlLaw)> {
    problem_strategy().prop_flat_map(|p| {
        let d = p.d();
        (Just(p), law_strategy(d)).prop_map(|(p, (law, _))| {
            let law = fit_law(&p, &law);
            (p, law)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eta_is_nonnegative_and_supported_on_active_rows((p, law) in problem_and_law(), k in 5usize..80) {
        let traj = integrate(&p, &law, k).unwrap();
        for i in 0..k {
            let r = p.polyhedron.eval_constraints(traj.time(i + 1), &traj.states[i + 1]).unwrap();
            let tol = 1e-8 * (1.0 + traj.states[i + 1].norm());
            for j in 0..p.s() {
                prop_assert!(traj.etas[i][j] >= 0.0);
                if r[j] < -tol {
                    prop_assert_eq!(traj.etas[i][j], 0.0);
                }
            }
        }
    }

    #[test]
    fn feasibility_is_monotone_in_the_endpoint_slack((p, law) in problem_and_law(), d1 in 0.0..1.0f64, d2 in 0.0..1.0f64) {
        let mut p = p;
        p.omega_x_e = DMatrix::from_fn(1, p.n(), |_, c| if c == 0 { 1.0 } else { 0.0 });
        p.omega_x_rhs = DVector::from_element(1, 0.3);
        let traj = integrate(&p, &law, 40).unwrap();
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let mut cfg = DiscretizationConfig::new(40);
        cfg.delta_endpoint = lo;
        let tight = feasibility(&p, &traj, &cfg);
        cfg.delta_endpoint = hi;
        let loose = feasibility(&p, &traj, &cfg);
        prop_assert!(!tight.ok() || loose.ok());
        prop_assert!(!tight.endpoint_x_ok || loose.endpoint_x_ok);
    }

    #[test]
    fn proximity_cost_dominates_the_mayer_cost((p, law) in problem_and_law(), scale in 0.5..1.5f64) {
        let traj = integrate(&p, &law, 30).unwrap();
        let other = ControlLaw::new(
            law.breakpoints().iter().map(|b| b * scale).collect(),
            law.levels().to_vec(),
        ).unwrap();
        let reference = integrate(&p, &other, 50).unwrap();
        let mut cfg = DiscretizationConfig::new(30);
        cfg.reference = Some(reference.clone());
        let j = pk_cost(&p, &traj, &cfg).unwrap();
        prop_assert!(j >= mayer_cost(&p, &traj) + (traj.horizon - reference.horizon).powi(2) - 1e-12);
    }

    #[test]
    fn q_telescopes_on_random_problems((p, law) in problem_and_law(), k in 5usize..60) {
        let traj = integrate(&p, &law, k).unwrap();
        let Ok(b) = solve_multipliers(&p, &traj, &DiscretizationConfig::new(k)) else { return Ok(()); };
        let a = p.polyhedron.normal_matrix();
        prop_assert_eq!(&b.q[k], &b.p[k]);
        for i in 0..k {
            let mut jump = &b.p[i] - &b.p[i + 1] + a.tr_mul(&b.gamma[i]) * traj.h();
            if i + 1 == k {
                jump += a.tr_mul(&b.atom);
            }
            prop_assert!((&b.q[i] - &b.q[i + 1] - jump).norm() <= 1e-9 * (1.0 + b.q[i].norm()));
        }
        let r = check_certificate(&p, &traj, &b, None).unwrap();
        prop_assert!(r.stationarity_resid <= r.tolerance);
        prop_assert!(r.dynamics_resid <= 1e-6);
    }

    #[test]
    fn spec_emit_then_load_round_trips(p in problem_strategy()) {
        let text = emit_spec(&spec_from_problem("random", &p));
        let back = parse_spec(&text).unwrap();
        prop_assert_eq!(back.problem, p);
    }
}

//! End-to-end acceptance checks on the planar benchmark and on random
//! polyhedra. Prints one PASS/FAIL line per criterion and exits non-zero if
//! any criterion fails.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sweepopt::certificates::{check_certificate, solve_multipliers};
use sweepopt::commands::{cmd_optimize, OptimizeOptions};
use sweepopt::example::{self, StrategyKind};
use sweepopt::geometry::{HalfspaceRow, MovingPolyhedron};
use sweepopt::optimizer::{optimize, OptimizerConfig};
use sweepopt::problem::{mayer_cost, DiscretizationConfig};
use sweepopt::specfile::example_spec;
use sweepopt::sweeping::{first_activity_time, integrate, ControlLaw};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn constant_two(horizon: f64) -> ControlLaw {
    ControlLaw::constant(DVector::from_element(1, 2.0), horizon).unwrap()
}

fn hitting_time() -> Outcome {
    let start = Instant::now();
    let p = example::problem(-3.0);
    let k = 3000;
    let traj = integrate(&p, &constant_two(1.0), k).unwrap();
    let th = first_activity_time(&p, &traj).unwrap_or(f64::NAN);
    let secs = start.elapsed().as_secs_f64();
    let h = traj.h();
    let pass = (th - 1.0 / 3.0).abs() <= 2.0 * h && secs < 1.0;
    outcome(
        pass,
        format!(
            "t_h = {th:.6} (target 1/3, band {:.1e}), {secs:.2}s",
            2.0 * h
        ),
    )
}

fn contact_slopes() -> Outcome {
    let p = example::problem(-3.0);
    let k = 3000;
    let traj = integrate(&p, &constant_two(1.0), k).unwrap();
    let h = traj.h();
    let on_facet = |i: usize| {
        let r = p
            .polyhedron
            .eval_constraints(traj.time(i), &traj.states[i])
            .unwrap();
        r[0] >= -1e-8 * (1.0 + traj.states[i].norm())
    };
    let (mut dv, mut de, mut steps) = (0.0f64, 0.0f64, 0);
    for i in 0..k {
        if on_facet(i) && on_facet(i + 1) {
            let v = traj.velocity(i);
            dv = dv.max((v[0] + 1.5).abs()).max((v[1] - 0.5).abs());
            de = de.max((traj.etas[i][0] - 3.0 * FRAC_1_SQRT_2).abs());
            steps += 1;
        }
    }
    let pass = steps > 0 && dv <= 5.0 * h && de <= 5.0 * h;
    outcome(
        pass,
        format!(
            "{steps} facet steps, velocity error {dv:.1e}, eta error {de:.1e}, band {:.1e}",
            5.0 * h
        ),
    )
}

fn strategy_costs() -> Outcome {
    let start = Instant::now();
    let p = example::problem(-3.0);
    let targets = [
        (StrategyKind::C1, 3.0),
        (StrategyKind::C644b, 2.625),
        (StrategyKind::C2, 2.5),
        (StrategyKind::C3, 167.0 / 72.0),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (kind, target) in targets {
        let s = example::strategy(kind, -3.0).unwrap();
        let j = mayer_cost(&p, &integrate(&p, &s.law, 4000).unwrap());
        pass &= (j - target).abs() <= 1e-2 && (s.cost - target).abs() <= 1e-12;
        parts.push(format!("{} {j:.5}", kind.label()));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 5.0;
    outcome(pass, format!("{}, {secs:.2}s", parts.join(", ")))
}

fn optimizer_recovers_the_switch() -> Outcome {
    let start = Instant::now();
    let p = example::problem(-3.0);
    let mut cfg = OptimizerConfig::new(3, 4000);
    cfg.t_bracket = Some(sweepopt::commands::DEFAULT_T_BRACKET);
    let r = match optimize(&p, &cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("optimizer failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let tau = r.dominant_switch().unwrap_or(f64::NAN);
    let pass = (r.cost - 167.0 / 72.0).abs() <= 1e-2
        && (tau - 16.0 / 9.0).abs() <= 2e-2
        && (r.horizon - 71.0 / 36.0).abs() <= 2e-2
        && secs < 30.0;
    outcome(
        pass,
        format!(
            "J = {:.5}, switch = {tau:.4}, T = {:.4}, {secs:.1}s",
            r.cost, r.horizon
        ),
    )
}

fn ordering_sweep() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for alpha in [-2.2, -2.5, -3.0] {
        let p = example::problem(alpha);
        let rows: Vec<(String, f64, f64)> = example::strategies(alpha)
            .into_iter()
            .map(|s| {
                let j = mayer_cost(&p, &integrate(&p, &s.law, 4000).unwrap());
                (s.kind.label().to_string(), s.cost, j)
            })
            .collect();
        for a in &rows {
            pass &= (a.2 - a.1).abs() <= 1e-2;
            for b in &rows {
                if a.1 < b.1 - 1e-2 {
                    pass &= a.2 < b.2;
                } else if (a.1 - b.1).abs() <= 1e-12 {
                    pass &= (a.2 - b.2).abs() <= 1e-2;
                }
            }
        }
        let mut sorted = rows.clone();
        sorted.sort_by(|a, b| a.2.total_cmp(&b.2));
        parts.push(format!(
            "{alpha}: {}",
            sorted
                .iter()
                .map(|r| r.0.as_str())
                .collect::<Vec<_>>()
                .join("<")
        ));
    }
    let p = example::problem(-2.5);
    let c1 = mayer_cost(
        &p,
        &integrate(
            &p,
            &example::strategy(StrategyKind::C1, -2.5).unwrap().law,
            4000,
        )
        .unwrap(),
    );
    let b = mayer_cost(
        &p,
        &integrate(
            &p,
            &example::strategy(StrategyKind::C644b, -2.5).unwrap().law,
            4000,
        )
        .unwrap(),
    );
    pass &= (c1 - b).abs() <= 1e-2 && (c1 - 2.125).abs() <= 1e-2;
    parts.push(format!("C1 = {c1:.5}, 6.44b = {b:.5} at -5/2"));
    outcome(pass, parts.join("; "))
}

fn case_two_certificate() -> Outcome {
    let p = example::problem(-3.0);
    let k = 4000;
    let traj = integrate(&p, &constant_two(1.0), k).unwrap();
    let h = traj.h();
    let bundle = match solve_multipliers(&p, &traj, &DiscretizationConfig::new(k)) {
        Ok(b) => b,
        Err(e) => return outcome(false, format!("solve failed: {e}")),
    };
    let r = check_certificate(&p, &traj, &bundle, None).unwrap();
    let band = 10.0 * h;
    let pass = bundle.mu0 == 1.0
        && r.stationarity_resid <= band
        && r.transversality_resid <= band
        && r.hbar_minus_mu <= band
        && r.complementarity_ok
        && r.sign_ok
        && r.nontriviality_norm >= 1.0;
    outcome(
        pass,
        format!(
            "mu0 = {}, lambda = {:.4}, stationarity {:.1e}, transversality {:.1e}, Hbar-mu {:.1e}, nontriviality {:.3}",
            bundle.mu0, bundle.lambda_t[0], r.stationarity_resid, r.transversality_resid, r.hbar_minus_mu, r.nontriviality_norm
        ),
    )
}

/// Random polyhedron containing `center` at time `t`, with some rows tight.
fn random_polyhedron(rng: &mut ChaCha8Rng) -> (MovingPolyhedron, DVector<f64>, f64) {
    let n = rng.gen_range(1..=3);
    let s = rng.gen_range(1..=4);
    let t = rng.gen_range(0.0..2.0);
    let center = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let mut rows = Vec::new();
    while rows.len() < s {
        let a = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        if a.norm() < 0.2 {
            continue;
        }
        let a = a.normalize();
        let slack = if rng.gen_bool(0.3) {
            0.0
        } else {
            rng.gen_range(0.0..1.0)
        };
        let slope = rng.gen_range(-1.0..1.0);
        let b = a.dot(&center) + slack;
        rows.push(HalfspaceRow {
            normal: a.iter().copied().collect(),
            offset0: b - slope * t,
            offset_slope: slope,
        });
    }
    (MovingPolyhedron::new(n, rows).unwrap(), center, t)
}

fn enumeration_projection(c: &MovingPolyhedron, t: f64, z: &DVector<f64>) -> DVector<f64> {
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
    best.unwrap().1
}

fn projection_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (c, _, t) = random_polyhedron(&mut rng);
        let z = DVector::from_fn(c.dim(), |_, _| rng.gen_range(-3.0..3.0));
        let x = c.project(t, &z).unwrap();
        worst = worst.max((x - enumeration_projection(&c, t, &z)).norm());
    }
    outcome(
        worst <= 1e-9,
        format!("200 polyhedra, max discrepancy {worst:.1e}"),
    )
}

fn cone_polarity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = f64::NEG_INFINITY;
    let mut pairs = 0;
    while pairs < 1000 {
        let (c, center, t) = random_polyhedron(&mut rng);
        let z = DVector::from_fn(c.dim(), |_, _| rng.gen_range(-3.0..3.0));
        let x = c.project(t, &z).unwrap();
        let active = c.active_set_default(t, &x).unwrap();
        let mut w = DVector::zeros(c.dim());
        for &j in &active.indices {
            w += c.normal(j) * rng.gen_range(0.0..2.0);
        }
        if c.normal_decompose(t, &x, &w).unwrap().residual > 1e-12 {
            continue;
        }
        pairs += 1;
        for _ in 0..1000 {
            let y = DVector::from_fn(c.dim(), |_, _| rng.gen_range(-3.0..3.0)) + &center;
            let y = c.project(t, &y).unwrap();
            worst = worst.max(w.dot(&(y - &x)));
        }
    }
    outcome(
        worst <= 1e-8,
        format!("{pairs} pairs x 1000 samples, max <w, y-x> = {worst:.1e}"),
    )
}

fn mesh_convergence() -> Outcome {
    let p = example::problem(-3.0);
    let mut pass = true;
    let mut parts = Vec::new();
    for s in example::strategies(-3.0) {
        let errors: Vec<f64> = [500, 1000, 2000]
            .iter()
            .map(|&k| (mayer_cost(&p, &integrate(&p, &s.law, k).unwrap()) - s.cost).abs())
            .collect();
        let ratios = [errors[1] / errors[0], errors[2] / errors[1]];
        let ok = ratios.iter().all(|r| (0.3..=0.7).contains(r));
        pass &= ok;
        parts.push(format!(
            "{} errors {:.1e}/{:.1e}/{:.1e} ratios {:.2}/{:.2}",
            s.kind.label(),
            errors[0],
            errors[1],
            errors[2],
            ratios[0],
            ratios[1]
        ));
    }
    outcome(pass, parts.join("; "))
}

fn determinism() -> Outcome {
    let spec = example_spec();
    let opts = OptimizeOptions {
        segments: 3,
        steps: 4000,
        seed: 42,
        t_bracket: None,
    };
    let run = || cmd_optimize(&spec, &opts, BTreeMap::new()).map(|r| r.canonical_json());
    match (run(), run()) {
        (Ok(a), Ok(b)) => outcome(a == b, format!("{} bytes, identical = {}", a.len(), a == b)),
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("optimize failed: {e}")),
    }
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("hitting time", hitting_time),
        ("contact-arc slopes", contact_slopes),
        ("strategy costs", strategy_costs),
        ("optimizer", optimizer_recovers_the_switch),
        ("ordering sweep", ordering_sweep),
        ("certificate on the u = 2 trajectory", case_two_certificate),
        ("projection oracle", projection_oracle),
        ("cone polarity", cone_polarity),
        ("mesh convergence", mesh_convergence),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        println!(
            "{} criterion {}: {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

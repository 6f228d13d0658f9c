//! The operations behind the command-line subcommands, as library calls that
//! return a [`RunReport`].

use std::collections::BTreeMap;
use std::time::Instant;

use thiserror::Error;

use crate::certificates::{
    check_certificate, solve_multipliers, CertificateError, MultiplierBundle,
};
use crate::example;
use crate::optimizer::{optimize, refine, OptimizerConfig, OptimizerError};
use crate::problem::{feasibility, mayer_cost, DiscretizationConfig};
use crate::report::{RunReport, StrategyRow, SweepRow, TrajectorySamples};
use crate::specfile::{LoadedSpec, SpecError};
use crate::sweeping::{
    first_activity_time, integrate, recover_eta, ControlLaw, DiscreteTrajectory, SweepError,
};

/// Horizon bracket used when the horizon set is unbounded and none is given.
pub const DEFAULT_T_BRACKET: (f64, f64) = (0.5, 4.0);

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("usage: {0}")]
    Usage(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
}

impl CommandError {
    /// Process exit status: 2 for bad input, 1 for failures of the run itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Spec(_) | CommandError::Usage(_) | CommandError::Input(_) => 2,
            CommandError::Certificate(CertificateError::Shape(_)) => 2,
            CommandError::Sweep(SweepError::InvalidLaw(_) | SweepError::InvalidProblem(_)) => 2,
            _ => 1,
        }
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Integrate `law` with `k` steps and report the trajectory.
pub fn cmd_simulate(
    spec: &LoadedSpec,
    law: &ControlLaw,
    k: usize,
    flags: BTreeMap<String, String>,
) -> Result<RunReport, CommandError> {
    let start = Instant::now();
    let p = &spec.problem;
    let traj = integrate(p, law, k)?;
    let mut report = RunReport::new("simulate", &spec.file, flags, spec.warnings.clone());
    report.cost = Some(mayer_cost(p, &traj));
    report.first_activity_time = first_activity_time(p, &traj);
    let feas = feasibility(p, &traj, &DiscretizationConfig::new(k));
    if !feas.endpoint_x_ok || !feas.endpoint_t_ok {
        report
            .messages
            .push("trajectory does not end in the endpoint set".into());
    }
    report.feasibility = Some(feas);
    report.trajectory = Some(TrajectorySamples::from_trajectory(&traj));
    report
        .volatile
        .timings_ms
        .insert("total".into(), elapsed_ms(start));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOptions {
    pub segments: usize,
    pub steps: usize,
    pub seed: u64,
    pub t_bracket: Option<(f64, f64)>,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            segments: 3,
            steps: 4000,
            seed: 0,
            t_bracket: None,
        }
    }
}

fn optimizer_config(spec: &LoadedSpec, opts: &OptimizeOptions) -> OptimizerConfig {
    let mut cfg = OptimizerConfig::new(opts.segments, opts.steps);
    cfg.seed = opts.seed;
    let (lo, hi) = spec.problem.omega_t;
    cfg.t_bracket = opts.t_bracket.or_else(|| {
        (!hi.is_finite()).then(|| {
            (
                DEFAULT_T_BRACKET.0.max(lo),
                DEFAULT_T_BRACKET.1.max(lo + DEFAULT_T_BRACKET.0),
            )
        })
    });
    cfg
}

/// Optimize, refine once on the doubled grid, and certify the winner.
pub fn cmd_optimize(
    spec: &LoadedSpec,
    opts: &OptimizeOptions,
    flags: BTreeMap<String, String>,
) -> Result<RunReport, CommandError> {
    let start = Instant::now();
    let p = &spec.problem;
    let cfg = optimizer_config(spec, opts);
    let coarse = optimize(p, &cfg)?;
    let t_opt = elapsed_ms(start);
    let fine = refine(p, &coarse, 2 * opts.steps)?;
    let t_refine = elapsed_ms(start) - t_opt;
    let traj = integrate(p, &fine.law, fine.k)?;

    let mut report = RunReport::new("optimize", &spec.file, flags, spec.warnings.clone());
    report.cost = Some(fine.cost);
    report.first_activity_time = first_activity_time(p, &traj);
    let mut dcfg = DiscretizationConfig::new(fine.k);
    dcfg.delta_endpoint = cfg.endpoint_tolerance;
    report.feasibility = Some(feasibility(p, &traj, &dcfg));
    match solve_multipliers(p, &traj, &dcfg).and_then(|b| check_certificate(p, &traj, &b, None)) {
        Ok(cert) => {
            if !cert.ok() {
                report.messages.push(format!(
                    "certificate conditions not met: {}",
                    cert.violations.join(", ")
                ));
            }
            report.certificate = Some(cert);
        }
        Err(e) => report
            .messages
            .push(format!("certificate unavailable: {e}")),
    }
    report.trajectory = Some(TrajectorySamples::from_trajectory(&traj));
    report.optimizer = Some(coarse);
    report.refined = Some(fine);
    let timings = &mut report.volatile.timings_ms;
    timings.insert("optimize".into(), t_opt);
    timings.insert("refine".into(), t_refine);
    timings.insert("total".into(), elapsed_ms(start));
    Ok(report)
}

/// Where the multipliers checked by [`cmd_certify`] come from.
#[derive(Debug, Clone, PartialEq)]
pub enum BundleSource {
    Solve,
    Zero,
    Given(Box<MultiplierBundle>),
}

/// Check feasibility of `traj`, build or load multipliers, and check them.
/// `report.ok` is true only when every condition holds.
pub fn cmd_certify(
    spec: &LoadedSpec,
    mut traj: DiscreteTrajectory,
    source: BundleSource,
    tol: Option<f64>,
    flags: BTreeMap<String, String>,
) -> Result<RunReport, CommandError> {
    let start = Instant::now();
    let p = &spec.problem;
    let s = if traj.etas.is_empty() { 0 } else { p.s() };
    let had_etas = !traj.etas.is_empty();
    {
        let mut probe = traj.clone();
        if !had_etas {
            probe.etas = vec![nalgebra::DVector::zeros(0); probe.k()];
        }
        probe
            .check_shape(p.n(), p.d(), s)
            .map_err(|e| CommandError::Input(format!("trajectory does not match the spec: {e}")))?;
    }
    let mut report = RunReport::new("certify", &spec.file, flags, spec.warnings.clone());
    report.cost = Some(mayer_cost(p, &traj));
    let dcfg = DiscretizationConfig::new(traj.k());
    let feas = feasibility(p, &traj, &dcfg);
    if let Some(i) = feas.first_infeasible_step {
        report.ok = false;
        report.messages.push(format!(
            "state leaves the moving set at step {i} (t = {})",
            traj.time(i)
        ));
        report.feasibility = Some(feas);
        report.trajectory = Some(TrajectorySamples::from_trajectory(&traj));
        return Ok(report);
    }
    if !feas.ok() {
        report.ok = false;
        report
            .messages
            .push("trajectory misses the endpoint constraints".into());
    }
    report.feasibility = Some(feas);
    if !had_etas {
        traj.etas = recover_eta(p, &traj)?;
    }
    let bundle = match source {
        BundleSource::Solve => solve_multipliers(p, &traj, &dcfg)?,
        BundleSource::Zero => MultiplierBundle::zeros(p, &traj),
        BundleSource::Given(b) => *b,
    };
    let cert = check_certificate(p, &traj, &bundle, tol)?;
    if !cert.ok() {
        report.ok = false;
        report
            .messages
            .push(format!("violated: {}", cert.violations.join(", ")));
    }
    report.certificate = Some(cert);
    report.multipliers = Some(bundle);
    report.trajectory = Some(TrajectorySamples::from_trajectory(&traj));
    report
        .volatile
        .timings_ms
        .insert("total".into(), elapsed_ms(start));
    Ok(report)
}

/// Simulate the closed-form strategies of the benchmark for each `α` and,
/// when `opts` is given, add the optimizer's best cost.
pub fn cmd_sweep_alpha(
    spec: &LoadedSpec,
    alphas: &[f64],
    k: usize,
    opts: Option<&OptimizeOptions>,
    flags: BTreeMap<String, String>,
) -> Result<RunReport, CommandError> {
    let start = Instant::now();
    let mut rows = Vec::new();
    for &alpha in alphas {
        let mut local = spec.clone();
        local.set_alpha(alpha);
        let p = &local.problem;
        let mut strategies = Vec::new();
        for s in example::strategies(alpha) {
            let traj = integrate(p, &s.law, k)?;
            strategies.push(StrategyRow {
                label: s.kind.label().to_string(),
                horizon: s.horizon,
                switch: s.switch,
                closed_form: s.cost,
                simulated: mayer_cost(p, &traj),
            });
        }
        let mut order: Vec<&StrategyRow> = strategies.iter().collect();
        order.sort_by(|a, b| a.simulated.total_cmp(&b.simulated));
        let ordering = order.iter().map(|r| r.label.clone()).collect();
        let mut ties = Vec::new();
        for (i, a) in strategies.iter().enumerate() {
            for b in &strategies[i + 1..] {
                if (a.simulated - b.simulated).abs() <= 1e-2 {
                    ties.push((a.label.clone(), b.label.clone()));
                }
            }
        }
        let optimizer_cost = match opts {
            Some(o) => Some(optimize(p, &optimizer_config(&local, o))?.cost),
            None => None,
        };
        rows.push(SweepRow {
            alpha,
            strategies,
            optimizer_cost,
            ordering,
            ties,
        });
    }
    let mut report = RunReport::new("sweep-alpha", &spec.file, flags, spec.warnings.clone());
    report.sweep = Some(rows);
    report
        .volatile
        .timings_ms
        .insert("total".into(), elapsed_ms(start));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specfile::example_spec;

    #[test]
    fn simulate_reports_the_hitting_time() {
        let spec = example_spec();
        let law = ControlLaw::constant(nalgebra::DVector::from_element(1, 2.0), 1.0).unwrap();
        let r = cmd_simulate(&spec, &law, 2000, BTreeMap::new()).unwrap();
        assert!((r.first_activity_time.unwrap() - 1.0 / 3.0).abs() <= 2.0 / 2000.0);
        assert!((r.cost.unwrap() - 3.0).abs() < 1e-2);
    }

    #[test]
    fn single_step_simulation_is_valid() {
        let spec = example_spec();
        let law = ControlLaw::constant(nalgebra::DVector::from_element(1, 2.0), 1.0).unwrap();
        let r = cmd_simulate(&spec, &law, 1, BTreeMap::new()).unwrap();
        assert_eq!(r.trajectory.unwrap().t.len(), 2);
    }

    #[test]
    fn certify_case_two() {
        let spec = example_spec();
        let law = example::strategy(example::StrategyKind::C1, -3.0)
            .unwrap()
            .law;
        let traj = integrate(&spec.problem, &law, 1000).unwrap();
        let r = cmd_certify(
            &spec,
            traj.clone(),
            BundleSource::Solve,
            None,
            BTreeMap::new(),
        )
        .unwrap();
        assert!(r.ok, "{:?}", r.messages);
        let zero = cmd_certify(&spec, traj, BundleSource::Zero, None, BTreeMap::new()).unwrap();
        assert!(!zero.ok);
        assert!(zero.messages.iter().any(|m| m.contains("nontriviality")));
    }

    #[test]
    fn certify_cites_the_infeasible_step() {
        let spec = example_spec();
        let law = example::strategy(example::StrategyKind::C1, -3.0)
            .unwrap()
            .law;
        let mut traj = integrate(&spec.problem, &law, 100).unwrap();
        traj.states[60][0] += 0.5;
        let r = cmd_certify(&spec, traj, BundleSource::Solve, None, BTreeMap::new()).unwrap();
        assert!(!r.ok);
        assert_eq!(r.feasibility.unwrap().first_infeasible_step, Some(60));
        assert!(r.messages[0].contains("step 60"));
    }

    #[test]
    fn sweep_orders_the_strategies() {
        let spec = example_spec();
        let r = cmd_sweep_alpha(&spec, &[-3.0, -2.5], 2000, None, BTreeMap::new()).unwrap();
        let rows = r.sweep.unwrap();
        assert_eq!(rows[0].ordering, ["C3", "C2", "6.44b", "C1"]);
        assert!(rows[1]
            .ties
            .contains(&("C1".to_string(), "6.44b".to_string())));
    }
}

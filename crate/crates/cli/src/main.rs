//! `sweepopt` command-line interface.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sweepopt::certificates::MultiplierBundle;
use sweepopt::commands::{
    cmd_certify, cmd_optimize, cmd_simulate, cmd_sweep_alpha, BundleSource, CommandError,
    OptimizeOptions,
};
use sweepopt::report::{load_trajectory, RunReport};
use sweepopt::specfile::{example_spec, load_spec, LoadedSpec};
use sweepopt::sweeping::ControlLaw;

#[derive(Parser)]
#[command(
    name = "sweepopt",
    version,
    about = "Simulate, optimize and certify controlled sweeping processes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Problem spec file; the bundled benchmark when omitted.
    spec: Option<PathBuf>,
    /// Override the first tracking target (the benchmark's alpha).
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    /// Write the report here (CSV when the name ends in .csv, JSON otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a piecewise-constant control.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Control levels, segments separated by ';' and components by ','.
        #[arg(long, allow_hyphen_values = true)]
        levels: String,
        /// Interior switching times, comma separated.
        #[arg(long, allow_hyphen_values = true, default_value = "")]
        switches: String,
        /// Horizon.
        #[arg(long = "T")]
        horizon: f64,
        /// Number of steps.
        #[arg(long, alias = "steps", default_value_t = 2000)]
        k: usize,
    },
    /// Search piecewise-constant controls and a free horizon.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        segments: usize,
        #[arg(long, alias = "k", default_value_t = 4000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Horizon search interval as "lo,hi".
        #[arg(long = "T-bracket")]
        t_bracket: Option<String>,
    },
    /// Check the optimality conditions along a stored trajectory.
    Certify {
        #[command(flatten)]
        common: Common,
        /// Trajectory as CSV or JSON (a report or a sample set).
        #[arg(long)]
        trajectory: PathBuf,
        /// Multipliers to check: a JSON file, or "zero"; solved when omitted.
        #[arg(long)]
        bundle: Option<String>,
        /// Tolerance for every residual.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Compare the benchmark strategies over several alpha values.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Comma-separated alpha values.
        #[arg(long, allow_hyphen_values = true, default_value = "-2.2,-2.5,-3")]
        alphas: String,
        #[arg(long, alias = "steps", default_value_t = 4000)]
        k: usize,
        /// Skip the optimizer column.
        #[arg(long)]
        no_optimize: bool,
        #[arg(long, default_value_t = 3)]
        segments: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn usage(msg: impl Into<String>) -> CommandError {
    CommandError::Usage(msg.into())
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>, CommandError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| usage(format!("{what}: cannot parse {s:?}")))
        })
        .collect()
}

fn load(common: &Common) -> Result<LoadedSpec, CommandError> {
    let mut spec = match &common.spec {
        None => example_spec(),
        Some(path) if !path.exists() && path.file_name().is_some_and(|n| n == "example61.spec") => {
            example_spec()
        }
        Some(path) => load_spec(path)?,
    };
    if let Some(alpha) = common.alpha {
        spec.set_alpha(alpha);
    }
    Ok(spec)
}

fn base_flags(common: &Common) -> BTreeMap<String, String> {
    let mut flags = BTreeMap::new();
    if let Some(s) = &common.spec {
        flags.insert("spec".into(), s.display().to_string());
    }
    if let Some(a) = common.alpha {
        flags.insert("alpha".into(), a.to_string());
    }
    flags
}

fn law_from_flags(
    spec: &LoadedSpec,
    levels: &str,
    switches: &str,
    horizon: f64,
) -> Result<ControlLaw, CommandError> {
    let d = spec.problem.d();
    let levels = levels
        .split(';')
        .map(|seg| {
            let v = parse_list(seg, "--levels")?;
            if v.len() != d {
                return Err(usage(format!(
                    "--levels: each segment needs {d} components"
                )));
            }
            Ok(nalgebra::DVector::from_vec(v))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut breakpoints = vec![0.0];
    breakpoints.extend(parse_list(switches, "--switches")?);
    breakpoints.push(horizon);
    if breakpoints.len() != levels.len() + 1 {
        return Err(usage(
            "--switches must list one time fewer than there are level segments",
        ));
    }
    ControlLaw::new(breakpoints, levels).map_err(|e| usage(e.to_string()))
}

fn write_report(report: &RunReport, out: Option<&Path>) -> Result<(), CommandError> {
    let io = |e: std::io::Error| CommandError::Input(format!("cannot write report: {e}"));
    match out {
        Some(path)
            if path
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("csv")) =>
        {
            let file = std::fs::File::create(path).map_err(io)?;
            report
                .write_csv(file)
                .map_err(|e| CommandError::Input(format!("cannot write report: {e}")))
        }
        Some(path) => std::fs::write(path, report.to_json()).map_err(io),
        None => {
            println!("{}", report.to_json());
            Ok(())
        }
    }
}

fn summarize(report: &RunReport) {
    if let Some(c) = report.cost {
        eprintln!("cost: {c}");
    }
    if let Some(r) = &report.refined {
        eprintln!("horizon: {}", r.horizon);
        if let Some(tau) = r.dominant_switch() {
            eprintln!("switch: {tau}");
        }
    }
    if let Some(rows) = &report.sweep {
        for row in rows {
            let opt = row
                .optimizer_cost
                .map_or(String::new(), |c| format!("  optimizer {c:.4}"));
            eprintln!("alpha {}: {}{opt}", row.alpha, row.ordering.join(" < "));
        }
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for m in &report.messages {
        eprintln!("{m}");
    }
}

fn run(cli: Cli) -> Result<RunReport, (CommandError, Option<PathBuf>)> {
    let out_of = |c: &Common| c.out.clone();
    match cli.command {
        Command::Simulate {
            common,
            levels,
            switches,
            horizon,
            k,
        } => {
            let out = out_of(&common);
            let go = || {
                let spec = load(&common)?;
                let law = law_from_flags(&spec, &levels, &switches, horizon)?;
                let mut flags = base_flags(&common);
                flags.insert("levels".into(), levels.clone());
                flags.insert("switches".into(), switches.clone());
                flags.insert("T".into(), horizon.to_string());
                flags.insert("k".into(), k.to_string());
                cmd_simulate(&spec, &law, k, flags)
            };
            go().map_err(|e| (e, out))
        }
        Command::Optimize {
            common,
            segments,
            steps,
            seed,
            t_bracket,
        } => {
            let out = out_of(&common);
            let go = || {
                let spec = load(&common)?;
                let t_bracket = match &t_bracket {
                    None => None,
                    Some(text) => match parse_list(text, "--T-bracket")?.as_slice() {
                        [lo, hi] => Some((*lo, *hi)),
                        _ => return Err(usage("--T-bracket needs two values \"lo,hi\"")),
                    },
                };
                let mut flags = base_flags(&common);
                flags.insert("segments".into(), segments.to_string());
                flags.insert("steps".into(), steps.to_string());
                flags.insert("seed".into(), seed.to_string());
                if let Some((lo, hi)) = t_bracket {
                    flags.insert("T-bracket".into(), format!("{lo},{hi}"));
                }
                cmd_optimize(
                    &spec,
                    &OptimizeOptions {
                        segments,
                        steps,
                        seed,
                        t_bracket,
                    },
                    flags,
                )
            };
            go().map_err(|e| (e, out))
        }
        Command::Certify {
            common,
            trajectory,
            bundle,
            tol,
        } => {
            let out = out_of(&common);
            let go = || {
                let spec = load(&common)?;
                let traj = load_trajectory(&trajectory).map_err(CommandError::Input)?;
                let source = match bundle.as_deref() {
                    None => BundleSource::Solve,
                    Some("zero") => BundleSource::Zero,
                    Some(path) => {
                        let text = std::fs::read_to_string(path)
                            .map_err(|e| CommandError::Input(format!("cannot read {path}: {e}")))?;
                        let value: serde_json::Value = serde_json::from_str(&text)
                            .map_err(|e| CommandError::Input(format!("{path}: {e}")))?;
                        let inner = value.get("multipliers").cloned().unwrap_or(value);
                        let b: MultiplierBundle = serde_json::from_value(inner)
                            .map_err(|e| CommandError::Input(format!("{path}: {e}")))?;
                        BundleSource::Given(Box::new(b))
                    }
                };
                let mut flags = base_flags(&common);
                flags.insert("trajectory".into(), trajectory.display().to_string());
                if let Some(b) = &bundle {
                    flags.insert("bundle".into(), b.clone());
                }
                if let Some(t) = tol {
                    flags.insert("tol".into(), t.to_string());
                }
                cmd_certify(&spec, traj, source, tol, flags)
            };
            go().map_err(|e| (e, out))
        }
        Command::SweepAlpha {
            common,
            alphas,
            k,
            no_optimize,
            segments,
            seed,
        } => {
            let out = out_of(&common);
            let go = || {
                let spec = load(&common)?;
                let list = parse_list(&alphas, "--alphas")?;
                let mut flags = base_flags(&common);
                flags.insert("alphas".into(), alphas.clone());
                flags.insert("k".into(), k.to_string());
                let opts = (!no_optimize).then_some(OptimizeOptions {
                    segments,
                    steps: k,
                    seed,
                    t_bracket: None,
                });
                if let Some(o) = &opts {
                    flags.insert("segments".into(), o.segments.to_string());
                    flags.insert("seed".into(), o.seed.to_string());
                }
                cmd_sweep_alpha(&spec, &list, k, opts.as_ref(), flags)
            };
            go().map_err(|e| (e, out))
        }
    }
}

fn out_path(cli: &Cli) -> Option<PathBuf> {
    match &cli.command {
        Command::Simulate { common, .. }
        | Command::Optimize { common, .. }
        | Command::Certify { common, .. }
        | Command::SweepAlpha { common, .. } => common.out.clone(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = out_path(&cli);
    match run(cli) {
        Ok(report) => {
            summarize(&report);
            if let Err(e) = write_report(&report, out.as_deref()) {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
            if report.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err((e, _)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

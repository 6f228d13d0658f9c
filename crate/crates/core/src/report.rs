//! Run reports: a JSON document for machines and a flat CSV for plotting.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::certificates::{CertificateReport, MultiplierBundle};
use crate::optimizer::OptimizerResult;
use crate::problem::FeasibilityReport;
use crate::specfile::ProblemSpecFile;
use crate::sweeping::DiscreteTrajectory;

/// Grid samples of a trajectory. `u[i]` and `eta[i]` belong to step `i`,
/// which runs from `t[i]` to `t[i+1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySamples {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    #[serde(default)]
    pub eta: Vec<Vec<f64>>,
}

fn to_vecs(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.iter().copied().collect()).collect()
}

fn from_vecs(v: &[Vec<f64>]) -> Vec<DVector<f64>> {
    v.iter().map(|x| DVector::from_column_slice(x)).collect()
}

impl TrajectorySamples {
    pub fn from_trajectory(traj: &DiscreteTrajectory) -> Self {
        Self {
            t: (0..=traj.k()).map(|i| traj.time(i)).collect(),
            x: to_vecs(&traj.states),
            u: to_vecs(&traj.controls),
            eta: to_vecs(&traj.etas),
        }
    }

    /// The trajectory; `etas` is empty when the samples carry none.
    pub fn to_trajectory(&self) -> Result<DiscreteTrajectory, String> {
        let horizon = *self.t.last().ok_or("trajectory has no samples")?;
        if self.x.len() != self.t.len() || self.u.len() + 1 != self.t.len() {
            return Err(format!(
                "expected {} states and {} controls",
                self.t.len(),
                self.t.len().saturating_sub(1)
            ));
        }
        if !self.eta.is_empty() && self.eta.len() != self.u.len() {
            return Err(format!(
                "expected {} multiplier rows, found {}",
                self.u.len(),
                self.eta.len()
            ));
        }
        Ok(DiscreteTrajectory {
            horizon,
            states: from_vecs(&self.x),
            controls: from_vecs(&self.u),
            etas: from_vecs(&self.eta),
        })
    }
}

/// One strategy evaluated in an `α` sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub label: String,
    pub horizon: f64,
    pub switch: Option<f64>,
    pub closed_form: f64,
    pub simulated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub strategies: Vec<StrategyRow>,
    pub optimizer_cost: Option<f64>,
    /// Strategy labels from cheapest to most expensive (simulated costs).
    pub ordering: Vec<String>,
    /// Pairs of strategies whose simulated costs agree within 1e-2.
    pub ties: Vec<(String, String)>,
}

/// Fields that legitimately differ between identical runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Volatile {
    pub timestamp_unix: u64,
    pub timings_ms: BTreeMap<String, f64>,
}

impl Volatile {
    pub fn now() -> Self {
        let timestamp_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            timestamp_unix,
            timings_ms: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub spec: ProblemSpecFile,
    pub flags: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    pub ok: bool,
    pub messages: Vec<String>,
    pub cost: Option<f64>,
    pub first_activity_time: Option<f64>,
    pub trajectory: Option<TrajectorySamples>,
    pub optimizer: Option<OptimizerResult>,
    pub refined: Option<OptimizerResult>,
    pub feasibility: Option<FeasibilityReport>,
    pub certificate: Option<CertificateReport>,
    pub multipliers: Option<MultiplierBundle>,
    pub sweep: Option<Vec<SweepRow>>,
    pub volatile: Volatile,
}

impl RunReport {
    pub fn new(
        command: &str,
        spec: &ProblemSpecFile,
        flags: BTreeMap<String, String>,
        warnings: Vec<String>,
    ) -> Self {
        Self {
            command: command.to_string(),
            spec: spec.clone(),
            flags,
            warnings,
            ok: true,
            messages: Vec::new(),
            cost: None,
            first_activity_time: None,
            trajectory: None,
            optimizer: None,
            refined: None,
            feasibility: None,
            certificate: None,
            multipliers: None,
            sweep: None,
            volatile: Volatile::now(),
        }
    }

    /// Full JSON, including the volatile section.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// JSON without the volatile section; identical runs give identical text.
    pub fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("reports serialize");
        if let Some(map) = value.as_object_mut() {
            map.remove("volatile");
        }
        serde_json::to_string_pretty(&value).expect("reports serialize")
    }

    /// Trajectory table with columns `t, x_*, u_*, eta_*` and, when
    /// multipliers are attached, `p_*, q_*, gamma_*`. Step quantities are
    /// blank on the final row.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let Some(tr) = &self.trajectory else {
            w.flush()?;
            return Ok(());
        };
        let n = tr.x.first().map_or(0, Vec::len);
        let d = tr.u.first().map_or(0, Vec::len);
        let s = tr.eta.first().map_or(0, Vec::len);
        let bundle = self
            .multipliers
            .as_ref()
            .filter(|b| b.p.len() == tr.t.len());
        let mut header = vec!["t".to_string()];
        let named =
            |prefix: &'static str, count: usize| (1..=count).map(move |i| format!("{prefix}_{i}"));
        header.extend(named("x", n));
        header.extend(named("u", d));
        header.extend(named("eta", s));
        if bundle.is_some() {
            header.extend(named("p", n));
            header.extend(named("q", n));
            header.extend(named("gamma", bundle.map_or(0, |b| b.atom.len())));
        }
        w.write_record(&header)?;
        let fmt = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let blank = |count: usize| vec![String::new(); count];
        for i in 0..tr.t.len() {
            let mut row = vec![tr.t[i].to_string()];
            row.extend(fmt(&tr.x[i]));
            row.extend(tr.u.get(i).map_or_else(|| blank(d), |u| fmt(u)));
            row.extend(tr.eta.get(i).map_or_else(|| blank(s), |e| fmt(e)));
            if let Some(b) = bundle {
                row.extend(fmt(b.p[i].as_slice()));
                row.extend(fmt(b.q[i].as_slice()));
                row.extend(
                    b.gamma
                        .get(i)
                        .map_or_else(|| blank(b.atom.len()), |g| fmt(g.as_slice())),
                );
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Read a trajectory from a CSV table or a JSON report/sample set.
pub fn load_trajectory(path: &Path) -> Result<DiscreteTrajectory, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
        || text.trim_start().starts_with('{');
    if is_json {
        trajectory_from_json(&text)
    } else {
        trajectory_from_csv(&text)
    }
}

pub fn trajectory_from_json(text: &str) -> Result<DiscreteTrajectory, String> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
    let samples = match value.get("trajectory") {
        Some(inner) => inner.clone(),
        None => value,
    };
    let samples: TrajectorySamples =
        serde_json::from_value(samples).map_err(|e| format!("invalid trajectory: {e}"))?;
    samples.to_trajectory()
}

pub fn trajectory_from_csv(text: &str) -> Result<DiscreteTrajectory, String> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| format!("invalid CSV header: {e}"))?
        .clone();
    let columns = |prefix: &str| -> Vec<usize> {
        let mut found: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(c, h)| {
                h.strip_prefix(prefix)
                    .and_then(|r| r.parse::<usize>().ok())
                    .map(|i| (i, c))
            })
            .collect();
        found.sort();
        found.into_iter().map(|(_, c)| c).collect()
    };
    let t_col = headers
        .iter()
        .position(|h| h == "t")
        .ok_or("CSV needs a t column")?;
    let (xc, uc, ec) = (columns("x_"), columns("u_"), columns("eta_"));
    let mut samples = TrajectorySamples {
        t: Vec::new(),
        x: Vec::new(),
        u: Vec::new(),
        eta: Vec::new(),
    };
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format!("CSV row {}: {e}", line + 2))?;
        let num = |c: usize| -> Result<Option<f64>, String> {
            let field = record.get(c).unwrap_or("").trim();
            if field.is_empty() {
                return Ok(None);
            }
            field
                .parse()
                .map(Some)
                .map_err(|_| format!("CSV row {}: cannot parse {field:?}", line + 2))
        };
        let group = |cols: &[usize]| -> Result<Option<Vec<f64>>, String> {
            let vals = cols
                .iter()
                .map(|&c| num(c))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(if vals.iter().all(Option::is_some) && !vals.is_empty() {
                Some(vals.into_iter().flatten().collect())
            } else {
                None
            })
        };
        samples
            .t
            .push(num(t_col)?.ok_or_else(|| format!("CSV row {}: missing t", line + 2))?);
        samples
            .x
            .push(group(&xc)?.ok_or_else(|| format!("CSV row {}: missing state", line + 2))?);
        if let Some(u) = group(&uc)? {
            samples.u.push(u);
        }
        if let Some(e) = group(&ec)? {
            samples.eta.push(e);
        }
    }
    samples.to_trajectory()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example;
    use crate::problem::mayer_cost;
    use crate::specfile::example_spec;
    use crate::sweeping::integrate;

    fn sample_report() -> (RunReport, DiscreteTrajectory) {
        let p = example::problem(-3.0);
        let law = example::strategy(example::StrategyKind::C3, -3.0)
            .unwrap()
            .law;
        let traj = integrate(&p, &law, 300).unwrap();
        let mut r = RunReport::new(
            "simulate",
            &example_spec().file,
            BTreeMap::new(),
            Vec::new(),
        );
        r.trajectory = Some(TrajectorySamples::from_trajectory(&traj));
        (r, traj)
    }

    #[test]
    fn json_round_trip_keeps_costs() {
        let (r, traj) = sample_report();
        let back = trajectory_from_json(&r.to_json()).unwrap();
        let p = example::problem(-3.0);
        assert!((mayer_cost(&p, &back) - mayer_cost(&p, &traj)).abs() <= 1e-12);
        assert_eq!(back, traj);
    }

    #[test]
    fn csv_round_trip_keeps_costs() {
        let (r, traj) = sample_report();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x_1,x_2,u_1,eta_1\n"));
        let back = trajectory_from_csv(&text).unwrap();
        assert_eq!(back, traj);
    }

    #[test]
    fn canonical_json_drops_the_volatile_part() {
        let (mut a, _) = sample_report();
        let mut b = a.clone();
        a.volatile.timestamp_unix = 1;
        b.volatile.timestamp_unix = 2;
        b.volatile.timings_ms.insert("total".into(), 3.0);
        assert_ne!(a.to_json(), b.to_json());
        assert_eq!(a.canonical_json(), b.canonical_json());
        assert!(!a.canonical_json().contains("volatile"));
    }
}

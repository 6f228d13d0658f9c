//! Derivative-free search over piecewise-constant controls and the horizon.
//!
//! Decision vector: `m − 1` switching fractions of `T`, `m` control levels per
//! channel and `T` itself. All coordinates are searched in a normalized unit
//! box. A coarse grid of starts is scored in parallel, the best few are
//! polished by a Hooke-Jeeves pattern search, and the endpoint equality is
//! enforced through a quadratic penalty whose weight doubles while the
//! violation stays above tolerance.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use thiserror::Error;

use crate::problem::{endpoint_distance, horizon_distance, phi};
use crate::sweeping::{final_state, integrate, ControlLaw, SweepError, SweepingProblem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizerError {
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("no candidate meets the endpoint constraint (best violation {penalty:e})")]
    NoFeasiblePoint {
        penalty: f64,
        best: Box<OptimizerResult>,
    },
    #[error(transparent)]
    Sweep(#[from] SweepError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Number of constant pieces `m`.
    pub segments: usize,
    /// Integrator steps used for polishing and for the reported cost.
    pub k: usize,
    /// Integrator steps used to score the coarse grid (capped by `k`).
    pub coarse_k: usize,
    /// Integrator steps used to polish the starts before the final polish.
    pub screen_k: usize,
    /// Grid points per control level.
    pub coarse_grid: usize,
    /// Grid points per switching fraction.
    pub fraction_grid: usize,
    /// Horizon values scanned for every coarse grid point.
    pub t_scan: usize,
    /// Number of grid points that get polished.
    pub starts: usize,
    /// Cap on pattern-search iterations per polish.
    pub polish_iters: usize,
    /// Smallest normalized step before a polish stops.
    pub min_step: f64,
    pub penalty_weight: f64,
    /// Endpoint violation accepted at the end.
    pub endpoint_tolerance: f64,
    pub max_doublings: usize,
    /// Horizon search interval; defaults to `Ω_T` when that is bounded.
    pub t_bracket: Option<(f64, f64)>,
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn new(segments: usize, k: usize) -> Self {
        Self {
            segments,
            k,
            coarse_k: 200,
            screen_k: 1000,
            coarse_grid: 3,
            fraction_grid: 8,
            t_scan: 9,
            starts: 6,
            polish_iters: 2000,
            min_step: 0.1 / k.max(1) as f64,
            penalty_weight: 1e3,
            endpoint_tolerance: 1e-3,
            max_doublings: 8,
            t_bracket: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// Decision vector in natural units.
    pub decision: Vec<f64>,
    /// Mayer cost of the iterate.
    pub cost: f64,
    /// Penalized objective at the current weight.
    pub objective: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerResult {
    pub law: ControlLaw,
    pub horizon: f64,
    /// Mayer cost of `integrate(law, k)`.
    pub cost: f64,
    /// Endpoint violation (distance to `Ω_x` plus distance to `Ω_T`).
    pub penalty: f64,
    pub objective: f64,
    pub weight: f64,
    /// Decision vector in natural units.
    pub decision: Vec<f64>,
    pub k: usize,
    pub evaluations: usize,
    /// Cost change relative to the run this one was refined from.
    pub refined_delta: Option<f64>,
    pub history: Vec<HistoryEntry>,
    pub config: OptimizerConfig,
}

impl OptimizerResult {
    /// Switching time with the largest jump in control level.
    pub fn dominant_switch(&self) -> Option<f64> {
        self.law.dominant_switch()
    }
}

struct Search<'a> {
    p: &'a SweepingProblem,
    m: usize,
    d: usize,
    bracket: (f64, f64),
    evaluations: AtomicUsize,
}

#[derive(Clone, Copy)]
struct Score {
    cost: f64,
    violation: f64,
}

impl Score {
    fn objective(&self, w: f64) -> f64 {
        self.cost + w * self.violation * self.violation
    }
}

fn cmp_candidates(a: (f64, &[f64]), b: (f64, &[f64])) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| {
        for (x, y) in a.1.iter().zip(b.1.iter()) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    })
}

impl<'a> Search<'a> {
    fn dim(&self) -> usize {
        self.m - 1 + self.m * self.d + 1
    }

    fn horizon(&self, z: &[f64]) -> f64 {
        let (lo, hi) = self.bracket;
        lo + z[self.dim() - 1] * (hi - lo)
    }

    fn natural(&self, z: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(z.len());
        let mut fr: Vec<f64> = z[..self.m - 1].to_vec();
        fr.sort_by(f64::total_cmp);
        out.extend(fr);
        for s in 0..self.m {
            for c in 0..self.d {
                let (lo, hi) = (self.p.u_lo[c], self.p.u_hi[c]);
                out.push(lo + z[self.m - 1 + s * self.d + c] * (hi - lo));
            }
        }
        out.push(self.horizon(z));
        out
    }

    fn normalized(&self, natural: &[f64]) -> Vec<f64> {
        let mut z = natural.to_vec();
        for s in 0..self.m {
            for c in 0..self.d {
                let (lo, hi) = (self.p.u_lo[c], self.p.u_hi[c]);
                let i = self.m - 1 + s * self.d + c;
                z[i] = if hi > lo {
                    (natural[i] - lo) / (hi - lo)
                } else {
                    0.5
                };
            }
        }
        let (lo, hi) = self.bracket;
        let last = self.dim() - 1;
        z[last] = if hi > lo {
            (natural[last] - lo) / (hi - lo)
        } else {
            0.5
        };
        z.iter().map(|v| v.clamp(0.0, 1.0)).collect()
    }

    fn law(&self, z: &[f64]) -> Option<ControlLaw> {
        let nat = self.natural(z);
        let horizon = *nat.last().unwrap();
        if !(horizon > 0.0) {
            return None;
        }
        let mut bps = vec![0.0];
        let mut levels = Vec::new();
        let level = |s: usize| {
            DVector::from_row_slice(&nat[self.m - 1 + s * self.d..self.m - 1 + (s + 1) * self.d])
        };
        for s in 0..self.m {
            let end = if s + 1 < self.m {
                nat[s] * horizon
            } else {
                horizon
            };
            if end > *bps.last().unwrap() {
                bps.push(end);
                levels.push(level(s));
            } else if s + 1 == self.m {
                // Degenerate tail: extend the previous piece to T.
                *bps.last_mut().unwrap() = horizon;
            }
        }
        if levels.is_empty() {
            return None;
        }
        ControlLaw::new(bps, levels).ok()
    }

    fn score(&self, z: &[f64], k: usize) -> Score {
        self.evaluations.fetch_add(1, AtomicOrdering::Relaxed);
        let bad = Score {
            cost: f64::INFINITY,
            violation: f64::INFINITY,
        };
        let Some(law) = self.law(z) else { return bad };
        match final_state(self.p, &law, k) {
            Ok(x) => {
                let horizon = law.horizon();
                let violation = endpoint_distance(self.p, &x) + horizon_distance(self.p, horizon);
                Score {
                    cost: phi(self.p, &x, horizon),
                    violation,
                }
            }
            Err(_) => bad,
        }
    }

    /// Coarse points over fractions and levels, with the horizon coordinate
    /// left at zero. Fraction tuples are nondecreasing since decoding sorts them.
    fn grid(&self, g_levels: usize, g_fractions: usize) -> Vec<Vec<f64>> {
        let dim = self.dim();
        let axes: Vec<Vec<f64>> = (0..dim - 1)
            .map(|v| {
                if v < self.m - 1 {
                    (0..g_fractions)
                        .map(|i| (i as f64 + 0.5) / g_fractions as f64)
                        .collect()
                } else if g_levels == 1 {
                    vec![0.5]
                } else {
                    (0..g_levels)
                        .map(|i| i as f64 / (g_levels - 1) as f64)
                        .collect()
                }
            })
            .collect();
        let total = axes.iter().map(|a| a.len()).product::<usize>();
        (0..total)
            .map(|mut idx| {
                let mut z = vec![0.0; dim];
                for v in (0..dim - 1).rev() {
                    let n = axes[v].len();
                    z[v] = axes[v][idx % n];
                    idx /= n;
                }
                z
            })
            .filter(|z| z[..self.m - 1].windows(2).all(|w| w[0] <= w[1]))
            .collect()
    }

    /// Best horizon on a uniform scan for a fixed coarse point.
    fn scan_horizon(&self, z: &mut [f64], k: usize, w: f64, points: usize) -> f64 {
        let last = self.dim() - 1;
        let mut best = (f64::INFINITY, 0.0);
        for j in 0..points.max(1) {
            let t = if points <= 1 {
                0.5
            } else {
                j as f64 / (points - 1) as f64
            };
            z[last] = t;
            let f = self.score(z, k).objective(w);
            if f < best.0 {
                best = (f, t);
            }
        }
        z[last] = best.1;
        let f = self.score(z, k);
        self.best_horizon(z, f, k, w, 0.5 / points.max(2) as f64, 1e-4)
            .objective(w)
    }

    /// Compass search over all coordinates, then the horizon-eliminated
    /// valley search.
    #[allow(clippy::too_many_arguments)]
    fn polish(
        &self,
        start: &[f64],
        k: usize,
        w: f64,
        step0: f64,
        min_step: f64,
        max_iters: usize,
        rng: &mut ChaCha8Rng,
        history: &mut Vec<HistoryEntry>,
    ) -> (Vec<f64>, Score) {
        let (z, f) = self.compass(start, k, w, step0, min_step, max_iters, rng, history);
        self.valley(&z, f, k, w, step0.min(0.02), min_step, max_iters, history)
    }

    #[allow(clippy::too_many_arguments)]
    fn compass(
        &self,
        start: &[f64],
        k: usize,
        w: f64,
        step0: f64,
        min_step: f64,
        max_iters: usize,
        rng: &mut ChaCha8Rng,
        history: &mut Vec<HistoryEntry>,
    ) -> (Vec<f64>, Score) {
        let dim = self.dim();
        let mut order: Vec<usize> = (0..dim).collect();
        let mut base = start.to_vec();
        let mut fb = self.score(&base, k);
        self.record(history, &base, fb, w);
        let mut step = step0;

        let explore = |x: &mut Vec<f64>, fx: &mut Score, step: f64, order: &[usize]| {
            for &c in order {
                for dir in [1.0, -1.0] {
                    let old = x[c];
                    let new = (old + dir * step).clamp(0.0, 1.0);
                    if new == old {
                        continue;
                    }
                    x[c] = new;
                    let f = self.score(x, k);
                    if f.objective(w) < fx.objective(w) {
                        *fx = f;
                        break;
                    }
                    x[c] = old;
                }
            }
        };

        for _ in 0..max_iters {
            order.shuffle(rng);
            let mut x = base.clone();
            let mut fx = fb;
            explore(&mut x, &mut fx, step, &order);
            if fx.objective(w) < fb.objective(w) {
                // Pattern moves along the last successful displacement.
                loop {
                    let prev = std::mem::replace(&mut base, x.clone());
                    fb = fx;
                    self.record(history, &base, fb, w);
                    let mut trial: Vec<f64> = base
                        .iter()
                        .zip(prev.iter())
                        .map(|(b, p)| (2.0 * b - p).clamp(0.0, 1.0))
                        .collect();
                    let mut ft = self.score(&trial, k);
                    explore(&mut trial, &mut ft, step, &order);
                    if ft.objective(w) < fb.objective(w) {
                        x = trial;
                        fx = ft;
                    } else {
                        break;
                    }
                }
            } else {
                step *= 0.5;
                if step < min_step {
                    break;
                }
            }
        }
        (base, fb)
    }

    /// Line search over the horizon coordinate alone: bracket the minimum
    /// around the current value, then refine by parabolic interpolation.
    fn best_horizon(
        &self,
        z: &mut [f64],
        f0: Score,
        k: usize,
        w: f64,
        step: f64,
        min_step: f64,
    ) -> Score {
        let last = self.dim() - 1;
        let eval = |z: &mut [f64], t: f64| {
            z[last] = t;
            self.score(z, k)
        };
        let t0 = z[last];
        let mut pts: Vec<(f64, Score)> = vec![(t0, f0)];
        let mut s = step.max(min_step);
        // Bracket: expand in the descending direction.
        let up = (t0 + s).min(1.0);
        let dn = (t0 - s).max(0.0);
        let fu = eval(z, up);
        let fd = eval(z, dn);
        pts.push((up, fu));
        pts.push((dn, fd));
        let obj = |f: &Score| f.objective(w);
        let mut dir = if obj(&fu) < obj(&f0) && obj(&fu) <= obj(&fd) {
            1.0
        } else if obj(&fd) < obj(&f0) {
            -1.0
        } else {
            0.0
        };
        let mut cur = if dir > 0.0 {
            (up, fu)
        } else if dir < 0.0 {
            (dn, fd)
        } else {
            (t0, f0)
        };
        let mut expansions = 0;
        while dir != 0.0 && expansions < 8 {
            s *= 2.0;
            let t = (cur.0 + dir * s).clamp(0.0, 1.0);
            if t == cur.0 {
                break;
            }
            let f = eval(z, t);
            pts.push((t, f));
            if obj(&f) < obj(&cur.1) {
                cur = (t, f);
                expansions += 1;
            } else {
                dir = 0.0;
            }
        }
        // Parabolic refinement through the best point and its neighbours.
        for _ in 0..4 {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            pts.dedup_by(|a, b| a.0 == b.0);
            let ib = (0..pts.len())
                .min_by(|&i, &j| obj(&pts[i].1).total_cmp(&obj(&pts[j].1)))
                .unwrap();
            if ib == 0 || ib + 1 == pts.len() {
                break;
            }
            let (x1, x2, x3) = (pts[ib - 1].0, pts[ib].0, pts[ib + 1].0);
            let (f1, f2, f3) = (obj(&pts[ib - 1].1), obj(&pts[ib].1), obj(&pts[ib + 1].1));
            let num = (x2 - x1).powi(2) * (f2 - f3) - (x2 - x3).powi(2) * (f2 - f1);
            let den = (x2 - x1) * (f2 - f3) - (x2 - x3) * (f2 - f1);
            if den == 0.0 {
                break;
            }
            let t = (x2 - 0.5 * num / den).clamp(x1, x3);
            if (t - x2).abs() < min_step {
                break;
            }
            let f = eval(z, t);
            pts.push((t, f));
        }
        let best = pts
            .iter()
            .min_by(|a, b| obj(&a.1).total_cmp(&obj(&b.1)).then(a.0.total_cmp(&b.0)))
            .copied()
            .unwrap();
        z[last] = best.0;
        best.1
    }

    /// Compass search over every coordinate except the horizon, with the
    /// horizon re-optimized for each trial. This follows the valley the
    /// endpoint penalty carves between the horizon and the other variables.
    #[allow(clippy::too_many_arguments)]
    fn valley(
        &self,
        start: &[f64],
        f0: Score,
        k: usize,
        w: f64,
        step0: f64,
        min_step: f64,
        max_iters: usize,
        history: &mut Vec<HistoryEntry>,
    ) -> (Vec<f64>, Score) {
        let last = self.dim() - 1;
        let mut x = start.to_vec();
        let mut fx = f0;
        let mut step = step0;
        for _ in 0..max_iters {
            let mut improved = false;
            for c in 0..last {
                for dir in [1.0, -1.0] {
                    let new = (x[c] + dir * step).clamp(0.0, 1.0);
                    if new == x[c] {
                        continue;
                    }
                    let mut trial = x.clone();
                    trial[c] = new;
                    let ft = self.score(&trial, k);
                    let ft = self.best_horizon(&mut trial, ft, k, w, step, min_step);
                    if ft.objective(w) < fx.objective(w) {
                        x = trial;
                        fx = ft;
                        improved = true;
                        self.record(history, &x, fx, w);
                        break;
                    }
                }
            }
            if !improved {
                step *= 0.5;
                if step < min_step {
                    break;
                }
            }
        }
        (x, fx)
    }

    fn record(&self, history: &mut Vec<HistoryEntry>, z: &[f64], f: Score, w: f64) {
        history.push(HistoryEntry {
            decision: self.natural(z),
            cost: f.cost,
            objective: f.objective(w),
            weight: w,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        z: &[f64],
        k: usize,
        w: f64,
        history: Vec<HistoryEntry>,
        cfg: &OptimizerConfig,
        refined_delta: Option<f64>,
    ) -> Result<OptimizerResult, OptimizerError> {
        let law = self.law(z).ok_or_else(|| {
            OptimizerError::InvalidConfig("search ended on a degenerate control law".into())
        })?;
        let traj = integrate(self.p, &law, k)?;
        let x = traj.final_state();
        let horizon = law.horizon();
        let cost = phi(self.p, x, horizon);
        let penalty = endpoint_distance(self.p, x) + horizon_distance(self.p, horizon);
        Ok(OptimizerResult {
            horizon,
            cost,
            penalty,
            objective: cost + w * penalty * penalty,
            weight: w,
            decision: self.natural(z),
            k,
            evaluations: self.evaluations.load(AtomicOrdering::Relaxed),
            refined_delta,
            history,
            law,
            config: cfg.clone(),
        })
    }
}

fn bracket(p: &SweepingProblem, cfg: &OptimizerConfig) -> Result<(f64, f64), OptimizerError> {
    let (lo, hi) = match cfg.t_bracket {
        Some(b) => b,
        None if p.omega_t.1.is_finite() => p.omega_t,
        None => {
            return Err(OptimizerError::InvalidConfig(
                "unbounded time interval needs a search bracket".into(),
            ))
        }
    };
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(OptimizerError::InvalidConfig(format!(
            "bad horizon bracket [{lo}, {hi}]"
        )));
    }
    Ok((lo, hi))
}

fn validate(p: &SweepingProblem, cfg: &OptimizerConfig) -> Result<(), OptimizerError> {
    if cfg.segments == 0
        || cfg.k == 0
        || cfg.coarse_grid == 0
        || cfg.fraction_grid == 0
        || cfg.starts == 0
    {
        return Err(OptimizerError::InvalidConfig(
            "segments, k, coarse_grid, fraction_grid and starts must be positive".into(),
        ));
    }
    if !(cfg.penalty_weight > 0.0) {
        return Err(OptimizerError::InvalidConfig(
            "penalty weight must be positive".into(),
        ));
    }
    p.validate()?;
    Ok(())
}

fn seeded(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Penalty-doubling loop around polishing from `z`.
fn enforce_endpoint(
    search: &Search,
    cfg: &OptimizerConfig,
    mut z: Vec<f64>,
    mut f: Score,
    k: usize,
    mut w: f64,
    step0: f64,
    history: &mut Vec<HistoryEntry>,
) -> (Vec<f64>, Score, f64) {
    let mut doublings = 0;
    while f.violation > cfg.endpoint_tolerance && doublings < cfg.max_doublings {
        w *= 2.0;
        doublings += 1;
        let mut rng = seeded(cfg.seed, 1000 + doublings as u64);
        let (z2, f2) = search.polish(
            &z,
            k,
            w,
            step0,
            cfg.min_step,
            cfg.polish_iters,
            &mut rng,
            history,
        );
        z = z2;
        f = f2;
    }
    (z, f, w)
}

/// Search for a low-cost control law satisfying the endpoint constraints.
pub fn optimize(
    p: &SweepingProblem,
    cfg: &OptimizerConfig,
) -> Result<OptimizerResult, OptimizerError> {
    validate(p, cfg)?;
    let search = Search {
        p,
        m: cfg.segments,
        d: p.d(),
        bracket: bracket(p, cfg)?,
        evaluations: AtomicUsize::new(0),
    };
    let w0 = cfg.penalty_weight;
    let coarse_k = cfg.coarse_k.min(cfg.k).max(1);

    let mut grid = search.grid(cfg.coarse_grid, cfg.fraction_grid);
    let scores: Vec<f64> = grid
        .par_iter_mut()
        .map(|z| search.scan_horizon(z, coarse_k, w0, cfg.t_scan))
        .collect();
    let mut ranked: Vec<usize> = (0..grid.len()).filter(|&i| scores[i].is_finite()).collect();
    ranked.sort_by(|&a, &b| cmp_candidates((scores[a], &grid[a]), (scores[b], &grid[b])));
    ranked.truncate(cfg.starts);
    if ranked.is_empty() {
        return Err(OptimizerError::InvalidConfig(
            "every coarse candidate failed to integrate".into(),
        ));
    }

    let screen_k = cfg.screen_k.min(cfg.k).max(1);
    let screen_min_step = cfg.min_step.max(0.1 / screen_k as f64);
    let step0 = 0.5 / cfg.coarse_grid as f64;
    let polished: Vec<(Vec<f64>, Score, Vec<HistoryEntry>)> = ranked
        .par_iter()
        .enumerate()
        .map(|(n, &i)| {
            let mut rng = seeded(cfg.seed, n as u64);
            let mut history = Vec::new();
            let (z, f) = search.polish(
                &grid[i],
                screen_k,
                w0,
                step0,
                screen_min_step,
                cfg.polish_iters,
                &mut rng,
                &mut history,
            );
            (z, f, history)
        })
        .collect();

    let (z, _, _) = polished
        .into_iter()
        .min_by(|a, b| cmp_candidates((a.1.objective(w0), &a.0), (b.1.objective(w0), &b.0)))
        .expect("at least one start");
    // Final polish at full resolution; the history starts here.
    let mut history = Vec::new();
    let mut rng = seeded(cfg.seed, 0xF1A1);
    let fine_step = (4.0 * screen_min_step).max(cfg.min_step);
    let (z, f) = search.polish(
        &z,
        cfg.k,
        w0,
        fine_step,
        cfg.min_step,
        cfg.polish_iters,
        &mut rng,
        &mut history,
    );
    let (z, f, w) = enforce_endpoint(&search, cfg, z, f, cfg.k, w0, fine_step, &mut history);
    let result = search.finish(&z, cfg.k, w, history, cfg, None)?;
    if f.violation > cfg.endpoint_tolerance {
        return Err(OptimizerError::NoFeasiblePoint {
            penalty: result.penalty,
            best: Box::new(result),
        });
    }
    Ok(result)
}

/// Re-polish a result on a finer grid, starting from its decision vector.
pub fn refine(
    p: &SweepingProblem,
    result: &OptimizerResult,
    k2: usize,
) -> Result<OptimizerResult, OptimizerError> {
    if k2 == result.k {
        return Ok(result.clone());
    }
    if k2 < result.k {
        return Err(OptimizerError::InvalidConfig(format!(
            "refinement needs k2 > {}",
            result.k
        )));
    }
    let mut cfg = result.config.clone();
    validate(p, &cfg)?;
    cfg.k = k2;
    cfg.min_step = cfg.min_step.min(0.1 / k2 as f64);
    let search = Search {
        p,
        m: cfg.segments,
        d: p.d(),
        bracket: bracket(p, &cfg)?,
        evaluations: AtomicUsize::new(0),
    };
    let start = search.normalized(&result.decision);
    let mut history = Vec::new();
    let mut rng = seeded(cfg.seed, 0xFEED);
    let step0 = 1e-3;
    let (z, f) = search.polish(
        &start,
        k2,
        result.weight,
        step0,
        cfg.min_step,
        cfg.polish_iters,
        &mut rng,
        &mut history,
    );
    let (z, f, w) = enforce_endpoint(&search, &cfg, z, f, k2, result.weight, step0, &mut history);
    let mut out = search.finish(&z, k2, w, history, &cfg, None)?;
    out.refined_delta = Some(out.cost - result.cost);
    if f.violation > cfg.endpoint_tolerance {
        return Err(OptimizerError::NoFeasiblePoint {
            penalty: out.penalty,
            best: Box::new(out),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example;
    use nalgebra::DMatrix;

    fn cfg(m: usize, k: usize) -> OptimizerConfig {
        let mut c = OptimizerConfig::new(m, k);
        c.t_bracket = Some((0.5, 4.0));
        c
    }

    #[test]
    fn decode_sorts_fractions_and_drops_empty_pieces() {
        let p = example::problem(-3.0);
        let s = Search {
            p: &p,
            m: 3,
            d: 1,
            bracket: (1.0, 3.0),
            evaluations: AtomicUsize::new(0),
        };
        let law = s.law(&[0.75, 0.25, 1.0, 0.5, 0.0, 0.5]).unwrap();
        assert_eq!(law.breakpoints(), &[0.0, 0.5, 1.5, 2.0]);
        assert_eq!(law.levels()[0][0], 2.0);
        assert_eq!(law.levels()[2][0], -2.0);
        let law = s.law(&[0.0, 0.5, 1.0, 0.5, 0.0, 0.5]).unwrap();
        assert_eq!(law.segments(), 2);
        let z = [0.25, 0.75, 1.0, 0.5, 0.0, 0.5];
        let back = s.normalized(&s.natural(&z));
        assert!(back
            .iter()
            .zip(z.iter())
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn pure_time_minimization_hits_the_lower_bracket() {
        let mut p = example::problem(-3.0);
        p.phi_w = DVector::zeros(2);
        p.omega_x_e = DMatrix::zeros(0, 2);
        p.omega_x_rhs = DVector::zeros(0);
        let r = optimize(&p, &cfg(1, 200)).unwrap();
        assert_eq!(r.horizon, 0.5);
        assert_eq!(r.penalty, 0.0);
    }

    #[test]
    fn single_segment_optimum() {
        let p = example::problem(-3.0);
        let r = optimize(&p, &cfg(1, 1000)).unwrap();
        // One constant level reaches x₂ = 1 with x₁(T) = −T; the best is
        // u = 1.5, T = 2, J = 2.5, below the no-switch u ≡ 2 value 3.
        assert!((r.cost - 2.5).abs() < 1e-2, "{r:?}");
        assert!(r.cost <= 3.0);
        assert!(r.penalty <= r.config.endpoint_tolerance);
    }

    #[test]
    fn history_is_monotone_per_weight() {
        let p = example::problem(-3.0);
        let r = optimize(&p, &cfg(2, 400)).unwrap();
        for w in r.history.windows(2) {
            if w[0].weight == w[1].weight {
                assert!(w[1].objective <= w[0].objective);
            }
        }
    }

    #[test]
    fn reported_cost_matches_fresh_integration() {
        let p = example::problem(-3.0);
        let r = optimize(&p, &cfg(2, 500)).unwrap();
        let traj = integrate(&p, &r.law, r.k).unwrap();
        assert!((crate::problem::mayer_cost(&p, &traj) - r.cost).abs() <= 1e-12);
    }

    #[test]
    fn refine_same_k_is_identity() {
        let p = example::problem(-3.0);
        let r = optimize(&p, &cfg(1, 300)).unwrap();
        assert_eq!(refine(&p, &r, 300).unwrap(), r);
        assert!(refine(&p, &r, 100).is_err());
    }

    #[test]
    fn unbounded_interval_needs_bracket() {
        let p = example::problem(-3.0);
        let c = OptimizerConfig::new(1, 100);
        assert!(matches!(
            optimize(&p, &c),
            Err(OptimizerError::InvalidConfig(_))
        ));
    }

    #[test]
    fn unreachable_endpoint_is_reported() {
        let mut p = example::problem(-3.0);
        p.omega_x_rhs = DVector::from_element(1, 50.0);
        let mut c = cfg(1, 100);
        c.max_doublings = 1;
        c.polish_iters = 50;
        match optimize(&p, &c) {
            Err(OptimizerError::NoFeasiblePoint { penalty, .. }) => assert!(penalty > 1.0),
            other => panic!("{other:?}"),
        }
    }
}

//! Velocity cutoff with synthetic friction, escape experiments, selection of
//! the cutoff speed, geodesic tracking and geodesic escape times.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::geodesic_system;
use crate::ode::{final_state_until, integrate, Direction, EventSpec, IntegratorConfig, State};
use crate::segment::{PeriodicSegment, Region, SegmentKind};
use crate::system::{MetricSpec, SystemSpec};

/// Which speed variable enters the cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    /// `χ(|q'_j|)` applied to each component separately.
    Componentwise,
    /// `χ(|q'|)` with the Euclidean norm.
    EuclideanNorm,
    /// `χ(⟨q', A q'⟩ / 2)`; needs a metric.
    MetricEnergy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffProfile {
    pub p: f64,
    pub eps: f64,
    pub mu: f64,
    /// Degree of the smoothstep transition, 3 or 5.
    pub degree: u8,
    pub band: Band,
}

impl CutoffProfile {
    pub fn new(p: f64, eps: f64, mu: f64) -> Result<Self> {
        let c = CutoffProfile { p, eps, mu, degree: 5, band: Band::Componentwise };
        c.validate()?;
        Ok(c)
    }

    pub fn with_band(mut self, band: Band) -> Self {
        self.band = band;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > self.eps && self.eps > 0.0 && self.mu > 0.0) {
            return Err(Error::InvalidInput(format!(
                "cutoff needs p > eps > 0 and mu > 0 (p = {}, eps = {}, mu = {})",
                self.p, self.eps, self.mu
            )));
        }
        if self.degree != 3 && self.degree != 5 {
            return Err(Error::InvalidInput("cutoff degree must be 3 or 5".into()));
        }
        Ok(())
    }

    /// Band speed of a state.
    pub fn band_speed(&self, system: &SystemSpec, q: &[f64], qd: &[f64]) -> f64 {
        match self.band {
            Band::Componentwise => qd.iter().fold(0.0, |m, v| m.max(v.abs())),
            Band::EuclideanNorm => qd.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Band::MetricEnergy => match &system.metric {
                Some(m) => 0.5 * m.norm2(q, qd),
                None => 0.5 * qd.iter().map(|v| v * v).sum::<f64>(),
            },
        }
    }
}

fn smoothstep(x: f64, degree: u8) -> f64 {
    let x = x.clamp(0.0, 1.0);
    if degree == 3 {
        x * x * (3.0 - 2.0 * x)
    } else {
        x * x * x * (x * (6.0 * x - 15.0) + 10.0)
    }
}

/// `χ_{p,ε}`: 1 when `|speed - p| >= ε`, 0 when `|speed - p| <= ε/2`, a
/// monotone smoothstep in between.
pub fn chi(profile: &CutoffProfile, speed: f64) -> f64 {
    let d = (speed.abs() - profile.p).abs();
    let (e, h) = (profile.eps, 0.5 * profile.eps);
    if d >= e {
        1.0
    } else if d <= h {
        0.0
    } else {
        smoothstep((d - h) / h, profile.degree)
    }
}

/// `q'' = a - (1 - χ)(v + μ q')`: for flat systems `v χ - μ q' (1 - χ)`, and the
/// geodesic part of metric systems is left untouched.
pub fn modified_system(system: &SystemSpec, profile: &CutoffProfile) -> Result<SystemSpec> {
    profile.validate()?;
    if profile.band == Band::MetricEnergy && system.metric.is_none() {
        return Err(Error::InvalidInput("metric-energy cutoff needs a metric system".into()));
    }
    let accel = system.accel_fn();
    let forcing = system.forcing_fn();
    let has_metric = system.metric.is_some();
    let metric = system.metric.clone();
    let pr = *profile;
    let n = system.dim;
    let mixed = move |t: f64, q: &[f64], qd: &[f64], out: &mut [f64]| {
        accel(t, q, qd, out);
        let mut v = vec![0.0; n];
        if has_metric {
            forcing(t, q, qd, &mut v);
        } else {
            v.copy_from_slice(out);
        }
        let common = match pr.band {
            Band::Componentwise => None,
            Band::EuclideanNorm => Some(chi(&pr, qd.iter().map(|x| x * x).sum::<f64>().sqrt())),
            Band::MetricEnergy => Some(chi(&pr, 0.5 * metric.as_ref().unwrap().norm2(q, qd))),
        };
        for j in 0..n {
            let c = common.unwrap_or_else(|| chi(&pr, qd[j]));
            if c < 1.0 {
                out[j] -= (1.0 - c) * (v[j] + pr.mu * qd[j]);
            }
        }
    };
    let mut sys = match &system.metric {
        Some(m) => {
            let f2 = system.forcing_fn();
            let pr2 = pr;
            let m2 = m.clone();
            let forcing_mod = move |t: f64, q: &[f64], qd: &[f64], out: &mut [f64]| {
                f2(t, q, qd, out);
                let c = match pr2.band {
                    Band::MetricEnergy => Some(chi(&pr2, 0.5 * m2.norm2(q, qd))),
                    Band::EuclideanNorm => Some(chi(&pr2, qd.iter().map(|x| x * x).sum::<f64>().sqrt())),
                    Band::Componentwise => None,
                };
                for j in 0..out.len() {
                    let c = c.unwrap_or_else(|| chi(&pr2, qd[j]));
                    out[j] = out[j] * c - pr2.mu * qd[j] * (1.0 - c);
                }
            };
            SystemSpec::metric_with_accel(format!("{}+cutoff", system.name), m.clone(), system.period, mixed, forcing_mod)
        }
        None => SystemSpec::flat(format!("{}+cutoff", system.name), n, system.period, mixed),
    };
    if let Some(c) = system.chart().cloned() {
        sys = sys.with_chart(move |q| c(q));
    }
    Ok(sys)
}


/// The field part `χ v` of the modified system (componentwise band for flat
/// systems, as in [`modified_system`]).
pub fn cutoff_forcing(system: &SystemSpec, profile: &CutoffProfile, t: f64, q: &[f64], qd: &[f64]) -> Vec<f64> {
    let mut v = system.forcing(t, q, qd);
    let common = match profile.band {
        Band::Componentwise => None,
        _ => Some(chi(profile, profile.band_speed(system, q, qd))),
    };
    for (j, x) in v.iter_mut().enumerate() {
        *x *= common.unwrap_or_else(|| chi(profile, qd[j]));
    }
    v
}

/// Copy of `segment` with speed bound `p`.
pub fn with_speed_bound(segment: &PeriodicSegment, p: f64) -> PeriodicSegment {
    let mut s = segment.clone();
    match &mut s.kind {
        SegmentKind::Box { p: old, .. } | SegmentKind::MetricBall { p: old, .. } => *old = p,
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeConfig {
    pub n_samples: usize,
    /// Start times spread uniformly over `[0, T)`.
    pub n_times: usize,
    pub t_max: f64,
    /// Widening of the slab (boxes) or depth below `ρ = 0` (regions) that counts as escape.
    pub widen: f64,
    pub seed: u64,
    pub integrator: IntegratorConfig,
}

impl Default for EscapeConfig {
    fn default() -> Self {
        EscapeConfig {
            n_samples: 200,
            n_times: 8,
            t_max: 1.0,
            widen: 1.0,
            seed: 0,
            integrator: IntegratorConfig::default().with_tol(1e-9).with_dense_dt(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EscapeCase {
    pub t0: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub modified: bool,
    /// Exit time measured from `t0`; `None` when the trajectory did not leave.
    pub time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EscapeReport {
    pub tested: usize,
    pub escaped: usize,
    pub max_escape_time: f64,
    pub worst_case: Option<EscapeCase>,
    /// First few trajectories that stayed (at most 16).
    pub failures: Vec<EscapeCase>,
}

impl EscapeReport {
    pub fn passed(&self) -> bool {
        self.tested > 0 && self.escaped == self.tested
    }
}

fn band_sample(segment: &PeriodicSegment, profile: &CutoffProfile, rng: &mut ChaCha8Rng, t0: f64, k: usize) -> (Vec<f64>, Vec<f64>) {
    let (p, e) = (profile.p, profile.eps);
    let speed = rng.gen_range((p - e)..=(p + e));
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    match &segment.kind {
        SegmentKind::Box { barriers, .. } => {
            let n = barriers.len();
            let j = k % n;
            let q = barriers.iter().map(|b| rng.gen_range(b.x1.value(t0)..=b.x2.value(t0))).collect();
            let qd = (0..n)
                .map(|i| if i == j { sign * speed } else { rng.gen_range(-(p - e)..=(p - e)) })
                .collect();
            (q, qd)
        }
        SegmentKind::MetricBall { region, metric, .. } => {
            let n = region.dim();
            let u: Vec<f64> = (0..n + 1).map(|_| rng.gen::<f64>()).collect();
            let q = region.interior_point(&u);
            let dir: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // energy ⟨q', A q'⟩ / 2 in the band
            let scale = (2.0 * speed / metric.norm2(&q, &dir).max(1e-300)).sqrt();
            (q, dir.iter().map(|d| d * scale).collect())
        }
    }
}

fn escape_event(segment: &PeriodicSegment, widen: f64) -> EventSpec {
    match &segment.kind {
        SegmentKind::Box { barriers, .. } => {
            let period = segment.period;
            let slabs: Vec<(f64, f64)> = barriers
                .iter()
                .map(|b| {
                    let ts = (0..=512).map(|i| period * i as f64 / 512.0);
                    let lo = ts.clone().map(|t| b.x1.value(t)).fold(f64::INFINITY, f64::min);
                    let hi = ts.map(|t| b.x2.value(t)).fold(f64::NEG_INFINITY, f64::max);
                    (lo - widen, hi + widen)
                })
                .collect();
            EventSpec::new(
                move |_, q, _| slabs.iter().zip(q).map(|((a, b), x)| (x - a).min(b - x)).fold(f64::INFINITY, f64::min),
                Direction::Falling,
                true,
            )
        }
        SegmentKind::MetricBall { region, .. } => {
            let r = region.clone();
            EventSpec::new(move |_, q, _| r.rho(q) + widen, Direction::Falling, true)
        }
    }
}

fn escape_time(system: &SystemSpec, event: &EventSpec, t0: f64, s: &State, cfg: &EscapeConfig) -> Option<f64> {
    match final_state_until(system, t0, s, std::slice::from_ref(event), t0 + cfg.t_max, &cfg.integrator) {
        Ok((_, _, hits)) => hits.first().map(|h| h.t - t0),
        Err(_) => None,
    }
}

/// Samples band states `|q'_j| ∈ [p - ε, p + ε]` (energy band for metric
/// segments) at several start times and requires every trajectory of both the
/// original and the modified system to leave the widened slab before `t_max`.
pub fn escape_experiment(
    system: &SystemSpec,
    segment: &PeriodicSegment,
    profile: &CutoffProfile,
    cfg: &EscapeConfig,
) -> Result<EscapeReport> {
    profile.validate()?;
    if cfg.n_samples == 0 || cfg.n_times == 0 || !(cfg.t_max > 0.0) {
        return Err(Error::InvalidInput("escape experiment needs samples, start times and t_max > 0".into()));
    }
    let modified = modified_system(system, profile)?;
    let event = escape_event(segment, cfg.widen);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..cfg.n_samples)
        .map(|k| {
            let t0 = segment.period * (k % cfg.n_times) as f64 / cfg.n_times as f64;
            let (q, qd) = band_sample(segment, profile, &mut rng, t0, k);
            (t0, q, qd)
        })
        .collect();
    let cases: Vec<EscapeCase> = samples
        .par_iter()
        .flat_map_iter(|(t0, q, qd)| {
            let s = State::new(q.clone(), qd.clone());
            [(system, false), (&modified, true)].map(|(sys, m)| EscapeCase {
                t0: *t0,
                q: q.clone(),
                qd: qd.clone(),
                modified: m,
                time: escape_time(sys, &event, *t0, &s, cfg),
            })
        })
        .collect();
    let mut report = EscapeReport { tested: cases.len(), escaped: 0, max_escape_time: 0.0, worst_case: None, failures: vec![] };
    for c in cases {
        match c.time {
            Some(t) => {
                report.escaped += 1;
                if t > report.max_escape_time || report.worst_case.is_none() {
                    report.max_escape_time = t;
                    report.worst_case = Some(c);
                }
            }
            None => {
                if report.failures.len() < 16 {
                    report.failures.push(c);
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct PRow {
    pub p: f64,
    pub passed: bool,
    pub report: EscapeReport,
}

/// Escape experiment for every scheduled `p` (same `ε`, `μ`, band as `template`).
pub fn p_table(
    system: &SystemSpec,
    segment: &PeriodicSegment,
    template: &CutoffProfile,
    schedule: &[f64],
    cfg: &EscapeConfig,
) -> Result<Vec<PRow>> {
    if schedule.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("p schedule must be strictly increasing".into()));
    }
    schedule
        .iter()
        .map(|&p| {
            let profile = CutoffProfile { p, ..*template };
            let report = escape_experiment(system, &with_speed_bound(segment, p), &profile, cfg)?;
            Ok(PRow { p, passed: report.passed(), report })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Selection {
    pub p: f64,
    pub table: Vec<PRow>,
}

impl Selection {
    /// Whether every scheduled value above a passing one also passes.
    pub fn upward_closed(&self) -> bool {
        upward_closed(&self.table)
    }
}

pub fn upward_closed(table: &[PRow]) -> bool {
    match table.iter().position(|r| r.passed) {
        Some(i) => table[i..].iter().all(|r| r.passed),
        None => true,
    }
}

/// Smallest scheduled `p` whose escape experiment passes.
pub fn select_p(
    system: &SystemSpec,
    segment: &PeriodicSegment,
    template: &CutoffProfile,
    schedule: &[f64],
    cfg: &EscapeConfig,
) -> Result<Selection> {
    let table = p_table(system, segment, template, schedule, cfg)?;
    match table.iter().find(|r| r.passed) {
        Some(r) => Ok(Selection { p: r.p, table }),
        None => Err(Error::ScheduleExhausted),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackingRow {
    pub lambda: f64,
    /// `sup ‖q1(t) - q2(t)‖` over `t ∈ [0, T_geo / λ]`, chart coordinates.
    pub deviation: f64,
    pub t_end: f64,
}

/// Perturbed motion `∇_{q'} q' = v` against the geodesic from `(q0, λ q0')`
/// over `[0, T_geo / λ]`, for every `λ`.
pub fn geodesic_tracking(
    metric: &MetricSpec,
    v: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    q0: &[f64],
    qd0: &[f64],
    t_geo: f64,
    lambdas: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<TrackingRow>> {
    let n = metric.dim;
    if q0.len() != n || qd0.len() != n || !(t_geo > 0.0) {
        return Err(Error::InvalidInput("tracking needs n-dimensional initial data and T_geo > 0".into()));
    }
    let m = metric.clone();
    let perturbed = SystemSpec::metric("perturbed", metric.clone(), 1.0, v)
        .with_chart(move |q| q.len() == n && m.check(q).is_ok());
    let geo = geodesic_system(metric.clone());
    lambdas
        .iter()
        .map(|&lambda| {
            let t_end = t_geo / lambda;
            let s0 = State::new(q0.to_vec(), qd0.iter().map(|x| lambda * x).collect());
            let dense = IntegratorConfig { dense_dt: t_end / 256.0, max_step: t_end / 64.0, ..*cfg };
            let run = |sys: &SystemSpec| {
                integrate(sys, 0.0, &s0, t_end, &dense).map_err(|e| match e {
                    Error::ChartSingularity { t } => Error::ChartExit { lambda, t },
                    other => other,
                })
            };
            let a = run(&perturbed)?;
            let b = run(&geo)?;
            let mut dev = 0.0_f64;
            for k in 0..=2048 {
                let t = t_end * k as f64 / 2048.0;
                let (x, y) = (a.state_at(t), b.state_at(t));
                let d = x.q.iter().zip(&y.q).map(|(u, w)| (u - w) * (u - w)).sum::<f64>().sqrt();
                dev = dev.max(d);
            }
            Ok(TrackingRow { lambda, deviation: dev, t_end })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EscapeBound {
    /// Largest sampled exit time; an empirical estimate, not a certificate.
    pub tau: f64,
    pub n_points: usize,
    pub n_directions: usize,
    pub worst_q: Vec<f64>,
    pub worst_qd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscapeBoundConfig {
    /// Interior sample points; a quarter of them sit on `∂D`.
    pub n_points: usize,
    pub n_directions: usize,
    /// Hard time cap; a geodesic still inside at the cap raises `NoEscape`.
    pub cap: f64,
    pub seed: u64,
    pub integrator: IntegratorConfig,
}

impl Default for EscapeBoundConfig {
    fn default() -> Self {
        EscapeBoundConfig {
            n_points: 64,
            n_directions: 32,
            cap: 50.0,
            seed: 0,
            integrator: IntegratorConfig::default().with_tol(1e-10).with_dense_dt(0.0),
        }
    }
}

/// Sampled sup of the time unit-speed geodesics from `D̄` need to leave the
/// `δ`-neighbourhood `{ρ > -δ}`.
pub fn escape_time_bound(metric: &MetricSpec, region: &Region, delta: f64, cfg: &EscapeBoundConfig) -> Result<EscapeBound> {
    if region.dim() != metric.dim || !(delta > 0.0) || cfg.n_points == 0 || cfg.n_directions == 0 {
        return Err(Error::InvalidInput("escape bound needs matching dimensions, delta > 0 and samples".into()));
    }
    let n = metric.dim;
    let sys = geodesic_system(metric.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut starts = Vec::with_capacity(cfg.n_points * cfg.n_directions);
    for i in 0..cfg.n_points {
        let mut u: Vec<f64> = (0..n + 1).map(|_| rng.gen::<f64>()).collect();
        if i % 4 == 0 {
            // radial parameter 1 puts ball and cap samples on the boundary
            u[0] = 1.0;
        }
        let q = region.interior_point(&u);
        for k in 0..cfg.n_directions {
            let dir: Vec<f64> = if n == 2 {
                let a = std::f64::consts::TAU * (k as f64 + rng.gen::<f64>()) / cfg.n_directions as f64;
                vec![a.cos(), a.sin()]
            } else {
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            let s = metric.norm2(&q, &dir).max(1e-300).sqrt();
            starts.push((q.clone(), dir.iter().map(|d| d / s).collect::<Vec<f64>>()));
        }
    }
    let r = region.clone();
    let event = EventSpec::new(move |_, q, _| r.rho(q) + delta, Direction::Falling, true);
    let times: Vec<Result<f64>> = starts
        .par_iter()
        .map(|(q, qd)| {
            let s = State::new(q.clone(), qd.clone());
            let (_, _, hits) = final_state_until(&sys, 0.0, &s, std::slice::from_ref(&event), cfg.cap, &cfg.integrator)?;
            hits.first().map(|h| h.t).ok_or_else(|| Error::NoEscape { q: q.clone(), qd: qd.clone(), cap: cfg.cap })
        })
        .collect();
    let mut best = EscapeBound { tau: 0.0, n_points: cfg.n_points, n_directions: cfg.n_directions, worst_q: vec![], worst_qd: vec![] };
    for (t, (q, qd)) in times.into_iter().zip(&starts) {
        let t = t?;
        if t >= best.tau {
            best.tau = t;
            best.worst_q = q.clone();
            best.worst_qd = qd.clone();
        }
    }
    Ok(best)
}

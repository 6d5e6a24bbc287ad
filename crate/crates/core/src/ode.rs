//! Adaptive Dormand–Prince 5(4) integration of second-order non-autonomous
//! systems `q'' = a(t, q, q')`, with cubic Hermite dense output and guard-based
//! event localization.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::SystemSpec;

/// Phase-space point `(q, q')` in chart coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

impl State {
    pub fn new(q: Vec<f64>, qd: Vec<f64>) -> Self {
        debug_assert_eq!(q.len(), qd.len());
        State { q, qd }
    }

    /// One-degree-of-freedom state.
    pub fn scalar(q: f64, qd: f64) -> Self {
        State { q: vec![q], qd: vec![qd] }
    }

    pub fn from_flat(y: &[f64]) -> Self {
        let n = y.len() / 2;
        State { q: y[..n].to_vec(), qd: y[n..].to_vec() }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut y = Vec::with_capacity(2 * self.q.len());
        y.extend_from_slice(&self.q);
        y.extend_from_slice(&self.qd);
        y
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.qd).all(|x| x.is_finite())
    }

    /// Max-norm distance between two states.
    pub fn max_dist(&self, other: &State) -> f64 {
        self.q
            .iter()
            .chain(&self.qd)
            .zip(other.q.iter().chain(&other.qd))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    /// Spacing of the dense output grid; non-positive disables dense sampling.
    pub dense_dt: f64,
    /// Fixed-step reference mode (no error control) when set.
    pub fixed_step: Option<f64>,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rel_tol: 1e-10,
            abs_tol: 1e-10,
            max_step: 0.05,
            dense_dt: 0.01,
            fixed_step: None,
            max_steps: 5_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.rel_tol = tol;
        self.abs_tol = tol;
        self
    }

    pub fn with_dense_dt(mut self, dt: f64) -> Self {
        self.dense_dt = dt;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0 && self.max_step > 0.0) {
            return Err(Error::InvalidInput("integrator tolerances and max_step must be positive".into()));
        }
        if let Some(h) = self.fixed_step {
            if !(h > 0.0) {
                return Err(Error::InvalidInput("fixed step must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Knot {
    t: f64,
    y: Vec<f64>,
    f: Vec<f64>,
}

/// Densely sampled solution with the accepted step knots kept for interpolation.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub samples: Vec<(f64, State)>,
    pub t0: f64,
    pub t1: f64,
    /// Sum over accepted steps of the max-norm local error estimate.
    pub est_error: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    knots: Vec<Knot>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.samples[0].1.dim()
    }

    pub fn first(&self) -> &State {
        &self.samples[0].1
    }

    pub fn last(&self) -> &State {
        &self.samples[self.samples.len() - 1].1
    }

    /// Hermite-interpolated state at `t` in `[t0, t1]`.
    pub fn state_at(&self, t: f64) -> State {
        let t = t.clamp(self.t0, self.t1);
        let i = match self.knots.binary_search_by(|k| k.t.partial_cmp(&t).unwrap()) {
            Ok(i) => return State::from_flat(&self.knots[i].y),
            Err(i) => i.clamp(1, self.knots.len() - 1),
        };
        State::from_flat(&hermite(&self.knots[i - 1], &self.knots[i], t))
    }
}

fn hermite(a: &Knot, b: &Knot, t: f64) -> Vec<f64> {
    let h = b.t - a.t;
    let s = (t - a.t) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    (0..a.y.len())
        .map(|i| h00 * a.y[i] + h10 * h * a.f[i] + h01 * b.y[i] + h11 * h * b.f[i])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Rising,
    Falling,
    Any,
}

pub type GuardFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;

/// Scalar guard whose sign changes mark events.
#[derive(Clone)]
pub struct EventSpec {
    pub guard: GuardFn,
    pub direction: Direction,
    pub terminal: bool,
}

impl EventSpec {
    pub fn new(
        guard: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
        direction: Direction,
        terminal: bool,
    ) -> Self {
        EventSpec { guard: Arc::new(guard), direction, terminal }
    }

    fn eval(&self, t: f64, y: &[f64]) -> f64 {
        let n = y.len() / 2;
        (self.guard)(t, &y[..n], &y[n..])
    }

    fn crossed(&self, before: f64, after: f64) -> bool {
        let rising = before < 0.0 && after >= 0.0;
        let falling = before > 0.0 && after <= 0.0;
        match self.direction {
            Direction::Rising => rising,
            Direction::Falling => falling,
            Direction::Any => rising || falling,
        }
    }
}

impl fmt::Debug for EventSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventSpec")
            .field("direction", &self.direction)
            .field("terminal", &self.terminal)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventHit {
    pub index: usize,
    pub t: f64,
    pub state: State,
}

/// Integrate `system` from `(t0, s0)` to `t1`.
pub fn integrate(system: &SystemSpec, t0: f64, s0: &State, t1: f64, cfg: &IntegratorConfig) -> Result<Trajectory> {
    check_span(system, t0, s0, t1)?;
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| system.flow(t, y, dy);
    let run = drive(&rhs, system, t0, &s0.to_flat(), t1, cfg, &[], true)?;
    Ok(run.trajectory.expect("recorded run"))
}

/// Integrate until `t_max` or the first terminal event, reporting every event hit.
pub fn integrate_until(
    system: &SystemSpec,
    t0: f64,
    s0: &State,
    events: &[EventSpec],
    t_max: f64,
    cfg: &IntegratorConfig,
) -> Result<(Trajectory, Vec<EventHit>)> {
    check_span(system, t0, s0, t_max)?;
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| system.flow(t, y, dy);
    let run = drive(&rhs, system, t0, &s0.to_flat(), t_max, cfg, events, true)?;
    Ok((run.trajectory.expect("recorded run"), run.hits))
}

/// Final state only; skips dense output and knot storage.
pub fn final_state(system: &SystemSpec, t0: f64, s0: &State, t1: f64, cfg: &IntegratorConfig) -> Result<State> {
    check_span(system, t0, s0, t1)?;
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| system.flow(t, y, dy);
    let run = drive(&rhs, system, t0, &s0.to_flat(), t1, cfg, &[], false)?;
    Ok(State::from_flat(&run.y_end))
}

/// Final state and terminal/non-terminal hits, without recording the path.
pub fn final_state_until(
    system: &SystemSpec,
    t0: f64,
    s0: &State,
    events: &[EventSpec],
    t_max: f64,
    cfg: &IntegratorConfig,
) -> Result<(f64, State, Vec<EventHit>)> {
    check_span(system, t0, s0, t_max)?;
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| system.flow(t, y, dy);
    let run = drive(&rhs, system, t0, &s0.to_flat(), t_max, cfg, events, false)?;
    Ok((run.t_end, State::from_flat(&run.y_end), run.hits))
}

fn check_span(system: &SystemSpec, t0: f64, s0: &State, t1: f64) -> Result<()> {
    if !(t1 > t0) {
        return Err(Error::InvalidInput(format!("empty time span [{t0}, {t1}]")));
    }
    if s0.q.len() != system.dim || s0.qd.len() != system.dim {
        return Err(Error::InvalidInput(format!(
            "state dimension {} does not match system dimension {}",
            s0.q.len(),
            system.dim
        )));
    }
    if !s0.is_finite() {
        return Err(Error::NonFiniteState { t: t0 });
    }
    Ok(())
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

struct Workspace {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y_new: Vec<f64>,
    err: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Workspace {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            y_new: vec![0.0; n],
            err: vec![0.0; n],
        }
    }
}

/// One DP step from `(t, y)` with `k[0] = f(t, y)` already filled. Leaves the
/// 5th-order result in `ws.y_new`, `f(t+h, y_new)` in `ws.k[6]` and the
/// embedded error vector in `ws.err`.
fn dp_step<F>(rhs: &F, t: f64, y: &[f64], h: f64, ws: &mut Workspace)
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    for s in 1..7 {
        for i in 0..n {
            let mut acc = 0.0;
            for (j, a) in A[s].iter().enumerate().take(s) {
                acc += a * ws.k[j][i];
            }
            ws.tmp[i] = y[i] + h * acc;
        }
        let (_, rest) = ws.k.split_at_mut(s);
        rhs(t + C[s] * h, &ws.tmp, &mut rest[0]);
    }
    // stage 7 is evaluated at the 5th-order solution (FSAL)
    ws.y_new.copy_from_slice(&ws.tmp);
    for i in 0..n {
        let mut e = 0.0;
        for (j, c) in E.iter().enumerate() {
            e += c * ws.k[j][i];
        }
        ws.err[i] = h * e;
    }
}

struct Run {
    trajectory: Option<Trajectory>,
    hits: Vec<EventHit>,
    t_end: f64,
    y_end: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn drive<F>(
    rhs: &F,
    system: &SystemSpec,
    t0: f64,
    y0: &[f64],
    t1: f64,
    cfg: &IntegratorConfig,
    events: &[EventSpec],
    record: bool,
) -> Result<Run>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    cfg.validate()?;
    let n = y0.len();
    let mut ws = Workspace::new(n);
    let mut t = t0;
    let mut y = y0.to_vec();
    rhs(t, &y, &mut ws.k[0]);
    if ws.k[0].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { t });
    }
    let mut knots = Vec::new();
    if record {
        knots.push(Knot { t, y: y.clone(), f: ws.k[0].clone() });
    }
    let mut guard_prev: Vec<f64> = events.iter().map(|e| e.eval(t, &y)).collect();
    let mut hits = Vec::new();
    let mut est_error = 0.0;
    let (mut accepted, mut rejected) = (0usize, 0usize);

    let span = t1 - t0;
    let mut h = match cfg.fixed_step {
        Some(hf) => hf,
        None => initial_step(rhs, t, &y, &ws.k[0], cfg).min(cfg.max_step).min(span),
    };
    let mut err_old = 1e-4_f64;
    let mut last_rejected = false;
    let t_eps = 1e-13 * t1.abs().max(span).max(1.0);

    'outer: while t < t1 - t_eps {
        if accepted + rejected >= cfg.max_steps {
            return Err(Error::TooManySteps(cfg.max_steps));
        }
        let mut final_step = false;
        if t + h >= t1 - t_eps {
            h = t1 - t;
            final_step = true;
        }
        let hmin = 1e-14 * t.abs().max(1.0);
        if h < hmin {
            return Err(Error::StepUnderflow { t, h });
        }
        dp_step(rhs, t, &y, h, &mut ws);

        let accept;
        let mut h_next;
        if cfg.fixed_step.is_some() {
            accept = ws.y_new.iter().all(|v| v.is_finite());
            if !accept {
                return Err(Error::NonFiniteState { t: t + h });
            }
            h_next = cfg.fixed_step.unwrap();
        } else {
            let mut sq = 0.0;
            for i in 0..n {
                let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(ws.y_new[i].abs());
                let r = ws.err[i] / sc;
                sq += r * r;
            }
            let err = (sq / n as f64).sqrt();
            if !err.is_finite() {
                rejected += 1;
                h *= 0.25;
                if h < hmin {
                    return Err(Error::NonFiniteState { t });
                }
                last_rejected = true;
                continue;
            }
            // PI controller (Hairer & Wanner, DOPRI5 constants)
            const BETA: f64 = 0.04;
            const EXPO: f64 = 0.2 - BETA * 0.75;
            const SAFE: f64 = 0.9;
            let fac11 = err.powf(EXPO);
            if err <= 1.0 {
                accept = true;
                let fac = (fac11 / err_old.powf(BETA) / SAFE).clamp(0.1, 5.0);
                h_next = h / fac;
                if last_rejected {
                    h_next = h_next.min(h);
                }
                err_old = err.max(1e-4);
            } else {
                accept = false;
                h_next = h / (fac11 / SAFE).min(5.0);
            }
            h_next = h_next.min(cfg.max_step);
        }

        if !accept {
            rejected += 1;
            last_rejected = true;
            h = h_next;
            continue;
        }
        last_rejected = false;
        accepted += 1;
        est_error += ws.err.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
        let t_new = if final_step { t1 } else { t + h };

        if ws.y_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t: t_new });
        }

        // events
        if !events.is_empty() {
            let guard_new: Vec<f64> = events.iter().map(|e| e.eval(t_new, &ws.y_new)).collect();
            let mut step_hits: Vec<(EventHit, bool)> = Vec::new();
            for (idx, ev) in events.iter().enumerate() {
                if ev.crossed(guard_prev[idx], guard_new[idx]) {
                    let (th, yh) = locate(rhs, ev, t, &y, &ws.k[0], t_new - t, guard_prev[idx]);
                    step_hits.push((EventHit { index: idx, t: th, state: State::from_flat(&yh) }, ev.terminal));
                }
            }
            step_hits.sort_by(|a, b| a.0.t.partial_cmp(&b.0.t).unwrap());
            if let Some(pos) = step_hits.iter().position(|(_, term)| *term) {
                step_hits.truncate(pos + 1);
                let (hit, _) = step_hits.last().unwrap().clone();
                let yh = hit.state.to_flat();
                for (h, _) in step_hits {
                    hits.push(h);
                }
                if record {
                    let mut fh = vec![0.0; n];
                    rhs(hit.t, &yh, &mut fh);
                    knots.push(Knot { t: hit.t, y: yh.clone(), f: fh });
                }
                t = hit.t;
                y = yh;
                break 'outer;
            }
            hits.extend(step_hits.into_iter().map(|(h, _)| h));
            guard_prev = guard_new;
        }

        t = t_new;
        std::mem::swap(&mut y, &mut ws.y_new);
        let (first, rest) = ws.k.split_at_mut(1);
        first[0].copy_from_slice(&rest[5]);
        if let Some(chart) = system.chart() {
            if !chart(&y[..n / 2]) {
                return Err(Error::ChartSingularity { t });
            }
        }
        if record {
            knots.push(Knot { t, y: y.clone(), f: ws.k[0].clone() });
        }
        h = h_next;
    }

    let trajectory = if record {
        let t_end = t;
        let mut samples = Vec::new();
        if cfg.dense_dt > 0.0 {
            let mut k = 0usize;
            let mut j = 1usize;
            loop {
                let ts = t0 + k as f64 * cfg.dense_dt;
                if ts >= t_end - t_eps {
                    break;
                }
                while knots[j].t < ts {
                    j += 1;
                }
                let y_s = if ts == knots[j - 1].t { knots[j - 1].y.clone() } else { hermite(&knots[j - 1], &knots[j], ts) };
                samples.push((ts, State::from_flat(&y_s)));
                k += 1;
            }
        } else {
            samples.push((t0, State::from_flat(&knots[0].y)));
        }
        samples.push((t_end, State::from_flat(&knots[knots.len() - 1].y)));
        Some(Trajectory {
            samples,
            t0,
            t1: t_end,
            est_error,
            accepted_steps: accepted,
            rejected_steps: rejected,
            knots,
        })
    } else {
        None
    };
    Ok(Run { trajectory, hits, t_end: t, y_end: y })
}

/// Bisection on the step fraction; each probe re-integrates a single DP step
/// from the step start.
fn locate<F>(rhs: &F, ev: &EventSpec, t: f64, y: &[f64], f0: &[f64], h: f64, g0: f64) -> (f64, Vec<f64>)
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let mut ws = Workspace::new(y.len());
    let (mut lo, mut hi) = (0.0_f64, h);
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        ws.k[0].copy_from_slice(f0);
        dp_step(rhs, t, y, mid, &mut ws);
        let g = ev.eval(t + mid, &ws.y_new);
        if best.as_ref().map_or(true, |b| g.abs() <= b.2.abs()) {
            best = Some((t + mid, ws.y_new.clone(), g));
        }
        if g.abs() < 1e-13 {
            break;
        }
        if (g < 0.0) == (g0 < 0.0) && g != 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * (t.abs() + h) {
            break;
        }
    }
    let (th, yh, _) = best.expect("at least one bisection probe");
    (th, yh)
}

fn initial_step<F>(rhs: &F, t: f64, y: &[f64], f0: &[f64], cfg: &IntegratorConfig) -> f64
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let sc: Vec<f64> = y.iter().map(|v| cfg.abs_tol + cfg.rel_tol * v.abs()).collect();
    let norm = |v: &[f64]| (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n as f64).sqrt();
    let d0 = norm(y);
    let d1 = norm(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
    let mut f1 = vec![0.0; n];
    rhs(t + h0, &y1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = norm(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    (100.0 * h0).min(h1)
}

/// One classical Runge–Kutta step of size `h` (negative allowed) on `y = [q, q']`.
pub fn rk4_step(system: &SystemSpec, t: f64, y: &[f64], h: f64) -> Vec<f64> {
    let m = y.len();
    let mut k = vec![vec![0.0; m]; 4];
    let mut tmp = vec![0.0; m];
    system.flow(t, y, &mut k[0]);
    for st in 1..4 {
        let c = if st == 3 { 1.0 } else { 0.5 };
        for i in 0..m {
            tmp[i] = y[i] + c * h * k[st - 1][i];
        }
        let mut out = vec![0.0; m];
        system.flow(t + c * h, &tmp, &mut out);
        k[st] = out;
    }
    (0..m).map(|i| y[i] + h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, TAU};

    fn harmonic() -> SystemSpec {
        SystemSpec::flat("harmonic", 1, TAU, |_, q, _, a| a[0] = -q[0])
    }

    fn free() -> SystemSpec {
        SystemSpec::flat("free", 1, 1.0, |_, _, _, a| a[0] = 0.0)
    }

    #[test]
    fn harmonic_oscillator_returns_after_full_period() {
        let traj = integrate(&harmonic(), 0.0, &State::scalar(1.0, 0.0), TAU, &IntegratorConfig::default()).unwrap();
        let end = traj.last();
        assert!((end.q[0] - 1.0).abs() < 1e-8 && end.qd[0].abs() < 1e-8, "{end:?}");
        assert_eq!(traj.samples[0].0, 0.0);
        assert_eq!(traj.samples.last().unwrap().0, TAU);
        assert!(traj.samples.windows(2).all(|w| w[1].0 > w[0].0));
    }

    #[test]
    fn free_particle_is_exact() {
        let t = 3.7;
        let end = final_state(&free(), 0.0, &State::scalar(0.0, 1.0), t, &IntegratorConfig::default()).unwrap();
        assert!((end.q[0] - t).abs() < 1e-12 && (end.qd[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn pendulum_equilibrium_stays_put() {
        let sys = SystemSpec::flat("pendulum", 1, TAU, |_, q, _, a| a[0] = -q[0].cos());
        let traj = integrate(&sys, 0.0, &State::scalar(FRAC_PI_2, 0.0), 20.0, &IntegratorConfig::default()).unwrap();
        for (_, s) in &traj.samples {
            assert!((s.q[0] - FRAC_PI_2).abs() < 1e-10 && s.qd[0].abs() < 1e-10);
        }
    }

    #[test]
    fn identical_inputs_are_bit_identical() {
        let sys = harmonic();
        let cfg = IntegratorConfig::default();
        let a = final_state(&sys, 0.0, &State::scalar(0.3, -0.2), 5.0, &cfg).unwrap();
        let b = final_state(&sys, 0.0, &State::scalar(0.3, -0.2), 5.0, &cfg).unwrap();
        assert_eq!(a.q[0].to_bits(), b.q[0].to_bits());
        assert_eq!(a.qd[0].to_bits(), b.qd[0].to_bits());
        let tr = integrate(&sys, 0.0, &State::scalar(0.3, -0.2), 5.0, &cfg).unwrap();
        assert_eq!(tr.last().q[0].to_bits(), a.q[0].to_bits());
    }

    #[test]
    fn event_on_free_particle() {
        let ev = EventSpec::new(|_, q, _| q[0] - 1.0, Direction::Rising, true);
        let (traj, hits) =
            integrate_until(&free(), 0.0, &State::scalar(0.0, 1.0), &[ev], 5.0, &IntegratorConfig::default()).unwrap();
        assert_eq!(hits.len(), 1);
        assert!((hits[0].t - 1.0).abs() < 1e-8);
        assert!((hits[0].state.q[0] - 1.0).abs() < 1e-10);
        assert_eq!(traj.t1, hits[0].t);
    }

    #[test]
    fn event_that_never_fires() {
        let ev = EventSpec::new(|_, q, _| q[0] - 10.0, Direction::Any, true);
        let (traj, hits) =
            integrate_until(&harmonic(), 0.0, &State::scalar(1.0, 0.0), &[ev], 7.0, &IntegratorConfig::default())
                .unwrap();
        assert!(hits.is_empty());
        assert_eq!(traj.t1, 7.0);
    }

    #[test]
    fn blow_up_is_reported() {
        let sys = SystemSpec::flat("blowup", 1, 1.0, |_, _, qd, a| a[0] = qd[0] * qd[0]);
        // q' = 1/(1-t) blows up at t = 1
        let err = final_state(&sys, 0.0, &State::scalar(0.0, 1.0), 2.0, &IntegratorConfig::default()).unwrap_err();
        assert!(matches!(err, Error::StepUnderflow { .. } | Error::NonFiniteState { .. }), "{err:?}");
    }

    #[test]
    fn rejects_empty_span_and_bad_dimension() {
        let cfg = IntegratorConfig::default();
        assert!(integrate(&free(), 1.0, &State::scalar(0.0, 0.0), 1.0, &cfg).is_err());
        assert!(integrate(&free(), 0.0, &State::new(vec![0.0; 2], vec![0.0; 2]), 1.0, &cfg).is_err());
    }

    #[test]
    fn dense_output_interpolates_accurately() {
        let traj = integrate(&harmonic(), 0.0, &State::scalar(1.0, 0.0), 6.0, &IntegratorConfig::default()).unwrap();
        for &t in &[0.123, 1.0, 2.71828, 5.5] {
            let s = traj.state_at(t);
            assert!((s.q[0] - t.cos()).abs() < 1e-7);
            assert!((s.qd[0] + t.sin()).abs() < 1e-7);
        }
    }
}

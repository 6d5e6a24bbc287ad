//! Gallery of mechanical systems and the growth-bound checker.

use std::f64::consts::SQRT_2;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::curve::CurveSpec;
use crate::error::{Error, Result};
use crate::system::{GrowthBound, MetricSpec, SystemSpec};
use crate::segment::BarrierPair;
use crate::timefn::{Jet, TimeFn};

pub type PendulumForce = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
pub type FieldFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type AmbientForce = Arc<dyn Fn(f64, &[f64; 3], &[f64; 3]) -> f64 + Send + Sync>;

/// Pendulum with a horizontally driven pivot: `q'' = f(t, q, q') sin q - cos q`.
/// `bound` is a constant with `|f| <= bound`.
pub fn pendulum_system(f: PendulumForce, bound: Option<f64>, period: f64) -> Result<SystemSpec> {
    let c = bound.ok_or(Error::UnboundedForce)?;
    if !(c.is_finite() && c >= 0.0) {
        return Err(Error::UnboundedForce);
    }
    let sys = SystemSpec::flat("pendulum", 1, period, move |t, q, qd, out| {
        let (s, co) = q[0].sin_cos();
        out[0] = f(t, q[0], qd[0]) * s - co;
    });
    Ok(sys.with_growth(GrowthBound::bounded(1.0 + c)))
}

/// Pendulum forced by a function of time only.
pub fn pendulum_time_forced(f: TimeFn, bound: f64, period: f64) -> Result<SystemSpec> {
    pendulum_system(Arc::new(move |t, _, _| f.value(t)), Some(bound), period)
}

/// Point on a curve in a vertical plane, moving horizontally:
/// `q'' = f(t) ξ'(q) - η'(q)`.
pub fn curve_pendulum_system(curve: CurveSpec, f: TimeFn, period: f64) -> SystemSpec {
    let fb = f.sup_abs(period, 2048).value * 1.01;
    SystemSpec::flat("curve_pendulum", 1, period, move |t, q, _, out| {
        let c = curve.at(q[0]);
        out[0] = f.value(t) * c.dxi - c.deta;
    })
    .with_growth(GrowthBound::bounded(fb + 1.0))
}

/// Unit mass sliding on a closed curve rotating by `φ(t)` in a vertical plane.
pub fn rotating_curve_system(curve: CurveSpec, phi: TimeFn, period: f64) -> SystemSpec {
    let (m_rot, m_rad) = curve.moment_bounds(4096);
    let pj = phi.sup_abs(period, 2048);
    let a = (pj.d2 * m_rot + pj.d1 * pj.d1 * m_rad + 1.0) * 1.01;
    SystemSpec::flat("rotating_curve", 1, period, move |t, q, _, out| {
        out[0] = rotating_curve_accel(&curve, &phi, t, q[0]);
    })
    .with_growth(GrowthBound::bounded(a))
}

pub fn rotating_curve_accel(curve: &CurveSpec, phi: &TimeFn, t: f64, s: f64) -> f64 {
    let c = curve.at(s);
    let p = phi.jet(t);
    let (sp, cp) = p.value.sin_cos();
    -p.d2 * (c.xi * c.deta - c.eta * c.dxi) + p.d1 * p.d1 * (c.xi * c.dxi + c.eta * c.deta)
        - (c.dxi * sp + c.deta * cp)
}

/// Parameters where the rotated tangent is vertical:
/// `ξ' sin φ + η' cos φ = -1` at `s1 ∈ [0, L)` and `= +1` at `s2 ∈ (s1, s1 + L)`.
pub fn s1_s2_of_t(curve: &CurveSpec, phi: &TimeFn, t: f64) -> Result<(f64, f64)> {
    if !curve.closed {
        return Err(Error::InvalidInput("rotating curve must be closed".into()));
    }
    let (sp, cp) = phi.value(t).sin_cos();
    let h = |s: f64| {
        let c = curve.at(s);
        c.dxi * cp - c.deta * sp
    };
    let n = 4096;
    let l = curve.length;
    let mut roots = Vec::new();
    let mut s_prev = 0.0;
    let h0 = h(0.0);
    let mut h_prev = h0;
    for i in 1..=n {
        let s = l * i as f64 / n as f64;
        // the last node is s = 0 again
        let hv = if i == n { h0 } else { h(s) };
        if h_prev == 0.0 {
            roots.push(s_prev);
        } else if h_prev * hv < 0.0 {
            roots.push(bisect(&h, s_prev, s, h_prev));
        }
        s_prev = s;
        h_prev = hv;
    }
    let g = |s: f64| {
        let c = curve.at(s);
        c.dxi * sp + c.deta * cp
    };
    if roots.len() != 2 {
        return Err(Error::Discontinuity { t, roots: roots.len() });
    }
    let (ga, gb) = (g(roots[0]), g(roots[1]));
    let (s1, s2) = match (ga < 0.0, gb < 0.0) {
        (true, false) => (roots[0], roots[1]),
        (false, true) => (roots[1], roots[0]),
        _ => return Err(Error::Discontinuity { t, roots: 2 }),
    };
    let s1 = s1.rem_euclid(l);
    let mut s2 = s2.rem_euclid(l);
    if s2 <= s1 {
        s2 += l;
    }
    Ok((s1, s2))
}

/// `(t, s1, s2)` on `n` uniform times of `[0, period]`, with `s1` and `s2`
/// unwrapped into continuous branches.
pub fn switch_point_table(curve: &CurveSpec, phi: &TimeFn, period: f64, n: usize) -> Result<Vec<(f64, f64, f64)>> {
    let l = curve.length;
    let mut out: Vec<(f64, f64, f64)> = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = period * i as f64 / n as f64;
        let (mut s1, mut s2) = s1_s2_of_t(curve, phi, t)?;
        if let Some(&(_, p1, p2)) = out.last() {
            s1 += l * ((p1 - s1) / l).round();
            s2 += l * ((p2 - s2) / l).round();
        }
        out.push((t, s1, s2));
    }
    let (first, last) = (out[0], out[n]);
    if (first.1 - last.1).abs() > 1e-6 || (first.2 - last.2).abs() > 1e-6 {
        return Err(Error::InvalidInput("switch points do not return after one period".into()));
    }
    Ok(out)
}

// Newton on H(s, t) = ξ'(s) cos φ - η'(s) sin φ from a nearby guess.
fn track_root(curve: &CurveSpec, phi: &TimeFn, t: f64, mut s: f64) -> f64 {
    let (sp, cp) = phi.value(t).sin_cos();
    for _ in 0..30 {
        let c = curve.at(s);
        let h = c.dxi * cp - c.deta * sp;
        let hs = c.ddxi * cp - c.ddeta * sp;
        if hs == 0.0 {
            break;
        }
        let step = h / hs;
        s -= step;
        if step.abs() < 1e-15 * (1.0 + s.abs()) {
            break;
        }
    }
    s
}

// s'(t) = φ' G / H_s from differentiating H(s(t), t) = 0.
fn root_rate(curve: &CurveSpec, phi: &TimeFn, t: f64, s: f64) -> f64 {
    let p = phi.jet(t);
    let (sp, cp) = p.value.sin_cos();
    let c = curve.at(s);
    let g = c.dxi * sp + c.deta * cp;
    let hs = c.ddxi * cp - c.ddeta * sp;
    p.d1 * g / hs
}

/// Barriers `x1 = s2 - L`, `x2 = s1` of the rotating curve: the arc through
/// the top between the two points with vertical tangent.
pub fn rotating_curve_barriers(curve: &CurveSpec, phi: &TimeFn, period: f64) -> Result<BarrierPair> {
    let n = 512;
    let table = Arc::new(switch_point_table(curve, phi, period, n)?);
    let l = curve.length;
    let branch = |which: usize, shift: f64| {
        let (curve, phi, table) = (curve.clone(), phi.clone(), table.clone());
        TimeFn::new(move |t| {
            let tau = t.rem_euclid(period);
            let u = tau / period * n as f64;
            let i = (u.floor() as usize).min(n - 1);
            let w = u - i as f64;
            let pick = |k: usize| if which == 1 { table[k].1 } else { table[k].2 };
            let guess = (1.0 - w) * pick(i) + w * pick(i + 1);
            let s = track_root(&curve, &phi, t, guess);
            let d1 = root_rate(&curve, &phi, t, s);
            let h = 1e-5;
            let sp = track_root(&curve, &phi, t + h, s + h * d1);
            let sm = track_root(&curve, &phi, t - h, s - h * d1);
            let d2 = (root_rate(&curve, &phi, t + h, sp) - root_rate(&curve, &phi, t - h, sm)) / (2.0 * h);
            Jet { value: s - shift, d1, d2 }
        })
    };
    Ok(BarrierPair::new(branch(2, l), branch(1, 0.0)))
}

fn bisect(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, mut fa: f64) -> f64 {
    for _ in 0..80 {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if fa * fm < 0.0 {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
        if b - a < 1e-15 * (1.0 + a.abs()) {
            break;
        }
    }
    0.5 * (a + b)
}

/// Morse interaction `V(u) = ½ (1 - e^{-(u-1)})²`.
pub fn morse_v(u: f64) -> f64 {
    let w = 1.0 - (-(u - 1.0)).exp();
    0.5 * w * w
}

pub fn morse_dv(u: f64) -> f64 {
    let e = (-(u - 1.0)).exp();
    (1.0 - e) * e
}

pub fn morse_ddv(u: f64) -> f64 {
    let e = (-(u - 1.0)).exp();
    2.0 * e * e - e
}

/// Chain of `n` interior particles between anchors at `0` and `2(n + 1)`.
#[derive(Clone)]
pub struct ChainSpec {
    pub n: usize,
    pub field: FieldFn,
    /// Constant with `|F| <= field_bound`.
    pub field_bound: f64,
}

impl fmt::Debug for ChainSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChainSpec").field("n", &self.n).field("field_bound", &self.field_bound).finish()
    }
}

impl ChainSpec {
    pub fn left_anchor(&self) -> f64 {
        0.0
    }

    pub fn right_anchor(&self) -> f64 {
        2.0 * (self.n as f64 + 1.0)
    }

    /// Total interaction energy of the configuration, anchors included.
    pub fn potential(&self, x: &[f64]) -> f64 {
        let mut prev = self.left_anchor();
        let mut e = 0.0;
        for &xi in x {
            e += morse_v(xi - prev);
            prev = xi;
        }
        e + morse_v(self.right_anchor() - prev)
    }
}

/// `x_i'' = V'(x_{i+1} - x_i) - V'(x_i - x_{i-1}) + F(t, x_i)`, which is
/// `-∂U/∂x_i + F` for the total interaction energy `U`.
///
/// The growth constant bounds the Euclidean norm of the force vector by
/// `√n (max|F| + 2 sup|V'|)` with `sup|V'| = 1/4`, valid for neighbour
/// spacings above `1 - ln((1 + √2)/2) ≈ 0.81`.
pub fn morse_chain_system(chain: ChainSpec, period: f64) -> Result<SystemSpec> {
    if chain.n == 0 {
        return Err(Error::InvalidInput("chain needs at least one particle".into()));
    }
    let n = chain.n;
    let a = (n as f64).sqrt() * (chain.field_bound + 0.5);
    let right = chain.right_anchor();
    let field = chain.field.clone();
    Ok(SystemSpec::flat("morse_chain", n, period, move |t, x, _, out| {
        for i in 0..n {
            let xl = if i == 0 { 0.0 } else { x[i - 1] };
            let xr = if i + 1 == n { right } else { x[i + 1] };
            out[i] = morse_dv(xr - x[i]) - morse_dv(x[i] - xl) + field(t, x[i]);
        }
    })
    .with_growth(GrowthBound::bounded(a)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SphereChart {
    /// `(θ, φ)`, θ the polar angle from `+e_z`.
    Polar,
    /// `(x, y)` of the upper hemisphere, `z = sqrt(1 - x² - y²)`.
    UpperHemisphere,
}

/// Unit spherical pendulum, unit mass, under gravity `-g e_z` and a
/// horizontal force `F_x e_x + F_y e_y`.
#[derive(Clone)]
pub struct SphericalSpec {
    pub fx: AmbientForce,
    pub fy: AmbientForce,
    /// Constant with `|F_x|, |F_y| <= force_bound`.
    pub force_bound: f64,
    pub gravity: f64,
    pub chart: SphereChart,
    /// Half-width of the excluded cap around each chart singularity.
    pub theta_min: f64,
}

impl fmt::Debug for SphericalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SphericalSpec")
            .field("force_bound", &self.force_bound)
            .field("gravity", &self.gravity)
            .field("chart", &self.chart)
            .finish()
    }
}

impl SphericalSpec {
    pub fn new(fx: AmbientForce, fy: AmbientForce, force_bound: f64, chart: SphereChart) -> Self {
        SphericalSpec { fx, fy, force_bound, gravity: 1.0, chart, theta_min: 1e-3 }
    }

    pub fn unforced(chart: SphereChart) -> Self {
        let zero: AmbientForce = Arc::new(|_, _, _| 0.0);
        SphericalSpec::new(zero.clone(), zero, 0.0, chart)
    }
}

/// Ambient position and velocity of a chart state.
pub fn sphere_embed(chart: SphereChart, q: &[f64], qd: &[f64]) -> ([f64; 3], [f64; 3]) {
    match chart {
        SphereChart::Polar => {
            let (st, ct) = q[0].sin_cos();
            let (sp, cp) = q[1].sin_cos();
            let r = [st * cp, st * sp, ct];
            let rd = [
                qd[0] * ct * cp - qd[1] * st * sp,
                qd[0] * ct * sp + qd[1] * st * cp,
                -qd[0] * st,
            ];
            (r, rd)
        }
        SphereChart::UpperHemisphere => {
            let z = (1.0 - q[0] * q[0] - q[1] * q[1]).max(0.0).sqrt();
            let zd = -(q[0] * qd[0] + q[1] * qd[1]) / z;
            ([q[0], q[1], z], [qd[0], qd[1], zd])
        }
    }
}

pub fn spherical_pendulum_system(spec: &SphericalSpec, period: f64) -> SystemSpec {
    let g = spec.gravity;
    let (fx, fy) = (spec.fx.clone(), spec.fy.clone());
    match spec.chart {
        SphereChart::Polar => {
            let tmin = spec.theta_min;
            let forcing = {
                let (fx, fy) = (fx.clone(), fy.clone());
                move |t: f64, q: &[f64], qd: &[f64], out: &mut [f64]| polar_forcing(&*fx, &*fy, g, t, q, qd, out)
            };
            let accel = move |t: f64, q: &[f64], qd: &[f64], out: &mut [f64]| {
                polar_forcing(&*fx, &*fy, g, t, q, qd, out);
                let (st, ct) = q[0].sin_cos();
                out[0] += st * ct * qd[1] * qd[1];
                if st != 0.0 {
                    out[1] -= 2.0 * ct / st * qd[0] * qd[1];
                }
            };
            SystemSpec::metric_with_accel("spherical_pendulum", MetricSpec::sphere_polar(), period, accel, forcing)
                .with_chart(move |q| q[0] > tmin && q[0] < std::f64::consts::PI - tmin)
        }
        SphereChart::UpperHemisphere => {
            let zmin = spec.theta_min;
            let forcing = {
                let (fx, fy) = (fx.clone(), fy.clone());
                move |t: f64, q: &[f64], qd: &[f64], out: &mut [f64]| hemi_forcing(&*fx, &*fy, g, t, q, qd, out)
            };
            let accel = move |t: f64, q: &[f64], qd: &[f64], out: &mut [f64]| {
                hemi_forcing(&*fx, &*fy, g, t, q, qd, out);
                let (_, rd) = sphere_embed(SphereChart::UpperHemisphere, q, qd);
                let w2 = rd[0] * rd[0] + rd[1] * rd[1] + rd[2] * rd[2];
                out[0] -= w2 * q[0];
                out[1] -= w2 * q[1];
            };
            let a = g + 2.0 * SQRT_2 * spec.force_bound;
            SystemSpec::metric_with_accel("spherical_pendulum", MetricSpec::hemisphere(), period, accel, forcing)
                .with_chart(move |q| 1.0 - q[0] * q[0] - q[1] * q[1] > zmin * zmin)
                .with_growth(GrowthBound::bounded(a))
        }
    }
}

type Force3 = dyn Fn(f64, &[f64; 3], &[f64; 3]) -> f64 + Send + Sync;

// Tangential projection of -g e_z + F onto the polar frame, divided by the metric scale.
fn polar_forcing(fx: &Force3, fy: &Force3, g: f64, t: f64, q: &[f64], qd: &[f64], out: &mut [f64]) {
    let (r, rd) = sphere_embed(SphereChart::Polar, q, qd);
    let (fxv, fyv) = (fx(t, &r, &rd), fy(t, &r, &rd));
    let (st, ct) = q[0].sin_cos();
    let (sp, cp) = q[1].sin_cos();
    out[0] = g * st + ct * (fxv * cp + fyv * sp);
    let fphi = -fxv * sp + fyv * cp;
    out[1] = if fphi == 0.0 { 0.0 } else { fphi / st };
}

// Chart components of the tangential part of -g e_z + F.
fn hemi_forcing(fx: &Force3, fy: &Force3, g: f64, t: f64, q: &[f64], qd: &[f64], out: &mut [f64]) {
    let (r, rd) = sphere_embed(SphereChart::UpperHemisphere, q, qd);
    let (fxv, fyv) = (fx(t, &r, &rd), fy(t, &r, &rd));
    let k = g * r[2] - (q[0] * fxv + q[1] * fyv);
    out[0] = fxv + k * q[0];
    out[1] = fyv + k * q[1];
}

/// `q'' = -Γ(q)(q', q')`; the period is nominal.
pub fn geodesic_system(metric: MetricSpec) -> SystemSpec {
    let m = metric.clone();
    let dim = metric.dim;
    let sys = SystemSpec::metric("geodesic", metric, 1.0, |_, _, _, out| out.fill(0.0))
        .with_growth(GrowthBound::bounded(0.0));
    sys.with_chart(move |q| q.len() == dim && m.check(q).is_ok())
}

/// Geodesic acceleration with an explicit positive-definiteness check.
pub fn geodesic_accel(metric: &MetricSpec, q: &[f64], qd: &[f64]) -> Result<Vec<f64>> {
    metric.check(q)?;
    let g = metric.christoffel(q)?;
    let mut out = vec![0.0; metric.dim];
    g.contract(qd, &mut out);
    out.iter_mut().for_each(|v| *v = -*v);
    Ok(out)
}

/// Sampling grid for [`growth_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthGrid {
    pub q_lo: Vec<f64>,
    pub q_hi: Vec<f64>,
    pub speed_cap: f64,
    pub samples: usize,
    pub seed: u64,
}

impl GrowthGrid {
    pub fn new(q_lo: Vec<f64>, q_hi: Vec<f64>, speed_cap: f64) -> Self {
        GrowthGrid { q_lo, q_hi, speed_cap, samples: 4000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthReport {
    pub holds: bool,
    pub worst_margin: f64,
    pub worst_t: f64,
    pub worst_q: Vec<f64>,
    pub worst_qd: Vec<f64>,
    pub samples: usize,
}

/// Checks `|v| <= a + b |q'|^(2 - δ)` (Euclidean norms) on a seeded random
/// grid; a quarter of the samples sit exactly on the speed cap.
pub fn growth_check(system: &SystemSpec, grid: &GrowthGrid) -> Result<GrowthReport> {
    let gb = system.growth.ok_or_else(|| Error::InvalidInput("system declares no growth bound".into()))?;
    let n = system.dim;
    if grid.q_lo.len() != n || grid.q_hi.len() != n {
        return Err(Error::InvalidInput("growth grid dimension mismatch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
    let mut rep = GrowthReport {
        holds: true,
        worst_margin: f64::INFINITY,
        worst_t: 0.0,
        worst_q: vec![],
        worst_qd: vec![],
        samples: grid.samples,
    };
    for k in 0..grid.samples {
        let t = rng.gen::<f64>() * system.period;
        let q: Vec<f64> = (0..n).map(|i| grid.q_lo[i] + rng.gen::<f64>() * (grid.q_hi[i] - grid.q_lo[i])).collect();
        let mut dir: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let mag = if k % 4 == 0 { grid.speed_cap } else { rng.gen::<f64>() * grid.speed_cap };
        dir.iter_mut().for_each(|v| *v *= mag / norm);
        if !system.in_chart(&q) {
            continue;
        }
        let v = system.forcing(t, &q, &dir);
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let margin = gb.bound(mag) - vn;
        if !(margin >= rep.worst_margin) {
            rep.worst_margin = margin;
            rep.worst_t = t;
            rep.worst_q = q;
            rep.worst_qd = dir;
        }
    }
    rep.holds = rep.worst_margin >= 0.0;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timefn::TrigSeries;
    use std::f64::consts::{FRAC_PI_2, PI, TAU};

    fn const_pendulum(c: f64) -> SystemSpec {
        pendulum_system(Arc::new(move |_, _, _| c), Some(c.abs()), TAU).unwrap()
    }

    #[test]
    fn pendulum_values() {
        assert!(const_pendulum(0.0).accel(0.3, &[FRAC_PI_2], &[2.0])[0].abs() < 1e-16);
        assert_eq!(const_pendulum(0.0).accel(0.0, &[0.0], &[0.0])[0], -1.0);
        assert!((const_pendulum(1.0).accel(1.0, &[FRAC_PI_2], &[0.0])[0] - 1.0).abs() < 1e-15);
        assert_eq!(pendulum_system(Arc::new(|_, _, _| 0.0), None, TAU).unwrap_err(), Error::UnboundedForce);
        assert_eq!(const_pendulum(1.0).growth.unwrap().a, 2.0);
    }

    #[test]
    fn curve_pendulum_on_unit_circle() {
        let sys = curve_pendulum_system(CurveSpec::circle(1.0, [0.0, 0.0]), TimeFn::constant(0.0), TAU);
        for s in [0.0, 0.7, 2.0, 4.0] {
            assert!((sys.accel(0.0, &[s], &[0.0])[0] + s.cos()).abs() < 1e-15);
        }
        // apex of the circle: η' = cos(π/2) = 0
        assert!(sys.accel(0.0, &[FRAC_PI_2], &[0.0])[0].abs() < 1e-15);
    }

    #[test]
    fn rotating_curve_rigid_terms_vanish_when_still() {
        let sys = rotating_curve_system(CurveSpec::circle(1.0, [0.0, 0.0]), TimeFn::constant(0.0), TAU);
        for s in [0.0, 1.0, 2.5] {
            assert!((sys.accel(0.0, &[s], &[0.0])[0] + s.cos()).abs() < 1e-15);
        }
        // ξ' = 0, η' = 1 at s = 0 on this circle
        assert!((sys.accel(0.0, &[0.0], &[0.0])[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn s1_s2_on_circle() {
        let c = CurveSpec::circle(1.0, [0.0, 0.0]);
        let (s1, s2) = s1_s2_of_t(&c, &TimeFn::constant(0.0), 0.0).unwrap();
        assert!((s1 - PI).abs() < 1e-12 && (s2 - TAU).abs() < 1e-12, "{s1} {s2}");
        let (r1, r2) = s1_s2_of_t(&c, &TimeFn::constant(FRAC_PI_2), 0.0).unwrap();
        // a quarter turn moves both roots by a quarter of the length
        assert!((r1 - (s1 - FRAC_PI_2)).abs() < 1e-12 && (r2 - (s2 - FRAC_PI_2)).abs() < 1e-12, "{r1} {r2}");
    }

    #[test]
    fn circle_barriers_follow_rotation() {
        // on a circle the vertical tangents sit at angles -φ and π - φ
        let phi = TimeFn::from(TrigSeries::sine(0.1, 1.0));
        let c = CurveSpec::circle(1.0, [0.0, 2.0]);
        let b = rotating_curve_barriers(&c, &phi, TAU).unwrap();
        for k in 0..40 {
            let t = TAU * k as f64 / 40.0 + 0.013;
            let p = phi.jet(t);
            let (lo, hi) = (b.x1.jet(t), b.x2.jet(t));
            assert!((lo.value + p.value).abs() < 1e-12 && (hi.value - PI + p.value).abs() < 1e-12);
            assert!((lo.d1 + p.d1).abs() < 1e-10 && (hi.d1 + p.d1).abs() < 1e-10);
            assert!((lo.d2 + p.d2).abs() < 1e-6 && (hi.d2 + p.d2).abs() < 1e-6);
        }
    }

    #[test]
    fn non_convex_curve_is_rejected() {
        // peanut dimpled on the ξ axis has extra vertical tangents for φ = 0
        let p: crate::curve::ParametricFn = Arc::new(|u: f64| {
            let r = 1.0 - 0.8 * (2.0 * u).cos();
            let dr = 1.6 * (2.0 * u).sin();
            let ddr = 3.2 * (2.0 * u).cos();
            let (s, c) = u.sin_cos();
            [r * c, r * s, dr * c - r * s, dr * s + r * c, ddr * c - 2.0 * dr * s - r * c, ddr * s + 2.0 * dr * c - r * s]
        });
        let curve = CurveSpec::from_parametric(p, 0.0, TAU, true, 1024).unwrap();
        assert!(matches!(s1_s2_of_t(&curve, &TimeFn::constant(0.0), 0.0), Err(Error::Discontinuity { .. })));
    }

    #[test]
    fn morse_closed_forms() {
        assert_eq!(morse_dv(1.0), 0.0);
        assert_eq!(morse_v(1.0), 0.0);
        assert_eq!(morse_ddv(1.0), 1.0);
        assert!((morse_dv(2.0) - 0.232_544_157_934_830_6).abs() < 1e-15);
    }

    #[test]
    fn chain_at_rest_when_equally_spaced() {
        let chain = ChainSpec { n: 3, field: Arc::new(|_, _| 0.0), field_bound: 0.0 };
        let sys = morse_chain_system(chain, 1.0).unwrap();
        let a = sys.accel(0.0, &[2.0, 4.0, 6.0], &[0.0; 3]);
        assert!(a.iter().all(|v| v.abs() < 1e-16));
    }

    #[test]
    fn spherical_equator_and_hanging() {
        let sys = spherical_pendulum_system(&SphericalSpec::unforced(SphereChart::Polar), TAU);
        let a = sys.accel(0.0, &[FRAC_PI_2, 0.4], &[0.0, 0.0]);
        assert!((a[0] - 1.0).abs() < 1e-15 && a[1].abs() < 1e-15);
        let h = sys.accel(0.0, &[PI, 0.0], &[0.0, 0.0]);
        assert!(h[0].abs() < 1e-15 && h[1].abs() < 1e-15);
    }

    #[test]
    fn growth_checker_verdicts() {
        let sys = pendulum_time_forced(TrigSeries::sine(1.0, 1.0).into(), 1.0, TAU).unwrap();
        let rep = growth_check(&sys, &GrowthGrid::new(vec![-10.0], vec![10.0], 50.0)).unwrap();
        assert!(rep.holds && rep.worst_margin >= 0.0);

        let quad = SystemSpec::flat("quad", 1, 1.0, |_, _, qd, out| out[0] = qd[0] * qd[0])
            .with_growth(GrowthBound { a: 0.0, b: 1.0, delta: 0.5 });
        let rep = growth_check(&quad, &GrowthGrid::new(vec![-1.0], vec![1.0], 10.0)).unwrap();
        assert!(!rep.holds && rep.worst_qd[0].abs() > 1.0);
    }
}

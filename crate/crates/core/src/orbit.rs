//! Period map, Newton shooting, multistart search, boundary winding numbers,
//! confinement checks and Floquet multipliers.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Complex, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cutoff::CutoffProfile;
use crate::error::{Error, Result};
use crate::ode::{final_state, integrate, IntegratorConfig, State, Trajectory};
use crate::segment::{IndexReport, PeriodicSegment, SegmentKind};
use crate::system::SystemSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShootConfig {
    pub tol_residual: f64,
    pub max_iters: usize,
    pub fd_step: f64,
    /// Central instead of forward differences for the Jacobian.
    pub central: bool,
    pub damping: f64,
    pub min_step: f64,
    pub integrator: IntegratorConfig,
    /// Box `[lo, hi]` on the flat state `(q, q')`; iterates leaving it abort.
    pub domain: Option<(Vec<f64>, Vec<f64>)>,
    /// Number of multiple-shooting subintervals; 1 is plain single shooting.
    pub segments: usize,
}

impl Default for ShootConfig {
    fn default() -> Self {
        ShootConfig {
            tol_residual: 1e-9,
            max_iters: 50,
            fd_step: 1e-7,
            central: false,
            damping: 0.5,
            min_step: 1e-4,
            integrator: IntegratorConfig::default().with_tol(1e-11).with_dense_dt(0.0),
            domain: None,
            segments: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PeriodicOrbit {
    pub s0: State,
    /// `‖P(s0) - s0‖` in the max norm.
    pub residual_norm: f64,
    #[serde(skip)]
    pub trajectory: Trajectory,
    pub iterations: usize,
    /// `det(I - DP)` at the converged point, from the last Jacobian.
    pub det_i_minus_dp: f64,
    pub barrier_margin: Option<f64>,
    /// Floquet multipliers as `(re, im)`.
    pub floquet: Vec<(f64, f64)>,
}

/// State at `t = T` of the solution through `(0, s0)`.
pub fn period_map(system: &SystemSpec, s0: &State, cfg: &IntegratorConfig) -> Result<State> {
    final_state(system, 0.0, s0, system.period, cfg)
}

fn residual(system: &SystemSpec, x: &[f64], cfg: &IntegratorConfig) -> Result<Vec<f64>> {
    let p = period_map(system, &State::from_flat(x), cfg)?.to_flat();
    Ok(p.iter().zip(x).map(|(a, b)| a - b).collect())
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn in_domain(cfg: &ShootConfig, x: &[f64]) -> bool {
    match &cfg.domain {
        Some((lo, hi)) => x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| *v >= *a && *v <= *b),
        None => true,
    }
}

/// Jacobian of `x ↦ P(x)` by finite differences around `x`.
fn period_map_jacobian(
    system: &SystemSpec,
    x: &[f64],
    px: &[f64],
    h: f64,
    central: bool,
    cfg: &IntegratorConfig,
) -> Result<DMatrix<f64>> {
    let m = x.len();
    let mut dp = DMatrix::zeros(m, m);
    for i in 0..m {
        let hi = h * x[i].abs().max(1.0);
        let mut xp = x.to_vec();
        xp[i] += hi;
        let fp = period_map(system, &State::from_flat(&xp), cfg)?.to_flat();
        if central {
            let mut xm = x.to_vec();
            xm[i] -= hi;
            let fm = period_map(system, &State::from_flat(&xm), cfg)?.to_flat();
            for k in 0..m {
                dp[(k, i)] = (fp[k] - fm[k]) / (2.0 * hi);
            }
        } else {
            for k in 0..m {
                dp[(k, i)] = (fp[k] - px[k]) / hi;
            }
        }
    }
    Ok(dp)
}

struct NewtonOut {
    x: Vec<f64>,
    r: Vec<f64>,
    res: f64,
    iters: usize,
}

// Damped Newton on R(x) = 0 with Armijo-type backtracking in the max norm.
fn damped_newton(
    resid: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    jac: &dyn Fn(&[f64], &[f64]) -> Result<DMatrix<f64>>,
    inside: &dyn Fn(&[f64]) -> bool,
    mut x: Vec<f64>,
    cfg: &ShootConfig,
) -> Result<NewtonOut> {
    if !inside(&x) {
        return Err(Error::NoConvergence { iters: 0, residual: f64::INFINITY, iterate: x });
    }
    let mut r = resid(&x)?;
    let mut res = max_norm(&r);
    let mut iters = 0;
    while res > cfg.tol_residual {
        if iters >= cfg.max_iters {
            return Err(Error::NoConvergence { iters, residual: res, iterate: x });
        }
        iters += 1;
        let j = jac(&x, &r)?;
        let det = j.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(Error::SingularJacobian { det, iterate: x });
        }
        let rhs = -DVector::from_column_slice(&r);
        let delta = j.lu().solve(&rhs).ok_or(Error::SingularJacobian { det, iterate: x.clone() })?;
        let mut lambda = 1.0;
        loop {
            let xn: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + lambda * d).collect();
            let trial = if inside(&xn) { resid(&xn).ok() } else { None };
            if let Some(rn) = trial {
                let resn = max_norm(&rn);
                if resn < (1.0 - 1e-4 * lambda) * res || lambda * cfg.damping < cfg.min_step {
                    x = xn;
                    r = rn;
                    res = resn;
                    break;
                }
            } else if lambda * cfg.damping < cfg.min_step {
                return Err(Error::NoConvergence { iters, residual: res, iterate: x });
            }
            lambda *= cfg.damping;
        }
    }
    Ok(NewtonOut { x, r, res, iters })
}

/// Damped Newton iteration on `R(s) = P(s) - s`. With `segments > 1` the
/// orbit is first located by multiple shooting and then polished by single
/// shooting.
pub fn newton_shoot(system: &SystemSpec, guess: &State, cfg: &ShootConfig) -> Result<PeriodicOrbit> {
    let m = 2 * system.dim;
    let mut start = guess.to_flat();
    let mut extra_iters = 0;
    if cfg.segments > 1 {
        let (x0, iters) = multiple_shoot(system, &start, cfg)?;
        start = x0;
        extra_iters = iters;
    }
    let inside = |x: &[f64]| in_domain(cfg, x);
    let resid = |x: &[f64]| residual(system, x, &cfg.integrator);
    let jac = |x: &[f64], r: &[f64]| {
        let px: Vec<f64> = r.iter().zip(x).map(|(a, b)| a + b).collect();
        Ok(period_map_jacobian(system, x, &px, cfg.fd_step, cfg.central, &cfg.integrator)? - DMatrix::identity(m, m))
    };
    let out = damped_newton(&resid, &jac, &inside, start, cfg)?;
    // local degree from a fresh Jacobian at the converged point
    let det = (-jac(&out.x, &out.r)?).determinant();
    let s0 = State::from_flat(&out.x);
    let dense = IntegratorConfig { dense_dt: system.period / 1000.0, ..cfg.integrator };
    let trajectory = integrate(system, 0.0, &s0, system.period, &dense)?;
    Ok(PeriodicOrbit {
        s0,
        residual_norm: out.res,
        trajectory,
        iterations: out.iters + extra_iters,
        det_i_minus_dp: det,
        barrier_margin: None,
        floquet: vec![],
    })
}

// Multiple shooting over `segments` equal subintervals; returns the first node.
fn multiple_shoot(system: &SystemSpec, guess: &[f64], cfg: &ShootConfig) -> Result<(Vec<f64>, usize)> {
    let k = cfg.segments;
    let d = guess.len();
    let h = system.period / k as f64;
    // constant initial nodes: near-equilibrium orbits of unstable systems
    // are better served than by a diverging forward trajectory
    let nodes: Vec<f64> = (0..k).flat_map(|_| guess.iter().copied()).collect();
    let flow = |i: usize, x: &[f64]| -> Result<Vec<f64>> {
        let t0 = h * i as f64;
        Ok(final_state(system, t0, &State::from_flat(x), t0 + h, &cfg.integrator)?.to_flat())
    };
    let resid = |x: &[f64]| -> Result<Vec<f64>> {
        let mut r = Vec::with_capacity(k * d);
        for i in 0..k {
            let y = flow(i, &x[i * d..(i + 1) * d])?;
            let next = &x[((i + 1) % k) * d..((i + 1) % k + 1) * d];
            r.extend(y.iter().zip(next).map(|(a, b)| a - b));
        }
        Ok(r)
    };
    let jac = |x: &[f64], r: &[f64]| -> Result<DMatrix<f64>> {
        let mut j = DMatrix::zeros(k * d, k * d);
        for i in 0..k {
            let xi = &x[i * d..(i + 1) * d];
            let nx = ((i + 1) % k) * d;
            let fx: Vec<f64> = r[i * d..(i + 1) * d].iter().zip(&x[nx..nx + d]).map(|(a, b)| a + b).collect();
            for c in 0..d {
                let step = cfg.fd_step * xi[c].abs().max(1.0);
                let mut xp = xi.to_vec();
                xp[c] += step;
                let fp = flow(i, &xp)?;
                for row in 0..d {
                    j[(i * d + row, i * d + c)] = (fp[row] - fx[row]) / step;
                }
            }
            for row in 0..d {
                j[(i * d + row, nx + row)] -= 1.0;
            }
        }
        Ok(j)
    };
    let inside = |x: &[f64]| in_domain(cfg, &x[..d]);
    let out = damped_newton(&resid, &jac, &inside, nodes, cfg)?;
    Ok((out.x[..d].to_vec(), out.iters))
}

/// Monodromy matrix `DP(s0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monodromy {
    ForwardDifference,
    CentralDifference,
    /// Integrate the variational equation alongside the orbit.
    Variational,
}

pub fn monodromy(system: &SystemSpec, s0: &State, method: Monodromy, fd_step: f64, cfg: &IntegratorConfig) -> Result<DMatrix<f64>> {
    match method {
        Monodromy::ForwardDifference | Monodromy::CentralDifference => {
            let x = s0.to_flat();
            let px = period_map(system, s0, cfg)?.to_flat();
            period_map_jacobian(system, &x, &px, fd_step, method == Monodromy::CentralDifference, cfg)
        }
        Monodromy::Variational => {
            let n = system.dim;
            let aug = variational_system(system);
            // X = ∂q/∂(q0, q0'), X' = ∂q'/∂(q0, q0'), stored column-major as n x 2n
            let mut q = s0.q.clone();
            let mut qd = s0.qd.clone();
            q.extend((0..2 * n * n).map(|k| if k % n == k / n && k / n < n { 1.0 } else { 0.0 }));
            qd.extend((0..2 * n * n).map(|k| if k / n >= n && k % n == k / n - n { 1.0 } else { 0.0 }));
            let end = final_state(&aug, 0.0, &State::new(q, qd), system.period, cfg)?;
            let mut dp = DMatrix::zeros(2 * n, 2 * n);
            for c in 0..2 * n {
                for r in 0..n {
                    dp[(r, c)] = end.q[n + c * n + r];
                    dp[(n + r, c)] = end.qd[n + c * n + r];
                }
            }
            Ok(dp)
        }
    }
}

/// `(q, X)'' = (a, a_q X + a_{q'} X')` with the partials from central differences.
fn variational_system(system: &SystemSpec) -> SystemSpec {
    let n = system.dim;
    let a = system.accel_fn();
    let mut aug = SystemSpec::flat(format!("{}+variational", system.name), n + 2 * n * n, system.period, move |t, q, qd, out| {
        a(t, &q[..n], &qd[..n], &mut out[..n]);
        let mut jq = vec![0.0; n * n];
        let mut jv = vec![0.0; n * n];
        let mut xp = q[..n].to_vec();
        let mut vp = qd[..n].to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for i in 0..n {
            let h = 1e-6 * q[i].abs().max(1.0);
            xp[i] = q[i] + h;
            a(t, &xp, &qd[..n], &mut fp);
            xp[i] = q[i] - h;
            a(t, &xp, &qd[..n], &mut fm);
            xp[i] = q[i];
            for k in 0..n {
                jq[k * n + i] = (fp[k] - fm[k]) / (2.0 * h);
            }
            let h = 1e-6 * qd[i].abs().max(1.0);
            vp[i] = qd[i] + h;
            a(t, &q[..n], &vp, &mut fp);
            vp[i] = qd[i] - h;
            a(t, &q[..n], &vp, &mut fm);
            vp[i] = qd[i];
            for k in 0..n {
                jv[k * n + i] = (fp[k] - fm[k]) / (2.0 * h);
            }
        }
        for c in 0..2 * n {
            let x = &q[n + c * n..n + (c + 1) * n];
            let xd = &qd[n + c * n..n + (c + 1) * n];
            for k in 0..n {
                let mut s = 0.0;
                for i in 0..n {
                    s += jq[k * n + i] * x[i] + jv[k * n + i] * xd[i];
                }
                out[n + c * n + k] = s;
            }
        }
    });
    if let Some(ch) = system.chart().cloned() {
        aug = aug.with_chart(move |q| ch(&q[..n]));
    }
    aug
}

#[derive(Debug, Clone, Serialize)]
pub struct Multiplier {
    pub re: f64,
    pub im: f64,
    /// `‖DP v - λ v‖` for a unit eigenvector `v`.
    pub residual: f64,
}

/// Eigenvalues of the monodromy matrix with eigenvector residuals; real pairs
/// are split through the determinant to keep the small multiplier accurate.
pub fn floquet_multipliers(
    system: &SystemSpec,
    orbit: &PeriodicOrbit,
    method: Monodromy,
    fd_step: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<Multiplier>> {
    let dp = monodromy(system, &orbit.s0, method, fd_step, cfg)?;
    Ok(multipliers_of(&dp))
}

pub fn multipliers_of(dp: &DMatrix<f64>) -> Vec<Multiplier> {
    let m = dp.nrows();
    let mut eig: Vec<Complex<f64>> = if m == 2 {
        let (a, b, c, d) = (dp[(0, 0)], dp[(0, 1)], dp[(1, 0)], dp[(1, 1)]);
        let tr = a + d;
        let det = a * d - b * c;
        let disc = tr * tr - 4.0 * det;
        if disc >= 0.0 {
            let big = 0.5 * (tr + tr.signum() * disc.sqrt());
            let small = if big != 0.0 { det / big } else { 0.0 };
            vec![Complex::new(big, 0.0), Complex::new(small, 0.0)]
        } else {
            let im = 0.5 * (-disc).sqrt();
            vec![Complex::new(0.5 * tr, im), Complex::new(0.5 * tr, -im)]
        }
    } else {
        dp.complex_eigenvalues().iter().copied().collect()
    };
    eig.sort_by(|a, b| b.norm().partial_cmp(&a.norm()).unwrap().then(b.im.partial_cmp(&a.im).unwrap()));
    let dpc: DMatrix<Complex<f64>> = dp.map(|v| Complex::new(v, 0.0));
    eig.into_iter()
        .map(|l| {
            let shifted = &dpc - DMatrix::<Complex<f64>>::identity(m, m) * l;
            let sv = shifted.svd(false, false).singular_values;
            let smin = sv.iter().fold(f64::INFINITY, |a, b| a.min(*b));
            Multiplier { re: l.re, im: l.im, residual: smin }
        })
        .collect()
}

/// Interior grid, speed window and contradiction handling for [`multistart_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultistartConfig {
    /// Nodes per axis, `q` axes first; one entry is broadcast to all axes.
    pub grid: Vec<usize>,
    /// Velocity half-width of the search grid (defaults to the segment's `p`).
    pub search_speed: Option<f64>,
    pub dedup_radius: f64,
    /// Relative widening of `W_0` outside of which Newton iterates abort.
    pub domain_slack: f64,
    pub confinement_checks: usize,
}

impl Default for MultistartConfig {
    fn default() -> Self {
        MultistartConfig { grid: vec![10], search_speed: None, dedup_radius: 1e-6, domain_slack: 0.25, confinement_checks: 2000 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StartRecord {
    pub start: Vec<f64>,
    pub converged: bool,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MultistartReport {
    pub orbits: Vec<PeriodicOrbit>,
    pub starts: usize,
    pub converged: usize,
    /// Converged fixed points whose orbits leave the segment.
    pub unconfined: usize,
    /// Distinct fixed points of `P` in `W_0` whose orbits leave the segment.
    pub escaping: Vec<State>,
    pub records: Vec<StartRecord>,
}

// Per-axis ranges of `W_0`, `q` axes first, with speeds limited to `speed`.
fn section_axes(segment: &PeriodicSegment, speed: Option<f64>) -> Vec<(f64, f64)> {
    let n = segment.dim;
    let p = segment.p();
    let mut axes = Vec::with_capacity(2 * n);
    let vmax = match &segment.kind {
        SegmentKind::Box { barriers, .. } => {
            for b in barriers {
                axes.push((b.x1.value(0.0), b.x2.value(0.0)));
            }
            speed.unwrap_or(p).min(p)
        }
        SegmentKind::MetricBall { region, .. } => {
            let (lo, hi) = region.bounding_box();
            axes.extend(lo.into_iter().zip(hi));
            let cap = (2.0 * p).sqrt();
            speed.unwrap_or(cap).min(cap)
        }
    };
    for _ in 0..n {
        axes.push((-vmax, vmax));
    }
    axes
}

/// Newton shooting from every interior node of a grid on `W_0`; converged
/// orbits are checked for confinement, de-duplicated and sorted.
pub fn multistart_search(
    system: &SystemSpec,
    segment: &PeriodicSegment,
    ms: &MultistartConfig,
    cfg: &ShootConfig,
) -> Result<MultistartReport> {
    let n = segment.dim;
    if system.dim != n {
        return Err(Error::InvalidInput("system and segment dimensions differ".into()));
    }
    let axes = section_axes(segment, ms.search_speed);
    let counts: Vec<usize> = if ms.grid.len() == 1 { vec![ms.grid[0]; 2 * n] } else { ms.grid.clone() };
    if counts.len() != 2 * n || counts.iter().any(|c| *c == 0) {
        return Err(Error::InvalidInput(format!("multistart grid needs {} positive counts", 2 * n)));
    }
    let mut cfg = cfg.clone();
    if cfg.domain.is_none() {
        let full = section_axes(segment, None);
        let lo = full.iter().map(|(a, b)| a - ms.domain_slack * (b - a)).collect();
        let hi = full.iter().map(|(a, b)| b + ms.domain_slack * (b - a)).collect();
        cfg.domain = Some((lo, hi));
    }
    let total: usize = counts.iter().product();
    let mut starts = Vec::with_capacity(total);
    for mut k in 0..total {
        let mut x = Vec::with_capacity(2 * n);
        for (ax, &c) in axes.iter().zip(&counts) {
            let i = k % c;
            k /= c;
            x.push(ax.0 + (ax.1 - ax.0) * (i as f64 + 0.5) / c as f64);
        }
        if segment.contains(0.0, &x[..n], &x[n..]) {
            starts.push(x);
        }
    }
    let results: Vec<(StartRecord, Option<PeriodicOrbit>)> = starts
        .par_iter()
        .map(|x| match newton_shoot(system, &State::from_flat(x), &cfg) {
            Ok(o) => (StartRecord { start: x.clone(), converged: true, residual: o.residual_norm }, Some(o)),
            Err(Error::NoConvergence { residual, .. }) => {
                (StartRecord { start: x.clone(), converged: false, residual }, None)
            }
            Err(_) => (StartRecord { start: x.clone(), converged: false, residual: f64::NAN }, None),
        })
        .collect();
    let mut report =
        MultistartReport { orbits: vec![], starts: starts.len(), converged: 0, unconfined: 0, escaping: vec![], records: vec![] };
    let mut found: Vec<PeriodicOrbit> = Vec::new();
    for (rec, orbit) in results {
        report.records.push(rec);
        let Some(mut o) = orbit else { continue };
        report.converged += 1;
        if found.iter().any(|f| f.s0.max_dist(&o.s0) < ms.dedup_radius)
            || report.escaping.iter().any(|e| e.max_dist(&o.s0) < ms.dedup_radius)
        {
            continue;
        }
        let conf = verify_confinement(&o, segment, ms.confinement_checks, None);
        o.barrier_margin = Some(conf.min_margin);
        if conf.confined {
            found.push(o);
        } else {
            report.unconfined += 1;
            if segment.contains(0.0, &o.s0.q, &o.s0.qd) {
                report.escaping.push(o.s0.clone());
            }
        }
    }
    report.escaping.sort_by(|a, b| a.to_flat().partial_cmp(&b.to_flat()).unwrap_or(std::cmp::Ordering::Equal));
    found.sort_by(|a, b| {
        let ka = a.s0.to_flat();
        let kb = b.s0.to_flat();
        ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
    });
    report.orbits = found;
    Ok(report)
}

/// What to do when a verified segment predicts an orbit and none is found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContradictionPolicy {
    Enforce,
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Verdict {
    Consistent,
    /// Nonzero index with an empty orbit list; carries the residual dump.
    Contradiction { index: i64, residuals: Vec<(Vec<f64>, f64)> },
    NotChecked,
}

pub fn check_contradiction(
    verified: bool,
    index: &IndexReport,
    report: &MultistartReport,
    policy: ContradictionPolicy,
) -> Verdict {
    if policy == ContradictionPolicy::Disabled || !verified {
        return Verdict::NotChecked;
    }
    if index.index != 0 && report.orbits.is_empty() {
        return Verdict::Contradiction {
            index: index.index,
            residuals: report.records.iter().map(|r| (r.start.clone(), r.residual)).collect(),
        };
    }
    Verdict::Consistent
}

/// Counter-clockwise rectangle in the `(q, q')` plane.
pub fn rectangle_contour(q: (f64, f64), v: (f64, f64)) -> Vec<[f64; 2]> {
    vec![[q.0, v.0], [q.1, v.0], [q.1, v.1], [q.0, v.1]]
}

/// Boundary of `W_0` shrunk by `delta`, optionally with a smaller speed window.
pub fn collar_contour(segment: &PeriodicSegment, delta: f64, speed: Option<f64>) -> Result<Vec<[f64; 2]>> {
    let SegmentKind::Box { barriers, p } = &segment.kind else {
        return Err(Error::NotPlanar(segment.dim));
    };
    if barriers.len() != 1 {
        return Err(Error::NotPlanar(barriers.len()));
    }
    let v = speed.unwrap_or(*p).min(*p) - delta;
    let (a, b) = (barriers[0].x1.value(0.0) + delta, barriers[0].x2.value(0.0) - delta);
    if !(a < b && v > 0.0) {
        return Err(Error::InvalidInput("collar swallows the cross-section".into()));
    }
    Ok(rectangle_contour((a, b), (-v, v)))
}

/// Winding number of `R(s) = P(s) - s` along a closed polygon, with
/// bisection of every contour piece whose angle increment reaches `π/2`.
pub fn winding_index(system: &SystemSpec, contour: &[[f64; 2]], n_points: usize, cfg: &IntegratorConfig) -> Result<i64> {
    if system.dim != 1 {
        return Err(Error::NotPlanar(system.dim));
    }
    if contour.len() < 3 || n_points < contour.len() {
        return Err(Error::InvalidInput("contour needs at least 3 vertices and one point per edge".into()));
    }
    let m = contour.len();
    let lens: Vec<f64> = (0..m)
        .map(|i| {
            let (a, b) = (contour[i], contour[(i + 1) % m]);
            (b[0] - a[0]).hypot(b[1] - a[1])
        })
        .collect();
    let total: f64 = lens.iter().sum();
    let at = |s: f64| -> [f64; 2] {
        let mut s = s.rem_euclid(total);
        for i in 0..m {
            if s <= lens[i] || i == m - 1 {
                let (a, b) = (contour[i], contour[(i + 1) % m]);
                let u = (s / lens[i]).min(1.0);
                return [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])];
            }
            s -= lens[i];
        }
        unreachable!()
    };
    let eval = |s: f64| -> Result<(f64, [f64; 2])> {
        let x = at(s);
        let r = residual(system, &x, cfg)?;
        if r[0].hypot(r[1]) < 1e-10 {
            return Err(Error::ZeroOnContour { point: x });
        }
        Ok((r[1].atan2(r[0]), x))
    };
    let params: Vec<f64> = (0..n_points).map(|k| total * k as f64 / n_points as f64).collect();
    let first: Vec<(f64, [f64; 2])> = params.par_iter().map(|&s| eval(s)).collect::<Result<_>>()?;
    let mut angle = 0.0;
    for k in 0..n_points {
        let (s0, s1) = (params[k], if k + 1 == n_points { total } else { params[k + 1] });
        let (a0, a1) = (first[k].0, first[(k + 1) % n_points].0);
        angle += refine(&eval, s0, a0, s1, a1, 0)?;
    }
    let w = angle / TAU;
    let k = w.round();
    if (w - k).abs() > 1e-6 {
        return Err(Error::RefinementLimit { point: at(0.0) });
    }
    Ok(k as i64)
}

fn wrap(d: f64) -> f64 {
    let mut d = d % TAU;
    if d > PI {
        d -= TAU;
    } else if d <= -PI {
        d += TAU;
    }
    d
}

fn refine(
    eval: &(dyn Fn(f64) -> Result<(f64, [f64; 2])> + Sync),
    s0: f64,
    a0: f64,
    s1: f64,
    a1: f64,
    depth: usize,
) -> Result<f64> {
    let d = wrap(a1 - a0);
    if d.abs() < FRAC_PI_2 {
        return Ok(d);
    }
    let sm = 0.5 * (s0 + s1);
    let (am, x) = eval(sm)?;
    if depth >= 40 {
        return Err(Error::RefinementLimit { point: x });
    }
    Ok(refine(eval, s0, a0, sm, am, depth + 1)? + refine(eval, sm, am, s1, a1, depth + 1)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct StayingWinding {
    /// Winding of `P - id` along the collar contour.
    pub collar: i64,
    /// Fixed points inside the contour whose orbits leave, with their local windings.
    pub excluded: Vec<(State, i64)>,
    /// `collar - Σ excluded`: the index of `P` restricted to states whose orbits stay.
    pub index: i64,
}

/// Fixed-point index of the period map on the states whose orbits stay in the
/// segment: the collar winding minus small-circle windings around the given
/// escaping fixed points (excision).
pub fn staying_winding(
    system: &SystemSpec,
    contour: &[[f64; 2]],
    escaping: &[State],
    n_points: usize,
    cfg: &IntegratorConfig,
) -> Result<StayingWinding> {
    let collar = winding_index(system, contour, n_points, cfg)?;
    let inside: Vec<&State> = escaping.iter().filter(|s| point_in_polygon([s.q[0], s.qd[0]], contour)).collect();
    let mut excluded = Vec::with_capacity(inside.len());
    for (i, s) in inside.iter().enumerate() {
        let mut r: f64 = 0.05;
        for (j, o) in inside.iter().enumerate() {
            if i != j {
                r = r.min(0.4 * s.max_dist(o));
            }
        }
        let c = [s.q[0], s.qd[0]];
        let square = rectangle_contour((c[0] - r, c[0] + r), (c[1] - r, c[1] + r));
        excluded.push(((*s).clone(), winding_index(system, &square, 16, cfg)?));
    }
    let index = collar - excluded.iter().map(|e| e.1).sum::<i64>();
    Ok(StayingWinding { collar, excluded, index })
}

/// Even-odd rule.
pub fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let m = poly.len();
    for i in 0..m {
        let (a, b) = (poly[i], poly[(i + 1) % m]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]) {
            inside = !inside;
        }
    }
    inside
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfinementReport {
    /// Per coordinate `(min q - x1, min x2 - q, min p - |q'|)` for boxes, or
    /// `(min ρ(q), min 2p - ⟨q', A q'⟩)` for metric balls.
    pub margins: Vec<Vec<f64>>,
    pub min_margin: f64,
    pub confined: bool,
    /// Distance below the cutoff band, `(p - ε) - max speed`.
    pub band_margin: Option<f64>,
    /// Confined and never in the band: the orbit solves the unmodified equation.
    pub certified: bool,
}

/// Margins of the orbit against the segment walls at `n_checks` uniform times.
pub fn verify_confinement(
    orbit: &PeriodicOrbit,
    segment: &PeriodicSegment,
    n_checks: usize,
    cutoff: Option<&CutoffProfile>,
) -> ConfinementReport {
    let tr = &orbit.trajectory;
    let n = segment.dim;
    let width = match &segment.kind {
        SegmentKind::Box { .. } => 3,
        SegmentKind::MetricBall { .. } => 2,
    };
    let rows = match &segment.kind {
        SegmentKind::Box { .. } => n,
        SegmentKind::MetricBall { .. } => 1,
    };
    let mut margins = vec![vec![f64::INFINITY; width]; rows];
    let mut top_speed = 0.0_f64;
    let checks = n_checks.max(2);
    for k in 0..=checks {
        let t = tr.t0 + (tr.t1 - tr.t0) * k as f64 / checks as f64;
        let s = tr.state_at(t);
        let m = segment.margins(t, &s.q, &s.qd);
        for (i, v) in m.iter().enumerate() {
            let cell = &mut margins[i / width][i % width];
            *cell = cell.min(*v);
        }
        let speed = match (&segment.kind, cutoff) {
            (SegmentKind::MetricBall { metric, .. }, _) => 0.5 * metric.norm2(&s.q, &s.qd),
            _ => s.qd.iter().fold(0.0_f64, |a, b| a.max(b.abs())),
        };
        top_speed = top_speed.max(speed);
    }
    let min_margin = margins.iter().flatten().fold(f64::INFINITY, |a, b| a.min(*b));
    let confined = min_margin > 0.0;
    let band_margin = cutoff.map(|c| c.p - c.eps - top_speed);
    ConfinementReport {
        margins,
        min_margin,
        confined,
        band_margin,
        certified: confined && band_margin.map_or(true, |b| b > 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::pendulum_time_forced;
    use crate::segment::build_pendulum_segment;
    use crate::timefn::TimeFn;

    fn autonomous() -> SystemSpec {
        pendulum_time_forced(TimeFn::constant(0.0), 0.0, TAU).unwrap()
    }

    #[test]
    fn period_map_of_free_particle_and_oscillator() {
        let free = SystemSpec::flat("free", 1, 3.0, |_, _, _, out| out[0] = 0.0);
        let cfg = IntegratorConfig::default();
        let p = period_map(&free, &State::scalar(0.5, 2.0), &cfg).unwrap();
        assert!((p.q[0] - 6.5).abs() < 1e-12 && (p.qd[0] - 2.0).abs() < 1e-12);
        let osc = SystemSpec::flat("osc", 1, TAU, |_, q, _, out| out[0] = -q[0]);
        let p = period_map(&osc, &State::scalar(0.3, -0.7), &cfg).unwrap();
        assert!((p.q[0] - 0.3).abs() < 1e-8 && (p.qd[0] + 0.7).abs() < 1e-8);
    }

    #[test]
    fn newton_finds_upright_equilibrium() {
        let o = newton_shoot(&autonomous(), &State::scalar(1.565, 0.001), &ShootConfig::default()).unwrap();
        assert!((o.s0.q[0] - FRAC_PI_2).abs() < 1e-9 && o.s0.qd[0].abs() < 1e-9);
        assert!(o.residual_norm < 1e-9);
        assert!(o.det_i_minus_dp < 0.0);
    }

    #[test]
    fn saddle_multipliers() {
        let sys = autonomous();
        let o = newton_shoot(&sys, &State::scalar(FRAC_PI_2, 0.0), &ShootConfig::default()).unwrap();
        let cfg = IntegratorConfig::default().with_tol(1e-12).with_dense_dt(0.0);
        let big = TAU.exp();
        for method in [Monodromy::Variational, Monodromy::CentralDifference] {
            let m = floquet_multipliers(&sys, &o, method, 1e-7, &cfg).unwrap();
            assert!((m[0].re / big - 1.0).abs() < 1e-3, "{method:?} {m:?}");
            assert!((m[1].re * big - 1.0).abs() < 1e-3, "{method:?} {m:?}");
            assert!(m.iter().all(|x| x.residual < 1e-6));
        }
    }

    #[test]
    fn oscillator_multipliers_are_one() {
        let osc = SystemSpec::flat("osc", 1, TAU, |_, q, _, out| out[0] = -q[0]);
        let dp = monodromy(&osc, &State::scalar(0.2, 0.1), Monodromy::Variational, 1e-7, &IntegratorConfig::default()).unwrap();
        for m in multipliers_of(&dp) {
            assert!((m.re - 1.0).abs() < 1e-6 && m.im.abs() < 1e-4, "{m:?}");
        }
    }

    #[test]
    fn saddle_winding_is_minus_one() {
        let sys = autonomous();
        let cfg = IntegratorConfig::default().with_dense_dt(0.0);
        let c = rectangle_contour((FRAC_PI_2 - 0.05, FRAC_PI_2 + 0.05), (-0.05, 0.05));
        assert_eq!(winding_index(&sys, &c, 16, &cfg).unwrap(), -1);
        let away = rectangle_contour((0.2, 0.4), (-0.05, 0.05));
        assert_eq!(winding_index(&sys, &away, 16, &cfg).unwrap(), 0);
    }

    #[test]
    fn confinement_of_the_equilibrium() {
        let sys = autonomous();
        let seg = build_pendulum_segment(TimeFn::constant(0.0), 3.0, TAU).unwrap();
        let o = newton_shoot(&sys, &State::scalar(FRAC_PI_2, 0.0), &ShootConfig::default()).unwrap();
        let c = verify_confinement(&o, &seg, 100, None);
        assert!((c.margins[0][0] - FRAC_PI_2).abs() < 1e-9);
        assert!((c.margins[0][1] - FRAC_PI_2).abs() < 1e-9);
        assert!((c.margins[0][2] - 3.0).abs() < 1e-9);
        assert!(c.confined && c.certified);
    }
}

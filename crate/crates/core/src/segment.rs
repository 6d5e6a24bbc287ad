//! Periodic segments in extended phase space, exit-face verification and
//! the Euler-characteristic index of product segments.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ode::rk4_step;
use crate::system::{MetricSpec, SystemSpec};
use crate::timefn::TimeFn;

/// Sign-test strictness; rates inside `(-TOL, TOL)` escalate to second order.
pub const STRICT_TOL: f64 = 1e-9;
/// Flow step for the second-order rate.
const FLOW_STEP: f64 = 1e-5;

/// `γ ∈ (0, π)` with `cot γ = f(t)`.
pub fn gamma_of_t(f: &TimeFn, t: f64) -> f64 {
    FRAC_PI_2 - f.value(t).atan()
}

/// Lower and upper barrier for one coordinate.
#[derive(Clone, Debug)]
pub struct BarrierPair {
    pub x1: TimeFn,
    pub x2: TimeFn,
}

impl BarrierPair {
    pub fn new(x1: TimeFn, x2: TimeFn) -> Self {
        BarrierPair { x1, x2 }
    }

    pub fn constant(lo: f64, hi: f64) -> Self {
        BarrierPair { x1: TimeFn::constant(lo), x2: TimeFn::constant(hi) }
    }

    /// Checks `x1 < x2` and `T`-periodicity of values and slopes on a sampling grid.
    pub fn validate(&self, period: f64) -> Result<()> {
        let n = 1024;
        for i in 0..=n {
            let t = period * i as f64 / n as f64;
            let (a, b) = (self.x1.value(t), self.x2.value(t));
            if !(a < b) {
                return Err(Error::InvalidInput(format!(
                    "barrier ordering condition x1(t) < x2(t) fails at t = {t} ({a} >= {b})"
                )));
            }
        }
        for i in 0..64 {
            let t = period * i as f64 / 64.0;
            for x in [&self.x1, &self.x2] {
                let (j0, j1) = (x.jet(t), x.jet(t + period));
                if (j0.value - j1.value).abs() > 1e-10 || (j0.d1 - j1.d1).abs() > 1e-10 {
                    return Err(Error::InvalidInput(format!("barrier is not periodic with period {period}")));
                }
            }
        }
        Ok(())
    }

    pub fn max_slope(&self, period: f64) -> f64 {
        self.x1.sup_abs(period, 2048).d1.max(self.x2.sup_abs(period, 2048).d1)
    }
}

/// Region `D` of a metric segment, described by a function `ρ` positive inside.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Region {
    /// Euclidean ball in chart coordinates.
    Ball { center: Vec<f64>, radius: f64 },
    /// Cap `z > eps` of the unit sphere in the orthographic upper-hemisphere chart.
    SphereCap { eps: f64 },
    /// `lo < q[coord] < hi`.
    Slab { dim: usize, coord: usize, lo: f64, hi: f64 },
}

impl Region {
    pub fn dim(&self) -> usize {
        match self {
            Region::Ball { center, .. } => center.len(),
            Region::SphereCap { .. } => 2,
            Region::Slab { dim, .. } => *dim,
        }
    }

    pub fn rho(&self, q: &[f64]) -> f64 {
        match self {
            Region::Ball { center, radius } => radius - dist(q, center),
            Region::SphereCap { eps } => (1.0 - norm2(q)).max(0.0).sqrt() - eps,
            Region::Slab { coord, lo, hi, .. } => (q[*coord] - lo).min(hi - q[*coord]),
        }
    }

    pub fn grad(&self, q: &[f64]) -> Vec<f64> {
        match self {
            Region::Ball { center, .. } => {
                let d = dist(q, center).max(1e-300);
                q.iter().zip(center).map(|(a, c)| -(a - c) / d).collect()
            }
            Region::SphereCap { .. } => {
                let z = (1.0 - norm2(q)).max(1e-300).sqrt();
                q.iter().map(|a| -a / z).collect()
            }
            Region::Slab { dim, coord, lo, hi } => {
                let mut g = vec![0.0; *dim];
                g[*coord] = if q[*coord] - lo <= hi - q[*coord] { 1.0 } else { -1.0 };
                g
            }
        }
    }

    pub fn contains(&self, q: &[f64]) -> bool {
        self.rho(q) > 0.0
    }

    /// Point of `∂D` from direction parameters in `[0, 1]`.
    fn boundary_point(&self, u: &[f64]) -> Vec<f64> {
        match self {
            Region::Ball { center, radius } => {
                let d = unit_vector(center.len(), u);
                center.iter().zip(&d).map(|(c, x)| c + radius * x).collect()
            }
            Region::SphereCap { eps } => {
                let r = (1.0 - eps * eps).sqrt();
                let a = 2.0 * PI * u[0];
                vec![r * a.cos(), r * a.sin()]
            }
            Region::Slab { dim, coord, lo, hi } => {
                let mut q: Vec<f64> = (0..*dim).map(|i| 4.0 * (u.get(i + 1).copied().unwrap_or(0.5) - 0.5)).collect();
                q[*coord] = if u[0] < 0.5 { *lo } else { *hi };
                q
            }
        }
    }

    /// Interior point from parameters in `[0, 1]`.
    pub fn interior_point(&self, u: &[f64]) -> Vec<f64> {
        match self {
            Region::Ball { center, radius } => {
                let n = center.len();
                let d = unit_vector(n, &u[1..]);
                let r = radius * u[0].powf(1.0 / n as f64);
                center.iter().zip(&d).map(|(c, x)| c + r * x).collect()
            }
            Region::SphereCap { eps } => {
                let r = (1.0 - eps * eps).sqrt() * u[0].sqrt();
                let a = 2.0 * PI * u[1];
                vec![r * a.cos(), r * a.sin()]
            }
            Region::Slab { dim, coord, lo, hi } => {
                let mut q: Vec<f64> = (0..*dim).map(|i| 4.0 * (u.get(i + 1).copied().unwrap_or(0.5) - 0.5)).collect();
                q[*coord] = lo + (hi - lo) * u[0];
                q
            }
        }
    }

    /// Axis-aligned bounding box of `D̄`.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Region::Ball { center, radius } => {
                (center.iter().map(|c| c - radius).collect(), center.iter().map(|c| c + radius).collect())
            }
            Region::SphereCap { eps } => {
                let r = (1.0 - eps * eps).sqrt();
                (vec![-r, -r], vec![r, r])
            }
            Region::Slab { dim, coord, lo, hi } => {
                let mut a = vec![-2.0; *dim];
                let mut b = vec![2.0; *dim];
                a[*coord] = *lo;
                b[*coord] = *hi;
                (a, b)
            }
        }
    }
}

fn norm2(q: &[f64]) -> f64 {
    q.iter().map(|x| x * x).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Unit vector from parameters in `[0, 1]`: an angle for `n = 2`, normalised
/// Box–Muller pairs otherwise.
fn unit_vector(n: usize, u: &[f64]) -> Vec<f64> {
    if n == 1 {
        return vec![if u.first().copied().unwrap_or(1.0) < 0.5 { -1.0 } else { 1.0 }];
    }
    if n == 2 {
        let a = 2.0 * PI * u.first().copied().unwrap_or(0.0);
        return vec![a.cos(), a.sin()];
    }
    let mut v = Vec::with_capacity(n);
    let mut k = 0;
    while v.len() < n {
        let a = u.get(k).copied().unwrap_or(0.37).clamp(1e-12, 1.0 - 1e-12);
        let b = u.get(k + 1).copied().unwrap_or(0.71);
        let r = (-2.0 * a.ln()).sqrt();
        v.push(r * (2.0 * PI * b).cos());
        if v.len() < n {
            v.push(r * (2.0 * PI * b).sin());
        }
        k += 2;
    }
    let nn = norm2(&v).sqrt().max(1e-300);
    v.iter().map(|x| x / nn).collect()
}

/// Edges of the phase rectangle of one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Edge {
    /// `q = x1(t)`
    Lower,
    /// `q = x2(t)`
    Upper,
    /// `q' = p`
    Top,
    /// `q' = -p`
    Bottom,
}

/// Time-dependent endpoint of a face interval along its edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Endpoint {
    MinusP,
    PlusP,
    Slope1,
    Slope2,
    X1,
    X2,
    Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FaceGeom {
    /// Interval `[lo, hi]` along an edge of the rectangle of `coord`; other
    /// coordinates range over their full rectangles.
    Wall { coord: usize, edge: Edge, lo: Endpoint, hi: Endpoint },
    /// `q ∈ ∂D` with velocity pointing out of (or into) `D`.
    RegionBoundary { outward: bool },
    /// `⟨q', A q'⟩ = 2p` over `q ∈ D̄`.
    SpeedSphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Expect {
    Exit,
    Entry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Classification {
    Pending,
    Exit,
    TangentExit,
    Entry,
    Unresolved,
    /// Observed behaviour contradicts the pre-marked role.
    Violated,
}

impl Classification {
    pub fn is_exit(self) -> bool {
        matches!(self, Classification::Exit | Classification::TangentExit)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Face {
    pub id: String,
    pub geom: FaceGeom,
    pub expected: Expect,
    pub classification: Classification,
}

impl Face {
    fn new(id: impl Into<String>, geom: FaceGeom, expected: Expect) -> Self {
        Face { id: id.into(), geom, expected, classification: Classification::Pending }
    }
}

/// Which vector field the speed caps were classified against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CapConvention {
    Original,
    CutoffModified,
}

#[derive(Clone)]
pub enum SegmentKind {
    /// `q_j ∈ [x1_j(t), x2_j(t)]`, `|q'_j| <= p`.
    Box { barriers: Vec<BarrierPair>, p: f64 },
    /// `q ∈ D̄`, `⟨q', A q'⟩ <= 2p`.
    MetricBall { region: Region, metric: MetricSpec, p: f64 },
}

impl fmt::Debug for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentKind::Box { barriers, p } => write!(f, "Box {{ dim: {}, p: {p} }}", barriers.len()),
            SegmentKind::MetricBall { region, p, .. } => write!(f, "MetricBall {{ region: {region:?}, p: {p} }}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PeriodicSegment {
    pub period: f64,
    pub dim: usize,
    pub kind: SegmentKind,
    /// Forcing whose `γ(t) = arccot f(t)` splits the caps of the pendulum segment.
    pub gamma_f: Option<TimeFn>,
    pub faces: Vec<Face>,
    pub periodic: bool,
    pub convention: CapConvention,
}

/// Pendulum segment `[0, T] × [0, π] × [-p, p]` with the cap split at `γ(t)`.
pub fn build_pendulum_segment(f: TimeFn, p: f64, period: f64) -> Result<PeriodicSegment> {
    if !(p > 0.0) {
        return Err(Error::InvalidInput("speed bound p must be positive".into()));
    }
    use Edge::*;
    use Endpoint::*;
    let w = |coord, edge, lo, hi| FaceGeom::Wall { coord, edge, lo, hi };
    let faces = vec![
        Face::new("right", w(0, Lower, MinusP, Slope1), Expect::Exit),
        Face::new("left", w(0, Upper, Slope2, PlusP), Expect::Exit),
        Face::new("top", w(0, Top, Gamma, X2), Expect::Exit),
        Face::new("bottom", w(0, Bottom, X1, Gamma), Expect::Exit),
        Face::new("right_entry", w(0, Lower, Slope1, PlusP), Expect::Entry),
        Face::new("left_entry", w(0, Upper, MinusP, Slope2), Expect::Entry),
        Face::new("top_entry", w(0, Top, X1, Gamma), Expect::Entry),
        Face::new("bottom_entry", w(0, Bottom, Gamma, X2), Expect::Entry),
    ];
    let mut seg = PeriodicSegment {
        period,
        dim: 1,
        kind: SegmentKind::Box { barriers: vec![BarrierPair::constant(0.0, PI)], p },
        gamma_f: Some(f),
        faces,
        periodic: true,
        convention: CapConvention::Original,
    };
    seg.periodic = seg.periodicity_defect() < 1e-10;
    Ok(seg)
}

/// Segment between moving barriers with speed caps `|q'_j| = p`; the caps are
/// meant to be classified against the cutoff-modified system.
pub fn build_barrier_segment(barriers: Vec<BarrierPair>, p: f64, period: f64) -> Result<PeriodicSegment> {
    if barriers.is_empty() {
        return Err(Error::InvalidInput("at least one barrier pair is required".into()));
    }
    let mut slope = 0.0_f64;
    for b in &barriers {
        b.validate(period)?;
        slope = slope.max(b.max_slope(period));
    }
    if !(p > slope) {
        return Err(Error::SpeedBoundTooSmall { p, slope });
    }
    use Edge::*;
    use Endpoint::*;
    let n = barriers.len();
    let mut faces = Vec::with_capacity(6 * n);
    for j in 0..n {
        let sfx = if n == 1 { String::new() } else { format!("[{}]", j + 1) };
        let w = |edge, lo, hi| FaceGeom::Wall { coord: j, edge, lo, hi };
        faces.push(Face::new(format!("lower_exit{sfx}"), w(Lower, MinusP, Slope1), Expect::Exit));
        faces.push(Face::new(format!("upper_exit{sfx}"), w(Upper, Slope2, PlusP), Expect::Exit));
        faces.push(Face::new(format!("lower_entry{sfx}"), w(Lower, Slope1, PlusP), Expect::Entry));
        faces.push(Face::new(format!("upper_entry{sfx}"), w(Upper, MinusP, Slope2), Expect::Entry));
        faces.push(Face::new(format!("cap_top{sfx}"), w(Top, X1, X2), Expect::Entry));
        faces.push(Face::new(format!("cap_bottom{sfx}"), w(Bottom, X1, X2), Expect::Entry));
    }
    let mut seg = PeriodicSegment {
        period,
        dim: n,
        kind: SegmentKind::Box { barriers, p },
        gamma_f: None,
        faces,
        periodic: true,
        convention: CapConvention::CutoffModified,
    };
    seg.periodic = seg.periodicity_defect() < 1e-10;
    Ok(seg)
}

/// Segment `q ∈ D̄`, `⟨q', A q'⟩ <= 2p` (solid speed ball).
pub fn build_metric_segment(metric: MetricSpec, region: Region, p: f64, period: f64) -> Result<PeriodicSegment> {
    if !(p > 0.0) {
        return Err(Error::InvalidInput("speed bound p must be positive".into()));
    }
    if region.dim() != metric.dim {
        return Err(Error::InvalidInput("region and metric dimensions differ".into()));
    }
    let dim = metric.dim;
    let faces = vec![
        Face::new("boundary_exit", FaceGeom::RegionBoundary { outward: true }, Expect::Exit),
        Face::new("boundary_entry", FaceGeom::RegionBoundary { outward: false }, Expect::Entry),
        Face::new("speed_sphere", FaceGeom::SpeedSphere, Expect::Entry),
    ];
    Ok(PeriodicSegment {
        period,
        dim,
        kind: SegmentKind::MetricBall { region, metric, p },
        gamma_f: None,
        faces,
        periodic: true,
        convention: CapConvention::CutoffModified,
    })
}

impl PeriodicSegment {
    pub fn p(&self) -> f64 {
        match &self.kind {
            SegmentKind::Box { p, .. } | SegmentKind::MetricBall { p, .. } => *p,
        }
    }

    pub fn barriers(&self) -> Option<&[BarrierPair]> {
        match &self.kind {
            SegmentKind::Box { barriers, .. } => Some(barriers),
            _ => None,
        }
    }

    /// `x1_j(t), x2_j(t)` and their slopes and curvatures.
    fn barrier_jets(&self, j: usize, t: f64) -> (crate::timefn::Jet, crate::timefn::Jet) {
        let b = &self.barriers().expect("box segment")[j];
        (b.x1.jet(t), b.x2.jet(t))
    }

    fn endpoint(&self, j: usize, e: Endpoint, t: f64) -> f64 {
        let (a, b) = self.barrier_jets(j, t);
        match e {
            Endpoint::MinusP => -self.p(),
            Endpoint::PlusP => self.p(),
            Endpoint::Slope1 => a.d1,
            Endpoint::Slope2 => b.d1,
            Endpoint::X1 => a.value,
            Endpoint::X2 => b.value,
            Endpoint::Gamma => gamma_of_t(self.gamma_f.as_ref().expect("pendulum segment"), t),
        }
    }

    /// Largest deviation between the cross-section data at `0` and at `T`.
    pub fn periodicity_defect(&self) -> f64 {
        let t1 = self.period;
        let mut d = 0.0_f64;
        if let Some(bs) = self.barriers() {
            for b in bs {
                for x in [&b.x1, &b.x2] {
                    let (a, c) = (x.jet(0.0), x.jet(t1));
                    d = d.max((a.value - c.value).abs()).max((a.d1 - c.d1).abs());
                }
            }
        }
        if let Some(f) = &self.gamma_f {
            d = d.max((gamma_of_t(f, 0.0) - gamma_of_t(f, t1)).abs());
        }
        d
    }

    /// Whether `(t, q, q')` lies in `W_t`.
    pub fn contains(&self, t: f64, q: &[f64], qd: &[f64]) -> bool {
        self.margins(t, q, qd).iter().all(|m| *m >= 0.0)
    }

    /// Signed distances to the walls: per coordinate `q - x1`, `x2 - q`, `p - |q'|`
    /// for boxes; `ρ(q)` and `2p - ⟨q', A q'⟩` for metric balls.
    pub fn margins(&self, t: f64, q: &[f64], qd: &[f64]) -> Vec<f64> {
        match &self.kind {
            SegmentKind::Box { barriers, p } => barriers
                .iter()
                .enumerate()
                .flat_map(|(j, b)| [q[j] - b.x1.value(t), b.x2.value(t) - q[j], p - qd[j].abs()])
                .collect(),
            SegmentKind::MetricBall { region, metric, p } => {
                vec![region.rho(q), 2.0 * p - metric.norm2(q, qd)]
            }
        }
    }

    /// Interval of the face on the perimeter `[0, 4)` of the rectangle of its
    /// coordinate: bottom edge `[0, 1]`, upper wall `[1, 2]`, top `[2, 3]`, lower wall `[3, 4]`.
    pub fn face_arc(&self, face: &Face, t: f64) -> Option<(usize, f64, f64)> {
        let FaceGeom::Wall { coord, edge, lo, hi } = face.geom else { return None };
        let (a, b) = self.barrier_jets(coord, t);
        let (x1, x2, p) = (a.value, b.value, self.p());
        let perim = |v: f64| match edge {
            Edge::Bottom => (v - x1) / (x2 - x1),
            Edge::Upper => 1.0 + (v + p) / (2.0 * p),
            Edge::Top => 2.0 + (x2 - v) / (x2 - x1),
            Edge::Lower => 3.0 + (p - v) / (2.0 * p),
        };
        let (u, v) = (perim(self.endpoint(coord, lo, t)), perim(self.endpoint(coord, hi, t)));
        Some((coord, u.min(v), u.max(v)))
    }

    /// State on a face from parameters `u ∈ [0, 1]^k`; `u[0]` runs along the
    /// face's primary direction.
    fn face_point(&self, face: &Face, t: f64, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match (&self.kind, face.geom) {
            (SegmentKind::Box { barriers, p }, FaceGeom::Wall { coord, edge, lo, hi }) => {
                let n = barriers.len();
                let mut q = vec![0.0; n];
                let mut qd = vec![0.0; n];
                let mut k = 1;
                for i in 0..n {
                    let (x1, x2) = (barriers[i].x1.value(t), barriers[i].x2.value(t));
                    if i == coord {
                        continue;
                    }
                    q[i] = x1 + (x2 - x1) * u.get(k).copied().unwrap_or(0.5);
                    qd[i] = -p + 2.0 * p * u.get(k + 1).copied().unwrap_or(0.5);
                    k += 2;
                }
                let (a, b) = (self.endpoint(coord, lo, t), self.endpoint(coord, hi, t));
                let v = a + (b - a) * u[0];
                let (x1, x2) = (barriers[coord].x1.value(t), barriers[coord].x2.value(t));
                match edge {
                    Edge::Lower => (q[coord], qd[coord]) = (x1, v),
                    Edge::Upper => (q[coord], qd[coord]) = (x2, v),
                    Edge::Top => (q[coord], qd[coord]) = (v, *p),
                    Edge::Bottom => (q[coord], qd[coord]) = (v, -p),
                }
                (q, qd)
            }
            (SegmentKind::MetricBall { region, metric, p }, FaceGeom::RegionBoundary { outward }) => {
                let n = region.dim();
                let q = region.boundary_point(&u[2..n + 4]);
                let nrm = {
                    let g = region.grad(&q);
                    let s = norm2(&g).sqrt();
                    g.iter().map(|x| -x / s).collect::<Vec<_>>()
                };
                // tangent direction orthogonal to the outward normal
                let mut w = unit_vector(n, &u[n + 4..]);
                if n == 2 {
                    w = vec![-nrm[1], nrm[0]];
                } else {
                    let d: f64 = w.iter().zip(&nrm).map(|(a, b)| a * b).sum();
                    w.iter_mut().zip(&nrm).for_each(|(a, b)| *a -= d * b);
                    let s = norm2(&w).sqrt().max(1e-300);
                    w.iter_mut().for_each(|a| *a /= s);
                }
                let half = if outward { 0.0 } else { PI };
                let alpha = half + PI * (u[0] - 0.5);
                let dir: Vec<f64> = nrm.iter().zip(&w).map(|(a, b)| alpha.cos() * a + alpha.sin() * b).collect();
                let speed = (2.0 * p).sqrt() * u[1];
                let scale = speed / metric.norm2(&q, &dir).sqrt();
                (q, dir.iter().map(|x| x * scale).collect())
            }
            (SegmentKind::MetricBall { region, metric, p }, FaceGeom::SpeedSphere) => {
                let n = region.dim();
                let q = region.interior_point(&u[1..n + 3]);
                let dir = unit_vector(n, &u[n + 3..]);
                let scale = (2.0 * p / metric.norm2(&q, &dir)).sqrt();
                (q, dir.iter().map(|x| x * scale).collect())
            }
            _ => unreachable!("face geometry does not match the segment kind"),
        }
    }

    fn param_dim(&self, face: &Face) -> usize {
        match face.geom {
            FaceGeom::Wall { .. } => 1 + 2 * (self.dim - 1),
            FaceGeom::RegionBoundary { .. } => 2 * self.dim + 6,
            FaceGeom::SpeedSphere => 2 * self.dim + 5,
        }
    }

    /// Gap `g >= 0` inside `W_t` and its rate `dg/dt` along the flow of `system`.
    fn gap_rate(&self, system: &SystemSpec, face: &Face, t: f64, q: &[f64], qd: &[f64]) -> (f64, f64) {
        match (&self.kind, face.geom) {
            (SegmentKind::Box { barriers, p }, FaceGeom::Wall { coord: j, edge, .. }) => {
                let b = &barriers[j];
                match edge {
                    Edge::Lower => {
                        let x = b.x1.jet(t);
                        (q[j] - x.value, qd[j] - x.d1)
                    }
                    Edge::Upper => {
                        let x = b.x2.jet(t);
                        (x.value - q[j], x.d1 - qd[j])
                    }
                    Edge::Top => (p - qd[j], -system.accel(t, q, qd)[j]),
                    Edge::Bottom => (qd[j] + p, system.accel(t, q, qd)[j]),
                }
            }
            (SegmentKind::MetricBall { region, .. }, FaceGeom::RegionBoundary { .. }) => {
                let g = region.grad(q);
                (region.rho(q), g.iter().zip(qd).map(|(a, b)| a * b).sum())
            }
            (SegmentKind::MetricBall { metric, p, .. }, FaceGeom::SpeedSphere) => {
                let a = system.accel(t, q, qd);
                let h = 1e-6;
                let qp: Vec<f64> = q.iter().zip(qd).map(|(x, v)| x + h * v).collect();
                let qm: Vec<f64> = q.iter().zip(qd).map(|(x, v)| x - h * v).collect();
                let da = (metric.norm2(&qp, qd) - metric.norm2(&qm, qd)) / (2.0 * h);
                let m = metric.matrix(q);
                let mut qaq = 0.0;
                for i in 0..self.dim {
                    for k in 0..self.dim {
                        qaq += qd[i] * m[(i, k)] * a[k];
                    }
                }
                (2.0 * p - metric.norm2(q, qd), -(da + 2.0 * qaq))
            }
            _ => unreachable!("face geometry does not match the segment kind"),
        }
    }

    /// Outward rates at a face point: first order `-dg/dt` and, from central
    /// differences of `dg/dt` along short flow steps, second order `-d²g/dt²`.
    pub fn outward_rates(&self, system: &SystemSpec, face: &Face, t: f64, q: &[f64], qd: &[f64]) -> (f64, f64) {
        let (_, g1) = self.gap_rate(system, face, t, q, qd);
        let n = self.dim;
        let y: Vec<f64> = q.iter().chain(qd).copied().collect();
        let yp = rk4_step(system, t, &y, FLOW_STEP);
        let ym = rk4_step(system, t, &y, -FLOW_STEP);
        let (_, gp) = self.gap_rate(system, face, t + FLOW_STEP, &yp[..n], &yp[n..]);
        let (_, gm) = self.gap_rate(system, face, t - FLOW_STEP, &ym[..n], &ym[n..]);
        (-g1, -(gp - gm) / (2.0 * FLOW_STEP))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SampleClass {
    Exit,
    TangentExit,
    Entry,
    TangentEntry,
    Unresolved,
}

#[derive(Debug, Clone, Serialize)]
pub struct FaceSample {
    pub face: String,
    pub t: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub rate1: f64,
    pub rate2: f64,
    pub class: SampleClass,
}

#[derive(Debug, Clone, Serialize)]
pub struct FaceReport {
    pub id: String,
    pub expected: Expect,
    pub classification: Classification,
    pub samples: usize,
    pub tangent_samples: usize,
    /// Smallest rate in the expected direction (first or second order); positive when verified.
    pub min_margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SegmentReport {
    pub faces: Vec<FaceReport>,
    pub convention: CapConvention,
    pub passed: bool,
    #[serde(skip)]
    pub samples: Vec<FaceSample>,
}

/// Sampling options for [`check_exit_faces`].
#[derive(Debug, Clone, Copy)]
pub struct FaceCheck {
    pub n_samples: usize,
    pub n_times: usize,
    pub seed: u64,
    pub keep_samples: bool,
}

impl Default for FaceCheck {
    fn default() -> Self {
        FaceCheck { n_samples: 200, n_times: 8, seed: 0, keep_samples: false }
    }
}

pub fn classify_rates(r1: f64, r2: f64) -> SampleClass {
    if r1 > STRICT_TOL {
        SampleClass::Exit
    } else if r1 < -STRICT_TOL {
        SampleClass::Entry
    } else if r2 > STRICT_TOL {
        SampleClass::TangentExit
    } else if r2 < -STRICT_TOL {
        SampleClass::TangentEntry
    } else {
        SampleClass::Unresolved
    }
}

/// Samples every face at `n_times` slices of `[0, T)` and classifies it
/// against the field of `system`.
pub fn check_exit_faces(system: &SystemSpec, segment: &mut PeriodicSegment, opts: &FaceCheck) -> Result<SegmentReport> {
    if opts.n_samples < 2 || opts.n_times == 0 {
        return Err(Error::InvalidInput("face check needs at least 2 samples and 1 time slice".into()));
    }
    if system.dim != segment.dim {
        return Err(Error::InvalidInput("system and segment dimensions differ".into()));
    }
    let seg: &PeriodicSegment = segment;
    let results: Vec<(FaceReport, Vec<FaceSample>)> = seg
        .faces
        .par_iter()
        .enumerate()
        .map(|(fi, face)| {
            let k = seg.param_dim(face);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (0x9e37_79b9 * (fi as u64 + 1)));
            let mut samples = Vec::with_capacity(opts.n_samples * opts.n_times);
            for ti in 0..opts.n_times {
                let t = seg.period * ti as f64 / opts.n_times as f64;
                for i in 0..opts.n_samples {
                    let mut u: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
                    u[0] = match face.expected {
                        Expect::Exit => i as f64 / (opts.n_samples - 1) as f64,
                        Expect::Entry => (i as f64 + 0.5) / opts.n_samples as f64,
                    };
                    if let (FaceGeom::RegionBoundary { .. }, Expect::Exit) = (face.geom, face.expected) {
                        // zero speed is the hardest case for the exit boundary
                        if i % 5 == 0 {
                            u[1] = 0.0;
                        }
                    }
                    let (q, qd) = seg.face_point(face, t, &u);
                    let (r1, r2) = seg.outward_rates(system, face, t, &q, &qd);
                    samples.push(FaceSample {
                        face: face.id.clone(),
                        t,
                        q,
                        qd,
                        rate1: r1,
                        rate2: r2,
                        class: classify_rates(r1, r2),
                    });
                }
            }
            (summarize(face, &samples), samples)
        })
        .collect();

    let mut report = SegmentReport { faces: vec![], convention: segment.convention, passed: true, samples: vec![] };
    let mut unresolved = None;
    for (face, (fr, samples)) in segment.faces.iter_mut().zip(results) {
        face.classification = fr.classification;
        if fr.classification != Classification::Exit
            && fr.classification != Classification::TangentExit
            && fr.classification != Classification::Entry
        {
            report.passed = false;
        }
        if unresolved.is_none() {
            if let Some(s) = samples.iter().find(|s| s.class == SampleClass::Unresolved) {
                unresolved = Some(Error::UnresolvedTangency {
                    face: face.id.clone(),
                    t: s.t,
                    rate1: s.rate1,
                    rate2: s.rate2,
                });
            }
        }
        report.faces.push(fr);
        if opts.keep_samples {
            report.samples.extend(samples);
        }
    }
    if let Some(e) = unresolved {
        return Err(e);
    }
    Ok(report)
}

fn summarize(face: &Face, samples: &[FaceSample]) -> FaceReport {
    let mut tangent = 0;
    let mut margin = f64::INFINITY;
    let mut ok = true;
    let mut unresolved = false;
    for s in samples {
        let (good, m) = match (face.expected, s.class) {
            (Expect::Exit, SampleClass::Exit) => (true, s.rate1),
            (Expect::Exit, SampleClass::TangentExit) => {
                tangent += 1;
                (true, s.rate2)
            }
            (Expect::Entry, SampleClass::Entry) => (true, -s.rate1),
            (Expect::Entry, SampleClass::TangentEntry) => {
                tangent += 1;
                (true, -s.rate2)
            }
            (_, SampleClass::Unresolved) => {
                unresolved = true;
                (false, 0.0)
            }
            (Expect::Exit, _) => (false, s.rate1.max(s.rate2)),
            (Expect::Entry, _) => (false, (-s.rate1).max(-s.rate2)),
        };
        ok &= good;
        margin = margin.min(m);
    }
    let classification = if unresolved {
        Classification::Unresolved
    } else if !ok {
        Classification::Violated
    } else {
        match face.expected {
            Expect::Exit if tangent > 0 => Classification::TangentExit,
            Expect::Exit => Classification::Exit,
            Expect::Entry => Classification::Entry,
        }
    };
    FaceReport {
        id: face.id.clone(),
        expected: face.expected,
        classification,
        samples: samples.len(),
        tangent_samples: tangent,
        min_margin: margin,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IndexReport {
    pub chi_w: i64,
    pub chi_exit: i64,
    pub index: i64,
    pub exit_components: usize,
}

/// Connected components of a union of closed arcs on the circle `[0, len)`;
/// `None` when the arcs cover the whole circle.
pub fn arc_components(arcs: &[(f64, f64)], len: f64) -> Option<usize> {
    const TOUCH: f64 = 1e-12;
    if arcs.is_empty() {
        return Some(0);
    }
    let mut v: Vec<(f64, f64)> = arcs.to_vec();
    v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (a, b) in v {
        match merged.last_mut() {
            Some(last) if a <= last.1 + TOUCH => last.1 = last.1.max(b),
            _ => merged.push((a, b)),
        }
    }
    if merged.len() == 1 && merged[0].0 <= TOUCH && merged[0].1 >= len - TOUCH {
        return None;
    }
    let mut k = merged.len();
    if k > 1 && merged[0].0 <= TOUCH && merged[k - 1].1 >= len - TOUCH {
        k -= 1;
    }
    Some(k)
}

/// `χ(W_0) - χ(W_0^{--})` for product segments, from the classified faces.
pub fn euler_characteristics(segment: &PeriodicSegment) -> Result<IndexReport> {
    let bad: Vec<String> = segment
        .faces
        .iter()
        .filter(|f| {
            !matches!(f.classification, Classification::Exit | Classification::TangentExit | Classification::Entry)
        })
        .map(|f| f.id.clone())
        .collect();
    if !bad.is_empty() {
        return Err(Error::UnclassifiedFaces(bad));
    }
    if !segment.periodic {
        return Err(Error::NonProductSegment);
    }
    match &segment.kind {
        SegmentKind::Box { barriers, .. } => {
            // relative Euler characteristics multiply over the coordinate rectangles
            let mut index = 1_i64;
            let mut comps = 0;
            for j in 0..barriers.len() {
                let arcs: Vec<(f64, f64)> = segment
                    .faces
                    .iter()
                    .filter(|f| f.classification.is_exit())
                    .filter_map(|f| segment.face_arc(f, 0.0))
                    .filter(|(c, _, _)| *c == j)
                    .map(|(_, a, b)| (a, b))
                    .collect();
                let (chi_e, k) = match arc_components(&arcs, 4.0) {
                    Some(k) => (k as i64, k),
                    None => (0, 1),
                };
                index *= 1 - chi_e;
                comps = if barriers.len() == 1 { k } else { comps.max(k.min(1)) };
            }
            Ok(IndexReport { chi_w: 1, chi_exit: 1 - index, index, exit_components: comps })
        }
        SegmentKind::MetricBall { region, .. } => {
            let exits = segment.faces.iter().any(|f| f.classification.is_exit());
            let n = region.dim() as i64;
            let (chi_exit, comps) = if exits { (1 + if n % 2 == 0 { -1 } else { 1 }, 1) } else { (0, 0) };
            Ok(IndexReport { chi_w: 1, chi_exit, index: 1 - chi_exit, exit_components: comps })
        }
    }
}

/// Exit components of a one-degree-of-freedom segment counted from the
/// observed field direction at `n` equally spaced perimeter points at time `t`.
pub fn sampled_exit_components(system: &SystemSpec, segment: &PeriodicSegment, t: f64, n: usize) -> Result<usize> {
    let SegmentKind::Box { barriers, .. } = &segment.kind else {
        return Err(Error::NotPlanar(segment.dim));
    };
    if barriers.len() != 1 {
        return Err(Error::NotPlanar(barriers.len()));
    }
    let wall = |edge, lo, hi| Face::new("probe", FaceGeom::Wall { coord: 0, edge, lo, hi }, Expect::Exit);
    let edges = [
        wall(Edge::Bottom, Endpoint::X1, Endpoint::X2),
        wall(Edge::Upper, Endpoint::MinusP, Endpoint::PlusP),
        wall(Edge::Top, Endpoint::X2, Endpoint::X1),
        wall(Edge::Lower, Endpoint::PlusP, Endpoint::MinusP),
    ];
    let mut flags = Vec::with_capacity(n);
    for i in 0..n {
        let s = 4.0 * (i as f64 + 0.5) / n as f64;
        let e = (s.floor() as usize).min(3);
        let face = &edges[e];
        let (q, qd) = segment.face_point(face, t, &[s - e as f64]);
        let (r1, r2) = segment.outward_rates(system, face, t, &q, &qd);
        flags.push(matches!(classify_rates(r1, r2), SampleClass::Exit | SampleClass::TangentExit));
    }
    let runs = (0..n).filter(|&i| flags[i] && !flags[(i + n - 1) % n]).count();
    Ok(if runs == 0 && flags.iter().all(|f| *f) { 1 } else { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::pendulum_time_forced;
    use crate::timefn::TrigSeries;
    use std::f64::consts::{FRAC_PI_4, TAU};

    #[test]
    fn gamma_values() {
        assert!((gamma_of_t(&TimeFn::constant(0.0), 0.0) - FRAC_PI_2).abs() < 1e-15);
        assert!((gamma_of_t(&TimeFn::constant(1.0), 0.0) - FRAC_PI_4).abs() < 1e-15);
        assert!((gamma_of_t(&TimeFn::constant(-1.0), 0.0) - 3.0 * FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn arc_union_counts() {
        assert_eq!(arc_components(&[(3.5, 4.0), (0.0, 0.5), (1.5, 2.0), (2.0, 2.5)], 4.0), Some(2));
        assert_eq!(arc_components(&[(0.0, 4.0)], 4.0), None);
        assert_eq!(arc_components(&[], 4.0), Some(0));
        assert_eq!(arc_components(&[(0.2, 0.4)], 4.0), Some(1));
    }

    #[test]
    fn pendulum_top_face_for_zero_forcing() {
        let seg = build_pendulum_segment(TimeFn::constant(0.0), 3.0, TAU).unwrap();
        let top = seg.faces.iter().find(|f| f.id == "top").unwrap();
        let (_, a, b) = seg.face_arc(top, 0.0).unwrap();
        // q ∈ [π/2, π] on the top edge maps to [2, 2.5]
        assert!((a - 2.0).abs() < 1e-15 && (b - 2.5).abs() < 1e-15);
        let (q, qd) = seg.face_point(top, 0.0, &[0.0]);
        assert!((q[0] - FRAC_PI_2).abs() < 1e-15 && qd[0] == 3.0);
    }

    #[test]
    fn pendulum_face_rates_by_hand() {
        let sys = pendulum_time_forced(TimeFn::constant(0.0), 0.0, TAU).unwrap();
        let seg = build_pendulum_segment(TimeFn::constant(0.0), 3.0, TAU).unwrap();
        let right = &seg.faces[0];
        let (r1, _) = seg.outward_rates(&sys, right, 0.0, &[0.0], &[-1.0]);
        assert!((r1 - 1.0).abs() < 1e-15);
        let entry = seg.faces.iter().find(|f| f.id == "right_entry").unwrap();
        let (r1, _) = seg.outward_rates(&sys, entry, 0.0, &[0.0], &[1.0]);
        assert!((r1 + 1.0).abs() < 1e-15);
        // tangency at (0, 0): second-order rate is -q'' = cos 0 = 1
        let (r1, r2) = seg.outward_rates(&sys, right, 0.0, &[0.0], &[0.0]);
        assert_eq!(r1, 0.0);
        assert!((r2 - 1.0).abs() < 1e-8, "{r2}");
    }

    #[test]
    fn pendulum_index_is_minus_one() {
        let f: TimeFn = TrigSeries::sine(0.5, 1.0).into();
        let sys = pendulum_time_forced(f.clone(), 0.5, TAU).unwrap();
        let mut seg = build_pendulum_segment(f, 20.0, TAU).unwrap();
        let rep = check_exit_faces(&sys, &mut seg, &FaceCheck { n_samples: 100, ..Default::default() }).unwrap();
        assert!(rep.passed, "{:?}", rep.faces);
        let idx = euler_characteristics(&seg).unwrap();
        assert_eq!((idx.chi_w, idx.chi_exit, idx.index, idx.exit_components), (1, 2, -1, 2));
        assert!(seg.faces.iter().find(|f| f.id == "top").unwrap().classification == Classification::TangentExit);
    }

    #[test]
    fn unchecked_segment_has_no_index() {
        let seg = build_pendulum_segment(TimeFn::constant(0.0), 3.0, TAU).unwrap();
        assert!(matches!(euler_characteristics(&seg), Err(Error::UnclassifiedFaces(_))));
    }

    #[test]
    fn barrier_segment_slope_check() {
        let b = BarrierPair::new(TrigSeries::sine(1.0, 1.0).into(), TimeFn::constant(5.0));
        assert!(matches!(build_barrier_segment(vec![b.clone()], 1.0, TAU), Err(Error::SpeedBoundTooSmall { .. })));
        assert!(build_barrier_segment(vec![b], 1.01, TAU).is_ok());
        let bad = BarrierPair::constant(1.0, 1.0);
        assert!(matches!(build_barrier_segment(vec![bad], 2.0, TAU), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn metric_ball_indices() {
        for (n, chi) in [(2usize, 0i64), (3, 2)] {
            let region = Region::Ball { center: vec![0.0; n], radius: 1.0 };
            let mut seg = build_metric_segment(MetricSpec::flat(n), region, 1.0, 1.0).unwrap();
            for f in &mut seg.faces {
                f.classification = if f.expected == Expect::Exit { Classification::TangentExit } else { Classification::Entry };
            }
            let r = euler_characteristics(&seg).unwrap();
            assert_eq!((r.chi_w, r.chi_exit, r.index), (1, chi, 1 - chi));
        }
    }
}

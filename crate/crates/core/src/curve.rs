//! Planar curves in natural (arclength) parametrization.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Position and first two arclength derivatives of a curve point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CurvePoint {
    pub xi: f64,
    pub eta: f64,
    pub dxi: f64,
    pub deta: f64,
    pub ddxi: f64,
    pub ddeta: f64,
}

/// A curve `s ↦ (ξ(s), η(s))` with `ξ'² + η'² = 1`.
#[derive(Clone)]
pub struct CurveSpec {
    eval: Arc<dyn Fn(f64) -> CurvePoint + Send + Sync>,
    pub length: f64,
    pub closed: bool,
}

impl fmt::Debug for CurveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CurveSpec").field("length", &self.length).field("closed", &self.closed).finish()
    }
}

/// Curve in an arbitrary regular parameter `u`, returning
/// `[x, y, x_u, y_u, x_uu, y_uu]`.
pub type ParametricFn = Arc<dyn Fn(f64) -> [f64; 6] + Send + Sync>;

impl CurveSpec {
    pub fn natural(length: f64, closed: bool, eval: impl Fn(f64) -> CurvePoint + Send + Sync + 'static) -> Self {
        CurveSpec { eval: Arc::new(eval), length, closed }
    }

    /// Counter-clockwise circle.
    pub fn circle(radius: f64, center: [f64; 2]) -> Self {
        let r = radius;
        CurveSpec::natural(TAU * r, true, move |s| {
            let (sn, cs) = (s / r).sin_cos();
            CurvePoint {
                xi: center[0] + r * cs,
                eta: center[1] + r * sn,
                dxi: -sn,
                deta: cs,
                ddxi: -cs / r,
                ddeta: -sn / r,
            }
        })
    }

    /// Counter-clockwise ellipse with semi-axes `a` (along ξ) and `b`,
    /// reparametrized by arclength from the point `(cx + a, cy)`.
    pub fn ellipse(a: f64, b: f64, center: [f64; 2]) -> Result<Self> {
        let p: ParametricFn = Arc::new(move |u: f64| {
            let (s, c) = u.sin_cos();
            [center[0] + a * c, center[1] + b * s, -a * s, b * c, -a * c, -b * s]
        });
        CurveSpec::from_parametric(p, 0.0, TAU, true, 1024)
    }

    /// Arclength reparametrization: cumulative Gauss–Legendre quadrature of
    /// the speed on `panels` uniform panels, inverted by monotone cubic
    /// Hermite interpolation and polished with Newton steps.
    pub fn from_parametric(p: ParametricFn, u0: f64, u1: f64, closed: bool, panels: usize) -> Result<Self> {
        if !(u1 > u0) || panels == 0 {
            return Err(Error::InvalidInput("parameter interval must be non-empty".into()));
        }
        let speed = {
            let p = p.clone();
            move |u: f64| {
                let v = p(u);
                v[2].hypot(v[3])
            }
        };
        let du = (u1 - u0) / panels as f64;
        let mut us = Vec::with_capacity(panels + 1);
        let mut ss = Vec::with_capacity(panels + 1);
        let mut sp = Vec::with_capacity(panels + 1);
        let mut acc = 0.0;
        for i in 0..=panels {
            let u = u0 + i as f64 * du;
            if i > 0 {
                acc += gauss_legendre(&speed, u - du, u);
            }
            let v = speed(u);
            if !(v > 0.0) {
                return Err(Error::InvalidInput(format!("curve is not regular at u = {u}")));
            }
            us.push(u);
            ss.push(acc);
            sp.push(v);
        }
        let length = acc;
        let table = Arc::new(ArcTable { us, ss, sp });
        let eval = move |s: f64| {
            let s = if closed { s.rem_euclid(length) } else { s.clamp(0.0, length) };
            let u = table.invert(&speed, s);
            let v = p(u);
            let sigma = v[2].hypot(v[3]);
            let dsigma = (v[2] * v[4] + v[3] * v[5]) / sigma;
            let s3 = sigma * sigma * sigma;
            CurvePoint {
                xi: v[0],
                eta: v[1],
                dxi: v[2] / sigma,
                deta: v[3] / sigma,
                ddxi: (v[4] * sigma - v[2] * dsigma) / s3,
                ddeta: (v[5] * sigma - v[3] * dsigma) / s3,
            }
        };
        Ok(CurveSpec { eval: Arc::new(eval), length, closed })
    }

    #[inline]
    pub fn at(&self, s: f64) -> CurvePoint {
        (self.eval)(s)
    }

    /// Largest `|ξ'² + η'² - 1|` over `n` uniform samples.
    pub fn speed_defect(&self, n: usize) -> f64 {
        (0..n)
            .map(|i| {
                let c = self.at(self.length * i as f64 / n as f64);
                (c.dxi * c.dxi + c.deta * c.deta - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Sampled maxima of `|ξη' - ηξ'|` and `|ξξ' + ηη'|`.
    pub(crate) fn moment_bounds(&self, n: usize) -> (f64, f64) {
        let mut m = (0.0_f64, 0.0_f64);
        for i in 0..n {
            let c = self.at(self.length * i as f64 / n as f64);
            m.0 = m.0.max((c.xi * c.deta - c.eta * c.dxi).abs());
            m.1 = m.1.max((c.xi * c.dxi + c.eta * c.deta).abs());
        }
        m
    }
}

struct ArcTable {
    us: Vec<f64>,
    ss: Vec<f64>,
    sp: Vec<f64>,
}

impl ArcTable {
    fn invert(&self, speed: &impl Fn(f64) -> f64, s: f64) -> f64 {
        let n = self.ss.len();
        let i = match self.ss.binary_search_by(|x| x.partial_cmp(&s).unwrap()) {
            Ok(i) => return self.us[i],
            Err(i) => i.clamp(1, n - 1),
        };
        let (s0, s1) = (self.ss[i - 1], self.ss[i]);
        let (u0, u1) = (self.us[i - 1], self.us[i]);
        // u(s) is monotone with slopes 1/speed at the knots
        let h = s1 - s0;
        let x = (s - s0) / h;
        let (m0, m1) = (h / self.sp[i - 1], h / self.sp[i]);
        let x2 = x * x;
        let x3 = x2 * x;
        let mut u = (2.0 * x3 - 3.0 * x2 + 1.0) * u0
            + (x3 - 2.0 * x2 + x) * m0
            + (-2.0 * x3 + 3.0 * x2) * u1
            + (x3 - x2) * m1;
        u = u.clamp(u0, u1);
        for _ in 0..3 {
            let f = s0 + gauss_legendre(speed, u0, u) - s;
            let step = f / speed(u);
            u = (u - step).clamp(u0, u1);
            if step.abs() < 1e-15 * (1.0 + u.abs()) {
                break;
            }
        }
        u
    }
}

const GL8_X: [f64; 4] = [0.183_434_642_495_649_8, 0.525_532_409_916_329, 0.796_666_477_413_626_7, 0.960_289_856_497_536_3];
const GL8_W: [f64; 4] = [0.362_683_783_378_362, 0.313_706_645_877_887_3, 0.222_381_034_453_374_5, 0.101_228_536_290_376_3];

fn gauss_legendre(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let m = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let mut s = 0.0;
    for k in 0..4 {
        s += GL8_W[k] * (f(m - r * GL8_X[k]) + f(m + r * GL8_X[k]));
    }
    s * r
}

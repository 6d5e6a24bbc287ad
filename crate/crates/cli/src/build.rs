//! Construction of systems, segments and cutoff profiles from declarations.

use std::sync::Arc;

use forced_osc::curve::{CurveSpec, ParametricFn};
use forced_osc::cutoff::{Band, CutoffProfile};
use forced_osc::gallery::{
    curve_pendulum_system, geodesic_system, morse_chain_system, pendulum_time_forced, rotating_curve_barriers,
    rotating_curve_system, spherical_pendulum_system, AmbientForce, ChainSpec, FieldFn, SphereChart, SphericalSpec,
};
use forced_osc::segment::{
    build_barrier_segment, build_metric_segment, build_pendulum_segment, BarrierPair, PeriodicSegment, Region,
};
use forced_osc::system::{GrowthBound, MetricSpec, SystemSpec};
use forced_osc::timefn::{TimeFn, TrigSeries};

use crate::expr::{self, Expr};
use crate::scenario::{flat_var_names, CurveDecl, MetricDecl, RegionDecl, Scenario, SegmentDecl, SystemDecl, TimeSpec};

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error("{0}")]
    Expr(#[from] expr::ExprError),
    #[error("{0}")]
    Core(#[from] forced_osc::Error),
    #[error("{0}")]
    Invalid(String),
}

pub fn time_fn(spec: &TimeSpec) -> Result<TimeFn, BuildError> {
    Ok(match spec {
        TimeSpec::Value(c) => TimeFn::constant(*c),
        TimeSpec::Expr(s) => expr::time_fn(s)?,
        TimeSpec::Series(s) => TimeFn::from(series(s)),
    })
}

fn series(s: &crate::scenario::SeriesDecl) -> TrigSeries {
    TrigSeries { mean: s.mean, omega: s.omega, sin: s.sin.clone(), cos: s.cos.clone() }
}

/// Sup of `|f|` over one period: exact for series, sampled otherwise.
pub fn time_bound(spec: &TimeSpec, period: f64) -> Result<f64, BuildError> {
    Ok(match spec {
        TimeSpec::Value(c) => c.abs(),
        TimeSpec::Series(s) => series(s).abs_bound(),
        TimeSpec::Expr(_) => time_fn(spec)?.sup_abs(period, 8192).value * 1.001,
    })
}

pub fn curve(decl: &CurveDecl) -> Result<CurveSpec, BuildError> {
    Ok(match decl {
        CurveDecl::Circle { radius, center } => CurveSpec::circle(*radius, *center),
        CurveDecl::Ellipse { a, b, center } => CurveSpec::ellipse(*a, *b, *center)?,
        CurveDecl::Parametric { x, y, u0, u1, closed } => {
            let ex = Expr::parse(x, &["u"])?;
            let ey = Expr::parse(y, &["u"])?;
            let p: ParametricFn = Arc::new(move |u| {
                let jx = expr::jet_of(|s| ex.eval(&[s]), u);
                let jy = expr::jet_of(|s| ey.eval(&[s]), u);
                [jx.value, jy.value, jx.d1, jy.d1, jx.d2, jy.d2]
            });
            let (a, b) = (u0.resolve().map_err(BuildError::Invalid)?, u1.resolve().map_err(BuildError::Invalid)?);
            CurveSpec::from_parametric(p, a, b, *closed, 1024)?
        }
    })
}

pub fn metric(decl: &MetricDecl) -> MetricSpec {
    match decl {
        MetricDecl::Flat { dim } => MetricSpec::flat(*dim),
        MetricDecl::SpherePolar => MetricSpec::sphere_polar(),
        MetricDecl::Hemisphere => MetricSpec::hemisphere(),
        MetricDecl::Torus { big_r, r } => MetricSpec::torus(*big_r, *r),
    }
}

pub fn region(decl: &RegionDecl) -> Region {
    match decl {
        RegionDecl::Ball { center, radius } => Region::Ball { center: center.clone(), radius: *radius },
        RegionDecl::SphereCap { eps } => Region::SphereCap { eps: *eps },
        RegionDecl::Slab { dim, coord, lo, hi } => Region::Slab { dim: *dim, coord: *coord, lo: *lo, hi: *hi },
    }
}

/// Evaluates expressions over `t, q1..qn, qd1..qdn` (plus `q, qd` aliases for `n = 1`).
pub struct FlatExprs {
    exprs: Vec<Expr>,
    n: usize,
}

impl FlatExprs {
    pub fn parse(srcs: &[String], n: usize) -> Result<Self, BuildError> {
        let names = flat_var_names(n);
        let vars: Vec<&str> = names.iter().map(String::as_str).collect();
        let exprs = srcs.iter().map(|s| Expr::parse(s, &vars)).collect::<Result<Vec<_>, _>>()?;
        Ok(FlatExprs { exprs, n })
    }

    pub fn eval_into(&self, t: f64, q: &[f64], qd: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut buf = [0.0_f64; 32];
        let mut heap;
        let vals: &mut [f64] = if 2 * n + 3 <= buf.len() {
            &mut buf[..2 * n + 3]
        } else {
            heap = vec![0.0; 2 * n + 3];
            &mut heap
        };
        vals[0] = t;
        vals[1..=n].copy_from_slice(q);
        vals[n + 1..=2 * n].copy_from_slice(qd);
        if n == 1 {
            vals[3] = q[0];
            vals[4] = qd[0];
        }
        for (o, e) in out.iter_mut().zip(&self.exprs) {
            *o = e.eval(vals);
        }
    }

    /// True when no expression reads a position or velocity.
    pub fn is_time_only(&self) -> bool {
        let names = flat_var_names(self.n);
        self.exprs.iter().all(|e| names[1..].iter().all(|v| !e.depends_on(v)))
    }
}

pub fn system(scn: &Scenario) -> Result<SystemSpec, BuildError> {
    let period = scn.period;
    Ok(match &scn.system {
        SystemDecl::Pendulum(d) => {
            let bound = match d.forcing_bound {
                Some(b) => b,
                None => time_bound(&d.forcing, period)?,
            };
            pendulum_time_forced(time_fn(&d.forcing)?, bound, period)?
        }
        SystemDecl::CurvePendulum(d) => curve_pendulum_system(curve(&d.curve)?, time_fn(&d.forcing)?, period),
        SystemDecl::RotatingCurve(d) => rotating_curve_system(curve(&d.curve)?, time_fn(&d.phi)?, period),
        SystemDecl::MorseChain(d) => {
            let e = Expr::parse(&d.field, &["t", "x"])?;
            let field: FieldFn = Arc::new(move |t, x| e.eval(&[t, x]));
            morse_chain_system(ChainSpec { n: d.n, field, field_bound: d.field_bound }, period)?
        }
        SystemDecl::Spherical(d) => {
            let vars = ["t", "x", "y", "z", "vx", "vy", "vz"];
            let ambient = |src: &str| -> Result<AmbientForce, BuildError> {
                let e = Expr::parse(src, &vars)?;
                Ok(Arc::new(move |t, r: &[f64; 3], v: &[f64; 3]| e.eval(&[t, r[0], r[1], r[2], v[0], v[1], v[2]])))
            };
            let chart = if d.chart == "polar" { SphereChart::Polar } else { SphereChart::UpperHemisphere };
            let spec = SphericalSpec::new(ambient(&d.fx)?, ambient(&d.fy)?, d.force_bound, chart);
            spherical_pendulum_system(&spec, period)
        }
        SystemDecl::CustomFlat(d) => {
            let f = FlatExprs::parse(&d.accel, d.dim)?;
            let sys = SystemSpec::flat("custom_flat", d.dim, period, move |t, q, qd, out| f.eval_into(t, q, qd, out));
            match d.growth {
                Some(g) => sys.with_growth(GrowthBound { a: g.a, b: g.b, delta: g.delta }),
                None => sys,
            }
        }
        SystemDecl::Geodesic(d) => {
            let mut s = geodesic_system(metric(&d.metric));
            s.period = period;
            s
        }
    })
}

/// Segment plus the cutoff profile that goes with its `(p, ε, μ)`.
pub fn segment(scn: &Scenario, decl: &SegmentDecl) -> Result<(PeriodicSegment, CutoffProfile), BuildError> {
    let period = scn.period;
    let seg = match (decl.kind.as_str(), &scn.system) {
        ("pendulum", SystemDecl::Pendulum(d)) => build_pendulum_segment(time_fn(&d.forcing)?, decl.p, period)?,
        ("box", _) => {
            let bars = decl
                .barriers
                .iter()
                .map(|b| Ok(BarrierPair::new(time_fn(&b.x1)?, time_fn(&b.x2)?)))
                .collect::<Result<Vec<_>, BuildError>>()?;
            build_barrier_segment(bars, decl.p, period)?
        }
        ("rotating_curve", SystemDecl::RotatingCurve(d)) => {
            let b = rotating_curve_barriers(&curve(&d.curve)?, &time_fn(&d.phi)?, period)?;
            build_barrier_segment(vec![b], decl.p, period)?
        }
        ("metric", sys) => {
            let m = match sys {
                SystemDecl::Spherical(d) if d.chart == "polar" => MetricSpec::sphere_polar(),
                SystemDecl::Spherical(_) => MetricSpec::hemisphere(),
                SystemDecl::Geodesic(d) => metric(&d.metric),
                _ => return Err(BuildError::Invalid("metric segment needs a metric system".into())),
            };
            let r = decl.region.as_ref().ok_or_else(|| BuildError::Invalid("metric segment needs a region".into()))?;
            build_metric_segment(m, region(r), decl.p, period)?
        }
        (k, _) => return Err(BuildError::Invalid(format!("segment kind `{k}` does not fit the system"))),
    };
    let band = decl.band.unwrap_or(if decl.kind == "metric" { Band::MetricEnergy } else { Band::Componentwise });
    let profile = CutoffProfile::new(decl.p, decl.eps, decl.mu)?.with_band(band);
    Ok((seg, profile))
}

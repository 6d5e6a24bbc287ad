//! Second-order non-autonomous systems `q'' = a(t, q, q')`, optionally carrying
//! a kinetic-energy metric so that `a = -Γ(q)(q', q') + v(t, q, q')`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type AccelFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type ChartFn = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
pub type ChristoffelFn = Arc<dyn Fn(&[f64], &mut Christoffel) + Send + Sync>;

/// Nagumo-type growth parameters: `|v| <= a + b |q'|^(2 - delta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthBound {
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

impl GrowthBound {
    pub fn bounded(a: f64) -> Self {
        GrowthBound { a, b: 0.0, delta: 2.0 }
    }

    pub fn bound(&self, speed: f64) -> f64 {
        self.a + self.b * speed.powf(2.0 - self.delta)
    }
}

#[derive(Clone)]
pub struct SystemSpec {
    pub name: String,
    pub dim: usize,
    pub period: f64,
    accel: AccelFn,
    forcing: Option<AccelFn>,
    pub metric: Option<MetricSpec>,
    pub growth: Option<GrowthBound>,
    chart: Option<ChartFn>,
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("period", &self.period)
            .field("metric", &self.metric.is_some())
            .field("growth", &self.growth)
            .finish()
    }
}

impl SystemSpec {
    /// Flat-chart system `q'' = accel(t, q, q')`.
    pub fn flat(
        name: impl Into<String>,
        dim: usize,
        period: f64,
        accel: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        SystemSpec {
            name: name.into(),
            dim,
            period,
            accel: Arc::new(accel),
            forcing: None,
            metric: None,
            growth: None,
            chart: None,
        }
    }

    /// `∇_{q'} q' = v(t, q, q')` for the given metric; Christoffel terms come
    /// from the metric's closed form or finite differences.
    pub fn metric(
        name: impl Into<String>,
        metric: MetricSpec,
        period: f64,
        forcing: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        let forcing: AccelFn = Arc::new(forcing);
        let m = metric.clone();
        let v = forcing.clone();
        let dim = metric.dim;
        let accel = move |t: f64, q: &[f64], qd: &[f64], out: &mut [f64]| {
            v(t, q, qd, out);
            let mut g = vec![0.0; dim];
            m.contract(q, qd, &mut g);
            for k in 0..dim {
                out[k] -= g[k];
            }
        };
        SystemSpec {
            name: name.into(),
            dim,
            period,
            accel: Arc::new(accel),
            forcing: Some(forcing),
            metric: Some(metric),
            growth: None,
            chart: None,
        }
    }

    /// Metric system with a hand-written total acceleration (used when the
    /// geodesic part has a cheap closed form).
    pub fn metric_with_accel(
        name: impl Into<String>,
        metric: MetricSpec,
        period: f64,
        accel: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        forcing: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        SystemSpec {
            name: name.into(),
            dim: metric.dim,
            period,
            accel: Arc::new(accel),
            forcing: Some(Arc::new(forcing)),
            metric: Some(metric),
            growth: None,
            chart: None,
        }
    }

    pub fn with_growth(mut self, growth: GrowthBound) -> Self {
        self.growth = Some(growth);
        self
    }

    pub fn with_chart(mut self, chart: impl Fn(&[f64]) -> bool + Send + Sync + 'static) -> Self {
        self.chart = Some(Arc::new(chart));
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn chart(&self) -> Option<&ChartFn> {
        self.chart.as_ref()
    }

    pub fn in_chart(&self, q: &[f64]) -> bool {
        self.chart.as_ref().map_or(true, |c| c(q))
    }

    #[inline]
    pub fn accel_into(&self, t: f64, q: &[f64], qd: &[f64], out: &mut [f64]) {
        (self.accel)(t, q, qd, out)
    }

    pub fn accel(&self, t: f64, q: &[f64], qd: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        (self.accel)(t, q, qd, &mut out);
        out
    }

    /// The non-geodesic part `v`; equals the acceleration for flat systems.
    pub fn forcing(&self, t: f64, q: &[f64], qd: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        match &self.forcing {
            Some(v) => v(t, q, qd, &mut out),
            None => (self.accel)(t, q, qd, &mut out),
        }
        out
    }

    pub fn forcing_fn(&self) -> AccelFn {
        self.forcing.clone().unwrap_or_else(|| self.accel.clone())
    }

    pub fn accel_fn(&self) -> AccelFn {
        self.accel.clone()
    }

    /// First-order flow on `y = [q, q']`.
    #[inline]
    pub fn flow(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let n = self.dim;
        dy[..n].copy_from_slice(&y[n..]);
        let (_, out) = dy.split_at_mut(n);
        (self.accel)(t, &y[..n], &y[n..], out);
    }

    /// Largest deviation `|a(t + T) - a(t)|` over the given sample points.
    pub fn periodicity_defect(&self, points: &[(f64, Vec<f64>, Vec<f64>)]) -> f64 {
        points
            .iter()
            .map(|(t, q, qd)| {
                let a = self.accel(*t, q, qd);
                let b = self.accel(t + self.period, q, qd);
                a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

/// Christoffel symbols `Γ^k_{ij}` stored as `data[k n² + i n + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Christoffel {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Christoffel {
    pub fn zeros(n: usize) -> Self {
        Christoffel { n, data: vec![0.0; n * n * n] }
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.n + i) * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, k: usize, i: usize, j: usize, v: f64) {
        let n = self.n;
        self.data[(k * n + i) * n + j] = v;
    }

    /// `out_k = Γ^k_{ij} u^i u^j`.
    pub fn contract(&self, u: &[f64], out: &mut [f64]) {
        let n = self.n;
        for (k, o) in out.iter_mut().enumerate().take(n) {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += self.get(k, i, j) * u[i] * u[j];
                }
            }
            *o = s;
        }
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.n;
        let mut m = 0.0_f64;
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    m = m.max((self.get(k, i, j) - self.get(k, j, i)).abs());
                }
            }
        }
        m
    }
}

/// Kinetic-energy metric `T = ½ q'ᵀ A(q) q'`.
#[derive(Clone)]
pub struct MetricSpec {
    pub dim: usize,
    a: MatrixFn,
    christoffel: Option<ChristoffelFn>,
    pub fd_step: f64,
}

impl fmt::Debug for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MetricSpec")
            .field("dim", &self.dim)
            .field("closed_form", &self.christoffel.is_some())
            .field("fd_step", &self.fd_step)
            .finish()
    }
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

impl MetricSpec {
    pub fn new(dim: usize, a: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        MetricSpec { dim, a: Arc::new(a), christoffel: None, fd_step: DEFAULT_FD_STEP }
    }

    pub fn with_christoffel(mut self, g: impl Fn(&[f64], &mut Christoffel) + Send + Sync + 'static) -> Self {
        self.christoffel = Some(Arc::new(g));
        self
    }

    /// Same metric with the closed form dropped (forces the finite-difference path).
    pub fn without_christoffel(mut self) -> Self {
        self.christoffel = None;
        self
    }

    pub fn has_closed_form(&self) -> bool {
        self.christoffel.is_some()
    }

    pub fn flat(dim: usize) -> Self {
        MetricSpec::new(dim, move |_| DMatrix::identity(dim, dim)).with_christoffel(|_, g| g.data.fill(0.0))
    }

    /// Round unit sphere in the polar chart `(θ, φ)`, θ measured from the +z axis.
    pub fn sphere_polar() -> Self {
        MetricSpec::new(2, |q| {
            let s = q[0].sin();
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, s * s])
        })
        .with_christoffel(|q, g| {
            let (s, c) = q[0].sin_cos();
            g.data.fill(0.0);
            g.set(0, 1, 1, -s * c);
            g.set(1, 0, 1, c / s);
            g.set(1, 1, 0, c / s);
        })
    }

    /// Upper unit hemisphere in the orthographic chart `q = (x, y)`,
    /// `z = sqrt(1 - |q|²)`: `A = I + q qᵀ / z²`, `Γ^k_{ij} = q_k A_{ij}`.
    pub fn hemisphere() -> Self {
        MetricSpec::new(2, |q| {
            let z2 = 1.0 - q[0] * q[0] - q[1] * q[1];
            DMatrix::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 0.0 } + q[i] * q[j] / z2)
        })
        .with_christoffel(|q, g| {
            let z2 = 1.0 - q[0] * q[0] - q[1] * q[1];
            for k in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        let a = if i == j { 1.0 } else { 0.0 } + q[i] * q[j] / z2;
                        g.set(k, i, j, q[k] * a);
                    }
                }
            }
        })
    }

    /// Torus of revolution with radii `big_r > r`, chart `(u, v)`:
    /// `A = diag((R + r cos v)², r²)`.
    pub fn torus(big_r: f64, r: f64) -> Self {
        MetricSpec::new(2, move |q| {
            let w = big_r + r * q[1].cos();
            DMatrix::from_row_slice(2, 2, &[w * w, 0.0, 0.0, r * r])
        })
    }

    pub fn matrix(&self, q: &[f64]) -> DMatrix<f64> {
        (self.a)(q)
    }

    /// `⟨q', A(q) q'⟩`.
    pub fn norm2(&self, q: &[f64], qd: &[f64]) -> f64 {
        let a = self.matrix(q);
        let mut s = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                s += a[(i, j)] * qd[i] * qd[j];
            }
        }
        s
    }

    pub fn check(&self, q: &[f64]) -> Result<()> {
        let a = self.matrix(q);
        let sym = (&a - a.transpose()).amax();
        if !(sym <= 1e-12) || a.clone().cholesky().is_none() {
            return Err(Error::SingularMetric { q: q.to_vec() });
        }
        Ok(())
    }

    pub fn christoffel(&self, q: &[f64]) -> Result<Christoffel> {
        match &self.christoffel {
            Some(g) => {
                let mut out = Christoffel::zeros(self.dim);
                g(q, &mut out);
                Ok(out)
            }
            None => self.christoffel_fd(q),
        }
    }

    /// Levi-Civita symbols from central differences of `A`:
    /// `Γ^k_{ij} = ½ A^{kl} (∂_i A_{lj} + ∂_j A_{li} - ∂_l A_{ij})`.
    pub fn christoffel_fd(&self, q: &[f64]) -> Result<Christoffel> {
        let n = self.dim;
        let a = self.matrix(q);
        let inv = a.clone().try_inverse().ok_or_else(|| Error::SingularMetric { q: q.to_vec() })?;
        let h = self.fd_step;
        let mut da = Vec::with_capacity(n);
        let mut qp = q.to_vec();
        for l in 0..n {
            qp[l] = q[l] + h;
            let ap = self.matrix(&qp);
            qp[l] = q[l] - h;
            let am = self.matrix(&qp);
            qp[l] = q[l];
            da.push((ap - am) / (2.0 * h));
        }
        let mut g = Christoffel::zeros(n);
        for k in 0..n {
            for i in 0..n {
                for j in i..n {
                    let mut s = 0.0;
                    for l in 0..n {
                        s += inv[(k, l)] * (da[i][(l, j)] + da[j][(l, i)] - da[l][(i, j)]);
                    }
                    g.set(k, i, j, 0.5 * s);
                    g.set(k, j, i, 0.5 * s);
                }
            }
        }
        Ok(g)
    }

    /// `out_k = Γ^k_{ij}(q) q'^i q'^j`; NaN-filled if the metric is singular.
    pub fn contract(&self, q: &[f64], qd: &[f64], out: &mut [f64]) {
        match self.christoffel(q) {
            Ok(g) => g.contract(qd, out),
            Err(_) => out.fill(f64::NAN),
        }
    }
}

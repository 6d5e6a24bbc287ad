//! Scalar functions of time carrying their first two derivatives.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Value of a function of time together with its first and second derivative.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet {
    pub fn constant(value: f64) -> Self {
        Jet { value, d1: 0.0, d2: 0.0 }
    }
}

/// Shared, thread-safe function of time returning a [`Jet`].
#[derive(Clone)]
pub struct TimeFn(Arc<dyn Fn(f64) -> Jet + Send + Sync>);

impl TimeFn {
    pub fn new(f: impl Fn(f64) -> Jet + Send + Sync + 'static) -> Self {
        TimeFn(Arc::new(f))
    }

    pub fn constant(c: f64) -> Self {
        TimeFn::new(move |_| Jet::constant(c))
    }

    #[inline]
    pub fn jet(&self, t: f64) -> Jet {
        (self.0)(t)
    }

    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        (self.0)(t).value
    }

    /// Maximum of `|value|`, `|d1|`, `|d2|` over `n` uniform samples of `[0, period]`.
    pub fn sup_abs(&self, period: f64, n: usize) -> Jet {
        let mut m = Jet::default();
        for i in 0..=n {
            let j = self.jet(period * i as f64 / n as f64);
            m.value = m.value.max(j.value.abs());
            m.d1 = m.d1.max(j.d1.abs());
            m.d2 = m.d2.max(j.d2.abs());
        }
        m
    }
}

impl fmt::Debug for TimeFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TimeFn(..)")
    }
}

impl From<TrigSeries> for TimeFn {
    fn from(s: TrigSeries) -> Self {
        TimeFn::new(move |t| s.jet(t))
    }
}

/// Finite trigonometric series `mean + sum a_k sin(k w t) + b_k cos(k w t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigSeries {
    pub mean: f64,
    pub omega: f64,
    /// `(k, a_k)` pairs for the sine terms.
    pub sin: Vec<(u32, f64)>,
    /// `(k, b_k)` pairs for the cosine terms.
    pub cos: Vec<(u32, f64)>,
}

impl TrigSeries {
    pub fn constant(mean: f64) -> Self {
        TrigSeries { mean, omega: 1.0, sin: vec![], cos: vec![] }
    }

    pub fn sine(amp: f64, omega: f64) -> Self {
        TrigSeries { mean: 0.0, omega, sin: vec![(1, amp)], cos: vec![] }
    }

    pub fn cosine(mean: f64, amp: f64, omega: f64) -> Self {
        TrigSeries { mean, omega, sin: vec![], cos: vec![(1, amp)] }
    }

    /// Smallest period of the base frequency.
    pub fn base_period(&self) -> f64 {
        TAU / self.omega
    }

    pub fn jet(&self, t: f64) -> Jet {
        let mut j = Jet::constant(self.mean);
        for &(k, a) in &self.sin {
            let w = k as f64 * self.omega;
            let (s, c) = (w * t).sin_cos();
            j.value += a * s;
            j.d1 += a * w * c;
            j.d2 -= a * w * w * s;
        }
        for &(k, b) in &self.cos {
            let w = k as f64 * self.omega;
            let (s, c) = (w * t).sin_cos();
            j.value += b * c;
            j.d1 -= b * w * s;
            j.d2 -= b * w * w * c;
        }
        j
    }

    pub fn value(&self, t: f64) -> f64 {
        self.jet(t).value
    }

    /// Upper bound on `|value|` from the coefficients.
    pub fn abs_bound(&self) -> f64 {
        self.mean.abs()
            + self.sin.iter().map(|(_, a)| a.abs()).sum::<f64>()
            + self.cos.iter().map(|(_, b)| b.abs()).sum::<f64>()
    }

    pub fn is_zero(&self) -> bool {
        self.mean == 0.0
            && self.sin.iter().all(|(_, a)| *a == 0.0)
            && self.cos.iter().all(|(_, b)| *b == 0.0)
    }
}

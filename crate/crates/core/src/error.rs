use thiserror::Error;

/// Errors raised by the numerical pipelines.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("trajectory left the coordinate chart at t = {t}")]
    ChartSingularity { t: f64 },
    #[error("trajectory left the chart during geodesic tracking (lambda = {lambda}, t = {t})")]
    ChartExit { lambda: f64, t: f64 },
    #[error("integration exceeded {0} steps")]
    TooManySteps(usize),

    #[error("forcing has no declared bound")]
    UnboundedForce,
    #[error("metric is not positive definite at q = {q:?}")]
    SingularMetric { q: Vec<f64> },
    #[error("rotated tangent condition has {roots} roots at t = {t} (expected 2)")]
    Discontinuity { t: f64, roots: usize },

    #[error("speed bound p = {p} does not exceed the maximal barrier slope {slope}")]
    SpeedBoundTooSmall { p: f64, slope: f64 },
    #[error("unresolved tangency on face `{face}` at t = {t} (first-order {rate1:e}, second-order {rate2:e})")]
    UnresolvedTangency { face: String, t: f64, rate1: f64, rate2: f64 },
    #[error("segment faces are not classified: {0:?}")]
    UnclassifiedFaces(Vec<String>),
    #[error("segment monodromy is not the identity")]
    NonProductSegment,

    #[error("Newton shooting did not converge after {iters} iterations (residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64, iterate: Vec<f64> },
    #[error("singular shooting Jacobian, det(I - DP) = {det:e}")]
    SingularJacobian { det: f64, iterate: Vec<f64> },

    #[error("P(s) - s vanishes on the contour near {point:?}")]
    ZeroOnContour { point: [f64; 2] },
    #[error("winding angle increments could not be resolved near {point:?}")]
    RefinementLimit { point: [f64; 2] },
    #[error("winding index is only defined for one degree of freedom (dim = {0})")]
    NotPlanar(usize),

    #[error("no speed in the schedule passed the escape experiment")]
    ScheduleExhausted,
    #[error("sampled geodesic from {q:?} did not escape before t = {cap}")]
    NoEscape { q: Vec<f64>, qd: Vec<f64>, cap: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;

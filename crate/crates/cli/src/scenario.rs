//! Scenario files: TOML documents with a versioned, strict schema.
//!
//! Parsing happens in three passes. The first reads only the gallery name,
//! the second deserializes the whole document against the schema of that
//! gallery (unknown keys are errors, with line and column), the third checks
//! semantic constraints and collects every violation.

use std::fmt;
use std::path::{Path, PathBuf};

use forced_osc::cutoff::Band;
use forced_osc::orbit::ContradictionPolicy;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::expr::{self, Expr};

pub const SCHEMA_VERSION: u32 = 1;

pub const GALLERY: [(&str, &str); 7] = [
    ("pendulum", "planar pendulum q'' = f(t) sin q - cos q on the circle"),
    ("curve_pendulum", "bead on a fixed convex curve under gravity and a horizontal force f(t)"),
    ("rotating_curve", "bead on a convex curve rotating by the angle phi(t)"),
    ("morse_chain", "n particles between fixed anchors with Morse nearest-neighbour forces and a field F(t, x)"),
    ("spherical_pendulum", "unit spherical pendulum with a horizontal force (fx, fy)"),
    ("custom_flat", "flat system q'' = accel(t, q, q') given by expressions"),
    ("geodesic", "free motion on a metric (flat, sphere_polar, hemisphere, torus)"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    VerifySegment,
    SelectP,
    FindOrbits,
    Index,
    LemmaDemo,
    EscapeBound,
    BarrierSigns,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::VerifySegment,
        Stage::SelectP,
        Stage::FindOrbits,
        Stage::Index,
        Stage::LemmaDemo,
        Stage::EscapeBound,
        Stage::BarrierSigns,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::VerifySegment => "verify-segment",
            Stage::SelectP => "select-p",
            Stage::FindOrbits => "find-orbits",
            Stage::Index => "index",
            Stage::LemmaDemo => "lemma-demo",
            Stage::EscapeBound => "escape-bound",
            Stage::BarrierSigns => "barrier-signs",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
pub enum ScenarioError {
    Io { path: PathBuf, message: String },
    Parse { line: usize, column: usize, message: String },
    Validation(Vec<String>),
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Io { path, message } => write!(f, "cannot read {}: {message}", path.display()),
            ScenarioError::Parse { line, column, message } => {
                write!(f, "ParseError at line {line}, column {column}: {message}")
            }
            ScenarioError::Validation(v) => {
                write!(f, "ValidationError ({} violation{}):", v.len(), if v.len() == 1 { "" } else { "s" })?;
                for m in v {
                    write!(f, "\n  - {m}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ScenarioError {}

/// A number or a closed expression such as `"2*pi"`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Number {
    Value(f64),
    Expr(String),
}

impl Number {
    pub fn resolve(&self) -> Result<f64, String> {
        match self {
            Number::Value(v) => Ok(*v),
            Number::Expr(s) => expr::constant(s).map_err(|e| format!("`{s}`: {e}")),
        }
    }
}

fn two_pi() -> Number {
    Number::Value(std::f64::consts::TAU)
}

/// Finite trigonometric series in a table.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesDecl {
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "one")]
    pub omega: f64,
    #[serde(default)]
    pub sin: Vec<(u32, f64)>,
    #[serde(default)]
    pub cos: Vec<(u32, f64)>,
}

fn one() -> f64 {
    1.0
}

/// A function of time: constant, expression in `t`, or trigonometric series.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum TimeSpec {
    Value(f64),
    Expr(String),
    Series(SeriesDecl),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CurveDecl {
    Circle {
        radius: f64,
        #[serde(default)]
        center: [f64; 2],
    },
    Ellipse {
        a: f64,
        b: f64,
        #[serde(default)]
        center: [f64; 2],
    },
    /// `x(u)`, `y(u)` expressions in `u`.
    Parametric {
        x: String,
        y: String,
        u0: Number,
        u1: Number,
        #[serde(default = "yes")]
        closed: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricDecl {
    Flat { dim: usize },
    SpherePolar,
    Hemisphere,
    Torus { big_r: f64, r: f64 },
}

impl MetricDecl {
    pub fn dim(&self) -> usize {
        match self {
            MetricDecl::Flat { dim } => *dim,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionDecl {
    Ball { center: Vec<f64>, radius: f64 },
    SphereCap { eps: f64 },
    Slab { dim: usize, coord: usize, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthDecl {
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumDecl {
    pub gallery: String,
    #[serde(default = "two_pi")]
    pub period: Number,
    pub forcing: TimeSpec,
    pub forcing_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvePendulumDecl {
    pub gallery: String,
    #[serde(default = "two_pi")]
    pub period: Number,
    pub curve: CurveDecl,
    pub forcing: TimeSpec,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotatingCurveDecl {
    pub gallery: String,
    #[serde(default = "two_pi")]
    pub period: Number,
    pub curve: CurveDecl,
    pub phi: TimeSpec,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorseChainDecl {
    pub gallery: String,
    #[serde(default = "two_pi")]
    pub period: Number,
    pub n: usize,
    /// Expression in `t` and `x`.
    pub field: String,
    pub field_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphericalDecl {
    pub gallery: String,
    #[serde(default = "two_pi")]
    pub period: Number,
    /// Expressions in `t, x, y, z, vx, vy, vz`.
    pub fx: String,
    pub fy: String,
    pub force_bound: f64,
    #[serde(default = "hemisphere")]
    pub chart: String,
}

fn hemisphere() -> String {
    "upper_hemisphere".into()
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomFlatDecl {
    pub gallery: String,
    #[serde(default = "two_pi")]
    pub period: Number,
    pub dim: usize,
    /// One expression per coordinate in `t, q1..qn, qd1..qdn` (and `q, qd` when `dim = 1`).
    pub accel: Vec<String>,
    pub growth: Option<GrowthDecl>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeodesicDecl {
    pub gallery: String,
    #[serde(default = "two_pi")]
    pub period: Number,
    pub metric: MetricDecl,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SystemDecl {
    Pendulum(PendulumDecl),
    CurvePendulum(CurvePendulumDecl),
    RotatingCurve(RotatingCurveDecl),
    MorseChain(MorseChainDecl),
    Spherical(SphericalDecl),
    CustomFlat(CustomFlatDecl),
    Geodesic(GeodesicDecl),
}

impl SystemDecl {
    pub fn gallery(&self) -> &'static str {
        match self {
            SystemDecl::Pendulum(_) => "pendulum",
            SystemDecl::CurvePendulum(_) => "curve_pendulum",
            SystemDecl::RotatingCurve(_) => "rotating_curve",
            SystemDecl::MorseChain(_) => "morse_chain",
            SystemDecl::Spherical(_) => "spherical_pendulum",
            SystemDecl::CustomFlat(_) => "custom_flat",
            SystemDecl::Geodesic(_) => "geodesic",
        }
    }

    pub fn period(&self) -> &Number {
        match self {
            SystemDecl::Pendulum(d) => &d.period,
            SystemDecl::CurvePendulum(d) => &d.period,
            SystemDecl::RotatingCurve(d) => &d.period,
            SystemDecl::MorseChain(d) => &d.period,
            SystemDecl::Spherical(d) => &d.period,
            SystemDecl::CustomFlat(d) => &d.period,
            SystemDecl::Geodesic(d) => &d.period,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SystemDecl::Pendulum(_) | SystemDecl::CurvePendulum(_) | SystemDecl::RotatingCurve(_) => 1,
            SystemDecl::MorseChain(d) => d.n,
            SystemDecl::Spherical(_) => 2,
            SystemDecl::CustomFlat(d) => d.dim,
            SystemDecl::Geodesic(d) => d.metric.dim(),
        }
    }

    pub fn has_metric(&self) -> bool {
        matches!(self, SystemDecl::Spherical(_) | SystemDecl::Geodesic(_))
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierDecl {
    pub x1: TimeSpec,
    pub x2: TimeSpec,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentDecl {
    /// `pendulum`, `box`, `rotating_curve` or `metric`.
    pub kind: String,
    pub p: f64,
    #[serde(default = "one")]
    pub eps: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    pub band: Option<Band>,
    #[serde(default)]
    pub barriers: Vec<BarrierDecl>,
    pub region: Option<RegionDecl>,
}

fn default_mu() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyCfg {
    pub n_samples: usize,
    pub n_times: usize,
    pub growth_samples: usize,
    pub switch_grid: usize,
}

impl Default for VerifyCfg {
    fn default() -> Self {
        VerifyCfg { n_samples: 200, n_times: 8, growth_samples: 2000, switch_grid: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MonodromyDecl {
    Variational,
    Forward,
    Central,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchCfg {
    pub grid: Vec<usize>,
    pub search_speed: Option<f64>,
    pub segments: usize,
    pub tol_residual: f64,
    pub max_iters: usize,
    pub fd_step: f64,
    pub central: bool,
    pub integrator_tol: f64,
    pub monodromy: MonodromyDecl,
    pub confinement_checks: usize,
    pub dedup_radius: f64,
    pub domain_slack: f64,
    pub contradiction: ContradictionPolicy,
    pub min_orbits: usize,
    pub reintegrate_tol: f64,
    pub max_mismatch: f64,
}

impl Default for SearchCfg {
    fn default() -> Self {
        SearchCfg {
            grid: vec![10],
            search_speed: None,
            segments: 1,
            tol_residual: 1e-9,
            max_iters: 50,
            fd_step: 1e-7,
            central: false,
            integrator_tol: 1e-11,
            monodromy: MonodromyDecl::Variational,
            confinement_checks: 2000,
            dedup_radius: 1e-6,
            domain_slack: 0.25,
            contradiction: ContradictionPolicy::Enforce,
            min_orbits: 1,
            reintegrate_tol: 1e-12,
            max_mismatch: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexCfg {
    pub winding: bool,
    pub collar_delta: f64,
    pub contour_speed: Option<f64>,
    pub n_points: usize,
    pub expected: Option<i64>,
    pub integrator_tol: f64,
}

impl Default for IndexCfg {
    fn default() -> Self {
        IndexCfg { winding: true, collar_delta: 0.05, contour_speed: None, n_points: 64, expected: None, integrator_tol: 1e-11 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectCfg {
    pub schedule: Vec<f64>,
    pub t_max: f64,
    pub n_samples: usize,
    pub n_times: usize,
    pub widen: f64,
    pub integrator_tol: f64,
}

impl Default for SelectCfg {
    fn default() -> Self {
        SelectCfg { schedule: vec![], t_max: 1.0, n_samples: 200, n_times: 8, widen: 1.0, integrator_tol: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaCfg {
    pub metric: MetricDecl,
    /// Field `v(t, q, q')`, one expression per coordinate in `t, q1..qn, qd1..qdn`.
    pub field: Vec<String>,
    pub q0: Vec<f64>,
    pub qd0: Vec<f64>,
    pub t_geo: f64,
    pub lambdas: Vec<f64>,
    #[serde(default = "lemma_tol")]
    pub integrator_tol: f64,
    #[serde(default = "closed_form_tol")]
    pub closed_form_tol: f64,
}

fn lemma_tol() -> f64 {
    1e-12
}

fn closed_form_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EscapeBoundCfg {
    pub metric: Option<MetricDecl>,
    pub region: Option<RegionDecl>,
    pub delta: f64,
    #[serde(default = "n_points")]
    pub n_points: usize,
    #[serde(default = "n_directions")]
    pub n_directions: usize,
    #[serde(default = "cap")]
    pub cap: f64,
    pub bound: Option<Number>,
    #[serde(default = "escape_tol")]
    pub integrator_tol: f64,
}

fn n_points() -> usize {
    64
}
fn n_directions() -> usize {
    32
}
fn cap() -> f64 {
    50.0
}
fn escape_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct BarrierSignsCfg {
    pub n_times: usize,
}

impl Default for BarrierSignsCfg {
    fn default() -> Self {
        BarrierSignsCfg { n_times: 256 }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc<S> {
    schema_version: u32,
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    seed: u64,
    output_dir: Option<String>,
    pipeline: Vec<String>,
    system: S,
    segment: Option<SegmentDecl>,
    #[serde(default)]
    verify: VerifyCfg,
    #[serde(default)]
    search: SearchCfg,
    #[serde(default)]
    index: IndexCfg,
    #[serde(default)]
    select: SelectCfg,
    lemma: Option<LemmaCfg>,
    escape_bound: Option<EscapeBoundCfg>,
    #[serde(default)]
    barrier_signs: BarrierSignsCfg,
}

#[derive(Deserialize)]
struct Probe {
    system: Option<ProbeSystem>,
}

#[derive(Deserialize)]
struct ProbeSystem {
    gallery: Option<String>,
}

/// A parsed and validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub pipeline: Vec<Stage>,
    pub system: SystemDecl,
    pub period: f64,
    pub segment: Option<SegmentDecl>,
    pub verify: VerifyCfg,
    pub search: SearchCfg,
    pub index: IndexCfg,
    pub select: SelectCfg,
    pub lemma: Option<LemmaCfg>,
    pub escape_bound: Option<EscapeBoundCfg>,
    pub barrier_signs: BarrierSignsCfg,
    pub source: Option<PathBuf>,
}

pub fn parse_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::Io { path: path.to_path_buf(), message: e.to_string() })?;
    let mut scn = parse_str(&text)?;
    // relative output directories are resolved against the scenario file
    if let (Some(dir), Some(parent)) = (&scn.output_dir, path.parent()) {
        if dir.is_relative() {
            scn.output_dir = Some(parent.join(dir));
        }
    }
    scn.source = Some(path.to_path_buf());
    Ok(scn)
}

pub fn parse_str(text: &str) -> Result<Scenario, ScenarioError> {
    let probe: Probe = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
    let gallery = match probe.system.and_then(|s| s.gallery) {
        Some(g) => g,
        None => return Err(ScenarioError::Validation(vec!["[system] needs a `gallery` key".into()])),
    };
    let names: Vec<&str> = GALLERY.iter().map(|g| g.0).collect();
    let system = match gallery.as_str() {
        "pendulum" => typed(text, SystemDecl::Pendulum)?,
        "curve_pendulum" => typed(text, SystemDecl::CurvePendulum)?,
        "rotating_curve" => typed(text, SystemDecl::RotatingCurve)?,
        "morse_chain" => typed(text, SystemDecl::MorseChain)?,
        "spherical_pendulum" => typed(text, SystemDecl::Spherical)?,
        "custom_flat" => typed(text, SystemDecl::CustomFlat)?,
        "geodesic" => typed(text, SystemDecl::Geodesic)?,
        other => {
            return Err(ScenarioError::Validation(vec![format!(
                "unknown system `{other}`; the gallery has: {}",
                names.join(", ")
            )]))
        }
    };
    validate(system)
}

fn typed<S: DeserializeOwned>(text: &str, wrap: fn(S) -> SystemDecl) -> Result<Doc<SystemDecl>, ScenarioError> {
    let doc: Doc<S> = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
    Ok(Doc {
        schema_version: doc.schema_version,
        name: doc.name,
        description: doc.description,
        seed: doc.seed,
        output_dir: doc.output_dir,
        pipeline: doc.pipeline,
        system: wrap(doc.system),
        segment: doc.segment,
        verify: doc.verify,
        search: doc.search,
        index: doc.index,
        select: doc.select,
        lemma: doc.lemma,
        escape_bound: doc.escape_bound,
        barrier_signs: doc.barrier_signs,
    })
}

fn parse_error(text: &str, e: &toml::de::Error) -> ScenarioError {
    let (line, column) = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            (line, column)
        }
        None => (0, 0),
    };
    ScenarioError::Parse { line, column, message: e.message().trim().to_string() }
}

fn check_time(v: &mut Vec<String>, what: &str, spec: &TimeSpec) {
    if let TimeSpec::Expr(s) = spec {
        if let Err(e) = Expr::parse(s, &["t"]) {
            v.push(format!("{what}: `{s}`: {e}"));
        }
    }
}

fn check_expr(v: &mut Vec<String>, what: &str, src: &str, vars: &[&str]) {
    if let Err(e) = Expr::parse(src, vars) {
        v.push(format!("{what}: `{src}`: {e}"));
    }
}

pub(crate) fn flat_var_names(n: usize) -> Vec<String> {
    let mut names = vec!["t".to_string()];
    names.extend((1..=n).map(|i| format!("q{i}")));
    names.extend((1..=n).map(|i| format!("qd{i}")));
    if n == 1 {
        names.push("q".into());
        names.push("qd".into());
    }
    names
}

fn check_curve(v: &mut Vec<String>, c: &CurveDecl) {
    match c {
        CurveDecl::Circle { radius, .. } => {
            if !(*radius > 0.0) {
                v.push("[system.curve] circle radius must be positive".into());
            }
        }
        CurveDecl::Ellipse { a, b, .. } => {
            if !(*a > 0.0 && *b > 0.0) {
                v.push("[system.curve] ellipse semi-axes must be positive".into());
            }
        }
        CurveDecl::Parametric { x, y, u0, u1, .. } => {
            check_expr(v, "[system.curve] x", x, &["u"]);
            check_expr(v, "[system.curve] y", y, &["u"]);
            for (k, n) in [("u0", u0), ("u1", u1)] {
                if let Err(e) = n.resolve() {
                    v.push(format!("[system.curve] {k}: {e}"));
                }
            }
        }
    }
}

fn check_metric(v: &mut Vec<String>, what: &str, m: &MetricDecl) {
    match m {
        MetricDecl::Flat { dim } if *dim == 0 => v.push(format!("{what}: flat metric needs dim >= 1")),
        MetricDecl::Torus { big_r, r } if !(*big_r > *r && *r > 0.0) => {
            v.push(format!("{what}: torus needs big_r > r > 0"))
        }
        _ => {}
    }
}

fn check_region(v: &mut Vec<String>, what: &str, r: &RegionDecl, dim: usize) {
    let rdim = match r {
        RegionDecl::Ball { center, radius } => {
            if !(*radius > 0.0) {
                v.push(format!("{what}: ball radius must be positive"));
            }
            center.len()
        }
        RegionDecl::SphereCap { eps } => {
            if !(*eps > -1.0 && *eps < 1.0) {
                v.push(format!("{what}: sphere cap needs -1 < eps < 1"));
            }
            2
        }
        RegionDecl::Slab { dim, coord, lo, hi } => {
            if coord >= dim {
                v.push(format!("{what}: slab coord {coord} out of range for dim {dim}"));
            }
            if !(lo < hi) {
                v.push(format!("{what}: slab needs lo < hi"));
            }
            *dim
        }
    };
    if rdim != dim {
        v.push(format!("{what}: region has dimension {rdim}, expected {dim}"));
    }
}

fn validate(doc: Doc<SystemDecl>) -> Result<Scenario, ScenarioError> {
    let mut v: Vec<String> = vec![];
    if doc.schema_version != SCHEMA_VERSION {
        v.push(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", doc.schema_version));
    }
    if doc.name.trim().is_empty() {
        v.push("`name` must not be empty".into());
    }
    let mut pipeline = vec![];
    for s in &doc.pipeline {
        match Stage::from_name(s) {
            Some(st) => pipeline.push(st),
            None => v.push(format!(
                "unknown pipeline stage `{s}`; allowed: {}",
                Stage::ALL.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ")
            )),
        }
    }
    if doc.pipeline.is_empty() {
        v.push("`pipeline` must list at least one stage".into());
    }

    let sys = &doc.system;
    let period = match sys.period().resolve() {
        Ok(p) if p > 0.0 && p.is_finite() => p,
        Ok(p) => {
            v.push(format!("[system] period must be positive and finite (got {p})"));
            1.0
        }
        Err(e) => {
            v.push(format!("[system] period: {e}"));
            1.0
        }
    };
    let dim = sys.dim();
    match sys {
        SystemDecl::Pendulum(d) => {
            check_time(&mut v, "[system] forcing", &d.forcing);
            if let Some(b) = d.forcing_bound {
                if !(b >= 0.0) {
                    v.push("[system] forcing_bound must be non-negative".into());
                }
            }
        }
        SystemDecl::CurvePendulum(d) => {
            check_curve(&mut v, &d.curve);
            check_time(&mut v, "[system] forcing", &d.forcing);
        }
        SystemDecl::RotatingCurve(d) => {
            check_curve(&mut v, &d.curve);
            check_time(&mut v, "[system] phi", &d.phi);
        }
        SystemDecl::MorseChain(d) => {
            if d.n == 0 {
                v.push("[system] morse chain needs n >= 1".into());
            }
            check_expr(&mut v, "[system] field", &d.field, &["t", "x"]);
            if !(d.field_bound >= 0.0) {
                v.push("[system] field_bound must be non-negative".into());
            }
        }
        SystemDecl::Spherical(d) => {
            let vars = ["t", "x", "y", "z", "vx", "vy", "vz"];
            check_expr(&mut v, "[system] fx", &d.fx, &vars);
            check_expr(&mut v, "[system] fy", &d.fy, &vars);
            if !(d.force_bound >= 0.0) {
                v.push("[system] force_bound must be non-negative".into());
            }
            if d.chart != "upper_hemisphere" && d.chart != "polar" {
                v.push(format!("[system] chart `{}` unknown; use upper_hemisphere or polar", d.chart));
            }
        }
        SystemDecl::CustomFlat(d) => {
            if d.dim == 0 {
                v.push("[system] custom_flat needs dim >= 1".into());
            }
            if d.accel.len() != d.dim {
                v.push(format!("[system] accel has {} expressions, expected dim = {}", d.accel.len(), d.dim));
            }
            let names = flat_var_names(d.dim);
            let vars: Vec<&str> = names.iter().map(String::as_str).collect();
            for (i, a) in d.accel.iter().enumerate() {
                check_expr(&mut v, &format!("[system] accel[{i}]"), a, &vars);
            }
        }
        SystemDecl::Geodesic(d) => check_metric(&mut v, "[system] metric", &d.metric),
    }

    if let Some(seg) = &doc.segment {
        if !(seg.p > 0.0) {
            v.push("[segment] p must be positive".into());
        }
        if !(seg.p > seg.eps && seg.eps > 0.0 && seg.mu > 0.0) {
            v.push(format!("[segment] cutoff needs p > eps > 0 and mu > 0 (p = {}, eps = {}, mu = {})", seg.p, seg.eps, seg.mu));
        }
        match seg.kind.as_str() {
            "pendulum" => {
                if !matches!(sys, SystemDecl::Pendulum(_)) {
                    v.push("[segment] kind `pendulum` needs the pendulum system".into());
                }
            }
            "box" => {
                if sys.has_metric() {
                    v.push("[segment] kind `box` needs a flat system".into());
                }
                if seg.barriers.len() != dim {
                    v.push(format!("[segment] {} barrier pairs given, the system has dimension {dim}", seg.barriers.len()));
                }
                for (j, b) in seg.barriers.iter().enumerate() {
                    check_time(&mut v, &format!("[segment] barriers[{j}].x1"), &b.x1);
                    check_time(&mut v, &format!("[segment] barriers[{j}].x2"), &b.x2);
                    check_barrier_order(&mut v, j, b, period);
                }
            }
            "rotating_curve" => {
                if !matches!(sys, SystemDecl::RotatingCurve(_)) {
                    v.push("[segment] kind `rotating_curve` needs the rotating_curve system".into());
                }
            }
            "metric" => {
                if !sys.has_metric() {
                    v.push("[segment] kind `metric` needs a system with a metric".into());
                }
                match &seg.region {
                    Some(r) => check_region(&mut v, "[segment.region]", r, dim),
                    None => v.push("[segment] kind `metric` needs a region".into()),
                }
            }
            other => v.push(format!("[segment] unknown kind `{other}`; allowed: pendulum, box, rotating_curve, metric")),
        }
        if seg.kind != "box" && !seg.barriers.is_empty() {
            v.push("[segment] barriers are only used by kind `box`".into());
        }
        if seg.kind != "metric" && seg.region.is_some() {
            v.push("[segment] region is only used by kind `metric`".into());
        }
        if seg.band == Some(Band::MetricEnergy) && !sys.has_metric() {
            v.push("[segment] band `metric_energy` needs a metric system".into());
        }
    }

    for st in &pipeline {
        match st {
            Stage::VerifySegment | Stage::FindOrbits | Stage::Index | Stage::SelectP => {
                if doc.segment.is_none() {
                    v.push(format!("stage `{st}` requires a [segment] section"));
                }
            }
            Stage::LemmaDemo => {
                if doc.lemma.is_none() {
                    v.push("stage `lemma-demo` requires a [lemma] section".into());
                }
            }
            Stage::EscapeBound => match &doc.escape_bound {
                None => v.push("stage `escape-bound` requires an [escape_bound] section".into()),
                Some(eb) => {
                    if eb.metric.is_none() && !sys.has_metric() {
                        v.push("stage `escape-bound` needs [escape_bound].metric or a metric system".into());
                    }
                    let seg_region = doc.segment.as_ref().and_then(|s| s.region.as_ref());
                    if eb.region.is_none() && seg_region.is_none() {
                        v.push("stage `escape-bound` needs [escape_bound].region or a segment region".into());
                    }
                }
            },
            Stage::BarrierSigns => {
                if !matches!(sys, SystemDecl::MorseChain(_)) {
                    v.push("stage `barrier-signs` applies to the morse_chain system".into());
                }
                if doc.segment.as_ref().map(|s| s.kind.as_str()) != Some("box") {
                    v.push("stage `barrier-signs` requires a `box` segment".into());
                }
            }
        }
    }
    if pipeline.contains(&Stage::SelectP) {
        let s = &doc.select.schedule;
        if s.is_empty() {
            v.push("[select] schedule must not be empty".into());
        }
        if s.windows(2).any(|w| !(w[0] < w[1])) {
            v.push("[select] schedule must be strictly increasing".into());
        }
    }
    if doc.search.grid.is_empty() || doc.search.grid.iter().any(|&g| g == 0) {
        v.push("[search] grid entries must be positive".into());
    }
    if !(doc.search.grid.len() == 1 || doc.search.grid.len() == 2 * dim) {
        v.push(format!("[search] grid needs 1 or {} entries", 2 * dim));
    }
    if doc.search.segments == 0 {
        v.push("[search] segments must be at least 1".into());
    }
    if let Some(l) = &doc.lemma {
        check_metric(&mut v, "[lemma] metric", &l.metric);
        let n = l.metric.dim();
        if l.field.len() != n || l.q0.len() != n || l.qd0.len() != n {
            v.push(format!("[lemma] field, q0 and qd0 need {n} entries each"));
        }
        let names = flat_var_names(n);
        let vars: Vec<&str> = names.iter().map(String::as_str).collect();
        for (i, f) in l.field.iter().enumerate() {
            check_expr(&mut v, &format!("[lemma] field[{i}]"), f, &vars);
        }
        if !(l.t_geo > 0.0) {
            v.push("[lemma] t_geo must be positive".into());
        }
        if l.lambdas.is_empty() || l.lambdas.iter().any(|x| !(*x > 0.0)) {
            v.push("[lemma] lambdas must be a non-empty list of positive numbers".into());
        }
    }
    if let Some(eb) = &doc.escape_bound {
        if !(eb.delta > 0.0) {
            v.push("[escape_bound] delta must be positive".into());
        }
        if let Some(m) = &eb.metric {
            check_metric(&mut v, "[escape_bound] metric", m);
        }
        let mdim = eb.metric.as_ref().map(|m| m.dim()).unwrap_or(dim);
        if let Some(r) = &eb.region {
            check_region(&mut v, "[escape_bound.region]", r, mdim);
        }
        if let Some(b) = &eb.bound {
            if let Err(e) = b.resolve() {
                v.push(format!("[escape_bound] bound: {e}"));
            }
        }
    }

    if !v.is_empty() {
        return Err(ScenarioError::Validation(v));
    }
    Ok(Scenario {
        name: doc.name,
        description: doc.description,
        seed: doc.seed,
        output_dir: doc.output_dir.map(PathBuf::from),
        pipeline,
        system: doc.system,
        period,
        segment: doc.segment,
        verify: doc.verify,
        search: doc.search,
        index: doc.index,
        select: doc.select,
        lemma: doc.lemma,
        escape_bound: doc.escape_bound,
        barrier_signs: doc.barrier_signs,
        source: None,
    })
}

fn check_barrier_order(v: &mut Vec<String>, j: usize, b: &BarrierDecl, period: f64) {
    let (Ok(x1), Ok(x2)) = (crate::build::time_fn(&b.x1), crate::build::time_fn(&b.x2)) else {
        return;
    };
    for i in 0..=256 {
        let t = period * i as f64 / 256.0;
        let (a, c) = (x1.value(t), x2.value(t));
        if !(a < c) {
            v.push(format!(
                "[segment] barriers[{j}]: barrier ordering condition x1(t) < x2(t) fails at t = {t} (x1 = {a}, x2 = {c})"
            ));
            return;
        }
    }
}

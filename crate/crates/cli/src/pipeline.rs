//! Stage execution, artifacts and exit codes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use forced_osc::cutoff::{
    escape_time_bound, geodesic_tracking, modified_system, p_table, upward_closed, CutoffProfile, EscapeBoundConfig,
    EscapeConfig, PRow,
};
use forced_osc::gallery::{growth_check, switch_point_table, GrowthGrid};
use forced_osc::ode::{final_state, IntegratorConfig, State};
use forced_osc::orbit::{
    check_contradiction, collar_contour, floquet_multipliers, multistart_search, staying_winding, verify_confinement,
    winding_index, Monodromy, MultistartConfig, MultistartReport, ShootConfig, Verdict,
};
use forced_osc::segment::{
    check_exit_faces, euler_characteristics, CapConvention, FaceCheck, IndexReport, PeriodicSegment, SegmentKind,
    SegmentReport, STRICT_TOL,
};
use forced_osc::system::SystemSpec;
use serde_json::{json, Value};

use crate::build::{self, BuildError, FlatExprs};
use crate::expr::Expr;
use crate::scenario::{MetricDecl, MonodromyDecl, Scenario, Stage, SystemDecl};

pub const EXIT_OK: i32 = 0;
pub const EXIT_STAGE_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_CONTRADICTION: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Overrides the shooting residual tolerance.
    pub tol: Option<f64>,
    pub jobs: Option<usize>,
    /// Warnings count as failures.
    pub strict: bool,
    /// Runs these stages instead of the scenario pipeline.
    pub stages: Option<Vec<Stage>>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub exit_code: i32,
    pub out_dir: PathBuf,
    pub report: Value,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("cannot write {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

struct StageResult {
    passed: bool,
    result: Value,
    warnings: Vec<String>,
}

type StageRun = Result<StageResult, String>;

struct Ctx<'a> {
    scn: &'a Scenario,
    opts: &'a RunOptions,
    seed: u64,
    out: PathBuf,
    files: Vec<String>,
    system: SystemSpec,
    segment: Option<(PeriodicSegment, CutoffProfile)>,
    faces: Option<SegmentReport>,
    verified: Option<bool>,
    search: Option<MultistartReport>,
    index: Option<IndexReport>,
    manifest: BTreeMap<String, String>,
}

/// Output directory: `--out`, then the scenario's `output_dir`, then `out/<name>`.
pub fn output_dir(scn: &Scenario, opts: &RunOptions) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| scn.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&scn.name))
}

pub fn run(scn: &Scenario, opts: &RunOptions) -> Result<Outcome, RunError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = opts.jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| RunError::Pool(e.to_string()))?;
    pool.install(|| run_inner(scn, opts))
}

fn run_inner(scn: &Scenario, opts: &RunOptions) -> Result<Outcome, RunError> {
    let out = output_dir(scn, opts);
    std::fs::create_dir_all(&out).map_err(|e| RunError::Io { path: out.clone(), message: e.to_string() })?;
    let stages = opts.stages.clone().unwrap_or_else(|| scn.pipeline.clone());
    let seed = opts.seed.unwrap_or(scn.seed);

    let mut manifest = BTreeMap::new();
    manifest.insert("strict_sign_tolerance".into(), fmt(STRICT_TOL));

    let mut report = json!({
        "scenario": scn.name,
        "gallery": scn.system.gallery(),
        "period": scn.period,
        "seed": seed,
        "pipeline": stages.iter().map(|s| s.name()).collect::<Vec<_>>(),
    });

    let setup = (|| -> Result<(SystemSpec, Option<(PeriodicSegment, CutoffProfile)>), String> {
        let missing: Vec<String> = stages.iter().filter_map(|s| missing_prerequisite(scn, *s)).collect();
        if !missing.is_empty() {
            return Err(missing.join("; "));
        }
        let system = build::system(scn).map_err(|e| e.to_string())?;
        let segment = match &scn.segment {
            Some(decl) if stages.iter().any(|s| needs_segment(*s)) => {
                Some(build::segment(scn, decl).map_err(|e: BuildError| e.to_string())?)
            }
            _ => None,
        };
        Ok((system, segment))
    })();
    let (system, segment) = match setup {
        Ok(v) => v,
        Err(msg) => {
            report["stages"] = json!([]);
            report["failures"] = json!([{ "stage": "setup", "kind": "validation", "message": msg }]);
            report["passed"] = json!(false);
            report["exit_code"] = json!(EXIT_INVALID);
            let mut ctx_files = vec![];
            write_report(&out, &report, &mut ctx_files)?;
            write_manifest(&out, scn, opts, seed, &stages, &manifest, &mut ctx_files)?;
            return Ok(Outcome { exit_code: EXIT_INVALID, out_dir: out, report });
        }
    };
    if let Some((_, prof)) = &segment {
        manifest.insert("cutoff".into(), format!("p = {}, eps = {}, mu = {}, band = {:?}", prof.p, prof.eps, prof.mu, prof.band));
    }

    let mut ctx = Ctx {
        scn,
        opts,
        seed,
        out: out.clone(),
        files: vec![],
        system,
        segment,
        faces: None,
        verified: None,
        search: None,
        index: None,
        manifest,
    };

    let mut stage_reports = vec![];
    let mut failures = vec![];
    let mut exit_code = EXIT_OK;
    for st in &stages {
        let res = match st {
            Stage::VerifySegment => verify_segment(&mut ctx),
            Stage::Index => index(&mut ctx),
            Stage::FindOrbits => find_orbits(&mut ctx),
            Stage::SelectP => select_p(&mut ctx),
            Stage::LemmaDemo => lemma_demo(&mut ctx),
            Stage::EscapeBound => escape_bound(&mut ctx),
            Stage::BarrierSigns => barrier_signs(&mut ctx),
        };
        let (passed, body) = match res {
            Ok(r) => {
                let strict_fail = opts.strict && !r.warnings.is_empty();
                if !r.passed {
                    failures.push(json!({ "stage": st.name(), "kind": "check", "message": "stage checks did not pass" }));
                }
                if strict_fail {
                    failures.push(json!({ "stage": st.name(), "kind": "strict", "message": r.warnings.join("; ") }));
                }
                let ok = r.passed && !strict_fail;
                (ok, json!({ "stage": st.name(), "passed": ok, "warnings": r.warnings, "result": r.result }))
            }
            Err(msg) => {
                failures.push(json!({ "stage": st.name(), "kind": "error", "message": msg }));
                (false, json!({ "stage": st.name(), "passed": false, "error": msg }))
            }
        };
        if !passed {
            exit_code = EXIT_STAGE_FAILED;
        }
        stage_reports.push(body);
    }

    // index-vs-orbit consistency
    let verdict = contradiction(&mut ctx)?;
    if let Verdict::Contradiction { index, .. } = &verdict {
        failures.push(json!({
            "stage": "contradiction",
            "kind": "contradiction",
            "message": format!("verified segment with index {index} but no periodic orbit was found"),
        }));
        exit_code = EXIT_CONTRADICTION;
    }
    report["stages"] = Value::Array(stage_reports);
    report["contradiction"] = match &verdict {
        Verdict::Consistent => json!({ "verdict": "consistent", "policy": ctx.scn.search.contradiction }),
        Verdict::NotChecked => json!({ "verdict": "not_checked", "policy": ctx.scn.search.contradiction }),
        Verdict::Contradiction { index, .. } => {
            json!({ "verdict": "contradiction", "policy": ctx.scn.search.contradiction, "index": index, "residuals": "contradiction_residuals.csv" })
        }
    };
    report["failures"] = Value::Array(failures);
    report["passed"] = json!(exit_code == EXIT_OK);
    report["exit_code"] = json!(exit_code);
    let mut files = std::mem::take(&mut ctx.files);
    write_report(&out, &report, &mut files)?;
    write_manifest(&out, scn, opts, seed, &stages, &ctx.manifest, &mut files)?;
    Ok(Outcome { exit_code, out_dir: out, report })
}

fn needs_segment(s: Stage) -> bool {
    matches!(s, Stage::VerifySegment | Stage::FindOrbits | Stage::Index | Stage::SelectP | Stage::BarrierSigns)
}

fn missing_prerequisite(scn: &Scenario, s: Stage) -> Option<String> {
    match s {
        _ if needs_segment(s) && scn.segment.is_none() => Some(format!("stage `{s}` requires a [segment] section")),
        Stage::LemmaDemo if scn.lemma.is_none() => Some("stage `lemma-demo` requires a [lemma] section".into()),
        Stage::EscapeBound if scn.escape_bound.is_none() => {
            Some("stage `escape-bound` requires an [escape_bound] section".into())
        }
        Stage::BarrierSigns if !matches!(scn.system, SystemDecl::MorseChain(_)) => {
            Some("stage `barrier-signs` applies to the morse_chain system".into())
        }
        _ => None,
    }
}

/// Shortest round-trip decimal, switching to exponent form for very large or small magnitudes.
pub fn fmt(x: f64) -> String {
    if x == 0.0 || !x.is_finite() || (1e-5..1e15).contains(&x.abs()) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn csv_row(vals: impl IntoIterator<Item = f64>) -> String {
    vals.into_iter().map(fmt).collect::<Vec<_>>().join(",")
}

fn write_file(ctx: &mut Ctx, name: &str, body: &str) -> Result<(), String> {
    let path = ctx.out.join(name);
    std::fs::write(&path, body).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    ctx.files.push(name.to_string());
    Ok(())
}

fn write_report(out: &Path, report: &Value, files: &mut Vec<String>) -> Result<(), RunError> {
    let path = out.join("report.json");
    let mut body = serde_json::to_string_pretty(report).expect("report serializes");
    body.push('\n');
    std::fs::write(&path, body).map_err(|e| RunError::Io { path, message: e.to_string() })?;
    files.push("report.json".into());
    Ok(())
}

fn write_manifest(
    out: &Path,
    scn: &Scenario,
    opts: &RunOptions,
    seed: u64,
    stages: &[Stage],
    tolerances: &BTreeMap<String, String>,
    files: &mut Vec<String>,
) -> Result<(), RunError> {
    let mut m = String::new();
    let _ = writeln!(m, "tool = forced-osc {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "scenario = {}", scn.name);
    if let Some(src) = scn.source.as_ref().and_then(|p| p.file_name()) {
        let _ = writeln!(m, "scenario_file = {}", src.to_string_lossy());
    }
    let _ = writeln!(m, "schema_version = {}", crate::scenario::SCHEMA_VERSION);
    let _ = writeln!(m, "seed = {seed}");
    let _ = writeln!(m, "strict = {}", opts.strict);
    let _ = writeln!(m, "pipeline = {}", stages.iter().map(|s| s.name()).collect::<Vec<_>>().join(", "));
    let _ = writeln!(m, "[tolerances]");
    for (k, v) in tolerances {
        let _ = writeln!(m, "{k} = {v}");
    }
    let _ = writeln!(m, "[artifacts]");
    files.push("manifest.txt".into());
    for f in files.iter() {
        let _ = writeln!(m, "{f}");
    }
    let path = out.join("manifest.txt");
    std::fs::write(&path, m).map_err(|e| RunError::Io { path, message: e.to_string() })
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Field the faces are checked against: the cutoff-modified one whenever the
/// speed caps were built for it.
fn face_system(ctx: &Ctx) -> Result<SystemSpec, String> {
    let (seg, prof) = ctx.segment.as_ref().ok_or("no segment")?;
    Ok(match seg.convention {
        CapConvention::Original => ctx.system.clone(),
        CapConvention::CutoffModified => modified_system(&ctx.system, prof).map_err(err)?,
    })
}

fn classify(ctx: &mut Ctx) -> Result<SegmentReport, String> {
    if let Some(r) = &ctx.faces {
        return Ok(r.clone());
    }
    let sys = face_system(ctx)?;
    let v = &ctx.scn.verify;
    let opts = FaceCheck { n_samples: v.n_samples, n_times: v.n_times, seed: ctx.seed, keep_samples: false };
    ctx.manifest.insert("face_samples".into(), format!("{} per face x {} time slices", v.n_samples, v.n_times));
    let (seg, _) = ctx.segment.as_mut().ok_or("no segment")?;
    let rep = check_exit_faces(&sys, seg, &opts).map_err(err)?;
    ctx.faces = Some(rep.clone());
    Ok(rep)
}

fn verify_segment(ctx: &mut Ctx) -> StageRun {
    let rep = classify(ctx)?;
    let mut warnings = vec![];
    let mut csv = String::from("id,expected,classification,samples,tangent_samples,min_margin\n");
    for f in &rep.faces {
        let _ = writeln!(
            csv,
            "{},{:?},{:?},{},{},{}",
            f.id, f.expected, f.classification, f.samples, f.tangent_samples, fmt(f.min_margin)
        );
    }
    write_file(ctx, "faces.csv", &csv)?;

    let (seg, _) = ctx.segment.as_ref().ok_or("no segment")?;
    let period = seg.period;
    let defect = seg.periodicity_defect();
    let solid_ball = matches!(seg.kind, SegmentKind::MetricBall { .. });

    // barrier grid over one period
    let n_grid = 200;
    let mut grid = String::new();
    match (&seg.kind, &seg.gamma_f) {
        (SegmentKind::Box { .. }, Some(f)) => {
            grid.push_str("t,gamma\n");
            for i in 0..=n_grid {
                let t = period * i as f64 / n_grid as f64;
                let _ = writeln!(grid, "{}", csv_row([t, forced_osc::segment::gamma_of_t(f, t)]));
            }
        }
        (SegmentKind::Box { barriers, .. }, None) => {
            let mut head = vec!["t".to_string()];
            for j in 1..=barriers.len() {
                head.push(format!("x1_{j}"));
                head.push(format!("x2_{j}"));
            }
            let _ = writeln!(grid, "{}", head.join(","));
            for i in 0..=n_grid {
                let t = period * i as f64 / n_grid as f64;
                let row = std::iter::once(t).chain(barriers.iter().flat_map(|b| [b.x1.value(t), b.x2.value(t)]));
                let _ = writeln!(grid, "{}", csv_row(row));
            }
        }
        (SegmentKind::MetricBall { .. }, _) => {}
    }
    let (growth_q, speed_cap) = growth_box(seg);
    if !grid.is_empty() {
        write_file(ctx, "segment_grid.csv", &grid)?;
    }

    let mut result = json!({
        "faces": rep.faces,
        "convention": rep.convention,
        "faces_passed": rep.passed,
        "periodicity_defect": defect,
    });
    if solid_ball {
        // the speed set is the solid ball, not its boundary sphere
        result["speed_set"] = json!("solid: <q', A q'> <= 2p");
    }

    let mut growth_ok = true;
    if ctx.system.growth.is_some() {
        let grid = GrowthGrid {
            q_lo: growth_q.0,
            q_hi: growth_q.1,
            speed_cap,
            samples: ctx.scn.verify.growth_samples,
            seed: ctx.seed,
        };
        let g = growth_check(&ctx.system, &grid).map_err(err)?;
        growth_ok = g.holds;
        result["growth"] = json!({ "bound": ctx.system.growth, "holds": g.holds, "worst_margin": g.worst_margin, "samples": g.samples });
        ctx.manifest.insert("growth_samples".into(), ctx.scn.verify.growth_samples.to_string());
    } else {
        warnings.push("system declares no growth bound; growth check skipped".into());
    }

    if let SystemDecl::RotatingCurve(d) = &ctx.scn.system {
        let curve = build::curve(&d.curve).map_err(err)?;
        let phi = build::time_fn(&d.phi).map_err(err)?;
        let n = ctx.scn.verify.switch_grid;
        let tab = switch_point_table(&curve, &phi, ctx.scn.period, n).map_err(err)?;
        let jump = tab.windows(2).map(|w| (w[1].1 - w[0].1).abs().max((w[1].2 - w[0].2).abs())).fold(0.0, f64::max);
        let mut csv = String::from("t,s1,s2\n");
        for (t, s1, s2) in &tab {
            let _ = writeln!(csv, "{}", csv_row([*t, *s1, *s2]));
        }
        write_file(ctx, "switch_points.csv", &csv)?;
        result["switch_points"] = json!({ "grid": n, "max_jump": jump, "length": curve.length });
    }

    let passed = rep.passed && growth_ok;
    ctx.verified = Some(passed);
    Ok(StageResult { passed, result, warnings })
}

/// Position box and speed cap on which the growth bound is sampled.
fn growth_box(seg: &PeriodicSegment) -> ((Vec<f64>, Vec<f64>), f64) {
    match &seg.kind {
        SegmentKind::Box { barriers, p } => {
            let mut lo = vec![f64::INFINITY; barriers.len()];
            let mut hi = vec![f64::NEG_INFINITY; barriers.len()];
            for i in 0..=256 {
                let t = seg.period * i as f64 / 256.0;
                for (j, b) in barriers.iter().enumerate() {
                    lo[j] = lo[j].min(b.x1.value(t));
                    hi[j] = hi[j].max(b.x2.value(t));
                }
            }
            ((lo, hi), *p)
        }
        // chart speed is bounded by the metric speed where A >= I; sqrt(2p) otherwise a sampling scale
        SegmentKind::MetricBall { region, p, .. } => (region.bounding_box(), (2.0 * p).sqrt()),
    }
}

fn index(ctx: &mut Ctx) -> StageRun {
    let rep = classify(ctx)?;
    if !rep.passed {
        return Err("exit faces are not all verified; the index is undefined".into());
    }
    let (seg, _) = ctx.segment.as_ref().ok_or("no segment")?;
    let ir = euler_characteristics(seg).map_err(err)?;
    ctx.index = Some(ir);
    let cfg = &ctx.scn.index;
    let mut result = json!({ "chi_w": ir.chi_w, "chi_exit": ir.chi_exit, "index": ir.index, "exit_components": ir.exit_components });
    let mut passed = true;
    let mut warnings = vec![];
    if let Some(e) = cfg.expected {
        result["expected"] = json!(e);
        passed &= e == ir.index;
    }
    let planar_box = seg.dim == 1 && matches!(seg.kind, SegmentKind::Box { .. });
    if cfg.winding && planar_box {
        let icfg = IntegratorConfig::default().with_tol(cfg.integrator_tol).with_dense_dt(0.0);
        ctx.manifest.insert("winding".into(), format!(
            "collar_delta = {}, contour_speed = {:?}, n_points = {}, integrator_tol = {}",
            cfg.collar_delta, cfg.contour_speed, cfg.n_points, fmt(cfg.integrator_tol)
        ));
        let contour = collar_contour(seg, cfg.collar_delta, cfg.contour_speed).map_err(err)?;
        match &ctx.search {
            Some(search) => {
                let sw = staying_winding(&ctx.system, &contour, &search.escaping, cfg.n_points, &icfg).map_err(err)?;
                let excluded: Vec<Value> =
                    sw.excluded.iter().map(|(s, w)| json!({ "q": s.q, "qd": s.qd, "winding": w })).collect();
                result["winding"] = json!({
                    "collar": sw.collar,
                    "excluded": excluded,
                    "staying": sw.index,
                    "agrees": sw.index == ir.index,
                });
                if sw.collar != sw.index {
                    warnings.push(format!(
                        "collar winding {} includes fixed points whose orbits leave the segment; staying part {}",
                        sw.collar, sw.index
                    ));
                }
                passed &= sw.index == ir.index;
            }
            None => {
                let w = winding_index(&ctx.system, &contour, cfg.n_points, &icfg).map_err(err)?;
                result["winding"] = json!({ "collar": w, "agrees": w == ir.index });
                if w != ir.index {
                    warnings.push("collar winding differs; run find-orbits before index to excise escaping fixed points".into());
                }
                passed &= w == ir.index;
            }
        }
    }
    Ok(StageResult { passed, result, warnings })
}

fn shoot_config(ctx: &Ctx) -> ShootConfig {
    let s = &ctx.scn.search;
    ShootConfig {
        tol_residual: ctx.opts.tol.unwrap_or(s.tol_residual),
        max_iters: s.max_iters,
        fd_step: s.fd_step,
        central: s.central,
        integrator: IntegratorConfig::default().with_tol(s.integrator_tol).with_dense_dt(0.0),
        segments: s.segments,
        ..ShootConfig::default()
    }
}

fn find_orbits(ctx: &mut Ctx) -> StageRun {
    let s = ctx.scn.search.clone();
    let shoot = shoot_config(ctx);
    ctx.manifest.insert("shooting".into(), format!(
        "tol_residual = {}, max_iters = {}, fd_step = {}, central = {}, integrator_tol = {}, segments = {}",
        fmt(shoot.tol_residual), shoot.max_iters, fmt(shoot.fd_step), shoot.central, fmt(s.integrator_tol), shoot.segments
    ));
    ctx.manifest.insert("multistart".into(), format!(
        "grid = {:?}, search_speed = {:?}, dedup_radius = {}, domain_slack = {}, confinement_checks = {}",
        s.grid, s.search_speed, fmt(s.dedup_radius), s.domain_slack, s.confinement_checks
    ));
    ctx.manifest.insert("reintegration".into(), format!("tol = {}, max_mismatch = {}", fmt(s.reintegrate_tol), fmt(s.max_mismatch)));
    ctx.manifest.insert("monodromy".into(), format!("{:?}", s.monodromy));
    let ms = MultistartConfig {
        grid: s.grid.clone(),
        search_speed: s.search_speed,
        dedup_radius: s.dedup_radius,
        domain_slack: s.domain_slack,
        confinement_checks: s.confinement_checks,
    };
    let (seg, prof) = ctx.segment.as_ref().ok_or("no segment")?;
    let report = multistart_search(&ctx.system, seg, &ms, &shoot).map_err(err)?;
    let n = seg.dim;
    let method = match s.monodromy {
        MonodromyDecl::Variational => Monodromy::Variational,
        MonodromyDecl::Forward => Monodromy::ForwardDifference,
        MonodromyDecl::Central => Monodromy::CentralDifference,
    };
    let reint = IntegratorConfig::default().with_tol(s.reintegrate_tol).with_dense_dt(0.0);
    let mut orbits_json = vec![];
    let mut summary = String::from("k");
    for i in 1..=n {
        let _ = write!(summary, ",q{i}");
    }
    for i in 1..=n {
        let _ = write!(summary, ",qd{i}");
    }
    summary.push_str(",residual,iterations,det_i_minus_dp,min_margin,certified,mismatch");
    for i in 1..=2 * n {
        let _ = write!(summary, ",mult{i}_re,mult{i}_im");
    }
    summary.push('\n');
    let mut warnings = vec![];
    let mut all_reintegrated = true;
    let mut orbit_csvs = vec![];
    for (k, o) in report.orbits.iter().enumerate() {
        let conf = verify_confinement(o, seg, s.confinement_checks, Some(prof));
        let mults = floquet_multipliers(&ctx.system, o, method, s.fd_step, &shoot.integrator).map_err(err)?;
        let end = final_state(&ctx.system, 0.0, &o.s0, seg.period, &reint).map_err(err)?;
        let mismatch = end.max_dist(&o.s0);
        all_reintegrated &= mismatch < s.max_mismatch;
        if !conf.certified {
            warnings.push(format!("orbit {k} enters the cutoff band; it is an orbit of the original field only if the band is never reached"));
        }
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{},{},{}",
            k,
            csv_row(o.s0.q.iter().chain(&o.s0.qd).copied()),
            fmt(o.residual_norm),
            o.iterations,
            fmt(o.det_i_minus_dp),
            fmt(conf.min_margin),
            conf.certified,
            fmt(mismatch),
            csv_row(mults.iter().flat_map(|m| [m.re, m.im]))
        );
        orbits_json.push(json!({
            "s0": { "q": o.s0.q, "qd": o.s0.qd },
            "residual": o.residual_norm,
            "iterations": o.iterations,
            "det_i_minus_dp": o.det_i_minus_dp,
            "multipliers": mults,
            "confinement": { "min_margin": conf.min_margin, "confined": conf.confined, "band_margin": conf.band_margin, "certified": conf.certified },
            "reintegration_mismatch": mismatch,
            "trajectory": format!("orbit_{k}.csv"),
        }));
        let mut csv = trajectory_header(n);
        for (t, st) in &o.trajectory.samples {
            let _ = writeln!(csv, "{}", csv_row(std::iter::once(*t).chain(st.q.iter().copied()).chain(st.qd.iter().copied())));
        }
        orbit_csvs.push((format!("orbit_{k}.csv"), csv));
    }
    for (name, body) in orbit_csvs {
        write_file(ctx, &name, &body)?;
    }
    write_file(ctx, "orbits.csv", &summary)?;
    let mut starts = String::new();
    let _ = writeln!(
        starts,
        "{},converged,residual",
        (1..=n).map(|i| format!("q{i}")).chain((1..=n).map(|i| format!("qd{i}"))).collect::<Vec<_>>().join(",")
    );
    for r in &report.records {
        let _ = writeln!(starts, "{},{},{}", csv_row(r.start.iter().copied()), r.converged, fmt(r.residual));
    }
    write_file(ctx, "starts.csv", &starts)?;
    if !report.escaping.is_empty() {
        warnings.push(format!("{} fixed point(s) of the period map have orbits leaving the segment", report.escaping.len()));
    }
    if ctx.verified != Some(true) {
        warnings.push("segment not verified in this run; the orbit search carries no existence guarantee".into());
    }
    let escaping: Vec<Value> = report.escaping.iter().map(|s: &State| json!({ "q": s.q, "qd": s.qd })).collect();
    let result = json!({
        "starts": report.starts,
        "converged": report.converged,
        "unconfined": report.unconfined,
        "escaping": escaping,
        "orbits": orbits_json,
    });
    let passed = report.orbits.len() >= s.min_orbits && all_reintegrated;
    ctx.search = Some(report);
    Ok(StageResult { passed, result, warnings })
}

pub fn trajectory_header(n: usize) -> String {
    let mut h = String::from("t");
    for i in 1..=n {
        let _ = write!(h, ",q{i}");
    }
    for i in 1..=n {
        let _ = write!(h, ",qd{i}");
    }
    h.push('\n');
    h
}

fn contradiction(ctx: &mut Ctx) -> Result<Verdict, RunError> {
    let Some(search) = &ctx.search else { return Ok(Verdict::NotChecked) };
    let verified = ctx.verified == Some(true);
    let ir = match (ctx.index, &ctx.segment) {
        (Some(ir), _) => ir,
        (None, Some((seg, _))) if verified => match euler_characteristics(seg) {
            Ok(ir) => ir,
            Err(_) => return Ok(Verdict::NotChecked),
        },
        _ => return Ok(Verdict::NotChecked),
    };
    let v = check_contradiction(verified, &ir, search, ctx.scn.search.contradiction);
    if let Verdict::Contradiction { residuals, .. } = &v {
        let n = ctx.segment.as_ref().map_or(1, |s| s.0.dim);
        let mut csv = String::new();
        let _ = writeln!(
            csv,
            "{},residual",
            (1..=n).map(|i| format!("q{i}")).chain((1..=n).map(|i| format!("qd{i}"))).collect::<Vec<_>>().join(",")
        );
        for (s, r) in residuals {
            let _ = writeln!(csv, "{},{}", csv_row(s.iter().copied()), fmt(*r));
        }
        write_file(ctx, "contradiction_residuals.csv", &csv)
            .map_err(|m| RunError::Io { path: ctx.out.join("contradiction_residuals.csv"), message: m })?;
    }
    Ok(v)
}

fn select_p(ctx: &mut Ctx) -> StageRun {
    let c = ctx.scn.select.clone();
    let (seg, prof) = ctx.segment.as_ref().ok_or("no segment")?;
    let mut schedule = c.schedule.clone();
    if !schedule.contains(&prof.p) {
        schedule.push(prof.p);
        schedule.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    let cfg = EscapeConfig {
        n_samples: c.n_samples,
        n_times: c.n_times,
        t_max: c.t_max,
        widen: c.widen,
        seed: ctx.seed,
        integrator: IntegratorConfig::default().with_tol(c.integrator_tol).with_dense_dt(0.0),
    };
    ctx.manifest.insert("escape_experiment".into(), format!(
        "n_samples = {}, n_times = {}, t_max = {}, widen = {}, integrator_tol = {}",
        c.n_samples, c.n_times, c.t_max, c.widen, fmt(c.integrator_tol)
    ));
    let table: Vec<PRow> = p_table(&ctx.system, seg, prof, &schedule, &cfg).map_err(err)?;
    let mut csv = String::from("p,passed,tested,escaped,max_escape_time\n");
    for r in &table {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            fmt(r.p),
            r.passed,
            r.report.tested,
            r.report.escaped,
            fmt(r.report.max_escape_time)
        );
    }
    let selected = table.iter().find(|r| r.passed).map(|r| r.p);
    let shipped_ok = table.iter().any(|r| r.p == prof.p && r.passed);
    let closed = upward_closed(&table);
    let rows: Vec<Value> = table
        .iter()
        .map(|r| json!({ "p": r.p, "passed": r.passed, "tested": r.report.tested, "escaped": r.report.escaped, "max_escape_time": r.report.max_escape_time }))
        .collect();
    let result = json!({ "selected_p": selected, "shipped_p": prof.p, "shipped_p_passed": shipped_ok, "upward_closed": closed, "table": rows });
    write_file(ctx, "select_p.csv", &csv)?;
    Ok(StageResult { passed: shipped_ok && closed, result, warnings: vec![] })
}

fn escape_bound(ctx: &mut Ctx) -> StageRun {
    let eb = ctx.scn.escape_bound.clone().ok_or("no [escape_bound] section")?;
    let metric = match (&eb.metric, &ctx.system.metric) {
        (Some(m), _) => build::metric(m),
        (None, Some(m)) => m.clone(),
        (None, None) => return Err("escape-bound needs a metric".into()),
    };
    let region = match (&eb.region, ctx.scn.segment.as_ref().and_then(|s| s.region.as_ref())) {
        (Some(r), _) | (None, Some(r)) => build::region(r),
        (None, None) => return Err("escape-bound needs a region".into()),
    };
    let cfg = EscapeBoundConfig {
        n_points: eb.n_points,
        n_directions: eb.n_directions,
        cap: eb.cap,
        seed: ctx.seed,
        integrator: IntegratorConfig::default().with_tol(eb.integrator_tol).with_dense_dt(0.0),
    };
    ctx.manifest.insert("escape_bound".into(), format!(
        "delta = {}, n_points = {}, n_directions = {}, cap = {}, integrator_tol = {}",
        eb.delta, eb.n_points, eb.n_directions, eb.cap, fmt(eb.integrator_tol)
    ));
    let b = escape_time_bound(&metric, &region, eb.delta, &cfg).map_err(err)?;
    let bound = eb.bound.as_ref().map(|n| n.resolve()).transpose()?;
    let passed = bound.is_none_or(|x| b.tau <= x);
    let mut csv = String::from("tau,n_points,n_directions");
    for i in 1..=b.worst_q.len() {
        let _ = write!(csv, ",q{i}");
    }
    for i in 1..=b.worst_qd.len() {
        let _ = write!(csv, ",qd{i}");
    }
    let _ = writeln!(
        csv,
        "\n{},{},{},{}",
        fmt(b.tau),
        b.n_points,
        b.n_directions,
        csv_row(b.worst_q.iter().chain(&b.worst_qd).copied())
    );
    write_file(ctx, "escape_bound.csv", &csv)?;
    let result = json!({ "tau": b.tau, "bound": bound, "worst_q": b.worst_q, "worst_qd": b.worst_qd, "n_points": b.n_points, "n_directions": b.n_directions });
    Ok(StageResult { passed, result, warnings: vec![] })
}

fn lemma_demo(ctx: &mut Ctx) -> StageRun {
    let l = ctx.scn.lemma.clone().ok_or("no [lemma] section")?;
    let metric = build::metric(&l.metric);
    let n = metric.dim;
    let field = FlatExprs::parse(&l.field, n).map_err(err)?;
    // constant field on a flat metric: deviation is |v| t²/2 at the end time
    let constant = matches!(l.metric, MetricDecl::Flat { .. })
        && field.is_time_only()
        && l.field.iter().all(|s| Expr::parse(s, &["t"]).is_ok_and(|e| !e.depends_on("t")));
    let vnorm = if constant {
        let mut v = vec![0.0; n];
        field.eval_into(0.0, &l.q0, &l.qd0, &mut v);
        Some(v.iter().map(|x| x * x).sum::<f64>().sqrt())
    } else {
        None
    };
    let cfg = IntegratorConfig::default().with_tol(l.integrator_tol);
    ctx.manifest.insert("lemma".into(), format!("integrator_tol = {}, closed_form_tol = {}", fmt(l.integrator_tol), fmt(l.closed_form_tol)));
    let rows = geodesic_tracking(&metric, move |t, q, qd, out| field.eval_into(t, q, qd, out), &l.q0, &l.qd0, l.t_geo, &l.lambdas, &cfg)
        .map_err(err)?;
    let mut csv = String::from(if vnorm.is_some() { "lambda,t_end,deviation,closed_form,error\n" } else { "lambda,t_end,deviation\n" });
    let mut passed = true;
    let mut worst_err = 0.0_f64;
    let mut json_rows = vec![];
    for r in &rows {
        match vnorm {
            Some(v) => {
                let cf = 0.5 * v * r.t_end * r.t_end;
                let e = (r.deviation - cf).abs();
                worst_err = worst_err.max(e);
                passed &= e <= l.closed_form_tol;
                let _ = writeln!(csv, "{}", csv_row([r.lambda, r.t_end, r.deviation, cf, e]));
                json_rows.push(json!({ "lambda": r.lambda, "t_end": r.t_end, "deviation": r.deviation, "closed_form": cf }));
            }
            None => {
                let _ = writeln!(csv, "{}", csv_row([r.lambda, r.t_end, r.deviation]));
                json_rows.push(json!({ "lambda": r.lambda, "t_end": r.t_end, "deviation": r.deviation }));
            }
        }
    }
    let decreasing = rows.windows(2).all(|w| w[1].deviation < w[0].deviation);
    if vnorm.is_none() {
        passed &= decreasing;
    }
    write_file(ctx, "lemma.csv", &csv)?;
    let result = json!({
        "rows": json_rows,
        "strictly_decreasing": decreasing,
        "closed_form": vnorm.is_some(),
        "max_closed_form_error": if vnorm.is_some() { json!(worst_err) } else { Value::Null },
    });
    Ok(StageResult { passed, result, warnings: vec![] })
}

fn barrier_signs(ctx: &mut Ctx) -> StageRun {
    let SystemDecl::MorseChain(d) = &ctx.scn.system else {
        return Err("barrier-signs applies to the morse_chain system".into());
    };
    let e = Expr::parse(&d.field, &["t", "x"]).map_err(err)?;
    let (seg, _) = ctx.segment.as_ref().ok_or("no segment")?;
    let SegmentKind::Box { barriers, .. } = &seg.kind else {
        return Err("barrier-signs needs a box segment".into());
    };
    let m = ctx.scn.barrier_signs.n_times;
    let mut head = vec!["t".to_string()];
    for j in 1..=barriers.len() {
        head.push(format!("field_at_x1_{j}"));
        head.push(format!("field_at_x2_{j}"));
    }
    let mut csv = head.join(",") + "\n";
    let (mut min_left, mut max_right) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..m {
        let t = seg.period * i as f64 / m as f64;
        let vals: Vec<f64> = barriers.iter().flat_map(|b| [e.eval(&[t, b.x1.value(t)]), e.eval(&[t, b.x2.value(t)])]).collect();
        for pair in vals.chunks(2) {
            min_left = min_left.min(pair[0]);
            max_right = max_right.max(pair[1]);
        }
        let _ = writeln!(csv, "{}", csv_row(std::iter::once(t).chain(vals)));
    }
    write_file(ctx, "barrier_signs.csv", &csv)?;
    let passed = min_left > 0.0 && max_right < 0.0;
    let result = json!({ "min_field_at_left": min_left, "max_field_at_right": max_right, "n_times": m });
    Ok(StageResult { passed, result, warnings: vec![] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_format_is_round_trip() {
        for x in [0.0, 1.0, -2.5, 1e-12, 3.141592653589793, 1e20, 0.1] {
            assert_eq!(fmt(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt(1e-12), "1e-12");
        assert_eq!(fmt(0.25), "0.25");
    }

    #[test]
    fn header_layout() {
        assert_eq!(trajectory_header(2), "t,q1,q2,qd1,qd2\n");
    }
}

//! Gallery dynamics against oracles built only from curve positions and
//! finite differences, plus an end-to-end run on the forced pendulum.

use std::f64::consts::{PI, TAU};

use forced_osc::curve::CurveSpec;
use forced_osc::cutoff::CutoffProfile;
use forced_osc::gallery::{curve_pendulum_system, morse_dv, morse_v, rotating_curve_system, s1_s2_of_t};
use forced_osc::orbit::{
    check_contradiction, multistart_search, verify_confinement, ContradictionPolicy, MultistartConfig, ShootConfig,
    Verdict,
};
use forced_osc::segment::{build_pendulum_segment, check_exit_faces, euler_characteristics, FaceCheck};
use forced_osc::timefn::{TimeFn, TrigSeries};

fn pos(c: &CurveSpec, s: f64) -> [f64; 2] {
    let p = c.at(s);
    [p.xi, p.eta]
}

fn rotate(phi: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = phi.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Unit tangent by central differences of positions.
fn tangent(c: &CurveSpec, s: f64) -> [f64; 2] {
    let h = 1e-6;
    let (a, b) = (pos(c, s + h), pos(c, s - h));
    [(a[0] - b[0]) / (2.0 * h), (a[1] - b[1]) / (2.0 * h)]
}

#[test]
fn rotating_curve_matches_newton_tangential_law() {
    // r(s, t) = R(phi(t)) c(s); the constraint force is normal, so
    // s'' = -T_y - a0 . T with a0 the acceleration of the path at s'' = 0
    for curve in [CurveSpec::circle(1.0, [0.0, 2.0]), CurveSpec::ellipse(1.5, 0.8, [0.3, 1.0]).unwrap()] {
        let phi = TimeFn::from(TrigSeries { mean: 0.2, omega: 1.0, sin: vec![(1, 0.4)], cos: vec![(2, 0.1)] });
        let sys = rotating_curve_system(curve.clone(), phi.clone(), TAU);
        for &(t, s, sd) in &[(0.3, 0.5, 0.7), (1.9, 2.0, -1.3), (4.0, 3.7, 0.0), (5.5, 0.1, 2.2)] {
            let r = |tau: f64| rotate(phi.value(t + tau), pos(&curve, s + sd * tau));
            let h = 2e-3;
            let (r2, r1, r0, m1, m2) = (r(2.0 * h), r(h), r(0.0), r(-h), r(-2.0 * h));
            let a0: [f64; 2] =
                std::array::from_fn(|i| (-r2[i] + 16.0 * r1[i] - 30.0 * r0[i] + 16.0 * m1[i] - m2[i]) / (12.0 * h * h));
            let tvec = rotate(phi.value(t), tangent(&curve, s));
            let oracle = -tvec[1] - dot(a0, tvec);
            let got = sys.accel(t, &[s], &[sd])[0];
            assert!((got - oracle).abs() < 1e-6, "t={t} s={s}: {got} vs {oracle}");
        }
    }
}

#[test]
fn ellipse_switch_points_match_a_dense_scan() {
    let curve = CurveSpec::ellipse(2.0, 1.0, [0.0, 0.0]).unwrap();
    let phi = TimeFn::from(TrigSeries::sine(0.3, 1.0));
    let n = 200_000;
    for &t in &[0.0, 0.7, 2.5, 4.4] {
        let p = phi.value(t);
        // rotated tangent's vertical component: minimum at s1, maximum at s2
        let (mut lo, mut hi) = ((f64::INFINITY, 0.0), (f64::NEG_INFINITY, 0.0));
        for k in 0..n {
            let s = curve.length * k as f64 / n as f64;
            let y = rotate(p, tangent(&curve, s))[1];
            if y < lo.0 {
                lo = (y, s);
            }
            if y > hi.0 {
                hi = (y, s);
            }
        }
        let (s1, s2) = s1_s2_of_t(&curve, &phi, t).unwrap();
        let d = |a: f64, b: f64| {
            let x = (a - b).rem_euclid(curve.length);
            x.min(curve.length - x)
        };
        let tol = 1e-3;
        assert!(d(s1, lo.1) < tol && d(s2, hi.1) < tol, "t={t}: ({s1}, {s2}) vs ({}, {})", lo.1, hi.1);
        assert!((lo.0 + 1.0).abs() < 1e-6 && (hi.0 - 1.0).abs() < 1e-6);
    }
}

#[test]
fn ellipse_curve_pendulum_is_the_tangential_force() {
    let curve = CurveSpec::ellipse(2.0, 1.0, [0.0, 0.0]).unwrap();
    let sys = curve_pendulum_system(curve.clone(), TimeFn::from(TrigSeries::sine(0.5, 1.0)), TAU);
    for k in 0..40 {
        let (t, s) = (0.37 * k as f64, curve.length * k as f64 / 40.0);
        let tv = tangent(&curve, s);
        assert!((dot(tv, tv) - 1.0).abs() < 1e-8, "not unit speed at {s}");
        let oracle = dot([0.5 * t.sin(), -1.0], tv);
        assert!((sys.accel(t, &[s], &[0.3])[0] - oracle).abs() < 1e-8);
    }
}

#[test]
fn morse_derivative_at_two() {
    let h = 1e-5;
    let fd = (morse_v(2.0 + h) - morse_v(2.0 - h)) / (2.0 * h);
    let closed = (1.0 - (-1.0_f64).exp()) * (-1.0_f64).exp();
    assert!((morse_dv(2.0) - 0.2325442).abs() < 1e-7);
    assert!((fd - closed).abs() < 1e-9 && (morse_dv(2.0) - closed).abs() < 1e-15);
}

#[test]
fn forced_pendulum_end_to_end() {
    let f = TimeFn::from(TrigSeries::sine(0.5, 1.0));
    let sys = forced_osc::gallery::pendulum_time_forced(f.clone(), 0.5, TAU).unwrap();
    let mut seg = build_pendulum_segment(f, 20.0, TAU).unwrap();
    let rep = check_exit_faces(&sys, &mut seg, &FaceCheck::default()).unwrap();
    assert!(rep.passed);
    let idx = euler_characteristics(&seg).unwrap();
    assert_eq!((idx.chi_w, idx.chi_exit, idx.index), (1, 2, -1));

    let ms = MultistartConfig { grid: vec![10], search_speed: Some(3.0), ..Default::default() };
    let found = multistart_search(&sys, &seg, &ms, &ShootConfig::default()).unwrap();
    assert!(!found.orbits.is_empty());
    let prof = CutoffProfile::new(20.0, 1.0, 0.1).unwrap();
    for orbit in &found.orbits {
        assert!(orbit.residual_norm < 1e-9);
        let conf = verify_confinement(orbit, &seg, 2000, Some(&prof));
        assert!(conf.confined && conf.certified && conf.min_margin > 0.01);
        let q = &orbit.trajectory;
        for k in 0..=100 {
            let s = q.state_at(TAU * k as f64 / 100.0);
            assert!(s.q[0] > 0.0 && s.q[0] < PI);
        }
    }
    assert_eq!(check_contradiction(true, &idx, &found, ContradictionPolicy::Enforce), Verdict::Consistent);
    let mut empty = found.clone();
    empty.orbits.clear();
    assert!(matches!(
        check_contradiction(true, &idx, &empty, ContradictionPolicy::Enforce),
        Verdict::Contradiction { index: -1, .. }
    ));
    assert_eq!(check_contradiction(true, &idx, &empty, ContradictionPolicy::Disabled), Verdict::NotChecked);
}

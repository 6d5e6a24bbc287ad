use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use forced_osc::cutoff::{chi, cutoff_forcing, upward_closed, CutoffProfile, EscapeReport, PRow};
use forced_osc::gallery::{
    geodesic_system, morse_chain_system, pendulum_time_forced, rotating_curve_system, ChainSpec,
};
use forced_osc::curve::CurveSpec;
use forced_osc::ode::{final_state, IntegratorConfig, State};
use forced_osc::orbit::{newton_shoot, ShootConfig};
use forced_osc::segment::{build_pendulum_segment, check_exit_faces, FaceCheck};
use forced_osc::system::{MetricSpec, SystemSpec};
use forced_osc::timefn::{TimeFn, TrigSeries};
use proptest::prelude::*;

fn oscillator() -> SystemSpec {
    SystemSpec::flat("oscillator", 1, TAU, |_, q, _, out| out[0] = -q[0])
}

fn fixed(h: f64) -> IntegratorConfig {
    IntegratorConfig { fixed_step: Some(h), ..IntegratorConfig::default().with_dense_dt(0.0) }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn any_metric() -> impl Strategy<Value = (MetricSpec, Vec<f64>)> {
    prop_oneof![
        (0.3..2.8_f64, -3.0..3.0_f64).prop_map(|(a, b)| (MetricSpec::sphere_polar(), vec![a, b])),
        (-0.6..0.6_f64, -0.6..0.6_f64).prop_map(|(a, b)| (MetricSpec::hemisphere(), vec![a, b])),
        (-3.0..3.0_f64, -3.0..3.0_f64).prop_map(|(a, b)| (MetricSpec::torus(2.0, 0.5), vec![a, b])),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fixed_step_error_is_fifth_order(q0 in -1.0..1.0_f64, v0 in -1.0..1.0_f64) {
        prop_assume!(q0.abs() + v0.abs() > 0.2);
        let s0 = State::scalar(q0, v0);
        let t1 = 2.0_f64;
        let exact = State::scalar(q0 * t1.cos() + v0 * t1.sin(), v0 * t1.cos() - q0 * t1.sin());
        let err = |h: f64| final_state(&oscillator(), 0.0, &s0, t1, &fixed(h)).unwrap().max_dist(&exact);
        let order = (err(0.2) / err(0.1)).log2();
        prop_assert!(order > 4.5 && order < 6.5, "observed order {}", order);
    }

    #[test]
    fn time_reversal_returns_to_start(q0 in 0.2..3.0_f64, v0 in -1.0..1.0_f64) {
        // unforced pendulum is reversible: flipping the velocity retraces the path
        let sys = pendulum_time_forced(TimeFn::constant(0.0), 0.0, TAU).unwrap();
        let cfg = IntegratorConfig::default().with_tol(1e-12).with_dense_dt(0.0);
        let s1 = final_state(&sys, 0.0, &State::scalar(q0, v0), 1.5, &cfg).unwrap();
        let back = final_state(&sys, 0.0, &State::scalar(s1.q[0], -s1.qd[0]), 1.5, &cfg).unwrap();
        prop_assert!(back.max_dist(&State::scalar(q0, -v0)) < 1e-9);
    }

    #[test]
    fn geodesic_energy_is_conserved((m, q) in any_metric(), a in -1.0..1.0_f64, b in -1.0..1.0_f64) {
        let sys = geodesic_system(m.clone());
        let cfg = IntegratorConfig::default().with_tol(1e-12).with_dense_dt(0.0);
        let s0 = State::new(q.clone(), vec![a, b]);
        let s1 = final_state(&sys, 0.0, &s0, 0.5, &cfg).unwrap();
        let (e0, e1) = (m.norm2(&q, &[a, b]), m.norm2(&s1.q, &s1.qd));
        prop_assert!((e1 - e0).abs() < 1e-9 * (1.0 + e0), "{} vs {}", e0, e1);
    }

    #[test]
    fn christoffel_is_symmetric_and_matches_differences((m, q) in any_metric()) {
        let g = m.christoffel(&q).unwrap();
        prop_assert!(g.max_asymmetry() < 1e-14);
        let fd = m.christoffel_fd(&q).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    prop_assert!((g.get(k, i, j) - fd.get(k, i, j)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn chain_force_is_minus_potential_gradient(dx in proptest::collection::vec(-0.4..0.4_f64, 3)) {
        let spec = ChainSpec { n: 3, field: Arc::new(|_, _| 0.0), field_bound: 0.0 };
        let sys = morse_chain_system(spec.clone(), TAU).unwrap();
        let x: Vec<f64> = dx.iter().enumerate().map(|(i, d)| 2.0 * (i + 1) as f64 + d).collect();
        let a = sys.accel(0.0, &x, &[0.0; 3]);
        let h = 1e-6;
        for i in 0..3 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let grad = (spec.potential(&xp) - spec.potential(&xm)) / (2.0 * h);
            prop_assert!((a[i] + grad).abs() < 1e-7, "{} vs {}", a[i], -grad);
        }
    }

    #[test]
    fn gallery_fields_are_periodic(t in 0.0..TAU, q in 0.1..3.0_f64, qd in -2.0..2.0_f64) {
        let pend = pendulum_time_forced(TimeFn::from(TrigSeries::cosine(1.0, 0.3, 1.0)), 1.3, TAU).unwrap();
        let rot = rotating_curve_system(CurveSpec::circle(1.0, [0.0, 2.0]), TimeFn::from(TrigSeries::sine(0.1, 1.0)), TAU);
        let chain = morse_chain_system(ChainSpec { n: 1, field: Arc::new(|t, x| 0.2 * t.sin() * x.sin()), field_bound: 0.2 }, TAU).unwrap();
        for sys in [&pend, &rot, &chain] {
            let (a, b) = (sys.accel(t, &[q], &[qd]), sys.accel(t + TAU, &[q], &[qd]));
            prop_assert!((a[0] - b[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn cutoff_never_enlarges_the_forcing(t in 0.0..TAU, q in 0.1..3.0_f64, qd in -12.0..12.0_f64, p in 2.0..10.0_f64, eps in 0.1..1.5_f64) {
        let sys = pendulum_time_forced(TimeFn::from(TrigSeries::sine(0.5, 1.0)), 0.5, TAU).unwrap();
        let pr = CutoffProfile::new(p, eps.min(p), 0.1).unwrap();
        prop_assert!(norm(&cutoff_forcing(&sys, &pr, t, &[q], &[qd])) <= norm(&sys.forcing(t, &[q], &[qd])) + 1e-15);
    }

    #[test]
    fn chi_is_lipschitz_and_monotone(p in 1.0..10.0_f64, eps in 0.05..1.0_f64, a in 0.0..12.0_f64, b in 0.0..12.0_f64, quintic in any::<bool>()) {
        let mut pr = CutoffProfile::new(p, eps, 0.1).unwrap();
        pr.degree = if quintic { 5 } else { 3 };
        let (ca, cb) = (chi(&pr, a), chi(&pr, b));
        prop_assert!((0.0..=1.0).contains(&ca));
        // smoothstep slope is at most 15/8 on a ramp of width eps / 2
        prop_assert!((ca - cb).abs() <= 3.75 / eps * (a - b).abs() + 1e-12);
        if (a - p).abs() <= (b - p).abs() {
            prop_assert!(ca <= cb + 1e-15);
        }
        prop_assert_eq!(chi(&pr, a), chi(&pr, -a));
    }

    #[test]
    fn upward_closed_matches_definition(pass in proptest::collection::vec(any::<bool>(), 0..8)) {
        let empty = EscapeReport { tested: 0, escaped: 0, max_escape_time: 0.0, worst_case: None, failures: vec![] };
        let table: Vec<PRow> = pass.iter().enumerate().map(|(i, &b)| PRow { p: i as f64, passed: b, report: empty.clone() }).collect();
        let naive = (0..pass.len()).all(|i| !pass[i] || pass[i..].iter().all(|&x| x));
        prop_assert_eq!(upward_closed(&table), naive);
    }

    #[test]
    fn flat_tracking_decays_like_inverse_square(vx in -2.0..2.0_f64, vy in -2.0..2.0_f64) {
        let v = [vx, vy];
        let rows = forced_osc::cutoff::geodesic_tracking(
            &MetricSpec::flat(2),
            move |_, _, _, out: &mut [f64]| out.copy_from_slice(&v),
            &[0.0, 0.0],
            &[1.0, 0.5],
            1.0,
            &[1.0, 2.0, 4.0, 8.0],
            &IntegratorConfig::default().with_tol(1e-12),
        )
        .unwrap();
        for r in rows {
            prop_assert!((r.deviation - norm(&v) / (2.0 * r.lambda * r.lambda)).abs() < 1e-8);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn face_classes_are_stable_under_refinement(amp in 0.0..0.8_f64, p in 5.0..30.0_f64) {
        let f = TimeFn::from(TrigSeries::sine(amp, 1.0));
        let sys = pendulum_time_forced(f.clone(), amp, TAU).unwrap();
        let classes = |n: usize| {
            let mut seg = build_pendulum_segment(f.clone(), p, TAU).unwrap();
            let rep = check_exit_faces(&sys, &mut seg, &FaceCheck { n_samples: n, ..Default::default() }).unwrap();
            rep.faces.iter().map(|f| (f.classification.is_exit(), f.min_margin > 0.0)).collect::<Vec<_>>()
        };
        prop_assert_eq!(classes(100), classes(400));
    }

    #[test]
    fn shot_orbit_survives_tighter_reintegration(amp in 0.0..0.8_f64) {
        let sys = pendulum_time_forced(TimeFn::from(TrigSeries::sine(amp, 1.0)), amp, TAU).unwrap();
        let orbit = newton_shoot(&sys, &State::scalar(PI / 2.0, 0.0), &ShootConfig::default()).unwrap();
        prop_assert!(orbit.residual_norm < 1e-9);
        let tight = IntegratorConfig::default().with_tol(1e-12).with_dense_dt(0.0);
        let end = final_state(&sys, 0.0, &orbit.s0, TAU, &tight).unwrap();
        prop_assert!(end.max_dist(&orbit.s0) < 1e-8);
    }
}

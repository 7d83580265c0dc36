use mgrid_core::control::decouple::{couple, decouple};
use mgrid_core::control::pid::{back_calculate, control_law, pid_step, PidGains, PidState};
use mgrid_core::control::reference::{estimate_demand, rate_limit_reference, DemandEstimator};
use mgrid_core::control::soc::{soc_compensation, SocPolicy};
use mgrid_core::control::{Controller, ControllerConfig, Measurements, Mode};
use mgrid_core::lti::default_plant_model;
use mgrid_core::scalar::limit_amplitude_rate;
use nalgebra::Matrix2;
use proptest::prelude::*;

proptest! {
    #[test]
    fn reference_steps_bounded(
        targets in prop::collection::vec(-1e4..1e4f64, 1..200),
        start in -500.0..500.0f64,
        rate in 0.01..100.0f64,
    ) {
        let ts = 0.1;
        let mut prev = start;
        for t in targets {
            let next = rate_limit_reference(t, prev, rate, ts);
            prop_assert!((next - prev).abs() <= ts * rate + 1e-12);
            prev = next;
        }
    }

    #[test]
    fn amplitude_rate_limit_holds(cmd in -1e4..1e4f64, prev in -250.0..250.0f64, ramp in 0.1..200.0f64) {
        let out = limit_amplitude_rate(cmd, prev, 250.0, ramp, 0.1);
        prop_assert!(out.abs() <= 250.0);
        prop_assert!((out - prev).abs() <= ramp * 0.1 + 1e-12);
    }

    #[test]
    fn back_calculation_reproduces_target(
        k_p in 0.0..5.0f64,
        k_i in 0.01..5.0f64,
        k_d in 0.0..1.0f64,
        err in -500.0..500.0f64,
        x_d in -100.0..100.0f64,
        target in -300.0..300.0f64,
    ) {
        let g = PidGains::new(k_p, k_i, k_d, 0.1).unwrap();
        let x_i = back_calculate(&g, err, x_d, target).unwrap();
        let v = control_law(&g, err, x_i, x_d);
        let scale = target.abs().max((k_p * err).abs()).max(1.0);
        prop_assert!((v - target).abs() <= 1e-12 * scale);
    }

    #[test]
    fn dead_zone_is_inert(socs in prop::collection::vec(30.0..=80.0f64, 1..100), x0 in -50.0..50.0f64) {
        let mut p = SocPolicy::default_policy(0.1);
        p.x_i_soc = x0;
        for soc in socs {
            let (f, next) = soc_compensation(soc, 40.0, &p);
            prop_assert_eq!(f, 0.0);
            prop_assert_eq!(next.x_i_soc, x0);
            p = next;
        }
    }

    #[test]
    fn decouple_inverts_couple(a in -1e3..1e3f64, b in -1e3..1e3f64, c in -0.5..0.5f64) {
        let g = Matrix2::new(1.0, c, c, 1.0);
        let d = decouple([a, b], &g);
        prop_assert!(!d.fallback);
        let back = couple(d.cmd, &g);
        prop_assert!((back[0] - a).abs() <= 1e-9 * (1.0 + a.abs()));
        prop_assert!((back[1] - b).abs() <= 1e-9 * (1.0 + b.abs()));
    }

    #[test]
    fn recursive_estimator_matches_batch(
        cmds in prop::collection::vec((-250.0..250.0f64, -250.0..250.0f64), 0..60),
        lag in 0usize..4,
        p_pcc in 0.0..400.0f64,
    ) {
        let model = default_plant_model(0.1);
        let mut est = DemandEstimator::new(model.clone(), lag).unwrap();
        let mut history = Vec::new();
        for &(p, q) in &cmds {
            est.estimate(p_pcc, 0.0);
            est.record([p, q]);
            history.push([p, q]);
        }
        let fast = est.estimate(p_pcc, 0.0);
        let slow = estimate_demand(p_pcc, 0.0, &history, &model, lag);
        prop_assert!((fast[0] - slow[0]).abs() < 1e-9);
        prop_assert!((fast[1] - slow[1]).abs() < 1e-9);
    }

    #[test]
    fn controller_respects_limits_on_any_input(
        samples in prop::collection::vec((-500.0..800.0f64, -300.0..300.0f64, 0.0..100.0f64, prop::bool::weighted(0.9)), 1..300),
        mode in prop::sample::select(vec![Mode::Off, Mode::Adaptive, Mode::Manual]),
        ramp in 1.0..100.0f64,
    ) {
        let mut cfg = ControllerConfig::default();
        cfg.mode = mode;
        cfg.rate_limit = 8.0;
        cfg.manual_ref_p = 150.0;
        cfg.inverter.ramp_limit = ramp;
        let mut c = Controller::new(cfg, default_plant_model(0.1)).unwrap();
        let mut prev = [0.0, 0.0];
        for (p, q, soc, fresh) in samples {
            let m = fresh.then_some(Measurements { p_pcc: p, q_pcc: q, soc, p_pv: 20.0 });
            let r = c.tick(m);
            for (now, before) in [(r.cmd.p, prev[0]), (r.cmd.q, prev[1])] {
                prop_assert!(now.abs() <= 250.0);
                prop_assert!((now - before).abs() <= ramp * 0.1 + 1e-9);
            }
            if r.flags.saturated_p || r.flags.saturated_q {
                prop_assert!(r.control_law_residual().iter().all(|e| *e <= 1e-12));
            }
            prev = [r.cmd.p, r.cmd.q];
        }
    }
}

#[test]
fn pid_integrates_error() {
    let g = PidGains::<f64>::new(0.0, 1.0, 0.0, 0.1).unwrap();
    let mut s = PidState::default();
    for _ in 0..10 {
        s = pid_step(&s, &g, 2.0).1;
    }
    assert!((s.x_i - 2.0).abs() < 1e-12);
}

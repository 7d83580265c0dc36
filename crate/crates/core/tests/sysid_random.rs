use mgrid_core::lti::{LtiModel, LtiRunner};
use mgrid_core::sysid::{identify, random_stable_system, run_step_test, Channel, EraOptions};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_step_error(truth: &LtiModel<f64>, fitted: &LtiModel<f64>, n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for input in 0..2 {
        let a = truth.step_response(input, n);
        let b = fitted.step_response(input, n);
        for (ya, yb) in a.iter().zip(&b) {
            worst = worst.max((ya - yb).amax());
        }
    }
    worst
}

#[test]
fn recovers_random_systems_from_step_tests() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..40 {
        let order = rng.random_range(1..=4);
        let truth = random_stable_system::<f64, _>(&mut rng, order, 2, 2, 0.9, 0.1).unwrap();
        let p = run_step_test(&mut LtiRunner::new(truth.clone()), Channel::P, 3.0, 300).unwrap();
        let q = run_step_test(&mut LtiRunner::new(truth.clone()), Channel::Q, 3.0, 300).unwrap();
        let fit = identify(&p, &q, &EraOptions::default()).unwrap();
        assert!(!fit.reflected);
        assert!(fit.model.n_states() <= order, "case {case}: {} > {order}", fit.model.n_states());
        let err = max_step_error(&truth, &fit.model, 100);
        assert!(err < 1e-6, "case {case} order {order}: error {err:e}");
    }
}

#[test]
fn arbitrary_inputs_match_too() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let truth = random_stable_system::<f64, _>(&mut rng, 4, 2, 2, 0.9, 0.1).unwrap();
    let p = run_step_test(&mut LtiRunner::new(truth.clone()), Channel::P, 1.0, 200).unwrap();
    let q = run_step_test(&mut LtiRunner::new(truth.clone()), Channel::Q, 1.0, 200).unwrap();
    let fit = identify(&p, &q, &EraOptions::default()).unwrap().model;
    let u: Vec<DVector<f64>> =
        (0..150).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-5.0..5.0))).collect();
    for (a, b) in truth.simulate(&u).iter().zip(fit.simulate(&u)) {
        assert!((a - b).amax() < 1e-6);
    }
}

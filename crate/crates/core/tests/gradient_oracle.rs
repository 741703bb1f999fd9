mod common;

use common::*;
use congruent::loss::{distance_kl, distance_lm, OracleEntry};
use rand::Rng;

const MODELS: usize = 60;
const CLASSES: [usize; 4] = [2, 3, 5, 10];

#[test]
fn every_objective_matches_central_differences() {
    for (name, config) in objectives() {
        let mut rng = rng(0xF00D);
        for trial in 0..MODELS {
            let k = CLASSES[trial % CLASSES.len()];
            let model = random_model(&mut rng, k);
            let x = smooth_input(&mut rng, &model);
            let label = rng.gen_range(0..k);
            let old = random_vec(&mut rng, k, 3.0);
            let correct = rng.gen_bool(0.5);
            let loss = |z: &[f64]| {
                let entry = OracleEntry {
                    logits: &old,
                    correct,
                };
                congruent::loss::total_objective(z, label, Some(entry), &config).unwrap()
            };
            let err = worst_param_error(&model, &x, &loss);
            assert!(err <= FD_TOL, "{name}, model {trial} (K={k}): relative error {err:e}");
        }
    }
}

#[test]
fn class_growth_gradient_only_touches_old_logits_through_distance() {
    let mut rng = rng(7);
    for (name, config) in objectives().into_iter().skip(2) {
        let model = random_model(&mut rng, 6);
        let x = smooth_input(&mut rng, &model);
        let old = random_vec(&mut rng, 4, 3.0);
        let loss = |z: &[f64]| {
            let entry = OracleEntry {
                logits: &old,
                correct: true,
            };
            congruent::loss::total_objective(z, 5, Some(entry), &config).unwrap()
        };
        let err = worst_param_error(&model, &x, &loss);
        assert!(err <= FD_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn distance_gradients_in_logit_space() {
    let mut rng = rng(11);
    for _ in 0..200 {
        let k = CLASSES[rng.gen_range(0..CLASSES.len())];
        let new = random_vec(&mut rng, k, 4.0);
        let old = random_vec(&mut rng, k, 4.0);
        for t in [1.0, 3.0, 100.0] {
            let (_, g) = distance_kl(&new, &old, t).unwrap();
            check_logit_grad(&new, &g, |z| distance_kl(z, &old, t).unwrap().0);
        }
        let (_, g) = distance_lm(&new, &old).unwrap();
        check_logit_grad(&new, &g, |z| distance_lm(z, &old).unwrap().0);
    }
}

fn check_logit_grad(at: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) {
    for i in 0..at.len() {
        let mut up = at.to_vec();
        up[i] += FD_STEP;
        let mut down = at.to_vec();
        down[i] -= FD_STEP;
        let numeric = (f(&up) - f(&down)) / (2.0 * FD_STEP);
        let err = relative_error(grad[i], numeric);
        assert!(err <= FD_TOL, "coordinate {i}: analytic {} numeric {numeric}", grad[i]);
    }
}

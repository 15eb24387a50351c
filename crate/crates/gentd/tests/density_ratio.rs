mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gentd::density_ratio::{
    dice_loss_tables, ratio_conditioning, true_ratio, DensityRatioState, RatioInit,
};
use gentd::harness::experiment::Environment;
use gentd::mdp::{BehaviorDistribution, TransitionSampler};

/// `E_{D . P}[state after one step with beta = 1] - state`, by enumeration.
fn expected_increment(s: &DensityRatioState, env: &Environment) -> (DVector<f64>, DVector<f64>, f64) {
    let n = env.kernel.size();
    let k = s.w_rho.len();
    let (mut dr, mut df, mut de) = (DVector::zeros(k), DVector::zeros(k), 0.0);
    for x in 0..n {
        for y in 0..n {
            let p = env.behavior.probs()[x] * env.kernel.matrix()[(x, y)];
            let mut t = s.clone();
            t.dice_step(x, y, 1.0);
            dr += (&t.w_rho - &s.w_rho) * p;
            df += (&t.w_f - &s.w_f) * p;
            de += (t.eta - s.eta) * p;
        }
    }
    (dr, df, de)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mean_update_vanishes_at_the_saddle_point(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = common::small_env(&mut rng, 3, 0.8);
        let n = env.kernel.size();
        let rho = true_ratio(&env.mu, &env.behavior).unwrap();
        prop_assert!((rho.dot(&env.behavior.to_vector()) - 1.0).abs() < 1e-12);
        let mut s = DensityRatioState::new(DMatrix::identity(n, n), &env.behavior, RatioInit::Zero).unwrap();
        s.w_rho = rho.clone();
        let (dr, df, de) = expected_increment(&s, &env);
        prop_assert!(dr.amax() < 1e-12 && df.amax() < 1e-12 && de.abs() < 1e-12);
        // Away from the saddle point the critic feels a pull.
        s.w_rho = DVector::from_element(n, 1.0);
        let (_, df, _) = expected_increment(&s, &env);
        prop_assert!(df.amax() > 1e-8 || (rho.add_scalar(-1.0)).amax() < 1e-6);
    }

    #[test]
    fn saddle_objective_is_stationary_at_the_true_ratio(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = common::small_env(&mut rng, 3, 0.8);
        let n = env.kernel.size();
        let rho = true_ratio(&env.mu, &env.behavior).unwrap();
        let f = DVector::zeros(n);
        let loss = |r: &DVector<f64>, f: &DVector<f64>, e: f64| {
            dice_loss_tables(r, f, e, &env.behavior, &env.kernel)
        };
        prop_assert!(loss(&rho, &f, 0.0).abs() < 1e-14);
        let eps = 1e-6;
        for i in 0..n {
            let mut ep = DVector::zeros(n);
            ep[i] = eps;
            let gr = (loss(&(&rho + &ep), &f, 0.0) - loss(&(&rho - &ep), &f, 0.0)) / (2.0 * eps);
            let gf = (loss(&rho, &(&f + &ep), 0.0) - loss(&rho, &(&f - &ep), 0.0)) / (2.0 * eps);
            prop_assert!(gr.abs() < 1e-8 && gf.abs() < 1e-8);
        }
        let ge = (loss(&rho, &f, eps) - loss(&rho, &f, -eps)) / (2.0 * eps);
        prop_assert!(ge.abs() < 1e-8);
        // Concave in the critic: any f != 0 lowers the objective at the true ratio.
        let probe = DVector::from_fn(n, |i, _| (i as f64 + 1.0).sin());
        prop_assert!(loss(&rho, &probe, 0.0) < 0.0);
    }

    #[test]
    fn projected_step_stays_in_the_ball(seed in any::<u64>(), radius in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = common::small_env(&mut rng, 3, 0.8);
        let n = env.kernel.size();
        let mut s = DensityRatioState::new(DMatrix::identity(n, n), &env.behavior, RatioInit::Ones).unwrap();
        s.radius = radius;
        let sampler = TransitionSampler::new(&env.behavior, &env.mdp, &env.policy).unwrap();
        let na = env.mdp.num_actions();
        for _ in 0..200 {
            let t = sampler.sample(&mut rng);
            s.dice_step(t.pair(na), t.next_pair(na), 0.5);
            prop_assert!(s.w_rho.norm() <= radius * (1.0 + 1e-12));
        }
    }
}

#[test]
fn stochastic_ratio_learning_converges_on_a_small_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let env = common::small_env(&mut rng, 2, 0.8);
    let n = env.kernel.size();
    let rho = true_ratio(&env.mu, &env.behavior).unwrap();
    let sampler = TransitionSampler::new(&env.behavior, &env.mdp, &env.policy).unwrap();
    let na = env.mdp.num_actions();
    let mut s = DensityRatioState::new(DMatrix::identity(n, n), &env.behavior, RatioInit::Ones).unwrap();
    for t in 0..1_000_000u64 {
        let tr = sampler.sample(&mut rng);
        let beta = 0.05 * 1e5 / (t as f64 + 1e5);
        s.dice_step(tr.pair(na), tr.next_pair(na), beta);
    }
    let err = (s.ratio_table() - &rho).amax();
    assert!(err < 0.05, "ratio error {err}");
    assert!(s.eta.abs() < 0.05, "eta {}", s.eta);
}

#[test]
fn ones_init_fits_the_on_policy_guess() {
    let d = BehaviorDistribution::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let s = DensityRatioState::new(DMatrix::identity(4, 4), &d, RatioInit::Ones).unwrap();
    assert!((s.ratio_table() - DVector::from_element(4, 1.0)).amax() < 1e-12);
    let z = DensityRatioState::new(DMatrix::identity(4, 4), &d, RatioInit::Zero).unwrap();
    assert_eq!(z.ratio_table(), DVector::zeros(4));
    let dup = DMatrix::from_fn(4, 2, |r, _| r as f64);
    assert!(DensityRatioState::new(dup, &d, RatioInit::Zero).is_err());
    assert!(DensityRatioState::new(DMatrix::identity(3, 3), &d, RatioInit::Zero).is_err());
}

#[test]
fn clipping_only_affects_negative_estimates() {
    let d = BehaviorDistribution::uniform(3);
    let mut s = DensityRatioState::new(DMatrix::identity(3, 3), &d, RatioInit::Zero).unwrap();
    s.w_rho = DVector::from_vec(vec![-0.5, 0.0, 2.0]);
    assert_eq!(s.evaluate_ratio(0), -0.5);
    s.clip_negative = true;
    assert_eq!(s.ratio_table(), DVector::from_vec(vec![0.0, 0.0, 2.0]));
}

#[test]
fn tabular_dynamics_are_well_conditioned() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let env = common::small_env(&mut rng, 3, 0.8);
    let n = env.kernel.size();
    let c = ratio_conditioning(&DMatrix::identity(n, n), &env.behavior, &env.kernel);
    // A is singular for tabular psi; the normalization row fixes the full system.
    assert!(c.a_min_singular < 1e-12);
    assert!(c.dynamics_min_singular > 1e-6);
}

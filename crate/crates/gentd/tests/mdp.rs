use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gentd::gvf::backward_kernel;
use gentd::harness::envs::build_baird;
use gentd::harness::random::random_chain;
use gentd::mdp::{
    q_function, softmax_score, state_action_kernel, stationary_distribution, Policy,
    StateActionKernel, TabularMdp, TransitionSampler,
};

/// Independent oracle: iterate `mu <- mu P` on the lazy chain until it stops moving.
fn power_oracle(k: &StateActionKernel) -> DVector<f64> {
    let n = k.size();
    let lazy = (k.matrix() + DMatrix::identity(n, n)) * 0.5;
    let mut mu = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..200_000 {
        let next = lazy.tr_mul(&mu);
        let done = (&next - &mu).amax() < 1e-15;
        mu = next;
        if done {
            break;
        }
    }
    mu
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stationary_matches_power_iteration(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, mu) = random_chain(&mut rng, 30).unwrap();
        let oracle = power_oracle(&k);
        prop_assert!((mu.mu() - oracle).amax() < 1e-9);
        prop_assert!(mu.residual(&k) < 1e-10);
        prop_assert!((mu.mu().sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernels_are_row_stochastic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, mu) = random_chain(&mut rng, 30).unwrap();
        let back = backward_kernel(&k, &mu);
        for m in [k.matrix().clone(), back.clone()] {
            for r in 0..m.nrows() {
                prop_assert!((m.row(r).sum() - 1.0).abs() < 1e-12);
                prop_assert!(m.row(r).iter().all(|v| *v >= 0.0));
            }
        }
        // mu is stationary for the reversed chain as well.
        prop_assert!((back.tr_mul(mu.mu()) - mu.mu()).amax() < 1e-12);
    }

    #[test]
    fn softmax_score_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ns, na) = (rng.random_range(1..4usize), rng.random_range(2..4usize));
        let w: Vec<f64> = (0..ns * na).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let pi = Policy::softmax(ns, na, w.clone()).unwrap();
        let eps = 1e-6;
        for s in 0..ns {
            for a in 0..na {
                let score = softmax_score(&pi, s, a).unwrap();
                for j in 0..w.len() {
                    let mut wp = w.clone();
                    wp[j] += eps;
                    let mut wm = w.clone();
                    wm[j] -= eps;
                    let fp = Policy::softmax(ns, na, wp).unwrap().prob(s, a).ln();
                    let fm = Policy::softmax(ns, na, wm).unwrap().prob(s, a).ln();
                    prop_assert!((score[j] - (fp - fm) / (2.0 * eps)).abs() < 1e-7);
                }
            }
        }
    }
}

#[test]
fn q_function_matches_value_iteration() {
    let (mdp, pi, _) = build_baird().unwrap();
    let q = q_function(&mdp, &pi).unwrap();
    let k = state_action_kernel(&mdp, &pi).unwrap();
    let mut v = DVector::zeros(mdp.num_pairs());
    for _ in 0..5000 {
        v = mdp.reward_vector() + k.matrix() * &v * mdp.discount();
    }
    assert!((q - v).amax() < 1e-9);
}

#[test]
fn baird_stationary_distribution() {
    let (mdp, pi, _) = build_baird().unwrap();
    let mu = stationary_distribution(&state_action_kernel(&mdp, &pi).unwrap()).unwrap();
    // Oracle: the state chain jumps to state 6 w.p. p = pi(solid), otherwise uniform on 0..=5.
    let p = 1.0 / (1.0 + (-1.8f64).exp());
    let m6 = p;
    let m_other = (1.0 - p) / 6.0;
    for s in 0..7 {
        let ms = if s == 6 { m6 } else { m_other };
        assert!((mu.mu()[2 * s] - ms * (1.0 - p)).abs() < 1e-12);
        assert!((mu.mu()[2 * s + 1] - ms * p).abs() < 1e-12);
    }
}

/// Joint pair/successor frequencies stay within 3.5 sigma of `D(x) P_pi(x, y)`.
#[test]
fn sampler_frequencies_within_binomial_bounds() {
    let (mdp, pi, d) = build_baird().unwrap();
    let k = state_action_kernel(&mdp, &pi).unwrap();
    let sampler = TransitionSampler::new(&d, &mdp, &pi).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = mdp.num_pairs();
    let draws = 400_000;
    let mut counts = DMatrix::<f64>::zeros(n, n);
    for _ in 0..draws {
        let t = sampler.sample(&mut rng);
        counts[(t.pair(2), t.next_pair(2))] += 1.0;
    }
    let mut worst: f64 = 0.0;
    for x in 0..n {
        for y in 0..n {
            let p = d.probs()[x] * k.matrix()[(x, y)];
            if p == 0.0 {
                assert_eq!(counts[(x, y)], 0.0);
                continue;
            }
            let sd = (draws as f64 * p * (1.0 - p)).sqrt();
            worst = worst.max((counts[(x, y)] - draws as f64 * p).abs() / sd);
        }
    }
    assert!(worst < 4.5, "worst z {worst}");
}

#[test]
fn reducible_or_malformed_models_are_rejected() {
    assert!(TabularMdp::new(2, 1, vec![0.5, 0.6, 0.5, 0.5], vec![0.0, 0.0], 0.9).is_err());
    assert!(TabularMdp::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.0], 0.9).is_err());
    // State 0 is transient, so its stationary mass is zero.
    let mdp = TabularMdp::new(2, 1, vec![0.5, 0.5, 0.0, 1.0], vec![0.0, 0.0], 0.9).unwrap();
    let k = state_action_kernel(&mdp, &Policy::uniform(2, 1)).unwrap();
    assert!(stationary_distribution(&k).is_err());
    assert!(Policy::uniform(2, 1).score_matrix().is_err());
}

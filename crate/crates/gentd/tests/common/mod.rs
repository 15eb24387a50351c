#![allow(dead_code)]

use rand::Rng;

use gentd::harness::experiment::Environment;
use gentd::mdp::{BehaviorDistribution, Policy, TabularMdp};

fn simplex<R: Rng>(rng: &mut R, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| floor + rng.random::<f64>()).collect();
    let t: f64 = raw.iter().sum();
    raw.iter().map(|v| v / t).collect()
}

/// Dense random MDP with a softmax target policy and a random behavior distribution.
pub fn small_env<R: Rng>(rng: &mut R, max_states: usize, gamma: f64) -> Environment {
    let ns = rng.random_range(2..=max_states);
    let na = 2;
    let rows: Vec<Vec<f64>> = (0..ns * na).map(|_| simplex(rng, ns, 0.1)).collect();
    let reward = (0..ns * na).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let mdp = TabularMdp::from_rows(ns, na, &rows, reward, gamma).unwrap();
    let w = (0..ns * na).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let pi = Policy::softmax(ns, na, w).unwrap();
    let d = BehaviorDistribution::new(simplex(rng, ns * na, 0.2)).unwrap();
    Environment::new(mdp, pi, d).unwrap()
}

//! Plain-text model files.
//!
//! ```text
//! # comments start with '#'
//! states = 3
//! actions = 1
//! discount = 0.9
//! transition = 0.1 0.9 0     # one line per pair, canonical order
//! transition = 0.1 0 0.9
//! transition = 0 0.1 0.9
//! reward = 1 0 1
//! policy = 1 1 1             # or: logits = ...
//! behavior = 0.333333333333333333 0.333333333333333333 0.333333333333333333
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mdp::{BehaviorDistribution, Policy, TabularMdp};

fn numbers(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| Error::Config(format!("{key}: {e}"))))
        .collect()
}

/// Parses a model file. A missing `behavior` line means uniform `D`; a missing policy
/// means the uniform policy.
pub fn parse_model(text: &str) -> Result<(TabularMdp, Policy, BehaviorDistribution)> {
    let mut states = None;
    let mut actions = None;
    let mut discount = None;
    let mut rows = Vec::new();
    let mut reward = None;
    let mut policy = None;
    let mut logits = None;
    let mut behavior = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let usize_of = |v: &str| {
            v.parse::<usize>().map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))
        };
        match key {
            "states" => states = Some(usize_of(value)?),
            "actions" => actions = Some(usize_of(value)?),
            "discount" => {
                discount = Some(
                    value.parse::<f64>().map_err(|e| Error::Config(format!("discount: {e}")))?,
                )
            }
            "transition" => rows.push(numbers(key, value)?),
            "reward" => reward = Some(numbers(key, value)?),
            "policy" => policy = Some(numbers(key, value)?),
            "logits" => logits = Some(numbers(key, value)?),
            "behavior" => behavior = Some(numbers(key, value)?),
            other => return Err(Error::Config(format!("unknown model key '{other}'"))),
        }
    }
    let ns = states.ok_or_else(|| Error::Config("missing 'states'".into()))?;
    let na = actions.ok_or_else(|| Error::Config("missing 'actions'".into()))?;
    let gamma = discount.ok_or_else(|| Error::Config("missing 'discount'".into()))?;
    let reward = reward.ok_or_else(|| Error::Config("missing 'reward'".into()))?;
    if rows.len() != ns * na {
        return Err(Error::Config(format!("expected {} transition lines, got {}", ns * na, rows.len())));
    }
    let mdp = TabularMdp::from_rows(ns, na, &rows, reward, gamma)?;
    let pi = match (policy, logits) {
        (Some(_), Some(_)) => return Err(Error::Config("give either 'policy' or 'logits'".into())),
        (Some(p), None) => Policy::new(ns, na, p)?,
        (None, Some(w)) => Policy::softmax(ns, na, w)?,
        (None, None) => Policy::uniform(ns, na),
    };
    let d = match behavior {
        Some(d) => BehaviorDistribution::new(d)?,
        None => BehaviorDistribution::uniform(ns * na),
    };
    Ok((mdp, pi, d))
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes a model in the format accepted by [`parse_model`].
pub fn write_model(mdp: &TabularMdp, pi: &Policy, d: &BehaviorDistribution) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "states = {}", mdp.num_states());
    let _ = writeln!(out, "actions = {}", mdp.num_actions());
    let _ = writeln!(out, "discount = {}", mdp.discount());
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            let _ = writeln!(out, "transition = {}", join(mdp.next_state_probs(s, a)));
        }
    }
    let _ = writeln!(out, "reward = {}", join(mdp.reward_vector().as_slice()));
    match pi.weights() {
        Some(w) => {
            let _ = writeln!(out, "logits = {}", join(w));
        }
        None => {
            let _ = writeln!(out, "policy = {}", join(pi.probs()));
        }
    }
    let _ = writeln!(out, "behavior = {}", join(d.probs()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::envs::build_baird;

    #[test]
    fn round_trip_baird() {
        let (mdp, pi, d) = build_baird().unwrap();
        let (m2, p2, d2) = parse_model(&write_model(&mdp, &pi, &d)).unwrap();
        assert_eq!(mdp, m2);
        assert_eq!(pi, p2);
        assert_eq!(d, d2);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_rows() {
        assert!(parse_model("states = 1\nactions = 1\nfoo = 2").is_err());
        let text = "states = 1\nactions = 1\ndiscount = 0.5\ntransition = 0.5\nreward = 0";
        assert!(parse_model(text).is_err());
    }
}

//! Exhaustive enumeration of state-level Markov policies. Test oracle only.

use crate::error::{Error, Result};
use crate::model::{Action, BlockMdp, LatentState};

use super::{ExtendedBmdp, TruncationSets};

/// Largest policy space the enumerators will walk.
pub const ENUMERATION_LIMIT: f64 = 1e7;

/// Choice sets per `(layer, state)` for `layers`; returns the flat list.
fn choice_sets(model: &BlockMdp, layers: usize, allowed: impl Fn(usize, usize) -> Vec<Action>) -> Result<Vec<Vec<Action>>> {
    let mut sets = Vec::new();
    let mut count = 1.0f64;
    for l in 0..layers {
        for s in 0..model.layer_size(l) {
            let set = allowed(l, s);
            count *= set.len() as f64;
            sets.push(set);
        }
    }
    if count > ENUMERATION_LIMIT {
        return Err(Error::GuardExceeded { count, limit: ENUMERATION_LIMIT });
    }
    Ok(sets)
}

/// Calls `visit` with every assignment, as per-layer action vectors.
fn enumerate(model: &BlockMdp, layers: usize, sets: &[Vec<Action>], mut visit: impl FnMut(&[Vec<Action>])) {
    let mut digits = vec![0usize; sets.len()];
    let mut policy: Vec<Vec<Action>> = (0..layers).map(|l| vec![0; model.layer_size(l)]).collect();
    loop {
        let mut k = 0;
        for row in policy.iter_mut() {
            for a in row.iter_mut() {
                *a = sets[k][digits[k]];
                k += 1;
            }
        }
        visit(&policy);
        let mut i = 0;
        loop {
            if i == digits.len() {
                return;
            }
            digits[i] += 1;
            if digits[i] < sets[i].len() {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
    }
}

/// Forward pass of a state-level policy; returns the target-layer law and
/// the expected reward over layers `< layers_acting`.
fn forward(model: &BlockMdp, policy: &[Vec<Action>], target_layer: usize) -> (Vec<f64>, f64) {
    let mut dist = model.initial().to_vec();
    let mut reward = 0.0;
    for l in 0..policy.len() {
        for (s, &p) in dist.iter().enumerate() {
            reward += p * model.reward(l, s, policy[l][s]).unwrap_or(0.0);
        }
        if l == target_layer || l + 1 == model.horizon() {
            break;
        }
        let mut next = vec![0.0; model.layer_size(l + 1)];
        for (s, &p) in dist.iter().enumerate() {
            for (n, q) in next.iter_mut().zip(model.transition(l, s, policy[l][s])) {
                *n += p * q;
            }
        }
        dist = next;
    }
    (dist, reward)
}

fn max_reach_over(model: &BlockMdp, target: LatentState, sets: &[Vec<Action>]) -> f64 {
    let mut best = 0.0f64;
    if target.layer == 0 {
        return model.initial()[target.index];
    }
    enumerate(model, target.layer, sets, |policy| {
        let (dist, _) = forward(model, policy, target.layer);
        best = best.max(dist[target.index]);
    });
    best
}

/// Max reach of `target` over every state-level Markov policy of `model`.
pub fn brute_force_max_reach(model: &BlockMdp, target: LatentState) -> Result<f64> {
    let a = model.num_actions();
    let sets = choice_sets(model, target.layer, |_, _| (0..a).collect())?;
    Ok(max_reach_over(model, target, &sets))
}

/// Max reach of a base `target` in the extension over Markov policies that
/// play the terminal action on the forced states and anything elsewhere.
pub fn brute_force_max_reach_truncated(ext: &ExtendedBmdp, forced: &[Vec<bool>], target: LatentState) -> Result<f64> {
    let sets = extended_sets(ext, forced, target.layer)?;
    Ok(max_reach_over(ext.model(), target, &sets))
}

fn extended_sets(ext: &ExtendedBmdp, forced: &[Vec<bool>], layers: usize) -> Result<Vec<Vec<Action>>> {
    let term = ext.terminal_action();
    choice_sets(ext.model(), layers, |l, s| {
        if ext.is_terminal(LatentState::new(l, s)) {
            // Every action at a terminal state has the same effect.
            vec![0]
        } else if forced[l][s] {
            vec![term]
        } else {
            (0..=term).collect()
        }
    })
}

/// Forced sets by literal iteration of the class definition, each max reach
/// found by enumeration in the extension.
pub fn brute_force_truncation(ext: &ExtendedBmdp, eps: f64) -> Result<TruncationSets> {
    let base = ext.base();
    let mut forced: Vec<Vec<bool>> = (0..base.horizon()).map(|l| vec![false; base.layer_size(l)]).collect();
    let mut reach = Vec::with_capacity(base.horizon());
    for t in 0..base.horizon() {
        let row = (0..base.layer_size(t))
            .map(|s| brute_force_max_reach_truncated(ext, &forced, LatentState::new(t, s)))
            .collect::<Result<Vec<f64>>>()?;
        forced[t] = row.iter().map(|&p| p < eps).collect();
        reach.push(row);
    }
    Ok(TruncationSets { eps, forced, reach })
}

/// Best expected return over every state-level Markov policy.
pub fn brute_force_optimal_value(model: &BlockMdp) -> Result<f64> {
    if !model.has_reward() {
        return Err(Error::MissingReward);
    }
    let a = model.num_actions();
    let sets = choice_sets(model, model.horizon(), |_, _| (0..a).collect())?;
    let mut best = f64::NEG_INFINITY;
    enumerate(model, model.horizon(), &sets, |policy| {
        best = best.max(forward(model, policy, model.horizon() - 1).1);
    });
    Ok(best)
}

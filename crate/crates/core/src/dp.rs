//! Exact dynamic programming on the latent dynamics: forward occupancy for
//! composed (possibly non-Markov) policies, max-reach and value iteration.
//!
//! Stacks carry one index between layers, so their law is computed exactly by
//! a forward pass over the augmented state `(s, carried index)`, with
//! observations marginalized through the emission rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Action, BlockMdp, LatentState};
use crate::policy::{Behavior, LayerRule, MarkovPolicy, Schedule, StackPolicy};

/// Per-layer latent visitation probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyTable {
    /// First layer covered by `layers`.
    pub start_layer: usize,
    pub layers: Vec<Vec<f64>>,
}

impl OccupancyTable {
    pub fn get(&self, state: LatentState) -> f64 {
        state
            .layer
            .checked_sub(self.start_layer)
            .and_then(|k| self.layers.get(k))
            .map_or(0.0, |row| row[state.index])
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.layers[layer - self.start_layer]
    }

    pub fn end_layer(&self) -> usize {
        self.start_layer + self.layers.len() - 1
    }

    /// Averages tables with identical layout.
    pub fn mean(tables: &[OccupancyTable]) -> Option<OccupancyTable> {
        let first = tables.first()?;
        let mut out = first.clone();
        for t in &tables[1..] {
            for (row, other) in out.layers.iter_mut().zip(&t.layers) {
                for (v, o) in row.iter_mut().zip(other) {
                    *v += o;
                }
            }
        }
        let k = tables.len() as f64;
        out.layers.iter_mut().flatten().for_each(|v| *v /= k);
        Some(out)
    }
}

/// Result of a forward pass.
#[derive(Clone, Debug)]
pub struct Propagation {
    pub occupancy: OccupancyTable,
    /// Expected reward collected on the layers where actions were taken.
    pub expected_reward: f64,
}

/// Options for [`propagate`].
#[derive(Clone, Copy, Debug, Default)]
pub struct PropagateOptions {
    /// Take an action at `end_layer` as well (needed for rewards there).
    pub act_on_last: bool,
    /// Accumulate `r̄(s, a)`; requires a rewarded model.
    pub collect_reward: bool,
}


/// Forward pass from `start` (a distribution over layer `start_layer`)
/// through `end_layer`, following `schedule`.
pub fn propagate(
    model: &BlockMdp,
    start_layer: usize,
    start: &[f64],
    schedule: &Schedule,
    end_layer: usize,
    opts: PropagateOptions,
) -> Result<Propagation> {
    if end_layer >= model.horizon() || start_layer > end_layer {
        return Err(Error::LayerMismatch(format!(
            "cannot propagate from layer {start_layer} to {end_layer}"
        )));
    }
    if start.len() != model.layer_size(start_layer) {
        return Err(Error::ShapeMismatch("start distribution has wrong length".into()));
    }
    if opts.collect_reward && !model.has_reward() {
        return Err(Error::MissingReward);
    }
    schedule.check_alignment()?;

    let num_actions = model.num_actions();
    let mut occupancy = Vec::with_capacity(end_layer - start_layer + 1);
    let mut expected_reward = 0.0;

    // Mass over (state, carried index); width 1 unless a stack is active.
    let mut width = mem_width(schedule, start_layer);
    let mut mass = vec![0.0; start.len() * width];
    let entry = entry_index(schedule, start_layer);
    for (s, &p) in start.iter().enumerate() {
        mass[s * width + entry] += p;
    }

    for layer in start_layer..=end_layer {
        let n = model.layer_size(layer);
        occupancy.push((0..n).map(|s| mass[s * width..(s + 1) * width].iter().sum()).collect());
        let acting = layer < end_layer || opts.act_on_last;
        if !acting {
            break;
        }
        let last = layer + 1 >= model.horizon() || layer == end_layer;
        let next_width = if last { 1 } else { mem_width(schedule, layer + 1) };
        let carry = !last && continues_stack(schedule, layer);
        let next_entry = if last { 0 } else { entry_index(schedule, layer + 1) };
        let next_n = if last { 0 } else { model.layer_size(layer + 1) };
        let mut next = vec![0.0; next_n * next_width];

        for s in 0..n {
            for mem in 0..width {
                let w = mass[s * width + mem];
                if w == 0.0 {
                    continue;
                }
                let mut emit = |action: Action, carried: usize, p: f64| {
                    let p = w * p;
                    if opts.collect_reward {
                        expected_reward += p * model.reward(layer, s, action).unwrap_or(0.0);
                    }
                    if !last {
                        let slot = if carry { carried } else { next_entry };
                        for (s2, &t) in model.transition(layer, s, action).iter().enumerate() {
                            if t > 0.0 {
                                next[s2 * next_width + slot] += p * t;
                            }
                        }
                    }
                };
                let seg = schedule.active(layer).ok_or_else(|| undefined_at(model, layer, s))?;
                match &schedule.segment(seg).1 {
                    Behavior::Uniform => {
                        let p = 1.0 / num_actions as f64;
                        for a in 0..num_actions {
                            emit(a, 0, p);
                        }
                    }
                    Behavior::Markov(policy) => {
                        if let Some(LayerRule::ByState(actions)) = policy.rule(layer) {
                            let a = *actions.get(s).ok_or_else(|| undefined_at(model, layer, s))?;
                            emit(a, 0, 1.0);
                        } else {
                            for &(x, q) in model.emission(layer, s) {
                                if q > 0.0 {
                                    emit(policy.action(model, layer, x)?, 0, q);
                                }
                            }
                        }
                    }
                    Behavior::Stack(stack) => {
                        let node = stack
                            .top
                            .layer_at(layer)
                            .ok_or_else(|| undefined_at(model, layer, s))?;
                        for &(x, q) in model.emission(layer, s) {
                            if q > 0.0 {
                                let (a, j, _) = node.decide(x, mem);
                                emit(a, j, q);
                            }
                        }
                    }
                }
            }
        }
        if last {
            break;
        }
        mass = next;
        width = next_width;
    }

    Ok(Propagation {
        occupancy: OccupancyTable { start_layer, layers: occupancy },
        expected_reward,
    })
}

fn undefined_at(model: &BlockMdp, layer: usize, s: usize) -> Error {
    let observation = model.emission(layer, s).first().map_or(usize::MAX, |&(x, _)| x);
    Error::PolicyUndefined { layer, observation }
}

fn mem_width(schedule: &Schedule, layer: usize) -> usize {
    match schedule.active(layer).map(|i| &schedule.segment(i).1) {
        Some(Behavior::Stack(s)) if layer <= s.end_layer() => s.num_indices(),
        _ => 1,
    }
}

/// Carried-index slot used when mass enters `layer` from outside the stack.
fn entry_index(schedule: &Schedule, layer: usize) -> usize {
    match schedule.active(layer).map(|i| schedule.segment(i)) {
        Some((start, Behavior::Stack(s))) if *start == layer => s.index,
        _ => 0,
    }
}

/// Whether the stack in charge at `layer` is still in charge at `layer + 1`.
fn continues_stack(schedule: &Schedule, layer: usize) -> bool {
    match (schedule.active(layer), schedule.active(layer + 1)) {
        (Some(a), Some(b)) if a == b => match &schedule.segment(a).1 {
            Behavior::Stack(s) => layer < s.end_layer(),
            _ => false,
        },
        _ => false,
    }
}

/// Occupancy of a full schedule from the initial distribution.
pub fn schedule_occupancy(model: &BlockMdp, schedule: &Schedule, end_layer: usize) -> Result<OccupancyTable> {
    Ok(propagate(model, 0, model.initial(), schedule, end_layer, PropagateOptions::default())?.occupancy)
}

/// `d^π(s)` for a Markov policy, every layer.
pub fn exact_occupancy(model: &BlockMdp, policy: &MarkovPolicy) -> Result<OccupancyTable> {
    schedule_occupancy(model, &Schedule::markov(policy.clone()), model.horizon() - 1)
}

/// Exact occupancy of `unif(roll_in) ∘_t stack`, where `t` is the stack's
/// start layer; an empty roll-in means the bare initial distribution.
/// Layers after the stack's target are not covered.
pub fn exact_occupancy_stack(
    model: &BlockMdp,
    roll_in: &[Schedule],
    stack: &StackPolicy,
) -> Result<OccupancyTable> {
    let end = stack.target_layer();
    if end >= model.horizon() {
        return Err(Error::LayerMismatch(format!(
            "stack targets layer {end} but the horizon is {}",
            model.horizon()
        )));
    }
    let t = stack.start_layer();
    let behavior = Behavior::Stack(stack.clone());
    if roll_in.is_empty() {
        return schedule_occupancy(model, &Schedule::empty().then(t, behavior), end);
    }
    let tables = roll_in
        .iter()
        .map(|r| schedule_occupancy(model, &r.clone().then(t, behavior.clone()), end))
        .collect::<Result<Vec<_>>>()?;
    Ok(OccupancyTable::mean(&tables).expect("non-empty"))
}

/// Exact expected return of a schedule over the full horizon.
pub fn schedule_return(model: &BlockMdp, schedule: &Schedule) -> Result<f64> {
    let opts = PropagateOptions { act_on_last: true, collect_reward: true };
    Ok(propagate(model, 0, model.initial(), schedule, model.horizon() - 1, opts)?.expected_reward)
}

/// `max_π d^π(target)` over Markov policies, with a maximizing state-level
/// policy (actions at and after the target layer are 0).
pub fn max_reach_probability(model: &BlockMdp, target: LatentState) -> (f64, MarkovPolicy) {
    max_reach_with(model, target, |_, _| false)
}

/// Max-reach DP where states with `forced(layer, s)` contribute nothing
/// (the terminal action of the extended model leaves the base layers).
pub(crate) fn max_reach_with(
    model: &BlockMdp,
    target: LatentState,
    forced: impl Fn(usize, usize) -> bool,
) -> (f64, MarkovPolicy) {
    let horizon = model.horizon();
    let mut actions: Vec<Vec<Action>> = (0..horizon).map(|h| vec![0; model.layer_size(h)]).collect();
    let mut value: Vec<f64> = (0..model.layer_size(target.layer))
        .map(|s| if s == target.index { 1.0 } else { 0.0 })
        .collect();
    for layer in (0..target.layer).rev() {
        let n = model.layer_size(layer);
        let mut v = vec![0.0; n];
        for s in 0..n {
            if forced(layer, s) {
                continue;
            }
            let (a, best) = best_action(model, layer, s, |_| 0.0, &value);
            v[s] = best;
            actions[layer][s] = a;
        }
        value = v;
    }
    let p = model.initial().iter().zip(&value).map(|(a, b)| a * b).sum();
    (p, MarkovPolicy::from_state_actions(actions))
}

/// Optimal expected return and an optimal state-level policy.
pub fn value_iteration(model: &BlockMdp) -> Result<(f64, MarkovPolicy)> {
    if !model.has_reward() {
        return Err(Error::MissingReward);
    }
    let horizon = model.horizon();
    let mut actions: Vec<Vec<Action>> = (0..horizon).map(|h| vec![0; model.layer_size(h)]).collect();
    let mut value: Vec<f64> = Vec::new();
    for layer in (0..horizon).rev() {
        let n = model.layer_size(layer);
        let mut v = vec![0.0; n];
        for s in 0..n {
            let reward = |a: Action| model.reward(layer, s, a).unwrap_or(0.0);
            let (a, best) = if layer + 1 == horizon {
                let mut best = (0, reward(0));
                for a in 1..model.num_actions() {
                    if reward(a) > best.1 {
                        best = (a, reward(a));
                    }
                }
                best
            } else {
                best_action(model, layer, s, reward, &value)
            };
            v[s] = best;
            actions[layer][s] = a;
        }
        value = v;
    }
    let total = model.initial().iter().zip(&value).map(|(a, b)| a * b).sum();
    Ok((total, MarkovPolicy::from_state_actions(actions)))
}

/// Greedy backup; ties go to the lowest action.
fn best_action(
    model: &BlockMdp,
    layer: usize,
    s: usize,
    reward: impl Fn(Action) -> f64,
    next_value: &[f64],
) -> (Action, f64) {
    let q = |a: Action| {
        reward(a)
            + model.transition(layer, s, a).iter().zip(next_value).map(|(t, v)| t * v).sum::<f64>()
    };
    let mut best = (0, q(0));
    for a in 1..model.num_actions() {
        let v = q(a);
        if v > best.1 {
            best = (a, v);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::two_layer_chain;

    #[test]
    fn first_layer_is_initial_distribution() {
        let m = two_layer_chain();
        let occ = exact_occupancy(&m, &MarkovPolicy::constant(&m, 1)).unwrap();
        assert_eq!(occ.layer(0), m.initial());
        assert_eq!(occ.layer(1), &[0.0, 1.0]);
    }

    #[test]
    fn uniform_schedule_splits_mass() {
        let m = two_layer_chain();
        let occ = schedule_occupancy(&m, &Schedule::starting_with(Behavior::Uniform), 1).unwrap();
        assert_eq!(occ.layer(1), &[0.5, 0.5]);
    }

    #[test]
    fn chain_max_reach_is_one() {
        let m = two_layer_chain();
        let (p, policy) = max_reach_probability(&m, LatentState::new(1, 1));
        assert_eq!(p, 1.0);
        assert_eq!(policy.action(&m, 0, 0).unwrap(), 1);
        let (p, policy) = max_reach_probability(&m, LatentState::new(1, 0));
        assert_eq!(p, 1.0);
        assert_eq!(policy.action(&m, 0, 0).unwrap(), 0);
    }

    #[test]
    fn value_iteration_needs_reward() {
        let m = two_layer_chain();
        assert!(matches!(value_iteration(&m), Err(Error::MissingReward)));
        let m = m
            .with_rewards(vec![vec![vec![0.0, 0.0]; 2], vec![vec![0.0, 0.0]; 2]])
            .unwrap();
        assert_eq!(value_iteration(&m).unwrap().0, 0.0);
    }

    #[test]
    fn undefined_policy_layer_is_an_error() {
        let m = two_layer_chain();
        let p = MarkovPolicy::undefined(2);
        assert!(matches!(exact_occupancy(&m, &p), Err(Error::PolicyUndefined { layer: 0, .. })));
    }
}

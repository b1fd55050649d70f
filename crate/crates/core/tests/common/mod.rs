#![allow(dead_code)]

use std::sync::Arc;

use musik_core::density::{ConditionalTable, TableShape};
use musik_core::envs::{make_random_bmdp, RandomBmdpSpec};
use musik_core::policy::{Decoder, MarkovPolicy, StackLayer, StackNode, StackPolicy};
use musik_core::BlockMdp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_model(horizon: usize, states: usize, actions: usize, obs: usize, seed: u64) -> BlockMdp {
    make_random_bmdp(&RandomBmdpSpec::uniform(horizon, states, actions, obs, 0.7, seed)).unwrap().0
}

pub fn rewarded_model(horizon: usize, states: usize, actions: usize, seed: u64) -> BlockMdp {
    let mut spec = RandomBmdpSpec::uniform(horizon, states, actions, 1, 0.7, seed);
    spec.rewards = true;
    make_random_bmdp(&spec).unwrap().0
}

/// Tiny instance with per-layer sizes in `1..=max_states` and `1..=max_actions` actions.
pub fn tiny_model(seed: u64, max_h: usize, max_states: usize, max_actions: usize, rewards: bool) -> BlockMdp {
    let mut r = rng(seed ^ 0x9e37_79b9);
    let h = r.random_range(1..=max_h);
    let mut spec = RandomBmdpSpec {
        layer_sizes: (0..h).map(|_| r.random_range(1..=max_states)).collect(),
        num_actions: r.random_range(1..=max_actions),
        obs_per_state: r.random_range(1..=2),
        alpha: [0.0, 0.3, 1.0][r.random_range(0..3)],
        seed,
        rewards,
        plant: None,
    };
    spec.rewards = rewards;
    make_random_bmdp(&spec).unwrap().0
}

pub fn random_policy(model: &BlockMdp, seed: u64) -> MarkovPolicy {
    let mut r = rng(seed);
    MarkovPolicy::from_state_actions(
        (0..model.horizon())
            .map(|h| (0..model.layer_size(h)).map(|_| r.random_range(0..model.num_actions())).collect())
            .collect(),
    )
}

/// Row-stochastic random table over `(a, j)` for every `(z, z')`.
pub fn random_table(model: &BlockMdp, t: usize, h: usize, seed: u64) -> ConditionalTable {
    let shape = TableShape {
        layer: t,
        target_layer: h,
        left: model.layer_size(t),
        right: model.layer_size(h),
        num_actions: model.num_actions(),
        num_indices: model.layer_size(h),
    };
    let mut r = rng(seed);
    let width = shape.width();
    let mut probs = Vec::new();
    for _ in 0..shape.left * shape.right {
        let row: Vec<f64> = (0..width).map(|_| r.random::<f64>()).collect();
        let total: f64 = row.iter().sum();
        probs.extend(row.iter().map(|p| p / total));
    }
    ConditionalTable::from_probs(shape, probs, Some(Arc::new(Decoder::from_model(model)))).unwrap()
}

/// Stack over layers `t..h` with random tables; returns the policy for `index`.
pub fn random_stack(model: &BlockMdp, t: usize, h: usize, index: usize, seed: u64) -> StackPolicy {
    let mut node: Option<Arc<StackNode>> = None;
    for l in (t..h).rev() {
        let layer = StackLayer::new(random_table(model, l, h, seed + l as u64)).unwrap();
        node = Some(StackNode::push(layer, node).unwrap());
    }
    StackPolicy { top: node.unwrap(), index }
}

/// Binomial tolerance for a frequency estimate of `p` from `n` draws.
pub fn sigma(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

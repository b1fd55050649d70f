mod common;

use std::sync::Arc;

use common::*;
use musik_core::analysis::{brute_force_max_reach, brute_force_optimal_value};
use musik_core::density::{ConditionalTable, TableShape};
use musik_core::dp::{exact_occupancy, exact_occupancy_stack, max_reach_probability, schedule_occupancy, value_iteration};
use musik_core::envs::{make_comblock, CombLockSpec};
use musik_core::musik::execute_stack;
use musik_core::policy::{Behavior, Decoder, LayerRule, MarkovPolicy, Schedule, StackLayer, StackNode, StackPolicy};
use musik_core::rng::SeedStream;
use musik_core::simulate::{parallel_samples, rollout, sample_trajectory, ExecStats};
use musik_core::{BlockMdp, LatentState, ModelFile};
use proptest::prelude::*;

const MC: usize = 1_000_000;

/// Per-state visit frequencies over layers `0..=last`.
fn frequencies(model: &BlockMdp, schedule: &Schedule, last: usize, seed: u64) -> Vec<Vec<f64>> {
    let states = parallel_samples(&SeedStream::new(seed), "mc", MC, |rng| {
        let traj = rollout(model, schedule, last, false, rng, &mut ExecStats::default())?;
        Ok(traj.steps.iter().map(|s| s.state).collect::<Vec<_>>())
    })
    .unwrap();
    let mut freq: Vec<Vec<f64>> = (0..=last).map(|h| vec![0.0; model.layer_size(h)]).collect();
    for path in &states {
        for (h, &s) in path.iter().enumerate() {
            freq[h][s] += 1.0 / MC as f64;
        }
    }
    freq
}

// Several cells are compared at once, so the band is 4σ rather than 3σ.
fn assert_close(exact: &[f64], freq: &[f64]) {
    for (p, f) in exact.iter().zip(freq) {
        assert!((p - f).abs() <= 4.0 * sigma(*p, MC) + 1e-12, "exact {p} vs sampled {f}");
    }
}

#[test]
fn occupancy_matches_monte_carlo() {
    let m = random_model(3, 3, 2, 2, 11);
    let p = random_policy(&m, 5);
    let d = exact_occupancy(&m, &p).unwrap();
    let freq = frequencies(&m, &Schedule::markov(p), 2, 1);
    for h in 0..3 {
        assert_close(d.layer(h), &freq[h]);
    }
}

#[test]
fn uniform_transitions_split_evenly() {
    let m = BlockMdp::new(ModelFile {
        horizon: 2,
        layer_sizes: vec![2, 2],
        num_actions: 2,
        initial: vec![0.3, 0.7],
        transitions: vec![vec![vec![vec![0.5, 0.5]; 2]; 2]],
        emissions: vec![vec![vec![(0, 1.0)], vec![(1, 1.0)]], vec![vec![(2, 1.0)], vec![(3, 1.0)]]],
        decoder: vec![(0, 0), (0, 1), (1, 0), (1, 1)],
        rewards: None,
        features: None,
        composable: false,
    })
    .unwrap();
    for seed in 0..4 {
        let d = exact_occupancy(&m, &random_policy(&m, seed)).unwrap();
        assert_eq!(d.layer(0), &[0.3, 0.7]);
        assert_eq!(d.layer(1), &[0.5, 0.5]);
    }
}

#[test]
fn max_reach_and_value_iteration_match_enumeration() {
    for seed in 0..60 {
        let m = tiny_model(seed, 3, 3, 2, true);
        for s in m.all_states() {
            let (p, policy) = max_reach_probability(&m, s);
            let brute = brute_force_max_reach(&m, s).unwrap();
            assert!((p - brute).abs() < 1e-10, "seed {seed} {s}: {p} vs {brute}");
            let achieved = exact_occupancy(&m, &policy).unwrap().get(s);
            assert!((achieved - p).abs() < 1e-10);
        }
        let (v, policy) = value_iteration(&m).unwrap();
        assert!((v - brute_force_optimal_value(&m).unwrap()).abs() < 1e-10);
        let ret = musik_core::dp::schedule_return(&m, &Schedule::markov(policy)).unwrap();
        assert!((ret - v).abs() < 1e-10);
    }
}

#[test]
fn zero_reward_value_is_zero() {
    let m = random_model(3, 2, 2, 1, 3);
    let zeros = (0..3).map(|h| vec![vec![0.0; 2]; m.layer_size(h)]).collect();
    let m = m.with_rewards(zeros).unwrap();
    assert_eq!(value_iteration(&m).unwrap().0, 0.0);
}

#[test]
fn comblock_good_states_reachable() {
    let lock = make_comblock(&CombLockSpec::new(5, 3)).unwrap();
    let m = lock.model().unwrap();
    for h in 1..5 {
        for s in 0..2 {
            let (p, _) = max_reach_probability(m, LatentState::new(h, s));
            assert!((p - 0.5).abs() < 1e-12);
            if h <= 2 {
                assert!((brute_force_max_reach(m, LatentState::new(h, s)).unwrap() - 0.5).abs() < 1e-12);
            }
        }
        // The policy that always plays the good action lands in a good state surely.
        let good = MarkovPolicy::from_state_actions(
            lock.good_actions().iter().map(|g| vec![g[0], g[1], 0]).collect(),
        );
        let d = exact_occupancy(m, &good).unwrap();
        assert!((d.layer(h)[0] + d.layer(h)[1] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn comblock_h3_optimal_value_is_one() {
    let lock = make_comblock(&CombLockSpec::new(3, 0)).unwrap();
    assert!((value_iteration(lock.model().unwrap()).unwrap().0 - 1.0).abs() < 1e-12);
}

/// Point-mass tables playing `actions[l][z]` and always handing on index `j0`.
fn point_mass_stack(model: &BlockMdp, t: usize, h: usize, actions: &[Vec<usize>], j0: usize) -> StackPolicy {
    let phi = Arc::new(Decoder::from_model(model));
    let mut node = None;
    for l in (t..h).rev() {
        let shape = TableShape {
            layer: l,
            target_layer: h,
            left: model.layer_size(l),
            right: model.layer_size(h),
            num_actions: model.num_actions(),
            num_indices: model.layer_size(h),
        };
        let mut probs = vec![0.0; shape.left * shape.right * shape.width()];
        for z in 0..shape.left {
            for z2 in 0..shape.right {
                let base = (z * shape.right + z2) * shape.width();
                probs[base + actions[l][z] * shape.num_indices + j0] = 1.0;
            }
        }
        let table = ConditionalTable::from_probs(shape, probs, Some(phi.clone())).unwrap();
        node = Some(StackNode::push(StackLayer::new(table).unwrap(), node).unwrap());
    }
    StackPolicy { top: node.unwrap(), index: 0 }
}

#[test]
fn point_mass_stack_is_its_markov_policy() {
    let m = random_model(4, 3, 3, 2, 21);
    let p = random_policy(&m, 2);
    let actions: Vec<Vec<usize>> = (0..4)
        .map(|h| match p.rule(h) {
            Some(LayerRule::ByState(a)) => a.clone(),
            _ => unreachable!(),
        })
        .collect();
    let stack = point_mass_stack(&m, 0, 3, &actions, 1);
    let via_stack = exact_occupancy_stack(&m, &[], &stack).unwrap();
    let direct = exact_occupancy(&m, &p).unwrap();
    for h in 0..=3 {
        for (a, b) in via_stack.layer(h).iter().zip(direct.layer(h)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn one_layer_stack_is_greedy() {
    let m = random_model(3, 3, 2, 2, 8);
    let stack = random_stack(&m, 1, 2, 2, 40);
    let layer = stack.top.layer_at(1).unwrap();
    let greedy: Vec<usize> = (0..3).map(|z| layer.table.argmax(z, 2).0).collect();
    let roll_in = [Schedule::markov(random_policy(&m, 1))];
    let via_stack = exact_occupancy_stack(&m, &roll_in, &stack).unwrap();
    let mut policy = random_policy(&m, 1);
    policy.set_rule(1, Some(LayerRule::ByState(greedy)));
    let direct = exact_occupancy(&m, &policy).unwrap();
    for (a, b) in via_stack.layer(2).iter().zip(direct.layer(2)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn stack_occupancy_matches_monte_carlo() {
    let m = random_model(4, 3, 2, 2, 17);
    let roll_in = vec![Schedule::markov(random_policy(&m, 3)), Schedule::markov(random_policy(&m, 4))];
    let stack = random_stack(&m, 1, 3, 1, 77);
    let exact = exact_occupancy_stack(&m, &roll_in, &stack).unwrap();
    let samples = parallel_samples(&SeedStream::new(2), "stack-mc", MC, |rng| {
        let base = &roll_in[rand::Rng::random_range(rng, 0..roll_in.len())];
        let (traj, _) = execute_stack(&m, Some(base), &stack, rng)?;
        Ok(traj.steps[3].state)
    })
    .unwrap();
    let mut freq = vec![0.0; 3];
    for s in samples {
        freq[s] += 1.0 / MC as f64;
    }
    assert_close(exact.layer(3), &freq);
}

#[test]
fn stack_rollouts_read_s_times_a_cells_per_step() {
    let m = random_model(5, 3, 4, 2, 9);
    for t in 0..4 {
        let stack = random_stack(&m, t, 4, 0, 5);
        assert_eq!(stack.top.depth(), 4 - t);
        let roll_in = Schedule::starting_with(Behavior::Uniform);
        let mut r = rng(t as u64);
        for _ in 0..20 {
            let (traj, stats) = execute_stack(&m, Some(&roll_in), &stack, &mut r).unwrap();
            assert_eq!(traj.len(), 5);
            assert_eq!(stats.stack_steps, (4 - t) as u64);
            assert_eq!(stats.table_reads, ((4 - t) * 3 * 4) as u64);
        }
    }
}

#[test]
fn one_layer_stack_emits_one_action() {
    let m = random_model(3, 2, 3, 1, 4);
    let stack = random_stack(&m, 1, 2, 0, 3);
    let roll_in = Schedule::starting_with(Behavior::Uniform);
    let (traj, stats) = execute_stack(&m, Some(&roll_in), &stack, &mut rng(0)).unwrap();
    assert_eq!(stats.stack_steps, 1);
    assert!(traj.steps[2].action.is_none());
}

#[test]
fn trajectories_repeat_under_a_fixed_seed() {
    let m = random_model(4, 3, 3, 3, 2);
    let uniform = Schedule::starting_with(Behavior::Uniform);
    let a = sample_trajectory(&m, &uniform, &mut rng(12)).unwrap();
    let b = sample_trajectory(&m, &uniform, &mut rng(12)).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_models_validate(seed in 0u64..10_000, h in 1usize..5, s in 1usize..4, a in 1usize..4, k in 1usize..4) {
        let m = random_model(h, s, a, k, seed);
        prop_assert!(m.validate().is_valid());
    }

    #[test]
    fn occupancy_layers_are_distributions(seed in 0u64..10_000, pseed in 0u64..100) {
        let m = random_model(4, 3, 3, 2, seed);
        let d = exact_occupancy(&m, &random_policy(&m, pseed)).unwrap();
        for h in 0..4 {
            let total: f64 = d.layer(h).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn stack_occupancy_layers_are_distributions(seed in 0u64..10_000, t in 0usize..3) {
        let m = random_model(4, 3, 2, 2, seed);
        let stack = random_stack(&m, t, 3, 0, seed);
        let roll_in = [Schedule::starting_with(Behavior::Uniform)];
        let d = exact_occupancy_stack(&m, if t == 0 { &[] } else { &roll_in }, &stack).unwrap();
        for h in 0..=3 {
            let total: f64 = d.layer(h).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn max_reach_dominates_any_policy(seed in 0u64..10_000, pseed in 0u64..100) {
        let m = random_model(4, 3, 2, 1, seed);
        let d = exact_occupancy(&m, &random_policy(&m, pseed)).unwrap();
        for s in m.all_states() {
            prop_assert!(d.get(s) <= max_reach_probability(&m, s).0 + 1e-12);
        }
        let uniform = schedule_occupancy(&m, &Schedule::starting_with(Behavior::Uniform), 3).unwrap();
        for s in m.all_states() {
            prop_assert!(uniform.get(s) <= max_reach_probability(&m, s).0 + 1e-12);
        }
    }

    #[test]
    fn json_round_trip(seed in 0u64..10_000) {
        let m = random_model(3, 2, 2, 2, seed);
        let back = BlockMdp::from_json(&m.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }
}

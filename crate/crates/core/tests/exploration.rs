mod common;

use std::sync::Arc;

use common::*;
use musik_core::analysis::{check_cover, check_cover_set, cover_reach, Baseline};
use musik_core::density::{ConditionalTable, TableShape};
use musik_core::dp::{exact_occupancy_stack, max_reach_probability, schedule_occupancy};
use musik_core::envs::{make_comblock, make_decoder_class, CombLockSpec, DecoderClass};
use musik_core::musik::*;
use musik_core::policy::{Behavior, CoverSet, Decoder, PolicyCover, Schedule, StackPolicy};
use musik_core::rng::SeedStream;
use musik_core::simulate::{rollout, ExecStats};
use musik_core::{BlockMdp, Error, LatentState, ModelFile};

fn truth(m: &BlockMdp) -> Vec<Arc<Decoder>> {
    DecoderClass::singleton(Decoder::from_model(m)).decoders
}

fn stack_of(schedule: &Schedule) -> &StackPolicy {
    match &schedule.segments()[0].1 {
        Behavior::Stack(s) => s,
        _ => panic!("expected a stack member"),
    }
}

#[test]
fn episode_counts_follow_the_loop_structure() {
    let m = random_model(3, 2, 2, 2, 1);
    let (_, stats) = run_musik(&m, &truth(&m), &MusikConfig::new(100, Variant::Bmdp), &SeedStream::new(0)).unwrap();
    assert_eq!(stats.episodes, 300);

    let t = random_model(3, 2, 2, 1, 2);
    let (_, stats) = run_musik_tab(&t, &MusikConfig::new(10, Variant::Tabular), &SeedStream::new(0)).unwrap();
    assert_eq!(stats.episodes, 60);

    let lock = make_comblock(&CombLockSpec::new(5, 0)).unwrap();
    let m = lock.model().unwrap();
    let (_, stats) = run_musik_comp(m, &truth(m), &MusikConfig::new(1000, Variant::Composable), &SeedStream::new(0)).unwrap();
    assert_eq!(stats.episodes, 4000);
}

#[test]
fn two_layers_take_one_regression_from_the_start() {
    let m = random_model(2, 3, 2, 2, 3);
    let (covers, stats) = run_musik(&m, &truth(&m), &MusikConfig::new(500, Variant::Bmdp), &SeedStream::new(1)).unwrap();
    assert_eq!(stats.chosen_decoders, vec![vec![], vec![Some(0)]]);
    assert!(covers.layer(0).is_empty());
    assert_eq!(covers.layer(1).len(), 3);
    for member in &covers.layer(1).members {
        assert_eq!(member.segments().len(), 1);
        assert_eq!(stack_of(member).start_layer(), 0);
    }
}

#[test]
fn covers_hold_one_stack_per_index_sharing_storage() {
    let m = random_model(5, 3, 2, 2, 4);
    let (covers, stats) = run_musik(&m, &truth(&m), &MusikConfig::new(300, Variant::Bmdp), &SeedStream::new(2)).unwrap();
    for h in 1..5 {
        let cover = covers.layer(h);
        assert_eq!(cover.len(), m.layer_size(h));
        assert_eq!(stats.chosen_decoders[h].len(), h);
        let first = stack_of(&cover.members[0]);
        for (i, member) in cover.members.iter().enumerate() {
            let s = stack_of(member);
            assert_eq!(s.index, i);
            assert_eq!(s.top.depth(), h);
            assert!(Arc::ptr_eq(&s.top, &first.top));
        }
    }
}

#[test]
fn deterministic_two_layer_model_is_covered_exactly() {
    // Action a sends either start state to a mod 3.
    let m = BlockMdp::new(ModelFile {
        horizon: 2,
        layer_sizes: vec![2, 3],
        num_actions: 3,
        initial: vec![0.4, 0.6],
        transitions: vec![vec![vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]; 2]],
        emissions: vec![
            vec![vec![(0, 0.5), (1, 0.5)], vec![(2, 1.0)]],
            vec![vec![(3, 1.0)], vec![(4, 0.2), (5, 0.8)], vec![(6, 1.0)]],
        ],
        decoder: vec![(0, 0), (0, 0), (0, 1), (1, 0), (1, 1), (1, 1), (1, 2)],
        rewards: None,
        features: None,
        composable: false,
    })
    .unwrap();
    let (cover, _) = run_ikdp(&m, &[PolicyCover::new(0, Vec::new())], &truth(&m), 2000, 1, &SeedStream::new(3)).unwrap();
    let best = cover_reach(&m, &cover).unwrap();
    assert_eq!(best, vec![1.0, 1.0, 1.0]);
    for (i, member) in cover.members.iter().enumerate() {
        let d = exact_occupancy_stack(&m, &[], stack_of(member)).unwrap();
        assert_eq!(d.get(LatentState::new(1, i)), 1.0);
    }
}

/// Law of the target-layer state by enumerating every state and observation path.
fn enumerate_paths(m: &BlockMdp, stack: &StackPolicy) -> Vec<f64> {
    fn walk(m: &BlockMdp, stack: &StackPolicy, layer: usize, s: usize, carried: usize, p: f64, out: &mut [f64]) {
        if layer == stack.target_layer() {
            out[s] += p;
            return;
        }
        for &(x, q) in m.emission(layer, s) {
            let (a, j, _) = stack.top.layer_at(layer).unwrap().decide(x, carried);
            for (s2, &t) in m.transition(layer, s, a).iter().enumerate() {
                if t > 0.0 {
                    walk(m, stack, layer + 1, s2, j, p * q * t, out);
                }
            }
        }
    }
    let mut out = vec![0.0; m.layer_size(stack.target_layer())];
    for (s, &p) in m.initial().iter().enumerate() {
        walk(m, stack, 0, s, stack.index, p, &mut out);
    }
    out
}

#[test]
fn stack_law_matches_path_enumeration() {
    for seed in 0..5 {
        let m = random_model(3, 3, 2, 2, 50 + seed);
        let (covers, _) = run_musik(&m, &truth(&m), &MusikConfig::new(400, Variant::Bmdp), &SeedStream::new(seed)).unwrap();
        for member in &covers.layer(2).members {
            let stack = stack_of(member);
            let exact = exact_occupancy_stack(&m, &[], stack).unwrap();
            for (a, b) in exact.layer(2).iter().zip(enumerate_paths(&m, stack)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn uniform_tables_play_action_zero_and_hand_on_index_zero() {
    let m = random_model(3, 2, 3, 1, 5);
    let phi = Arc::new(Decoder::from_model(&m));
    let shape = |layer| TableShape { layer, target_layer: 2, left: 2, right: 2, num_actions: 3, num_indices: 2 };
    let uniform = |layer| ConditionalTable::from_counts(shape(layer), &[0; 24], Some(phi.clone()));
    let (tail, _) = build_partial_policies(uniform(1), None).unwrap();
    let (_, policies) = build_partial_policies(uniform(0), Some(tail)).unwrap();
    assert_eq!(policies.len(), 2);
    for p in &policies {
        let schedule = Schedule::stack(p.clone());
        for seed in 0..10 {
            let traj = rollout(&m, &schedule, 2, false, &mut rng(seed), &mut ExecStats::default()).unwrap();
            assert_eq!(traj.steps[0].action, Some(0));
            assert_eq!(traj.steps[1].action, Some(0));
        }
    }
}

#[test]
fn comblock_covers_pass_the_quarter_check() {
    let lock = make_comblock(&CombLockSpec::new(4, 2)).unwrap();
    let m = lock.model().unwrap();
    let class = make_decoder_class(m, 31, 0.3, 2).unwrap();
    let (covers, _) = run_musik(m, &class.decoders, &MusikConfig::new(3000, Variant::Bmdp), &SeedStream::new(9)).unwrap();
    for report in check_cover_set(m, &covers, 0.25, 0.05, Baseline::Unrestricted).unwrap() {
        assert!(report.passed(), "{report:?}");
    }
}

#[test]
fn composable_variant_reaches_both_good_states() {
    let lock = make_comblock(&CombLockSpec::new(5, 4)).unwrap();
    let m = lock.model().unwrap();
    let class = make_decoder_class(m, 31, 0.3, 4).unwrap();
    let (covers, _) =
        run_musik_comp(m, &class.decoders, &MusikConfig::new(3000, Variant::Composable), &SeedStream::new(1)).unwrap();
    let best = cover_reach(m, covers.layer(4)).unwrap();
    for s in 0..2 {
        let target = max_reach_probability(m, LatentState::new(4, s)).0;
        assert!(best[s] >= target - 1e-12 && target >= 0.5 - 1e-12, "{best:?}");
    }
}

#[test]
fn one_state_per_layer_is_trivially_covered() {
    let m = random_model(4, 1, 3, 1, 6);
    let (covers, _) = run_musik_tab(&m, &MusikConfig::new(50, Variant::Tabular), &SeedStream::new(0)).unwrap();
    for h in 1..4 {
        assert_eq!(cover_reach(&m, covers.layer(h)).unwrap(), vec![1.0]);
    }
}

#[test]
fn tabular_variant_covers_a_random_instance() {
    let m = random_model(5, 4, 3, 1, 8);
    let (covers, _) = run_musik_tab(&m, &MusikConfig::new(20_000, Variant::Tabular), &SeedStream::new(8)).unwrap();
    for report in check_cover_set(&m, &covers, 0.25, 0.05, Baseline::Unrestricted).unwrap() {
        assert!(report.passed(), "{report:?}");
    }
}

#[test]
fn variants_check_their_preconditions() {
    let m = random_model(3, 2, 2, 2, 1);
    let cfg = MusikConfig::new(10, Variant::Tabular);
    assert!(matches!(run_musik_tab(&m, &cfg, &SeedStream::new(0)), Err(Error::NotTabular(_))));
    assert!(matches!(run_musik_comp(&m, &truth(&m), &cfg, &SeedStream::new(0)), Err(Error::NotComposable)));
    let bad = MusikConfig { n: 0, ..cfg };
    assert!(run_musik(&m, &truth(&m), &bad, &SeedStream::new(0)).is_err());
}

fn occupancies(m: &BlockMdp, covers: &CoverSet) -> Vec<Vec<f64>> {
    covers
        .covers
        .iter()
        .skip(1)
        .flat_map(|c| c.members.iter().map(move |s| schedule_occupancy(m, s, c.layer).unwrap().layer(c.layer).to_vec()))
        .collect()
}

#[test]
fn covers_survive_a_json_round_trip() {
    let m = random_model(4, 3, 2, 2, 10);
    let class = make_decoder_class(&m, 3, 0.3, 1).unwrap();
    let (covers, _) = run_musik(&m, &class.decoders, &MusikConfig::new(500, Variant::Bmdp), &SeedStream::new(4)).unwrap();
    let text = cover_set_to_json(&covers).unwrap();
    let back = cover_set_from_json(&text).unwrap();
    assert_eq!(occupancies(&m, &covers), occupancies(&m, &back));
    assert_eq!(cover_set_to_json(&back).unwrap(), text);

    let lock = make_comblock(&CombLockSpec::new(4, 0)).unwrap();
    let m = lock.model().unwrap();
    let (covers, _) = run_musik_comp(m, &truth(m), &MusikConfig::new(500, Variant::Composable), &SeedStream::new(0)).unwrap();
    let back = cover_set_from_json(&cover_set_to_json(&covers).unwrap()).unwrap();
    assert_eq!(occupancies(m, &covers), occupancies(m, &back));
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let m = random_model(4, 3, 3, 2, 12);
    let class = make_decoder_class(&m, 7, 0.3, 2).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (covers, stats) =
                run_musik(&m, &class.decoders, &MusikConfig::new(9000, Variant::Bmdp), &SeedStream::new(5)).unwrap();
            (cover_set_to_json(&covers).unwrap(), stats.episodes, stats.chosen_decoders)
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn empty_roll_in_beyond_layer_zero_is_rejected() {
    let m = random_model(3, 2, 2, 1, 0);
    assert!(collect_ik_dataset(&m, 1, 2, &[], &[Behavior::Uniform], 10, &SeedStream::new(0)).is_err());
    let report = check_cover(&m, &PolicyCover::new(2, Vec::new()), 0.25, 0.05, Baseline::Unrestricted).unwrap();
    assert!(!report.passed());
}

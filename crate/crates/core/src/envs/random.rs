//! Random layered Block MDPs with Dirichlet rows, for tests and sweeps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::dp::max_reach_probability;
use crate::error::{Error, Result};
use crate::model::{BlockMdp, LatentState, ModelFile};
use crate::rng::SeedStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomBmdpSpec {
    pub layer_sizes: Vec<usize>,
    pub num_actions: usize,
    pub obs_per_state: usize,
    /// Dirichlet concentration; 0 means point-mass rows.
    pub alpha: f64,
    pub seed: u64,
    #[serde(default)]
    pub rewards: bool,
    /// Plant one state (at layer 2 or later) whose max reach is at most this.
    #[serde(default)]
    pub plant: Option<f64>,
}

impl RandomBmdpSpec {
    pub fn uniform(horizon: usize, states: usize, num_actions: usize, obs_per_state: usize, alpha: f64, seed: u64) -> Self {
        Self {
            layer_sizes: vec![states; horizon],
            num_actions,
            obs_per_state,
            alpha,
            seed,
            rewards: false,
            plant: None,
        }
    }

    pub fn horizon(&self) -> usize {
        self.layer_sizes.len()
    }
}

/// Where a hard-to-reach state was planted and its resulting max reach.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantReport {
    pub state: LatentState,
    pub max_reach: f64,
}

fn dirichlet(len: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if alpha > 0.0 {
        let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
        let draws: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.iter().map(|g| g / total).collect();
        }
    }
    // Zero concentration, or every draw underflowed: a point mass.
    let mut row = vec![0.0; len];
    row[rng.random_range(0..len)] = 1.0;
    row
}

/// Draws a model; with `spec.plant` set, also returns the planted state.
pub fn make_random_bmdp(spec: &RandomBmdpSpec) -> Result<(BlockMdp, Option<PlantReport>)> {
    let h = spec.horizon();
    if h == 0 || spec.num_actions == 0 || spec.obs_per_state == 0 || spec.layer_sizes.contains(&0) {
        return Err(Error::InvalidParameter("all counts must be at least 1".into()));
    }
    if !(spec.alpha >= 0.0 && spec.alpha.is_finite()) {
        return Err(Error::InvalidParameter("alpha must be a finite non-negative number".into()));
    }
    let stream = SeedStream::new(spec.seed);
    let mut rng = stream.derive("random-bmdp/dynamics", 0).rng();
    let sizes = &spec.layer_sizes;
    let a = spec.num_actions;

    let initial = dirichlet(sizes[0], spec.alpha, &mut rng);
    let transitions: Vec<Vec<Vec<Vec<f64>>>> = (0..h - 1)
        .map(|layer| {
            (0..sizes[layer])
                .map(|_| (0..a).map(|_| dirichlet(sizes[layer + 1], spec.alpha, &mut rng)).collect())
                .collect()
        })
        .collect();
    let mut emissions = Vec::with_capacity(h);
    let mut decoder = Vec::new();
    for (layer, &n) in sizes.iter().enumerate() {
        let mut rows = Vec::with_capacity(n);
        for s in 0..n {
            let probs = dirichlet(spec.obs_per_state, spec.alpha, &mut rng);
            let first = decoder.len();
            decoder.extend(std::iter::repeat_n((layer, s), spec.obs_per_state));
            rows.push(probs.into_iter().enumerate().map(|(k, p)| (first + k, p)).collect());
        }
        emissions.push(rows);
    }
    let rewards = spec.rewards.then(|| {
        let mut rng = stream.derive("random-bmdp/rewards", 0).rng();
        sizes
            .iter()
            .map(|&n| (0..n).map(|_| (0..a).map(|_| rng.random::<f64>()).collect()).collect())
            .collect()
    });
    let mut file = ModelFile {
        horizon: h,
        layer_sizes: sizes.clone(),
        num_actions: a,
        initial,
        transitions,
        emissions,
        decoder,
        rewards,
        features: None,
        composable: false,
    };
    let mut report = None;
    if let Some(target) = spec.plant {
        report = Some(plant(&mut file, target, &mut stream.derive("random-bmdp/plant", 0).rng())?);
    }
    Ok((BlockMdp::new(file)?, report))
}

/// Scales every transition into one state so its max reach drops to at
/// most `target`. Max reach is linear in the inbound column, so the scaled
/// reach is exact.
fn plant(file: &mut ModelFile, target: f64, rng: &mut ChaCha8Rng) -> Result<PlantReport> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Infeasible(format!("planted reach {target} must lie in (0, 1)")));
    }
    let candidates: Vec<usize> = (1..file.horizon).filter(|&l| file.layer_sizes[l] >= 2).collect();
    if candidates.is_empty() {
        return Err(Error::Infeasible("planting needs a layer after the first with at least two states".into()));
    }
    let layer = candidates[rng.random_range(0..candidates.len())];
    let index = rng.random_range(0..file.layer_sizes[layer]);
    let state = LatentState::new(layer, index);
    let (before, _) = max_reach_probability(&BlockMdp::new(file.clone())?, state);
    if before <= target {
        return Ok(PlantReport { state, max_reach: before });
    }
    let c = target / before;
    let width = file.layer_sizes[layer];
    for per_action in &mut file.transitions[layer - 1] {
        for row in per_action.iter_mut() {
            let old = row[index];
            let rest = 1.0 - old;
            let new = c * old;
            for (k, v) in row.iter_mut().enumerate() {
                if k == index {
                    *v = new;
                } else if rest > 0.0 {
                    *v *= (1.0 - new) / rest;
                } else {
                    *v = (1.0 - new) / (width - 1) as f64;
                }
            }
        }
    }
    let (after, _) = max_reach_probability(&BlockMdp::new(file.clone())?, state);
    Ok(PlantReport { state, max_reach: after })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_model() {
        let spec = RandomBmdpSpec::uniform(3, 3, 2, 2, 1.0, 4);
        assert_eq!(make_random_bmdp(&spec).unwrap().0, make_random_bmdp(&spec).unwrap().0);
        let (m, _) = make_random_bmdp(&spec).unwrap();
        assert!(m.validate().is_valid());
    }

    #[test]
    fn zero_alpha_gives_point_masses() {
        let (m, _) = make_random_bmdp(&RandomBmdpSpec::uniform(3, 3, 2, 2, 0.0, 1)).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                assert_eq!(m.transition(0, s, a).iter().filter(|&&p| p == 1.0).count(), 1);
            }
        }
    }

    #[test]
    fn planted_state_is_hard_to_reach() {
        for seed in 0..20 {
            let mut spec = RandomBmdpSpec::uniform(4, 3, 3, 3, 1.0, seed);
            spec.plant = Some(0.01);
            let (m, report) = make_random_bmdp(&spec).unwrap();
            let report = report.unwrap();
            let (p, _) = max_reach_probability(&m, report.state);
            assert!(p <= 0.01 + 1e-12, "seed {seed}: {p}");
            assert!((p - report.max_reach).abs() < 1e-12);
            assert!(m.validate().is_valid(), "{:?}", m.validate());
        }
    }

    #[test]
    fn infeasible_plants_are_rejected() {
        let mut spec = RandomBmdpSpec::uniform(3, 1, 2, 1, 1.0, 0);
        spec.plant = Some(0.1);
        assert!(matches!(make_random_bmdp(&spec), Err(Error::Infeasible(_))));
        let mut spec = RandomBmdpSpec::uniform(3, 2, 2, 1, 1.0, 0);
        spec.plant = Some(0.0);
        assert!(matches!(make_random_bmdp(&spec), Err(Error::Infeasible(_))));
    }
}

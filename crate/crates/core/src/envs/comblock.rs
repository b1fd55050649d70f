//! The diabolical combination lock.
//!
//! Each layer has two good states (indices 0 and 1) and one absorbing bad
//! state (index 2). Good state `j` has a single good action `u[h][j]` that
//! moves to either good state with probability 1/2; every other action moves
//! to the bad state. Observations are Hadamard-rotated one-hot encodings of
//! `(state, layer)`, optionally with Gaussian noise in one extra coordinate.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Action, BlockMdp, ModelFile};
use crate::rng::SeedStream;
use crate::simulate::sample_index;

const ANTI_SHAPED_REWARD: f64 = 0.1;
const BAD: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseMode {
    Noiseless,
    Gaussian { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombLockSpec {
    pub horizon: usize,
    pub num_actions: usize,
    pub states_per_layer: usize,
    pub noise: NoiseMode,
    pub seed: u64,
}

impl CombLockSpec {
    pub fn new(horizon: usize, seed: u64) -> Self {
        Self { horizon, num_actions: 10, states_per_layer: 3, noise: NoiseMode::Noiseless, seed }
    }

    pub fn gaussian(mut self, sigma: f64) -> Self {
        self.noise = NoiseMode::Gaussian { sigma };
        self
    }
}

/// `2^ceil(log2(H + N + 1))`.
pub fn observation_dim(horizon: usize, states: usize) -> usize {
    (horizon + states + 1).next_power_of_two()
}

/// Sylvester Hadamard matrix of order `d` (a power of two), entries ±1.
pub fn hadamard(d: usize) -> Vec<Vec<f64>> {
    assert!(d.is_power_of_two());
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 })
                .collect()
        })
        .collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

#[derive(Clone, Debug)]
pub struct CombLock {
    model: BlockMdp,
    good_actions: Vec<[Action; 2]>,
    dim: usize,
    noise: NoiseMode,
    rotation: Vec<Vec<f64>>,
}

pub fn make_comblock(spec: &CombLockSpec) -> Result<CombLock> {
    let (h, a, n) = (spec.horizon, spec.num_actions, spec.states_per_layer);
    if h < 2 || a < 2 {
        return Err(Error::InvalidParameter("combination lock needs H >= 2 and A >= 2".into()));
    }
    if n != 3 {
        return Err(Error::InvalidParameter("combination lock has exactly 3 states per layer".into()));
    }
    if let NoiseMode::Gaussian { sigma } = spec.noise {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter("noise scale must be positive".into()));
        }
    }
    let mut rng = SeedStream::new(spec.seed).derive("comblock/actions", 0).rng();
    let actions: Vec<Action> = (0..a).collect();
    let good_actions: Vec<[Action; 2]> = (0..h)
        .map(|_| [*actions.choose(&mut rng).unwrap(), *actions.choose(&mut rng).unwrap()])
        .collect();

    let mut transitions = Vec::with_capacity(h - 1);
    for layer in 0..h - 1 {
        let mut rows = Vec::with_capacity(n);
        for s in 0..n {
            let per_action = (0..a)
                .map(|act| {
                    if s != BAD && act == good_actions[layer][s] {
                        vec![0.5, 0.5, 0.0]
                    } else {
                        vec![0.0, 0.0, 1.0]
                    }
                })
                .collect();
            rows.push(per_action);
        }
        transitions.push(rows);
    }
    let rewards = (0..h)
        .map(|layer| {
            (0..n)
                .map(|s| {
                    (0..a)
                        .map(|act| match (s, layer + 1 == h) {
                            (BAD, _) => 0.0,
                            (_, true) if act == good_actions[layer][s] => 1.0,
                            (_, true) => 0.0,
                            _ if act == good_actions[layer][s] => 0.0,
                            _ => ANTI_SHAPED_REWARD,
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let dim = observation_dim(h, n);
    let rotation = hadamard(dim);
    let mut emissions = Vec::with_capacity(h);
    let mut decoder = Vec::with_capacity(h * n);
    let mut features = Vec::with_capacity(h * n);
    for layer in 0..h {
        emissions.push((0..n).map(|s| vec![(layer * n + s, 1.0)]).collect());
        for s in 0..n {
            decoder.push((layer, s));
            features.push(mat_vec(&rotation, &encode(s, layer, n, dim, 0.0)));
        }
    }
    let model = BlockMdp::new(ModelFile {
        horizon: h,
        layer_sizes: vec![n; h],
        num_actions: a,
        initial: vec![0.5, 0.5, 0.0],
        transitions,
        emissions,
        decoder,
        rewards: Some(rewards),
        features: Some(features),
        composable: true,
    })?;
    Ok(CombLock { model, good_actions, dim, noise: spec.noise, rotation })
}

/// One-hot state, one-hot layer, zero padding. The last coordinate carries
/// the noise; `dim >= H + N + 1` keeps it clear of both one-hot blocks.
fn encode(state: usize, layer: usize, n: usize, dim: usize, noise: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[state] = 1.0;
    v[n + layer] = 1.0;
    v[dim - 1] = noise;
    v
}

impl CombLock {
    /// The exact model; unavailable when observations are noisy.
    pub fn model(&self) -> Result<&BlockMdp> {
        match self.noise {
            NoiseMode::Noiseless => Ok(&self.model),
            NoiseMode::Gaussian { .. } => {
                Err(Error::InvalidParameter("the noisy combination lock is sampling-only".into()))
            }
        }
    }

    /// Latent dynamics and rewards, which are exact in both modes.
    pub fn latent(&self) -> &BlockMdp {
        &self.model
    }

    pub fn into_model(self) -> Result<BlockMdp> {
        self.model()?;
        Ok(self.model)
    }

    pub fn good_actions(&self) -> &[[Action; 2]] {
        &self.good_actions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise(&self) -> NoiseMode {
        self.noise
    }

    pub fn is_sampling_only(&self) -> bool {
        matches!(self.noise, NoiseMode::Gaussian { .. })
    }

    pub fn sample_observation<R: Rng + ?Sized>(&self, layer: usize, state: usize, rng: &mut R) -> Vec<f64> {
        let noise = match self.noise {
            NoiseMode::Noiseless => 0.0,
            NoiseMode::Gaussian { sigma } => Normal::new(0.0, sigma).expect("checked").sample(rng),
        };
        let n = self.model.layer_size(layer);
        mat_vec(&self.rotation, &encode(state, layer, n, self.dim, noise))
    }

    /// One episode driven by a policy over real-vector observations; returns
    /// the total reward and the latent path.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        mut policy: impl FnMut(usize, &[f64]) -> Action,
        rng: &mut R,
    ) -> (f64, Vec<usize>) {
        let m = &self.model;
        let mut state = sample_index(m.initial(), rng);
        let mut path = Vec::with_capacity(m.horizon());
        let mut total = 0.0;
        for layer in 0..m.horizon() {
            path.push(state);
            let x = self.sample_observation(layer, state, rng);
            let a = policy(layer, &x).min(m.num_actions() - 1);
            total += m.reward(layer, state, a).unwrap_or(0.0);
            if layer + 1 < m.horizon() {
                state = sample_index(m.transition(layer, state, a), rng);
            }
        }
        (total, path)
    }

    /// The exact inverse of the observation map on the state block.
    pub fn true_linear_decoder(&self) -> LinearDecoder {
        let d = self.dim as f64;
        LinearDecoder { weights: self.rotation[..3].iter().map(|r| r.iter().map(|v| v / d).collect()).collect() }
    }

    /// The true decoder followed by `n_decoys` row-perturbed copies, shuffled;
    /// returns the class and the true decoder's position.
    pub fn linear_decoder_class(&self, n_decoys: usize, scale: f64, seed: u64) -> (Vec<LinearDecoder>, usize) {
        let stream = SeedStream::new(seed);
        let mut rng = stream.derive("comblock/decoys", 0).rng();
        let normal = Normal::new(0.0, scale.max(f64::MIN_POSITIVE)).expect("finite scale");
        let truth = self.true_linear_decoder();
        let mut class = vec![truth.clone()];
        for _ in 0..n_decoys {
            let mut w = truth.weights.clone();
            for row in &mut w {
                for v in row.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            class.push(LinearDecoder { weights: w });
        }
        let mut order: Vec<usize> = (0..class.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut stream.derive("comblock/shuffle", 0).rng());
        let true_index = order.iter().position(|&k| k == 0).expect("present");
        (order.into_iter().map(|k| class[k].clone()).collect(), true_index)
    }
}

/// `x ↦ argmax_i ⟨w_i, x⟩`, ties to the lowest label.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDecoder {
    pub weights: Vec<Vec<f64>>,
}

impl LinearDecoder {
    pub fn decode(&self, x: &[f64]) -> usize {
        let scores = mat_vec(&self.weights, x);
        let mut best = 0;
        for (i, &v) in scores.iter().enumerate().skip(1) {
            if v > scores[best] {
                best = i;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::{exact_occupancy, value_iteration};
    use crate::policy::{Behavior, MarkovPolicy, Schedule};
    use crate::simulate::sample_trajectory;

    #[test]
    fn h3_has_nine_states_and_dim_eight() {
        let c = make_comblock(&CombLockSpec::new(3, 1)).unwrap();
        let m = c.model().unwrap();
        assert_eq!(m.total_states(), 9);
        assert_eq!(c.dim(), 8);
        assert_eq!(observation_dim(3, 3), 8);
        assert!(m.validate().is_valid());
    }

    #[test]
    fn optimal_value_is_one() {
        for h in [2, 3, 5, 8] {
            let c = make_comblock(&CombLockSpec::new(h, h as u64)).unwrap();
            let (v, _) = value_iteration(c.model().unwrap()).unwrap();
            assert!((v - 1.0).abs() < 1e-12, "H={h}: {v}");
        }
    }

    #[test]
    fn exactly_one_action_continues_from_good_states() {
        let c = make_comblock(&CombLockSpec::new(4, 3)).unwrap();
        let m = c.model().unwrap();
        for h in 0..3 {
            for s in 0..2 {
                let good = (0..10).filter(|&a| m.transition(h, s, a)[BAD] == 0.0).count();
                assert_eq!(good, 1);
            }
            assert!((0..10).all(|a| m.transition(h, BAD, a)[BAD] == 1.0));
        }
    }

    #[test]
    fn uniform_reach_of_good_final_states() {
        // Per step a uniform action is good with probability 1/A.
        let c = make_comblock(&CombLockSpec::new(4, 11)).unwrap();
        let m = c.model().unwrap();
        let occ = crate::dp::schedule_occupancy(m, &Schedule::starting_with(Behavior::Uniform), 3).unwrap();
        let good = occ.layer(3)[0] + occ.layer(3)[1];
        assert!((good - 0.1f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn good_action_policy_ends_in_good_state() {
        let c = make_comblock(&CombLockSpec::new(3, 5)).unwrap();
        let m = c.model().unwrap();
        let acts: Vec<Vec<Action>> = c.good_actions().iter().map(|u| vec![u[0], u[1], 0]).collect();
        let p = MarkovPolicy::from_state_actions(acts);
        let occ = exact_occupancy(m, &p).unwrap();
        assert!((occ.layer(2)[0] + occ.layer(2)[1] - 1.0).abs() < 1e-15);
        let t = sample_trajectory(m, &Schedule::markov(p), &mut SeedStream::new(2).rng()).unwrap();
        assert!(t.steps[2].state < 2);
        assert_eq!(t.total_reward(), 1.0);
    }

    #[test]
    fn noisy_mode_is_sampling_only_and_true_decoder_recovers_state() {
        let c = make_comblock(&CombLockSpec::new(5, 1).gaussian(0.1)).unwrap();
        assert!(c.model().is_err());
        let dec = c.true_linear_decoder();
        let mut rng = SeedStream::new(3).rng();
        for layer in 0..5 {
            for s in 0..3 {
                assert_eq!(dec.decode(&c.sample_observation(layer, s, &mut rng)), s);
            }
        }
        let (class, k) = c.linear_decoder_class(4, 0.5, 9);
        assert_eq!(class.len(), 5);
        assert_eq!(class[k], dec);
    }
}

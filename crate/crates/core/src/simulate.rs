//! Seeded trajectory sampling for composed schedules, including the carried
//! index of partial-policy stacks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Action, BlockMdp, ObsId};
use crate::policy::{Behavior, Schedule};
use crate::rng::SeedStream;

/// Samples per parallel work unit. Each chunk owns the substream
/// `(label, chunk index)`, so output does not depend on the thread count.
pub const CHUNK: usize = 4096;

/// Draws `n` samples in parallel chunks and concatenates them in order.
pub fn parallel_samples<T, F>(stream: &SeedStream, label: &str, n: usize, draw: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng) -> Result<T> + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<Vec<T>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream.derive(label, c as u64).rng();
            let len = CHUNK.min(n - c * CHUNK);
            (0..len).map(|_| draw(&mut rng)).collect::<Result<Vec<T>>>()
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub obs: ObsId,
    /// Latent index, for diagnostics only.
    pub state: usize,
    pub action: Option<Action>,
    pub reward: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().filter_map(|s| s.reward).sum()
    }
}

/// Instrumentation for stack execution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExecStats {
    /// Table cells read by stack argmax decisions.
    pub table_reads: u64,
    /// Stack decisions taken.
    pub stack_steps: u64,
}

/// Draws an index from a probability row by inversion.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` past the end: take the last positive entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn sample_emission<R: Rng + ?Sized>(row: &[(ObsId, f64)], rng: &mut R) -> ObsId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(x, p) in row {
        acc += p;
        if u < acc {
            return x;
        }
    }
    row.iter().rev().find(|(_, p)| *p > 0.0).map_or(row[0].0, |&(x, _)| x)
}

/// Samples layers `0..=last_layer` under `schedule`. Actions are taken on
/// every layer before `last_layer`, and on `last_layer` too when `act_on_last`.
pub fn rollout<R: Rng + ?Sized>(
    model: &BlockMdp,
    schedule: &Schedule,
    last_layer: usize,
    act_on_last: bool,
    rng: &mut R,
    stats: &mut ExecStats,
) -> Result<Trajectory> {
    if last_layer >= model.horizon() {
        return Err(Error::LayerMismatch(format!(
            "rollout to layer {last_layer} exceeds horizon {}",
            model.horizon()
        )));
    }
    schedule.check_alignment()?;
    let mut steps = Vec::with_capacity(last_layer + 1);
    let mut state = sample_index(model.initial(), rng);
    let mut carried = 0;
    for layer in 0..=last_layer {
        let obs = sample_emission(model.emission(layer, state), rng);
        let mut step = Step { obs, state, action: None, reward: None };
        if layer < last_layer || act_on_last {
            let seg = schedule
                .active(layer)
                .ok_or(Error::PolicyUndefined { layer, observation: obs })?;
            let (start, behavior) = schedule.segment(seg);
            let action = match behavior {
                Behavior::Uniform => rng.random_range(0..model.num_actions()),
                Behavior::Markov(p) => p.action(model, layer, obs)?,
                Behavior::Stack(stack) => {
                    if *start == layer {
                        carried = stack.index;
                    }
                    let node = stack
                        .top
                        .layer_at(layer)
                        .ok_or(Error::PolicyUndefined { layer, observation: obs })?;
                    let (a, j, reads) = node.decide(obs, carried);
                    stats.table_reads += reads as u64;
                    stats.stack_steps += 1;
                    carried = j;
                    a
                }
            };
            step.action = Some(action);
            step.reward = model.reward(layer, state, action);
            if layer + 1 < model.horizon() && layer < last_layer {
                state = sample_index(model.transition(layer, state, action), rng);
            }
        }
        steps.push(step);
    }
    Ok(Trajectory { steps })
}

/// A full-horizon episode with an action (and reward) at every layer.
pub fn sample_trajectory<R: Rng + ?Sized>(model: &BlockMdp, schedule: &Schedule, rng: &mut R) -> Result<Trajectory> {
    rollout(model, schedule, model.horizon() - 1, true, rng, &mut ExecStats::default())
}

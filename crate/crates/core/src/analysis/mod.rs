//! Extended model with terminal states, the truncated policy class, and exact
//! checks of policy-cover definitions and the structural lemmas.
//!
//! The truncated class is never enumerated. Reaching a layer-`t` state only
//! depends on behavior before `t`, so the class is fully described by the
//! per-layer sets of states on which it must play the terminal action.

mod brute;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{max_reach_probability, max_reach_with, schedule_occupancy};
use crate::error::{Error, Result};
use crate::model::{Action, BlockMdp, LatentState, ModelFile, ObsId};
use crate::policy::{CoverSet, PolicyCover};

pub use brute::{brute_force_max_reach, brute_force_max_reach_truncated, brute_force_optimal_value, brute_force_truncation, ENUMERATION_LIMIT};

/// Slack for floating-point comparisons in every check below.
pub const TOL: f64 = 1e-10;

/// The base model plus one terminal state per layer (the last index of each
/// layer) and one terminal action (index `A`). Terminal observations get
/// fresh ids after the base ones; base ids are unchanged.
#[derive(Clone, Debug)]
pub struct ExtendedBmdp {
    base: BlockMdp,
    model: BlockMdp,
}

impl ExtendedBmdp {
    pub fn base(&self) -> &BlockMdp {
        &self.base
    }

    /// The extension as an ordinary model with `A + 1` actions.
    pub fn model(&self) -> &BlockMdp {
        &self.model
    }

    pub fn terminal_action(&self) -> Action {
        self.base.num_actions()
    }

    pub fn terminal_state(&self, layer: usize) -> LatentState {
        LatentState::new(layer, self.base.layer_size(layer))
    }

    pub fn terminal_observation(&self, layer: usize) -> ObsId {
        self.base.num_observations() + layer
    }

    pub fn is_terminal(&self, state: LatentState) -> bool {
        state.index == self.base.layer_size(state.layer)
    }
}

pub fn extend(model: &BlockMdp) -> ExtendedBmdp {
    let f = model.file();
    let horizon = f.horizon;
    let a = f.num_actions;
    let sizes: Vec<usize> = f.layer_sizes.iter().map(|s| s + 1).collect();
    let mut initial = f.initial.clone();
    initial.push(0.0);
    let transitions = (0..horizon - 1)
        .map(|h| {
            let to_terminal = |n: usize| {
                let mut row = vec![0.0; n + 1];
                row[n] = 1.0;
                row
            };
            let next = f.layer_sizes[h + 1];
            let mut rows: Vec<Vec<Vec<f64>>> = f.transitions[h]
                .iter()
                .map(|per_action| {
                    let mut out: Vec<Vec<f64>> = per_action
                        .iter()
                        .map(|row| {
                            let mut r = row.clone();
                            r.push(0.0);
                            r
                        })
                        .collect();
                    out.push(to_terminal(next));
                    out
                })
                .collect();
            rows.push(vec![to_terminal(next); a + 1]);
            rows
        })
        .collect();
    let num_obs = f.decoder.len();
    let emissions = (0..horizon)
        .map(|h| {
            let mut rows = f.emissions[h].clone();
            rows.push(vec![(num_obs + h, 1.0)]);
            rows
        })
        .collect();
    let mut decoder = f.decoder.clone();
    decoder.extend((0..horizon).map(|h| (h, f.layer_sizes[h])));
    let rewards = f.rewards.as_ref().map(|r| {
        (0..horizon)
            .map(|h| {
                let mut rows: Vec<Vec<f64>> = r[h]
                    .iter()
                    .map(|row| {
                        let mut v = row.clone();
                        v.push(0.0);
                        v
                    })
                    .collect();
                rows.push(vec![0.0; a + 1]);
                rows
            })
            .collect()
    });
    let file = ModelFile {
        horizon,
        layer_sizes: sizes,
        num_actions: a + 1,
        initial,
        transitions,
        emissions,
        decoder,
        rewards,
        features: None,
        composable: false,
    };
    let extended = BlockMdp::new(file).expect("extension of a well-formed model is well-formed");
    ExtendedBmdp { base: model.clone(), model: extended }
}

/// `forced[t][s]`: the truncated class plays the terminal action at `(t, s)`.
/// `reach[t][s]`: the truncated max reach of `(t, s)`. Both range over base
/// states only; terminal states never matter for reaching base states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationSets {
    pub eps: f64,
    pub forced: Vec<Vec<bool>>,
    pub reach: Vec<Vec<f64>>,
}

impl TruncationSets {
    pub fn is_forced(&self, state: LatentState) -> bool {
        self.forced[state.layer][state.index]
    }

    /// States that stay reachable with probability at least `eps`.
    pub fn reachable(&self, layer: usize) -> Vec<usize> {
        (0..self.forced[layer].len()).filter(|&s| !self.forced[layer][s]).collect()
    }

    pub fn num_forced(&self) -> usize {
        self.forced.iter().flatten().filter(|&&f| f).count()
    }
}

/// Builds the forced sets layer by layer: a layer-`t` state is forced when
/// its max reach, with the terminal action imposed on the earlier forced
/// sets, is below `eps`.
pub fn truncated_class(ext: &ExtendedBmdp, eps: f64) -> Result<TruncationSets> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParameter(format!("eps = {eps} is outside (0, 1)")));
    }
    let base = ext.base();
    let mut forced: Vec<Vec<bool>> = Vec::with_capacity(base.horizon());
    let mut reach: Vec<Vec<f64>> = Vec::with_capacity(base.horizon());
    for t in 0..base.horizon() {
        let row: Vec<f64> = (0..base.layer_size(t))
            .into_par_iter()
            .map(|s| max_reach_with(base, LatentState::new(t, s), |l, x| forced[l][x]).0)
            .collect();
        forced.push(row.iter().map(|&p| p < eps).collect());
        reach.push(row);
    }
    Ok(TruncationSets { eps, forced, reach })
}

/// `max_{π ∈ Π̄_ε} d̄^π(target)`, recomputed by DP from the forced sets.
pub fn max_reach_truncated(ext: &ExtendedBmdp, trunc: &TruncationSets, target: LatentState) -> f64 {
    max_reach_with(ext.base(), target, |l, x| trunc.forced[l][x]).0
}

/// What a cover is compared against.
#[derive(Clone, Copy, Debug)]
pub enum Baseline<'a> {
    /// All Markov policies of the base model.
    Unrestricted,
    /// The truncated class of the extension.
    Truncated(&'a TruncationSets),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverEntry {
    pub state: LatentState,
    pub baseline: f64,
    pub achieved: f64,
    pub pass: bool,
    /// `achieved - α · baseline`.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverReport {
    pub layer: usize,
    pub alpha: f64,
    pub eps: f64,
    /// One entry per state whose baseline reach is at least `eps`.
    pub entries: Vec<CoverEntry>,
}

impl CoverReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn failures(&self) -> usize {
        self.entries.iter().filter(|e| !e.pass).count()
    }
}

fn baseline_reach(model: &BlockMdp, baseline: Baseline<'_>, state: LatentState) -> f64 {
    match baseline {
        Baseline::Unrestricted => max_reach_probability(model, state).0,
        Baseline::Truncated(trunc) => trunc.reach[state.layer][state.index],
    }
}

/// Best visitation of each layer state over the members of `cover`, computed
/// exactly. Members never play the terminal action, so their occupancy in the
/// extension equals the base one. Layer 0 is reached by the initial
/// distribution whatever the cover holds.
pub fn cover_reach(model: &BlockMdp, cover: &PolicyCover) -> Result<Vec<f64>> {
    let h = cover.layer;
    if h >= model.horizon() {
        return Err(Error::LayerMismatch(format!("cover for layer {h} but the horizon is {}", model.horizon())));
    }
    if h == 0 {
        return Ok(model.initial().to_vec());
    }
    let tables = cover
        .members
        .par_iter()
        .map(|m| schedule_occupancy(model, m, h))
        .collect::<Result<Vec<_>>>()?;
    let mut best = vec![0.0; model.layer_size(h)];
    for t in &tables {
        for (b, &p) in best.iter_mut().zip(t.layer(h)) {
            *b = f64::max(*b, p);
        }
    }
    Ok(best)
}

/// Checks the `(α, ε)` cover condition for `cover.layer` against `baseline`.
pub fn check_cover(
    model: &BlockMdp,
    cover: &PolicyCover,
    alpha: f64,
    eps: f64,
    baseline: Baseline<'_>,
) -> Result<CoverReport> {
    let h = cover.layer;
    let achieved = cover_reach(model, cover)?;
    if let Baseline::Truncated(trunc) = baseline {
        if trunc.reach.len() != model.horizon() || trunc.reach[h].len() != model.layer_size(h) {
            return Err(Error::ShapeMismatch("truncation sets were built for another model".into()));
        }
    }
    let entries = model
        .states(h)
        .collect::<Vec<_>>()
        .into_par_iter()
        .filter_map(|state| {
            let base = baseline_reach(model, baseline, state);
            (base >= eps).then(|| {
                let got = achieved[state.index];
                let margin = got - alpha * base;
                CoverEntry { state, baseline: base, achieved: got, pass: margin >= -TOL, margin }
            })
        })
        .collect();
    Ok(CoverReport { layer: h, alpha, eps, entries })
}

/// [`check_cover`] for every layer of a cover set.
pub fn check_cover_set(
    model: &BlockMdp,
    covers: &CoverSet,
    alpha: f64,
    eps: f64,
    baseline: Baseline<'_>,
) -> Result<Vec<CoverReport>> {
    if covers.horizon() != model.horizon() {
        return Err(Error::LayerMismatch(format!(
            "{} covers for a horizon of {}",
            covers.horizon(),
            model.horizon()
        )));
    }
    covers.covers.iter().map(|c| check_cover(model, c, alpha, eps, baseline)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaEntry {
    pub state: LatentState,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`; negative beyond the tolerance is a violation.
    pub margin: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub eps: f64,
    pub entries: Vec<LemmaEntry>,
}

impl LemmaReport {
    pub fn violations(&self) -> usize {
        self.entries.iter().filter(|e| !e.holds).count()
    }
}

/// Checks `max_Π̄_M d̄(s) ≤ max_Π̄_ε d̄(s) + S ε` for every base state, with
/// `S` the total number of base states.
pub fn verify_truncation_lemma(ext: &ExtendedBmdp, eps: f64) -> Result<LemmaReport> {
    let trunc = truncated_class(ext, eps)?;
    let base = ext.base();
    let slack = base.total_states() as f64 * eps;
    let entries = base
        .all_states()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|state| {
            let lhs = max_reach_probability(base, state).0;
            let rhs = trunc.reach[state.layer][state.index] + slack;
            LemmaEntry { state, lhs, rhs, margin: rhs - lhs, holds: lhs <= rhs + TOL }
        })
        .collect();
    Ok(LemmaReport { eps, entries })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub eps: f64,
    /// The truncation level `ε / 2S`.
    pub inner_eps: f64,
    /// `(½, ε/2S)` cover relative to the truncated class, all layers.
    pub premise: bool,
    /// `(¼, ε)` cover relative to all Markov policies, all layers.
    pub conclusion: bool,
    pub premise_reports: Vec<CoverReport>,
    pub conclusion_reports: Vec<CoverReport>,
}

impl TransferReport {
    /// False only for a counterexample: premise true, conclusion false.
    pub fn holds(&self) -> bool {
        !self.premise || self.conclusion
    }
}

/// Evaluates both sides of the cover-transfer implication for `covers`.
pub fn verify_transfer(ext: &ExtendedBmdp, eps: f64, covers: &CoverSet) -> Result<TransferReport> {
    let base = ext.base();
    let inner_eps = eps / (2.0 * base.total_states() as f64);
    let trunc = truncated_class(ext, inner_eps)?;
    let premise_reports = check_cover_set(base, covers, 0.5, inner_eps, Baseline::Truncated(&trunc))?;
    let conclusion_reports = check_cover_set(base, covers, 0.25, eps, Baseline::Unrestricted)?;
    Ok(TransferReport {
        eps,
        inner_eps,
        premise: premise_reports.iter().all(CoverReport::passed),
        conclusion: conclusion_reports.iter().all(CoverReport::passed),
        premise_reports,
        conclusion_reports,
    })
}

/// For each layer, one Markov policy per state maximizing that state's reach.
pub fn argmax_covers(model: &BlockMdp) -> CoverSet {
    use crate::policy::Schedule;
    let covers = (0..model.horizon())
        .map(|h| {
            let members = model.states(h).map(|s| Schedule::markov(max_reach_probability(model, s).1)).collect();
            PolicyCover::new(h, members)
        })
        .collect();
    CoverSet { covers }
}

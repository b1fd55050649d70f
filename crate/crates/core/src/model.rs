//! Layered Block MDPs with finite emission tables.
//!
//! Latent states are addressed by `(layer, index)` with `index` local to the
//! layer. Observations are global integer ids; each belongs to exactly one
//! layer, and the true decoder maps it back to the emitting latent state.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Action = usize;
pub type ObsId = usize;

/// Row-sum tolerance used by [`BlockMdp::validate`].
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatentState {
    pub layer: usize,
    pub index: usize,
}

impl LatentState {
    pub fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }
}

impl fmt::Display for LatentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s[{},{}]", self.layer, self.index)
    }
}

/// On-disk schema of a Block MDP (JSON).
///
/// * `transitions[h][s][a]` is a distribution over the states of layer `h+1`
///   (there are `horizon - 1` transition layers).
/// * `emissions[h][s]` lists `(observation, probability)` pairs.
/// * `decoder[x] = (layer, state)` is the true decoder.
/// * `rewards[h][s][a]` is the optional mean reward in `[0, 1]`.
/// * `features[x]` is an optional real vector attached to observation `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub horizon: usize,
    pub layer_sizes: Vec<usize>,
    pub num_actions: usize,
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<Vec<Vec<f64>>>>,
    pub emissions: Vec<Vec<Vec<(ObsId, f64)>>>,
    pub decoder: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub composable: bool,
}

/// A layered Block MDP. Immutable once built; share it behind `Arc` or `&`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct BlockMdp {
    file: ModelFile,
    layer_obs: Vec<Vec<ObsId>>,
    obs_slot: Vec<usize>,
}

impl TryFrom<ModelFile> for BlockMdp {
    type Error = Error;

    fn try_from(file: ModelFile) -> Result<Self> {
        BlockMdp::new(file)
    }
}

impl From<BlockMdp> for ModelFile {
    fn from(model: BlockMdp) -> Self {
        model.file
    }
}

fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

impl BlockMdp {
    /// Builds a model after checking that every table has the right shape.
    /// Probabilistic invariants are not enforced here; see [`Self::validate`].
    pub fn new(file: ModelFile) -> Result<Self> {
        let h = file.horizon;
        if h == 0 {
            return Err(shape("horizon must be positive"));
        }
        if file.num_actions == 0 {
            return Err(shape("num_actions must be positive"));
        }
        if file.layer_sizes.len() != h {
            return Err(shape(format!(
                "layer_sizes has {} entries, horizon is {h}",
                file.layer_sizes.len()
            )));
        }
        if file.layer_sizes.contains(&0) {
            return Err(shape("every layer needs at least one state"));
        }
        if file.initial.len() != file.layer_sizes[0] {
            return Err(shape("initial distribution length differs from |S_1|"));
        }
        if file.transitions.len() != h - 1 {
            return Err(shape(format!("expected {} transition layers", h - 1)));
        }
        for (layer, rows) in file.transitions.iter().enumerate() {
            if rows.len() != file.layer_sizes[layer] {
                return Err(shape(format!("transition layer {layer} has wrong state count")));
            }
            for (s, per_action) in rows.iter().enumerate() {
                if per_action.len() != file.num_actions {
                    return Err(shape(format!("transition ({layer},{s}) has wrong action count")));
                }
                for row in per_action {
                    if row.len() != file.layer_sizes[layer + 1] {
                        return Err(shape(format!(
                            "transition row at ({layer},{s}) has wrong length"
                        )));
                    }
                }
            }
        }
        if file.emissions.len() != h {
            return Err(shape("emissions must have one entry per layer"));
        }
        let num_obs = file.decoder.len();
        for (layer, rows) in file.emissions.iter().enumerate() {
            if rows.len() != file.layer_sizes[layer] {
                return Err(shape(format!("emission layer {layer} has wrong state count")));
            }
            for (s, row) in rows.iter().enumerate() {
                if row.is_empty() {
                    return Err(shape(format!("state ({layer},{s}) emits nothing")));
                }
                if let Some(&(x, _)) = row.iter().find(|(x, _)| *x >= num_obs) {
                    return Err(shape(format!("observation {x} missing from decoder")));
                }
            }
        }
        for (x, &(layer, s)) in file.decoder.iter().enumerate() {
            if layer >= h || s >= file.layer_sizes[layer] {
                return Err(shape(format!("decoder entry {x} points outside the model")));
            }
        }
        if let Some(r) = &file.rewards {
            if r.len() != h {
                return Err(shape("rewards must have one entry per layer"));
            }
            for (layer, rows) in r.iter().enumerate() {
                if rows.len() != file.layer_sizes[layer]
                    || rows.iter().any(|row| row.len() != file.num_actions)
                {
                    return Err(shape(format!("reward layer {layer} has wrong shape")));
                }
            }
        }
        if let Some(f) = &file.features {
            if f.len() != num_obs {
                return Err(shape("features must have one vector per observation"));
            }
        }

        let mut layer_obs = vec![Vec::new(); h];
        let mut obs_slot = vec![0; num_obs];
        for (x, &(layer, _)) in file.decoder.iter().enumerate() {
            obs_slot[x] = layer_obs[layer].len();
            layer_obs[layer].push(x);
        }
        Ok(Self { file, layer_obs, obs_slot })
    }

    pub fn file(&self) -> &ModelFile {
        &self.file
    }

    pub fn horizon(&self) -> usize {
        self.file.horizon
    }

    pub fn num_actions(&self) -> usize {
        self.file.num_actions
    }

    pub fn layer_size(&self, layer: usize) -> usize {
        self.file.layer_sizes[layer]
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.file.layer_sizes
    }

    pub fn total_states(&self) -> usize {
        self.file.layer_sizes.iter().sum()
    }

    pub fn max_layer_size(&self) -> usize {
        self.file.layer_sizes.iter().copied().max().unwrap_or(0)
    }

    pub fn initial(&self) -> &[f64] {
        &self.file.initial
    }

    /// Next-state distribution over layer `layer + 1`.
    pub fn transition(&self, layer: usize, state: usize, action: Action) -> &[f64] {
        &self.file.transitions[layer][state][action]
    }

    pub fn emission(&self, layer: usize, state: usize) -> &[(ObsId, f64)] {
        &self.file.emissions[layer][state]
    }

    pub fn num_observations(&self) -> usize {
        self.file.decoder.len()
    }

    pub fn layer_observations(&self, layer: usize) -> &[ObsId] {
        &self.layer_obs[layer]
    }

    /// Position of `obs` within its layer's observation list.
    pub fn obs_slot(&self, obs: ObsId) -> usize {
        self.obs_slot[obs]
    }

    /// The true decoder.
    pub fn true_state(&self, obs: ObsId) -> LatentState {
        let (layer, index) = self.file.decoder[obs];
        LatentState { layer, index }
    }

    pub fn obs_layer(&self, obs: ObsId) -> usize {
        self.file.decoder[obs].0
    }

    pub fn has_reward(&self) -> bool {
        self.file.rewards.is_some()
    }

    pub fn reward(&self, layer: usize, state: usize, action: Action) -> Option<f64> {
        self.file.rewards.as_ref().map(|r| r[layer][state][action])
    }

    pub fn features(&self, obs: ObsId) -> Option<&[f64]> {
        self.file.features.as_ref().map(|f| f[obs].as_slice())
    }

    pub fn is_composable(&self) -> bool {
        self.file.composable
    }

    /// True when every latent state emits exactly one observation.
    pub fn is_tabular(&self) -> bool {
        self.file.emissions.iter().flatten().all(|row| row.len() == 1)
    }

    pub fn with_rewards(mut self, rewards: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        self.file.rewards = Some(rewards);
        Self::new(self.file)
    }

    pub fn with_composable(mut self, composable: bool) -> Self {
        self.file.composable = composable;
        self
    }

    pub fn states(&self, layer: usize) -> impl Iterator<Item = LatentState> {
        (0..self.layer_size(layer)).map(move |index| LatentState { layer, index })
    }

    pub fn all_states(&self) -> impl Iterator<Item = LatentState> + '_ {
        (0..self.horizon()).flat_map(move |layer| self.states(layer))
    }

    /// Checks every probabilistic and structural invariant; an empty report
    /// means the model is a valid layered Block MDP.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let f = &self.file;
        check_row(&mut report, &f.initial, "initial".into());
        for (layer, rows) in f.transitions.iter().enumerate() {
            for (s, per_action) in rows.iter().enumerate() {
                for (a, row) in per_action.iter().enumerate() {
                    check_row(&mut report, row, format!("transition (h={layer}, s={s}, a={a})"));
                }
            }
        }

        let mut owner: Vec<Option<LatentState>> = vec![None; self.num_observations()];
        for (layer, rows) in f.emissions.iter().enumerate() {
            for (s, row) in rows.iter().enumerate() {
                let probs: Vec<f64> = row.iter().map(|&(_, p)| p).collect();
                check_row(&mut report, &probs, format!("emission (h={layer}, s={s})"));
                let here = LatentState::new(layer, s);
                for &(x, p) in row {
                    if p <= 0.0 {
                        continue;
                    }
                    match owner[x] {
                        Some(other) if other != here => report.push(
                            ViolationKind::Decodability,
                            format!("observation {x} emitted by {other} and {here}"),
                        ),
                        _ => owner[x] = Some(here),
                    }
                    let decoded = self.true_state(x);
                    if decoded.layer != layer {
                        report.push(
                            ViolationKind::LayerStructure,
                            format!("observation {x} emitted at layer {layer} but decodes to layer {}", decoded.layer),
                        );
                    } else if decoded != here {
                        report.push(
                            ViolationKind::DecoderMismatch,
                            format!("decoder maps observation {x} to {decoded}, emitted by {here}"),
                        );
                    }
                }
            }
        }

        if let Some(r) = &f.rewards {
            for (layer, rows) in r.iter().enumerate() {
                for (s, row) in rows.iter().enumerate() {
                    for (a, &v) in row.iter().enumerate() {
                        if !(0.0..=1.0).contains(&v) {
                            report.push(
                                ViolationKind::RewardRange,
                                format!("reward (h={layer}, s={s}, a={a}) = {v}"),
                            );
                        }
                    }
                }
            }
        }
        report
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn check_row(report: &mut ValidationReport, row: &[f64], location: String) {
    if let Some(p) = row.iter().find(|p| !(**p >= 0.0)) {
        report.push(ViolationKind::NegativeProbability, format!("{location}: entry {p}"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        report.push(ViolationKind::RowSum, format!("{location}: sums to {sum}"));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    RowSum,
    NegativeProbability,
    Decodability,
    DecoderMismatch,
    LayerStructure,
    RewardRange,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::RowSum => "row-sum",
            ViolationKind::NegativeProbability => "negative-probability",
            ViolationKind::Decodability => "decodability",
            ViolationKind::DecoderMismatch => "decoder-mismatch",
            ViolationKind::LayerStructure => "layer-structure",
            ViolationKind::RewardRange => "reward-range",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub location: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    fn push(&mut self, kind: ViolationKind, location: String) {
        self.violations.push(Violation { kind, location });
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Two layers, two states each, two actions; one observation per state.
    /// Action 0 keeps the index, action 1 flips it.
    pub fn two_layer_chain() -> BlockMdp {
        BlockMdp::new(ModelFile {
            horizon: 2,
            layer_sizes: vec![2, 2],
            num_actions: 2,
            initial: vec![1.0, 0.0],
            transitions: vec![vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            ]],
            emissions: vec![
                vec![vec![(0, 1.0)], vec![(1, 1.0)]],
                vec![vec![(2, 1.0)], vec![(3, 1.0)]],
            ],
            decoder: vec![(0, 0), (0, 1), (1, 0), (1, 1)],
            rewards: None,
            features: None,
            composable: false,
        })
        .unwrap()
    }
}

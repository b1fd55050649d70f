//! Policies: Markov tables, decoders, non-Markov partial-policy stacks and
//! composition schedules.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::density::ConditionalTable;
use crate::error::{Error, Result};
use crate::model::{Action, BlockMdp, ObsId};

/// A total map from observations to layer-local latent labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoder {
    labels: Vec<usize>,
}

impl Decoder {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels }
    }

    /// The true decoder of `model`.
    pub fn from_model(model: &BlockMdp) -> Self {
        Self::new((0..model.num_observations()).map(|x| model.true_state(x).index).collect())
    }

    pub fn decode(&self, obs: ObsId) -> usize {
        self.labels[obs]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn disagreements(&self, other: &Decoder) -> usize {
        self.labels.iter().zip(&other.labels).filter(|(a, b)| a != b).count()
    }
}

/// How a Markov policy picks its action at one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerRule {
    /// Indexed by the true latent state (tabular policies and analysis).
    ByState(Vec<Action>),
    /// Indexed by observation; `fallback` covers observations absent from the table.
    ByObservation {
        table: BTreeMap<ObsId, Action>,
        fallback: Option<Action>,
    },
    /// Decode with `decoder`, then look the label up in `actions`.
    Decoded {
        decoder: Arc<Decoder>,
        actions: Vec<Action>,
    },
}

/// A (partial) Markov policy; layers with no rule are undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovPolicy {
    rules: Vec<Option<LayerRule>>,
}

impl MarkovPolicy {
    pub fn undefined(horizon: usize) -> Self {
        Self { rules: vec![None; horizon] }
    }

    /// State-level policy defined on every layer.
    pub fn from_state_actions(actions: Vec<Vec<Action>>) -> Self {
        Self { rules: actions.into_iter().map(|a| Some(LayerRule::ByState(a))).collect() }
    }

    /// The policy playing `action` everywhere.
    pub fn constant(model: &BlockMdp, action: Action) -> Self {
        Self::from_state_actions(
            (0..model.horizon()).map(|h| vec![action; model.layer_size(h)]).collect(),
        )
    }

    pub fn horizon(&self) -> usize {
        self.rules.len()
    }

    pub fn rule(&self, layer: usize) -> Option<&LayerRule> {
        self.rules.get(layer).and_then(Option::as_ref)
    }

    pub fn set_rule(&mut self, layer: usize, rule: Option<LayerRule>) {
        self.rules[layer] = rule;
    }

    pub fn rules(&self) -> &[Option<LayerRule>] {
        &self.rules
    }

    pub fn is_defined(&self, layer: usize) -> bool {
        self.rule(layer).is_some()
    }

    pub fn action(&self, model: &BlockMdp, layer: usize, obs: ObsId) -> Result<Action> {
        let undefined = || Error::PolicyUndefined { layer, observation: obs };
        match self.rule(layer).ok_or_else(undefined)? {
            LayerRule::ByState(actions) => {
                actions.get(model.true_state(obs).index).copied().ok_or_else(undefined)
            }
            LayerRule::ByObservation { table, fallback } => {
                table.get(&obs).copied().or(*fallback).ok_or_else(undefined)
            }
            LayerRule::Decoded { decoder, actions } => {
                actions.get(decoder.decode(obs)).copied().ok_or_else(undefined)
            }
        }
    }
}

/// One layer of a non-Markov partial policy: the fitted table and decoder
/// learned by the inverse-kinematics regression at `layer`.
#[derive(Clone, Debug)]
pub struct StackLayer {
    pub layer: usize,
    pub table: ConditionalTable,
}

impl StackLayer {
    pub fn new(table: ConditionalTable) -> Result<Self> {
        if table.decoder().is_none() {
            return Err(Error::InvalidParameter("stack tables need an attached decoder".into()));
        }
        Ok(Self { layer: table.layer(), table })
    }

    /// Argmax over `(a, j)` given the observation and the carried index.
    /// Returns the action, the next index and the number of cells read.
    pub fn decide(&self, obs: ObsId, carried: usize) -> (Action, usize, usize) {
        let z = self.table.decoder().expect("checked at construction").decode(obs);
        self.table.argmax(z, carried)
    }
}

/// Persistent list of stack layers: prepending a layer shares the tail, so
/// every partial policy built during one IKDP call reuses the same tables.
#[derive(Debug)]
pub struct StackNode {
    pub head: Arc<StackLayer>,
    pub tail: Option<Arc<StackNode>>,
}

impl StackNode {
    pub fn push(head: StackLayer, tail: Option<Arc<StackNode>>) -> Result<Arc<Self>> {
        if let Some(t) = &tail {
            if t.head.layer != head.layer + 1 {
                return Err(Error::LayerMismatch(format!(
                    "stack layer {} cannot precede layer {}",
                    head.layer, t.head.layer
                )));
            }
            if t.target_layer() != head.table.target_layer() {
                return Err(Error::LayerMismatch("stack layers target different layers".into()));
            }
        }
        Ok(Arc::new(Self { head: Arc::new(head), tail }))
    }

    pub fn start_layer(&self) -> usize {
        self.head.layer
    }

    pub fn target_layer(&self) -> usize {
        self.head.table.target_layer()
    }

    /// Number of `(f̂, φ̂)` pairs stored from this node down.
    pub fn depth(&self) -> usize {
        1 + self.tail.as_ref().map_or(0, |t| t.depth())
    }

    pub fn layer_at(&self, layer: usize) -> Option<&StackLayer> {
        let mut node = self;
        loop {
            if node.head.layer == layer {
                return Some(&node.head);
            }
            node = node.tail.as_deref()?;
        }
    }
}

/// The partial policy `π̂^{(index, start)}`: a stack plus its initial index.
#[derive(Clone, Debug)]
pub struct StackPolicy {
    pub top: Arc<StackNode>,
    pub index: usize,
}

impl StackPolicy {
    pub fn start_layer(&self) -> usize {
        self.top.start_layer()
    }

    /// Last layer at which the stack acts (`target - 1`).
    pub fn end_layer(&self) -> usize {
        self.top.target_layer() - 1
    }

    pub fn target_layer(&self) -> usize {
        self.top.target_layer()
    }

    pub fn num_indices(&self) -> usize {
        self.top.head.table.num_indices()
    }
}

#[derive(Clone, Debug)]
pub enum Behavior {
    /// `π_unif`: uniform over the base action set.
    Uniform,
    Markov(Arc<MarkovPolicy>),
    Stack(StackPolicy),
}

impl From<MarkovPolicy> for Behavior {
    fn from(p: MarkovPolicy) -> Self {
        Behavior::Markov(Arc::new(p))
    }
}

/// A composed policy `π₁ ∘_{t₂} π₂ ∘_{t₃} …`: each segment takes over from
/// its start layer until the next segment starts.
#[derive(Clone, Debug, Default)]
pub struct Schedule {
    segments: Vec<(usize, Behavior)>,
}

impl Schedule {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn starting_with(behavior: Behavior) -> Self {
        Self { segments: vec![(0, behavior)] }
    }

    pub fn markov(policy: MarkovPolicy) -> Self {
        Self::starting_with(policy.into())
    }

    pub fn stack(stack: StackPolicy) -> Self {
        let start = stack.start_layer();
        Self { segments: vec![(start, Behavior::Stack(stack))] }
    }

    /// `self ∘_layer behavior`: segments starting at or after `layer` are dropped.
    pub fn then(mut self, layer: usize, behavior: Behavior) -> Self {
        self.segments.retain(|(start, _)| *start < layer);
        self.segments.push((layer, behavior));
        self
    }

    pub fn segments(&self) -> &[(usize, Behavior)] {
        &self.segments
    }

    /// Index of the segment in charge of `layer`.
    pub fn active(&self, layer: usize) -> Option<usize> {
        self.segments.iter().rposition(|(start, _)| *start <= layer)
    }

    pub fn segment(&self, idx: usize) -> &(usize, Behavior) {
        &self.segments[idx]
    }

    pub(crate) fn check_alignment(&self) -> Result<()> {
        for (start, b) in &self.segments {
            if let Behavior::Stack(s) = b {
                if s.start_layer() != *start {
                    return Err(Error::LayerMismatch(format!(
                        "stack starting at layer {} scheduled at layer {start}",
                        s.start_layer()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A set of policies meant to reach every reachable state of `layer`.
#[derive(Clone, Debug, Default)]
pub struct PolicyCover {
    pub layer: usize,
    pub members: Vec<Schedule>,
}

impl PolicyCover {
    pub fn new(layer: usize, members: Vec<Schedule>) -> Self {
        Self { layer, members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Covers `Ψ^{(1)}, …, Ψ^{(H)}`, indexed by layer.
#[derive(Clone, Debug, Default)]
pub struct CoverSet {
    pub covers: Vec<PolicyCover>,
}

impl CoverSet {
    pub fn layer(&self, layer: usize) -> &PolicyCover {
        &self.covers[layer]
    }

    pub fn horizon(&self) -> usize {
        self.covers.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::two_layer_chain;

    #[test]
    fn markov_lookup_by_state_observation_and_decoder() {
        let m = two_layer_chain();
        let p = MarkovPolicy::from_state_actions(vec![vec![1, 0], vec![0, 0]]);
        assert_eq!(p.action(&m, 0, 0).unwrap(), 1);
        assert_eq!(p.action(&m, 0, 1).unwrap(), 0);

        let mut q = MarkovPolicy::undefined(2);
        q.set_rule(
            0,
            Some(LayerRule::ByObservation { table: BTreeMap::from([(0, 1)]), fallback: None }),
        );
        assert_eq!(q.action(&m, 0, 0).unwrap(), 1);
        assert!(matches!(
            q.action(&m, 0, 1),
            Err(Error::PolicyUndefined { layer: 0, observation: 1 })
        ));
        assert!(q.action(&m, 1, 2).is_err());

        let d = Arc::new(Decoder::from_model(&m));
        q.set_rule(1, Some(LayerRule::Decoded { decoder: d, actions: vec![1, 0] }));
        assert_eq!(q.action(&m, 1, 2).unwrap(), 1);
        assert_eq!(q.action(&m, 1, 3).unwrap(), 0);
    }

    #[test]
    fn schedule_composition_replaces_tail() {
        let s = Schedule::starting_with(Behavior::Uniform)
            .then(2, Behavior::Uniform)
            .then(1, Behavior::Uniform);
        let starts: Vec<usize> = s.segments().iter().map(|(l, _)| *l).collect();
        assert_eq!(starts, vec![0, 1]);
        assert_eq!(s.active(0), Some(0));
        assert_eq!(s.active(5), Some(1));
        assert_eq!(Schedule::empty().active(0), None);
    }
}

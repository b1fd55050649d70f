//! JSON form of a cover set. Decoders, tables, stack nodes and Markov
//! policies are stored once each; members refer to them by position, so the
//! sharing between partial policies survives a round trip.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::density::{ConditionalTable, TableShape};
use crate::error::{Error, Result};
use crate::model::{Action, ObsId};
use crate::policy::{
    Behavior, CoverSet, Decoder, LayerRule, MarkovPolicy, PolicyCover, Schedule, StackLayer, StackNode, StackPolicy,
};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoverFile {
    decoders: Vec<Vec<usize>>,
    tables: Vec<TableRecord>,
    stack_nodes: Vec<NodeRecord>,
    markov: Vec<Vec<Option<RuleRecord>>>,
    covers: Vec<CoverRecord>,
}

#[derive(Serialize, Deserialize)]
struct TableRecord {
    shape: TableShape,
    probs: Vec<f64>,
    decoder: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    table: usize,
    tail: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RuleRecord {
    ByState(Vec<Action>),
    ByObservation { table: Vec<(ObsId, Action)>, fallback: Option<Action> },
    Decoded { decoder: usize, actions: Vec<Action> },
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum BehaviorRecord {
    Uniform,
    Markov(usize),
    Stack { node: usize, index: usize },
}

#[derive(Serialize, Deserialize)]
struct CoverRecord {
    layer: usize,
    members: Vec<Vec<(usize, BehaviorRecord)>>,
}

#[derive(Default)]
struct Writer {
    file: Option<CoverFile>,
    decoders: HashMap<*const Decoder, usize>,
    nodes: HashMap<*const StackNode, usize>,
    markov: HashMap<*const MarkovPolicy, usize>,
}

impl Writer {
    fn file(&mut self) -> &mut CoverFile {
        self.file.get_or_insert_with(|| CoverFile {
            decoders: Vec::new(),
            tables: Vec::new(),
            stack_nodes: Vec::new(),
            markov: Vec::new(),
            covers: Vec::new(),
        })
    }

    fn decoder(&mut self, d: &Arc<Decoder>) -> usize {
        if let Some(&k) = self.decoders.get(&Arc::as_ptr(d)) {
            return k;
        }
        let file = self.file();
        file.decoders.push(d.labels().to_vec());
        let k = file.decoders.len() - 1;
        self.decoders.insert(Arc::as_ptr(d), k);
        k
    }

    fn node(&mut self, node: &Arc<StackNode>) -> usize {
        if let Some(&k) = self.nodes.get(&Arc::as_ptr(node)) {
            return k;
        }
        // Tails first, so a reader always finds them already built.
        let tail = node.tail.as_ref().map(|t| self.node(t));
        let table = &node.head.table;
        let decoder = table.decoder().map(|d| self.decoder(d));
        let file = self.file();
        file.tables.push(TableRecord { shape: table.shape(), probs: table.probs().to_vec(), decoder });
        let table = file.tables.len() - 1;
        file.stack_nodes.push(NodeRecord { table, tail });
        let k = file.stack_nodes.len() - 1;
        self.nodes.insert(Arc::as_ptr(node), k);
        k
    }

    fn markov(&mut self, p: &Arc<MarkovPolicy>) -> usize {
        if let Some(&k) = self.markov.get(&Arc::as_ptr(p)) {
            return k;
        }
        let rules = p
            .rules()
            .iter()
            .map(|r| {
                r.as_ref().map(|r| match r {
                    LayerRule::ByState(a) => RuleRecord::ByState(a.clone()),
                    LayerRule::ByObservation { table, fallback } => RuleRecord::ByObservation {
                        table: table.iter().map(|(&x, &a)| (x, a)).collect(),
                        fallback: *fallback,
                    },
                    LayerRule::Decoded { decoder, actions } => {
                        RuleRecord::Decoded { decoder: self.decoder(decoder), actions: actions.clone() }
                    }
                })
            })
            .collect();
        let file = self.file();
        file.markov.push(rules);
        let k = file.markov.len() - 1;
        self.markov.insert(Arc::as_ptr(p), k);
        k
    }

    fn schedule(&mut self, s: &Schedule) -> Vec<(usize, BehaviorRecord)> {
        s.segments()
            .iter()
            .map(|(start, b)| {
                let rec = match b {
                    Behavior::Uniform => BehaviorRecord::Uniform,
                    Behavior::Markov(p) => BehaviorRecord::Markov(self.markov(p)),
                    Behavior::Stack(sp) => BehaviorRecord::Stack { node: self.node(&sp.top), index: sp.index },
                };
                (*start, rec)
            })
            .collect()
    }
}

pub fn cover_set_to_json(covers: &CoverSet) -> Result<String> {
    let mut w = Writer::default();
    w.file();
    for cover in &covers.covers {
        let members = cover.members.iter().map(|m| w.schedule(m)).collect();
        w.file().covers.push(CoverRecord { layer: cover.layer, members });
    }
    Ok(serde_json::to_string(&w.file.take().expect("initialized"))?)
}

fn bad(msg: &str) -> Error {
    Error::Shape(format!("cover file: {msg}"))
}

pub fn cover_set_from_json(text: &str) -> Result<CoverSet> {
    let file: CoverFile = serde_json::from_str(text)?;
    let decoders: Vec<Arc<Decoder>> = file.decoders.into_iter().map(|l| Arc::new(Decoder::new(l))).collect();
    let get_decoder = |k: usize| decoders.get(k).cloned().ok_or_else(|| bad("decoder index out of range"));

    let mut nodes: Vec<Arc<StackNode>> = Vec::with_capacity(file.stack_nodes.len());
    for rec in &file.stack_nodes {
        let t = file.tables.get(rec.table).ok_or_else(|| bad("table index out of range"))?;
        let decoder = t.decoder.map(get_decoder).transpose()?;
        let table = ConditionalTable::from_probs(t.shape, t.probs.clone(), decoder)?;
        let tail = match rec.tail {
            Some(k) => Some(nodes.get(k).cloned().ok_or_else(|| bad("stack tail must precede its head"))?),
            None => None,
        };
        nodes.push(StackNode::push(StackLayer::new(table)?, tail)?);
    }

    let mut markov = Vec::with_capacity(file.markov.len());
    for rules in file.markov {
        let mut p = MarkovPolicy::undefined(rules.len());
        for (layer, r) in rules.into_iter().enumerate() {
            let rule = match r {
                None => None,
                Some(RuleRecord::ByState(a)) => Some(LayerRule::ByState(a)),
                Some(RuleRecord::ByObservation { table, fallback }) => {
                    Some(LayerRule::ByObservation { table: table.into_iter().collect(), fallback })
                }
                Some(RuleRecord::Decoded { decoder, actions }) => {
                    Some(LayerRule::Decoded { decoder: get_decoder(decoder)?, actions })
                }
            };
            p.set_rule(layer, rule);
        }
        markov.push(Arc::new(p));
    }

    let mut covers = Vec::with_capacity(file.covers.len());
    for c in file.covers {
        let mut members = Vec::with_capacity(c.members.len());
        for segs in c.members {
            let mut s = Schedule::empty();
            for (start, b) in segs {
                let behavior = match b {
                    BehaviorRecord::Uniform => Behavior::Uniform,
                    BehaviorRecord::Markov(k) => {
                        Behavior::Markov(markov.get(k).cloned().ok_or_else(|| bad("policy index out of range"))?)
                    }
                    BehaviorRecord::Stack { node, index } => Behavior::Stack(StackPolicy {
                        top: nodes.get(node).cloned().ok_or_else(|| bad("stack index out of range"))?,
                        index,
                    }),
                };
                s = s.then(start, behavior);
            }
            s.check_alignment()?;
            members.push(s);
        }
        covers.push(PolicyCover::new(c.layer, members));
    }
    Ok(CoverSet { covers })
}

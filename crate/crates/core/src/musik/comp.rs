use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::density::{count_cells, ConditionalTable, TableShape};
use crate::error::{Error, Result};
use crate::model::{Action, BlockMdp, ObsId};
use crate::policy::{Behavior, CoverSet, Decoder, LayerRule, MarkovPolicy, PolicyCover, Schedule};
use crate::rng::SeedStream;
use crate::simulate::{parallel_samples, rollout, ExecStats};

use super::{MusikConfig, RunStats};

struct CompRecord {
    index: usize,
    action: Action,
    x_prev: ObsId,
    x: ObsId,
}

/// The forward, one-step variant for composable environments. Layer `h`'s
/// cover extends the best layer-`(h-1)` member with a one-step inverse
/// kinematics policy. The layer-0 cover is `|S_0|` copies of the uniform policy.
pub fn run_musik_comp(
    model: &BlockMdp,
    class: &[Arc<Decoder>],
    cfg: &MusikConfig,
    stream: &SeedStream,
) -> Result<(CoverSet, RunStats)> {
    cfg.check()?;
    if !model.is_composable() {
        return Err(Error::NotComposable);
    }
    if class.is_empty() {
        return Err(Error::InvalidParameter("decoder class is empty".into()));
    }
    let started = Instant::now();
    let uniform = Schedule::starting_with(Behavior::Uniform);
    let mut covers = vec![PolicyCover::new(0, vec![uniform; model.layer_size(0)])];
    let mut stats = RunStats { chosen_decoders: vec![Vec::new()], ..RunStats::default() };
    for h in 1..model.horizon() {
        let prev = &covers[h - 1].members;
        let records = parallel_samples(&stream.derive("musik-comp", h as u64), "samples", cfg.n, |rng| {
            let index = rng.random_range(0..prev.len());
            let schedule = prev[index].clone().then(h - 1, Behavior::Uniform);
            let traj = rollout(model, &schedule, h, false, rng, &mut ExecStats::default())?;
            Ok(CompRecord {
                index,
                action: traj.steps[h - 1].action.expect("acted at h - 1"),
                x_prev: traj.steps[h - 1].obs,
                x: traj.steps[h].obs,
            })
        })?;
        let (cover, chosen) = fit_layer(model, class, h, prev, &records)?;
        stats.episodes += cfg.n as u64;
        let mut per_t = vec![None; h];
        per_t[h - 1] = Some(chosen);
        stats.chosen_decoders.push(per_t);
        covers.push(cover);
    }
    stats.wall_ms = started.elapsed().as_millis();
    Ok((CoverSet { covers }, stats))
}

fn fit_layer(
    model: &BlockMdp,
    class: &[Arc<Decoder>],
    h: usize,
    prev: &[Schedule],
    records: &[CompRecord],
) -> Result<(PolicyCover, usize)> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels = model.layer_size(h);
    let shape = TableShape {
        layer: h - 1,
        target_layer: h,
        left: model.layer_observations(h - 1).len(),
        right: labels,
        num_actions: model.num_actions(),
        num_indices: 1,
    };
    // f(a | x_{h-1}, φ(x_h)), with the raw previous observation as the left cell.
    let fits: Vec<(Vec<u64>, f64)> = class
        .par_iter()
        .map(|phi| {
            count_cells(shape, records.iter().map(|r| (model.obs_slot(r.x_prev), phi.decode(r.x), r.action)))
        })
        .collect();
    let mut chosen = 0;
    for (k, (_, ll)) in fits.iter().enumerate() {
        if *ll > fits[chosen].1 {
            chosen = k;
        }
    }
    let table = ConditionalTable::from_counts(shape, &fits[chosen].0, None);
    let phi = &class[chosen];

    // g(i | j): which previous member most often produced decoded state j.
    let mut assoc = vec![vec![0u64; prev.len()]; labels];
    for r in records {
        assoc[phi.decode(r.x)][r.index] += 1;
    }
    let members = (0..labels)
        .map(|j| {
            let row = &assoc[j];
            let mut best = 0;
            for (i, &c) in row.iter().enumerate() {
                if c > row[best] {
                    best = i;
                }
            }
            let actions: BTreeMap<ObsId, Action> = model
                .layer_observations(h - 1)
                .iter()
                .enumerate()
                .map(|(slot, &x)| (x, table.argmax(slot, j).0))
                .collect();
            let mut step = MarkovPolicy::undefined(model.horizon());
            step.set_rule(h - 1, Some(LayerRule::ByObservation { table: actions, fallback: None }));
            prev[best].clone().then(h - 1, step.into())
        })
        .collect();
    Ok((PolicyCover::new(h, members), chosen))
}

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;

use crate::density::{fit_mle_tabular, TableShape, TabularRecord};
use crate::error::{Error, Result};
use crate::model::{Action, BlockMdp};
use crate::policy::{Behavior, CoverSet, LayerRule, MarkovPolicy, PolicyCover, Schedule};
use crate::rng::SeedStream;
use crate::simulate::{parallel_samples, rollout, ExecStats};

use super::{MusikConfig, RunStats};

/// The tabular variant: one action-only regression per target index, and
/// Markov partial policies composed layer by layer.
pub fn run_musik_tab(model: &BlockMdp, cfg: &MusikConfig, stream: &SeedStream) -> Result<(CoverSet, RunStats)> {
    cfg.check()?;
    if !model.is_tabular() {
        return Err(Error::NotTabular("some latent state emits more than one observation".into()));
    }
    let started = Instant::now();
    let mut covers = vec![PolicyCover::new(0, Vec::new())];
    let mut stats = RunStats { chosen_decoders: vec![Vec::new()], ..RunStats::default() };
    for h in 1..model.horizon() {
        let cover = ikdp_tab(model, &covers, cfg.n, h, &stream.derive("musik-tab", h as u64))?;
        stats.episodes += (h * model.layer_size(h) * cfg.n) as u64;
        stats.chosen_decoders.push(vec![None; h]);
        covers.push(cover);
    }
    stats.wall_ms = started.elapsed().as_millis();
    Ok((CoverSet { covers }, stats))
}

fn ikdp_tab(model: &BlockMdp, covers: &[PolicyCover], n: usize, h: usize, stream: &SeedStream) -> Result<PolicyCover> {
    let indices = model.layer_size(h);
    // π̂^{(i,t+1)}; `None` stands for the uniform policy at t + 1 = h.
    let mut next: Vec<Option<Arc<MarkovPolicy>>> = vec![None; indices];
    for t in (0..h).rev() {
        let roll_in = &covers[t].members;
        let mut current = Vec::with_capacity(indices);
        for (i, follow) in next.iter().enumerate() {
            let roll_out = follow.clone().map_or(Behavior::Uniform, Behavior::Markov);
            let label = format!("t{t}/i{i}");
            let records = parallel_samples(&stream.derive(&label, 0), "samples", n, |rng| {
                let base = if roll_in.is_empty() {
                    Schedule::empty()
                } else {
                    roll_in[rng.random_range(0..roll_in.len())].clone()
                };
                let schedule = base.then(t, Behavior::Uniform).then(t + 1, roll_out.clone());
                let traj = rollout(model, &schedule, h, false, rng, &mut ExecStats::default())?;
                Ok(TabularRecord {
                    s_t: model.true_state(traj.steps[t].obs).index,
                    action: traj.steps[t].action.expect("acted at layer t"),
                    s_h: model.true_state(traj.steps[h].obs).index,
                })
            })?;
            let shape = TableShape {
                layer: t,
                target_layer: h,
                left: model.layer_size(t),
                right: indices,
                num_actions: model.num_actions(),
                num_indices: 1,
            };
            let table = fit_mle_tabular(&records, shape)?;
            let actions: Vec<Action> = (0..model.layer_size(t)).map(|s| table.argmax(s, i).0).collect();
            let mut policy = follow.as_deref().cloned().unwrap_or_else(|| MarkovPolicy::undefined(model.horizon()));
            policy.set_rule(t, Some(LayerRule::ByState(actions)));
            current.push(Some(Arc::new(policy)));
        }
        next = current;
    }
    let members = next
        .into_iter()
        .map(|p| Schedule::starting_with(Behavior::Markov(p.expect("set at t = 0"))))
        .collect();
    Ok(PolicyCover::new(h, members))
}

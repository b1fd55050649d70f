use std::sync::Arc;
use std::time::Instant;

use rand::Rng;

use crate::density::{fit_mle, ConditionalTable, IkDataset, IkRecord, TableShape};
use crate::error::{Error, Result};
use crate::model::BlockMdp;
use crate::policy::{Behavior, CoverSet, Decoder, PolicyCover, Schedule, StackLayer, StackNode, StackPolicy};
use crate::rng::SeedStream;
use crate::simulate::{parallel_samples, rollout, ExecStats, Trajectory};

use super::{MusikConfig, RunStats};

/// `n` samples of `unif(roll_in) ∘_t π_unif ∘_{t+1} roll_outs[i]` with `i`
/// uniform over the roll-outs. An empty roll-in starts from the initial
/// distribution, which is only meaningful at `t = 0`.
pub fn collect_ik_dataset(
    model: &BlockMdp,
    t: usize,
    h: usize,
    roll_in: &[Schedule],
    roll_outs: &[Behavior],
    n: usize,
    stream: &SeedStream,
) -> Result<IkDataset> {
    if t >= h || h >= model.horizon() {
        return Err(Error::LayerMismatch(format!("need t < h < H, got t={t}, h={h}")));
    }
    if roll_in.is_empty() && t > 0 {
        return Err(Error::InvalidParameter(format!("layer {t} needs a non-empty roll-in cover")));
    }
    if roll_outs.is_empty() {
        return Err(Error::InvalidParameter("no roll-out policies".into()));
    }
    let records = parallel_samples(stream, "ik-dataset", n, |rng| {
        let index = rng.random_range(0..roll_outs.len());
        let base = if roll_in.is_empty() {
            Schedule::empty()
        } else {
            roll_in[rng.random_range(0..roll_in.len())].clone()
        };
        let schedule = base.then(t, Behavior::Uniform).then(t + 1, roll_outs[index].clone());
        let traj = rollout(model, &schedule, h, false, rng, &mut ExecStats::default())?;
        Ok(IkRecord {
            index,
            action: traj.steps[t].action.expect("acted at layer t"),
            x_t: traj.steps[t].obs,
            x_h: traj.steps[h].obs,
        })
    })?;
    Ok(IkDataset { t, h, records })
}

/// Pushes the fitted layer onto the shared stack and returns the new node and
/// the partial policies `π̂^{(i,t)}` for every index `i`.
pub fn build_partial_policies(
    table: ConditionalTable,
    next: Option<Arc<StackNode>>,
) -> Result<(Arc<StackNode>, Vec<StackPolicy>)> {
    let indices = table.num_indices();
    let node = StackNode::push(StackLayer::new(table)?, next)?;
    let policies = (0..indices).map(|index| StackPolicy { top: node.clone(), index }).collect();
    Ok((node, policies))
}

/// Builds the cover for layer `h` from covers for layers `0..h`.
/// Returns the cover and the decoder chosen at each `t` (indexed by `t`).
pub fn run_ikdp(
    model: &BlockMdp,
    covers: &[PolicyCover],
    class: &[Arc<Decoder>],
    n: usize,
    h: usize,
    stream: &SeedStream,
) -> Result<(PolicyCover, Vec<Option<usize>>)> {
    if h == 0 || h >= model.horizon() || covers.len() < h {
        return Err(Error::LayerMismatch(format!("cannot build a cover for layer {h}")));
    }
    let indices = model.layer_size(h);
    let mut roll_outs: Vec<Behavior> = vec![Behavior::Uniform; indices];
    let mut node: Option<Arc<StackNode>> = None;
    let mut chosen = vec![None; h];
    for t in (0..h).rev() {
        let data = collect_ik_dataset(
            model,
            t,
            h,
            &covers[t].members,
            &roll_outs,
            n,
            &stream.derive("ikdp", t as u64),
        )?;
        let shape = TableShape {
            layer: t,
            target_layer: h,
            left: model.layer_size(t),
            right: indices,
            num_actions: model.num_actions(),
            num_indices: indices,
        };
        let fit = fit_mle(&data, class, shape)?;
        chosen[t] = Some(fit.chosen);
        let (top, policies) = build_partial_policies(fit.table, node.take())?;
        node = Some(top);
        roll_outs = policies.into_iter().map(Behavior::Stack).collect();
    }
    let members = roll_outs
        .into_iter()
        .map(|b| match b {
            Behavior::Stack(s) => Schedule::stack(s),
            _ => unreachable!("the loop ran at least once"),
        })
        .collect();
    Ok((PolicyCover::new(h, members), chosen))
}

/// Covers for every layer; layer 0's cover is empty.
pub fn run_musik(
    model: &BlockMdp,
    class: &[Arc<Decoder>],
    cfg: &MusikConfig,
    stream: &SeedStream,
) -> Result<(CoverSet, RunStats)> {
    cfg.check()?;
    let started = Instant::now();
    let mut covers = vec![PolicyCover::new(0, Vec::new())];
    let mut stats = RunStats { chosen_decoders: vec![Vec::new()], ..RunStats::default() };
    for h in 1..model.horizon() {
        let (cover, chosen) = run_ikdp(model, &covers, class, cfg.n, h, &stream.derive("musik", h as u64))?;
        stats.episodes += (h * cfg.n) as u64;
        stats.chosen_decoders.push(chosen);
        covers.push(cover);
    }
    stats.wall_ms = started.elapsed().as_millis();
    Ok((CoverSet { covers }, stats))
}

/// Runs `roll_in` up to the stack's start layer, then the stack to its
/// target layer. The stats count the table cells the stack read.
pub fn execute_stack<R: Rng + ?Sized>(
    model: &BlockMdp,
    roll_in: Option<&Schedule>,
    stack: &StackPolicy,
    rng: &mut R,
) -> Result<(Trajectory, ExecStats)> {
    let start = stack.start_layer();
    if stack.target_layer() >= model.horizon() {
        return Err(Error::LayerMismatch("stack targets a layer past the horizon".into()));
    }
    if start > 0 && roll_in.is_none() {
        return Err(Error::LayerMismatch(format!("stack starts at layer {start} but no roll-in was given")));
    }
    let schedule = roll_in.cloned().unwrap_or_default().then(start, Behavior::Stack(stack.clone()));
    let mut stats = ExecStats::default();
    let traj = rollout(model, &schedule, stack.target_layer(), false, rng, &mut stats)?;
    Ok((traj, stats))
}

//! Policy Search by Dynamic Programming on top of a policy cover, with
//! closed-form least-squares Q fits over a finite decoder class.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::schedule_return;
use crate::error::{Error, Result};
use crate::model::{Action, BlockMdp, ObsId};
use crate::musik::RunStats;
use crate::policy::{Behavior, CoverSet, Decoder, LayerRule, MarkovPolicy, Schedule};
use crate::rng::SeedStream;
use crate::simulate::{parallel_samples, rollout, sample_trajectory, ExecStats};

/// One regression sample: observation at layer `h`, action, tail return.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QRecord {
    pub obs: ObsId,
    pub action: Action,
    pub ret: f64,
}

/// Estimated returns per `(decoded state, action)`; empty cells hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    pub layer: usize,
    pub num_actions: usize,
    pub values: Vec<f64>,
    pub counts: Vec<u64>,
    pub decoder: Arc<Decoder>,
    pub chosen: usize,
    /// Sum of squared errors per decoder, in class order.
    pub sse: Vec<f64>,
}

impl QTable {
    pub fn value(&self, z: usize, a: Action) -> f64 {
        self.values[z * self.num_actions + a]
    }

    /// Greedy action for decoded state `z`; ties go to the lowest action.
    pub fn greedy(&self, z: usize) -> Action {
        let row = &self.values[z * self.num_actions..(z + 1) * self.num_actions];
        let mut best = 0;
        for (a, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = a;
            }
        }
        best
    }
}

struct CellStats {
    sums: Vec<f64>,
    counts: Vec<u64>,
    sse: f64,
}

fn cell_stats(records: &[QRecord], phi: &Decoder, labels: usize, num_actions: usize) -> CellStats {
    let mut sums = vec![0.0; labels * num_actions];
    let mut counts = vec![0u64; labels * num_actions];
    let cell = |r: &QRecord| phi.decode(r.obs) * num_actions + r.action;
    for r in records {
        let k = cell(r);
        sums[k] += r.ret;
        counts[k] += 1;
    }
    // Second pass around the cell means; the one-pass form cancels badly.
    let sse = records
        .iter()
        .map(|r| {
            let k = cell(r);
            let d = r.ret - sums[k] / counts[k] as f64;
            d * d
        })
        .sum();
    CellStats { sums, counts, sse }
}

/// Least squares over `f: [S] × A → [0, max_value]` and `φ ∈ Φ`: per-cell
/// means for each decoder, the decoder with the smallest error wins (ties to
/// the lowest index), and means are clamped into range.
pub fn fit_q_regression(
    records: &[QRecord],
    class: &[Arc<Decoder>],
    layer: usize,
    labels: usize,
    num_actions: usize,
    max_value: f64,
) -> Result<QTable> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if class.is_empty() {
        return Err(Error::InvalidParameter("decoder class is empty".into()));
    }
    let stats: Vec<CellStats> = class.par_iter().map(|phi| cell_stats(records, phi, labels, num_actions)).collect();
    let mut chosen = 0;
    for (k, s) in stats.iter().enumerate() {
        if s.sse < stats[chosen].sse {
            chosen = k;
        }
    }
    let sse = stats.iter().map(|s| s.sse).collect();
    let best = &stats[chosen];
    let values = best
        .sums
        .iter()
        .zip(&best.counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { (s / c as f64).clamp(0.0, max_value) })
        .collect();
    Ok(QTable {
        layer,
        num_actions,
        values,
        counts: best.counts.clone(),
        decoder: class[chosen].clone(),
        chosen,
        sse,
    })
}

/// Backward PSDP from layer `H-1` to 0. Returns the greedy policy over all
/// layers and the per-layer Q fits (indexed by layer).
pub fn run_psdp(
    model: &BlockMdp,
    covers: &CoverSet,
    class: &[Arc<Decoder>],
    n: usize,
    stream: &SeedStream,
) -> Result<(MarkovPolicy, Vec<QTable>, RunStats)> {
    if !model.has_reward() {
        return Err(Error::MissingReward);
    }
    if n == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    let horizon = model.horizon();
    if covers.horizon() < horizon {
        return Err(Error::InvalidParameter(format!(
            "covers span {} layers, the model has {horizon}",
            covers.horizon()
        )));
    }
    if let Some(h) = (1..horizon).find(|&h| covers.layer(h).is_empty()) {
        return Err(Error::InvalidParameter(format!("cover for layer {h} is empty")));
    }
    let started = Instant::now();
    let mut policy = MarkovPolicy::undefined(horizon);
    let mut fits = Vec::with_capacity(horizon);
    let mut stats = RunStats::default();
    for h in (0..horizon).rev() {
        let roll_in = &covers.layer(h).members;
        let tail = Arc::new(policy.clone());
        let records = parallel_samples(&stream.derive("psdp", h as u64), "samples", n, |rng| {
            let base = if roll_in.is_empty() {
                Schedule::empty()
            } else {
                roll_in[rng.random_range(0..roll_in.len())].clone()
            };
            let mut schedule = base.then(h, Behavior::Uniform);
            if h + 1 < horizon {
                schedule = schedule.then(h + 1, Behavior::Markov(tail.clone()));
            }
            let traj = rollout(model, &schedule, horizon - 1, true, rng, &mut ExecStats::default())?;
            let ret = traj.steps[h..].iter().filter_map(|s| s.reward).sum();
            Ok(QRecord { obs: traj.steps[h].obs, action: traj.steps[h].action.expect("acted"), ret })
        })?;
        let fit = fit_q_regression(
            &records,
            class,
            h,
            model.layer_size(h),
            model.num_actions(),
            (horizon - h) as f64,
        )?;
        let actions = (0..model.layer_size(h)).map(|z| fit.greedy(z)).collect();
        policy.set_rule(h, Some(LayerRule::Decoded { decoder: fit.decoder.clone(), actions }));
        stats.episodes += n as u64;
        fits.push(fit);
    }
    fits.reverse();
    stats.chosen_decoders = fits.iter().map(|f| vec![Some(f.chosen)]).collect();
    stats.wall_ms = started.elapsed().as_millis();
    Ok((policy, fits, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Exact,
    MonteCarlo { episodes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mode: String,
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub episodes: usize,
}

/// Expected return: exact latent DP, or a Monte-Carlo mean with a normal 95% interval.
pub fn evaluate_policy_return(
    model: &BlockMdp,
    schedule: &Schedule,
    mode: EvalMode,
    stream: &SeedStream,
) -> Result<Evaluation> {
    if !model.has_reward() {
        return Err(Error::MissingReward);
    }
    match mode {
        EvalMode::Exact => {
            let v = schedule_return(model, schedule)?;
            Ok(Evaluation { mode: "exact".into(), value: v, ci_lo: v, ci_hi: v, episodes: 0 })
        }
        EvalMode::MonteCarlo { episodes } => {
            if episodes == 0 {
                return Err(Error::InvalidParameter("need at least one evaluation episode".into()));
            }
            let returns = parallel_samples(stream, "evaluate", episodes, |rng| {
                Ok(sample_trajectory(model, schedule, rng)?.total_reward())
            })?;
            let n = returns.len() as f64;
            let mean = returns.iter().sum::<f64>() / n;
            let var = if returns.len() > 1 {
                returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let half = 1.96 * (var / n).sqrt();
            Ok(Evaluation { mode: "monte-carlo".into(), value: mean, ci_lo: mean - half, ci_hi: mean + half, episodes })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(obs: ObsId, action: Action, ret: f64) -> QRecord {
        QRecord { obs, action, ret }
    }

    #[test]
    fn constant_returns_fit_exactly() {
        let class = vec![Arc::new(Decoder::new(vec![0, 1])), Arc::new(Decoder::new(vec![0, 0]))];
        let data = vec![rec(0, 0, 0.5), rec(1, 1, 0.5), rec(0, 1, 0.5)];
        let q = fit_q_regression(&data, &class, 0, 2, 2, 1.0).unwrap();
        assert_eq!(q.chosen, 0);
        assert!(q.sse.iter().all(|&e| e.abs() < 1e-15));
        assert_eq!(q.value(0, 0), 0.5);
        assert_eq!(q.value(1, 0), 0.0);
    }

    #[test]
    fn single_record_is_reproduced() {
        let class = vec![Arc::new(Decoder::new(vec![0]))];
        let q = fit_q_regression(&[rec(0, 2, 0.7)], &class, 0, 1, 3, 1.0).unwrap();
        assert_eq!(q.value(0, 2), 0.7);
        assert_eq!(q.greedy(0), 2);
    }

    #[test]
    fn splitting_decoder_wins() {
        let class = vec![Arc::new(Decoder::new(vec![0, 0])), Arc::new(Decoder::new(vec![0, 1]))];
        let data = vec![rec(0, 0, 1.0), rec(1, 0, 0.0), rec(0, 0, 1.0), rec(1, 0, 0.0)];
        let q = fit_q_regression(&data, &class, 0, 2, 1, 1.0).unwrap();
        assert_eq!(q.chosen, 1);
        assert!(q.sse[1] < q.sse[0]);
    }

    #[test]
    fn empty_records_are_rejected() {
        let class = vec![Arc::new(Decoder::new(vec![0]))];
        assert!(matches!(fit_q_regression(&[], &class, 0, 1, 1, 1.0), Err(Error::EmptyDataset)));
    }
}

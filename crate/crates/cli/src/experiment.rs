//! Seed sweeps and result files.

use std::cell::Cell;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use musik_core::analysis::{check_cover, Baseline};
use musik_core::dp::value_iteration;
use musik_core::envs::make_decoder_class;
use musik_core::musik::{recommended_n, run_musik, run_musik_comp, run_musik_tab, MusikConfig, RunStats, Variant};
use musik_core::policy::{CoverSet, Decoder, MarkovPolicy, Schedule};
use musik_core::psdp::{evaluate_policy_return, run_psdp, EvalMode, QTable};
use musik_core::rng::SeedStream;
use musik_core::BlockMdp;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Algorithm, EvalSetting, ExperimentConfig, Planner, SampleSize};
use crate::preset::Env;

/// One line of `results.csv`. Optional cells are written empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub seed: u64,
    pub env: String,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub algorithm: String,
    pub n: usize,
    pub episodes_used: u64,
    pub cover_pass_fraction: f64,
    pub final_return: Option<f64>,
    pub optimal_found: u8,
    pub wall_ms: Option<u128>,
}

/// Everything one seed produced.
pub struct SeedRun {
    pub row: ResultRow,
    pub covers: CoverSet,
    pub stats: RunStats,
    pub planned: Option<(MarkovPolicy, Vec<QTable>)>,
    pub optimal_value: Option<f64>,
}

impl Algorithm {
    pub fn variant(self) -> Variant {
        match self {
            Algorithm::Musik => Variant::Bmdp,
            Algorithm::MusikTab => Variant::Tabular,
            Algorithm::MusikComp => Variant::Composable,
        }
    }
}

/// Samples per exploration regression for this model.
pub fn resolve_n(cfg: &ExperimentConfig, model: &BlockMdp) -> usize {
    match cfg.n {
        SampleSize::Fixed(n) => n,
        SampleSize::Auto => recommended_n(
            model.total_states(),
            model.num_actions(),
            model.horizon(),
            cfg.decoys + 1,
            cfg.eps,
            cfg.delta,
            cfg.c,
            cfg.algorithm.variant(),
        ),
    }
}

/// Episodes the exploration phase samples.
pub fn exploration_episodes(algorithm: Algorithm, model: &BlockMdp, n: usize) -> u64 {
    let horizon = model.horizon();
    let total: usize = match algorithm {
        Algorithm::Musik => (1..horizon).map(|h| h * n).sum(),
        Algorithm::MusikTab => (1..horizon).map(|h| h * model.layer_size(h) * n).sum(),
        Algorithm::MusikComp => horizon.saturating_sub(1) * n,
    };
    total as u64
}

pub fn decoder_class(cfg: &ExperimentConfig, model: &BlockMdp, seed: u64) -> Result<Vec<Arc<Decoder>>> {
    Ok(make_decoder_class(model, cfg.decoys, cfg.corruption, seed)?.decoders)
}

pub fn explore(cfg: &ExperimentConfig, model: &BlockMdp, class: &[Arc<Decoder>], n: usize, seed: u64) -> Result<(CoverSet, RunStats)> {
    let mcfg = MusikConfig { n, eps: cfg.eps, delta: cfg.delta, variant: cfg.algorithm.variant(), c: cfg.c };
    let stream = SeedStream::new(seed);
    let out = match cfg.algorithm {
        Algorithm::Musik => run_musik(model, class, &mcfg, &stream)?,
        Algorithm::MusikTab => run_musik_tab(model, &mcfg, &stream)?,
        Algorithm::MusikComp => run_musik_comp(model, class, &mcfg, &stream)?,
    };
    Ok(out)
}

/// Fraction of layers `1..H` whose cover passes at `(alpha, eps)`; 1 when there are none.
pub fn cover_pass_fraction(model: &BlockMdp, covers: &CoverSet, alpha: f64, eps: f64) -> Result<f64> {
    let layers = model.horizon().saturating_sub(1);
    if layers == 0 {
        return Ok(1.0);
    }
    let mut passed = 0;
    for h in 1..model.horizon() {
        if check_cover(model, covers.layer(h), alpha, eps, Baseline::Unrestricted)?.passed() {
            passed += 1;
        }
    }
    Ok(passed as f64 / layers as f64)
}

pub fn run_seed(cfg: &ExperimentConfig, env: &Env, seed: u64) -> Result<SeedRun> {
    let started = Instant::now();
    let model = &env.model;
    let n = resolve_n(cfg, model);
    let class = decoder_class(cfg, model, seed)?;
    let (covers, stats) = explore(cfg, model, &class, n, seed)?;
    let mut episodes = stats.episodes;
    let pass = cover_pass_fraction(model, &covers, cfg.alpha, cfg.eps)?;

    let mut final_return = None;
    let mut optimal = false;
    let mut planned = None;
    let mut optimal_value = None;
    if cfg.planner == Planner::Psdp {
        let psdp_n = cfg.psdp_n.unwrap_or(n);
        let (policy, fits, pstats) = run_psdp(model, &covers, &class, psdp_n, &SeedStream::new(seed).derive("psdp", 0))?;
        episodes += pstats.episodes;
        let mode = match cfg.eval {
            EvalSetting::Exact => EvalMode::Exact,
            EvalSetting::MonteCarlo(episodes) => EvalMode::MonteCarlo { episodes },
        };
        let eval = evaluate_policy_return(
            model,
            &Schedule::markov(policy.clone()),
            mode,
            &SeedStream::new(seed).derive("eval", 0),
        )?;
        if cfg.count_eval_episodes {
            episodes += eval.episodes as u64;
        }
        let (vstar, _) = value_iteration(model)?;
        // The lock pays 1 only on the good chain, so "optimal" means a perfect mean.
        optimal = if env.is_comblock { eval.value >= 1.0 - 1e-9 } else { eval.value >= vstar - cfg.eps };
        final_return = Some(eval.value);
        optimal_value = Some(vstar);
        planned = Some((policy, fits));
    }
    let row = ResultRow {
        seed,
        env: cfg.env.to_string(),
        horizon: model.horizon(),
        algorithm: cfg.algorithm.name().to_string(),
        n,
        episodes_used: episodes,
        cover_pass_fraction: pass,
        final_return,
        optimal_found: optimal as u8,
        wall_ms: cfg.timing.then(|| started.elapsed().as_millis()),
    };
    Ok(SeedRun { row, covers, stats, planned, optimal_value })
}

/// Runs every seed (in parallel) and returns the runs in seed-list order.
pub fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let env = cfg.env.instantiate(seed)?;
            run_seed(cfg, &env, seed).with_context(|| format!("seed {seed}"))
        })
        .collect()
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    runs: usize,
    optimal_found: usize,
    mean_final_return: Option<f64>,
    mean_episodes_used: f64,
    mean_cover_pass_fraction: f64,
    chosen_decoders: Vec<Vec<Vec<Option<usize>>>>,
}

pub fn write_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the sweep and writes `results.csv` and `summary.json` under `cfg.output`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    let runs = run_seeds(cfg)?;
    let out = &cfg.output;
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
    let rows: Vec<ResultRow> = runs.iter().map(|r| r.row.clone()).collect();
    write_csv(&rows, &out.join("results.csv"))?;

    let k = rows.len() as f64;
    let returns: Vec<f64> = rows.iter().filter_map(|r| r.final_return).collect();
    let summary = Summary {
        config: cfg,
        runs: rows.len(),
        optimal_found: rows.iter().filter(|r| r.optimal_found == 1).count(),
        mean_final_return: (!returns.is_empty()).then(|| returns.iter().sum::<f64>() / returns.len() as f64),
        mean_episodes_used: rows.iter().map(|r| r.episodes_used as f64).sum::<f64>() / k,
        mean_cover_pass_fraction: rows.iter().map(|r| r.cover_pass_fraction).sum::<f64>() / k,
        chosen_decoders: runs.iter().map(|r| r.stats.chosen_decoders.clone()).collect(),
    };
    let path = out.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(runs)
}

/// One line of the minimal-n table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    #[serde(rename = "H")]
    pub horizon: usize,
    pub min_n: Option<usize>,
    pub episodes_used: Option<u64>,
    pub optimal_seeds: usize,
    pub num_seeds: usize,
    pub probes: usize,
}

/// Grid point `k`: `ceil(start · 1.5^k)`.
pub fn grid_n(start: usize, k: u32) -> usize {
    (start as f64 * 1.5f64.powi(k as i32)).ceil() as usize
}

/// Smallest grid `n` at which at least `required` seeds find the optimum:
/// doubling steps over the grid index, then bisection between the last
/// failure and the first success. `None` if `max_n` is passed first.
pub fn minimal_n(
    base: &ExperimentConfig,
    start: usize,
    max_n: usize,
    required: usize,
) -> Result<BenchRow> {
    let horizon = base.env.horizon_hint().unwrap_or(0);
    let probes = Cell::new(0);
    let probe = |k: u32| -> Result<(usize, u64)> {
        probes.set(probes.get() + 1);
        let cfg = ExperimentConfig { n: SampleSize::Fixed(grid_n(start, k)), ..base.clone() };
        let runs = run_seeds(&cfg)?;
        let optimal = runs.iter().filter(|r| r.row.optimal_found == 1).count();
        Ok((optimal, runs.iter().map(|r| r.row.episodes_used).max().unwrap_or(0)))
    };
    let (mut lo, mut hi): (Option<u32>, Option<(u32, usize, u64)>) = (None, None);
    let mut step = 0u32;
    loop {
        let k = lo.map_or(0, |l| l + step.max(1));
        if grid_n(start, k) > max_n {
            break;
        }
        let (optimal, episodes) = probe(k)?;
        if optimal >= required {
            hi = Some((k, optimal, episodes));
            break;
        }
        lo = Some(k);
        step = step.max(1) * 2;
    }
    let Some(mut best) = hi else {
        return Ok(BenchRow { horizon, min_n: None, episodes_used: None, optimal_seeds: 0, num_seeds: base.seeds.len(), probes: probes.get() });
    };
    let mut low = lo.map_or(0, |l| l + 1);
    while low < best.0 {
        let mid = (low + best.0) / 2;
        let (optimal, episodes) = probe(mid)?;
        if optimal >= required {
            best = (mid, optimal, episodes);
        } else {
            low = mid + 1;
        }
    }
    Ok(BenchRow {
        horizon,
        min_n: Some(grid_n(start, best.0)),
        episodes_used: Some(best.2),
        optimal_seeds: best.1,
        num_seeds: base.seeds.len(),
        probes: probes.get(),
    })
}

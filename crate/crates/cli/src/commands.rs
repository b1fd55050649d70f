//! Subcommands of the `musik` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};


use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use musik_core::analysis::{
    argmax_covers, check_cover_set, extend, verify_transfer, verify_truncation_lemma, Baseline, CoverReport,
};
use musik_core::density::{bayes_predictor, fit_mle, mle_population_error, TableShape};
use musik_core::dp::schedule_occupancy;
use musik_core::envs::make_decoder_class;
use musik_core::musik::{collect_ik_dataset, cover_set_from_json, cover_set_to_json};
use musik_core::policy::{Behavior, CoverSet, Decoder};
use musik_core::psdp::QTable;
use musik_core::rng::SeedStream;
use musik_core::BlockMdp;
use serde::Serialize;

use crate::config::{default_config_toml, parse_config, Algorithm, EvalSetting, ExperimentConfig, Planner, SampleSize};
use crate::experiment::{minimal_n, run_experiment, BenchRow, SeedRun};
use crate::preset::{read_model, EnvPreset};

#[derive(Debug, Parser)]
#[command(name = "musik", version, about = "Reward-free exploration in Block MDPs by multi-step inverse kinematics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Explore and write one cover file per seed.
    RunMusik(RunArgs),
    /// Explore, plan with PSDP and evaluate the greedy policy.
    RunPsdp(RunArgs),
    /// Check cover quality and the truncation lemmas exactly; exit 2 on failure.
    Verify(VerifyArgs),
    /// Fit one inverse-kinematics regression and compare it with the Bayes predictor.
    InspectFit(InspectArgs),
    /// Minimal n per horizon for the combination lock.
    BenchComblock(BenchArgs),
    /// Print the default experiment configuration.
    EmitDefaultConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML configuration; other flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `comblock:H=<h>[,A=<a>]`, `random:<spec>` or `model:<file>`.
    #[arg(long)]
    pub env: Option<EnvPreset>,
    #[arg(long, value_enum)]
    pub algorithm: Option<AlgorithmArg>,
    /// Samples per regression, or `auto`.
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long)]
    pub psdp_n: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub decoys: Option<usize>,
    #[arg(long)]
    pub corruption: Option<f64>,
    /// Seeds, comma separated or repeated.
    #[arg(long = "seed", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// `exact` or `mc:<episodes>`.
    #[arg(long)]
    pub eval: Option<String>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub count_eval_episodes: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AlgorithmArg {
    Musik,
    MusikTab,
    MusikComp,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Musik => Algorithm::Musik,
            AlgorithmArg::MusikTab => Algorithm::MusikTab,
            AlgorithmArg::MusikComp => Algorithm::MusikComp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Cover,
    Truncation,
    Transfer,
    All,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Model file or environment preset.
    #[arg(long)]
    pub model: String,
    /// Seed used to instantiate a preset.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cover file; defaults to one max-reach policy per state.
    #[arg(long)]
    pub covers: Option<PathBuf>,
    #[arg(long)]
    pub eps: f64,
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
    #[arg(long, default_value_t = 0.25)]
    pub alpha: f64,
    /// CSV destination; stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Layer of the predicted action.
    #[arg(long, default_value_t = 0)]
    pub t: usize,
    /// Target layer.
    #[arg(long, default_value_t = 1)]
    pub h: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// Uniform roll-out copies, i.e. the number of indices.
    #[arg(long, default_value_t = 1)]
    pub indices: usize,
    #[arg(long, default_value_t = 31)]
    pub decoys: usize,
    #[arg(long, default_value_t = 0.3)]
    pub corruption: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "3,5,8")]
    pub horizons: Vec<usize>,
    #[arg(long = "seed", value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "musik")]
    pub algorithm: AlgorithmArg,
    /// First grid point.
    #[arg(long, default_value_t = 100)]
    pub start: usize,
    #[arg(long, default_value_t = 20_000)]
    pub max_n: usize,
    /// Fraction of seeds that must find the optimum.
    #[arg(long, default_value_t = 0.8)]
    pub success: f64,
    #[arg(long, default_value_t = 31)]
    pub decoys: usize,
    #[arg(long, default_value_t = 0.3)]
    pub corruption: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::RunMusik(args) => run_cmd(args, Planner::None),
        Command::RunPsdp(args) => run_cmd(args, Planner::Psdp),
        Command::Verify(args) => verify_cmd(&args),
        Command::InspectFit(args) => inspect_cmd(&args),
        Command::BenchComblock(args) => bench_cmd(&args),
        Command::EmitDefaultConfig { out } => {
            emit(out.as_deref(), default_config_toml().as_bytes())?;
            Ok(0)
        }
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => Ok(std::io::stdout().write_all(bytes)?),
    }
}

/// Merges a config file (if any) with command-line overrides.
pub fn build_config(args: &RunArgs, planner: Planner) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => parse_config(path)?,
        None => {
            let Some(env) = &args.env else { bail!("either --config or --env is required") };
            ExperimentConfig { env: env.clone(), seeds: vec![0], ..ExperimentConfig::default() }
        }
    };
    cfg.planner = planner;
    if let Some(env) = &args.env {
        cfg.env = env.clone();
    }
    if let Some(a) = args.algorithm {
        cfg.algorithm = a.into();
    }
    if let Some(n) = &args.n {
        cfg.n = match n.as_str() {
            "auto" => SampleSize::Auto,
            s => SampleSize::Fixed(s.parse().with_context(|| format!("--n must be a number or auto, got {s}"))?),
        };
    }
    cfg.psdp_n = args.psdp_n.or(cfg.psdp_n);
    cfg.eps = args.eps.unwrap_or(cfg.eps);
    cfg.alpha = args.alpha.unwrap_or(cfg.alpha);
    cfg.decoys = args.decoys.unwrap_or(cfg.decoys);
    cfg.corruption = args.corruption.unwrap_or(cfg.corruption);
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    if let Some(e) = &args.eval {
        cfg.eval = EvalSetting::try_from(e.clone()).map_err(anyhow::Error::msg)?;
    }
    if let Some(o) = &args.output {
        cfg.output = o.clone();
    }
    cfg.timing |= args.timing;
    cfg.count_eval_episodes |= args.count_eval_episodes;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct PolicyLayer {
    layer: usize,
    chosen_decoder: usize,
    decoder: Vec<usize>,
    actions: Vec<usize>,
    q: Vec<f64>,
    counts: Vec<u64>,
}

fn policy_json(fits: &[QTable]) -> Result<String> {
    let layers: Vec<PolicyLayer> = fits
        .iter()
        .map(|f| PolicyLayer {
            layer: f.layer,
            chosen_decoder: f.chosen,
            decoder: f.decoder.labels().to_vec(),
            actions: (0..f.values.len() / f.num_actions).map(|z| f.greedy(z)).collect(),
            q: f.values.clone(),
            counts: f.counts.clone(),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&layers)?)
}

fn write_run_files(cfg: &ExperimentConfig, runs: &[SeedRun]) -> Result<()> {
    for run in runs {
        let seed = run.row.seed;
        let path = cfg.output.join(format!("covers-seed{seed}.json"));
        fs::write(&path, cover_set_to_json(&run.covers)?).with_context(|| format!("writing {}", path.display()))?;
        if let Some((_, fits)) = &run.planned {
            let path = cfg.output.join(format!("policy-seed{seed}.json"));
            fs::write(&path, policy_json(fits)?).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(())
}

fn run_cmd(args: RunArgs, planner: Planner) -> Result<i32> {
    let cfg = build_config(&args, planner)?;
    let runs = run_experiment(&cfg)?;
    write_run_files(&cfg, &runs)?;
    for r in &runs {
        let ret = r.row.final_return.map_or("-".to_string(), |v| format!("{v:.4}"));
        eprintln!(
            "seed {}: episodes {}, cover pass {:.2}, return {ret}, optimal {}",
            r.row.seed, r.row.episodes_used, r.row.cover_pass_fraction, r.row.optimal_found
        );
    }
    eprintln!("results in {}", cfg.output.display());
    Ok(0)
}

/// A preset string or a path to a model file.
pub fn load_model(spec: &str, seed: u64) -> Result<BlockMdp> {
    if ["comblock:", "random:", "model:"].iter().any(|p| spec.starts_with(p)) {
        Ok(spec.parse::<EnvPreset>()?.instantiate(seed)?.model)
    } else {
        read_model(Path::new(spec))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyRow {
    pub suite: String,
    pub state: String,
    pub baseline: f64,
    pub achieved: f64,
    pub pass: u8,
    pub margin: f64,
}

fn cover_rows(suite: &str, reports: &[CoverReport]) -> Vec<VerifyRow> {
    reports
        .iter()
        .flat_map(|r| &r.entries)
        .map(|e| VerifyRow {
            suite: suite.into(),
            state: format!("{}:{}", e.state.layer, e.state.index),
            baseline: e.baseline,
            achieved: e.achieved,
            pass: e.pass as u8,
            margin: e.margin,
        })
        .collect()
}

/// Rows for the requested suites and whether everything passed.
pub fn verify(model: &BlockMdp, covers: &CoverSet, eps: f64, alpha: f64, suite: Suite) -> Result<(Vec<VerifyRow>, bool)> {
    let mut rows = Vec::new();
    let mut ok = true;
    let ext = extend(model);
    if matches!(suite, Suite::Cover | Suite::All) {
        let reports = check_cover_set(model, covers, alpha, eps, Baseline::Unrestricted)?;
        ok &= reports.iter().all(CoverReport::passed);
        rows.extend(cover_rows("cover", &reports));
    }
    if matches!(suite, Suite::Truncation | Suite::All) {
        let report = verify_truncation_lemma(&ext, eps)?;
        ok &= report.violations() == 0;
        // Baseline: unrestricted reach; achieved: truncated reach plus the slack.
        rows.extend(report.entries.iter().map(|e| VerifyRow {
            suite: "truncation".into(),
            state: format!("{}:{}", e.state.layer, e.state.index),
            baseline: e.lhs,
            achieved: e.rhs,
            pass: e.holds as u8,
            margin: e.margin,
        }));
    }
    if matches!(suite, Suite::Transfer | Suite::All) {
        let report = verify_transfer(&ext, eps, covers)?;
        ok &= report.holds();
        rows.extend(cover_rows("transfer-premise", &report.premise_reports));
        rows.extend(cover_rows("transfer-conclusion", &report.conclusion_reports));
        rows.push(VerifyRow {
            suite: "transfer".into(),
            state: "implication".into(),
            baseline: report.premise as u8 as f64,
            achieved: report.conclusion as u8 as f64,
            pass: report.holds() as u8,
            margin: 0.0,
        });
    }
    Ok((rows, ok))
}

fn verify_cmd(args: &VerifyArgs) -> Result<i32> {
    if !(args.eps > 0.0 && args.eps < 1.0) {
        bail!("--eps must lie in (0, 1)");
    }
    let model = load_model(&args.model, args.seed)?;
    let covers = match &args.covers {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            cover_set_from_json(&text)?
        }
        None => argmax_covers(&model),
    };
    let (rows, ok) = verify(&model, &covers, args.eps, args.alpha, args.suite)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    emit(args.out.as_deref(), &w.into_inner()?)?;
    let failed = rows.iter().filter(|r| r.pass == 0 && r.suite != "transfer-premise").count();
    eprintln!("{} checks, {failed} failed", rows.len());
    Ok(if ok { 0 } else { 2 })
}

#[derive(Serialize)]
struct InspectReport {
    t: usize,
    h: usize,
    n: usize,
    class_size: usize,
    true_index: Option<usize>,
    chosen: usize,
    log_likelihoods: Vec<f64>,
    /// Observations the chosen decoder maps differently from the true one.
    disagreements: usize,
    /// Weighted squared distance between the fit and the Bayes predictor.
    population_error: f64,
}

fn inspect_cmd(args: &InspectArgs) -> Result<i32> {
    let model = load_model(&args.model, args.seed)?;
    let (t, h) = (args.t, args.h);
    if !(t < h && h < model.horizon()) {
        bail!("need t < h < H, got t={t}, h={h}, H={}", model.horizon());
    }
    if args.indices == 0 || args.n == 0 {
        bail!("--indices and --n must be at least 1");
    }
    let class = make_decoder_class(&model, args.decoys, args.corruption, args.seed)?;
    let roll_in = argmax_covers(&model).layer(t).members.clone();
    let roll_outs = vec![Behavior::Uniform; args.indices];
    let roll_in = if t == 0 { Vec::new() } else { roll_in };
    let data = collect_ik_dataset(&model, t, h, &roll_in, &roll_outs, args.n, &SeedStream::new(args.seed).derive("inspect", 0))?;
    let shape = TableShape {
        layer: t,
        target_layer: h,
        left: model.layer_size(t),
        right: model.layer_size(h),
        num_actions: model.num_actions(),
        num_indices: args.indices,
    };
    let fit = fit_mle(&data, &class.decoders, shape)?;
    let mut start = vec![0.0; model.layer_size(t)];
    if roll_in.is_empty() {
        start.copy_from_slice(model.initial());
    } else {
        for m in &roll_in {
            let occ = schedule_occupancy(&model, m, t)?;
            for (s, p) in start.iter_mut().zip(occ.layer(t)) {
                *s += p / roll_in.len() as f64;
            }
        }
    }
    let oracle = bayes_predictor(&model, &roll_outs, t, h)?;
    let weights = oracle.pair_mass(&start, None);
    let truth = Decoder::from_model(&model);
    let report = InspectReport {
        t,
        h,
        n: args.n,
        class_size: class.len(),
        true_index: class.true_index,
        chosen: fit.chosen,
        log_likelihoods: fit.log_likelihoods.clone(),
        disagreements: class.decoders[fit.chosen].disagreements(&truth),
        population_error: mle_population_error(&model, &fit.table, &oracle, None, &weights)?,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(0)
}

fn bench_cmd(args: &BenchArgs) -> Result<i32> {
    if args.seeds.is_empty() {
        bail!("at least one seed is required");
    }
    if !(args.success > 0.0 && args.success <= 1.0) {
        bail!("--success must lie in (0, 1]");
    }
    let required = (args.success * args.seeds.len() as f64).ceil() as usize;
    let mut rows: Vec<BenchRow> = Vec::new();
    for &horizon in &args.horizons {
        let cfg = ExperimentConfig {
            env: EnvPreset::CombLock { horizon, actions: 10, noise: 0.0 },
            algorithm: args.algorithm.into(),
            decoys: args.decoys,
            corruption: args.corruption,
            seeds: args.seeds.clone(),
            ..ExperimentConfig::default()
        };
        let row = minimal_n(&cfg, args.start, args.max_n, required)?;
        eprintln!("H={horizon}: min n {:?} after {} probes", row.min_n, row.probes);
        rows.push(row);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    emit(args.out.as_deref(), &w.into_inner()?)?;
    Ok(0)
}


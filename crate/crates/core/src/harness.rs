//! Experiment driver: evaluation, per-seed runs on disk, aggregation and
//! comparison tables.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{run_baseline, BaselineKind};
use crate::datasets::{build_scenario, collect_trajectories, default_expert, save_datasets, ScenarioData, ScenarioSpec};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::game::{save_trace, train_game, GameConfig, GameData, GameEnv, TraceRow, Variant};
use crate::mdp::{expected_return, value_iteration, TabularMdp, TabularPolicy};
use crate::par::{parallel_map, worker_count};
use crate::rng::{categorical, derive};
use crate::theory::{default_audit_grid, robust_improvement_audit, AuditTable};

/// Evaluation horizon used for gridworld success rates.
pub const DEFAULT_HORIZON: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub n_episodes: usize,
    /// Monte-Carlo mean of discounted returns.
    pub mean_return: f64,
    /// Standard error of `mean_return` over episodes.
    pub return_std_error: f64,
    pub exact_return: f64,
    /// `100 (J - J_uniform) / (J* - J_uniform)` with exact values.
    pub normalized_score: f64,
    pub success_rate: f64,
}

/// `100 (j - j_rand) / (j_star - j_rand)`; zero when the two anchors coincide.
pub fn normalized_score(mdp: &TabularMdp, j: f64) -> Result<f64> {
    let (j_rand, j_star) = score_anchors(mdp)?;
    Ok(if (j_star - j_rand).abs() < 1e-12 { 0.0 } else { 100.0 * (j - j_rand) / (j_star - j_rand) })
}

/// Exact returns of the uniform and the optimal policy.
pub fn score_anchors(mdp: &TabularMdp) -> Result<(f64, f64)> {
    let uniform = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let (_, best) = value_iteration(mdp, 1e-10)?;
    Ok((expected_return(mdp, &uniform)?, expected_return(mdp, &best)?))
}

/// Monte-Carlo rollouts from `d0` plus the exact return.  An episode succeeds
/// when it enters a terminal state within `horizon_cap` steps.
pub fn evaluate_policy(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    n_episodes: usize,
    horizon_cap: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::config("n_episodes must be at least 1"));
    }
    let exact_return = expected_return(mdp, policy)?;
    let mut rng = derive(seed, 4000);
    let mut returns = Vec::with_capacity(n_episodes);
    let mut successes = 0usize;
    for _ in 0..n_episodes {
        let mut s = categorical(&mut rng, mdp.initial_dist());
        let (mut ret, mut disc) = (0.0, 1.0);
        let mut reached = mdp.is_terminal(s);
        for _ in 0..horizon_cap {
            if mdp.is_terminal(s) {
                break;
            }
            let a = categorical(&mut rng, policy.row(s));
            let sp = categorical(&mut rng, mdp.next_dist(s, a));
            ret += disc * mdp.r(s, sp);
            disc *= mdp.gamma();
            s = sp;
            reached = mdp.is_terminal(s);
        }
        successes += usize::from(reached);
        returns.push(ret);
    }
    let (mean, se) = mean_and_se(&returns);
    Ok(EvalReport {
        seed,
        n_episodes,
        mean_return: mean,
        return_std_error: se,
        exact_return,
        normalized_score: normalized_score(mdp, exact_return)?,
        success_rate: successes as f64 / n_episodes as f64,
    })
}

/// Sample mean and its standard error (zero for fewer than two values).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ---------------------------------------------------------------------------
// algorithms

#[derive(Clone, Debug, PartialEq)]
pub enum Algorithm {
    MahaloAtac,
    MahaloPspi,
    Baseline(BaselineKind),
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::MahaloAtac => "mahalo-atac",
            Algorithm::MahaloPspi => "mahalo-pspi",
            Algorithm::Baseline(k) => k.name(),
        }
    }

    pub fn is_privileged(&self) -> bool {
        matches!(self, Algorithm::Baseline(k) if k.is_privileged())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mahalo" | "mahalo-atac" => Ok(Algorithm::MahaloAtac),
            "mahalo-pspi" => Ok(Algorithm::MahaloPspi),
            other => BaselineKind::from_name(other)
                .map(Algorithm::Baseline)
                .map_err(|_| Error::config(format!("unknown algorithm `{s}`"))),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Train `algo` on one scenario; the trace's `J_true` column uses `mdp`.
pub fn run_algorithm(
    algo: &Algorithm,
    data: &ScenarioData,
    mdp: &TabularMdp,
    cfg: &GameConfig,
) -> Result<(TabularPolicy, Vec<TraceRow>)> {
    let hook = |p: &TabularPolicy| expected_return(mdp, p).unwrap_or(f64::NAN);
    let variant = match algo {
        Algorithm::MahaloAtac => Variant::Atac,
        Algorithm::MahaloPspi => Variant::Pspi,
        Algorithm::Baseline(kind) => {
            let out = run_baseline(kind, data, mdp, cfg, Some(&hook))?;
            return Ok((out.policy, out.trace));
        }
    };
    data.dynamics.validate(mdp.n_states(), mdp.n_actions())?;
    data.reward.validate(mdp.n_states())?;
    let env = GameEnv::from_mdp(mdp, data.absorbing_value);
    let gd = GameData { dynamics: &data.dynamics.records, reward: &data.reward.records, labels: None };
    let out = train_game(env, gd, cfg, variant, Some(&hook), None)?.into_result()?;
    Ok((out.policy, out.trace))
}

// ---------------------------------------------------------------------------
// experiments

fn default_episodes() -> usize {
    50
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// One algorithm on one scenario over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Fixture name (`loop1`, `chain2`, `grid5`) or path to an MDP JSON file.
    pub mdp: String,
    pub scenario: ScenarioSpec,
    pub algorithm: String,
    #[serde(default)]
    pub game: GameConfig,
    #[serde(default = "default_episodes")]
    pub n_eval_episodes: usize,
    #[serde(default = "default_horizon")]
    pub eval_horizon: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Checks everything that can fail before any training starts.
    pub fn validate(&self) -> Result<(TabularMdp, Algorithm)> {
        let algo: Algorithm = self.algorithm.parse()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must be nonempty"));
        }
        if self.n_eval_episodes == 0 {
            return Err(Error::config("n_eval_episodes must be at least 1"));
        }
        self.scenario.validate()?;
        self.game.validate()?;
        Ok((load_mdp(&self.mdp)?, algo))
    }
}

/// A fixture by name, otherwise an MDP JSON file.
pub fn load_mdp(source: &str) -> Result<TabularMdp> {
    if let Some(m) = fixtures::by_name(source) {
        return Ok(m);
    }
    let path = Path::new(source);
    if !path.exists() {
        return Err(Error::config(format!(
            "mdp `{source}` is neither a fixture ({}) nor an existing file",
            fixtures::FIXTURE_NAMES.join(", ")
        )));
    }
    TabularMdp::from_json(&fs::read_to_string(path)?)
}

/// Outcome of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub dir: PathBuf,
    pub report: std::result::Result<EvalReport, String>,
}

/// Mean and standard error over seeds of one algorithm on one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub mdp: String,
    pub scenario: String,
    pub algorithm: String,
    pub n_seeds: usize,
    pub n_failed: usize,
    pub partial: bool,
    pub score_mean: f64,
    pub score_se: f64,
    pub success_mean: f64,
    pub success_se: f64,
    pub return_mean: f64,
    pub return_se: f64,
}

impl AggregateRow {
    pub fn from_reports(mdp: &str, scenario: &str, algorithm: &str, reports: &[EvalReport], n_failed: usize) -> Self {
        let pick = |f: fn(&EvalReport) -> f64| mean_and_se(&reports.iter().map(f).collect::<Vec<_>>());
        let (score_mean, score_se) = pick(|r| r.normalized_score);
        let (success_mean, success_se) = pick(|r| r.success_rate);
        let (return_mean, return_se) = pick(|r| r.exact_return);
        AggregateRow {
            mdp: mdp.to_string(),
            scenario: scenario.to_string(),
            algorithm: algorithm.to_string(),
            n_seeds: reports.len(),
            n_failed,
            partial: n_failed > 0,
            score_mean,
            score_se,
            success_mean,
            success_se,
            return_mean,
            return_se,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub seeds: Vec<SeedResult>,
    pub aggregate: AggregateRow,
    pub aggregate_path: PathBuf,
}

pub const TRACE_FILE: &str = "trace.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const POLICY_FILE: &str = "policy.json";
pub const ERROR_FILE: &str = "error.txt";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// `out/<scenario>/<algo>`.
pub fn algo_dir(out: &Path, scenario: &str, algo: &str) -> PathBuf {
    out.join(scenario).join(algo)
}

fn mdp_label(source: &str, mdp: &TabularMdp) -> String {
    if fixtures::by_name(source).is_some() {
        source.to_string()
    } else {
        mdp.fingerprint()[..12].to_string()
    }
}

/// One seed: build data, train, evaluate, write everything under `dir`.
pub fn run_seed(cfg: &ExperimentConfig, mdp: &TabularMdp, algo: &Algorithm, seed: u64, dir: &Path) -> Result<EvalReport> {
    fs::create_dir_all(dir)?;
    let spec = ScenarioSpec { seed, ..cfg.scenario.clone() };
    let expert = default_expert(mdp, spec.expert_eps)?;
    let data = build_scenario(mdp, &expert, &spec)?;
    save_datasets(&dir.join("data"), &data, Some(&spec), Some(mdp))?;
    let game = GameConfig { seed, ..cfg.game.clone() };
    let (policy, trace) = run_algorithm(algo, &data, mdp, &game)?;
    save_trace(&dir.join(TRACE_FILE), &trace, Some(algo.name()))?;
    fs::write(dir.join(POLICY_FILE), serde_json::to_string_pretty(&policy.rows())?)?;
    let report = evaluate_policy(mdp, &policy, cfg.n_eval_episodes, cfg.eval_horizon, seed)?;
    fs::write(dir.join(EVAL_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// All seeds (in parallel, capped by `PLFO_THREADS`), then the aggregate row.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let (mdp, algo) = cfg.validate()?;
    let base = algo_dir(&cfg.out_dir, cfg.scenario.scenario.name(), algo.name());
    let seeds = parallel_map(&cfg.seeds, worker_count(), |&seed| {
        let dir = base.join(seed.to_string());
        let report = run_seed(cfg, &mdp, &algo, seed, &dir).map_err(|e| e.to_string());
        if let Err(msg) = &report {
            let _ = fs::create_dir_all(&dir).and_then(|_| fs::write(dir.join(ERROR_FILE), msg));
        }
        SeedResult { seed, dir, report }
    });
    let ok: Vec<EvalReport> = seeds.iter().filter_map(|s| s.report.as_ref().ok().cloned()).collect();
    let aggregate = AggregateRow::from_reports(
        &mdp_label(&cfg.mdp, &mdp),
        cfg.scenario.scenario.name(),
        algo.name(),
        &ok,
        seeds.len() - ok.len(),
    );
    let aggregate_path = base.join(AGGREGATE_FILE);
    write_rows(&aggregate_path, std::slice::from_ref(&aggregate))?;
    Ok(ExperimentResult { seeds, aggregate, aggregate_path })
}

/// Writes the datasets for every seed to `out/<scenario>/data/<seed>/`.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let mdp = load_mdp(&cfg.mdp)?;
    if cfg.seeds.is_empty() {
        return Err(Error::config("seeds must be nonempty"));
    }
    cfg.scenario.validate()?;
    let base = cfg.out_dir.join(cfg.scenario.scenario.name()).join("data");
    let dirs = parallel_map(&cfg.seeds, worker_count(), |&seed| -> Result<PathBuf> {
        let spec = ScenarioSpec { seed, ..cfg.scenario.clone() };
        let data = build_scenario(&mdp, &default_expert(&mdp, spec.expert_eps)?, &spec)?;
        let dir = base.join(seed.to_string());
        save_datasets(&dir, &data, Some(&spec), Some(&mdp))?;
        Ok(dir)
    });
    dirs.into_iter().collect()
}

/// Re-evaluates the stored policies of a finished experiment and rewrites the
/// per-seed reports and the aggregate row.
pub fn evaluate_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let (mdp, algo) = cfg.validate()?;
    let base = algo_dir(&cfg.out_dir, cfg.scenario.scenario.name(), algo.name());
    let seeds = parallel_map(&cfg.seeds, worker_count(), |&seed| {
        let dir = base.join(seed.to_string());
        let report = (|| -> Result<EvalReport> {
            let rows: Vec<Vec<f64>> = serde_json::from_str(&fs::read_to_string(dir.join(POLICY_FILE))?)?;
            let policy = TabularPolicy::from_rows(&rows)?;
            let report = evaluate_policy(&mdp, &policy, cfg.n_eval_episodes, cfg.eval_horizon, seed)?;
            fs::write(dir.join(EVAL_FILE), serde_json::to_string_pretty(&report)?)?;
            Ok(report)
        })()
        .map_err(|e| e.to_string());
        SeedResult { seed, dir, report }
    });
    let ok: Vec<EvalReport> = seeds.iter().filter_map(|s| s.report.as_ref().ok().cloned()).collect();
    let aggregate = AggregateRow::from_reports(
        &mdp_label(&cfg.mdp, &mdp),
        cfg.scenario.scenario.name(),
        algo.name(),
        &ok,
        seeds.len() - ok.len(),
    );
    let aggregate_path = base.join(AGGREGATE_FILE);
    write_rows(&aggregate_path, std::slice::from_ref(&aggregate))?;
    Ok(ExperimentResult { seeds, aggregate, aggregate_path })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_aggregate(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Recomputes an aggregate row from the per-seed `eval.json` files below `dir`.
pub fn reaggregate(dir: &Path, mdp: &str, scenario: &str, algorithm: &str) -> Result<AggregateRow> {
    let mut entries: Vec<(u64, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.parse::<u64>().ok().map(|s| (s, e.path())))
        .collect();
    entries.sort();
    let mut reports = Vec::new();
    let mut failed = 0;
    for (_, path) in &entries {
        match fs::read_to_string(path.join(EVAL_FILE)) {
            Ok(text) => reports.push(serde_json::from_str(&text)?),
            Err(_) => failed += 1,
        }
    }
    Ok(AggregateRow::from_reports(mdp, scenario, algorithm, &reports, failed))
}

/// All `aggregate.csv` rows below `out/<scenario>/*/`.
pub fn collect_aggregates(out: &Path, scenario: &str) -> Result<Vec<AggregateRow>> {
    let dir = out.join(scenario);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path().join(AGGREGATE_FILE))
        .filter(|p| p.exists())
        .collect();
    paths.sort();
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_aggregate(&p)?);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// comparison tables

pub const BEST_FRACTION: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub algorithm: String,
    pub score_mean: f64,
    pub score_se: f64,
    pub success_mean: f64,
    pub success_se: f64,
    pub n_seeds: usize,
    pub privileged: bool,
    pub near_best: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub mdp: String,
    pub scenario: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} / {}\n", self.mdp, self.scenario);
        for r in &self.rows {
            let mark = if r.near_best { "*" } else { " " };
            let tag = if r.privileged { " (privileged)" } else { "" };
            s.push_str(&format!(
                "{mark} {:<20} {:>8.1} ± {:<6.1} success {:.2}{tag}\n",
                r.algorithm, r.score_mean, r.score_se, r.success_mean
            ));
        }
        s
    }
}

fn is_privileged_name(name: &str) -> bool {
    name.parse::<Algorithm>().map(|a| a.is_privileged()).unwrap_or(false)
}

/// One row per algorithm; rows scoring at least 90% of the best
/// non-privileged mean are flagged.  Privileged rows are never flagged.
pub fn emit_comparison(rows: &[AggregateRow]) -> Result<Comparison> {
    let first = rows.first().ok_or_else(|| Error::config("no rows to compare"))?;
    if let Some(r) = rows.iter().find(|r| r.scenario != first.scenario || r.mdp != first.mdp) {
        return Err(Error::config(format!(
            "rows mix scenarios: {}/{} and {}/{}",
            first.mdp, first.scenario, r.mdp, r.scenario
        )));
    }
    let best = rows
        .iter()
        .filter(|r| !is_privileged_name(&r.algorithm) && r.score_mean.is_finite())
        .map(|r| r.score_mean)
        .fold(f64::NEG_INFINITY, f64::max);
    let threshold = best - (1.0 - BEST_FRACTION) * best.abs();
    let out = rows
        .iter()
        .map(|r| {
            let privileged = is_privileged_name(&r.algorithm);
            ComparisonRow {
                algorithm: r.algorithm.clone(),
                score_mean: r.score_mean,
                score_se: r.score_se,
                success_mean: r.success_mean,
                success_se: r.success_se,
                n_seeds: r.n_seeds,
                privileged,
                near_best: !privileged && best.is_finite() && r.score_mean >= threshold,
            }
        })
        .collect();
    Ok(Comparison { mdp: first.mdp.clone(), scenario: first.scenario.clone(), rows: out })
}

/// Writes `out/comparison.csv` (and returns the summary text).
pub fn write_comparison(out: &Path, cmp: &Comparison) -> Result<String> {
    fs::create_dir_all(out)?;
    fs::write(out.join(COMPARISON_FILE), cmp.to_csv()?)?;
    Ok(cmp.summary())
}

// ---------------------------------------------------------------------------
// audit driver

fn default_audit_trajectories() -> usize {
    500
}

/// Robust-improvement audit on uniform-behaviour data labelled with the true reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub mdp: String,
    pub seeds: Vec<u64>,
    /// Defaults to `{0.1, 1, 10, 100}^2`.
    #[serde(default)]
    pub grid: Option<Vec<(f64, f64)>>,
    #[serde(default = "default_audit_trajectories")]
    pub n_trajectories: usize,
    #[serde(default = "default_horizon")]
    pub horizon_cap: usize,
    #[serde(default)]
    pub game: GameConfig,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl AuditConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub const AUDIT_FILE: &str = "audit.csv";

/// Runs the audit and writes `out/audit/<mdp>/audit.csv`.
pub fn run_audit(cfg: &AuditConfig) -> Result<(AuditTable, PathBuf)> {
    if cfg.seeds.is_empty() {
        return Err(Error::config("seeds must be nonempty"));
    }
    cfg.game.validate()?;
    let mdp = load_mdp(&cfg.mdp)?;
    let grid = cfg.grid.clone().unwrap_or_else(default_audit_grid);
    let uniform = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let make = |seed: u64| {
        let (d, r) = collect_trajectories(&mdp, &uniform, cfg.n_trajectories, cfg.horizon_cap, seed);
        Ok(((d, r), uniform.clone()))
    };
    let train = |alpha: f64, beta: f64, seed: u64, data: &(crate::DynamicsDataset, crate::RewardDataset)| {
        let game = GameConfig { alpha, beta, seed, ..cfg.game.clone() };
        let gd = GameData { dynamics: &data.0.records, reward: &data.1.records, labels: None };
        Ok(train_game(GameEnv::from_mdp(&mdp, 0.0), gd, &game, Variant::Atac, None, None)?.into_result()?.policy)
    };
    let table = robust_improvement_audit(&mdp, make, train, &grid, &cfg.seeds, worker_count())?;
    let dir = cfg.out_dir.join("audit").join(mdp_label(&cfg.mdp, &mdp));
    fs::create_dir_all(&dir)?;
    let path = dir.join(AUDIT_FILE);
    table.write_csv(fs::File::create(&path)?)?;
    Ok((table, path))
}

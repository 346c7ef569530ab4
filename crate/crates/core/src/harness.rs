//! Seeded multi-run experiments, hyperparameter sweeps and table output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{build_env_with, EnvName, EnvParams};
use crate::learners::{AlgoSpec, Learner, LearnerState, StepSchedule};
use crate::tdcore::{splitmix64, Metric, MetricEvaluator, Rng, TransitionSampler};
use crate::{Error, Result};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "TDLAB_THREADS";

fn default_steps() -> u64 {
    20_000
}
fn default_seeds() -> usize {
    30
}
fn default_record_every() -> u64 {
    100
}
fn default_divergence_norm() -> f64 {
    1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env_name: EnvName,
    pub algo: AlgoSpec,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default = "default_record_every")]
    pub record_every: u64,
    /// A run diverges once `‖ξ‖₂` exceeds this.
    #[serde(default = "default_divergence_norm")]
    pub divergence_norm: f64,
    /// Global seed; seed `i` uses `splitmix64(seed ^ i)`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub env_params: EnvParams,
}

impl ExperimentConfig {
    pub fn new(env_name: EnvName, algo: AlgoSpec) -> Self {
        Self {
            env_name,
            algo,
            steps: default_steps(),
            seeds: default_seeds(),
            metric: Metric::default(),
            record_every: default_record_every(),
            divergence_norm: default_divergence_norm(),
            seed: 0,
            env_params: EnvParams::default(),
        }
    }

    pub fn with_steps(mut self, steps: u64) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_seeds(mut self, seeds: usize) -> Self {
        self.seeds = seeds;
        self
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_record_every(mut self, every: u64) -> Self {
        self.record_every = every;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.steps < 1 {
            return bad("steps must be at least 1");
        }
        if self.seeds < 1 {
            return bad("seeds must be at least 1");
        }
        if self.record_every < 1 {
            return bad("record_every must be at least 1");
        }
        if !(self.divergence_norm > 0.0) {
            return bad("divergence_norm must be positive");
        }
        self.algo.validate()
    }

    pub fn seed_for(&self, i: usize) -> u64 {
        splitmix64(self.seed ^ i as u64)
    }
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedOutcome {
    pub final_metric: f64,
    pub diverged: bool,
    /// Step at which divergence was detected.
    pub diverged_at: Option<u64>,
    /// Metric at each recording step; stops early on divergence.
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub config: ExperimentConfig,
    /// Final metric per seed, `None` for diverged seeds.
    pub finals: Vec<Option<f64>>,
    pub diverged_count: usize,
    /// Over non-diverged seeds; NaN when all diverged.
    pub mean: f64,
    pub std: f64,
    /// Metric at the shared initial weights.
    pub initial_metric: f64,
    /// `(step, mean over non-diverged seeds)`
    pub metric_curve: Vec<(u64, f64)>,
}

impl RunResult {
    pub fn all_diverged(&self) -> bool {
        self.diverged_count == self.finals.len()
    }
}

/// `(mean, sample std, diverged count)` where `None` marks a diverged seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub diverged_count: usize,
}

/// Mean and sample standard deviation (divide by `n − 1`, zero for one
/// value) of the finite entries. Values are sorted before summing so the
/// result does not depend on their order.
pub fn aggregate(results: &[Option<f64>]) -> Aggregate {
    let mut finite: Vec<f64> = results.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let diverged_count = results.len() - finite.len();
    finite.sort_by(f64::total_cmp);
    let n = finite.len();
    if n == 0 {
        return Aggregate { mean: f64::NAN, std: f64::NAN, diverged_count };
    }
    let mean = finite.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        (finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Aggregate { mean, std, diverged_count }
}

/// Recording steps: 0, every `record_every`, and the last step.
fn record_steps(steps: u64, every: u64) -> Vec<u64> {
    let mut out: Vec<u64> = (0..=steps).step_by(every as usize).collect();
    if *out.last().unwrap() != steps {
        out.push(steps);
    }
    out
}

/// Shared immutable state for all seeds of one configuration.
struct Context {
    evaluator: MetricEvaluator,
}

fn run_seed(cfg: &ExperimentConfig, ctx: &Context, sampler: &TransitionSampler<'_>, i: usize) -> Result<SeedOutcome> {
    let env = ctx.evaluator.env();
    let mut rng = Rng::seed_from_u64(cfg.seed_for(i));
    let mut learner = Learner::new(cfg.algo, LearnerState::initial(env.initial_xi().clone()))?;
    let eval = |l: &Learner| ctx.evaluator.eval(cfg.metric, &l.state().xi);
    let mut curve = vec![eval(&learner)];
    for k in 1..=cfg.steps {
        let t = sampler.sample(&mut rng);
        learner.step(&t);
        let st = learner.state();
        if st.non_finite || !(st.xi.norm() <= cfg.divergence_norm) {
            return Ok(SeedOutcome { final_metric: f64::NAN, diverged: true, diverged_at: Some(k), curve });
        }
        if k % cfg.record_every == 0 || k == cfg.steps {
            curve.push(eval(&learner));
        }
    }
    let final_metric = *curve.last().unwrap();
    Ok(SeedOutcome { final_metric, diverged: false, diverged_at: None, curve })
}

/// Per-seed outcomes in seed order.
pub fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<SeedOutcome>> {
    cfg.validate()?;
    let env = build_env_with(cfg.env_name, &cfg.env_params)?;
    let ctx = Context { evaluator: MetricEvaluator::new(&env)? };
    let sampler = TransitionSampler::new(ctx.evaluator.env(), ctx.evaluator.stationary())?;
    (0..cfg.seeds).into_par_iter().map(|i| run_seed(cfg, &ctx, &sampler, i)).collect()
}

/// Runs every seed of `cfg` in parallel and aggregates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    let outcomes = run_seeds(cfg)?;
    let env = build_env_with(cfg.env_name, &cfg.env_params)?;
    let initial_metric = MetricEvaluator::new(&env)?.eval(cfg.metric, env.initial_xi());
    let finals: Vec<Option<f64>> =
        outcomes.iter().map(|o| if o.diverged { None } else { Some(o.final_metric) }).collect();
    let agg = aggregate(&finals);
    let steps = record_steps(cfg.steps, cfg.record_every);
    let survivors: Vec<&SeedOutcome> = outcomes.iter().filter(|o| !o.diverged).collect();
    let metric_curve = steps
        .iter()
        .enumerate()
        .map(|(j, &step)| {
            let vals: Vec<Option<f64>> = survivors.iter().map(|o| Some(o.curve[j])).collect();
            (step, aggregate(&vals).mean)
        })
        .collect();
    Ok(RunResult {
        config: cfg.clone(),
        finals,
        diverged_count: agg.diverged_count,
        mean: agg.mean,
        std: agg.std,
        initial_metric,
        metric_curve,
    })
}

/// Values to sweep. Empty lists keep the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default)]
    pub env: Vec<EnvName>,
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub eta: Vec<f64>,
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub kappa: Vec<f64>,
    /// Tie `κ = 1/η` in every cell (TDC-fast and original TDC++ sweeps).
    #[serde(default)]
    pub kappa_from_eta: bool,
}

impl Grid {
    pub fn is_empty(&self) -> bool {
        self.env.is_empty() && self.alpha.is_empty() && self.eta.is_empty() && self.beta.is_empty() && self.kappa.is_empty()
    }

    /// Cartesian product in the order env, alpha, eta, beta, kappa.
    pub fn expand(&self, base: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
        if self.is_empty() {
            return Err(Error::EmptyGrid);
        }
        fn or_base<T: Clone>(v: &[T], base: T) -> Vec<T> {
            if v.is_empty() {
                vec![base]
            } else {
                v.to_vec()
            }
        }
        let mut cells = vec![];
        for env in or_base(&self.env, base.env_name) {
            for alpha in or_base(&self.alpha, base.algo.schedule.base_alpha()) {
                for eta in or_base(&self.eta, base.algo.eta) {
                    for beta in or_base(&self.beta, base.algo.beta) {
                        for kappa in or_base(&self.kappa, base.algo.kappa) {
                            let mut cfg = base.clone();
                            cfg.env_name = env;
                            cfg.algo.schedule = match cfg.algo.schedule {
                                StepSchedule::Constant { .. } => StepSchedule::Constant { alpha },
                                StepSchedule::Polynomial { p, .. } => StepSchedule::Polynomial { a: alpha, p },
                            };
                            cfg.algo.eta = eta;
                            cfg.algo.beta = beta;
                            cfg.algo.kappa = if self.kappa_from_eta { 1.0 / eta } else { kappa };
                            cells.push(cfg);
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub cells: Vec<RunResult>,
    /// Index into `cells` of the lowest mean per environment, preferring
    /// cells where no seed diverged.
    pub best: BTreeMap<EnvName, usize>,
}

impl SweepResult {
    pub fn best_cells(&self) -> impl Iterator<Item = &RunResult> {
        self.best.values().map(|&i| &self.cells[i])
    }
}

/// Runs every grid cell (in parallel) and selects the best per environment.
pub fn run_sweep(base: &ExperimentConfig, grid: &Grid) -> Result<SweepResult> {
    let configs = grid.expand(base)?;
    let cells: Vec<RunResult> = configs.par_iter().map(run_experiment).collect::<Result<_>>()?;
    Ok(SweepResult { best: best_per_env(&cells), cells })
}

pub fn best_per_env(cells: &[RunResult]) -> BTreeMap<EnvName, usize> {
    let mut best: BTreeMap<EnvName, usize> = BTreeMap::new();
    let rank = |r: &RunResult| (r.diverged_count > 0, r.mean);
    for (i, cell) in cells.iter().enumerate() {
        if !cell.mean.is_finite() {
            continue;
        }
        let env = cell.config.env_name;
        let better = match best.get(&env) {
            None => true,
            Some(&j) => {
                let (a, b) = (rank(cell), rank(&cells[j]));
                a < b
            }
        };
        if better {
            best.insert(env, i);
        }
    }
    best
}

pub const CSV_HEADER: [&str; 12] =
    ["env", "family", "eta", "beta", "kappa", "reg_fn", "alpha", "steps", "seeds", "diverged", "mean", "std"];

/// One row per result.
pub fn write_results_csv<W: Write>(out: W, results: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in results {
        let c = &r.config;
        w.write_record([
            c.env_name.to_string(),
            c.algo.family.to_string(),
            c.algo.eta.to_string(),
            c.algo.beta.to_string(),
            c.algo.kappa.to_string(),
            c.algo.reg_fn.to_string(),
            c.algo.schedule.base_alpha().to_string(),
            c.steps.to_string(),
            c.seeds.to_string(),
            r.diverged_count.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `mean ± std`, or `-` when every seed diverged.
pub fn format_cell(r: &RunResult) -> String {
    if r.all_diverged() {
        return "-".into();
    }
    let mut s = format!("{:.3} ± {:.3}", r.mean, r.std);
    if r.diverged_count > 0 {
        let _ = write!(s, " ({}/{} diverged)", r.diverged_count, r.finals.len());
    }
    s
}

/// Environments as rows, algorithm labels (with step size) as columns.
pub fn markdown_table(results: &[RunResult]) -> String {
    let mut columns: Vec<String> = vec![];
    let mut rows: Vec<EnvName> = vec![];
    let mut cells: BTreeMap<(EnvName, String), String> = BTreeMap::new();
    for r in results {
        let col = format!("{}, alpha={}", r.config.algo.label(), r.config.algo.schedule.base_alpha());
        if !columns.contains(&col) {
            columns.push(col.clone());
        }
        if !rows.contains(&r.config.env_name) {
            rows.push(r.config.env_name);
        }
        cells.insert((r.config.env_name, col), format_cell(r));
    }
    let mut out = String::new();
    let _ = writeln!(out, "| env | {} |", columns.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(columns.len()));
    for env in rows {
        let vals: Vec<&str> =
            columns.iter().map(|c| cells.get(&(env, c.clone())).map(String::as_str).unwrap_or("")).collect();
        let _ = writeln!(out, "| {env} | {} |", vals.join(" | "));
    }
    out
}

/// Builds the global rayon pool with at most `TDLAB_THREADS` workers.
/// Does nothing if the variable is unset or the pool already exists.
pub fn init_thread_pool_from_env() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tdlab::envs::{build_env_with, stationary_distribution, EnvName, EnvParams};
use tdlab::harness::{
    format_cell, init_thread_pool_from_env, markdown_table, run_experiment, run_sweep, write_results_csv,
    ExperimentConfig, Grid,
};
use tdlab::learners::{AlgoSpec, Family, RegFn, StepSchedule, PRESETS};
use tdlab::numkit::{eig_general, Spectrum};
use tdlab::odelab::{closed_loop, simulate, write_trajectory_csv, DEFAULT_DT, DEFAULT_T_END};
use tdlab::stability::{lyapunov_sample_check, stability_report, LyapunovReport, DEFAULT_LYAPUNOV_SAMPLES};
use tdlab::tdcore::{expected_matrices_with, Metric};

const DEFAULT_ALGO: &str = "btd";
const DEFAULT_HYPER: f64 = 1.0;
const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Parser)]
#[command(name = "tdlab", version, about = "Off-policy TD policy evaluation: experiments, closed-loop ODEs and stability checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one multi-seed experiment and write a results CSV.
    Run(RunArgs),
    /// Run every cell of a hyperparameter grid and write a results CSV.
    Sweep(SweepArgs),
    /// Integrate an algorithm's closed-loop ODE and write the trajectory CSV.
    Ode(OdeArgs),
    /// Print hyperparameter conditions and Hurwitz status as JSON.
    Stability(StabilityArgs),
    /// Print an environment's stationary distribution, key matrices and spectra as JSON.
    Envinfo(EnvinfoArgs),
    /// List algorithm presets.
    ListAlgos,
}

fn parse_env(s: &str) -> Result<EnvName, String> {
    s.parse().map_err(|e: tdlab::Error| e.to_string())
}

fn parse_real(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

/// Counts accept scientific notation (`2e4`) as long as the value is a
/// whole number.
fn parse_count(s: &str) -> Result<u64, String> {
    if let Ok(v) = s.trim().parse::<u64>() {
        return Ok(v);
    }
    let v = parse_real(s)?;
    if v >= 0.0 && v.fract() == 0.0 && v <= u64::MAX as f64 {
        Ok(v as u64)
    } else {
        Err(format!("`{s}` is not a non-negative whole number"))
    }
}

fn parse_algo(s: &str) -> Result<String, String> {
    let name = s.trim().to_ascii_lowercase().replace('-', "_");
    if PRESETS.contains(&name.as_str()) || name == "tdc" {
        Ok(name)
    } else {
        Err(format!("unknown algorithm `{s}` (expected one of: {})", PRESETS.join(", ")))
    }
}

#[derive(Args)]
struct AlgoArgs {
    /// Algorithm preset (see `list-algos`) [default: btd]
    #[arg(long, value_parser = parse_algo)]
    algo: Option<String>,
    /// η [default: 1]
    #[arg(long, value_parser = parse_real, allow_negative_numbers = true)]
    eta: Option<f64>,
    /// β [default: 1]
    #[arg(long, value_parser = parse_real, allow_negative_numbers = true)]
    beta: Option<f64>,
    /// κ [default: 1]
    #[arg(long, value_parser = parse_real, allow_negative_numbers = true)]
    kappa: Option<f64>,
    /// Regularizer for tdcpp: identity, relu, leaky_relu(<slope>) [default: identity]
    #[arg(long, value_parser = |s: &str| s.parse::<RegFn>().map_err(|e| e.to_string()))]
    reg_fn: Option<RegFn>,
    /// Constant step size α [default: 0.01]
    #[arg(long, value_parser = parse_real, allow_negative_numbers = true)]
    alpha: Option<f64>,
}

impl AlgoArgs {
    fn touched(&self) -> bool {
        self.algo.is_some()
            || self.eta.is_some()
            || self.beta.is_some()
            || self.kappa.is_some()
            || self.reg_fn.is_some()
            || self.alpha.is_some()
    }

    /// Applies the flags on top of `base`. An explicit `--algo` rebuilds
    /// the preset from the flags alone.
    fn resolve(&self, base: Option<&AlgoSpec>) -> Result<AlgoSpec> {
        let spec = match (self.algo.as_deref(), base) {
            (None, Some(b)) => {
                let mut s = *b;
                if let Some(v) = self.eta {
                    s.eta = v;
                }
                if let Some(v) = self.beta {
                    s.beta = v;
                }
                if let Some(v) = self.kappa {
                    s.kappa = v;
                }
                if let Some(f) = self.reg_fn {
                    s.reg_fn = f;
                }
                if let Some(a) = self.alpha {
                    s.schedule = StepSchedule::Constant { alpha: a };
                }
                s.validate()?;
                s
            }
            (name, _) => AlgoSpec::preset(
                name.unwrap_or(DEFAULT_ALGO),
                self.eta.unwrap_or(DEFAULT_HYPER),
                self.beta.unwrap_or(DEFAULT_HYPER),
                self.kappa.unwrap_or(DEFAULT_HYPER),
                self.reg_fn.unwrap_or(RegFn::Identity),
                self.alpha.unwrap_or(DEFAULT_ALPHA),
            )?,
        };
        Ok(spec)
    }
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment config; flags given alongside override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment: boyan, dependent, inverted, tabular, baird
    #[arg(long, value_parser = parse_env, required_unless_present = "config")]
    env: Option<EnvName>,
    #[command(flatten)]
    algo: AlgoArgs,
    /// Transitions per seed [default: 20000]
    #[arg(long, value_parser = parse_count)]
    steps: Option<u64>,
    /// Independent seeds [default: 30]
    #[arg(long, value_parser = parse_count)]
    seeds: Option<u64>,
    /// rmsve, rmse_fixed_point or rmspbe [default: rmsve]
    #[arg(long, value_parser = |s: &str| s.parse::<Metric>().map_err(|e| e.to_string()))]
    metric: Option<Metric>,
    /// Steps between metric recordings [default: 100]
    #[arg(long, value_parser = parse_count)]
    record_every: Option<u64>,
    /// A seed diverges once the norm of ξ exceeds this [default: 1e6]
    #[arg(long, value_parser = parse_real)]
    divergence_norm: Option<f64>,
    /// Global seed; seed i uses splitmix64(seed ^ i) [default: 0]
    #[arg(long, value_parser = parse_count)]
    seed: Option<u64>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let file = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Some(serde_json::from_str::<ExperimentConfig>(&text).with_context(|| format!("parsing {}", path.display()))?)
            }
            None => None,
        };
        let mut cfg = match file {
            Some(mut c) => {
                if self.algo.touched() {
                    c.algo = self.algo.resolve(Some(&c.algo))?;
                }
                if let Some(env) = self.env {
                    c.env_name = env;
                }
                c
            }
            None => ExperimentConfig::new(self.env.expect("clap requires --env without --config"), self.algo.resolve(None)?),
        };
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.seeds {
            cfg.seeds = usize::try_from(v).context("--seeds is too large")?;
        }
        if let Some(m) = self.metric {
            cfg.metric = m;
        }
        if let Some(v) = self.record_every {
            cfg.record_every = v;
        }
        if let Some(v) = self.divergence_norm {
            cfg.divergence_norm = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Results CSV path; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// JSON grid: {"env": [...], "alpha": [...], "eta": [...], "beta": [...], "kappa": [...], "kappa_from_eta": bool}
    #[arg(long)]
    grid: PathBuf,
    /// Results CSV path; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a markdown table here
    #[arg(long)]
    markdown: Option<PathBuf>,
}

#[derive(Args)]
struct SystemArgs {
    /// Environment: boyan, dependent, inverted, tabular, baird
    #[arg(long, value_parser = parse_env)]
    env: EnvName,
    #[command(flatten)]
    algo: AlgoArgs,
}

impl SystemArgs {
    fn env_and_algo(&self) -> Result<(tdlab::envs::MdpEnv, AlgoSpec)> {
        let env = build_env_with(self.env, &EnvParams::default())?;
        Ok((env, self.algo.resolve(None)?))
    }
}

#[derive(Args)]
struct OdeArgs {
    #[command(flatten)]
    sys: SystemArgs,
    /// Integration horizon
    #[arg(long, value_parser = parse_real, default_value_t = DEFAULT_T_END)]
    t_end: f64,
    /// RK4 step
    #[arg(long, value_parser = parse_real, default_value_t = DEFAULT_DT)]
    dt: f64,
    /// Trajectory CSV path; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StabilityArgs {
    #[command(flatten)]
    sys: SystemArgs,
    /// Lyapunov samples for tdcpp loops
    #[arg(long, value_parser = parse_count, default_value_t = DEFAULT_LYAPUNOV_SAMPLES as u64)]
    samples: u64,
    /// JSON path; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnvinfoArgs {
    /// Environment: boyan, dependent, inverted, tabular, baird
    #[arg(long, value_parser = parse_env)]
    env: EnvName,
    /// JSON path; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = args.exp.resolve()?;
    let result = run_experiment(&cfg)?;
    let mut buf = vec![];
    write_results_csv(&mut buf, std::slice::from_ref(&result))?;
    emit(args.out.as_deref(), &buf)?;
    eprintln!(
        "{} on {}: {} (diverged {}/{})",
        cfg.algo.label(),
        cfg.env_name,
        format_cell(&result),
        result.diverged_count,
        result.finals.len()
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = args.exp.resolve()?;
    let text = fs::read_to_string(&args.grid).with_context(|| format!("reading {}", args.grid.display()))?;
    let grid: Grid = serde_json::from_str(&text).with_context(|| format!("parsing {}", args.grid.display()))?;
    let sweep = run_sweep(&base, &grid)?;
    let mut buf = vec![];
    write_results_csv(&mut buf, &sweep.cells)?;
    emit(args.out.as_deref(), &buf)?;
    if let Some(path) = &args.markdown {
        fs::write(path, markdown_table(&sweep.cells)).with_context(|| format!("writing {}", path.display()))?;
    }
    for (env, &i) in &sweep.best {
        let cell = &sweep.cells[i];
        eprintln!("best on {env}: {} alpha={} -> {}", cell.config.algo.label(), cell.config.algo.schedule.base_alpha(), format_cell(cell));
    }
    Ok(())
}

fn cmd_ode(args: &OdeArgs) -> Result<()> {
    let (env, algo) = args.sys.env_and_algo()?;
    let d = stationary_distribution(&env)?;
    let km = expected_matrices_with(&env, &d)?;
    let sys = closed_loop(&algo, &km)?;
    let traj = simulate(&sys, &sys.initial_state(env.initial_xi()), args.t_end, args.dt)?;
    let mut buf = vec![];
    write_trajectory_csv(&mut buf, &sys, &traj)?;
    emit(args.out.as_deref(), &buf)?;
    if traj.diverged {
        eprintln!("trajectory diverged at t = {}", traj.last().0);
    }
    Ok(())
}

#[derive(Serialize)]
struct StabilityOutput {
    #[serde(flatten)]
    report: tdlab::stability::StabilityReport,
    lyapunov: Option<LyapunovReport>,
}

fn cmd_stability(args: &StabilityArgs) -> Result<()> {
    let (env, algo) = args.sys.env_and_algo()?;
    let d = stationary_distribution(&env)?;
    let km = expected_matrices_with(&env, &d)?;
    let report = stability_report(args.sys.env.as_str(), &algo, &km)?;
    let lyapunov = if algo.family == Family::Tdcpp {
        let sys = closed_loop(&algo, &km)?;
        let samples = usize::try_from(args.samples).context("--samples is too large")?;
        Some(lyapunov_sample_check(&sys, &km, algo.eta, algo.kappa, samples, 0)?)
    } else {
        None
    };
    let mut json = serde_json::to_vec_pretty(&StabilityOutput { report, lyapunov })?;
    json.push(b'\n');
    emit(args.out.as_deref(), &json)
}

#[derive(Serialize)]
struct EnvInfo {
    name: String,
    n_states: usize,
    n_actions: usize,
    n_features: usize,
    gamma: f64,
    stationary_distribution: Vec<f64>,
    initial_xi: Vec<f64>,
    xi_star: Vec<f64>,
    a: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    b: Vec<f64>,
    spectrum_a: Spectrum,
    spectrum_c: Spectrum,
}

fn cmd_envinfo(args: &EnvinfoArgs) -> Result<()> {
    let env = build_env_with(args.env, &EnvParams::default())?;
    let d = stationary_distribution(&env)?;
    let km = expected_matrices_with(&env, &d)?;
    let info = EnvInfo {
        name: env.name().to_string(),
        n_states: env.n_states(),
        n_actions: env.n_actions(),
        n_features: env.n_features(),
        gamma: env.gamma(),
        stationary_distribution: d.d.as_slice().to_vec(),
        initial_xi: env.initial_xi().as_slice().to_vec(),
        xi_star: km.xi_star.as_slice().to_vec(),
        a: km.a.to_rows(),
        c: km.c.to_rows(),
        b: km.b.as_slice().to_vec(),
        spectrum_a: eig_general(&km.a)?,
        spectrum_c: eig_general(&km.c)?,
    };
    let mut json = serde_json::to_vec_pretty(&info)?;
    json.push(b'\n');
    emit(args.out.as_deref(), &json)
}

fn cmd_list_algos() {
    let rows = [
        ("td", "linear TD(0) with importance ratio"),
        ("etd", "emphatic TD with follow-on trace"),
        ("btd", "backstepping TD; --eta"),
        ("gtd2", "btd with eta = 0"),
        ("tdc_fast", "single time-scale TDC; --eta (kappa = 1/eta, beta = 0); alias tdc"),
        ("tdc_slow", "TDC scaled on the slow part; --beta"),
        ("tdc2", "single time-scale TDC2; --eta"),
        ("tdcpp", "generalized TDC++; --eta --beta --kappa --reg-fn"),
        ("tdcpp_original", "TDC++ with kappa = 1/eta; --eta --beta"),
        ("tdc_relu", "tdcpp with the relu regularizer; --eta --beta --kappa"),
    ];
    for (name, what) in rows {
        println!("{name:<16}{what}");
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    init_thread_pool_from_env()?;
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ode(a) => cmd_ode(a),
        Command::Stability(a) => cmd_stability(a),
        Command::Envinfo(a) => cmd_envinfo(a),
        Command::ListAlgos => {
            cmd_list_algos();
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

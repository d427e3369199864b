use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use kb_onestep::fisher::{bound_from_limit, EfficiencyBound};
use kb_onestep::kbfilter::run_filter;
use kb_onestep::mc::{run_replications, run_sweep, EstimatorKind, McConfig, McReport, PrelimMethod, SweepReport};
use kb_onestep::model::limit_system;
use kb_onestep::onestep::{adaptive_filter, m_star_csv, m_star_series, AdaptiveInit, OneStepContext, OneStepResult};
use kb_onestep::prelim::{
    estimate_example1, estimate_example2, estimate_generic, learning_interval, Downstream, PrelimResult,
};
use kb_onestep::simulate::{simulate_path, Trajectory, TrajectoryMeta};
use kb_onestep::{CaseTag, Error, ModelSpec, TimeGrid};

const THREADS_ENV: &str = "KB_ONESTEP_THREADS";

#[derive(Parser)]
#[command(name = "kb-onestep", version, about = "Small-noise estimation for partially observed linear systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one path and write trajectory.csv and meta.json.
    Simulate(SimulateArgs),
    /// Run the Kalman–Bucy filter at a fixed parameter value.
    Filter(FilterArgs),
    /// Preliminary, one-step and running one-step estimates for one path.
    Estimate(EstimateArgs),
    /// Monte Carlo replications, optionally swept over eps and delta.
    Montecarlo(McArgs),
    /// Fisher information and the lower bound for estimating the conditional mean.
    Bound(BoundArgs),
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

#[derive(Args)]
struct ModelArgs {
    /// Model file (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Overrides the noise level in the model file.
    #[arg(long)]
    eps: Option<f64>,
}

impl ModelArgs {
    fn load(&self) -> Result<ModelSpec, Error> {
        let model = ModelSpec::from_json_str(&read(&self.model)?)?;
        Ok(match self.eps {
            Some(eps) => model.with_eps(eps),
            None => model,
        })
    }
}

#[derive(Args)]
struct GridArgs {
    /// Number of Euler steps on [0, T].
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
}

/// Either a stored trajectory or the flags to simulate one.
#[derive(Args)]
struct PathArgs {
    /// Trajectory CSV written by `simulate`; meta.json is read from the same directory.
    #[arg(long, conflicts_with = "true_theta")]
    trajectory: Option<PathBuf>,
    /// Simulate inline at this parameter value instead of reading a file.
    #[arg(long)]
    true_theta: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    grid: GridArgs,
}

impl PathArgs {
    fn obtain(&self, model: &ModelSpec) -> Result<(ModelSpec, Trajectory), Error> {
        match (&self.trajectory, self.true_theta) {
            (Some(path), _) => {
                let meta_path = path.with_file_name("meta.json");
                let meta: TrajectoryMeta = serde_json::from_str(&read(&meta_path)?)?;
                let traj = Trajectory::from_csv(&read(path)?, &meta)?;
                if (traj.grid.horizon - model.horizon).abs() > 1e-9 * model.horizon {
                    return Err(Error::Input(format!(
                        "trajectory horizon {} differs from model horizon {}",
                        traj.grid.horizon, model.horizon
                    )));
                }
                Ok((model.with_eps(traj.eps), traj))
            }
            (None, Some(theta)) => {
                let grid = TimeGrid::new(model.horizon, self.grid.steps)?;
                Ok((model.clone(), simulate_path(model, theta, &grid, self.seed)?))
            }
            (None, None) => Err(Error::Input("give either --trajectory or --true-theta".into())),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// True parameter value.
    #[arg(long)]
    theta: f64,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct FilterArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    path: PathArgs,
    /// Parameter value plugged into the filter.
    #[arg(long)]
    theta: f64,
    /// Also propagate the derivative of the filter mean in theta.
    #[arg(long)]
    derivative: bool,
    #[arg(short, long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrelimArg {
    Generic,
    Example1,
    Example2,
}

impl From<PrelimArg> for PrelimMethod {
    fn from(p: PrelimArg) -> Self {
        match p {
            PrelimArg::Generic => PrelimMethod::Generic,
            PrelimArg::Example1 => PrelimMethod::Example1,
            PrelimArg::Example2 => PrelimMethod::Example2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Warm,
    Restart,
}

impl From<InitArg> for AdaptiveInit {
    fn from(i: InitArg) -> Self {
        match i {
            InitArg::Warm => AdaptiveInit::WarmStart,
            InitArg::Restart => AdaptiveInit::Restart,
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    path: PathArgs,
    /// Learning interval exponent, tau = eps^delta.
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    /// Explicit learning horizon; required when eps = 0.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum, default_value = "generic")]
    prelim: PrelimArg,
    /// Times at which to evaluate the conditional-mean estimator (comma separated).
    #[arg(long, value_delimiter = ',')]
    mstar_times: Vec<f64>,
    /// Also run the adaptive filter and write adaptive.csv.
    #[arg(long)]
    adaptive: bool,
    #[arg(long, value_enum, default_value = "warm")]
    adaptive_init: InitArg,
    #[arg(short, long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Assertion {
    /// Prelim-MSE minimizer over the delta sweep within 0.1 of 2/5.
    DeltaOptimum,
    /// Prelim-MSE rate slope within 1 ± 0.2.
    Rate,
    /// One-step variance within 15% of 1/I and Anderson–Darling not rejected at 0.01.
    Efficiency,
    /// One-step mean within 3 standard errors of theta0.
    Unbiased,
}

#[derive(Args)]
struct McArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// True parameter value.
    #[arg(long)]
    theta: f64,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    /// Sweep delta over start:stop:step (inclusive).
    #[arg(long, conflicts_with = "delta")]
    delta_sweep: Option<String>,
    /// Sweep eps over a comma separated list.
    #[arg(long, value_delimiter = ',', conflicts_with = "eps")]
    eps_sweep: Vec<f64>,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint times for the time-indexed estimators (comma separated).
    #[arg(long, value_delimiter = ',')]
    checkpoints: Vec<f64>,
    /// Estimators to run (comma separated). Defaults to prelim, plus onestep
    /// when an assertion needs it.
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<String>,
    #[arg(long, value_enum, default_value = "generic")]
    prelim: PrelimArg,
    #[arg(long, value_enum, default_value = "warm")]
    adaptive_init: InitArg,
    /// Explicit learning horizon; required when eps = 0.
    #[arg(long)]
    tau: Option<f64>,
    /// Check a property of the result; a failure exits with status 4.
    #[arg(long = "assert", value_enum)]
    asserts: Vec<Assertion>,
    #[arg(short, long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct BoundArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Parameter value.
    #[arg(long)]
    theta: f64,
    /// Time of the bound; defaults to T.
    #[arg(long)]
    t: Option<f64>,
    #[command(flatten)]
    grid: GridArgs,
    /// Write bound.json here instead of printing to stdout.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

enum Failure {
    Lib(Error),
    Assertion,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(e.into())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::TooManyFailures { .. } => 4,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let model = args.model.load()?;
    let grid = TimeGrid::new(model.horizon, args.grid.steps)?;
    let traj = simulate_path(&model, args.theta, &grid, args.seed)?;
    write(&args.out, "trajectory.csv", &traj.to_csv())?;
    write(&args.out, "meta.json", &to_json(&traj.meta())?)
}

fn cmd_filter(args: &FilterArgs) -> Result<(), Failure> {
    let (model, traj) = args.path.obtain(&args.model.load()?)?;
    let out = run_filter(&model, args.theta, &traj, args.derivative)?;
    write(&args.out, "filter.csv", &out.to_csv())
}

#[derive(Serialize)]
struct EstimateReport {
    tau_eps: f64,
    prelim: PrelimResult,
    onestep: OneStepResult,
    /// `θ*_{t,ε}` at the last grid node.
    process_final: f64,
    fisher: f64,
}

fn prelim_for(model: &ModelSpec, traj: &Trajectory, method: PrelimArg, tau: f64) -> Result<PrelimResult, Error> {
    match method {
        PrelimArg::Generic => estimate_generic(model, traj, tau),
        PrelimArg::Example1 => estimate_example1(model, traj, tau),
        PrelimArg::Example2 => estimate_example2(model, traj, tau),
    }
}

fn cmd_estimate(args: &EstimateArgs) -> Result<(), Failure> {
    let (model, traj) = args.path.obtain(&args.model.load()?)?;
    let tau = match args.tau {
        Some(t) => t,
        None if model.eps == 0.0 => return Err(Error::Input("eps = 0 needs an explicit --tau".into()).into()),
        None => learning_interval(model.eps, args.delta, model.horizon, model.case_tag, Downstream::OneStep)?,
    };
    let pre = prelim_for(&model, &traj, args.prelim, tau)?;
    let ctx = OneStepContext::prepare(&model, &traj, &pre)?;
    let onestep = ctx.estimate(&model, &traj)?;
    let process = ctx.process(&model, &traj)?;
    let report = EstimateReport {
        tau_eps: pre.tau_eps,
        prelim: pre,
        onestep,
        process_final: process.last(),
        fisher: onestep.fisher_used,
    };
    write(&args.out, "estimate.json", &to_json(&report)?)?;
    write(&args.out, "process.csv", &process.to_csv())?;
    if !args.mstar_times.is_empty() {
        let rows = m_star_series(&model, &traj, &process, &args.mstar_times)?;
        write(&args.out, "mstar.csv", &m_star_csv(&rows))?;
    }
    if args.adaptive {
        let out = adaptive_filter(&model, &traj, &process, args.adaptive_init.into())?;
        write(&args.out, "adaptive.csv", &out.to_csv())?;
    }
    Ok(())
}

fn parse_range(spec: &str) -> Result<Vec<f64>, Error> {
    let bad = || Error::Input(format!("sweep {spec:?} is not start:stop:step"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let [start, stop, step] = parts[..] else { return Err(bad()) };
    if !(step > 0.0 && stop >= start && start.is_finite() && stop.is_finite()) {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect())
}

fn parse_estimators(names: &[String]) -> Result<BTreeSet<EstimatorKind>, Error> {
    names
        .iter()
        .map(|n| {
            serde_json::from_value(serde_json::Value::String(n.trim().to_lowercase()))
                .map_err(|_| Error::Input(format!("unknown estimator {n:?}")))
        })
        .collect()
}

fn check(results: &mut Vec<String>, failed: &mut bool, ok: bool, msg: String) {
    *failed |= !ok;
    results.push(format!("{} {msg}", if ok { "PASS" } else { "FAIL" }));
}

fn point_asserts(report: &McReport, asserts: &[Assertion], label: &str, lines: &mut Vec<String>, failed: &mut bool) {
    let agg = &report.aggregates;
    for a in asserts {
        match a {
            Assertion::Efficiency => {
                let ratio = agg.onestep.and_then(|s| s.scaled_variance).map(|v| v / agg.target_variance);
                let p = agg.normality.map(|n| n.p_value);
                let ok = matches!(ratio, Some(r) if (r - 1.0).abs() <= 0.15)
                    && matches!(agg.normality, Some(n) if n.rejects_at(0.01) == Some(false));
                check(lines, failed, ok, format!("efficiency{label}: variance ratio {ratio:?}, AD p-value {p:?}"));
            }
            Assertion::Unbiased => {
                let ok = matches!(agg.onestep, Some(s) if s.bias.abs() <= 3.0 * s.stderr);
                let detail = agg.onestep.map(|s| (s.bias, s.stderr));
                check(lines, failed, ok, format!("unbiased{label}: (bias, stderr) {detail:?}"));
            }
            _ => {}
        }
    }
}

fn sweep_asserts(sweep: &SweepReport, case: CaseTag, asserts: &[Assertion], lines: &mut Vec<String>, failed: &mut bool) {
    for a in asserts {
        match a {
            Assertion::DeltaOptimum => {
                let ok = matches!(sweep.argmin_delta, Some(d) if (d - 0.4).abs() <= 0.1 + 1e-12);
                check(lines, failed, ok, format!("delta-optimum: argmin {:?}", sweep.argmin_delta));
            }
            Assertion::Rate => {
                let fit = sweep.rate_for(case);
                let ok = matches!(fit, Some(f) if (f.slope - 1.0).abs() <= 0.2);
                check(lines, failed, ok, format!("rate: slope {:?}", fit.map(|f| f.slope)));
            }
            _ => {}
        }
    }
}

fn cmd_montecarlo(args: &McArgs) -> Result<(), Failure> {
    let model = args.model.load()?;
    let grid = TimeGrid::new(model.horizon, args.grid.steps)?;
    let mut cfg = McConfig::new(model.clone(), args.theta, args.delta, args.reps, grid);
    cfg.base_seed = args.seed;
    cfg.estimators = if args.estimators.is_empty() {
        let mut set = BTreeSet::from([EstimatorKind::Prelim]);
        if args.asserts.iter().any(|a| matches!(a, Assertion::Efficiency | Assertion::Unbiased)) {
            set.insert(EstimatorKind::Onestep);
        }
        set
    } else {
        parse_estimators(&args.estimators)?
    };
    cfg.prelim_method = args.prelim.into();
    cfg.adaptive_init = args.adaptive_init.into();
    cfg.tau_override = args.tau;
    let timed = [EstimatorKind::Process, EstimatorKind::Mstar, EstimatorKind::Adaptive, EstimatorKind::Filter];
    cfg.checkpoints = if !args.checkpoints.is_empty() {
        args.checkpoints.clone()
    } else if timed.iter().any(|e| cfg.estimators.contains(e)) {
        vec![0.5 * model.horizon, model.horizon]
    } else {
        Vec::new()
    };

    let deltas = match &args.delta_sweep {
        Some(spec) => parse_range(spec)?,
        None => vec![args.delta],
    };
    let epsilons = if args.eps_sweep.is_empty() { vec![model.eps] } else { args.eps_sweep.clone() };
    let mut lines = Vec::new();
    let mut failed = false;
    if deltas.len() == 1 && epsilons.len() == 1 {
        cfg.model = model.with_eps(epsilons[0]);
        cfg.delta = deltas[0];
        let report = run_replications(&cfg)?;
        write(&args.out, "rows.csv", &report.rows_csv())?;
        write(&args.out, "aggregates.json", &format!("{}\n", report.aggregates_json()))?;
        point_asserts(&report, &args.asserts, "", &mut lines, &mut failed);
        if args.asserts.iter().any(|a| matches!(a, Assertion::DeltaOptimum | Assertion::Rate)) {
            check(&mut lines, &mut failed, false, "sweep assertions need --delta-sweep or --eps-sweep".into());
        }
    } else {
        let points: Vec<(f64, f64)> = epsilons.iter().flat_map(|&e| deltas.iter().map(move |&d| (e, d))).collect();
        let sweep = run_sweep(&cfg, &points)?;
        write(&args.out, "rows.csv", &sweep.rows_csv())?;
        write(&args.out, "aggregates.json", &format!("{}\n", sweep.aggregates_json()))?;
        for p in &sweep.points {
            let label = format!(" (eps {}, delta {})", p.eps, p.delta);
            point_asserts(&p.report, &args.asserts, &label, &mut lines, &mut failed);
        }
        sweep_asserts(&sweep, model.case_tag, &args.asserts, &mut lines, &mut failed);
    }
    for l in &lines {
        eprintln!("{l}");
    }
    if failed {
        return Err(Failure::Assertion);
    }
    Ok(())
}

fn cmd_bound(args: &BoundArgs) -> Result<(), Failure> {
    let model = args.model.load()?;
    let grid = TimeGrid::new(model.horizon, args.grid.steps)?;
    let lim = limit_system(&model, args.theta, &grid)?;
    let bound: EfficiencyBound = bound_from_limit(&model, &lim, args.t.unwrap_or(model.horizon))?;
    let json = to_json(&bound)?;
    match &args.out {
        Some(dir) => write(dir, "bound.json", &json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Input(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    configure_threads()?;
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Montecarlo(a) => cmd_montecarlo(a),
        Command::Bound(a) => cmd_bound(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Assertion) => ExitCode::from(4),
    }
}

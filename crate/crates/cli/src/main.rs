use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use ssep_core::harness::{
    self, Counterterm, ConvergenceSpec, CumulantSpec, Experiment, ExperimentConfig, PamSpec, RenormSpec, SsepSpec,
    SurvivalSpec, VerifyLevel,
};
use ssep_core::pam::{InitialCondition, RenormChoice};
use ssep_core::renorm::{C21Method, RenormQuadrature};

/// Exit status when invariant checks fail.
const EXIT_FAILED: u8 = 1;
/// Exit status for missing input (usage text printed).
const EXIT_USAGE: u8 = 2;
/// Exit status for invalid configurations and runtime errors.
const EXIT_ERROR: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "ssep-pam", version, about = "Exclusion process, cumulant, renormalization and PAM experiments")]
struct Cli {
    /// Master seed; overrides the seed of a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; the SSEP_OUT_DIR environment variable takes precedence.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a stationary exclusion trajectory and record field pairings.
    Ssep(SsepArgs),
    /// Moment and cumulant formulas against oracles.
    Cumulants(CumulantArgs),
    /// Renormalization constants and their rates.
    Renorm(RenormArgs),
    /// Solve the renormalized parabolic Anderson model on one trajectory.
    Pam(PamArgs),
    /// Survival of a walk killed by exclusion particles.
    Survival(SurvivalArgs),
    /// Cauchy-in-N diagnostics for smoothed and rough solutions.
    Convergence(ConvergenceArgs),
    /// Run the invariant suites and print a JSON report.
    Verify {
        /// Larger replica counts and more sampled configurations.
        #[arg(long)]
        full: bool,
    },
    /// Run the experiment described by --config.
    Run,
}

#[derive(Args, Debug)]
struct SsepArgs {
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long = "N", default_value_t = 4)]
    level: u32,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 10)]
    snapshots: usize,
}

#[derive(Args, Debug)]
struct CumulantArgs {
    /// Compare against the full generator (at most 16 sites).
    #[arg(long)]
    exact: bool,
    /// Torus side length.
    #[arg(long, default_value_t = 4)]
    sites: usize,
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 3)]
    points: usize,
    #[arg(long, default_value_t = 8)]
    families: usize,
    #[arg(long, default_value_t = 20_000)]
    replicas: usize,
}

#[derive(Args, Debug)]
struct RenormArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    /// Comma-separated levels.
    #[arg(long = "N", value_delimiter = ',', default_values_t = [2, 3, 4])]
    levels: Vec<u32>,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    /// Pair term of the fourth-order constant: auto, exact, mc or skip.
    #[arg(long, default_value = "auto")]
    c21: String,
    /// Monte-Carlo samples when --c21 mc.
    #[arg(long, default_value_t = 20_000)]
    c21_samples: usize,
    /// Emit relative changes under quadrature refinement.
    #[arg(long)]
    stability: bool,
}

#[derive(Args, Debug)]
struct PamArgs {
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long = "N", default_value_t = 4)]
    level: u32,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 0.25)]
    t_final: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 5)]
    snapshots: usize,
    /// Initial condition as JSON, e.g. '{"kind":"constant","value":1}'.
    #[arg(long)]
    u0: Option<String>,
    /// Counterterm: computed, zero, or a number.
    #[arg(long, default_value = "computed")]
    counterterm: String,
    /// Run even when the cost estimate exceeds the guard.
    #[arg(long)]
    force_large: bool,
}

#[derive(Args, Debug)]
struct SurvivalArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long = "N", default_value_t = 3)]
    level: u32,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    /// Comma-separated killing strengths (at least five distinct).
    #[arg(long, value_delimiter = ',', default_values_t = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
    eps: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Time-scale exponent; defaults to 2/(4-d).
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, default_value_t = 200.0)]
    max_horizon: f64,
    #[arg(long, default_value_t = 4)]
    environments: usize,
    #[arg(long, default_value_t = 2000)]
    replicas: usize,
}

#[derive(Args, Debug)]
struct ConvergenceArgs {
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long = "N", value_delimiter = ',', default_values_t = [2, 3, 4])]
    levels: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.3])]
    delta: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 0.25)]
    t_final: f64,
    #[arg(long, default_value_t = 2e-3)]
    dt: f64,
    #[arg(long, default_value_t = 5)]
    snapshots: usize,
    #[arg(long, default_value_t = 0.25)]
    eta: f64,
    #[arg(long, default_value_t = 8)]
    replicas: usize,
    /// Constant subtracted from the potential.
    #[arg(long)]
    counterterm: Option<f64>,
    /// Initial condition as JSON.
    #[arg(long)]
    u0: Option<String>,
}

fn default_u0(d: usize) -> InitialCondition {
    let mut k = vec![0; d];
    k[0] = 1;
    InitialCondition::FourierMode { k, amplitude: 0.5, offset: 1.0 }
}

fn parse_u0(text: Option<&str>, d: usize) -> Result<InitialCondition, String> {
    match text {
        None => Ok(default_u0(d)),
        Some(t) => serde_json::from_str(t).map_err(|e| format!("bad --u0: {e}")),
    }
}

fn parse_c21(name: &str, samples: usize, seed: u64) -> Result<Option<C21Method>, String> {
    match name {
        "auto" => Ok(None),
        "exact" => Ok(Some(C21Method::Exact)),
        "mc" => Ok(Some(C21Method::MonteCarlo { samples, seed })),
        "skip" => Ok(Some(C21Method::Skip)),
        other => Err(format!("unknown --c21 `{other}`; expected auto, exact, mc or skip")),
    }
}

fn parse_counterterm(text: &str) -> Result<Counterterm, String> {
    match text {
        "computed" => Ok(Counterterm::Computed),
        "zero" => Ok(Counterterm::Zero),
        v => v.parse().map(|value| Counterterm::Fixed { value }).map_err(|_| format!("bad --counterterm `{v}`")),
    }
}

fn experiment(cmd: Command, seed: u64) -> Result<Experiment, String> {
    Ok(match cmd {
        Command::Ssep(a) => Experiment::Ssep(SsepSpec {
            d: a.d,
            level: a.level,
            rho: a.rho,
            horizon: a.horizon,
            snapshots: a.snapshots,
        }),
        Command::Cumulants(a) => Experiment::Cumulants(CumulantSpec {
            exact: a.exact,
            sites: a.sites,
            d: a.d,
            rho: a.rho,
            points: a.points,
            families: a.families,
            replicas: a.replicas,
            tolerance: 1e-9,
        }),
        Command::Renorm(a) => Experiment::Renorm(RenormSpec {
            d: a.d,
            levels: a.levels,
            rho: a.rho,
            quadrature: RenormQuadrature::default(),
            c21: parse_c21(&a.c21, a.c21_samples, seed)?,
            stability: a.stability,
        }),
        Command::Pam(a) => Experiment::Pam(PamSpec {
            d: a.d,
            level: a.level,
            rho: a.rho,
            t_final: a.t_final,
            dt: a.dt,
            u0: parse_u0(a.u0.as_deref(), a.d)?,
            snapshots: a.snapshots,
            counterterm: parse_counterterm(&a.counterterm)?,
            allow_large: a.force_large,
        }),
        Command::Survival(a) => Experiment::Survival(SurvivalSpec {
            d: a.d,
            level: a.level,
            rho: a.rho,
            eps: a.eps,
            tau: a.tau,
            beta: a.beta,
            max_horizon: a.max_horizon,
            environments: a.environments,
            replicas: a.replicas,
        }),
        Command::Convergence(a) => Experiment::Convergence(ConvergenceSpec {
            d: a.d,
            levels: a.levels,
            deltas: a.delta,
            rho: a.rho,
            u0: parse_u0(a.u0.as_deref(), a.d)?,
            t_final: a.t_final,
            dt: a.dt,
            snapshots: a.snapshots,
            eta: a.eta,
            replicas: a.replicas,
            counterterm: a.counterterm.map_or(RenormChoice::Zero, |value| RenormChoice::Fixed { value }),
        }),
        Command::Verify { .. } | Command::Run => unreachable!("handled by the caller"),
    })
}

fn usage() -> ExitCode {
    let _ = Cli::command().print_help();
    ExitCode::from(EXIT_USAGE)
}

fn execute(config: ExperimentConfig) -> ExitCode {
    let outcome = match harness::run(&config) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_ERROR);
        }
    };
    if let Some(first) = outcome.artifacts.first() {
        print!("{}", outcome.render(first));
    }
    let dir = harness::resolve_out_dir(&config);
    match outcome.write(&dir) {
        Ok(paths) => {
            for p in paths {
                eprintln!("wrote {}", p.display());
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_ERROR);
        }
    }
    if outcome.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        for f in &outcome.failures {
            eprintln!("FAILED: {f}");
        }
        ExitCode::from(EXIT_FAILED)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = harness::set_threads(n) {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_ERROR);
        }
    }
    let from_file = match (&cli.command, &cli.config) {
        (Some(Command::Verify { .. }), _) => None,
        (_, Some(path)) => Some(path.clone()),
        (Some(Command::Run), None) | (None, None) => return usage(),
        _ => None,
    };
    if let Some(path) = from_file {
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                return ExitCode::from(EXIT_ERROR);
            }
        };
        return match harness::parse_config(&text) {
            Ok(None) => usage(),
            Ok(Some(mut config)) => {
                if let Some(s) = cli.seed {
                    config.seed = s;
                }
                if cli.out.is_some() {
                    config.out_dir = cli.out;
                }
                execute(config)
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_ERROR)
            }
        };
    }
    let seed = cli.seed.unwrap_or(1);
    match cli.command {
        Some(Command::Verify { full }) => {
            let level = if full { VerifyLevel::Full } else { VerifyLevel::Quick };
            let report = harness::verify_all(level);
            println!("{}", report.to_json());
            for c in &report.checks {
                eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if report.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILED)
            }
        }
        Some(cmd) => match experiment(cmd, seed) {
            Ok(experiment) => execute(ExperimentConfig { seed, out_dir: cli.out, experiment }),
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_ERROR)
            }
        },
        None => usage(),
    }
}

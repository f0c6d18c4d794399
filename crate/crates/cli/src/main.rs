//! `ctxmarket`: generate contextual markets, solve them, and score the
//! results.
//!
//! Exit codes: 0 success, 2 invalid arguments or inputs, 3 solver failure,
//! 4 certification failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxmarket::baselines::EgConfig;
use ctxmarket::ces::CesSpec;
use ctxmarket::harness::{self, Method, MethodConfig, SweepSpec};
use ctxmarket::market::ContextDistribution;
use ctxmarket::metrics::{self, MetricsReport};
use ctxmarket::net::Checkpoint;
use ctxmarket::properties::{self, Profile};
use ctxmarket::trainer::TrainConfig;
use ctxmarket::{Error, Market};

const EXIT_INVALID: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_CERTIFICATION: u8 = 4;

#[derive(Parser)]
#[command(name = "ctxmarket", version, about = "Equilibria of contextual Fisher markets")]
struct Cli {
    /// Directory for outputs when no explicit path is given.
    #[arg(long, global = true, env = "CTXMARKET_OUT", default_value = "runs")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a market and write it as JSON.
    Generate(GenerateArgs),
    /// Solve a market with one method and write the run artifacts.
    Run(RunArgs),
    /// Solve a grid of markets with several methods and write one CSV row per cell.
    Sweep(SweepArgs),
    /// Project and score a candidate (or a stored network) against a market.
    Evaluate(EvaluateArgs),
    /// Run the randomized property suite.
    Check(CheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 1 << 20)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// normal, uniform or exponential.
    #[arg(long, default_value = "normal")]
    dist: ContextDistribution,
    /// CES parameter: a number below 1, `linear`, `cobb-douglas` or `leontief`.
    #[arg(long, default_value = "0.5", allow_hyphen_values = true)]
    alpha: CesSpec,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (default: <out-dir>/market.json).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Store the context vectors instead of regenerating them from the seed.
    #[arg(long)]
    contexts: bool,
}

/// Solver settings shared by `run` and `sweep`. Unset flags keep the
/// method's defaults.
#[derive(Args, Clone, Default)]
struct SolverFlags {
    #[arg(long)]
    epochs: Option<usize>,
    /// Inner iterations per epoch (K for FCNet, K_b for EG).
    #[arg(long)]
    inner_iters: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    /// Adam learning rate (FCNet) or gradient step size (EG).
    #[arg(long)]
    lr: Option<f64>,
    /// Half the number of buyers per FCNet minibatch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Hidden layers of the allocation network.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Seed for network initialization and sampling.
    #[arg(long)]
    train_seed: Option<u64>,
    /// Disable early stopping of the EG solvers.
    #[arg(long)]
    no_early_stop: bool,
}

impl SolverFlags {
    fn train_config(&self, base: TrainConfig) -> TrainConfig {
        let mut c = base;
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.inner_iters {
            c.inner_iters = v;
        }
        if let Some(v) = self.rho {
            c.rho = v;
        }
        if let Some(v) = self.lr {
            c.optimizer.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.depth {
            c.depth = v;
        }
        if let Some(v) = self.width {
            c.width = v;
        }
        if let Some(v) = self.train_seed {
            c.seed = v;
        }
        c
    }

    fn eg_config(&self, base: EgConfig) -> EgConfig {
        let mut c = base;
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.inner_iters {
            c.inner_iters = v;
        }
        if let Some(v) = self.rho {
            c.rho = v;
        }
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if self.no_early_stop {
            c.early_stop = None;
        }
        c
    }

    fn apply(&self, config: MethodConfig) -> MethodConfig {
        match config {
            MethodConfig::Naive => MethodConfig::Naive,
            MethodConfig::Eg(c) => MethodConfig::Eg(self.eg_config(c)),
            MethodConfig::EgM(c) => MethodConfig::EgM(self.eg_config(c)),
            MethodConfig::Fcnet(c) => MethodConfig::Fcnet(self.train_config(c)),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Market JSON written by `generate`.
    #[arg(long)]
    market: PathBuf,
    /// naive, eg, eg-m or fcnet.
    #[arg(long)]
    method: Method,
    /// JSON file with the method's settings (an EG config or a training config).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: SolverFlags,
    /// Artifact directory (default: <out-dir>/<method>-<config hash>).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "naive,eg-m,fcnet")]
    methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "4096")]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "5")]
    m: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.5", allow_hyphen_values = true)]
    alpha: Vec<CesSpec>,
    #[arg(long, value_delimiter = ',', default_value = "normal")]
    dist: Vec<ContextDistribution>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    flags: SolverFlags,
    /// Output CSV (default: <out-dir>/sweep.csv).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    market: PathBuf,
    /// Candidate JSON with `allocation` and `prices`.
    #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
    candidate: Option<PathBuf>,
    /// Network checkpoint with multipliers; the candidate is read off the network.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write the report as JSON here.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Fail with exit code 4 if the Nash gap exceeds this.
    #[arg(long)]
    max_ng: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Quick,
    Full,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, value_enum, default_value = "quick")]
    profile: ProfileArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Run only these properties.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    /// Write a JUnit-style XML report here.
    #[arg(long)]
    junit: Option<PathBuf>,
}

/// An error and the exit code it maps to.
struct Failure {
    code: u8,
    error: Error,
}

impl Failure {
    fn input(error: Error) -> Self {
        Failure { code: EXIT_INVALID, error }
    }

    /// Input error with the offending path in the message.
    fn at(path: &Path, error: Error) -> Self {
        let error = match error {
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))),
            other => other,
        };
        Failure::input(error)
    }

    fn solver(error: Error) -> Self {
        let code = match error {
            Error::InvalidArgument(_) => EXIT_INVALID,
            Error::OracleFailure(_) => EXIT_CERTIFICATION,
            _ => EXIT_SOLVER,
        };
        Failure { code, error }
    }
}

type CliResult = Result<u8, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(args) => generate(&cli.out_dir, args),
        Command::Run(args) => run(&cli.out_dir, args),
        Command::Sweep(args) => sweep(&cli.out_dir, args),
        Command::Evaluate(args) => evaluate(args),
        Command::Check(args) => check(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure { code, error }) => {
            eprintln!("error: {error}");
            if let Error::SolverAborted { history, .. } = &error {
                eprintln!("{}", history.curve_csv_string());
            }
            ExitCode::from(code)
        }
    }
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Failure::input(e.into())),
        _ => Ok(()),
    }
}

fn generate(out_dir: &Path, args: &GenerateArgs) -> CliResult {
    let market = Market::generate(args.n, args.m, args.k, args.dist, args.alpha, args.seed).map_err(Failure::input)?;
    let path = args.output.clone().unwrap_or_else(|| out_dir.join("market.json"));
    ensure_parent(&path)?;
    harness::save_market(&path, &market, args.contexts).map_err(Failure::input)?;
    println!(
        "n={} m={} k={} dist={} alpha={} seed={} -> {}",
        market.n(),
        market.m(),
        market.k(),
        market.dist().short_name(),
        market.ces(),
        market.seed(),
        path.display()
    );
    Ok(0)
}

fn method_config(market: &Market, args: &RunArgs) -> Result<MethodConfig, Failure> {
    let base = MethodConfig::defaults(args.method, market, &TrainConfig::default());
    let base = match &args.config {
        None => base,
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::at(path, e.into()))?;
            let parsed = match args.method {
                Method::Naive => Ok(MethodConfig::Naive),
                Method::Eg => serde_json::from_str(&text).map(MethodConfig::Eg),
                Method::EgM => serde_json::from_str(&text).map(MethodConfig::EgM),
                Method::Fcnet => serde_json::from_str(&text).map(MethodConfig::Fcnet),
            };
            parsed.map_err(|e| Failure::input(e.into()))?
        }
    };
    Ok(args.flags.apply(base))
}

fn print_report(report: &MetricsReport) {
    let rows = MetricsReport::CSV_COLUMNS.iter().zip(report.csv_fields());
    for (name, value) in rows {
        println!("  {name:<18} {}", if value.is_empty() { "-" } else { &value });
    }
}

fn run(out_dir: &Path, args: &RunArgs) -> CliResult {
    let market = harness::load_market(&args.market).map_err(|e| Failure::at(&args.market, e))?;
    let config = method_config(&market, args)?;
    let output = harness::run(&market, &config).map_err(Failure::solver)?;
    let dir = args
        .output
        .clone()
        .unwrap_or_else(|| out_dir.join(format!("{}-{}", output.record.method, output.record.config_hash)));
    let record = harness::write_artifacts(&dir, &output).map_err(Failure::input)?;
    println!(
        "{} on n={} m={} alpha={}: {} epochs, train {:.3}s, evaluate {:.3}s",
        record.method, record.n, record.m, record.alpha, record.epochs, record.train_seconds, record.eval_seconds
    );
    print_report(&record.report);
    println!("artifacts in {}", dir.display());
    Ok(0)
}

fn sweep(out_dir: &Path, args: &SweepArgs) -> CliResult {
    let train = args.flags.train_config(TrainConfig::default());
    let spec = SweepSpec {
        ns: args.n.clone(),
        ms: args.m.clone(),
        alphas: args.alpha.clone(),
        dists: args.dist.clone(),
        methods: args.methods.clone(),
        k: args.k,
        seed: args.seed,
        train,
    };
    let path = args.output.clone().unwrap_or_else(|| out_dir.join("sweep.csv"));
    ensure_parent(&path)?;
    let flags = args.flags.clone();
    let rows = harness::sweep_with(
        &spec,
        |config| flags.apply(config),
        |row| match &row.error {
            None => println!(
                "{:<6} n={:<8} m={:<3} alpha={:<14} {:<12} ng={:.3e} {:.2}s",
                row.method.to_string(),
                row.n,
                row.m,
                row.alpha.to_string(),
                row.dist.short_name(),
                row.ng.unwrap_or(f64::NAN),
                row.seconds
            ),
            Some(e) => println!("{:<6} n={:<8} m={:<3} alpha={} failed: {e}", row.method, row.n, row.m, row.alpha),
        },
    );
    let file = fs::File::create(&path).map_err(|e| Failure::input(e.into()))?;
    harness::write_sweep_csv(&rows, file).map_err(Failure::input)?;
    println!("{} rows -> {}", rows.len(), path.display());
    Ok(0)
}

fn evaluate(args: &EvaluateArgs) -> CliResult {
    let market = harness::load_market(&args.market).map_err(|e| Failure::at(&args.market, e))?;
    let candidate = match (&args.candidate, &args.checkpoint) {
        (Some(path), _) => harness::load_candidate(path).map_err(|e| Failure::at(path, e))?,
        (None, Some(path)) => {
            let checkpoint = Checkpoint::load(path).map_err(|e| Failure::at(path, e))?;
            harness::checkpoint_candidate(&market, &checkpoint).map_err(Failure::input)?
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let report = metrics::evaluate(&market, &candidate).map_err(Failure::input)?;
    print_report(&report);
    if let Some(path) = &args.output {
        ensure_parent(path)?;
        let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::input(e.into()))?;
        fs::write(path, text + "\n").map_err(|e| Failure::input(e.into()))?;
    }
    match args.max_ng {
        Some(limit) if report.ng.is_nan() || report.ng > limit => {
            eprintln!("Nash gap {:e} exceeds {limit:e}", report.ng);
            Ok(EXIT_CERTIFICATION)
        }
        _ => Ok(0),
    }
}

fn check(args: &CheckArgs) -> CliResult {
    let profile = match args.profile {
        ProfileArg::Quick => Profile::Quick,
        ProfileArg::Full => Profile::Full,
    };
    let outcomes = if args.only.is_empty() {
        properties::run_all(args.seed, profile)
    } else {
        let mut picked = Vec::new();
        for name in &args.only {
            let outcome = properties::run_one(name, args.seed, profile)
                .ok_or_else(|| Failure::input(Error::InvalidArgument(format!("unknown property {name:?}"))))?;
            picked.push(outcome);
        }
        picked
    };
    print!("{}", properties::summary(&outcomes));
    for o in outcomes.iter().filter(|o| !o.passed()) {
        if let Some(w) = &o.witness {
            println!("witness for {}: {w}", o.name);
        }
    }
    if let Some(path) = &args.junit {
        ensure_parent(path)?;
        let file = fs::File::create(path).map_err(|e| Failure::input(e.into()))?;
        properties::write_junit(&outcomes, file).map_err(Failure::input)?;
    }
    Ok(if outcomes.iter().all(|o| o.passed()) { 0 } else { EXIT_CERTIFICATION })
}

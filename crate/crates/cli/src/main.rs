use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sparseproj::harness::{
    pivot_csv, run_experiment, write_jsonl, BenchParams, DensityParams, ExperimentParams, ExperimentSpec, PortfolioParams,
    QuantumParams,
};
use sparseproj::oracle::{certify, gshp_wrong_seed, oracle_project_with_budget, DEFAULT_BUDGET};
use sparseproj::{gshp, gssp, ConstraintSpec};

const THREADS_ENV: &str = "SPARSEPROJ_THREADS";

#[derive(Parser, Debug)]
#[command(name = "sparseproj", version, about = "Sparse simplex/hyperplane projections and experiments")]
#[command(args_override_self = true)]
struct Cli {
    /// File of `key=value` lines supplying default flags; the command line wins.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default from SPARSEPROJ_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Project a vector read from a single-column CSV.
    Project(ProjectArgs),
    /// Exhaustive projection over all supports of size k.
    Oracle(OracleArgs),
    /// Tomography sweep over the number of Pauli measurements.
    Quantum(QuantumArgs),
    /// Kernel density sweep over the sparsity level.
    Density(DensityArgs),
    /// Sparse regression sweep over the number of measurements.
    Portfolio(PortfolioArgs),
    /// Projection runtime versus dimension.
    Bench(BenchArgs),
    /// Check the greedy projectors against the exhaustive oracle.
    Selftest(SelftestArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SetKind {
    Simplex,
    Hyperplane,
}

#[derive(Args, Debug)]
struct VectorArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    set: SetKind,
    #[arg(long, allow_hyphen_values = true)]
    lambda: f64,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct ProjectArgs {
    #[command(flatten)]
    vector: VectorArgs,
    /// Output CSV; a JSON summary is written next to it.
    #[arg(long)]
    output: PathBuf,
    /// Project onto the full set, ignoring --k.
    #[arg(long)]
    convex_only: bool,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[command(flatten)]
    vector: VectorArgs,
    #[arg(long, default_value_t = DEFAULT_BUDGET as u64)]
    budget: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct OutputArgs {
    /// JSON-lines records (stdout when absent).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Grid x method table of medians.
    #[arg(long)]
    pivot: Option<PathBuf>,
    #[arg(long)]
    pivot_metric: Option<String>,
    /// Omit wall-clock fields so repeated runs are byte-identical.
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated subset of methods.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
}

#[derive(Args, Debug)]
struct QuantumArgs {
    #[command(flatten)]
    out: OutputArgs,
    #[arg(long)]
    qubits: Option<u32>,
    #[arg(long)]
    rank: Option<usize>,
    /// Measurement counts as multiples of d*r.
    #[arg(long, value_delimiter = ',')]
    m_multiples: Vec<f64>,
    /// Measurement SNR in dB; noiseless when absent.
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    qubit_cap: Option<u32>,
    /// 8 qubits at 30 dB.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Args, Debug)]
struct DensityArgs {
    #[command(flatten)]
    out: OutputArgs,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
}

#[derive(Args, Debug)]
struct PortfolioArgs {
    #[command(flatten)]
    out: OutputArgs,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Measurement counts as fractions of p.
    #[arg(long, value_delimiter = ',')]
    m_fractions: Vec<f64>,
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
    /// Single-column CSV used instead of the baseline as the starting point.
    #[arg(long)]
    warm_start: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    out: OutputArgs,
    #[arg(long, value_delimiter = ',')]
    dims: Vec<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 2000)]
    trials: usize,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}

/// Inserts the flags of a `--config` file right after the subcommand, so
/// explicit flags given later on the command line override them.
fn expand_config(args: Vec<String>) -> anyhow::Result<Vec<String>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else if a == "--config" {
            path = Some(args.get(i + 1).cloned().ok_or_else(|| anyhow!("--config needs a path"))?);
        }
    }
    let Some(path) = path else { return Ok(args) };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| anyhow!("{path}:{}: expected key=value", n + 1))?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim();
        if key == "config" {
            continue;
        }
        match value {
            "true" => extra.push(format!("--{key}")),
            "false" => {}
            _ => extra.push(format!("--{key}={value}")),
        }
    }
    let subcommands = ["project", "oracle", "quantum", "density", "portfolio", "bench", "selftest"];
    let position = args.iter().position(|a| subcommands.contains(&a.as_str()));
    let mut out = args.clone();
    match position {
        Some(p) => {
            out.splice(p + 1..p + 1, extra);
        }
        None => out.extend(extra),
    }
    Ok(out)
}

fn configure_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let threads = match flag {
        Some(t) => Some(t),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().with_context(|| format!("{THREADS_ENV}={v} is not a count"))?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(anyhow!("thread count must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().context("configuring worker pool")?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Project(a) => cmd_project(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Quantum(a) => cmd_quantum(cli.seed, a),
        Command::Density(a) => cmd_density(cli.seed, a),
        Command::Portfolio(a) => cmd_portfolio(cli.seed, a),
        Command::Bench(a) => cmd_bench(cli.seed, a),
        Command::Selftest(a) => cmd_selftest(cli.seed, a),
    }
}

fn read_column(path: &Path) -> anyhow::Result<Vec<f64>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut values = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v: f64 = t.parse().with_context(|| format!("{}:{}: not a number: {t}", path.display(), n + 1))?;
        values.push(v);
    }
    Ok(values)
}

/// Writes through a temporary file in the destination directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn sparse_spec(v: &VectorArgs, convex_only: bool) -> anyhow::Result<ConstraintSpec> {
    Ok(match (v.set, convex_only) {
        (SetKind::Simplex, true) => ConstraintSpec::SimplexConvex { lambda: v.lambda },
        (SetKind::Hyperplane, true) => ConstraintSpec::HyperplaneConvex { lambda: v.lambda },
        (set, false) => {
            let k = v.k.ok_or_else(|| anyhow!("--k is required unless --convex-only is given"))?;
            match set {
                SetKind::Simplex => ConstraintSpec::SimplexSparse { k, lambda: v.lambda },
                SetKind::Hyperplane => ConstraintSpec::HyperplaneSparse { k, lambda: v.lambda },
            }
        }
    })
}

fn csv_column(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v}\n")).collect()
}

fn cmd_project(a: &ProjectArgs) -> Result<(), Failure> {
    let w = read_column(&a.vector.input)?;
    let spec = sparse_spec(&a.vector, a.convex_only)?;
    let out = spec.project(&w).map_err(|e| anyhow!("{e}"))?;
    write_atomic(&a.output, csv_column(&out.beta.to_dense()).as_bytes())?;
    let summary = serde_json::json!({
        "spec": spec,
        "support": out.beta.support(),
        "tau": out.tau,
        "distance_sq": out.distance_sq,
        "objective": out.objective,
    });
    let mut sidecar = a.output.clone().into_os_string();
    sidecar.push(".json");
    write_atomic(Path::new(&sidecar), format!("{}\n", serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)?).as_bytes())?;
    Ok(())
}

fn cmd_oracle(a: &OracleArgs) -> Result<(), Failure> {
    let w = read_column(&a.vector.input)?;
    let spec = sparse_spec(&a.vector, false)?;
    let started = Instant::now();
    let exact = oracle_project_with_budget(&w, spec, u128::from(a.budget)).map_err(|e| anyhow!("{e}"))?;
    let oracle_ms = started.elapsed().as_secs_f64() * 1e3;
    let greedy = spec.project(&w).map_err(|e| anyhow!("{e}"))?;
    let gap = (greedy.distance_sq - exact.best_distance_sq).abs();
    let report = serde_json::json!({
        "spec": spec,
        "support": exact.best_support,
        "beta": exact.best_beta,
        "distance_sq": exact.best_distance_sq,
        "objective": exact.best_objective,
        "enumerated": exact.enumerated.to_string(),
        "greedy_distance_sq": greedy.distance_sq,
        "agrees": gap <= 1e-9 * (1.0 + exact.best_distance_sq),
        "oracle_ms": oracle_ms,
    });
    let text = format!("{}\n", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?);
    match &a.output {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run_and_emit(mut spec: ExperimentSpec, seed: u64, out: &OutputArgs, default_metric: &str) -> Result<(), Failure> {
    spec.seed = seed;
    spec.timing = !out.no_timing;
    if let Some(t) = out.trials {
        spec.trials = t;
    }
    spec.methods = out.methods.clone();
    spec.validate().map_err(|e| anyhow!("{e}"))?;
    let records = run_experiment(&spec).map_err(|e| anyhow!("{e}"))?;
    let mut buf = Vec::new();
    write_jsonl(&records, &mut buf).map_err(|e| anyhow!("{e}"))?;
    match &out.output {
        Some(p) => write_atomic(p, &buf)?,
        None => std::io::stdout().write_all(&buf).map_err(anyhow::Error::from)?,
    }
    if let Some(p) = &out.pivot {
        let metric = out.pivot_metric.as_deref().unwrap_or(default_metric);
        write_atomic(p, pivot_csv(&records, metric).as_bytes())?;
    }
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} records failed", records.len());
    }
    Ok(())
}

fn cmd_quantum(seed: u64, a: &QuantumArgs) -> Result<(), Failure> {
    let mut q = QuantumParams::default();
    if a.full_scale {
        q.qubits = 8;
        q.snr_db = Some(30.0);
    }
    if let Some(v) = a.qubit_cap {
        q.qubit_cap = v;
    }
    if let Some(v) = a.qubits {
        q.qubits = v;
    }
    if q.qubits > q.qubit_cap {
        return Err(Failure::Usage(anyhow!(
            "{} qubits exceeds the cap of {}; raise --qubit-cap if you have the memory and time (d^2 = {} unknowns)",
            q.qubits,
            q.qubit_cap,
            1u64 << (2 * q.qubits.min(31))
        )));
    }
    if let Some(v) = a.rank {
        q.rank = v;
    }
    if !a.m_multiples.is_empty() {
        q.m_multiples = a.m_multiples.clone();
    }
    if a.snr_db.is_some() {
        q.snr_db = a.snr_db;
    }
    if let Some(v) = a.max_iters {
        q.max_iters = v;
    }
    let mut spec = ExperimentSpec::quantum();
    spec.params = ExperimentParams::Quantum(q);
    run_and_emit(spec, seed, &a.out, "rel_error")
}

fn cmd_density(seed: u64, a: &DensityArgs) -> Result<(), Failure> {
    let mut d = DensityParams::default();
    if let Some(v) = a.n {
        d.n = v;
    }
    if let Some(v) = a.sigma {
        d.sigma = v;
    }
    if !a.ks.is_empty() {
        d.ks = a.ks.clone();
    }
    let mut spec = ExperimentSpec::density();
    spec.params = ExperimentParams::Density(d);
    run_and_emit(spec, seed, &a.out, "ise")
}

fn cmd_portfolio(seed: u64, a: &PortfolioArgs) -> Result<(), Failure> {
    let mut p = PortfolioParams::default();
    if let Some(v) = a.p {
        p.p = v;
    }
    if let Some(v) = a.k {
        p.k = v;
    }
    if !a.m_fractions.is_empty() {
        p.m_fractions = a.m_fractions.clone();
    }
    p.lambda = a.lambda;
    if let Some(path) = &a.warm_start {
        let w = read_column(path)?;
        if w.len() != p.p {
            return Err(Failure::Usage(anyhow!("warm start has {} entries, expected p = {}", w.len(), p.p)));
        }
        p.config.warm_start = Some(w);
    }
    let mut spec = ExperimentSpec::portfolio();
    spec.params = ExperimentParams::Portfolio(p);
    run_and_emit(spec, seed, &a.out, "rel_error")
}

fn cmd_bench(seed: u64, a: &BenchArgs) -> Result<(), Failure> {
    let mut b = BenchParams::default();
    if !a.dims.is_empty() {
        b.dims = a.dims.clone();
    }
    if let Some(v) = a.k {
        b.k = v;
    }
    if let Some(v) = a.repeats {
        b.repeats = v;
    }
    let mut spec = ExperimentSpec::projection_bench();
    spec.params = ExperimentParams::ProjectionBench(b);
    run_and_emit(spec, seed, &a.out, "median_ms")
}

fn cmd_selftest(seed: u64, a: &SelftestArgs) -> Result<(), Failure> {
    if a.trials == 0 {
        return Err(Failure::Usage(anyhow!("--trials must be at least 1")));
    }
    let hyperplane = if a.inject_fault { gshp_wrong_seed } else { gshp };
    let started = Instant::now();
    let outcomes = certify(a.trials, seed, gssp, hyperplane).map_err(|e| anyhow!("{e}"))?;
    let mut first_failure = None;
    for o in &outcomes {
        println!("{} {} ({} checked, {} failures)", if o.passed() { "PASS" } else { "FAIL" }, o.name, o.checked, o.failures);
        if !o.passed() && first_failure.is_none() {
            first_failure = Some(o);
        }
    }
    println!("{} instances in {:.1} s", a.trials, started.elapsed().as_secs_f64());
    match first_failure {
        None => Ok(()),
        Some(o) => {
            let detail = match &o.first_counterexample {
                Some(c) => format!(
                    "first counterexample for '{}': w = {:?}, spec = {:?}, greedy distance^2 = {}, oracle distance^2 = {}",
                    o.name, c.w, c.spec, c.greedy_distance_sq, c.oracle_distance_sq
                ),
                None => format!("property '{}' failed", o.name),
            };
            Err(Failure::Check(detail))
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use deltacert::baseline::{linear_network, model_based_certify};
use deltacert::certify::{complexity_csv, complexity_report, compose, SubsystemCertificate};
use deltacert::dynamics::description::NetworkDescription;
use deltacert::dynamics::{divergence_series, random_initial_pair, NetworkDef};
use deltacert::lipschitz::{estimate_constants, LipschitzConfig};
use deltacert::pipeline::{run_pipeline, RunConfig};
use deltacert::sampling::{collect, load_dataset, normalize, save_dataset, SamplingScheme};
use deltacert::scenario::{solve_sop_report, LyapunovTemplate, SopConfig, SopSolution};
use deltacert::Error;

const EXIT_MARGIN: u8 = 2;
const EXIT_COMPOSITION: u8 = 3;
const EXIT_SOP: u8 = 4;
const EXIT_IO: u8 = 5;

#[derive(Parser)]
#[command(name = "deltacert", version, about = "Data-driven incremental stability certificates for networks of black-box subsystems")]
struct Cli {
    /// Worker threads for per-subsystem and sampling stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write certificates.
    Certify(CertifyArgs),
    /// Emit the distance between two trajectories as CSV.
    Simulate(SimulateArgs),
    /// Collect a dataset for one subsystem.
    Sample(SampleArgs),
    /// Solve the scenario program on a dataset.
    Solve(SolveArgs),
    /// Estimate the Lipschitz constants of a solution.
    Lipschitz(LipschitzArgs),
    /// Compose subsystem certificates over a network topology.
    Compose(ComposeArgs),
    /// Emit compositional and monolithic sample counts as CSV.
    Complexity(ComplexityArgs),
    /// Model-based certificate for a network of linear subsystems.
    Baseline(BaselineArgs),
    /// Print the default run configuration.
    Defaults,
}

#[derive(Args)]
struct NetworkArg {
    /// Network description JSON.
    #[arg(long)]
    network: PathBuf,
    /// Replace the network by a ring of this many copies of its first subsystem.
    #[arg(long)]
    m: Option<usize>,
}

impl NetworkArg {
    fn description(&self) -> anyhow::Result<NetworkDescription> {
        let desc = NetworkDescription::load(&self.network)
            .with_context(|| format!("reading {}", self.network.display()))?;
        Ok(match self.m {
            Some(m) => desc.resized_ring(m)?,
            None => desc,
        })
    }

    fn build(&self) -> anyhow::Result<NetworkDef> {
        Ok(self.description()?.build()?)
    }
}

#[derive(Args)]
struct SchemeArgs {
    /// Grid sampling with this many points per axis.
    #[arg(long, conflicts_with = "random_count")]
    points_per_axis: Option<usize>,
    /// Uniform random sampling with this many pair points.
    #[arg(long)]
    random_count: Option<usize>,
}

impl SchemeArgs {
    fn scheme(&self) -> Option<SamplingScheme> {
        match (self.points_per_axis, self.random_count) {
            (Some(points_per_axis), _) => Some(SamplingScheme::Grid { points_per_axis }),
            (None, Some(count)) => Some(SamplingScheme::UniformRandom { count }),
            (None, None) => None,
        }
    }
}

#[derive(Args)]
struct LipschitzOverrides {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    phi: Option<usize>,
    #[arg(long)]
    sigma: Option<usize>,
    #[arg(long)]
    safety_factor: Option<f64>,
}

impl LipschitzOverrides {
    fn apply(&self, cfg: &mut LipschitzConfig) {
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.phi {
            cfg.phi = v;
        }
        if let Some(v) = self.sigma {
            cfg.sigma = v;
        }
        if let Some(v) = self.safety_factor {
            cfg.safety_factor = v;
        }
    }
}

#[derive(Args)]
struct CertifyArgs {
    /// Run configuration JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    m: Option<usize>,
    /// Certify each distinct subsystem once and reuse the result.
    #[arg(long)]
    shared_dynamics: bool,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long)]
    bound: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated decay rates to try.
    #[arg(long, value_delimiter = ',')]
    gamma_grid: Option<Vec<f64>>,
    #[command(flatten)]
    lipschitz: LipschitzOverrides,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Use the plain grid dispersion instead of the conservative one.
    #[arg(long)]
    plain_epsilon: bool,
    #[arg(long)]
    test_points_per_axis: Option<usize>,
    #[arg(long)]
    max_retries: Option<usize>,
    #[arg(long)]
    validation_samples: Option<usize>,
    /// Override any config field, e.g. `sop.mu_bound=10`; the value is JSON.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    network: NetworkArg,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// Initial states are drawn from [-bound, bound]^n.
    #[arg(long, default_value_t = 250.0)]
    bound: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of independent initial pairs, one column each.
    #[arg(long, default_value_t = 1)]
    pairs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    network: NetworkArg,
    /// Position of the subsystem in the description.
    #[arg(long, default_value_t = 0)]
    subsystem: usize,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long, default_value_t = 1.0)]
    bound: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Project records onto the unit sphere before writing.
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',')]
    gamma_grid: Option<Vec<f64>>,
    /// Full scenario configuration JSON.
    #[arg(long)]
    sop_config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LipschitzArgs {
    #[command(flatten)]
    network: NetworkArg,
    #[arg(long, default_value_t = 0)]
    subsystem: usize,
    /// Scenario solution JSON.
    #[arg(long)]
    solution: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    overrides: LipschitzOverrides,
}

#[derive(Args)]
struct ComposeArgs {
    #[command(flatten)]
    network: NetworkArg,
    /// Subsystem certificate JSON files in network order.
    #[arg(long, num_args = 1.., required = true)]
    certificates: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ComplexityArgs {
    /// Subsystem shapes as `n:p`, cycled over the network.
    #[arg(long, value_delimiter = ',', default_value = "2:2")]
    dims: Vec<String>,
    #[arg(long, default_value_t = 5)]
    points_per_axis: usize,
    #[arg(long, default_value_t = 1)]
    m_from: usize,
    #[arg(long, default_value_t = 10)]
    m_to: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    network: NetworkArg,
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    #[arg(long, default_value_t = 0.99)]
    gamma_bar: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty<T: serde::Serialize>(v: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn set_path(root: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{assignment}`"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("`{key}` does not name a config field"))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| anyhow!("`{key}` does not name a config field"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn build_config(args: &CertifyArgs, jobs: Option<usize>) -> anyhow::Result<RunConfig> {
    let base = match &args.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    let mut value = serde_json::to_value(base)?;
    for s in &args.set {
        set_path(&mut value, s)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value).context("applying --set overrides")?;
    if let Some(v) = &args.network {
        cfg.network = v.clone();
    }
    if args.m.is_some() {
        cfg.m = args.m;
    }
    if args.shared_dynamics {
        cfg.shared_dynamics = true;
    }
    if let Some(s) = args.scheme.scheme() {
        cfg.sampling = s;
    }
    if let Some(v) = args.bound {
        cfg.bound = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
        cfg.lipschitz.seed = v;
    }
    if let Some(g) = &args.gamma_grid {
        cfg.sop.gamma_grid = g.clone();
    }
    args.lipschitz.apply(&mut cfg.lipschitz);
    if let Some(v) = &args.output_dir {
        cfg.output_dir = v.clone();
    }
    if args.plain_epsilon {
        cfg.conservative_epsilon = false;
    }
    if args.test_points_per_axis.is_some() {
        cfg.test_points_per_axis = args.test_points_per_axis;
    }
    if let Some(v) = args.max_retries {
        cfg.max_retries = v;
    }
    if let Some(v) = args.validation_samples {
        cfg.validation_samples = v;
    }
    if jobs.is_some() {
        cfg.jobs = jobs;
    }
    Ok(cfg)
}

fn certify(args: &CertifyArgs, jobs: Option<usize>) -> anyhow::Result<u8> {
    let cfg = build_config(args, jobs)?;
    let outcome = match run_pipeline(&cfg) {
        Ok(o) => o,
        Err(e) => {
            let _ = fs::create_dir_all(&cfg.output_dir);
            let _ = fs::write(
                cfg.output_dir.join("failure.json"),
                pretty(&serde_json::json!({
                    "stage": "config_or_io",
                    "exit_code": EXIT_IO,
                    "message": e.to_string(),
                }))?,
            );
            return Err(e.into());
        }
    };
    print!("{}", outcome.summary);
    Ok(outcome.exit_code() as u8)
}

fn simulate(args: &SimulateArgs) -> anyhow::Result<u8> {
    let net = args.network.build()?;
    if args.pairs == 0 {
        bail!("--pairs must be positive");
    }
    let series: Vec<Vec<f64>> = (0..args.pairs)
        .map(|k| {
            let (a, b) = random_initial_pair(net.n(), args.bound, args.seed + k as u64);
            divergence_series(&net, &a, &b, args.steps)
        })
        .collect::<Result<_, _>>()?;
    let mut csv = String::from("k");
    for k in 0..args.pairs {
        csv.push_str(&format!(",distance_{k}"));
    }
    csv.push('\n');
    for step in 0..=args.steps {
        csv.push_str(&step.to_string());
        for s in &series {
            csv.push_str(&format!(",{:e}", s[step]));
        }
        csv.push('\n');
    }
    emit(&csv, args.out.as_deref())?;
    Ok(0)
}

fn subsystem_at(net: &NetworkDef, index: usize) -> anyhow::Result<&deltacert::dynamics::BlackBoxSubsystem> {
    net.subsystems()
        .get(index)
        .ok_or_else(|| anyhow!("network has {} subsystems, no index {index}", net.m()))
}

fn sample(args: &SampleArgs) -> anyhow::Result<u8> {
    let net = args.network.build()?;
    let sub = subsystem_at(&net, args.subsystem)?;
    let scheme = args.scheme.scheme().unwrap_or(SamplingScheme::Grid { points_per_axis: 5 });
    let mut ds = collect(sub, scheme, args.bound, args.seed)?;
    if args.normalize {
        ds = normalize(&ds)?;
    }
    save_dataset(&ds, &args.out)?;
    println!("{} records, sha256 {}", ds.len(), ds.content_hash());
    Ok(0)
}

fn solve(args: &SolveArgs) -> anyhow::Result<u8> {
    let mut ds = load_dataset(&args.dataset)?;
    if !ds.normalized {
        ds = normalize(&ds)?;
    }
    let mut cfg: SopConfig = match &args.sop_config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => SopConfig::default(),
    };
    if let Some(g) = &args.gamma_grid {
        cfg.gamma_grid = g.clone();
    }
    let report = solve_sop_report(&ds, &LyapunovTemplate::full_quadratic(ds.n), &cfg)?;
    for g in &report.per_gamma {
        eprintln!("gamma {}: {:?} objective {:?}", g.gamma, g.status, g.objective);
    }
    emit(&pretty(&report.solution)?, args.out.as_deref())?;
    Ok(0)
}

fn lipschitz(args: &LipschitzArgs) -> anyhow::Result<u8> {
    let net = args.network.build()?;
    let sub = subsystem_at(&net, args.subsystem)?;
    let sol: SopSolution = serde_json::from_str(&fs::read_to_string(&args.solution)?)?;
    let mut cfg = LipschitzConfig {
        seed: args.seed,
        ..LipschitzConfig::default()
    };
    args.overrides.apply(&mut cfg);
    let est = estimate_constants(&sol, sub, &cfg)?;
    print!("{}", pretty(&est)?);
    Ok(0)
}

fn compose_cmd(args: &ComposeArgs) -> anyhow::Result<u8> {
    let net = args.network.build()?;
    let certs = args
        .certificates
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_str::<SubsystemCertificate>(&text)?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let nc = compose(&certs, net.topology())?;
    emit(&pretty(&nc)?, args.out.as_deref())?;
    Ok(0)
}

fn parse_dims(spec: &[String]) -> anyhow::Result<Vec<(usize, usize)>> {
    spec.iter()
        .map(|s| {
            let (n, p) = s.split_once(':').ok_or_else(|| anyhow!("shape `{s}` is not n:p"))?;
            Ok((n.trim().parse()?, p.trim().parse()?))
        })
        .collect()
}

fn complexity(args: &ComplexityArgs) -> anyhow::Result<u8> {
    let rows = complexity_report(&parse_dims(&args.dims)?, args.points_per_axis, args.m_from..=args.m_to)?;
    emit(&complexity_csv(&rows), args.out.as_deref())?;
    Ok(0)
}

fn baseline(args: &BaselineArgs) -> anyhow::Result<u8> {
    let (subs, topo) = linear_network(&args.network.description()?)?;
    let nc = model_based_certify(&subs, &topo, args.theta, args.gamma_bar)?;
    emit(&pretty(&nc)?, args.out.as_deref())?;
    Ok(0)
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::SopInfeasible(_)) => EXIT_SOP,
        Some(Error::FailingCertificate { .. }) => EXIT_MARGIN,
        Some(Error::CompositionRefused { .. }) => EXIT_COMPOSITION,
        _ => EXIT_IO,
    }
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    match &cli.command {
        Command::Certify(a) => certify(a, cli.jobs),
        Command::Simulate(a) => simulate(a),
        Command::Sample(a) => sample(a),
        Command::Solve(a) => solve(a),
        Command::Lipschitz(a) => lipschitz(a),
        Command::Compose(a) => compose_cmd(a),
        Command::Complexity(a) => complexity(a),
        Command::Baseline(a) => baseline(a),
        Command::Defaults => {
            print!("{}", pretty(&RunConfig::default())?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .with_writer(std::io::stderr)
        .init();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_IO);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

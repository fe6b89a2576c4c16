use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mmpaxos::bench::{self, metrics, Experiment, Target, DEFAULT_REPLACE_AFTER_MS};
use mmpaxos::core::{AcceptorMutation, GcMode, LeaderOptions, MatchmakerMutation, NodeId, Timing};
use mmpaxos::runtime::{cluster::view_for, serve, ServeOptions, SyncPolicy};
use mmpaxos::sim::corpus::Corpus;
use mmpaxos::sim::explore::{explore, Mutants, Scenario};
use mmpaxos::sim::schedule::Schedule;
use mmpaxos::sim::topology::{ClusterParams, Topology};
use mmpaxos::sim::{Simulator, TraceMode};

#[derive(Parser)]
#[command(name = "mmpaxos", version, about = "Matchmaker MultiPaxos: simulator, model checker, node runtime and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulator schedule and check it for safety violations.
    Sim(SimArgs),
    /// Check many random schedules.
    Corpus(CorpusArgs),
    /// Exhaustively explore a small single-decree scenario.
    Explore(ExploreArgs),
    /// Write a cluster view file for a standard layout on one host.
    InitView(InitViewArgs),
    /// Run one node described by a cluster view file.
    Serve(ServeArgs),
    /// Run a timed experiment and write windowed metrics as CSV.
    Bench(BenchArgs),
    /// Compare two phases of a metrics CSV.
    Compare(CompareArgs),
}

#[derive(Args)]
struct LayoutArgs {
    #[arg(long, default_value_t = 1)]
    f: usize,
    #[arg(long, default_value_t = 2)]
    proposers: usize,
    #[arg(long, default_value_t = 2)]
    clients: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mutant {
    /// Acceptors vote in rounds below their promise.
    Acceptor,
    /// Matchmakers accept rounds out of order.
    Matchmaker,
    /// Garbage collection without its safety checks.
    Gc,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    layout: LayoutArgs,
    /// Schedule file in TOML; a random schedule from the seed otherwise.
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    duration: u64,
    #[arg(long, default_value_t = 50)]
    reconfig_every: u64,
    #[arg(long)]
    mutant: Option<Mutant>,
    /// Write the event trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Print the schedule that was run.
    #[arg(long)]
    print_schedule: bool,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long, default_value_t = 10_000)]
    count: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long, default_value_t = 400)]
    duration: u64,
    #[arg(long, default_value_t = 50)]
    reconfig_every: u64,
    #[arg(long)]
    mutant: Option<Mutant>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioName {
    SingleDecree,
    Fast,
}

#[derive(Args)]
struct ExploreArgs {
    #[arg(long, value_enum, default_value = "single-decree")]
    scenario: ScenarioName,
    #[arg(long, default_value_t = 10)]
    depth: u32,
    /// Give up after this many states.
    #[arg(long, default_value_t = 50_000_000)]
    budget: u64,
    #[arg(long)]
    mutant: Option<Mutant>,
}

#[derive(Args)]
struct InitViewArgs {
    #[command(flatten)]
    layout: LayoutArgs,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Node n listens on base_port + n.
    #[arg(long, default_value_t = 20_000)]
    base_port: u16,
    #[arg(long, default_value = "view.toml")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    view: PathBuf,
    #[arg(long)]
    id: u32,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    #[command(flatten)]
    opts: OptFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop after this many seconds; run until killed otherwise.
    #[arg(long)]
    seconds: Option<u64>,
}

#[derive(Args, Clone, Copy)]
struct OptFlags {
    /// Serve commands in the old round while matchmaking (on by default).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    proactive: bool,
    /// Skip Phase 1 waits when the previous round allows it (on by default).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    bypass: bool,
    /// Garbage-collect old configurations (on by default).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    gc: bool,
    /// Send Phase2A to a single quorum.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    thrifty: bool,
}

impl OptFlags {
    fn options(self) -> LeaderOptions {
        LeaderOptions {
            proactive: self.proactive,
            bypass: self.bypass,
            gc: if self.gc { GcMode::Guarded } else { GcMode::Off },
            thrifty: self.thrifty,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    /// One of: reconfiguration, matchmaker-reconfiguration, ablation,
    /// leader-failure.
    experiment: String,
    #[arg(long, default_value_t = 1)]
    f: usize,
    #[arg(long, default_value_t = 8)]
    clients: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "sim")]
    target: TargetArg,
    #[command(flatten)]
    opts: OptFlags,
    /// Wait between a failure and the reconfiguration that replaces it.
    #[arg(long, default_value_t = DEFAULT_REPLACE_AFTER_MS)]
    replace_after_ms: u64,
    #[arg(long)]
    window_ms: Option<f64>,
    #[arg(long)]
    step_ms: Option<f64>,
    #[arg(long, default_value = "metrics.csv")]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Sim,
    Net,
}

#[derive(Args)]
struct CompareArgs {
    csv: PathBuf,
    /// First phase as START..END in ms.
    #[arg(long)]
    a: String,
    /// Second phase as START..END in ms.
    #[arg(long)]
    b: String,
    #[arg(long, default_value_t = 1000.0)]
    window_ms: f64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Sim(a) => sim(a),
        Command::Corpus(a) => corpus(a),
        Command::Explore(a) => explore_cmd(a),
        Command::InitView(a) => init_view(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Compare(a) => compare(a),
    }
}

fn params(layout: &LayoutArgs, mutant: Option<Mutant>) -> ClusterParams {
    let mut p = ClusterParams {
        f: layout.f,
        proposers: layout.proposers,
        clients: layout.clients,
        seed: layout.seed,
        ..ClusterParams::default()
    };
    match mutant {
        Some(Mutant::Acceptor) => p.acceptor_mutation = AcceptorMutation::AcceptLowerRounds,
        Some(Mutant::Matchmaker) => p.matchmaker_mutation = MatchmakerMutation::NonMonotone,
        Some(Mutant::Gc) => p.opts.gc = GcMode::Unguarded,
        None => {}
    }
    p
}

fn sim(a: SimArgs) -> Result<()> {
    let topo = Topology::standard(&params(&a.layout, a.mutant));
    let schedule = match &a.schedule {
        Some(path) => Schedule::from_toml(&fs::read_to_string(path)?).with_context(|| format!("reading {}", path.display()))?,
        None => Schedule::random(a.layout.seed, &topo, a.duration, a.reconfig_every),
    };
    if a.print_schedule {
        println!("{}", schedule.to_toml());
    }
    let mode = if a.trace.is_some() { TraceMode::All } else { TraceMode::None };
    let outcome = Simulator::new(&topo, schedule).with_trace(mode).run();
    if let Some(path) = &a.trace {
        outcome.trace.dump(BufWriter::new(File::create(path)?))?;
    }
    let s = &outcome.stats;
    println!("delivered {} dropped {} duplicated {} ticks {}", s.delivered, s.dropped, s.duplicated, s.ticks);
    for v in &outcome.violations {
        println!("violation: {v}");
    }
    if !outcome.violations.is_empty() {
        bail!("{} safety violations", outcome.violations.len());
    }
    Ok(())
}

fn corpus(a: CorpusArgs) -> Result<()> {
    let layout = LayoutArgs {
        f: 1,
        proposers: 2,
        clients: 2,
        seed: 0,
    };
    let c = Corpus {
        params: params(&layout, a.mutant),
        duration: a.duration,
        reconfig_every: a.reconfig_every,
    };
    let start = Instant::now();
    let report = c.run(a.first_seed..a.first_seed + a.count);
    println!("{} schedules in {:.1?}, {} failing", report.schedules, start.elapsed(), report.failures.len());
    for f in report.failures.iter().take(10) {
        println!("seed {}: {}", f.seed, f.violations[0]);
    }
    if !report.failures.is_empty() {
        bail!("safety violations found");
    }
    Ok(())
}

fn explore_cmd(a: ExploreArgs) -> Result<()> {
    let mut m = Mutants::default();
    match a.mutant {
        Some(Mutant::Acceptor) => m.acceptor = AcceptorMutation::AcceptLowerRounds,
        Some(Mutant::Matchmaker) => m.matchmaker = MatchmakerMutation::NonMonotone,
        Some(Mutant::Gc) => bail!("the explorer has no garbage collection"),
        None => {}
    }
    let scenario = match a.scenario {
        ScenarioName::SingleDecree => Scenario::single_decree(m),
        ScenarioName::Fast => Scenario::fast(m),
    };
    let start = Instant::now();
    let result = explore(&scenario, a.depth, a.budget);
    println!(
        "{} states to depth {} in {:.1?}{}",
        result.states,
        a.depth,
        start.elapsed(),
        if result.partial { " (budget exhausted)" } else { "" }
    );
    match result.counterexample {
        Some(cx) => {
            for (i, step) in cx.steps.iter().enumerate() {
                println!("{:>3}. {step:?}", i + 1);
            }
            bail!("counterexample: {}", cx.violation)
        }
        None => Ok(()),
    }
}

fn init_view(a: InitViewArgs) -> Result<()> {
    let topo = Topology::standard(&params(&a.layout, None));
    let addrs: BTreeMap<NodeId, SocketAddr> = topo
        .specs
        .iter()
        .map(|s| {
            let port = a.base_port.checked_add(s.id().0 as u16).ok_or_else(|| anyhow!("port overflow"))?;
            Ok((s.id(), SocketAddr::new(a.host, port)))
        })
        .collect::<Result<_>>()?;
    view_for(&topo, &addrs).store(&a.out)?;
    println!("wrote {} with {} nodes", a.out.display(), addrs.len());
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let view = mmpaxos::runtime::ClusterView::load(&a.view)?;
    let id = NodeId(a.id);
    let spec = view
        .spec_for(id, a.opts.options(), Timing::NET, a.seed)
        .ok_or_else(|| anyhow!("node {id} is not in {}", a.view.display()))?;
    let addr = view.addr(id).expect("listed nodes have addresses");
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    let sync = match spec.role() {
        "replica" => SyncPolicy::Batched(64),
        _ => SyncPolicy::EveryWrite,
    };
    let opts = ServeOptions {
        data_dir: Some(a.data_dir),
        sync,
        view_path: Some(a.view),
        ..ServeOptions::default()
    };
    log::info!("{} {id} listening on {addr}", spec.role());
    let handle = serve(spec, listener, view, opts)?;
    match a.seconds {
        Some(s) => std::thread::sleep(Duration::from_secs(s)),
        None => loop {
            std::thread::park();
        },
    }
    handle.kill();
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let mut exp = Experiment::by_name(&a.experiment, a.seed, a.replace_after_ms)
        .ok_or_else(|| anyhow!("unknown experiment {:?}; try one of {:?}", a.experiment, Experiment::NAMES))?;
    exp.f = a.f;
    exp.clients = a.clients;
    exp.opts = a.opts.options();
    if let Some(w) = a.window_ms {
        exp.window_ms = w;
    }
    if let Some(s) = a.step_ms {
        exp.step_ms = s;
    }
    let target = match a.target {
        TargetArg::Sim => Target::Sim,
        TargetArg::Net => Target::Net,
    };
    let result = bench::run_experiment(&exp, target)?;
    let rows = result.rows(exp.window_ms, exp.step_ms);
    metrics::write_csv(&rows, BufWriter::new(File::create(&a.output)?))?;
    println!("{} on {target}: {} commands, {} rows in {}", exp.name, result.samples.len(), rows.len(), a.output.display());
    println!("{:<14} {:>7} {:>10} {:>8} {:>8} {:>12}", "phase", "windows", "median_ms", "iqr_ms", "stdev_ms", "throughput");
    for p in result.summary(&exp) {
        println!(
            "{:<14} {:>7} {:>10.3} {:>8.3} {:>8.3} {:>12.1}",
            p.phase, p.windows, p.median_latency_ms, p.iqr_ms, p.stdev_ms, p.median_throughput
        );
    }
    for t in result.reconfigurations() {
        println!(
            "reconfiguration at {t:.0} ms: max latency {:.1} ms, longest gap {:.1} ms",
            result.max_latency(t, t + 1000.0),
            result.longest_gap(t, t + 1000.0)
        );
    }
    for v in &result.violations {
        println!("violation: {v}");
    }
    for n in &result.notes {
        println!("note: {n}");
    }
    if result.partial {
        bail!("partial run: some scripted steps could not be carried out");
    }
    Ok(())
}

fn phase(s: &str) -> Result<std::ops::Range<f64>> {
    let (a, b) = s.split_once("..").ok_or_else(|| anyhow!("expected START..END, got {s:?}"))?;
    Ok(a.trim().parse()?..b.trim().parse()?)
}

fn compare(a: CompareArgs) -> Result<()> {
    let rows = if a.csv.as_os_str() == "-" {
        metrics::read_csv(io::stdin())?
    } else {
        metrics::read_csv(File::open(&a.csv).with_context(|| format!("opening {}", a.csv.display()))?)?
    };
    let d = metrics::compare_windows(&rows, phase(&a.a)?, phase(&a.b)?, a.window_ms)?;
    println!("{:<18} {:>10} {:>10} {:>9}", "", "a", "b", "change");
    let line = |name: &str, x: f64, y: f64, rel: f64| println!("{name:<18} {x:>10.3} {y:>10.3} {:>8.1}%", rel * 100.0);
    line("median latency", d.a.median_latency_ms, d.b.median_latency_ms, d.median_latency);
    line("latency iqr", d.a.iqr_ms, d.b.iqr_ms, d.iqr);
    line("latency stdev", d.a.stdev_ms, d.b.stdev_ms, d.stdev);
    line("median throughput", d.a.median_throughput, d.b.median_throughput, d.median_throughput);
    Ok(())
}

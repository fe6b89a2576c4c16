//! Timed experiment scripts run against the simulator or a loopback cluster,
//! reduced to windowed metrics.

pub mod metrics;

use std::collections::BTreeSet;
use std::fmt;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use log::info;
use mmpaxos_core::{ConfigId, Configuration, Event, LeaderOptions, Message, NodeId, Node, Time, Timing};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::runtime::{LocalCluster, SyncPolicy};
use crate::sim::schedule::{Action, Schedule};
use crate::sim::topology::{ClusterParams, Topology};
use crate::sim::{Simulator, TraceMode};
use metrics::{MetricsRow, Sample};

/// Delay before a failed node is replaced by default, in ms.
pub const DEFAULT_REPLACE_AFTER_MS: u64 = 5_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BenchEvent {
    /// Moves to `2f+1` acceptors drawn from the live part of the pool.
    ReconfigureAcceptors,
    /// Moves to the next unused matchmaker set.
    ReconfigureMatchmakers,
    /// Crashes a random acceptor of the current configuration.
    FailAcceptor,
    /// Crashes a random member of the current matchmaker set.
    FailMatchmaker,
    FailLeader,
    /// Makes proposer number `index` take over.
    ElectLeader { index: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub start_ms: f64,
    pub end_ms: f64,
}

impl Phase {
    fn new(name: &str, start_ms: u64, end_ms: u64) -> Self {
        Phase {
            name: name.to_owned(),
            start_ms: start_ms as f64,
            end_ms: end_ms as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub name: String,
    pub f: usize,
    pub clients: usize,
    pub proposers: usize,
    pub duration_ms: u64,
    pub opts: LeaderOptions,
    pub seed: u64,
    /// Sorted by time.
    pub events: Vec<(u64, BenchEvent)>,
    /// Extra one-way delay per message kind; simulator only.
    pub delays: Vec<(String, u64)>,
    /// Whether followers elect themselves when the leader goes quiet.
    pub election_timeout: bool,
    pub window_ms: f64,
    pub step_ms: f64,
    pub phases: Vec<Phase>,
}

impl Experiment {
    pub const NAMES: [&'static str; 4] = ["reconfiguration", "matchmaker-reconfiguration", "ablation", "leader-failure"];

    fn base(name: &str, duration_ms: u64, seed: u64) -> Self {
        Experiment {
            name: name.to_owned(),
            f: 1,
            clients: 8,
            proposers: 2,
            duration_ms,
            opts: LeaderOptions::ALL,
            seed,
            events: Vec::new(),
            delays: Vec::new(),
            election_timeout: true,
            window_ms: 1000.0,
            step_ms: 250.0,
            phases: Vec::new(),
        }
    }

    /// Quiet for 10 s, acceptor reconfiguration every second until 20 s, an
    /// acceptor failure at 25 s and its replacement `replace_after_ms` later.
    pub fn reconfiguration(seed: u64, replace_after_ms: u64) -> Self {
        let mut e = Self::base("reconfiguration", 35_000, seed);
        e.events = (10..20).map(|s| (s * 1000, BenchEvent::ReconfigureAcceptors)).collect();
        e.events.push((25_000, BenchEvent::FailAcceptor));
        e.events.push((25_000 + replace_after_ms, BenchEvent::ReconfigureAcceptors));
        e.phases = vec![
            Phase::new("quiet", 2_000, 10_000),
            Phase::new("reconfiguring", 10_000, 20_000),
            Phase::new("failed", 25_000, 25_000 + replace_after_ms),
            Phase::new("replaced", 25_000 + replace_after_ms, 35_000),
        ];
        e
    }

    /// Matchmaker reconfiguration every second between 10 s and 20 s, a
    /// matchmaker failure at 25 s, its replacement `replace_after_ms` later
    /// and an acceptor reconfiguration at 35 s.
    pub fn matchmaker_reconfiguration(seed: u64, replace_after_ms: u64) -> Self {
        let mut e = Self::base("matchmaker-reconfiguration", 40_000, seed);
        e.events = (10..20).map(|s| (s * 1000, BenchEvent::ReconfigureMatchmakers)).collect();
        e.events.push((25_000, BenchEvent::FailMatchmaker));
        e.events.push((25_000 + replace_after_ms, BenchEvent::ReconfigureMatchmakers));
        e.events.push((35_000, BenchEvent::ReconfigureAcceptors));
        e.events.sort_by_key(|(t, _)| *t);
        e.phases = vec![
            Phase::new("quiet", 2_000, 10_000),
            Phase::new("reconfiguring", 10_000, 20_000),
            Phase::new("failed", 25_000, 25_000 + replace_after_ms),
            Phase::new("replaced", 25_000 + replace_after_ms, 40_000),
        ];
        e
    }

    /// Five acceptor reconfigurations in 20 s with `Phase1B` and `MatchB`
    /// held back by 250 ms. Max latency uses 500 ms windows and throughput
    /// 250 ms windows.
    pub fn ablation(opts: LeaderOptions, seed: u64) -> Self {
        let mut e = Self::base("ablation", 20_000, seed);
        e.opts = opts;
        e.events = (0..5).map(|k| (4_000 + 3_000 * k, BenchEvent::ReconfigureAcceptors)).collect();
        e.delays = vec![("Phase1B".to_owned(), 250), ("MatchB".to_owned(), 250)];
        e.window_ms = 500.0;
        e.step_ms = 50.0;
        e.phases = vec![Phase::new("steady", 1_000, 4_000), Phase::new("reconfiguring", 4_000, 20_000)];
        e
    }

    /// The leader fails at 7 s and a new one is elected 5 s later.
    pub fn leader_failure(seed: u64) -> Self {
        let mut e = Self::base("leader-failure", 20_000, seed);
        e.events = vec![(7_000, BenchEvent::FailLeader), (12_000, BenchEvent::ElectLeader { index: 1 })];
        e.election_timeout = false;
        e.phases = vec![
            Phase::new("before", 1_000, 7_000),
            Phase::new("leaderless", 7_000, 12_000),
            Phase::new("after", 14_000, 20_000),
        ];
        e
    }

    pub fn by_name(name: &str, seed: u64, replace_after_ms: u64) -> Option<Self> {
        Some(match name {
            "reconfiguration" => Self::reconfiguration(seed, replace_after_ms),
            "matchmaker-reconfiguration" => Self::matchmaker_reconfiguration(seed, replace_after_ms),
            "ablation" => Self::ablation(LeaderOptions::ALL, seed),
            "leader-failure" => Self::leader_failure(seed),
            _ => return None,
        })
    }

    fn matchmaker_sets_needed(&self) -> usize {
        self.events.iter().filter(|(_, e)| *e == BenchEvent::ReconfigureMatchmakers).count()
    }

    pub fn topology(&self, timing: Timing) -> Topology {
        let timing = Timing {
            election_timeout: if self.election_timeout { timing.election_timeout } else { None },
            ..timing
        };
        Topology::standard(&ClusterParams {
            f: self.f,
            proposers: self.proposers.max(1),
            clients: self.clients,
            opts: self.opts,
            timing,
            spare_matchmaker_sets: self.matchmaker_sets_needed(),
            seed: self.seed,
            ..ClusterParams::default()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// The simulator, one time unit per millisecond.
    Sim,
    /// Every node on loopback TCP in this process.
    Net,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Sim => "sim",
            Target::Net => "net",
        })
    }
}

/// What one scripted event turned into.
#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    Reconfigure(Configuration),
    ReconfigureMatchmakers(Vec<NodeId>),
    Crash(NodeId),
    Elect(NodeId),
}

/// Turns abstract events into concrete steps, tracking what has failed.
struct Script {
    topology: Topology,
    rng: ChaCha8Rng,
    config: Configuration,
    next_config: u64,
    matchmaker_set: usize,
    leader: NodeId,
    failed: BTreeSet<NodeId>,
}

impl Script {
    fn new(topology: Topology, seed: u64) -> Self {
        Script {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xbe7c),
            config: topology.initial_config.clone(),
            next_config: topology.initial_config.id().0 + 1,
            matchmaker_set: 0,
            leader: topology.proposers[0],
            failed: BTreeSet::new(),
            topology,
        }
    }

    fn step(&mut self, event: BenchEvent, observed_leader: Option<NodeId>) -> Result<Step> {
        let leader = observed_leader.unwrap_or(self.leader);
        Ok(match event {
            BenchEvent::ReconfigureAcceptors => {
                let live: Vec<NodeId> =
                    self.topology.acceptor_pool.iter().copied().filter(|a| !self.failed.contains(a)).collect();
                let n = self.topology.config_size();
                if live.len() < n {
                    bail!("only {} live acceptors left", live.len());
                }
                let chosen = live.choose_multiple(&mut self.rng, n).copied();
                self.config = Configuration::majority(ConfigId(self.next_config), chosen);
                self.next_config += 1;
                Step::Reconfigure(self.config.clone())
            }
            BenchEvent::ReconfigureMatchmakers => {
                self.matchmaker_set += 1;
                match self.topology.matchmaker_sets.get(self.matchmaker_set) {
                    Some(set) => Step::ReconfigureMatchmakers(set.clone()),
                    None => bail!("no spare matchmaker set left"),
                }
            }
            BenchEvent::FailAcceptor => self.fail(self.config.acceptors().iter().copied().collect())?,
            BenchEvent::FailMatchmaker => self.fail(self.topology.matchmaker_sets[self.matchmaker_set].clone())?,
            BenchEvent::FailLeader => {
                self.failed.insert(leader);
                Step::Crash(leader)
            }
            BenchEvent::ElectLeader { index } => {
                let Some(p) = self.topology.proposers.get(index).copied() else {
                    bail!("no proposer number {index}");
                };
                self.leader = p;
                Step::Elect(p)
            }
        })
    }

    fn fail(&mut self, members: Vec<NodeId>) -> Result<Step> {
        let live: Vec<NodeId> = members.into_iter().filter(|m| !self.failed.contains(m)).collect();
        let Some(victim) = live.choose(&mut self.rng).copied() else {
            bail!("nothing left to fail");
        };
        self.failed.insert(victim);
        Ok(Step::Crash(victim))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub experiment: String,
    pub target: Target,
    pub duration_ms: f64,
    pub samples: Vec<Sample>,
    /// When the leader buffered a command instead of proposing it at once.
    pub queued: Vec<f64>,
    /// When each scripted step took effect, in ms.
    pub steps: Vec<(f64, Step)>,
    pub violations: Vec<String>,
    /// Set when some step could not be carried out; `notes` says which.
    pub partial: bool,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSummary {
    pub phase: String,
    pub windows: usize,
    pub median_latency_ms: f64,
    pub iqr_ms: f64,
    pub stdev_ms: f64,
    pub median_throughput: f64,
}

impl RunResult {
    pub fn rows(&self, window_ms: f64, step_ms: f64) -> Vec<MetricsRow> {
        metrics::windows(&self.samples, self.duration_ms, window_ms, step_ms)
    }

    /// Per-phase medians over windows lying inside each phase.
    pub fn summary(&self, exp: &Experiment) -> Vec<PhaseSummary> {
        let rows = self.rows(exp.window_ms, exp.step_ms);
        exp.phases
            .iter()
            .map(|p| {
                let inside: Vec<&MetricsRow> = rows
                    .iter()
                    .filter(|r| r.window_start_ms >= p.start_ms && r.window_start_ms + exp.window_ms <= p.end_ms)
                    .collect();
                let col = |f: fn(&MetricsRow) -> f64| metrics::median(&inside.iter().map(|r| f(r)).collect::<Vec<_>>());
                PhaseSummary {
                    phase: p.name.clone(),
                    windows: inside.len(),
                    median_latency_ms: col(|r| r.median_ms),
                    iqr_ms: col(|r| r.iqr_ms),
                    stdev_ms: col(|r| r.stdev_ms),
                    median_throughput: col(|r| r.throughput),
                }
            })
            .collect()
    }

    /// Times at which acceptor reconfigurations were issued.
    pub fn reconfigurations(&self) -> Vec<f64> {
        self.steps.iter().filter(|(_, s)| matches!(s, Step::Reconfigure(_))).map(|(t, _)| *t).collect()
    }

    /// Largest latency among commands completing in `[from, to)`.
    pub fn max_latency(&self, from: f64, to: f64) -> f64 {
        self.samples
            .iter()
            .filter(|s| s.at_ms >= from && s.at_ms < to)
            .map(|s| s.latency_ms)
            .fold(0.0, f64::max)
    }

    /// Longest stretch inside `[from, to)` with no completed command.
    pub fn longest_gap(&self, from: f64, to: f64) -> f64 {
        let mut times: Vec<f64> = self.samples.iter().map(|s| s.at_ms).filter(|t| *t >= from && *t < to).collect();
        times.sort_by(f64::total_cmp);
        let mut prev = from;
        let mut gap: f64 = 0.0;
        for t in times {
            gap = gap.max(t - prev);
            prev = t;
        }
        gap.max(to - prev)
    }
}

pub fn run_experiment(exp: &Experiment, target: Target) -> Result<RunResult> {
    if exp.events.windows(2).any(|w| w[0].0 > w[1].0) {
        bail!("experiment events are not sorted by time");
    }
    match target {
        Target::Sim => Ok(run_sim(exp)),
        Target::Net => run_net(exp),
    }
}

fn leader_of(sim: &Simulator, proposers: &[NodeId]) -> Option<NodeId> {
    proposers
        .iter()
        .copied()
        .find(|p| matches!(sim.node(*p), Some(Node::Leader(l)) if l.is_leading()))
}

fn run_sim(exp: &Experiment) -> RunResult {
    let topology = exp.topology(Timing::SIM);
    let duration = exp.duration_ms as Time;
    let mut schedule = Schedule::quiet(exp.seed, duration);
    for (kind, extra) in &exp.delays {
        schedule = schedule.with(
            0,
            Action::Delay {
                message: kind.clone(),
                extra: *extra as Time,
                until: duration,
            },
        );
    }
    let mut sim = Simulator::new(&topology, schedule).with_trace(TraceMode::Summary);
    let mut script = Script::new(topology.clone(), exp.seed);
    let mut steps = Vec::new();
    let mut notes = Vec::new();
    for (at, event) in &exp.events {
        let at = *at as Time;
        sim.run_until(at.saturating_sub(1));
        let step = match script.step(*event, leader_of(&sim, &topology.proposers)) {
            Ok(s) => s,
            Err(e) => {
                notes.push(format!("{at} ms: {e}"));
                continue;
            }
        };
        let action = match &step {
            Step::Reconfigure(c) => Action::ReconfigureAcceptors {
                id: c.id().0,
                acceptors: c.acceptors().iter().copied().collect(),
            },
            Step::ReconfigureMatchmakers(m) => Action::ReconfigureMatchmakers { members: m.clone() },
            Step::Crash(n) => Action::Crash { node: *n },
            Step::Elect(n) => Action::ElectNow { node: *n },
        };
        sim.schedule_action(at, action);
        steps.push((at as f64, step));
    }
    sim.run_until(duration);
    let outcome = sim.finish();
    let mut samples = Vec::new();
    let mut queued = Vec::new();
    for r in &outcome.trace.records {
        match r.event {
            Event::Reply { latency, .. } => samples.push(Sample {
                at_ms: r.time as f64,
                latency_ms: latency as f64,
            }),
            Event::Queued { .. } => queued.push(r.time as f64),
            _ => {}
        }
    }
    RunResult {
        experiment: exp.name.clone(),
        target: Target::Sim,
        duration_ms: exp.duration_ms as f64,
        samples,
        queued,
        steps,
        violations: outcome.violations.iter().map(|v| v.to_string()).collect(),
        partial: !notes.is_empty(),
        notes,
    }
}

fn run_net(exp: &Experiment) -> Result<RunResult> {
    if !exp.delays.is_empty() {
        bail!("injected message delays need the simulator target");
    }
    let topology = exp.topology(Timing::NET);
    let dir = tempfile::tempdir().context("creating cluster directory")?;
    let mut cluster = LocalCluster::launch(topology.clone(), dir.path(), SyncPolicy::Batched(64))?;
    let start = Instant::now();
    let ms = |t: Time| t as f64 / 1000.0;
    // cluster time zero is launch; samples are shifted so the script starts at 0
    let offset = ms(cluster.now());
    let mut script = Script::new(topology.clone(), exp.seed);
    let mut steps = Vec::new();
    let mut notes = Vec::new();
    let mut samples = Vec::new();
    let mut queued = Vec::new();
    let drain = |cluster: &LocalCluster, samples: &mut Vec<Sample>, queued: &mut Vec<f64>| {
        for (t, _, e) in cluster.events().try_iter() {
            match e {
                Event::Reply { latency, .. } => samples.push(Sample {
                    at_ms: ms(t) - offset,
                    latency_ms: ms(latency),
                }),
                Event::Queued { .. } => queued.push(ms(t) - offset),
                _ => {}
            }
        }
    };
    for (at, event) in &exp.events {
        let due = start + Duration::from_millis(*at);
        while Instant::now() < due {
            drain(&cluster, &mut samples, &mut queued);
            std::thread::sleep(due.saturating_duration_since(Instant::now()).min(Duration::from_millis(50)));
        }
        let step = match script.step(*event, None) {
            Ok(s) => s,
            Err(e) => {
                notes.push(format!("{at} ms: {e}"));
                continue;
            }
        };
        info!("{at} ms: {step:?}");
        match &step {
            Step::Reconfigure(c) => cluster.reconfigure(c),
            Step::ReconfigureMatchmakers(m) => cluster.inject(topology.driver, Message::ReconfigureMatchmakers { members: m.clone() }),
            Step::Crash(n) => {
                if !cluster.kill(*n) {
                    notes.push(format!("{at} ms: {n} was not running"));
                }
            }
            Step::Elect(n) => cluster.inject(*n, Message::ElectNow),
        }
        steps.push((start.elapsed().as_secs_f64() * 1000.0, step));
    }
    let end = start + Duration::from_millis(exp.duration_ms);
    while Instant::now() < end {
        drain(&cluster, &mut samples, &mut queued);
        std::thread::sleep(end.saturating_duration_since(Instant::now()).min(Duration::from_millis(50)));
    }
    drain(&cluster, &mut samples, &mut queued);
    cluster.shutdown();
    samples.retain(|s| s.at_ms < exp.duration_ms as f64);
    Ok(RunResult {
        experiment: exp.name.clone(),
        target: Target::Net,
        duration_ms: exp.duration_ms as f64,
        samples,
        queued,
        steps,
        violations: Vec::new(),
        partial: !notes.is_empty(),
        notes,
    })
}

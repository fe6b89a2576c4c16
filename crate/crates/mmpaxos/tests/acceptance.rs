//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::collections::BTreeMap;
use std::time::Instant;

use mmpaxos::bench::metrics::compare_windows;
use mmpaxos::bench::{run_experiment, Experiment, RunResult, Target, DEFAULT_REPLACE_AFTER_MS};
use mmpaxos::core::client::Workload;
use mmpaxos::core::{
    merge_stop_replies, AcceptorMutation, ConfigId, Configuration, Event, GcMode, LeaderOptions, MatchmakerMutation,
    Node, NodeId, Round, Time, Timing,
};
use mmpaxos::runtime::host::replay;
use mmpaxos::sim::corpus::Corpus;
use mmpaxos::sim::explore::{explore, Mutants, Scenario};
use mmpaxos::sim::schedule::{Action, Schedule};
use mmpaxos::sim::topology::{ClusterParams, Topology};
use mmpaxos::sim::{Simulator, TraceMode};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);
type Mutant = (&'static str, fn(&mut ClusterParams));

const CORPUS_SIZE: u64 = 10_000;
const EXPLORE_DEPTH: u32 = 10;
const EXPLORE_BUDGET: u64 = 30_000_000;
/// Uniform one-unit links make a round trip two units.
const RTT: Time = 2;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_safety_corpus() -> Verdict {
    let report = Corpus::default().run(0..CORPUS_SIZE);
    match report.failures.first() {
        None => Ok(format!("{} schedules, no violations", report.schedules)),
        Some(f) => Err(format!("{} failing schedules, first seed {}: {}", report.failures.len(), f.seed, f.violations[0])),
    }
}

fn c2_exhaustive() -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, scenario) in [
        ("single-decree", Scenario::single_decree(Mutants::default())),
        ("fast", Scenario::fast(Mutants::default())),
    ] {
        let r = explore(&scenario, EXPLORE_DEPTH, EXPLORE_BUDGET);
        ok &= r.is_ok();
        let status = match (&r.counterexample, r.partial) {
            (Some(cx), _) => format!("counterexample: {}", cx.violation),
            (None, true) => "budget exhausted".to_owned(),
            (None, false) => "clean".to_owned(),
        };
        parts.push(format!("{name} depth {EXPLORE_DEPTH}: {} states, {status}", r.states));
    }
    check(ok, parts.join("; "))
}

fn c3_mutants() -> Verdict {
    let mutants: [Mutant; 3] = [
        ("acceptor accepts lower rounds", |p| p.acceptor_mutation = AcceptorMutation::AcceptLowerRounds),
        ("matchmaker non-monotone", |p| p.matchmaker_mutation = MatchmakerMutation::NonMonotone),
        ("unguarded garbage collection", |p| p.opts.gc = GcMode::Unguarded),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, apply) in mutants {
        let mut corpus = Corpus::default();
        apply(&mut corpus.params);
        match corpus.first_failure(0..CORPUS_SIZE) {
            Some(f) => parts.push(format!("{name}: caught at seed {} ({})", f.seed, f.violations[0])),
            None => {
                ok = false;
                parts.push(format!("{name}: survived {CORPUS_SIZE} schedules"));
            }
        }
    }
    check(ok, parts.join("; "))
}

/// Reconfigures at several times; a probe client's command reaches the
/// leader the moment matchmaking can finish, so the first proposal in the
/// new round shows when the new configuration became usable.
fn c4_one_round_trip() -> Verdict {
    let times: [Time; 5] = [100, 153, 207, 260, 311];
    let mut topo = Topology::standard(&ClusterParams {
        clients: 3,
        ..ClusterParams::default()
    });
    topo.add_client(NodeId(150), Workload::Script(times.iter().map(|t| (t + RTT / 2, b"probe".to_vec())).collect()), Timing::SIM);
    let mut schedule = Schedule::quiet(1, 400);
    for (i, t) in times.iter().enumerate() {
        let start = (i + 1) % 3;
        schedule = schedule.with(
            *t,
            Action::ReconfigureAcceptors {
                id: i as u64 + 1,
                acceptors: topo.acceptor_pool[start..start + 3].to_vec(),
            },
        );
    }
    let out = Simulator::new(&topo, schedule).with_trace(TraceMode::All).run();
    let mut deltas = Vec::new();
    for (i, t) in times.iter().enumerate() {
        let label = ConfigId(i as u64 + 1);
        let round = out.trace.records.iter().find_map(|r| match &r.event {
            Event::RoundConfig { round, config, .. } if config.id() == label && r.time >= *t => Some(*round),
            _ => None,
        });
        let first = round.and_then(|round| {
            out.trace
                .records
                .iter()
                .find(|r| matches!(&r.event, Event::Proposed { round: p, .. } if *p == round))
                .map(|r| r.time)
        });
        deltas.push(first.map(|f| f as i64 - *t as i64));
    }
    let ok = out.violations.is_empty() && deltas.iter().all(|d| *d == Some(RTT as i64));
    check(ok, format!("first proposal after reconfigure: {deltas:?} units, round trip {RTT}"))
}

fn c5_no_stall() -> Verdict {
    let exp = Experiment::reconfiguration(11, DEFAULT_REPLACE_AFTER_MS);
    let r = run_experiment(&exp, Target::Net).map_err(|e| format!("run failed: {e:#}"))?;
    let rows = r.rows(exp.window_ms, exp.step_ms);
    let quiet = exp.phases[0].start_ms..exp.phases[0].end_ms;
    let busy = exp.phases[1].start_ms..exp.phases[1].end_ms;
    let d = compare_windows(&rows, quiet, busy, exp.window_ms).map_err(|e| e.to_string())?;
    let queued = r.queued.iter().filter(|t| **t >= exp.phases[0].start_ms).count();
    let ok = !r.partial && d.median_latency.abs() <= 0.10 && d.median_throughput.abs() <= 0.10 && queued == 0;
    check(
        ok,
        format!(
            "median latency {:.3} -> {:.3} ms ({:+.1}%), throughput {:.0} -> {:.0}/s ({:+.1}%), {} queued{}",
            d.a.median_latency_ms,
            d.b.median_latency_ms,
            d.median_latency * 100.0,
            d.a.median_throughput,
            d.b.median_throughput,
            d.median_throughput * 100.0,
            queued,
            if r.partial { format!(", partial: {:?}", r.notes) } else { String::new() }
        ),
    )
}

struct AblationRun {
    name: &'static str,
    peaks: Vec<f64>,
    gaps: Vec<f64>,
    steady_max: f64,
}

fn ablation(name: &'static str, opts: LeaderOptions) -> Result<AblationRun, String> {
    let r: RunResult = run_experiment(&Experiment::ablation(opts, 5), Target::Sim).map_err(|e| e.to_string())?;
    if !r.violations.is_empty() {
        return Err(format!("{name}: {}", r.violations[0]));
    }
    let spans: Vec<(f64, f64)> = r.reconfigurations().iter().map(|t| (*t, t + 3000.0)).collect();
    Ok(AblationRun {
        name,
        peaks: spans.iter().map(|(a, b)| r.max_latency(*a, *b)).collect(),
        gaps: spans.iter().map(|(a, b)| r.longest_gap(*a, *b)).collect(),
        steady_max: r.max_latency(1000.0, 4000.0),
    })
}

fn c6_ablation() -> Verdict {
    let gc = LeaderOptions {
        gc: GcMode::Guarded,
        ..LeaderOptions::NONE
    };
    let runs = [
        ablation("none", LeaderOptions::NONE)?,
        ablation("gc", gc)?,
        ablation("gc+bypass", LeaderOptions { bypass: true, ..gc })?,
        ablation("all", LeaderOptions::ALL)?,
    ];
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    // a zero-throughput 250 ms window exists iff some gap reaches 250 ms
    let stalls = |r: &AblationRun| r.gaps.iter().all(|g| *g >= 250.0);
    let never_stalls = |r: &AblationRun| r.gaps.iter().all(|g| *g < 250.0);
    let [none, gc, bypass, all] = &runs;
    let ok = min(&none.peaks) >= 500.0
        && min(&gc.peaks) >= 500.0
        && bypass.peaks.iter().all(|p| (p - 250.0).abs() <= 50.0)
        && max(&all.peaks) <= 2.0 * all.steady_max
        && stalls(none)
        && stalls(gc)
        && bypass.gaps.iter().all(|g| (g - 250.0).abs() <= 50.0)
        && never_stalls(all);
    let detail = runs
        .iter()
        .map(|r| format!("{} peak {:.0}-{:.0} ms gap {:.0} ms", r.name, min(&r.peaks), max(&r.peaks), max(&r.gaps)))
        .collect::<Vec<_>>()
        .join("; ");
    check(ok, format!("{detail}; steady max {:.0} ms", all.steady_max))
}

fn c7_leader_failure() -> Verdict {
    let exp = Experiment::leader_failure(2);
    let r = run_experiment(&exp, Target::Sim).map_err(|e| e.to_string())?;
    // commands already chosen may still be answered just after the crash
    let during = r.samples.iter().filter(|s| s.at_ms >= 7_100.0 && s.at_ms < 12_000.0).count();
    let rows = r.rows(1000.0, 250.0);
    let before = mmpaxos::bench::metrics::median(
        &rows.iter().filter(|w| w.window_start_ms >= 1000.0 && w.window_start_ms + 1000.0 <= 7000.0).map(|w| w.throughput).collect::<Vec<_>>(),
    );
    let recovered_at = rows
        .iter()
        .find(|w| w.window_start_ms >= 12_000.0 && w.throughput >= 0.9 * before)
        .map(|w| w.window_start_ms + 1000.0);
    let ok = r.violations.is_empty() && during == 0 && recovered_at.is_some_and(|t| t <= 14_000.0);
    check(
        ok,
        format!("{during} replies while leaderless; pre-failure median {before:.0}/s; 90% regained by {recovered_at:?} ms"),
    )
}

fn c8_gc_promptness() -> Verdict {
    let topo = Topology::standard(&ClusterParams {
        clients: 4,
        ..ClusterParams::default()
    });
    let times: [Time; 5] = [100, 150, 200, 250, 300];
    let mut schedule = Schedule::quiet(3, 400);
    for (i, t) in times.iter().enumerate() {
        let start = (i + 1) % 3;
        schedule = schedule.with(
            *t,
            Action::ReconfigureAcceptors {
                id: i as u64 + 1,
                acceptors: topo.acceptor_pool[start..start + 3].to_vec(),
            },
        );
    }
    let mut sim = Simulator::new(&topo, schedule).with_trace(TraceMode::All);
    let mut settled = Vec::new();
    for t in times {
        sim.run_until(t);
        let mut at = None;
        for now in t + 1..=t + 5 * RTT {
            sim.run_until(now);
            let single = topo.matchmaker_sets[0]
                .iter()
                .all(|m| matches!(sim.node(*m), Some(Node::Matchmaker(mm)) if mm.state().log().len() == 1));
            if single && now > t + RTT / 2 {
                at = Some(now - t);
                break;
            }
        }
        settled.push(at);
    }
    sim.run_until(400);
    let later: Vec<usize> = sim
        .trace()
        .records
        .iter()
        .filter(|r| r.time > times[0])
        .filter_map(|r| match &r.event {
            Event::MatchReplied { history, .. } => Some(history.len()),
            _ => None,
        })
        .collect();
    let ok = settled.iter().all(Option::is_some) && !later.is_empty() && later.iter().all(|n| *n == 1);
    check(
        ok,
        format!("one configuration left after {settled:?} units (limit {}); {} later MatchB histories, sizes {:?}", 5 * RTT, later.len(), {
            let mut s = later.clone();
            s.dedup();
            s
        }),
    )
}

fn c9_merge_golden() -> Verdict {
    let c = |i: u64| Configuration::majority(ConfigId(i), [NodeId(10 + i as u32), NodeId(20 + i as u32), NodeId(30 + i as u32)]);
    let r = |i: u64| Round::new(i, NodeId(1), 0);
    let l0 = vec![(r(0), c(0)), (r(1), c(1)), (r(4), c(4))];
    let l1 = vec![(r(2), c(2))];
    let l2 = vec![(r(1), c(1)), (r(2), c(2))];
    let merged = merge_stop_replies([(l0.as_slice(), r(0)), (l1.as_slice(), r(2)), (l2.as_slice(), r(1))])
        .map_err(|e| format!("conflict at {:?}", e.round))?;
    let want: BTreeMap<Round, Configuration> = [(r(2), c(2)), (r(4), c(4))].into_iter().collect();
    check(
        merged.log == want && merged.gc_watermark == r(2),
        format!("merged rounds {:?}, watermark {:?}", merged.log.keys().collect::<Vec<_>>(), merged.gc_watermark),
    )
}

fn c10_equivalence() -> Verdict {
    let mut compared = 0;
    for seed in 0..4 {
        let topo = Topology::standard(&ClusterParams {
            seed,
            ..ClusterParams::default()
        });
        let mut schedule = Schedule::random(seed, &topo, 300, 50);
        schedule.actions.retain(|a| !matches!(a.action, Action::Crash { .. } | Action::Restart { .. }));
        schedule.dedup = true;
        schedule.dup_rate = schedule.dup_rate.max(0.05);
        let mut sim = Simulator::new(&topo, schedule).with_trace(TraceMode::None).recording_inputs();
        sim.run_until(300);
        let inputs = sim.inputs().expect("recording").to_vec();
        let outcome = sim.finish();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let hashes = replay(&topo.specs, &inputs, Some(dir.path())).map_err(|e| format!("{e:#}"))?;
        if hashes != outcome.trace.final_hashes {
            let differ: Vec<NodeId> =
                hashes.iter().filter(|(id, h)| outcome.trace.final_hashes.get(id) != Some(h)).map(|(id, _)| *id).collect();
            return Err(format!("seed {seed}: nodes {differ:?} diverge"));
        }
        compared += hashes.len();
    }
    Ok(format!("{compared} node states identical across 4 replays"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("safety corpus", c1_safety_corpus),
        ("exhaustive small scope", c2_exhaustive),
        ("mutant detection", c3_mutants),
        ("one round trip activation", c4_one_round_trip),
        ("no-stall reconfiguration", c5_no_stall),
        ("ablation shape", c6_ablation),
        ("leader failure", c7_leader_failure),
        ("gc promptness", c8_gc_promptness),
        ("merge golden", c9_merge_golden),
        ("sim/net equivalence", c10_equivalence),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let label = format!("C{}", i + 1);
        if filter.as_ref().is_some_and(|f| *f != label) {
            continue;
        }
        let start = Instant::now();
        let verdict = run();
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("PASS {label} {name} ({secs:.1} s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {label} {name} ({secs:.1} s): {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

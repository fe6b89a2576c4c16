use mmpaxos::bench::metrics::{self, CSV_HEADER};
use mmpaxos::bench::{run_experiment, BenchEvent, Experiment, RunResult, Target};
use mmpaxos::core::{GcMode, LeaderOptions};

const INJECTED_MS: f64 = 250.0;

fn ablation(opts: LeaderOptions) -> RunResult {
    let r = run_experiment(&Experiment::ablation(opts, 7), Target::Sim).unwrap();
    assert!(r.violations.is_empty(), "{:?}", r.violations);
    assert_eq!(r.reconfigurations().len(), 5);
    r
}

fn peak(r: &RunResult) -> f64 {
    r.reconfigurations().iter().map(|t| r.max_latency(*t, t + 3000.0)).fold(0.0, f64::max)
}

#[test]
fn ablation_peaks_follow_the_injected_delay() {
    let none = ablation(LeaderOptions::NONE);
    let gc_bypass = ablation(LeaderOptions {
        gc: GcMode::Guarded,
        bypass: true,
        ..LeaderOptions::NONE
    });
    let all = ablation(LeaderOptions::ALL);
    // matchmaking and Phase 1 each wait out one injected delay
    let d_none = peak(&none) - peak(&all);
    let d_bypass = peak(&gc_bypass) - peak(&all);
    assert!((d_none - 2.0 * INJECTED_MS).abs() <= 0.1 * 2.0 * INJECTED_MS, "{d_none}");
    assert!((d_bypass - INJECTED_MS).abs() <= 0.1 * INJECTED_MS, "{d_bypass}");
    assert!(peak(&all) <= 2.0 * all.max_latency(1000.0, 4000.0));

    // the max_ms column of the CSV tells the same story
    let col_max = |r: &RunResult| r.rows(500.0, 50.0).iter().map(|row| row.max_ms).filter(|x| !x.is_nan()).fold(0.0, f64::max);
    assert_eq!(col_max(&none), peak(&none));
}

#[test]
fn throughput_stalls_without_proactive_matchmaking_only() {
    for (opts, stalls) in [
        (LeaderOptions::NONE, true),
        (LeaderOptions { gc: GcMode::Guarded, ..LeaderOptions::NONE }, true),
        (LeaderOptions::ALL, false),
    ] {
        let r = ablation(opts);
        for t in r.reconfigurations() {
            let zero_window = r.longest_gap(t, t + 3000.0) >= 250.0;
            assert_eq!(zero_window, stalls, "{opts:?} at {t}");
        }
    }
}

#[test]
fn leader_failure_gap_and_recovery() {
    let exp = Experiment::leader_failure(3);
    let r = run_experiment(&exp, Target::Sim).unwrap();
    assert!(r.violations.is_empty());
    assert_eq!(r.samples.iter().filter(|s| s.at_ms > 7_100.0 && s.at_ms < 12_000.0).count(), 0);
    let summary = r.summary(&exp);
    let before = &summary[0];
    let after = &summary[2];
    assert!(after.median_throughput >= 0.9 * before.median_throughput);
}

#[test]
fn csv_round_trips_through_a_file() {
    let mut exp = Experiment::leader_failure(1);
    exp.duration_ms = 4_000;
    exp.events.clear();
    let r = run_experiment(&exp, Target::Sim).unwrap();
    let rows = r.rows(1000.0, 250.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    metrics::write_csv(&rows, std::fs::File::create(&path).unwrap()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    assert_eq!(text.lines().count(), rows.len() + 1);
    let back = metrics::read_csv(text.as_bytes()).unwrap();
    let d = metrics::compare_windows(&back, 0.0..2000.0, 2000.0..4000.0, 1000.0).unwrap();
    assert!(d.median_throughput.abs() < 0.05, "{d:?}");
}

#[test]
fn a_short_loopback_run_reconfigures_without_queueing() {
    let mut exp = Experiment::reconfiguration(5, 1000);
    exp.duration_ms = 4_000;
    exp.clients = 2;
    exp.events = vec![
        (1_500, BenchEvent::ReconfigureAcceptors),
        (2_000, BenchEvent::ReconfigureAcceptors),
        (2_500, BenchEvent::FailAcceptor),
        (3_000, BenchEvent::ReconfigureAcceptors),
    ];
    let r = run_experiment(&exp, Target::Net).unwrap();
    assert!(!r.partial, "{:?}", r.notes);
    assert_eq!(r.steps.len(), 4);
    assert!(r.samples.len() > 100, "{} samples", r.samples.len());
    assert!(r.samples.iter().any(|s| s.at_ms > 3_500.0), "no progress after the replacement");
    assert!(r.queued.iter().all(|t| *t < 1_000.0), "{:?}", r.queued);
}

#[test]
fn net_runs_refuse_injected_delays() {
    assert!(run_experiment(&Experiment::ablation(LeaderOptions::ALL, 1), Target::Net).is_err());
}

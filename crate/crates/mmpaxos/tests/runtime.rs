use std::net::{SocketAddr, TcpListener};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver};
use mmpaxos::core::client::Workload;
use mmpaxos::core::{Event, NodeId, NodeSpec, Time, Timing};
use mmpaxos::runtime::{serve, LocalCluster, ServeOptions, SyncPolicy, TimedEvent};
use mmpaxos::sim::topology::{ClusterParams, Topology};

fn params(proposers: usize, clients: usize) -> ClusterParams {
    ClusterParams {
        proposers,
        clients,
        timing: Timing::NET,
        spare_matchmaker_sets: 0,
        ..ClusterParams::default()
    }
}

fn replies_within(events: &Receiver<TimedEvent>, want: usize, limit: Duration) -> usize {
    let deadline = Instant::now() + limit;
    let mut n = 0;
    while n < want {
        let left = deadline.saturating_duration_since(Instant::now());
        match events.recv_timeout(left) {
            Ok((_, _, Event::Reply { .. })) => n += 1,
            Ok(_) => {}
            Err(_) => break,
        }
    }
    n
}

#[test]
fn a_command_round_trips_on_loopback() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = LocalCluster::launch(Topology::standard(&params(1, 1)), dir.path(), SyncPolicy::Never).unwrap();
    assert_eq!(replies_within(cluster.events(), 5, Duration::from_secs(10)), 5);
    cluster.shutdown();
}

#[test]
fn the_leader_survives_an_acceptor_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut cluster = LocalCluster::launch(Topology::standard(&params(1, 2)), dir.path(), SyncPolicy::Never).unwrap();
    assert_eq!(replies_within(cluster.events(), 20, Duration::from_secs(10)), 20);
    let victim = *cluster.topology().initial_config.acceptors().iter().next().unwrap();
    assert!(cluster.kill(victim));
    while cluster.events().try_recv().is_ok() {}
    assert_eq!(replies_within(cluster.events(), 50, Duration::from_secs(10)), 50);
    cluster.shutdown();
}

#[test]
fn a_client_with_a_stale_view_finds_the_leader() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = LocalCluster::launch(Topology::standard(&params(2, 0)), dir.path(), SyncPolicy::Never).unwrap();
    let leader = cluster.topology().proposers[0];

    // the file moves on to version 2 while the client keeps version 1 with a
    // dead address for the leader
    let mut current = cluster.view().clone();
    let client_listener = TcpListener::bind("127.0.0.1:0").unwrap();
    current.clients.push(mmpaxos::runtime::view::Member {
        id: NodeId(100),
        addr: client_listener.local_addr().unwrap(),
    });
    current.version = 2;
    current.store(cluster.view_path()).unwrap();
    let mut stale = current.clone();
    stale.version = 1;
    let dead: SocketAddr = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    stale.proposers.iter_mut().find(|m| m.id == leader).unwrap().addr = dead;

    let (tx, rx) = unbounded();
    let spec = NodeSpec::Client {
        id: NodeId(100),
        proposers: cluster.topology().proposers.clone(),
        timing: Timing::NET,
        workload: Workload::ClosedLoop { start: 0, stop: Time::MAX },
    };
    let opts = ServeOptions {
        view_path: Some(cluster.view_path().to_owned()),
        events: Some(tx),
        ..ServeOptions::default()
    };
    let client = serve(spec, client_listener, stale, opts).unwrap();
    assert_eq!(replies_within(&rx, 3, Duration::from_secs(10)), 3);
    client.kill();
    cluster.shutdown();
}

#[test]
fn a_restarted_acceptor_rejoins_from_its_journal() {
    let dir = tempfile::tempdir().unwrap();
    let mut cluster = LocalCluster::launch(Topology::standard(&params(1, 1)), dir.path(), SyncPolicy::EveryWrite).unwrap();
    assert_eq!(replies_within(cluster.events(), 5, Duration::from_secs(10)), 5);
    let victim = *cluster.topology().initial_config.acceptors().iter().next().unwrap();
    assert!(cluster.kill(victim));
    cluster.restart(victim).unwrap();
    assert!(cluster.is_running(victim));
    assert_eq!(replies_within(cluster.events(), 10, Duration::from_secs(10)), 10);
    cluster.shutdown();
}

//! Standard cluster layouts.

use mmpaxos_core::client::Workload;
use mmpaxos_core::replica::AppKind;
use mmpaxos_core::{
    AcceptorMutation, ConfigId, Configuration, LeaderConfig, LeaderOptions, MatchmakerMutation, NodeId, NodeSpec, Time,
    Timing,
};

pub const DRIVER: NodeId = NodeId(90);
pub const OPERATOR: NodeId = NodeId(99);

#[derive(Clone, Debug)]
pub struct ClusterParams {
    pub f: usize,
    pub proposers: usize,
    pub clients: usize,
    pub opts: LeaderOptions,
    pub timing: Timing,
    pub app: AppKind,
    /// Clients run closed loops between these times.
    pub client_window: (Time, Time),
    /// Extra matchmaker sets available for matchmaker reconfiguration.
    pub spare_matchmaker_sets: usize,
    pub acceptor_mutation: AcceptorMutation,
    pub matchmaker_mutation: MatchmakerMutation,
    pub seed: u64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            f: 1,
            proposers: 2,
            clients: 2,
            opts: LeaderOptions::ALL,
            timing: Timing::SIM,
            app: AppKind::Kv,
            client_window: (0, Time::MAX),
            spare_matchmaker_sets: 2,
            acceptor_mutation: AcceptorMutation::None,
            matchmaker_mutation: MatchmakerMutation::None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Topology {
    pub f: usize,
    pub proposers: Vec<NodeId>,
    /// Twice the configuration size; configurations are drawn from here.
    pub acceptor_pool: Vec<NodeId>,
    /// The first set is active initially; the rest are spares.
    pub matchmaker_sets: Vec<Vec<NodeId>>,
    pub replicas: Vec<NodeId>,
    pub clients: Vec<NodeId>,
    pub driver: NodeId,
    pub initial_config: Configuration,
    pub specs: Vec<NodeSpec>,
}

impl Topology {
    /// Proposers from 1, acceptors from 10, matchmakers from 40, replicas from
    /// 70, the matchmaker driver at 90 and clients from 100. Matchmaker sets
    /// beyond the room below 70 go from 1000.
    pub fn standard(p: &ClusterParams) -> Topology {
        let n = 2 * p.f + 1;
        let ids = |base: u32, count: usize| (0..count as u32).map(|i| NodeId(base + i)).collect::<Vec<_>>();
        let proposers = ids(1, p.proposers);
        let acceptor_pool = ids(10, 2 * n);
        // sets that do not fit below the replicas continue from 1000
        let fit = 30 / n;
        let matchmaker_sets: Vec<Vec<NodeId>> = (0..=p.spare_matchmaker_sets)
            .map(|k| match k < fit {
                true => ids(40 + (k * n) as u32, n),
                false => ids(1000 + ((k - fit) * n) as u32, n),
            })
            .collect();
        let replicas = ids(70, n);
        let clients = ids(100, p.clients);
        let initial_config = Configuration::majority(ConfigId(0), acceptor_pool[..n].iter().copied());

        let mut specs = Vec::new();
        for (i, id) in proposers.iter().enumerate() {
            specs.push(NodeSpec::Leader(LeaderConfig {
                id: *id,
                proposers: proposers.clone(),
                matchmakers: matchmaker_sets[0].clone(),
                replicas: replicas.clone(),
                initial_config: initial_config.clone(),
                initial_leader: i == 0,
                timing: p.timing,
                opts: p.opts,
                seed: p.seed ^ id.0 as u64,
            }));
        }
        for id in &acceptor_pool {
            specs.push(NodeSpec::Acceptor {
                id: *id,
                mutation: p.acceptor_mutation,
            });
        }
        for (k, set) in matchmaker_sets.iter().enumerate() {
            for id in set {
                specs.push(NodeSpec::Matchmaker {
                    id: *id,
                    spare: k > 0,
                    mutation: p.matchmaker_mutation,
                });
            }
        }
        for id in &replicas {
            specs.push(NodeSpec::Replica {
                id: *id,
                replicas: replicas.clone(),
                app: p.app,
                timing: p.timing,
            });
        }
        specs.push(NodeSpec::Driver {
            id: DRIVER,
            proposers: proposers.clone(),
            matchmakers: matchmaker_sets[0].clone(),
            timing: p.timing,
        });
        for id in &clients {
            specs.push(NodeSpec::Client {
                id: *id,
                proposers: proposers.clone(),
                timing: p.timing,
                workload: Workload::ClosedLoop {
                    start: p.client_window.0,
                    stop: p.client_window.1,
                },
            });
        }
        Topology {
            f: p.f,
            proposers,
            acceptor_pool,
            matchmaker_sets,
            replicas,
            clients,
            driver: DRIVER,
            initial_config,
            specs,
        }
    }

    pub fn config_size(&self) -> usize {
        2 * self.f + 1
    }

    /// Every node except clients and the driver.
    pub fn all_servers(&self) -> Vec<NodeId> {
        let mut v = self.proposers.clone();
        v.extend(&self.acceptor_pool);
        v.extend(self.matchmaker_sets.iter().flatten());
        v.extend(&self.replicas);
        v
    }

    pub fn add_client(&mut self, id: NodeId, workload: Workload, timing: Timing) {
        self.clients.push(id);
        self.specs.push(NodeSpec::Client {
            id,
            proposers: self.proposers.clone(),
            timing,
            workload,
        });
    }
}

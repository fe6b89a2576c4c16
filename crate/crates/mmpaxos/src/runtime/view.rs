//! The cluster view: a versioned TOML file mapping node ids to addresses.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::Path;

use mmpaxos_core::client::Workload;
use mmpaxos_core::replica::AppKind;
use mmpaxos_core::{
    AcceptorMutation, ConfigId, Configuration, LeaderConfig, LeaderOptions, MatchmakerMutation, NodeId, NodeSpec, Time,
    Timing,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub id: NodeId,
    pub addr: SocketAddr,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptorMember {
    pub id: NodeId,
    pub addr: SocketAddr,
    /// Labels of the configurations this acceptor belongs to.
    #[serde(default)]
    pub configs: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterView {
    pub version: u64,
    #[serde(default)]
    pub proposers: Vec<Member>,
    #[serde(default)]
    pub acceptors: Vec<AcceptorMember>,
    #[serde(default)]
    pub matchmakers: Vec<Member>,
    #[serde(default)]
    pub replicas: Vec<Member>,
    #[serde(default)]
    pub clients: Vec<Member>,
    /// The matchmaker reconfiguration driver and other helpers.
    #[serde(default)]
    pub others: Vec<Member>,
}

#[derive(Debug, thiserror::Error)]
pub enum ViewError {
    #[error("reading cluster view: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing cluster view: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("node {0} listed twice")]
    Duplicate(NodeId),
    #[error("view version {new} is older than {current}")]
    Stale { current: u64, new: u64 },
}

impl ClusterView {
    pub fn parse(text: &str) -> Result<Self, ViewError> {
        let view: ClusterView = toml::from_str(text)?;
        view.check()?;
        Ok(view)
    }

    pub fn load(path: &Path) -> Result<Self, ViewError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("views always serialize")
    }

    /// Writes the view through a temporary file and a rename, so readers
    /// never see a partial file. Refuses to replace a newer view.
    pub fn store(&self, path: &Path) -> Result<(), ViewError> {
        if let Ok(current) = Self::load(path) {
            if current.version > self.version {
                return Err(ViewError::Stale {
                    current: current.version,
                    new: self.version,
                });
            }
        }
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(self.to_toml().as_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }

    fn check(&self) -> Result<(), ViewError> {
        let mut seen = std::collections::BTreeSet::new();
        for (id, _) in self.entries() {
            if !seen.insert(id) {
                return Err(ViewError::Duplicate(id));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = (NodeId, SocketAddr)> + '_ {
        let plain = self
            .proposers
            .iter()
            .chain(&self.matchmakers)
            .chain(&self.replicas)
            .chain(&self.clients)
            .chain(&self.others)
            .map(|m| (m.id, m.addr));
        plain.chain(self.acceptors.iter().map(|a| (a.id, a.addr)))
    }

    pub fn addresses(&self) -> BTreeMap<NodeId, SocketAddr> {
        self.entries().collect()
    }

    pub fn addr(&self, id: NodeId) -> Option<SocketAddr> {
        self.entries().find(|(n, _)| *n == id).map(|(_, a)| a)
    }

    /// Acceptors carrying configuration label `label`.
    pub fn configuration(&self, label: u64) -> Vec<NodeId> {
        self.acceptors
            .iter()
            .filter(|a| a.configs.contains(&label))
            .map(|a| a.id)
            .collect()
    }
}

impl ClusterView {
    /// The lowest configuration label and its acceptors.
    pub fn initial_config(&self) -> Option<Configuration> {
        let label = self.acceptors.iter().flat_map(|a| a.configs.iter().copied()).min()?;
        Some(Configuration::majority(ConfigId(label), self.configuration(label)))
    }

    /// What node `id` runs, read off the view: the first proposer leads,
    /// the lowest labelled configuration is the initial one and the first
    /// `2f+1` matchmakers are active while the rest wait as spares.
    pub fn spec_for(&self, id: NodeId, opts: LeaderOptions, timing: Timing, seed: u64) -> Option<NodeSpec> {
        let ids = |ms: &[Member]| ms.iter().map(|m| m.id).collect::<Vec<_>>();
        let initial = self.initial_config()?;
        let n = initial.acceptors().len();
        let matchmakers = ids(&self.matchmakers);
        let active: Vec<NodeId> = matchmakers.iter().take(n).copied().collect();
        let proposers = ids(&self.proposers);
        if let Some(i) = proposers.iter().position(|p| *p == id) {
            return Some(NodeSpec::Leader(LeaderConfig {
                id,
                proposers: proposers.clone(),
                matchmakers: active,
                replicas: ids(&self.replicas),
                initial_config: initial,
                initial_leader: i == 0,
                timing,
                opts,
                seed: seed ^ id.0 as u64,
            }));
        }
        if self.acceptors.iter().any(|a| a.id == id) {
            return Some(NodeSpec::Acceptor {
                id,
                mutation: AcceptorMutation::None,
            });
        }
        if let Some(i) = matchmakers.iter().position(|m| *m == id) {
            return Some(NodeSpec::Matchmaker {
                id,
                spare: i >= n,
                mutation: MatchmakerMutation::None,
            });
        }
        if self.replicas.iter().any(|r| r.id == id) {
            return Some(NodeSpec::Replica {
                id,
                replicas: ids(&self.replicas),
                app: AppKind::Kv,
                timing,
            });
        }
        if self.clients.iter().any(|c| c.id == id) {
            return Some(NodeSpec::Client {
                id,
                proposers,
                timing,
                workload: Workload::ClosedLoop { start: 0, stop: Time::MAX },
            });
        }
        if self.others.iter().any(|o| o.id == id) {
            return Some(NodeSpec::Driver {
                id,
                proposers,
                matchmakers: active,
                timing,
            });
        }
        None
    }
}

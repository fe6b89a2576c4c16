//! A whole cluster on loopback inside one process, for tests and benchmarks.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use crossbeam_channel::{unbounded, Receiver};
use mmpaxos_core::{Configuration, Message, NodeId, NodeSpec, Time};

use super::journal::SyncPolicy;
use super::net::{serve, NodeHandle, ServeOptions, TimedEvent};
use super::view::{AcceptorMember, ClusterView, Member};
use crate::sim::topology::{Topology, OPERATOR};

pub struct LocalCluster {
    topology: Topology,
    view: ClusterView,
    view_path: PathBuf,
    data_dir: PathBuf,
    sync: SyncPolicy,
    epoch: Instant,
    handles: BTreeMap<NodeId, NodeHandle>,
    events_tx: crossbeam_channel::Sender<TimedEvent>,
    events: Receiver<TimedEvent>,
}

/// The version 1 view of `topology` with the given addresses.
pub fn view_for(topology: &Topology, addrs: &BTreeMap<NodeId, SocketAddr>) -> ClusterView {
    let members = |ids: &[NodeId]| ids.iter().map(|id| Member { id: *id, addr: addrs[id] }).collect();
    let initial: Vec<NodeId> = topology.initial_config.acceptors().iter().copied().collect();
    ClusterView {
        version: 1,
        proposers: members(&topology.proposers),
        acceptors: topology
            .acceptor_pool
            .iter()
            .map(|id| AcceptorMember {
                id: *id,
                addr: addrs[id],
                configs: if initial.contains(id) {
                    vec![topology.initial_config.id().0]
                } else {
                    Vec::new()
                },
            })
            .collect(),
        matchmakers: members(&topology.matchmaker_sets.concat()),
        replicas: members(&topology.replicas),
        clients: members(&topology.clients),
        others: members(&[topology.driver]),
    }
}

impl LocalCluster {
    /// Binds every node of `topology` to a loopback port, writes the view to
    /// `dir/view.toml` and starts all nodes with journals under `dir`.
    pub fn launch(topology: Topology, dir: &Path, sync: SyncPolicy) -> Result<Self> {
        let mut listeners = BTreeMap::new();
        for spec in &topology.specs {
            let l = TcpListener::bind("127.0.0.1:0").context("binding loopback port")?;
            listeners.insert(spec.id(), l);
        }
        let addrs: BTreeMap<NodeId, SocketAddr> = listeners
            .iter()
            .map(|(id, l)| Ok((*id, l.local_addr()?)))
            .collect::<std::io::Result<_>>()?;
        let view = view_for(&topology, &addrs);
        let view_path = dir.join("view.toml");
        view.store(&view_path)?;
        let (events_tx, events) = unbounded();
        let mut cluster = LocalCluster {
            topology,
            view,
            view_path,
            data_dir: dir.join("data"),
            sync,
            epoch: Instant::now(),
            handles: BTreeMap::new(),
            events_tx,
            events,
        };
        for spec in cluster.topology.specs.clone() {
            let l = listeners.remove(&spec.id()).expect("bound above");
            cluster.start(spec, l)?;
        }
        Ok(cluster)
    }

    fn start(&mut self, spec: NodeSpec, listener: TcpListener) -> Result<()> {
        let id = spec.id();
        let opts = ServeOptions {
            data_dir: Some(self.data_dir.clone()),
            sync: self.sync,
            epoch: self.epoch,
            view_path: Some(self.view_path.clone()),
            events: Some(self.events_tx.clone()),
            ..ServeOptions::default()
        };
        let handle = serve(spec, listener, self.view.clone(), opts)?;
        self.handles.insert(id, handle);
        Ok(())
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn view(&self) -> &ClusterView {
        &self.view
    }

    pub fn view_path(&self) -> &Path {
        &self.view_path
    }

    /// Microseconds since launch, on the clock every node shares.
    pub fn now(&self) -> Time {
        self.epoch.elapsed().as_micros() as Time
    }

    pub fn events(&self) -> &Receiver<TimedEvent> {
        &self.events
    }

    pub fn is_running(&self, id: NodeId) -> bool {
        self.handles.contains_key(&id)
    }

    pub fn kill(&mut self, id: NodeId) -> bool {
        match self.handles.remove(&id) {
            Some(h) => {
                h.kill();
                true
            }
            None => false,
        }
    }

    /// Restarts a killed node on its old address, recovering from its journal.
    pub fn restart(&mut self, id: NodeId) -> Result<()> {
        if self.handles.contains_key(&id) {
            return Ok(());
        }
        let spec = self
            .topology
            .specs
            .iter()
            .find(|s| s.id() == id)
            .cloned()
            .ok_or_else(|| anyhow!("unknown node {id}"))?;
        let addr = self.view.addr(id).ok_or_else(|| anyhow!("node {id} has no address"))?;
        let l = TcpListener::bind(addr).with_context(|| format!("rebinding {addr}"))?;
        self.start(spec, l)
    }

    /// Delivers `msg` to `to` as the operator.
    pub fn inject(&self, to: NodeId, msg: Message) {
        if let Some(h) = self.handles.get(&to) {
            h.inject(OPERATOR, msg);
        }
    }

    /// Asks every proposer to move to `config`.
    pub fn reconfigure(&self, config: &Configuration) {
        for p in &self.topology.proposers {
            self.inject(*p, Message::Reconfigure { config: config.clone() });
        }
    }

    pub fn shutdown(mut self) {
        while let Some((_, h)) = self.handles.pop_first() {
            h.kill();
        }
    }
}

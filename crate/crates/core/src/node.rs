//! One enum over every role, so hosts can store, restart and hash nodes
//! uniformly.

use alloc::vec::Vec;
use core::hash::Hasher;

use serde::{Deserialize, Serialize};

use crate::acceptor::{AcceptorMutation, AcceptorState};
use crate::client::{Client, Workload};
use crate::leader::{Leader, LeaderConfig};
use crate::matchmaker::{MatchmakerMutation, MatchmakerNode, MatchmakerState};
use crate::message::Message;
use crate::mmreconfig::MmReconfigDriver;
use crate::process::{JournalRecord, Outbox, Process, Time, Timing};
use crate::proposer::Proposer;
use crate::replica::{AppKind, Replica};
use crate::round::NodeId;
use crate::value::Instance;

/// An acceptor of the replicated log.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct AcceptorNode {
    pub state: AcceptorState,
}

impl Process for AcceptorNode {
    fn on_message(&mut self, _now: Time, from: NodeId, msg: Message, out: &mut Outbox) {
        self.state.on_message(Instance::Log, from, &msg, out);
    }

    fn on_tick(&mut self, _now: Time, _out: &mut Outbox) {}
}

/// How to build a node from scratch. Restarting a node rebuilds it from its
/// spec and replays its journal.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeSpec {
    Acceptor {
        id: NodeId,
        mutation: AcceptorMutation,
    },
    Matchmaker {
        id: NodeId,
        spare: bool,
        mutation: MatchmakerMutation,
    },
    Leader(LeaderConfig),
    Replica {
        id: NodeId,
        replicas: Vec<NodeId>,
        app: AppKind,
        timing: Timing,
    },
    Client {
        id: NodeId,
        proposers: Vec<NodeId>,
        timing: Timing,
        workload: Workload,
    },
    Driver {
        id: NodeId,
        proposers: Vec<NodeId>,
        matchmakers: Vec<NodeId>,
        timing: Timing,
    },
}

impl NodeSpec {
    pub fn id(&self) -> NodeId {
        match self {
            NodeSpec::Acceptor { id, .. }
            | NodeSpec::Matchmaker { id, .. }
            | NodeSpec::Replica { id, .. }
            | NodeSpec::Client { id, .. }
            | NodeSpec::Driver { id, .. } => *id,
            NodeSpec::Leader(c) => c.id,
        }
    }

    pub fn role(&self) -> &'static str {
        match self {
            NodeSpec::Acceptor { .. } => "acceptor",
            NodeSpec::Matchmaker { .. } => "matchmaker",
            NodeSpec::Leader(_) => "leader",
            NodeSpec::Replica { .. } => "replica",
            NodeSpec::Client { .. } => "client",
            NodeSpec::Driver { .. } => "driver",
        }
    }

    pub fn build(&self) -> Node {
        match self.clone() {
            NodeSpec::Acceptor { mutation, .. } => Node::Acceptor(AcceptorNode {
                state: AcceptorState::with_mutation(mutation),
            }),
            NodeSpec::Matchmaker { spare, mutation, .. } => {
                let state = if spare { MatchmakerState::spare() } else { MatchmakerState::new() };
                Node::Matchmaker(MatchmakerNode::new(state.with_mutation(mutation), 0))
            }
            NodeSpec::Leader(c) => Node::Leader(Leader::new(c)),
            NodeSpec::Replica {
                id,
                replicas,
                app,
                timing,
            } => Node::Replica(Replica::new(id, replicas, app, timing)),
            NodeSpec::Client {
                id,
                proposers,
                timing,
                workload,
            } => Node::Client(Client::new(id, proposers, timing, workload)),
            NodeSpec::Driver {
                id,
                proposers,
                matchmakers,
                timing,
            } => Node::Driver(MmReconfigDriver::new(id, proposers, matchmakers, timing)),
        }
    }

    /// Rebuilds a crashed node from its journal. A restarted leader never
    /// assumes leadership on its own: it waits for the election timeout.
    pub fn recover<'a>(&self, records: impl IntoIterator<Item = &'a JournalRecord>) -> Node {
        let mut node = match self {
            NodeSpec::Leader(c) => Node::Leader(Leader::new(LeaderConfig {
                initial_leader: false,
                ..c.clone()
            })),
            _ => self.build(),
        };
        for r in records {
            node.apply_record(r);
        }
        node
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Node {
    Acceptor(AcceptorNode),
    Matchmaker(MatchmakerNode),
    Leader(Leader),
    Replica(Replica),
    Client(Client),
    Driver(MmReconfigDriver),
    /// A single-decree proposer, used by small-scope exploration.
    Proposer(Proposer),
}

impl Node {
    pub fn apply_record(&mut self, record: &JournalRecord) {
        match self {
            Node::Acceptor(a) => a.state.apply_record(record),
            Node::Matchmaker(m) => m.apply_record(record),
            Node::Leader(l) => l.apply_record(record),
            Node::Replica(r) => r.apply_record(record),
            Node::Proposer(p) => p.apply_record(record),
            Node::Client(_) | Node::Driver(_) => {}
        }
    }

    /// FNV-1a over the canonical encoding of the whole state.
    pub fn state_hash(&self) -> u64 {
        let bytes = postcard::to_allocvec(self).expect("node state always serializes");
        let mut h = fnv::FnvHasher::default();
        h.write(&bytes);
        h.finish()
    }

    pub fn as_leader(&self) -> Option<&Leader> {
        match self {
            Node::Leader(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_replica(&self) -> Option<&Replica> {
        match self {
            Node::Replica(r) => Some(r),
            _ => None,
        }
    }

    pub fn as_matchmaker(&self) -> Option<&MatchmakerNode> {
        match self {
            Node::Matchmaker(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_acceptor(&self) -> Option<&AcceptorState> {
        match self {
            Node::Acceptor(a) => Some(&a.state),
            _ => None,
        }
    }

    pub fn as_client(&self) -> Option<&Client> {
        match self {
            Node::Client(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_driver(&self) -> Option<&MmReconfigDriver> {
        match self {
            Node::Driver(d) => Some(d),
            _ => None,
        }
    }

    pub fn as_proposer(&self) -> Option<&Proposer> {
        match self {
            Node::Proposer(p) => Some(p),
            _ => None,
        }
    }
}

impl Process for Node {
    fn on_message(&mut self, now: Time, from: NodeId, msg: Message, out: &mut Outbox) {
        match self {
            Node::Acceptor(n) => n.on_message(now, from, msg, out),
            Node::Matchmaker(n) => n.on_message(now, from, msg, out),
            Node::Leader(n) => n.on_message(now, from, msg, out),
            Node::Replica(n) => n.on_message(now, from, msg, out),
            Node::Client(n) => n.on_message(now, from, msg, out),
            Node::Driver(n) => n.on_message(now, from, msg, out),
            Node::Proposer(n) => n.on_message(now, from, msg, out),
        }
    }

    fn on_tick(&mut self, now: Time, out: &mut Outbox) {
        match self {
            Node::Acceptor(n) => n.on_tick(now, out),
            Node::Matchmaker(n) => n.on_tick(now, out),
            Node::Leader(n) => n.on_tick(now, out),
            Node::Replica(n) => n.on_tick(now, out),
            Node::Client(n) => n.on_tick(now, out),
            Node::Driver(n) => n.on_tick(now, out),
            Node::Proposer(n) => n.on_tick(now, out),
        }
    }
}

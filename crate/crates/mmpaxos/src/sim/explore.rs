//! Exhaustive exploration of small scenarios.
//!
//! Enumerates every interleaving of deliveries and proposer retries up to a
//! depth bound. A dropped message is one that is never delivered: the checked
//! properties depend only on what nodes did, so every state reachable with
//! drops is matched by a state reachable without them in fewer steps. A ghost record of every vote ever cast and every round's
//! configuration travels with the state, so the chosen-value check runs on
//! every reachable state rather than only at the leaves. States are
//! deduplicated by hash together with the remaining depth budget.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use mmpaxos_core::matchmaker::MatchmakerNode;
use mmpaxos_core::node::AcceptorNode;
use mmpaxos_core::proposer::Phase;
use mmpaxos_core::{
    AcceptorMutation, AcceptorState, ConfigId, Configuration, Event, Instance, Message, MessageKind, MatchmakerMutation,
    MatchmakerState, Node, NodeId, Outbox, Process, Proposer, ProposerOptions, Round, Slot, Value,
};

use super::oracle::Violation;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct InFlight {
    from: NodeId,
    to: NodeId,
    msg: Message,
}

impl InFlight {
    fn key(&self) -> (NodeId, NodeId, u64) {
        let mut h = fnv::FnvHasher::default();
        self.msg.hash(&mut h);
        (self.from, self.to, h.finish())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    Deliver { from: NodeId, to: NodeId, kind: MessageKind },
    Retry { proposer: NodeId },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
struct Ghost {
    configs: BTreeMap<Round, Configuration>,
    votes: BTreeSet<(Slot, Round, Value, NodeId)>,
    mismatch: Option<(Round, NodeId)>,
}

impl Ghost {
    fn observe(&mut self, node: NodeId, e: &Event) {
        match e {
            Event::RoundConfig { round, config, .. } => {
                if let Some(c) = self.configs.get(round) {
                    if c != config {
                        self.mismatch.get_or_insert((*round, node));
                    }
                } else {
                    self.configs.insert(*round, config.clone());
                }
            }
            Event::Voted { slot, round, value, .. } => {
                self.votes.insert((*slot, *round, value.clone(), node));
            }
            Event::MatchReplied { history, .. } => {
                for (r, c) in history {
                    if self.configs.get(r).is_some_and(|k| k != c) {
                        self.mismatch.get_or_insert((*r, node));
                    }
                }
            }
            _ => {}
        }
    }

    fn chosen(&self) -> BTreeMap<Slot, BTreeMap<Value, Round>> {
        let mut voters: BTreeMap<(Slot, Round, &Value), BTreeSet<NodeId>> = BTreeMap::new();
        for (s, r, v, a) in &self.votes {
            voters.entry((*s, *r, v)).or_default().insert(*a);
        }
        let mut chosen: BTreeMap<Slot, BTreeMap<Value, Round>> = BTreeMap::new();
        for ((s, r, v), who) in voters {
            let Some(config) = self.configs.get(&r) else { continue };
            let who: BTreeSet<NodeId> = who.into_iter().filter(|a| config.contains(*a)).collect();
            if config.is_phase2_quorum(&who) {
                let lowest = chosen.entry(s).or_default().entry(v.clone()).or_insert(r);
                *lowest = (*lowest).min(r);
            }
        }
        chosen
    }

    fn violation(&self) -> Option<Violation> {
        if let Some((round, node)) = self.mismatch {
            return Some(Violation::ConfigMismatch { round, node });
        }
        for (slot, values) in self.chosen() {
            let mut it = values.into_iter();
            if let (Some((v1, r1)), Some((v2, r2))) = (it.next(), it.next()) {
                return Some(Violation::ConflictingChoice {
                    instance: Instance::Log,
                    slot,
                    first: (r1, v1),
                    second: (r2, v2),
                });
            }
        }
        None
    }
}

/// A closed world: nodes, messages in flight and the ghost history. Nodes
/// and the ghost are shared between sibling states and copied on write;
/// per-node hashes are cached so hashing a state touches only what changed.
#[derive(Clone, Debug)]
pub struct Scenario {
    nodes: BTreeMap<NodeId, (Rc<Node>, u64)>,
    in_flight: Vec<((NodeId, NodeId, u64), Rc<InFlight>)>,
    retries_left: BTreeMap<NodeId, u32>,
    ghost: Rc<Ghost>,
    violation: Option<Violation>,
}

fn node_hash(n: &Node) -> u64 {
    let mut h = fnv::FnvHasher::default();
    n.hash(&mut h);
    h.finish()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Mutants {
    pub acceptor: AcceptorMutation,
    pub matchmaker: MatchmakerMutation,
}

pub const PROPOSERS: [NodeId; 2] = [NodeId(1), NodeId(2)];
pub const MATCHMAKERS: [NodeId; 3] = [NodeId(20), NodeId(21), NodeId(22)];

fn x() -> Value {
    Value::command(NodeId(100), 1, b"x".to_vec())
}

fn y() -> Value {
    Value::command(NodeId(101), 1, b"y".to_vec())
}

impl Scenario {
    fn empty() -> Self {
        Scenario {
            nodes: BTreeMap::new(),
            in_flight: Vec::new(),
            retries_left: BTreeMap::new(),
            ghost: Rc::new(Ghost::default()),
            violation: None,
        }
    }

    fn insert(&mut self, id: NodeId, node: Node) {
        let h = node_hash(&node);
        self.nodes.insert(id, (Rc::new(node), h));
    }

    fn add_matchmakers(&mut self, m: MatchmakerMutation) {
        for id in MATCHMAKERS {
            let state = MatchmakerState::new().with_mutation(m);
            self.insert(id, Node::Matchmaker(MatchmakerNode::new(state, 0)));
        }
    }

    fn add_acceptors(&mut self, ids: impl IntoIterator<Item = NodeId>, m: AcceptorMutation) {
        for id in ids {
            self.insert(
                id,
                Node::Acceptor(AcceptorNode {
                    state: AcceptorState::with_mutation(m),
                }),
            );
        }
    }

    fn start(&mut self, id: NodeId, value: Option<Value>, config: Configuration, opts: ProposerOptions) {
        let mut p = Proposer::new(id, Instance::Log, MATCHMAKERS.to_vec(), opts);
        let mut out = Outbox::new();
        p.begin_round(0, value, config, &mut out).expect("fresh proposer starts");
        self.insert(id, Node::Proposer(p));
        self.retries_left.insert(id, 1);
        self.absorb(id, out);
    }

    fn push(&mut self, m: InFlight) {
        let key = m.key();
        let at = self.in_flight.partition_point(|(k, _)| *k <= key);
        self.in_flight.insert(at, (key, Rc::new(m)));
    }

    /// Single-decree Matchmaker Paxos: proposer 1 proposes `x` in
    /// {10,11,12}, proposer 2 proposes `y` in {13,14,15}, three matchmakers.
    pub fn single_decree(m: Mutants) -> Self {
        let mut s = Scenario::empty();
        s.add_matchmakers(m.matchmaker);
        s.add_acceptors((10..16).map(NodeId), m.acceptor);
        let c1 = Configuration::majority(ConfigId(1), (10..13).map(NodeId));
        let c2 = Configuration::majority(ConfigId(2), (13..16).map(NodeId));
        s.start(PROPOSERS[0], Some(x()), c1, ProposerOptions::default());
        s.start(PROPOSERS[1], Some(y()), c2, ProposerOptions::default());
        s
    }

    /// Fast Paxos over two acceptors with a unanimous Phase 2 quorum. Both
    /// proposers run fast rounds; two clients race `x` and `y` straight to
    /// the acceptors.
    pub fn fast(m: Mutants) -> Self {
        let mut s = Scenario::empty();
        s.add_matchmakers(m.matchmaker);
        s.add_acceptors([NodeId(10), NodeId(11)], m.acceptor);
        let c = Configuration::unanimous(ConfigId(1), [NodeId(10), NodeId(11)]);
        let opts = ProposerOptions {
            fast: true,
            ..ProposerOptions::default()
        };
        s.start(PROPOSERS[0], None, c.clone(), opts.clone());
        s.start(PROPOSERS[1], None, c, opts);
        for (client, v) in [(NodeId(100), x()), (NodeId(101), y())] {
            for a in [NodeId(10), NodeId(11)] {
                s.push(InFlight {
                    from: client,
                    to: a,
                    msg: Message::FastValue { value: v.clone() },
                });
            }
        }
        s
    }

    fn absorb(&mut self, from: NodeId, out: Outbox) {
        let relevant = |e: &Event| matches!(e, Event::RoundConfig { .. } | Event::Voted { .. } | Event::MatchReplied { .. });
        if out.events.iter().any(relevant) {
            let ghost = Rc::make_mut(&mut self.ghost);
            for e in out.events.iter().filter(|e| relevant(e)) {
                ghost.observe(from, e);
            }
            if self.violation.is_none() {
                self.violation = ghost.violation();
            }
        }
        for (to, msg) in out.sends {
            // messages to nodes outside the scenario vanish
            if self.nodes.contains_key(&to) {
                self.push(InFlight { from, to, msg });
            }
        }
    }

    fn state_hash(&self) -> u64 {
        let mut h = fnv::FnvHasher::default();
        for (id, (_, nh)) in &self.nodes {
            h.write_u32(id.0);
            h.write_u64(*nh);
        }
        for (k, _) in &self.in_flight {
            k.hash(&mut h);
        }
        self.retries_left.hash(&mut h);
        self.ghost.hash(&mut h);
        h.finish()
    }

    fn run(&mut self, id: NodeId, f: impl FnOnce(&mut Node, &mut Outbox)) {
        let mut out = Outbox::new();
        let (node, h) = self.nodes.get_mut(&id).expect("scenario node");
        let node = Rc::make_mut(node);
        f(node, &mut out);
        *h = node_hash(node);
        self.absorb(id, out);
    }

    fn successor(&self, i: usize) -> Option<(Step, Scenario)> {
        if i < self.in_flight.len() {
            if i > 0 && self.in_flight[i - 1].0 == self.in_flight[i].0 && self.in_flight[i - 1].1 == self.in_flight[i].1 {
                return None;
            }
            let m = Rc::clone(&self.in_flight[i].1);
            let mut next = self.clone();
            next.in_flight.remove(i);
            next.run(m.to, |n, out| n.on_message(0, m.from, m.msg.clone(), out));
            let step = Step::Deliver {
                from: m.from,
                to: m.to,
                kind: m.msg.kind(),
            };
            return Some((step, next));
        }
        let (&p, &left) = self.retries_left.iter().nth(i - self.in_flight.len())?;
        let (Node::Proposer(prop), _) = self.nodes.get(&p).map(|(n, h)| (&**n, h))? else { return None };
        if left == 0 || prop.phase() == Phase::Chosen {
            return None;
        }
        let mut next = self.clone();
        *next.retries_left.get_mut(&p).expect("listed") -= 1;
        next.run(p, |n, out| {
            if let Node::Proposer(prop) = n {
                prop.retry(0, out);
            }
        });
        Some((Step::Retry { proposer: p }, next))
    }

    fn branching(&self) -> usize {
        self.in_flight.len() + self.retries_left.len()
    }
}

#[derive(Clone, Debug)]
pub struct Counterexample {
    pub steps: Vec<Step>,
    pub violation: Violation,
}

#[derive(Clone, Debug)]
pub struct Exploration {
    pub states: u64,
    /// The state budget ran out before the search finished; an absent
    /// counterexample proves nothing beyond the states visited.
    pub partial: bool,
    pub counterexample: Option<Counterexample>,
}

impl Exploration {
    pub fn is_ok(&self) -> bool {
        !self.partial && self.counterexample.is_none()
    }
}

struct Search {
    visited: HashMap<u64, u32>,
    budget: u64,
    states: u64,
    partial: bool,
    path: Vec<Step>,
}

impl Search {
    fn dfs(&mut self, s: &Scenario, remaining: u32) -> Option<Counterexample> {
        self.states += 1;
        if let Some(violation) = &s.violation {
            return Some(Counterexample {
                steps: self.path.clone(),
                violation: violation.clone(),
            });
        }
        if remaining == 0 {
            return None;
        }
        if self.states >= self.budget {
            self.partial = true;
            return None;
        }
        for i in 0..s.branching() {
            let Some((step, next)) = s.successor(i) else { continue };
            let h = next.state_hash();
            match self.visited.get(&h) {
                Some(&seen) if seen >= remaining - 1 => continue,
                _ => {
                    self.visited.insert(h, remaining - 1);
                }
            }
            self.path.push(step);
            let found = self.dfs(&next, remaining - 1);
            self.path.pop();
            if found.is_some() {
                return found;
            }
        }
        None
    }
}

/// Explores every schedule of at most `depth` steps, visiting at most
/// `budget` states. Returns the first counterexample found.
pub fn explore(scenario: &Scenario, depth: u32, budget: u64) -> Exploration {
    let mut search = Search {
        visited: HashMap::new(),
        budget,
        states: 0,
        partial: false,
        path: Vec::new(),
    };
    let counterexample = search.dfs(scenario, depth);
    Exploration {
        states: search.states,
        partial: search.partial,
        counterexample,
    }
}

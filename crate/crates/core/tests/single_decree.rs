use mmpaxos_core::node::AcceptorNode;
use mmpaxos_core::{
    AcceptorState, ConfigId, Configuration, Event, Instance, MatchmakerNode, MatchmakerState, Message, Node, NodeId,
    Outbox, Process, Proposer, ProposerOptions, Value,
};
use proptest::prelude::*;
use std::collections::BTreeMap;

const MATCHMAKERS: [u32; 3] = [20, 21, 22];

struct Net {
    nodes: BTreeMap<NodeId, Node>,
    pending: Vec<(NodeId, NodeId, Message)>,
    learned: Vec<(NodeId, Value)>,
}

impl Net {
    fn new(proposers: &[(u32, &[u8], u64, std::ops::Range<u32>)]) -> Self {
        let mut net = Net {
            nodes: BTreeMap::new(),
            pending: Vec::new(),
            learned: Vec::new(),
        };
        for m in MATCHMAKERS {
            net.nodes
                .insert(NodeId(m), Node::Matchmaker(MatchmakerNode::new(MatchmakerState::new(), 0)));
        }
        for (id, payload, label, acceptors) in proposers {
            for a in acceptors.clone() {
                net.nodes.insert(
                    NodeId(a),
                    Node::Acceptor(AcceptorNode {
                        state: AcceptorState::default(),
                    }),
                );
            }
            let mut p = Proposer::new(
                NodeId(*id),
                Instance::Log,
                MATCHMAKERS.iter().map(|m| NodeId(*m)).collect(),
                ProposerOptions::default(),
            );
            let config = Configuration::majority(ConfigId(*label), acceptors.clone().map(NodeId));
            let value = Value::command(NodeId(100 + id), 1, payload.to_vec());
            let mut out = Outbox::new();
            p.begin_round(0, Some(value), config, &mut out).unwrap();
            net.absorb(NodeId(*id), out);
            net.nodes.insert(NodeId(*id), Node::Proposer(p));
        }
        net
    }

    fn absorb(&mut self, from: NodeId, out: Outbox) {
        for e in out.events {
            if let Event::Learned { value, .. } = e {
                self.learned.push((from, value));
            }
        }
        self.pending.extend(out.sends.into_iter().map(|(to, m)| (from, to, m)));
    }

    /// Delivers the pending message at `pick` (modulo the queue length).
    fn step(&mut self, pick: usize, now: u64) {
        let (from, to, msg) = self.pending.remove(pick % self.pending.len());
        let mut out = Outbox::new();
        if let Some(n) = self.nodes.get_mut(&to) {
            n.on_message(now, from, msg, &mut out);
        }
        self.absorb(to, out);
    }

    fn retry(&mut self, id: NodeId, now: u64) {
        let mut out = Outbox::new();
        if let Some(Node::Proposer(p)) = self.nodes.get_mut(&id) {
            p.retry(now, &mut out);
        }
        self.absorb(id, out);
    }
}

#[test]
fn a_lone_proposer_learns_its_value() {
    let mut net = Net::new(&[(1, b"x", 1, 10..13)]);
    let mut now = 0;
    while !net.pending.is_empty() {
        now += 1;
        net.step(0, now);
    }
    assert!(!net.learned.is_empty());
    assert!(net.learned.iter().all(|(_, v)| *v == Value::command(NodeId(101), 1, b"x".to_vec())));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    /// Two proposers with disjoint configurations, any delivery order and
    /// arbitrary retries: nobody learns two different values.
    #[test]
    fn dueling_proposers_agree(picks in prop::collection::vec((0usize..64, 0u8..20), 1..400)) {
        let mut net = Net::new(&[(1, b"x", 1, 10..13), (2, b"y", 2, 13..16)]);
        for (i, (pick, action)) in picks.into_iter().enumerate() {
            let now = i as u64;
            match action {
                0 => net.retry(NodeId(1), now),
                1 => net.retry(NodeId(2), now),
                // drop a message now and then
                2 if !net.pending.is_empty() => {
                    let n = net.pending.len();
                    net.pending.remove(pick % n);
                }
                _ if !net.pending.is_empty() => net.step(pick, now),
                _ => {}
            }
        }
        if let Some((_, first)) = net.learned.first() {
            prop_assert!(net.learned.iter().all(|(_, v)| v == first), "{:?}", net.learned);
        }
    }
}
